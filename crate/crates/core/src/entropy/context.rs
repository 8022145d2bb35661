//! Autoregressive context path: a masked `K×K` convolution over `ŷ`
//! followed by a three-layer masked 1×1 merge with the hyperprior features.
//!
//! The merge input is `[h_s features | context features]`; the hyperprior
//! channels carry topological index −1 and the merge layers use the
//! inclusive rule on the already strictly-causal context features.

use candle_core::{Device, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::complexity::conv_macs;
use crate::entropy::gaussian::GaussianParams;
use crate::error::{invalid, Error, Result};
use crate::nn::leaky_relu;
use crate::structure::inter::mix_with_weights;
use crate::structure::intra::{masked_conv, DynamicKernel, MaskRule, MaskSet, TopologyField};

const LEAK: f64 = 0.01;

/// Masks of the context path for one topology and spatial size.
#[derive(Clone, Debug)]
pub struct ContextMasks {
    topo: TopologyField,
    context: MaskSet,
    merge: Vec<[MaskSet; 3]>,
}

impl ContextMasks {
    pub fn topology(&self) -> &TopologyField {
        &self.topo
    }
}

#[derive(Clone, Debug)]
pub struct ContextModel {
    latent: usize,
    kernel: usize,
    merge_widths: Vec<usize>,
    ctx_weight: Tensor,
    ctx_bias: Tensor,
    weights: [Tensor; 3],
    biases: [Tensor; 3],
}

impl ContextModel {
    pub fn new(vb: VarBuilder, latent: usize, kernel: usize, merge_widths: &[usize]) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(invalid(format!("context kernel must be odd, got {kernel}")));
        }
        if merge_widths.is_empty() || merge_widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("merge widths {merge_widths:?} must be strictly ascending")));
        }
        let m = latent;
        let mw = *merge_widths.last().unwrap();
        let randn = |fan_in: usize| Init::Randn { mean: 0.0, stdev: (1.0 / fan_in as f64).sqrt() };
        let ctx_weight = vb.get_with_hints((2 * m, m, kernel, kernel), "context.weight", randn(m * kernel * kernel))?;
        let ctx_bias = vb.get_with_hints(2 * m, "context.bias", Init::Const(0.0))?;
        let shapes = [(mw, 4 * m), (mw, mw), (2 * m, mw)];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (i, &(o, c)) in shapes.iter().enumerate() {
            weights.push(vb.get_with_hints((o, c, 1, 1), &format!("merge{i}.weight"), randn(c))?);
            biases.push(vb.get_with_hints(o, &format!("merge{i}.bias"), Init::Const(0.0))?);
        }
        Ok(Self {
            latent,
            kernel,
            merge_widths: merge_widths.to_vec(),
            ctx_weight,
            ctx_bias,
            weights: weights.try_into().unwrap(),
            biases: biases.try_into().unwrap(),
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.latent
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel
    }

    pub fn merge_widths(&self) -> &[usize] {
        &self.merge_widths
    }

    pub fn masks(&self, topo: &TopologyField, device: &Device) -> Result<ContextMasks> {
        let m = self.latent;
        let g = topo.groups();
        if m % g != 0 || self.merge_widths.iter().any(|w| w % g != 0) {
            return Err(Error::Shape(format!("{g} channel groups do not divide the context channels")));
        }
        let context = MaskSet::new(topo, self.kernel, 0, m, MaskRule::Strict, device)?;
        let merge = self
            .merge_widths
            .iter()
            .map(|&w| {
                Ok([
                    MaskSet::new(topo, 1, 2 * m, 2 * m, MaskRule::Inclusive, device)?,
                    MaskSet::new(topo, 1, 0, w, MaskRule::Inclusive, device)?,
                    MaskSet::new(topo, 1, 0, w, MaskRule::Inclusive, device)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ContextMasks { topo: topo.clone(), context, merge })
    }

    fn kernel_for(&self, layer: usize, width: usize, groups: usize) -> Result<DynamicKernel> {
        let m = self.latent;
        let (o, c, aux) = match layer {
            0 => (width, 4 * m, 2 * m),
            1 => (width, width, 0),
            _ => (2 * m, width, 0),
        };
        let w = self.weights[layer].narrow(0, 0, o)?.narrow(1, 0, c)?;
        let b = self.biases[layer].narrow(0, 0, o)?;
        DynamicKernel::new(w, b, groups, aux)
    }

    /// Strictly causal context features `[B, 2M, H, W]` of `ŷ`.
    pub fn context_features(&self, y_hat: &Tensor, masks: &ContextMasks) -> Result<Tensor> {
        let kernel = DynamicKernel::new(self.ctx_weight.clone(), self.ctx_bias.clone(), masks.topo.groups(), 0)?;
        masked_conv(y_hat, &masks.context, &kernel)
    }

    /// Raw merge output `[B, 2M, H, W]` at merge width option `index`.
    pub fn merge_raw(&self, hyper: &Tensor, context: &Tensor, masks: &ContextMasks, index: usize) -> Result<Tensor> {
        let width = *self
            .merge_widths
            .get(index)
            .ok_or_else(|| invalid(format!("merge width index {index} out of range")))?;
        let g = masks.topo.groups();
        let x = Tensor::cat(&[hyper, context], 1)?;
        let layer = &masks.merge[index];
        let x = leaky_relu(&masked_conv(&x, &layer[0], &self.kernel_for(0, width, g)?)?, LEAK)?;
        let x = leaky_relu(&masked_conv(&x, &layer[1], &self.kernel_for(1, width, g)?)?, LEAK)?;
        masked_conv(&x, &layer[2], &self.kernel_for(2, width, g)?)
    }

    /// Gaussian parameters of `ŷ` from hyperprior features and the
    /// currently visible `ŷ`.
    pub fn predict(&self, hyper: &Tensor, y_hat: &Tensor, masks: &ContextMasks, index: usize) -> Result<GaussianParams> {
        let ctx = self.context_features(y_hat, masks)?;
        GaussianParams::from_raw(&self.merge_raw(hyper, &ctx, masks, index)?)
    }

    /// As [`predict`](Self::predict) with the merge variants mixed by `weights: [N]`.
    pub fn predict_mixed(&self, hyper: &Tensor, y_hat: &Tensor, masks: &ContextMasks, weights: &Tensor) -> Result<GaussianParams> {
        let ctx = self.context_features(y_hat, masks)?;
        let raws = (0..self.merge_widths.len())
            .map(|i| self.merge_raw(hyper, &ctx, masks, i))
            .collect::<Result<Vec<_>>>()?;
        GaussianParams::from_raw(&mix_with_weights(weights, &raws)?)
    }

    /// Analytic MACs of the masked context convolution on `h × w` latents.
    pub fn context_macs(&self, h: usize, w: usize) -> u64 {
        conv_macs(h, w, 2 * self.latent, self.latent, self.kernel)
    }

    /// Analytic MACs of the merge network at width option `index`.
    pub fn merge_macs(&self, index: usize, h: usize, w: usize) -> Result<u64> {
        let width = *self
            .merge_widths
            .get(index)
            .ok_or_else(|| invalid(format!("merge width index {index} out of range")))?;
        let m = self.latent;
        Ok(conv_macs(h, w, width, 4 * m, 1) + conv_macs(h, w, width, width, 1) + conv_macs(h, w, 2 * m, width, 1))
    }
}
