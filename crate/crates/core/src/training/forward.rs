//! Differentiable forward pass of the codec under a (possibly relaxed)
//! structure.

use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::Rng;

use crate::entropy::{gaussian_likelihood, quantize, ContextMasks, QuantMode};
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::nn::round_ste;
use crate::structure::intra::vimco;
use crate::structure::{EdgeId, StructureSample, TopologyField};
use crate::transforms::SlimmableTransform;

/// How one edge is realized in a forward pass.
#[derive(Clone, Debug)]
pub enum Select {
    Index(usize),
    /// Weights `[N]` or per-image `[B, N]` over all variants.
    Mix(Tensor),
}

/// A [`Select`] per inter edge.
#[derive(Clone, Debug)]
pub struct EdgeSelection(pub BTreeMap<EdgeId, Select>);

impl EdgeSelection {
    pub fn hard(structure: &StructureSample) -> Self {
        Self(EdgeId::ALL.into_iter().map(|e| (e, Select::Index(structure.choice(e)))).collect())
    }

    pub fn uniform(index: usize) -> Self {
        Self(EdgeId::ALL.into_iter().map(|e| (e, Select::Index(index))).collect())
    }

    pub fn get(&self, edge: EdgeId) -> Result<&Select> {
        self.0.get(&edge).ok_or_else(|| invalid(format!("no selection for edge {edge}")))
    }
}

fn run(t: &SlimmableTransform, x: &Tensor, sel: &Select) -> Result<Tensor> {
    match sel {
        Select::Index(i) => t.forward(x, *i),
        Select::Mix(w) => t.forward_mixed(x, w),
    }
}

/// Encoder-side tensors of one batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `y + U(−½, ½)`, the value whose likelihood is the rate.
    pub y_noisy: Tensor,
    /// Straight-through `round(y)`, the context and synthesis input.
    pub y_ste: Tensor,
    /// Hyperprior features `[B, 2M, h, w]`.
    pub hyper: Tensor,
    /// Bits of `ẑ` per image, `[B]`.
    pub bits_z: Tensor,
}

pub fn encode<R: Rng + ?Sized>(model: &Model, x: &Tensor, sel: &EdgeSelection, rng: &mut R) -> Result<Encoded> {
    let y = run(&model.analysis, x, sel.get(EdgeId::Analysis)?)?;
    let z = run(&model.hyper_analysis, &y, sel.get(EdgeId::HyperAnalysis)?)?;
    let bits_z = per_image_bits(&model.prior.likelihood(&quantize(&z, QuantMode::Noise, rng)?)?)?;
    let hyper = run(&model.hyper_synthesis, &round_ste(&z)?, sel.get(EdgeId::HyperSynthesis)?)?;
    Ok(Encoded { y_noisy: quantize(&y, QuantMode::Noise, rng)?, y_ste: round_ste(&y)?, hyper, bits_z })
}

/// `−Σ log2 p` over all but the batch axis, `[B]`.
pub fn per_image_bits(likelihood: &Tensor) -> Result<Tensor> {
    Ok((likelihood.log()?.flatten_from(1)?.sum(1)? * (-1.0 / std::f64::consts::LN_2))?)
}

/// Bits of `ŷ` per image, `[B]`, under the context model.
pub fn bits_y(model: &Model, enc: &Encoded, masks: &ContextMasks, merge: &Select) -> Result<Tensor> {
    let params = match merge {
        Select::Index(i) => model.context.predict(&enc.hyper, &enc.y_ste, masks, *i)?,
        Select::Mix(w) => model.context.predict_mixed(&enc.hyper, &enc.y_ste, masks, w)?,
    };
    per_image_bits(&gaussian_likelihood(&enc.y_noisy, &params)?)
}

pub fn synthesize(model: &Model, y_hat: &Tensor, sel: &EdgeSelection) -> Result<Tensor> {
    run(&model.synthesis, y_hat, sel.get(EdgeId::Synthesis)?)
}

/// Rate of `ŷ` averaged over several topologies by their VIMCO weights.
pub struct TopologyRate {
    /// `Σ_m w_m · bits_m`, per image `[B]`.
    pub bits: Tensor,
    /// Score-function surrogate for the generator, zero without `log_q`.
    pub surrogate: Tensor,
}

/// Prices `ŷ` under each tile and combines the samples with VIMCO. The
/// per-sample log-likelihood is the batch-mean bits in nats, and the
/// surrogate is normalized per pixel of an `pixels`-pixel image.
pub fn topology_rate(
    model: &Model,
    enc: &Encoded,
    merge: &Select,
    tiles: &[Vec<u8>],
    log_q: Option<&Tensor>,
    pixels: usize,
) -> Result<TopologyRate> {
    let (_, _, lh, lw) = enc.y_ste.dims4()?;
    let dev = model.device();
    let mut samples = Vec::with_capacity(tiles.len());
    for tile in tiles {
        let topo = TopologyField::from_tile(model.stages(), tile, lh, lw)?;
        let masks = model.context.masks(&topo, dev)?;
        samples.push(bits_y(model, enc, &masks, merge)?);
    }
    let ll = samples
        .iter()
        .map(|t| Ok(-t.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()? * std::f64::consts::LN_2))
        .collect::<Result<Vec<_>>>()?;
    let est = vimco(&ll)?;
    let mut bits: Option<Tensor> = None;
    for (t, &w) in samples.iter().zip(&est.weights) {
        let term = (t * w)?;
        bits = Some(match bits {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let bits = bits.ok_or_else(|| invalid("no topology samples"))?;
    let surrogate = match log_q {
        Some(lq) => {
            let signals: Vec<f32> = est.signals.iter().map(|&s| s as f32).collect();
            let signals = Tensor::from_vec(signals, tiles.len(), dev)?;
            ((lq * signals)?.sum_all()? * (-1.0 / (pixels as f64 * std::f64::consts::LN_2)))?
        }
        None => Tensor::new(0f32, dev)?,
    };
    Ok(TopologyRate { bits, surrogate })
}

/// A tile with every cell drawn uniformly from `0..stages`.
pub fn random_tile<R: Rng + ?Sized>(stages: usize, groups: usize, rng: &mut R) -> Vec<u8> {
    (0..groups * 4).map(|_| rng.random_range(0..stages) as u8).collect()
}
