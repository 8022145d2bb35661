//! Slimmable analysis and synthesis transforms.
//!
//! Every layer stores weights for its widest configuration. A narrower
//! variant runs on the leading `width` output and input channels of the
//! same tensors, so all variants of one transform share parameters.

use candle_core::Tensor;
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::complexity::{conv_macs, ConvShape};
use crate::error::{invalid, Error, Result};
use crate::nn::{conv2d, gdn, pixel_shuffle};
use crate::structure::inter::mix_with_weights;
use crate::structure::EdgeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformRole {
    Analysis,
    HyperAnalysis,
    HyperSynthesis,
    Synthesis,
}

impl TransformRole {
    pub fn edge(self) -> EdgeId {
        match self {
            TransformRole::Analysis => EdgeId::Analysis,
            TransformRole::HyperAnalysis => EdgeId::HyperAnalysis,
            TransformRole::HyperSynthesis => EdgeId::HyperSynthesis,
            TransformRole::Synthesis => EdgeId::Synthesis,
        }
    }

    fn name(self) -> &'static str {
        match self {
            TransformRole::Analysis => "g_a",
            TransformRole::HyperAnalysis => "h_a",
            TransformRole::HyperSynthesis => "h_s",
            TransformRole::Synthesis => "g_s",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Width {
    Fixed(usize),
    Slim,
}

impl Width {
    fn resolve(self, width: usize) -> usize {
        match self {
            Width::Fixed(n) => n,
            Width::Slim => width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Gdn,
    Igdn,
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug)]
struct LayerSpec {
    input: Width,
    output: Width,
    kernel: usize,
    stride: usize,
    upsample: bool,
    act: Activation,
}

#[derive(Clone, Debug)]
struct Layer {
    spec: LayerSpec,
    weight: Tensor,
    bias: Tensor,
    norm: Option<(Tensor, Tensor)>,
}

/// One of `g_a`, `h_a`, `h_s`, `g_s` with switchable middle-layer width.
#[derive(Clone, Debug)]
pub struct SlimmableTransform {
    role: TransformRole,
    widths: Vec<usize>,
    latent_channels: usize,
    layers: Vec<Layer>,
}

fn conv(input: Width, output: Width, kernel: usize, stride: usize, act: Activation) -> LayerSpec {
    LayerSpec { input, output, kernel, stride, upsample: false, act }
}

fn up(input: Width, output: Width, act: Activation) -> LayerSpec {
    LayerSpec { input, output, kernel: 3, stride: 1, upsample: true, act }
}

fn layer_specs(role: TransformRole, m: usize, normalize: bool) -> Vec<LayerSpec> {
    use Activation::*;
    use Width::*;
    let (down_act, up_act) = if normalize { (Gdn, Igdn) } else { (Relu, Relu) };
    match role {
        TransformRole::Analysis => vec![
            conv(Fixed(3), Slim, 5, 2, down_act),
            conv(Slim, Slim, 5, 2, down_act),
            conv(Slim, Slim, 5, 2, down_act),
            conv(Slim, Fixed(m), 5, 2, Identity),
        ],
        TransformRole::Synthesis => vec![
            up(Fixed(m), Slim, up_act),
            up(Slim, Slim, up_act),
            up(Slim, Slim, up_act),
            up(Slim, Fixed(3), Identity),
        ],
        TransformRole::HyperAnalysis => vec![
            conv(Fixed(m), Slim, 3, 1, down_act),
            conv(Slim, Slim, 5, 2, down_act),
            conv(Slim, Fixed(m), 5, 2, Identity),
        ],
        TransformRole::HyperSynthesis => vec![
            up(Fixed(m), Slim, up_act),
            up(Slim, Slim, up_act),
            conv(Slim, Fixed(2 * m), 3, 1, Identity),
        ],
    }
}

impl SlimmableTransform {
    pub fn new(
        vb: VarBuilder,
        role: TransformRole,
        widths: &[usize],
        latent_channels: usize,
        normalize: bool,
    ) -> Result<Self> {
        if widths.is_empty() || widths.windows(2).any(|w| w[0] >= w[1]) || widths[0] == 0 {
            return Err(invalid(format!("width options {widths:?} must be positive and strictly ascending")));
        }
        let max = *widths.last().unwrap();
        let mut layers = Vec::new();
        for (i, spec) in layer_specs(role, latent_channels, normalize).into_iter().enumerate() {
            let vb = vb.pp(format!("layer{i}"));
            let cin = spec.input.resolve(max);
            let mut cout = spec.output.resolve(max);
            if spec.upsample {
                cout *= 4;
            }
            let fan_in = (cin * spec.kernel * spec.kernel) as f64;
            let weight = vb.get_with_hints(
                (cout, cin, spec.kernel, spec.kernel),
                "weight",
                Init::Randn { mean: 0.0, stdev: (1.0 / fan_in).sqrt() },
            )?;
            let bias = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
            let norm = match spec.act {
                Activation::Gdn | Activation::Igdn => {
                    let c = spec.output.resolve(max);
                    let beta = vb.get_with_hints(c, "beta", Init::Const(1.0))?;
                    let gamma = vb.get_with_hints((c, c), "gamma", Init::Const(0.001))?;
                    Some((beta, gamma))
                }
                _ => None,
            };
            layers.push(Layer { spec, weight, bias, norm });
        }
        Ok(Self { role, widths: widths.to_vec(), latent_channels, layers })
    }

    pub fn role(&self) -> TransformRole {
        self.role
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_variants(&self) -> usize {
        self.widths.len()
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    /// Total spatial down-sampling factor (analysis side) or up-sampling factor.
    pub fn scale(&self) -> usize {
        self.layers.iter().map(|l| if l.spec.upsample { 2 } else { l.spec.stride }).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().unwrap().spec.output.resolve(0)
    }

    fn check_index(&self, index: usize) -> Result<usize> {
        self.widths.get(index).copied().ok_or_else(|| {
            invalid(format!("{} has {} width options, index {index} requested", self.role.name(), self.widths.len()))
        })
    }

    fn downsamples(&self) -> bool {
        matches!(self.role, TransformRole::Analysis | TransformRole::HyperAnalysis)
    }

    /// Runs the layer stack at width option `index`.
    pub fn forward(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        let width = self.check_index(index)?;
        let (_, _, h, w) = x.dims4()?;
        if self.downsamples() && (h % self.scale() != 0 || w % self.scale() != 0) {
            return Err(Error::Shape(format!(
                "{} needs spatial size divisible by {}, got {h}x{w}",
                self.role.name(),
                self.scale()
            )));
        }
        let mut x = x.clone();
        for layer in &self.layers {
            let spec = layer.spec;
            let cin = spec.input.resolve(width);
            let c = spec.output.resolve(width);
            let cout = if spec.upsample { 4 * c } else { c };
            let weight = layer.weight.narrow(0, 0, cout)?.narrow(1, 0, cin)?;
            let bias = layer.bias.narrow(0, 0, cout)?;
            x = conv2d(&x, &weight, Some(&bias), spec.stride)?;
            if spec.upsample {
                x = pixel_shuffle(&x)?;
            }
            x = match spec.act {
                Activation::Identity => x,
                Activation::Relu => x.relu()?,
                Activation::Gdn | Activation::Igdn => {
                    let (beta, gamma) = layer.norm.as_ref().expect("normalized layer");
                    let beta = (beta.narrow(0, 0, c)?.abs()? + 1e-6)?;
                    let eye = (Tensor::eye(c, gamma.dtype(), gamma.device())? * 0.099)?;
                    let gamma = (gamma.narrow(0, 0, c)?.narrow(1, 0, c)? + eye)?.abs()?;
                    gdn(&x, &beta, &gamma, spec.act == Activation::Igdn)?
                }
            };
        }
        Ok(x)
    }

    /// `Σ_n w_n · forward(x, n)` for a weight vector `[N]`.
    pub fn forward_mixed(&self, x: &Tensor, weights: &Tensor) -> Result<Tensor> {
        let outputs = (0..self.widths.len()).map(|n| self.forward(x, n)).collect::<Result<Vec<_>>>()?;
        mix_with_weights(weights, &outputs)
    }

    /// Convolution shapes executed by `forward(_, index)` on an `h × w` input.
    /// Normalization layers appear as 1×1 convolutions over their channels.
    pub fn layer_shapes(&self, index: usize, h: usize, w: usize) -> Result<Vec<ConvShape>> {
        let width = self.check_index(index)?;
        let (mut h, mut w) = (h, w);
        let mut shapes = Vec::new();
        for layer in &self.layers {
            let spec = layer.spec;
            let cin = spec.input.resolve(width);
            let c = spec.output.resolve(width);
            let pad = spec.kernel / 2;
            h = (h + 2 * pad - spec.kernel) / spec.stride + 1;
            w = (w + 2 * pad - spec.kernel) / spec.stride + 1;
            let cout = if spec.upsample { 4 * c } else { c };
            shapes.push(ConvShape { h_out: h, w_out: w, c_out: cout, c_in: cin, kernel: spec.kernel });
            if spec.upsample {
                h *= 2;
                w *= 2;
            }
            if layer.norm.is_some() {
                shapes.push(ConvShape { h_out: h, w_out: w, c_out: c, c_in: c, kernel: 1 });
            }
        }
        Ok(shapes)
    }
}

/// Analytic MACs of `forward(_, index)` on an `h × w` input.
pub fn transform_macs(transform: &SlimmableTransform, index: usize, h: usize, w: usize) -> Result<u64> {
    Ok(transform
        .layer_shapes(index, h, w)?
        .iter()
        .map(|s| conv_macs(s.h_out, s.w_out, s.c_out, s.c_in, s.kernel))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::count_macs;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    const WIDTHS: [usize; 5] = [8, 12, 16, 24, 32];

    fn build(role: TransformRole) -> (VarMap, SlimmableTransform) {
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DType::F32, &Device::Cpu);
        let t = SlimmableTransform::new(vb, role, &WIDTHS, 16, true).unwrap();
        (map, t)
    }

    fn input(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::randn(0f32, 1.0, (1, c, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn output_shape_independent_of_width() {
        let (_m, ga) = build(TransformRole::Analysis);
        let (_m2, gs) = build(TransformRole::Synthesis);
        let x = input(3, 32, 48);
        for i in 0..WIDTHS.len() {
            let y = ga.forward(&x, i).unwrap();
            assert_eq!(y.dims(), &[1, 16, 2, 3]);
            let xr = gs.forward(&y, i).unwrap();
            assert_eq!(xr.dims(), &[1, 3, 32, 48]);
        }
        let zero = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(ga.forward(&zero, 0).unwrap().dims(), ga.forward(&zero, 4).unwrap().dims());
    }

    #[test]
    fn hyper_pair_shapes() {
        let (_m, ha) = build(TransformRole::HyperAnalysis);
        let (_m2, hs) = build(TransformRole::HyperSynthesis);
        let y = input(16, 8, 4);
        let z = ha.forward(&y, 2).unwrap();
        assert_eq!(z.dims(), &[1, 16, 2, 1]);
        assert_eq!(hs.forward(&z, 1).unwrap().dims(), &[1, 32, 8, 4]);
        assert!(ha.forward(&input(16, 6, 4), 0).is_err());
    }

    #[test]
    fn rejects_bad_index_and_size() {
        let (_m, ga) = build(TransformRole::Analysis);
        assert!(ga.forward(&input(3, 16, 16), 5).is_err());
        assert!(ga.forward(&input(3, 24, 16), 0).is_err());
    }

    #[test]
    fn narrow_variant_ignores_weights_outside_prefix() {
        let (mut map, ga) = build(TransformRole::Analysis);
        let x = input(3, 16, 16);
        let before = ga.forward(&x, 0).unwrap();
        let wide_before = ga.forward(&x, 4).unwrap();
        let layer1 = "layer1.weight";
        let w = map.data().lock().unwrap().get(layer1).unwrap().as_tensor().clone();
        let mut v: Vec<f32> = w.flatten_all().unwrap().to_vec1().unwrap();
        let (o, i, k, _) = w.dims4().unwrap();
        for oc in 0..o {
            for ic in 0..i {
                if oc >= 8 || ic >= 8 {
                    for t in 0..k * k {
                        v[(oc * i + ic) * k * k + t] = 100.0;
                    }
                }
            }
        }
        map.set_one(layer1, Tensor::from_vec(v, w.shape(), &Device::Cpu).unwrap()).unwrap();
        let after = ga.forward(&x, 0).unwrap();
        let diff = (before - after).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
        let wide = ga.forward(&x, 4).unwrap();
        let moved = (wide - wide_before).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(moved > 1e-3);
    }

    #[test]
    fn analytic_macs_match_counter() {
        for role in [
            TransformRole::Analysis,
            TransformRole::HyperAnalysis,
            TransformRole::HyperSynthesis,
            TransformRole::Synthesis,
        ] {
            let (_m, t) = build(role);
            let (c, h, w) = match role {
                TransformRole::Analysis => (3, 32, 16),
                TransformRole::HyperAnalysis => (16, 8, 4),
                _ => (16, 2, 3),
            };
            let x = input(c, h, w);
            let mut prev = 0;
            for i in 0..WIDTHS.len() {
                let (_, counted) = count_macs(|| t.forward(&x, i).unwrap());
                let analytic = transform_macs(&t, i, h, w).unwrap();
                assert_eq!(counted, analytic, "{role:?} variant {i}");
                assert!(analytic > prev);
                prev = analytic;
            }
        }
    }

    #[test]
    fn mixing_one_hot_selects_variant() {
        let (_m, gs) = build(TransformRole::Synthesis);
        let y = input(16, 2, 2);
        let w = Tensor::new(&[0f32, 0.0, 1.0, 0.0, 0.0], &Device::Cpu).unwrap();
        let mixed = gs.forward_mixed(&y, &w).unwrap();
        let direct = gs.forward(&y, 2).unwrap();
        let diff = (mixed - direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-6);
    }
}
