//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. Everything here is plain loops over `f64`.
#![allow(dead_code)]

use bncodec::entropy::gaussian::{bin_mass, rate_bits_f64};
use bncodec::entropy::{gaussian_bits, GaussianParams};
use bncodec::structure::intra::{MaskRule, TopologyField};
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A dense `[B, C, H, W]` array.
#[derive(Clone, Debug)]
pub struct Array4 {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Array4 {
    pub fn random<R: Rng>(dims: [usize; 4], rng: &mut R) -> Self {
        let n = dims.iter().product();
        Self { dims, data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        let [_, cc, hh, ww] = self.dims;
        self.data[((b * cc + c) * hh + h) * ww + w]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let [_, cc, hh, ww] = self.dims;
        self.data[((b * cc + c) * hh + h) * ww + w] = v;
    }

    pub fn tensor(&self) -> Tensor {
        let v: Vec<f32> = self.data.iter().map(|&x| x as f32).collect();
        Tensor::from_vec(v, self.dims.to_vec(), &Device::Cpu).unwrap()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.dims4().unwrap();
        let data = t.flatten_all().unwrap().to_dtype(candle_core::DType::F64).unwrap().to_vec1().unwrap();
        Self { dims: [d.0, d.1, d.2, d.3], data }
    }
}

pub fn vector(values: &[f64]) -> Tensor {
    let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
    Tensor::from_vec(v, values.len(), &Device::Cpu).unwrap()
}

/// Same-padded stride-1 convolution that multiplies every tap, padding
/// included, and counts the multiplies.
pub fn counting_conv(x: &Array4, weight: &Array4, bias: &[f64]) -> (Array4, u64) {
    let [b, c, h, w] = x.dims;
    let [o, ci, k, _] = weight.dims;
    assert_eq!(c, ci);
    let p = (k / 2) as isize;
    let mut out = Array4::zeros([b, o, h, w]);
    let mut multiplies = 0u64;
    for n in 0..b {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - p;
                                let sx = xx as isize + kx as isize - p;
                                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                                let v = if inside { x.at(n, ic, sy as usize, sx as usize) } else { 0.0 };
                                acc += weight.at(oc, ic, ky, kx) * v;
                                multiplies += 1;
                            }
                        }
                    }
                    out.set(n, oc, y, xx, acc);
                }
            }
        }
    }
    (out, multiplies)
}

/// Topological index of input channel `c` at `(h, w)`: −1 for the `aux`
/// leading channels, otherwise the index of group `(c − aux) % groups`.
pub fn input_index(topo: &TopologyField, aux: usize, c: usize, h: usize, w: usize) -> i64 {
    if c < aux {
        -1
    } else {
        topo.get((c - aux) % topo.groups(), h, w) as i64
    }
}

/// Decodes partite by partite: before pass `s`, every input node not yet
/// available under `rule` is zeroed, a plain convolution runs, and only the
/// outputs of pass-`s` nodes are kept.
pub fn sequential_masked_conv(x: &Array4, weight: &Array4, bias: &[f64], topo: &TopologyField, aux: usize, rule: MaskRule) -> Array4 {
    let [b, c, h, w] = x.dims;
    let o = weight.dims[0];
    let groups = topo.groups();
    let mut out = Array4::zeros([b, o, h, w]);
    for s in topo.distinct() {
        let mut visible = x.clone();
        for n in 0..b {
            for ic in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        if !rule.keeps(input_index(topo, aux, ic, y, xx), s as i64) {
                            visible.set(n, ic, y, xx, 0.0);
                        }
                    }
                }
            }
        }
        let (full, _) = counting_conv(&visible, weight, bias);
        for n in 0..b {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        if topo.get(oc % groups, y, xx) == s {
                            out.set(n, oc, y, xx, full.at(n, oc, y, xx));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Arbitrary (not tile-periodic) field with every index drawn uniformly.
pub fn random_field<R: Rng>(stages: usize, groups: usize, h: usize, w: usize, rng: &mut R) -> TopologyField {
    let indices = (0..groups * h * w).map(|_| rng.random_range(0..stages as u32)).collect();
    TopologyField::from_indices(stages, groups, h, w, indices).unwrap()
}

/// 2×2-periodic field from a uniformly drawn tile.
pub fn random_tiled_field<R: Rng>(stages: usize, groups: usize, h: usize, w: usize, rng: &mut R) -> TopologyField {
    let tile: Vec<u8> = (0..groups * 4).map(|_| rng.random_range(0..stages as u8)).collect();
    TopologyField::from_tile(stages, &tile, h, w).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `log(1/M Σ f(k_i))` for outcomes `k`.
pub fn multi_sample_bound(f: &[f64], ks: &[usize]) -> f64 {
    (ks.iter().map(|&k| f[k]).sum::<f64>() / ks.len() as f64).ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Exact gradient w.r.t. the logits of `E_{k_1..k_M ~ softmax(θ)} [bound]`,
/// by enumerating all `N^M` outcomes.
pub fn enumerated_bound_gradient(theta: &[f64], f: &[f64], m: usize) -> Vec<f64> {
    let n = theta.len();
    let q = softmax(theta);
    let mut grad = vec![0.0; n];
    let total = n.pow(m as u32);
    for code in 0..total {
        let mut ks = Vec::with_capacity(m);
        let mut c = code;
        for _ in 0..m {
            ks.push(c % n);
            c /= n;
        }
        let p: f64 = ks.iter().map(|&k| q[k]).product();
        let value = multi_sample_bound(f, &ks);
        for j in 0..n {
            let score: f64 = ks.iter().map(|&k| if k == j { 1.0 } else { 0.0 } - q[j]).sum();
            grad[j] += p * value * score;
        }
    }
    grad
}

/// Mean of the VIMCO score-function estimate over `draws` batches of `m`
/// samples from `softmax(theta)`.
pub fn vimco_gradient(theta: &[f64], f: &[f64], m: usize, draws: usize, seed: u64) -> Vec<f64> {
    let q = softmax(theta);
    use rand::distr::{weighted::WeightedIndex, Distribution};
    let dist = WeightedIndex::new(&q).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad = vec![0.0; theta.len()];
    for _ in 0..draws {
        let ks: Vec<usize> = (0..m).map(|_| dist.sample(&mut rng)).collect();
        let ll: Vec<f64> = ks.iter().map(|&k| f[k].ln()).collect();
        let est = bncodec::structure::intra::vimco(&ll).unwrap();
        for (i, &k) in ks.iter().enumerate() {
            for (j, g) in grad.iter_mut().enumerate() {
                *g += est.signals[i] * (if j == k { 1.0 } else { 0.0 } - q[j]);
            }
        }
    }
    grad.iter().map(|g| g / draws as f64).collect()
}

/// Outcome of perturbing every input node of the context path once.
#[derive(Clone, Debug, Default)]
pub struct CausalityAudit {
    /// `(u, v)` pairs where `v` reacted to `u` although `T(u) ≥ T(v)`.
    pub violations: Vec<(usize, usize)>,
    /// Pairs with `T(u) < T(v)` that reacted, proving the probe is live.
    pub live_pairs: usize,
    pub inputs: usize,
}

/// Perturbs each `ŷ` element in turn and records which mean or scale
/// outputs of `model.context` move by more than `tol`.
pub fn audit_context(
    model: &bncodec::entropy::ContextModel,
    topo: &TopologyField,
    hyper: &Tensor,
    y: &Tensor,
    merge: usize,
    tol: f64,
) -> CausalityAudit {
    let masks = model.masks(topo, &Device::Cpu).unwrap();
    let params = |t: &Tensor| {
        let p = model.predict(hyper, t, &masks, merge).unwrap();
        let m: Vec<f32> = p.mean.flatten_all().unwrap().to_vec1().unwrap();
        let s: Vec<f32> = p.scale.flatten_all().unwrap().to_vec1().unwrap();
        (m, s)
    };
    let (m0, s0) = params(y);
    let (c, h, w) = (model.latent_channels(), topo.height(), topo.width());
    let index = |i: usize| topo.of_channel(i / (h * w), (i / w) % h, i % w);
    let base: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
    let mut audit = CausalityAudit { inputs: base.len(), ..Default::default() };
    for u in 0..base.len() {
        let mut v = base.clone();
        v[u] += 1.0;
        let (m1, s1) = params(&Tensor::from_vec(v, (1, c, h, w), &Device::Cpu).unwrap());
        for out in 0..base.len() {
            let moved = (m1[out] - m0[out]).abs() as f64 > tol || (s1[out] - s0[out]).abs() as f64 > tol;
            if !moved {
                continue;
            }
            if index(u) < index(out) {
                audit.live_pairs += 1;
            } else {
                audit.violations.push((u, out));
            }
        }
    }
    audit
}

/// Nodes `(value, mean, scale)` whose bin mass stays well above the floor.
pub fn random_nodes(n: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.random_range(-6i32..=6) as f64;
        let mean = rng.random_range(-6.0..6.0);
        let scale = rng.random_range(0.15..4.0);
        if bin_mass(v, mean, scale) > 1e-6 && (v - mean).abs() > 1e-3 {
            out.push((v, mean, scale));
        }
    }
    out
}

/// Autograd of the rate against central differences of the f64 rate, per
/// node and parameter; returns the largest relative error.
pub fn worst_relative_error(nodes: &[(f64, f64, f64)]) -> f64 {
    let dev = Device::Cpu;
    let values: Vec<f64> = nodes.iter().map(|n| n.0).collect();
    let means: Vec<f64> = nodes.iter().map(|n| n.1).collect();
    let scales: Vec<f64> = nodes.iter().map(|n| n.2).collect();
    let mean = Var::from_vec(means.clone(), nodes.len(), &dev).unwrap();
    let scale = Var::from_vec(scales.clone(), nodes.len(), &dev).unwrap();
    let params = GaussianParams::new(mean.as_tensor().clone(), scale.as_tensor().clone()).unwrap();
    let vals = Tensor::from_vec(values.clone(), nodes.len(), &dev).unwrap();
    let bits = gaussian_bits(&vals, &params).unwrap();
    assert_eq!(bits.dtype(), DType::F64);
    let grads = bits.backward().unwrap();
    let g_mean: Vec<f64> = grads.get(&mean).unwrap().to_vec1().unwrap();
    let g_scale: Vec<f64> = grads.get(&scale).unwrap().to_vec1().unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..nodes.len() {
        let one = |m: f64, s: f64| rate_bits_f64(&[values[i]], &[m], &[s]).unwrap();
        let fd_mean = (one(means[i] + h, scales[i]) - one(means[i] - h, scales[i])) / (2.0 * h);
        let fd_scale = (one(means[i], scales[i] + h) - one(means[i], scales[i] - h)) / (2.0 * h);
        for (a, f) in [(g_mean[i], fd_mean), (g_scale[i], fd_scale)] {
            worst = worst.max((a - f).abs() / f.abs().max(1e-3));
        }
    }
    worst
}

/// One compress/decompress cycle through the serialized bytes.
#[derive(Clone, Debug)]
pub struct RoundTrip {
    pub exact: bool,
    pub estimated_bits: f64,
    /// Entropy-coded bits of both payloads without their CRC trailers.
    pub coded_bits: f64,
    pub total_bytes: usize,
    pub stages: usize,
    pub invocations: usize,
    pub decoded_stages: usize,
    pub projected: bool,
}

impl RoundTrip {
    pub fn rate_ok(&self) -> bool {
        (self.coded_bits - self.estimated_bits).abs() <= 0.05 * self.estimated_bits + 64.0
    }
}

pub fn round_trip<R: Rng>(
    codec: &bncodec::codec::Codec,
    x: &Tensor,
    controller: &bncodec::ControllerState,
    rng: &mut R,
) -> bncodec::Result<RoundTrip> {
    use bncodec::codec::{count_stage_invocations, Bitstream};
    let (bs, report) = codec.compress_with_report(x, controller, rng)?;
    let bytes = bs.to_bytes();
    let parsed = Bitstream::from_bytes(&bytes, codec.model().groups())?;
    let decoded = codec.decompress(&parsed)?;
    Ok(RoundTrip {
        exact: decoded.latents == report.latents && parsed == bs,
        estimated_bits: report.estimated_bits(),
        coded_bits: ((bs.payload_z.len() + bs.payload_y.len() - 8) * 8) as f64,
        total_bytes: bytes.len(),
        stages: report.stages,
        invocations: count_stage_invocations(&parsed)?,
        decoded_stages: decoded.trace.decoded.len(),
        projected: report.projected,
    })
}
