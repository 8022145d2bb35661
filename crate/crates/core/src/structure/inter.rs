//! Heterogeneous bipartite structure between latent groups.
//!
//! Every edge between two variable groups (image, `y`, `z` and their
//! reconstructions) is realized by one of `N` neural variants that differ
//! only in channel width. The choice is a categorical variable; training
//! relaxes it with Gumbel-softmax and mixes the candidate outputs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Variable groups of the codec graph, in topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeGroup {
    Image,
    Latent,
    HyperLatent,
    HyperLatentHat,
    LatentHat,
    ImageHat,
}

impl NodeGroup {
    pub fn rank(self) -> usize {
        self as usize
    }
}

/// The inter-node edges that carry a width choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeId {
    /// `y | x`, the analysis transform.
    Analysis,
    /// `z | y`, the hyper analysis transform.
    HyperAnalysis,
    /// `ŷ | ẑ`, the hyper synthesis transform.
    HyperSynthesis,
    /// `x̂ | ŷ`, the synthesis transform.
    Synthesis,
    /// The 1×1 network fusing hyperprior and context features into `ŷ` parameters.
    Merge,
}

impl EdgeId {
    pub const ALL: [EdgeId; 5] = [
        EdgeId::Analysis,
        EdgeId::HyperAnalysis,
        EdgeId::HyperSynthesis,
        EdgeId::Synthesis,
        EdgeId::Merge,
    ];

    /// Edges needed by the decoder; their choices travel in the bitstream header.
    pub const GENERATIVE: [EdgeId; 3] = [EdgeId::HyperSynthesis, EdgeId::Synthesis, EdgeId::Merge];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeId::Analysis => "y|x",
            EdgeId::HyperAnalysis => "z|y",
            EdgeId::HyperSynthesis => "y_hat|z_hat",
            EdgeId::Synthesis => "x_hat|y_hat",
            EdgeId::Merge => "merge",
        }
    }

    /// `(source, target)` groups of the edge.
    pub fn endpoints(self) -> (NodeGroup, NodeGroup) {
        match self {
            EdgeId::Analysis => (NodeGroup::Image, NodeGroup::Latent),
            EdgeId::HyperAnalysis => (NodeGroup::Latent, NodeGroup::HyperLatent),
            EdgeId::HyperSynthesis => (NodeGroup::HyperLatentHat, NodeGroup::LatentHat),
            EdgeId::Synthesis => (NodeGroup::LatentHat, NodeGroup::ImageHat),
            EdgeId::Merge => (NodeGroup::HyperLatentHat, NodeGroup::LatentHat),
        }
    }

    pub fn is_generative(self) -> bool {
        Self::GENERATIVE.contains(&self)
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EdgeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EdgeId::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::UnknownEdge(s.to_string()))
    }
}

/// Cost profile of one edge: MACs of each variant for a fixed input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct InterEdgeSpec {
    edge: EdgeId,
    variant_costs: Vec<f64>,
}

impl InterEdgeSpec {
    pub fn new(edge: EdgeId, variant_costs: Vec<f64>) -> Result<Self> {
        if variant_costs.is_empty() {
            return Err(invalid(format!("edge {edge} needs at least one variant")));
        }
        if variant_costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::NonFinite("variant cost"));
        }
        if variant_costs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("variant costs of {edge} must be strictly increasing")));
        }
        Ok(Self { edge, variant_costs })
    }

    pub fn edge(&self) -> EdgeId {
        self.edge
    }

    pub fn num_variants(&self) -> usize {
        self.variant_costs.len()
    }

    pub fn variant_costs(&self) -> &[f64] {
        &self.variant_costs
    }
}

/// Categorical logits per edge and the relaxation temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct InterStructureParams {
    pub logits: BTreeMap<EdgeId, Vec<f64>>,
    pub temperature: f64,
}

impl InterStructureParams {
    pub fn uniform(num_variants: usize, temperature: f64) -> Self {
        let logits = EdgeId::ALL.into_iter().map(|e| (e, vec![0.0; num_variants])).collect();
        Self { logits, temperature }
    }
}

/// One sampled edge variant together with its mixing weights.
#[derive(Clone, Debug, PartialEq)]
pub struct InterChoice {
    pub edge: EdgeId,
    pub index: usize,
    pub weights: Vec<f64>,
}

impl InterChoice {
    pub fn one_hot(edge: EdgeId, index: usize, num_variants: usize) -> Self {
        let mut weights = vec![0.0; num_variants];
        weights[index] = 1.0;
        Self { edge, index, weights }
    }

    pub fn is_hard(&self) -> bool {
        self.weights.iter().enumerate().all(|(i, &w)| w == if i == self.index { 1.0 } else { 0.0 })
    }
}

/// Standard Gumbel draw `-ln(-ln U)` with `U` strictly inside `(0, 1)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Draws a relaxed sample `softmax((logits + g) / τ)` for one edge.
///
/// With `hard` the weights are the one-hot of the argmax; the tensor variant
/// [`gumbel_softmax`] is the differentiable counterpart used in training.
pub fn sample_inter<R: Rng + ?Sized>(
    params: &InterStructureParams,
    edge: EdgeId,
    hard: bool,
    rng: &mut R,
) -> Result<InterChoice> {
    let logits = params.logits.get(&edge).ok_or_else(|| Error::UnknownEdge(edge.to_string()))?;
    if !(params.temperature > 0.0 && params.temperature.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {}", params.temperature)));
    }
    if logits.is_empty() {
        return Err(invalid(format!("edge {edge} has no logits")));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("edge logits"));
    }
    let perturbed: Vec<f64> = logits.iter().map(|l| (l + gumbel(rng)) / params.temperature).collect();
    let weights = softmax(&perturbed);
    let index = argmax(&perturbed);
    if hard {
        Ok(InterChoice::one_hot(edge, index, logits.len()))
    } else {
        Ok(InterChoice { edge, index, weights })
    }
}

/// Gumbel-softmax over the last axis of `logits`.
///
/// With `hard` the forward value is one-hot while the gradient is that of the
/// soft relaxation.
pub fn gumbel_softmax<R: Rng + ?Sized>(logits: &Tensor, temperature: f64, hard: bool, rng: &mut R) -> Result<Tensor> {
    let n = logits.elem_count();
    let noise: Vec<f32> = (0..n).map(|_| gumbel(rng) as f32).collect();
    let noise = Tensor::from_vec(noise, logits.shape(), logits.device())?.to_dtype(logits.dtype())?;
    let soft = candle_nn::ops::softmax(&((logits + noise)? / temperature)?, D::Minus1)?;
    if !hard {
        return Ok(soft);
    }
    let idx = soft.argmax_keepdim(D::Minus1)?;
    let hot = one_hot_like(&soft, &idx)?;
    Ok((&soft + (hot - &soft)?.detach())?)
}

fn one_hot_like(soft: &Tensor, idx: &Tensor) -> Result<Tensor> {
    let n = soft.dim(D::Minus1)?;
    let range = Tensor::arange(0u32, n as u32, soft.device())?;
    let mut shape = vec![1; soft.rank()];
    shape[soft.rank() - 1] = n;
    let range = range.reshape(shape)?;
    Ok(range.broadcast_eq(idx)?.to_dtype(soft.dtype())?)
}

fn check_variants(outputs: &[Tensor], n: usize) -> Result<()> {
    if outputs.len() != n {
        return Err(Error::Shape(format!("expected {n} variant outputs, got {}", outputs.len())));
    }
    let shape = outputs[0].shape();
    if let Some(bad) = outputs.iter().find(|o| o.shape() != shape) {
        return Err(Error::Shape(format!("variant outputs disagree: {:?} vs {:?}", shape, bad.shape())));
    }
    Ok(())
}

/// `Σ_n w_n · out_n`. A hard choice returns the selected output untouched.
pub fn mix_edge_outputs(choice: &InterChoice, outputs: &[Tensor]) -> Result<Tensor> {
    check_variants(outputs, choice.weights.len())?;
    if choice.is_hard() {
        return Ok(outputs[choice.index].clone());
    }
    let mut acc: Option<Tensor> = None;
    for (w, out) in choice.weights.iter().zip(outputs) {
        if *w == 0.0 {
            continue;
        }
        let term = (out * *w)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(outputs[0].zeros_like()?),
    }
}

/// Differentiable mix with weights `[N]`, or `[B, N]` for one mix per batch item.
pub fn mix_with_weights(weights: &Tensor, outputs: &[Tensor]) -> Result<Tensor> {
    let per_sample = weights.rank() == 2;
    check_variants(outputs, weights.dim(weights.rank() - 1)?)?;
    let mut acc: Option<Tensor> = None;
    for (n, out) in outputs.iter().enumerate() {
        let mut shape = vec![1; out.rank()];
        let w = if per_sample {
            shape[0] = weights.dim(0)?;
            weights.narrow(1, n, 1)?
        } else {
            weights.narrow(0, n, 1)?
        };
        let w = w.to_dtype(out.dtype())?.reshape(shape)?;
        let term = out.broadcast_mul(&w)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one variant"))
}

/// Expected MACs of a choice, `Σ_n w_n · cost_n`.
pub fn inter_complexity(choice: &InterChoice, spec: &InterEdgeSpec) -> Result<f64> {
    if choice.edge != spec.edge {
        return Err(invalid(format!("choice for {} priced with spec of {}", choice.edge, spec.edge)));
    }
    if choice.weights.len() != spec.num_variants() {
        return Err(Error::Shape(format!(
            "{} weights for {} variants",
            choice.weights.len(),
            spec.num_variants()
        )));
    }
    Ok(choice.weights.iter().zip(&spec.variant_costs).map(|(w, c)| w * c).sum())
}

/// Linear temperature annealing from 1.0 to 0.2 over `progress ∈ [0, 1]`.
pub fn anneal_temperature(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    1.0 + (0.2 - 1.0) * p
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(logits: Vec<f64>, temperature: f64) -> InterStructureParams {
        let mut map = BTreeMap::new();
        map.insert(EdgeId::Synthesis, logits);
        InterStructureParams { logits: map, temperature }
    }

    #[test]
    fn edge_names_round_trip() {
        for e in EdgeId::ALL {
            assert_eq!(e.name().parse::<EdgeId>().unwrap(), e);
        }
        assert!(matches!("x|q".parse::<EdgeId>(), Err(Error::UnknownEdge(_))));
    }

    #[test]
    fn edges_point_forward() {
        for e in EdgeId::ALL {
            let (s, t) = e.endpoints();
            assert!(s.rank() < t.rank(), "{e}");
        }
    }

    #[test]
    fn uniform_logits_give_uniform_marginals() {
        let p = params(vec![0.0; 3], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mean = [0.0; 3];
        let n = 20_000;
        for _ in 0..n {
            let c = sample_inter(&p, EdgeId::Synthesis, false, &mut rng).unwrap();
            for (m, w) in mean.iter_mut().zip(&c.weights) {
                *m += w / n as f64;
            }
        }
        for m in mean {
            assert!((m - 1.0 / 3.0).abs() < 0.01, "{mean:?}");
        }
    }

    #[test]
    fn dominant_logit_wins_when_cold() {
        let p = params(vec![10.0, 0.0, 0.0], 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let c = sample_inter(&p, EdgeId::Synthesis, true, &mut rng).unwrap();
            assert_eq!(c.index, 0);
            assert!(c.is_hard());
        }
    }

    #[test]
    fn errors_on_bad_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(vec![0.0, f64::NAN], 1.0);
        assert!(matches!(sample_inter(&p, EdgeId::Synthesis, false, &mut rng), Err(Error::NonFinite(_))));
        let p = params(vec![0.0, 1.0], 1.0);
        assert!(matches!(sample_inter(&p, EdgeId::Merge, false, &mut rng), Err(Error::UnknownEdge(_))));
        let p = params(vec![0.0, 1.0], 0.0);
        assert!(sample_inter(&p, EdgeId::Synthesis, false, &mut rng).is_err());
    }

    #[test]
    fn mixing_examples() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[1.5f32, -2.0], &dev).unwrap();
        let b = Tensor::new(&[0.1f32, 7.0], &dev).unwrap();
        let c = Tensor::new(&[3.3f32, 3.3], &dev).unwrap();
        let hot = InterChoice::one_hot(EdgeId::Synthesis, 1, 3);
        let out = mix_edge_outputs(&hot, &[a.clone(), b.clone(), c]).unwrap();
        assert_eq!(out.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());

        let half = InterChoice { edge: EdgeId::Synthesis, index: 0, weights: vec![0.5, 0.5] };
        let out = mix_edge_outputs(&half, &[a.clone(), a.clone()]).unwrap();
        assert_eq!(out.to_vec1::<f32>().unwrap(), a.to_vec1::<f32>().unwrap());

        let quarter = InterChoice { edge: EdgeId::Synthesis, index: 1, weights: vec![0.25, 0.75] };
        let four = Tensor::new(4f32, &dev).unwrap();
        let eight = Tensor::new(8f32, &dev).unwrap();
        let out = mix_edge_outputs(&quarter, &[four, eight]).unwrap();
        assert_eq!(out.to_scalar::<f32>().unwrap(), 7.0);

        assert!(mix_edge_outputs(&quarter, &[a.clone()]).is_err());
        let scalar = Tensor::new(1f32, &dev).unwrap();
        assert!(mix_edge_outputs(&quarter, &[a, scalar]).is_err());
    }

    #[test]
    fn complexity_examples() {
        let spec = InterEdgeSpec::new(EdgeId::Synthesis, vec![10.0, 20.0, 30.0]).unwrap();
        let hot = InterChoice::one_hot(EdgeId::Synthesis, 2, 3);
        assert_eq!(inter_complexity(&hot, &spec).unwrap(), 30.0);
        let uniform = InterChoice { edge: EdgeId::Synthesis, index: 0, weights: vec![1.0 / 3.0; 3] };
        assert!((inter_complexity(&uniform, &spec).unwrap() - 20.0).abs() < 1e-12);
        let two = InterEdgeSpec::new(EdgeId::Synthesis, vec![10.0, 30.0]).unwrap();
        let half = InterChoice { edge: EdgeId::Synthesis, index: 0, weights: vec![0.5, 0.5] };
        assert_eq!(inter_complexity(&half, &two).unwrap(), 20.0);
        assert!(inter_complexity(&hot, &two).is_err());
        assert!(InterEdgeSpec::new(EdgeId::Merge, vec![3.0, 3.0]).is_err());
        assert!(InterEdgeSpec::new(EdgeId::Merge, vec![]).is_err());
    }

    #[test]
    fn hard_tensor_relaxation_is_one_hot_with_soft_gradient() {
        let dev = Device::Cpu;
        let var = candle_core::Var::new(&[0.3f32, -1.0, 2.0], &dev).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = gumbel_softmax(var.as_tensor(), 0.7, true, &mut rng).unwrap();
        let v = w.to_vec1::<f32>().unwrap();
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(v.iter().filter(|&&x| x == 0.0).count(), 2);
        let target = Tensor::new(&[1f32, 2.0, 3.0], &dev).unwrap();
        let grads = (w * target).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(&var).unwrap().to_vec1::<f32>().unwrap();
        assert!(g.iter().any(|x| x.abs() > 1e-4));
    }

    #[test]
    fn temperature_schedule_endpoints() {
        assert_eq!(anneal_temperature(0.0), 1.0);
        assert!((anneal_temperature(1.0) - 0.2).abs() < 1e-12);
        assert!((anneal_temperature(0.5) - 0.6).abs() < 1e-12);
    }
}
