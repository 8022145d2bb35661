use crate::error::{invalid, Error, Result};
use crate::structure::intra::TopologyField;

/// `M ≥ 2` sampled topologies with their log-likelihoods `ℓ_i`.
#[derive(Clone, Debug)]
pub struct MonteCarloBatch {
    pub samples: Vec<TopologyField>,
    pub log_likelihoods: Vec<f64>,
}

/// Multi-sample bound and per-sample learning signals.
#[derive(Clone, Debug, PartialEq)]
pub struct VimcoEstimate {
    /// `log(1/M Σ exp ℓ_i)`.
    pub bound: f64,
    /// `bound − log(1/M (Σ_{j≠i} exp ℓ_j + exp mean_{j≠i} ℓ_j))`, the
    /// coefficient of `∇ log q(G^i)` in the score-function term.
    pub signals: Vec<f64>,
    /// Normalized importance weights `softmax(ℓ)`, the coefficients of `∇ℓ_i`.
    pub weights: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn vimco(log_likelihoods: &[f64]) -> Result<VimcoEstimate> {
    let m = log_likelihoods.len();
    if m < 2 {
        return Err(invalid(format!("VIMCO needs at least 2 samples, got {m}")));
    }
    if log_likelihoods.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("sample log-likelihood"));
    }
    let ln_m = (m as f64).ln();
    let total = log_sum_exp(log_likelihoods.iter().copied());
    let bound = total - ln_m;
    let sum: f64 = log_likelihoods.iter().sum();
    let signals = (0..m)
        .map(|i| {
            let loo_mean = (sum - log_likelihoods[i]) / (m - 1) as f64;
            let others = log_likelihoods
                .iter()
                .enumerate()
                .map(|(j, &l)| if j == i { loo_mean } else { l });
            bound - (log_sum_exp(others) - ln_m)
        })
        .collect();
    let weights = log_likelihoods.iter().map(|l| (l - total).exp()).collect();
    Ok(VimcoEstimate { bound, signals, weights })
}

pub fn vimco_objective(batch: &MonteCarloBatch) -> Result<VimcoEstimate> {
    if batch.samples.len() != batch.log_likelihoods.len() {
        return Err(Error::Shape(format!(
            "{} samples with {} log-likelihoods",
            batch.samples.len(),
            batch.log_likelihoods.len()
        )));
    }
    vimco(&batch.log_likelihoods)
}
