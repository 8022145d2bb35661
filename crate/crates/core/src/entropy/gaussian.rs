use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{normal_cdf, softplus};

/// Smallest admissible scale.
pub const SCALE_MIN: f64 = 0.11;
/// Floor on modeled bin mass used in rate terms.
pub const LIKELIHOOD_MIN: f64 = 1e-9;

/// Per-node mean and scale of the conditional Gaussian over `ŷ`.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub scale: Tensor,
}

impl GaussianParams {
    pub fn new(mean: Tensor, scale: Tensor) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(Error::Shape(format!("mean {:?} vs scale {:?}", mean.dims(), scale.dims())));
        }
        let scale = scale.maximum(SCALE_MIN)?;
        Ok(Self { mean, scale })
    }

    /// Splits raw network output `[B, 2M, H, W]` into mean and a clamped
    /// softplus scale.
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let c2 = raw.dim(1)?;
        if c2 % 2 != 0 {
            return Err(Error::Shape(format!("raw parameter tensor has odd channel count {c2}")));
        }
        let m = c2 / 2;
        let mean = raw.narrow(1, 0, m)?;
        let scale = softplus(&raw.narrow(1, m, m)?)?;
        Self::new(mean, scale)
    }
}

/// Integer-bin mass `Φ((v+½−μ)/σ) − Φ((v−½−μ)/σ)`, floored at
/// [`LIKELIHOOD_MIN`]. Evaluated on the side of the mean where both CDF
/// values are small, which keeps precision in the tails.
pub fn gaussian_likelihood(values: &Tensor, params: &GaussianParams) -> Result<Tensor> {
    let dist = (values - &params.mean)?.abs()?;
    let upper = normal_cdf(&((dist.neg()? + 0.5)? / &params.scale)?)?;
    let lower = normal_cdf(&((dist.neg()? - 0.5)? / &params.scale)?)?;
    Ok((upper - lower)?.maximum(LIKELIHOOD_MIN)?)
}

/// Total bits of `values` under `params`, as a differentiable scalar.
pub fn gaussian_bits(values: &Tensor, params: &GaussianParams) -> Result<Tensor> {
    let lik = gaussian_likelihood(values, params)?;
    Ok((lik.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?)
}

pub fn std_normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

/// `P(lo < X ≤ hi)` for `X ~ N(μ, σ²)`, with infinite bounds allowed.
pub fn interval_mass(lo: f64, hi: f64, mean: f64, scale: f64) -> f64 {
    let a = (lo - mean) / scale;
    let b = (hi - mean) / scale;
    if a > 0.0 {
        std_normal_cdf(-a) - std_normal_cdf(-b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// Bin mass of integer `v` in f64, floored like [`gaussian_likelihood`].
pub fn bin_mass(v: f64, mean: f64, scale: f64) -> f64 {
    let scale = scale.max(SCALE_MIN);
    let d = (v - mean).abs();
    interval_mass(-d - 0.5, -d + 0.5, 0.0, scale).max(LIKELIHOOD_MIN)
}

/// `Σ −log2 mass` over nodes; errors on non-finite parameters.
pub fn rate_bits_f64(values: &[f64], means: &[f64], scales: &[f64]) -> Result<f64> {
    if values.len() != means.len() || values.len() != scales.len() {
        return Err(Error::Shape("values, means and scales differ in length".into()));
    }
    let mut bits = 0.0;
    for ((&v, &m), &s) in values.iter().zip(means).zip(scales) {
        if !m.is_finite() || !s.is_finite() {
            return Err(Error::NonFinite("gaussian parameters"));
        }
        bits -= bin_mass(v, m, s).log2();
    }
    Ok(bits)
}
