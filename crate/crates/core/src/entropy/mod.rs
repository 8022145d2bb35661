//! Probability models for `ẑ` and `ŷ`, quantization, and the CDF tables
//! handed to the entropy coder.

pub mod context;
pub mod factorized;
pub mod gaussian;

use candle_core::Tensor;
use rand::Rng;

use crate::coder::CdfTable;
use crate::error::{Error, Result};
use crate::nn::round_ste;

pub use context::{ContextMasks, ContextModel};
pub use factorized::FactorizedPrior;
pub use gaussian::{gaussian_bits, gaussian_likelihood, GaussianParams, LIKELIHOOD_MIN, SCALE_MIN};

pub const ALPHABET_MIN: i32 = -64;
pub const ALPHABET_MAX: i32 = 64;
pub const ALPHABET_SIZE: usize = (ALPHABET_MAX - ALPHABET_MIN + 1) as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(−½, ½)` noise.
    Noise,
    /// Round half to even with a straight-through gradient.
    Round,
}

pub fn quantize<R: Rng + ?Sized>(y: &Tensor, mode: QuantMode, rng: &mut R) -> Result<Tensor> {
    match mode {
        QuantMode::Round => round_ste(y),
        QuantMode::Noise => {
            let n = y.elem_count();
            let u: Vec<f32> = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let noise = Tensor::from_vec(u, y.shape(), y.device())?.to_dtype(y.dtype())?;
            Ok((y + noise)?)
        }
    }
}

/// Coder symbol of an integer latent, or an error outside the alphabet.
pub fn to_symbol(v: i32) -> Result<usize> {
    if !(ALPHABET_MIN..=ALPHABET_MAX).contains(&v) {
        return Err(Error::SymbolOutOfAlphabet { symbol: v as i64, size: ALPHABET_SIZE });
    }
    Ok((v - ALPHABET_MIN) as usize)
}

pub fn from_symbol(s: usize) -> i32 {
    s as i32 + ALPHABET_MIN
}

/// Quantized table of a discretized Gaussian over the alphabet, tail mass
/// folded into the two extreme symbols.
pub fn gaussian_table(mean: f64, scale: f64) -> Result<CdfTable> {
    if !mean.is_finite() || !scale.is_finite() {
        return Err(Error::NonFinite("gaussian parameters"));
    }
    let scale = scale.max(SCALE_MIN);
    let pmf: Vec<f64> = (ALPHABET_MIN..=ALPHABET_MAX)
        .map(|v| {
            let lo = if v == ALPHABET_MIN { f64::NEG_INFINITY } else { v as f64 - 0.5 };
            let hi = if v == ALPHABET_MAX { f64::INFINITY } else { v as f64 + 0.5 };
            gaussian::interval_mass(lo, hi, mean, scale)
        })
        .collect();
    CdfTable::from_pmf(&pmf)
}

/// One table per channel of the factorized prior.
pub fn factorized_tables(prior: &FactorizedPrior) -> Result<Vec<CdfTable>> {
    prior.pmf()?.iter().map(|p| CdfTable::from_pmf(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_examples() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::new(&[1.4f32, -0.5, 0.5, 2.5, -1.6], &dev).unwrap();
        let q = quantize(&y, QuantMode::Round, &mut rng).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(q, vec![1.0, 0.0, 0.0, 2.0, -2.0]);
    }

    #[test]
    fn noise_stays_within_half() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = Tensor::randn(0f32, 3.0, 10_000, &dev).unwrap();
        let q = quantize(&y, QuantMode::Noise, &mut rng).unwrap();
        let d = (q - &y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d <= 0.5);
    }

    #[test]
    fn symbols_round_trip() {
        assert_eq!(to_symbol(-64).unwrap(), 0);
        assert_eq!(to_symbol(64).unwrap(), 128);
        assert_eq!(from_symbol(to_symbol(7).unwrap()), 7);
        assert!(to_symbol(65).is_err());
    }

    #[test]
    fn gaussian_table_is_centered() {
        let t = gaussian_table(3.2, 1.5).unwrap();
        let best = (0..ALPHABET_SIZE).max_by_key(|&s| t.freq(s)).unwrap();
        assert_eq!(from_symbol(best), 3);
        let far = gaussian_table(500.0, 1.0).unwrap();
        assert!(far.freq(ALPHABET_SIZE - 1) > 60_000);
    }
}
