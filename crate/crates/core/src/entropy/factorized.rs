//! Per-channel learned CDF for the hyper-latent, a small monotone network
//! `c(x)` whose sigmoid is the cumulative distribution.

use candle_core::{DType, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::entropy::{ALPHABET_MAX, ALPHABET_MIN, ALPHABET_SIZE};
use crate::error::Result;
use crate::nn::{sigmoid, softplus};
use crate::entropy::gaussian::LIKELIHOOD_MIN;

const FILTERS: [usize; 4] = [3, 3, 3, 3];
const INIT_SCALE: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    channels: usize,
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
}

impl FactorizedPrior {
    pub fn new(vb: VarBuilder, channels: usize) -> Result<Self> {
        let mut dims = vec![1];
        dims.extend(FILTERS);
        dims.push(1);
        let scale = INIT_SCALE.powf(1.0 / (dims.len() - 1) as f64);
        let (mut matrices, mut biases, mut factors) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..dims.len() - 1 {
            let (din, dout) = (dims[k], dims[k + 1]);
            let init = (1.0 / scale / dout as f64).exp_m1().ln();
            matrices.push(vb.get_with_hints((channels, dout, din), &format!("matrix{k}"), Init::Const(init))?);
            biases.push(vb.get_with_hints((channels, dout, 1), &format!("bias{k}"), Init::Uniform { lo: -0.5, up: 0.5 })?);
            if k + 2 < dims.len() {
                factors.push(vb.get_with_hints((channels, dout, 1), &format!("factor{k}"), Init::Const(0.0))?);
            }
        }
        Ok(Self { channels, matrices, biases, factors })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logit of the CDF for inputs `[C, 1, N]`.
    pub fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for k in 0..self.matrices.len() {
            x = softplus(&self.matrices[k])?.matmul(&x)?.broadcast_add(&self.biases[k])?;
            if let Some(f) = self.factors.get(k) {
                x = (&x + f.tanh()?.broadcast_mul(&x.tanh()?)?)?;
            }
        }
        Ok(x)
    }

    /// Bin masses of `z: [B, C, H, W]`, floored at the rate floor.
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = z.dims4()?;
        let flat = z.permute((1, 0, 2, 3))?.contiguous()?.reshape((c, 1, b * h * w))?;
        let upper = self.logits_cumulative(&(&flat + 0.5)?)?;
        let lower = self.logits_cumulative(&(&flat - 0.5)?)?;
        let sign = (&upper + &lower)?.sign()?.neg()?;
        let lik = (sigmoid(&(&sign * &upper)?)? - sigmoid(&(&sign * &lower)?)?)?.abs()?;
        let lik = lik.maximum(LIKELIHOOD_MIN)?;
        Ok(lik.reshape((c, b, h, w))?.permute((1, 0, 2, 3))?.contiguous()?)
    }

    /// Total bits of `z` as a differentiable scalar.
    pub fn bits(&self, z: &Tensor) -> Result<Tensor> {
        Ok((self.likelihood(z)?.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?)
    }

    /// Probability of each alphabet symbol per channel, tails folded into the
    /// extreme symbols so each row sums to one.
    pub fn pmf(&self) -> Result<Vec<Vec<f64>>> {
        let edges: Vec<f32> = (ALPHABET_MIN..ALPHABET_MAX).map(|v| v as f32 + 0.5).collect();
        let n = edges.len();
        let dev = self.matrices[0].device();
        let x = Tensor::from_vec(edges, (1, 1, n), dev)?
            .to_dtype(self.matrices[0].dtype())?
            .broadcast_as((self.channels, 1, n))?
            .contiguous()?;
        let logits: Vec<Vec<f64>> = self.logits_cumulative(&x)?.to_dtype(DType::F64)?.squeeze(1)?.to_vec2()?;
        let sig = |l: f64| 1.0 / (1.0 + (-l).exp());
        Ok(logits
            .into_iter()
            .map(|row| {
                let mut cdf: Vec<f64> = Vec::with_capacity(ALPHABET_SIZE + 1);
                cdf.push(0.0);
                let mut prev = 0.0f64;
                for l in row {
                    prev = prev.max(sig(l));
                    cdf.push(prev);
                }
                cdf.push(1.0);
                cdf.windows(2).map(|w| (w[1] - w[0]).max(0.0)).collect()
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use candle_nn::VarMap;

    fn prior(c: usize) -> (VarMap, FactorizedPrior) {
        let map = VarMap::new();
        let vb = VarBuilder::from_varmap(&map, DType::F32, &Device::Cpu);
        let p = FactorizedPrior::new(vb, c).unwrap();
        (map, p)
    }

    #[test]
    fn cdf_is_monotone_with_unit_limits() {
        let (_m, p) = prior(3);
        let xs: Vec<f32> = (-400..=400).map(|i| i as f32 * 0.25).collect();
        let n = xs.len();
        let x = Tensor::from_vec(xs, (1, 1, n), &Device::Cpu).unwrap().broadcast_as((3, 1, n)).unwrap().contiguous().unwrap();
        let cdf = sigmoid(&p.logits_cumulative(&x).unwrap()).unwrap().squeeze(1).unwrap().to_vec2::<f32>().unwrap();
        for row in cdf {
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
            assert!(row[0] < 1e-3 && row[n - 1] > 1.0 - 1e-3);
        }
    }

    #[test]
    fn pmf_rows_sum_to_one() {
        let (_m, p) = prior(4);
        for row in p.pmf().unwrap() {
            assert_eq!(row.len(), ALPHABET_SIZE);
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn likelihood_matches_pmf_inside_alphabet() {
        let (_m, p) = prior(2);
        let z = Tensor::new(&[[[[0f32, 3.0]], [[-2.0, 1.0]]]], &Device::Cpu).unwrap();
        let lik = p.likelihood(&z).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let pmf = p.pmf().unwrap();
        let at = |c: usize, v: i32| pmf[c][(v - ALPHABET_MIN) as usize];
        let expect = [at(0, 0), at(0, 3), at(1, -2), at(1, 1)];
        for (l, e) in lik.iter().zip(expect) {
            assert!((*l as f64 - e).abs() < 1e-4, "{l} vs {e}");
        }
    }
}
