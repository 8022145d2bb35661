//! Image quality metrics and Bjøntegaard-delta rate.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::conv2d;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// One operating point of a codec on one image or averaged over a set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    /// kMACs per pixel.
    pub macs: f64,
    pub level: usize,
    pub quality: usize,
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.dims(), y.dims())));
    }
    Ok(())
}

/// Mean squared error as a differentiable scalar.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pair(x, y)?;
    Ok((x - y)?.sqr()?.mean_all()?)
}

/// Mean squared error of each image, `[B]`.
pub fn mse_per_image(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pair(x, y)?;
    Ok((x - y)?.sqr()?.flatten_from(1)?.mean(1)?)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    let m = mse(x, y)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok(psnr_from_mse(m))
}

fn gaussian_window(device: &Device) -> Result<Tensor> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push((a * b / (s * s)) as f32);
        }
    }
    Ok(Tensor::from_vec(w, (1, 1, SSIM_WINDOW, SSIM_WINDOW), device)?)
}

/// Valid-region Gaussian filter applied to every channel independently.
fn blur(x: &Tensor, window: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b * c, 1, h, w))?;
    let r = SSIM_WINDOW / 2;
    let out = conv2d(&flat, window, None, 1)?.narrow(2, r, h - 2 * r)?.narrow(3, r, w - 2 * r)?;
    Ok(out.reshape((b, c, h - 2 * r, w - 2 * r))?)
}

/// Per-image mean SSIM and contrast-structure terms, each `[B]`.
fn ssim_terms(x: &Tensor, y: &Tensor, window: &Tensor) -> Result<(Tensor, Tensor)> {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mx = blur(x, window)?;
    let my = blur(y, window)?;
    let mxx = mx.sqr()?;
    let myy = my.sqr()?;
    let mxy = (&mx * &my)?;
    let sxx = (blur(&x.sqr()?, window)? - &mxx)?;
    let syy = (blur(&y.sqr()?, window)? - &myy)?;
    let sxy = (blur(&(x * y)?, window)? - &mxy)?;
    let cs = (((&sxy * 2.0)? + c2)? / ((sxx + syy)? + c2)?)?;
    let lum = (((mxy * 2.0)? + c1)? / ((mxx + myy)? + c1)?)?;
    let ssim = (&lum * &cs)?;
    let per_image = |t: Tensor| -> Result<Tensor> { Ok(t.flatten_from(1)?.mean(1)?) };
    Ok((per_image(ssim)?, per_image(cs)?))
}

/// Number of MS-SSIM scales usable on an `h × w` image: the standard five,
/// fewer when the coarsest scale would be narrower than the window.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let mut n = 0;
    let (mut h, mut w) = (h, w);
    while n < MS_SSIM_WEIGHTS.len() && h >= SSIM_WINDOW && w >= SSIM_WINDOW {
        n += 1;
        h /= 2;
        w /= 2;
    }
    n
}

/// Multi-scale SSIM `[B]` of each image pair in `[0, 1]`, differentiable.
/// With fewer than five scales the leading exponents are renormalized to
/// sum to 1.
pub fn ms_ssim_tensor(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    check_pair(x, y)?;
    let (_, _, h, w) = x.dims4()?;
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(invalid(format!("MS-SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let window = gaussian_window(x.device())?;
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut acc: Option<Tensor> = None;
    for (s, weight) in MS_SSIM_WEIGHTS[..scales].iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, &window)?;
        let term = if s + 1 == scales { ssim } else { cs };
        let term = term.relu()?.maximum(1e-8)?.powf(weight / total)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a * term)?,
        });
        if s + 1 < scales {
            let (_, _, hh, ww) = x.dims4()?;
            x = x.narrow(2, 0, hh / 2 * 2)?.narrow(3, 0, ww / 2 * 2)?.avg_pool2d(2)?;
            y = y.narrow(2, 0, hh / 2 * 2)?.narrow(3, 0, ww / 2 * 2)?.avg_pool2d(2)?;
        }
    }
    Ok(acc.expect("at least one scale"))
}

/// Batch-mean MS-SSIM.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    let v = ms_ssim_tensor(x, y)?.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    Ok(v.min(1.0))
}

/// Quality axis for BD-rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityMetric {
    Psnr,
    MsSsim,
}

impl QualityMetric {
    fn of(self, p: &RdPoint) -> f64 {
        match self {
            QualityMetric::Psnr => p.psnr,
            QualityMetric::MsSsim => p.msssim,
        }
    }
}

/// Shape-preserving cubic Hermite interpolant (Fritsch–Carlson slopes with
/// the three-point end conditions).
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

fn edge_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

impl Pchip {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(invalid("interpolation needs at least two points of matching length"));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(invalid("abscissae must be finite and strictly increasing"));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let m: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = m[0];
            d[1] = m[0];
        } else {
            for k in 1..n - 1 {
                if m[k - 1] * m[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / m[k - 1] + w2 / m[k]);
                }
            }
            d[0] = edge_slope(h[0], h[1], m[0], m[1]);
            d[n - 1] = edge_slope(h[n - 2], h[n - 3], m[n - 2], m[n - 3]);
        }
        Ok(Self { x, y, d })
    }

    fn segment(&self, t: f64) -> usize {
        match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            k => (k - 1).min(self.x.len() - 2),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.segment(t);
        let h = self.x[k + 1] - self.x[k];
        let s = (t - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        (2.0 * s3 - 3.0 * s2 + 1.0) * self.y[k]
            + (s3 - 2.0 * s2 + s) * h * self.d[k]
            + (-2.0 * s3 + 3.0 * s2) * self.y[k + 1]
            + (s3 - s2) * h * self.d[k + 1]
    }

    /// Exact integral of the interpolant over `[a, b]` within the data range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        let prim = |k: usize, s: f64| {
            let h = self.x[k + 1] - self.x[k];
            let (s2, s3, s4) = (s * s, s * s * s, s * s * s * s);
            h * ((0.5 * s4 - s3 + s) * self.y[k]
                + (0.25 * s4 - 2.0 / 3.0 * s3 + 0.5 * s2) * h * self.d[k]
                + (-0.5 * s4 + s3) * self.y[k + 1]
                + (0.25 * s4 - s3 / 3.0) * h * self.d[k + 1])
        };
        let local = |k: usize, t: f64| (t - self.x[k]) / (self.x[k + 1] - self.x[k]);
        let (ka, kb) = (self.segment(a), self.segment(b));
        if ka == kb {
            return prim(ka, local(ka, b)) - prim(ka, local(ka, a));
        }
        let mut total = prim(ka, 1.0) - prim(ka, local(ka, a));
        for k in ka + 1..kb {
            total += prim(k, 1.0);
        }
        total + prim(kb, local(kb, b))
    }
}

fn log_rate_curve(points: &[RdPoint], metric: QualityMetric) -> Result<Pchip> {
    if points.len() < 4 {
        return Err(invalid(format!("BD-rate needs at least 4 points per curve, got {}", points.len())));
    }
    if points.iter().any(|p| !(p.bpp > 0.0)) {
        return Err(invalid("BD-rate needs positive rates"));
    }
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (metric.of(p), p.bpp.ln())).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    Pchip::new(pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect())
}

/// Average rate change of `b` relative to `a`, in percent, at equal quality.
pub fn bd_rate(a: &[RdPoint], b: &[RdPoint], metric: QualityMetric) -> Result<f64> {
    let fa = log_rate_curve(a, metric)?;
    let fb = log_rate_curve(b, metric)?;
    let lo = fa.x[0].max(fb.x[0]);
    let hi = fa.x.last().unwrap().min(*fb.x.last().unwrap());
    if !(hi > lo) {
        return Err(invalid(format!("quality ranges do not overlap ({lo:.4} ≥ {hi:.4})")));
    }
    let diff = (fb.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo);
    Ok((diff.exp() - 1.0) * 100.0)
}
