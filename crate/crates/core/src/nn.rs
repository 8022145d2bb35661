//! Tensor building blocks shared by the transforms and the entropy model.
//!
//! Convolutions are lowered to an explicit `im2col` followed by a single GEMM.
//! The unfold has a hand-written adjoint (`col2im`), so the backward pass is
//! two GEMMs plus a scatter instead of candle's generic transposed-conv path,
//! which is several times slower than the forward pass on CPU. The same
//! unfolded columns feed the dynamic masked convolution.

use std::cell::Cell;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Runs `f` and returns the number of multiply-accumulates executed by the
/// convolution and matmul kernels of this module while it ran.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let outer = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let counted = MAC_COUNTER.with(|c| c.replace(outer)).unwrap_or(0);
    if let Some(prev) = outer {
        MAC_COUNTER.with(|c| c.set(Some(prev + counted)));
    }
    (out, counted)
}

pub(crate) fn record_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

/// Kernel size, stride and symmetric zero padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, pad: kernel / 2 }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

struct Im2Col {
    g: ConvGeometry,
}

struct Col2Im {
    g: ConvGeometry,
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
}

fn contiguous_slice<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col expects a contiguous tensor"),
    }
}

/// Unfolds `[B, C, H, W]` into `[C*K*K, B, Ho*Wo]`. Row index is
/// `(c*K + kh)*K + kw`, matching a row-major `[O, C, K, K]` weight.
fn unfold<T: WithDType>(
    src: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let l = ho * wo;
    let mut out = vec![T::zero(); c * k * k * b * l];
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                for bi in 0..b {
                    let plane = &src[(bi * c + ci) * h * w..][..h * w];
                    let dst = &mut out[(row * b + bi) * l..][..l];
                    for oh in 0..ho {
                        let ih = (oh * s + kh) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * w..][..w];
                        let dst_row = &mut dst[oh * wo..][..wo];
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * s + kw) as isize - p;
                            if iw >= 0 && iw < w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn fold<T: WithDType>(
    cols: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    g: ConvGeometry,
) -> Vec<T> {
    let (k, s, p) = (g.kernel, g.stride, g.pad as isize);
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let l = ho * wo;
    let mut out = vec![T::zero(); b * c * h * w];
    for ci in 0..c {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                for bi in 0..b {
                    let plane = &mut out[(bi * c + ci) * h * w..][..h * w];
                    let src = &cols[(row * b + bi) * l..][..l];
                    for oh in 0..ho {
                        let ih = (oh * s + kh) as isize - p;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[ih as usize * w..][..w];
                        for ow in 0..wo {
                            let iw = (ow * s + kw) as isize - p;
                            if iw >= 0 && iw < w as isize {
                                dst_row[iw as usize] += src[oh * wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let rows = c * self.g.kernel * self.g.kernel;
        let l = self.g.out_size(h) * self.g.out_size(w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous_slice(v, layout)?, dims, self.g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous_slice(v, layout)?, dims, self.g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((rows, b, l))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (batch, channels, h, w) = arg.dims4()?;
        let op = Col2Im { g: self.g, batch, channels, h, w };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = (self.batch, self.channels, self.h, self.w);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous_slice(v, layout)?, dims, self.g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous_slice(v, layout)?, dims, self.g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from(dims)))
    }
}

/// Unfolded columns `[C*K*K, B, Ho*Wo]` of a `[B, C, H, W]` tensor.
pub fn im2col(x: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    if g.is_pointwise() {
        let (b, c, h, w) = x.dims4()?;
        return Ok(x.permute((1, 0, 2, 3))?.contiguous()?.reshape((c, b, h * w))?);
    }
    Ok(x.contiguous()?.apply_op1(Im2Col { g })?)
}

/// Plain 2-D convolution with weight `[O, C, K, K]` and optional bias `[O]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    let (o, c, k, _) = weight.dims4()?;
    let g = ConvGeometry::new(k, stride);
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let rows = c * k * k;
    let cols = im2col(x, g)?.reshape((rows, b * ho * wo))?;
    record_macs((o * rows * b * ho * wo) as u64);
    let out = weight.reshape((o, rows))?.matmul(&cols)?;
    let out = out.reshape((o, b, ho, wo))?.permute((1, 0, 2, 3))?;
    match bias {
        Some(bias) => Ok(out.broadcast_add(&bias.reshape((1, o, 1, 1))?)?),
        None => Ok(out.contiguous()?),
    }
}

/// Depth-to-space with factor 2: `[B, 4C, H, W] -> [B, C, 2H, 2W]`, where
/// input channel `4c + 2i + j` lands at output channel `c`, phase `(i, j)`.
pub fn pixel_shuffle(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    let c = c4 / 4;
    Ok(x
        .reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Generalized divisive normalization over channels, or its inverse.
/// `beta: [C]`, `gamma: [C, C]`, both already positive.
pub fn gdn(x: &Tensor, beta: &Tensor, gamma: &Tensor, inverse: bool) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let sq = x.sqr()?.permute((1, 0, 2, 3))?.contiguous()?.reshape((c, b * h * w))?;
    record_macs((c * c * b * h * w) as u64);
    let norm = gamma
        .matmul(&sq)?
        .broadcast_add(&beta.reshape((c, 1))?)?
        .sqrt()?
        .reshape((c, b, h, w))?
        .permute((1, 0, 2, 3))?;
    if inverse {
        Ok(x.mul(&norm)?)
    } else {
        Ok(x.div(&norm)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg_abs = x.abs()?.neg()?;
    Ok((pos + (neg_abs.exp()? + 1.0)?.log()?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

struct RoundHalfEven;

impl CustomOp1 for RoundHalfEven {
    fn name(&self) -> &'static str {
        "round-half-even"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous_slice(v, layout)?.iter().map(|x| x.round_ties_even()).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(contiguous_slice(v, layout)?.iter().map(|x| x.round_ties_even()).collect())
            }
            _ => candle_core::bail!("rounding supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }
}

/// Rounds to the nearest integer, ties to even. Not differentiable.
pub fn round_half_even(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1_no_bwd(&RoundHalfEven)?)
}

/// Straight-through rounding: forward `round_half_even(x)`, identity gradient.
pub fn round_ste(x: &Tensor) -> Result<Tensor> {
    let rounded = round_half_even(x)?;
    Ok((x + (rounded - x)?.detach())?)
}

struct StdNormalCdf;

fn phi(t: f64) -> f64 {
    0.5 * libm::erfc(-t * std::f64::consts::FRAC_1_SQRT_2)
}

impl CustomOp1 for StdNormalCdf {
    fn name(&self) -> &'static str {
        "std-normal-cdf"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous_slice(v, layout)?.iter().map(|&x| phi(x as f64) as f32).collect())
            }
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, layout)?.iter().map(|&x| phi(x)).collect()),
            _ => candle_core::bail!("normal cdf supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let density = (arg.sqr()? * -0.5)?.exp()? * (1.0 / (2.0 * std::f64::consts::PI).sqrt());
        Ok(Some(grad_res.mul(&density?)?))
    }
}

/// Standard normal CDF, accurate in both tails.
pub fn normal_cdf(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(StdNormalCdf)?)
}
