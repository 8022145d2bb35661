//! Topology-masked convolution.
//!
//! The input channels are laid out as `aux` leading channels with constant
//! topological index −1 (hyperprior features) followed by grouped channels,
//! where channel `j` belongs to group `j % groups`. Output channel `o`
//! belongs to group `o % groups`. A tap from input node `u` to output node
//! `v` survives iff `MaskRule::keeps(T(u), T(v))`; taps that fall in the
//! zero padding never survive.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{im2col, record_macs, ConvGeometry};
use crate::structure::intra::TopologyField;

/// Comparison between source and target topological indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskRule {
    /// Keep iff `T(u) < T(v)`; used where the input is `ŷ` itself.
    Strict,
    /// Keep iff `T(u) ≤ T(v)`; used on features that already obey `Strict`.
    Inclusive,
}

impl MaskRule {
    pub fn keeps(self, source: i64, target: i64) -> bool {
        match self {
            MaskRule::Strict => source < target,
            MaskRule::Inclusive => source <= target,
        }
    }
}

/// Weight `[C_out, C_in, K, K]`, bias `[C_out]` and channel grouping of a masked conv.
#[derive(Clone, Debug)]
pub struct DynamicKernel {
    pub weight: Tensor,
    pub bias: Tensor,
    pub groups: usize,
}

impl DynamicKernel {
    pub fn new(weight: Tensor, bias: Tensor, groups: usize, aux: usize) -> Result<Self> {
        let (o, i, k, k2) = weight.dims4()?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::Shape(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if bias.dims1()? != o {
            return Err(Error::Shape(format!("bias of length {} for {o} outputs", bias.dims1()?)));
        }
        if groups == 0 || o % groups != 0 || i < aux || (i - aux) % groups != 0 {
            return Err(Error::Shape(format!(
                "{groups} groups do not divide {} grouped inputs and {o} outputs",
                i.saturating_sub(aux)
            )));
        }
        Ok(Self { weight, bias, groups })
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Per-group 0/1 masks over unfolded columns, `[groups][rows][H·W]` flattened,
/// with `rows = (aux + grouped)·K·K` in `im2col` order.
pub fn build_mask(topo: &TopologyField, kernel: usize, aux: usize, grouped: usize, rule: MaskRule) -> Vec<f32> {
    let (groups, h, w) = (topo.groups(), topo.height(), topo.width());
    let channels = aux + grouped;
    let rows = channels * kernel * kernel;
    let pad = (kernel / 2) as isize;
    let mut mask = vec![0f32; groups * rows * h * w];
    for c in 0..groups {
        let base = c * rows * h * w;
        for ch in 0..channels {
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let row = (ch * kernel + kh) * kernel + kw;
                    for y in 0..h {
                        let sy = y as isize + kh as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + kw as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = if ch < aux {
                                -1
                            } else {
                                topo.get((ch - aux) % groups, sy as usize, sx as usize) as i64
                            };
                            if rule.keeps(src, topo.get(c, y, x) as i64) {
                                mask[base + row * h * w + y * w + x] = 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Mask tensors for one topology, reusable across calls with identical geometry.
#[derive(Clone, Debug)]
pub struct MaskSet {
    layout: MaskLayout,
    groups: usize,
    kernel: usize,
    aux: usize,
    grouped: usize,
    height: usize,
    width: usize,
}

#[derive(Clone, Debug)]
enum MaskLayout {
    /// One `[rows, 1, H·W]` mask per group.
    Dense(Vec<Tensor>),
    /// For a 2×2-periodic field every output position of one parity class
    /// sees the same taps (padding taps read zeros regardless), so the mask
    /// reduces to a `[1, rows]` row mask per group and class.
    Periodic {
        /// `rows[class][group]`, classes in `(h % 2, w % 2)` order, empty classes skipped.
        rows: Vec<Vec<Tensor>>,
        /// Positions of each non-empty class, raster order.
        positions: Vec<Tensor>,
        /// Inverse of the class-major position order.
        restore: Tensor,
    },
}

fn periodic_layout(topo: &TopologyField, kernel: usize, aux: usize, grouped: usize, rule: MaskRule, device: &Device) -> Result<MaskLayout> {
    let (groups, h, w) = (topo.groups(), topo.height(), topo.width());
    let channels = aux + grouped;
    let pad = kernel / 2;
    let mut rows = Vec::new();
    let mut positions = Vec::new();
    let mut order = Vec::with_capacity(h * w);
    for py in 0..2.min(h) {
        for px in 0..2.min(w) {
            let class: Vec<u32> = (py..h)
                .step_by(2)
                .flat_map(|y| (px..w).step_by(2).map(move |x| (y * w + x) as u32))
                .collect();
            order.extend_from_slice(&class);
            let n = class.len();
            positions.push(Tensor::from_vec(class, n, device)?);
            let mut per_group = Vec::with_capacity(groups);
            for c in 0..groups {
                let target = topo.get(c, py, px) as i64;
                let mut mask = vec![0f32; channels * kernel * kernel];
                for ch in 0..channels {
                    for kh in 0..kernel {
                        for kw in 0..kernel {
                            let sy = (py + kh + pad) % 2;
                            let sx = (px + kw + pad) % 2;
                            let src = if ch < aux { -1 } else { topo.get((ch - aux) % groups, sy, sx) as i64 };
                            if rule.keeps(src, target) {
                                mask[(ch * kernel + kh) * kernel + kw] = 1.0;
                            }
                        }
                    }
                }
                per_group.push(Tensor::from_vec(mask, (1, channels * kernel * kernel), device)?);
            }
            rows.push(per_group);
        }
    }
    let mut inverse = vec![0u32; h * w];
    for (i, &p) in order.iter().enumerate() {
        inverse[p as usize] = i as u32;
    }
    let restore = Tensor::from_vec(inverse, h * w, device)?;
    Ok(MaskLayout::Periodic { rows, positions, restore })
}

impl MaskSet {
    /// Builds the masks, using the periodic layout whenever `topo` is
    /// 2×2-periodic.
    pub fn new(
        topo: &TopologyField,
        kernel: usize,
        aux: usize,
        grouped: usize,
        rule: MaskRule,
        device: &Device,
    ) -> Result<Self> {
        if topo.tile().is_none() || topo.height() < 2 || topo.width() < 2 {
            return Self::dense(topo, kernel, aux, grouped, rule, device);
        }
        Ok(Self {
            layout: periodic_layout(topo, kernel, aux, grouped, rule, device)?,
            groups: topo.groups(),
            kernel,
            aux,
            grouped,
            height: topo.height(),
            width: topo.width(),
        })
    }

    /// Position-wise masks for any field.
    pub fn dense(
        topo: &TopologyField,
        kernel: usize,
        aux: usize,
        grouped: usize,
        rule: MaskRule,
        device: &Device,
    ) -> Result<Self> {
        let flat = build_mask(topo, kernel, aux, grouped, rule);
        let rows = (aux + grouped) * kernel * kernel;
        let l = topo.height() * topo.width();
        let all = Tensor::from_vec(flat, (topo.groups(), rows, 1, l), device)?;
        let masks = (0..topo.groups()).map(|c| all.get(c)).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            layout: MaskLayout::Dense(masks),
            groups: topo.groups(),
            kernel,
            aux,
            grouped,
            height: topo.height(),
            width: topo.width(),
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.layout, MaskLayout::Periodic { .. })
    }
}

/// Masked convolution with a prebuilt [`MaskSet`]. Input `[B, C_in, H, W]`.
pub fn masked_conv(x: &Tensor, masks: &MaskSet, kernel: &DynamicKernel) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let k = kernel.kernel_size();
    let groups = kernel.groups;
    if h != masks.height || w != masks.width || c_in != masks.aux + masks.grouped || k != masks.kernel {
        return Err(Error::Shape(format!(
            "input {:?} does not match masks built for {}+{} channels at {}x{} (K={})",
            x.dims(),
            masks.aux,
            masks.grouped,
            masks.height,
            masks.width,
            masks.kernel
        )));
    }
    if c_in != kernel.in_channels() || masks.groups() != groups {
        return Err(Error::Shape(format!(
            "kernel expects {} inputs in {} groups, got {c_in} inputs and {} mask groups",
            kernel.in_channels(),
            groups,
            masks.groups()
        )));
    }
    let o = kernel.out_channels();
    let rows = c_in * k * k;
    let l = h * w;
    let cols = im2col(x, ConvGeometry::new(k, 1))?.to_dtype(kernel.weight.dtype())?;
    let weight = kernel.weight.reshape((o / groups, groups, rows))?;
    let out = match &masks.layout {
        MaskLayout::Dense(per_group) => {
            let mut outs = Vec::with_capacity(groups);
            for (c, mask) in per_group.iter().enumerate() {
                let mask = mask.to_dtype(cols.dtype())?;
                let masked = cols.broadcast_mul(&mask)?.reshape((rows, b * l))?;
                let wc = weight.narrow(1, c, 1)?.squeeze(1)?;
                outs.push(wc.matmul(&masked)?);
            }
            Tensor::stack(&outs, 1)?.reshape((o, b, l))?
        }
        MaskLayout::Periodic { rows: class_rows, positions, restore } => {
            let mut classes = Vec::with_capacity(positions.len());
            for (pos, row_masks) in positions.iter().zip(class_rows) {
                let n = pos.elem_count();
                let sel = cols.index_select(pos, 2)?.reshape((rows, b * n))?;
                let mut outs = Vec::with_capacity(groups);
                for (c, mask) in row_masks.iter().enumerate() {
                    let wc = weight.narrow(1, c, 1)?.squeeze(1)?.broadcast_mul(&mask.to_dtype(weight.dtype())?)?;
                    outs.push(wc.matmul(&sel)?);
                }
                classes.push(Tensor::stack(&outs, 1)?.reshape((o, b, n))?);
            }
            Tensor::cat(&classes, 2)?.index_select(restore, 2)?
        }
    };
    record_macs((o * rows * b * l) as u64);
    let out = out
        .reshape((o, b, h, w))?
        .permute((1, 0, 2, 3))?
        .broadcast_add(&kernel.bias.reshape((1, o, 1, 1))?)?;
    Ok(out)
}

/// Masked convolution whose masks are derived from `topo` on the fly.
///
/// The first `aux_topo_offset` input channels carry index −1.
pub fn dynamic_masked_conv(
    x: &Tensor,
    topo: &TopologyField,
    kernel: &DynamicKernel,
    aux_topo_offset: usize,
    rule: MaskRule,
) -> Result<Tensor> {
    let (_, c_in, h, w) = x.dims4()?;
    if (h, w) != (topo.height(), topo.width()) {
        return Err(Error::Shape(format!(
            "input is {h}x{w}, topology is {}x{}",
            topo.height(),
            topo.width()
        )));
    }
    if kernel.groups != topo.groups() {
        return Err(Error::Shape(format!(
            "kernel has {} groups, topology {}",
            kernel.groups,
            topo.groups()
        )));
    }
    if c_in < aux_topo_offset {
        return Err(Error::Shape(format!("{c_in} inputs but {aux_topo_offset} auxiliary channels")));
    }
    let masks = MaskSet::new(topo, kernel.kernel_size(), aux_topo_offset, c_in - aux_topo_offset, rule, x.device())?;
    masked_conv(x, &masks, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn all_zero_topology_outputs_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let topo = TopologyField::zeros(2, 4, 4).unwrap();
        let x = rand_tensor(&mut rng, &[1, 4, 4, 4]);
        let bias = Tensor::new(&[0.5f32, -1.0, 2.0, 3.0], &Device::Cpu).unwrap();
        let k = DynamicKernel::new(rand_tensor(&mut rng, &[4, 4, 5, 5]), bias.clone(), 2, 0).unwrap();
        let out = dynamic_masked_conv(&x, &topo, &k, 0, MaskRule::Strict).unwrap();
        let expect = bias.reshape((1, 4, 1, 1)).unwrap().broadcast_as((1, 4, 4, 4)).unwrap();
        let diff = (out - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn auxiliary_input_reaches_partite_zero() {
        let topo = TopologyField::zeros(1, 1, 1).unwrap();
        let x = Tensor::new(&[[[[2f32]], [[5f32]]]], &Device::Cpu).unwrap();
        let w = Tensor::new(&[[[[3f32]], [[7f32]]]], &Device::Cpu).unwrap();
        let k = DynamicKernel::new(w, Tensor::new(&[1f32], &Device::Cpu).unwrap(), 1, 1).unwrap();
        let out = dynamic_masked_conv(&x, &topo, &k, 1, MaskRule::Strict).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![7.0]);
    }

    #[test]
    fn periodic_layout_matches_dense_masks_and_gradients() {
        use candle_core::Var;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (groups, aux, k, h, w, rule) in [(4, 0, 5, 5, 6, MaskRule::Strict), (2, 3, 1, 3, 4, MaskRule::Inclusive), (8, 0, 3, 2, 7, MaskRule::Strict)] {
            let tile: Vec<u8> = (0..groups * 4).map(|_| rng.random_range(0..5u8)).collect();
            let topo = TopologyField::from_tile(5, &tile, h, w).unwrap();
            let c = aux + 2 * groups;
            let x = Var::from_tensor(&rand_tensor(&mut rng, &[2, c, h, w])).unwrap();
            let wt = Var::from_tensor(&rand_tensor(&mut rng, &[3 * groups, c, k, k])).unwrap();
            let kernel = DynamicKernel::new(wt.as_tensor().clone(), Tensor::zeros(3 * groups, DType::F32, &Device::Cpu).unwrap(), groups, aux).unwrap();
            let fast = MaskSet::new(&topo, k, aux, 2 * groups, rule, &Device::Cpu).unwrap();
            let dense = MaskSet::dense(&topo, k, aux, 2 * groups, rule, &Device::Cpu).unwrap();
            assert!(fast.is_periodic() && !dense.is_periodic());
            let a = masked_conv(x.as_tensor(), &fast, &kernel).unwrap();
            let b = masked_conv(x.as_tensor(), &dense, &kernel).unwrap();
            let max = |t: Tensor| t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(max((&a - &b).unwrap()) < 1e-5);
            let probe = rand_tensor(&mut rng, a.dims());
            let ga = (&a * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&b * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &wt] {
                assert!(max((ga.get(v).unwrap() - gb.get(v).unwrap()).unwrap()) < 1e-4);
            }
        }
    }

    #[test]
    fn inclusive_rule_keeps_equal_indices() {
        assert!(MaskRule::Inclusive.keeps(2, 2));
        assert!(!MaskRule::Strict.keeps(2, 2));
        assert!(MaskRule::Strict.keeps(-1, 0));
    }

    #[test]
    fn rejects_mismatched_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_tensor(&mut rng, &[4, 6, 3, 3]);
        let b = Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap();
        assert!(DynamicKernel::new(w.clone(), b.clone(), 4, 0).is_err());
        assert!(DynamicKernel::new(w, b, 2, 0).is_ok());
        let even = rand_tensor(&mut rng, &[4, 4, 4, 4]);
        assert!(DynamicKernel::new(even, Tensor::zeros(4, DType::F32, &Device::Cpu).unwrap(), 1, 0).is_err());
    }
}
