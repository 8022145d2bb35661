//! End-to-end compression: structure resolution, transforms, stage-scheduled
//! entropy coding and bitstream assembly.
//!
//! `ẑ` is coded channel-major with one factorized table per channel. `ŷ` is
//! coded in a single stream ordered by stage, then raster position, then
//! channel. At stage `s` the context network sees `ŷ` with every element of
//! stage `≥ s` zeroed, so encoder and decoder evaluate identical tensors.

pub mod bitstream;

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::coder::{CdfTable, CodedBuffer, EntropyCoder, RansCoder};
use crate::control::{propose_structure, project_to_budget, ControllerState, Task, QUALITIES};
use crate::entropy::gaussian::bin_mass;
use crate::entropy::{factorized_tables, from_symbol, gaussian_table, to_symbol, ALPHABET_MAX, ALPHABET_MIN, LIKELIHOOD_MIN};
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::nn::round_half_even;
use crate::structure::{EdgeId, StructureSample, TopologyField};

pub use bitstream::{Bitstream, Header, MAGIC, VERSION};

/// Spatial granularity of the padded image (total stride of `g_a ∘ h_a`).
pub const PAD_MULTIPLE: usize = 64;

/// Integer latents of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentPack {
    pub channels: usize,
    /// `ŷ`, `[M, H/16, W/16]` channel-major.
    pub y: Vec<i32>,
    pub y_size: (usize, usize),
    /// `ẑ`, `[M, H/64, W/64]` channel-major.
    pub z: Vec<i32>,
    pub z_size: (usize, usize),
}

impl LatentPack {
    fn tensor(values: &[i32], c: usize, (h, w): (usize, usize), model: &Model) -> Result<Tensor> {
        let v: Vec<f32> = values.iter().map(|&x| x as f32).collect();
        Ok(Tensor::from_vec(v, (1, c, h, w), model.device())?)
    }

    pub fn y_tensor(&self, model: &Model) -> Result<Tensor> {
        Self::tensor(&self.y, self.channels, self.y_size, model)
    }

    pub fn z_tensor(&self, model: &Model) -> Result<Tensor> {
        Self::tensor(&self.z, self.channels, self.z_size, model)
    }
}

/// What the encoder knows beyond the bitstream.
#[derive(Clone, Debug)]
pub struct CompressReport {
    pub structure: StructureSample,
    pub projected: bool,
    pub latents: LatentPack,
    /// Model rate of `ŷ` in bits, from the f64 Gaussian bin masses.
    pub estimated_bits_y: f64,
    /// Model rate of `ẑ` in bits, from the factorized prior.
    pub estimated_bits_z: f64,
    pub stages: usize,
}

impl CompressReport {
    pub fn estimated_bits(&self) -> f64 {
        self.estimated_bits_y + self.estimated_bits_z
    }
}

/// Order in which the decoder produced `ŷ` and what it let the context
/// network see, stage by stage.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeTrace {
    /// Flat `ŷ` indices `(c·H + h)·W + w` decoded in each stage, in order.
    pub decoded: Vec<Vec<usize>>,
    /// Flat `ŷ` indices left unmasked in the context input of each stage.
    pub visible: Vec<Vec<usize>>,
}

/// Decoded image with its latents.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// `[1, 3, H, W]` in `[0, 1]`, cropped to the original size.
    pub image: Tensor,
    pub latents: LatentPack,
    pub trace: DecodeTrace,
}

/// Per-stage decode order: for each distinct topological index, ascending,
/// the flat `ŷ` indices at that index in raster order then channel order.
pub fn stage_order(topo: &TopologyField, channels: usize) -> Vec<Vec<usize>> {
    let (h, w) = (topo.height(), topo.width());
    let values = topo.distinct();
    let mut out = vec![Vec::new(); values.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let t = topo.of_channel(c, y, x);
                let s = values.binary_search(&t).expect("value present in field");
                out[s].push((c * h + y) * w + x);
            }
        }
    }
    out
}

/// Number of sequential context-network invocations needed to decode `bs`.
pub fn count_stage_invocations(bs: &Bitstream) -> Result<usize> {
    let (h, w) = latent_size(&bs.header)?;
    let topo = TopologyField::from_tile(bs.header.stages as usize, &bs.header.tile, h, w)?;
    Ok(topo.distinct().len())
}

fn padded(n: usize) -> usize {
    n.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE
}

fn latent_size(header: &Header) -> Result<(usize, usize)> {
    if header.height == 0 || header.width == 0 {
        return Err(Error::Corrupt("zero image dimension".into()));
    }
    Ok((padded(header.height as usize) / 16, padded(header.width as usize) / 16))
}

/// Replicates the last row and column up to the next multiple of 64.
pub fn pad_image(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = x.pad_with_same(2, 0, padded(h) - h)?;
    Ok(x.pad_with_same(3, 0, padded(w) - w)?)
}

fn to_ints(t: &Tensor) -> Result<Vec<i32>> {
    let r = round_half_even(t)?.clamp(ALPHABET_MIN as f32, ALPHABET_MAX as f32)?;
    let v = r.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("latent"));
    }
    Ok(v.into_iter().map(|x| x as i32).collect())
}

/// Structure used for `controller`: the control branch's proposal when
/// data-adaptive, otherwise the stored level, projected onto its budget.
pub fn resolve_structure<R: Rng + ?Sized>(
    model: &Model,
    controller: &ControllerState,
    x: &Tensor,
    rng: &mut R,
) -> Result<(StructureSample, bool)> {
    controller.validate()?;
    if controller.data_adaptive {
        let p = propose_structure(model, controller, Some(x), rng)?;
        return Ok((p.structure, p.projected));
    }
    let stored = model.non_adaptive_structure(controller.budget_level)?;
    let budget = model.budgets()?.budget(controller.budget_level)?;
    let (inter, projected) = project_to_budget(&stored.inter, &model.edge_specs()?, model.fixed_cost(), budget)?;
    Ok((StructureSample::new(inter, stored.stages, stored.tile), projected))
}

struct StageParams {
    means: Vec<f32>,
    scales: Vec<f32>,
}

/// Context-model evaluation shared by encoder and decoder.
struct StagePredictor<'m> {
    model: &'m Model,
    hyper: Tensor,
    masks: crate::entropy::ContextMasks,
    merge: usize,
    topo: TopologyField,
    channels: usize,
}

impl<'m> StagePredictor<'m> {
    fn new(model: &'m Model, structure: &StructureSample, z_hat: &Tensor, h: usize, w: usize) -> Result<Self> {
        let hyper = model.hyper_synthesis.forward(z_hat, structure.choice(EdgeId::HyperSynthesis))?;
        let (_, _, hh, hw) = hyper.dims4()?;
        if (hh, hw) != (h, w) {
            return Err(Error::Shape(format!("hyper features {hh}x{hw} for latents {h}x{w}")));
        }
        let topo = structure.topology(h, w)?;
        let masks = model.context.masks(&topo, model.device())?;
        Ok(Self { model, hyper, masks, merge: structure.choice(EdgeId::Merge), topo, channels: model.latent_channels() })
    }

    /// Parameters at every node given `ŷ` restricted to `visible` positions.
    fn predict(&self, y_hat: &[i32], visible: &[bool]) -> Result<StageParams> {
        let (h, w) = (self.topo.height(), self.topo.width());
        let v: Vec<f32> = y_hat.iter().zip(visible).map(|(&y, &keep)| if keep { y as f32 } else { 0.0 }).collect();
        let t = Tensor::from_vec(v, (1, self.channels, h, w), self.model.device())?;
        let p = self.model.context.predict(&self.hyper, &t, &self.masks, self.merge)?;
        Ok(StageParams {
            means: p.mean.flatten_all()?.to_vec1::<f32>()?,
            scales: p.scale.flatten_all()?.to_vec1::<f32>()?,
        })
    }
}

fn node_table(params: &StageParams, i: usize) -> Result<CdfTable> {
    gaussian_table(params.means[i] as f64, params.scales[i] as f64)
}

/// Compressor bound to one model and entropy coder.
pub struct Codec<'m> {
    model: &'m Model,
    coder: Box<dyn EntropyCoder + 'm>,
}

impl<'m> Codec<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self { model, coder: Box::new(RansCoder) }
    }

    pub fn with_coder(model: &'m Model, coder: Box<dyn EntropyCoder + 'm>) -> Self {
        Self { model, coder }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn compress<R: Rng + ?Sized>(&self, x: &Tensor, controller: &ControllerState, rng: &mut R) -> Result<Bitstream> {
        Ok(self.compress_with_report(x, controller, rng)?.0)
    }

    /// Compresses `x: [1, 3, H, W]` with values in `[0, 1]`.
    pub fn compress_with_report<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        controller: &ControllerState,
        rng: &mut R,
    ) -> Result<(Bitstream, CompressReport)> {
        let model = self.model;
        let (b, c, height, width) = x.dims4()?;
        if b != 1 || c != 3 {
            return Err(Error::Shape(format!("expected one RGB image, got [{b}, {c}, {height}, {width}]")));
        }
        if height == 0 || width == 0 || height > u16::MAX as usize || width > u16::MAX as usize {
            return Err(invalid(format!("image size {height}x{width} outside 1..=65535")));
        }
        if controller.quality >= QUALITIES {
            return Err(invalid(format!("quality {} outside 0..{QUALITIES}", controller.quality)));
        }
        let (structure, projected) = resolve_structure(model, controller, x, rng)?;
        let xp = pad_image(x)?;
        let m = model.latent_channels();

        let y = model.analysis.forward(&xp, structure.choice(EdgeId::Analysis))?;
        let z = model.hyper_analysis.forward(&y, structure.choice(EdgeId::HyperAnalysis))?;
        let (_, _, h, w) = y.dims4()?;
        let (_, _, zh, zw) = z.dims4()?;
        let y_int = to_ints(&y)?;
        let z_int = to_ints(&z)?;
        let latents = LatentPack { channels: m, y: y_int, y_size: (h, w), z: z_int, z_size: (zh, zw) };

        let pmf = model.prior.pmf()?;
        let z_tables = factorized_tables(&model.prior)?;
        let zn = zh * zw;
        let mut z_symbols = Vec::with_capacity(m * zn);
        let mut z_refs = Vec::with_capacity(m * zn);
        let mut bits_z = 0.0;
        for (i, &v) in latents.z.iter().enumerate() {
            let s = to_symbol(v)?;
            bits_z -= pmf[i / zn][s].max(LIKELIHOOD_MIN).log2();
            z_symbols.push(s);
            z_refs.push(&z_tables[i / zn]);
        }
        let z_buf = self.coder.encode(&z_symbols, &z_refs)?;

        let predictor = StagePredictor::new(model, &structure, &latents.z_tensor(model)?, h, w)?;
        let order = stage_order(&predictor.topo, m);
        let mut visible = vec![false; latents.y.len()];
        let mut y_symbols = Vec::with_capacity(latents.y.len());
        let mut y_tables = Vec::with_capacity(latents.y.len());
        let mut bits_y = 0.0;
        for nodes in &order {
            let params = predictor.predict(&latents.y, &visible)?;
            for &i in nodes {
                let v = latents.y[i];
                bits_y -= bin_mass(v as f64, params.means[i] as f64, params.scales[i] as f64).log2();
                y_symbols.push(to_symbol(v)?);
                y_tables.push(node_table(&params, i)?);
            }
            for &i in nodes {
                visible[i] = true;
            }
        }
        let y_refs: Vec<&CdfTable> = y_tables.iter().collect();
        let y_buf = self.coder.encode(&y_symbols, &y_refs)?;

        let mut generative = [0u8; 3];
        for (slot, e) in generative.iter_mut().zip(EdgeId::GENERATIVE) {
            *slot = structure.choice(e) as u8;
        }
        let header = Header {
            height: height as u16,
            width: width as u16,
            quality: controller.quality as u8,
            task: controller.task.index() as u8,
            generative,
            stages: structure.stages as u8,
            tile: structure.tile.clone(),
        };
        let bs = Bitstream { header, payload_z: z_buf.to_payload(), payload_y: y_buf.to_payload() };
        let report = CompressReport {
            structure,
            projected,
            latents,
            estimated_bits_y: bits_y,
            estimated_bits_z: bits_z,
            stages: order.len(),
        };
        Ok((bs, report))
    }

    pub fn decompress(&self, bs: &Bitstream) -> Result<Decoded> {
        let model = self.model;
        let header = &bs.header;
        if header.stages as usize != model.stages() {
            return Err(Error::Corrupt(format!(
                "stream uses {} partites, model has {}",
                header.stages,
                model.stages()
            )));
        }
        if header.tile.len() != model.groups() * 4 {
            return Err(Error::Corrupt("tile size does not match the model".into()));
        }
        Task::from_index(header.task as usize)?;
        let n = model.num_variants();
        if header.generative.iter().any(|&g| g as usize >= n) {
            return Err(Error::Corrupt(format!("edge variant outside 0..{n}")));
        }
        let m = model.latent_channels();
        let (h, w) = latent_size(header)?;
        let (zh, zw) = (h / 4, w / 4);

        let z_buf = CodedBuffer::from_payload(&bs.payload_z, m * zh * zw)?;
        let z_tables = factorized_tables(&model.prior)?;
        let zn = zh * zw;
        let z_refs: Vec<&CdfTable> = (0..m * zn).map(|i| &z_tables[i / zn]).collect();
        let z: Vec<i32> = self.coder.decode(&z_buf, &z_refs)?.into_iter().map(from_symbol).collect();

        let mut inter = std::collections::BTreeMap::new();
        for (e, &g) in EdgeId::GENERATIVE.iter().zip(&header.generative) {
            inter.insert(*e, g as usize);
        }
        let structure = StructureSample::new(inter, header.stages as usize, header.tile.clone());
        let mut latents = LatentPack { channels: m, y: vec![0; m * h * w], y_size: (h, w), z, z_size: (zh, zw) };
        let predictor = StagePredictor::new(model, &structure, &latents.z_tensor(model)?, h, w)?;
        let order = stage_order(&predictor.topo, m);

        let y_buf = CodedBuffer::from_payload(&bs.payload_y, m * h * w)?;
        let mut dec = self.coder.decoder(&y_buf)?;
        let mut visible = vec![false; m * h * w];
        let mut trace = DecodeTrace::default();
        for nodes in &order {
            trace.visible.push(visible.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect());
            let params = predictor.predict(&latents.y, &visible)?;
            let tables = nodes.iter().map(|&i| node_table(&params, i)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&CdfTable> = tables.iter().collect();
            let symbols = dec.decode(&refs)?;
            for (&i, s) in nodes.iter().zip(symbols) {
                latents.y[i] = from_symbol(s);
                visible[i] = true;
            }
            trace.decoded.push(nodes.clone());
        }
        dec.finish()?;

        let x = model.synthesis.forward(&latents.y_tensor(model)?, structure.choice(EdgeId::Synthesis))?;
        let image = x
            .narrow(2, 0, header.height as usize)?
            .narrow(3, 0, header.width as usize)?
            .clamp(0f32, 1f32)?;
        Ok(Decoded { image, latents, trace })
    }

    pub fn compress_bytes<R: Rng + ?Sized>(&self, x: &Tensor, controller: &ControllerState, rng: &mut R) -> Result<Vec<u8>> {
        Ok(self.compress(x, controller, rng)?.to_bytes())
    }

    pub fn decompress_bytes(&self, bytes: &[u8]) -> Result<Decoded> {
        self.decompress(&Bitstream::from_bytes(bytes, self.model.groups())?)
    }
}

/// Checks a decode trace against the topology: every element shown to the
/// context network was decoded in an earlier stage, and every element in the
/// `kernel × kernel` window of a node with a smaller topological index was
/// shown before that node was decoded.
pub fn audit_access_order(trace: &DecodeTrace, topo: &TopologyField, channels: usize, kernel: usize) -> Result<()> {
    let (h, w) = (topo.height(), topo.width());
    let total = channels * h * w;
    let mut decoded_at = vec![usize::MAX; total];
    for (s, nodes) in trace.decoded.iter().enumerate() {
        for &i in nodes {
            if i >= total || decoded_at[i] != usize::MAX {
                return Err(Error::Corrupt(format!("element {i} decoded twice or out of range")));
            }
            decoded_at[i] = s;
        }
    }
    if decoded_at.contains(&usize::MAX) {
        return Err(Error::Corrupt("some elements were never decoded".into()));
    }
    let t_of = |i: usize| {
        let (c, p) = (i / (h * w), i % (h * w));
        topo.of_channel(c, p / w, p % w)
    };
    let pad = (kernel / 2) as isize;
    for (s, nodes) in trace.decoded.iter().enumerate() {
        let shown = trace.visible.get(s).ok_or_else(|| Error::Corrupt(format!("stage {s} has no visibility record")))?;
        let mut seen = vec![false; total];
        for &u in shown {
            if decoded_at[u] >= s {
                return Err(Error::Corrupt(format!("element {u} shown at stage {s} before it was decoded")));
            }
            seen[u] = true;
        }
        for &v in nodes {
            let tv = t_of(v);
            let p = v % (h * w);
            let (vy, vx) = ((p / w) as isize, (p % w) as isize);
            for dy in -pad..=pad {
                for dx in -pad..=pad {
                    let (y, x) = (vy + dy, vx + dx);
                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    for c in 0..channels {
                        let u = (c * h + y as usize) * w + x as usize;
                        if t_of(u) < tv && !seen[u] {
                            return Err(Error::Corrupt(format!(
                                "ancestor {u} of element {v} was not visible when {v} was decoded"
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model {
        let cfg = ModelConfig {
            widths: vec![4, 8],
            merge_widths: vec![8, 16],
            latent_channels: 8,
            ..ModelConfig::default()
        };
        Model::new(cfg, &Device::Cpu).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(v, (1, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn stage_order_is_stage_raster_channel() {
        let topo = TopologyField::checkerboard(2, 2).unwrap();
        let order = stage_order(&topo, 2);
        assert_eq!(order.len(), 2);
        // checkerboard: (0,0) and (1,1) first, both channels per position
        assert_eq!(order[0], vec![0, 4, 3, 7]);
        assert_eq!(order[1], vec![1, 5, 2, 6]);
    }

    #[test]
    fn padding_replicates_edges() {
        let x = image(5, 70, 1);
        let p = pad_image(&x).unwrap();
        assert_eq!(p.dims(), &[1, 3, 64, 128]);
        let last: Vec<f32> = x.narrow(2, 4, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let far: Vec<f32> = p.narrow(2, 63, 1).unwrap().narrow(3, 0, 70).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(last, far);
    }

    #[test]
    fn latent_round_trip_is_exact() {
        let model = small();
        let codec = Codec::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = image(40, 72, 3);
        for level in [0, 7] {
            let ctl = ControllerState::new(level, Task::Psnr, 1, false).unwrap();
            let (bs, report) = codec.compress_with_report(&x, &ctl, &mut rng).unwrap();
            let bytes = bs.to_bytes();
            let out = codec.decompress_bytes(&bytes).unwrap();
            assert_eq!(out.latents, report.latents);
            assert_eq!(out.image.dims(), &[1, 3, 40, 72]);
            assert_eq!(count_stage_invocations(&bs).unwrap(), out.trace.decoded.len());
            let topo = report.structure.topology(4, 8).unwrap();
            audit_access_order(&out.trace, &topo, 8, 5).unwrap();
        }
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let model = small();
        let codec = Codec::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctl = ControllerState::new(3, Task::MsSsim, 0, false).unwrap();
        let bytes = codec.compress_bytes(&image(64, 64, 4), &ctl, &mut rng).unwrap();
        assert!(codec.decompress_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 6] ^= 0x40;
        assert!(codec.decompress_bytes(&flipped).is_err());
    }

    #[test]
    fn audit_detects_premature_visibility() {
        let topo = TopologyField::checkerboard(2, 2).unwrap();
        let order = stage_order(&topo, 1);
        let good = DecodeTrace { decoded: order.clone(), visible: vec![vec![], order[0].clone()] };
        audit_access_order(&good, &topo, 1, 3).unwrap();
        let early = DecodeTrace { decoded: order.clone(), visible: vec![vec![order[1][0]], order[0].clone()] };
        assert!(audit_access_order(&early, &topo, 1, 3).is_err());
        let hidden = DecodeTrace { decoded: order.clone(), visible: vec![vec![], vec![order[0][0]]] };
        assert!(audit_access_order(&hidden, &topo, 1, 3).is_err());
    }
}
