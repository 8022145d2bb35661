//! Comparison of intra-node orderings on a frozen backbone.
//!
//! The transforms and the hyperprior are shared, so the reconstruction is
//! identical for every ordering and only the rate of `ŷ` differs. Each
//! ordering gets its own copy of the context and merge path, fine-tuned from
//! the backbone's; learned orderings also train a fresh topology generator.

use std::fmt;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{count_stage_invocations, Codec};
use crate::control::{ControllerState, Task};
use crate::entropy::{quantize, ContextMasks, QuantMode, ALPHABET_MAX, ALPHABET_MIN};
use crate::error::{invalid, Error, Result};
use crate::metrics::psnr;
use crate::model::Model;
use crate::nn::round_ste;
use crate::structure::{EdgeId, TopologyField};
use crate::training::{bits_y, random_tile, topology_rate, Encoded, Select};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    /// One partite: the hyperprior alone predicts every element.
    NoContext,
    /// Two spatial passes in a checkerboard, all channels together.
    Checkerboard,
    /// One pass per channel group.
    ChannelWise { stages: usize },
    /// Tile chosen by a generator trained with VIMCO.
    Learned { stages: usize },
}

impl Ordering {
    /// The six orderings of the standard comparison.
    pub const STANDARD: [Ordering; 6] = [
        Ordering::NoContext,
        Ordering::Checkerboard,
        Ordering::ChannelWise { stages: 4 },
        Ordering::Learned { stages: 2 },
        Ordering::Learned { stages: 4 },
        Ordering::Learned { stages: 10 },
    ];

    pub fn stages(self) -> usize {
        match self {
            Ordering::NoContext => 1,
            Ordering::Checkerboard => 2,
            Ordering::ChannelWise { stages } | Ordering::Learned { stages } => stages,
        }
    }

    /// Fixed tile for `groups` channel groups; `None` for learned orderings.
    pub fn tile(self, groups: usize) -> Option<Vec<u8>> {
        match self {
            Ordering::NoContext => Some(vec![0; groups * 4]),
            Ordering::Checkerboard => Some((0..groups).flat_map(|_| [0, 1, 1, 0]).collect()),
            Ordering::ChannelWise { stages } => Some((0..groups).flat_map(|g| [(g * stages / groups) as u8; 4]).collect()),
            Ordering::Learned { .. } => None,
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ordering::NoContext => f.write_str("baseline-no-context"),
            Ordering::Checkerboard => f.write_str("checkerboard"),
            Ordering::ChannelWise { .. } => f.write_str("channel-wise"),
            Ordering::Learned { stages } => write!(f, "learned-{stages}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub generator_learning_rate: f64,
    pub vimco_samples: usize,
    /// Leading fraction of steps trained on uniformly random tiles.
    pub warmup_fraction: f64,
    /// Backbone complexity level used for every ordering.
    pub level: usize,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 16,
            learning_rate: 1e-3,
            generator_learning_rate: 1e-2,
            vimco_samples: 4,
            warmup_fraction: 0.1,
            level: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessRow {
    pub name: String,
    pub stages: usize,
    pub groups: usize,
    pub tile: Vec<u8>,
    /// Context-path invocations needed to decode one image.
    pub decode_stages: usize,
    /// Mean coded bits per pixel over the evaluation images.
    pub bpp: f64,
    pub psnr: f64,
    /// Mean training rate over the last tenth of the fine-tuning steps.
    pub train_bpp: f64,
}

/// Backbone outputs of the training crops, computed once.
struct Pool {
    y: Tensor,
    hyper: Tensor,
    pixels: usize,
}

fn precompute(backbone: &Model, crops: &Tensor) -> Result<Pool> {
    let s = backbone.non_adaptive_structure(0)?;
    let (n, _, h, w) = crops.dims4()?;
    let (mut ys, mut hs) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(16) {
        let x = crops.narrow(0, start, 16.min(n - start))?;
        let y = backbone.analysis.forward(&x, s.choice(EdgeId::Analysis))?;
        let z = backbone.hyper_analysis.forward(&y, s.choice(EdgeId::HyperAnalysis))?;
        let z_hat = round_ste(&z)?.clamp(ALPHABET_MIN as f32, ALPHABET_MAX as f32)?;
        hs.push(backbone.hyper_synthesis.forward(&z_hat, s.choice(EdgeId::HyperSynthesis))?.detach());
        ys.push(y.detach());
    }
    Ok(Pool { y: Tensor::cat(&ys, 0)?, hyper: Tensor::cat(&hs, 0)?, pixels: h * w })
}

/// A copy of `backbone` whose intra-node structure is `ordering`.
fn variant(backbone: &Model, ordering: Ordering) -> Result<Model> {
    let mut cfg = backbone.config().clone();
    cfg.stages = ordering.stages();
    let mut model = Model::new(cfg, backbone.device())?;
    model.transplant_from(backbone)?;
    model.state = backbone.state.clone();
    model.state.tile = ordering.tile(model.groups());
    Ok(model)
}

/// Fine-tunes one ordering on `pool` and returns the mean rate of the
/// final tenth of the steps.
fn fine_tune(model: &mut Model, ordering: Ordering, pool: &Pool, cfg: &HarnessConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let adam = |lr: f64| ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() };
    let mut context_opt = AdamW::new(model.vars_with_prefix(&["context"]), adam(cfg.learning_rate))?;
    let learned = matches!(ordering, Ordering::Learned { .. });
    let mut generator_opt = AdamW::new(model.vars_with_prefix(&["generator"]), adam(cfg.generator_learning_rate))?;
    let merge = Select::Index(model.non_adaptive_structure(cfg.level)?.choice(EdgeId::Merge));
    let (n, _, lh, lw) = pool.y.dims4()?;
    let dev = model.device().clone();
    let fixed: Option<ContextMasks> = match &model.state.tile {
        Some(tile) => Some(model.context.masks(&TopologyField::from_tile(model.stages(), tile, lh, lw)?, &dev)?),
        None => None,
    };
    let tail_start = cfg.steps - (cfg.steps / 10).max(1);
    let mut tail = Vec::new();
    for step in 0..cfg.steps {
        let idx: Vec<u32> = (0..cfg.batch).map(|_| rng.random_range(0..n as u32)).collect();
        let idx = Tensor::from_vec(idx, cfg.batch, &dev)?;
        let y = pool.y.index_select(&idx, 0)?;
        let hyper = pool.hyper.index_select(&idx, 0)?;
        let enc = Encoded {
            y_noisy: quantize(&y, QuantMode::Noise, rng)?,
            y_ste: round_ste(&y)?.clamp(ALPHABET_MIN as f32, ALPHABET_MAX as f32)?,
            hyper,
            bits_z: Tensor::zeros(cfg.batch, y.dtype(), &dev)?,
        };
        let (bits, surrogate) = match &fixed {
            Some(masks) => (bits_y(model, &enc, masks, &merge)?, None),
            None => {
                let m = cfg.vimco_samples;
                let warm = (step as f64) < cfg.warmup_fraction * cfg.steps as f64;
                let (tiles, log_q) = if warm {
                    ((0..m).map(|_| random_tile(model.stages(), model.groups(), rng)).collect(), None)
                } else {
                    let (t, lq) = model.generator.sample_tiles(m, rng)?;
                    (t, Some(lq))
                };
                let tr = topology_rate(model, &enc, &merge, &tiles, log_q.as_ref(), pool.pixels)?;
                (tr.bits, Some(tr.surrogate))
            }
        };
        let rate = (bits.mean_all()? / pool.pixels as f64)?;
        let loss = match &surrogate {
            Some(s) => (&rate + s)?,
            None => rate.clone(),
        };
        let value = rate.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { step, detail: format!("{ordering} rate = {value}") });
        }
        if step >= tail_start {
            tail.push(value);
        }
        let grads = loss.backward()?;
        context_opt.step(&grads)?;
        if learned {
            generator_opt.step(&grads)?;
        }
    }
    if learned {
        model.state.tile = Some(model.generator.argmax_tile()?);
    }
    Ok(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Fine-tunes every ordering on `train: [N, 3, h, w]` crops and measures
/// coded rates on `eval` images `[1, 3, H, W]`.
pub fn ar_variant_harness(
    backbone: &Model,
    orderings: &[Ordering],
    train: &Tensor,
    eval: &[Tensor],
    cfg: &HarnessConfig,
) -> Result<Vec<HarnessRow>> {
    let mut sets = ar_variant_harness_sets(backbone, orderings, train, &[eval], cfg)?;
    Ok(sets.remove(0))
}

/// [`ar_variant_harness`] scored on several evaluation sets from one
/// fine-tuning run per ordering; the result holds one table per set.
pub fn ar_variant_harness_sets(
    backbone: &Model,
    orderings: &[Ordering],
    train: &Tensor,
    eval_sets: &[&[Tensor]],
    cfg: &HarnessConfig,
) -> Result<Vec<Vec<HarnessRow>>> {
    if backbone.state.stage < 1 {
        return Err(Error::Checkpoint("the backbone has not been trained".into()));
    }
    if eval_sets.is_empty() || eval_sets.iter().any(|e| e.is_empty()) || cfg.steps == 0 || cfg.batch == 0 {
        return Err(invalid("the harness needs evaluation images, steps and a batch size"));
    }
    let pool = precompute(backbone, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tables = vec![Vec::with_capacity(orderings.len()); eval_sets.len()];
    for &ordering in orderings {
        let mut model = variant(backbone, ordering)?;
        let train_bpp = fine_tune(&mut model, ordering, &pool, cfg, &mut rng)?;
        let codec = Codec::new(&model);
        let controller = ControllerState::new(cfg.level, Task::Psnr, model.state.quality, false)?;
        for (set, eval) in eval_sets.iter().enumerate() {
            let (mut bpp, mut quality, mut decode_stages) = (0.0, 0.0, 0);
            for x in eval.iter() {
                let (_, _, h, w) = x.dims4()?;
                let bs = codec.compress(x, &controller, &mut rng)?;
                let bytes = bs.to_bytes();
                let decoded = codec.decompress_bytes(&bytes)?;
                bpp += (bytes.len() * 8) as f64 / (h * w) as f64;
                quality += psnr(x, &decoded.image)?;
                decode_stages = decode_stages.max(count_stage_invocations(&bs)?);
            }
            let k = eval.len() as f64;
            let row = HarnessRow {
                name: ordering.to_string(),
                stages: model.stages(),
                groups: model.groups(),
                tile: model.topology_tile()?,
                decode_stages,
                bpp: bpp / k,
                psnr: quality / k,
                train_bpp,
            };
            log::info!("{} (set {set}): {:.4} bpp ({:.4} in training), {} stages", row.name, row.bpp, row.train_bpp, row.decode_stages);
            tables[set].push(row);
        }
    }
    Ok(tables)
}
