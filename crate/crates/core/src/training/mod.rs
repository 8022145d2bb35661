//! Two-stage optimization.
//!
//! Stage 1 trains the network weights under uniformly random structures and
//! random topologies. Stage 2 trains the structure heads, the control branch
//! and the topology generator together with the weights, under the
//! normalized rate-distortion-complexity objective.

pub mod forward;
pub mod losses;
pub mod run;
pub mod search;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{project_to_budget, structure_cost, Task, LAMBDA_C, LAMBDA_D, LEVELS};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ModelConfig, RdExtremes};
use crate::structure::inter::gumbel_softmax;
use crate::structure::{EdgeId, InterEdgeSpec, StructureSample};

pub use forward::{bits_y, encode, synthesize, EdgeSelection, Encoded, Select};
pub use losses::{distortion, lambda_c_continuous, rd_ratio, MSE_SCALE};
pub use forward::{per_image_bits, random_tile, topology_rate, TopologyRate};
pub use run::{run_stage, start_training};
pub use search::greedy_width_search;

/// Every constant of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Leading fraction of stage 2 trained on random topologies.
    pub warmup_fraction: f64,
    pub batch: usize,
    pub crop: u32,
    pub learning_rate: f64,
    /// Step size of the structure heads, control branch and generator.
    pub structure_learning_rate: f64,
    pub lambda_d_psnr: [f64; 4],
    pub lambda_d_msssim: [f64; 4],
    pub lambda_c: [f64; LEVELS],
    pub vimco_samples: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Decay of the moving averages of the loss at the extreme structures.
    pub ema_decay: f64,
    /// Stage-2 steps between refreshes of those averages.
    pub extremes_every: usize,
    /// Weight of the hinge on budget excess, relative to `C_max − C_min`.
    pub budget_weight: f64,
    /// Probability that a stage-2 batch trains the data-adaptive branch.
    pub adaptive_fraction: f64,
    /// Probability that a stage-1 batch uses the MS-SSIM task.
    pub msssim_fraction: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_steps: 40_000,
            stage2_steps: 10_000,
            warmup_fraction: 0.05,
            batch: 16,
            crop: 64,
            learning_rate: 1e-4,
            structure_learning_rate: 1e-3,
            lambda_d_psnr: LAMBDA_D[0],
            lambda_d_msssim: LAMBDA_D[1],
            lambda_c: LAMBDA_C,
            vimco_samples: 4,
            tau_start: 1.0,
            tau_end: 0.2,
            ema_decay: 0.9,
            extremes_every: 10,
            budget_weight: 10.0,
            adaptive_fraction: 0.5,
            msssim_fraction: 0.0,
            log_every: 100,
            checkpoint_every: 1000,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps == 0 || self.stage2_steps == 0 {
            return Err(Error::Config("stage step counts must be positive".into()));
        }
        if self.batch == 0 || self.crop == 0 || self.crop % 64 != 0 {
            return Err(Error::Config(format!("batch {} / crop {} invalid", self.batch, self.crop)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) || self.vimco_samples < 2 {
            return Err(Error::Config("warmup fraction must be in [0, 1) and VIMCO needs ≥ 2 samples".into()));
        }
        if !(self.learning_rate > 0.0 && self.structure_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_d(&self, task: Task, quality: usize) -> Result<f64> {
        let table = match task {
            Task::Psnr => &self.lambda_d_psnr,
            Task::MsSsim => &self.lambda_d_msssim,
        };
        table.get(quality).copied().ok_or_else(|| invalid(format!("quality {quality} outside 0..4")))
    }

    /// Gumbel-softmax temperature, linear from `tau_start` to `tau_end`.
    pub fn temperature(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.tau_start + (self.tau_end - self.tau_start) * p
    }
}

/// Contents of a training configuration file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub quality: usize,
    /// Folder of training images; procedural content when absent.
    pub data: Option<PathBuf>,
    /// Output checkpoint path.
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.schedule.validate()?;
        if cfg.quality >= 4 {
            return Err(Error::Config(format!("quality {} outside 0..4", cfg.quality)));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Batch means of the loss terms of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdcRecord {
    pub stage: u8,
    pub step: usize,
    /// Task of each image.
    pub tasks: Vec<Task>,
    /// Budget level of each image; empty in stage 1.
    pub levels: Vec<usize>,
    /// Bits per pixel.
    pub rate: f64,
    /// `255²·MSE` or `1 − MS-SSIM`, averaged over images of either task.
    pub distortion: f64,
    /// Rate plus weighted distortion.
    pub rd: f64,
    /// Expected complexity ratio `L_C ∈ [0, 1]`.
    pub complexity: f64,
    /// Normalized rate-distortion position `L_RD`.
    pub rd_ratio: f64,
    /// Score-function surrogate of the topology objective.
    pub intra: f64,
    pub total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(v: f64, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, detail: format!("{what} = {v}") })
    }
}

const NETWORK: [&str; 6] = ["g_a", "h_a", "h_s", "g_s", "prior", "context"];
const STRUCTURE: [&str; 3] = ["levels", "control", "generator"];

/// A model with its optimizers and the state of the training loop.
pub struct Trainer {
    pub model: Model,
    schedule: TrainSchedule,
    network_opt: AdamW,
    structure_opt: AdamW,
    rng: ChaCha8Rng,
    specs: Vec<InterEdgeSpec>,
    fixed: f64,
    c_min: f64,
    c_max: f64,
    budgets: [f64; LEVELS],
}

impl Trainer {
    pub fn new(model: Model, schedule: TrainSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let adam = |lr: f64| ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() };
        let network_opt = AdamW::new(model.vars_with_prefix(&NETWORK), adam(schedule.learning_rate))?;
        let structure_opt = AdamW::new(model.vars_with_prefix(&STRUCTURE), adam(schedule.structure_learning_rate))?;
        let specs = model.edge_specs()?;
        let fixed = model.fixed_cost();
        let (c_min, c_max) = model.cost_range()?;
        let budgets = *model.budgets()?.budgets();
        Ok(Self {
            model,
            schedule,
            network_opt,
            structure_opt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            specs,
            fixed,
            c_min,
            c_max,
            budgets,
        })
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    /// Marks the start of `stage`, restarting its step count when the model
    /// was last trained in another stage.
    pub fn begin_stage(&mut self, stage: u8) {
        if self.model.state.stage != stage {
            self.model.state.stage = stage;
            self.model.state.stage_step = 0;
        }
    }

    fn random_tile(&mut self) -> Vec<u8> {
        random_tile(self.model.stages(), self.model.groups(), &mut self.rng)
    }

    /// Per-image rate in bits per pixel and reconstruction of `x` under a
    /// hard structure.
    fn rate_and_reconstruction(&mut self, x: &Tensor, structure: &StructureSample) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        let sel = EdgeSelection::hard(structure);
        let enc = encode(&self.model, x, &sel, &mut self.rng)?;
        let (_, _, lh, lw) = enc.y_ste.dims4()?;
        let topo = structure.topology(lh, lw)?;
        let masks = self.model.context.masks(&topo, self.model.device())?;
        let by = bits_y(&self.model, &enc, &masks, sel.get(EdgeId::Merge)?)?;
        let x_hat = synthesize(&self.model, &enc.y_ste, &sel)?;
        Ok((((by + &enc.bits_z)? / (h * w) as f64)?, x_hat))
    }

    /// Per-image `λ_D` and a `[B]` distortion where image `i` is measured
    /// under `tasks[i]`.
    fn task_distortion(&self, tasks: &[Task], x: &Tensor, x_hat: &Tensor) -> Result<(Tensor, Tensor)> {
        let dev = self.model.device();
        let quality = self.model.state.quality;
        let lambda = tasks.iter().map(|&t| Ok(self.schedule.lambda_d(t, quality)? as f32)).collect::<Result<Vec<_>>>()?;
        let mut dist: Option<Tensor> = None;
        for task in Task::ALL {
            let mask: Vec<f32> = tasks.iter().map(|&t| if t == task { 1.0 } else { 0.0 }).collect();
            if mask.iter().all(|&m| m == 0.0) {
                continue;
            }
            let d = (distortion(task, x, x_hat)? * Tensor::from_vec(mask, tasks.len(), dev)?)?;
            dist = Some(match dist {
                None => d,
                Some(acc) => (acc + d)?,
            });
        }
        let dist = dist.ok_or_else(|| Error::Empty("empty batch".into()))?;
        Ok((Tensor::from_vec(lambda, tasks.len(), dev)?, dist))
    }

    /// One stage-1 update on `x: [B, 3, H, W]` under a uniformly random
    /// structure and topology.
    pub fn stage1_step(&mut self, x: &Tensor) -> Result<RdcRecord> {
        let b = x.dim(0)?;
        let n = self.model.num_variants();
        let inter: BTreeMap<EdgeId, usize> = EdgeId::ALL.into_iter().map(|e| (e, self.rng.random_range(0..n))).collect();
        let tile = self.random_tile();
        let structure = StructureSample::new(inter, self.model.stages(), tile);
        let task = if self.rng.random_bool(self.schedule.msssim_fraction) { Task::MsSsim } else { Task::Psnr };
        let tasks = vec![task; b];
        let (rate, x_hat) = self.rate_and_reconstruction(x, &structure)?;
        let (lambda_d, dist) = self.task_distortion(&tasks, x, &x_hat)?;
        let loss = (&rate + (&dist * &lambda_d)?)?.mean_all()?;
        let step = self.model.state.step;
        let total = scalar(&loss)?;
        check_finite(total, step, "stage-1 loss")?;
        let grads = loss.backward()?;
        self.network_opt.step(&grads)?;
        self.begin_stage(1);
        self.model.state.step += 1;
        self.model.state.stage_step += 1;
        Ok(RdcRecord {
            stage: 1,
            step,
            tasks,
            levels: Vec::new(),
            rate: scalar(&rate.mean_all()?)?,
            distortion: scalar(&dist.mean_all()?)?,
            rd: total,
            complexity: 0.0,
            rd_ratio: 0.0,
            intra: 0.0,
            total,
        })
    }

    /// Re-estimates the loss of both tasks at the narrowest and widest
    /// structures on `x` and folds it into the moving averages.
    pub fn refresh_extremes(&mut self, x: &Tensor) -> Result<[RdExtremes; 2]> {
        let b = x.dim(0)?;
        let tile = self.model.topology_tile()?;
        let n = self.model.num_variants();
        let mut vals = [[0.0; 2]; 2];
        for (slot, index) in [0, n - 1].into_iter().enumerate() {
            let s = StructureSample::uniform(index, self.model.stages(), tile.clone());
            let (rate, x_hat) = self.rate_and_reconstruction(x, &s)?;
            let rate = scalar(&rate.mean_all()?)?;
            for task in Task::ALL {
                let (lambda, dist) = self.task_distortion(&vec![task; b], x, &x_hat)?;
                vals[task.index()][slot] = rate + scalar(&(dist * lambda)?.mean_all()?)?;
            }
        }
        let decay = self.schedule.ema_decay;
        let fold = |old: Option<f64>, v: f64| Some(old.map_or(v, |o| decay * o + (1.0 - decay) * v));
        for task in Task::ALL {
            let e = &mut self.model.state.rd_extremes[task.index()];
            e.at_min = fold(e.at_min, vals[task.index()][0]);
            e.at_max = fold(e.at_max, vals[task.index()][1]);
        }
        Ok(self.model.state.rd_extremes)
    }

    fn edge_costs(&self, edge: EdgeId) -> Result<Tensor> {
        let spec = self.specs.iter().find(|s| s.edge() == edge).expect("spec for every edge");
        let v: Vec<f32> = spec.variant_costs().iter().map(|&c| c as f32).collect();
        Ok(Tensor::from_vec(v, spec.num_variants(), self.model.device())?)
    }

    /// Budget levels for a batch of `b`: shuffled passes over all levels.
    fn batch_levels(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            let mut pass: Vec<usize> = (0..LEVELS).collect();
            pass.shuffle(&mut self.rng);
            out.extend(pass);
        }
        out.truncate(b);
        out
    }

    /// One stage-2 update at `progress ∈ [0, 1]` through stage 2. Every image
    /// in the batch draws its own budget level and task.
    pub fn stage2_step(&mut self, x: &Tensor, progress: f64) -> Result<RdcRecord> {
        let (b, _, h, w) = x.dims4()?;
        let dev = self.model.device().clone();
        let step = self.model.state.step;
        let levels = self.batch_levels(b);
        let tasks: Vec<Task> = (0..b).map(|_| Task::ALL[self.rng.random_range(0..2)]).collect();
        if self.model.state.rd_extremes.iter().any(|e| e.at_min.is_none() || e.at_max.is_none()) {
            self.refresh_extremes(x)?;
        }
        let mut at_max = Vec::with_capacity(b);
        let mut span = Vec::with_capacity(b);
        for t in &tasks {
            let e = self.model.state.rd_extremes[t.index()];
            let (lo, hi) = (e.at_max.unwrap_or(0.0), e.at_min.unwrap_or(1.0));
            let s = (hi - lo).abs().max(1e-3 * lo.abs().max(1e-6));
            at_max.push(lo as f32);
            span.push(if hi >= lo { s } else { -s } as f32);
        }
        let vec_b = |v: Vec<f32>| Tensor::from_vec(v, b, &dev);
        let at_max = vec_b(at_max)?;
        let span_rd = vec_b(span)?;
        let lambda_c = vec_b(levels.iter().map(|&l| self.schedule.lambda_c[l] as f32).collect())?;
        let budgets = vec_b(levels.iter().map(|&l| self.budgets[l] as f32).collect())?;

        let adaptive = self.rng.random_bool(self.schedule.adaptive_fraction);
        let logits = if adaptive {
            self.model.control().logits_batch(Some(x), &levels, &tasks)?
        } else {
            let idx = Tensor::from_vec(levels.iter().map(|&l| l as u32).collect::<Vec<_>>(), b, &dev)?;
            self.model.level_logits().index_select(&idx, 0)?
        };
        let tau = self.schedule.temperature(progress);
        let mut sel = BTreeMap::new();
        let mut cost: Option<Tensor> = None;
        for (k, e) in EdgeId::ALL.into_iter().enumerate() {
            let l = logits.narrow(1, k, 1)?.squeeze(1)?.contiguous()?;
            let weights = gumbel_softmax(&l, tau, true, &mut self.rng)?;
            let c = weights.broadcast_mul(&self.edge_costs(e)?)?.sum(D::Minus1)?;
            cost = Some(match cost {
                None => c,
                Some(acc) => (acc + c)?,
            });
            sel.insert(e, Select::Mix(weights));
        }
        let sel = EdgeSelection(sel);
        let cost = (cost.expect("five edges") + self.fixed)?;
        let span_c = self.c_max - self.c_min;
        let l_c = ((&cost - self.c_min)? / span_c)?;
        let hinge = ((&cost - &budgets)?.relu()? / span_c)?;

        let enc = encode(&self.model, x, &sel, &mut self.rng)?;
        let m = self.schedule.vimco_samples;
        let warm = progress < self.schedule.warmup_fraction;
        let (tiles, logq) = if warm {
            ((0..m).map(|_| self.random_tile()).collect::<Vec<_>>(), None)
        } else {
            let (t, lq) = self.model.generator.sample_tiles(m, &mut self.rng)?;
            (t, Some(lq))
        };
        let tr = topology_rate(&self.model, &enc, sel.get(EdgeId::Merge)?, &tiles, logq.as_ref(), h * w)?;
        let (by, intra) = (tr.bits, tr.surrogate);

        let x_hat = synthesize(&self.model, &enc.y_ste, &sel)?;
        let rate = ((by + &enc.bits_z)? / (h * w) as f64)?;
        let (lambda_d, dist) = self.task_distortion(&tasks, x, &x_hat)?;
        let l_rd = (&rate + (&dist * &lambda_d)?)?;
        let ratio = ((&l_rd - &at_max)? / &span_rd)?;
        let per_image = ((&ratio + (&l_c * &lambda_c)?)? + (&hinge * self.schedule.budget_weight)?)?;
        let loss = (per_image.mean_all()? + &intra)?;
        let total = scalar(&loss)?;
        check_finite(total, step, "stage-2 loss")?;
        let grads = loss.backward()?;
        self.network_opt.step(&grads)?;
        self.structure_opt.step(&grads)?;
        self.begin_stage(2);
        self.model.state.step += 1;
        self.model.state.stage_step += 1;
        if self.schedule.extremes_every > 0 && step % self.schedule.extremes_every == 0 {
            self.refresh_extremes(x)?;
        }
        Ok(RdcRecord {
            stage: 2,
            step,
            tasks,
            levels,
            rate: scalar(&rate.mean_all()?)?,
            distortion: scalar(&dist.mean_all()?)?,
            rd: scalar(&l_rd.mean_all()?)?,
            complexity: scalar(&l_c.mean_all()?)?,
            rd_ratio: scalar(&ratio.mean_all()?)?,
            intra: scalar(&intra)?,
            total,
        })
    }

    /// Mode of each level head, projected onto its budget and ordered by
    /// decreasing complexity.
    pub fn select_levels(&self) -> Result<Vec<Vec<usize>>> {
        let logits: Vec<Vec<Vec<f32>>> = self.model.level_logits().to_vec3()?;
        let mut levels = Vec::with_capacity(LEVELS);
        for (l, head) in logits.iter().enumerate() {
            let inter: BTreeMap<EdgeId, usize> = EdgeId::ALL
                .into_iter()
                .zip(head)
                .map(|(e, row)| (e, row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b })))
                .collect();
            let (inter, _) = project_to_budget(&inter, &self.specs, self.fixed, self.budgets[l])?;
            levels.push(inter);
        }
        levels.sort_by(|a, b| {
            structure_cost(b, &self.specs, self.fixed).total_cmp(&structure_cost(a, &self.specs, self.fixed))
        });
        Ok(levels.into_iter().map(|m| EdgeId::ALL.iter().map(|e| m[e]).collect()).collect())
    }

    /// Stores the selected levels and the generator's topology in the model state.
    pub fn finalize(&mut self) -> Result<()> {
        self.model.state.levels = Some(self.select_levels()?);
        self.model.state.tile = Some(self.model.generator.argmax_tile()?);
        Ok(())
    }
}
