//! Training loop with periodic checkpoints.

use std::path::Path;

use candle_core::Device;

use super::{RdcRecord, TrainConfig, Trainer};
use crate::data::CropSampler;
use crate::error::{invalid, Error, Result};
use crate::model::{Model, RdExtremes};

/// The model a run of `cfg` starts from. A checkpoint trained at another
/// quality is fine-tuned: its stage counters and loss averages are reset.
pub fn start_training(cfg: &TrainConfig, resume: Option<&Path>, device: &Device) -> Result<Model> {
    let mut model = match resume {
        Some(path) => Model::load(path, device)?,
        None => Model::new(cfg.model.clone(), device)?,
    };
    if resume.is_some() && model.config() != &cfg.model {
        log::warn!("checkpoint model configuration differs from the config file; using the checkpoint's");
    }
    if model.state.quality != cfg.quality {
        model.state.quality = cfg.quality;
        model.state.stage = 0;
        model.state.stage_step = 0;
        model.state.rd_extremes = [RdExtremes::default(); 2];
    }
    Ok(model)
}

/// Runs `stage` until its configured step count, calling `on_record` after
/// every update and saving to `checkpoint` periodically and at the end.
/// Stage 2 finishes by storing the selected levels and topology.
pub fn run_stage<F>(
    trainer: &mut Trainer,
    sampler: &mut CropSampler,
    stage: u8,
    checkpoint: Option<&Path>,
    mut on_record: F,
) -> Result<()>
where
    F: FnMut(&RdcRecord),
{
    let steps = match stage {
        1 => trainer.schedule().stage1_steps,
        2 => trainer.schedule().stage2_steps,
        _ => return Err(invalid(format!("no training stage {stage}"))),
    };
    if stage == 2 && trainer.model.state.stage == 0 {
        return Err(Error::Config("stage 2 needs a stage-1 checkpoint".into()));
    }
    let batch = trainer.schedule().batch;
    let every = trainer.schedule().checkpoint_every;
    let device = trainer.model.device().clone();
    trainer.begin_stage(stage);
    while trainer.model.state.stage_step < steps {
        let x = sampler.batch(batch, &device)?;
        let record = if stage == 1 {
            trainer.stage1_step(&x)?
        } else {
            trainer.stage2_step(&x, trainer.model.state.stage_step as f64 / steps as f64)?
        };
        on_record(&record);
        if let Some(path) = checkpoint {
            if every > 0 && trainer.model.state.stage_step % every == 0 {
                trainer.model.save(path)?;
            }
        }
    }
    if stage == 2 {
        trainer.finalize()?;
    }
    if let Some(path) = checkpoint {
        trainer.model.save(path)?;
    }
    Ok(())
}
