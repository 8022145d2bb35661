//! Rate-distortion-complexity sweeps over images and budget levels.

pub mod harness;

use candle_core::Tensor;
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{count_stage_invocations, Codec};
use crate::complexity::pipeline_report;
use crate::control::{ControllerState, Task};
use crate::data::image_to_tensor;
use crate::error::Result;
use crate::metrics::{ms_ssim, psnr, RdPoint};
use crate::model::Model;

/// One compressed image at one setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image: String,
    pub level: usize,
    pub quality: usize,
    pub task: Task,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    pub macs_kpp: f64,
    pub stages: usize,
}

impl EvalRow {
    pub fn point(&self) -> RdPoint {
        RdPoint {
            bpp: self.bpp,
            psnr: self.psnr,
            msssim: self.msssim,
            macs: self.macs_kpp,
            level: self.level,
            quality: self.quality,
        }
    }
}

/// Compresses and decompresses `x: [1, 3, H, W]` at every level in
/// `levels`, measuring the coded size and the reconstruction.
pub fn evaluate_tensor<R: Rng + ?Sized>(
    codec: &Codec,
    name: &str,
    x: &Tensor,
    levels: &[usize],
    task: Task,
    data_adaptive: bool,
    rng: &mut R,
) -> Result<Vec<EvalRow>> {
    let model = codec.model();
    let (_, _, h, w) = x.dims4()?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let controller = ControllerState::new(level, task, model.state.quality, data_adaptive)?;
        let (bs, report) = codec.compress_with_report(x, &controller, rng)?;
        let bytes = bs.to_bytes();
        let decoded = codec.decompress_bytes(&bytes)?;
        let (ph, pw) = (report.latents.y_size.0 * 16, report.latents.y_size.1 * 16);
        rows.push(EvalRow {
            image: name.to_string(),
            level,
            quality: model.state.quality,
            task,
            bpp: (bytes.len() * 8) as f64 / (h * w) as f64,
            psnr: psnr(x, &decoded.image)?,
            msssim: ms_ssim(x, &decoded.image)?,
            macs_kpp: pipeline_report(model, &report.structure, ph, pw)?.kmacs_per_pixel(),
            stages: count_stage_invocations(&bs)?,
        });
    }
    Ok(rows)
}

/// [`evaluate_tensor`] on an 8-bit image.
pub fn evaluate_image<R: Rng + ?Sized>(
    model: &Model,
    name: &str,
    img: &RgbImage,
    levels: &[usize],
    task: Task,
    data_adaptive: bool,
    rng: &mut R,
) -> Result<Vec<EvalRow>> {
    let x = image_to_tensor(img, model.device())?;
    evaluate_tensor(&Codec::new(model), name, &x, levels, task, data_adaptive, rng)
}

/// Mean of each level's rows, in level order.
pub fn mean_by_level(rows: &[EvalRow]) -> Vec<RdPoint> {
    let mut levels: Vec<usize> = rows.iter().map(|r| r.level).collect();
    levels.sort_unstable();
    levels.dedup();
    levels
        .into_iter()
        .map(|level| {
            let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.level == level).collect();
            let n = sel.len() as f64;
            let mean = |f: fn(&EvalRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
            RdPoint {
                bpp: mean(|r| r.bpp),
                psnr: mean(|r| r.psnr),
                msssim: mean(|r| r.msssim),
                macs: mean(|r| r.macs_kpp),
                level,
                quality: sel[0].quality,
            }
        })
        .collect()
}
