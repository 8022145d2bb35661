//! Rate, distortion and complexity terms of the training objective.

use candle_core::Tensor;

use crate::control::Task;
use crate::error::{invalid, Result};
use crate::metrics::{ms_ssim_tensor, mse_per_image};

/// Distortion scale for the PSNR task: the λ_D table is defined against MSE
/// on the 8-bit scale.
pub const MSE_SCALE: f64 = 255.0 * 255.0;

/// `λ_D`-weighted distortion of each image under `task`, `[B]`:
/// `255²·MSE` or `1 − MS-SSIM`.
pub fn distortion(task: Task, x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    match task {
        Task::Psnr => Ok((mse_per_image(x, x_hat)? * MSE_SCALE)?),
        Task::MsSsim => Ok(ms_ssim_tensor(x, x_hat)?.affine(-1.0, 1.0)?),
    }
}

/// Continuous complexity weight `−log2 u` for `u ∈ (0, 1]`.
pub fn lambda_c_continuous(u: f64) -> Result<f64> {
    if !(u > 0.0 && u <= 1.0) {
        return Err(invalid(format!("u = {u} outside (0, 1]")));
    }
    Ok(-u.log2())
}

/// Position of `l` between the losses at the widest (`→ 0`) and narrowest
/// (`→ 1`) structures. The denominator is kept away from zero.
pub fn rd_ratio(l: &Tensor, at_max: f64, at_min: f64) -> Result<Tensor> {
    let span = (at_min - at_max).abs().max(1e-3 * at_max.abs().max(1e-6));
    let span = if at_min >= at_max { span } else { -span };
    Ok(((l - at_max)? / span)?)
}
