use crate::data::Mask;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    if a.numel() == 0 {
        return dim_err("mse of empty tensors");
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(peak² / MSE)` in dB; identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// PSNR of an estimate against ground truth, peak = ground-truth maximum.
pub fn psnr_vs_reference(est: &Tensor, full: &Tensor) -> Result<f64> {
    let peak = full.data().iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    psnr(est, full, peak)
}

/// Relative bias of the lesion-region mean and maximum:
/// `|stat(est) - stat(full)| / stat(full)` over the masked voxels.
pub fn lesion_bias(est: &Tensor, full: &Tensor, mask: &Mask) -> Result<(f64, f64)> {
    same_shape(est, full)?;
    if mask.bits.len() != full.numel() {
        return dim_err(format!(
            "mask of {} voxels for volume of shape {:?}",
            mask.bits.len(),
            full.shape()
        ));
    }
    let (mut se, mut sf, mut n) = (0f64, 0f64, 0usize);
    let (mut me, mut mf) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for ((&e, &f), &m) in est.data().iter().zip(full.data()).zip(&mask.bits) {
        if m {
            se += e as f64;
            sf += f as f64;
            me = me.max(e as f64);
            mf = mf.max(f as f64);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoLesion);
    }
    let (mean_e, mean_f) = (se / n as f64, sf / n as f64);
    Ok(((mean_e - mean_f).abs() / mean_f, (me - mf).abs() / mf))
}
