use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

fn leading_and_dims(v: &Tensor) -> Result<(Vec<usize>, [usize; 3])> {
    let s = v.shape();
    if s.len() < 3 {
        return dim_err(format!("resample needs at least 3 dimensions, got {s:?}"));
    }
    let n = s.len();
    Ok((s[..n - 3].to_vec(), [s[n - 3], s[n - 2], s[n - 1]]))
}

/// Sample positions and weights for one axis, corners aligned.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Trilinear resampling of the last three axes to exactly `dims`.
pub fn resample_to(v: &Tensor, dims: [usize; 3]) -> Result<Tensor> {
    let (lead, src) = leading_and_dims(v)?;
    if dims.contains(&0) || src.contains(&0) {
        return dim_err(format!("cannot resample {:?} to {dims:?}", v.shape()));
    }
    let mut shape = lead.clone();
    shape.extend(dims);
    if src == dims {
        return Tensor::new(&shape, v.data().to_vec());
    }
    let [td, th, tw] = [
        axis_taps(src[0], dims[0]),
        axis_taps(src[1], dims[1]),
        axis_taps(src[2], dims[2]),
    ];
    let outer: usize = lead.iter().product();
    let in_vol = src[0] * src[1] * src[2];
    let d = v.data();
    let mut out = Vec::with_capacity(outer * dims.iter().product::<usize>());
    for o in 0..outer {
        let base = &d[o * in_vol..(o + 1) * in_vol];
        let at = |z: usize, y: usize, x: usize| base[(z * src[1] + y) * src[2] + x] as f64;
        for &(z0, z1, fz) in &td {
            for &(y0, y1, fy) in &th {
                for &(x0, x1, fx) in &tw {
                    let lerp_x = |z, y| at(z, y, x0) * (1.0 - fx) + at(z, y, x1) * fx;
                    let c0 = lerp_x(z0, y0) * (1.0 - fy) + lerp_x(z0, y1) * fy;
                    let c1 = lerp_x(z1, y0) * (1.0 - fy) + lerp_x(z1, y1) * fy;
                    out.push((c0 * (1.0 - fz) + c1 * fz) as f32);
                }
            }
        }
    }
    Tensor::new(&shape, out)
}

/// Trilinear resampling by a uniform factor; output extent is
/// `round(n · scale)` along each spatial axis.
pub fn resample(v: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0) || !scale.is_finite() {
        return dim_err(format!("resample scale must be positive, got {scale}"));
    }
    let (_, src) = leading_and_dims(v)?;
    let dims = src.map(|n| (n as f64 * scale).round() as usize);
    if dims.contains(&0) {
        return dim_err(format!(
            "resampling {src:?} by {scale} gives empty output {dims:?}"
        ));
    }
    resample_to(v, dims)
}
