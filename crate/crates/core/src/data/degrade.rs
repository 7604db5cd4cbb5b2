use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use super::CenterSpec;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn check_nonnegative(full: &Tensor) -> Result<()> {
    if let Some(i) = full.data().iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::Domain(format!(
            "degrade needs nonnegative finite intensities, element {i} is {}",
            full.data()[i]
        )));
    }
    Ok(())
}

/// Poisson thinning: `Poisson(x·count_scale/drf)·drf/count_scale` per voxel.
/// The expectation is preserved and the variance grows linearly in `drf`.
pub fn thin(full: &Tensor, count_scale: f64, drf: f64, seed: u64) -> Result<Tensor> {
    check_nonnegative(full)?;
    if !(count_scale > 0.0) || !(drf >= 1.0) {
        return Err(Error::Domain(format!(
            "need count_scale > 0 and drf >= 1, got {count_scale} and {drf}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_count = drf / count_scale;
    let data = full
        .data()
        .iter()
        .map(|&x| {
            let lambda = x as f64 / per_count;
            if lambda <= 0.0 {
                return 0.0;
            }
            let k: f64 = Poisson::new(lambda).expect("positive finite rate").sample(&mut rng);
            (k * per_count) as f32
        })
        .collect();
    Tensor::new(full.shape(), data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as usize;
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur over the last three axes, edge-clamped.
pub fn gaussian_blur(v: &Tensor, sigma: f64) -> Result<Tensor> {
    if sigma < 0.0 {
        return Err(Error::Domain(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let s = v.shape();
    if s.len() < 3 {
        return dim_err(format!("blur needs a volume, got {s:?}"));
    }
    let n = s.len();
    let dims = [s[n - 3], s[n - 2], s[n - 1]];
    let vol: usize = dims.iter().product();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut buf: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        for base in (0..buf.len()).step_by(vol) {
            for start in 0..vol {
                // visit each line once, from its first element
                if (start / stride) % len != 0 {
                    continue;
                }
                line.clear();
                line.extend((0..len).map(|i| buf[base + start + i * stride]));
                for i in 0..len {
                    let mut acc = 0.0;
                    for (j, &w) in kernel.iter().enumerate() {
                        let src = (i as isize + j as isize - radius).clamp(0, len as isize - 1);
                        acc += w * line[src as usize];
                    }
                    buf[base + start + i * stride] = acc;
                }
            }
        }
    }
    Tensor::new(s, buf.into_iter().map(|x| x as f32).collect())
}

/// Low-dose simulation before the intensity affine: Poisson thinning then
/// point-spread blur.
pub fn degrade_counts(full: &Tensor, c: &CenterSpec, seed: u64) -> Result<Tensor> {
    let thinned = thin(full, c.count_scale, c.drf, seed)?;
    gaussian_blur(&thinned, c.psf_sigma)
}

/// Full low-dose simulation: thinning, blur, then `gain·x + offset`.
pub fn degrade(full: &Tensor, c: &CenterSpec, seed: u64) -> Result<Tensor> {
    let mut low = degrade_counts(full, c, seed)?;
    let (g, o) = (c.intensity_gain as f32, c.intensity_offset as f32);
    low.data_mut().iter_mut().for_each(|x| *x = g * *x + o);
    Ok(low)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blur_preserves_constants_and_mass_direction() {
        let v = Tensor::full(&[1, 6, 5, 4], 2.0);
        let b = gaussian_blur(&v, 1.3).unwrap();
        assert!(b.data().iter().all(|&x| (x - 2.0).abs() < 1e-6));
        let mut spike = Tensor::zeros(&[1, 9, 9, 9]);
        spike.data_mut()[4 * 81 + 4 * 9 + 4] = 1.0;
        let b = gaussian_blur(&spike, 1.0).unwrap();
        let total: f64 = b.data().iter().map(|&x| x as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(b.data()[4 * 81 + 4 * 9 + 4] < 0.1);
        assert!((b.data()[4 * 81 + 4 * 9 + 3] - b.data()[3 * 81 + 4 * 9 + 4]).abs() < 1e-7);
    }

    #[test]
    fn negative_input_is_a_domain_error() {
        let v = Tensor::new(&[1, 1, 1, 2], vec![0.5, -0.1]).unwrap();
        assert!(matches!(thin(&v, 10.0, 2.0, 0), Err(Error::Domain(_))));
    }
}
