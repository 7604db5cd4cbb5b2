use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub axes: [f64; 3],
    pub intensity: f64,
}

impl Ellipsoid {
    /// Normalized radius: 1 on the surface.
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.axes[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Voxel mask over a `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            bits: vec![false; dims.iter().product()],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Family of synthetic anatomy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Overlapping organ-like ellipsoids with bright lesions.
    #[default]
    Body,
    /// A head outline filled with many small bright structures, no lesions.
    Brain,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    /// Nonnegative intensities, shape `[1, D, H, W]`.
    pub full: Tensor,
    pub lesion_mask: Mask,
    pub seed: u64,
    pub ellipsoids: Vec<Ellipsoid>,
    pub lesions: Vec<Ellipsoid>,
}

const EDGE: f64 = 0.08;

/// Soft indicator: about 1 inside, 0 outside, smooth across the surface.
fn profile(r: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) / EDGE).exp())
}

fn paint(vol: &mut [f32], dims: [usize; 3], e: &Ellipsoid) {
    let reach = 1.0 + 8.0 * EDGE;
    let range = |i: usize| {
        let lo = (e.center[i] - reach * e.axes[i]).floor().max(0.0) as usize;
        let hi = ((e.center[i] + reach * e.axes[i]).ceil() as usize + 1).min(dims[i]);
        lo..hi
    };
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                let v = (e.intensity * profile(e.radius([z as f64, y as f64, x as f64]))) as f32;
                let slot = &mut vol[(z * dims[1] + y) * dims[2] + x];
                *slot = slot.max(v);
            }
        }
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&n| n < 16) {
        return dim_err(format!("phantom dimensions must each be >= 16, got {dims:?}"));
    }
    Ok(())
}

fn uniform3<R: Rng>(rng: &mut R, dims: [usize; 3], lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| rng.random_range(lo..hi) * dims[i] as f64)
}

fn add_lesions<R: Rng>(rng: &mut R, vol: &mut [f32], dims: [usize; 3], n: usize) -> (Vec<Ellipsoid>, Mask) {
    let mut mask = Mask::empty(dims);
    let mut lesions = Vec::with_capacity(n);
    let idx = |p: [usize; 3]| (p[0] * dims[1] + p[1]) * dims[2] + p[2];
    for _ in 0..n {
        // lesions sit inside tissue; fall back to the brightest voxel
        let mut at = None;
        for _ in 0..1000 {
            let p = [0, 1, 2].map(|i| rng.random_range(3..dims[i] - 3));
            if vol[idx(p)] >= 0.2 {
                at = Some(p);
                break;
            }
        }
        let p = at.unwrap_or_else(|| {
            let i = (0..vol.len()).fold(0, |b, i| if vol[i] > vol[b] { i } else { b });
            [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
        });
        let background = (vol[idx(p)] as f64).max(0.2);
        let e = Ellipsoid {
            center: p.map(|c| c as f64),
            axes: [0, 1, 2].map(|_| rng.random_range(1.5..3.0)),
            intensity: background * rng.random_range(1.5..3.0),
        };
        paint(vol, dims, &e);
        let r = [0, 1, 2].map(|i| (e.axes[i] + 1.0).ceil() as usize);
        for z in p[0].saturating_sub(r[0])..(p[0] + r[0] + 1).min(dims[0]) {
            for y in p[1].saturating_sub(r[1])..(p[1] + r[1] + 1).min(dims[1]) {
                for x in p[2].saturating_sub(r[2])..(p[2] + r[2] + 1).min(dims[2]) {
                    if e.radius([z as f64, y as f64, x as f64]) <= 1.0 {
                        mask.bits[idx([z, y, x])] = true;
                    }
                }
            }
        }
        lesions.push(e);
    }
    (lesions, mask)
}

/// Body phantom: `n_ellipsoids` soft ellipsoids with intensities in
/// [0.2, 1.0] combined by maximum, plus `n_lesions` small lesions at 1.5–3×
/// the local background.
pub fn generate_phantom(seed: u64, dims: [usize; 3], n_ellipsoids: usize, n_lesions: usize) -> Result<Phantom> {
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vol = vec![0f32; dims.iter().product()];
    let ellipsoids: Vec<Ellipsoid> = (0..n_ellipsoids)
        .map(|_| Ellipsoid {
            center: uniform3(&mut rng, dims, 0.3, 0.7),
            axes: uniform3(&mut rng, dims, 0.1, 0.35),
            intensity: rng.random_range(0.2..1.0),
        })
        .collect();
    for e in &ellipsoids {
        paint(&mut vol, dims, e);
    }
    let (lesions, lesion_mask) = add_lesions(&mut rng, &mut vol, dims, n_lesions);
    Ok(Phantom {
        full: Tensor::new(&[1, dims[0], dims[1], dims[2]], vol)?,
        lesion_mask,
        seed,
        ellipsoids,
        lesions,
    })
}

/// Brain-like phantom: a dim head ellipsoid holding `n_structures` small
/// bright ellipsoids. It never has lesions.
pub fn generate_brain_phantom(seed: u64, dims: [usize; 3], n_structures: usize) -> Result<Phantom> {
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vol = vec![0f32; dims.iter().product()];
    let head = Ellipsoid {
        center: dims.map(|n| (n as f64 - 1.0) / 2.0),
        axes: uniform3(&mut rng, dims, 0.36, 0.44),
        intensity: rng.random_range(0.25..0.4),
    };
    let mut ellipsoids = vec![head];
    for _ in 0..n_structures {
        ellipsoids.push(Ellipsoid {
            center: uniform3(&mut rng, dims, 0.25, 0.75),
            axes: uniform3(&mut rng, dims, 0.04, 0.1),
            intensity: rng.random_range(0.6..1.0),
        });
    }
    for e in &ellipsoids {
        paint(&mut vol, dims, e);
    }
    Ok(Phantom {
        full: Tensor::new(&[1, dims[0], dims[1], dims[2]], vol)?,
        lesion_mask: Mask::empty(dims),
        seed,
        ellipsoids,
        lesions: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_phantom_is_zero() {
        let p = generate_phantom(1, [16, 16, 16], 0, 0).unwrap();
        assert!(p.full.data().iter().all(|&v| v == 0.0));
        assert!(p.lesion_mask.is_empty());
    }

    #[test]
    fn small_shapes_are_rejected() {
        assert!(generate_phantom(1, [15, 16, 16], 1, 0).is_err());
        assert!(generate_brain_phantom(1, [16, 16, 8], 1).is_err());
    }

    #[test]
    fn lesions_are_marked_and_brighter() {
        let p = generate_phantom(7, [24, 24, 24], 5, 2).unwrap();
        assert!(p.lesion_mask.count() >= 1);
        let d = p.full.data();
        let (mut inside, mut n) = (0.0, 0);
        for (i, &b) in p.lesion_mask.bits.iter().enumerate() {
            if b {
                inside += d[i] as f64;
                n += 1;
            }
        }
        let mean_all = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        assert!(inside / n as f64 > mean_all);
        assert!(d.iter().all(|&v| v >= 0.0));
    }
}
