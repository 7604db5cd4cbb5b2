//! Synthetic multi-center paired volumes.
//!
//! Each virtual center turns the same kind of full-dose phantom into a
//! low-dose image with its own dose-reduction factor, blur, voxel spacing
//! and intensity affine, which gives the dataset a controlled domain shift.

mod degrade;
mod phantom;
mod resample;

pub use degrade::{degrade, degrade_counts, gaussian_blur, thin};
pub use phantom::{generate_brain_phantom, generate_phantom, Ellipsoid, Mask, Phantom, PhantomKind};
pub use resample::{resample, resample_to};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Degradation parameters of one virtual center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterSpec {
    pub id: u32,
    /// Dose-reduction factor, at least 1.
    pub drf: f64,
    /// Gaussian blur std in voxels.
    pub psf_sigma: f64,
    /// Native voxel size relative to the common grid.
    pub spacing_scale: f64,
    /// Mean counts per unit intensity at full dose.
    pub count_scale: f64,
    pub intensity_gain: f64,
    pub intensity_offset: f64,
    /// Centers absent from training.
    #[serde(default)]
    pub unknown: bool,
    #[serde(default)]
    pub phantom: PhantomKind,
}

impl CenterSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.drf >= 1.0
            && self.psf_sigma >= 0.0
            && self.count_scale > 0.0
            && self.spacing_scale > 0.0
            && self.intensity_gain.is_finite()
            && self.intensity_offset.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "center {} needs drf >= 1, psf_sigma >= 0, count_scale > 0, spacing_scale > 0",
                self.id
            )))
        }
    }
}

/// Four known centers with dose-reduction factors 12, 4, 10, 10, then an
/// unknown brain-like center and an unknown center close to the first.
pub fn default_centers() -> Vec<CenterSpec> {
    let c = |id, drf, psf_sigma, spacing_scale, count_scale, gain, offset, unknown, phantom| CenterSpec {
        id,
        drf,
        psf_sigma,
        spacing_scale,
        count_scale,
        intensity_gain: gain,
        intensity_offset: offset,
        unknown,
        phantom,
    };
    use PhantomKind::{Body, Brain};
    vec![
        c(1, 12.0, 1.0, 1.25, 400.0, 1.0, 0.0, false, Body),
        c(2, 4.0, 0.6, 0.8, 150.0, 1.15, 0.03, false, Body),
        c(3, 10.0, 0.8, 1.0, 500.0, 0.88, -0.02, false, Body),
        c(4, 10.0, 0.7, 1.1, 300.0, 1.07, 0.05, false, Body),
        c(5, 4.0, 0.5, 0.9, 200.0, 1.1, 0.01, true, Brain),
        c(6, 12.0, 1.2, 1.3, 350.0, 0.95, 0.01, true, Body),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One paired low-dose / full-dose volume.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub center_id: u32,
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    /// `[1, D, H, W]`.
    pub low: Tensor,
    /// `[1, D, H, W]`.
    pub full: Tensor,
    pub lesion_mask: Mask,
    pub lesions: Vec<Ellipsoid>,
    pub unknown_center: bool,
}

/// Phantom content per record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomOptions {
    pub ellipsoids: usize,
    pub lesions: usize,
    /// Small structures in brain-like phantoms.
    pub brain_structures: usize,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            ellipsoids: 6,
            lesions: 2,
            brain_structures: 12,
        }
    }
}

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a path of indices.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Generates, degrades and regrids one record.
pub fn make_record(
    center: &CenterSpec,
    split: Split,
    index: usize,
    dims: [usize; 3],
    seed: u64,
    opts: &PhantomOptions,
) -> Result<SampleRecord> {
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let rec_seed = mix_seed(seed, &[center.id as u64, split_tag, index as u64]);
    let phantom = match center.phantom {
        PhantomKind::Body => generate_phantom(rec_seed, dims, opts.ellipsoids, opts.lesions)?,
        PhantomKind::Brain => generate_brain_phantom(rec_seed, dims, opts.brain_structures)?,
    };
    // simulate acquisition at the center's native spacing, then regrid
    let native = resample(&phantom.full, 1.0 / center.spacing_scale)?;
    let native = Tensor::new(
        native.shape(),
        native.data().iter().map(|&v| v.max(0.0)).collect(),
    )?;
    let low_native = degrade(&native, center, mix_seed(rec_seed, &[0xD05E]))?;
    let low = resample_to(&low_native, dims)?;
    Ok(SampleRecord {
        center_id: center.id,
        split,
        index,
        seed: rec_seed,
        low,
        full: phantom.full,
        lesion_mask: phantom.lesion_mask,
        lesions: phantom.lesions,
        unknown_center: center.unknown,
    })
}

/// Builds `n_train + n_test` records per center, centers in the given
/// order, train records before test records.
pub fn build_dataset(
    centers: &[CenterSpec],
    n_train: usize,
    n_test: usize,
    dims: [usize; 3],
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    build_dataset_with(centers, n_train, n_test, dims, seed, &PhantomOptions::default())
}

pub fn build_dataset_with(
    centers: &[CenterSpec],
    n_train: usize,
    n_test: usize,
    dims: [usize; 3],
    seed: u64,
    opts: &PhantomOptions,
) -> Result<Vec<SampleRecord>> {
    if centers.is_empty() {
        return Err(Error::Usage("dataset needs at least one center".into()));
    }
    let mut out = Vec::with_capacity(centers.len() * (n_train + n_test));
    for c in centers {
        c.validate()?;
        for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
            for i in 0..n {
                out.push(make_record(c, split, i, dims, seed, opts)?);
            }
        }
    }
    Ok(out)
}
