use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::volume::{read_volume, write_volume};
use crate::data::{CenterSpec, Ellipsoid, Mask, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sidecar metadata stored next to each record's volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordMeta {
    pub center_id: u32,
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub drf: f64,
    pub unknown_center: bool,
    pub lesions: Vec<Ellipsoid>,
}

pub fn center_dir(root: &Path, center_id: u32) -> PathBuf {
    root.join(format!("center_{center_id}"))
}

fn stem(r_split: Split, index: usize) -> String {
    format!("{}_{index:03}", r_split.name())
}

/// Writes `low`, `full` and `mask` volumes plus a TOML sidecar per record.
pub fn write_dataset(root: &Path, records: &[SampleRecord], centers: &[CenterSpec]) -> Result<()> {
    for r in records {
        let dir = center_dir(root, r.center_id);
        std::fs::create_dir_all(&dir)?;
        let s = stem(r.split, r.index);
        write_volume(&dir.join(format!("{s}_low.vol")), &r.low)?;
        write_volume(&dir.join(format!("{s}_full.vol")), &r.full)?;
        let mask = Tensor::new(
            r.full.shape(),
            r.lesion_mask.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?;
        write_volume(&dir.join(format!("{s}_mask.vol")), &mask)?;
        let drf = centers
            .iter()
            .find(|c| c.id == r.center_id)
            .map_or(f64::NAN, |c| c.drf);
        let meta = RecordMeta {
            center_id: r.center_id,
            split: r.split,
            index: r.index,
            seed: r.seed,
            drf,
            unknown_center: r.unknown_center,
            lesions: r.lesions.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join(format!("{s}_meta.toml")), text)?;
    }
    Ok(())
}

fn read_record(meta_path: &Path) -> Result<SampleRecord> {
    let text = std::fs::read_to_string(meta_path)?;
    let meta: RecordMeta =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
    let base = meta_path
        .to_str()
        .and_then(|s| s.strip_suffix("_meta.toml"))
        .ok_or_else(|| Error::Usage(format!("bad sidecar name {}", meta_path.display())))?;
    let low = read_volume(Path::new(&format!("{base}_low.vol")))?;
    let full = read_volume(Path::new(&format!("{base}_full.vol")))?;
    let mask = read_volume(Path::new(&format!("{base}_mask.vol")))?;
    if low.shape() != full.shape() || mask.shape() != full.shape() {
        return Err(Error::Dimension(format!("volume shapes differ for {base}")));
    }
    Ok(SampleRecord {
        center_id: meta.center_id,
        split: meta.split,
        index: meta.index,
        seed: meta.seed,
        lesion_mask: Mask {
            dims: full.spatial_dims()?,
            bits: mask.data().iter().map(|&v| v > 0.5).collect(),
        },
        low,
        full,
        lesions: meta.lesions,
        unknown_center: meta.unknown_center,
    })
}

/// Loads every record under `root`, ordered by center, split and index.
pub fn read_dataset(root: &Path) -> Result<Vec<SampleRecord>> {
    let mut metas = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let dir = entry?.path();
        if !dir.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&dir)? {
            let p = f?.path();
            if p.to_str().is_some_and(|s| s.ends_with("_meta.toml")) {
                metas.push(p);
            }
        }
    }
    let mut records = metas.iter().map(|p| read_record(p)).collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::Usage(format!("no records found under {}", root.display())));
    }
    records.sort_by_key(|r| (r.center_id, r.split, r.index));
    Ok(records)
}
