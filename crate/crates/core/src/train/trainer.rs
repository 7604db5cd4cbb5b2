use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::patches::{extract_patch, merge, unfold};
use crate::analysis::metrics::{lesion_bias, psnr_vs_reference};
use crate::data::{mix_seed, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Side of the cubic training patches.
    pub patch_size: usize,
    /// Size of the fixed patch pool drawn once per center.
    pub patches_per_center: usize,
    pub batch_per_center: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub charbonnier_eps: f64,
    /// Patch stride for whole-volume inference.
    pub eval_stride: usize,
    /// Checkpoint interval in epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 30,
            patch_size: 12,
            patches_per_center: 32,
            batch_per_center: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            charbonnier_eps: 1e-3,
            eval_stride: 12,
            checkpoint_every: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.epochs > 0
            && self.patch_size > 0
            && self.patches_per_center > 0
            && self.batch_per_center > 0
            && self.eval_stride > 0
            && self.lr >= 0.0
            && self.adam_eps > 0.0
            && self.charbonnier_eps > 0.0;
        if !positive {
            return Err(Error::Config(
                "train: epochs, patch_size, patches_per_center, batch_per_center, eval_stride, adam_eps and charbonnier_eps must be positive, lr non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train: betas must lie in [0, 1)".into()));
        }
        if self.batch_per_center > self.patches_per_center {
            return Err(Error::Config(format!(
                "train: batch_per_center {} exceeds patches_per_center {}",
                self.batch_per_center, self.patches_per_center
            )));
        }
        if self.eval_stride > self.patch_size {
            return Err(Error::Config(format!(
                "train: eval_stride {} exceeds patch_size {}",
                self.eval_stride, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Paired low/full patches of one center, each `[1, p, p, p]`.
#[derive(Clone, Debug)]
pub struct CenterBatch {
    pub center_id: u32,
    pub pairs: Vec<(Tensor, Tensor)>,
}

/// Outcome of one synchronized step.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// `(center_id, loss)` in batch order.
    pub losses: Vec<(u32, f64)>,
    /// Per-center gradients before averaging.
    pub center_grads: Vec<Vec<Vec<f32>>>,
    /// The gradient that was applied.
    pub mean_grad: Vec<Vec<f32>>,
}

/// Mean Charbonnier loss of a batch and its gradient for every parameter.
pub fn batch_loss_and_grad(net: &Network, pairs: &[(Tensor, Tensor)], eps: f64) -> Result<(f64, Vec<Vec<f32>>)> {
    if pairs.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut tape = Tape::new();
    let p = net.params().bind(&mut tape, true);
    let mut total = None;
    let mut exact = 0.0;
    for (low, full) in pairs {
        let x = tape.constant(low.clone());
        let y = tape.constant(full.clone());
        let out = net.forward(&mut tape, &p, x)?;
        let l = tape.charbonnier(out.est, y, eps as f32)?;
        exact += tape.scalar(l)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    let mut loss = total.expect("non-empty batch");
    if pairs.len() > 1 {
        loss = tape.scale(loss, 1.0 / pairs.len() as f32);
    }
    let value = exact / pairs.len() as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {value}")));
    }
    tape.backward(loss)?;
    Ok((value, p.grads(&tape)))
}

/// Elementwise mean of per-center gradients, summed in the given order.
pub fn average_gradients(center_grads: &[Vec<Vec<f32>>]) -> Vec<Vec<f32>> {
    let k = center_grads.len() as f64;
    (0..center_grads[0].len())
        .map(|pi| {
            (0..center_grads[0][pi].len())
                .map(|e| {
                    let s: f64 = center_grads.iter().map(|g| g[pi][e] as f64).sum();
                    (s / k) as f32
                })
                .collect()
        })
        .collect()
}

/// One synchronized update: a gradient per center, their mean, one Adam step.
pub fn multi_center_step(
    net: &mut Network,
    state: &mut AdamState,
    batches: &[CenterBatch],
    cfg: &TrainConfig,
) -> Result<StepReport> {
    if batches.is_empty() {
        return Err(Error::Usage("no center batches".into()));
    }
    let size = batches[0].pairs.len();
    for (i, b) in batches.iter().enumerate() {
        if b.pairs.is_empty() {
            return Err(Error::Usage(format!("missing batch for center {}", b.center_id)));
        }
        if b.pairs.len() != size {
            return Err(Error::Usage(format!(
                "center {} has batch size {}, expected {size}",
                b.center_id,
                b.pairs.len()
            )));
        }
        if batches[..i].iter().any(|o| o.center_id == b.center_id) {
            return Err(Error::Usage(format!("duplicate batch for center {}", b.center_id)));
        }
    }
    let mut losses = Vec::with_capacity(batches.len());
    let mut center_grads = Vec::with_capacity(batches.len());
    for b in batches {
        let (l, g) = batch_loss_and_grad(net, &b.pairs, cfg.charbonnier_eps)?;
        losses.push((b.center_id, l));
        center_grads.push(g);
    }
    let mean_grad = average_gradients(&center_grads);
    adam_step(net.params_mut(), &mean_grad, state, &cfg.adam())?;
    Ok(StepReport {
        losses,
        center_grads,
        mean_grad,
    })
}

/// Whole-volume estimate: unfold, per-patch forward, merge.
pub fn infer_volume(net: &Network, low: &Tensor, patch_size: usize, stride: usize) -> Result<Tensor> {
    let (patches, grid) = unfold(low, patch_size, stride)?;
    let est = patches
        .iter()
        .map(|p| net.infer(p).map(|(e, _)| e))
        .collect::<Result<Vec<_>>>()?;
    merge(&est, &grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub center_id: u32,
    pub train_loss: f64,
    pub val_psnr: f64,
}

/// State handed to the per-epoch callback of [`train_with`].
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub net: &'a Network,
    pub history: &'a [HistoryRow],
}

/// Known centers in order of first appearance.
pub fn known_centers(records: &[SampleRecord]) -> Vec<u32> {
    let mut ids = Vec::new();
    for r in records.iter().filter(|r| !r.unknown_center) {
        if !ids.contains(&r.center_id) {
            ids.push(r.center_id);
        }
    }
    ids
}

/// Fixed pool of random training patches for one center.
pub fn patch_pool(records: &[&SampleRecord], cfg: &TrainConfig, center_id: u32) -> Result<Vec<(Tensor, Tensor)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x9A7C, center_id as u64]));
    let p = cfg.patch_size;
    (0..cfg.patches_per_center)
        .map(|_| {
            let r = records[rng.random_range(0..records.len())];
            let dims = r.full.spatial_dims()?;
            if dims.iter().any(|&n| n < p) {
                return Err(Error::Dimension(format!(
                    "patch size {p} does not fit volume {dims:?}"
                )));
            }
            let origin = dims.map(|n| rng.random_range(0..=n - p));
            Ok((extract_patch(&r.low, origin, p)?, extract_patch(&r.full, origin, p)?))
        })
        .collect()
}

fn validation_psnr(net: &Network, tests: &[&SampleRecord], cfg: &TrainConfig) -> Result<f64> {
    let mut s = 0.0;
    for r in tests {
        let est = infer_volume(net, &r.low, cfg.patch_size, cfg.eval_stride)?;
        s += psnr_vs_reference(&est, &r.full)?;
    }
    Ok(s / tests.len() as f64)
}

pub fn train(net: &mut Network, records: &[SampleRecord], cfg: &TrainConfig) -> Result<Vec<HistoryRow>> {
    train_with(net, records, cfg, |_| Ok(()))
}

/// Multi-center training on the known centers of `records`, calling
/// `on_epoch` after each epoch.
pub fn train_with(
    net: &mut Network,
    records: &[SampleRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<Vec<HistoryRow>> {
    cfg.validate()?;
    let centers = known_centers(records);
    if centers.is_empty() {
        return Err(Error::Usage("no known center in the dataset".into()));
    }
    let mut pools = Vec::with_capacity(centers.len());
    let mut tests = Vec::with_capacity(centers.len());
    for &c in &centers {
        let of = |split| -> Vec<&SampleRecord> {
            records
                .iter()
                .filter(|r| r.center_id == c && r.split == split && !r.unknown_center)
                .collect()
        };
        let (tr, te) = (of(Split::Train), of(Split::Test));
        if tr.is_empty() || te.is_empty() {
            return Err(Error::Usage(format!("center {c} has an empty train or test split")));
        }
        pools.push(patch_pool(&tr, cfg, c)?);
        tests.push(te);
    }
    let mut state = AdamState::new(net.params());
    let mut history = Vec::with_capacity(cfg.epochs * centers.len());
    let steps = cfg.patches_per_center / cfg.batch_per_center;
    for epoch in 1..=cfg.epochs {
        let orders: Vec<Vec<usize>> = centers
            .iter()
            .zip(&pools)
            .map(|(&c, pool)| {
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[epoch as u64, c as u64]));
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        let mut loss_sum = vec![0.0; centers.len()];
        for s in 0..steps {
            let batches: Vec<CenterBatch> = centers
                .iter()
                .enumerate()
                .map(|(k, &c)| CenterBatch {
                    center_id: c,
                    pairs: orders[k][s * cfg.batch_per_center..(s + 1) * cfg.batch_per_center]
                        .iter()
                        .map(|&i| pools[k][i].clone())
                        .collect(),
                })
                .collect();
            let rep = multi_center_step(net, &mut state, &batches, cfg)?;
            for (k, (_, l)) in rep.losses.iter().enumerate() {
                loss_sum[k] += l;
            }
        }
        for (k, &c) in centers.iter().enumerate() {
            let val = validation_psnr(net, &tests[k], cfg)?;
            log::info!(
                "epoch {epoch} center {c}: loss {:.6} val psnr {val:.3}",
                loss_sum[k] / steps as f64
            );
            history.push(HistoryRow {
                epoch,
                center_id: c,
                train_loss: loss_sum[k] / steps as f64,
                val_psnr: val,
            });
        }
        on_epoch(EpochEnd {
            epoch,
            net,
            history: &history,
        })?;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub center_id: u32,
    pub split: Split,
    pub index: usize,
    pub psnr: f64,
    /// PSNR of the low-dose input itself.
    pub input_psnr: f64,
    /// `None` for records without lesions.
    pub b_mean: Option<f64>,
    pub b_max: Option<f64>,
}

/// Whole-volume metrics for each record.
pub fn evaluate(net: &Network, records: &[SampleRecord], patch_size: usize, stride: usize) -> Result<Vec<RecordMetrics>> {
    records
        .iter()
        .map(|r| {
            let est = infer_volume(net, &r.low, patch_size, stride)?;
            let (b_mean, b_max) = match lesion_bias(&est, &r.full, &r.lesion_mask) {
                Ok((m, x)) => (Some(m), Some(x)),
                Err(Error::NoLesion) => (None, None),
                Err(e) => return Err(e),
            };
            Ok(RecordMetrics {
                center_id: r.center_id,
                split: r.split,
                index: r.index,
                psnr: psnr_vs_reference(&est, &r.full)?,
                input_psnr: psnr_vs_reference(&r.low, &r.full)?,
                b_mean,
                b_max,
            })
        })
        .collect()
}
