use crate::data::{mix_seed, SampleRecord, Split};
use crate::error::{Error, Result};
use crate::model::{Network, ParamGroup};
use crate::tensor::Tensor;
use crate::train::{batch_loss_and_grad, patch_pool, TrainConfig};

/// Tasks with per-batch losses over a shared parameter subset.
///
/// Batch `b` of every task forms the `b`-th batch pair, so all tasks
/// expose the same number of batches.
pub trait LossLandscape {
    fn num_tasks(&self) -> usize;
    fn num_batches(&self) -> usize;
    /// Gradient of task `i`'s loss on batch `b` over the parameter subset.
    fn gradient(&self, task: usize, batch: usize) -> Result<Vec<f64>>;
    /// Loss of task `i` on batch `b` with the subset displaced by `delta`.
    fn loss_at(&self, task: usize, batch: usize, delta: &[f64]) -> Result<f64>;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loss change of task `i` after a normalized step along task `j`'s gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaLoss {
    /// `λ · mean_b ĝ_j(b)ᵀ g_i(b)`.
    pub first_order: f64,
    /// `mean_b [L_i(θ; b) - L_i(θ - λ ĝ_j(b); b)]`.
    pub exact: f64,
    /// Batch pairs used after skipping zero-gradient batches.
    pub batches: usize,
}

pub fn delta_loss(land: &dyn LossLandscape, i: usize, j: usize, lambda: f64) -> Result<DeltaLoss> {
    check_args(land, lambda)?;
    let (mut first, mut exact, mut used) = (0.0, 0.0, 0usize);
    for b in 0..land.num_batches() {
        let gj = land.gradient(j, b)?;
        let nj = norm(&gj);
        if nj == 0.0 {
            log::warn!("task {j} batch {b}: zero gradient norm, batch skipped");
            continue;
        }
        let gi = if i == j { gj.clone() } else { land.gradient(i, b)? };
        let step: Vec<f64> = gj.iter().map(|g| -lambda * g / nj).collect();
        first += lambda * dot(&gj.iter().map(|g| g / nj).collect::<Vec<_>>(), &gi);
        let zero = vec![0.0; step.len()];
        exact += land.loss_at(i, b, &zero)? - land.loss_at(i, b, &step)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Numeric(format!("task {j}: every batch has a zero gradient")));
    }
    Ok(DeltaLoss {
        first_order: first / used as f64,
        exact: exact / used as f64,
        batches: used,
    })
}

fn check_args(land: &dyn LossLandscape, lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Usage(format!("lambda must be positive, got {lambda}")));
    }
    if land.num_batches() == 0 || land.num_tasks() == 0 {
        return Err(Error::Usage("interference needs at least one task and one batch".into()));
    }
    Ok(())
}

/// `I(i, j)` per task pair for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct InterferenceMatrix {
    pub values: Vec<Vec<f64>>,
    pub task_ids: Vec<u32>,
    pub parameter_group: String,
    pub n_batches: usize,
    pub lambda: f64,
}

impl InterferenceMatrix {
    pub fn has_negative_off_diagonal(&self) -> bool {
        self.values
            .iter()
            .enumerate()
            .any(|(i, row)| row.iter().enumerate().any(|(j, &v)| i != j && v < 0.0))
    }

    /// Text heatmap with one row per task.
    pub fn render(&self) -> String {
        let mut s = format!("{} (lambda {}, {} batches)\n      ", self.parameter_group, self.lambda, self.n_batches);
        for id in &self.task_ids {
            s.push_str(&format!("{id:>8}"));
        }
        s.push('\n');
        for (id, row) in self.task_ids.iter().zip(&self.values) {
            s.push_str(&format!("{id:>6}"));
            for v in row {
                s.push_str(&format!("{v:>8.3}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Interference from precomputed gradients `grads[task][batch]`.
///
/// `I(i, j) = mean_b Δ_j L_i(b) / Δ_i L_i(b)` with first-order deltas; the
/// diagonal ratio compares a quantity with itself and is exactly 1.
pub fn interference_from_gradients(
    grads: &[Vec<Vec<f64>>],
    task_ids: &[u32],
    label: &str,
    lambda: f64,
) -> Result<InterferenceMatrix> {
    let k = grads.len();
    let nb = grads.first().map_or(0, Vec::len);
    if k == 0 || nb == 0 || grads.iter().any(|g| g.len() != nb) || task_ids.len() != k {
        return Err(Error::Usage(
            "interference needs equal, non-empty batch sets for every task".into(),
        ));
    }
    let unit: Vec<Vec<Option<Vec<f64>>>> = grads
        .iter()
        .enumerate()
        .map(|(t, gs)| {
            gs.iter()
                .enumerate()
                .map(|(b, g)| {
                    let n = norm(g);
                    if n == 0.0 {
                        log::warn!("{label}: task {} batch {b} has zero gradient norm, skipped", task_ids[t]);
                        None
                    } else {
                        Some(g.iter().map(|x| x / n).collect())
                    }
                })
                .collect()
        })
        .collect();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let (mut s, mut n) = (0.0, 0usize);
            for b in 0..nb {
                let (Some(ui), Some(uj)) = (&unit[i][b], &unit[j][b]) else {
                    continue;
                };
                let num = lambda * dot(uj, &grads[i][b]);
                let den = lambda * dot(ui, &grads[i][b]);
                s += num / den;
                n += 1;
            }
            if n == 0 {
                return Err(Error::Numeric(format!(
                    "{label}: no batch pair with nonzero gradients for tasks {} and {}",
                    task_ids[i], task_ids[j]
                )));
            }
            values[i][j] = s / n as f64;
        }
    }
    Ok(InterferenceMatrix {
        values,
        task_ids: task_ids.to_vec(),
        parameter_group: label.to_string(),
        n_batches: nb,
        lambda,
    })
}

pub fn interference(land: &dyn LossLandscape, task_ids: &[u32], label: &str, lambda: f64) -> Result<InterferenceMatrix> {
    check_args(land, lambda)?;
    let grads = (0..land.num_tasks())
        .map(|t| (0..land.num_batches()).map(|b| land.gradient(t, b)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    interference_from_gradients(&grads, task_ids, label, lambda)
}

/// Separable quadratic tasks `L_i(θ; b) = ½ Σ_k a_ik (θ_k - c_ibk)²`.
#[derive(Clone, Debug)]
pub struct QuadraticTasks {
    pub theta: Vec<f64>,
    /// Per-task diagonal curvature.
    pub curvature: Vec<Vec<f64>>,
    /// Per-task, per-batch minimizers.
    pub targets: Vec<Vec<Vec<f64>>>,
}

impl LossLandscape for QuadraticTasks {
    fn num_tasks(&self) -> usize {
        self.targets.len()
    }

    fn num_batches(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    fn gradient(&self, task: usize, batch: usize) -> Result<Vec<f64>> {
        let (a, c) = (&self.curvature[task], &self.targets[task][batch]);
        Ok((0..self.theta.len()).map(|k| a[k] * (self.theta[k] - c[k])).collect())
    }

    fn loss_at(&self, task: usize, batch: usize, delta: &[f64]) -> Result<f64> {
        let (a, c) = (&self.curvature[task], &self.targets[task][batch]);
        Ok((0..self.theta.len())
            .map(|k| 0.5 * a[k] * (self.theta[k] + delta[k] - c[k]).powi(2))
            .sum())
    }
}

/// Per-center Charbonnier losses of a network over one parameter group.
pub struct NetworkLandscape<'a> {
    pub net: &'a Network,
    pub group: &'a ParamGroup,
    /// `batches[center][b]`: paired low/full patches.
    pub batches: &'a [Vec<Vec<(Tensor, Tensor)>>],
    pub charbonnier_eps: f64,
}

fn flatten_group(grads: &[Vec<f32>], group: &ParamGroup) -> Vec<f64> {
    group
        .ids
        .iter()
        .flat_map(|id| grads[id.index()].iter().map(|&g| g as f64))
        .collect()
}

impl LossLandscape for NetworkLandscape<'_> {
    fn num_tasks(&self) -> usize {
        self.batches.len()
    }

    fn num_batches(&self) -> usize {
        self.batches.first().map_or(0, Vec::len)
    }

    fn gradient(&self, task: usize, batch: usize) -> Result<Vec<f64>> {
        let (_, g) = batch_loss_and_grad(self.net, &self.batches[task][batch], self.charbonnier_eps)?;
        Ok(flatten_group(&g, self.group))
    }

    fn loss_at(&self, task: usize, batch: usize, delta: &[f64]) -> Result<f64> {
        let mut net = self.net.clone();
        let mut off = 0;
        for &id in &self.group.ids {
            for v in net.params_mut().get_mut(id).data_mut() {
                *v = (*v as f64 + delta[off]) as f32;
                off += 1;
            }
        }
        let mut total = 0.0;
        let pairs = &self.batches[task][batch];
        for (low, full) in pairs {
            let mut tape = crate::tensor::Tape::new();
            let p = net.params().bind(&mut tape, false);
            let x = tape.constant(low.clone());
            let y = tape.constant(full.clone());
            let out = net.forward(&mut tape, &p, x)?;
            let l = tape.charbonnier(out.est, y, self.charbonnier_eps as f32)?;
            total += tape.scalar(l)?;
        }
        Ok(total / pairs.len() as f64)
    }
}

/// Interference matrices for several groups, sharing one backward pass per
/// batch across all groups.
pub fn network_interference(
    net: &Network,
    batches: &[Vec<Vec<(Tensor, Tensor)>>],
    center_ids: &[u32],
    groups: &[ParamGroup],
    lambda: f64,
    charbonnier_eps: f64,
) -> Result<Vec<InterferenceMatrix>> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Usage(format!("lambda must be positive, got {lambda}")));
    }
    let mut per_group: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::with_capacity(batches.len()); groups.len()];
    for center in batches {
        let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(center.len()); groups.len()];
        for pairs in center {
            let (_, g) = batch_loss_and_grad(net, pairs, charbonnier_eps)?;
            for (gi, group) in groups.iter().enumerate() {
                rows[gi].push(flatten_group(&g, group));
            }
        }
        for (gi, r) in rows.into_iter().enumerate() {
            per_group[gi].push(r);
        }
    }
    groups
        .iter()
        .zip(&per_group)
        .map(|(group, grads)| interference_from_gradients(grads, center_ids, &group.label, lambda))
        .collect()
}

/// Random patch batches per center from its training records:
/// `result[center][batch]` holds `batch_size` pairs of side `patch_size`.
pub fn sample_center_batches(
    records: &[SampleRecord],
    center_ids: &[u32],
    n_batches: usize,
    batch_size: usize,
    patch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<Vec<(Tensor, Tensor)>>>> {
    let cfg = TrainConfig {
        patch_size,
        patches_per_center: n_batches * batch_size,
        seed: mix_seed(seed, &[0x1F7E]),
        ..TrainConfig::default()
    };
    center_ids
        .iter()
        .map(|&c| {
            let train: Vec<&SampleRecord> = records
                .iter()
                .filter(|r| r.center_id == c && r.split == Split::Train)
                .collect();
            if train.is_empty() {
                return Err(Error::Usage(format!("center {c} has no training records")));
            }
            let pool = patch_pool(&train, &cfg, c)?;
            Ok(pool.chunks(batch_size).map(<[_]>::to_vec).collect())
        })
        .collect()
}
