//! Pipeline stages shared by the subcommands.

use std::path::{Path, PathBuf};

use drmc_core::analysis::{network_interference, routing_histogram, sample_center_batches, InterferenceMatrix, RoutingHistogram};
use drmc_core::data::{build_dataset_with, mix_seed, SampleRecord, Split};
use drmc_core::io::{
    fmt_f64, parse_config, read_dataset, write_dataset, write_histogram_csv, write_history_csv,
    write_interference_csv, write_metrics_csv, write_table_csv, RunConfig,
};
use drmc_core::model::{load_checkpoint, save_checkpoint};
use drmc_core::train::{evaluate, known_centers, train_with, HistoryRow, RecordMetrics};
use drmc_core::{Error, GateKind, ModelConfig, Network, Result};

/// Output layout under one directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("model.drmc")
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn interference(&self) -> PathBuf {
        self.root.join("interference")
    }

    pub fn route_hist(&self) -> PathBuf {
        self.root.join("route_hist.csv")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation.csv")
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join("config.resolved.toml")
    }
}

pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => parse_config(p),
        None => Ok(RunConfig::default()),
    }
}

/// Writes the resolved configuration next to the outputs.
pub fn echo_config(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.resolved_config(), cfg.emit())?;
    Ok(())
}

/// Synthesizes the dataset of every configured center.
pub fn generate(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let d = &cfg.data;
    build_dataset_with(&d.centers, d.n_train, d.n_test, d.dims, d.seed, &d.phantom)
}

pub fn gen_data(cfg: &RunConfig, layout: &Layout, data_dir: &Path) -> Result<usize> {
    let records = generate(cfg)?;
    write_dataset(data_dir, &records, &cfg.data.centers)?;
    echo_config(cfg, layout)?;
    Ok(records.len())
}

pub fn load_records(dir: &Path) -> Result<Vec<SampleRecord>> {
    if !dir.is_dir() {
        return Err(Error::Usage(format!(
            "data directory {} not found; run gen-data first",
            dir.display()
        )));
    }
    read_dataset(dir)
}

/// Seed of the network's initial parameters.
pub fn init_seed(cfg: &RunConfig) -> u64 {
    mix_seed(cfg.train.seed, &[0x1417])
}

/// Trains `model` on the known centers, checkpointing every
/// `checkpoint_every` epochs when a directory is given.
pub fn train_model(
    cfg: &RunConfig,
    model: &ModelConfig,
    records: &[SampleRecord],
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(usize, &Network, &[HistoryRow]) -> Result<()>,
) -> Result<(Network, Vec<HistoryRow>)> {
    let mut net = Network::new(model.clone(), init_seed(cfg))?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let every = cfg.train.checkpoint_every;
    let history = train_with(&mut net, records, &cfg.train, |e| {
        if let Some(dir) = checkpoint_dir {
            if every > 0 && e.epoch % every == 0 {
                save_checkpoint(e.net, &dir.join(format!("epoch_{:03}.drmc", e.epoch)))?;
            }
        }
        on_epoch(e.epoch, e.net, e.history)
    })?;
    Ok((net, history))
}

pub fn train_stage(cfg: &RunConfig, layout: &Layout, records: &[SampleRecord]) -> Result<Vec<HistoryRow>> {
    echo_config(cfg, layout)?;
    let (net, history) = train_model(cfg, &cfg.model, records, Some(&layout.checkpoints()), |_, _, _| Ok(()))?;
    save_checkpoint(&net, &layout.model())?;
    write_history_csv(&layout.history(), &history)?;
    Ok(history)
}

pub fn test_split(records: &[SampleRecord]) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == Split::Test).cloned().collect()
}

/// Metrics of every test record, unknown centers included.
pub fn evaluate_tests(net: &Network, cfg: &RunConfig, records: &[SampleRecord]) -> Result<Vec<RecordMetrics>> {
    evaluate(net, &test_split(records), cfg.train.patch_size, cfg.train.eval_stride)
}

pub fn eval_stage(cfg: &RunConfig, layout: &Layout, records: &[SampleRecord], checkpoint: &Path) -> Result<Vec<RecordMetrics>> {
    let net = load_checkpoint(checkpoint)?;
    let metrics = evaluate_tests(&net, cfg, records)?;
    echo_config(cfg, layout)?;
    write_metrics_csv(&layout.metrics(), &metrics)?;
    Ok(metrics)
}

/// Interference matrices of the configured parameter groups.
pub fn measure_interference(net: &Network, cfg: &RunConfig, records: &[SampleRecord]) -> Result<Vec<InterferenceMatrix>> {
    let centers = known_centers(records);
    let a = &cfg.analysis;
    let all = net.param_groups();
    let groups: Vec<_> = if a.groups.is_empty() {
        all
    } else {
        a.groups
            .iter()
            .map(|label| {
                all.iter().find(|g| &g.label == label).cloned().ok_or_else(|| {
                    let known: Vec<_> = all.iter().map(|g| g.label.as_str()).collect();
                    Error::Config(format!("analysis.groups: unknown group {label}; expected one of {}", known.join(", ")))
                })
            })
            .collect::<Result<_>>()?
    };
    let batches = sample_center_batches(records, &centers, a.n_batches, a.batch_size, cfg.train.patch_size, cfg.train.seed)?;
    network_interference(net, &batches, &centers, &groups, a.lambda, cfg.train.charbonnier_eps)
}

pub fn interference_stage(
    cfg: &RunConfig,
    layout: &Layout,
    records: &[SampleRecord],
    checkpoint: &Path,
) -> Result<Vec<InterferenceMatrix>> {
    let net = load_checkpoint(checkpoint)?;
    let ms = measure_interference(&net, cfg, records)?;
    echo_config(cfg, layout)?;
    std::fs::create_dir_all(layout.interference())?;
    for m in &ms {
        write_interference_csv(&layout.interference().join(format!("{}.csv", m.parameter_group)), m)?;
        print!("{}", m.render());
    }
    Ok(ms)
}

pub fn route_hist_stage(cfg: &RunConfig, layout: &Layout, records: &[SampleRecord], checkpoint: &Path) -> Result<RoutingHistogram> {
    let net = load_checkpoint(checkpoint)?;
    let h = routing_histogram(&net, &test_split(records))?;
    echo_config(cfg, layout)?;
    write_histogram_csv(&layout.route_hist(), &h)?;
    Ok(h)
}

/// Routing variants compared by `ablate`, in output order.
pub const VARIANTS: [(&str, GateKind); 4] = [
    ("no_h", GateKind::NoH),
    ("softmax", GateKind::Softmax),
    ("top2", GateKind::Top2),
    ("drmc", GateKind::Relu),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub gate: GateKind,
    /// Mean test PSNR per center, in center order.
    pub center_psnr: Vec<(u32, f64)>,
    pub known_mean: f64,
}

/// Mean PSNR per center in order of first appearance.
pub fn per_center_psnr(metrics: &[RecordMetrics]) -> Vec<(u32, f64)> {
    let mut ids: Vec<u32> = Vec::new();
    for m in metrics {
        if !ids.contains(&m.center_id) {
            ids.push(m.center_id);
        }
    }
    ids.iter()
        .map(|&c| {
            let v: Vec<f64> = metrics.iter().filter(|m| m.center_id == c).map(|m| m.psnr).collect();
            (c, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}

pub fn ablate_stage(cfg: &RunConfig, layout: &Layout, records: &[SampleRecord]) -> Result<Vec<AblationRow>> {
    echo_config(cfg, layout)?;
    let known = known_centers(records);
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for (name, gate) in VARIANTS {
        log::info!("ablation variant {name}");
        let model = ModelConfig { gate, ..cfg.model.clone() };
        let (net, _) = train_model(cfg, &model, records, None, |_, _, _| Ok(()))?;
        let center_psnr = per_center_psnr(&evaluate_tests(&net, cfg, records)?);
        let k: Vec<f64> = center_psnr.iter().filter(|(c, _)| known.contains(c)).map(|&(_, p)| p).collect();
        rows.push(AblationRow {
            variant: name.to_string(),
            gate,
            known_mean: k.iter().sum::<f64>() / k.len() as f64,
            center_psnr,
        });
    }
    let mut header = vec!["variant".to_string(), "gate".to_string()];
    header.extend(rows[0].center_psnr.iter().map(|(c, _)| format!("center_{c}")));
    header.push("known_mean".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.variant.clone(), r.gate.to_string()];
            v.extend(r.center_psnr.iter().map(|&(_, p)| fmt_f64(p)));
            v.push(fmt_f64(r.known_mean));
            v
        })
        .collect();
    write_table_csv(&layout.ablation(), &header, &body)?;
    Ok(rows)
}
