use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{default_centers, CenterSpec, PhantomOptions};
use crate::error::{Error, Result};
use crate::model::{GateKind, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    /// Common grid `[D, H, W]`.
    pub dims: [usize; 3],
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomOptions,
    pub centers: Vec<CenterSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [24, 24, 24],
            n_train: 8,
            n_test: 4,
            phantom: PhantomOptions::default(),
            centers: default_centers(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Step length of the interference probe.
    pub lambda: f64,
    /// Batches sampled per center.
    pub n_batches: usize,
    pub batch_size: usize,
    /// Parameter-group labels such as `block0.att`; empty selects all.
    pub groups: Vec<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            n_batches: 20,
            batch_size: 1,
            groups: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub output_dir: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Model section as written; the router width defaults to the channel count.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    channels: Option<usize>,
    experts: Option<usize>,
    blocks: Option<usize>,
    router_hidden: Option<usize>,
    gate: Option<GateKind>,
}

impl RawModel {
    fn resolve(self) -> ModelConfig {
        let d = ModelConfig::default();
        let channels = self.channels.unwrap_or(d.channels);
        ModelConfig {
            channels,
            experts: self.experts.unwrap_or(d.experts),
            blocks: self.blocks.unwrap_or(d.blocks),
            router_hidden: self.router_hidden.unwrap_or(channels),
            gate: self.gate.unwrap_or(d.gate),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    analysis: AnalysisConfig,
    #[serde(default)]
    io: IoConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTrain {
    lr: f64,
    epochs: usize,
    patch_size: usize,
    patches_per_center: usize,
    batch_per_center: usize,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    charbonnier_eps: f64,
    eval_stride: Option<usize>,
    checkpoint_every: usize,
    seed: u64,
}

impl Default for RawTrain {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            lr: d.lr,
            epochs: d.epochs,
            patch_size: d.patch_size,
            patches_per_center: d.patches_per_center,
            batch_per_center: d.batch_per_center,
            beta1: d.beta1,
            beta2: d.beta2,
            adam_eps: d.adam_eps,
            charbonnier_eps: d.charbonnier_eps,
            eval_stride: None,
            checkpoint_every: d.checkpoint_every,
            seed: d.seed,
        }
    }
}

impl RawTrain {
    /// The evaluation stride defaults to the patch size.
    fn resolve(self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            patch_size: self.patch_size,
            patches_per_center: self.patches_per_center,
            batch_per_center: self.batch_per_center,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            charbonnier_eps: self.charbonnier_eps,
            eval_stride: self.eval_stride.unwrap_or(self.patch_size),
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        parse_config_str("").expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.centers.is_empty() {
            return Err(Error::Config("data.centers is empty".into()));
        }
        for (i, c) in self.data.centers.iter().enumerate() {
            c.validate()?;
            if self.data.centers[..i].iter().any(|o| o.id == c.id) {
                return Err(Error::Config(format!("data.centers: duplicate id {}", c.id)));
            }
        }
        if self.data.dims.iter().any(|&n| n < 16) {
            return Err(Error::Config(format!("data.dims must be at least 16, got {:?}", self.data.dims)));
        }
        if self.data.dims.iter().any(|&n| n < self.train.patch_size) {
            return Err(Error::Config(format!(
                "train.patch_size {} exceeds data.dims {:?}",
                self.train.patch_size, self.data.dims
            )));
        }
        let a = &self.analysis;
        if !(a.lambda > 0.0) || a.n_batches == 0 || a.batch_size == 0 {
            return Err(Error::Config(
                "analysis: lambda, n_batches and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// TOML with every field spelled out.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let raw: RawRun = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let cfg = RunConfig {
        data: raw.data,
        model: raw.model.resolve(),
        train: raw.train.resolve(),
        analysis: raw.analysis,
        io: raw.io,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
