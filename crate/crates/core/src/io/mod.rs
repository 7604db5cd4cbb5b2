//! Run configuration, volume files, dataset directories and CSV tables.

mod config;
mod dataset;
mod tables;
mod volume;

pub use config::{parse_config, parse_config_str, AnalysisConfig, DataConfig, IoConfig, RunConfig};
pub use dataset::{center_dir, read_dataset, write_dataset, RecordMeta};
pub use tables::{
    fmt_f64, write_histogram_csv, write_history_csv, write_interference_csv, write_metrics_csv, write_table_csv,
};
pub use volume::{read_volume, volume_from_bytes, volume_to_bytes, write_volume, VOLUME_MAGIC};
