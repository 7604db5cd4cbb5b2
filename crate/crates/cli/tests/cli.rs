use std::path::Path;

use drmc_cli::{dispatch, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

const SMALL: &str = r#"
[data]
dims = [16, 16, 16]
n_train = 2
n_test = 1

[model]
channels = 4
experts = 2
blocks = 1
gate = "softmax"

[train]
epochs = 2
patch_size = 8
patches_per_center = 2
checkpoint_every = 1

[analysis]
n_batches = 2
groups = ["block0.att"]
"#;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("drmc").chain(args.iter().copied()))
}

fn setup(dir: &Path) -> (String, String) {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    (cfg.to_str().unwrap().to_string(), dir.join("out").to_str().unwrap().to_string())
}

fn csv_rows(path: &Path) -> (csv::StringRecord, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    let rows = r.records().map(Result::unwrap).collect();
    (header, rows)
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(run(&[]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    assert_eq!(run(&["train", "--config", &cfg, "--out", &out]), EXIT_USAGE);
    let missing = dir.path().join("none.toml");
    assert_eq!(run(&["gen-data", "--config", missing.to_str().unwrap(), "--out", &out]), EXIT_FAILURE);
    assert_eq!(run(&["train", "--gate", "top1"]), EXIT_USAGE);
}

#[test]
fn default_gen_data_writes_every_center() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["gen-data", "--out", out.to_str().unwrap()]), EXIT_OK);
    for c in 1..=6 {
        let d = out.join(format!("data/center_{c}"));
        let vols = std::fs::read_dir(&d)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().to_str().unwrap().ends_with("_low.vol"))
            .count();
        assert_eq!(vols, 8 + 4, "center {c}");
    }
    assert!(out.join("config.resolved.toml").exists());
}

#[test]
fn pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    let o = Path::new(&out);
    assert_eq!(run(&["gen-data", "--config", &cfg, "--out", &out]), EXIT_OK);
    assert_eq!(run(&["train", "--config", &cfg, "--out", &out]), EXIT_OK);
    let (h, rows) = csv_rows(&o.join("history.csv"));
    assert_eq!(h.iter().collect::<Vec<_>>(), ["epoch", "center_id", "train_loss", "val_psnr"]);
    assert_eq!(rows.len(), 2 * 4);
    assert!(o.join("checkpoints/epoch_001.drmc").exists() && o.join("model.drmc").exists());

    assert_eq!(run(&["eval", "--config", &cfg, "--out", &out]), EXIT_OK);
    let (h, rows) = csv_rows(&o.join("metrics.csv"));
    assert_eq!(h.iter().collect::<Vec<_>>(), ["center_id", "split", "index", "psnr", "input_psnr", "b_mean", "b_max"]);
    assert_eq!(rows.len(), 6);
    // the brain-like center has no lesions
    assert!(rows.iter().filter(|r| &r[0] == "5").all(|r| r[5].is_empty()));

    assert_eq!(run(&["interference", "--config", &cfg, "--out", &out]), EXIT_OK);
    let (h, rows) = csv_rows(&o.join("interference/block0.att.csv"));
    assert_eq!(h.iter().collect::<Vec<_>>(), ["center", "1", "2", "3", "4"]);
    assert_eq!(rows.len(), 4);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[i + 1].parse::<f64>().unwrap(), 1.0);
    }

    assert_eq!(run(&["route-hist", "--config", &cfg, "--out", &out]), EXIT_OK);
    let (h, rows) = csv_rows(&o.join("route_hist.csv"));
    assert_eq!(h.iter().collect::<Vec<_>>(), ["layer", "bank", "center", "expert", "count"]);
    assert_eq!(rows.len(), 2 * 6 * 2);
}

#[test]
fn ablation_reports_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path());
    assert_eq!(run(&["gen-data", "--config", &cfg, "--out", &out]), EXIT_OK);
    assert_eq!(run(&["ablate", "--config", &cfg, "--out", &out, "--epochs", "1"]), EXIT_OK);
    let (h, rows) = csv_rows(&Path::new(&out).join("ablation.csv"));
    assert_eq!(h.len(), 2 + 6 + 1);
    assert_eq!(rows.iter().map(|r| r[0].to_string()).collect::<Vec<_>>(), ["no_h", "softmax", "top2", "drmc"]);
    for r in &rows {
        assert!(r.iter().skip(2).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}
