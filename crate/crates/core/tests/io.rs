use drmc_core::data::{build_dataset, default_centers};
use drmc_core::io::{
    parse_config, parse_config_str, read_dataset, read_volume, volume_from_bytes, volume_to_bytes, write_dataset,
    write_volume, RunConfig,
};
use drmc_core::{Error, GateKind, Tensor};
use proptest::prelude::*;

#[test]
fn emitted_config_parses_back() {
    let mut cfg = RunConfig::default();
    cfg.model.gate = GateKind::Top2;
    cfg.model.channels = 8;
    cfg.train.lr = 3.3e-4;
    cfg.train.eval_stride = 6;
    cfg.analysis.groups = vec!["block0.att".into()];
    cfg.data.centers.truncate(2);
    cfg.data.centers[1].unknown = true;
    let text = cfg.emit();
    assert_eq!(parse_config_str(&text).unwrap(), cfg);
    assert_eq!(parse_config_str(&RunConfig::default().emit()).unwrap(), RunConfig::default());
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert!(matches!(parse_config(&missing), Err(Error::Config(_))));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlr = \"fast\"\n").unwrap();
    let e = parse_config(&bad).unwrap_err().to_string();
    assert!(e.contains("bad.toml") && e.contains("line 2"), "{e}");
    assert!(matches!(parse_config_str("[model]\nexperts = 0\n"), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn volumes_round_trip_bitwise(
        dims in prop::collection::vec(1usize..6, 1..5),
        raw in prop::collection::vec(any::<u32>(), 625),
    ) {
        let n: usize = dims.iter().product();
        // arbitrary bit patterns, NaN payloads included
        let data: Vec<f32> = raw[..n].iter().map(|&b| f32::from_bits(b)).collect();
        let v = Tensor::new(&dims, data).unwrap();
        prop_assert!(volume_from_bytes(&volume_to_bytes(&v)).unwrap().bitwise_eq(&v));
    }
}

#[test]
fn volume_files_round_trip_and_reject_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vol");
    let v = Tensor::new(&[1, 8, 8, 8], (0..512).map(|i| i as f32 * 0.37 - 3.0).collect()).unwrap();
    write_volume(&path, &v).unwrap();
    assert!(read_volume(&path).unwrap().bitwise_eq(&v));
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"VOL1");
    let mut vol2 = bytes.clone();
    vol2[..4].copy_from_slice(b"VOL2");
    assert!(matches!(volume_from_bytes(&vol2), Err(Error::Format { offset: 0, .. })));
    let e = volume_from_bytes(&bytes[..bytes.len() / 2]).unwrap_err().to_string();
    assert!(e.contains("expected 2048 bytes"), "{e}");
}

#[test]
fn datasets_round_trip_through_directories() {
    let dir = tempfile::tempdir().unwrap();
    let centers = default_centers();
    let recs = build_dataset(&centers, 2, 1, [16, 16, 16], 4).unwrap();
    write_dataset(dir.path(), &recs, &centers).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), recs.len());
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!((a.center_id, a.split, a.index, a.seed), (b.center_id, b.split, b.index, b.seed));
        assert!(a.low.bitwise_eq(&b.low) && a.full.bitwise_eq(&b.full));
        assert_eq!(a.lesion_mask, b.lesion_mask);
        assert_eq!(a.lesions, b.lesions);
        assert_eq!(a.unknown_center, b.unknown_center);
    }
    assert!(dir.path().join("center_6/test_000_meta.toml").exists());
}
