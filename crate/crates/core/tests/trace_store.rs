use std::collections::BTreeMap;
use std::path::Path;

use dynorank::trace_store::npy::NpyArray;
use dynorank::trace_store::{
    load_dsprites, load_trace, save_trace, select_trace_samples, validate_ensemble, write_factor_archive, Ensemble,
    EnsembleManifest, FactorDataset, FactorTag, RunManifest, SampleStrategy, TraceTensor, DSPRITES_TAGS,
};
use dynorank::Error;
use ndarray::Array3;
use proptest::prelude::*;

/// An NPY v1.0 file laid out exactly as numpy writes it.
fn numpy_file(descr: &str, shape: &str, payload: &[u8]) -> Vec<u8> {
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape}, }}");
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = b"\x93NUMPY\x01\x00".to_vec();
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(payload);
    out
}

#[test]
fn reads_numpy_little_endian_f4() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.npy");
    let payload: Vec<u8> = [0f32, 1.0, 0.0, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    let bytes = numpy_file("<f4", "(2, 2, 1)", &payload);
    assert_eq!(bytes.len(), 144);
    std::fs::write(&path, bytes).unwrap();
    let t = load_trace(&path).unwrap();
    assert_eq!(t.shape(), (2, 2, 1));
    assert_eq!(t.values().iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0, 2.0]);
    assert_eq!(t.epoch_ids(), &[0, 1]);
}

#[test]
fn reads_numpy_big_endian_f8() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.npy");
    let payload: Vec<u8> = [0.5f64, 1.0, 0.0, -2.0].iter().flat_map(|v| v.to_be_bytes()).collect();
    std::fs::write(&path, numpy_file(">f8", "(2, 2, 1)", &payload)).unwrap();
    let t = load_trace(&path).unwrap();
    assert_eq!(t.values().iter().copied().collect::<Vec<_>>(), vec![0.5, 1.0, 0.0, -2.0]);
}

#[test]
fn rank_two_trace_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.npy");
    std::fs::write(&path, numpy_file("<f4", "(5, 3)", &[0u8; 60])).unwrap();
    assert!(matches!(load_trace(&path), Err(Error::Rank { expected: 3, .. })));
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.npy");
    std::fs::write(&path, numpy_file("<f4", "(2, 2, 1)", &[0u8; 12])).unwrap();
    assert!(load_trace(&path).is_err());
}

#[test]
fn saved_file_is_plain_c_order_f4() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.npy");
    let t = TraceTensor::new(Array3::from_shape_fn((2, 3, 2), |(a, b, c)| (a * 6 + b * 2 + c) as f32)).unwrap();
    save_trace(&t, &path).unwrap();
    let raw = NpyArray::read(&mut std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(raw.shape, vec![2, 3, 2]);
    assert_eq!(raw.to_f64(), (0..12).map(f64::from).collect::<Vec<_>>());
    let bytes = std::fs::read(&path).unwrap();
    assert!(String::from_utf8_lossy(&bytes[..128]).contains("'descr': '<f4'"));
    assert!(!dir.path().join("t.json").exists());
}

fn trace_strategy() -> impl Strategy<Value = TraceTensor> {
    (2usize..5, 2usize..5, 1usize..4, 1i64..4).prop_flat_map(|(n, m, p, stride)| {
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n * m * p).prop_map(
            move |vals| {
                let ids = (0..n as i64).map(|i| i * stride).collect();
                TraceTensor::with_epoch_ids(Array3::from_shape_vec((n, m, p), vals).unwrap(), ids).unwrap()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_then_load_is_identity(t in trace_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.npy");
        save_trace(&t, &path).unwrap();
        let back = load_trace(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.epoch_ids(), t.epoch_ids());
        let a: Vec<u32> = t.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }
}

fn grid_dataset(sizes: &[usize]) -> FactorDataset {
    let tags = vec![FactorTag::Position; sizes.len()];
    FactorDataset::grid(sizes, tags).unwrap()
}

#[test]
fn dsprites_grid_size() {
    let d = FactorDataset::grid(&[1, 3, 6, 40, 32, 32], DSPRITES_TAGS.to_vec()).unwrap();
    assert_eq!(d.len(), 737_280);
    assert!(d.is_full_grid());
}

#[test]
fn mini_archive_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mini.npz");
    let mut d = grid_dataset(&[2, 3]);
    d.observations = ndarray::Array2::from_shape_fn((6, 4), |(i, j)| ((i + j) % 2) as f64);
    write_factor_archive(&d, &path).unwrap();
    let back = load_dsprites(&path).unwrap();
    assert_eq!(back.len(), 6);
    assert_eq!(back.factor_sizes, vec![2, 3]);
    assert!(back.is_full_grid());
    assert_eq!(back.observations, d.observations);
}

#[test]
fn stratified_selection_balances_classes() {
    let d = grid_dataset(&[2, 5, 3]);
    for seed in 0..5 {
        let idx = select_trace_samples(&d, 4, seed, SampleStrategy::Stratified { factor: 0 }).unwrap();
        let ones = idx.iter().filter(|&&i| d.factor_classes[[i, 0]] == 1).count();
        assert_eq!(ones, 2);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
    }
    let all = select_trace_samples(&d, d.len(), 3, SampleStrategy::Uniform).unwrap();
    assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
    assert!(select_trace_samples(&d, d.len() + 1, 3, SampleStrategy::Uniform).is_err());
}

// --- ensemble validation under corruption ---------------------------------

const SPECS: [&str; 2] = ["a", "b"];
const REALS: usize = 3;
const SHAPE: (usize, usize, usize) = (3, 4, 2);

fn healthy_ensemble(dir: &Path) -> EnsembleManifest {
    let mut runs = Vec::new();
    for (s, spec) in SPECS.iter().enumerate() {
        for r in 0..REALS {
            let t = TraceTensor::new(Array3::from_shape_fn(SHAPE, |(a, b, c)| (a + 2 * b + 3 * c + s + r) as f32))
                .unwrap();
            let name = format!("{spec}_{r}.npy");
            save_trace(&t, dir.join(&name)).unwrap();
            runs.push(RunManifest {
                spec_id: spec.to_string(),
                realization_id: r.to_string(),
                seed: r as i64,
                hyperparams: BTreeMap::from([("beta".to_string(), serde_json::json!(4.0))]),
                trace_path: name.into(),
            });
        }
    }
    EnsembleManifest { runs, trace_sample_ids: (10..10 + SHAPE.1 as i64).collect() }
}

#[derive(Debug, Clone, Copy)]
enum Corruption {
    EpochCount,
    SampleCount,
    UnitCount,
    EpochIds,
    NonFinite,
    MissingFile,
    GarbageFile,
    DuplicateIds,
    DropRealization,
    SingletonGroup,
    SampleIdLength,
    DuplicateSampleId,
    NestedHyperparam,
}

fn corruption() -> impl Strategy<Value = (Corruption, usize)> {
    let kinds = prop_oneof![
        Just(Corruption::EpochCount),
        Just(Corruption::SampleCount),
        Just(Corruption::UnitCount),
        Just(Corruption::EpochIds),
        Just(Corruption::NonFinite),
        Just(Corruption::MissingFile),
        Just(Corruption::GarbageFile),
        Just(Corruption::DuplicateIds),
        Just(Corruption::DropRealization),
        Just(Corruption::SingletonGroup),
        Just(Corruption::SampleIdLength),
        Just(Corruption::DuplicateSampleId),
        Just(Corruption::NestedHyperparam),
    ];
    (kinds, 0..SPECS.len() * REALS)
}

fn write_raw(path: &Path, shape: (usize, usize, usize), value: f32) {
    let n = shape.0 * shape.1 * shape.2;
    let payload: Vec<u8> = (0..n).flat_map(|_| value.to_le_bytes()).collect();
    let bytes = numpy_file("<f4", &format!("({}, {}, {})", shape.0, shape.1, shape.2), &payload);
    std::fs::write(path, bytes).unwrap();
}

fn apply(c: Corruption, target: usize, dir: &Path, e: &mut EnsembleManifest) {
    let run = e.runs[target].clone();
    let path = dir.join(&run.trace_path);
    let (n, m, p) = SHAPE;
    match c {
        Corruption::EpochCount => write_raw(&path, (n + 1, m, p), 0.5),
        Corruption::SampleCount => write_raw(&path, (n, m + 1, p), 0.5),
        Corruption::UnitCount => write_raw(&path, (n, m, p + 2), 0.5),
        Corruption::EpochIds => {
            std::fs::write(path.with_extension("json"), r#"{"epoch_ids":[0,5,9]}"#).unwrap()
        }
        Corruption::NonFinite => write_raw(&path, SHAPE, f32::NAN),
        Corruption::MissingFile => std::fs::remove_file(&path).unwrap(),
        Corruption::GarbageFile => std::fs::write(&path, b"not an array").unwrap(),
        Corruption::DuplicateIds => {
            let other = (target + 1) % REALS + (target / REALS) * REALS;
            e.runs[target].realization_id = e.runs[other].realization_id.clone();
        }
        Corruption::DropRealization => {
            e.runs.remove(target);
        }
        Corruption::SingletonGroup => {
            e.runs[target].spec_id = "lonely".into();
        }
        Corruption::SampleIdLength => {
            e.trace_sample_ids.pop();
        }
        Corruption::DuplicateSampleId => {
            e.trace_sample_ids[1] = e.trace_sample_ids[0];
        }
        Corruption::NestedHyperparam => {
            e.runs[target].hyperparams.insert("layers".into(), serde_json::json!([64, 32]));
        }
    }
}

#[test]
fn healthy_ensemble_loads() {
    let dir = tempfile::tempdir().unwrap();
    let e = healthy_ensemble(dir.path());
    assert!(validate_ensemble(&e, dir.path()).is_empty());
    let path = dir.path().join("manifest.json");
    e.write(&path).unwrap();
    let loaded = Ensemble::load(&path).unwrap();
    assert_eq!(loaded.manifest, e);
    assert_eq!(loaded.groups.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn corruptions_are_caught_before_loading((kind, target) in corruption()) {
        let dir = tempfile::tempdir().unwrap();
        let mut e = healthy_ensemble(dir.path());
        apply(kind, target, dir.path(), &mut e);
        let violations = validate_ensemble(&e, dir.path());
        prop_assert!(!violations.is_empty(), "{:?} on run {} went unnoticed", kind, target);
        let blocked = matches!(Ensemble::from_manifest(e, dir.path()), Err(Error::Validation(_)));
        prop_assert!(blocked);
    }
}
