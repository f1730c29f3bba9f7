use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dynorank::trace_store::npy;
use dynorank::trace_store::{
    save_trace, write_factor_archive, EnsembleManifest, FactorDataset, RunManifest, TraceTensor, DSPRITES_TAGS,
};
use ndarray::{Array2, Array3};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynorank"))
        .args(args)
        .env_remove("DYNORANK_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, regimes: &[&str], reals: usize) -> PathBuf {
    let mut args = vec!["synth", "-o", s(dir)];
    for r in regimes {
        args.extend(["--regime", r]);
    }
    let reals = reals.to_string();
    args.extend(["--realizations", &reals, "--m-trace", "16", "--n-epochs", "6"]);
    ok(&args);
    dir.join("manifest.json")
}

#[test]
fn delta_sweep_ranks_by_delta() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("s"), &["perturbed:1", "perturbed:0", "perturbed:0.5", "perturbed:0.1"], 3);
    let out = dir.path().join("r");
    ok(&["rank", s(&manifest), "-o", s(&out)]);

    let csv = std::fs::read_to_string(out.join("ranking.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rank,spec_id,mean_mmd");
    let order: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(order, ["perturbed:0", "perturbed:0.1", "perturbed:0.5", "perturbed:1"]);

    let ranking = json(&out.join("ranking.json"));
    assert_eq!(ranking["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(ranking["params"]["embed"]["t"], 8);
    assert_eq!(ranking["entries"][0]["mean_mmd"], 0.0);

    let score = json(&out.join("scores/perturbed_0.5.json"));
    assert_eq!(score["spec_id"], "perturbed:0.5");
    assert_eq!(score["pairs"].as_array().unwrap().len(), 3);
    let mean: f64 = score["pairs"].as_array().unwrap().iter().map(|p| p[2].as_f64().unwrap()).sum::<f64>() / 3.0;
    assert!((mean - score["mean_mmd"].as_f64().unwrap()).abs() < 1e-15);
    assert_eq!(score["params"]["mmd"]["estimator"], "biased");
    assert_eq!(score["params"]["embed"]["kernel"]["knn_k"], 5);
}

#[test]
fn outputs_are_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("s"), &["perturbed:0.3", "axis_aligned"], 3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["--threads", "1", "rank", s(&manifest), "-o", s(&a)]);
    let out = Command::new(env!("CARGO_BIN_EXE_dynorank"))
        .args(["rank", s(&manifest), "-o", s(&b)])
        .env("DYNORANK_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    for f in ["ranking.csv", "ranking.json", "scores/axis_aligned.json", "scores/perturbed_0.3.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_delta_traces_are_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(dir.path(), &["perturbed:0"], 3);
    let m = EnsembleManifest::from_path(&manifest).unwrap();
    let bytes: Vec<Vec<u8>> = m.runs.iter().map(|r| std::fs::read(dir.path().join(&r.trace_path)).unwrap()).collect();
    assert!(bytes.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(m.trace_sample_ids, (0..16).collect::<Vec<_>>());
}

#[test]
fn synth_rejects_unknown_regime() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth", "--regime", "diagonal", "-o", s(dir.path())]), 2);
    assert!(!dir.path().join("manifest.json").exists());
}

#[test]
fn single_spec_ranking_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("s"), &["rotation_free"], 2);
    let out = dir.path().join("r");
    ok(&["rank", s(&manifest), "-o", s(&out)]);
    let csv = std::fs::read_to_string(out.join("ranking.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,rotation_free,"));
}

#[test]
fn corrupted_trace_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("s"), &["perturbed:0.2", "perturbed:0.4"], 3);
    let m = EnsembleManifest::from_path(&manifest).unwrap();
    std::fs::write(dir.path().join("s").join(&m.runs[4].trace_path), b"\x93NUMPY garbage").unwrap();
    let out = dir.path().join("r");
    let res = run(&["rank", s(&manifest), "-o", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("perturbed:0.4"));
    assert!(!out.exists());
}

fn write_group(dir: &Path, traces: &[TraceTensor]) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let runs = traces
        .iter()
        .enumerate()
        .map(|(r, t)| {
            let name = format!("g_{r}.npy");
            save_trace(t, dir.join(&name)).unwrap();
            RunManifest {
                spec_id: "g".into(),
                realization_id: format!("r{r}"),
                seed: r as i64,
                hyperparams: Default::default(),
                trace_path: name.into(),
            }
        })
        .collect();
    let m = EnsembleManifest {
        runs,
        trace_sample_ids: (0..traces[0].m_samples() as i64).collect(),
    };
    let path = dir.join("manifest.json");
    m.write(&path).unwrap();
    path
}

fn read_coords(dir: &Path) -> Array2<f64> {
    let mut f = std::fs::File::open(dir.join("coords.npy")).unwrap();
    let a = npy::NpyArray::read(&mut f).unwrap();
    Array2::from_shape_vec((a.shape[0], a.shape[1]), a.to_f64()).unwrap()
}

fn trace(seed: u64) -> TraceTensor {
    let v = Array3::from_shape_fn((4, 6, 3), |(e, i, u)| {
        let x = (seed as f64 + 1.0) * 0.37 + e as f64 * 0.5 + i as f64 * 1.3 + u as f64 * 0.7;
        (x.sin() * 2.0 + (x * 0.31).cos()) as f32
    });
    TraceTensor::new(v).unwrap()
}

#[test]
fn embed_identical_traces_gives_identical_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_group(&dir.path().join("g"), &[trace(1), trace(1), trace(1)]);
    let out = dir.path().join("e");
    ok(&["embed", s(&manifest), "--spec", "g", "-o", s(&out)]);
    let coords = read_coords(&out);
    let meta = json(&out.join("offsets.json"));
    assert_eq!(meta["realization_offsets"], serde_json::json!([0, 24, 48]));
    assert_eq!(meta["realization_ids"], serde_json::json!(["r0", "r1", "r2"]));
    assert_eq!(meta["config"]["d"], 20);
    assert_eq!(coords.nrows(), 72);
    for r in 1..3 {
        assert_eq!(coords.slice(ndarray::s![0..24, ..]), coords.slice(ndarray::s![r * 24..(r + 1) * 24, ..]));
    }
}

#[test]
fn embed_distances_follow_sample_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let traces = [trace(1), trace(2), trace(3)];
    let perm = [3usize, 0, 5, 1, 4, 2];
    let permuted: Vec<TraceTensor> = traces.iter().map(|t| t.permute_samples(&perm).unwrap()).collect();
    let a = write_group(&dir.path().join("a"), &traces);
    let b = write_group(&dir.path().join("b"), &permuted);
    ok(&["embed", s(&a), "--spec", "g", "-o", s(&dir.path().join("ea"))]);
    ok(&["embed", s(&b), "--spec", "g", "-o", s(&dir.path().join("eb"))]);
    let ca = read_coords(&dir.path().join("ea"));
    let cb = read_coords(&dir.path().join("eb"));
    let (n, m) = (4, 6);
    let row = |r: usize, e: usize, i: usize| (r * n + e) * m + i;
    let dist = |c: &Array2<f64>, x: usize, y: usize| (&c.row(x) - &c.row(y)).mapv(|v| v * v).sum().sqrt();
    let mut worst = 0.0f64;
    for x in 0..3 * n * m {
        let (r, e, i) = (x / (n * m), (x / m) % n, x % m);
        for y in 0..3 * n * m {
            let (r2, e2, j) = (y / (n * m), (y / m) % n, y % m);
            let da = dist(&ca, row(r, e, perm[i]), row(r2, e2, perm[j]));
            let db = dist(&cb, x, y);
            worst = worst.max((da - db).abs());
        }
    }
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn embed_unknown_spec_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_group(dir.path(), &[trace(1), trace(2)]);
    assert_eq!(code(&["embed", s(&manifest), "--spec", "missing", "-o", s(&dir.path().join("e"))]), 2);
}

/// dSprites-layout grid whose codes copy the factor classes, one latent per factor.
fn disentangled_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let d = FactorDataset::grid(&[1, 3, 4, 5, 2, 2], DSPRITES_TAGS.to_vec()).unwrap();
    let archive = dir.join("mini.npz");
    write_factor_archive(&d, &archive).unwrap();
    let n = d.len();
    let codes: Vec<f64> = (0..n).flat_map(|i| (1..6).map(move |f| (i, f))).map(|(i, f)| d.factor_classes[[i, f]] as f64).collect();
    let path = dir.join("codes.npy");
    let mut file = std::fs::File::create(&path).unwrap();
    npy::write_f64(&mut file, &[n, 5], &codes).unwrap();
    (archive, path)
}

#[test]
fn factor_vae_on_disentangled_codes_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let (archive, codes) = disentangled_fixture(dir.path());
    let out = dir.path().join("fv.json");
    ok(&["metrics", "factor-vae", "--codes", s(&codes), "--dataset", s(&archive), "-o", s(&out), "--batches", "100"]);
    let v = json(&out);
    assert_eq!(v["metric"], "factor_vae");
    assert_eq!(v["value"], 1.0);
    assert_eq!(v["config"]["batches"], 100);
    assert_eq!(v["config"]["samples_per_batch"], 64);
    assert!(v["noise_model"].is_null());
}

#[test]
fn noise_model_three_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let (archive, codes) = disentangled_fixture(dir.path());
    let out = dir.path().join("bv.json");
    ok(&[
        "metrics", "beta-vae", "--codes", s(&codes), "--dataset", s(&archive), "-o", s(&out),
        "--batches", "60", "--classifier-epochs", "200", "--noise-model", "3",
    ]);
    let nm = &json(&out)["noise_model"];
    for key in ["p_shape", "p_scale", "p_orient", "p_pos"] {
        assert_eq!(nm[key], 0.3, "{key}");
    }
    let bad = dir.path().join("bad.json");
    assert_eq!(
        code(&["metrics", "mig", "--codes", s(&codes), "--dataset", s(&archive), "-o", s(&bad), "--noise-model", "4"]),
        2
    );
}

#[test]
fn metrics_reject_misaligned_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (archive, _) = disentangled_fixture(dir.path());
    let codes = dir.path().join("short.npy");
    let mut f = std::fs::File::create(&codes).unwrap();
    npy::write_f64(&mut f, &[7, 2], &[0.5; 14]).unwrap();
    let out = dir.path().join("m.json");
    assert_eq!(code(&["metrics", "mig", "--codes", s(&codes), "--dataset", s(&archive), "-o", s(&out)]), 2);
    assert!(!out.exists());
}

#[test]
fn unfairness_of_independent_predictions_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let preds = dir.path().join("p.npy");
    let sens = dir.path().join("s.npy");
    npy::write_i64(&mut std::fs::File::create(&preds).unwrap(), &[2, 4], &[0, 1, 0, 1, 1, 1, 0, 0]).unwrap();
    npy::write_i64(&mut std::fs::File::create(&sens).unwrap(), &[4], &[0, 0, 1, 1]).unwrap();
    let out = dir.path().join("u.json");
    ok(&["metrics", "unfairness", "--predictions", s(&preds), "--sensitive", s(&sens), "-o", s(&out)]);
    let v = json(&out);
    // target 0 is independent of the attribute, target 1 is determined by it
    assert!((v["value"].as_f64().unwrap() - 0.25).abs() < 1e-12, "{v}");
}

#[test]
fn correlate_examples() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let neg = dir.path().join("n.json");
    std::fs::write(&a, r#"{"w": 1, "x": 2, "y": 3, "z": 4}"#).unwrap();
    std::fs::write(&b, r#"{"scores": {"w": 1, "x": 3, "y": 2, "z": 4}}"#).unwrap();
    std::fs::write(&neg, r#"{"w": -1, "x": -2, "y": -3, "z": -4}"#).unwrap();
    let out = dir.path().join("c.json");
    ok(&["correlate", s(&a), s(&b), "-o", s(&out)]);
    let v = json(&out);
    assert!((v["value"].as_f64().unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(v["method"], "spearman");
    assert_eq!(ok(&["correlate", s(&a), s(&a)]).trim().parse::<f64>().unwrap(), 1.0);
    assert_eq!(ok(&["correlate", s(&a), s(&neg), "--method", "pearson"]).trim().parse::<f64>().unwrap(), -1.0);
    assert_eq!(ok(&["correlate", s(&neg), s(&a), "--negate-a"]).trim().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn correlate_failures() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let other = dir.path().join("o.json");
    let flat = dir.path().join("f.json");
    std::fs::write(&a, "[1, 2, 3]").unwrap();
    std::fs::write(&other, r#"{"p": 1, "q": 2}"#).unwrap();
    std::fs::write(&flat, "[5, 5, 5]").unwrap();
    assert_eq!(code(&["correlate", s(&a), s(&other)]), 2);
    assert_eq!(code(&["correlate", s(&a), s(&flat)]), 3);
}

#[test]
fn correlate_reads_rankings() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("s"), &["perturbed:0.5", "perturbed:0", "perturbed:0.2"], 2);
    ok(&["rank", s(&manifest), "-o", s(&dir.path().join("r"))]);
    let truth = dir.path().join("t.json");
    std::fs::write(&truth, r#"{"perturbed:0": 0, "perturbed:0.2": 0.2, "perturbed:0.5": 0.5}"#).unwrap();
    let r = ok(&["correlate", s(&dir.path().join("r/ranking.json")), s(&truth)]);
    assert_eq!(r.trim().parse::<f64>().unwrap(), 1.0);
}

#[test]
fn dsprites_inspect_summarises() {
    let dir = tempfile::tempdir().unwrap();
    let (archive, _) = disentangled_fixture(dir.path());
    let v: Value = serde_json::from_str(&ok(&["dsprites-inspect", s(&archive)])).unwrap();
    assert_eq!(v["n_samples"], 240);
    assert_eq!(v["factor_sizes"], serde_json::json!([1, 3, 4, 5, 2, 2]));
    assert_eq!(v["factor_tags"][1], "shape");
    assert_eq!(v["full_grid"], true);
    assert_eq!(code(&["dsprites-inspect", s(&dir.path().join("absent.npz"))]), 2);
}

#[test]
fn help_prints_default_table() {
    let h = ok(&["rank", "--help"]);
    assert!(h.contains("trace samples (m)      64"));
    assert!(h.contains("[default: 8]"));
}
