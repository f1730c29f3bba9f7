use dynorank::synth::{
    gen_factor_data, gen_perturbed_trajectories, train_linear_ae, FactorDataConfig, Regime, SynthSpec,
};
use nalgebra::DMatrix;
use ndarray::{Array2, Axis};

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigenvectors of the sample second-moment matrix, largest first.
fn principal_directions(x: &Array2<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let c = to_na(&(x.t().dot(x) / x.nrows() as f64));
    let eig = c.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let vals = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(x.ncols(), k, |r, j| eig.eigenvectors[(r, order[j])]);
    (vals, vecs)
}

fn unit_columns(a: &Array2<f64>) -> DMatrix<f64> {
    let mut m = to_na(a);
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

/// Largest principal angle between the column spans of `a` and `b`.
fn max_principal_angle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let qa = to_na(a).qr().q();
    let qb = to_na(b).qr().q();
    let s = (qa.transpose() * qb).singular_values();
    s.iter().fold(f64::INFINITY, |m, v| m.min(*v)).clamp(-1.0, 1.0).acos()
}

#[test]
fn factor_covariance_has_requested_spectrum() {
    let cfg = FactorDataConfig {
        k: 2,
        n: 20_000,
        obs_dim: 6,
        variances: Some(vec![4.0, 1.0]),
        noise_std: 0.0,
        seed: 3,
        ..FactorDataConfig::default()
    };
    let d = gen_factor_data(&cfg).unwrap();
    let (vals, _) = principal_directions(&d.dataset.observations, 2);
    assert!((vals[0] / 4.0 - 1.0).abs() < 0.05, "{vals:?}");
    assert!((vals[1] / 1.0 - 1.0).abs() < 0.05, "{vals:?}");
    let gram = d.mixing.t().dot(&d.mixing);
    assert!((&gram - &Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn factor_data_is_seeded() {
    let cfg = FactorDataConfig::default();
    let a = gen_factor_data(&cfg).unwrap();
    let b = gen_factor_data(&cfg).unwrap();
    assert_eq!(a.dataset, b.dataset);
    let c = gen_factor_data(&FactorDataConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.dataset.observations, c.dataset.observations);
}

#[test]
fn factor_data_rejects_bad_shapes() {
    assert!(gen_factor_data(&FactorDataConfig { k: 5, obs_dim: 4, ..Default::default() }).is_err());
    assert!(gen_factor_data(&FactorDataConfig { variances: Some(vec![1.0]), ..Default::default() }).is_err());
}

fn three_factor_setup() -> (dynorank::synth::SynthData, SynthSpec) {
    let data = gen_factor_data(&FactorDataConfig {
        k: 3,
        n: 4000,
        obs_dim: 8,
        variances: Some(vec![4.0, 2.0, 1.0]),
        seed: 11,
        ..FactorDataConfig::default()
    })
    .unwrap();
    let spec = SynthSpec { k_factors: 3, obs_dim: 8, n_epochs: 40, ..SynthSpec::default() };
    (data, spec)
}

#[test]
fn axis_aligned_decoders_find_principal_directions() {
    let (data, spec) = three_factor_setup();
    let (_, pcs) = principal_directions(&data.dataset.observations, 3);
    for seed in [1, 2] {
        let m = train_linear_ae(&SynthSpec { seed, ..spec.clone() }, &data).unwrap();
        let d = unit_columns(&m.model.decoder);
        for j in 0..3 {
            let cos = d.column(j).dot(&pcs.column(j)).abs();
            assert!(cos >= 0.99, "seed {seed}, latent {j}: |cos| = {cos}");
        }
    }
}

#[test]
fn rotation_free_decoders_agree_only_on_the_span() {
    let (data, spec) = three_factor_setup();
    let spec = SynthSpec { regime: Regime::RotationFree, ..spec };
    let a = train_linear_ae(&SynthSpec { seed: 1, ..spec.clone() }, &data).unwrap().model.decoder;
    let b = train_linear_ae(&SynthSpec { seed: 2, ..spec }, &data).unwrap().model.decoder;
    assert!(max_principal_angle(&a, &b) <= 0.05);
    let (ua, ub) = (unit_columns(&a), unit_columns(&b));
    let min_cos = (0..3).map(|j| ua.column(j).dot(&ub.column(j)).abs()).fold(1.0, f64::min);
    assert!(min_cos < 0.9, "columns unexpectedly aligned: {min_cos}");
}

#[test]
fn trace_records_every_epoch() {
    let data = gen_factor_data(&FactorDataConfig::default()).unwrap();
    let spec = SynthSpec { n_epochs: 6, m_trace: 10, ..SynthSpec::default() };
    let run = train_linear_ae(&spec, &data).unwrap();
    assert_eq!(run.trace.shape(), (6, 10, 12));
    assert_eq!(run.losses.len(), 6);
    assert!(run.losses.iter().all(|l| l.is_finite()));
    let again = train_linear_ae(&spec, &data).unwrap();
    assert_eq!(run.trace, again.trace);
}

#[test]
fn perturbed_ensembles() {
    let zero = gen_perturbed_trajectories(4, 0.0, 3, 10, 8, 5).unwrap();
    assert!(zero.iter().all(|t| t == &zero[0]));

    let base = gen_perturbed_trajectories(4, 0.0, 1, 10, 8, 5).unwrap().remove(0);
    let one = gen_perturbed_trajectories(4, 1.0, 6, 10, 8, 5).unwrap();
    let rms: f64 = one
        .iter()
        .map(|t| {
            let d = &t.to_f64() - &base.to_f64();
            (d.mapv(|v| v * v).mean().unwrap()).sqrt()
        })
        .sum::<f64>()
        / one.len() as f64;
    assert!((rms - 1.0).abs() <= 0.05, "rms {rms}");

    let again = gen_perturbed_trajectories(4, 1.0, 6, 10, 8, 5).unwrap();
    assert_eq!(one, again);
    assert!(gen_perturbed_trajectories(4, -0.1, 2, 10, 8, 5).is_err());
}

#[test]
fn perturbed_fields_are_smooth_in_epoch() {
    let t = gen_perturbed_trajectories(9, 1.0, 1, 40, 4, 3).unwrap().remove(0).to_f64();
    let steps = &t.slice(ndarray::s![1.., .., ..]) - &t.slice(ndarray::s![..-1, .., ..]);
    let step_rms = steps.mapv(|v| v * v).mean().unwrap().sqrt();
    let spread = t.std_axis(Axis(0), 0.0).mean().unwrap();
    assert!(step_rms < 0.5 * spread, "step {step_rms}, spread {spread}");
}
