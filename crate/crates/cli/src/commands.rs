use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use dynorank::embedding::embed_group;
use dynorank::metrics::{betavae_metric, factorvae_metric, mean_unfairness, mig};
use dynorank::pipeline::rank_ensemble;
use dynorank::rank_stats::correlate as correlate_scores;
use dynorank::synth::{gen_factor_data, gen_perturbed_trajectories, train_ensemble, FactorDataConfig, Regime, SynthSpec};
use dynorank::trace_store::npy::{self, NpyArray};
use dynorank::trace_store::{
    load_dsprites_with, save_trace, write_atomic, DspritesOptions, Ensemble, EnsembleManifest, RunManifest,
    TraceTensor,
};
use ndarray::Array2;
use serde_json::{json, Value};

use crate::args::{
    CodeMetricArgs, CorrelateArgs, EmbedArgs, InspectArgs, MetricsCommand, RankArgs, SynthArgs, UnfairnessArgs,
};
use crate::output::{create_dir, file_stems, read_scores, relative, write_json, VERSION};
use crate::Failure;

pub fn rank(a: &RankArgs) -> Result<(), Failure> {
    let params = a.pipeline.rank_params();
    let ensemble = Ensemble::load(&a.manifest)?;
    let outcome = rank_ensemble(&ensemble, &params)?;
    for spec in &outcome.specs {
        for w in &spec.warnings {
            eprintln!("warning: {}: {w}", spec.score.spec_id);
        }
    }

    let ids: Vec<&str> = outcome.specs.iter().map(|s| s.score.spec_id.as_str()).collect();
    let stems = file_stems(&ids)?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::Input(format!("csv: {e}"));
    csv.write_record(["rank", "spec_id", "mean_mmd"]).map_err(csv_err)?;
    for e in &outcome.report.entries {
        csv.write_record([e.rank.to_string(), e.spec_id.clone(), format!("{:e}", e.mean_mmd)])
            .map_err(csv_err)?;
    }
    let csv = csv.into_inner().map_err(|e| Failure::Input(format!("csv: {e}")))?;

    let scores_dir = a.out.join("scores");
    create_dir(&scores_dir)?;
    for (spec, stem) in outcome.specs.iter().zip(&stems) {
        let pairs: Vec<Value> = spec.matrix.pairs().into_iter().map(|(i, j, v)| json!([i, j, v])).collect();
        write_json(
            &scores_dir.join(format!("{stem}.json")),
            &json!({
                "spec_id": spec.score.spec_id,
                "mean_mmd": spec.score.mean,
                "std_mmd": spec.score.std,
                "pairs": pairs,
                "realization_ids": spec.realization_ids,
                "warnings": spec.warnings,
                "params": params,
                "version": VERSION,
            }),
        )?;
    }
    write_atomic(&a.out.join("ranking.csv"), |w| w.write_all(&csv))?;
    write_json(
        &a.out.join("ranking.json"),
        &json!({
            "entries": outcome.report.entries,
            "tie_break": outcome.report.tie_break,
            "manifest": a.manifest,
            "params": params,
            "version": VERSION,
        }),
    )?;
    for e in &outcome.report.entries {
        println!("{}\t{}\t{:e}{}", e.rank, e.spec_id, e.mean_mmd, if e.tied { "\ttied" } else { "" });
    }
    Ok(())
}

pub fn embed(a: &EmbedArgs) -> Result<(), Failure> {
    let params = a.pipeline.embed_params();
    let ensemble = Ensemble::load(&a.manifest)?;
    let group = ensemble
        .group(&a.spec)
        .ok_or_else(|| Failure::Input(format!("spec {:?} not found in {}", a.spec, a.manifest.display())))?;
    let traces: Vec<&TraceTensor> = group.iter().map(|(_, t)| t).collect();
    let emb = embed_group(&traces, &params)?;

    create_dir(&a.out)?;
    let coords: Vec<f64> = emb.coords.iter().copied().collect();
    let shape = [emb.coords.nrows(), emb.coords.ncols()];
    write_atomic(&a.out.join("coords.npy"), |w| npy::write_f64(w, &shape, &coords))?;
    write_json(
        &a.out.join("offsets.json"),
        &json!({
            "spec_id": a.spec,
            "realization_ids": group.iter().map(|(r, _)| &r.realization_id).collect::<Vec<_>>(),
            "realization_offsets": emb.realization_offsets,
            "n_epochs": emb.n_epochs,
            "m_samples": emb.m_samples,
            "d": emb.d,
            "row_order": "realization, epoch, sample",
            "singular_values": emb.singular_values.to_vec(),
            "warnings": emb.warnings,
            "config": params,
            "version": VERSION,
        }),
    )
}

fn read_npy(path: &Path) -> Result<NpyArray, Failure> {
    let file = File::open(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(NpyArray::read(&mut BufReader::new(file))?)
}

pub fn metrics(cmd: &MetricsCommand) -> Result<(), Failure> {
    match cmd {
        MetricsCommand::BetaVae(a) => code_metric("beta_vae", a),
        MetricsCommand::FactorVae(a) => code_metric("factor_vae", a),
        MetricsCommand::Mig(a) => code_metric("mig", a),
        MetricsCommand::Unfairness(a) => unfairness(a),
    }
}

fn code_metric(name: &str, a: &CodeMetricArgs) -> Result<(), Failure> {
    let cfg = a.config();
    cfg.validate()?;
    let noise = a.noise.resolve()?;
    let raw = read_npy(&a.codes)?;
    let [n, dz] = raw.shape[..] else {
        return Err(Failure::Input(format!("codes must be 2-D, found shape {:?}", raw.shape)));
    };
    let codes = Array2::from_shape_vec((n, dz), raw.to_f64()).map_err(|e| Failure::Input(e.to_string()))?;
    let dataset = load_dsprites_with(&a.dataset, &DspritesOptions::default())?;
    let outcome = match name {
        "beta_vae" => betavae_metric(codes.view(), &dataset, &cfg, noise.as_ref())?,
        "factor_vae" => factorvae_metric(codes.view(), &dataset, &cfg, noise.as_ref())?,
        _ => {
            if noise.is_some() {
                return Err(Failure::Input("mig does not take a noise model".into()));
            }
            mig(codes.view(), &dataset, &cfg)?
        }
    };
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!("{name}\t{}", outcome.value);
    write_json(
        &a.out,
        &json!({
            "metric": name,
            "value": outcome.value,
            "config": cfg,
            "noise_model": noise,
            "codes": a.codes,
            "dataset": a.dataset,
            "warnings": outcome.warnings,
            "version": VERSION,
        }),
    )
}

fn unfairness(a: &UnfairnessArgs) -> Result<(), Failure> {
    let preds = read_npy(&a.predictions)?;
    let sens = read_npy(&a.sensitive)?;
    let sensitive = sens.to_i64()?;
    if sens.shape.len() != 1 {
        return Err(Failure::Input(format!("sensitive attribute must be 1-D, found shape {:?}", sens.shape)));
    }
    let flat = preds.to_i64()?;
    let targets: Vec<Vec<i64>> = match preds.shape[..] {
        [_] => vec![flat],
        [t, n] if t > 0 => flat.chunks(n.max(1)).map(<[i64]>::to_vec).collect(),
        _ => return Err(Failure::Input(format!("predictions must be 1-D or 2-D, found shape {:?}", preds.shape))),
    };
    let outcome = mean_unfairness(&targets, &sensitive)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!("unfairness\t{}", outcome.value);
    write_json(
        &a.out,
        &json!({
            "metric": "unfairness",
            "value": outcome.value,
            "config": {"predictions": a.predictions, "sensitive": a.sensitive, "n_targets": targets.len()},
            "noise_model": Value::Null,
            "warnings": outcome.warnings,
            "version": VERSION,
        }),
    )
}

pub fn correlate(a: &CorrelateArgs) -> Result<(), Failure> {
    let sa = read_scores(&a.scores_a)?;
    let sb = read_scores(&a.scores_b)?;
    if !sa.keys().eq(sb.keys()) {
        let only_a: Vec<_> = sa.keys().filter(|k| !sb.contains_key(*k)).collect();
        let only_b: Vec<_> = sb.keys().filter(|k| !sa.contains_key(*k)).collect();
        return Err(Failure::Input(format!(
            "score files cover different ids (only in first: {only_a:?}, only in second: {only_b:?})"
        )));
    }
    let sign = if a.negate_a { -1.0 } else { 1.0 };
    let va: Vec<f64> = sa.values().map(|v| sign * v).collect();
    let vb: Vec<f64> = sb.values().copied().collect();
    let value = correlate_scores(&va, &vb, a.method.into())?;
    println!("{value}");
    if let Some(out) = &a.out {
        write_json(
            out,
            &json!({
                "method": dynorank::rank_stats::Method::from(a.method),
                "value": value,
                "n": va.len(),
                "ids": sa.keys().collect::<Vec<_>>(),
                "config": {"scores_a": a.scores_a, "scores_b": a.scores_b, "negate_a": a.negate_a},
                "version": VERSION,
            }),
        )?;
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), Failure> {
    if a.realizations < 2 {
        return Err(Failure::Input("need at least 2 realizations per spec".into()));
    }
    let regimes: Vec<Regime> = a.regimes.iter().map(|r| r.parse()).collect::<dynorank::Result<_>>()?;
    let labels: Vec<String> = regimes.iter().map(Regime::to_string).collect();
    let stems = file_stems(&labels.iter().map(String::as_str).collect::<Vec<_>>())?;
    let data_cfg = FactorDataConfig {
        k: a.k_factors,
        n: a.n_data,
        obs_dim: a.obs_dim,
        seed: a.data_seed,
        ..FactorDataConfig::default()
    };
    let needs_data = regimes.iter().any(|r| !matches!(r, Regime::Perturbed(_)));
    let data = if needs_data { Some(gen_factor_data(&data_cfg)?) } else { None };

    let mut specs = Vec::new();
    let mut groups = Vec::new();
    for (i, regime) in regimes.iter().enumerate() {
        let spec = SynthSpec {
            regime: *regime,
            k_factors: a.k_factors,
            obs_dim: a.obs_dim,
            n_epochs: a.n_epochs,
            m_trace: a.m_trace,
            learning_rate: a.learning_rate,
            steps_per_epoch: a.steps_per_epoch,
            init_scale: a.init_scale,
            reg_weight: a.reg_weight,
            seed: a.seed + i as u64 * a.seed_stride,
        };
        let traces = match regime {
            Regime::Perturbed(delta) => {
                gen_perturbed_trajectories(spec.seed, *delta, a.realizations, a.n_epochs, a.m_trace, a.obs_dim)?
            }
            _ => {
                let data = data.as_ref().expect("generated above");
                train_ensemble(&spec, data, a.realizations)?.into_iter().map(|m| m.trace).collect()
            }
        };
        groups.push(traces);
        specs.push(spec);
    }

    let trace_dir = a.out.join("traces");
    create_dir(&trace_dir)?;
    let mut runs = Vec::new();
    for ((spec, traces), (label, stem)) in specs.iter().zip(&groups).zip(labels.iter().zip(&stems)) {
        let Value::Object(mut hyper) = serde_json::to_value(spec)? else { unreachable!() };
        hyper.insert("regime".into(), Value::String(label.clone()));
        hyper.remove("seed");
        for (r, trace) in traces.iter().enumerate() {
            let path = trace_dir.join(format!("{stem}_{r}.npy"));
            save_trace(trace, &path)?;
            runs.push(RunManifest {
                spec_id: label.clone(),
                realization_id: r.to_string(),
                seed: (spec.seed + r as u64) as i64,
                hyperparams: hyper.clone().into_iter().collect(),
                trace_path: relative(&a.out, &path),
            });
        }
    }
    let manifest = EnsembleManifest {
        runs,
        trace_sample_ids: (0..a.m_trace as i64).collect(),
    };
    manifest.write(a.out.join("manifest.json"))?;
    write_json(
        &a.out.join("synth.json"),
        &json!({
            "specs": specs,
            "realizations": a.realizations,
            "data": if needs_data { serde_json::to_value(&data_cfg)? } else { Value::Null },
            "version": VERSION,
        }),
    )?;
    println!("{}", a.out.join("manifest.json").display());
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<(), Failure> {
    let d = load_dsprites_with(
        &a.archive,
        &DspritesOptions {
            images: a.images,
            tags: None,
        },
    )?;
    let summary = json!({
        "archive": a.archive,
        "n_samples": d.len(),
        "factor_sizes": d.factor_sizes,
        "factor_tags": d.factor_tags,
        "full_grid": d.is_full_grid(),
        "obs_dim": d.observations.ncols(),
        "version": VERSION,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
