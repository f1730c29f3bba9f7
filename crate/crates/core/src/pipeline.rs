//! Kernel, embedding and MMD steps applied to every spec group.

use serde::{Deserialize, Serialize};

use crate::embedding::{embed_group, EmbedParams};
use crate::error::Result;
use crate::stability::{pairwise_scores, rank_specs, spec_score, MmdParams, RankingReport, ScoreMatrix, SpecScore};
use crate::trace_store::{Ensemble, TraceTensor};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankParams {
    pub embed: EmbedParams,
    pub mmd: MmdParams,
}

#[derive(Debug, Clone)]
pub struct SpecResult {
    pub score: SpecScore,
    pub matrix: ScoreMatrix,
    pub realization_ids: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RankOutcome {
    pub specs: Vec<SpecResult>,
    pub report: RankingReport,
}

/// Stability score of one spec group.
pub fn score_group(spec_id: &str, traces: &[&TraceTensor], params: &RankParams) -> Result<SpecResult> {
    params.mmd.validate()?;
    let emb = embed_group(traces, &params.embed)?;
    let matrix = pairwise_scores(spec_id, &emb, &params.mmd)?;
    Ok(SpecResult {
        score: spec_score(&matrix)?,
        matrix,
        realization_ids: (0..traces.len()).map(|r| r.to_string()).collect(),
        warnings: emb.warnings,
    })
}

/// Scores and ranks in-memory groups given as `(spec_id, realizations)`.
pub fn rank_groups(groups: &[(String, Vec<TraceTensor>)], params: &RankParams) -> Result<RankOutcome> {
    let specs = groups
        .iter()
        .map(|(id, traces)| {
            let refs: Vec<&TraceTensor> = traces.iter().collect();
            score_group(id, &refs, params)
        })
        .collect::<Result<Vec<_>>>()?;
    finish(specs)
}

/// Scores and ranks every spec group of a loaded ensemble.
pub fn rank_ensemble(ensemble: &Ensemble, params: &RankParams) -> Result<RankOutcome> {
    let specs = ensemble
        .groups
        .iter()
        .map(|(id, runs)| {
            let refs: Vec<&TraceTensor> = runs.iter().map(|(_, t)| t).collect();
            let mut res = score_group(id, &refs, params)?;
            res.realization_ids = runs.iter().map(|(r, _)| r.realization_id.clone()).collect();
            Ok(res)
        })
        .collect::<Result<Vec<_>>>()?;
    finish(specs)
}

fn finish(specs: Vec<SpecResult>) -> Result<RankOutcome> {
    let scores: Vec<SpecScore> = specs.iter().map(|s| s.score.clone()).collect();
    let report = rank_specs(&scores)?;
    Ok(RankOutcome { specs, report })
}
