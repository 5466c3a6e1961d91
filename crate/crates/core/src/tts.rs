//! Test-time scaling: N sampled rollouts per instance, hybrid selection, diversity
//! metrics, and sweeps over N, temperature and alpha.
//!
//! Rollout `r` of instance `i` always draws from the stream keyed by `(seed, i, r)`, so the
//! candidates at N are a prefix of the candidates at any larger N.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, TabularMdp, Trajectory};
use crate::error::{Error, Result};
use crate::oracle::{self, RegularizationParams};
use crate::policy::TabularPolicy;
use crate::rng;
use crate::selector::{self, SelectionAudit, SelectorConfig};
use crate::train::{self, PipelineConfig};
use crate::verifier::VerifierModel;

const TTS_STREAM: u64 = 0x7474_7300;

pub const DEFAULT_N_GRID: [usize; 5] = [1, 2, 4, 8, 16];
pub const DEFAULT_TEMPERATURES: [f64; 5] = [0.5, 0.7, 0.9, 1.2, 1.8];
pub const DEFAULT_ALPHAS: [f64; 5] = [0.7, 0.9, 1.1, 1.5, 3.0];
pub const DEFAULT_TEMPERATURE: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub instance_id: String,
    pub solved: bool,
    pub pass_at_n: bool,
    pub distinct: usize,
    pub selected: usize,
    pub audit: SelectionAudit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtsReport {
    pub policy_id: String,
    pub n: usize,
    pub temperature: f64,
    pub seed: u64,
    pub instances: Vec<InstanceReport>,
    pub solve_rate: f64,
    pub pass_at_n_rate: f64,
    pub distinct_mean: f64,
    /// Mean entropy at the run temperature over every state where the suite admits an action.
    pub entropy_mean: f64,
    /// Same, restricted to states the sampled rollouts visited.
    pub visited_entropy_mean: f64,
}

/// The `n` rollouts of instance `index`.
pub fn sample_candidates(
    mdp: &TabularMdp,
    index: usize,
    policy: &TabularPolicy,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..n)
        .map(|r| {
            let mut stream = rng::stream(seed, &[TTS_STREAM, index as u64, r as u64]);
            env::rollout(mdp, policy, temperature, &mut stream)
        })
        .collect()
}

fn mean_entropy<'a>(policy: &TabularPolicy, states: impl IntoIterator<Item = &'a usize>, temperature: f64) -> Result<f64> {
    // Greedy decoding is deterministic.
    if temperature == 0.0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for &s in states {
        total += policy.entropy(s, temperature)?;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean policy entropy at `temperature` over the decision states of every instance.
pub fn mean_reachable_entropy(policy: &TabularPolicy, suite: &[TabularMdp], temperature: f64) -> Result<f64> {
    let states: BTreeSet<usize> = suite.iter().flat_map(|m| m.decision_states()).collect();
    mean_entropy(policy, &states, temperature)
}

pub fn run_tts(
    policy: &TabularPolicy,
    policy_id: &str,
    suite: &[TabularMdp],
    n: usize,
    temperature: f64,
    verifier: &VerifierModel,
    selector_config: &SelectorConfig,
    seed: u64,
) -> Result<TtsReport> {
    if n == 0 {
        return Err(Error::config("number of rollouts must be >= 1"));
    }
    if suite.is_empty() {
        return Err(Error::config("suite is empty"));
    }
    selector_config.validate()?;
    let per_instance: Vec<(InstanceReport, BTreeSet<usize>)> = suite
        .par_iter()
        .enumerate()
        .map(|(i, mdp)| {
            let candidates = sample_candidates(mdp, i, policy, n, temperature, seed)?;
            let (selected, audit) = selector::select(mdp, &candidates, verifier, selector_config)?;
            let pass = selector::pass_at_n(&candidates);
            let solved = candidates[selected].is_success();
            if solved && !pass {
                return Err(Error::Mismatch(format!("{}: selected success without pass@N", mdp.instance_id)));
            }
            let distinct: BTreeSet<Vec<usize>> = candidates.iter().map(Trajectory::actions).collect();
            let visited = candidates.iter().flat_map(|t| t.steps.iter().map(|s| s.state)).collect();
            let report = InstanceReport {
                instance_id: mdp.instance_id.clone(),
                solved,
                pass_at_n: pass,
                distinct: distinct.len(),
                selected,
                audit,
            };
            Ok((report, visited))
        })
        .collect::<Result<_>>()?;
    let count = suite.len() as f64;
    let rate = |f: &dyn Fn(&InstanceReport) -> bool| per_instance.iter().filter(|(r, _)| f(r)).count() as f64 / count;
    let visited: BTreeSet<usize> = per_instance.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let solve_rate = rate(&|r| r.solved);
    let pass_at_n_rate = rate(&|r| r.pass_at_n);
    let distinct_mean = per_instance.iter().map(|(r, _)| r.distinct as f64).sum::<f64>() / count;
    Ok(TtsReport {
        policy_id: policy_id.to_string(),
        n,
        temperature,
        seed,
        solve_rate,
        pass_at_n_rate,
        distinct_mean,
        entropy_mean: mean_reachable_entropy(policy, suite, temperature)?,
        visited_entropy_mean: mean_entropy(policy, &visited, temperature)?,
        instances: per_instance.into_iter().map(|(r, _)| r).collect(),
    })
}

/// One row of a curve table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub policy_id: String,
    pub n_or_temp_or_alpha: f64,
    pub solve_rate: f64,
    pub pass_at_n: f64,
    pub distinct_mean: f64,
    pub entropy_mean: f64,
    pub seed: u64,
}

impl CurveRow {
    fn from_report(report: &TtsReport, x: f64) -> Self {
        CurveRow {
            policy_id: report.policy_id.clone(),
            n_or_temp_or_alpha: x,
            solve_rate: report.solve_rate,
            pass_at_n: report.pass_at_n_rate,
            distinct_mean: report.distinct_mean,
            entropy_mean: report.entropy_mean,
            seed: report.seed,
        }
    }
}

/// Alpha-sweep row: the curve columns plus the oracle's final-step entropy at that alpha.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub policy_id: String,
    pub n_or_temp_or_alpha: f64,
    pub solve_rate: f64,
    pub pass_at_n: f64,
    pub distinct_mean: f64,
    pub entropy_mean: f64,
    pub seed: u64,
    pub oracle_final_entropy: f64,
}

impl AlphaRow {
    fn new(curve: CurveRow, oracle_final_entropy: f64) -> Self {
        AlphaRow {
            policy_id: curve.policy_id,
            n_or_temp_or_alpha: curve.n_or_temp_or_alpha,
            solve_rate: curve.solve_rate,
            pass_at_n: curve.pass_at_n,
            distinct_mean: curve.distinct_mean,
            entropy_mean: curve.entropy_mean,
            seed: curve.seed,
            oracle_final_entropy,
        }
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// The evaluation settings shared by every sweep.
#[derive(Clone, Debug)]
pub struct SweepContext<'a> {
    pub suite: &'a [TabularMdp],
    pub verifier: &'a VerifierModel,
    pub selector: &'a SelectorConfig,
    pub seed: u64,
}

pub fn scaling_sweep(
    policies: &[(&str, &TabularPolicy)],
    ctx: &SweepContext,
    n_values: &[usize],
    temperature: f64,
) -> Result<(Vec<CurveRow>, Vec<TtsReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (id, policy) in policies {
        for &n in n_values {
            let report = run_tts(policy, id, ctx.suite, n, temperature, ctx.verifier, ctx.selector, ctx.seed)?;
            rows.push(CurveRow::from_report(&report, n as f64));
            reports.push(report);
        }
    }
    Ok((rows, reports))
}

pub fn temperature_sweep(
    policies: &[(&str, &TabularPolicy)],
    ctx: &SweepContext,
    temperatures: &[f64],
    n: usize,
) -> Result<(Vec<CurveRow>, Vec<TtsReport>)> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (id, policy) in policies {
        for &t in temperatures {
            let report = run_tts(policy, id, ctx.suite, n, t, ctx.verifier, ctx.selector, ctx.seed)?;
            rows.push(CurveRow::from_report(&report, t));
            reports.push(report);
        }
    }
    Ok((rows, reports))
}

/// Mean final-step entropy of the soft-optimal policy over the suite, against a uniform
/// reference.
pub fn oracle_final_entropy(suite: &[TabularMdp], params: &RegularizationParams) -> Result<f64> {
    let mut total = 0.0;
    for mdp in suite {
        let uniform = TabularPolicy::zeros(mdp.num_states, mdp.num_actions);
        let solution = oracle::soft_backward_induction(mdp, &uniform, params)?;
        total += oracle::oracle_entropy_profile(&solution).last().copied().unwrap_or(0.0);
    }
    Ok(total / suite.len() as f64)
}

/// Trains one pipeline per alpha (beta fixed) and evaluates each with `n` rollouts.
pub fn alpha_sweep(
    teacher: &TabularPolicy,
    pipeline: &PipelineConfig,
    ctx: &SweepContext,
    alphas: &[f64],
    n: usize,
    temperature: f64,
) -> Result<Vec<AlphaRow>> {
    let beta = pipeline.train.loss_config.params.beta;
    if let Some(&bad) = alphas.iter().find(|&&a| !(a > beta)) {
        return Err(Error::config(format!("alpha sweep value {bad} must exceed beta = {beta}")));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let params = RegularizationParams::new(alpha, beta)?;
        let mut config = pipeline.clone();
        config.train.loss_config.params = params;
        let artifacts = train::run_pipeline(ctx.suite, teacher, &config)?;
        let id = format!("{}-alpha{alpha}", config.train.loss_kind.name());
        let report =
            run_tts(&artifacts.policy, &id, ctx.suite, n, temperature, &artifacts.verifier, ctx.selector, ctx.seed)?;
        rows.push(AlphaRow::new(CurveRow::from_report(&report, alpha), oracle_final_entropy(ctx.suite, &params)?));
    }
    Ok(rows)
}
