//! Command-line entry point.
//!
//! Every command reads one TOML [`RunConfig`] (all keys optional), runs inside a
//! worker pool of the requested size and writes its outputs into a run
//! directory whose `manifest.json` records the SHA-256 of every file and the
//! hash of the effective config. Outputs never depend on the worker count.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, PairMode};
use crate::env::{self, SuiteParams, TabularMdp};
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, PreparedExamples, PreparedPairs, Z0Mode};
use crate::manifest::{sha256_hex, Manifest, RunDir};
use crate::oracle::{self, RegularizationParams};
use crate::policy::TabularPolicy;
use crate::rng;
use crate::selector::SelectorConfig;
use crate::train::{self, LossKind, PipelineConfig, ReferenceChoice, SftSchedule, TrainConfig};
use crate::tts::{self, SweepContext, DEFAULT_ALPHAS, DEFAULT_N_GRID, DEFAULT_TEMPERATURE, DEFAULT_TEMPERATURES};
use crate::verifier::{VerifierConfig, VerifierModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CAPACITY: i32 = 4;
pub const EXIT_VERIFICATION: i32 = 5;

/// Largest `num_actions^H` the oracle check enumerates.
pub const BRUTE_FORCE_LIMIT: u64 = 100_000;
pub const VALUE_TOLERANCE: f64 = 1e-10;
pub const SIMPLEX_TV_TOLERANCE: f64 = 1e-6;
pub const CLOSED_FORM_TV_TOLERANCE: f64 = 1e-12;
pub const GRAD_TOLERANCE: f64 = 1e-6;

const ORACLE_REF_STREAM: u64 = 0x6f72_6163;
const GRAD_STREAM: u64 = 0x6772_6164;
const PERTURB_LOG_Z: f64 = 1e-6;
const INJECTED_GRADIENT_SCALE: f64 = 1.0 + 1e-3;

/// Reads a file, naming it in the error.
fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every stochastic stage. `--seed` overrides it.
    pub seed: u64,
    pub suite: SuiteSection,
    pub training: TrainingSection,
    pub loss: LossSection,
    pub selector: SelectorConfig,
    pub tts: TtsSection,
    pub grad_check: GradCheckSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Multi-turn bug-fix instances on a shared state space.
    #[default]
    Bugfix,
    /// Single-turn bandits (`H = 1`).
    Bandit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSection {
    pub kind: SuiteKind,
    /// Number of instances.
    pub count: usize,
    /// Turn budget of bug-fix instances.
    pub horizon: usize,
    /// Search steps needed to locate the bug.
    pub locate_steps: usize,
    /// Arms per bandit instance.
    pub num_actions: usize,
}

impl Default for SuiteSection {
    fn default() -> Self {
        let p = SuiteParams::default();
        SuiteSection { kind: SuiteKind::Bugfix, count: 8, horizon: p.horizon, locate_steps: p.locate_steps, num_actions: 4 }
    }
}

impl SuiteSection {
    pub fn params(&self) -> SuiteParams {
        SuiteParams { horizon: self.horizon, locate_steps: self.locate_steps }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<TabularMdp>> {
        if self.count == 0 {
            return Err(Error::config("suite.count must be >= 1"));
        }
        match self.kind {
            SuiteKind::Bugfix => env::make_bugfix_suite(seed, self.count, &self.params()),
            SuiteKind::Bandit => env::make_bandit_suite(seed, self.count, self.num_actions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Preference-stage step size.
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop when the gradient infinity norm falls to this value.
    pub grad_tol: f64,
    pub loss_kind: LossKind,
    /// Behavior-cloning step size and iteration budget.
    pub sft_learning_rate: f64,
    pub sft_max_iters: usize,
    /// Teacher rollouts per instance for the SFT pool.
    pub teacher_rollouts: usize,
    /// SFT-policy rollouts per instance added to the preference pool.
    pub student_rollouts: usize,
    pub pool_temperature: f64,
    pub pair_mode: PairMode,
    pub reference: ReferenceChoice,
    pub verifier_iters: usize,
    pub verifier_learning_rate: f64,
    /// Regularization of the soft-optimal teacher (uniform reference).
    pub teacher_alpha: f64,
    pub teacher_beta: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        TrainingSection {
            learning_rate: p.train.learning_rate,
            max_iters: p.train.max_iters,
            grad_tol: p.train.grad_tol,
            loss_kind: p.train.loss_kind,
            sft_learning_rate: p.sft.learning_rate,
            sft_max_iters: p.sft.max_iters,
            teacher_rollouts: p.teacher_rollouts,
            student_rollouts: p.student_rollouts,
            pool_temperature: p.pool_temperature,
            pair_mode: p.pair_mode,
            reference: p.reference,
            verifier_iters: p.verifier.iters,
            verifier_learning_rate: p.verifier.learning_rate,
            teacher_alpha: 0.3,
            teacher_beta: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Entropy weight; `alpha - beta` is the extra entropy bonus.
    pub alpha: f64,
    /// Cross-entropy weight toward the reference.
    pub beta: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    pub z0_mode: Z0Mode,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::default();
        LossSection {
            alpha: c.params.alpha,
            beta: c.params.beta,
            lambda_plus: c.lambda_plus,
            lambda_minus: c.lambda_minus,
            z0_mode: c.z0_mode,
        }
    }
}

impl LossSection {
    pub fn params(&self) -> RegularizationParams {
        RegularizationParams { alpha: self.alpha, beta: self.beta }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            params: self.params(),
            lambda_plus: self.lambda_plus,
            lambda_minus: self.lambda_minus,
            z0_mode: self.z0_mode,
            stop_gradient_z0: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Rollout count `N` over `n_values` at `temperature`.
    Scaling,
    /// Sampling temperature over `temperatures` at `sweep_n`.
    Temperature,
    /// Retrains the pipeline for each of `alphas` and evaluates at `sweep_n`.
    Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtsSection {
    pub n_values: Vec<usize>,
    pub temperature: f64,
    pub temperatures: Vec<f64>,
    pub sweep_n: usize,
    pub alphas: Vec<f64>,
    pub sweeps: Vec<Sweep>,
}

impl Default for TtsSection {
    fn default() -> Self {
        TtsSection {
            n_values: DEFAULT_N_GRID.to_vec(),
            temperature: DEFAULT_TEMPERATURE,
            temperatures: DEFAULT_TEMPERATURES.to_vec(),
            sweep_n: 16,
            alphas: DEFAULT_ALPHAS.to_vec(),
            sweeps: vec![Sweep::Scaling, Sweep::Temperature],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    /// Random instances checked per loss.
    pub instances: usize,
    /// Finite-difference step, within `[1e-7, 1e-3]`.
    pub step: f64,
    pub horizon: usize,
    /// Rollouts per policy in each instance's pool.
    pub rollouts: usize,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        GradCheckSection { instances: 50, step: 1e-4, horizon: 4, rollouts: 6 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        Ok(config)
    }

    /// Reads the file, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_toml(&read_text(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot render config: {e}")))
    }

    /// Canonical JSON: object keys sorted, so equal configs serialize identically.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.canonical_json()?.as_bytes()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let t = &self.training;
        PipelineConfig {
            teacher_rollouts: t.teacher_rollouts,
            student_rollouts: t.student_rollouts,
            pool_temperature: t.pool_temperature,
            pair_mode: t.pair_mode,
            reference: t.reference,
            sft: SftSchedule { learning_rate: t.sft_learning_rate, max_iters: t.sft_max_iters, grad_tol: t.grad_tol },
            train: TrainConfig {
                learning_rate: t.learning_rate,
                max_iters: t.max_iters,
                grad_tol: t.grad_tol,
                loss_kind: t.loss_kind,
                loss_config: self.loss.loss_config(),
                seed: self.seed,
            },
            verifier: VerifierConfig { iters: t.verifier_iters, learning_rate: t.verifier_learning_rate },
        }
    }

    pub fn teacher_params(&self) -> RegularizationParams {
        RegularizationParams { alpha: self.training.teacher_alpha, beta: self.training.teacher_beta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.suite.count == 0 {
            return Err(Error::config("suite.count must be >= 1"));
        }
        if self.suite.kind == SuiteKind::Bugfix {
            self.suite.params().validate()?;
        } else if self.suite.num_actions < 2 {
            return Err(Error::config("suite.num_actions must be >= 2"));
        }
        self.teacher_params().validate()?;
        self.pipeline().validate()?;
        self.selector.validate()?;
        let tts = &self.tts;
        if tts.n_values.is_empty() || tts.n_values.contains(&0) || tts.sweep_n == 0 {
            return Err(Error::config("tts rollout counts must be >= 1"));
        }
        if tts.temperatures.iter().chain([&tts.temperature]).any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::config("tts temperatures must be finite and >= 0"));
        }
        let g = &self.grad_check;
        if g.instances == 0 || g.rollouts == 0 {
            return Err(Error::config("grad_check.instances and grad_check.rollouts must be >= 1"));
        }
        if !(1e-7..=1e-3).contains(&g.step) {
            return Err(Error::config(format!("grad_check.step {} outside [1e-7, 1e-3]", g.step)));
        }
        SuiteParams { horizon: g.horizon, locate_steps: 1 }.validate()
    }
}

// ---------------------------------------------------------------------------
// Suites on disk

/// Writes one JSON file per instance plus the manifest.
pub fn cmd_gen_suite(config: &RunConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    let suite = config.suite.generate(config.seed)?;
    let mut run = RunDir::create(out, "gen-suite", &config.hash()?)?;
    for (i, mdp) in suite.iter().enumerate() {
        run.write(&format!("instance_{i:03}.json"), mdp.to_json()? + "\n")?;
    }
    run.write("config.json", config.canonical_json()? + "\n")?;
    run.finish()
}

/// Loads the instances listed in a suite directory's manifest, checking digests.
pub fn load_suite(dir: &Path) -> Result<Vec<TabularMdp>> {
    let manifest: Manifest = serde_json::from_str(&read_text(dir.join("manifest.json"))?)?;
    let mut suite = Vec::new();
    for entry in manifest.files.iter().filter(|f| f.name.starts_with("instance_")) {
        let text = read_text(dir.join(&entry.name))?;
        if sha256_hex(text.as_bytes()) != entry.sha256 {
            return Err(Error::Mismatch(format!("{} does not match its manifest digest", entry.name)));
        }
        suite.push(TabularMdp::from_json(&text)?);
    }
    if suite.is_empty() {
        return Err(Error::config(format!("{} lists no instances", dir.display())));
    }
    if suite.iter().any(|m| !m.same_shape(&suite[0])) {
        return Err(Error::Mismatch("suite instances do not share one state space".into()));
    }
    Ok(suite)
}

// ---------------------------------------------------------------------------
// Oracle check

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleFault {
    /// Shifts every initial-step log-partition by a small constant.
    PerturbZ,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub instance_id: String,
    pub check: String,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub skipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
    pub passed: bool,
}

impl CheckReport {
    fn new(rows: Vec<CheckRow>) -> Self {
        let passed = rows.iter().all(|r| r.passed);
        CheckReport { rows, passed }
    }

    pub fn max_error(&self, check: &str) -> f64 {
        self.rows.iter().filter(|r| r.check == check && !r.skipped).map(|r| r.error).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:<26} {:>12} {:>9}  status\n", "instance", "check", "error", "tol");
        for r in &self.rows {
            let status = if r.skipped { "SKIP" } else if r.passed { "ok" } else { "FAIL" };
            s += &format!("{:<28} {:<26} {:>12.3e} {:>9.0e}  {status}\n", r.instance_id, r.check, r.error, r.tolerance);
        }
        s
    }
}

fn row(instance_id: &str, check: &str, error: f64, tolerance: f64) -> CheckRow {
    CheckRow {
        instance_id: instance_id.into(),
        check: check.into(),
        error,
        tolerance,
        passed: error <= tolerance,
        skipped: false,
    }
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Random strictly positive reference over every state of `mdp`.
pub fn random_reference(mdp: &TabularMdp, seed: u64, index: usize) -> TabularPolicy {
    let mut r = rng::stream(seed, &[ORACLE_REF_STREAM, index as u64]);
    let logits = (0..mdp.num_states * mdp.num_actions).map(|_| r.gen_range(-1.0..1.0)).collect();
    TabularPolicy::from_logits(mdp.num_states, mdp.num_actions, logits).expect("shape is consistent")
}

/// Soft backward induction against exhaustive enumeration and the final-step closed form
/// against the closed form's own formula and simplex ascent, for every instance.
pub fn oracle_check(
    suite: &[TabularMdp],
    params: &RegularizationParams,
    seed: u64,
    fault: Option<OracleFault>,
) -> Result<(CheckReport, Vec<oracle::OracleSolution>)> {
    params.validate()?;
    let per_instance: Vec<(Vec<CheckRow>, oracle::OracleSolution)> = suite
        .par_iter()
        .enumerate()
        .map(|(i, mdp)| {
            let reference = random_reference(mdp, seed, i);
            let mut solution = oracle::soft_backward_induction(mdp, &reference, params)?;
            if fault == Some(OracleFault::PerturbZ) {
                for s in solution.steps[0].values_mut() {
                    s.log_z += PERTURB_LOG_Z;
                    s.v = params.alpha * s.log_z;
                }
            }
            let id = &mdp.instance_id;
            let mut rows = Vec::new();

            let paths = (mdp.num_actions as u64).checked_pow(mdp.horizon as u32);
            if paths.is_some_and(|p| p <= BRUTE_FORCE_LIMIT) {
                let mut worst: f64 = 0.0;
                for &(s, _) in &mdp.initial_states {
                    let brute = oracle::brute_force_soft_value(mdp, &reference, params, s)?;
                    worst = worst.max((solution.steps[0][&s].v - brute).abs());
                }
                rows.push(row(id, "backward_vs_brute_force", worst, VALUE_TOLERANCE));
            } else {
                rows.push(CheckRow { skipped: true, ..row(id, "backward_vs_brute_force", 0.0, VALUE_TOLERANCE) });
            }

            let (mut closed_gap, mut simplex_gap): (f64, f64) = (0.0, 0.0);
            for (&s, sol) in &solution.steps[mdp.horizon - 1] {
                let u = &mdp.terminal_utility[s];
                let ref_dist = reference.action_probs(s, 1.0)?;
                let closed = oracle::single_turn_optimal(u, &ref_dist, params)?;
                let ascent = oracle::numeric_simplex_opt(u, &ref_dist, params, 100_000, 0.5 / params.alpha)?;
                closed_gap = closed_gap.max(total_variation(&sol.policy, &closed));
                simplex_gap = simplex_gap.max(total_variation(&closed, &ascent));
            }
            rows.push(row(id, "final_step_vs_closed_form", closed_gap, CLOSED_FORM_TV_TOLERANCE));
            rows.push(row(id, "closed_form_vs_simplex", simplex_gap, SIMPLEX_TV_TOLERANCE));
            Ok((rows, solution))
        })
        .collect::<Result<_>>()?;
    let (rows, solutions): (Vec<Vec<CheckRow>>, Vec<_>) = per_instance.into_iter().unzip();
    Ok((CheckReport::new(rows.into_iter().flatten().collect()), solutions))
}

pub fn cmd_oracle_check(
    config: &RunConfig,
    suite_dir: &Path,
    out: Option<&Path>,
    fault: Option<OracleFault>,
) -> Result<CheckReport> {
    config.validate()?;
    let suite = load_suite(suite_dir)?;
    let (report, solutions) = oracle_check(&suite, &config.loss.params(), config.seed, fault)?;
    if let Some(out) = out {
        let mut run = RunDir::create(out, "oracle-check", &config.hash()?)?;
        for (i, sol) in solutions.iter().enumerate() {
            run.write(&format!("oracle_{i:03}.json"), sol.to_json()? + "\n")?;
        }
        run.write("oracle_report.json", serde_json::to_string_pretty(&report)? + "\n")?;
        run.write("config.json", config.canonical_json()? + "\n")?;
        run.finish()?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradInstance {
    id: String,
    theta: TabularPolicy,
    reference: TabularPolicy,
    pairs: Vec<data::PreferencePair>,
    examples: Vec<data::KtoExample>,
}

fn grad_instance(seed: u64, attempt: usize, section: &GradCheckSection) -> Result<Option<GradInstance>> {
    let inst_seed = rng::stream_id(seed, &[GRAD_STREAM, attempt as u64]);
    let suite = env::make_bugfix_suite(inst_seed, 1, &SuiteParams { horizon: section.horizon, locate_steps: 1 })?;
    let (ns, na) = (suite[0].num_states, suite[0].num_actions);
    let uniform = TabularPolicy::zeros(ns, na);
    let teacher = oracle::suite_oracle_policy(&suite, &uniform, &RegularizationParams { alpha: 0.3, beta: 0.2 })?;
    let pool = data::generate_pool(&suite, &[("teacher", &teacher), ("uniform", &uniform)], section.rollouts, 1.0, inst_seed)?;
    let pairs = data::make_preference_pairs(&pool, PairMode::Hard);
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut r = rng::stream(inst_seed, &[1]);
    let mut random = |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(-1.0..1.0)).collect() };
    let theta = TabularPolicy::from_logits(ns, na, random(ns * na))?;
    let reference = TabularPolicy::from_logits(ns, na, random(ns * na))?;
    Ok(Some(GradInstance {
        id: suite[0].instance_id.clone(),
        theta,
        reference,
        pairs,
        examples: data::make_kto_examples(&pool),
    }))
}

fn grad_rows(inst: &GradInstance, loss: &LossConfig, step: f64, inject: bool) -> Result<[CheckRow; 2]> {
    let scale = if inject { INJECTED_GRADIENT_SCALE } else { 1.0 };
    let (theta, reference) = (&inst.theta, &inst.reference);

    let pairs = PreparedPairs::new(theta, &inst.pairs)?;
    let rep = losses::entropo_dpo_prepared(theta, reference, &pairs, loss)?;
    let grad: Vec<f64> = rep.gradient.iter().map(|g| g * scale).collect();
    let dpo = losses::finite_difference_check(
        |t| Ok(losses::entropo_dpo_prepared(t, reference, &pairs, loss)?.value),
        theta,
        &grad,
        step,
    )?;

    let examples = PreparedExamples::new(theta, &inst.examples)?;
    let rep = losses::entropo_kto_prepared(theta, reference, &examples, loss, None)?;
    let z0 = rep.z0.as_ref().map(|z| z.used);
    let grad: Vec<f64> = rep.gradient.iter().map(|g| g * scale).collect();
    let kto = losses::finite_difference_check(
        |t| Ok(losses::entropo_kto_prepared(t, reference, &examples, loss, z0)?.value),
        theta,
        &grad,
        step,
    )?;
    Ok([
        row(&inst.id, "entropo_dpo", dpo.max_rel_error, GRAD_TOLERANCE),
        row(&inst.id, "entropo_kto", kto.max_rel_error, GRAD_TOLERANCE),
    ])
}

/// Finite-difference checks of both EntroPO losses on `section.instances` random
/// bug-fix instances with random policy and reference logits. Candidate instances
/// whose pool yields no preference pair are passed over.
pub fn grad_check(seed: u64, loss: &LossConfig, section: &GradCheckSection, inject: bool) -> Result<CheckReport> {
    loss.validate()?;
    let budget = section.instances * 20;
    let mut instances = Vec::with_capacity(section.instances);
    let mut attempt = 0;
    while instances.len() < section.instances {
        if attempt == budget {
            return Err(Error::Pipeline(format!("only {} usable gradient-check instances in {budget} draws", instances.len())));
        }
        if let Some(inst) = grad_instance(seed, attempt, section)? {
            instances.push(inst);
        }
        attempt += 1;
    }
    let rows: Vec<[CheckRow; 2]> =
        instances.par_iter().map(|inst| grad_rows(inst, loss, section.step, inject)).collect::<Result<_>>()?;
    Ok(CheckReport::new(rows.into_iter().flatten().collect()))
}

pub fn cmd_grad_check(config: &RunConfig, out: Option<&Path>, inject: bool) -> Result<CheckReport> {
    config.validate()?;
    let report = grad_check(config.seed, &config.loss.loss_config(), &config.grad_check, inject)?;
    if let Some(out) = out {
        let mut run = RunDir::create(out, "grad-check", &config.hash()?)?;
        run.write("grad_report.json", serde_json::to_string_pretty(&report)? + "\n")?;
        run.write("config.json", config.canonical_json()? + "\n")?;
        run.finish()?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training and evaluation

pub fn cmd_train(config: &RunConfig, suite_dir: &Path, out: &Path) -> Result<(Manifest, train::PipelineArtifacts)> {
    config.validate()?;
    let suite = load_suite(suite_dir)?;
    let uniform = TabularPolicy::zeros(suite[0].num_states, suite[0].num_actions);
    let teacher = oracle::suite_oracle_policy(&suite, &uniform, &config.teacher_params())?;
    let artifacts = train::run_pipeline(&suite, &teacher, &config.pipeline())
        .map_err(|e| Error::Pipeline(format!("training on {} failed: {e}", suite_dir.display())))?;
    let mut run = RunDir::create(out, "train", &config.hash()?)?;
    run.write("teacher_policy.json", teacher.to_json()? + "\n")?;
    artifacts.write_into(&mut run)?;
    run.write("config.json", config.canonical_json()? + "\n")?;
    Ok((run.finish()?, artifacts))
}

/// `id=path`, or a bare path whose file stem becomes the id.
pub fn parse_policy_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((id, path)) if !id.is_empty() => (id.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| arg.to_string());
            (id, path)
        }
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    policies: Vec<&'a str>,
    verifier: &'a VerifierModel,
    scaling: Vec<tts::TtsReport>,
    temperature: Vec<tts::TtsReport>,
    alpha: Vec<tts::AlphaRow>,
}

pub fn cmd_eval_tts(
    config: &RunConfig,
    suite_dir: &Path,
    policy_args: &[String],
    verifier_path: Option<&Path>,
    out: &Path,
) -> Result<Manifest> {
    config.validate()?;
    let suite = load_suite(suite_dir)?;
    let mut policies: Vec<(String, TabularPolicy)> = Vec::new();
    for arg in policy_args {
        let (id, path) = parse_policy_arg(arg);
        if policies.iter().any(|(other, _)| *other == id) {
            return Err(Error::usage(format!("policy id '{id}' given twice")));
        }
        policies.push((id, TabularPolicy::from_json(&read_text(&path)?)?));
    }
    if policies.is_empty() && !config.tts.sweeps.iter().all(|s| *s == Sweep::Alpha) {
        return Err(Error::usage("scaling and temperature sweeps need at least one --policy"));
    }
    let verifier = match verifier_path {
        Some(p) => VerifierModel::from_json(&read_text(p)?)?,
        None => VerifierModel::zero(),
    };
    let ctx = SweepContext { suite: &suite, verifier: &verifier, selector: &config.selector, seed: config.seed };
    let refs: Vec<(&str, &TabularPolicy)> = policies.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let tts_cfg = &config.tts;

    let mut run = RunDir::create(out, "eval-tts", &config.hash()?)?;
    let mut report = EvalReport {
        policies: refs.iter().map(|(id, _)| *id).collect(),
        verifier: &verifier,
        scaling: Vec::new(),
        temperature: Vec::new(),
        alpha: Vec::new(),
    };
    if tts_cfg.sweeps.contains(&Sweep::Scaling) {
        let (rows, reports) = tts::scaling_sweep(&refs, &ctx, &tts_cfg.n_values, tts_cfg.temperature)?;
        run.write("scaling.csv", tts::to_csv(&rows)?)?;
        report.scaling = reports;
    }
    if tts_cfg.sweeps.contains(&Sweep::Temperature) {
        let (rows, reports) = tts::temperature_sweep(&refs, &ctx, &tts_cfg.temperatures, tts_cfg.sweep_n)?;
        run.write("temperature.csv", tts::to_csv(&rows)?)?;
        report.temperature = reports;
    }
    if tts_cfg.sweeps.contains(&Sweep::Alpha) {
        let uniform = TabularPolicy::zeros(suite[0].num_states, suite[0].num_actions);
        let teacher = oracle::suite_oracle_policy(&suite, &uniform, &config.teacher_params())?;
        let rows =
            tts::alpha_sweep(&teacher, &config.pipeline(), &ctx, &tts_cfg.alphas, tts_cfg.sweep_n, tts_cfg.temperature)?;
        run.write("alpha.csv", tts::to_csv(&rows)?)?;
        report.alpha = rows;
    }
    run.write("report.json", serde_json::to_string_pretty(&report)? + "\n")?;
    run.write("config.json", config.canonical_json()? + "\n")?;
    run.finish()
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "entropo", version, about = "Entropy-regularized preference optimization on tabular agent MDPs")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run config; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ENTROPO_WORKERS")]
    pub workers: Option<usize>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a suite of instances.
    GenSuite,
    /// Validate soft backward induction and the closed-form optimum.
    OracleCheck {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<OracleFault>,
    },
    /// Run the SFT + preference pipeline.
    Train {
        #[arg(long)]
        suite: PathBuf,
    },
    /// Test-time scaling sweeps for one or more policies.
    EvalTts {
        #[arg(long)]
        suite: PathBuf,
        /// `id=path` or a path (id from the file stem); repeatable.
        #[arg(long = "policy")]
        policies: Vec<String>,
        #[arg(long)]
        verifier: Option<PathBuf>,
    },
    /// Finite-difference check of both loss gradients.
    GradCheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the effective config as TOML.
    ShowConfig,
}

/// Outcome of a command that ran to completion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub passed: bool,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Mismatch(_) => EXIT_IO,
        Error::Capacity(_) => EXIT_CAPACITY,
        Error::Domain(_) | Error::Convergence { .. } | Error::Pipeline(_) => EXIT_OTHER,
    }
}

fn require_out(global: &GlobalArgs) -> Result<&Path> {
    global.out.as_deref().ok_or_else(|| Error::usage("--out is required for this command"))
}

fn effective_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut config = RunConfig::load(global.config.as_deref())?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn say(out: &mut dyn Write, quiet: bool, text: &str) -> Result<()> {
    if !quiet {
        out.write_all(text.as_bytes())?;
    }
    Ok(())
}

/// Runs a parsed command in the caller's thread pool.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Outcome> {
    let g = &cli.global;
    let config = effective_config(g)?;
    let quiet = g.quiet;
    let ok = Outcome { passed: true };
    match &cli.command {
        Command::GenSuite => {
            let dir = require_out(g)?;
            let m = cmd_gen_suite(&config, dir)?;
            say(out, quiet, &format!("wrote {} files to {}\n", m.files.len(), dir.display()))?;
            Ok(ok)
        }
        Command::OracleCheck { suite, inject_fault } => {
            let report = cmd_oracle_check(&config, suite, g.out.as_deref(), *inject_fault)?;
            say(out, quiet, &report.table())?;
            let verdict = if report.passed { "all oracle checks passed\n" } else { "oracle checks FAILED\n" };
            say(out, quiet, verdict)?;
            Ok(Outcome { passed: report.passed })
        }
        Command::Train { suite } => {
            let dir = require_out(g)?;
            let (m, a) = cmd_train(&config, suite, dir)?;
            let text = format!(
                "{}: sft loss {:.6} -> {:.6}, preference loss {:.6} -> {:.6} ({} iterations)\nwrote {} files to {}\n",
                config.training.loss_kind.name(),
                a.sft_history.initial_loss(),
                a.sft_history.final_loss,
                a.history.initial_loss(),
                a.history.final_loss,
                a.history.records.len(),
                m.files.len(),
                dir.display()
            );
            say(out, quiet, &text)?;
            Ok(ok)
        }
        Command::EvalTts { suite, policies, verifier } => {
            let dir = require_out(g)?;
            let m = cmd_eval_tts(&config, suite, policies, verifier.as_deref(), dir)?;
            say(out, quiet, &format!("wrote {} files to {}\n", m.files.len(), dir.display()))?;
            Ok(ok)
        }
        Command::GradCheck { inject_fault } => {
            let report = cmd_grad_check(&config, g.out.as_deref(), *inject_fault)?;
            let text = format!(
                "entropo_dpo max relative error {:.3e}\nentropo_kto max relative error {:.3e}\n{}\n",
                report.max_error("entropo_dpo"),
                report.max_error("entropo_kto"),
                if report.passed { "gradient check passed" } else { "gradient check FAILED" }
            );
            if !report.passed {
                say(out, quiet, &report.table())?;
            }
            say(out, quiet, &text)?;
            Ok(Outcome { passed: report.passed })
        }
        Command::ShowConfig => {
            config.validate()?;
            say(out, false, &config.to_toml()?)?;
            Ok(ok)
        }
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        Some(0) => Err(Error::config("--workers must be >= 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match with_workers(cli.global.workers, || run(&cli, out)).and_then(|r| r) {
        Ok(Outcome { passed: true }) => EXIT_OK,
        Ok(Outcome { passed: false }) => EXIT_VERIFICATION,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[loss]\ngamma = 1.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[extra]\nx = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_key_order_and_formatting() {
        let a = RunConfig::from_toml("seed = 3\n[loss]\nalpha = 1.5\nbeta = 0.5\n").unwrap();
        let b = RunConfig::from_toml("[loss]\nbeta   = 0.50\nalpha = 1.5\n\n[suite]\ncount = 8\n").unwrap();
        let b = RunConfig { seed: 3, ..b };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let c = RunConfig { seed: 4, ..a.clone() };
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["[suite]\ncount = 0", "[loss]\nalpha = 0.5\nbeta = 0.6", "[selector]\neta = 1.5", "[grad_check]\nstep = 0.1"] {
            let c = RunConfig::from_toml(text).unwrap();
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn policy_arg_forms() {
        assert_eq!(parse_policy_arg("a=x/b.json"), ("a".into(), PathBuf::from("x/b.json")));
        assert_eq!(parse_policy_arg("x/policy.json"), ("policy".into(), PathBuf::from("x/policy.json")));
    }

    #[test]
    fn exit_code_classes_are_distinct() {
        let codes = [
            exit_code(&Error::config("x")),
            exit_code(&Error::Io(std::io::Error::other("x"))),
            exit_code(&Error::Capacity("x".into())),
            EXIT_VERIFICATION,
        ];
        for i in 0..codes.len() {
            assert_ne!(codes[i], 0);
            for j in 0..i {
                assert_ne!(codes[i], codes[j]);
            }
        }
    }

    #[test]
    fn bandit_oracle_check_passes() {
        let c = RunConfig::from_toml("[suite]\nkind = \"bandit\"\ncount = 4\nnum_actions = 5").unwrap();
        let suite = c.suite.generate(1).unwrap();
        let (report, _) = oracle_check(&suite, &c.loss.params(), 1, None).unwrap();
        assert!(report.passed, "{}", report.table());
        let (bad, _) = oracle_check(&suite, &c.loss.params(), 1, Some(OracleFault::PerturbZ)).unwrap();
        assert!(!bad.passed);
    }
}
