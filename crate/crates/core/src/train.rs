//! Full-batch gradient descent for behavior cloning and preference optimization, and the
//! two-stage pipeline that chains them.

use serde::{Deserialize, Serialize};

use crate::data::{self, KtoExample, PairMode, PoolEntry, PreferencePair};
use crate::env::{TabularMdp, Trajectory};
use crate::error::{Error, Result};
use crate::losses::{self, standard, LossConfig, LossReport, PreparedExamples, PreparedPairs, VisitCounts};
use crate::manifest::RunDir;
use crate::policy::TabularPolicy;
use crate::rng;
use crate::verifier::{self, VerifierConfig, VerifierModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    EntropoDpo,
    #[default]
    EntropoKto,
    DpoStandard,
    KtoStandard,
    Sft,
}

impl LossKind {
    pub fn uses_pairs(self) -> bool {
        matches!(self, LossKind::EntropoDpo | LossKind::DpoStandard)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::EntropoDpo => "entropo_dpo",
            LossKind::EntropoKto => "entropo_kto",
            LossKind::DpoStandard => "dpo_standard",
            LossKind::KtoStandard => "kto_standard",
            LossKind::Sft => "sft",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    /// Stop once the gradient's infinity norm is at most this.
    #[serde(default = "default_tol")]
    pub grad_tol: f64,
    #[serde(default)]
    pub loss_kind: LossKind,
    #[serde(default)]
    pub loss_config: LossConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_lr() -> f64 {
    0.1
}

fn default_iters() -> usize {
    2000
}

fn default_tol() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            max_iters: default_iters(),
            grad_tol: default_tol(),
            loss_kind: LossKind::default(),
            loss_config: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::config("grad_tol must be >= 0"));
        }
        self.loss_config.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradTol,
    MaxIters,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Loss and gradient infinity norm before each update, then the state after the last one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<IterRecord>,
    pub stop_reason: StopReason,
    pub final_loss: f64,
    pub final_grad_norm: f64,
}

impl TrainHistory {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(self.final_loss, |r| r.loss)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Plain gradient descent with a constant step.
fn descend<F>(init: &TabularPolicy, config: &TrainConfig, eval: F) -> Result<(TabularPolicy, TrainHistory)>
where
    F: Fn(&TabularPolicy) -> Result<LossReport>,
{
    config.validate()?;
    let mut theta = init.clone();
    let mut records = Vec::with_capacity(config.max_iters);
    let mut stop_reason = StopReason::MaxIters;
    for iteration in 0..config.max_iters {
        let report = eval(&theta)?;
        let grad_norm = report.grad_inf_norm();
        records.push(IterRecord { iteration, loss: report.value, grad_norm });
        if grad_norm <= config.grad_tol {
            stop_reason = StopReason::GradTol;
            break;
        }
        for (x, g) in theta.logits_mut().iter_mut().zip(&report.gradient) {
            *x -= config.learning_rate * g;
        }
    }
    if !theta.all_finite() {
        return Err(Error::Domain("training diverged to non-finite logits".into()));
    }
    let last = eval(&theta)?;
    Ok((theta, TrainHistory { records, stop_reason, final_loss: last.value, final_grad_norm: last.grad_inf_norm() }))
}

/// Behavior cloning: minimizes the mean negative log-likelihood of the dataset.
pub fn sft_train(
    init: &TabularPolicy,
    dataset: &[Trajectory],
    config: &TrainConfig,
) -> Result<(TabularPolicy, TrainHistory)> {
    if dataset.is_empty() {
        return Err(Error::usage("SFT dataset is empty"));
    }
    let counts = dataset
        .iter()
        .map(|t| Ok(VisitCounts::from_sequence(&losses::sequence(init, t)?)))
        .collect::<Result<Vec<_>>>()?;
    descend(init, config, |theta| losses::sft_loss(theta, &counts))
}

/// Training data for the preference stage.
#[derive(Clone, Debug, PartialEq)]
pub enum PrefData {
    Pairs(Vec<PreferencePair>),
    Labeled(Vec<KtoExample>),
}

/// Preference optimization of `init` against the frozen `reference`.
pub fn pref_train(
    init: &TabularPolicy,
    reference: &TabularPolicy,
    data: &PrefData,
    config: &TrainConfig,
) -> Result<(TabularPolicy, TrainHistory)> {
    losses::check_shapes(init, reference)?;
    let cfg = &config.loss_config;
    let beta = cfg.params.beta;
    match (config.loss_kind, data) {
        (LossKind::EntropoDpo, PrefData::Pairs(pairs)) => {
            let prepared = PreparedPairs::new(init, pairs)?;
            descend(init, config, |t| losses::entropo_dpo_prepared(t, reference, &prepared, cfg))
        }
        (LossKind::DpoStandard, PrefData::Pairs(pairs)) => {
            let prepared = PreparedPairs::new(init, pairs)?;
            descend(init, config, |t| standard::dpo_prepared(t, reference, &prepared, beta))
        }
        (LossKind::EntropoKto, PrefData::Labeled(examples)) => {
            let prepared = PreparedExamples::new(init, examples)?;
            descend(init, config, |t| losses::entropo_kto_prepared(t, reference, &prepared, cfg, None))
        }
        (LossKind::KtoStandard, PrefData::Labeled(examples)) => {
            let prepared = PreparedExamples::new(init, examples)?;
            descend(init, config, |t| {
                standard::kto_prepared(t, reference, &prepared, beta, cfg.lambda_plus, cfg.lambda_minus, None)
            })
        }
        (kind, _) => Err(Error::usage(format!("loss {} does not match the supplied preference data", kind.name()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceChoice {
    /// Snapshot of the policy after behavior cloning.
    #[default]
    Sft,
    /// The untrained starting policy.
    Base,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSchedule {
    #[serde(default = "default_sft_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_sft_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub grad_tol: f64,
}

fn default_sft_lr() -> f64 {
    0.5
}

fn default_sft_iters() -> usize {
    2000
}

impl Default for SftSchedule {
    fn default() -> Self {
        SftSchedule { learning_rate: default_sft_lr(), max_iters: default_sft_iters(), grad_tol: default_tol() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_rollouts")]
    pub teacher_rollouts: usize,
    /// Rollouts of the SFT policy added to the preference pool; may be zero.
    #[serde(default = "default_rollouts")]
    pub student_rollouts: usize,
    #[serde(default = "default_pool_temperature")]
    pub pool_temperature: f64,
    #[serde(default)]
    pub pair_mode: PairMode,
    #[serde(default)]
    pub reference: ReferenceChoice,
    #[serde(default)]
    pub sft: SftSchedule,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub verifier: VerifierConfig,
}

fn default_rollouts() -> usize {
    16
}

fn default_pool_temperature() -> f64 {
    1.0
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            teacher_rollouts: default_rollouts(),
            student_rollouts: default_rollouts(),
            pool_temperature: default_pool_temperature(),
            pair_mode: PairMode::default(),
            reference: ReferenceChoice::default(),
            sft: SftSchedule::default(),
            train: TrainConfig::default(),
            verifier: VerifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_rollouts == 0 {
            return Err(Error::config("teacher_rollouts must be >= 1"));
        }
        if !(self.pool_temperature >= 0.0) || !self.pool_temperature.is_finite() {
            return Err(Error::config("pool_temperature must be finite and >= 0"));
        }
        if self.train.loss_kind == LossKind::Sft {
            return Err(Error::config("the preference stage needs a preference loss, not sft"));
        }
        self.train.validate()
    }

    fn sft_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.sft.learning_rate,
            max_iters: self.sft.max_iters,
            grad_tol: self.sft.grad_tol,
            loss_kind: LossKind::Sft,
            ..self.train.clone()
        }
    }
}

/// Everything the pipeline produced, stage by stage.
#[derive(Clone, Debug)]
pub struct PipelineArtifacts {
    pub teacher_pool: Vec<PoolEntry>,
    pub sft_dataset: Vec<Trajectory>,
    pub sft_policy: TabularPolicy,
    pub sft_history: TrainHistory,
    pub preference_pool: Vec<PoolEntry>,
    pub preference_data: PrefData,
    pub reference: TabularPolicy,
    pub policy: TabularPolicy,
    pub history: TrainHistory,
    /// Trained on the preference pool's success labels; the zero model when that pool
    /// holds a single class.
    pub verifier: VerifierModel,
    pub verifier_trained: bool,
}

const TEACHER_STAGE: u64 = 1;
const STUDENT_STAGE: u64 = 2;

fn check_suite(suite: &[TabularMdp], teacher: &TabularPolicy) -> Result<()> {
    let first = suite.first().ok_or_else(|| Error::config("suite is empty"))?;
    if suite.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::usage("suite instances must share one state and action space"));
    }
    if teacher.num_states() != first.num_states || teacher.num_actions() != first.num_actions {
        return Err(Error::usage("teacher policy does not match the suite's shape"));
    }
    Ok(())
}

/// Teacher pool, behavior cloning on its successes, a mixed student/teacher pool,
/// preference labels, and preference optimization starting from the SFT policy.
pub fn run_pipeline(suite: &[TabularMdp], teacher: &TabularPolicy, config: &PipelineConfig) -> Result<PipelineArtifacts> {
    config.validate()?;
    check_suite(suite, teacher)?;
    let seed = config.train.seed;
    let temp = config.pool_temperature;
    let teacher_pool = data::generate_pool(
        suite,
        &[("teacher", teacher)],
        config.teacher_rollouts,
        temp,
        rng::stream_id(seed, &[TEACHER_STAGE]),
    )?;
    let sft_dataset = data::make_sft_dataset(&teacher_pool);
    if sft_dataset.is_empty() {
        let tried: Vec<String> = suite.iter().map(|m| m.instance_id.clone()).collect();
        return Err(Error::Pipeline(format!(
            "teacher solved none of {} rollouts on instances [{}] at temperature {temp}",
            teacher_pool.len(),
            tried.join(", ")
        )));
    }
    let base = TabularPolicy::zeros(teacher.num_states(), teacher.num_actions());
    let (sft_policy, sft_history) = sft_train(&base, &sft_dataset, &config.sft_train_config())?;

    let mut preference_pool = Vec::new();
    let student_seed = rng::stream_id(seed, &[STUDENT_STAGE]);
    if config.student_rollouts > 0 {
        preference_pool.extend(data::generate_pool(
            suite,
            &[("student", &sft_policy)],
            config.student_rollouts,
            temp,
            student_seed,
        )?);
    }
    preference_pool.extend(data::generate_pool(
        suite,
        &[("teacher", teacher)],
        config.teacher_rollouts,
        temp,
        rng::stream_id(student_seed, &[TEACHER_STAGE]),
    )?);
    let labeled = data::make_kto_examples(&preference_pool);
    let preference_data = if config.train.loss_kind.uses_pairs() {
        let pairs = data::make_preference_pairs(&preference_pool, config.pair_mode);
        if pairs.is_empty() {
            return Err(Error::Pipeline(format!(
                "no preference pairs: every group in the {}-trajectory pool has a single utility level",
                preference_pool.len()
            )));
        }
        PrefData::Pairs(pairs)
    } else {
        PrefData::Labeled(labeled.clone())
    };
    let reference = match config.reference {
        ReferenceChoice::Sft => sft_policy.clone(),
        ReferenceChoice::Base => base,
    };
    let (policy, history) = pref_train(&sft_policy, &reference, &preference_data, &config.train)?;
    let (verifier, verifier_trained) = match verifier::train_verifier(suite, &labeled, &config.verifier) {
        Ok(model) => (model, true),
        Err(Error::Pipeline(_)) => (VerifierModel::zero(), false),
        Err(e) => return Err(e),
    };
    Ok(PipelineArtifacts {
        teacher_pool,
        sft_dataset,
        sft_policy,
        sft_history,
        preference_pool,
        preference_data,
        reference,
        policy,
        history,
        verifier,
        verifier_trained,
    })
}

fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    data::write_jsonl(&mut out, items)?;
    Ok(out)
}

impl PipelineArtifacts {
    /// Writes every stage's output into `run`.
    pub fn write_into(&self, run: &mut RunDir) -> Result<()> {
        run.write("teacher_pool.jsonl", jsonl(&self.teacher_pool)?)?;
        run.write("sft_dataset.jsonl", jsonl(&self.sft_dataset)?)?;
        run.write("sft_policy.json", self.sft_policy.to_json()?)?;
        run.write("sft_history.csv", self.sft_history.to_csv()?)?;
        run.write("preference_pool.jsonl", jsonl(&self.preference_pool)?)?;
        match &self.preference_data {
            PrefData::Pairs(p) => run.write("preference_pairs.jsonl", jsonl(p)?)?,
            PrefData::Labeled(k) => run.write("kto_examples.jsonl", jsonl(k)?)?,
        }
        run.write("reference_policy.json", self.reference.to_json()?)?;
        run.write("policy.json", self.policy.to_json()?)?;
        run.write("history.csv", self.history.to_csv()?)?;
        run.write("verifier.json", self.verifier.to_json()?)?;
        let summary = serde_json::json!({
            "sft": { "stop_reason": self.sft_history.stop_reason, "iterations": self.sft_history.records.len(),
                     "initial_loss": self.sft_history.initial_loss(), "final_loss": self.sft_history.final_loss },
            "preference": { "stop_reason": self.history.stop_reason, "iterations": self.history.records.len(),
                            "initial_loss": self.history.initial_loss(), "final_loss": self.history.final_loss },
            "verifier_trained": self.verifier_trained,
        });
        run.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
        Ok(())
    }
}
