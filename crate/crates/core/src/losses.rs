//! Preference losses over tabular policies with analytic gradients.
//!
//! The entropy-enhanced losses score a trajectory by its implicit reward
//! `r(tau) = sum_h [log pi(a_h|s_h) - (beta/alpha) log pi_ref(a_h|s_h)]`:
//!
//! - DPO form: `-log sigma(alpha * (r(tau+) - r(tau-)))` per pair.
//! - KTO form: `lambda_y - v(tau)` with `v = lambda_+ sigma(alpha (r - z0))` for
//!   desirable and `lambda_- sigma(alpha (z0 - r))` for undesirable trajectories,
//!   where the reference point `z0` is held constant (no gradient).
//!
//! The reference policy never receives a gradient. The standard multi-turn
//! DPO/KTO losses are implemented separately in [`standard`] and coincide with
//! the entropy-enhanced ones when `alpha == beta`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::{KtoExample, PreferencePair};
use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::math;
use crate::oracle::RegularizationParams;
use crate::policy::TabularPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Z0Mode {
    /// Per-state margin averaged over the batch's visited states, times the mean
    /// trajectory length.
    #[default]
    AnalyticBatch,
    /// Per-state margin without the sum over steps.
    PerStep,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub params: RegularizationParams,
    #[serde(default = "one")]
    pub lambda_plus: f64,
    #[serde(default = "one")]
    pub lambda_minus: f64,
    #[serde(default)]
    pub z0_mode: Z0Mode,
    /// Always true; the reference point is a constant in the gradient.
    #[serde(default = "yes")]
    pub stop_gradient_z0: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            params: RegularizationParams::default(),
            lambda_plus: 1.0,
            lambda_minus: 1.0,
            z0_mode: Z0Mode::AnalyticBatch,
            stop_gradient_z0: true,
        }
    }
}

impl LossConfig {
    pub fn with_params(alpha: f64, beta: f64) -> Self {
        LossConfig { params: RegularizationParams { alpha, beta }, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for (name, v) in [("lambda_plus", self.lambda_plus), ("lambda_minus", self.lambda_minus)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !self.stop_gradient_z0 {
            return Err(Error::config("stop_gradient_z0 cannot be disabled"));
        }
        Ok(())
    }
}

/// One pair's or example's contribution. `value = sum(weight * loss) / n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTerm {
    pub weight: f64,
    pub loss: f64,
    /// Implicit-reward margin `r(tau+) - r(tau-)` for pairs, `r(tau)` for single trajectories.
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Z0Diagnostics {
    pub used: f64,
    pub per_step: f64,
    pub summed: f64,
    pub mean_length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Row-major `[state][action]`, same shape as the policy logits.
    pub gradient: Vec<f64>,
    pub per_item: Vec<ItemTerm>,
    pub z0: Option<Z0Diagnostics>,
}

impl LossReport {
    pub fn grad_inf_norm(&self) -> f64 {
        self.gradient.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn grad_l2_norm(&self) -> f64 {
        self.gradient.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// JSON export; the full gradient is included only on request.
    pub fn to_json(&self, include_gradient: bool) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            value: f64,
            per_item: &'a [ItemTerm],
            z0: Option<&'a Z0Diagnostics>,
            grad_l2_norm: f64,
            grad_inf_norm: f64,
            #[serde(skip_serializing_if = "Option::is_none")]
            gradient: Option<&'a [f64]>,
        }
        Ok(serde_json::to_string_pretty(&Export {
            value: self.value,
            per_item: &self.per_item,
            z0: self.z0.as_ref(),
            grad_l2_norm: self.grad_l2_norm(),
            grad_inf_norm: self.grad_inf_norm(),
            gradient: include_gradient.then_some(self.gradient.as_slice()),
        })?)
    }
}

/// Sparse signed visit counts of a trajectory (or a difference of trajectories), so that
/// `log pi(tau) = sum c(s, a) * theta[s][a] - sum n(s) * log Z(s)`. Contributions from
/// states visited equally often on both sides of a difference cancel exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisitCounts {
    actions: Vec<(usize, usize, f64)>,
    states: Vec<(usize, f64)>,
}

impl VisitCounts {
    fn collect(items: impl IntoIterator<Item = ((usize, usize), f64)>) -> Self {
        let mut actions: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        let mut states: BTreeMap<usize, f64> = BTreeMap::new();
        for ((s, a), c) in items {
            *actions.entry((s, a)).or_default() += c;
            *states.entry(s).or_default() += c;
        }
        VisitCounts {
            actions: actions.into_iter().filter(|&(_, c)| c != 0.0).map(|((s, a), c)| (s, a, c)).collect(),
            states: states.into_iter().filter(|&(_, c)| c != 0.0).collect(),
        }
    }

    pub fn from_sequence(seq: &[(usize, usize)]) -> Self {
        Self::collect(seq.iter().map(|&sa| (sa, 1.0)))
    }

    /// Counts of `plus` minus counts of `minus`.
    pub fn difference(plus: &[(usize, usize)], minus: &[(usize, usize)]) -> Self {
        Self::collect(plus.iter().map(|&sa| (sa, 1.0)).chain(minus.iter().map(|&sa| (sa, -1.0))))
    }
}

/// Per-state log normalizers of a policy, computed once per evaluation.
pub(crate) struct LogProbTable<'a> {
    policy: &'a TabularPolicy,
    log_z: Vec<f64>,
}

impl<'a> LogProbTable<'a> {
    pub(crate) fn new(policy: &'a TabularPolicy) -> Self {
        let log_z = (0..policy.num_states()).map(|s| math::log_sum_exp(policy.row(s))).collect();
        LogProbTable { policy, log_z }
    }

    fn log_prob(&self, counts: &VisitCounts) -> f64 {
        let na = self.policy.num_actions();
        let linear: f64 = counts.actions.iter().map(|&(s, a, c)| c * self.policy.logits()[s * na + a]).sum();
        let norm: f64 = counts.states.iter().map(|&(s, n)| n * self.log_z[s]).sum();
        linear - norm
    }

    /// `grad += coef * d/dlogits log pi(counts)`.
    fn accumulate(&self, grad: &mut [f64], counts: &VisitCounts, coef: f64) {
        let na = self.policy.num_actions();
        for &(s, n) in &counts.states {
            for (b, x) in self.policy.row(s).iter().enumerate() {
                grad[s * na + b] -= coef * n * (x - self.log_z[s]).exp();
            }
        }
        for &(s, a, c) in &counts.actions {
            grad[s * na + a] += coef * c;
        }
    }
}

pub(crate) fn check_shapes(theta: &TabularPolicy, reference: &TabularPolicy) -> Result<()> {
    if theta.num_states() != reference.num_states() || theta.num_actions() != reference.num_actions() {
        return Err(Error::usage("policy and reference have different shapes"));
    }
    if !theta.all_finite() || !reference.all_finite() {
        return Err(Error::Domain("policy logits must be finite".into()));
    }
    Ok(())
}

/// State-action sequence of a trajectory, checked against the policy shape.
pub(crate) fn sequence(policy: &TabularPolicy, traj: &Trajectory) -> Result<Vec<(usize, usize)>> {
    traj.state_actions()
        .map(|(s, a)| {
            if s >= policy.num_states() || a >= policy.num_actions() {
                Err(Error::usage(format!(
                    "trajectory from {} visits ({s}, {a}) outside the policy",
                    traj.instance_id
                )))
            } else {
                Ok((s, a))
            }
        })
        .collect()
}

/// Pairs with their state-action sequences resolved.
#[derive(Clone, Debug)]
pub struct PreparedPairs {
    chosen: Vec<Vec<(usize, usize)>>,
    rejected: Vec<Vec<(usize, usize)>>,
    net: Vec<VisitCounts>,
    weights: Vec<f64>,
}

impl PreparedPairs {
    pub fn new(policy: &TabularPolicy, pairs: &[PreferencePair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::usage("preference batch is empty"));
        }
        let mut out = PreparedPairs { chosen: Vec::new(), rejected: Vec::new(), net: Vec::new(), weights: Vec::new() };
        for p in pairs {
            if !(p.weight > 0.0) || !p.weight.is_finite() {
                return Err(Error::usage(format!("pair weight {} is not positive", p.weight)));
            }
            let (c, r) = (sequence(policy, &p.chosen)?, sequence(policy, &p.rejected)?);
            out.net.push(VisitCounts::difference(&c, &r));
            out.chosen.push(c);
            out.rejected.push(r);
            out.weights.push(p.weight);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Labeled trajectories with their state-action sequences resolved.
#[derive(Clone, Debug)]
pub struct PreparedExamples {
    seqs: Vec<Vec<(usize, usize)>>,
    counts: Vec<VisitCounts>,
    desirable: Vec<bool>,
    states: BTreeSet<usize>,
    mean_length: f64,
}

impl PreparedExamples {
    pub fn new(policy: &TabularPolicy, examples: &[KtoExample]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::usage("KTO batch is empty"));
        }
        let seqs = examples.iter().map(|e| sequence(policy, &e.trajectory)).collect::<Result<Vec<_>>>()?;
        let states = seqs.iter().flatten().map(|&(s, _)| s).collect();
        let total: usize = seqs.iter().map(Vec::len).sum();
        Ok(PreparedExamples {
            mean_length: total as f64 / seqs.len() as f64,
            counts: seqs.iter().map(|s| VisitCounts::from_sequence(s)).collect(),
            desirable: examples.iter().map(|e| e.desirable).collect(),
            seqs,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn visited_states(&self) -> &BTreeSet<usize> {
        &self.states
    }

    pub fn mean_length(&self) -> f64 {
        self.mean_length
    }
}

/// `r(tau) = log pi_theta(tau) - (beta/alpha) log pi_ref(tau)`.
pub fn implicit_reward(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    traj: &Trajectory,
    params: &RegularizationParams,
) -> Result<f64> {
    check_shapes(theta, reference)?;
    let counts = VisitCounts::from_sequence(&sequence(theta, traj)?);
    let (lt, lr) = (LogProbTable::new(theta), LogProbTable::new(reference));
    Ok(lt.log_prob(&counts) - params.ref_exponent() * lr.log_prob(&counts))
}

/// Mean over `states` of `-H(pi_theta(.|s)) + (beta/alpha) H(pi_theta, pi_ref)(s)`.
pub fn z0_per_step(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    states: &BTreeSet<usize>,
    params: &RegularizationParams,
) -> Result<f64> {
    check_shapes(theta, reference)?;
    if states.is_empty() {
        return Err(Error::usage("reference point needs at least one visited state"));
    }
    let k = params.ref_exponent();
    let mut total = 0.0;
    for &s in states {
        total += -theta.entropy(s, 1.0)? + k * theta.cross_entropy_to_ref(reference, s)?;
    }
    Ok(total / states.len() as f64)
}

/// KTO reference point over a batch: the per-state margin on the batch's visited states,
/// summed over steps via the mean trajectory length.
pub fn z0_reference_point(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[&Trajectory],
    params: &RegularizationParams,
) -> Result<f64> {
    let states: BTreeSet<usize> = batch.iter().flat_map(|t| t.steps.iter().map(|s| s.state)).collect();
    if batch.is_empty() {
        return Err(Error::usage("reference point needs a nonempty batch"));
    }
    let mean_len = batch.iter().map(|t| t.length as f64).sum::<f64>() / batch.len() as f64;
    Ok(z0_per_step(theta, reference, &states, params)? * mean_len)
}

fn z0_for(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    data: &PreparedExamples,
    config: &LossConfig,
) -> Result<Z0Diagnostics> {
    let per_step = z0_per_step(theta, reference, &data.states, &config.params)?;
    let summed = per_step * data.mean_length;
    let used = match config.z0_mode {
        Z0Mode::AnalyticBatch => summed,
        Z0Mode::PerStep => per_step,
        Z0Mode::Zero => 0.0,
    };
    Ok(Z0Diagnostics { used, per_step, summed, mean_length: data.mean_length })
}

pub fn entropo_dpo_loss(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    pairs: &[PreferencePair],
    config: &LossConfig,
) -> Result<LossReport> {
    let prepared = PreparedPairs::new(theta, pairs)?;
    entropo_dpo_prepared(theta, reference, &prepared, config)
}

pub fn entropo_dpo_prepared(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    data: &PreparedPairs,
    config: &LossConfig,
) -> Result<LossReport> {
    check_shapes(theta, reference)?;
    let (alpha, k) = (config.params.alpha, config.params.ref_exponent());
    let (lt, lr) = (LogProbTable::new(theta), LogProbTable::new(reference));
    let n = data.len() as f64;
    let mut gradient = vec![0.0; theta.logits().len()];
    let mut per_item = Vec::with_capacity(data.len());
    let mut value = 0.0;
    for (net, &w) in data.net.iter().zip(&data.weights) {
        let margin = lt.log_prob(net) - k * lr.log_prob(net);
        let loss = math::softplus(-alpha * margin);
        // d loss / d margin = -alpha * sigma(-alpha * margin)
        lt.accumulate(&mut gradient, net, -w / n * alpha * math::sigmoid(-alpha * margin));
        value += w * loss;
        per_item.push(ItemTerm { weight: w, loss, reward: margin });
    }
    Ok(LossReport { value: value / n, gradient, per_item, z0: None })
}

pub fn entropo_kto_loss(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    examples: &[KtoExample],
    config: &LossConfig,
) -> Result<LossReport> {
    let prepared = PreparedExamples::new(theta, examples)?;
    entropo_kto_prepared(theta, reference, &prepared, config, None)
}

/// KTO loss on prepared examples. `z0_override` pins the reference point, which is how
/// finite differences see the stop-gradient.
pub fn entropo_kto_prepared(
    theta: &TabularPolicy,
    reference: &TabularPolicy,
    data: &PreparedExamples,
    config: &LossConfig,
    z0_override: Option<f64>,
) -> Result<LossReport> {
    check_shapes(theta, reference)?;
    let (alpha, k) = (config.params.alpha, config.params.ref_exponent());
    let mut z0 = z0_for(theta, reference, data, config)?;
    if let Some(z) = z0_override {
        z0.used = z;
    }
    let (lt, lr) = (LogProbTable::new(theta), LogProbTable::new(reference));
    let n = data.len() as f64;
    let mut gradient = vec![0.0; theta.logits().len()];
    let mut per_item = Vec::with_capacity(data.len());
    let mut value = 0.0;
    for (counts, &desirable) in data.counts.iter().zip(&data.desirable) {
        let reward = lt.log_prob(counts) - k * lr.log_prob(counts);
        let (loss, d_reward) = if desirable {
            let x = alpha * (reward - z0.used);
            let s = math::sigmoid(x);
            (config.lambda_plus * (1.0 - s), -config.lambda_plus * alpha * s * math::sigmoid(-x))
        } else {
            let y = alpha * (z0.used - reward);
            let s = math::sigmoid(y);
            (config.lambda_minus * (1.0 - s), config.lambda_minus * alpha * s * math::sigmoid(-y))
        };
        lt.accumulate(&mut gradient, counts, d_reward / n);
        value += loss;
        per_item.push(ItemTerm { weight: 1.0, loss, reward });
    }
    Ok(LossReport { value: value / n, gradient, per_item, z0: Some(z0) })
}

/// Behavior-cloning loss: mean over trajectories of `-sum_h log pi(a_h|s_h)`.
pub fn sft_loss(theta: &TabularPolicy, dataset: &[VisitCounts]) -> Result<LossReport> {
    if dataset.is_empty() {
        return Err(Error::usage("SFT dataset is empty"));
    }
    let lt = LogProbTable::new(theta);
    let n = dataset.len() as f64;
    let mut gradient = vec![0.0; theta.logits().len()];
    let mut per_item = Vec::with_capacity(dataset.len());
    let mut value = 0.0;
    for counts in dataset {
        let lp = lt.log_prob(counts);
        lt.accumulate(&mut gradient, counts, -1.0 / n);
        value -= lp;
        per_item.push(ItemTerm { weight: 1.0, loss: -lp, reward: lp });
    }
    Ok(LossReport { value: value / n, gradient, per_item, z0: None })
}

/// Standard multi-turn DPO and KTO with inverse temperature `beta`, written without the
/// entropy machinery so they can cross-check the `alpha == beta` reduction.
pub mod standard {
    use super::*;

    /// Per-state log-softmax rows of a policy.
    struct Rows(Vec<Vec<f64>>);

    impl Rows {
        fn of(policy: &TabularPolicy) -> Self {
            Rows((0..policy.num_states()).map(|s| math::log_softmax(policy.row(s))).collect())
        }
    }

    fn log_ratio_terms(theta: &Rows, reference: &Rows, seq: &[(usize, usize)]) -> Vec<f64> {
        seq.iter().map(|&(s, a)| theta.0[s][a] - reference.0[s][a]).collect()
    }

    fn add_score_gradient(theta: &Rows, grad: &mut [f64], seq: &[(usize, usize)], coef: f64) {
        for &(s, a) in seq {
            let row = &theta.0[s];
            let na = row.len();
            for (b, lp) in row.iter().enumerate() {
                let indicator = if a == b { 1.0 } else { 0.0 };
                grad[s * na + b] += coef * (indicator - lp.exp());
            }
        }
    }

    pub fn dpo_loss(
        theta: &TabularPolicy,
        reference: &TabularPolicy,
        pairs: &[PreferencePair],
        beta: f64,
    ) -> Result<LossReport> {
        check_shapes(theta, reference)?;
        let prepared = PreparedPairs::new(theta, pairs)?;
        dpo_prepared(theta, reference, &prepared, beta)
    }

    pub fn dpo_prepared(
        theta: &TabularPolicy,
        reference: &TabularPolicy,
        data: &PreparedPairs,
        beta: f64,
    ) -> Result<LossReport> {
        let (rows, ref_rows) = (Rows::of(theta), Rows::of(reference));
        let n = data.len() as f64;
        let mut gradient = vec![0.0; theta.logits().len()];
        let mut per_item = Vec::new();
        let mut total = 0.0;
        for i in 0..data.len() {
            let plus: f64 = log_ratio_terms(&rows, &ref_rows, &data.chosen[i]).iter().sum();
            let minus: f64 = log_ratio_terms(&rows, &ref_rows, &data.rejected[i]).iter().sum();
            let logit = beta * (plus - minus);
            let loss = -math::log_sigmoid(logit);
            let scale = data.weights[i] * beta * (math::sigmoid(logit) - 1.0) / n;
            add_score_gradient(&rows, &mut gradient, &data.chosen[i], scale);
            add_score_gradient(&rows, &mut gradient, &data.rejected[i], -scale);
            total += data.weights[i] * loss;
            per_item.push(ItemTerm { weight: data.weights[i], loss, reward: plus - minus });
        }
        Ok(LossReport { value: total / n, gradient, per_item, z0: None })
    }

    /// Mean `KL(pi_theta || pi_ref)` over the batch's visited states times the mean length.
    pub fn kto_reference_point(theta: &TabularPolicy, reference: &TabularPolicy, data: &PreparedExamples) -> f64 {
        let kl: f64 = data
            .visited_states()
            .iter()
            .map(|&s| {
                let lp = math::log_softmax(theta.row(s));
                let lr = math::log_softmax(reference.row(s));
                lp.iter().zip(&lr).map(|(p, r)| p.exp() * (p - r)).sum::<f64>()
            })
            .sum();
        kl / data.visited_states().len() as f64 * data.mean_length()
    }

    pub fn kto_loss(
        theta: &TabularPolicy,
        reference: &TabularPolicy,
        examples: &[KtoExample],
        beta: f64,
        lambda_plus: f64,
        lambda_minus: f64,
    ) -> Result<LossReport> {
        check_shapes(theta, reference)?;
        let prepared = PreparedExamples::new(theta, examples)?;
        kto_prepared(theta, reference, &prepared, beta, lambda_plus, lambda_minus, None)
    }

    pub fn kto_prepared(
        theta: &TabularPolicy,
        reference: &TabularPolicy,
        data: &PreparedExamples,
        beta: f64,
        lambda_plus: f64,
        lambda_minus: f64,
        z0_override: Option<f64>,
    ) -> Result<LossReport> {
        let z0 = z0_override.unwrap_or_else(|| kto_reference_point(theta, reference, data));
        let (rows, ref_rows) = (Rows::of(theta), Rows::of(reference));
        let n = data.len() as f64;
        let mut gradient = vec![0.0; theta.logits().len()];
        let mut per_item = Vec::new();
        let mut total = 0.0;
        for (seq, &desirable) in data.seqs.iter().zip(&data.desirable) {
            let r: f64 = log_ratio_terms(&rows, &ref_rows, seq).iter().sum();
            let (lambda, sign) = if desirable { (lambda_plus, 1.0) } else { (lambda_minus, -1.0) };
            let v = lambda * math::sigmoid(sign * beta * (r - z0));
            let loss = lambda - v;
            // d(lambda - v)/dr = -sign * beta * v * (1 - v / lambda)
            let d_r = -sign * beta * v * (1.0 - v / lambda);
            add_score_gradient(&rows, &mut gradient, seq, d_r / n);
            total += loss;
            per_item.push(ItemTerm { weight: 1.0, loss, reward: r });
        }
        Ok(LossReport {
            value: total / n,
            gradient,
            per_item,
            z0: Some(Z0Diagnostics { used: z0, per_step: z0 / data.mean_length(), summed: z0, mean_length: data.mean_length() }),
        })
    }
}

/// Result of a finite-difference gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    pub max_rel_error: f64,
    /// Flat logit index where the error peaks.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `analytic` with a fourth-order central difference of `loss_fn` at every logit.
/// Relative error uses the denominator `max(|g|, 1e-8)`.
pub fn finite_difference_check<F>(loss_fn: F, theta: &TabularPolicy, analytic: &[f64], step: f64) -> Result<FdCheck>
where
    F: Fn(&TabularPolicy) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::config(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    if analytic.len() != theta.logits().len() {
        return Err(Error::usage("analytic gradient has the wrong length"));
    }
    let mut probe = theta.clone();
    let mut worst = FdCheck { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for i in 0..analytic.len() {
        let x = theta.logits()[i];
        let mut eval = |dx: f64| -> Result<f64> {
            probe.logits_mut()[i] = x + dx;
            loss_fn(&probe)
        };
        let (f2p, f1p, f1m, f2m) = (eval(2.0 * step)?, eval(step)?, eval(-step)?, eval(-2.0 * step)?);
        probe.logits_mut()[i] = x;
        let numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * step);
        let err = (numeric - analytic[i]).abs() / analytic[i].abs().max(1e-8);
        if err > worst.max_rel_error {
            worst = FdCheck { max_rel_error: err, worst_index: i, analytic: analytic[i], numeric };
        }
    }
    Ok(worst)
}
