//! Closed-form optima of the entropy-regularized objective
//! `E[u] + alpha * H(pi) - beta * H(pi, pi_ref)`.
//!
//! The single-turn optimum is `pi ∝ pi_ref^(beta/alpha) * exp(u / alpha)`. For
//! deterministic finite-horizon MDPs the same tilt is applied per step by
//! backward induction with `Q_H = u`, `Q_h(s, a) = V_{h+1}(s')` and
//! `V_h = alpha * log Z_h`. Everything runs in the log domain.
//!
//! Two independent cross-checks live here as well: exponentiated-gradient
//! ascent on the simplex (single turn) and exhaustive enumeration of action
//! sequences (multi turn).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::{enumerate_trajectories, TabularMdp};
use crate::error::{Error, Result};
use crate::math;
use crate::policy::TabularPolicy;

/// `alpha = lambda + beta`: `alpha` weights the policy entropy, `beta` the
/// cross-entropy to the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationParams {
    pub alpha: f64,
    pub beta: f64,
}

impl RegularizationParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = RegularizationParams { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() || !self.alpha.is_finite() {
            return Err(Error::config(format!("beta must be positive and finite, got {}", self.beta)));
        }
        if self.alpha < self.beta {
            return Err(Error::config(format!(
                "alpha ({}) must be >= beta ({}): the entropy bonus lambda = alpha - beta cannot be negative",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn lambda(&self) -> f64 {
        self.alpha - self.beta
    }

    /// Exponent `beta / alpha` applied to the reference policy.
    pub fn ref_exponent(&self) -> f64 {
        self.beta / self.alpha
    }
}

impl Default for RegularizationParams {
    fn default() -> Self {
        RegularizationParams { alpha: 1.1, beta: 0.6 }
    }
}

fn check_single_turn(utilities: &[f64], ref_dist: &[f64]) -> Result<()> {
    if utilities.is_empty() || utilities.len() != ref_dist.len() {
        return Err(Error::usage("utilities and reference distribution must be nonempty and equal length"));
    }
    if utilities.iter().any(|u| !u.is_finite()) {
        return Err(Error::Domain("utilities must be finite".into()));
    }
    if ref_dist.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
        return Err(Error::Domain("reference distribution must be strictly positive".into()));
    }
    Ok(())
}

/// Single-turn optimum `pi(y) ∝ ref(y)^(beta/alpha) * exp(u(y) / alpha)`.
pub fn single_turn_optimal(utilities: &[f64], ref_dist: &[f64], params: &RegularizationParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_single_turn(utilities, ref_dist)?;
    let k = params.ref_exponent();
    let logits: Vec<f64> = utilities.iter().zip(ref_dist).map(|(u, r)| k * r.ln() + u / params.alpha).collect();
    Ok(math::softmax(&logits))
}

/// `E_pi[u] + alpha * H(pi) - beta * H(pi, ref)`.
pub fn single_turn_objective(pi: &[f64], utilities: &[f64], ref_dist: &[f64], params: &RegularizationParams) -> f64 {
    pi.iter()
        .zip(utilities.iter().zip(ref_dist))
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, (u, r))| p * (u - params.alpha * p.ln() + params.beta * r.ln()))
        .sum()
}

/// Maximizes the single-turn objective by exponentiated-gradient (mirror) ascent from the
/// uniform distribution. Converges when the projected gradient `g - E_pi[g]` is below
/// `1e-12` in every coordinate; the iteration contracts for `0 < step < 2 / alpha`.
pub fn numeric_simplex_opt(
    utilities: &[f64],
    ref_dist: &[f64],
    params: &RegularizationParams,
    iters: usize,
    step: f64,
) -> Result<Vec<f64>> {
    params.validate()?;
    check_single_turn(utilities, ref_dist)?;
    if iters == 0 || !(step > 0.0) {
        return Err(Error::config("simplex ascent needs iters >= 1 and a positive step"));
    }
    const TOL: f64 = 1e-12;
    let n = utilities.len();
    let mut log_p = vec![-(n as f64).ln(); n];
    let mut residual = f64::INFINITY;
    for _ in 0..iters {
        let grad: Vec<f64> = (0..n)
            .map(|i| utilities[i] - params.alpha * (log_p[i] + 1.0) + params.beta * ref_dist[i].ln())
            .collect();
        let mean: f64 = (0..n).map(|i| log_p[i].exp() * grad[i]).sum();
        residual = grad.iter().map(|g| (g - mean).abs()).fold(0.0, f64::max);
        if residual < TOL {
            return Ok(log_p.iter().map(|l| l.exp()).collect());
        }
        for i in 0..n {
            log_p[i] += step * grad[i];
        }
        let lse = math::log_sum_exp(&log_p);
        log_p.iter_mut().for_each(|l| *l -= lse);
    }
    Err(Error::Convergence { iters, grad_norm: residual })
}

/// Oracle quantities at one `(h, state)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSolution {
    pub q: Vec<f64>,
    pub v: f64,
    pub log_z: f64,
    pub log_policy: Vec<f64>,
    pub policy: Vec<f64>,
}

/// Per-step tables over reachable states; `steps[h - 1]` holds step `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub instance_id: String,
    pub params: RegularizationParams,
    pub horizon: usize,
    pub steps: Vec<BTreeMap<usize, StateSolution>>,
}

impl OracleSolution {
    /// `V_h(s)` for `h` in `1..=H`, if `s` is reachable at step `h`.
    pub fn value(&self, h: usize, state: usize) -> Option<f64> {
        self.steps.get(h.checked_sub(1)?)?.get(&state).map(|s| s.v)
    }

    /// Expected initial value `E_{s ~ d0}[V_1(s)]`.
    pub fn initial_value(&self, mdp: &TabularMdp) -> f64 {
        mdp.initial_states.iter().map(|&(s, p)| p * self.steps[0][&s].v).sum()
    }

    /// Writes the optimal per-step distributions into the rows of `base`. A state that is
    /// reachable at several steps takes its earliest-step distribution; rows of
    /// unreachable states are left as they are.
    pub fn write_policy_into(&self, base: &mut TabularPolicy) {
        for layer in self.steps.iter().rev() {
            for (&s, sol) in layer {
                base.row_mut(s).copy_from_slice(&sol.log_policy);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Soft backward induction for a deterministic MDP.
pub fn soft_backward_induction(
    mdp: &TabularMdp,
    reference: &TabularPolicy,
    params: &RegularizationParams,
) -> Result<OracleSolution> {
    params.validate()?;
    if mdp.horizon == 0 {
        return Err(Error::usage("horizon must be positive"));
    }
    if reference.num_states() != mdp.num_states || reference.num_actions() != mdp.num_actions {
        return Err(Error::usage("reference policy shape does not match the MDP"));
    }
    if !reference.all_finite() {
        return Err(Error::Domain("reference policy must have finite logits".into()));
    }
    let k = params.ref_exponent();
    let layers = mdp.reachable_by_step();
    let mut steps: Vec<BTreeMap<usize, StateSolution>> = vec![BTreeMap::new(); mdp.horizon];
    for h in (0..mdp.horizon).rev() {
        let mut table = BTreeMap::new();
        for &s in &layers[h] {
            let q: Vec<f64> = (0..mdp.num_actions)
                .map(|a| {
                    if h + 1 == mdp.horizon {
                        mdp.utility(s, a)
                    } else {
                        steps[h + 1][&mdp.transitions[s][a].next_state].v
                    }
                })
                .collect();
            let log_ref = reference.log_probs_at(s, 1.0);
            let logits: Vec<f64> = q.iter().zip(&log_ref).map(|(q, r)| k * r + q / params.alpha).collect();
            let log_z = math::log_sum_exp(&logits);
            let log_policy: Vec<f64> = logits.iter().map(|l| l - log_z).collect();
            let policy = log_policy.iter().map(|l| l.exp()).collect();
            table.insert(s, StateSolution { q, v: params.alpha * log_z, log_z, log_policy, policy });
        }
        steps[h] = table;
    }
    Ok(OracleSolution { instance_id: mdp.instance_id.clone(), params: *params, horizon: mdp.horizon, steps })
}

/// `V_1(start)` by exhaustive enumeration:
/// `alpha * log sum_{a_1..a_H} prod_h ref(a_h|s_h)^(beta/alpha) * exp(u(s_H, a_H) / alpha)`.
pub fn brute_force_soft_value(
    mdp: &TabularMdp,
    reference: &TabularPolicy,
    params: &RegularizationParams,
    start_state: usize,
) -> Result<f64> {
    params.validate()?;
    let paths = enumerate_trajectories(mdp, start_state)?;
    let k = params.ref_exponent();
    let log_ref: Vec<Vec<f64>> = (0..mdp.num_states).map(|s| reference.log_probs_at(s, 1.0)).collect();
    let scores: Vec<f64> = paths
        .iter()
        .map(|p| {
            let ref_term: f64 = p.states.iter().zip(&p.actions).map(|(&s, &a)| log_ref[s][a]).sum();
            k * ref_term + p.utility / params.alpha
        })
        .collect();
    Ok(params.alpha * math::log_sum_exp(&scores))
}

/// Mean entropy of the optimal policy over the reachable states of each step.
pub fn oracle_entropy_profile(solution: &OracleSolution) -> Vec<f64> {
    solution
        .steps
        .iter()
        .map(|layer| {
            if layer.is_empty() {
                return 0.0;
            }
            let total: f64 = layer.values().map(|s| math::entropy_from_log_probs(&s.log_policy)).sum();
            total / layer.len() as f64
        })
        .collect()
}

/// Largest `KL(policy(.|s) || oracle(.|s))` over the states the solution covers.
pub fn max_state_kl(policy: &TabularPolicy, solution: &OracleSolution) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for layer in &solution.steps {
        for (&s, sol) in layer {
            let lp = policy.action_log_probs(s, 1.0)?;
            let kl: f64 = lp.iter().zip(&sol.log_policy).map(|(p, q)| p.exp() * (p - q)).sum();
            worst = worst.max(kl);
        }
    }
    Ok(worst)
}

/// One policy covering a whole suite: each instance's oracle distributions are written
/// into its own states, all other rows keep the reference logits.
pub fn suite_oracle_policy(
    suite: &[TabularMdp],
    reference: &TabularPolicy,
    params: &RegularizationParams,
) -> Result<TabularPolicy> {
    let mut policy = reference.clone();
    for mdp in suite {
        soft_backward_induction(mdp, reference, params)?.write_policy_into(&mut policy);
    }
    Ok(policy)
}
