//! Tabular softmax policies.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{self, TabularMdp, Trajectory};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::StreamRng;

/// Per-state action logits; `pi(a|s) = softmax(logits[s] / T)[a]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    logits: Vec<f64>,
}

impl TabularPolicy {
    /// Uniform policy.
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        TabularPolicy { num_states, num_actions, logits: vec![0.0; num_states * num_actions] }
    }

    pub fn from_logits(num_states: usize, num_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::usage("policy needs at least one state and one action"));
        }
        if logits.len() != num_states * num_actions {
            return Err(Error::usage(format!(
                "{} logits for a {num_states}x{num_actions} policy",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain("policy logits must be finite".into()));
        }
        Ok(TabularPolicy { num_states, num_actions, logits })
    }

    /// Policy whose action distribution at every state is `probs[s]`.
    pub fn from_probs(probs: &[Vec<f64>]) -> Result<Self> {
        let na = probs.first().map_or(0, Vec::len);
        let mut logits = Vec::with_capacity(probs.len() * na);
        for row in probs {
            if row.len() != na || row.iter().any(|&p| !(p > 0.0)) {
                return Err(Error::Domain("probabilities must be strictly positive and rectangular".into()));
            }
            logits.extend(row.iter().map(|p| p.ln()));
        }
        Self::from_logits(probs.len(), na, logits)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.logits[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn row_mut(&mut self, state: usize) -> &mut [f64] {
        let na = self.num_actions;
        &mut self.logits[state * na..(state + 1) * na]
    }

    pub fn all_finite(&self) -> bool {
        self.logits.iter().all(|l| l.is_finite())
    }

    fn check_state(&self, state: usize) -> Result<()> {
        if state >= self.num_states {
            return Err(Error::usage(format!("state {state} outside a {}-state policy", self.num_states)));
        }
        Ok(())
    }

    /// Unchecked log-softmax at temperature `t`; used on hot paths after validation.
    pub(crate) fn log_probs_at(&self, state: usize, temperature: f64) -> Vec<f64> {
        let row = self.row(state);
        if temperature == 1.0 {
            math::log_softmax(row)
        } else {
            let scaled: Vec<f64> = row.iter().map(|l| l / temperature).collect();
            math::log_softmax(&scaled)
        }
    }

    pub fn action_log_probs(&self, state: usize, temperature: f64) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Domain(format!("temperature must be positive and finite, got {temperature}")));
        }
        if self.row(state).iter().any(|l| !l.is_finite()) {
            return Err(Error::Domain(format!("non-finite logits at state {state}")));
        }
        Ok(self.log_probs_at(state, temperature))
    }

    pub fn action_probs(&self, state: usize, temperature: f64) -> Result<Vec<f64>> {
        Ok(self.action_log_probs(state, temperature)?.into_iter().map(f64::exp).collect())
    }

    pub fn entropy(&self, state: usize, temperature: f64) -> Result<f64> {
        Ok(math::entropy_from_log_probs(&self.action_log_probs(state, temperature)?))
    }

    /// Cross-entropy `H(pi, ref) = -sum_a pi(a|s) log ref(a|s)` at temperature 1.
    pub fn cross_entropy_to_ref(&self, reference: &TabularPolicy, state: usize) -> Result<f64> {
        self.check_state(state)?;
        reference.check_state(state)?;
        if reference.num_actions != self.num_actions {
            return Err(Error::usage("policy and reference disagree on the action count"));
        }
        let lp = self.action_log_probs(state, 1.0)?;
        let lr = reference.action_log_probs(state, 1.0)?;
        let mut h = 0.0;
        for (p, r) in lp.iter().zip(&lr) {
            let p = p.exp();
            if p > 0.0 {
                if *r == f64::NEG_INFINITY {
                    return Ok(f64::INFINITY);
                }
                h -= p * r;
            }
        }
        Ok(h)
    }

    /// Sum of per-step log-probabilities of the trajectory's actions. The trajectory is
    /// replayed against `mdp` first.
    pub fn traj_log_prob(&self, mdp: &TabularMdp, traj: &Trajectory, temperature: f64) -> Result<f64> {
        if self.num_states != mdp.num_states || self.num_actions != mdp.num_actions {
            return Err(Error::usage("policy shape does not match the MDP"));
        }
        env::replay(mdp, traj)?;
        let mut total = 0.0;
        for (s, a) in traj.state_actions() {
            total += self.action_log_probs(s, temperature)?[a];
        }
        Ok(total)
    }

    /// Inverse-CDF draw from `pi(.|state)` at `temperature`.
    pub fn sample_action(&self, state: usize, temperature: f64, rng: &mut StreamRng) -> Result<usize> {
        let lp = self.action_log_probs(state, temperature)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (a, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return Ok(a);
            }
        }
        // Rounding left `acc` just below 1: take the last action with mass.
        Ok(lp.iter().rposition(|l| *l > f64::NEG_INFINITY).unwrap_or(self.num_actions - 1))
    }

    /// Highest-logit action, lowest index on ties.
    pub fn greedy_action(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, &l) in row.iter().enumerate() {
            if l > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    num_states: usize,
    num_actions: usize,
    logits: Vec<Vec<f64>>,
}

impl Serialize for TabularPolicy {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        PolicyFile {
            num_states: self.num_states,
            num_actions: self.num_actions,
            logits: self.logits.chunks(self.num_actions).map(<[f64]>::to_vec).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TabularPolicy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let file = PolicyFile::deserialize(deserializer)?;
        if file.logits.len() != file.num_states || file.logits.iter().any(|r| r.len() != file.num_actions) {
            return Err(serde::de::Error::custom("logit matrix does not match the declared shape"));
        }
        TabularPolicy::from_logits(file.num_states, file.num_actions, file.logits.concat())
            .map_err(serde::de::Error::custom)
    }
}
