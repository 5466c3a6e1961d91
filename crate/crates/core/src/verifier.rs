//! Logistic trajectory scorer used by the selector as a low-threshold filter.
//!
//! Features are computed from the action sequence, the observations it produced and the
//! transition table's regression flags. The trajectory's utility field is never read.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::KtoExample;
use crate::env::{self, ActionKind, Observation, TabularMdp, Trajectory};
use crate::error::{Error, Result};
use crate::math;

/// Featurizer version stored with every model; scoring refuses other versions.
pub const FEATURE_SPEC_VERSION: &str = "trajectory-features/1";

pub const FEATURE_NAMES: [&str; 12] = [
    "length_norm",
    "finished",
    "regression_free",
    "count_search",
    "count_view",
    "count_edit_good",
    "count_edit_bad",
    "count_run_tests",
    "count_submit",
    "phase_exploring",
    "phase_edited",
    "phase_verified",
];

/// Where the episode ended as far as its observations tell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TerminalPhase {
    /// No edit has been applied.
    Exploring,
    /// An edit was applied and no passing test run followed it.
    Edited,
    /// Tests passed after the most recent edit.
    Verified,
}

pub fn terminal_phase(traj: &Trajectory) -> TerminalPhase {
    traj.steps.iter().fold(TerminalPhase::Exploring, |phase, step| match step.observation {
        Observation::EditApplied => TerminalPhase::Edited,
        Observation::TestsPass if phase != TerminalPhase::Exploring => TerminalPhase::Verified,
        _ => phase,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFeatures {
    pub values: [f64; 12],
}

/// Feature vector with every entry in `[0, 1]`. Action counts are zero on instances
/// without action roles.
pub fn featurize(mdp: &TabularMdp, traj: &Trajectory) -> Result<TrajectoryFeatures> {
    let (finished, regression_free, length) = env::trajectory_flags(mdp, traj)?;
    let h = mdp.horizon as f64;
    let mut values = [0.0; 12];
    values[0] = length as f64 / h;
    values[1] = f64::from(u8::from(finished));
    values[2] = f64::from(u8::from(regression_free));
    if let Some(kinds) = &mdp.action_kinds {
        for step in &traj.steps {
            let kind: ActionKind = kinds[step.action];
            values[3 + kind.index()] += 1.0 / h;
        }
    }
    let phase = match terminal_phase(traj) {
        TerminalPhase::Exploring => 9,
        TerminalPhase::Edited => 10,
        TerminalPhase::Verified => 11,
    };
    values[phase] = 1.0;
    Ok(TrajectoryFeatures { values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierConfig {
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_iters() -> usize {
    500
}

fn default_lr() -> f64 {
    1.0
}

impl Default for VerifierConfig {
    fn default() -> Self {
        VerifierConfig { iters: default_iters(), learning_rate: default_lr() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifierModel {
    pub version: String,
    pub feature_spec: Vec<String>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl VerifierModel {
    /// All-zero model: scores 0.5 everywhere.
    pub fn zero() -> Self {
        VerifierModel {
            version: FEATURE_SPEC_VERSION.to_string(),
            feature_spec: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            weights: vec![0.0; FEATURE_NAMES.len()],
            bias: 0.0,
        }
    }

    fn check_spec(&self) -> Result<()> {
        let names_match = self.feature_spec.len() == FEATURE_NAMES.len()
            && self.feature_spec.iter().zip(FEATURE_NAMES).all(|(a, b)| a == b);
        if self.version != FEATURE_SPEC_VERSION || !names_match {
            return Err(Error::Mismatch(format!(
                "verifier was trained for featurizer {} but this build provides {FEATURE_SPEC_VERSION}",
                self.version
            )));
        }
        if self.weights.len() != FEATURE_NAMES.len() {
            return Err(Error::Mismatch("verifier weight count does not match the feature basis".into()));
        }
        Ok(())
    }

    pub fn score_features(&self, features: &TrajectoryFeatures) -> f64 {
        let z: f64 = self.weights.iter().zip(&features.values).map(|(w, x)| w * x).sum::<f64>() + self.bias;
        math::sigmoid(z)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: VerifierModel = serde_json::from_str(text)?;
        model.check_spec()?;
        Ok(model)
    }
}

/// `sigma(w . f + b)`.
pub fn score(model: &VerifierModel, mdp: &TabularMdp, traj: &Trajectory) -> Result<f64> {
    model.check_spec()?;
    Ok(model.score_features(&featurize(mdp, traj)?))
}

/// Logistic regression on `(features, label)` by full-batch gradient descent on the mean
/// binary cross-entropy, starting from zero.
pub fn train_on_features(data: &[(TrajectoryFeatures, bool)], config: &VerifierConfig) -> Result<VerifierModel> {
    let positives = data.iter().filter(|(_, y)| *y).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::Pipeline(format!(
            "verifier training needs both classes; got {positives} desirable of {}",
            data.len()
        )));
    }
    let mut model = VerifierModel::zero();
    let n = data.len() as f64;
    for _ in 0..config.iters {
        let mut grad_w = [0.0; 12];
        let mut grad_b = 0.0;
        for (f, y) in data {
            let residual = model.score_features(f) - f64::from(u8::from(*y));
            for (g, x) in grad_w.iter_mut().zip(&f.values) {
                *g += residual * x / n;
            }
            grad_b += residual / n;
        }
        for (w, g) in model.weights.iter_mut().zip(grad_w) {
            *w -= config.learning_rate * g;
        }
        model.bias -= config.learning_rate * grad_b;
    }
    Ok(model)
}

/// Trains on labeled trajectories, looking up each one's instance by id.
pub fn train_verifier(mdps: &[TabularMdp], pool: &[KtoExample], config: &VerifierConfig) -> Result<VerifierModel> {
    let by_id: BTreeMap<&str, &TabularMdp> = mdps.iter().map(|m| (m.instance_id.as_str(), m)).collect();
    let data = pool
        .iter()
        .map(|e| {
            let mdp = by_id
                .get(e.instance_id.as_str())
                .ok_or_else(|| Error::usage(format!("no instance {} for verifier example", e.instance_id)))?;
            Ok((featurize(mdp, &e.trajectory)?, e.desirable))
        })
        .collect::<Result<Vec<_>>>()?;
    train_on_features(&data, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_pool, make_kto_examples};
    use crate::env::{make_bugfix_suite, make_tree_instance, rollout, SuiteParams};
    use crate::policy::TabularPolicy;
    use crate::rng;

    fn suite() -> Vec<TabularMdp> {
        make_bugfix_suite(3, 4, &SuiteParams::default()).unwrap()
    }

    fn labeled(suite: &[TabularMdp]) -> Vec<KtoExample> {
        let uniform = TabularPolicy::zeros(suite[0].num_states, 6);
        let teacher = crate::oracle::suite_oracle_policy(
            suite,
            &uniform,
            &crate::oracle::RegularizationParams::new(0.3, 0.2).unwrap(),
        )
        .unwrap();
        make_kto_examples(&generate_pool(suite, &[("t", &teacher), ("u", &uniform)], 12, 1.0, 5).unwrap())
    }

    #[test]
    fn feature_bounds_on_random_rollouts() {
        let suite = suite();
        let policy = TabularPolicy::zeros(suite[0].num_states, 6);
        let mut r = rng::stream(11, &[]);
        for i in 0..1000 {
            let mdp = &suite[i % suite.len()];
            let t = rollout(mdp, &policy, 1.0, &mut r).unwrap();
            let f = featurize(mdp, &t).unwrap();
            assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)), "{:?}", f.values);
            assert_eq!(f.values[9..].iter().sum::<f64>(), 1.0);
            assert_eq!(f.values[0] == 1.0, t.length == mdp.horizon);
            assert_eq!(f.values[1] == 1.0, t.finished);
        }
    }

    #[test]
    fn features_ignore_utility() {
        let suite = suite();
        for e in labeled(&suite) {
            let mdp = suite.iter().find(|m| m.instance_id == e.instance_id).unwrap();
            let mut blind = e.trajectory.clone();
            blind.utility = 0.0;
            assert_eq!(featurize(mdp, &e.trajectory).unwrap(), featurize(mdp, &blind).unwrap());
        }
    }

    #[test]
    fn zero_model_and_zero_iterations_score_half() {
        let suite = suite();
        let pool = labeled(&suite);
        let model = train_verifier(&suite, &pool, &VerifierConfig { iters: 0, learning_rate: 1.0 }).unwrap();
        for e in &pool {
            let mdp = suite.iter().find(|m| m.instance_id == e.instance_id).unwrap();
            assert_eq!(score(&model, mdp, &e.trajectory).unwrap(), 0.5);
        }
    }

    #[test]
    fn separable_pool_is_fit_exactly() {
        let data: Vec<_> = (0..20)
            .map(|i| {
                let mut values = [0.0; 12];
                values[1] = f64::from(u8::from(i % 2 == 0));
                values[0] = (i % 5) as f64 / 5.0;
                values[9] = 1.0;
                (TrajectoryFeatures { values }, i % 2 == 0)
            })
            .collect();
        let model = train_on_features(&data, &VerifierConfig::default()).unwrap();
        let correct = data.iter().filter(|(f, y)| (model.score_features(f) > 0.5) == *y).count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn label_flip_negates_weights() {
        let suite = suite();
        let pool = labeled(&suite);
        let flipped: Vec<_> = pool.iter().map(|e| KtoExample { desirable: !e.desirable, ..e.clone() }).collect();
        let cfg = VerifierConfig { iters: 200, learning_rate: 0.5 };
        let a = train_verifier(&suite, &pool, &cfg).unwrap();
        let b = train_verifier(&suite, &flipped, &cfg).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x + y).abs() < 1e-8);
        }
        assert!((a.bias + b.bias).abs() < 1e-8);
    }

    #[test]
    fn trained_verifier_separates_classes_on_average() {
        let suite = suite();
        let pool = labeled(&suite);
        let model = train_verifier(&suite, &pool, &VerifierConfig::default()).unwrap();
        let mean = |want: bool| {
            let scores: Vec<f64> = pool
                .iter()
                .filter(|e| e.desirable == want)
                .map(|e| {
                    let mdp = suite.iter().find(|m| m.instance_id == e.instance_id).unwrap();
                    score(&model, mdp, &e.trajectory).unwrap()
                })
                .collect();
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        assert!(mean(true) > mean(false));
    }

    #[test]
    fn single_class_pool_is_rejected() {
        let suite = suite();
        let pool: Vec<_> = labeled(&suite).into_iter().filter(|e| e.desirable).collect();
        assert!(matches!(train_verifier(&suite, &pool, &VerifierConfig::default()), Err(Error::Pipeline(_))));
    }

    #[test]
    fn serialized_model_scores_identically_and_checks_version() {
        let suite = suite();
        let pool = labeled(&suite);
        let model = train_verifier(&suite, &pool, &VerifierConfig::default()).unwrap();
        let back = VerifierModel::from_json(&model.to_json().unwrap()).unwrap();
        for e in &pool {
            let mdp = suite.iter().find(|m| m.instance_id == e.instance_id).unwrap();
            assert_eq!(score(&model, mdp, &e.trajectory).unwrap(), score(&back, mdp, &e.trajectory).unwrap());
        }
        let mut stale = model.clone();
        stale.version = "trajectory-features/0".into();
        assert!(matches!(score(&stale, &suite[0], &pool[0].trajectory), Err(Error::Mismatch(_))));
        assert!(VerifierModel::from_json(&stale.to_json().unwrap()).is_err());
    }

    #[test]
    fn finished_weight_is_monotone() {
        let tree = make_tree_instance(0, 3, 2, true).unwrap();
        let t = crate::env::rollout_seeded(&tree, &TabularPolicy::zeros(tree.num_states, 3), 1.0, 0).unwrap();
        let mut model = VerifierModel::zero();
        let mut last = score(&model, &tree, &t).unwrap();
        for _ in 0..10 {
            model.weights[1] += 0.3;
            let s = score(&model, &tree, &t).unwrap();
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn phase_tracking() {
        use crate::env::Step;
        let mk = |obs: &[Observation]| Trajectory {
            instance_id: "x".into(),
            prompt: 0,
            steps: obs.iter().map(|&o| Step { state: 0, action: 0, observation: o }).collect(),
            utility: 0.0,
            finished: false,
            regression_free: true,
            length: obs.len(),
        };
        use Observation::*;
        assert_eq!(terminal_phase(&mk(&[Found, TestsPass])), TerminalPhase::Exploring);
        assert_eq!(terminal_phase(&mk(&[Found, EditApplied, TestsFail])), TerminalPhase::Edited);
        assert_eq!(terminal_phase(&mk(&[EditApplied, TestsPass, Submitted])), TerminalPhase::Verified);
        assert_eq!(terminal_phase(&mk(&[EditApplied, TestsPass, EditApplied])), TerminalPhase::Edited);
    }
}
