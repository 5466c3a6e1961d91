//! Hybrid best-of-N selection: ordered filters with empty-set fallback, then a
//! step-count extremum.

use serde::{Deserialize, Serialize};

use crate::env::{self, TabularMdp, Trajectory};
use crate::error::{Error, Result};
use crate::verifier::VerifierModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Direction {
    /// Prefer the candidate with the most environment steps.
    #[default]
    MaxSteps,
    MinSteps,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub direction: Direction,
}

fn default_eta() -> f64 {
    0.01
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig { eta: default_eta(), direction: Direction::MaxSteps }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::config(format!("selector eta must lie in [0, 1), got {}", self.eta)));
        }
        Ok(())
    }
}

/// Observable signals the selector acts on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSignals {
    pub finished: bool,
    pub regression_free: bool,
    pub score: f64,
    pub length: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Finished,
    RegressionFree,
    VerifierThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub stage: Stage,
    /// Candidates remaining after the stage, including a fallback restore.
    pub survivors: Vec<usize>,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionAudit {
    pub input: usize,
    pub stages: Vec<StageAudit>,
    pub chosen: usize,
}

/// Runs the filter stages and the length heuristic over precomputed signals.
pub fn select_with_signals(signals: &[CandidateSignals], config: &SelectorConfig) -> Result<(usize, SelectionAudit)> {
    if signals.is_empty() {
        return Err(Error::usage("selector needs at least one candidate"));
    }
    config.validate()?;
    let mut current: Vec<usize> = (0..signals.len()).collect();
    let mut stages = Vec::with_capacity(3);
    let filters: [(Stage, &dyn Fn(&CandidateSignals) -> bool); 3] = [
        (Stage::Finished, &|c| c.finished),
        (Stage::RegressionFree, &|c| c.regression_free),
        (Stage::VerifierThreshold, &|c| c.score >= config.eta),
    ];
    for (stage, keep) in filters {
        let kept: Vec<usize> = current.iter().copied().filter(|&i| keep(&signals[i])).collect();
        let fallback = kept.is_empty();
        if !fallback {
            current = kept;
        }
        stages.push(StageAudit { stage, survivors: current.clone(), fallback });
    }
    // `current` is in increasing index order, so the first extremum is the lowest index.
    let mut chosen = current[0];
    for &i in &current[1..] {
        let better = match config.direction {
            Direction::MaxSteps => signals[i].length > signals[chosen].length,
            Direction::MinSteps => signals[i].length < signals[chosen].length,
        };
        if better {
            chosen = i;
        }
    }
    Ok((chosen, SelectionAudit { input: signals.len(), stages, chosen }))
}

/// Selects among rollouts of one instance using replayed flags and verifier scores.
pub fn select(
    mdp: &TabularMdp,
    candidates: &[Trajectory],
    verifier: &VerifierModel,
    config: &SelectorConfig,
) -> Result<(usize, SelectionAudit)> {
    let signals = candidates
        .iter()
        .map(|t| {
            let (finished, regression_free, length) = env::trajectory_flags(mdp, t)?;
            let score = crate::verifier::score(verifier, mdp, t)?;
            Ok(CandidateSignals { finished, regression_free, score, length })
        })
        .collect::<Result<Vec<_>>>()?;
    select_with_signals(&signals, config)
}

/// Whether any candidate succeeds.
pub fn pass_at_n(candidates: &[Trajectory]) -> bool {
    candidates.iter().any(Trajectory::is_success)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn sig(finished: bool, regression_free: bool, score: f64, length: usize) -> CandidateSignals {
        CandidateSignals { finished, regression_free, score, length }
    }

    fn signals() -> impl Strategy<Value = Vec<CandidateSignals>> {
        prop::collection::vec(
            (any::<bool>(), any::<bool>(), prop::sample::select(vec![0.0, 0.005, 0.01, 0.02, 0.5, 0.99]), 1usize..8)
                .prop_map(|(f, r, s, l)| sig(f, r, s, l)),
            1..12,
        )
    }

    #[test]
    fn isolated_good_candidate_wins() {
        let c = [sig(false, true, 0.9, 7), sig(true, true, 0.0, 1), sig(true, false, 0.9, 7)];
        let (chosen, audit) = select_with_signals(&c, &SelectorConfig::default()).unwrap();
        assert_eq!(chosen, 1);
        assert!(audit.stages[2].fallback);
    }

    #[test]
    fn all_truncated_falls_back() {
        let c = [sig(false, true, 0.5, 3), sig(false, true, 0.5, 4)];
        let (chosen, audit) = select_with_signals(&c, &SelectorConfig::default()).unwrap();
        assert!(audit.stages[0].fallback);
        assert_eq!(audit.stages[0].survivors, vec![0, 1]);
        assert_eq!(chosen, 1);
    }

    #[test]
    fn direction_switch() {
        let c = [sig(true, true, 0.5, 5), sig(true, true, 0.5, 7)];
        let max = SelectorConfig::default();
        let min = SelectorConfig { direction: Direction::MinSteps, ..max.clone() };
        assert_eq!(select_with_signals(&c, &max).unwrap().0, 1);
        assert_eq!(select_with_signals(&c, &min).unwrap().0, 0);
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = [sig(true, true, 0.009, 9), sig(true, true, 0.01, 2)];
        assert_eq!(select_with_signals(&c, &SelectorConfig::default()).unwrap().0, 1);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let c = [sig(true, true, 0.5, 4), sig(true, true, 0.5, 4), sig(true, true, 0.5, 4)];
        assert_eq!(select_with_signals(&c, &SelectorConfig::default()).unwrap().0, 0);
    }

    #[test]
    fn invalid_inputs() {
        assert!(select_with_signals(&[], &SelectorConfig::default()).is_err());
        let bad = SelectorConfig { eta: 1.0, ..Default::default() };
        assert!(matches!(select_with_signals(&[sig(true, true, 1.0, 1)], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn pass_at_n_cases() {
        let mk = |u: f64| Trajectory {
            instance_id: "x".into(),
            prompt: 0,
            steps: vec![],
            utility: u,
            finished: true,
            regression_free: true,
            length: 0,
        };
        assert!(pass_at_n(&[mk(0.0), mk(1.0)]));
        assert!(!pass_at_n(&[mk(0.0), mk(0.0)]));
        assert!(pass_at_n(&[mk(1.0)]));
        assert!(!pass_at_n(&[mk(0.0)]));
    }

    proptest! {
        #[test]
        fn audit_invariant(c in signals(), eta in prop::sample::select(vec![0.0, 0.01, 0.3]), min in any::<bool>()) {
            let config = SelectorConfig { eta, direction: if min { Direction::MinSteps } else { Direction::MaxSteps } };
            let (chosen, audit) = select_with_signals(&c, &config).unwrap();
            let mut prev: Vec<usize> = (0..c.len()).collect();
            for st in &audit.stages {
                prop_assert!(!st.survivors.is_empty());
                if st.fallback {
                    prop_assert_eq!(&st.survivors, &prev);
                } else {
                    prop_assert!(st.survivors.iter().all(|i| prev.contains(i)));
                }
                prev = st.survivors.clone();
            }
            prop_assert!(prev.contains(&chosen));
            let best = prev.iter().map(|&i| c[i].length);
            let target = if min { best.min() } else { best.max() }.unwrap();
            prop_assert_eq!(c[chosen].length, target);
            prop_assert!(prev.iter().all(|&i| c[i].length != target || i >= chosen));
        }

        #[test]
        fn singleton_is_chosen(c in signals()) {
            let (chosen, _) = select_with_signals(&c[..1], &SelectorConfig::default()).unwrap();
            prop_assert_eq!(chosen, 0);
        }

        #[test]
        fn raising_eta_shrinks_threshold_stage(c in signals()) {
            let lo = select_with_signals(&c, &SelectorConfig { eta: 0.01, ..Default::default() }).unwrap().1;
            let hi = select_with_signals(&c, &SelectorConfig { eta: 0.3, ..Default::default() }).unwrap().1;
            let (lo3, hi3) = (&lo.stages[2], &hi.stages[2]);
            prop_assert!(hi3.fallback || hi3.survivors.iter().all(|i| lo3.survivors.contains(i)));
        }
    }
}
