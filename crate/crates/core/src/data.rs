//! Trajectory pools and the datasets built from them.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::env::{self, TabularMdp, Trajectory};
use crate::error::{Error, Result};
use crate::math;
use crate::policy::TabularPolicy;
use crate::rng;

/// Stream tag separating pool rollouts from evaluation rollouts under the same seed.
const POOL_STREAM: u64 = 0x706f_6f6c;

/// A trajectory with the label of the policy that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub policy_label: String,
    #[serde(flatten)]
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instance_id: String,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    /// Bradley-Terry probability that `chosen` is preferred, or 1 for hard labels.
    pub weight: f64,
    pub chosen_label: String,
    pub rejected_label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KtoExample {
    pub instance_id: String,
    pub trajectory: Trajectory,
    pub desirable: bool,
    pub policy_label: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Every strictly better trajectory paired with every worse one, weight 1.
    #[default]
    Hard,
    /// Both orderings of every pair with distinct utilities, weighted by the
    /// Bradley-Terry probability of that ordering.
    ExhaustiveWeighted,
}

/// `sigma(u_plus - u_minus)`.
pub fn bt_probability(u_plus: f64, u_minus: f64) -> f64 {
    math::sigmoid(u_plus - u_minus)
}

/// Rolls out every `(label, policy)` `rollouts_per_policy` times on every instance.
/// Entries are ordered by instance, then policy, then rollout index; each rollout has its
/// own stream keyed by `(seed, instance, policy, rollout)`.
pub fn generate_pool(
    mdps: &[TabularMdp],
    policies: &[(&str, &TabularPolicy)],
    rollouts_per_policy: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<PoolEntry>> {
    if rollouts_per_policy == 0 {
        return Err(Error::config("rollouts_per_policy must be >= 1"));
    }
    let per_instance: Vec<Vec<PoolEntry>> = mdps
        .par_iter()
        .enumerate()
        .map(|(i, mdp)| {
            let mut out = Vec::with_capacity(policies.len() * rollouts_per_policy);
            for (p, (label, policy)) in policies.iter().enumerate() {
                for r in 0..rollouts_per_policy {
                    let mut stream = rng::stream(seed, &[POOL_STREAM, i as u64, p as u64, r as u64]);
                    let trajectory = env::rollout(mdp, policy, temperature, &mut stream)?;
                    out.push(PoolEntry { policy_label: label.to_string(), trajectory });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}

/// Every distinct realized trajectory of `mdp` from each initial state.
pub fn exhaustive_pool(mdp: &TabularMdp) -> Result<Vec<PoolEntry>> {
    let mut pool = Vec::new();
    for &(s, _) in &mdp.initial_states {
        for trajectory in env::enumerate_completions(mdp, s)? {
            pool.push(PoolEntry { policy_label: "enumerated".into(), trajectory });
        }
    }
    Ok(pool)
}

/// Successful, finished trajectories in pool order.
pub fn make_sft_dataset(pool: &[PoolEntry]) -> Vec<Trajectory> {
    pool.iter()
        .filter(|e| e.trajectory.utility == 1.0 && e.trajectory.finished)
        .map(|e| e.trajectory.clone())
        .collect()
}

/// Groups pool indices by `(instance, prompt)` in order of first appearance.
fn groups(pool: &[PoolEntry]) -> Vec<Vec<usize>> {
    let mut order: Vec<(&str, usize)> = Vec::new();
    let mut index: BTreeMap<(&str, usize), usize> = BTreeMap::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, e) in pool.iter().enumerate() {
        let key = (e.trajectory.instance_id.as_str(), e.trajectory.prompt);
        let g = *index.entry(key).or_insert_with(|| {
            order.push(key);
            out.push(Vec::new());
            out.len() - 1
        });
        out[g].push(i);
    }
    out
}

pub fn make_preference_pairs(pool: &[PoolEntry], mode: PairMode) -> Vec<PreferencePair> {
    let pair = |c: &PoolEntry, r: &PoolEntry, weight: f64| PreferencePair {
        instance_id: c.trajectory.instance_id.clone(),
        chosen: c.trajectory.clone(),
        rejected: r.trajectory.clone(),
        weight,
        chosen_label: c.policy_label.clone(),
        rejected_label: r.policy_label.clone(),
    };
    let mut pairs = Vec::new();
    for group in groups(pool) {
        match mode {
            PairMode::Hard => {
                for &i in &group {
                    for &j in &group {
                        if pool[i].trajectory.utility > pool[j].trajectory.utility {
                            pairs.push(pair(&pool[i], &pool[j], 1.0));
                        }
                    }
                }
            }
            PairMode::ExhaustiveWeighted => {
                for (n, &i) in group.iter().enumerate() {
                    for &j in &group[n + 1..] {
                        let (ui, uj) = (pool[i].trajectory.utility, pool[j].trajectory.utility);
                        if ui != uj {
                            pairs.push(pair(&pool[i], &pool[j], bt_probability(ui, uj)));
                            pairs.push(pair(&pool[j], &pool[i], bt_probability(uj, ui)));
                        }
                    }
                }
            }
        }
    }
    pairs
}

pub fn make_kto_examples(pool: &[PoolEntry]) -> Vec<KtoExample> {
    pool.iter()
        .map(|e| KtoExample {
            instance_id: e.trajectory.instance_id.clone(),
            trajectory: e.trajectory.clone(),
            desirable: e.trajectory.utility == 1.0,
            policy_label: e.policy_label.clone(),
        })
        .collect()
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_bugfix_suite, SuiteParams, Step};
    use crate::oracle::{suite_oracle_policy, RegularizationParams};

    fn fake(instance: &str, utility: f64, tag: usize) -> PoolEntry {
        PoolEntry {
            policy_label: format!("p{tag}"),
            trajectory: Trajectory {
                instance_id: instance.into(),
                prompt: 0,
                steps: vec![Step { state: 0, action: tag, observation: env::Observation::Moved }],
                utility,
                finished: true,
                regression_free: true,
                length: 1,
            },
        }
    }

    #[test]
    fn bt_examples() {
        assert_eq!(bt_probability(1.0, 1.0), 0.5);
        assert!((bt_probability(1.0, 0.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        for (a, b) in [(0.3, -2.0), (1.0, 0.0), (5.0, 4.5)] {
            assert!((bt_probability(a, b) + bt_probability(b, a) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_counts_and_determinism() {
        let suite = make_bugfix_suite(0, 1, &SuiteParams::default()).unwrap();
        let a = TabularPolicy::zeros(suite[0].num_states, 6);
        let b = TabularPolicy::zeros(suite[0].num_states, 6);
        let pool = generate_pool(&suite, &[("a", &a), ("b", &b)], 8, 1.0, 3).unwrap();
        assert_eq!(pool.len(), 16);
        assert_eq!(pool, generate_pool(&suite, &[("a", &a), ("b", &b)], 8, 1.0, 3).unwrap());
        assert!(generate_pool(&suite, &[("a", &a)], 0, 1.0, 3).is_err());
    }

    #[test]
    fn oracle_teacher_beats_uniform_student() {
        let suite = make_bugfix_suite(2, 4, &SuiteParams::default()).unwrap();
        let uniform = TabularPolicy::zeros(suite[0].num_states, 6);
        let teacher = suite_oracle_policy(&suite, &uniform, &RegularizationParams::new(0.2, 0.1).unwrap()).unwrap();
        let pool = generate_pool(&suite, &[("teacher", &teacher), ("student", &uniform)], 32, 1.0, 0).unwrap();
        let rate = |label: &str| {
            let items: Vec<_> = pool.iter().filter(|e| e.policy_label == label).collect();
            items.iter().filter(|e| e.trajectory.is_success()).count() as f64 / items.len() as f64
        };
        assert!(rate("teacher") >= rate("student"));
    }

    #[test]
    fn sft_filter() {
        let mut pool: Vec<_> = (0..10).map(|i| fake("x", if i % 4 == 0 { 1.0 } else { 0.0 }, i)).collect();
        let sft = make_sft_dataset(&pool);
        assert_eq!(sft.len(), 3);
        assert!(sft.iter().all(|t| t.utility == 1.0));
        pool.iter_mut().for_each(|e| e.trajectory.utility = 0.0);
        assert!(make_sft_dataset(&pool).is_empty());
    }

    #[test]
    fn hard_and_weighted_pairs() {
        let pool = vec![fake("x", 1.0, 0), fake("x", 0.0, 1), fake("x", 1.0, 2), fake("x", 0.0, 3), fake("x", 0.0, 4)];
        let hard = make_preference_pairs(&pool, PairMode::Hard);
        assert_eq!(hard.len(), 6);
        assert!(hard.iter().all(|p| p.chosen.utility > p.rejected.utility && p.weight == 1.0));

        let duo = vec![fake("x", 1.0, 0), fake("x", 1.0, 1)];
        assert!(make_preference_pairs(&duo, PairMode::Hard).is_empty());
        assert!(make_preference_pairs(&duo, PairMode::ExhaustiveWeighted).is_empty());

        let weighted = make_preference_pairs(&pool[..2], PairMode::ExhaustiveWeighted);
        assert_eq!(weighted.len(), 2);
        assert!((weighted[0].weight - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((weighted[1].weight - 0.268_941_421_369_995_1).abs() < 1e-15);
        let all = make_preference_pairs(&pool, PairMode::ExhaustiveWeighted);
        assert_eq!(all.len(), 12);
        for w in all.chunks(2) {
            assert!((w[0].weight + w[1].weight - 1.0).abs() < 1e-15);
            assert_eq!(w[0].chosen, w[1].rejected);
        }
    }

    #[test]
    fn no_cross_instance_pairs() {
        let pool = vec![fake("x", 1.0, 0), fake("y", 0.0, 1), fake("x", 0.0, 2), fake("y", 1.0, 3)];
        for mode in [PairMode::Hard, PairMode::ExhaustiveWeighted] {
            for p in make_preference_pairs(&pool, mode) {
                assert_eq!(p.chosen.instance_id, p.rejected.instance_id);
                assert_eq!(p.instance_id, p.chosen.instance_id);
            }
        }
    }

    #[test]
    fn kto_labels() {
        let pool: Vec<_> = (0..16).map(|i| fake("x", f64::from(u8::from(i % 3 == 0)), i)).collect();
        let ex = make_kto_examples(&pool);
        assert_eq!(ex.len(), 16);
        assert!(ex.iter().all(|e| e.desirable == (e.trajectory.utility == 1.0)));
        let mut reversed = pool.clone();
        reversed.reverse();
        let mut back = make_kto_examples(&reversed);
        back.reverse();
        assert_eq!(ex, back);
        let wins: Vec<_> = (0..4).map(|i| fake("x", 1.0, i)).collect();
        assert!(make_kto_examples(&wins).iter().all(|e| e.desirable));
    }

    #[test]
    fn jsonl_round_trip() {
        let pool = vec![fake("x", 1.0, 0), fake("y", 0.0, 1)];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &pool).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().contains("\"instance_id\":\"x\""));
        let back: Vec<PoolEntry> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, pool);
    }
}
