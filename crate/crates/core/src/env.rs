//! Synthetic multi-turn tool-use environments.
//!
//! A [`TabularMdp`] is a finite-horizon deterministic MDP with a terminal
//! utility. The bug-fix suite models an agent that must locate a defect
//! (`SEARCH`/`VIEW`), apply an edit, optionally run tests, and submit. One
//! edit fixes the bug; the other introduces a regression that persists until
//! submission. Each suite instance owns a disjoint block of a shared state
//! space, so a single [`TabularPolicy`] covers the whole suite. Every state is
//! tagged with its step index.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::TabularPolicy;
use crate::rng::{self, StreamRng};

/// Largest `num_actions^H` that [`enumerate_trajectories`] will expand.
pub const ENUMERATION_GUARD: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionKind {
    Search,
    View,
    EditGood,
    EditBad,
    RunTests,
    Submit,
}

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        ActionKind::Search,
        ActionKind::View,
        ActionKind::EditGood,
        ActionKind::EditBad,
        ActionKind::RunTests,
        ActionKind::Submit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Search => "SEARCH",
            ActionKind::View => "VIEW",
            ActionKind::EditGood => "EDIT_GOOD",
            ActionKind::EditBad => "EDIT_BAD",
            ActionKind::RunTests => "RUN_TESTS",
            ActionKind::Submit => "SUBMIT",
        }
    }
}

/// Tool feedback returned by a transition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Observation {
    Noop,
    Found,
    Viewed,
    AlreadyLocated,
    EditApplied,
    EditRejected,
    TestsPass,
    TestsFail,
    Submitted,
    /// Generic feedback for hand-built environments without tool semantics.
    Moved,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Observation,
    pub next_state: usize,
}

/// Generator parameters for the bug-fix suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteParams {
    #[serde(default = "SuiteParams::default_horizon")]
    pub horizon: usize,
    /// Number of SEARCH/VIEW steps required before an edit takes effect.
    #[serde(default = "SuiteParams::default_locate_steps")]
    pub locate_steps: usize,
}

impl SuiteParams {
    fn default_horizon() -> usize {
        5
    }

    fn default_locate_steps() -> usize {
        1
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 {
            return Err(Error::config(format!("horizon must be >= 2, got {}", self.horizon)));
        }
        if self.horizon > 12 {
            return Err(Error::config(format!("horizon must be <= 12, got {}", self.horizon)));
        }
        if self.locate_steps == 0 {
            return Err(Error::config("locate_steps must be >= 1"));
        }
        if self.locate_steps + 2 > self.horizon {
            return Err(Error::config(format!(
                "locate_steps {} leaves no room to edit and submit within horizon {}",
                self.locate_steps, self.horizon
            )));
        }
        Ok(())
    }

    /// States used by one instance: `horizon` layers of `locate_steps + 3` phases plus two
    /// absorbing post-submit states.
    pub fn block_size(&self) -> usize {
        self.horizon * (self.locate_steps + 3) + 2
    }
}

impl Default for SuiteParams {
    fn default() -> Self {
        SuiteParams { horizon: Self::default_horizon(), locate_steps: Self::default_locate_steps() }
    }
}

/// Provenance recorded alongside a generated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Bugfix { seed: u64, index: usize, params: SuiteParams },
    Bandit { seed: u64, index: usize },
    Tree { seed: u64, binary: bool },
    Random { seed: u64 },
    Manual,
}

/// Finite-horizon deterministic MDP with terminal utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub instance_id: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    /// `transitions[state][action]`.
    pub transitions: Vec<Vec<Transition>>,
    /// `(state, probability)` pairs of the initial distribution.
    pub initial_states: Vec<(usize, f64)>,
    /// `terminal_utility[state][action]`, the utility `u(s_H, a_H)`; for tool-use
    /// environments also the utility of submitting from `state`.
    pub terminal_utility: Vec<Vec<f64>>,
    /// Tool semantics of each action index, when the environment has them.
    #[serde(default)]
    pub action_kinds: Option<Vec<ActionKind>>,
    /// States where the simulated regression suite fails.
    pub regressed: Vec<bool>,
    pub generator: Generator,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 || self.horizon == 0 {
            return Err(Error::config("num_states, num_actions and horizon must be positive"));
        }
        if self.transitions.len() != ns || self.transitions.iter().any(|row| row.len() != na) {
            return Err(Error::config("transition table must be total over (state, action)"));
        }
        if self.transitions.iter().flatten().any(|t| t.next_state >= ns) {
            return Err(Error::config("transition leads outside the state space"));
        }
        if self.terminal_utility.len() != ns || self.terminal_utility.iter().any(|r| r.len() != na) {
            return Err(Error::config("terminal utility table has the wrong shape"));
        }
        if self.terminal_utility.iter().flatten().any(|&u| !(0.0..=1.0).contains(&u)) {
            return Err(Error::config("terminal utilities must lie in [0, 1]"));
        }
        if self.regressed.len() != ns {
            return Err(Error::config("regression flags must cover every state"));
        }
        if self.initial_states.is_empty() {
            return Err(Error::config("initial distribution is empty"));
        }
        let mut total = 0.0;
        for &(s, p) in &self.initial_states {
            if s >= ns || !(p >= 0.0) {
                return Err(Error::config(format!("invalid initial state entry ({s}, {p})")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("initial probabilities sum to {total}, not 1")));
        }
        if let Some(kinds) = &self.action_kinds {
            if kinds.len() != na {
                return Err(Error::config("action_kinds must name every action"));
            }
        }
        Ok(())
    }

    pub fn submit_action(&self) -> Option<usize> {
        self.action_kinds.as_ref()?.iter().position(|&k| k == ActionKind::Submit)
    }

    pub fn action_of_kind(&self, kind: ActionKind) -> Option<usize> {
        self.action_kinds.as_ref()?.iter().position(|&k| k == kind)
    }

    pub fn utility(&self, state: usize, action: usize) -> f64 {
        self.terminal_utility[state][action]
    }

    /// Same-shape check used before a single policy is applied to several instances.
    pub fn same_shape(&self, other: &TabularMdp) -> bool {
        self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.horizon == other.horizon
    }

    /// States reachable at each step `h = 1..=H` (index `h - 1`) from the initial support.
    pub fn reachable_by_step(&self) -> Vec<BTreeSet<usize>> {
        let mut layers = Vec::with_capacity(self.horizon);
        let mut current: BTreeSet<usize> =
            self.initial_states.iter().filter(|(_, p)| *p > 0.0).map(|&(s, _)| s).collect();
        for h in 0..self.horizon {
            let next = if h + 1 < self.horizon {
                current
                    .iter()
                    .flat_map(|&s| self.transitions[s].iter().map(|t| t.next_state))
                    .collect()
            } else {
                BTreeSet::new()
            };
            layers.push(std::mem::replace(&mut current, next));
        }
        layers
    }

    /// Union of the per-step reachable sets.
    pub fn reachable_states(&self) -> BTreeSet<usize> {
        self.reachable_by_step().into_iter().flatten().collect()
    }

    /// States at which some trajectory takes an action. Unlike [`Self::reachable_states`],
    /// successors of the submit action are not expanded since episodes end there.
    pub fn decision_states(&self) -> BTreeSet<usize> {
        let submit = self.submit_action();
        let mut seen = BTreeSet::new();
        let mut current: BTreeSet<usize> =
            self.initial_states.iter().filter(|(_, p)| *p > 0.0).map(|&(s, _)| s).collect();
        for _ in 0..self.horizon {
            let next = current
                .iter()
                .flat_map(|&s| {
                    self.transitions[s]
                        .iter()
                        .enumerate()
                        .filter(|&(a, _)| Some(a) != submit)
                        .map(|(_, t)| t.next_state)
                })
                .collect();
            seen.extend(std::mem::replace(&mut current, next));
        }
        seen
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: TabularMdp = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }
}

/// One environment interaction: the action taken in `state` and the feedback it produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub observation: Observation,
}

/// A realized interaction: the prompt (initial state) and the completion that followed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub instance_id: String,
    pub prompt: usize,
    pub steps: Vec<Step>,
    pub utility: f64,
    pub finished: bool,
    pub regression_free: bool,
    pub length: usize,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn state_actions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.iter().map(|s| (s.state, s.action))
    }

    pub fn is_success(&self) -> bool {
        self.utility >= 1.0
    }
}

/// Deterministic transition.
pub fn step(mdp: &TabularMdp, state: usize, action: usize) -> Result<(Observation, usize)> {
    if state >= mdp.num_states || action >= mdp.num_actions {
        return Err(Error::usage(format!(
            "step({state}, {action}) out of range for {}x{} MDP",
            mdp.num_states, mdp.num_actions
        )));
    }
    let t = mdp.transitions[state][action];
    Ok((t.observation, t.next_state))
}

fn sample_initial_state(mdp: &TabularMdp, rng: &mut StreamRng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for &(s, p) in &mdp.initial_states {
        acc += p;
        if u < acc {
            return s;
        }
    }
    mdp.initial_states.iter().rev().find(|(_, p)| *p > 0.0).map_or(mdp.initial_states[0].0, |e| e.0)
}

/// Outcome of a completed action sequence: `(finished, regression_free, utility)`.
fn settle(mdp: &TabularMdp, steps: &[Step], final_state: usize) -> (bool, bool, f64) {
    let submit = mdp.submit_action();
    let submitted = submit.is_some_and(|a| steps.last().is_some_and(|s| s.action == a));
    let finished = submit.is_none() || submitted;
    // State holding the patch at the end of the episode.
    let judged = if submitted { steps.last().map_or(final_state, |s| s.state) } else { final_state };
    let regression_free = !mdp.regressed[judged];
    let utility = match steps.last() {
        Some(last) if finished => mdp.utility(last.state, last.action),
        _ => 0.0,
    };
    (finished, regression_free, utility)
}

/// Samples one trajectory. `temperature == 0` selects greedy decoding (lowest index on ties).
/// The episode stops early when the submit action is taken.
pub fn rollout(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    temperature: f64,
    rng: &mut StreamRng,
) -> Result<Trajectory> {
    if policy.num_states() != mdp.num_states || policy.num_actions() != mdp.num_actions {
        return Err(Error::usage("policy shape does not match the MDP"));
    }
    let submit = mdp.submit_action();
    let mut state = sample_initial_state(mdp, rng);
    let prompt = state;
    let mut steps = Vec::with_capacity(mdp.horizon);
    for _ in 0..mdp.horizon {
        let action = if temperature == 0.0 {
            policy.greedy_action(state)
        } else {
            policy.sample_action(state, temperature, rng)?
        };
        let (observation, next) = step(mdp, state, action)?;
        steps.push(Step { state, action, observation });
        state = next;
        if Some(action) == submit {
            break;
        }
    }
    let (finished, regression_free, utility) = settle(mdp, &steps, state);
    let length = steps.len();
    Ok(Trajectory {
        instance_id: mdp.instance_id.clone(),
        prompt,
        steps,
        utility,
        finished,
        regression_free,
        length,
    })
}

/// [`rollout`] on a fresh stream derived from `seed`.
pub fn rollout_seeded(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    temperature: f64,
    seed: u64,
) -> Result<Trajectory> {
    rollout(mdp, policy, temperature, &mut rng::stream(seed, &[]))
}

/// Replays the trajectory against the transition table and recomputes
/// `(finished, regression_free, length)`.
pub fn trajectory_flags(mdp: &TabularMdp, traj: &Trajectory) -> Result<(bool, bool, usize)> {
    let final_state = replay(mdp, traj)?;
    let (finished, regression_free, _) = settle(mdp, &traj.steps, final_state);
    Ok((finished, regression_free, traj.steps.len()))
}

/// Checks that `traj` was generated by `mdp` and returns the state after its last step.
pub fn replay(mdp: &TabularMdp, traj: &Trajectory) -> Result<usize> {
    if traj.instance_id != mdp.instance_id {
        return Err(Error::usage(format!(
            "trajectory from {} replayed on {}",
            traj.instance_id, mdp.instance_id
        )));
    }
    if traj.steps.len() > mdp.horizon {
        return Err(Error::usage("trajectory longer than the horizon"));
    }
    let mut state = traj.prompt;
    for (h, s) in traj.steps.iter().enumerate() {
        if s.state != state {
            return Err(Error::usage(format!("step {h} starts in {} but the MDP is in {state}", s.state)));
        }
        let (obs, next) = step(mdp, state, s.action)?;
        if obs != s.observation {
            return Err(Error::usage(format!("step {h} observation does not match the MDP")));
        }
        state = next;
    }
    Ok(state)
}

/// A full-horizon action sequence and what it produces.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumeratedPath {
    pub actions: Vec<usize>,
    /// `u(s_H, a_H)`.
    pub utility: f64,
    /// `s_1 .. s_H`.
    pub states: Vec<usize>,
}

fn check_guard(mdp: &TabularMdp, limit: u64) -> Result<u64> {
    let count = (mdp.num_actions as u64).checked_pow(mdp.horizon as u32);
    match count {
        Some(c) if c <= limit => Ok(c),
        _ => Err(Error::Capacity(format!(
            "{}^{} action sequences exceed the enumeration guard {limit}",
            mdp.num_actions, mdp.horizon
        ))),
    }
}

/// Every length-`H` action sequence from `start_state`, in lexicographic order.
pub fn enumerate_trajectories(mdp: &TabularMdp, start_state: usize) -> Result<Vec<EnumeratedPath>> {
    let count = check_guard(mdp, ENUMERATION_GUARD)?;
    if start_state >= mdp.num_states {
        return Err(Error::usage("start state out of range"));
    }
    let (h_max, na) = (mdp.horizon, mdp.num_actions);
    let mut out = Vec::with_capacity(count as usize);
    let mut actions = vec![0usize; h_max];
    let mut states = vec![start_state; h_max];
    // Odometer over action sequences; states[h] is refreshed from position `from` onward.
    let mut from = 0;
    loop {
        for h in from..h_max {
            if h > 0 {
                states[h] = mdp.transitions[states[h - 1]][actions[h - 1]].next_state;
            }
        }
        out.push(EnumeratedPath {
            actions: actions.clone(),
            utility: mdp.utility(states[h_max - 1], actions[h_max - 1]),
            states: states.clone(),
        });
        let mut pos = h_max;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            actions[pos] += 1;
            if actions[pos] < na {
                break;
            }
            actions[pos] = 0;
        }
        from = pos + 1;
    }
}

/// Distinct realized trajectories from `start_state` (episodes end at submit), in
/// lexicographic action order.
pub fn enumerate_completions(mdp: &TabularMdp, start_state: usize) -> Result<Vec<Trajectory>> {
    check_guard(mdp, ENUMERATION_GUARD)?;
    let submit = mdp.submit_action();
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    fn walk(
        mdp: &TabularMdp,
        submit: Option<usize>,
        prompt: usize,
        state: usize,
        prefix: &mut Vec<Step>,
        out: &mut Vec<Trajectory>,
    ) {
        for action in 0..mdp.num_actions {
            let t = mdp.transitions[state][action];
            prefix.push(Step { state, action, observation: t.observation });
            if Some(action) == submit || prefix.len() == mdp.horizon {
                let (finished, regression_free, utility) = settle(mdp, prefix, t.next_state);
                out.push(Trajectory {
                    instance_id: mdp.instance_id.clone(),
                    prompt,
                    steps: prefix.clone(),
                    utility,
                    finished,
                    regression_free,
                    length: prefix.len(),
                });
            } else {
                walk(mdp, submit, prompt, t.next_state, prefix, out);
            }
            prefix.pop();
        }
    }
    walk(mdp, submit, start_state, start_state, &mut prefix, &mut out);
    Ok(out)
}

// Phase layout inside one bug-fix block: phases 0..L are partial localisation
// progress, then LOCATED, FIXED and BROKEN.
struct BugfixLayout {
    base: usize,
    horizon: usize,
    locate: usize,
}

impl BugfixLayout {
    fn phases(&self) -> usize {
        self.locate + 3
    }
    fn located(&self) -> usize {
        self.locate
    }
    fn fixed(&self) -> usize {
        self.locate + 1
    }
    fn broken(&self) -> usize {
        self.locate + 2
    }
    fn state(&self, layer: usize, phase: usize) -> usize {
        self.base + layer * self.phases() + phase
    }
    fn done_ok(&self) -> usize {
        self.base + self.horizon * self.phases()
    }
    fn done_fail(&self) -> usize {
        self.done_ok() + 1
    }
}

fn bugfix_instance(seed: u64, index: usize, count: usize, params: &SuiteParams) -> TabularMdp {
    let block = params.block_size();
    let num_states = block * count;
    let layout = BugfixLayout { base: index * block, horizon: params.horizon, locate: params.locate_steps };
    let mut kinds = ActionKind::ALL.to_vec();
    kinds.shuffle(&mut rng::stream(seed, &[index as u64]));
    let na = kinds.len();

    let noop = |s: usize| Transition { observation: Observation::Noop, next_state: s };
    let mut transitions: Vec<Vec<Transition>> = (0..num_states).map(|s| vec![noop(s); na]).collect();
    let mut utility = vec![vec![0.0; na]; num_states];
    let mut regressed = vec![false; num_states];

    for layer in 0..params.horizon {
        let next_layer = (layer + 1).min(params.horizon - 1);
        for phase in 0..layout.phases() {
            let s = layout.state(layer, phase);
            regressed[s] = phase == layout.broken();
            for (a, kind) in kinds.iter().enumerate() {
                let (observation, next_phase) = match kind {
                    ActionKind::Search | ActionKind::View => {
                        if phase < layout.located() {
                            let obs = if *kind == ActionKind::Search { Observation::Found } else { Observation::Viewed };
                            (obs, phase + 1)
                        } else {
                            (Observation::AlreadyLocated, phase)
                        }
                    }
                    ActionKind::EditGood => {
                        if phase < layout.located() {
                            (Observation::EditRejected, phase)
                        } else if phase == layout.located() {
                            (Observation::EditApplied, layout.fixed())
                        } else {
                            (Observation::EditApplied, phase)
                        }
                    }
                    ActionKind::EditBad => {
                        if phase < layout.located() {
                            (Observation::EditRejected, phase)
                        } else {
                            (Observation::EditApplied, layout.broken())
                        }
                    }
                    ActionKind::RunTests => {
                        let obs = if phase == layout.fixed() { Observation::TestsPass } else { Observation::TestsFail };
                        (obs, phase)
                    }
                    ActionKind::Submit => {
                        let ok = phase == layout.fixed();
                        let next = if ok { layout.done_ok() } else { layout.done_fail() };
                        transitions[s][a] = Transition { observation: Observation::Submitted, next_state: next };
                        utility[s][a] = if ok { 1.0 } else { 0.0 };
                        continue;
                    }
                };
                transitions[s][a] = Transition { observation, next_state: layout.state(next_layer, next_phase) };
            }
        }
    }
    utility[layout.done_ok()] = vec![1.0; na];

    TabularMdp {
        instance_id: format!("bugfix-s{seed}-{index:03}"),
        num_states,
        num_actions: na,
        horizon: params.horizon,
        transitions,
        initial_states: vec![(layout.state(0, 0), 1.0)],
        terminal_utility: utility,
        action_kinds: Some(kinds),
        regressed,
        generator: Generator::Bugfix { seed, index, params: params.clone() },
    }
}

/// Generates `count` bug-fix instances sharing one state space. The mapping from
/// action index to tool (and therefore which index is the correct edit) is
/// permuted per instance from `seed`.
pub fn make_bugfix_suite(seed: u64, count: usize, params: &SuiteParams) -> Result<Vec<TabularMdp>> {
    if count == 0 {
        return Err(Error::config("suite must contain at least one instance"));
    }
    params.validate()?;
    Ok((0..count).map(|i| bugfix_instance(seed, i, count, params)).collect())
}

/// Single-turn instances (`H = 1`) with uniform random utilities, one state per instance
/// in a shared state space.
pub fn make_bandit_suite(seed: u64, count: usize, num_actions: usize) -> Result<Vec<TabularMdp>> {
    if count == 0 || num_actions == 0 {
        return Err(Error::config("bandit suite needs at least one instance and one action"));
    }
    Ok((0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[i as u64]);
            let mut utility = vec![vec![0.0; num_actions]; count];
            utility[i] = (0..num_actions).map(|_| r.gen::<f64>()).collect();
            TabularMdp {
                instance_id: format!("bandit-s{seed}-{i:03}"),
                num_states: count,
                num_actions,
                horizon: 1,
                transitions: (0..count)
                    .map(|s| vec![Transition { observation: Observation::Noop, next_state: s }; num_actions])
                    .collect(),
                initial_states: vec![(i, 1.0)],
                terminal_utility: utility,
                action_kinds: None,
                regressed: vec![false; count],
                generator: Generator::Bandit { seed, index: i },
            }
        })
        .collect())
}

/// Complete `num_actions`-ary tree of depth `horizon`: every state is visited at exactly
/// one step. With `binary`, leaf utilities are 0/1 and both values occur.
pub fn make_tree_instance(seed: u64, num_actions: usize, horizon: usize, binary: bool) -> Result<TabularMdp> {
    if num_actions < 2 || horizon == 0 {
        return Err(Error::config("tree instance needs >= 2 actions and a positive horizon"));
    }
    let internal: usize = (0..horizon).map(|h| num_actions.pow(h as u32)).sum();
    let mut transitions = Vec::with_capacity(internal);
    for s in 0..internal {
        let first_child = s * num_actions + 1;
        transitions.push(
            (0..num_actions)
                .map(|a| {
                    let child = first_child + a;
                    let next_state = if child < internal { child } else { s };
                    Transition { observation: Observation::Moved, next_state }
                })
                .collect(),
        );
    }
    let leaves_start = internal - num_actions.pow(horizon as u32 - 1);
    let mut r = rng::stream(seed, &[0x7265_6500]);
    let mut utility = vec![vec![0.0; num_actions]; internal];
    loop {
        for row in utility.iter_mut().skip(leaves_start) {
            for u in row.iter_mut() {
                *u = if binary { f64::from(r.gen_bool(0.5) as u8) } else { r.gen() };
            }
        }
        let flat: Vec<f64> = utility[leaves_start..].iter().flatten().copied().collect();
        let distinct = flat.iter().any(|&u| u != flat[0]);
        if distinct {
            break;
        }
    }
    Ok(TabularMdp {
        instance_id: format!("tree-s{seed}-a{num_actions}-h{horizon}"),
        num_states: internal,
        num_actions,
        horizon,
        transitions,
        initial_states: vec![(0, 1.0)],
        terminal_utility: utility,
        action_kinds: None,
        regressed: vec![false; internal],
        generator: Generator::Tree { seed, binary },
    })
}

/// Arbitrary deterministic MDP: random transitions (states may recur at different
/// steps), random utilities and a random initial distribution over up to three states.
pub fn make_random_mdp(seed: u64, num_states: usize, num_actions: usize, horizon: usize) -> Result<TabularMdp> {
    if num_states == 0 || num_actions == 0 || horizon == 0 {
        return Err(Error::config("random MDP needs positive sizes"));
    }
    let mut r = rng::stream(seed, &[0x7261_6e64]);
    let transitions = (0..num_states)
        .map(|_| {
            (0..num_actions)
                .map(|_| Transition { observation: Observation::Moved, next_state: r.gen_range(0..num_states) })
                .collect()
        })
        .collect();
    let terminal_utility = (0..num_states).map(|_| (0..num_actions).map(|_| r.gen()).collect()).collect();
    let k = num_states.min(3);
    let weights: Vec<f64> = (0..k).map(|_| r.gen_range(0.1..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut starts: Vec<usize> = (0..num_states).collect();
    starts.shuffle(&mut r);
    let initial_states = starts.into_iter().take(k).zip(weights).map(|(s, w)| (s, w / total)).collect();
    let mut mdp = TabularMdp {
        instance_id: format!("random-s{seed}"),
        num_states,
        num_actions,
        horizon,
        transitions,
        initial_states,
        terminal_utility,
        action_kinds: None,
        regressed: vec![false; num_states],
        generator: Generator::Random { seed },
    };
    // Renormalise so the sum is 1 to within rounding.
    let total: f64 = mdp.initial_states.iter().map(|e| e.1).sum();
    let last = mdp.initial_states.len() - 1;
    mdp.initial_states[last].1 += 1.0 - total;
    Ok(mdp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kind_index(mdp: &TabularMdp, kind: ActionKind) -> usize {
        mdp.action_of_kind(kind).unwrap()
    }

    fn small() -> TabularMdp {
        make_bugfix_suite(0, 1, &SuiteParams { horizon: 4, locate_steps: 1 }).unwrap().remove(0)
    }

    #[test]
    fn canonical_fix_sequence_succeeds() {
        let mdp = small();
        mdp.validate().unwrap();
        let seq = [ActionKind::Search, ActionKind::EditGood, ActionKind::RunTests, ActionKind::Submit];
        let mut s = mdp.initial_states[0].0;
        for (i, k) in seq.iter().enumerate() {
            let a = kind_index(&mdp, *k);
            if i == seq.len() - 1 {
                assert_eq!(mdp.utility(s, a), 1.0);
            }
            s = step(&mdp, s, a).unwrap().1;
        }
        assert_eq!(s, BugfixLayout { base: 0, horizon: 4, locate: 1 }.done_ok());
    }

    #[test]
    fn enumeration_finds_multiple_solutions() {
        let mdp = small();
        let paths = enumerate_trajectories(&mdp, mdp.initial_states[0].0).unwrap();
        assert_eq!(paths.len(), 1296);
        let successes = paths.iter().filter(|p| p.utility == 1.0).count();
        assert!(successes >= 2);
        // Independent depth-first count of utility-1 sequences.
        fn dfs(mdp: &TabularMdp, s: usize, depth: usize) -> usize {
            (0..mdp.num_actions)
                .map(|a| {
                    if depth + 1 == mdp.horizon {
                        usize::from(mdp.utility(s, a) == 1.0)
                    } else {
                        dfs(mdp, mdp.transitions[s][a].next_state, depth + 1)
                    }
                })
                .sum()
        }
        assert_eq!(successes, dfs(&mdp, mdp.initial_states[0].0, 0));
    }

    #[test]
    fn enumeration_is_lexicographic_and_counts() {
        let bandit = make_bandit_suite(1, 1, 3).unwrap().remove(0);
        let paths = enumerate_trajectories(&bandit, 0).unwrap();
        assert_eq!(paths.len(), 3);
        let tree = make_tree_instance(2, 3, 3, false).unwrap();
        let paths = enumerate_trajectories(&tree, 0).unwrap();
        assert_eq!(paths.len(), 27);
        assert!(paths.windows(2).all(|w| w[0].actions < w[1].actions));
    }

    #[test]
    fn decision_states_match_completions() {
        let mdp = small();
        let from_paths: BTreeSet<usize> = enumerate_completions(&mdp, mdp.initial_states[0].0)
            .unwrap()
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.state))
            .collect();
        assert_eq!(mdp.decision_states(), from_paths);
        assert!(mdp.decision_states().is_subset(&mdp.reachable_states()));
        let tree = make_tree_instance(0, 3, 2, false).unwrap();
        assert_eq!(tree.decision_states(), tree.reachable_states());
    }

    #[test]
    fn enumeration_guard() {
        let mdp = make_random_mdp(0, 4, 10, 8).unwrap();
        assert!(matches!(enumerate_trajectories(&mdp, 0), Err(Error::Capacity(_))));
    }

    #[test]
    fn suites_share_shape_and_differ_in_edit_assignment() {
        let suite = make_bugfix_suite(0, 3, &SuiteParams::default()).unwrap();
        assert!(suite.iter().all(|m| m.same_shape(&suite[0])));
        let ids: BTreeSet<_> = suite.iter().map(|m| m.instance_id.clone()).collect();
        assert_eq!(ids.len(), 3);
        let perms: BTreeSet<_> = suite.iter().map(|m| m.action_kinds.clone().unwrap()).collect();
        assert_eq!(perms.len(), 3);

        let a = make_bugfix_suite(0, 1, &SuiteParams::default()).unwrap().remove(0);
        let b = make_bugfix_suite(1, 1, &SuiteParams::default()).unwrap().remove(0);
        assert_ne!(kind_index(&a, ActionKind::EditGood), kind_index(&b, ActionKind::EditGood));
        let winners = |m: &TabularMdp| -> BTreeSet<Vec<usize>> {
            enumerate_trajectories(m, m.initial_states[0].0)
                .unwrap()
                .into_iter()
                .filter(|p| p.utility == 1.0)
                .map(|p| p.actions)
                .collect()
        };
        assert_ne!(winners(&a), winners(&b));
    }

    #[test]
    fn invalid_suite_params() {
        assert!(matches!(make_bugfix_suite(0, 0, &SuiteParams::default()), Err(Error::Config(_))));
        let p = SuiteParams { horizon: 1, locate_steps: 1 };
        assert!(matches!(make_bugfix_suite(0, 1, &p), Err(Error::Config(_))));
    }

    #[test]
    fn step_semantics() {
        let mdp = small();
        let layout = BugfixLayout { base: 0, horizon: 4, locate: 1 };
        let s0 = mdp.initial_states[0].0;
        let (obs, located) = step(&mdp, s0, kind_index(&mdp, ActionKind::Search)).unwrap();
        assert_eq!(obs, Observation::Found);
        assert_eq!(located, layout.state(1, layout.located()));
        let (obs, bad) = step(&mdp, located, kind_index(&mdp, ActionKind::EditBad)).unwrap();
        assert_eq!(obs, Observation::EditApplied);
        assert!(mdp.regressed[bad]);
        for a in 0..mdp.num_actions {
            assert_eq!(step(&mdp, layout.done_ok(), a).unwrap(), (Observation::Noop, layout.done_ok()));
        }
        assert!(matches!(step(&mdp, mdp.num_states, 0), Err(Error::Usage(_))));
        assert!(matches!(step(&mdp, 0, 6), Err(Error::Usage(_))));
    }

    #[test]
    fn transition_closure() {
        let suite = make_bugfix_suite(5, 4, &SuiteParams { horizon: 6, locate_steps: 2 }).unwrap();
        for mdp in &suite {
            mdp.validate().unwrap();
            for layer in mdp.reachable_by_step() {
                assert!(layer.iter().all(|&s| s < mdp.num_states));
            }
        }
    }

    #[test]
    fn rollout_determinism_and_flags() {
        let mdp = small();
        let uniform = TabularPolicy::zeros(mdp.num_states, mdp.num_actions);
        for seed in 0..200 {
            let a = rollout_seeded(&mdp, &uniform, 1.0, seed).unwrap();
            assert_eq!(a, rollout_seeded(&mdp, &uniform, 1.0, seed).unwrap());
            assert!(a.length <= mdp.horizon);
            assert_eq!(trajectory_flags(&mdp, &a).unwrap(), (a.finished, a.regression_free, a.length));
            if !a.finished || !a.regression_free {
                assert_eq!(a.utility, 0.0);
            }
            if !a.finished {
                assert_eq!(a.length, mdp.horizon);
            }
        }
    }

    fn scripted(mdp: &TabularMdp, kinds: &[ActionKind]) -> Trajectory {
        let mut logits = vec![0.0; mdp.num_states * mdp.num_actions];
        let mut s = mdp.initial_states[0].0;
        for k in kinds {
            let a = kind_index(mdp, *k);
            logits[s * mdp.num_actions + a] = 100.0;
            s = mdp.transitions[s][a].next_state;
        }
        let policy = TabularPolicy::from_logits(mdp.num_states, mdp.num_actions, logits).unwrap();
        rollout_seeded(mdp, &policy, 0.0, 0).unwrap()
    }

    #[test]
    fn flag_examples() {
        use ActionKind::*;
        let mdp = make_bugfix_suite(3, 1, &SuiteParams { horizon: 6, locate_steps: 1 }).unwrap().remove(0);
        let t = scripted(&mdp, &[View, EditGood, Submit]);
        assert_eq!((t.finished, t.regression_free, t.length), (true, true, 3));
        assert_eq!(t.utility, 1.0);
        let t = scripted(&mdp, &[Search, EditBad, Submit]);
        assert_eq!((t.finished, t.regression_free), (true, false));
        assert_eq!(t.utility, 0.0);
        let t = scripted(&mdp, &[Search, EditGood, RunTests, RunTests, RunTests, RunTests]);
        assert_eq!((t.finished, t.length, t.utility), (false, 6, 0.0));
    }

    #[test]
    fn replay_rejects_foreign_trajectories() {
        let suite = make_bugfix_suite(0, 2, &SuiteParams::default()).unwrap();
        let policy = TabularPolicy::zeros(suite[0].num_states, 6);
        let t = rollout_seeded(&suite[0], &policy, 1.0, 1).unwrap();
        assert!(matches!(trajectory_flags(&suite[1], &t), Err(Error::Usage(_))));
    }

    #[test]
    fn completions_are_prefix_free() {
        let mdp = small();
        let all = enumerate_completions(&mdp, mdp.initial_states[0].0).unwrap();
        let submit = mdp.submit_action().unwrap();
        for t in &all {
            let submit_pos = t.steps.iter().position(|s| s.action == submit);
            assert!(submit_pos.is_none_or(|p| p + 1 == t.length));
        }
        assert!(all.iter().filter(|t| t.is_success()).count() >= 2);
    }

    #[test]
    fn json_round_trip() {
        let mdp = make_random_mdp(9, 5, 3, 3).unwrap();
        let back = TabularMdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(mdp, back);
    }
}
