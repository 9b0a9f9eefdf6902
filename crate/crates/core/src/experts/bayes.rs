//! Exact Bayes-optimal demonstrator for tiny enumerable task sets.
//!
//! The posterior is the prior restricted to tasks whose masked observation
//! history matches what was seen. Actions minimize the expected number of
//! steps to the goal, where an episode that misses the horizon costs
//! `horizon + 1`; the minimum is found by exhaustive expectimax over
//! (posterior support, per-task state, steps left), memoized.

use std::collections::HashMap;

use crate::blindfold::BlindfoldSpec;
use crate::env::{reset_with_horizon, step, EnvState, Observation};
use crate::error::{Error, Result};
use crate::grid::{ActionId, Pos};
use crate::rng::SplitMix64;
use crate::worldgen::{CellKind, TaskSpec};

#[derive(Debug, Clone, Copy)]
pub struct BayesLimits {
    pub max_tasks: usize,
    pub max_side: usize,
    pub max_horizon: usize,
}

impl Default for BayesLimits {
    fn default() -> Self {
        Self {
            max_tasks: 16,
            max_side: 7,
            max_horizon: 30,
        }
    }
}

type StateKey = (Pos, u8, Vec<CellKind>);
type NodeKey = (u32, usize, Vec<StateKey>);

pub struct BayesPlanner {
    prior: Vec<f64>,
    blindfold: BlindfoldSpec,
    action_count: usize,
    memo: HashMap<NodeKey, f64>,
}

fn view_of(blindfold: &BlindfoldSpec, state: &EnvState) -> Result<Observation> {
    // Only deterministic blindfolds reach here; the generator is never drawn.
    blindfold.apply(&state.render(), state.agent, &mut SplitMix64::new(0))
}

fn view_key(obs: &Observation) -> Vec<u32> {
    obs.data.iter().map(|v| v.to_bits()).collect()
}

impl BayesPlanner {
    fn key(mask: u32, left: usize, states: &[EnvState]) -> NodeKey {
        let parts = (0..states.len())
            .filter(|t| mask & (1 << t) != 0)
            .map(|t| (states[t].agent, states[t].keys_held, states[t].cells.clone()))
            .collect();
        (mask, left, parts)
    }

    /// Expected steps-to-goal from this node under optimal play.
    fn value(&mut self, mask: u32, left: usize, states: &[EnvState]) -> Result<f64> {
        if left == 0 {
            return Ok(1.0);
        }
        let key = Self::key(mask, left, states);
        if let Some(v) = self.memo.get(&key) {
            return Ok(*v);
        }
        let mut best = f64::INFINITY;
        for a in ActionId::all(self.action_count) {
            let q = self.q_value(mask, left, states, a)?;
            if q < best {
                best = q;
            }
        }
        self.memo.insert(key, best);
        Ok(best)
    }

    fn q_value(&mut self, mask: u32, left: usize, states: &[EnvState], a: ActionId) -> Result<f64> {
        let mut total_w = 0.0;
        let mut acc = 0.0;
        let mut next_states = states.to_vec();
        let mut groups: Vec<(Vec<u32>, u32, f64)> = Vec::new();
        for t in 0..states.len() {
            if mask & (1 << t) == 0 {
                continue;
            }
            let w = self.prior[t];
            total_w += w;
            let (ns, res) = step(&states[t], a)?;
            if res.success {
                acc += w;
            } else {
                let k = view_key(&view_of(&self.blindfold, &ns)?);
                match groups.iter_mut().find(|g| g.0 == k) {
                    Some(g) => {
                        g.1 |= 1 << t;
                        g.2 += w;
                    }
                    None => groups.push((k, 1 << t, w)),
                }
            }
            next_states[t] = ns;
        }
        for (_, sub, w) in groups {
            acc += w * (1.0 + self.value(sub, left - 1, &next_states)?);
        }
        Ok(acc / total_w)
    }
}

/// Bayes-optimal demonstrator over a fixed task set.
pub struct BayesExpert {
    planner: BayesPlanner,
    horizon: usize,
    states: Vec<EnvState>,
    alive: u32,
    last: Option<ActionId>,
    steps: usize,
}

impl BayesExpert {
    pub fn new(
        tasks: &[TaskSpec],
        prior: &[f64],
        blindfold: &BlindfoldSpec,
        horizon: usize,
        limits: BayesLimits,
    ) -> Result<Self> {
        if tasks.is_empty() || tasks.len() != prior.len() {
            return Err(Error::Usage("task set and prior must be nonempty and aligned".into()));
        }
        if tasks.len() > limits.max_tasks.min(32) {
            return Err(Error::Capacity(format!(
                "{} tasks exceeds the exact-planning cap of {}",
                tasks.len(),
                limits.max_tasks
            )));
        }
        if tasks.iter().any(|t| t.width.max(t.height) > limits.max_side) {
            return Err(Error::Capacity(format!(
                "grids larger than {0}x{0} are not enumerable",
                limits.max_side
            )));
        }
        if horizon > limits.max_horizon {
            return Err(Error::Capacity(format!(
                "horizon {horizon} exceeds {}",
                limits.max_horizon
            )));
        }
        if blindfold.is_stochastic() {
            return Err(Error::Unsupported(
                "exact Bayes planning needs a deterministic blindfold".into(),
            ));
        }
        let first = &tasks[0];
        if tasks
            .iter()
            .any(|t| (t.family, t.width, t.height, t.color_count) != (first.family, first.width, first.height, first.color_count))
        {
            return Err(Error::Usage("task set mixes geometries".into()));
        }
        let states = tasks
            .iter()
            .map(|t| reset_with_horizon(t, usize::MAX).0)
            .collect();
        Ok(Self {
            planner: BayesPlanner {
                prior: prior.to_vec(),
                blindfold: blindfold.clone(),
                action_count: first.action_count(),
                memo: HashMap::new(),
            },
            horizon,
            states,
            alive: (((1u64 << tasks.len()) - 1) & u32::MAX as u64) as u32,
            last: None,
            steps: 0,
        })
    }

    /// Tasks still consistent with the observed history.
    pub fn posterior_support(&self) -> u32 {
        self.alive
    }

    pub fn canonical(&self) -> String {
        let agent = (0..self.states.len())
            .find(|t| self.alive & (1 << t) != 0)
            .map(|t| self.states[t].agent.to_string())
            .unwrap_or_default();
        format!("{:08x}|@{agent}", self.alive)
    }

    /// Simulate `taken` rather than the last chosen action on the next step.
    pub fn overridden(&mut self, taken: ActionId) {
        if self.last.is_some() {
            self.last = Some(taken);
        }
    }

    /// Condition on the newest masked observation and return the
    /// Bayes-optimal action.
    pub fn act(&mut self, view: &Observation) -> Result<ActionId> {
        if let Some(a) = self.last.take() {
            for t in 0..self.states.len() {
                if self.alive & (1 << t) != 0 {
                    self.states[t] = step(&self.states[t], a)?.0;
                }
            }
            self.steps += 1;
        }
        let seen = view_key(view);
        let mut alive = 0u32;
        for t in 0..self.states.len() {
            if self.alive & (1 << t) != 0
                && view_key(&view_of(&self.planner.blindfold, &self.states[t])?) == seen
            {
                alive |= 1 << t;
            }
        }
        if alive == 0 {
            return Err(Error::Usage(
                "observation inconsistent with every task in the set".into(),
            ));
        }
        self.alive = alive;
        let left = self.horizon.saturating_sub(self.steps).max(1);
        let mut best = (f64::INFINITY, ActionId(0));
        for a in ActionId::all(self.planner.action_count) {
            let q = self.planner.q_value(alive, left, &self.states, a)?;
            // Strict improvement keeps the lowest action index on ties.
            if q < best.0 - 1e-12 {
                best = (q, a);
            }
        }
        self.last = Some(best.1);
        Ok(best.1)
    }
}

/// One-shot form: the Bayes-optimal first action for a task set and prior
/// after observing `view` at reset.
pub fn bayes_exact_act(
    tasks: &[TaskSpec],
    prior: &[f64],
    blindfold: &BlindfoldSpec,
    horizon: usize,
    view: &Observation,
) -> Result<ActionId> {
    BayesExpert::new(tasks, prior, blindfold, horizon, BayesLimits::default())?.act(view)
}
