//! Scripted demonstrators.

mod bayes;
mod frontier;
mod informed;
mod planner;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bayes::{bayes_exact_act, BayesExpert, BayesLimits};
pub use frontier::{
    blindfolded_act, locate_agent, read_cell, Belief, ExpertState, Reading, AMBIGUOUS_LEVEL,
    PRESENT_LEVEL,
};
pub use informed::{informed_act, informed_objective};
pub use planner::{Geometry, UNREACHED};

use crate::blindfold::BlindfoldSpec;
use crate::datapipe::{Step, Trajectory};
use crate::env::{reset_with_horizon, step, EnvState, Observation};
use crate::error::{Error, Result};
use crate::grid::{ActionId, Pos};
use crate::worldgen::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    Informed,
    Blindfolded,
    BayesExact,
    /// A person playing through the session service.
    Human,
}

impl ExpertKind {
    pub fn code(self) -> u8 {
        match self {
            ExpertKind::Informed => 0,
            ExpertKind::Blindfolded => 1,
            ExpertKind::BayesExact => 2,
            ExpertKind::Human => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ExpertKind::Informed),
            1 => Ok(ExpertKind::Blindfolded),
            2 => Ok(ExpertKind::BayesExact),
            3 => Ok(ExpertKind::Human),
            c => Err(Error::Format(format!("unknown expert code {c}"))),
        }
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Informed => "informed",
            ExpertKind::Blindfolded => "blindfolded",
            ExpertKind::BayesExact => "bayes_exact",
            ExpertKind::Human => "human",
        })
    }
}

impl FromStr for ExpertKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "informed" => Ok(ExpertKind::Informed),
            "blindfolded" | "bf" => Ok(ExpertKind::Blindfolded),
            "bayes_exact" | "bayes" => Ok(ExpertKind::BayesExact),
            "human" => Ok(ExpertKind::Human),
            other => Err(Error::Config(format!("unknown expert kind '{other}'"))),
        }
    }
}

/// Shortest move count from `from` to `to` holding `keys`, treating locks of
/// unheld colors as walls. Keys are not picked up along the way.
pub fn bfs_distance(task: &TaskSpec, from: Pos, to: Pos, keys: u8) -> Option<usize> {
    let geo = Geometry {
        height: task.height,
        width: task.width,
        action_count: task.action_count(),
    };
    let d = geo.distances_from(from, |p| task.cell(p).passable(keys))[geo.idx(to)];
    (d != UNREACHED).then_some(d)
}

/// A demonstrator driven one step at a time. `state` is the true environment
/// state (only the informed expert may look at it); `view` is the
/// blindfolded rendering.
pub trait Demonstrator {
    fn kind(&self) -> ExpertKind;
    fn act(&mut self, state: &EnvState, view: &Observation) -> Result<ActionId>;
    /// Canonical serialization of the internal representation the next
    /// action depends on.
    fn canonical_state(&self) -> String;
    /// The environment executed `taken` instead of the action just returned
    /// by `act` (someone else is driving).
    fn overridden(&mut self, _taken: ActionId) {}
}

/// Full-information shortest-path planner. Its internal state is the true
/// environment state.
#[derive(Debug, Default, Clone)]
pub struct InformedExpert {
    last: Option<EnvState>,
}

impl InformedExpert {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) fn canonical_env(state: &EnvState) -> String {
    let grid: String = state.cells.iter().map(|c| c.code()).collect();
    format!("{grid}|@{}|k{}", state.agent, state.keys_held)
}

impl Demonstrator for InformedExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Informed
    }

    fn act(&mut self, state: &EnvState, _view: &Observation) -> Result<ActionId> {
        self.last = Some(state.clone());
        informed_act(state)
    }

    fn canonical_state(&self) -> String {
        self.last.as_ref().map(canonical_env).unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct FrontierExpert {
    pub state: ExpertState,
}

impl FrontierExpert {
    pub fn new(height: usize, width: usize, action_count: usize) -> Self {
        Self {
            state: ExpertState::new(height, width, action_count),
        }
    }

    pub fn for_task(task: &TaskSpec) -> Self {
        Self::new(task.height, task.width, task.action_count())
    }
}

impl Demonstrator for FrontierExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Blindfolded
    }

    fn act(&mut self, _state: &EnvState, view: &Observation) -> Result<ActionId> {
        let (a, next) = blindfolded_act(&self.state, view)?;
        self.state = next;
        Ok(a)
    }

    fn canonical_state(&self) -> String {
        self.state.canonical()
    }

    fn overridden(&mut self, taken: ActionId) {
        self.state.redirect(taken);
    }
}

impl Demonstrator for BayesExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::BayesExact
    }

    fn act(&mut self, _state: &EnvState, view: &Observation) -> Result<ActionId> {
        BayesExpert::act(self, view)
    }

    fn canonical_state(&self) -> String {
        self.canonical()
    }

    fn overridden(&mut self, taken: ActionId) {
        BayesExpert::overridden(self, taken);
    }
}

/// Outcome of one scripted episode. Both arms carry the logged trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum Demonstration {
    Success(Trajectory),
    Failure(Trajectory),
}

impl Demonstration {
    pub fn is_success(&self) -> bool {
        matches!(self, Demonstration::Success(_))
    }

    pub fn trajectory(&self) -> &Trajectory {
        match self {
            Demonstration::Success(t) | Demonstration::Failure(t) => t,
        }
    }

    pub fn into_trajectory(self) -> Trajectory {
        match self {
            Demonstration::Success(t) | Demonstration::Failure(t) => t,
        }
    }
}

/// Roll a scripted expert for at most `max_steps` steps, logging unmasked
/// observations. `episode` selects the blindfold's noise stream, so repeated
/// demonstrations on one task differ only through it.
///
/// The exact Bayes expert needs a task set and must go through
/// [`demonstrate_with`].
pub fn demonstrate(
    task: &TaskSpec,
    kind: ExpertKind,
    blindfold: &BlindfoldSpec,
    max_steps: usize,
    episode: u64,
) -> Result<Demonstration> {
    match kind {
        ExpertKind::Informed => {
            demonstrate_with(task, &mut InformedExpert::new(), blindfold, max_steps, episode)
        }
        ExpertKind::Blindfolded => demonstrate_with(
            task,
            &mut FrontierExpert::for_task(task),
            blindfold,
            max_steps,
            episode,
        ),
        ExpertKind::BayesExact => Err(Error::Unsupported(
            "the exact Bayes expert needs its task set; use demonstrate_with".into(),
        )),
        ExpertKind::Human => Err(Error::Unsupported(
            "human demonstrations are collected through the session service".into(),
        )),
    }
}

pub fn demonstrate_with(
    task: &TaskSpec,
    expert: &mut dyn Demonstrator,
    blindfold: &BlindfoldSpec,
    max_steps: usize,
    episode: u64,
) -> Result<Demonstration> {
    blindfold.validate()?;
    let (mut state, mut obs) = reset_with_horizon(task, max_steps);
    let mut steps = Vec::new();
    while !state.done {
        let mut rng = blindfold.step_rng(task.seed, episode, state.step);
        let view = blindfold.apply(&obs, state.agent, &mut rng)?;
        let action = match expert.act(&state, &view) {
            Ok(a) => a,
            // Nothing left to explore: the episode ends as a failure.
            Err(Error::ExplorationExhausted) => break,
            Err(e) => return Err(e),
        };
        let (next, res) = step(&state, action)?;
        steps.push(Step {
            obs,
            action,
            reward: res.reward,
            done: res.done,
        });
        obs = res.obs;
        state = next;
    }
    let traj = Trajectory {
        family: task.family,
        task_seed: task.seed,
        expert: expert.kind(),
        blindfold: blindfold.clone(),
        success: state.success,
        steps,
    };
    Ok(if state.success {
        Demonstration::Success(traj)
    } else {
        Demonstration::Failure(traj)
    })
}
