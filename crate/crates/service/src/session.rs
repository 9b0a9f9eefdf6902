use bldc_core::datapipe::Step;
use bldc_core::env::{self, reset_with_horizon};
use bldc_core::{
    ActionId, BlindfoldSpec, Dataset, EnvState, ExpertKind, Family, Observation,
    TaskSpec, Trajectory,
};
use serde::Serialize;

use crate::error::ApiError;

#[derive(Debug, Clone, Serialize)]
pub struct LevelResult {
    pub level_index: usize,
    pub task_seed: u64,
    pub success: bool,
    pub steps: usize,
}

/// One participant working through an ordered list of levels. Exactly one
/// episode is live until the list is exhausted.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub participant: String,
    pub split_id: String,
    pub split_seed: u64,
    pub family: Family,
    pub blindfold: BlindfoldSpec,
    pub horizon: usize,
    levels: Vec<TaskSpec>,
    level: usize,
    env: EnvState,
    /// Unmasked rendering of the current state.
    obs: Observation,
    buffer: Vec<Step>,
    results: Vec<LevelResult>,
}

/// A finished episode, ready to be written.
pub struct Finished {
    pub level_index: usize,
    pub task_seed: u64,
    pub dataset: Dataset,
}

pub struct Advance {
    pub reward: f64,
    pub done: bool,
    pub success: bool,
    pub finished: Option<Finished>,
}

impl Session {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: String,
        participant: String,
        split_id: String,
        split_seed: u64,
        family: Family,
        blindfold: BlindfoldSpec,
        levels: Vec<TaskSpec>,
        horizon: usize,
    ) -> Result<Session, ApiError> {
        blindfold.validate()?;
        if levels.is_empty() {
            return Err(ApiError::BadRequest("session needs at least one level".into()));
        }
        if horizon == 0 {
            return Err(ApiError::BadRequest("horizon must be positive".into()));
        }
        let (env, obs) = reset_with_horizon(&levels[0], horizon);
        Ok(Session {
            id,
            participant,
            split_id,
            split_seed,
            family,
            blindfold,
            horizon,
            levels,
            level: 0,
            env,
            obs,
            buffer: Vec::new(),
            results: Vec::new(),
        })
    }

    pub fn level_index(&self) -> usize {
        self.level
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn complete(&self) -> bool {
        self.level >= self.levels.len()
    }

    pub fn step(&self) -> usize {
        self.env.step
    }

    pub fn results(&self) -> &[LevelResult] {
        &self.results
    }

    pub fn current_task(&self) -> Option<&TaskSpec> {
        self.levels.get(self.level)
    }

    /// What the participant is allowed to see. Noise draws are keyed on
    /// (task, level, step), so re-fetching the view never changes it.
    pub fn masked_observation(&self) -> Result<Observation, ApiError> {
        let mut rng =
            self.blindfold.step_rng(self.env.task_seed, self.level as u64, self.env.step);
        Ok(self.blindfold.apply(&self.obs, self.env.agent, &mut rng)?)
    }

    pub fn act(&mut self, action: u8) -> Result<Advance, ApiError> {
        if self.complete() {
            return Err(ApiError::Conflict("session complete".into()));
        }
        let action = ActionId(action);
        if action.index() >= self.family.action_count() {
            return Err(ApiError::BadRequest(format!(
                "action {} out of range for {} (0..{})",
                action.0,
                self.family,
                self.family.action_count()
            )));
        }
        let (next, res) = env::step(&self.env, action)?;
        self.buffer.push(Step {
            obs: std::mem::replace(&mut self.obs, res.obs),
            action,
            reward: res.reward,
            done: res.done,
        });
        self.env = next;
        let finished = res.done.then(|| self.finish(res.success));
        Ok(Advance { reward: res.reward, done: res.done, success: res.success, finished })
    }

    /// Close the live episode and load the next level, if any.
    fn finish(&mut self, success: bool) -> Finished {
        let task = &self.levels[self.level];
        let steps = std::mem::take(&mut self.buffer);
        self.results.push(LevelResult {
            level_index: self.level,
            task_seed: task.seed,
            success,
            steps: steps.len(),
        });
        let traj = Trajectory {
            family: self.family,
            task_seed: task.seed,
            expert: ExpertKind::Human,
            blindfold: self.blindfold.clone(),
            success,
            steps,
        };
        let done = Finished {
            level_index: self.level,
            task_seed: task.seed,
            dataset: Dataset::new(vec![traj], Some(self.split_seed)),
        };
        self.level += 1;
        if let Some(next) = self.levels.get(self.level) {
            let (env, obs) = reset_with_horizon(next, self.horizon);
            self.env = env;
            self.obs = obs;
        }
        done
    }
}
