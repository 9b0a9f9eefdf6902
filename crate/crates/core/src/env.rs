//! Deterministic MDP semantics for a [`TaskSpec`]: transitions, sparse
//! reward, horizon, and the symbolic top-down observation.

use serde::{Deserialize, Serialize};

use crate::blindfold::BlindfoldSpec;
use crate::error::{Error, Result};
use crate::grid::{ActionId, Pos};
use crate::rng::SplitMix64;
use crate::worldgen::{CellKind, Family, TaskSpec};

/// Channel layout of an observation for a level with `colors` key colors.
///
/// `wall, free, agent, goal, key[c].., lock[c].., held[c].., mask`
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObsLayout {
    pub colors: u8,
}

impl ObsLayout {
    pub const WALL: usize = 0;
    pub const FREE: usize = 1;
    pub const AGENT: usize = 2;
    pub const GOAL: usize = 3;

    pub fn new(colors: u8) -> Self {
        Self { colors }
    }

    pub fn key(self, c: u8) -> usize {
        4 + c as usize
    }

    pub fn lock(self, c: u8) -> usize {
        4 + self.colors as usize + c as usize
    }

    pub fn held(self, c: u8) -> usize {
        4 + 2 * self.colors as usize + c as usize
    }

    /// Set to 1 on cells hidden by a blindfold.
    pub fn mask(self) -> usize {
        4 + 3 * self.colors as usize
    }

    pub fn channels(self) -> usize {
        5 + 3 * self.colors as usize
    }
}

/// Channel-major grid of values in `[0, 1]`: `data[(ch * height + row) * width + col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Observation {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, ch: usize, p: Pos) -> f32 {
        self.data[(ch * self.height + p.row) * self.width + p.col]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, p: Pos, v: f32) {
        self.data[(ch * self.height + p.row) * self.width + p.col] = v;
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout::new(((self.channels - 5) / 3) as u8)
    }

    /// Cells whose agent channel is set.
    pub fn agent_cells(&self) -> Vec<Pos> {
        let mut out = Vec::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let p = Pos::new(r, c);
                if self.at(ObsLayout::AGENT, p) > 0.5 {
                    out.push(p);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub family: Family,
    pub task_seed: u64,
    pub width: usize,
    pub height: usize,
    pub colors: u8,
    /// Current layout; keys and opened locks are cleared to `Free`.
    pub cells: Vec<CellKind>,
    pub agent: Pos,
    /// Bitmask over key colors.
    pub keys_held: u8,
    pub step: usize,
    pub horizon: usize,
    pub done: bool,
    pub success: bool,
}

impl EnvState {
    pub fn cell(&self, p: Pos) -> CellKind {
        self.cells[p.row * self.width + p.col]
    }

    pub fn action_count(&self) -> usize {
        self.family.action_count()
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout::new(self.colors)
    }

    /// Where `action` would take the agent, ignoring the step counter.
    pub fn target(&self, action: ActionId) -> Option<Pos> {
        let (dr, dc) = action.delta();
        let next = self.agent.offset(dr, dc, self.height, self.width)?;
        self.cell(next).passable(self.keys_held).then_some(next)
    }

    pub fn render(&self) -> Observation {
        let layout = self.layout();
        let mut obs = Observation::zeros(layout.channels(), self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let p = Pos::new(r, c);
                match self.cell(p) {
                    CellKind::Wall => obs.set(ObsLayout::WALL, p, 1.0),
                    CellKind::Free => obs.set(ObsLayout::FREE, p, 1.0),
                    CellKind::Goal => {
                        obs.set(ObsLayout::FREE, p, 1.0);
                        obs.set(ObsLayout::GOAL, p, 1.0);
                    }
                    CellKind::Key(k) => {
                        obs.set(ObsLayout::FREE, p, 1.0);
                        obs.set(layout.key(k), p, 1.0);
                    }
                    CellKind::Lock(k) => obs.set(layout.lock(k), p, 1.0),
                }
                for k in 0..self.colors {
                    if self.keys_held & (1 << k) != 0 {
                        obs.set(layout.held(k), p, 1.0);
                    }
                }
            }
        }
        obs.set(ObsLayout::AGENT, self.agent, 1.0);
        obs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

pub fn reset(task: &TaskSpec) -> (EnvState, Observation) {
    reset_with_horizon(task, task.family.default_horizon())
}

pub fn reset_with_horizon(task: &TaskSpec, horizon: usize) -> (EnvState, Observation) {
    let state = EnvState {
        family: task.family,
        task_seed: task.seed,
        width: task.width,
        height: task.height,
        colors: task.color_count,
        cells: task.cells.clone(),
        agent: task.start,
        keys_held: 0,
        step: 0,
        horizon,
        done: false,
        success: false,
    };
    let obs = state.render();
    (state, obs)
}

/// Pure transition. Blocked moves leave the agent in place but still use a step.
pub fn step(state: &EnvState, action: ActionId) -> Result<(EnvState, StepResult)> {
    if state.done {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    if action.index() >= state.action_count() {
        return Err(Error::Usage(format!(
            "action {} out of range for {}",
            action.0, state.family
        )));
    }
    let mut next = state.clone();
    let mut reward = 0.0;
    if let Some(target) = state.target(action) {
        next.agent = target;
        let idx = target.row * next.width + target.col;
        match next.cells[idx] {
            CellKind::Key(k) => {
                next.keys_held |= 1 << k;
                next.cells[idx] = CellKind::Free;
            }
            CellKind::Lock(_) => next.cells[idx] = CellKind::Free,
            CellKind::Goal => {
                next.success = true;
                next.done = true;
                reward = 1.0;
            }
            _ => {}
        }
    }
    next.step += 1;
    if !next.done && next.step >= next.horizon {
        next.done = true;
    }
    let result = StepResult {
        obs: next.render(),
        reward,
        done: next.done,
        success: next.success,
    };
    Ok((next, result))
}

/// The demonstrator's view of the current state. Never stored in datasets.
pub fn render_masked_for_expert(
    state: &EnvState,
    blindfold: &BlindfoldSpec,
    rng: &mut SplitMix64,
) -> Result<Observation> {
    blindfold.apply(&state.render(), state.agent, rng)
}

/// Replay an action sequence from reset, returning every observation
/// (including the initial one) and the final state.
pub fn replay(
    task: &TaskSpec,
    horizon: usize,
    actions: &[ActionId],
) -> Result<(Vec<Observation>, EnvState)> {
    let (mut state, obs) = reset_with_horizon(task, horizon);
    let mut all = vec![obs];
    for a in actions {
        let (next, res) = step(&state, *a)?;
        all.push(res.obs);
        state = next;
    }
    Ok((all, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DOWN, LEFT, RIGHT, UP};
    use crate::worldgen::generate_task;

    fn corridor() -> TaskSpec {
        TaskSpec::from_ascii(Family::Maze, 0, &["#####", "#S.G#", "#####"]).unwrap()
    }

    #[test]
    fn reset_marks_start_and_is_repeatable() {
        let t = generate_task(Family::Maze, 9, 9, 3).unwrap();
        let (s, o) = reset(&t);
        assert_eq!(o.agent_cells(), vec![t.start]);
        assert_eq!(s.step, 0);
        assert_eq!(reset(&t).1, o);
    }

    #[test]
    fn keylock_reset_has_no_held_keys() {
        let t = generate_task(Family::Keylock, 9, 9, 3).unwrap();
        let (_, o) = reset(&t);
        let l = o.layout();
        for p in t.positions() {
            assert_eq!(o.at(l.held(0), p), 0.0);
        }
        assert_eq!(o.channels, 8);
    }

    #[test]
    fn reaching_goal_gives_reward_and_ends() {
        let t = corridor();
        let (s, _) = reset(&t);
        let (s, r) = step(&s, RIGHT).unwrap();
        assert_eq!(r.reward, 0.0);
        let (s, r) = step(&s, RIGHT).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(r.done && r.success && s.done);
        assert!(matches!(step(&s, LEFT), Err(Error::Usage(_))));
    }

    #[test]
    fn wall_bump_consumes_step() {
        let t = corridor();
        let (s, o) = reset(&t);
        let (s2, r) = step(&s, UP).unwrap();
        assert_eq!(s2.agent, s.agent);
        assert_eq!(s2.step, 1);
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.obs, o);
        let (s3, _) = step(&s2, DOWN).unwrap();
        assert_eq!(s3.agent, s.agent);
    }

    #[test]
    fn timeout_at_horizon() {
        let t = corridor();
        let (mut s, _) = reset_with_horizon(&t, 3);
        for i in 0..3 {
            let (n, r) = step(&s, LEFT).unwrap();
            assert_eq!(r.done, i == 2);
            assert!(!r.success);
            s = n;
        }
    }

    #[test]
    fn lock_blocks_until_key_is_held() {
        let t = TaskSpec::from_ascii(
            Family::Keylock,
            0,
            &["#######", "#a#####", "#S.A.G#", "#######"],
        )
        .unwrap();
        let (s, _) = reset(&t);
        let (s, _) = step(&s, RIGHT).unwrap();
        let (blocked, _) = step(&s, RIGHT).unwrap();
        assert_eq!(blocked.agent, s.agent);
        let (s, _) = step(&blocked, LEFT).unwrap();
        let (s, r) = step(&s, UP).unwrap();
        assert_eq!(s.keys_held, 1);
        assert_eq!(s.cell(Pos::new(1, 1)), CellKind::Free);
        assert_eq!(r.obs.at(r.obs.layout().held(0), Pos::new(0, 0)), 1.0);
        let (s, _) = step(&s, DOWN).unwrap();
        let (s, _) = step(&s, RIGHT).unwrap();
        let (s, _) = step(&s, RIGHT).unwrap();
        assert_eq!(s.agent, Pos::new(2, 3));
        assert_eq!(s.cell(Pos::new(2, 3)), CellKind::Free);
    }

    #[test]
    fn out_of_range_action_is_rejected() {
        let (s, _) = reset(&corridor());
        assert!(step(&s, ActionId(4)).is_err());
    }
}
