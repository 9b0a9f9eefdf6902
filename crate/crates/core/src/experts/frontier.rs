//! The blindfolded demonstrator: a deterministic frontier explorer that
//! builds a belief map from whatever its blindfold lets through.

use serde::{Deserialize, Serialize};

use crate::env::{ObsLayout, Observation};
use crate::error::{Error, Result};
use crate::grid::{neighbours8, ActionId, Pos};

use super::planner::{Geometry, UNREACHED};

/// Readings above this are taken as "present".
pub const PRESENT_LEVEL: f32 = 0.5;
/// Readings in `(AMBIGUOUS_LEVEL, PRESENT_LEVEL]` make a cell unreadable for
/// this step. Clean renderings are exactly 0 or 1 and never hit the band.
pub const AMBIGUOUS_LEVEL: f32 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Belief {
    Unknown,
    Wall,
    Free,
    Goal,
    Key(u8),
    Lock(u8),
}

impl Belief {
    pub fn code(self) -> char {
        match self {
            Belief::Unknown => '?',
            Belief::Wall => '#',
            Belief::Free => '.',
            Belief::Goal => 'G',
            Belief::Key(c) => (b'a' + c) as char,
            Belief::Lock(c) => (b'A' + c) as char,
        }
    }

    fn passable(self, keys: u8) -> bool {
        match self {
            Belief::Free | Belief::Goal | Belief::Key(_) => true,
            Belief::Lock(c) => keys & (1 << c) != 0,
            Belief::Unknown | Belief::Wall => false,
        }
    }
}

/// What one cell of a (possibly masked or noisy) observation tells us.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reading {
    Hidden,
    Ambiguous,
    Seen(Belief),
}

/// Classify one cell. Content channels are thresholded independently; any
/// value in the ambiguity band makes the whole cell unreadable.
pub fn read_cell(obs: &Observation, p: Pos) -> Reading {
    let layout = obs.layout();
    if obs.at(layout.mask(), p) > PRESENT_LEVEL {
        return Reading::Hidden;
    }
    let mut content = vec![ObsLayout::WALL, ObsLayout::FREE, ObsLayout::GOAL];
    for c in 0..layout.colors {
        content.push(layout.key(c));
        content.push(layout.lock(c));
    }
    if content.iter().any(|ch| {
        let v = obs.at(*ch, p);
        v > AMBIGUOUS_LEVEL && v <= PRESENT_LEVEL
    }) {
        return Reading::Ambiguous;
    }
    let on = |ch: usize| obs.at(ch, p) > PRESENT_LEVEL;
    if on(ObsLayout::WALL) {
        return Reading::Seen(Belief::Wall);
    }
    if let Some(c) = (0..layout.colors).find(|c| on(layout.lock(*c))) {
        return Reading::Seen(Belief::Lock(c));
    }
    if on(ObsLayout::GOAL) {
        return Reading::Seen(Belief::Goal);
    }
    if let Some(c) = (0..layout.colors).find(|c| on(layout.key(*c))) {
        return Reading::Seen(Belief::Key(c));
    }
    if on(ObsLayout::FREE) {
        return Reading::Seen(Belief::Free);
    }
    Reading::Ambiguous
}

/// Internal state of the frontier explorer. This is the demonstrator's
/// representation `Z`: everything its next action depends on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertState {
    pub geometry: (usize, usize, usize),
    pub belief: Vec<Belief>,
    /// Known passable cells with an unknown 8-neighbour, sorted by (row, col).
    pub frontier: Vec<Pos>,
    /// Remaining actions of the committed plan.
    pub plan: Vec<ActionId>,
    pub agent: Option<Pos>,
    pub keys_believed_held: u8,
    pub step_memory: usize,
    /// Where the last action was expected to take the agent.
    expected: Option<Pos>,
}

impl ExpertState {
    pub fn new(height: usize, width: usize, action_count: usize) -> Self {
        Self {
            geometry: (height, width, action_count),
            belief: vec![Belief::Unknown; height * width],
            frontier: Vec::new(),
            plan: Vec::new(),
            agent: None,
            keys_believed_held: 0,
            step_memory: 0,
            expected: None,
        }
    }

    fn geo(&self) -> Geometry {
        Geometry {
            height: self.geometry.0,
            width: self.geometry.1,
            action_count: self.geometry.2,
        }
    }

    pub fn belief_at(&self, p: Pos) -> Belief {
        self.belief[p.row * self.geometry.1 + p.col]
    }

    /// Canonical text form: belief grid row-major, then agent, keys, sorted
    /// frontier, and pending plan.
    pub fn canonical(&self) -> String {
        let mut s: String = self.belief.iter().map(|b| b.code()).collect();
        match self.agent {
            Some(p) => s.push_str(&format!("|@{p}")),
            None => s.push_str("|@-"),
        }
        s.push_str(&format!("|k{}|f", self.keys_believed_held));
        for p in &self.frontier {
            s.push_str(&format!("{p};"));
        }
        s.push_str("|p");
        for a in &self.plan {
            s.push_str(&a.0.to_string());
        }
        s
    }

    fn passable(&self, p: Pos) -> bool {
        self.belief_at(p).passable(self.keys_believed_held)
    }

    /// Account for an action taken on the expert's behalf: expect its
    /// outcome and drop the plan it may have broken.
    pub fn redirect(&mut self, taken: ActionId) {
        let Some(agent) = self.agent else { return };
        let expected = self.geo().step(agent, taken);
        if expected != self.expected {
            self.plan.clear();
        }
        self.expected = expected;
    }

    /// Fold a new view into the belief. Returns whether any cell was revealed.
    fn merge(&mut self, view: &Observation) -> Result<bool> {
        let (h, w, _) = self.geometry;
        if view.height != h || view.width != w {
            return Err(Error::Shape(format!(
                "view is {}x{}, expert expects {h}x{w}",
                view.height, view.width
            )));
        }
        let agent = locate_agent(view)
            .ok_or_else(|| Error::Usage("agent not visible in the expert's view".into()))?;

        // A move that did not happen means the target was not enterable.
        if let Some(expected) = self.expected.take() {
            if expected != agent {
                let i = expected.row * w + expected.col;
                match self.belief[i] {
                    Belief::Lock(c) => self.keys_believed_held &= !(1 << c),
                    _ => self.belief[i] = Belief::Wall,
                }
                self.plan.clear();
            }
        }

        let mut revealed = false;
        for r in 0..h {
            for c in 0..w {
                let p = Pos::new(r, c);
                if p == agent {
                    continue;
                }
                let i = r * w + c;
                let Reading::Seen(b) = read_cell(view, p) else { continue };
                // Static terrain is re-read every step, so a corrupted
                // reading is corrected by the next clear one. Clean views
                // never disagree with an earlier reading.
                let terrain = |x: Belief| matches!(x, Belief::Wall | Belief::Free | Belief::Goal);
                let current = self.belief[i];
                if current == Belief::Unknown || (current != b && terrain(current) && terrain(b)) {
                    self.belief[i] = b;
                    revealed = true;
                }
            }
        }

        // The agent's own cell is known from having entered it.
        let i = agent.row * w + agent.col;
        match self.belief[i] {
            Belief::Key(c) => self.keys_believed_held |= 1 << c,
            Belief::Lock(c) => self.keys_believed_held |= 1 << c,
            _ => {}
        }
        if self.belief[i] != Belief::Free {
            revealed |= self.belief[i] == Belief::Unknown;
            self.belief[i] = Belief::Free;
        }
        self.agent = Some(agent);
        self.refresh_frontier();
        Ok(revealed)
    }

    fn refresh_frontier(&mut self) {
        let (h, w, _) = self.geometry;
        self.frontier = (0..h)
            .flat_map(|r| (0..w).map(move |c| Pos::new(r, c)))
            .filter(|p| {
                self.passable(*p)
                    && neighbours8(*p, h, w).any(|n| self.belief_at(n) == Belief::Unknown)
            })
            .collect();
    }

    fn path_to(&self, from: Pos, target: Pos) -> Option<Vec<ActionId>> {
        self.geo().shortest_path(from, target, |p| self.passable(p))
    }

    fn replan(&mut self, agent: Pos) -> Result<()> {
        let geo = self.geo();
        let dist = geo.distances_from(agent, |p| self.passable(p));
        let reachable = |p: &Pos| dist[geo.idx(*p)] != UNREACHED;
        let (h, w, _) = self.geometry;
        let cells = || (0..h).flat_map(move |r| (0..w).map(move |c| Pos::new(r, c)));

        let goal = cells().find(|p| self.belief_at(*p) == Belief::Goal && reachable(p));
        let key = || {
            cells()
                .filter(|p| match self.belief_at(*p) {
                    Belief::Key(c) => self.keys_believed_held & (1 << c) == 0 && reachable(p),
                    _ => false,
                })
                .min_by_key(|p| (dist[geo.idx(*p)], *p))
        };
        let frontier = || {
            self.frontier
                .iter()
                .copied()
                .filter(|p| *p != agent && reachable(p))
                .min_by_key(|p| (dist[geo.idx(*p)], *p))
        };
        let target = goal.or_else(key).or_else(frontier);
        match target {
            Some(t) => {
                self.plan = self
                    .path_to(agent, t)
                    .ok_or_else(|| Error::Planning(format!("believed path to {t} vanished")))?;
            }
            None if self.frontier.contains(&agent) => {
                // Only our own cell borders the unknown, but this step's view
                // did not resolve it: shuffle to the first open neighbour for
                // another look.
                // Failing that, probe an unread neighbour; a bump marks it.
                let a = ActionId::all(geo.action_count)
                    .find(|a| geo.step(agent, *a).is_some_and(|n| self.passable(n)))
                    .or_else(|| {
                        ActionId::all(geo.action_count).find(|a| {
                            geo.step(agent, *a)
                                .is_some_and(|n| self.belief_at(n) == Belief::Unknown)
                        })
                    })
                    .ok_or(Error::ExplorationExhausted)?;
                self.plan = vec![a];
            }
            None => return Err(Error::ExplorationExhausted),
        }
        Ok(())
    }
}

/// The cell with the strongest agent reading (first in row-major order on ties).
pub fn locate_agent(view: &Observation) -> Option<Pos> {
    let mut best: Option<(f32, Pos)> = None;
    for r in 0..view.height {
        for c in 0..view.width {
            let p = Pos::new(r, c);
            let v = view.at(ObsLayout::AGENT, p);
            if v > 0.0 && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, p));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// One decision of the frontier explorer: merge the view, then follow the
/// committed plan unless something new was revealed, in which case replan
/// toward (in order) a reachable believed goal, the nearest reachable key
/// not yet held, or the nearest reachable frontier cell.
pub fn blindfolded_act(state: &ExpertState, view: &Observation) -> Result<(ActionId, ExpertState)> {
    let mut next = state.clone();
    let revealed = next.merge(view)?;
    let agent = next.agent.expect("merge sets the agent");
    let geo = next.geo();
    let plan_ok = next
        .plan
        .first()
        .is_some_and(|a| geo.step(agent, *a).is_some_and(|n| next.passable(n)));
    if revealed || !plan_ok {
        next.replan(agent)?;
    }
    let action = next.plan.remove(0);
    next.expected = geo.step(agent, action);
    next.step_memory += 1;
    Ok((action, next))
}
