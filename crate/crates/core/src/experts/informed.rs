use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::grid::{ActionId, Pos};
use crate::worldgen::CellKind;

use super::planner::{Geometry, UNREACHED};

fn geometry(state: &EnvState) -> Geometry {
    Geometry {
        height: state.height,
        width: state.width,
        action_count: state.action_count(),
    }
}

/// Current objective of the fully-informed planner: the goal when reachable
/// with the keys in hand, else the nearest reachable key whose lock is still
/// closed (ties by row, then column).
pub fn informed_objective(state: &EnvState) -> Result<Pos> {
    let geo = geometry(state);
    let keys = state.keys_held;
    let pass = |p: Pos| state.cell(p).passable(keys);
    let dist = geo.distances_from(state.agent, pass);
    let goal = (0..state.height)
        .flat_map(|r| (0..state.width).map(move |c| Pos::new(r, c)))
        .find(|p| state.cell(*p) == CellKind::Goal)
        .ok_or_else(|| Error::Planning("level has no goal".into()))?;
    if dist[geo.idx(goal)] != UNREACHED {
        return Ok(goal);
    }
    let closed_locks: u8 = state
        .cells
        .iter()
        .filter_map(|c| match c {
            CellKind::Lock(k) => Some(1u8 << k),
            _ => None,
        })
        .fold(0, |a, b| a | b);
    (0..state.height)
        .flat_map(|r| (0..state.width).map(move |c| Pos::new(r, c)))
        .filter(|p| match state.cell(*p) {
            CellKind::Key(k) => closed_locks & (1 << k) != 0 && dist[geo.idx(*p)] != UNREACHED,
            _ => false,
        })
        .min_by_key(|p| (dist[geo.idx(*p)], *p))
        .ok_or_else(|| Error::Planning("no reachable goal or needed key".into()))
}

/// First action of the shortest path to the current objective, lowest action
/// index among equally short paths.
pub fn informed_act(state: &EnvState) -> Result<ActionId> {
    let target = informed_objective(state)?;
    let geo = geometry(state);
    let keys = state.keys_held;
    let path = geo
        .shortest_path(state.agent, target, |p| state.cell(p).passable(keys))
        .ok_or_else(|| Error::Planning(format!("objective {target} unreachable")))?;
    path.first()
        .copied()
        .ok_or_else(|| Error::Planning("agent already on its objective".into()))
}
