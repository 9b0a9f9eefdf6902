//! Grid coordinates and the discrete action set shared by every module.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Neighbour in direction `(dr, dc)`, or `None` when it leaves the grid.
    pub fn offset(self, dr: i32, dc: i32, height: usize, width: usize) -> Option<Pos> {
        let r = self.row as i64 + dr as i64;
        let c = self.col as i64 + dc as i64;
        if r < 0 || c < 0 || r >= height as i64 || c >= width as i64 {
            None
        } else {
            Some(Pos::new(r as usize, c as usize))
        }
    }

    pub fn chebyshev(self, other: Pos) -> usize {
        self.row.abs_diff(other.row).max(self.col.abs_diff(other.col))
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

/// Index into the family's action table. Order doubles as the global
/// tie-break order: up < down < left < right < up-left < up-right <
/// down-left < down-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub u8);

pub const UP: ActionId = ActionId(0);
pub const DOWN: ActionId = ActionId(1);
pub const LEFT: ActionId = ActionId(2);
pub const RIGHT: ActionId = ActionId(3);

const DELTAS: [(i32, i32); 8] = [
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
];

const NAMES: [&str; 8] = [
    "up",
    "down",
    "left",
    "right",
    "up-left",
    "up-right",
    "down-left",
    "down-right",
];

impl ActionId {
    pub fn delta(self) -> (i32, i32) {
        DELTAS[self.0 as usize]
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        NAMES[self.0 as usize]
    }

    /// All actions of a table with `count` entries, in tie-break order.
    pub fn all(count: usize) -> impl Iterator<Item = ActionId> {
        (0..count as u8).map(ActionId)
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The 8-neighbourhood of `p` inside the grid.
pub fn neighbours8(p: Pos, height: usize, width: usize) -> impl Iterator<Item = Pos> {
    DELTAS
        .iter()
        .filter_map(move |&(dr, dc)| p.offset(dr, dc, height, width))
}
