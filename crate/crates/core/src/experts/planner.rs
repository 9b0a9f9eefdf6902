//! Breadth-first planning on a passability predicate, with the global
//! action-order tie-break.

use std::collections::VecDeque;

use crate::grid::{ActionId, Pos};

pub const UNREACHED: usize = usize::MAX;

/// Grid geometry plus the family's move set.
#[derive(Debug, Clone, Copy)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub action_count: usize,
}

impl Geometry {
    #[inline]
    pub fn idx(&self, p: Pos) -> usize {
        p.row * self.width + p.col
    }

    pub fn step(&self, p: Pos, a: ActionId) -> Option<Pos> {
        let (dr, dc) = a.delta();
        p.offset(dr, dc, self.height, self.width)
    }

    /// Forward BFS distances from `from` through passable cells.
    pub fn distances_from(&self, from: Pos, passable: impl Fn(Pos) -> bool) -> Vec<usize> {
        let mut dist = vec![UNREACHED; self.height * self.width];
        dist[self.idx(from)] = 0;
        let mut q = VecDeque::from([from]);
        while let Some(p) = q.pop_front() {
            let d = dist[self.idx(p)];
            for a in ActionId::all(self.action_count) {
                if let Some(n) = self.step(p, a) {
                    if dist[self.idx(n)] == UNREACHED && passable(n) {
                        dist[self.idx(n)] = d + 1;
                        q.push_back(n);
                    }
                }
            }
        }
        dist
    }

    /// Number of moves needed to reach `target` from every cell. A move from
    /// `x` into `y` requires only `y` to be passable, and the move set is
    /// closed under negation, so this is a BFS outward from `target`.
    pub fn distances_to(&self, target: Pos, passable: impl Fn(Pos) -> bool) -> Vec<usize> {
        let mut dist = vec![UNREACHED; self.height * self.width];
        dist[self.idx(target)] = 0;
        let mut q = VecDeque::from([target]);
        while let Some(y) = q.pop_front() {
            let d = dist[self.idx(y)];
            // Every cell we leave through must itself be standable.
            if d > 0 && !passable(y) {
                continue;
            }
            for a in ActionId::all(self.action_count) {
                if let Some(x) = self.step(y, a) {
                    if dist[self.idx(x)] == UNREACHED {
                        dist[self.idx(x)] = d + 1;
                        q.push_back(x);
                    }
                }
            }
        }
        dist
    }

    /// Shortest action sequence from `from` to `target`, choosing at every
    /// step the lowest-index action that stays on a shortest path.
    pub fn shortest_path(
        &self,
        from: Pos,
        target: Pos,
        passable: impl Fn(Pos) -> bool,
    ) -> Option<Vec<ActionId>> {
        let dist = self.distances_to(target, &passable);
        let total = dist[self.idx(from)];
        if total == UNREACHED {
            return None;
        }
        let mut path = Vec::with_capacity(total);
        let mut cur = from;
        while cur != target {
            let d = dist[self.idx(cur)];
            let (a, next) = ActionId::all(self.action_count)
                .filter_map(|a| self.step(cur, a).map(|n| (a, n)))
                .find(|(_, n)| passable(*n) && dist[self.idx(*n)] + 1 == d)?;
            path.push(a);
            cur = next;
        }
        Some(path)
    }
}
