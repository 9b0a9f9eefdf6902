//! Seeded procedural task generation: perfect mazes and keys-and-locks
//! levels built on top of them, plus train/test splits.
//!
//! Mazes are carved with a randomized depth-first backtracker on the odd
//! lattice, so every pair of free cells is joined by exactly one simple path.
//! The agent always starts in the bottom-left lattice cell; the goal is a
//! uniformly drawn lattice cell.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ActionId, Pos};
use crate::rng::SplitMix64;

pub const TASKSPEC_TAG: &str = "taskspec-v1";
pub const TASKSPLIT_TAG: &str = "tasksplit-v1";
pub const MAX_COLORS: u8 = 3;
pub const MAX_FEASIBILITY_ATTEMPTS: usize = 1000;

const STREAM_CARVE: u64 = 1;
const STREAM_GOAL: u64 = 2;
const STREAM_OVERLAY: u64 = 3;
const STREAM_SPLIT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Maze,
    Keylock,
}

impl Family {
    /// Size of the action table: 4 moves for mazes, 8 with diagonals.
    pub fn action_count(self) -> usize {
        match self {
            Family::Maze => 4,
            Family::Keylock => 8,
        }
    }

    pub fn default_horizon(self) -> usize {
        match self {
            Family::Maze => 500,
            Family::Keylock => 1000,
        }
    }

    pub fn actions(self) -> impl Iterator<Item = ActionId> {
        ActionId::all(self.action_count())
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Maze => "maze",
            Family::Keylock => "keylock",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maze" => Ok(Family::Maze),
            "keylock" => Ok(Family::Keylock),
            other => Err(Error::Config(format!("unknown task family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Wall,
    Free,
    Goal,
    Key(u8),
    Lock(u8),
}

impl CellKind {
    pub fn code(self) -> char {
        match self {
            CellKind::Wall => '#',
            CellKind::Free => '.',
            CellKind::Goal => 'G',
            CellKind::Key(c) => (b'a' + c) as char,
            CellKind::Lock(c) => (b'A' + c) as char,
        }
    }

    pub fn from_code(ch: char) -> Option<Self> {
        match ch {
            '#' => Some(CellKind::Wall),
            '.' => Some(CellKind::Free),
            'G' => Some(CellKind::Goal),
            'a'..='c' => Some(CellKind::Key(ch as u8 - b'a')),
            'A'..='C' => Some(CellKind::Lock(ch as u8 - b'A')),
            _ => None,
        }
    }

    /// Whether an agent holding `keys` (bitmask over colors) can enter.
    pub fn passable(self, keys: u8) -> bool {
        match self {
            CellKind::Wall => false,
            CellKind::Lock(c) => keys & (1 << c) != 0,
            _ => true,
        }
    }
}

/// One task: a level layout with start, goal, and optional keys and locks.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub color_count: u8,
    pub start: Pos,
    pub goal: Pos,
    pub cells: Vec<CellKind>,
}

impl TaskSpec {
    pub fn cell(&self, p: Pos) -> CellKind {
        self.cells[p.row * self.width + p.col]
    }

    pub fn idx(&self, p: Pos) -> usize {
        p.row * self.width + p.col
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.height).flat_map(move |r| (0..self.width).map(move |c| Pos::new(r, c)))
    }

    pub fn action_count(&self) -> usize {
        self.family.action_count()
    }

    /// Build a task from rows of cell codes, `S` marking the start cell.
    /// Intended for hand-made fixtures; no solvability check is made.
    pub fn from_ascii(family: Family, seed: u64, rows: &[&str]) -> Result<TaskSpec> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        let mut cells = Vec::with_capacity(width * height);
        let mut start = None;
        let mut goal = None;
        let mut colors = 0u8;
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::Format(format!("ragged row {r}")));
            }
            for (c, ch) in row.chars().enumerate() {
                let kind = if ch == 'S' {
                    start = Some(Pos::new(r, c));
                    CellKind::Free
                } else {
                    CellKind::from_code(ch)
                        .ok_or_else(|| Error::Format(format!("bad cell code {ch:?}")))?
                };
                match kind {
                    CellKind::Goal => goal = Some(Pos::new(r, c)),
                    CellKind::Key(k) | CellKind::Lock(k) => colors = colors.max(k + 1),
                    _ => {}
                }
                cells.push(kind);
            }
        }
        Ok(TaskSpec {
            family,
            width,
            height,
            seed,
            color_count: colors,
            start: start.ok_or_else(|| Error::Format("no start cell".into()))?,
            goal: goal.ok_or_else(|| Error::Format("no goal cell".into()))?,
            cells,
        })
    }

    /// Rows of cell codes with the start marked `S`.
    pub fn to_ascii(&self) -> Vec<String> {
        (0..self.height)
            .map(|r| {
                (0..self.width)
                    .map(|c| {
                        let p = Pos::new(r, c);
                        if p == self.start {
                            'S'
                        } else {
                            self.cell(p).code()
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Line-delimited record: version tag, then `key=value` fields in fixed
    /// order, then one `row=` line per grid row (top to bottom), then `end`.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        out.push_str(TASKSPEC_TAG);
        out.push('\n');
        out.push_str(&format!("family={}\n", self.family));
        out.push_str(&format!("width={}\n", self.width));
        out.push_str(&format!("height={}\n", self.height));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("colors={}\n", self.color_count));
        out.push_str(&format!("start={}\n", self.start));
        out.push_str(&format!("goal={}\n", self.goal));
        for r in 0..self.height {
            out.push_str("row=");
            for c in 0..self.width {
                out.push(self.cell(Pos::new(r, c)).code());
            }
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    /// Parse one record from the front of `lines`, consuming through `end`.
    pub fn parse_record<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<TaskSpec> {
        let tag = lines
            .next()
            .ok_or_else(|| Error::Truncated("missing taskspec record".into()))?;
        if tag.trim() != TASKSPEC_TAG {
            return Err(Error::Format(format!("expected {TASKSPEC_TAG}, got {tag:?}")));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Truncated(format!("missing field {name}")))?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad line {line:?}")))?;
            if k != name {
                return Err(Error::Format(format!("expected field {name}, got {k}")));
            }
            Ok(v.to_string())
        };
        let family: Family = field("family")?.parse()?;
        let width: usize = parse_num(&field("width")?)?;
        let height: usize = parse_num(&field("height")?)?;
        let seed: u64 = parse_num(&field("seed")?)?;
        let color_count: u8 = parse_num(&field("colors")?)?;
        let start = parse_pos(&field("start")?)?;
        let goal = parse_pos(&field("goal")?)?;
        let mut cells = Vec::with_capacity(width * height);
        for _ in 0..height {
            let row = field("row")?;
            if row.chars().count() != width {
                return Err(Error::Format("row width mismatch".into()));
            }
            for ch in row.chars() {
                cells.push(
                    CellKind::from_code(ch)
                        .ok_or_else(|| Error::Format(format!("bad cell code {ch:?}")))?,
                );
            }
        }
        match lines.next() {
            Some("end") => {}
            other => return Err(Error::Format(format!("expected end, got {other:?}"))),
        }
        Ok(TaskSpec {
            family,
            width,
            height,
            seed,
            color_count,
            start,
            goal,
            cells,
        })
    }
}

fn parse_num<T: FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad number {s:?}")))
}

fn parse_pos(s: &str) -> Result<Pos> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| Error::Format(format!("bad position {s:?}")))?;
    Ok(Pos::new(parse_num(r)?, parse_num(c)?))
}

/// Generation parameters shared by every task in a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub family: Family,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub color_count: u8,
}

impl GenParams {
    pub fn maze(size: usize) -> Self {
        Self {
            family: Family::Maze,
            width: size,
            height: size,
            color_count: 0,
        }
    }

    pub fn keylock(size: usize, colors: u8) -> Self {
        Self {
            family: Family::Keylock,
            width: size,
            height: size,
            color_count: colors,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<TaskSpec> {
        generate_task_with_colors(self.family, self.width, self.height, self.color_count, seed)
    }
}

/// Generate a task with the family's default color count (1 for keylock).
pub fn generate_task(family: Family, width: usize, height: usize, seed: u64) -> Result<TaskSpec> {
    let colors = match family {
        Family::Maze => 0,
        Family::Keylock => 1,
    };
    generate_task_with_colors(family, width, height, colors, seed)
}

pub fn generate_task_with_colors(
    family: Family,
    width: usize,
    height: usize,
    color_count: u8,
    seed: u64,
) -> Result<TaskSpec> {
    if width < 5 || height < 5 || width % 2 == 0 || height % 2 == 0 {
        return Err(Error::Dimension { width, height });
    }
    let color_count = match family {
        Family::Maze => 0,
        Family::Keylock => {
            if color_count == 0 || color_count > MAX_COLORS {
                return Err(Error::Config(format!(
                    "keylock color count must be in 1..={MAX_COLORS}, got {color_count}"
                )));
            }
            color_count
        }
    };

    let mut cells = carve_maze(width, height, &mut SplitMix64::from_parts(seed, STREAM_CARVE));
    let lattice: Vec<Pos> = (0..height / 2)
        .flat_map(|i| (0..width / 2).map(move |j| Pos::new(2 * i + 1, 2 * j + 1)))
        .collect();
    let start = Pos::new(height - 2, 1);
    let candidates: Vec<Pos> = lattice.iter().copied().filter(|p| *p != start).collect();
    let mut goal_rng = SplitMix64::from_parts(seed, STREAM_GOAL);
    let goal = candidates[goal_rng.index(candidates.len())];
    cells[goal.row * width + goal.col] = CellKind::Goal;

    let mut task = TaskSpec {
        family,
        width,
        height,
        seed,
        color_count,
        start,
        goal,
        cells,
    };
    if family == Family::Keylock {
        overlay_keys_and_locks(&mut task, &lattice)?;
    }
    Ok(task)
}

/// Randomized depth-first carving from the start lattice cell.
fn carve_maze(width: usize, height: usize, rng: &mut SplitMix64) -> Vec<CellKind> {
    let mut cells = vec![CellKind::Wall; width * height];
    let mut visited = vec![false; width * height];
    let origin = Pos::new(height - 2, 1);
    let mut stack = vec![origin];
    visited[origin.row * width + origin.col] = true;
    cells[origin.row * width + origin.col] = CellKind::Free;
    while let Some(&cur) = stack.last() {
        let mut options = Vec::with_capacity(4);
        for (dr, dc) in [(-2i32, 0i32), (2, 0), (0, -2), (0, 2)] {
            if let Some(next) = cur.offset(dr, dc, height, width) {
                if next.row >= 1
                    && next.col >= 1
                    && next.row <= height - 2
                    && next.col <= width - 2
                    && !visited[next.row * width + next.col]
                {
                    options.push((next, dr / 2, dc / 2));
                }
            }
        }
        if options.is_empty() {
            stack.pop();
            continue;
        }
        let (next, hr, hc) = options[rng.index(options.len())];
        let between = cur.offset(hr, hc, height, width).expect("interior");
        cells[between.row * width + between.col] = CellKind::Free;
        cells[next.row * width + next.col] = CellKind::Free;
        visited[next.row * width + next.col] = true;
        stack.push(next);
    }
    cells
}

/// Place one key and one lock per color by rejection sampling until the level
/// is solvable and the goal is cut off while every lock is closed. Each
/// attempt redraws the goal as well: with diagonal moves a goal close to the
/// start may have no single-cell chokepoint at all.
fn overlay_keys_and_locks(task: &mut TaskSpec, lattice: &[Pos]) -> Result<()> {
    let base = task.cells.clone();
    let goal_cell = task.idx(task.goal);
    let mut maze = base.clone();
    maze[goal_cell] = CellKind::Free;
    let goals: Vec<Pos> = lattice.iter().copied().filter(|p| *p != task.start).collect();
    let needed = 2 * task.color_count as usize + 1;
    let open_count = maze.iter().filter(|c| **c == CellKind::Free).count();
    if open_count < needed + 1 {
        return Err(Error::Generation {
            seed: task.seed,
            attempts: 0,
        });
    }
    let mut rng = SplitMix64::from_parts(task.seed, STREAM_OVERLAY);
    for attempt in 0..MAX_FEASIBILITY_ATTEMPTS {
        task.cells.clone_from(&maze);
        if attempt > 0 {
            task.goal = goals[rng.index(goals.len())];
        }
        let gi = task.idx(task.goal);
        task.cells[gi] = CellKind::Goal;
        let mut pool: Vec<Pos> = task
            .positions()
            .filter(|p| task.cells[task.idx(*p)] == CellKind::Free && *p != task.start)
            .collect();
        for color in 0..task.color_count {
            let lock = pool.swap_remove(rng.index(pool.len()));
            let key = pool.swap_remove(rng.index(pool.len()));
            task.cells[lock.row * task.width + lock.col] = CellKind::Lock(color);
            task.cells[key.row * task.width + key.col] = CellKind::Key(color);
        }
        if !reachable_without_keys(task, task.goal) && solvable(task) {
            return Ok(());
        }
    }
    task.cells = base;
    Err(Error::Generation {
        seed: task.seed,
        attempts: MAX_FEASIBILITY_ATTEMPTS,
    })
}

fn reachable_without_keys(task: &TaskSpec, target: Pos) -> bool {
    let (seen, _) = flood(task, task.start, 0);
    seen[task.idx(target)]
}

/// Flood fill from `from` holding `keys`; returns the reached set and the
/// union of key colors lying on reached cells.
fn flood(task: &TaskSpec, from: Pos, keys: u8) -> (Vec<bool>, u8) {
    let mut seen = vec![false; task.cells.len()];
    let mut found = 0u8;
    let mut queue = VecDeque::from([from]);
    seen[task.idx(from)] = true;
    while let Some(p) = queue.pop_front() {
        if let CellKind::Key(c) = task.cell(p) {
            found |= 1 << c;
        }
        for a in task.family.actions() {
            let (dr, dc) = a.delta();
            if let Some(n) = p.offset(dr, dc, task.height, task.width) {
                if !seen[task.idx(n)] && task.cell(n).passable(keys) {
                    seen[task.idx(n)] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    (seen, found)
}

/// Staged reachability: flood with the current key set, pick up every
/// reachable key, repeat until the goal is reached or no new key appears.
/// Keys are never consumed, so this is exact for the key/lock semantics.
pub fn solvable(task: &TaskSpec) -> bool {
    if task.cell(task.start) == CellKind::Wall {
        return false;
    }
    let mut keys = 0u8;
    loop {
        let (seen, found) = flood(task, task.start, keys);
        if seen[task.idx(task.goal)] {
            return true;
        }
        if found | keys == keys {
            return false;
        }
        keys |= found;
    }
}

/// Train/test task split. The prior over training tasks is uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSplit {
    pub params: GenParams,
    pub split_seed: u64,
    pub train: Vec<TaskSpec>,
    pub test: Vec<TaskSpec>,
}

impl TaskSplit {
    pub fn m(&self) -> usize {
        self.train.len()
    }

    pub fn prior(&self) -> Vec<f64> {
        vec![1.0 / self.train.len() as f64; self.train.len()]
    }

    pub fn find(&self, seed: u64) -> Option<&TaskSpec> {
        self.train.iter().chain(&self.test).find(|t| t.seed == seed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{TASKSPLIT_TAG}\nsplit_seed={}\ntrain={}\ntest={}\n",
            self.split_seed,
            self.train.len(),
            self.test.len()
        );
        for t in self.train.iter().chain(&self.test) {
            out.push_str(&t.to_record());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<TaskSplit> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TASKSPLIT_TAG) {
            return Err(Error::Format(format!("missing {TASKSPLIT_TAG} header")));
        }
        let mut field = |name: &str| -> Result<u64> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Truncated(format!("missing {name}")))?;
            match line.split_once('=') {
                Some((k, v)) if k == name => parse_num(v),
                _ => Err(Error::Format(format!("expected {name}, got {line:?}"))),
            }
        };
        let split_seed = field("split_seed")?;
        let n_train = field("train")? as usize;
        let n_test = field("test")? as usize;
        let mut train = Vec::with_capacity(n_train);
        let mut test = Vec::with_capacity(n_test);
        for i in 0..n_train + n_test {
            let t = TaskSpec::parse_record(&mut lines)?;
            if i < n_train {
                train.push(t);
            } else {
                test.push(t);
            }
        }
        let first = train
            .first()
            .or(test.first())
            .ok_or_else(|| Error::Format("empty split".into()))?;
        let params = GenParams {
            family: first.family,
            width: first.width,
            height: first.height,
            color_count: first.color_count,
        };
        Ok(TaskSplit {
            params,
            split_seed,
            train,
            test,
        })
    }
}

/// Task seeds `split_seed -> [train..., test...]`, all distinct.
pub fn split_seeds(split_seed: u64, count: usize) -> Vec<u64> {
    let mut rng = SplitMix64::from_parts(split_seed, STREAM_SPLIT);
    let mut seen = BTreeSet::new();
    let mut seeds = Vec::with_capacity(count);
    while seeds.len() < count {
        let s = rng.next_u64();
        if seen.insert(s) {
            seeds.push(s);
        }
    }
    seeds
}

pub fn generate_split(
    params: GenParams,
    m_train: usize,
    m_test: usize,
    split_seed: u64,
) -> Result<TaskSplit> {
    if m_train == 0 || m_test == 0 {
        return Err(Error::Config(
            "a split needs at least one train and one test task".into(),
        ));
    }
    let seeds = split_seeds(split_seed, m_train + m_test);
    let tasks = seeds
        .iter()
        .map(|s| params.generate(*s))
        .collect::<Result<Vec<_>>>()?;
    let mut train = tasks;
    let test = train.split_off(m_train);
    Ok(TaskSplit {
        params,
        split_seed,
        train,
        test,
    })
}
