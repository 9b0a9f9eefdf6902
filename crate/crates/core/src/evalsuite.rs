//! Policy rollouts and behavioral statistics: success, steps, map coverage,
//! state-visitation entropy.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::datapipe::{Dataset, Trajectory};
use crate::env::{replay, reset_with_horizon, step};
use crate::error::{Error, Result};
use crate::grid::{ActionId, Pos};
use crate::seqpolicy::{argmax, forward_sparse, PolicyParams, SparseObs};
use crate::worldgen::TaskSpec;

pub const ENTROPY_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_seed: u64,
    /// Agent cell at every step, including the start and the final cell.
    pub visited: Vec<Pos>,
    pub actions: Vec<ActionId>,
    pub success: bool,
}

impl Episode {
    pub fn steps(&self) -> usize {
        self.actions.len()
    }

    /// Positions of a logged trajectory, recovered by replay.
    pub fn from_trajectory(task: &TaskSpec, t: &Trajectory) -> Result<Self> {
        let actions = t.actions();
        let (mut state, _) = reset_with_horizon(task, usize::MAX);
        let mut visited = vec![state.agent];
        for a in &actions {
            state = step(&state, *a)?.0;
            visited.push(state.agent);
        }
        Ok(Self {
            task_seed: task.seed,
            visited,
            actions,
            success: state.success,
        })
    }
}

/// Greedy (argmax) rollout with the hidden state reset at the start.
pub fn rollout(params: &PolicyParams, task: &TaskSpec, max_steps: usize) -> Result<Episode> {
    let (mut state, mut obs) = reset_with_horizon(task, max_steps);
    let a = &params.arch;
    if (obs.channels, obs.height, obs.width) != (a.obs_channels, a.height, a.width)
        || a.actions != task.action_count()
    {
        return Err(Error::Usage(format!(
            "policy architecture does not match a {}x{} {} level",
            task.height, task.width, task.family
        )));
    }
    let mut hidden = params.initial_hidden();
    let mut visited = vec![state.agent];
    let mut actions = Vec::new();
    while !state.done {
        let (p, h) = forward_sparse(params, &SparseObs::from_observation(&obs), &hidden)?;
        hidden = h;
        let action = ActionId(argmax(&p) as u8);
        let (next, res) = step(&state, action)?;
        actions.push(action);
        visited.push(next.agent);
        obs = res.obs;
        state = next;
    }
    Ok(Episode {
        task_seed: task.seed,
        visited,
        actions,
        success: state.success,
    })
}

/// Cells reachable from the start when every lock can be opened, in
/// row-major order.
pub fn reachable_cells(task: &TaskSpec) -> Vec<Pos> {
    let mut seen = vec![false; task.cells.len()];
    seen[task.idx(task.start)] = true;
    let mut q = VecDeque::from([task.start]);
    while let Some(p) = q.pop_front() {
        for a in task.family.actions() {
            let (dr, dc) = a.delta();
            if let Some(n) = p.offset(dr, dc, task.height, task.width) {
                if !seen[task.idx(n)] && task.cell(n).passable(u8::MAX) {
                    seen[task.idx(n)] = true;
                    q.push_back(n);
                }
            }
        }
    }
    task.positions().filter(|p| seen[task.idx(*p)]).collect()
}

/// Distinct visited reachable cells over all reachable cells.
pub fn coverage(visited: &[Pos], task: &TaskSpec) -> f64 {
    let reach = reachable_cells(task);
    if reach.is_empty() {
        return 0.0;
    }
    let reach_set: BTreeSet<Pos> = reach.iter().copied().collect();
    let distinct: BTreeSet<Pos> = visited.iter().copied().filter(|p| reach_set.contains(p)).collect();
    distinct.len() as f64 / reach.len() as f64
}

/// Entropy (nats) of the visit histogram over `bins` spatial bins: the
/// reachable cells in row-major order split into contiguous runs of equal
/// size, cell `i` of `N` going to bin `⌊i·bins/N⌋`. `0·ln 0 = 0`.
pub fn state_entropy(visited: &[Pos], task: &TaskSpec, bins: usize) -> f64 {
    let reach = reachable_cells(task);
    let n = reach.len();
    if n == 0 || bins == 0 {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    let mut total = 0usize;
    for p in visited {
        if let Ok(i) = reach.binary_search(p) {
            counts[i * bins / n] += 1;
            total += 1;
        }
    }
    entropy_of_counts(&counts, total)
}

fn entropy_of_counts(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    counts
        .iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / t;
            -p * p.ln()
        })
        .sum()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean ± population std of episode lengths.
pub fn step_stats(lengths: &[usize]) -> (f64, f64) {
    let xs: Vec<f64> = lengths.iter().map(|l| *l as f64).collect();
    mean_std(&xs)
}

/// Two-sided exact sign test on paired differences (ties dropped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    pub p_value: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    let negative = diffs.iter().filter(|d| **d < 0.0).count();
    let ties = diffs.len() - positive - negative;
    let n = positive + negative;
    let k = positive.min(negative);
    // P(X ≤ k) for X ~ Bin(n, 1/2), summed in log space.
    let ln_fact = |m: usize| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    let lf_n = ln_fact(n);
    let tail: f64 = (0..=k)
        .map(|i| (lf_n - ln_fact(i) - ln_fact(n - i) - n as f64 * std::f64::consts::LN_2).exp())
        .sum();
    SignTest {
        positive,
        negative,
        ties,
        p_value: if n == 0 { 1.0 } else { (2.0 * tail).min(1.0) },
    }
}

/// One CSV row: one rollout of one policy seed on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub task_seed: u64,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub coverage: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub epoch: usize,
    /// Success rate of each policy seed, in input order.
    pub per_seed_success: Vec<(u64, f64)>,
    pub success_mean: f64,
    /// Population std over policy seeds.
    pub success_std: f64,
    pub mean_steps: f64,
    pub rows: Vec<EvalRow>,
}

/// Roll every policy on every task. `policies` pairs a policy seed with its
/// parameters.
pub fn evaluate(
    run_id: &str,
    epoch: usize,
    split: &str,
    policies: &[(u64, &PolicyParams)],
    tasks: &[TaskSpec],
    max_steps: usize,
) -> Result<EvalReport> {
    if policies.is_empty() || tasks.is_empty() {
        return Err(Error::Usage("evaluation needs at least one policy and one task".into()));
    }
    let mut rows = Vec::with_capacity(policies.len() * tasks.len());
    let mut per_seed = Vec::with_capacity(policies.len());
    for (seed, params) in policies {
        let mut wins = 0usize;
        for t in tasks {
            let ep = rollout(params, t, max_steps)?;
            wins += ep.success as usize;
            rows.push(EvalRow {
                run_id: run_id.to_string(),
                epoch,
                split: split.to_string(),
                task_seed: t.seed,
                seed: *seed,
                success: ep.success,
                steps: ep.steps(),
                coverage: coverage(&ep.visited, t),
                entropy: state_entropy(&ep.visited, t, ENTROPY_BINS),
            });
        }
        per_seed.push((*seed, wins as f64 / tasks.len() as f64));
    }
    let rates: Vec<f64> = per_seed.iter().map(|(_, r)| *r).collect();
    let (success_mean, success_std) = mean_std(&rates);
    let mean_steps = rows.iter().map(|r| r.steps as f64).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        split: split.to_string(),
        epoch,
        per_seed_success: per_seed,
        success_mean,
        success_std,
        mean_steps,
        rows,
    })
}

pub fn write_csv<W: Write>(rows: &[EvalRow], out: W, header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Behavioral summary of a demonstration set, failures included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoStats {
    pub trajectories: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_coverage: f64,
    pub mean_entropy: f64,
}

/// Statistics of `data` against the tasks it was collected on.
pub fn demo_stats(data: &Dataset, tasks: &[TaskSpec]) -> Result<DemoStats> {
    if data.is_empty() {
        return Err(Error::NoData("empty demonstration set".into()));
    }
    let by_seed: HashMap<u64, &TaskSpec> = tasks.iter().map(|t| (t.seed, t)).collect();
    let (mut succ, mut steps, mut cov, mut ent) = (0usize, 0usize, 0.0, 0.0);
    for t in &data.trajectories {
        let task = by_seed
            .get(&t.task_seed)
            .ok_or_else(|| Error::Usage(format!("task {} not in the task list", t.task_seed)))?;
        let ep = Episode::from_trajectory(task, t)?;
        succ += t.success as usize;
        steps += t.len();
        cov += coverage(&ep.visited, task);
        ent += state_entropy(&ep.visited, task, ENTROPY_BINS);
    }
    let n = data.len() as f64;
    Ok(DemoStats {
        trajectories: data.len(),
        success_rate: succ as f64 / n,
        mean_steps: steps as f64 / n,
        mean_coverage: cov / n,
        mean_entropy: ent / n,
    })
}

/// Replay a logged trajectory and compare its stored observations with fresh
/// renderings.
pub fn replay_matches(task: &TaskSpec, t: &Trajectory) -> Result<bool> {
    let (obs, _) = replay(task, usize::MAX, &t.actions())?;
    Ok(t.steps.iter().zip(&obs).all(|(s, o)| s.obs == *o))
}
