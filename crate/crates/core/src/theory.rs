//! Exact computation of the generalization-bound ingredients on tiny,
//! enumerable task sets: expert-relative generalization error, the task
//! information carried by the demonstrator's internal state, squared
//! Hellinger distance between trajectory laws, and the assembled bound.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::blindfold::BlindfoldSpec;
use crate::env::{reset_with_horizon, step};
use crate::error::{Error, Result};
use crate::evalsuite::mean_std;
use crate::experiment::{build_dataset, train_and_evaluate, ExperimentConfig};
use crate::experts::{
    demonstrate, informed_act, BayesExpert, BayesLimits, Demonstrator, ExpertKind, FrontierExpert,
    InformedExpert,
};
use crate::grid::ActionId;
use crate::seqpolicy::{argmax, forward_sparse, PolicyParams, SparseObs};
use crate::worldgen::{TaskSpec, TaskSplit};

/// Largest number of action sequences a trajectory enumeration may visit.
pub const MAX_ENUMERATION: usize = 1 << 20;
/// Largest task set the exact computations accept.
pub const MAX_TASKS: usize = 64;

/// What `gen_error` compares against the informed expert.
pub enum PolicyLike<'a> {
    Expert {
        kind: ExpertKind,
        blindfold: BlindfoldSpec,
    },
    Params(&'a PolicyParams),
}

fn check_prior(tasks: &[TaskSpec], prior: &[f64]) -> Result<()> {
    if tasks.is_empty() || tasks.len() != prior.len() {
        return Err(Error::Usage("task set and prior must be nonempty and aligned".into()));
    }
    if tasks.len() > MAX_TASKS {
        return Err(Error::Capacity(format!(
            "{} tasks exceeds the enumeration cap of {MAX_TASKS}",
            tasks.len()
        )));
    }
    let total: f64 = prior.iter().sum();
    if prior.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized(total));
    }
    Ok(())
}

/// Fresh demonstrator of the given kind for one episode on `task`.
pub fn demonstrator(
    kind: ExpertKind,
    blindfold: &BlindfoldSpec,
    task: &TaskSpec,
    tasks: &[TaskSpec],
    prior: &[f64],
    horizon: usize,
) -> Result<Box<dyn Demonstrator>> {
    Ok(match kind {
        ExpertKind::Informed => Box::new(InformedExpert::new()),
        ExpertKind::Blindfolded => Box::new(FrontierExpert::for_task(task)),
        ExpertKind::BayesExact => Box::new(BayesExpert::new(
            tasks,
            prior,
            blindfold,
            horizon,
            BayesLimits::default(),
        )?),
        ExpertKind::Human => {
            return Err(Error::Unsupported("no scripted model of a human demonstrator".into()))
        }
    })
}

/// Expected per-step disagreement with the informed expert along the
/// informed expert's own trajectories, under the prior. The evaluated
/// policy sees the same history; a scripted policy that errors out counts
/// as disagreeing from then on.
pub fn gen_error(
    policy: &PolicyLike,
    tasks: &[TaskSpec],
    prior: &[f64],
    horizon: usize,
) -> Result<f64> {
    check_prior(tasks, prior)?;
    let mut total = 0.0;
    for (task, w) in tasks.iter().zip(prior) {
        let (mismatches, steps) = task_disagreement(policy, task, tasks, prior, horizon)?;
        if steps > 0 {
            total += w * mismatches as f64 / steps as f64;
        }
    }
    Ok(total)
}

fn task_disagreement(
    policy: &PolicyLike,
    task: &TaskSpec,
    tasks: &[TaskSpec],
    prior: &[f64],
    horizon: usize,
) -> Result<(usize, usize)> {
    let (mut state, mut obs) = reset_with_horizon(task, horizon);
    let mut mismatches = 0;
    let mut steps = 0;
    let mut scripted = match policy {
        PolicyLike::Expert { kind, blindfold } => {
            Some((demonstrator(*kind, blindfold, task, tasks, prior, horizon)?, blindfold))
        }
        PolicyLike::Params(_) => None,
    };
    let mut alive = true;
    let mut hidden = match policy {
        PolicyLike::Params(p) => p.initial_hidden(),
        PolicyLike::Expert { .. } => Vec::new(),
    };
    while !state.done {
        let target = informed_act(&state)?;
        let guess = match (policy, scripted.as_mut()) {
            (PolicyLike::Params(p), _) => {
                let (probs, h) = forward_sparse(p, &SparseObs::from_observation(&obs), &hidden)?;
                hidden = h;
                Some(ActionId(argmax(&probs) as u8))
            }
            (_, Some((d, blindfold))) if alive => {
                let mut rng = blindfold.step_rng(task.seed, 0, state.step);
                let view = blindfold.apply(&obs, state.agent, &mut rng)?;
                match d.act(&state, &view) {
                    Ok(a) => {
                        if a != target {
                            d.overridden(target);
                        }
                        Some(a)
                    }
                    Err(Error::ExplorationExhausted | Error::Planning(_)) => {
                        alive = false;
                        None
                    }
                    Err(e) => return Err(e),
                }
            }
            _ => None,
        };
        mismatches += (guess != Some(target)) as usize;
        steps += 1;
        let (next, res) = step(&state, target)?;
        state = next;
        obs = res.obs;
    }
    Ok((mismatches, steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    PerStep,
    #[default]
    TimeAverage,
    FinalStep,
}

/// `I(T; Z^h)` for `h = 0..horizon`, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub per_step: Vec<f64>,
    pub time_average: f64,
    pub final_step: f64,
    /// Set when the demonstrator is stochastic and the value is a plug-in
    /// estimate over a grid of noise streams.
    pub estimate: bool,
}

impl MiReport {
    /// Scalar summary; `PerStep` reports the time average.
    pub fn value(&self, agg: Aggregation) -> f64 {
        match agg {
            Aggregation::FinalStep => self.final_step,
            Aggregation::PerStep | Aggregation::TimeAverage => self.time_average,
        }
    }
}

fn entropy(weights: impl IntoIterator<Item = f64>) -> f64 {
    weights
        .into_iter()
        .filter(|w| *w > 0.0)
        .map(|w| -w * w.ln())
        .sum()
}

/// Canonical internal state after each of the first `horizon` decisions.
/// Once the episode is over the last state is repeated.
pub fn internal_states(
    kind: ExpertKind,
    blindfold: &BlindfoldSpec,
    task: &TaskSpec,
    tasks: &[TaskSpec],
    prior: &[f64],
    horizon: usize,
    episode: u64,
) -> Result<Vec<String>> {
    let mut d = demonstrator(kind, blindfold, task, tasks, prior, horizon)?;
    let (mut state, mut obs) = reset_with_horizon(task, horizon);
    let mut zs = Vec::with_capacity(horizon);
    while !state.done {
        let mut rng = blindfold.step_rng(task.seed, episode, state.step);
        let view = blindfold.apply(&obs, state.agent, &mut rng)?;
        let a = match d.act(&state, &view) {
            Ok(a) => a,
            Err(Error::ExplorationExhausted) => break,
            Err(e) => return Err(e),
        };
        zs.push(d.canonical_state());
        let (next, res) = step(&state, a)?;
        state = next;
        obs = res.obs;
    }
    let last = zs.last().cloned().unwrap_or_default();
    zs.resize(horizon, last);
    Ok(zs)
}

/// Mutual information between the task and the demonstrator's internal
/// state. For a deterministic demonstrator `Z^h` is a function of the task,
/// so `I(T; Z^h) = H(Z^h)`, counted exactly. A noise blindfold is handled
/// over `noise_episodes` streams per task, as `H(Z^h) − H(Z^h | T)`.
pub fn mutual_info_tz(
    kind: ExpertKind,
    blindfold: &BlindfoldSpec,
    tasks: &[TaskSpec],
    prior: &[f64],
    horizon: usize,
    noise_episodes: usize,
) -> Result<MiReport> {
    check_prior(tasks, prior)?;
    if horizon == 0 {
        return Err(Error::Usage("horizon must be positive".into()));
    }
    let stochastic = blindfold.is_stochastic();
    if stochastic && kind == ExpertKind::BayesExact {
        return Err(Error::Unsupported(
            "exact Bayes planning needs a deterministic blindfold".into(),
        ));
    }
    let episodes = if stochastic { noise_episodes.max(1) } else { 1 };
    // zs[t][e][h]
    let mut zs = Vec::with_capacity(tasks.len());
    for t in tasks {
        let per_ep = (0..episodes)
            .map(|e| internal_states(kind, blindfold, t, tasks, prior, horizon, e as u64))
            .collect::<Result<Vec<_>>>()?;
        zs.push(per_ep);
    }
    let ew = 1.0 / episodes as f64;
    let per_step: Vec<f64> = (0..horizon)
        .map(|h| {
            let mut marginal: HashMap<&str, f64> = HashMap::new();
            let mut conditional = 0.0;
            for (per_ep, w) in zs.iter().zip(prior) {
                let mut local: HashMap<&str, f64> = HashMap::new();
                for z in per_ep {
                    *marginal.entry(z[h].as_str()).or_default() += w * ew;
                    *local.entry(z[h].as_str()).or_default() += ew;
                }
                conditional += w * entropy(local.into_values());
            }
            (entropy(marginal.into_values()) - conditional).max(0.0)
        })
        .collect();
    let time_average = per_step.iter().sum::<f64>() / horizon as f64;
    Ok(MiReport {
        final_step: *per_step.last().unwrap(),
        time_average,
        per_step,
        estimate: stochastic,
    })
}

/// Squared Hellinger distance `Σ (√p − √q)²` over the union support.
pub fn hellinger_sq<K: Ord>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> Result<f64> {
    for d in [p, q] {
        let total: f64 = d.values().sum();
        if d.values().any(|v| *v < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized(total));
        }
    }
    let mut acc = 0.0;
    for (k, pv) in p {
        let qv = q.get(k).copied().unwrap_or(0.0);
        acc += (pv.sqrt() - qv.sqrt()).powi(2);
    }
    for (k, qv) in q {
        if !p.contains_key(k) {
            acc += qv;
        }
    }
    Ok(acc)
}

/// Law of the action sequence when `params` drives `task` for at most
/// `horizon` steps (dynamics are deterministic, so actions fix the path).
pub fn policy_trajectory_law(
    params: &PolicyParams,
    task: &TaskSpec,
    horizon: usize,
) -> Result<BTreeMap<Vec<u8>, f64>> {
    let k = task.action_count();
    if (k as f64).powi(horizon as i32) > MAX_ENUMERATION as f64 {
        return Err(Error::Capacity(format!(
            "{k}^{horizon} action sequences exceed the enumeration cap"
        )));
    }
    let mut law = BTreeMap::new();
    let (state, obs) = reset_with_horizon(task, horizon);
    let mut stack = vec![(state, obs, params.initial_hidden(), Vec::<u8>::new(), 1.0)];
    while let Some((state, obs, hidden, prefix, prob)) = stack.pop() {
        if state.done {
            *law.entry(prefix).or_insert(0.0) += prob;
            continue;
        }
        let (probs, h) = forward_sparse(params, &SparseObs::from_observation(&obs), &hidden)?;
        for (a, pa) in probs.iter().enumerate() {
            let (next, res) = step(&state, ActionId(a as u8))?;
            let mut p = prefix.clone();
            p.push(a as u8);
            stack.push((next, res.obs, h.clone(), p, prob * pa));
        }
    }
    Ok(law)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorCheck {
    /// Per-step argmax disagreement along the expert's trajectory.
    pub lhs: f64,
    /// Four times the squared Hellinger distance between trajectory laws.
    pub rhs: f64,
    pub holds: bool,
}

/// Both sides of `E[1(π̂(X) ≠ A)] ≤ 4·D_H²(P^π̂, P^E)` on one task, for a
/// deterministic expert.
pub fn indicator_hellinger_check(
    cloned: &PolicyParams,
    expert: ExpertKind,
    blindfold: &BlindfoldSpec,
    task: &TaskSpec,
    horizon: usize,
) -> Result<IndicatorCheck> {
    if blindfold.is_stochastic() {
        return Err(Error::Unsupported("the expert must be deterministic".into()));
    }
    let demo = match expert {
        ExpertKind::BayesExact => {
            return Err(Error::Unsupported(
                "use a single-task scripted expert for the indicator check".into(),
            ))
        }
        k => demonstrate(task, k, blindfold, horizon, 0)?.into_trajectory(),
    };
    let actions: Vec<u8> = demo.actions().iter().map(|a| a.0).collect();
    let mut hidden = cloned.initial_hidden();
    let mut wrong = 0usize;
    for s in &demo.steps {
        let (probs, h) = forward_sparse(cloned, &SparseObs::from_observation(&s.obs), &hidden)?;
        hidden = h;
        wrong += (argmax(&probs) != s.action.index()) as usize;
    }
    let lhs = if actions.is_empty() {
        0.0
    } else {
        wrong as f64 / actions.len() as f64
    };
    let law = policy_trajectory_law(cloned, task, horizon)?;
    let expert_law = BTreeMap::from([(actions, 1.0)]);
    let rhs = 4.0 * hellinger_sq(&law, &expert_law)?;
    Ok(IndicatorCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-12,
    })
}

/// Log-cardinality proxy for a neural policy class: 64-bit weights counted
/// as `ln 128` nats each.
pub fn log_policy_class_proxy(parameter_count: usize) -> f64 {
    parameter_count as f64 * 128f64.ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Per-step reward bound.
    pub r: f64,
    pub horizon: usize,
    pub m: usize,
    /// Demonstrations per task; may be infinite for the limit.
    pub n: f64,
    pub actions: usize,
    pub delta: f64,
    pub eps_gen: f64,
    pub eps_opt: f64,
    pub i_tz: f64,
    pub aggregation: Aggregation,
    /// `ln |Π|`.
    pub log_policy_class: f64,
    /// Whether `log_policy_class` is the parameter-count proxy rather than a
    /// true finite-class size.
    pub policy_class_is_proxy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub gen: f64,
    pub opt: f64,
    /// `√(I·|A|·ln(|A|/δ)/m)`.
    pub info: f64,
    /// `8·ln(|Π|·m/δ)/n`.
    pub sample: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    /// Maximum training loss factor, bounded by the optimization error.
    pub f_max_train_loss: f64,
    /// Supremum of the indicator loss.
    pub g_sup_loss: f64,
    pub terms: BoundTerms,
    /// `R·H·(gen + opt + info + sample)`, unstated constants set to 1.
    pub rhs_order: f64,
}

pub fn assemble_bound(inputs: BoundInputs) -> Result<BoundReport> {
    let k = inputs.actions as f64;
    if inputs.m == 0 || inputs.actions == 0 || !(0.0..1.0).contains(&inputs.delta) || inputs.delta == 0.0 {
        return Err(Error::Usage("need m ≥ 1, |A| ≥ 1 and δ in (0, 1)".into()));
    }
    if inputs.n.is_nan() || inputs.n <= 0.0 {
        return Err(Error::Usage("n must be positive".into()));
    }
    let m = inputs.m as f64;
    let info = (inputs.i_tz.max(0.0) * k * (k / inputs.delta).ln() / m).sqrt();
    let sample = if inputs.n.is_infinite() {
        0.0
    } else {
        8.0 * (inputs.log_policy_class + m.ln() - inputs.delta.ln()) / inputs.n
    };
    let terms = BoundTerms {
        gen: inputs.eps_gen,
        opt: inputs.eps_opt,
        info,
        sample,
    };
    let rhs_order =
        inputs.r * inputs.horizon as f64 * (terms.gen + terms.opt + terms.info + terms.sample);
    Ok(BoundReport {
        f_max_train_loss: inputs.eps_opt,
        g_sup_loss: 1.0,
        terms,
        rhs_order,
        inputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub expert: ExpertKind,
    pub m: usize,
    pub seed: u64,
    pub train: f64,
    pub test: f64,
    pub gap: f64,
}

/// The first `m` training tasks of a larger split, same test tasks.
pub fn truncate_split(master: &TaskSplit, m: usize) -> Result<TaskSplit> {
    if m == 0 || m > master.train.len() {
        return Err(Error::Usage(format!(
            "m = {m} outside 1..={}",
            master.train.len()
        )));
    }
    Ok(TaskSplit {
        train: master.train[..m].to_vec(),
        ..master.clone()
    })
}

/// One point of the sweep: train every seed of `base` on the first `m`
/// tasks of `master` with the given expert.
pub fn gap_point(
    base: &ExperimentConfig,
    master: &TaskSplit,
    expert: ExpertKind,
    m: usize,
) -> Result<Vec<GapRow>> {
    let split = truncate_split(master, m)?;
    let cfg = ExperimentConfig {
        expert,
        m_train: m,
        blindfold: None,
        match_steps: false,
        run_id: format!("{}-{expert}-m{m}", base.run_id),
        ..base.clone()
    };
    let data = build_dataset(&cfg, &split)?;
    let runs = train_and_evaluate(&cfg, &data, &split)?;
    Ok(runs
        .iter()
        .map(|r| GapRow {
            expert,
            m,
            seed: r.seed,
            train: r.train.success_mean,
            test: r.test.success_mean,
            gap: r.train.success_mean - r.test.success_mean,
        })
        .collect())
}

/// Test-train success gap for every expert and every `m`, on nested
/// training sets sharing one test set.
pub fn gap_vs_m_sweep(
    base: &ExperimentConfig,
    ms: &[usize],
    experts: &[ExpertKind],
) -> Result<Vec<GapRow>> {
    let max_m = ms.iter().copied().max().ok_or_else(|| Error::Config("empty m list".into()))?;
    let master = ExperimentConfig {
        m_train: max_m,
        ..base.clone()
    }
    .split()?;
    let mut rows = Vec::new();
    for &e in experts {
        for &m in ms {
            rows.extend(gap_point(base, &master, e, m)?);
        }
    }
    Ok(rows)
}

/// Mean gap per `m` for one expert, ascending in `m`.
pub fn mean_gaps(rows: &[GapRow], expert: ExpertKind) -> Vec<(usize, f64)> {
    let mut by_m: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.expert == expert) {
        by_m.entry(r.m).or_default().push(r.gap);
    }
    by_m.into_iter().map(|(m, g)| (m, mean_std(&g).0)).collect()
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let (mx, _) = mean_std(&rx);
    let (my, _) = mean_std(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Spearman correlation between `m` and the per-seed gap for one expert.
pub fn gap_trend(rows: &[GapRow], expert: ExpertKind) -> f64 {
    let (ms, gaps): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.expert == expert)
        .map(|r| (r.m as f64, r.gap))
        .unzip();
    spearman(&ms, &gaps)
}
