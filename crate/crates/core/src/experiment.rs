//! End-to-end protocol: split, demonstrations, training over policy seeds,
//! train/test evaluation.

use serde::{Deserialize, Serialize};

use crate::blindfold::BlindfoldSpec;
use crate::datapipe::{filter_successful, matched_steps_subset, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::evalsuite::{demo_stats, evaluate, mean_std, DemoStats, EvalReport, EvalRow};
use crate::experts::{demonstrate, ExpertKind};
use crate::seqpolicy::{ArchSpec, PolicyParams, Sequence};
use crate::trainer::{train_sequences, Hyper, TrainReport};
use crate::worldgen::{generate_split, split_seeds, Family, GenParams, TaskSpec, TaskSplit};

/// Everything that defines one experiment arm. Serializes to TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub family: Family,
    pub size: usize,
    pub colors: u8,
    pub m_train: usize,
    pub m_test: usize,
    /// Demonstrations per training task.
    pub n_demos: usize,
    pub horizon: usize,
    pub split_seed: u64,
    pub expert: ExpertKind,
    /// `None` selects the family's default field of view for the
    /// blindfolded expert and no blindfold for the informed one.
    pub blindfold: Option<BlindfoldSpec>,
    /// Grow an informed dataset with fresh tasks until it has as many steps
    /// as the blindfolded dataset on the same split.
    pub match_steps: bool,
    /// Train on failed demonstrations too.
    pub keep_failures: bool,
    pub policy_seeds: Vec<u64>,
    /// Epochs at which to evaluate in addition to the last one.
    pub eval_epochs: Vec<usize>,
    pub arch: Option<ArchSpec>,
    pub hyper: Hyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            family: Family::Maze,
            size: 11,
            colors: 0,
            m_train: 100,
            m_test: 100,
            n_demos: 5,
            horizon: 500,
            split_seed: 0,
            expert: ExpertKind::Blindfolded,
            blindfold: None,
            match_steps: false,
            keep_failures: false,
            policy_seeds: vec![0, 1, 2, 3, 4],
            eval_epochs: Vec::new(),
            arch: None,
            hyper: Hyper::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn gen_params(&self) -> GenParams {
        GenParams {
            family: self.family,
            width: self.size,
            height: self.size,
            color_count: match self.family {
                Family::Maze => 0,
                Family::Keylock => self.colors.max(1),
            },
        }
    }

    pub fn blindfold_spec(&self) -> BlindfoldSpec {
        match (&self.blindfold, self.expert) {
            (Some(b), _) => b.clone(),
            (None, ExpertKind::Informed) => BlindfoldSpec::None,
            (None, _) => BlindfoldSpec::default_fov(self.family, self.size),
        }
    }

    pub fn arch_spec(&self) -> ArchSpec {
        self.arch.clone().unwrap_or_else(|| {
            let g = self.gen_params();
            ArchSpec::for_family(g.family, g.height, g.width, g.color_count)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_train == 0 || self.m_test == 0 || self.n_demos == 0 || self.horizon == 0 {
            return Err(Error::Config(
                "m_train, m_test, n_demos and horizon must be positive".into(),
            ));
        }
        if self.policy_seeds.is_empty() {
            return Err(Error::Config("at least one policy seed is required".into()));
        }
        if self.match_steps && self.expert != ExpertKind::Informed {
            return Err(Error::Config("match_steps applies to the informed expert".into()));
        }
        if self.expert == ExpertKind::BayesExact {
            return Err(Error::Unsupported(
                "the exact Bayes expert is limited to tiny enumerable task sets".into(),
            ));
        }
        self.blindfold_spec().validate()?;
        self.hyper.validate()?;
        self.arch_spec().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            // Name the enclosing table so nested mistakes read as a field path.
            let table = e.span().and_then(|s| {
                text[..s.start]
                    .lines()
                    .rev()
                    .map(str::trim)
                    .find(|l| l.starts_with('[') && l.ends_with(']'))
                    .map(|l| l.trim_matches(|c| c == '[' || c == ']').to_string())
            });
            match table {
                Some(t) => Error::Config(format!("in [{t}]: {e}")),
                None => Error::Config(e.to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn split(&self) -> Result<TaskSplit> {
        generate_split(self.gen_params(), self.m_train, self.m_test, self.split_seed)
    }
}

/// `n` demonstrations per task; demonstration `j` uses noise stream `j`.
pub fn collect(
    tasks: &[TaskSpec],
    kind: ExpertKind,
    blindfold: &BlindfoldSpec,
    n: usize,
    horizon: usize,
    split_seed: Option<u64>,
) -> Result<Dataset> {
    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(tasks.len() * n);
    for t in tasks {
        for j in 0..n {
            trajectories.push(demonstrate(t, kind, blindfold, horizon, j as u64)?.into_trajectory());
        }
    }
    Ok(Dataset::new(trajectories, split_seed))
}

/// Tasks drawn after the train and test seeds of a split: disjoint from
/// both, deterministic in the split seed.
pub fn fresh_pool(split: &TaskSplit, count: usize) -> Result<Vec<TaskSpec>> {
    let used = split.train.len() + split.test.len();
    split_seeds(split.split_seed, used + count)[used..]
        .iter()
        .map(|s| split.params.generate(*s))
        .collect()
}

/// Build the training set an experiment config describes.
pub fn build_dataset(cfg: &ExperimentConfig, split: &TaskSplit) -> Result<Dataset> {
    let raw = collect(
        &split.train,
        cfg.expert,
        &cfg.blindfold_spec(),
        cfg.n_demos,
        cfg.horizon,
        Some(split.split_seed),
    )?;
    let data = if cfg.keep_failures {
        raw
    } else {
        filter_successful(&raw)
    };
    if !cfg.match_steps {
        return Ok(data);
    }
    let bf = ExperimentConfig {
        expert: ExpertKind::Blindfolded,
        blindfold: None,
        match_steps: false,
        ..cfg.clone()
    };
    let target = build_dataset(&bf, split)?.total_steps();
    // Every fresh task adds at least one step, so this pool always suffices.
    let pool = fresh_pool(split, target.saturating_sub(data.total_steps()))?;
    matched_steps_subset(&data, target, &pool, cfg.horizon, split.split_seed)
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: PolicyParams,
    pub report: TrainReport,
    /// `(epoch, train success, test success)` at every evaluated epoch.
    pub curve: Vec<(usize, f64, f64)>,
    pub train: EvalReport,
    pub test: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    /// Train minus test success, averaged over seeds.
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub dataset_steps: usize,
    pub dataset_trajectories: usize,
    pub demo_success_rate: f64,
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

impl ExperimentResult {
    /// CSV rows of every evaluation, in run order.
    pub fn rows(&self) -> Vec<EvalRow> {
        self.runs
            .iter()
            .flat_map(|r| r.train.rows.iter().chain(&r.test.rows).cloned())
            .collect()
    }
}

pub fn summarize(runs: &[SeedRun]) -> Summary {
    let tr: Vec<f64> = runs.iter().map(|r| r.train.success_mean).collect();
    let te: Vec<f64> = runs.iter().map(|r| r.test.success_mean).collect();
    let (train_mean, train_std) = mean_std(&tr);
    let (test_mean, test_std) = mean_std(&te);
    Summary {
        train_mean,
        train_std,
        test_mean,
        test_std,
        gap: train_mean - test_mean,
    }
}

/// Train one policy per seed on `data` and evaluate on both halves of the
/// split.
pub fn train_and_evaluate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    split: &TaskSplit,
) -> Result<Vec<SeedRun>> {
    let arch = cfg.arch_spec();
    let seqs: Vec<Sequence> = data.trajectories.iter().map(Sequence::from_trajectory).collect();
    let horizon = data.trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut runs = Vec::with_capacity(cfg.policy_seeds.len());
    for &seed in &cfg.policy_seeds {
        let hyper = Hyper {
            seed,
            ..cfg.hyper.clone()
        };
        let mut curve = Vec::new();
        let last = hyper.epochs;
        let mut finals = None;
        let (params, report) = train_sequences(&seqs, &arch, &hyper, horizon, |epoch, p| {
            if epoch == last || cfg.eval_epochs.contains(&epoch) {
                let pol = [(seed, p)];
                let tr = evaluate(&cfg.run_id, epoch, "train", &pol, &split.train, cfg.horizon)?;
                let te = evaluate(&cfg.run_id, epoch, "test", &pol, &split.test, cfg.horizon)?;
                tracing::debug!(seed, epoch, train = tr.success_mean, test = te.success_mean, "eval");
                curve.push((epoch, tr.success_mean, te.success_mean));
                if epoch == last {
                    finals = Some((tr, te));
                }
            }
            Ok(())
        })?;
        let (train, test) = finals.expect("the last epoch is always evaluated");
        runs.push(SeedRun {
            seed,
            params,
            report,
            curve,
            train,
            test,
        });
    }
    Ok(runs)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let split = cfg.split()?;
    let raw_success = {
        let d = collect(
            &split.train,
            cfg.expert,
            &cfg.blindfold_spec(),
            cfg.n_demos,
            cfg.horizon,
            None,
        )?;
        d.trajectories.iter().filter(|t| t.success).count() as f64 / d.len() as f64
    };
    let data = build_dataset(cfg, &split)?;
    if data.is_empty() {
        return Err(Error::NoData("no successful demonstrations to train on".into()));
    }
    let runs = train_and_evaluate(cfg, &data, &split)?;
    Ok(ExperimentResult {
        dataset_steps: data.total_steps(),
        dataset_trajectories: data.len(),
        demo_success_rate: raw_success,
        summary: summarize(&runs),
        runs,
    })
}

/// One level of the noise-blindfold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub level: f64,
    pub demos: DemoStats,
    pub summary: Summary,
}

/// Noise-blindfold sweep: for every maximum level `P`, the frontier expert
/// demonstrates on the full (unmasked) view corrupted by noise, and
/// policies are trained on its successful demonstrations.
pub fn noise_sweep(base: &ExperimentConfig, levels: &[f64], noise_seed: u64) -> Result<Vec<NoiseRow>> {
    let split = base.split()?;
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let cfg = ExperimentConfig {
            run_id: format!("{}-noise{level}", base.run_id),
            expert: ExpertKind::Blindfolded,
            blindfold: Some(BlindfoldSpec::Noise {
                max_level: level,
                seed: noise_seed,
            }),
            match_steps: false,
            ..base.clone()
        };
        cfg.validate()?;
        let raw = collect(
            &split.train,
            cfg.expert,
            &cfg.blindfold_spec(),
            cfg.n_demos,
            cfg.horizon,
            Some(split.split_seed),
        )?;
        let demos = demo_stats(&raw, &split.train)?;
        let data = if cfg.keep_failures { raw } else { filter_successful(&raw) };
        if data.is_empty() {
            return Err(Error::NoData(format!("no successful demonstrations at noise {level}")));
        }
        let runs = train_and_evaluate(&cfg, &data, &split)?;
        tracing::info!(level, test = summarize(&runs).test_mean, "noise level done");
        rows.push(NoiseRow {
            level,
            demos,
            summary: summarize(&runs),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            size: 7,
            m_train: 4,
            m_test: 3,
            n_demos: 2,
            horizon: 60,
            policy_seeds: vec![0, 1],
            hyper: Hyper {
                epochs: 3,
                ..Hyper::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn toml_round_trip() {
        let c = tiny();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let partial = ExperimentConfig::from_toml("m_train = 7\nexpert = \"informed\"\n").unwrap();
        assert_eq!(partial.m_train, 7);
        assert_eq!(partial.blindfold_spec(), BlindfoldSpec::None);
        assert!(ExperimentConfig::from_toml("m_train = 0").is_err());
        let typo = ExperimentConfig::from_toml("[hyper]\nepoch = 3\n").unwrap_err().to_string();
        assert!(typo.contains("epoch") && typo.contains("hyper"), "{typo}");
    }

    #[test]
    fn fresh_pool_is_disjoint() {
        let split = tiny().split().unwrap();
        let pool = fresh_pool(&split, 10).unwrap();
        assert_eq!(pool.len(), 10);
        for t in &pool {
            assert!(split.find(t.seed).is_none());
        }
    }

    #[test]
    fn matched_steps_reach_blindfolded_total() {
        let c = ExperimentConfig {
            expert: ExpertKind::Informed,
            match_steps: true,
            ..tiny()
        };
        let split = c.split().unwrap();
        let ext = build_dataset(&c, &split).unwrap();
        let bf = build_dataset(&ExperimentConfig { expert: ExpertKind::Blindfolded, ..tiny() }, &split).unwrap();
        assert!(ext.total_steps() >= bf.total_steps());
        let last = ext.trajectories.last().unwrap().len();
        assert!(ext.total_steps() < bf.total_steps() + last.max(1));
    }

    #[test]
    fn noise_sweep_reports_each_level() {
        let c = ExperimentConfig {
            policy_seeds: vec![0],
            ..tiny()
        };
        let rows = noise_sweep(&c, &[0.0, 0.3], 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].demos.trajectories, 4 * 2);
        // A zero-level noise blindfold is the plain view: full-view frontier
        // demonstrations all succeed.
        assert_eq!(rows[0].demos.success_rate, 1.0);
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let a = run_experiment(&tiny()).unwrap();
        let b = run_experiment(&tiny()).unwrap();
        assert_eq!(a.runs.len(), 2);
        assert_eq!(a.rows(), b.rows());
        assert_eq!(a.rows().len(), 2 * (4 + 3));
        assert_eq!(a.summary, b.summary);
    }
}
