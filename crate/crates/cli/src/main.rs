use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bldc_core::datapipe::matched_steps_subset;
use bldc_core::evalsuite::{self, evaluate, EvalRow};
use bldc_core::experiment::{
    build_dataset, fresh_pool, noise_sweep, train_and_evaluate, ExperimentConfig,
};
use bldc_core::seqpolicy::{PolicyParams, Sequence};
use bldc_core::theory::{
    assemble_bound, gap_trend, gap_vs_m_sweep, gen_error, log_policy_class_proxy, mean_gaps,
    mutual_info_tz, Aggregation, BoundInputs, PolicyLike,
};
use bldc_core::trainer::opt_error;
use bldc_core::{BlindfoldSpec, Dataset, ExpertKind, TaskSplit};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

mod error;
mod report;

use error::{CliError, CliResult};
use report::CurveRow;

#[derive(Parser)]
#[command(name = "bldc", version, about = "Blindfolded-expert behavioral cloning lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Split seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// informed | blindfolded
    #[arg(long, global = true, value_parser = parse_expert)]
    expert: Option<ExpertKind>,
    /// none | fov:R | noise:P[:SEED] | region:T,L,B,R[;...]
    #[arg(long, global = true, value_parser = parse_blindfold)]
    blindfold: Option<BlindfoldSpec>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task split.
    Gen {
        /// Store the split under DIR/splits/ for the session service.
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Split id inside the data directory (defaults to the run id).
        #[arg(long)]
        split_id: Option<String>,
    },
    /// Collect expert demonstrations on the training tasks.
    Demo {
        /// Split file; regenerated from the config when omitted.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Grow the informed dataset to the step count of this dataset.
        #[arg(long, value_name = "DATASET")]
        match_steps: Option<PathBuf>,
    },
    /// Run the human demonstration service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = bldc_service::DATA_DIR_ENV, default_value = "data")]
        data_dir: PathBuf,
    },
    /// Train one policy per seed and evaluate it.
    Train {
        /// Training set; built from the config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Evaluate saved policies on both halves of a split.
    Eval {
        #[arg(long = "policy", required = true)]
        policies: Vec<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Epoch label written to the rows.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Exact information and generalization terms on a small task set.
    Theory {
        /// Training tasks to enumerate.
        #[arg(long, default_value_t = 16)]
        tasks: usize,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Noise streams per task for a stochastic blindfold.
        #[arg(long, default_value_t = 8)]
        noise_episodes: usize,
        #[arg(long, value_enum, default_value_t = Agg::TimeAverage)]
        aggregation: Agg,
    },
    /// Sweep training-set size or blindfold noise.
    Sweep {
        #[arg(long, value_enum)]
        kind: SweepKind,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Plot curves and tabulate results from a CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    GapM,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum Agg {
    PerStep,
    TimeAverage,
    FinalStep,
}

impl From<Agg> for Aggregation {
    fn from(a: Agg) -> Self {
        match a {
            Agg::PerStep => Aggregation::PerStep,
            Agg::TimeAverage => Aggregation::TimeAverage,
            Agg::FinalStep => Aggregation::FinalStep,
        }
    }
}

fn parse_expert(s: &str) -> Result<ExpertKind, String> {
    s.parse().map_err(|e: bldc_core::Error| e.to_string())
}

fn parse_blindfold(s: &str) -> Result<BlindfoldSpec, String> {
    let b: BlindfoldSpec = s.parse().map_err(|e: bldc_core::Error| e.to_string())?;
    b.validate().map_err(|e| e.to_string())?;
    Ok(b)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(c: &Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_toml(&text)
                .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.split_seed = s;
    }
    if let Some(e) = c.expert {
        cfg.expert = e;
    }
    if let Some(b) = &c.blindfold {
        cfg.blindfold = Some(b.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The split named on the command line, checked against the config, or the
/// config's own split.
fn load_split(cfg: &ExperimentConfig, path: Option<&Path>) -> CliResult<TaskSplit> {
    let Some(path) = path else {
        return Ok(cfg.split()?);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    let split = TaskSplit::from_text(&text)?;
    if split.params != cfg.gen_params() {
        return Err(CliError::User(format!(
            "{} holds {:?} tasks but the config describes {:?}",
            path.display(),
            split.params,
            cfg.gen_params()
        )));
    }
    Ok(split)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

fn print_json(v: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let c = &cli.common;
    match cli.command {
        Command::Serve { bind, data_dir } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(bldc_service::serve(bind, data_dir))?;
            Ok(())
        }
        Command::Report { input } => {
            let out = c.out.clone().unwrap_or_else(|| {
                input.parent().map(Path::to_path_buf).unwrap_or_default()
            });
            let (svg, table) = report::report(&input, &out)?;
            println!("{}\n{}", svg.display(), table.display());
            Ok(())
        }
        Command::Gen { data_dir, split_id } => {
            let cfg = load_config(c)?;
            let split = cfg.split()?;
            let path = match data_dir {
                Some(dir) => {
                    let id = split_id.unwrap_or_else(|| cfg.run_id.clone());
                    bldc_service::store::save_split(&dir, &id, &split)?
                }
                None => {
                    let path = c
                        .out
                        .clone()
                        .unwrap_or_else(|| format!("{}.tasksplit", cfg.run_id).into());
                    write_file(&path, split.to_text())?;
                    path
                }
            };
            println!("{}", path.display());
            Ok(())
        }
        Command::Demo { split, match_steps } => {
            let cfg = load_config(c)?;
            let split = load_split(&cfg, split.as_deref())?;
            let data = match match_steps {
                None => build_dataset(&cfg, &split)?,
                Some(target) => {
                    if cfg.expert != ExpertKind::Informed {
                        return Err(CliError::User("--match-steps needs --expert informed".into()));
                    }
                    let target = Dataset::load(&target)?.total_steps();
                    let base = build_dataset(&cfg, &split)?;
                    let pool = fresh_pool(&split, target.saturating_sub(base.total_steps()))?;
                    matched_steps_subset(&base, target, &pool, cfg.horizon, split.split_seed)?
                }
            };
            let path = c.out.clone().unwrap_or_else(|| format!("{}.bldc", cfg.run_id).into());
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            data.save(&path)?;
            tracing::info!(path = %path.display(), steps = data.total_steps(), "dataset written");
            print_json(&data.manifest())
        }
        Command::Train { dataset, split } => {
            let cfg = load_config(c)?;
            let split = load_split(&cfg, split.as_deref())?;
            let data = match dataset {
                Some(p) => Dataset::load(&p)?,
                None => build_dataset(&cfg, &split)?,
            };
            if data.is_empty() {
                return Err(CliError::User("no data: the training set is empty".into()));
            }
            let dir = c.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.run_id));
            fs::create_dir_all(&dir)?;
            write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
            let runs = train_and_evaluate(&cfg, &data, &split)?;
            let mut curve = csv::Writer::from_path(dir.join("curve.csv"))?;
            let mut rows: Vec<EvalRow> = Vec::new();
            for r in &runs {
                r.params.save(dir.join(format!("policy-seed{}.bin", r.seed)))?;
                for &(epoch, train, test) in &r.curve {
                    let loss = r.report.epochs.get(epoch.saturating_sub(1)).map_or(f64::NAN, |e| e.loss);
                    for (split, success) in [("train", train), ("test", test)] {
                        curve.serialize(CurveRow {
                            run_id: cfg.run_id.clone(),
                            seed: r.seed,
                            epoch,
                            split: split.into(),
                            success,
                            loss,
                        })?;
                    }
                }
                rows.extend(r.train.rows.iter().chain(&r.test.rows).cloned());
            }
            curve.flush()?;
            evalsuite::write_csv(&rows, fs::File::create(dir.join("eval.csv"))?, true)?;
            let summary = bldc_core::experiment::summarize(&runs);
            let out = json!({
                "run_id": cfg.run_id,
                "dataset_steps": data.total_steps(),
                "dataset_trajectories": data.len(),
                "summary": summary,
                "per_seed": runs.iter().map(|r| json!({
                    "seed": r.seed,
                    "train": r.train.success_mean,
                    "test": r.test.success_mean,
                    "final_loss": r.report.epochs.last().map(|e| e.loss),
                    "wall_clock_secs": r.report.wall_clock_secs,
                })).collect::<Vec<_>>(),
            });
            write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&out)?)?;
            print_json(&out)
        }
        Command::Eval { policies, split, epoch } => {
            let cfg = load_config(c)?;
            let split = load_split(&cfg, split.as_deref())?;
            let loaded = policies
                .iter()
                .enumerate()
                .map(|(i, p)| Ok((seed_from_name(p).unwrap_or(i as u64), PolicyParams::load(p)?)))
                .collect::<CliResult<Vec<_>>>()?;
            let pols: Vec<(u64, &PolicyParams)> = loaded.iter().map(|(s, p)| (*s, p)).collect();
            let tr = evaluate(&cfg.run_id, epoch, "train", &pols, &split.train, cfg.horizon)?;
            let te = evaluate(&cfg.run_id, epoch, "test", &pols, &split.test, cfg.horizon)?;
            let rows: Vec<EvalRow> = tr.rows.iter().chain(&te.rows).cloned().collect();
            match &c.out {
                Some(p) => {
                    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                        fs::create_dir_all(dir)?;
                    }
                    evalsuite::write_csv(&rows, fs::File::create(p)?, true)?;
                    eprintln!(
                        "train {:.3} ± {:.3}  test {:.3} ± {:.3}",
                        tr.success_mean, tr.success_std, te.success_mean, te.success_std
                    );
                }
                None => evalsuite::write_csv(&rows, std::io::stdout().lock(), true)?,
            }
            Ok(())
        }
        Command::Theory { tasks, policy, delta, noise_episodes, aggregation } => {
            let mut cfg = load_config(c)?;
            cfg.m_train = tasks;
            cfg.validate()?;
            let split = cfg.split()?;
            let prior = split.prior();
            let agg: Aggregation = aggregation.into();
            let actions = cfg.family.action_count();
            let log_class = log_policy_class_proxy(cfg.arch_spec().parameter_count());
            let bound = |eps_gen: f64, eps_opt: f64, i_tz: f64| {
                assemble_bound(BoundInputs {
                    r: 1.0,
                    horizon: cfg.horizon,
                    m: split.train.len(),
                    n: cfg.n_demos as f64,
                    actions,
                    delta,
                    eps_gen,
                    eps_opt,
                    i_tz,
                    aggregation: agg,
                    log_policy_class: log_class,
                    policy_class_is_proxy: true,
                })
            };
            let bf_blindfold = match cfg.expert {
                ExpertKind::Blindfolded => cfg.blindfold_spec(),
                _ => BlindfoldSpec::default_fov(cfg.family, cfg.size),
            };
            let mut experts = Vec::new();
            for (kind, bf) in [
                (ExpertKind::Informed, BlindfoldSpec::None),
                (ExpertKind::Blindfolded, bf_blindfold),
            ] {
                let mi = mutual_info_tz(kind, &bf, &split.train, &prior, cfg.horizon, noise_episodes)?;
                let eps_gen = gen_error(
                    &PolicyLike::Expert { kind, blindfold: bf.clone() },
                    &split.train,
                    &prior,
                    cfg.horizon,
                )?;
                let b = bound(eps_gen, 0.0, mi.value(agg))?;
                experts.push(json!({
                    "expert": kind,
                    "blindfold": bf.to_string(),
                    "mutual_information": mi.value(agg),
                    "mi_estimate": mi.estimate,
                    "gen_error": eps_gen,
                    "bound": b,
                }));
            }
            let mut out = json!({
                "tasks": split.train.len(),
                "horizon": cfg.horizon,
                "aggregation": agg,
                "experts": experts,
            });
            if let Some(p) = policy {
                let params = PolicyParams::load(&p)?;
                let data = build_dataset(&cfg, &split)?;
                let seqs: Vec<Sequence> = data.trajectories.iter().map(Sequence::from_trajectory).collect();
                let opt = opt_error(&params, &seqs, cfg.horizon)?;
                let eps_gen = gen_error(&PolicyLike::Params(&params), &split.train, &prior, cfg.horizon)?;
                let bf = cfg.blindfold_spec();
                let mi = mutual_info_tz(cfg.expert, &bf, &split.train, &prior, cfg.horizon, noise_episodes)?;
                out["policy"] = json!({
                    "path": p,
                    "expert": cfg.expert,
                    "gen_error": eps_gen,
                    "opt_error": opt,
                    "bound": bound(eps_gen, opt.per_step, mi.value(agg))?,
                });
            }
            if let Some(path) = &c.out {
                write_file(path, serde_json::to_string_pretty(&out)?)?;
            }
            print_json(&out)
        }
        Command::Sweep { kind, values } => {
            let cfg = load_config(c)?;
            let dir = c.out.clone().unwrap_or_else(|| Path::new("sweeps").join(&cfg.run_id));
            fs::create_dir_all(&dir)?;
            match kind {
                SweepKind::GapM => {
                    let ms = values
                        .iter()
                        .map(|v| {
                            (v.fract() == 0.0 && *v >= 1.0)
                                .then_some(*v as usize)
                                .ok_or_else(|| CliError::User(format!("m must be a positive integer, got {v}")))
                        })
                        .collect::<CliResult<Vec<_>>>()?;
                    let experts = [ExpertKind::Informed, ExpertKind::Blindfolded];
                    let rows = gap_vs_m_sweep(&cfg, &ms, &experts)?;
                    let mut w = csv::Writer::from_path(dir.join("gap_vs_m.csv"))?;
                    for r in &rows {
                        w.serialize(r)?;
                    }
                    w.flush()?;
                    let summary: Vec<_> = experts
                        .iter()
                        .map(|e| {
                            json!({
                                "expert": e,
                                "mean_gap": mean_gaps(&rows, *e),
                                "spearman": gap_trend(&rows, *e),
                            })
                        })
                        .collect();
                    let out = json!({ "kind": "gap-m", "experts": summary });
                    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&out)?)?;
                    print_json(&out)
                }
                SweepKind::Noise => {
                    let rows = noise_sweep(&cfg, &values, cfg.split_seed)?;
                    let mut w = csv::Writer::from_path(dir.join("noise.csv"))?;
                    w.write_record([
                        "level", "demo_success", "demo_steps", "demo_coverage", "demo_entropy",
                        "train_mean", "train_std", "test_mean", "test_std", "gap",
                    ])?;
                    for r in &rows {
                        w.write_record(
                            [
                                r.level,
                                r.demos.success_rate,
                                r.demos.mean_steps,
                                r.demos.mean_coverage,
                                r.demos.mean_entropy,
                                r.summary.train_mean,
                                r.summary.train_std,
                                r.summary.test_mean,
                                r.summary.test_std,
                                r.summary.gap,
                            ]
                            .map(|x| x.to_string()),
                        )?;
                    }
                    w.flush()?;
                    let out = json!({ "kind": "noise", "rows": rows });
                    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&out)?)?;
                    print_json(&out)
                }
            }
        }
    }
}

/// `policy-seed3.bin` -> 3.
fn seed_from_name(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let i = stem.rfind("seed")?;
    stem[i + 4..].parse().ok()
}
