//! Behavioral cloning by Adam on the sequence NLL.

use std::borrow::Borrow;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datapipe::Dataset;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::seqpolicy::{argmax_actions, grad_nll, init_params, ArchSpec, PolicyParams, Sequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub learning_rate: f64,
    /// `(optimizer step, multiplier)` pairs; the multiplier in force is the
    /// product of all entries whose step has been reached.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Trajectories per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Epochs (1-based) after which the parameters are kept in the report.
    pub checkpoint_epochs: Vec<usize>,
    /// Measure the training argmax-mismatch rate after every epoch.
    pub track_opt_error: bool,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_schedule: Vec::new(),
            batch_size: 4,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_epochs: Vec::new(),
            track_opt_error: false,
        }
    }
}

impl Hyper {
    /// Named presets. `"desk"` is the default; `"paper-C"` and `"paper-B"`
    /// carry the learning rates used for the much larger reference models.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper-C" => Ok(Self {
                learning_rate: 3e-4,
                lr_schedule: vec![(1000, 0.5), (2000, 0.5)],
                ..Self::default()
            }),
            "paper-B" => Ok(Self {
                learning_rate: 1e-5,
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown hyperparameter preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon <= 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config("epsilon must be positive, clip_norm nonnegative".into()));
        }
        if self.lr_schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("lr_schedule steps must be increasing".into()));
        }
        if self.lr_schedule.iter().any(|(_, m)| !(*m > 0.0)) {
            return Err(Error::Config("lr_schedule multipliers must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|(s, _)| *s <= step)
            .fold(self.learning_rate, |lr, (_, m)| lr * m)
    }
}

/// Argmax mismatch rate on the training demonstrations, under both
/// normalizations: by realized step count and by `trajectories × horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptError {
    pub mismatches: usize,
    pub steps: usize,
    pub per_step: f64,
    pub per_horizon: f64,
}

pub fn opt_error<S: Borrow<Sequence>>(
    params: &PolicyParams,
    data: &[S],
    horizon: usize,
) -> Result<OptError> {
    let mut mismatches = 0;
    let mut steps = 0;
    for s in data {
        let s = s.borrow();
        let pred = argmax_actions(params, s)?;
        mismatches += pred.iter().zip(&s.actions).filter(|(a, b)| a != b).count();
        steps += s.len();
    }
    let denom_h = (data.len() * horizon).max(1) as f64;
    Ok(OptError {
        mismatches,
        steps,
        per_step: if steps > 0 {
            mismatches as f64 / steps as f64
        } else {
            0.0
        },
        per_horizon: mismatches as f64 / denom_h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-step NLL over the epoch's minibatches (pre-update values).
    pub loss: f64,
    pub saturated: usize,
    pub opt_error: Option<OptError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub checkpoints: Vec<(usize, PolicyParams)>,
    pub optimizer_steps: usize,
    pub wall_clock_secs: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn update(&mut self, w: &mut [f64], g: &[f64], lr: f64, h: &Hyper) {
        self.t += 1;
        let c1 = 1.0 - h.beta1.powi(self.t);
        let c2 = 1.0 - h.beta2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g[i];
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            w[i] -= lr * mh / (vh.sqrt() + h.epsilon);
        }
    }
}

/// Train from a fresh initialization (seeded by `hyper.seed`).
pub fn train(dataset: &Dataset, arch: &ArchSpec, hyper: &Hyper) -> Result<(PolicyParams, TrainReport)> {
    let data: Vec<Sequence> = dataset.trajectories.iter().map(Sequence::from_trajectory).collect();
    let horizon = dataset.trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
    train_sequences(&data, arch, hyper, horizon, |_, _| Ok(()))
}

/// Training loop over prepared sequences. `on_epoch(epoch, params)` runs
/// after every epoch (1-based) and may abort by returning an error.
pub fn train_sequences(
    data: &[Sequence],
    arch: &ArchSpec,
    hyper: &Hyper,
    horizon: usize,
    mut on_epoch: impl FnMut(usize, &PolicyParams) -> Result<()>,
) -> Result<(PolicyParams, TrainReport)> {
    hyper.validate()?;
    let data: Vec<&Sequence> = data.iter().filter(|s| !s.is_empty()).collect();
    if data.is_empty() {
        return Err(Error::Usage("training needs at least one nonempty trajectory".into()));
    }
    let started = Instant::now();
    let mut params = init_params(arch, hyper.seed)?;
    let mut adam = Adam::new(params.weights.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = SplitMix64::from_parts(hyper.seed, 0x5eed);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(hyper.epochs),
        checkpoints: Vec::new(),
        optimizer_steps: 0,
        wall_clock_secs: 0.0,
    };
    let mut batch: Vec<&Sequence> = Vec::with_capacity(hyper.batch_size);
    for epoch in 1..=hyper.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut loss_steps = 0;
        let mut saturated = 0;
        for chunk in order.chunks(hyper.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|i| data[*i]));
            let (rep, mut g) = grad_nll(&params, &batch)?;
            if !rep.sum.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    step: report.optimizer_steps,
                });
            }
            loss_sum += rep.sum;
            loss_steps += rep.steps;
            saturated += rep.saturated;
            let scale = 1.0 / rep.steps as f64;
            let mut norm2 = 0.0;
            for v in &mut g {
                *v *= scale;
                norm2 += *v * *v;
            }
            if hyper.clip_norm > 0.0 && norm2.sqrt() > hyper.clip_norm {
                let s = hyper.clip_norm / norm2.sqrt();
                g.iter_mut().for_each(|v| *v *= s);
            }
            adam.update(&mut params.weights, &g, hyper.lr_at(report.optimizer_steps), hyper);
            report.optimizer_steps += 1;
            if params.weights.iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite {
                    epoch,
                    step: report.optimizer_steps,
                });
            }
        }
        let opt = if hyper.track_opt_error {
            Some(opt_error(&params, &data, horizon)?)
        } else {
            None
        };
        report.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / loss_steps as f64,
            saturated,
            opt_error: opt,
        });
        if hyper.checkpoint_epochs.contains(&epoch) {
            report.checkpoints.push((epoch, params.clone()));
        }
        on_epoch(epoch, &params)?;
    }
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((params, report))
}
