//! Recurrent history policy: encoder, gated recurrent cell, softmax head.

mod arch;
mod net;

use std::borrow::Borrow;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use arch::{Activation, ArchSpec, ConvSpec, EncoderSpec, Frame};
pub use net::LOG_PROB_FLOOR;

use crate::datapipe::Trajectory;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::grid::ActionId;
use crate::rng::SplitMix64;
use arch::Layout;
use net::Net;

pub type HiddenState = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: ArchSpec,
    pub weights: Vec<f64>,
    pub init_seed: u64,
}

/// Nonzero entries of a flattened (channel-major) observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseObs {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseObs {
    pub fn from_observation(obs: &Observation) -> Self {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (i, v) in obs.data.iter().enumerate() {
            if *v != 0.0 {
                idx.push(i as u32);
                val.push(*v as f64);
            }
        }
        Self { idx, val }
    }
}

/// A trajectory prepared for the network: sparse inputs and action ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<SparseObs>,
    pub actions: Vec<u8>,
}

impl Sequence {
    pub fn from_trajectory(t: &Trajectory) -> Self {
        Self {
            inputs: t
                .steps
                .iter()
                .map(|s| SparseObs::from_observation(&s.obs))
                .collect(),
            actions: t.steps.iter().map(|s| s.action.0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Σ over trajectories and steps of −log π(a | history).
    pub sum: f64,
    pub steps: usize,
    pub mean: f64,
    /// Steps whose log-probability hit the clamp.
    pub saturated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Argmax,
    Sample,
}

fn fill_uniform(w: &mut [f64], fan_in: usize, rng: &mut SplitMix64) {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt().min(0.9);
    for v in w {
        *v = rng.uniform(-bound, bound);
    }
}

/// Rows of a random `n × n` matrix, orthonormalized by modified Gram–Schmidt
/// in row order. A row that collapses numerically is redrawn.
fn orthogonal(n: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    let mut i = 0;
    while i < n {
        let mut row: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for j in 0..i {
            let prev = &m[j * n..(j + 1) * n];
            let d: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in row.iter_mut().zip(prev) {
                *x -= d * p;
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        for (k, x) in row.iter().enumerate() {
            m[i * n + k] = x / norm;
        }
        i += 1;
    }
    m
}

/// Deterministic initialization: every weight matrix uniform on
/// `±min(√(3/fan_in), 0.9)`, biases zero, and each gate's recurrent block an
/// orthonormal matrix from Gram–Schmidt on uniform draws.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<PolicyParams> {
    arch.validate()?;
    let l = Layout::new(arch);
    let mut w = vec![0.0; l.total];
    let mut rng = SplitMix64::new(seed);
    for g in &l.conv {
        let n = g.cin * g.k * g.k * g.cout;
        fill_uniform(&mut w[g.w_off..g.w_off + n], g.cin * g.k * g.k, &mut rng);
    }
    let e = &l.embed;
    fill_uniform(&mut w[e.w_off..e.w_off + e.inp * e.out], e.inp, &mut rng);
    let hd = arch.hidden;
    fill_uniform(
        &mut w[l.gru_w..l.gru_w + 3 * hd * l.embed_dim],
        l.embed_dim,
        &mut rng,
    );
    for gate in 0..3 {
        let block = orthogonal(hd, &mut rng);
        let off = l.gru_u + gate * hd * hd;
        w[off..off + hd * hd].copy_from_slice(&block);
    }
    fill_uniform(&mut w[l.head_w..l.head_w + arch.actions * hd], hd, &mut rng);
    Ok(PolicyParams {
        arch: arch.clone(),
        weights: w,
        init_seed: seed,
    })
}

impl PolicyParams {
    pub fn zeros(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch: arch.clone(),
            weights: vec![0.0; arch.parameter_count()],
            init_seed: 0,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len()
    }

    pub fn initial_hidden(&self) -> HiddenState {
        vec![0.0; self.arch.hidden]
    }

    fn check(&self) -> Result<Layout> {
        let l = Layout::new(&self.arch);
        if l.total != self.weights.len() {
            return Err(Error::Shape(format!(
                "architecture needs {} weights, got {}",
                l.total,
                self.weights.len()
            )));
        }
        Ok(l)
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        let a = &self.arch;
        if (obs.channels, obs.height, obs.width) != (a.obs_channels, a.height, a.width) {
            return Err(Error::Usage(format!(
                "observation is {}x{}x{}, policy expects {}x{}x{}",
                obs.channels, obs.height, obs.width, a.obs_channels, a.height, a.width
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, s: &Sequence) -> Result<()> {
        if s.inputs.len() != s.actions.len() {
            return Err(Error::Usage("sequence inputs and actions differ in length".into()));
        }
        let n = self.arch.input_len() as u32;
        for x in &s.inputs {
            if x.idx.iter().any(|i| *i >= n) {
                return Err(Error::Usage("sequence input index out of range".into()));
            }
        }
        if s.actions.iter().any(|a| *a as usize >= self.arch.actions) {
            return Err(Error::Usage("sequence action out of range".into()));
        }
        Ok(())
    }

    fn net<'a>(&'a self, l: &'a Layout) -> Net<'a> {
        Net {
            layout: l,
            w: &self.weights,
            act: self.arch.activation,
            hidden: self.arch.hidden,
            actions: self.arch.actions,
        }
    }
}

/// One recurrent step: the action distribution for this observation and the
/// next hidden state.
pub fn forward(
    params: &PolicyParams,
    obs: &Observation,
    hidden: &HiddenState,
) -> Result<(Vec<f64>, HiddenState)> {
    params.check_obs(obs)?;
    forward_sparse(params, &SparseObs::from_observation(obs), hidden)
}

pub fn forward_sparse(
    params: &PolicyParams,
    obs: &SparseObs,
    hidden: &HiddenState,
) -> Result<(Vec<f64>, HiddenState)> {
    let l = params.check()?;
    if hidden.len() != params.arch.hidden {
        return Err(Error::Usage(format!(
            "hidden state has {} entries, policy expects {}",
            hidden.len(),
            params.arch.hidden
        )));
    }
    let c = params.net(&l).step(obs, hidden);
    Ok((c.probs, c.h))
}

fn step_loss(p: f64) -> (f64, bool) {
    let lp = p.ln();
    if lp < LOG_PROB_FLOOR {
        (-LOG_PROB_FLOOR, true)
    } else {
        (-lp, false)
    }
}

/// Behavioral-cloning negative log-likelihood, hidden state reset per
/// trajectory.
pub fn nll_loss<S: Borrow<Sequence>>(params: &PolicyParams, batch: &[S]) -> Result<LossReport> {
    loss_and_maybe_grad(params, batch, false).map(|(r, _)| r)
}

/// Loss and its exact gradient by full backpropagation through time.
pub fn grad_nll<S: Borrow<Sequence>>(
    params: &PolicyParams,
    batch: &[S],
) -> Result<(LossReport, Vec<f64>)> {
    loss_and_maybe_grad(params, batch, true)
}

fn loss_and_maybe_grad<S: Borrow<Sequence>>(
    params: &PolicyParams,
    batch: &[S],
    want_grad: bool,
) -> Result<(LossReport, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Usage("loss needs a nonempty batch".into()));
    }
    let l = params.check()?;
    let net = params.net(&l);
    let mut grad = if want_grad {
        vec![0.0; l.total]
    } else {
        Vec::new()
    };
    let mut rep = LossReport {
        sum: 0.0,
        steps: 0,
        mean: 0.0,
        saturated: 0,
    };
    for s in batch {
        let s = s.borrow();
        params.check_sequence(s)?;
        let caches = net.run(&s.inputs);
        for (c, a) in caches.iter().zip(&s.actions) {
            let (loss, sat) = step_loss(c.probs[*a as usize]);
            rep.sum += loss;
            rep.saturated += sat as usize;
        }
        rep.steps += s.len();
        if want_grad {
            net.backward(&s.inputs, &s.actions, &caches, &mut grad);
        }
    }
    rep.mean = if rep.steps > 0 {
        rep.sum / rep.steps as f64
    } else {
        0.0
    };
    Ok((rep, grad))
}

/// Lowest index among the maximal entries.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn act(
    params: &PolicyParams,
    obs: &Observation,
    hidden: &HiddenState,
    mode: ActMode,
    rng: &mut SplitMix64,
) -> Result<(ActionId, HiddenState)> {
    let (p, h) = forward(params, obs, hidden)?;
    let a = match mode {
        ActMode::Argmax => argmax(&p),
        ActMode::Sample => rng.categorical(&p),
    };
    Ok((ActionId(a as u8), h))
}

/// Argmax action per step along a sequence (hidden state carried through).
pub fn argmax_actions(params: &PolicyParams, s: &Sequence) -> Result<Vec<u8>> {
    let l = params.check()?;
    params.check_sequence(s)?;
    let caches = params.net(&l).run(&s.inputs);
    Ok(caches.iter().map(|c| argmax(&c.probs) as u8).collect())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BLDP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchSpec,
    init_seed: u64,
    parameter_count: usize,
}

impl PolicyParams {
    /// `"BLDP"`, u16 version, u32 header length, JSON header (architecture,
    /// init seed, parameter count), then the weights as little-endian f64.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let header = serde_json::to_vec(&CheckpointHeader {
            arch: self.arch.clone(),
            init_seed: self.init_seed,
            parameter_count: self.weights.len(),
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(10 + header.len() + 8 * self.weights.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 10 || &b[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a policy checkpoint".into()));
        }
        let version = u16::from_le_bytes([b[4], b[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(b[6..10].try_into().unwrap()) as usize;
        let body = b
            .get(10..10 + hlen)
            .ok_or_else(|| Error::Truncated("checkpoint header".into()))?;
        let h: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
        let rest = &b[10 + hlen..];
        if rest.len() != 8 * h.parameter_count {
            return Err(Error::Truncated(format!(
                "checkpoint declares {} weights but holds {} bytes",
                h.parameter_count,
                rest.len()
            )));
        }
        let weights = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let p = PolicyParams {
            arch: h.arch,
            weights,
            init_seed: h.init_seed,
        };
        p.check()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::file(path, e))?)
    }
}

#[cfg(test)]
mod tests;
