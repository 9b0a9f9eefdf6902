//! Demonstration records and the on-disk dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BLDC"  u16 version  u32 manifest_len  manifest (JSON, UTF-8)
//! u32 record_count
//! repeated: u32 payload_len  payload  u32 crc32(payload)
//! ```
//!
//! A payload is `u8 family, u64 task_seed, u8 expert, u8 success,
//! u16 blindfold_len, blindfold (text form), u16 channels, u16 height,
//! u16 width, u32 steps`, then per step the observation as one byte per
//! value (`round(v * 255)`), `u8 action, f64 reward, u8 done`. Stored
//! observations are always unmasked renderings, whose values are 0 or 1, so
//! the byte encoding is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blindfold::BlindfoldSpec;
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::experts::{demonstrate, Demonstration, ExpertKind};
use crate::grid::{ActionId, Pos};
use crate::rng::SplitMix64;
use crate::worldgen::{Family, TaskSpec};

pub const MAGIC: &[u8; 4] = b"BLDC";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub action: ActionId,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub family: Family,
    pub task_seed: u64,
    pub expert: ExpertKind,
    /// The demonstrator's blindfold; metadata only, observations are unmasked.
    pub blindfold: BlindfoldSpec,
    pub success: bool,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> Vec<ActionId> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Agent cell at each logged step (before the step's action).
    pub fn agent_path(&self) -> Vec<Pos> {
        self.steps
            .iter()
            .filter_map(|s| s.obs.agent_cells().first().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCount {
    pub task_seed: u64,
    pub trajectories: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub trajectories: usize,
    pub tasks: usize,
    pub total_steps: usize,
    pub successes: usize,
    /// Per-task counts in first-appearance order; `trajectories` is the
    /// realized n for that task after any filtering.
    pub per_task: Vec<TaskCount>,
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub split_seed: Option<u64>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, split_seed: Option<u64>) -> Self {
        Self {
            trajectories,
            split_seed,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        let mut per_task: Vec<TaskCount> = Vec::new();
        for t in &self.trajectories {
            match per_task.iter_mut().find(|c| c.task_seed == t.task_seed) {
                Some(c) => {
                    c.trajectories += 1;
                    c.steps += t.len();
                }
                None => per_task.push(TaskCount {
                    task_seed: t.task_seed,
                    trajectories: 1,
                    steps: t.len(),
                }),
            }
        }
        Manifest {
            format_version: FORMAT_VERSION,
            trajectories: self.trajectories.len(),
            tasks: per_task.len(),
            total_steps: self.total_steps(),
            successes: self.trajectories.iter().filter(|t| t.success).count(),
            per_task,
            split_seed: self.split_seed,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest())
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.trajectories.len() as u32).to_le_bytes());
        for t in &self.trajectories {
            let payload = encode_trajectory(t)?;
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a BLDC dataset".into()));
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = r.u32("manifest length")? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(mlen, "manifest")?)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let count = r.u32("record count")? as usize;
        let mut trajectories = Vec::with_capacity(count);
        for index in 0..count {
            let len = r.u32("record length")? as usize;
            let payload = r.take(len, "record payload")?;
            let crc = r.u32("record checksum")?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Checksum { index });
            }
            trajectories.push(decode_trajectory(payload)?);
        }
        let ds = Dataset {
            trajectories,
            split_seed: manifest.split_seed,
        };
        if ds.manifest() != manifest {
            return Err(Error::Format("manifest disagrees with records".into()));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn encode_trajectory(t: &Trajectory) -> Result<Vec<u8>> {
    let (channels, height, width) = t
        .steps
        .first()
        .map_or((0, 0, 0), |s| (s.obs.channels, s.obs.height, s.obs.width));
    let mut out = Vec::with_capacity(32 + t.len() * (channels * height * width + 10));
    out.push(match t.family {
        Family::Maze => 0,
        Family::Keylock => 1,
    });
    out.extend_from_slice(&t.task_seed.to_le_bytes());
    out.push(t.expert.code());
    out.push(t.success as u8);
    let bf = t.blindfold.to_string();
    out.extend_from_slice(&(bf.len() as u16).to_le_bytes());
    out.extend_from_slice(bf.as_bytes());
    for d in [channels, height, width] {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    for s in &t.steps {
        if (s.obs.channels, s.obs.height, s.obs.width) != (channels, height, width) {
            return Err(Error::Shape("observation shape changes within a trajectory".into()));
        }
        for v in &s.obs.data {
            let q = (v * 255.0).round();
            if !(0.0..=255.0).contains(&q) || q / 255.0 != *v {
                return Err(Error::Format(format!(
                    "observation value {v} is not byte-representable; only unmasked renderings may be stored"
                )));
            }
            out.push(q as u8);
        }
        out.push(s.action.0);
        out.extend_from_slice(&s.reward.to_le_bytes());
        out.push(s.done as u8);
    }
    Ok(out)
}

fn decode_trajectory(payload: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::new(payload);
    let family = match r.u8("family")? {
        0 => Family::Maze,
        1 => Family::Keylock,
        f => return Err(Error::Format(format!("unknown family code {f}"))),
    };
    let task_seed = r.u64("task seed")?;
    let expert = ExpertKind::from_code(r.u8("expert")?)?;
    let success = r.u8("success")? != 0;
    let bf_len = r.u16("blindfold length")? as usize;
    let bf_text = std::str::from_utf8(r.take(bf_len, "blindfold")?)
        .map_err(|_| Error::Format("blindfold is not UTF-8".into()))?;
    let blindfold: BlindfoldSpec = bf_text.parse()?;
    let channels = r.u16("channels")? as usize;
    let height = r.u16("height")? as usize;
    let width = r.u16("width")? as usize;
    let n = r.u32("step count")? as usize;
    let size = channels * height * width;
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let raw = r.take(size, "observation")?;
        let obs = Observation {
            channels,
            height,
            width,
            data: raw.iter().map(|b| *b as f32 / 255.0).collect(),
        };
        let action = ActionId(r.u8("action")?);
        let reward = r.f64("reward")?;
        let done = r.u8("done")? != 0;
        steps.push(Step {
            obs,
            action,
            reward,
            done,
        });
    }
    if r.pos != payload.len() {
        return Err(Error::Format("trailing bytes in record".into()));
    }
    Ok(Trajectory {
        family,
        task_seed,
        expert,
        blindfold,
        success,
        steps,
    })
}

/// Keep only successful demonstrations.
pub fn filter_successful(dataset: &Dataset) -> Dataset {
    Dataset {
        trajectories: dataset
            .trajectories
            .iter()
            .filter(|t| t.success)
            .cloned()
            .collect(),
        split_seed: dataset.split_seed,
    }
}

/// Grow an informed-expert dataset with demonstrations on fresh tasks from
/// `pool` (visited in a seed-shuffled order) until its total step count
/// reaches `target_total_steps`.
pub fn matched_steps_subset(
    informed: &Dataset,
    target_total_steps: usize,
    pool: &[TaskSpec],
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    let mut out = informed.clone();
    let mut total = out.total_steps();
    if total >= target_total_steps {
        return Ok(out);
    }
    let used: Vec<u64> = informed.trajectories.iter().map(|t| t.task_seed).collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    for i in order {
        let task = &pool[i];
        if used.contains(&task.seed) {
            continue;
        }
        if let Demonstration::Success(t) =
            demonstrate(task, ExpertKind::Informed, &BlindfoldSpec::None, horizon, 0)?
        {
            total += t.len();
            out.trajectories.push(t);
            if total >= target_total_steps {
                return Ok(out);
            }
        }
    }
    Err(Error::Capacity(format!(
        "task pool exhausted at {total} of {target_total_steps} steps"
    )))
}
