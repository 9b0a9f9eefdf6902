//! Information bottlenecks applied to the demonstrator's view.
//!
//! Every operator maps an observation to an observation of the same shape.
//! Hidden cells have all content channels zeroed and the mask channel set.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::grid::Pos;
use crate::rng::SplitMix64;
use crate::worldgen::Family;

/// Inclusive cell rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Rect {
    pub fn contains(&self, p: Pos) -> bool {
        (self.top..=self.bottom).contains(&p.row) && (self.left..=self.right).contains(&p.col)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlindfoldSpec {
    #[default]
    None,
    /// Only cells within Chebyshev distance `radius` of the agent are visible.
    Fov { radius: usize },
    /// Additive uniform noise; `max_level` is in normalized `[0, 1]` units.
    Noise {
        max_level: f64,
        #[serde(default)]
        seed: u64,
    },
    Region { rects: Vec<Rect> },
}

impl BlindfoldSpec {
    /// Field-of-view window for a level of the given width: a window whose
    /// diameter is `ceil(width / 8)` cells for mazes and `ceil(width / 6)`
    /// for keylock levels, i.e. radius half that, at least 1.
    pub fn default_fov(family: Family, width: usize) -> Self {
        let frac = match family {
            Family::Maze => 8,
            Family::Keylock => 6,
        };
        BlindfoldSpec::Fov {
            radius: (width.div_ceil(frac) / 2).max(1),
        }
    }

    /// Convert a max-noise level on the 0–255 pixel scale.
    pub fn noise_from_pixels(level: f64, seed: u64) -> Self {
        BlindfoldSpec::Noise {
            max_level: level / 255.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BlindfoldSpec::Fov { radius } if *radius < 1 => {
                Err(Error::Config("fov radius must be at least 1".into()))
            }
            BlindfoldSpec::Noise { max_level, .. }
                if !(0.0..=1.0).contains(max_level) || max_level.is_nan() =>
            {
                Err(Error::Config(format!(
                    "noise level must lie in [0, 1], got {max_level}"
                )))
            }
            BlindfoldSpec::Region { rects }
                if rects.iter().any(|r| r.top > r.bottom || r.left > r.right) =>
            {
                Err(Error::Config("region rectangle with inverted corners".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, BlindfoldSpec::Noise { max_level, .. } if *max_level > 0.0)
    }

    /// Whether the operator can hide or corrupt anything at all.
    pub fn is_identity(&self) -> bool {
        match self {
            BlindfoldSpec::None => true,
            BlindfoldSpec::Noise { max_level, .. } => *max_level == 0.0,
            BlindfoldSpec::Region { rects } => rects.is_empty(),
            BlindfoldSpec::Fov { .. } => false,
        }
    }

    /// Noise stream for one step of one episode: a fresh generator derived
    /// from `(seed, task_seed, episode, step)`.
    pub fn step_rng(&self, task_seed: u64, episode: u64, step: usize) -> SplitMix64 {
        let seed = match self {
            BlindfoldSpec::Noise { seed, .. } => *seed,
            _ => 0,
        };
        let base = SplitMix64::from_parts(seed, task_seed);
        SplitMix64::from_parts(
            base.clone().next_u64() ^ episode.rotate_left(32),
            step as u64,
        )
    }

    pub fn apply(&self, obs: &Observation, agent: Pos, rng: &mut SplitMix64) -> Result<Observation> {
        self.validate()?;
        let layout = obs.layout();
        let mask_ch = layout.mask();
        match self {
            BlindfoldSpec::None => Ok(obs.clone()),
            BlindfoldSpec::Fov { radius } => Ok(hide_where(obs, mask_ch, |p| {
                p.chebyshev(agent) > *radius
            })),
            BlindfoldSpec::Region { rects } => {
                Ok(hide_where(obs, mask_ch, |p| rects.iter().any(|r| r.contains(p))))
            }
            BlindfoldSpec::Noise { max_level, .. } => {
                let mut out = obs.clone();
                let level = rng.uniform(0.0, *max_level);
                let n = obs.cells();
                for ch in 0..obs.channels {
                    if ch == mask_ch {
                        continue;
                    }
                    for v in &mut out.data[ch * n..(ch + 1) * n] {
                        let noisy = *v as f64 + rng.uniform(0.0, level);
                        *v = noisy.clamp(0.0, 1.0) as f32;
                    }
                }
                Ok(out)
            }
        }
    }
}

fn hide_where(obs: &Observation, mask_ch: usize, hidden: impl Fn(Pos) -> bool) -> Observation {
    let mut out = obs.clone();
    for r in 0..obs.height {
        for c in 0..obs.width {
            let p = Pos::new(r, c);
            if hidden(p) {
                for ch in 0..obs.channels {
                    out.set(ch, p, if ch == mask_ch { 1.0 } else { 0.0 });
                }
            }
        }
    }
    out
}

impl fmt::Display for BlindfoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlindfoldSpec::None => f.write_str("none"),
            BlindfoldSpec::Fov { radius } => write!(f, "fov:{radius}"),
            BlindfoldSpec::Noise { max_level, seed } => write!(f, "noise:{max_level}:{seed}"),
            BlindfoldSpec::Region { rects } => {
                f.write_str("region:")?;
                for (i, r) in rects.iter().enumerate() {
                    if i > 0 {
                        f.write_str(";")?;
                    }
                    write!(f, "{},{},{},{}", r.top, r.left, r.bottom, r.right)?;
                }
                Ok(())
            }
        }
    }
}

/// `none`, `fov:<radius>`, `noise:<level>[:<seed>]`, or
/// `region:<top>,<left>,<bottom>,<right>[;...]`.
impl FromStr for BlindfoldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse blindfold {s:?}"));
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let spec = match kind {
            "none" => BlindfoldSpec::None,
            "fov" => BlindfoldSpec::Fov {
                radius: rest.parse().map_err(|_| bad())?,
            },
            "noise" => {
                let (level, seed) = rest.split_once(':').unwrap_or((rest, "0"));
                BlindfoldSpec::Noise {
                    max_level: level.parse().map_err(|_| bad())?,
                    seed: seed.parse().map_err(|_| bad())?,
                }
            }
            "region" => {
                let rects = rest
                    .split(';')
                    .filter(|r| !r.is_empty())
                    .map(|r| {
                        let v: Vec<usize> = r
                            .split(',')
                            .map(|x| x.parse().map_err(|_| bad()))
                            .collect::<Result<_>>()?;
                        match v[..] {
                            [top, left, bottom, right] => Ok(Rect {
                                top,
                                left,
                                bottom,
                                right,
                            }),
                            _ => Err(bad()),
                        }
                    })
                    .collect::<Result<_>>()?;
                BlindfoldSpec::Region { rects }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}
