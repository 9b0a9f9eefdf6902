use serde::{Deserialize, Serialize};

use crate::env::ObsLayout;
use crate::error::{Error, Result};
use super::SparseObs;
use crate::worldgen::Family;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderSpec {
    /// One affine layer on the flattened observation.
    Flatten { width: usize },
    /// Convolutions, then one affine layer to `width`.
    Conv { layers: Vec<ConvSpec>, width: usize },
}

/// Coordinate frame the encoder sees the observation in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// The grid as rendered.
    #[default]
    Absolute,
    /// The grid shifted so the agent sits at the centre of a
    /// `(2h−1)×(2w−1)` canvas; cells off the grid read as all-zero. Lossless:
    /// every cell of the grid lands on the canvas wherever the agent is.
    Egocentric,
}

/// Architecture descriptor. Together with 64-bit weights it fixes the policy
/// class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub obs_channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub frame: Frame,
    pub encoder: EncoderSpec,
    pub activation: Activation,
    pub hidden: usize,
    pub actions: usize,
}

impl ArchSpec {
    /// Default policy for a family: an agent-centred frame, two stride-2
    /// convolutions, and an affine embedding feeding the recurrent cell.
    pub fn for_family(family: Family, height: usize, width: usize, colors: u8) -> Self {
        ArchSpec {
            obs_channels: ObsLayout::new(colors).channels(),
            height,
            width,
            frame: Frame::Egocentric,
            encoder: EncoderSpec::Conv {
                layers: vec![
                    ConvSpec {
                        channels: 8,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                    ConvSpec {
                        channels: 16,
                        kernel: 3,
                        stride: 2,
                        padding: 1,
                    },
                ],
                width: 64,
            },
            activation: Activation::Relu,
            hidden: 64,
            actions: family.action_count(),
        }
    }

    pub fn flatten(
        obs_channels: usize,
        height: usize,
        width: usize,
        embed: usize,
        hidden: usize,
        actions: usize,
    ) -> Self {
        ArchSpec {
            obs_channels,
            height,
            width,
            frame: Frame::Absolute,
            encoder: EncoderSpec::Flatten { width: embed },
            activation: Activation::Relu,
            hidden,
            actions,
        }
    }

    /// Length of the flattened raw observation.
    pub fn input_len(&self) -> usize {
        self.obs_channels * self.height * self.width
    }

    /// Spatial size of the encoder's input after framing.
    pub fn canvas(&self) -> (usize, usize) {
        match self.frame {
            Frame::Absolute => (self.height, self.width),
            Frame::Egocentric => (2 * self.height - 1, 2 * self.width - 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("observation dimensions must be positive".into()));
        }
        if self.hidden == 0 || self.actions == 0 {
            return Err(Error::Config("hidden size and action count must be positive".into()));
        }
        match &self.encoder {
            EncoderSpec::Flatten { width } if *width == 0 => {
                return Err(Error::Config("encoder width must be positive".into()))
            }
            EncoderSpec::Conv { layers, width } => {
                if *width == 0 {
                    return Err(Error::Config("encoder width must be positive".into()));
                }
                let (mut h, mut w) = self.canvas();
                for (i, l) in layers.iter().enumerate() {
                    if l.channels == 0 || l.kernel == 0 || l.stride == 0 {
                        return Err(Error::Config(format!("conv layer {i} has a zero size")));
                    }
                    if h + 2 * l.padding < l.kernel || w + 2 * l.padding < l.kernel {
                        return Err(Error::Config(format!(
                            "conv layer {i}: kernel {} does not fit a {h}x{w} input",
                            l.kernel
                        )));
                    }
                    h = (h + 2 * l.padding - l.kernel) / l.stride + 1;
                    w = (w + 2 * l.padding - l.kernel) / l.stride + 1;
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub hin: usize,
    pub win: usize,
    pub cout: usize,
    pub hout: usize,
    pub wout: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    /// Input stored channel-major (the raw observation) rather than
    /// position-major (every hidden activation).
    pub input_chw: bool,
    pub w_off: usize,
    pub b_off: usize,
}

impl ConvGeom {
    pub fn out_len(&self) -> usize {
        self.cout * self.hout * self.wout
    }

    /// (channel, row, col) of a flat input index.
    #[inline]
    pub fn unflatten(&self, idx: usize) -> (usize, usize, usize) {
        if self.input_chw {
            let plane = self.hin * self.win;
            (idx / plane, (idx % plane) / self.win, idx % self.win)
        } else {
            let pos = idx / self.cin;
            (idx % self.cin, pos / self.win, pos % self.win)
        }
    }

    /// Output rows (or columns) touched by input coordinate `x`, each with
    /// the kernel offset it uses.
    #[inline]
    pub fn touched(&self, x: usize, out: usize) -> impl Iterator<Item = (usize, usize)> {
        let (k, s, p) = (self.k, self.s, self.p);
        let hi = (x + p) / s;
        let lo = (x + p + 1).saturating_sub(k).div_ceil(s);
        (lo..=hi.min(out.saturating_sub(1)))
            .filter(move |o| o * s + k > x + p && o * s <= x + p)
            .map(move |o| (o, x + p - o * s))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DenseGeom {
    pub inp: usize,
    pub out: usize,
    pub w_off: usize,
    pub b_off: usize,
}

/// Offsets of every parameter block in the flat weight vector.
///
/// Encoder weights are stored input-major (`[in][out]`) so that sparse
/// inputs scatter into contiguous rows; recurrent and head matrices are
/// stored output-major (`[out][in]`).
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub frame: Option<Reframe>,
    pub conv: Vec<ConvGeom>,
    pub embed: DenseGeom,
    /// Input weights of the update, reset and candidate gates, `[3H][E]`.
    pub gru_w: usize,
    /// Recurrent weights, `[3H][H]`.
    pub gru_u: usize,
    pub gru_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub embed_dim: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &ArchSpec) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let mut conv = Vec::new();
        let (ch, cw) = arch.canvas();
        let (embed_in, embed_dim) = match &arch.encoder {
            EncoderSpec::Flatten { width } => (arch.obs_channels * ch * cw, *width),
            EncoderSpec::Conv { layers, width } => {
                let (mut c, mut h, mut w) = (arch.obs_channels, ch, cw);
                for (i, l) in layers.iter().enumerate() {
                    let hout = (h + 2 * l.padding - l.kernel) / l.stride + 1;
                    let wout = (w + 2 * l.padding - l.kernel) / l.stride + 1;
                    let w_off = take(c * l.kernel * l.kernel * l.channels);
                    let b_off = take(l.channels);
                    conv.push(ConvGeom {
                        cin: c,
                        hin: h,
                        win: w,
                        cout: l.channels,
                        hout,
                        wout,
                        k: l.kernel,
                        s: l.stride,
                        p: l.padding,
                        input_chw: i == 0,
                        w_off,
                        b_off,
                    });
                    (c, h, w) = (l.channels, hout, wout);
                }
                (c * h * w, *width)
            }
        };
        let embed = DenseGeom {
            inp: embed_in,
            out: embed_dim,
            w_off: take(embed_in * embed_dim),
            b_off: take(embed_dim),
        };
        let h = arch.hidden;
        let gru_w = take(3 * h * embed_dim);
        let gru_u = take(3 * h * h);
        let gru_b = take(3 * h);
        let head_w = take(arch.actions * h);
        let head_b = take(arch.actions);
        let frame = (arch.frame == Frame::Egocentric).then_some(Reframe {
            height: arch.height,
            width: arch.width,
        });
        Layout {
            frame,
            conv,
            embed,
            gru_w,
            gru_u,
            gru_b,
            head_w,
            head_b,
            embed_dim,
            total: off,
        }
    }
}

/// Index map from the rendered grid onto the agent-centred canvas.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Reframe {
    pub height: usize,
    pub width: usize,
}

impl Reframe {
    /// Agent cell: the strongest agent-channel entry, the grid centre if the
    /// channel is empty.
    fn agent(&self, obs: &SparseObs) -> (usize, usize) {
        let plane = self.height * self.width;
        let lo = (ObsLayout::AGENT * plane) as u32;
        let hi = lo + plane as u32;
        let mut best: Option<(u32, f64)> = None;
        for (i, v) in obs.idx.iter().zip(&obs.val) {
            if (lo..hi).contains(i) && best.is_none_or(|(_, bv)| *v > bv) {
                best = Some((*i, *v));
            }
        }
        match best {
            Some((i, _)) => {
                let cell = (i - lo) as usize;
                (cell / self.width, cell % self.width)
            }
            None => (self.height / 2, self.width / 2),
        }
    }

    pub fn apply(&self, obs: &SparseObs) -> SparseObs {
        let (h, w) = (self.height, self.width);
        let (ar, ac) = self.agent(obs);
        let (ch, cw) = (2 * h - 1, 2 * w - 1);
        let idx = obs
            .idx
            .iter()
            .map(|i| {
                let i = *i as usize;
                let (c, cell) = (i / (h * w), i % (h * w));
                let (r, col) = (cell / w, cell % w);
                (c * ch * cw + (r + h - 1 - ar) * cw + (col + w - 1 - ac)) as u32
            })
            .collect();
        SparseObs {
            idx,
            val: obs.val.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_conv_shapes() {
        let a = ArchSpec::for_family(Family::Maze, 11, 11, 0);
        a.validate().unwrap();
        let l = Layout::new(&a);
        assert_eq!(a.canvas(), (21, 21));
        assert_eq!((l.conv[0].hout, l.conv[0].wout), (11, 11));
        assert_eq!((l.conv[1].hout, l.conv[1].wout), (6, 6));
        assert_eq!(l.embed.inp, 16 * 36);
        assert_eq!(l.total, a.parameter_count());
    }

    #[test]
    fn reframe_centres_agent() {
        let (h, w) = (5, 7);
        let f = Reframe { height: h, width: w };
        let plane = (h * w) as u32;
        // Agent at (4, 1), a wall at (0, 6).
        let agent = ObsLayout::AGENT as u32 * plane + 4 * 7 + 1;
        let obs = SparseObs {
            idx: vec![6, agent],
            val: vec![1.0, 1.0],
        };
        let out = f.apply(&obs);
        let (ch, cw) = (9u32, 13u32);
        let at = |c: u32, r: u32, col: u32| c * ch * cw + r * cw + col;
        assert_eq!(out.idx, vec![at(0, 0, 11), at(ObsLayout::AGENT as u32, 4, 6)]);
    }

    #[test]
    fn touched_matches_brute_force() {
        for (k, s, p, n_in) in [(3, 2, 1, 11), (3, 1, 0, 5), (2, 2, 0, 6), (5, 3, 2, 9)] {
            let out = (n_in + 2 * p - k) / s + 1;
            let g = ConvGeom {
                cin: 1,
                hin: n_in,
                win: n_in,
                cout: 1,
                hout: out,
                wout: out,
                k,
                s,
                p,
                input_chw: true,
                w_off: 0,
                b_off: 0,
            };
            for x in 0..n_in {
                let got: Vec<_> = g.touched(x, out).collect();
                let want: Vec<_> = (0..out)
                    .flat_map(|o| (0..k).map(move |kk| (o, kk)))
                    .filter(|(o, kk)| o * s + kk == x + p)
                    .collect();
                assert_eq!(got, want, "k{k} s{s} p{p} x{x}");
            }
        }
    }

    #[test]
    fn rejects_oversized_kernel() {
        let mut a = ArchSpec::for_family(Family::Maze, 5, 5, 0);
        a.encoder = EncoderSpec::Conv {
            layers: vec![ConvSpec {
                channels: 2,
                kernel: 10,
                stride: 1,
                padding: 0,
            }],
            width: 4,
        };
        assert!(matches!(a.validate(), Err(Error::Config(_))));
    }
}
