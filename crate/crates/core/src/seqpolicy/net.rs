//! Forward pass and backpropagation through time.
//!
//! Per step, with `e` the encoder embedding and `h` the previous state:
//!
//! ```text
//! z  = σ(Wz e + Uz h + bz)
//! r  = σ(Wr e + Ur h + br)
//! n  = tanh(Wn e + Un (r ⊙ h) + bn)
//! h' = (1 − z) ⊙ n + z ⊙ h
//! p  = softmax(Wo h' + bo)
//! ```

use super::arch::{Activation, ConvGeom, DenseGeom, Layout};
use super::SparseObs;

/// Log-probabilities below this are clamped in the loss.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone, Default)]
pub(crate) struct StepCache {
    /// Post-activation outputs of every encoder layer; the last one is `e`.
    pub acts: Vec<Vec<f64>>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub n: Vec<f64>,
    pub h: Vec<f64>,
    pub probs: Vec<f64>,
}

pub(crate) struct Net<'a> {
    pub layout: &'a Layout,
    pub w: &'a [f64],
    pub act: Activation,
    pub hidden: usize,
    pub actions: usize,
}

fn conv_forward<'i>(
    g: &ConvGeom,
    w: &[f64],
    input: impl Iterator<Item = (usize, f64)> + 'i,
    act: Activation,
) -> Vec<f64> {
    let co = g.cout;
    let mut out = vec![0.0; g.out_len()];
    for (idx, v) in input {
        let (c, r, col) = g.unflatten(idx);
        for (i, ki) in g.touched(r, g.hout) {
            for (j, kj) in g.touched(col, g.wout) {
                let wrow = g.w_off + ((c * g.k + ki) * g.k + kj) * co;
                let o = (i * g.wout + j) * co;
                axpy(v, &w[wrow..wrow + co], &mut out[o..o + co]);
            }
        }
    }
    let b = &w[g.b_off..g.b_off + co];
    for pos in out.chunks_mut(co) {
        for (y, bi) in pos.iter_mut().zip(b) {
            *y = act.apply(*y + bi);
        }
    }
    out
}

fn dense_forward(
    g: &DenseGeom,
    w: &[f64],
    input: impl Iterator<Item = (usize, f64)>,
    act: Activation,
) -> Vec<f64> {
    let mut out = w[g.b_off..g.b_off + g.out].to_vec();
    for (idx, v) in input {
        let row = g.w_off + idx * g.out;
        axpy(v, &w[row..row + g.out], &mut out);
    }
    for y in &mut out {
        *y = act.apply(*y);
    }
    out
}

fn nonzero(v: &[f64]) -> impl Iterator<Item = (usize, f64)> + '_ {
    v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, x)| (i, *x))
}

impl Net<'_> {
    pub fn encode(&self, obs: &SparseObs) -> Vec<Vec<f64>> {
        let l = self.layout;
        let framed;
        let obs = match &l.frame {
            Some(f) => {
                framed = f.apply(obs);
                &framed
            }
            None => obs,
        };
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(l.conv.len() + 1);
        let first = obs.idx.iter().zip(&obs.val).map(|(i, v)| (*i as usize, *v));
        if l.conv.is_empty() {
            acts.push(dense_forward(&l.embed, self.w, first, self.act));
            return acts;
        }
        acts.push(conv_forward(&l.conv[0], self.w, first, self.act));
        for g in &l.conv[1..] {
            let next = conv_forward(g, self.w, nonzero(acts.last().unwrap()), self.act);
            acts.push(next);
        }
        let e = dense_forward(&l.embed, self.w, nonzero(acts.last().unwrap()), self.act);
        acts.push(e);
        acts
    }

    pub fn step(&self, obs: &SparseObs, h_prev: &[f64]) -> StepCache {
        let l = self.layout;
        let hd = self.hidden;
        let ed = l.embed_dim;
        let acts = self.encode(obs);
        let e = acts.last().unwrap();
        let w = self.w;
        let mut a = w[l.gru_b..l.gru_b + 3 * hd].to_vec();
        for (row, ai) in a.iter_mut().enumerate() {
            let off = l.gru_w + row * ed;
            *ai += dot(&w[off..off + ed], e);
        }
        let mut z = vec![0.0; hd];
        let mut r = vec![0.0; hd];
        for k in 0..hd {
            let uz = l.gru_u + k * hd;
            let ur = l.gru_u + (hd + k) * hd;
            z[k] = sigmoid(a[k] + dot(&w[uz..uz + hd], h_prev));
            r[k] = sigmoid(a[hd + k] + dot(&w[ur..ur + hd], h_prev));
        }
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(x, y)| x * y).collect();
        let mut n = vec![0.0; hd];
        let mut h = vec![0.0; hd];
        for k in 0..hd {
            let un = l.gru_u + (2 * hd + k) * hd;
            n[k] = (a[2 * hd + k] + dot(&w[un..un + hd], &rh)).tanh();
            h[k] = (1.0 - z[k]) * n[k] + z[k] * h_prev[k];
        }
        let logits: Vec<f64> = (0..self.actions)
            .map(|j| {
                let off = l.head_w + j * hd;
                w[l.head_b + j] + dot(&w[off..off + hd], &h)
            })
            .collect();
        StepCache {
            acts,
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
            h,
            probs: softmax(&logits),
        }
    }

    /// Forward over a whole sequence from a zero state.
    pub fn run(&self, inputs: &[SparseObs]) -> Vec<StepCache> {
        let mut h = vec![0.0; self.hidden];
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let c = self.step(x, &h);
            h.clone_from(&c.h);
            caches.push(c);
        }
        caches
    }

    /// Accumulate the gradient of `Σ_t −log p_t[a_t]` into `grad`.
    /// Clamped steps contribute no gradient.
    pub fn backward(
        &self,
        inputs: &[SparseObs],
        actions: &[u8],
        caches: &[StepCache],
        grad: &mut [f64],
    ) {
        let l = self.layout;
        let hd = self.hidden;
        let ed = l.embed_dim;
        let w = self.w;
        let mut dh_next = vec![0.0; hd];
        let mut da = vec![0.0; 3 * hd];
        let mut de = vec![0.0; ed];
        let mut d_rh = vec![0.0; hd];
        for t in (0..caches.len()).rev() {
            let c = &caches[t];
            let a = actions[t] as usize;
            let mut dh = std::mem::take(&mut dh_next);
            if c.probs[a].ln() >= LOG_PROB_FLOOR {
                for j in 0..self.actions {
                    let dl = c.probs[j] - if j == a { 1.0 } else { 0.0 };
                    grad[l.head_b + j] += dl;
                    let off = l.head_w + j * hd;
                    axpy(dl, &c.h, &mut grad[off..off + hd]);
                    axpy(dl, &w[off..off + hd], &mut dh);
                }
            }
            // Gate pre-activation gradients.
            let mut dh_prev = vec![0.0; hd];
            for k in 0..hd {
                let dn = dh[k] * (1.0 - c.z[k]);
                let dz = dh[k] * (c.h_prev[k] - c.n[k]);
                dh_prev[k] = dh[k] * c.z[k];
                da[2 * hd + k] = dn * (1.0 - c.n[k] * c.n[k]);
                da[k] = dz * c.z[k] * (1.0 - c.z[k]);
            }
            // Candidate path through r ⊙ h.
            d_rh.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..hd {
                let dan = da[2 * hd + k];
                if dan == 0.0 {
                    continue;
                }
                let off = l.gru_u + (2 * hd + k) * hd;
                axpy(dan, &w[off..off + hd], &mut d_rh);
                for m in 0..hd {
                    grad[off + m] += dan * c.r[m] * c.h_prev[m];
                }
            }
            for k in 0..hd {
                let dr = d_rh[k] * c.h_prev[k];
                dh_prev[k] += d_rh[k] * c.r[k];
                da[hd + k] = dr * c.r[k] * (1.0 - c.r[k]);
            }
            // Update and reset gate recurrent weights.
            for row in 0..2 * hd {
                let g = da[row];
                if g == 0.0 {
                    continue;
                }
                let off = l.gru_u + row * hd;
                axpy(g, &c.h_prev, &mut grad[off..off + hd]);
                axpy(g, &w[off..off + hd], &mut dh_prev);
            }
            // Input weights and biases of all gates.
            let e = c.acts.last().unwrap();
            de.iter_mut().for_each(|v| *v = 0.0);
            for row in 0..3 * hd {
                let g = da[row];
                grad[l.gru_b + row] += g;
                if g == 0.0 {
                    continue;
                }
                let off = l.gru_w + row * ed;
                axpy(g, e, &mut grad[off..off + ed]);
                axpy(g, &w[off..off + ed], &mut de);
            }
            self.encoder_backward(&inputs[t], &c.acts, &de, grad);
            dh_next = dh_prev;
        }
    }

    fn encoder_backward(&self, obs: &SparseObs, acts: &[Vec<f64>], de: &[f64], grad: &mut [f64]) {
        let l = self.layout;
        let act = self.act;
        let framed;
        let obs = match &l.frame {
            Some(f) => {
                framed = f.apply(obs);
                &framed
            }
            None => obs,
        };
        // Gradient w.r.t. the embedding's pre-activation.
        let e = acts.last().unwrap();
        let dpre: Vec<f64> = de
            .iter()
            .zip(e)
            .map(|(d, y)| d * act.grad_from_output(*y))
            .collect();
        let g = &l.embed;
        axpy(1.0, &dpre, &mut grad[g.b_off..g.b_off + g.out]);
        if l.conv.is_empty() {
            for (i, v) in obs.idx.iter().zip(&obs.val) {
                let row = g.w_off + *i as usize * g.out;
                axpy(*v, &dpre, &mut grad[row..row + g.out]);
            }
            return;
        }
        // Embedding weights and the gradient into the last conv output.
        let below = &acts[acts.len() - 2];
        let mut dy = vec![0.0; below.len()];
        for (i, x) in below.iter().enumerate() {
            let dx_scale = act.grad_from_output(*x);
            let row = g.w_off + i * g.out;
            if *x != 0.0 {
                axpy(*x, &dpre, &mut grad[row..row + g.out]);
            }
            if dx_scale != 0.0 {
                dy[i] = dx_scale * dot(&self.w[row..row + g.out], &dpre);
            }
        }
        // dy now holds the gradient w.r.t. the pre-activation of the last
        // conv layer's outputs.
        for li in (0..l.conv.len()).rev() {
            let cg = &l.conv[li];
            let co = cg.cout;
            for pos in dy.chunks(co) {
                axpy(1.0, pos, &mut grad[cg.b_off..cg.b_off + co]);
            }
            if li == 0 {
                for (idx, v) in obs.idx.iter().zip(&obs.val) {
                    conv_weight_grad(cg, *idx as usize, *v, &dy, grad);
                }
                break;
            }
            let x = &acts[li - 1];
            let mut dx = vec![0.0; x.len()];
            for (idx, xv) in x.iter().enumerate() {
                if *xv != 0.0 {
                    conv_weight_grad(cg, idx, *xv, &dy, grad);
                }
                let s = act.grad_from_output(*xv);
                if s == 0.0 {
                    continue;
                }
                let (c, r, col) = cg.unflatten(idx);
                let mut acc = 0.0;
                for (i, ki) in cg.touched(r, cg.hout) {
                    for (j, kj) in cg.touched(col, cg.wout) {
                        let wrow = cg.w_off + ((c * cg.k + ki) * cg.k + kj) * co;
                        let o = (i * cg.wout + j) * co;
                        acc += dot(&self.w[wrow..wrow + co], &dy[o..o + co]);
                    }
                }
                dx[idx] = s * acc;
            }
            dy = dx;
        }
    }
}

#[inline]
fn conv_weight_grad(g: &ConvGeom, idx: usize, v: f64, dy: &[f64], grad: &mut [f64]) {
    let co = g.cout;
    let (c, r, col) = g.unflatten(idx);
    for (i, ki) in g.touched(r, g.hout) {
        for (j, kj) in g.touched(col, g.wout) {
            let wrow = g.w_off + ((c * g.k + ki) * g.k + kj) * co;
            let o = (i * g.wout + j) * co;
            axpy(v, &dy[o..o + co], &mut grad[wrow..wrow + co]);
        }
    }
}
