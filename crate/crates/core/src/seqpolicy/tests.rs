use super::*;
use crate::env::ObsLayout;

fn small_conv(hidden: usize) -> ArchSpec {
    ArchSpec {
        obs_channels: 3,
        height: 5,
        width: 5,
        frame: Frame::Absolute,
        encoder: EncoderSpec::Conv {
            layers: vec![
                ConvSpec {
                    channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                ConvSpec {
                    channels: 3,
                    kernel: 2,
                    stride: 1,
                    padding: 0,
                },
            ],
            width: 6,
        },
        activation: Activation::Relu,
        hidden,
        actions: 4,
    }
}

fn random_sequence(arch: &ArchSpec, len: usize, rng: &mut SplitMix64) -> Sequence {
    let n = arch.input_len();
    let inputs = (0..len)
        .map(|_| {
            let dense: Vec<f64> = (0..n)
                .map(|_| if rng.unit_f64() < 0.4 { rng.unit_f64() } else { 0.0 })
                .collect();
            dense_to_sparse(&dense)
        })
        .collect();
    let actions = (0..len).map(|_| rng.index(arch.actions) as u8).collect();
    Sequence { inputs, actions }
}

fn dense_to_sparse(d: &[f64]) -> SparseObs {
    let mut s = SparseObs {
        idx: vec![],
        val: vec![],
    };
    for (i, v) in d.iter().enumerate() {
        if *v != 0.0 {
            s.idx.push(i as u32);
            s.val.push(*v);
        }
    }
    s
}

fn sparse_to_dense(s: &SparseObs, n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n];
    for (i, v) in s.idx.iter().zip(&s.val) {
        d[*i as usize] = *v;
    }
    d
}

/// Straight-line restatement of the network: dense loops, explicit gate
/// formulas, parameter blocks walked in declaration order.
/// Dense agent-centred copy: canvas cell `(r + h−1−ar, c + w−1−ac)` holds
/// grid cell `(r, c)`, with the agent at the largest nonzero agent-plane entry.
fn oracle_frame(arch: &ArchSpec, x: &[f64]) -> (Vec<f64>, usize, usize) {
    let (h, w, ch) = (arch.height, arch.width, arch.obs_channels);
    if arch.frame == Frame::Absolute {
        return (x.to_vec(), h, w);
    }
    let plane = &x[ObsLayout::AGENT * h * w..(ObsLayout::AGENT + 1) * h * w];
    let mut agent = (h / 2, w / 2);
    let mut best = f64::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            let v = plane[r * w + c];
            if v != 0.0 && v > best {
                best = v;
                agent = (r, c);
            }
        }
    }
    let (hc, wc) = (2 * h - 1, 2 * w - 1);
    let mut out = vec![0.0; ch * hc * wc];
    for k in 0..ch {
        for r in 0..h {
            for c in 0..w {
                let (rr, cc) = (r + h - 1 - agent.0, c + w - 1 - agent.1);
                out[k * hc * wc + rr * wc + cc] = x[k * h * w + r * w + c];
            }
        }
    }
    (out, hc, wc)
}

fn oracle_step(arch: &ArchSpec, w: &[f64], x: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut off = 0usize;
    let mut take = |n: usize| {
        let s = off;
        off += n;
        s..s + n
    };
    let act = |v: f64| match arch.activation {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Tanh => v.tanh(),
    };
    let (x, h0, w0) = oracle_frame(arch, x);
    let (feat, embed_w) = match &arch.encoder {
        EncoderSpec::Flatten { width } => (x.to_vec(), *width),
        EncoderSpec::Conv { layers, width } => {
            // Work in [c][r][col] throughout, converting at the end.
            let (mut c_in, mut hh, mut ww) = (arch.obs_channels, h0, w0);
            let mut cur = x.to_vec();
            for l in layers {
                let ho = (hh + 2 * l.padding - l.kernel) / l.stride + 1;
                let wo = (ww + 2 * l.padding - l.kernel) / l.stride + 1;
                let wr = take(c_in * l.kernel * l.kernel * l.channels);
                let br = take(l.channels);
                let (wv, bv) = (&w[wr], &w[br]);
                let mut out = vec![0.0; l.channels * ho * wo];
                for o in 0..l.channels {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut s = bv[o];
                            for c in 0..c_in {
                                for ki in 0..l.kernel {
                                    for kj in 0..l.kernel {
                                        let r = (i * l.stride + ki) as isize - l.padding as isize;
                                        let q = (j * l.stride + kj) as isize - l.padding as isize;
                                        if r < 0 || q < 0 || r >= hh as isize || q >= ww as isize {
                                            continue;
                                        }
                                        let xin = cur[c * hh * ww + r as usize * ww + q as usize];
                                        let wi = ((c * l.kernel + ki) * l.kernel + kj) * l.channels + o;
                                        s += xin * wv[wi];
                                    }
                                }
                            }
                            out[o * ho * wo + i * wo + j] = act(s);
                        }
                    }
                }
                cur = out;
                (c_in, hh, ww) = (l.channels, ho, wo);
            }
            // Position-major order for the affine layer.
            let mut hwc = vec![0.0; cur.len()];
            for c in 0..c_in {
                for p in 0..hh * ww {
                    hwc[p * c_in + c] = cur[c * hh * ww + p];
                }
            }
            (hwc, *width)
        }
    };
    let ew = take(feat.len() * embed_w);
    let eb = take(embed_w);
    let e: Vec<f64> = (0..embed_w)
        .map(|o| {
            let mut s = w[eb.start + o];
            for (i, f) in feat.iter().enumerate() {
                s += f * w[ew.start + i * embed_w + o];
            }
            act(s)
        })
        .collect();
    let hd = arch.hidden;
    let gw = take(3 * hd * embed_w);
    let gu = take(3 * hd * hd);
    let gb = take(3 * hd);
    let hw = take(arch.actions * hd);
    let hb = take(arch.actions);
    let lin = |row: usize, v: &[f64], base: usize, width: usize| -> f64 {
        (0..width).map(|k| w[base + row * width + k] * v[k]).sum()
    };
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut hn = vec![0.0; hd];
    let z: Vec<f64> = (0..hd)
        .map(|k| sig(lin(k, &e, gw.start, embed_w) + lin(k, h, gu.start, hd) + w[gb.start + k]))
        .collect();
    let r: Vec<f64> = (0..hd)
        .map(|k| {
            sig(lin(hd + k, &e, gw.start, embed_w) + lin(hd + k, h, gu.start, hd) + w[gb.start + hd + k])
        })
        .collect();
    let rh: Vec<f64> = (0..hd).map(|k| r[k] * h[k]).collect();
    for k in 0..hd {
        let n = (lin(2 * hd + k, &e, gw.start, embed_w)
            + lin(2 * hd + k, &rh, gu.start, hd)
            + w[gb.start + 2 * hd + k])
            .tanh();
        hn[k] = (1.0 - z[k]) * n + z[k] * h[k];
    }
    let logits: Vec<f64> = (0..arch.actions)
        .map(|j| lin(j, &hn, hw.start, hd) + w[hb.start + j])
        .collect();
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let ex: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    assert_eq!(off, w.len());
    (ex.iter().map(|v| v / s).collect(), hn)
}

fn oracle_loss(arch: &ArchSpec, w: &[f64], batch: &[Sequence]) -> f64 {
    let mut total = 0.0;
    for s in batch {
        let mut h = vec![0.0; arch.hidden];
        for (x, a) in s.inputs.iter().zip(&s.actions) {
            let (p, hn) = oracle_step(arch, w, &sparse_to_dense(x, arch.input_len()), &h);
            total -= p[*a as usize].ln().max(LOG_PROB_FLOOR);
            h = hn;
        }
    }
    total
}

#[test]
fn init_is_deterministic_and_bounded() {
    let a = small_conv(8);
    let p = init_params(&a, 3).unwrap();
    assert_eq!(p, init_params(&a, 3).unwrap());
    assert_ne!(p.weights, init_params(&a, 4).unwrap().weights);
    assert!(p.weights.iter().all(|w| w.is_finite() && w.abs() < 1.0));
    assert_eq!(p.weights.len(), a.parameter_count());
}

#[test]
fn zero_weights_give_uniform_and_zero_state() {
    let a = small_conv(8);
    let p = PolicyParams::zeros(&a).unwrap();
    let mut rng = SplitMix64::new(1);
    let s = random_sequence(&a, 1, &mut rng);
    let (probs, h) = forward_sparse(&p, &s.inputs[0], &p.initial_hidden()).unwrap();
    assert!(probs.iter().all(|v| (v - 0.25).abs() < 1e-15));
    assert!(h.iter().all(|v| *v == 0.0));
    // Uniform policy: L·ln 4 for a length-L trajectory.
    let s = random_sequence(&a, 7, &mut rng);
    let rep = nll_loss(&p, &[s]).unwrap();
    assert!((rep.sum - 7.0 * 4f64.ln()).abs() < 1e-12);
    assert_eq!(rep.steps, 7);
}

#[test]
fn matches_straight_line_reimplementation() {
    let mut rng = SplitMix64::new(0);
    for arch in [
        small_conv(8),
        ArchSpec::flatten(3, 5, 5, 7, 6, 8),
        ArchSpec {
            activation: Activation::Tanh,
            ..small_conv(5)
        },
        ArchSpec {
            frame: Frame::Egocentric,
            ..small_conv(6)
        },
        ArchSpec {
            frame: Frame::Egocentric,
            ..ArchSpec::flatten(3, 5, 5, 7, 6, 8)
        },
    ] {
        let p = init_params(&arch, 0).unwrap();
        let s = random_sequence(&arch, 5, &mut rng);
        let mut h = p.initial_hidden();
        let mut ho = p.initial_hidden();
        for x in &s.inputs {
            let (probs, hn) = forward_sparse(&p, x, &h).unwrap();
            let (po, hon) = oracle_step(&arch, &p.weights, &sparse_to_dense(x, arch.input_len()), &ho);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (a, b) in probs.iter().zip(&po) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in hn.iter().zip(&hon) {
                assert!((a - b).abs() < 1e-12);
            }
            (h, ho) = (hn, hon);
        }
        let batch = vec![s.clone(), random_sequence(&arch, 3, &mut rng)];
        let got = nll_loss(&p, &batch).unwrap().sum;
        let want = oracle_loss(&arch, &p.weights, &batch);
        assert!((got - want).abs() <= 1e-10 * want.abs());
    }
}

pub(crate) fn finite_difference_check(arch: &ArchSpec, seed: u64, coords: usize) -> f64 {
    let mut rng = SplitMix64::from_parts(seed, 77);
    let mut p = init_params(arch, seed).unwrap();
    // Zero biases put every all-padding conv output exactly on the ReLU
    // kink; jitter so the loss is differentiable at the probe point.
    for w in &mut p.weights {
        *w += 0.02 * (rng.unit_f64() - 0.5);
    }
    let batch = vec![random_sequence(arch, 6, &mut rng)];
    let (_, g) = grad_nll(&p, &batch).unwrap();
    let mut worst: f64 = 0.0;
    let step = 1e-5;
    for _ in 0..coords {
        let i = rng.index(p.weights.len());
        let w0 = p.weights[i];
        p.weights[i] = w0 + step;
        let up = nll_loss(&p, &batch).unwrap().sum;
        p.weights[i] = w0 - step;
        let down = nll_loss(&p, &batch).unwrap().sum;
        p.weights[i] = w0;
        let fd = (up - down) / (2.0 * step);
        // Below ~1e-5 the central difference itself is only good to ~1e-10
        // absolute (roundoff of a loss of order 10 over 2h), so the
        // denominator is floored there.
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-5);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..4 {
        assert!(finite_difference_check(&small_conv(8), seed, 50) <= 1e-4);
        let flat = ArchSpec::flatten(3, 5, 5, 6, 8, 4);
        assert!(finite_difference_check(&flat, seed, 50) <= 1e-4);
        let tanh = ArchSpec {
            activation: Activation::Tanh,
            ..small_conv(8)
        };
        assert!(finite_difference_check(&tanh, seed, 50) <= 1e-4);
        let ego = ArchSpec {
            frame: Frame::Egocentric,
            ..small_conv(8)
        };
        assert!(finite_difference_check(&ego, seed, 50) <= 1e-4);
    }
}

#[test]
fn gradient_is_bitwise_deterministic() {
    let a = small_conv(8);
    let p = init_params(&a, 9).unwrap();
    let mut rng = SplitMix64::new(2);
    let b = vec![random_sequence(&a, 6, &mut rng), random_sequence(&a, 4, &mut rng)];
    let (_, g1) = grad_nll(&p, &b).unwrap();
    let (_, g2) = grad_nll(&p, &b).unwrap();
    assert!(g1.iter().zip(&g2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn small_step_descends() {
    let a = small_conv(8);
    for seed in 0..20 {
        let p = init_params(&a, seed).unwrap();
        let mut rng = SplitMix64::from_parts(seed, 5);
        let b = vec![random_sequence(&a, 6, &mut rng)];
        let (r0, g) = grad_nll(&p, &b).unwrap();
        let mut q = p.clone();
        for (w, gi) in q.weights.iter_mut().zip(&g) {
            *w -= 1e-3 * gi;
        }
        assert!(nll_loss(&q, &b).unwrap().sum < r0.sum, "seed {seed}");
    }
}

#[test]
fn saturated_point_has_zero_gradient() {
    // Head bias pushes all mass onto action 2; demonstrated action 2.
    let a = ArchSpec::flatten(3, 5, 5, 4, 4, 4);
    let mut p = PolicyParams::zeros(&a).unwrap();
    let l = Layout::new(&a);
    p.weights[l.head_b + 2] = 60.0;
    let mut rng = SplitMix64::new(0);
    let mut s = random_sequence(&a, 5, &mut rng);
    s.actions = vec![2; 5];
    let (rep, g) = grad_nll(&p, &[s.clone()]).unwrap();
    assert!(rep.sum < 1e-20);
    assert!(g.iter().all(|v| v.abs() < 1e-20));
    // The opposite action hits the clamp.
    s.actions = vec![0; 5];
    let rep = nll_loss(&p, &[s]).unwrap();
    assert_eq!(rep.saturated, 5);
    assert!((rep.sum - 5.0 * -LOG_PROB_FLOOR).abs() < 1e-9);
}

#[test]
fn act_modes() {
    let a = ArchSpec::flatten(3, 5, 5, 4, 4, 4);
    let p = PolicyParams::zeros(&a).unwrap();
    let obs = Observation::zeros(3, 5, 5);
    let mut rng = SplitMix64::new(0);
    let (x, _) = act(&p, &obs, &p.initial_hidden(), ActMode::Argmax, &mut rng).unwrap();
    assert_eq!(x, ActionId(0));

    let mut q = p.clone();
    let l = Layout::new(&a);
    q.weights[l.head_b + 3] = 80.0;
    for mode in [ActMode::Argmax, ActMode::Sample] {
        let (x, _) = act(&q, &obs, &q.initial_hidden(), mode, &mut rng).unwrap();
        assert_eq!(x, ActionId(3));
    }

    // Sampling frequencies within 3σ of the distribution.
    let mut r = p.clone();
    r.weights[l.head_b + 1] = 1.0;
    r.weights[l.head_b + 2] = -0.5;
    let (probs, _) = forward(&r, &obs, &r.initial_hidden()).unwrap();
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[act(&r, &obs, &r.initial_hidden(), ActMode::Sample, &mut rng).unwrap().0.index()] += 1;
    }
    for k in 0..4 {
        let sd = (draws as f64 * probs[k] * (1.0 - probs[k])).sqrt();
        assert!((counts[k] as f64 - draws as f64 * probs[k]).abs() < 3.0 * sd);
    }
}

#[test]
fn shape_errors() {
    let a = ArchSpec::flatten(3, 5, 5, 4, 4, 4);
    let p = init_params(&a, 0).unwrap();
    let bad = Observation::zeros(3, 7, 7);
    assert!(matches!(
        forward(&p, &bad, &p.initial_hidden()),
        Err(Error::Usage(_))
    ));
    assert!(matches!(nll_loss::<Sequence>(&p, &[]), Err(Error::Usage(_))));
}

#[test]
fn checkpoint_round_trip() {
    let p = init_params(&small_conv(8), 5).unwrap();
    let b = p.to_bytes().unwrap();
    assert_eq!(PolicyParams::from_bytes(&b).unwrap(), p);
    assert!(matches!(
        PolicyParams::from_bytes(&b[..b.len() - 3]),
        Err(Error::Truncated(_))
    ));
}

