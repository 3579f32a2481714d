//! Step-by-step reference recomputation of the micro-transformer forward
//! pass, written as plain loops with no tape involvement, compared against
//! the traced forward.

mod common;

use regionlab::model::{forward_on_tape, MatrixId, MatrixKind, ModelConfig, ParameterStore};
use regionlab::tensor::{Tape, RMS_NORM_EPS, ROPE_BASE};

fn mat<'s>(store: &'s ParameterStore<f64>, id: MatrixId) -> &'s [f64] {
    store.matrix_by_id(id).unwrap()
}

/// Plain-loop forward: embedding gather, then per layer
/// rms → q/k/v → rope → causal softmax attention → o-projection → residual →
/// rms → SwiGLU → residual, then final rms and lm-head.
fn reference_forward(store: &ParameterStore<f64>, tokens: &[u16]) -> Vec<f64> {
    let cfg = store.config();
    let (d, h, f, v) = (cfg.dim, cfg.heads, cfg.ffn_dim, cfg.vocab_size);
    let dh = d / h;
    let n = tokens.len();

    let rms = |x: &[f64], w: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for (row_in, row_out) in x.chunks(d).zip(out.chunks_mut(d)) {
            let ms: f64 = row_in.iter().map(|&a| a * a).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + RMS_NORM_EPS).sqrt();
            for i in 0..d {
                row_out[i] = w[i] * row_in[i] * inv;
            }
        }
        out
    };

    let emb = mat(store, MatrixId::global(MatrixKind::Embedding));
    let mut x = vec![0.0; n * d];
    for (t, &tok) in tokens.iter().enumerate() {
        x[t * d..(t + 1) * d].copy_from_slice(&emb[tok as usize * d..(tok as usize + 1) * d]);
    }

    for l in 0..cfg.layers {
        let at = |kind: MatrixKind| mat(store, MatrixId::layered(kind, l));
        let normed = rms(&x, at(MatrixKind::InputNorm));

        // projections: out[t][j] = Σ_i normed[t][i] * W[i][j]
        let project = |w: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; n * d];
            for t in 0..n {
                for i in 0..d {
                    let a = normed[t * d + i];
                    for j in 0..d {
                        out[t * d + j] += a * w[i * d + j];
                    }
                }
            }
            out
        };
        let mut q = project(at(MatrixKind::AttnQ));
        let mut k = project(at(MatrixKind::AttnK));
        let vv = project(at(MatrixKind::AttnV));

        // rotary positions per head block
        for t in 0..n {
            for head in 0..h {
                for i in 0..dh / 2 {
                    let theta = t as f64 * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
                    let (sin, cos) = theta.sin_cos();
                    for buf in [&mut q, &mut k] {
                        let base = t * d + head * dh + 2 * i;
                        let (x0, x1) = (buf[base], buf[base + 1]);
                        buf[base] = x0 * cos - x1 * sin;
                        buf[base + 1] = x0 * sin + x1 * cos;
                    }
                }
            }
        }

        let mut ctx = vec![0.0; n * d];
        for head in 0..h {
            for t in 0..n {
                let mut scores = Vec::with_capacity(t + 1);
                for s in 0..=t {
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += q[t * d + head * dh + i] * k[s * d + head * dh + i];
                    }
                    scores.push(dot / (dh as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for (s, &e) in exps.iter().enumerate() {
                    let p = e / denom;
                    for i in 0..dh {
                        ctx[t * d + head * dh + i] += p * vv[s * d + head * dh + i];
                    }
                }
            }
        }

        let wo = at(MatrixKind::AttnO);
        for t in 0..n {
            let mut out = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    out[j] += ctx[t * d + i] * wo[i * d + j];
                }
            }
            for j in 0..d {
                x[t * d + j] += out[j];
            }
        }

        let normed2 = rms(&x, at(MatrixKind::PostAttnNorm));
        let (gate, up, down) = (
            at(MatrixKind::FfnGate),
            at(MatrixKind::FfnUp),
            at(MatrixKind::FfnDown),
        );
        for t in 0..n {
            let mut act = vec![0.0; f];
            for ff in 0..f {
                let mut g = 0.0;
                let mut u = 0.0;
                for i in 0..d {
                    g += normed2[t * d + i] * gate[ff * d + i];
                    u += normed2[t * d + i] * up[ff * d + i];
                }
                let sig = 1.0 / (1.0 + (-g).exp());
                act[ff] = g * sig * u;
            }
            for j in 0..d {
                let mut o = 0.0;
                for ff in 0..f {
                    o += act[ff] * down[j * f + ff];
                }
                x[t * d + j] += o;
            }
        }
    }

    let xf = rms(&x, mat(store, MatrixId::global(MatrixKind::FinalNorm)));
    let lm = mat(store, MatrixId::global(MatrixKind::LmHead));
    let mut logits = vec![0.0; n * v];
    for t in 0..n {
        for vi in 0..v {
            let mut acc = 0.0;
            for i in 0..d {
                acc += xf[t * d + i] * lm[vi * d + i];
            }
            logits[t * v + vi] = acc;
        }
    }
    logits
}

#[test]
fn traced_forward_matches_reference_single_head() {
    let cfg = ModelConfig::tiny(4, 1, 1, 8);
    let store = ParameterStore::init(&cfg).unwrap().to_f64();
    let tokens = [2u16, 5, 1];
    let mut tape = Tape::new();
    let traced = forward_on_tape(&mut tape, &store, &tokens).unwrap();
    let got = tape.values(traced.logits);
    let want = reference_forward(&store, &tokens);
    assert_eq!(got.len(), want.len());
    for (i, (&g, &w)) in got.iter().zip(&want).enumerate() {
        assert!((g - w).abs() < 1e-10, "logit {i}: traced={g} reference={w}");
    }
}

#[test]
fn traced_forward_matches_reference_multi_head_deep() {
    let cfg = ModelConfig::tiny(8, 3, 2, 16);
    let store = ParameterStore::init(&cfg).unwrap().to_f64();
    let tokens = [11u16, 0, 7, 3, 15, 2];
    let mut tape = Tape::new();
    let traced = forward_on_tape(&mut tape, &store, &tokens).unwrap();
    let got = tape.values(traced.logits);
    let want = reference_forward(&store, &tokens);
    for (i, (&g, &w)) in got.iter().zip(&want).enumerate() {
        assert!((g - w).abs() < 1e-10, "logit {i}: traced={g} reference={w}");
    }
}

#[test]
fn loss_matches_hand_computed_log_softmax() {
    // Two positions with fixed logits; the expected value is
    // -(ln softmax(row0)[target0] + ln softmax(row1)[target1]) / 2.
    let mut tape = Tape::<f64>::new();
    let logits = tape
        .leaf(&[2, 3], vec![0.2, -1.3, 0.5, 2.0, 0.0, -0.7])
        .unwrap();
    let loss = tape.mean_cross_entropy(logits, &[2, 0]).unwrap();
    let softmax = |row: &[f64], t: usize| {
        let denom: f64 = row.iter().map(|&x| x.exp()).sum();
        row[t].exp() / denom
    };
    let expect = -(softmax(&[0.2, -1.3, 0.5], 2).ln() + softmax(&[2.0, 0.0, -0.7], 0).ln()) / 2.0;
    assert!((tape.scalar(loss) - expect).abs() < 1e-12);
}
