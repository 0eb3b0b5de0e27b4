//! Causal forward pass with an activation tape, and the reverse pass that
//! produces gradients for the adapter parameters only.
//!
//! Reverse-pass conventions, with `W'` the effective (adapted) projection and
//! `dOut` the incoming gradient on a projection output `X W'^T`:
//!
//! * low-rank path `W' = W + s BA`:
//!   `dX += dOut W + s (dOut B) A`, `dW' = dOut^T X`,
//!   `dA += s B^T dW'`, `dB += s dW' A^T`.
//! * direction-normalized path `W' = m (col) (W + BA) / ||.||`:
//!   per column `j` with `v = (W + BA)_j`, `n = ||v||`:
//!   `dm_j = (dW'_j . v) / n`,
//!   `dV_j = (m_j / n) dW'_j - (m_j (dW'_j . v) / n^3) v`,
//!   then `dA += B^T dV`, `dB += dV A^T`.
//! * softmax rows: `ds_u = a_u (da_u - sum_w a_w da_w)`.

use crate::error::{Error, Result};
use crate::linalg::{dot, softmax, Matrix};
use crate::scalar::{cast, Scalar};

use super::adapters::{dora_parts, AdapterGrads, AdapterUnit, LoraAdapterStack, UnitGrads};
use super::ToyTransformer;

/// Per-forward observable state: logits, attention tensors, hidden states.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    /// One row of logits per input position.
    pub logits: Matrix<S>,
    /// `attention[layer][head]` is a T x T matrix whose row `t` is the
    /// (causal) attention distribution of position `t`.
    pub attention: Vec<Vec<Matrix<S>>>,
    pub hidden: Option<Matrix<S>>,
}

enum ProjCache<S> {
    Frozen,
    Lora,
    Dora {
        v_mat: Matrix<S>,
        norms: Vec<S>,
        composed: Matrix<S>,
    },
}

struct LayerTape<S> {
    x_in: Matrix<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    q_cache: ProjCache<S>,
    v_cache: ProjCache<S>,
    attn: Vec<Matrix<S>>,
    x_mid: Matrix<S>,
    h1: Matrix<S>,
}

/// Activation record consumed by [`backward`].
pub struct Tape<S> {
    layers: Vec<LayerTape<S>>,
    seq_len: usize,
    active: bool,
}

impl<S> Tape<S> {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
}

fn project_forward<S: Scalar>(
    x: &Matrix<S>,
    w: &Matrix<S>,
    adapter: Option<&AdapterUnit<S>>,
) -> Result<(Matrix<S>, ProjCache<S>)> {
    match adapter {
        None => Ok((x.matmul_nt(w), ProjCache::Frozen)),
        Some(u) if u.is_dora() => {
            let (v_mat, norms, composed) =
                dora_parts(w, &u.a, &u.b, u.magnitude.as_ref().unwrap())?;
            let out = x.matmul_nt(&composed);
            Ok((
                out,
                ProjCache::Dora {
                    v_mat,
                    norms,
                    composed,
                },
            ))
        }
        Some(u) => {
            let mut out = x.matmul_nt(w);
            let scale = u.scale();
            if scale != S::zero() && !u.b.is_zero() {
                let ax = x.matmul_nt(&u.a);
                out.add_scaled(&ax.matmul_nt(&u.b), scale);
            }
            Ok((out, ProjCache::Lora))
        }
    }
}

fn project_backward<S: Scalar>(
    d_out: &Matrix<S>,
    x: &Matrix<S>,
    w: &Matrix<S>,
    adapter: Option<&AdapterUnit<S>>,
    cache: &ProjCache<S>,
    grads: Option<&mut UnitGrads<S>>,
) -> Matrix<S> {
    match (adapter, cache) {
        (None, _) | (_, ProjCache::Frozen) => d_out.matmul(w),
        (Some(u), ProjCache::Lora) => {
            let mut dx = d_out.matmul(w);
            let scale = u.scale();
            if scale != S::zero() {
                let through_b = d_out.matmul(&u.b); // T x r
                dx.add_scaled(&through_b.matmul(&u.a), scale);
                if let Some(g) = grads {
                    let dwp = d_out.matmul_tn(x); // d x k
                    g.da.add_scaled(&u.b.matmul_tn(&dwp), scale);
                    g.db.add_scaled(&dwp.matmul_nt(&u.a), scale);
                }
            }
            dx
        }
        (Some(u), ProjCache::Dora {
            v_mat,
            norms,
            composed,
        }) => {
            let dx = d_out.matmul(composed);
            if let Some(g) = grads {
                let dwp = d_out.matmul_tn(x); // d x k
                let mags = u.magnitude.as_ref().expect("dora unit");
                let (d, k) = (dwp.rows(), dwp.cols());
                let mut dv = Matrix::zeros(d, k);
                for c in 0..k {
                    let n = norms[c];
                    let m = mags[c];
                    let mut proj = S::zero();
                    for r in 0..d {
                        proj += dwp.get(r, c) * v_mat.get(r, c);
                    }
                    if let Some(dm) = g.dmag.as_mut() {
                        dm[c] += proj / n;
                    }
                    let coeff_w = m / n;
                    let coeff_v = m * proj / (n * n * n);
                    for r in 0..d {
                        dv.set(r, c, coeff_w * dwp.get(r, c) - coeff_v * v_mat.get(r, c));
                    }
                }
                g.da.add_scaled(&u.b.matmul_tn(&dv), S::one());
                g.db.add_scaled(&dv.matmul_nt(&u.a), S::one());
            }
            dx
        }
    }
}

/// Causal decoder forward pass recording the full activation tape.
pub fn forward_with_tape<S: Scalar>(
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
    active: bool,
    tokens: &[u32],
) -> Result<(ForwardTrace<S>, Tape<S>)> {
    let cfg = model.config();
    if tokens.is_empty() {
        return Err(Error::EmptyInput("model input tokens"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::ContextOverflow {
            context: tokens.len(),
            max_seq: cfg.max_seq,
        });
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: cfg.vocab_size,
            });
        }
    }
    if active && adapters.layers.len() != cfg.n_layers {
        return Err(Error::DimMismatch(format!(
            "adapter stack covers {} layers, model has {}",
            adapters.layers.len(),
            cfg.n_layers
        )));
    }

    let t_len = tokens.len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let inv_sqrt_dh = cast::<S>(1.0 / (dh as f64).sqrt());

    let mut x = Matrix::zeros(t_len, d);
    for (t, &tok) in tokens.iter().enumerate() {
        let emb = model.embeddings().row(tok);
        let pos = model.positions().row(t);
        let row = x.row_mut(t);
        for i in 0..d {
            row[i] = emb[i] + pos[i];
        }
    }

    let mut layer_tapes = Vec::with_capacity(cfg.n_layers);
    let mut attention = Vec::with_capacity(cfg.n_layers);

    for (l, weights) in model.layers().iter().enumerate() {
        let (q_unit, v_unit) = if active {
            let la = &adapters.layers[l];
            (Some(&la.q), Some(&la.v))
        } else {
            (None, None)
        };
        let x_in = x;
        let (q, q_cache) = project_forward(&x_in, &weights.wq, q_unit)?;
        let (k, _) = project_forward(&x_in, &weights.wk, None)?;
        let (v, v_cache) = project_forward(&x_in, &weights.wv, v_unit)?;

        let mut heads_attn = Vec::with_capacity(n_heads);
        let mut ctx = Matrix::zeros(t_len, d);
        for h in 0..n_heads {
            let off = h * dh;
            let mut attn = Matrix::zeros(t_len, t_len);
            for t in 0..t_len {
                let q_slice = &q.row(t)[off..off + dh];
                let mut scores = Vec::with_capacity(t + 1);
                for u in 0..=t {
                    let k_slice = &k.row(u)[off..off + dh];
                    scores.push(dot(q_slice, k_slice) * inv_sqrt_dh);
                }
                let probs = softmax(&scores);
                for (u, &p) in probs.iter().enumerate() {
                    attn.set(t, u, p);
                    let v_slice = &v.row(u)[off..off + dh];
                    let ctx_row = ctx.row_mut(t);
                    for i in 0..dh {
                        ctx_row[off + i] += p * v_slice[i];
                    }
                }
            }
            heads_attn.push(attn);
        }

        let attn_out = ctx.matmul_nt(&weights.wo);
        let mut x_mid = x_in.clone();
        x_mid.add_scaled(&attn_out, S::one());

        let h1 = x_mid.matmul_nt(&weights.w1);
        let mut act = h1.clone();
        for v in act.data_mut() {
            if *v < S::zero() {
                *v = S::zero();
            }
        }
        let ff_out = act.matmul_nt(&weights.w2);
        let mut x_out = x_mid.clone();
        x_out.add_scaled(&ff_out, S::one());

        attention.push(heads_attn.clone());
        layer_tapes.push(LayerTape {
            x_in,
            q,
            k,
            v,
            q_cache,
            v_cache,
            attn: heads_attn,
            x_mid,
            h1,
        });
        x = x_out;
    }

    let logits = x.matmul_nt(model.output_head());
    let trace = ForwardTrace {
        logits,
        attention,
        hidden: Some(x),
    };
    let tape = Tape {
        layers: layer_tapes,
        seq_len: t_len,
        active,
    };
    Ok((trace, tape))
}

/// Forward pass without keeping the tape.
pub fn forward<S: Scalar>(
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
    active: bool,
    tokens: &[u32],
) -> Result<ForwardTrace<S>> {
    forward_with_tape(model, adapters, active, tokens).map(|(trace, _)| trace)
}

/// Backpropagates `d_logits` through the tape and accumulates adapter
/// gradients into `grads`. Frozen weights receive no gradient; an inactive
/// tape contributes nothing.
pub fn backward<S: Scalar>(
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
    tape: &Tape<S>,
    d_logits: &Matrix<S>,
    grads: &mut AdapterGrads<S>,
) -> Result<()> {
    if !tape.active {
        return Ok(());
    }
    let cfg = model.config();
    if d_logits.rows() != tape.seq_len || d_logits.cols() != cfg.vocab_size {
        return Err(Error::DimMismatch(format!(
            "d_logits {}x{}, expected {}x{}",
            d_logits.rows(),
            d_logits.cols(),
            tape.seq_len,
            cfg.vocab_size
        )));
    }

    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let inv_sqrt_dh = cast::<S>(1.0 / (dh as f64).sqrt());

    let mut dx = d_logits.matmul(model.output_head()); // T x d

    for (l, lt) in tape.layers.iter().enumerate().rev() {
        let weights = &model.layers()[l];
        let t_len = tape.seq_len;

        // feed-forward block
        let d_act = dx.matmul(&weights.w2); // T x ff
        let mut d_h1 = d_act;
        for (g, &pre) in d_h1.data_mut().iter_mut().zip(lt.h1.data()) {
            if pre <= S::zero() {
                *g = S::zero();
            }
        }
        let mut d_x_mid = dx; // residual path
        d_x_mid.add_scaled(&d_h1.matmul(&weights.w1), S::one());

        // attention block
        let d_ctx = d_x_mid.matmul(&weights.wo); // T x d
        let mut d_q = Matrix::zeros(t_len, cfg.d_model);
        let mut d_k = Matrix::zeros(t_len, cfg.d_model);
        let mut d_v = Matrix::zeros(t_len, cfg.d_model);

        for h in 0..n_heads {
            let off = h * dh;
            let attn = &lt.attn[h];
            for t in 0..t_len {
                let d_ctx_slice = &d_ctx.row(t)[off..off + dh];
                let a_row = attn.row(t);
                let mut d_a = vec![S::zero(); t + 1];
                let mut inner = S::zero();
                for u in 0..=t {
                    let v_slice = &lt.v.row(u)[off..off + dh];
                    d_a[u] = dot(d_ctx_slice, v_slice);
                    inner += a_row[u] * d_a[u];
                }
                for u in 0..=t {
                    let p = a_row[u];
                    // dV from context aggregation
                    {
                        let d_v_row = d_v.row_mut(u);
                        for i in 0..dh {
                            d_v_row[off + i] += p * d_ctx_slice[i];
                        }
                    }
                    // softmax backward into scores, then into Q and K
                    let ds = p * (d_a[u] - inner) * inv_sqrt_dh;
                    if ds == S::zero() {
                        continue;
                    }
                    let k_slice: Vec<S> = lt.k.row(u)[off..off + dh].to_vec();
                    let q_slice: Vec<S> = lt.q.row(t)[off..off + dh].to_vec();
                    {
                        let d_q_row = d_q.row_mut(t);
                        for i in 0..dh {
                            d_q_row[off + i] += ds * k_slice[i];
                        }
                    }
                    {
                        let d_k_row = d_k.row_mut(u);
                        for i in 0..dh {
                            d_k_row[off + i] += ds * q_slice[i];
                        }
                    }
                }
            }
        }

        let la = &adapters.layers[l];
        let unit_base = 2 * l;
        let (g_q, g_v) = {
            // grads.units laid out as [layer0.q, layer0.v, layer1.q, ...]
            let (head, tail) = grads.units.split_at_mut(unit_base + 1);
            (&mut head[unit_base], &mut tail[0])
        };

        let mut d_x_in = d_x_mid; // residual path
        let dq_contrib =
            project_backward(&d_q, &lt.x_in, &weights.wq, Some(&la.q), &lt.q_cache, Some(g_q));
        d_x_in.add_scaled(&dq_contrib, S::one());
        let dk_contrib =
            project_backward(&d_k, &lt.x_in, &weights.wk, None, &ProjCache::Frozen, None);
        d_x_in.add_scaled(&dk_contrib, S::one());
        let dv_contrib =
            project_backward(&d_v, &lt.x_in, &weights.wv, Some(&la.v), &lt.v_cache, Some(g_v));
        d_x_in.add_scaled(&dv_contrib, S::one());

        dx = d_x_in;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::entropy;
    use crate::model::{AdapterConfig, ModelConfig};
    use crate::scalar::to_f64;

    fn small_model(seed: u64) -> (ToyTransformer<f64>, LoraAdapterStack<f64>) {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ff_dim: 16,
            max_seq: 32,
            seed,
        };
        let model = ToyTransformer::seeded(cfg).unwrap();
        let adapters = LoraAdapterStack::seeded(
            &model,
            AdapterConfig {
                rank: 2,
                ..Default::default()
            },
            seed + 1,
        )
        .unwrap();
        (model, adapters)
    }

    #[test]
    fn fresh_adapters_match_frozen_bitwise() {
        let (model, adapters) = small_model(3);
        let tokens = [1u32, 5, 9, 2];
        let on = forward(&model, &adapters, true, &tokens).unwrap();
        let off = forward(&model, &adapters, false, &tokens).unwrap();
        assert_eq!(on.logits.data(), off.logits.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let (model, adapters) = small_model(4);
        let tokens = [3u32, 3, 7];
        let a = forward(&model, &adapters, true, &tokens).unwrap();
        let b = forward(&model, &adapters, true, &tokens).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (model, adapters) = small_model(5);
        let tokens = [1u32, 2, 3, 4, 5];
        let trace = forward(&model, &adapters, false, &tokens).unwrap();
        for layer in &trace.attention {
            for head in layer {
                for t in 0..tokens.len() {
                    let row = head.row(t);
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    assert!(row[t + 1..].iter().all(|&p| p == 0.0), "causal mask");
                    let h = entropy(row);
                    assert!((0.0..=(tokens.len() as f64).ln() + 1e-9).contains(&h));
                }
            }
        }
    }

    #[test]
    fn input_validation() {
        let (model, adapters) = small_model(6);
        assert!(forward(&model, &adapters, false, &[]).is_err());
        assert!(forward(&model, &adapters, false, &[99]).is_err());
        let long = vec![1u32; 33];
        assert!(matches!(
            forward(&model, &adapters, false, &long),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn hand_computed_forward_single_layer() {
        // 1 layer, 1 head, d_model = 4: replicate the forward pass with
        // naive loops and compare logits.
        let cfg = ModelConfig {
            vocab_size: 3,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            ff_dim: 4,
            max_seq: 4,
            seed: 7,
        };
        let model: ToyTransformer<f64> = ToyTransformer::seeded(cfg).unwrap();
        let adapters =
            LoraAdapterStack::seeded(&model, AdapterConfig { rank: 1, ..Default::default() }, 0)
                .unwrap();
        let tokens = [0u32, 2];
        let trace = forward(&model, &adapters, false, &tokens).unwrap();

        let d = 4usize;
        let w = &model.layers()[0];
        let matvec = |m: &Matrix<f64>, x: &[f64]| -> Vec<f64> {
            (0..m.rows()).map(|r| dot(m.row(r), x)).collect()
        };
        let mut xs: Vec<Vec<f64>> = Vec::new();
        for (t, &tok) in tokens.iter().enumerate() {
            let e = model.embeddings().row(tok);
            let p = model.positions().row(t);
            xs.push((0..d).map(|i| e[i] + p[i]).collect());
        }
        let q: Vec<Vec<f64>> = xs.iter().map(|x| matvec(&w.wq, x)).collect();
        let k: Vec<Vec<f64>> = xs.iter().map(|x| matvec(&w.wk, x)).collect();
        let v: Vec<Vec<f64>> = xs.iter().map(|x| matvec(&w.wv, x)).collect();
        let scale = 1.0 / (d as f64).sqrt();
        // position 0 attends only to itself; position 1 softmaxes two scores
        let mut ctx = vec![v[0].clone()];
        let s0 = dot(&q[1], &k[0]) * scale;
        let s1 = dot(&q[1], &k[1]) * scale;
        let m = s0.max(s1);
        let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
        let z = e0 + e1;
        ctx.push((0..d).map(|i| (e0 * v[0][i] + e1 * v[1][i]) / z).collect());

        let mut logits_manual = Vec::new();
        for (t, x) in xs.iter().enumerate() {
            let attn_out = matvec(&w.wo, &ctx[t]);
            let x_mid: Vec<f64> = (0..d).map(|i| x[i] + attn_out[i]).collect();
            let h1 = matvec(&w.w1, &x_mid);
            let act: Vec<f64> = h1.iter().map(|&h| h.max(0.0)).collect();
            let ff = matvec(&w.w2, &act);
            let x_out: Vec<f64> = (0..d).map(|i| x_mid[i] + ff[i]).collect();
            logits_manual.push(matvec(model.output_head(), &x_out));
        }
        for t in 0..tokens.len() {
            for (got, want) in trace.logits.row(t).iter().zip(&logits_manual[t]) {
                assert!((to_f64(*got) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_smoke() {
        // Scalar objective: sum of logits at a fixed position. The full
        // L_total gradient check lives in the acceptance suite.
        let (model, mut adapters) = small_model(8);
        // randomize adapters so both A and B gradients are live
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        for unit in adapters.units_mut() {
            for v in unit.a.data_mut().iter_mut().chain(unit.b.data_mut()) {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        let tokens = [1u32, 4, 2, 7];
        let objective = |adapters: &LoraAdapterStack<f64>| -> f64 {
            let trace = forward(&model, adapters, true, &tokens).unwrap();
            trace.logits.row(tokens.len() - 1).iter().sum()
        };

        let (_, tape) = forward_with_tape(&model, &adapters, true, &tokens).unwrap();
        let mut d_logits = Matrix::zeros(tokens.len(), model.config().vocab_size);
        for v in d_logits.row_mut(tokens.len() - 1) {
            *v = 1.0;
        }
        let mut grads = AdapterGrads::zeros_like(&adapters);
        backward(&model, &adapters, &tape, &d_logits, &mut grads).unwrap();

        let h = 1e-6;
        let mut checked = 0;
        for ui in 0..grads.units.len() {
            for idx in [0usize, 3, 7] {
                let analytic = grads.units[ui].da.data()[idx];
                let orig = {
                    let unit = adapters.units_mut().nth(ui).unwrap();
                    let o = unit.a.data()[idx];
                    unit.a.data_mut()[idx] = o + h;
                    o
                };
                let up = objective(&adapters);
                adapters.units_mut().nth(ui).unwrap().a.data_mut()[idx] = orig - h;
                let down = objective(&adapters);
                adapters.units_mut().nth(ui).unwrap().a.data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((analytic - fd) / denom).abs() < 1e-4,
                    "unit {ui} idx {idx}: analytic {analytic} fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
    }
}
