//! KL-regularized contrastive correction.
//!
//! One correction batch holds a decoding context, a grounded target
//! completion, the frozen reference distributions along that target, and
//! (optionally) a grounded and a corrupted completion of the same length.
//! The training objective is
//!
//! ```text
//! L_total = L_CE + lambda1 * L_KL + lambda2 * L_contrast
//! L_KL       = mean_t KL(P_gen_t || P_ret_t)
//! L_contrast = clamp(mean_t [KL(P+_t || P_ret_t) - KL(P-_t || P_ret_t)])
//! ```
//!
//! where `P_gen`, `P+`, `P-` are the adapted model's teacher-forced
//! distributions and `P_ret` comes from the frozen base. Only adapter
//! parameters receive gradients. The per-step logit gradient of a KL term is
//! `p .* (u - KL)` with `u_i = ln p_i - ln r_i`.

use serde::{Deserialize, Serialize};

pub use crate::dist::{kl_divergence, TokenDistribution};

use crate::dist::KL_EPSILON;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    adapter_gate, backward, teacher_forced, AdapterGrads, LoraAdapterStack, ToyTransformer,
    UnitGrads,
};
use crate::scalar::{cast, to_f64, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<S> {
    pub ce: S,
    pub kl: S,
    pub contrast: S,
    pub total: S,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn to_f64(&self) -> LossBreakdown<f64> {
        LossBreakdown {
            ce: to_f64(self.ce),
            kl: to_f64(self.kl),
            contrast: to_f64(self.contrast),
            total: to_f64(self.total),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }
}

/// Weighted sum of the loss components; rejects non-finite inputs.
pub fn total_loss<S: Scalar>(
    ce: S,
    kl: S,
    contrast: S,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown<S>> {
    for (name, v) in [("ce", ce), ("kl", kl), ("contrast", contrast)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(match name {
                "ce" => "cross-entropy loss",
                "kl" => "kl loss",
                _ => "contrastive loss",
            }));
        }
    }
    let total = ce + cast::<S>(lambda1) * kl + cast::<S>(lambda2) * contrast;
    Ok(LossBreakdown {
        ce,
        kl,
        contrast,
        total,
        lambda1,
        lambda2,
    })
}

/// `mean_t [KL(P+ || P_ret) - KL(P- || P_ret)]`, clamped to `[-clamp, clamp]`.
pub fn contrastive_kl<S: Scalar>(
    p_plus: &[TokenDistribution<S>],
    p_minus: &[TokenDistribution<S>],
    p_ret: &[TokenDistribution<S>],
    clamp: f64,
) -> Result<S> {
    if p_plus.len() != p_ret.len() || p_minus.len() != p_ret.len() {
        return Err(Error::DimMismatch(format!(
            "contrastive_kl alignment: plus {}, minus {}, ret {}",
            p_plus.len(),
            p_minus.len(),
            p_ret.len()
        )));
    }
    if p_ret.is_empty() {
        return Err(Error::EmptyInput("contrastive distributions"));
    }
    let mut acc = S::zero();
    for ((p, m), r) in p_plus.iter().zip(p_minus).zip(p_ret) {
        acc += kl_divergence(p, r)? - kl_divergence(m, r)?;
    }
    let mean = acc / cast(p_ret.len() as f64);
    let c = cast::<S>(clamp);
    Ok(mean.max(-c).min(c))
}

/// Frozen-base teacher-forced distributions over `target` given `context`:
/// the grounding reference for every KL term.
pub fn reference_distribution<S: Scalar>(
    context: &[u32],
    target: &[u32],
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
) -> Result<Vec<TokenDistribution<S>>> {
    let (dists, _, _) = teacher_forced(context, target, model, adapters, false)?;
    Ok(dists)
}

/// One correction example: everything [`feedback_step`] needs.
#[derive(Debug, Clone)]
pub struct CorrectionBatch<S> {
    pub context: Vec<u32>,
    /// Grounded target completion; the cross-entropy target.
    pub target: Vec<u32>,
    /// Frozen reference distributions along `target`.
    pub p_ret: Vec<TokenDistribution<S>>,
    /// Grounded completion (detector score below the grounded threshold).
    pub pos: Option<Vec<u32>>,
    /// Hallucinated completion (detector score above the flagging threshold).
    pub neg: Option<Vec<u32>>,
    /// Detector score that gated this batch.
    pub gate_p_hall: f64,
}

impl<S: Scalar> CorrectionBatch<S> {
    pub fn build(
        context: Vec<u32>,
        target: Vec<u32>,
        model: &ToyTransformer<S>,
        adapters: &LoraAdapterStack<S>,
        pos: Option<Vec<u32>>,
        neg: Option<Vec<u32>>,
        gate_p_hall: f64,
    ) -> Result<Self> {
        for seq in [&pos, &neg].into_iter().flatten() {
            if seq.len() != target.len() {
                return Err(Error::DimMismatch(format!(
                    "contrast sequence length {} does not match target {}",
                    seq.len(),
                    target.len()
                )));
            }
        }
        let p_ret = reference_distribution(&context, &target, model, adapters)?;
        Ok(CorrectionBatch {
            context,
            target,
            p_ret,
            pos,
            neg,
            gate_p_hall,
        })
    }

    fn has_contrast(&self) -> bool {
        self.pos.is_some() && self.neg.is_some()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeedbackHyper {
    pub lambda1: f64,
    pub lambda2: f64,
    pub contrast_clamp: f64,
    pub tau: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for FeedbackHyper {
    fn default() -> Self {
        FeedbackHyper {
            lambda1: 0.4,
            lambda2: 0.6,
            contrast_clamp: 10.0,
            tau: 0.7,
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// Per-step logit gradient of `KL(P || R)`: `p .* (u - KL)` where
/// `u_i = ln p_i - ln max(r_i, eps)`.
fn kl_logit_grad<S: Scalar>(p: &TokenDistribution<S>, r: &TokenDistribution<S>) -> (S, Vec<S>) {
    let eps = cast::<S>(KL_EPSILON);
    let mut u = Vec::with_capacity(p.len());
    let mut kl = S::zero();
    for (&pi, &ri) in p.probs().iter().zip(r.probs()) {
        let ui = if pi == ri {
            S::zero()
        } else {
            pi.ln() - ri.max(eps).ln()
        };
        u.push(ui);
        if pi > S::zero() {
            kl += pi * ui;
        }
    }
    let grad = p
        .probs()
        .iter()
        .zip(&u)
        .map(|(&pi, &ui)| pi * (ui - kl))
        .collect();
    (kl, grad)
}

/// Loss components and adapter gradients for one batch under the current
/// adapter state. The gradient flows through three teacher-forced passes of
/// the adapted model (target, grounded, hallucinated); the frozen reference
/// is a constant.
pub fn compute_losses<S: Scalar>(
    batch: &CorrectionBatch<S>,
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
    hyper: &FeedbackHyper,
) -> Result<(LossBreakdown<S>, AdapterGrads<S>)> {
    let t_steps = batch.target.len();
    if t_steps == 0 {
        return Err(Error::EmptyInput("correction target"));
    }
    if batch.p_ret.len() != t_steps {
        return Err(Error::DimMismatch(format!(
            "reference steps {} vs target {}",
            batch.p_ret.len(),
            t_steps
        )));
    }
    let vocab = model.config().vocab_size;
    let ctx_len = batch.context.len();
    let inv_t = S::one() / cast::<S>(t_steps as f64);
    let mut grads = AdapterGrads::zeros_like(adapters);

    // pass 1: P_gen on the target, under the adapted model
    let (p_gen, tape, trace) = teacher_forced(&batch.context, &batch.target, model, adapters, true)?;
    let mut ce = S::zero();
    let mut kl_total = S::zero();
    let mut d_logits = Matrix::<S>::zeros(trace.logits.rows(), vocab);
    let l1 = cast::<S>(hyper.lambda1);
    for (t, dist) in p_gen.iter().enumerate() {
        let y = batch.target[t] as usize;
        let p_y = dist.probs()[y];
        ce -= p_y.max(cast(1e-300)).ln();
        let (kl_t, kl_grad) = kl_logit_grad(dist, &batch.p_ret[t]);
        kl_total += kl_t;
        let row = d_logits.row_mut(ctx_len - 1 + t);
        for (j, (&pj, &gj)) in dist.probs().iter().zip(&kl_grad).enumerate() {
            let ce_term = if j == y { pj - S::one() } else { pj };
            row[j] = inv_t * (ce_term + l1 * gj);
        }
    }
    ce *= inv_t;
    kl_total *= inv_t;
    backward(model, adapters, &tape, &d_logits, &mut grads)?;

    // passes 2 and 3: the contrastive pair, when both sides are present
    let mut contrast = S::zero();
    if batch.has_contrast() {
        let pos = batch.pos.as_ref().unwrap();
        let neg = batch.neg.as_ref().unwrap();
        let (p_plus, tape_p, trace_p) =
            teacher_forced(&batch.context, pos, model, adapters, true)?;
        let (p_minus, tape_m, trace_m) =
            teacher_forced(&batch.context, neg, model, adapters, true)?;

        let mut raw = S::zero();
        let mut grads_plus: Vec<Vec<S>> = Vec::with_capacity(t_steps);
        let mut grads_minus: Vec<Vec<S>> = Vec::with_capacity(t_steps);
        for t in 0..t_steps {
            let (kl_p, g_p) = kl_logit_grad(&p_plus[t], &batch.p_ret[t]);
            let (kl_m, g_m) = kl_logit_grad(&p_minus[t], &batch.p_ret[t]);
            raw += kl_p - kl_m;
            grads_plus.push(g_p);
            grads_minus.push(g_m);
        }
        raw *= inv_t;
        let c = cast::<S>(hyper.contrast_clamp);
        contrast = raw.max(-c).min(c);

        // zero gradient outside the clamp region
        if raw > -c && raw < c {
            let l2 = cast::<S>(hyper.lambda2);
            let mut d_plus = Matrix::<S>::zeros(trace_p.logits.rows(), vocab);
            let mut d_minus = Matrix::<S>::zeros(trace_m.logits.rows(), vocab);
            for t in 0..t_steps {
                let row = d_plus.row_mut(ctx_len - 1 + t);
                for (j, &g) in grads_plus[t].iter().enumerate() {
                    row[j] = l2 * inv_t * g;
                }
                let row = d_minus.row_mut(ctx_len - 1 + t);
                for (j, &g) in grads_minus[t].iter().enumerate() {
                    row[j] = -l2 * inv_t * g;
                }
            }
            backward(model, adapters, &tape_p, &d_plus, &mut grads)?;
            backward(model, adapters, &tape_m, &d_minus, &mut grads)?;
        }
    }

    let breakdown = total_loss(ce, kl_total, contrast, hyper.lambda1, hyper.lambda2)?;
    Ok((breakdown, grads))
}

/// Adam first/second moments shaped like the adapter gradients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<UnitGrads<S>>,
    pub v: Vec<UnitGrads<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(stack: &LoraAdapterStack<S>) -> Self {
        let zeros = || AdapterGrads::zeros_like(stack).units;
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

fn adam_tensor<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    m: &mut [S],
    v: &mut [S],
    lr: S,
    b1: S,
    b2: S,
    eps: S,
    bias1: S,
    bias2: S,
) {
    for i in 0..param.len() {
        m[i] = b1 * m[i] + (S::one() - b1) * grad[i];
        v[i] = b2 * v[i] + (S::one() - b2) * grad[i] * grad[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam update over every adapter parameter.
pub fn adam_update<S: Scalar>(
    adapters: &mut LoraAdapterStack<S>,
    grads: &AdapterGrads<S>,
    state: &mut AdamState<S>,
    hyper: &FeedbackHyper,
) -> Result<()> {
    if grads.units.len() != adapters.n_units() {
        return Err(Error::DimMismatch("gradient/adapter unit count".into()));
    }
    state.step += 1;
    let b1 = cast::<S>(hyper.beta1);
    let b2 = cast::<S>(hyper.beta2);
    let lr = cast::<S>(hyper.lr);
    let eps = cast::<S>(hyper.adam_eps);
    let bias1 = S::one() - b1.powi(state.step as i32);
    let bias2 = S::one() - b2.powi(state.step as i32);

    for (ui, unit) in adapters.units_mut().enumerate() {
        let g = &grads.units[ui];
        let m = &mut state.m[ui];
        let v = &mut state.v[ui];
        adam_tensor(
            unit.a.data_mut(),
            g.da.data(),
            m.da.data_mut(),
            v.da.data_mut(),
            lr,
            b1,
            b2,
            eps,
            bias1,
            bias2,
        );
        adam_tensor(
            unit.b.data_mut(),
            g.db.data(),
            m.db.data_mut(),
            v.db.data_mut(),
            lr,
            b1,
            b2,
            eps,
            bias1,
            bias2,
        );
        if let (Some(mag), Some(dmag)) = (unit.magnitude.as_mut(), g.dmag.as_ref()) {
            adam_tensor(
                mag,
                dmag,
                m.dmag.as_mut().expect("moment shape"),
                v.dmag.as_mut().expect("moment shape"),
                lr,
                b1,
                b2,
                eps,
                bias1,
                bias2,
            );
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum FeedbackOutcome<S> {
    /// Gate inactive for this batch; no update performed.
    Skipped { gate_p_hall: f64 },
    Updated(LossBreakdown<S>),
}

/// One correction step: gate check, analytic gradients of the total loss
/// with respect to adapter parameters only, Adam update. Base weights are
/// untouched by construction.
pub fn feedback_step<S: Scalar>(
    batch: &CorrectionBatch<S>,
    model: &ToyTransformer<S>,
    adapters: &mut LoraAdapterStack<S>,
    opt: &mut AdamState<S>,
    hyper: &FeedbackHyper,
) -> Result<FeedbackOutcome<S>> {
    if !adapter_gate(batch.gate_p_hall, hyper.tau) {
        return Ok(FeedbackOutcome::Skipped {
            gate_p_hall: batch.gate_p_hall,
        });
    }
    let (loss, grads) = compute_losses(batch, model, adapters, hyper)?;
    adam_update(adapters, &grads, opt, hyper)?;
    Ok(FeedbackOutcome::Updated(loss))
}
