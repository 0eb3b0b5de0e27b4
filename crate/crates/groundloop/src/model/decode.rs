//! Greedy decoding and teacher-forced distribution extraction.
//!
//! The generation context is `BOS ++ prompt ++ SEP ++ doc_1 ++ SEP ++ doc_2
//! ...` with the EOS id doubling as the separator. Decoding is greedy and
//! temperature-free; ties resolve to the lowest token id.

use crate::corpus::{BOS_ID, EOS_ID};
use crate::dist::TokenDistribution;
use crate::error::{Error, Result};
use crate::linalg::argmax;

use super::forward::{forward_with_tape, ForwardTrace, Tape};
use super::{LoraAdapterStack, ToyTransformer};
use crate::scalar::Scalar;

/// Assembles the decoding context.
pub fn build_context(prompt_tokens: &[u32], docs_tokens: &[&[u32]]) -> Vec<u32> {
    let doc_len: usize = docs_tokens.iter().map(|d| d.len() + 1).sum();
    let mut ctx = Vec::with_capacity(1 + prompt_tokens.len() + doc_len);
    ctx.push(BOS_ID);
    ctx.extend_from_slice(prompt_tokens);
    for doc in docs_tokens {
        ctx.push(EOS_ID);
        ctx.extend_from_slice(doc);
    }
    ctx
}

#[derive(Debug, Clone)]
pub struct DecodeOutput<S> {
    /// Generated token ids (including the terminal EOS when one was emitted).
    pub tokens: Vec<u32>,
    /// One distribution per generated token.
    pub dists: Vec<TokenDistribution<S>>,
    /// Trace of the final forward over context plus generation; by causality
    /// its rows agree with every intermediate decoding step.
    pub trace: ForwardTrace<S>,
}

/// Greedy decoding conditioned on the prompt and retrieved documents. Stops
/// at EOS, `max_len`, or the model's sequence capacity, whichever comes
/// first; the context alone overflowing is an error.
pub fn decode_greedy<S: Scalar>(
    prompt_tokens: &[u32],
    docs_tokens: &[&[u32]],
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
    active: bool,
    max_len: usize,
) -> Result<DecodeOutput<S>> {
    let context = build_context(prompt_tokens, docs_tokens);
    decode_greedy_from_context(&context, model, adapters, active, max_len)
}

pub fn decode_greedy_from_context<S: Scalar>(
    context: &[u32],
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
    active: bool,
    max_len: usize,
) -> Result<DecodeOutput<S>> {
    let max_seq = model.config().max_seq;
    if context.len() >= max_seq {
        return Err(Error::ContextOverflow {
            context: context.len(),
            max_seq,
        });
    }

    let mut seq = context.to_vec();
    let mut tokens = Vec::new();
    let mut dists = Vec::new();

    for step in 0..max_len {
        if seq.len() >= max_seq {
            break;
        }
        let (t, _) = forward_with_tape(model, adapters, active, &seq)?;
        let last = t.logits.row(seq.len() - 1);
        let dist = TokenDistribution::from_logits(last, step);
        let next = argmax(last) as u32;
        tokens.push(next);
        dists.push(dist);
        seq.push(next);
        if next == EOS_ID {
            break;
        }
    }

    // Final trace over the whole sequence (context included) so attention
    // diagnostics cover every decoding step; by causality its rows agree
    // with what each intermediate forward produced.
    let trace = forward_with_tape(model, adapters, active, &seq)?.0;

    Ok(DecodeOutput {
        tokens,
        dists,
        trace,
    })
}

/// Teacher forcing: per-step distributions for `target` following `context`,
/// together with the tape for backpropagation. The distribution at step `t`
/// is the model's prediction of `target[t]` given the context and the first
/// `t` target tokens.
pub fn teacher_forced<S: Scalar>(
    context: &[u32],
    target: &[u32],
    model: &ToyTransformer<S>,
    adapters: &LoraAdapterStack<S>,
    active: bool,
) -> Result<(Vec<TokenDistribution<S>>, Tape<S>, ForwardTrace<S>)> {
    if context.is_empty() {
        return Err(Error::EmptyInput("teacher-forcing context"));
    }
    if target.is_empty() {
        return Err(Error::EmptyInput("teacher-forcing target"));
    }
    let full: Vec<u32> = context.iter().chain(target).copied().collect();
    let (trace, tape) = forward_with_tape(model, adapters, active, &full)?;
    let dists = (0..target.len())
        .map(|t| TokenDistribution::from_logits(trace.logits.row(context.len() - 1 + t), t))
        .collect();
    Ok((dists, tape, trace))
}
