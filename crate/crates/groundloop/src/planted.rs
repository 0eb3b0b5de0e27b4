//! Planted-bias synthetic task.
//!
//! The bundled corpus and query set are engineered so the untuned pipeline
//! hallucinates predictably: the frozen model's first pass emits tokens
//! unrelated to the retrieved evidence, and [`plant_bias`] additionally
//! trains the adapters toward rule-corrupted copies of each query's top
//! document with plain cross-entropy (no KL anchor), leaving the system in a
//! measurably drifted, hallucination-prone state. Correction runs then have
//! a real signal to reverse — held-out hallucination rate and KL drift both
//! start high and must come down.

use crate::error::{Error, Result};
use crate::feedback::{
    feedback_step, AdamState, CorrectionBatch, FeedbackHyper, FeedbackOutcome,
};
use crate::metrics::hallucination_rate;
use crate::pipeline::{run_generate_all, PipelineState, Query, RunRecord};
use crate::corpus::EOS_ID;
use crate::prompt::corrupt_rule_based;
use crate::scalar::{derive_seed, Scalar};

#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub train: Vec<Query>,
    pub heldout: Vec<Query>,
}

pub fn bundled_queries() -> Vec<Query> {
    include_str!("../assets/queries.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled query set is well-formed"))
        .collect()
}

/// 70 train / 30 held-out split of the bundled queries.
pub fn bundled_task() -> PlantedTask {
    let queries = bundled_queries();
    let cut = queries.len() * 7 / 10;
    let (train, heldout) = queries.split_at(cut);
    PlantedTask {
        train: train.to_vec(),
        heldout: heldout.to_vec(),
    }
}

/// Trains the adapters toward corrupted references for `steps` updates
/// (cycling the train split), using cross-entropy only. Each query keeps a
/// fixed corruption across passes so the planted bias is consistent.
/// Returns the number of updates applied.
pub fn plant_bias<S: Scalar>(
    state: &mut PipelineState<S>,
    queries: &[Query],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<usize> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("plant queries"));
    }
    let hyper = FeedbackHyper {
        lambda1: 0.0,
        lambda2: 0.0,
        lr,
        ..FeedbackHyper::default()
    };
    let mut opt = AdamState::new(&state.adapters);
    let mut updates = 0;
    'outer: loop {
        for (qi, query) in queries.iter().enumerate() {
            if updates >= steps {
                break 'outer;
            }
            let Some(batch) = plant_batch(state, query, derive_seed(seed, qi as u64))? else {
                continue;
            };
            match feedback_step(&batch, &state.model, &mut state.adapters, &mut opt, &hyper)? {
                FeedbackOutcome::Updated(_) => updates += 1,
                FeedbackOutcome::Skipped { .. } => {}
            }
        }
        if updates == 0 {
            return Err(Error::Invariant(
                "no plantable query produced a corruptible reference".into(),
            ));
        }
    }
    Ok(updates)
}

fn plant_batch<S: Scalar>(
    state: &PipelineState<S>,
    query: &Query,
    corruption_seed: u64,
) -> Result<Option<CorrectionBatch<S>>> {
    let prompt = crate::prompt::rewrite_prompt(&query.query, Default::default())?;
    let scores = {
        let tokens = state.index.tokenize(&prompt.rewritten);
        if tokens.is_empty() {
            return Ok(None);
        }
        crate::retrieval::retrieve_topk(
            &tokens,
            &state.index,
            state.model.embeddings(),
            &state.config.retrieval(),
        )?
    };
    let Some(top) = scores.first() else {
        return Ok(None);
    };
    let doc = &state.index.docs()[top.doc_idx];
    let corrupted = match corrupt_rule_based(&doc.text, &state.rules, corruption_seed) {
        Ok(c) => c,
        Err(Error::NoRuleMatches) => return Ok(None),
        Err(e) => return Err(e),
    };

    let prompt_tokens = state.index.tokenize(&prompt.rewritten);
    let docs: Vec<&[u32]> = scores
        .iter()
        .take(state.config.context_docs)
        .map(|s| state.index.docs()[s.doc_idx].tokens.as_slice())
        .collect();
    let context = crate::model::build_context(&prompt_tokens, &docs);
    let room = state.model.config().max_seq.saturating_sub(context.len());
    if room < 2 {
        return Ok(None);
    }
    let mut target = state.index.tokenize(&corrupted.text);
    target.truncate(room - 1);
    if target.is_empty() {
        return Ok(None);
    }
    target.push(EOS_ID);

    // gate bypassed by construction: planting is unconditional
    Ok(Some(CorrectionBatch::build(
        context,
        target,
        &state.model,
        &state.adapters,
        None,
        None,
        1.0,
    )?))
}

#[derive(Debug, Clone)]
pub struct HeldoutEval {
    pub records: Vec<RunRecord>,
    pub hallucination_rate: f64,
    pub mean_kl_drift: f64,
    pub gate_rate: f64,
}

/// Generates over a held-out split and summarizes the hallucination rate and
/// mean KL drift of the delivered outputs.
pub fn eval_heldout<S: Scalar>(
    state: &PipelineState<S>,
    queries: &[Query],
) -> Result<HeldoutEval> {
    let records = run_generate_all(state, queries);
    let ok: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::EmptyInput("successful held-out records"));
    }
    let owned: Vec<RunRecord> = ok.iter().map(|r| (*r).clone()).collect();
    let rate = hallucination_rate(&owned)?;
    let mean_kl_drift = owned.iter().map(|r| r.kl_drift).sum::<f64>() / owned.len() as f64;
    let gate_rate =
        owned.iter().filter(|r| r.adapter_active).count() as f64 / owned.len() as f64;
    Ok(HeldoutEval {
        records,
        hallucination_rate: rate,
        mean_kl_drift,
        gate_rate,
    })
}
