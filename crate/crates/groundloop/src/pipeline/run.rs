//! The generate and correct phases.
//!
//! `generate` is side-effect free: rewrite, retrieve, decode with adapters
//! off, score, and — when the gate fires — re-decode with adapters on and
//! return that output. `correct` walks a query set, builds a correction
//! batch for every flagged generation (cross-entropy target = the top
//! retrieved document, contrastive pair = that document and a corrupted copy
//! of it, both admitted only if the detector agrees), and applies one
//! feedback step per flagged example.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, CorpusIndex, EOS_ID, PAD_ID};
use crate::detect::{classify, ClassifierParams, attention_entropy, semantic_drift};
use crate::error::{Error, Result};
use crate::feedback::{
    feedback_step, kl_divergence, AdamState, CorrectionBatch, FeedbackHyper, FeedbackOutcome,
};
use crate::metrics::rouge_l;
use crate::model::{
    adapter_gate, build_context, decode_greedy_from_context, AdapterCheckpoint, AdapterConfig,
    DecodeOutput, LoraAdapterStack, ModelConfig, ToyTransformer, TrainProgress,
};
use crate::prompt::{rewrite_prompt, RuleTable, StructuredPrompt, SynonymTable, TemplateSet};
use crate::retrieval::{retrieve_topk, RetrievalScore};
use crate::scalar::{cast, derive_seed, to_f64, Scalar};

use super::config::PipelineConfig;
use super::record::{now_ms, LossNumbers, RetrievalEntry, RunRecord};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub query: String,
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

/// Everything a run needs, wired together from one config.
pub struct PipelineState<S: Scalar> {
    pub config: PipelineConfig,
    pub index: CorpusIndex,
    pub model: ToyTransformer<S>,
    pub adapters: LoraAdapterStack<S>,
    pub detector: ClassifierParams<S>,
    pub opt: AdamState<S>,
    pub rules: RuleTable,
    pub synonyms: SynonymTable,
    pub progress: TrainProgress,
    config_fingerprint: String,
}

impl<S: Scalar> PipelineState<S> {
    /// Builds model and adapters from the config and corpus; the detector
    /// starts untrained (all-zero weights).
    pub fn new(config: PipelineConfig, index: CorpusIndex) -> Result<Self> {
        config.validate()?;
        if index.n_docs() == 0 {
            return Err(Error::EmptyInput("corpus index"));
        }
        let model_cfg = ModelConfig {
            vocab_size: index.vocab.len(),
            d_model: config.d_model,
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            ff_dim: config.ff_dim,
            max_seq: config.max_seq,
            seed: config.seed,
        };
        let mut model = ToyTransformer::seeded(model_cfg)?;
        if config.quantize_base {
            model.quantize_base(config.quant_bits, config.quant_block)?;
        }
        let adapter_cfg = AdapterConfig {
            rank: config.lora_rank,
            lora_alpha: config.lora_alpha,
            scale_mode: config.parsed_scale_mode()?,
            dora: config.dora,
        };
        let adapters = LoraAdapterStack::seeded(&model, adapter_cfg, derive_seed(config.seed, 1))?;
        let opt = AdamState::new(&adapters);
        let detector = ClassifierParams::zeros(crate::detect::feature_dim(config.d_model));
        let config_fingerprint = config.fingerprint();
        Ok(PipelineState {
            config,
            index,
            model,
            adapters,
            detector,
            opt,
            rules: RuleTable::bundled(),
            synonyms: SynonymTable::bundled(),
            progress: TrainProgress::default(),
            config_fingerprint,
        })
    }

    pub fn fingerprint(&self) -> &str {
        &self.config_fingerprint
    }

    pub fn hyper(&self) -> FeedbackHyper {
        FeedbackHyper {
            lambda1: self.config.lambda1,
            lambda2: self.config.lambda2,
            contrast_clamp: self.config.contrast_clamp,
            tau: self.config.tau,
            lr: self.config.lr,
            beta1: self.config.adam_beta1,
            beta2: self.config.adam_beta2,
            adam_eps: self.config.adam_eps,
        }
    }

    /// Builds the detection training set from the corpus and trains the
    /// classifier; seeds derive from the master seed.
    pub fn train_detector(&mut self) -> Result<Vec<f64>> {
        let pairs = crate::prompt::build_negative_set(
            &self.index,
            &self.rules,
            &self.synonyms,
            self.config.negatives,
            derive_seed(self.config.seed, 2),
        )?;
        let dataset = crate::detect::build_detection_dataset(
            &pairs,
            &self.index,
            self.model.embeddings(),
            self.config.detector_batch,
        )?;
        let (params, curve) = crate::detect::train_classifier(
            &dataset,
            self.config.detector_epochs,
            self.config.detector_lr,
            derive_seed(self.config.seed, 3),
        )?;
        self.detector = params;
        Ok(curve)
    }

    fn rewrite(&self, query: &Query) -> Result<StructuredPrompt> {
        rewrite_prompt(&query.query, TemplateSet::default())
    }

    fn retrieve(&self, prompt: &StructuredPrompt) -> Result<Vec<RetrievalScore<S>>> {
        let prompt_tokens = self.index.tokenize(&prompt.rewritten);
        if prompt_tokens.is_empty() {
            return Err(Error::EmptyInput("prompt tokens"));
        }
        retrieve_topk(
            &prompt_tokens,
            &self.index,
            self.model.embeddings(),
            &self.config.retrieval(),
        )
    }

    fn context_for(&self, prompt: &StructuredPrompt, scores: &[RetrievalScore<S>]) -> Vec<u32> {
        let prompt_tokens = self.index.tokenize(&prompt.rewritten);
        let docs: Vec<&[u32]> = scores
            .iter()
            .take(self.config.context_docs)
            .map(|s| self.index.docs()[s.doc_idx].tokens.as_slice())
            .collect();
        build_context(&prompt_tokens, &docs)
    }

    fn doc_token_slices<'a>(&'a self, scores: &[RetrievalScore<S>]) -> Vec<&'a [u32]> {
        scores
            .iter()
            .take(self.config.context_docs)
            .map(|s| self.index.docs()[s.doc_idx].tokens.as_slice())
            .collect()
    }

    fn score_output(&self, tokens: &[u32], docs: &[&[u32]]) -> Result<f64> {
        let verdict = classify(
            tokens,
            docs,
            self.model.embeddings(),
            &self.detector,
            self.config.tau,
        )?;
        Ok(verdict.p_hall)
    }
}

fn retrieval_entries<S: Scalar>(scores: &[RetrievalScore<S>]) -> Vec<RetrievalEntry> {
    scores
        .iter()
        .enumerate()
        .map(|(i, s)| RetrievalEntry {
            doc_id: s.doc_id.clone(),
            rank: i + 1,
            bm25: to_f64(s.bm25),
            bm25_norm: to_f64(s.bm25_norm),
            dense: to_f64(s.dense),
            hybrid: to_f64(s.hybrid),
            rrf: s.rrf.map(to_f64),
        })
        .collect()
}

fn strip_specials(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .copied()
        .filter(|&t| t != PAD_ID && t != crate::corpus::BOS_ID && t != EOS_ID)
        .collect()
}

struct GenerationParts<S: Scalar> {
    prompt: StructuredPrompt,
    scores: Vec<RetrievalScore<S>>,
    output: DecodeOutput<S>,
    gate_p_hall: f64,
    adapter_active: bool,
    p_hall: f64,
}

fn generate_inner<S: Scalar>(state: &PipelineState<S>, query: &Query) -> Result<GenerationParts<S>> {
    let prompt = state.rewrite(query)?;
    let scores = state.retrieve(&prompt)?;
    let context = state.context_for(&prompt, &scores);
    let docs = state.doc_token_slices(&scores);

    let pass1 = decode_greedy_from_context(
        &context,
        &state.model,
        &state.adapters,
        false,
        state.config.gen_max_len,
    )?;
    if pass1.tokens.is_empty() {
        return Err(Error::ContextOverflow {
            context: context.len(),
            max_seq: state.model.config().max_seq,
        });
    }
    let gate_p_hall = state.score_output(&pass1.tokens, &docs)?;
    let adapter_active = adapter_gate(gate_p_hall, state.config.tau);

    let (output, p_hall) = if adapter_active {
        let pass2 = decode_greedy_from_context(
            &context,
            &state.model,
            &state.adapters,
            true,
            state.config.gen_max_len,
        )?;
        let p2 = state.score_output(&pass2.tokens, &docs)?;
        (pass2, p2)
    } else {
        (pass1, gate_p_hall)
    };

    Ok(GenerationParts {
        prompt,
        scores,
        output,
        gate_p_hall,
        adapter_active,
        p_hall,
    })
}

/// Runs one query through the full generation path. Stage failures produce a
/// record with the error attached rather than aborting the batch.
pub fn run_generate_one<S: Scalar>(state: &PipelineState<S>, query: &Query) -> RunRecord {
    let mut record = RunRecord {
        query_id: query.id.clone(),
        raw_query: query.query.clone(),
        rewritten: String::new(),
        template_id: String::new(),
        retrieval: Vec::new(),
        generated_text: String::new(),
        gen_tokens: 0,
        gate_p_hall: 0.0,
        adapter_active: false,
        p_hall: 0.0,
        flag: false,
        tau: state.config.tau,
        kl_drift: 0.0,
        jsd: 0.0,
        drift_cosine: 1.0,
        attention_entropy: 0.0,
        rouge_l: 0.0,
        loss: None,
        error: None,
        ts_ms: now_ms(),
        config_fingerprint: state.config_fingerprint.clone(),
    };

    let parts = match generate_inner(state, query) {
        Ok(p) => p,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };

    record.rewritten = parts.prompt.rewritten.clone();
    record.template_id = format!("{:?}", parts.prompt.template_id);
    record.retrieval = retrieval_entries(&parts.scores);
    record.gate_p_hall = parts.gate_p_hall;
    record.adapter_active = parts.adapter_active;
    record.p_hall = parts.p_hall;
    record.flag = parts.p_hall > state.config.tau;
    record.gen_tokens = parts.output.tokens.len();
    let content = strip_specials(&parts.output.tokens);
    record.generated_text = detokenize(&content, &state.index.vocab);

    if let Err(e) = fill_metrics(state, &parts, &mut record) {
        record.error = Some(e.to_string());
    }
    record
}

fn fill_metrics<S: Scalar>(
    state: &PipelineState<S>,
    parts: &GenerationParts<S>,
    record: &mut RunRecord,
) -> Result<()> {
    // drift of the adapted output against the frozen reference, along the
    // tokens actually generated; zero by identity when the gate never fired
    if parts.adapter_active && !parts.output.tokens.is_empty() {
        let context = state.context_for(&parts.prompt, &parts.scores);
        let refs = crate::feedback::reference_distribution(
            &context,
            &parts.output.tokens,
            &state.model,
            &state.adapters,
        )?;
        let mut kl = S::zero();
        for (p, r) in parts.output.dists.iter().zip(&refs) {
            kl += kl_divergence(p, r)?;
        }
        record.kl_drift = to_f64(kl / cast(refs.len() as f64));
        let drift = semantic_drift(&parts.output.dists, &refs)?;
        record.jsd = to_f64(drift.jsd);
        record.drift_cosine = to_f64(drift.cosine);
    }

    if let Some(top) = parts.scores.first() {
        let reference = &state.index.docs()[top.doc_idx].tokens;
        let candidate = strip_specials(&parts.output.tokens);
        record.rouge_l = rouge_l(&candidate, reference)?;
    }
    record.attention_entropy = to_f64(attention_entropy(&parts.output.trace)?);
    Ok(())
}

pub fn run_generate_all<S: Scalar>(state: &PipelineState<S>, queries: &[Query]) -> Vec<RunRecord> {
    queries
        .iter()
        .map(|q| run_generate_one(state, q))
        .collect()
}

/// Replays the gating invariant over a record log: `adapter_active` must
/// equal `gate_p_hall > tau` on every record.
pub fn verify_gating(records: &[RunRecord]) -> Result<()> {
    for r in records {
        if r.adapter_active != adapter_gate(r.gate_p_hall, r.tau) {
            return Err(Error::Invariant(format!(
                "record {}: adapter_active={} but gate_p_hall={} tau={}",
                r.query_id, r.adapter_active, r.gate_p_hall, r.tau
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionEvent {
    pub epoch: usize,
    pub example_idx: usize,
    pub examples_seen: u64,
    pub update_steps: u64,
    pub query_id: String,
    pub action: String,
    pub p_hall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossNumbers>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorrectionRun {
    pub events: Vec<CorrectionEvent>,
    pub updates: u64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Run directory layout: config snapshot, record log, correction trace,
/// checkpoints, final report.
pub struct RunArtifacts {
    pub dir: PathBuf,
}

impl RunArtifacts {
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(dir.join("checkpoints"))
            .map_err(|e| Error::io(dir.display().to_string(), e))?;
        Ok(RunArtifacts { dir })
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.json")
    }

    pub fn records_path(&self) -> PathBuf {
        self.dir.join("records.jsonl")
    }

    pub fn trace_path(&self) -> PathBuf {
        self.dir.join("correction_trace.jsonl")
    }

    pub fn report_json_path(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn report_text_path(&self) -> PathBuf {
        self.dir.join("report.txt")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.dir.join(format!("checkpoints/adapter_step_{step:06}.json"))
    }

    pub fn final_checkpoint_path(&self) -> PathBuf {
        self.dir.join("adapter_final.json")
    }

    pub fn append_event(&self, event: &CorrectionEvent) -> Result<()> {
        use std::io::Write;
        let path = self.trace_path();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        writeln!(file, "{}", serde_json::to_string(event)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn checkpoint_with_state<S: Scalar>(state: &PipelineState<S>) -> Result<AdapterCheckpoint<S>> {
    let mut ckpt = AdapterCheckpoint::new(&state.adapters, state.model.fingerprint());
    ckpt.optimizer = Some(serde_json::to_value(&state.opt)?);
    ckpt.progress = Some(state.progress.clone());
    Ok(ckpt)
}

/// Restores adapters, optimizer moments, and loop progress from a training
/// checkpoint.
pub fn restore_training_state<S: Scalar>(
    state: &mut PipelineState<S>,
    ckpt: AdapterCheckpoint<S>,
) -> Result<()> {
    let progress = ckpt.progress.clone().unwrap_or_default();
    let optimizer = ckpt.optimizer.clone();
    state.adapters = ckpt.into_stack(&state.model.fingerprint())?;
    state.opt = match optimizer {
        Some(value) => serde_json::from_value(value)?,
        None => AdamState::new(&state.adapters),
    };
    state.progress = progress;
    Ok(())
}

enum CorrectOutcome {
    Updated { p_hall: f64, loss: LossNumbers },
    Skipped { p_hall: f64 },
}

fn correct_one<S: Scalar>(
    state: &mut PipelineState<S>,
    query: &Query,
    example_seed: u64,
    neg_adapters: Option<&LoraAdapterStack<S>>,
) -> Result<CorrectOutcome> {
    let hyper = state.hyper();
    let prompt = state.rewrite(query)?;
    let scores = state.retrieve(&prompt)?;
    let context = state.context_for(&prompt, &scores);
    let docs = state.doc_token_slices(&scores);

    // the adapted model's own output decides whether correction applies
    let current = decode_greedy_from_context(
        &context,
        &state.model,
        &state.adapters,
        true,
        state.config.gen_max_len,
    )?;
    if current.tokens.is_empty() {
        return Err(Error::ContextOverflow {
            context: context.len(),
            max_seq: state.model.config().max_seq,
        });
    }
    let p_hall = state.score_output(&current.tokens, &docs)?;
    if !adapter_gate(p_hall, hyper.tau) {
        return Ok(CorrectOutcome::Skipped { p_hall });
    }

    // grounded reference completion: the top retrieved document
    let top = scores.first().ok_or(Error::EmptyInput("retrieval pool"))?;
    let doc = &state.index.docs()[top.doc_idx];
    let room = state
        .model
        .config()
        .max_seq
        .saturating_sub(context.len());
    if room < 2 {
        return Err(Error::ContextOverflow {
            context: context.len(),
            max_seq: state.model.config().max_seq,
        });
    }
    let body_len = doc.tokens.len().min(room - 1);
    let mut target: Vec<u32> = doc.tokens[..body_len].to_vec();
    target.push(EOS_ID);

    // contrastive pair, each side admitted only if the detector agrees
    let pos = {
        let p = state.score_output(&target[..body_len], &docs)?;
        (p < state.config.p_plus_max).then(|| target.clone())
    };
    let doc_text = doc.text.clone();
    let neg = negative_completion(
        state,
        &doc_text,
        &context,
        &docs,
        target.len(),
        example_seed,
        neg_adapters,
    )?;

    let batch = CorrectionBatch::build(
        context,
        target,
        &state.model,
        &state.adapters,
        pos,
        neg,
        p_hall,
    )?;
    match feedback_step(&batch, &state.model, &mut state.adapters, &mut state.opt, &hyper)? {
        FeedbackOutcome::Updated(loss) => {
            let loss = loss.to_f64();
            Ok(CorrectOutcome::Updated {
                p_hall,
                loss: LossNumbers {
                    ce: loss.ce,
                    kl: loss.kl,
                    contrast: loss.contrast,
                    total: loss.total,
                },
            })
        }
        FeedbackOutcome::Skipped { gate_p_hall } => Ok(CorrectOutcome::Skipped {
            p_hall: gate_p_hall,
        }),
    }
}

#[allow(clippy::too_many_arguments)]
fn negative_completion<S: Scalar>(
    state: &PipelineState<S>,
    doc_text: &str,
    context: &[u32],
    docs: &[&[u32]],
    target_len: usize,
    example_seed: u64,
    neg_adapters: Option<&LoraAdapterStack<S>>,
) -> Result<Option<Vec<u32>>> {
    let raw = match neg_adapters {
        // earlier-checkpoint sampling: decode the hallucination-prone model
        Some(adapters) => {
            let out = decode_greedy_from_context(
                context,
                &state.model,
                adapters,
                true,
                state.config.gen_max_len,
            )?;
            out.tokens
        }
        None => match crate::prompt::corrupt_rule_based(doc_text, &state.rules, example_seed) {
            Ok(c) => state.index.tokenize(&c.text),
            Err(Error::NoRuleMatches) => return Ok(None),
            Err(e) => return Err(e),
        },
    };
    if raw.is_empty() {
        return Ok(None);
    }
    let p = state.score_output(&raw, docs)?;
    if p <= state.config.p_minus_min {
        return Ok(None);
    }
    // align to the target length: truncate, or pad with EOS then PAD
    let mut aligned = raw;
    aligned.truncate(target_len);
    if aligned.len() < target_len {
        aligned.push(EOS_ID);
    }
    while aligned.len() < target_len {
        aligned.push(PAD_ID);
    }
    aligned.truncate(target_len);
    Ok(Some(aligned))
}

/// Walks the query set for `correct_epochs` passes (resuming from
/// `state.progress`), applying one feedback step per flagged example, until
/// the update budget (`max_steps`, 0 = unlimited) is exhausted.
pub fn run_correct<S: Scalar>(
    state: &mut PipelineState<S>,
    queries: &[Query],
    artifacts: Option<&RunArtifacts>,
) -> Result<CorrectionRun> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("correction queries"));
    }
    let neg_adapters: Option<LoraAdapterStack<S>> = if state.config.neg_source == "checkpoint" {
        let path = PathBuf::from(&state.config.neg_checkpoint);
        let ckpt = AdapterCheckpoint::<S>::load(&path)?;
        Some(ckpt.into_stack(&state.model.fingerprint())?)
    } else {
        None
    };

    let mut run = CorrectionRun::default();
    let start_epoch = state.progress.epoch;
    let mut start_idx = state.progress.example_idx;

    'outer: for epoch in start_epoch..state.config.correct_epochs {
        let first = std::mem::take(&mut start_idx);
        for (qi, query) in queries.iter().enumerate().skip(first) {
            if state.config.max_steps > 0 && state.progress.update_steps >= state.config.max_steps
            {
                break 'outer;
            }
            let example_seed =
                derive_seed(state.config.seed, 0xC0_0000 + state.progress.examples_seen);
            let outcome = correct_one(state, query, example_seed, neg_adapters.as_ref());
            state.progress.examples_seen += 1;
            state.progress.epoch = epoch;
            state.progress.example_idx = qi + 1;

            let mut event = CorrectionEvent {
                epoch,
                example_idx: qi,
                examples_seen: state.progress.examples_seen,
                update_steps: state.progress.update_steps,
                query_id: query.id.clone(),
                action: String::new(),
                p_hall: 0.0,
                loss: None,
                error: None,
            };
            let mut updated = false;
            match outcome {
                Ok(CorrectOutcome::Updated { p_hall, loss }) => {
                    state.progress.update_steps += 1;
                    event.update_steps = state.progress.update_steps;
                    event.action = "update".into();
                    event.p_hall = p_hall;
                    event.loss = Some(loss);
                    updated = true;
                }
                Ok(CorrectOutcome::Skipped { p_hall }) => {
                    event.action = "skip".into();
                    event.p_hall = p_hall;
                }
                Err(e) => {
                    event.action = "error".into();
                    event.error = Some(e.to_string());
                }
            }
            if let Some(art) = artifacts {
                art.append_event(&event)?;
            }
            run.events.push(event);

            if updated {
                run.updates += 1;
                if let Some(art) = artifacts {
                    if state.config.checkpoint_every > 0
                        && state.progress.update_steps % state.config.checkpoint_every == 0
                    {
                        checkpoint_with_state(state)?
                            .save(&art.checkpoint_path(state.progress.update_steps))?;
                    }
                }
            }
        }
        state.progress.epoch = epoch + 1;
        state.progress.example_idx = 0;
    }

    if let Some(art) = artifacts {
        let path = art.final_checkpoint_path();
        checkpoint_with_state(state)?.save(&path)?;
        run.final_checkpoint = Some(path);
    }
    Ok(run)
}
