//! Hallucination probability estimation and diagnostic signals.
//!
//! The detector is a linear head over a fixed feature vector
//! `[pooled(y); pooled(D); overlap(y, D)]` (dimension `2 d_model + 1`),
//! squashed through a sigmoid; it is trained with binary cross-entropy and
//! frozen at inference. Alongside it live the attention-entropy, semantic
//! drift, and integrated-gradients diagnostics.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::corpus::CorpusIndex;
use crate::dist::{cosine, entropy, jsd, TokenDistribution};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::model::ForwardTrace;
use crate::prompt::{Label, LabeledPair, PairSource};
use crate::scalar::{cast, to_f64, Scalar};

pub const CLASSIFIER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierParams<S> {
    pub w: Vec<S>,
    pub b: S,
}

impl<S: Scalar> ClassifierParams<S> {
    pub fn zeros(feature_dim: usize) -> Self {
        ClassifierParams {
            w: vec![S::zero(); feature_dim],
            b: S::zero(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w.len()
    }

    pub fn predict(&self, features: &[S]) -> Result<S> {
        if features.len() != self.w.len() {
            return Err(Error::DimMismatch(format!(
                "classifier features {} vs {}",
                features.len(),
                self.w.len()
            )));
        }
        Ok(sigmoid(dot(&self.w, features) + self.b))
    }
}

/// Versioned classifier checkpoint carrying the feature-schema version.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierCheckpoint<S> {
    pub format_version: u32,
    pub feature_dim: usize,
    pub params: ClassifierParams<S>,
    pub loss_curve: Vec<f64>,
}

impl<S: Scalar> ClassifierCheckpoint<S> {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: ClassifierCheckpoint<S> = serde_json::from_str(&json)?;
        if ckpt.format_version != CLASSIFIER_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CLASSIFIER_FORMAT_VERSION,
                found: ckpt.format_version,
            });
        }
        if ckpt.params.feature_dim() != ckpt.feature_dim {
            return Err(Error::Invariant("classifier feature dim mismatch".into()));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HallucinationVerdict {
    pub p_hall: f64,
    pub flag: bool,
    pub tau: f64,
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Unigram precision of the generation against the document set, counting
/// repeated tokens.
pub fn overlap_precision<S: Scalar>(gen_tokens: &[u32], docs: &[&[u32]]) -> S {
    if gen_tokens.is_empty() {
        return S::zero();
    }
    let doc_unigrams: BTreeSet<u32> = docs.iter().flat_map(|d| d.iter().copied()).collect();
    let hits = gen_tokens
        .iter()
        .filter(|t| doc_unigrams.contains(t))
        .count();
    cast::<S>(hits as f64 / gen_tokens.len() as f64)
}

/// `[pooled(y); pooled(concat D); overlap]`, dimension `2 dim + 1`.
pub fn detection_features<S: Scalar>(
    gen_tokens: &[u32],
    docs: &[&[u32]],
    table: &EmbeddingTable<S>,
) -> Result<Vec<S>> {
    if gen_tokens.is_empty() {
        return Err(Error::EmptyInput("generation tokens"));
    }
    let all_docs: Vec<u32> = docs.iter().flat_map(|d| d.iter().copied()).collect();
    if all_docs.is_empty() {
        return Err(Error::EmptyInput("document tokens"));
    }
    let mut features = table.pooled_mean(gen_tokens)?;
    features.extend(table.pooled_mean(&all_docs)?);
    features.push(overlap_precision(gen_tokens, docs));
    Ok(features)
}

pub fn feature_dim(embedding_dim: usize) -> usize {
    2 * embedding_dim + 1
}

/// Scores a generation against the retrieved documents.
pub fn classify<S: Scalar>(
    gen_tokens: &[u32],
    docs: &[&[u32]],
    table: &EmbeddingTable<S>,
    params: &ClassifierParams<S>,
    tau: f64,
) -> Result<HallucinationVerdict> {
    let features = detection_features(gen_tokens, docs, table)?;
    let p_hall = to_f64(params.predict(&features)?);
    Ok(HallucinationVerdict {
        p_hall,
        flag: p_hall > tau,
        tau,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetComposition {
    pub n_grounded: usize,
    pub n_hallucinated: usize,
    pub synthetic_fraction: f64,
    pub human_aligned_fraction: f64,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct DetectionDataset<S> {
    pub samples: Vec<(Vec<S>, u8)>,
    /// Index batches; each holds equal counts of both classes.
    pub batches: Vec<Vec<usize>>,
    pub composition: DatasetComposition,
}

/// Featurizes labeled pairs and groups them into class-balanced batches;
/// leftovers that cannot be balanced are dropped with a warning.
pub fn build_detection_dataset<S: Scalar>(
    pairs: &[LabeledPair],
    index: &CorpusIndex,
    table: &EmbeddingTable<S>,
    batch_size: usize,
) -> Result<DetectionDataset<S>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("labeled pairs"));
    }
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be even and >= 2, got {batch_size}"
        )));
    }

    let mut grounded = Vec::new();
    let mut hallucinated = Vec::new();
    let mut samples = Vec::with_capacity(pairs.len());
    let mut synthetic = 0usize;
    for pair in pairs {
        let doc = index
            .doc_by_id(&pair.source_doc_id)
            .ok_or_else(|| Error::UnknownDocId(pair.source_doc_id.clone()))?
            .1;
        let completion_tokens = index.tokenize(&pair.completion);
        let features = detection_features(&completion_tokens, &[&doc.tokens], table)?;
        let label = match pair.label {
            Label::Grounded => 0u8,
            Label::Hallucinated => 1u8,
        };
        let idx = samples.len();
        samples.push((features, label));
        if label == 0 {
            grounded.push(idx);
        } else {
            hallucinated.push(idx);
        }
        if pair.source == PairSource::Synthetic {
            synthetic += 1;
        }
    }
    if grounded.is_empty() || hallucinated.is_empty() {
        return Err(Error::Unbalanced(format!(
            "need both classes, got {} grounded / {} hallucinated",
            grounded.len(),
            hallucinated.len()
        )));
    }

    let per_class = batch_size / 2;
    let usable = grounded.len().min(hallucinated.len());
    let n_batches = usable / per_class;
    if n_batches == 0 {
        return Err(Error::Unbalanced(format!(
            "cannot fill one balanced batch of {batch_size}; achievable composition: \
             {} per class",
            usable
        )));
    }
    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut batch = Vec::with_capacity(batch_size);
        batch.extend_from_slice(&grounded[b * per_class..(b + 1) * per_class]);
        batch.extend_from_slice(&hallucinated[b * per_class..(b + 1) * per_class]);
        batches.push(batch);
    }
    let used = n_batches * per_class;
    let dropped = (grounded.len() - used) + (hallucinated.len() - used);
    if dropped > 0 {
        log::warn!("dropped {dropped} samples that could not be balanced into batches");
    }

    Ok(DetectionDataset {
        composition: DatasetComposition {
            n_grounded: grounded.len(),
            n_hallucinated: hallucinated.len(),
            synthetic_fraction: synthetic as f64 / samples.len() as f64,
            human_aligned_fraction: 1.0 - synthetic as f64 / samples.len() as f64,
            dropped,
        },
        samples,
        batches,
    })
}

/// Mean binary cross-entropy and its analytic gradient over a sample set.
pub fn bce_loss_and_grad<S: Scalar>(
    params: &ClassifierParams<S>,
    samples: &[&(Vec<S>, u8)],
) -> Result<(S, Vec<S>, S)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("bce samples"));
    }
    let eps = cast::<S>(1e-12);
    let mut loss = S::zero();
    let mut grad_w = vec![S::zero(); params.w.len()];
    let mut grad_b = S::zero();
    let inv_n = S::one() / cast::<S>(samples.len() as f64);
    for (features, label) in samples {
        let p = params.predict(features)?;
        let y = cast::<S>(*label as f64);
        let p_c = p.max(eps).min(S::one() - eps);
        loss -= y * p_c.ln() + (S::one() - y) * (S::one() - p_c).ln();
        let delta = (p - y) * inv_n;
        for (g, &x) in grad_w.iter_mut().zip(features) {
            *g += delta * x;
        }
        grad_b += delta;
    }
    Ok((loss * inv_n, grad_w, grad_b))
}

/// Mini-batch gradient descent on mean BCE. Batch order is shuffled each
/// epoch from the seed; weights start at zero, so the whole run is
/// deterministic given (dataset, seed).
pub fn train_classifier<S: Scalar>(
    dataset: &DetectionDataset<S>,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<(ClassifierParams<S>, Vec<f64>)> {
    let both = dataset.samples.iter().any(|(_, y)| *y == 0)
        && dataset.samples.iter().any(|(_, y)| *y == 1);
    if !both {
        return Err(Error::Unbalanced("training set has a single class".into()));
    }
    let dim = dataset.samples[0].0.len();
    let mut params = ClassifierParams::zeros(dim);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let lr_s = cast::<S>(lr);
    let mut curve = Vec::with_capacity(epochs);

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..dataset.batches.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for &bi in &order {
            let batch: Vec<&(Vec<S>, u8)> = dataset.batches[bi]
                .iter()
                .map(|&i| &dataset.samples[i])
                .collect();
            let (_, grad_w, grad_b) = bce_loss_and_grad(&params, &batch)?;
            for (w, g) in params.w.iter_mut().zip(&grad_w) {
                *w -= lr_s * *g;
            }
            params.b -= lr_s * grad_b;
        }
        let all: Vec<&(Vec<S>, u8)> = dataset.samples.iter().collect();
        let (loss, _, _) = bce_loss_and_grad(&params, &all)?;
        curve.push(to_f64(loss));
    }
    Ok((params, curve))
}

pub fn accuracy<S: Scalar>(params: &ClassifierParams<S>, samples: &[(Vec<S>, u8)]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let correct = samples
        .iter()
        .filter(|(x, y)| {
            let p = to_f64(params.predict(x).unwrap_or_else(|_| cast(0.5)));
            (p > 0.5) == (*y == 1)
        })
        .count();
    correct as f64 / samples.len() as f64
}

/// Mean Shannon entropy (nats) over every attention row in the trace, across
/// layers, heads, and positions. A row whose mass strays from 1 by more than
/// 1e-6 is an error.
pub fn attention_entropy<S: Scalar>(trace: &ForwardTrace<S>) -> Result<S> {
    let mut total = S::zero();
    let mut rows = 0usize;
    for layer in &trace.attention {
        for head in layer {
            for t in 0..head.rows() {
                let row = head.row(t);
                let sum: S = row.iter().cloned().sum();
                if (to_f64(sum) - 1.0).abs() > 1e-6 {
                    return Err(Error::Invariant(format!(
                        "attention row sums to {sum}, expected 1"
                    )));
                }
                total += entropy(row);
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(Error::EmptyInput("attention rows"));
    }
    Ok(total / cast(rows as f64))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Drift<S> {
    pub cosine: S,
    pub jsd: S,
}

/// Mean per-step cosine and Jensen-Shannon divergence between two aligned
/// distribution sequences.
pub fn semantic_drift<S: Scalar>(
    p_gen: &[TokenDistribution<S>],
    p_ret: &[TokenDistribution<S>],
) -> Result<Drift<S>> {
    if p_gen.len() != p_ret.len() {
        return Err(Error::DimMismatch(format!(
            "semantic_drift: {} vs {} steps",
            p_gen.len(),
            p_ret.len()
        )));
    }
    if p_gen.is_empty() {
        return Err(Error::EmptyInput("distribution sequences"));
    }
    let mut cos = S::zero();
    let mut div = S::zero();
    for (p, q) in p_gen.iter().zip(p_ret) {
        cos += cosine(p, q)?;
        div += jsd(p, q)?;
    }
    let n = cast::<S>(p_gen.len() as f64);
    Ok(Drift {
        cosine: cos / n,
        jsd: div / n,
    })
}

/// Midpoint-Riemann integrated gradients from `baseline` to `input`, with
/// central-difference gradients of the black-box score function.
pub fn integrated_gradients<S: Scalar>(
    score_fn: impl Fn(&[S]) -> S,
    input: &[S],
    baseline: &[S],
    steps: usize,
) -> Result<Vec<S>> {
    if input.len() != baseline.len() {
        return Err(Error::DimMismatch(format!(
            "integrated_gradients: input {} vs baseline {}",
            input.len(),
            baseline.len()
        )));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be >= 1".into()));
    }
    let n = input.len();
    let mut attributions = vec![S::zero(); n];
    let fd_eps = cast::<S>(1e-5);
    let inv_steps = S::one() / cast::<S>(steps as f64);
    let mut point = vec![S::zero(); n];
    for s in 0..steps {
        let alpha = cast::<S>((s as f64 + 0.5) / steps as f64);
        for i in 0..n {
            point[i] = baseline[i] + alpha * (input[i] - baseline[i]);
        }
        for i in 0..n {
            let orig = point[i];
            point[i] = orig + fd_eps;
            let up = score_fn(&point);
            point[i] = orig - fd_eps;
            let down = score_fn(&point);
            point[i] = orig;
            let grad = (up - down) / (fd_eps + fd_eps);
            attributions[i] += grad * inv_steps;
        }
    }
    for i in 0..n {
        attributions[i] *= input[i] - baseline[i];
    }
    Ok(attributions)
}
