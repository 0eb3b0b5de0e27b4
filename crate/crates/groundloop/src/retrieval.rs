//! Hybrid document retrieval: Okapi BM25 over the inverted index, dense
//! cosine similarity over pooled embeddings, alpha-weighted fusion of the
//! two, reciprocal rank fusion of their rankings, and an optional learnable
//! retrieval policy head.
//!
//! BM25 uses the nonnegative idf variant
//! `idf(t) = ln(1 + (N - df + 0.5) / (df + 0.5))` with term weight
//! `idf * tf (k1 + 1) / (tf + k1 (1 - b + b dl / avgdl))`, so scores are
//! always >= 0 and strictly increase with term frequency. Raw BM25 is
//! min-max normalized over the candidate pool before fusing with cosine
//! similarity, which lives on a fixed [-1, 1] scale.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm, softmax, Matrix};
use crate::scalar::{cast, to_f64, Scalar};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// Okapi BM25 score of a document against a tokenized query.
pub fn bm25_score<S: Scalar>(
    query_tokens: &[u32],
    doc_idx: usize,
    index: &CorpusIndex,
    params: Bm25Params,
) -> Result<S> {
    if doc_idx >= index.n_docs() {
        return Err(Error::UnknownDocId(format!("#{doc_idx}")));
    }
    let n = index.n_docs() as f64;
    let avgdl = index.avg_doc_length();
    let dl = index.doc_length(doc_idx) as f64;
    let mut score = 0.0;
    for &term in query_tokens {
        let postings = index.postings(term);
        let df = postings.len() as f64;
        if df == 0.0 {
            continue;
        }
        let Some(&(_, tf)) = postings
            .iter()
            .find(|&&(d, _)| d as usize == doc_idx)
        else {
            continue;
        };
        let tf = tf as f64;
        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        let denom = tf + params.k1 * (1.0 - params.b + params.b * dl / avgdl.max(f64::MIN_POSITIVE));
        score += idf * tf * (params.k1 + 1.0) / denom;
    }
    Ok(cast(score))
}

/// Pooled unit-vector embedding of a token sequence.
pub fn embed_text<S: Scalar>(tokens: &[u32], table: &EmbeddingTable<S>) -> Result<Vec<S>> {
    table.pooled_unit(tokens)
}

/// Dot product of two unit vectors; rejects inputs whose norm strays from 1
/// by more than 1e-6.
pub fn dense_sim<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "dense_sim: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for v in [a, b] {
        if (to_f64(l2_norm(v)) - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("dense_sim input is not a unit vector".into()));
        }
    }
    Ok(dot(a, b))
}

/// `alpha * bm25_norm + (1 - alpha) * dense`.
pub fn hybrid_score<S: Scalar>(bm25_norm: S, dense: S, alpha: f64) -> Result<S> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let a = cast::<S>(alpha);
    Ok(a * bm25_norm + (S::one() - a) * dense)
}

/// One ranker's ordering, best document first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingList {
    pub ranker_id: String,
    /// Document indices, rank 1 first; no duplicates.
    pub docs: Vec<usize>,
}

impl RankingList {
    /// 1-based rank of `doc`, if present.
    pub fn rank_of(&self, doc: usize) -> Option<usize> {
        self.docs.iter().position(|&d| d == doc).map(|p| p + 1)
    }
}

/// Reciprocal rank fusion: `RRF(d) = sum_m 1 / (k + rank_m(d))`. Documents
/// absent from a ranking contribute nothing for that ranker. The result is
/// sorted by descending fused score, ties broken by ascending doc index.
pub fn rrf_fuse<S: Scalar>(rankings: &[RankingList], k: f64) -> Result<Vec<(usize, S)>> {
    if k <= 0.0 {
        return Err(Error::InvalidArgument(format!("rrf k must be > 0, got {k}")));
    }
    if rankings.is_empty() {
        return Err(Error::EmptyInput("rankings"));
    }
    let mut fused: BTreeMap<usize, f64> = BTreeMap::new();
    for ranking in rankings {
        for (pos, &doc) in ranking.docs.iter().enumerate() {
            *fused.entry(doc).or_insert(0.0) += 1.0 / (k + (pos + 1) as f64);
        }
    }
    let mut out: Vec<(usize, f64)> = fused.into_iter().collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(out.into_iter().map(|(d, s)| (d, cast(s))).collect())
}

/// All component scores for one retrieved document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalScore<S> {
    pub doc_idx: usize,
    pub doc_id: String,
    pub bm25: S,
    pub dense: S,
    pub bm25_norm: S,
    pub hybrid: S,
    pub rrf: Option<S>,
    /// 1-based rank per ranker id ("bm25", "dense").
    pub ranks: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub alpha: f64,
    pub top_k: usize,
    pub rrf_enabled: bool,
    pub rrf_k: f64,
    pub bm25: Bm25Params,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            alpha: 0.6,
            top_k: 10,
            rrf_enabled: true,
            rrf_k: 60.0,
            bm25: Bm25Params::default(),
        }
    }
}

/// Scores the whole corpus, selects the top-k pool by hybrid score, then (if
/// enabled) reorders the pool by fusing the BM25 and dense rankings with RRF.
pub fn retrieve_topk<S: Scalar>(
    prompt_tokens: &[u32],
    index: &CorpusIndex,
    table: &EmbeddingTable<S>,
    config: &RetrievalConfig,
) -> Result<Vec<RetrievalScore<S>>> {
    if prompt_tokens.is_empty() {
        return Err(Error::EmptyInput("prompt tokens"));
    }
    if index.n_docs() == 0 {
        return Err(Error::EmptyInput("corpus index"));
    }

    let prompt_emb = embed_text(prompt_tokens, table)?;
    let mut scored: Vec<RetrievalScore<S>> = Vec::with_capacity(index.n_docs());
    for (idx, doc) in index.docs().iter().enumerate() {
        let bm25 = bm25_score::<S>(prompt_tokens, idx, index, config.bm25)?;
        let dense = if doc.tokens.is_empty() {
            S::zero()
        } else {
            dense_sim(&prompt_emb, &embed_text(&doc.tokens, table)?)?
        };
        scored.push(RetrievalScore {
            doc_idx: idx,
            doc_id: doc.id.clone(),
            bm25,
            dense,
            bm25_norm: S::zero(),
            hybrid: S::zero(),
            rrf: None,
            ranks: BTreeMap::new(),
        });
    }

    // min-max normalize BM25 over the pool, then fuse
    let lo = scored.iter().map(|s| s.bm25).fold(S::infinity(), S::min);
    let hi = scored
        .iter()
        .map(|s| s.bm25)
        .fold(S::neg_infinity(), S::max);
    for s in &mut scored {
        s.bm25_norm = if hi > lo {
            (s.bm25 - lo) / (hi - lo)
        } else if hi > S::zero() {
            S::one()
        } else {
            S::zero()
        };
        s.hybrid = hybrid_score(s.bm25_norm, s.dense, config.alpha)?;
    }

    scored.sort_by(|a, b| {
        b.hybrid
            .partial_cmp(&a.hybrid)
            .unwrap()
            .then(a.doc_idx.cmp(&b.doc_idx))
    });
    scored.truncate(config.top_k.max(1));

    // per-ranker 1-based ranks over the pool, ties by ascending doc index
    let mut by_bm25: Vec<usize> = (0..scored.len()).collect();
    by_bm25.sort_by(|&i, &j| {
        scored[j]
            .bm25
            .partial_cmp(&scored[i].bm25)
            .unwrap()
            .then(scored[i].doc_idx.cmp(&scored[j].doc_idx))
    });
    let mut by_dense: Vec<usize> = (0..scored.len()).collect();
    by_dense.sort_by(|&i, &j| {
        scored[j]
            .dense
            .partial_cmp(&scored[i].dense)
            .unwrap()
            .then(scored[i].doc_idx.cmp(&scored[j].doc_idx))
    });
    for (rank0, &i) in by_bm25.iter().enumerate() {
        scored[i].ranks.insert("bm25".into(), rank0 + 1);
    }
    for (rank0, &i) in by_dense.iter().enumerate() {
        scored[i].ranks.insert("dense".into(), rank0 + 1);
    }

    if config.rrf_enabled {
        let rankings = [
            RankingList {
                ranker_id: "bm25".into(),
                docs: by_bm25.iter().map(|&i| scored[i].doc_idx).collect(),
            },
            RankingList {
                ranker_id: "dense".into(),
                docs: by_dense.iter().map(|&i| scored[i].doc_idx).collect(),
            },
        ];
        let fused = rrf_fuse::<S>(&rankings, config.rrf_k)?;
        let fused_map: BTreeMap<usize, S> = fused.iter().cloned().collect();
        for s in &mut scored {
            s.rrf = fused_map.get(&s.doc_idx).copied();
        }
        scored.sort_by(|a, b| {
            b.rrf
                .unwrap()
                .partial_cmp(&a.rrf.unwrap())
                .unwrap()
                .then(a.doc_idx.cmp(&b.doc_idx))
        });
    }

    Ok(scored)
}

/// Two-layer retrieval policy head with low-rank residuals on both layers.
/// Frozen by default; `train_step` is only reachable when unfrozen.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyAdapterParams<S> {
    pub w1: Matrix<S>, // hidden x feat
    pub a1: Matrix<S>, // rank x feat
    pub b1: Matrix<S>, // hidden x rank
    pub w2: Matrix<S>, // 1 x hidden
    pub a2: Matrix<S>, // rank x hidden
    pub b2: Matrix<S>, // 1 x rank
    pub frozen: bool,
}

impl<S: Scalar> PolicyAdapterParams<S> {
    pub fn seeded(feat_dim: usize, hidden: usize, rank: usize, seed: u64) -> Result<Self> {
        if rank > feat_dim {
            return Err(Error::InvalidArgument(format!(
                "policy rank {rank} exceeds feature dim {feat_dim}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut gauss = |r: usize, c: usize, std: f64| {
            Matrix::from_fn(r, c, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                cast(z * std)
            })
        };
        let s1 = 1.0 / (feat_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Ok(PolicyAdapterParams {
            w1: gauss(hidden, feat_dim, s1),
            a1: gauss(rank, feat_dim, 0.01),
            b1: Matrix::zeros(hidden, rank),
            w2: gauss(1, hidden, s2),
            a2: gauss(rank, hidden, 0.01),
            b2: Matrix::zeros(1, rank),
            frozen: true,
        })
    }

    fn feat_dim(&self) -> usize {
        self.w1.cols()
    }

    /// Scalar relevance score for one feature vector.
    pub fn score(&self, feat: &[S]) -> Result<S> {
        if feat.len() != self.feat_dim() {
            return Err(Error::DimMismatch(format!(
                "policy feature dim {} vs {}",
                feat.len(),
                self.feat_dim()
            )));
        }
        let x = Matrix::from_rows(vec![feat.to_vec()]);
        let mut h = x.matmul_nt(&self.w1);
        let low = x.matmul_nt(&self.a1).matmul_nt(&self.b1);
        h.add_scaled(&low, S::one());
        for v in h.data_mut() {
            *v = v.tanh();
        }
        let mut y = h.matmul_nt(&self.w2);
        let low2 = h.matmul_nt(&self.a2).matmul_nt(&self.b2);
        y.add_scaled(&low2, S::one());
        Ok(y.get(0, 0))
    }
}

/// Concatenated prompt/document feature for the policy head.
pub fn policy_features<S: Scalar>(prompt_emb: &[S], doc_emb: &[S]) -> Vec<S> {
    prompt_emb.iter().chain(doc_emb).copied().collect()
}

/// Softmax distribution over the candidate documents.
pub fn policy_score<S: Scalar>(
    prompt_feat: &[S],
    doc_feats: &[Vec<S>],
    params: &PolicyAdapterParams<S>,
) -> Result<Vec<S>> {
    if doc_feats.is_empty() {
        return Err(Error::EmptyInput("policy documents"));
    }
    let mut logits = Vec::with_capacity(doc_feats.len());
    for doc in doc_feats {
        let feat = policy_features(prompt_feat, doc);
        logits.push(params.score(&feat)?);
    }
    Ok(softmax(&logits))
}

/// InfoNCE-style binary contrastive loss over similarity scores, computed
/// with log-sum-exp stabilization.
pub fn policy_contrastive_loss<S: Scalar>(sim_pos: S, sim_negs: &[S]) -> Result<S> {
    if sim_negs.is_empty() {
        return Err(Error::EmptyInput("contrastive negatives"));
    }
    let m = sim_negs.iter().cloned().fold(sim_pos, S::max);
    let mut denom = (sim_pos - m).exp();
    for &s in sim_negs {
        denom += (s - m).exp();
    }
    Ok(denom.ln() - (sim_pos - m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{bundled_index, ingest_corpus_str, TokenizerConfig};

    fn tiny_index() -> CorpusIndex {
        let content = concat!(
            "{\"id\":\"d1\",\"text\":\"the cat sat on the mat\"}\n",
            "{\"id\":\"d2\",\"text\":\"a dog barked at the cat\"}\n",
            "{\"id\":\"d3\",\"text\":\"rivers flow to the sea\"}\n",
        );
        ingest_corpus_str(content, TokenizerConfig::default()).unwrap()
    }

    /// Independent Okapi BM25 transcription used as the test oracle.
    fn bm25_oracle(query: &[u32], doc_idx: usize, index: &CorpusIndex, k1: f64, b: f64) -> f64 {
        let doc = &index.docs()[doc_idx];
        let n = index.n_docs() as f64;
        let dl = doc.tokens.len() as f64;
        let avgdl = index
            .docs()
            .iter()
            .map(|d| d.tokens.len() as f64)
            .sum::<f64>()
            / n;
        let mut total = 0.0;
        for &term in query {
            let tf = doc.tokens.iter().filter(|&&t| t == term).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = index
                .docs()
                .iter()
                .filter(|d| d.tokens.contains(&term))
                .count() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            total += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
        }
        total
    }

    #[test]
    fn bm25_zero_without_shared_terms() {
        let index = tiny_index();
        let q = index.tokenize("zebra stripes");
        let s: f64 = bm25_score(&q, 0, &index, Bm25Params::default()).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn bm25_matches_oracle_on_tiny_corpus() {
        let index = tiny_index();
        let params = Bm25Params::default();
        for query in ["cat", "the cat", "rivers sea dog"] {
            let q = index.tokenize(query);
            for d in 0..index.n_docs() {
                let got: f64 = bm25_score(&q, d, &index, params).unwrap();
                let want = bm25_oracle(&q, d, &index, params.k1, params.b);
                assert!((got - want).abs() < 1e-9, "query {query} doc {d}");
            }
        }
    }

    #[test]
    fn bm25_is_monotone_in_tf() {
        // same doc with one extra occurrence of the query term scores higher
        let base = ingest_corpus_str(
            "{\"id\":\"a\",\"text\":\"cat dog bird\"}\n{\"id\":\"b\",\"text\":\"cat cat bird\"}",
            TokenizerConfig::default(),
        )
        .unwrap();
        let q = base.tokenize("cat");
        let s1: f64 = bm25_score(&q, 0, &base, Bm25Params::default()).unwrap();
        let s2: f64 = bm25_score(&q, 1, &base, Bm25Params::default()).unwrap();
        assert!(s2 > s1);
    }

    #[test]
    fn bm25_unknown_doc_errors() {
        let index = tiny_index();
        assert!(bm25_score::<f64>(&[1], 99, &index, Bm25Params::default()).is_err());
    }

    #[test]
    fn dense_sim_basics() {
        let a = vec![1.0f64, 0.0];
        let b = vec![0.0f64, 1.0];
        assert_eq!(dense_sim(&a, &a).unwrap(), 1.0);
        assert_eq!(dense_sim(&a, &b).unwrap(), 0.0);
        assert!(dense_sim(&a, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn hybrid_score_boundaries_and_example() {
        assert_eq!(hybrid_score(0.3f64, 0.9, 1.0).unwrap(), 0.3);
        assert_eq!(hybrid_score(0.3f64, 0.9, 0.0).unwrap(), 0.9);
        let h: f64 = hybrid_score(1.0, 0.5, 0.6).unwrap();
        assert!((h - 0.8).abs() < 1e-12);
        assert!(hybrid_score(0.5f64, 0.5, 1.5).is_err());
    }

    #[test]
    fn rrf_formula_examples() {
        let r = |id: &str, docs: Vec<usize>| RankingList {
            ranker_id: id.into(),
            docs,
        };
        let fused: Vec<(usize, f64)> = rrf_fuse(&[r("m1", vec![7])], 60.0).unwrap();
        assert!((fused[0].1 - 1.0 / 61.0).abs() < 1e-12);

        let fused: Vec<(usize, f64)> =
            rrf_fuse(&[r("m1", vec![7]), r("m2", vec![7])], 60.0).unwrap();
        assert!((fused[0].1 - 2.0 / 61.0).abs() < 1e-12);

        // doc 0 ranked (2,2) beats doc 1 ranked (1,10)
        let m1 = r("m1", vec![1, 0, 2, 3, 4, 5, 6, 7, 8, 9]);
        let m2 = r("m2", vec![2, 0, 3, 4, 5, 6, 7, 8, 9, 1]);
        let fused: Vec<(usize, f64)> = rrf_fuse(&[m1, m2], 60.0).unwrap();
        let score_of = |d: usize| fused.iter().find(|&&(x, _)| x == d).unwrap().1;
        assert!((score_of(0) - 2.0 / 62.0).abs() < 1e-12);
        assert!((score_of(1) - (1.0 / 61.0 + 1.0 / 70.0)).abs() < 1e-12);
        assert!(score_of(0) > score_of(1));

        assert!(rrf_fuse::<f64>(&[r("m", vec![0])], 0.0).is_err());
        assert!(rrf_fuse::<f64>(&[], 60.0).is_err());
    }

    #[test]
    fn retrieve_topk_saturation_and_single_doc() {
        let index = tiny_index();
        let table = EmbeddingTable::<f64>::seeded(index.vocab.len(), 8, 1);
        let mut config = RetrievalConfig {
            top_k: 50,
            ..Default::default()
        };
        let q = index.tokenize("the cat");
        let out = retrieve_topk(&q, &index, &table, &config).unwrap();
        assert_eq!(out.len(), index.n_docs());

        config.top_k = 1;
        let out = retrieve_topk(&q, &index, &table, &config).unwrap();
        assert_eq!(out.len(), 1);

        let single = ingest_corpus_str(
            "{\"id\":\"only\",\"text\":\"lonely words here\"}",
            TokenizerConfig::default(),
        )
        .unwrap();
        let table = EmbeddingTable::<f64>::seeded(single.vocab.len(), 8, 1);
        let out = retrieve_topk(
            &single.tokenize("anything"),
            &single,
            &table,
            &RetrievalConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].doc_id, "only");
    }

    #[test]
    fn retrieve_topk_bundled_finds_the_right_doc() {
        let index = bundled_index();
        let table = EmbeddingTable::<f64>::seeded(index.vocab.len(), 16, 3);
        let q = index.tokenize("capital of france");
        let out = retrieve_topk(&q, &index, &table, &RetrievalConfig::default()).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out
            .iter()
            .take(3)
            .any(|s| index.docs()[s.doc_idx].text.contains("Paris")));
        for s in &out {
            assert!(s.ranks.contains_key("bm25") && s.ranks.contains_key("dense"));
            assert!(s.rrf.is_some());
        }
    }

    #[test]
    fn retrieve_topk_matches_hand_fusion_trace() {
        // 5 docs engineered so BM25 and dense disagree; verify the final
        // order against a manual evaluation of the documented pipeline.
        let content = concat!(
            "{\"id\":\"a\",\"text\":\"apple apple apple\"}\n",
            "{\"id\":\"b\",\"text\":\"apple banana\"}\n",
            "{\"id\":\"c\",\"text\":\"banana cherry\"}\n",
            "{\"id\":\"d\",\"text\":\"cherry cherry apple\"}\n",
            "{\"id\":\"e\",\"text\":\"durian fig\"}\n",
        );
        let index = ingest_corpus_str(content, TokenizerConfig::default()).unwrap();
        let table = EmbeddingTable::<f64>::seeded(index.vocab.len(), 8, 11);
        let config = RetrievalConfig::default();
        let q = index.tokenize("apple cherry");
        let out = retrieve_topk(&q, &index, &table, &config).unwrap();

        // manual trace
        let prompt_emb = embed_text(&q, &table).unwrap();
        let mut manual: Vec<(usize, f64, f64)> = (0..5)
            .map(|d| {
                let bm: f64 = bm25_score(&q, d, &index, config.bm25).unwrap();
                let de =
                    dense_sim(&prompt_emb, &embed_text(&index.docs()[d].tokens, &table).unwrap())
                        .unwrap();
                (d, bm, de)
            })
            .collect();
        let (lo, hi) = manual
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &(_, bm, _)| {
                (l.min(bm), h.max(bm))
            });
        let mut hybrid: Vec<(usize, f64)> = manual
            .iter()
            .map(|&(d, bm, de)| {
                let norm = if hi > lo { (bm - lo) / (hi - lo) } else { 1.0 };
                (d, 0.6 * norm + 0.4 * de)
            })
            .collect();
        hybrid.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        manual.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let bm_rank: Vec<usize> = manual.iter().map(|&(d, _, _)| d).collect();
        let mut by_dense = manual.clone();
        by_dense.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
        let dense_rank: Vec<usize> = by_dense.iter().map(|&(d, _, _)| d).collect();
        let mut fused: Vec<(usize, f64)> = (0..5)
            .map(|d| {
                let r1 = bm_rank.iter().position(|&x| x == d).unwrap() + 1;
                let r2 = dense_rank.iter().position(|&x| x == d).unwrap() + 1;
                (d, 1.0 / (60.0 + r1 as f64) + 1.0 / (60.0 + r2 as f64))
            })
            .collect();
        fused.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

        let got: Vec<usize> = out.iter().map(|s| s.doc_idx).collect();
        let want: Vec<usize> = fused.iter().map(|&(d, _)| d).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn policy_score_uniform_single_and_manual() {
        let params = PolicyAdapterParams::<f64>::seeded(8, 4, 2, 5).unwrap();
        let prompt = vec![0.1; 4];
        let doc = vec![0.2; 4];
        // identical doc features -> uniform
        let pi = policy_score(&prompt, &[doc.clone(), doc.clone(), doc.clone()], &params).unwrap();
        for &p in &pi {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        // single doc -> probability one
        let pi = policy_score(&prompt, &[doc.clone()], &params).unwrap();
        assert!((pi[0] - 1.0).abs() < 1e-12);

        // two docs, hand-set weights: score = w2 tanh(w1 f) with zero residuals
        let mut p = PolicyAdapterParams::<f64>::seeded(2, 1, 1, 0).unwrap();
        p.w1 = Matrix::from_rows(vec![vec![1.0, 0.5]]);
        p.a1 = Matrix::zeros(1, 2);
        p.b1 = Matrix::zeros(1, 1);
        p.w2 = Matrix::from_rows(vec![vec![2.0]]);
        p.a2 = Matrix::zeros(1, 1);
        p.b2 = Matrix::zeros(1, 1);
        let s_a = 2.0 * (1.0f64 * 1.0 + 0.5 * 3.0).tanh();
        let s_b = 2.0 * (1.0f64 * 2.0 + 0.5 * 4.0).tanh();
        let pi = policy_score(&[1.0], &[vec![3.0], vec![4.0]], &p);
        // prompt feat [1.0] + doc feat [3.0] -> [1.0, 3.0]
        let pi = pi.unwrap();
        let want = softmax(&[s_a, s_b]);
        assert!((pi[0] - want[0]).abs() < 1e-12);
        assert!((pi[1] - want[1]).abs() < 1e-12);
    }

    #[test]
    fn contrastive_loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        let l: f64 = policy_contrastive_loss(1.0, &[1.0]).unwrap();
        assert!((l - ln2).abs() < 1e-12);
        let l: f64 = policy_contrastive_loss(1.0, &[0.0, 0.0]).unwrap();
        let want = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((l - want).abs() < 1e-12);
        // monotone decreasing toward zero as sim_pos grows
        let l_big: f64 = policy_contrastive_loss(30.0, &[0.0, 0.0]).unwrap();
        assert!(l_big < 1e-9 && l_big >= 0.0);
        assert!(policy_contrastive_loss::<f64>(0.0, &[]).is_err());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rrf_permutation_invariant(perm in proptest::sample::select(vec![0usize, 1, 2])) {
            let rankings = vec![
                RankingList { ranker_id: "a".into(), docs: vec![0, 1, 2] },
                RankingList { ranker_id: "b".into(), docs: vec![2, 0] },
                RankingList { ranker_id: "c".into(), docs: vec![1] },
            ];
            let mut rotated = rankings.clone();
            rotated.rotate_left(perm);
            let x: Vec<(usize, f64)> = rrf_fuse(&rankings, 60.0).unwrap();
            let y: Vec<(usize, f64)> = rrf_fuse(&rotated, 60.0).unwrap();
            for ((d1, s1), (d2, s2)) in x.iter().zip(&y) {
                prop_assert_eq!(d1, d2);
                prop_assert!((s1 - s2).abs() < 1e-12);
            }
        }

        #[test]
        fn hybrid_monotone_in_components(
            b1 in 0.0f64..1.0, b2 in 0.0f64..1.0,
            d in -1.0f64..1.0, alpha in 0.0f64..1.0,
        ) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let x: f64 = hybrid_score(lo, d, alpha).unwrap();
            let y: f64 = hybrid_score(hi, d, alpha).unwrap();
            prop_assert!(y >= x - 1e-12);
        }

        #[test]
        fn dense_sim_symmetric(seed in 0u64..500) {
            let table = EmbeddingTable::<f64>::seeded(16, 8, seed);
            let a = table.pooled_unit(&[1, 2]).unwrap();
            let b = table.pooled_unit(&[3, 4, 5]).unwrap();
            let ab: f64 = dense_sim(&a, &b).unwrap();
            let ba: f64 = dense_sim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
        }

        #[test]
        fn policy_softmax_shift_invariant(shift in -5.0f64..5.0, seed in 0u64..100) {
            let params = PolicyAdapterParams::<f64>::seeded(4, 3, 2, seed).unwrap();
            let prompt = vec![0.3, -0.1];
            let docs = vec![vec![0.5, 0.2], vec![-0.4, 0.9], vec![0.0, 0.0]];
            let pi = policy_score(&prompt, &docs, &params).unwrap();
            let sum: f64 = pi.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            // softmax over (logits + shift) equals softmax over logits
            let mut logits: Vec<f64> = docs
                .iter()
                .map(|d| params.score(&policy_features(&prompt, d)).unwrap())
                .collect();
            for l in &mut logits { *l += shift; }
            let shifted = softmax(&logits);
            for (a, b) in pi.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
