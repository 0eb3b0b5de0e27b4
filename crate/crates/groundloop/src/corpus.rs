//! Corpus ingestion: tokenization, vocabulary construction, and the inverted
//! index that backs lexical retrieval and the toy language model.
//!
//! The tokenizer is deliberately simple and deterministic: lowercase, split
//! on whitespace, and emit every non-alphanumeric character as its own
//! single-character token. The vocabulary is the set of corpus tokens plus
//! four specials, capped by frequency (ties broken lexicographically).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub vocab_cap: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            lowercase: true,
            vocab_cap: 8192,
        }
    }
}

/// Splits text into surface tokens before any vocabulary lookup.
pub fn surface_tokens(text: &str, config: &TokenizerConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        let ch = if config.lowercase {
            ch.to_ascii_lowercase()
        } else {
            ch
        };
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from token streams: specials first, then corpus
    /// tokens ordered by descending frequency (lexicographic tie-break),
    /// truncated at `cap`.
    pub fn build<'a>(token_streams: impl Iterator<Item = &'a [String]>, cap: usize) -> Self {
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for stream in token_streams {
            for tok in stream {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for (tok, _) in ranked.into_iter().take(cap.saturating_sub(SPECIALS.len())) {
            id_to_token.push(tok.to_string());
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }
}

/// Total function: unknown surface tokens map to `UNK`.
pub fn tokenize(text: &str, vocab: &Vocabulary, config: &TokenizerConfig) -> Vec<u32> {
    surface_tokens(text, config)
        .iter()
        .map(|t| vocab.id_of(t).unwrap_or(UNK_ID))
        .collect()
}

/// Inverse of [`tokenize`] up to token boundaries: tokens joined by single
/// spaces, so `tokenize(detokenize(ids)) == ids` for non-special ids.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter_map(|&id| vocab.token_of(id))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub title: Option<String>,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    #[serde(default)]
    title: Option<String>,
}

/// One posting: (document index, term frequency), sorted by document index.
pub type Posting = (u32, u32);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusIndex {
    format_version: u32,
    pub config: TokenizerConfig,
    pub vocab: Vocabulary,
    docs: Vec<Document>,
    /// term id -> postings, indexed over the whole vocabulary.
    postings: Vec<Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
}

impl CorpusIndex {
    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, idx: usize) -> Option<&Document> {
        self.docs.get(idx)
    }

    pub fn doc_by_id(&self, id: &str) -> Option<(usize, &Document)> {
        self.docs.iter().enumerate().find(|(_, d)| d.id == id)
    }

    pub fn postings(&self, term: u32) -> &[Posting] {
        self.postings
            .get(term as usize)
            .map_or(&[], Vec::as_slice)
    }

    pub fn doc_length(&self, idx: usize) -> u32 {
        self.doc_lengths[idx]
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    /// Number of documents containing `term`.
    pub fn doc_freq(&self, term: u32) -> usize {
        self.postings(term).len()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize(text, &self.vocab, &self.config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let index: CorpusIndex = serde_json::from_str(json)?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: INDEX_FORMAT_VERSION,
                found: index.format_version,
            });
        }
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json(&json)
    }
}

/// Ingests a JSON-lines corpus file (`{"id", "text", "title"?}` per line).
pub fn ingest_corpus(path: &Path, config: TokenizerConfig) -> Result<CorpusIndex> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    ingest_corpus_str(&content, config)
}

/// Same as [`ingest_corpus`] but over in-memory bytes; ingestion is a pure
/// function of (bytes, config).
pub fn ingest_corpus_str(content: &str, config: TokenizerConfig) -> Result<CorpusIndex> {
    let mut raw: Vec<RawRecord> = Vec::new();
    let mut seen = BTreeMap::new();
    for (lineno, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord =
            serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        if record.id.is_empty() {
            return Err(Error::MalformedRecord {
                line: lineno + 1,
                reason: "empty id".into(),
            });
        }
        if seen.insert(record.id.clone(), ()).is_some() {
            return Err(Error::DuplicateDocId(record.id));
        }
        raw.push(record);
    }

    let surfaces: Vec<Vec<String>> = raw
        .iter()
        .map(|r| surface_tokens(&r.text, &config))
        .collect();
    let vocab = Vocabulary::build(surfaces.iter().map(Vec::as_slice), config.vocab_cap);

    let mut docs = Vec::with_capacity(raw.len());
    let mut postings: Vec<Vec<Posting>> = vec![Vec::new(); vocab.len()];
    let mut doc_lengths = Vec::with_capacity(raw.len());

    for (doc_idx, (record, surface)) in raw.into_iter().zip(&surfaces).enumerate() {
        let tokens: Vec<u32> = surface
            .iter()
            .map(|t| vocab.id_of(t).unwrap_or(UNK_ID))
            .collect();
        let mut tf: BTreeMap<u32, u32> = BTreeMap::new();
        for &t in &tokens {
            *tf.entry(t).or_insert(0) += 1;
        }
        for (term, count) in tf {
            postings[term as usize].push((doc_idx as u32, count));
        }
        doc_lengths.push(tokens.len() as u32);
        docs.push(Document {
            id: record.id,
            text: record.text,
            title: record.title,
            tokens,
        });
    }

    let avg_doc_length = if docs.is_empty() {
        0.0
    } else {
        doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / docs.len() as f64
    };

    Ok(CorpusIndex {
        format_version: INDEX_FORMAT_VERSION,
        config,
        vocab,
        docs,
        postings,
        doc_lengths,
        avg_doc_length,
    })
}

/// The synthetic factual corpus bundled with the crate; every test that needs
/// a corpus can run hermetically against it.
pub fn bundled_corpus_jsonl() -> &'static str {
    include_str!("../assets/corpus.jsonl")
}

pub fn bundled_index() -> CorpusIndex {
    ingest_corpus_str(bundled_corpus_jsonl(), TokenizerConfig::default())
        .expect("bundled corpus is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_empty_index() {
        let index = ingest_corpus_str("", TokenizerConfig::default()).unwrap();
        assert_eq!(index.n_docs(), 0);
        assert_eq!(index.avg_doc_length(), 0.0);
    }

    #[test]
    fn single_doc_term_frequencies() {
        let index = ingest_corpus_str(
            r#"{"id":"d","text":"a b a"}"#,
            TokenizerConfig::default(),
        )
        .unwrap();
        assert_eq!(index.doc_length(0), 3);
        let a = index.vocab.id_of("a").unwrap();
        let b = index.vocab.id_of("b").unwrap();
        assert_eq!(index.postings(a), &[(0, 2)]);
        assert_eq!(index.postings(b), &[(0, 1)]);
    }

    #[test]
    fn ingestion_is_deterministic() {
        let content = bundled_corpus_jsonl();
        let a = ingest_corpus_str(content, TokenizerConfig::default()).unwrap();
        let b = ingest_corpus_str(content, TokenizerConfig::default()).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn duplicate_id_is_rejected_by_name() {
        let content = "{\"id\":\"x\",\"text\":\"a\"}\n{\"id\":\"x\",\"text\":\"b\"}";
        match ingest_corpus_str(content, TokenizerConfig::default()) {
            Err(Error::DuplicateDocId(id)) => assert_eq!(id, "x"),
            other => panic!("expected duplicate-id error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let content = "{\"id\":\"x\",\"text\":\"a\"}\nnot json";
        match ingest_corpus_str(content, TokenizerConfig::default()) {
            Err(Error::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-record error, got {other:?}"),
        }
    }

    #[test]
    fn tokenizer_rules_by_hand() {
        let cfg = TokenizerConfig::default();
        assert!(surface_tokens("", &cfg).is_empty());
        assert_eq!(surface_tokens("The cat.", &cfg), vec!["the", "cat", "."]);
        let index =
            ingest_corpus_str(r#"{"id":"d","text":"The cat."}"#, cfg.clone()).unwrap();
        let ids = index.tokenize("The cat.");
        assert_eq!(
            ids,
            vec![
                index.vocab.id_of("the").unwrap(),
                index.vocab.id_of("cat").unwrap(),
                index.vocab.id_of(".").unwrap()
            ]
        );
        assert_eq!(index.tokenize("dog"), vec![UNK_ID]);
        assert!(index.tokenize("").is_empty());
    }

    #[test]
    fn doc_lengths_match_tokenization_and_tf_sums() {
        let index = bundled_index();
        assert!(index.n_docs() >= 150);
        for (i, doc) in index.docs().iter().enumerate() {
            assert_eq!(index.tokenize(&doc.text).len() as u32, index.doc_length(i));
        }
        // posting tf sums equal a linear-scan count, and per-doc tf sums
        // equal the doc length
        let mut per_doc: Vec<u64> = vec![0; index.n_docs()];
        for term in 0..index.vocab.len() as u32 {
            let postings = index.postings(term);
            assert!(postings.windows(2).all(|w| w[0].0 < w[1].0), "sorted");
            let mut scan = 0u64;
            for doc in index.docs() {
                scan += doc.tokens.iter().filter(|&&t| t == term).count() as u64;
            }
            let total: u64 = postings.iter().map(|&(_, tf)| tf as u64).sum();
            assert_eq!(total, scan);
            for &(doc, tf) in postings {
                per_doc[doc as usize] += tf as u64;
            }
        }
        for (i, &sum) in per_doc.iter().enumerate() {
            assert_eq!(sum, index.doc_length(i) as u64);
        }
    }

    #[test]
    fn serialization_roundtrip_and_version_check() {
        let index = ingest_corpus_str(
            r#"{"id":"d","text":"a b a","title":"t"}"#,
            TokenizerConfig::default(),
        )
        .unwrap();
        let json = index.to_json().unwrap();
        let back = CorpusIndex::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);

        let bad = json.replacen("\"format_version\":1", "\"format_version\":99", 1);
        assert!(matches!(
            CorpusIndex::from_json(&bad),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn detokenize_roundtrips_token_boundaries() {
        let index = bundled_index();
        for doc in index.docs().iter().take(20) {
            let text = detokenize(&doc.tokens, &index.vocab);
            assert_eq!(index.tokenize(&text), doc.tokens);
        }
    }
}
