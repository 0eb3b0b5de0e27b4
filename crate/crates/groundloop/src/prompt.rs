//! Prompt rewriting and synthetic negative generation.
//!
//! The rewriter is rule-based: interrogative inputs become
//! `Answer factually: <Q>?`, everything else becomes
//! `Explain whether <proposition>.`. Corruption produces fluent-but-wrong
//! completions from grounded text via an auditable rule table (entity swaps,
//! number perturbation, negation flips, span replacement); the paraphrase
//! mutator substitutes synonyms from a bundled table and then applies exactly
//! one corruption, standing in for a round-trip translation step.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusIndex;
use crate::error::{Error, Result};
use crate::scalar::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateId {
    AnswerFactually,
    ExplainWhether,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// Input was already structured; returned unchanged.
    Rule,
    /// A rewriting template was applied.
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub raw: String,
    pub rewritten: String,
    pub template_id: TemplateId,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy)]
pub struct TemplateSet {
    pub question: bool,
    pub explain: bool,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            question: true,
            explain: true,
        }
    }
}

const QUESTION_PREFIX: &str = "Answer factually:";
const EXPLAIN_PREFIX: &str = "Explain whether";

const INTERROGATIVES: &[&str] = &[
    "does", "do", "is", "are", "was", "were", "did", "can", "could", "will", "would", "has",
    "have", "who", "what", "when", "where", "why", "which", "how",
];

fn first_word(s: &str) -> &str {
    s.split_whitespace().next().unwrap_or("")
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

/// Rewrites a raw query into a structured prompt. Idempotent: an
/// already-templated input is returned unchanged.
pub fn rewrite_prompt(raw: &str, templates: TemplateSet) -> Result<StructuredPrompt> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    if !templates.question && !templates.explain {
        return Err(Error::InvalidArgument("no rewriting template enabled".into()));
    }

    if trimmed.starts_with(QUESTION_PREFIX) {
        return Ok(StructuredPrompt {
            raw: raw.to_string(),
            rewritten: trimmed.to_string(),
            template_id: TemplateId::AnswerFactually,
            provenance: Provenance::Rule,
        });
    }
    if trimmed.starts_with(EXPLAIN_PREFIX) {
        return Ok(StructuredPrompt {
            raw: raw.to_string(),
            rewritten: trimmed.to_string(),
            template_id: TemplateId::ExplainWhether,
            provenance: Provenance::Rule,
        });
    }

    let interrogative = trimmed.ends_with('?')
        || INTERROGATIVES.contains(&first_word(trimmed).to_ascii_lowercase().as_str());

    // Tie-break prefers the question template whenever it is available.
    let use_question = templates.question && (interrogative || !templates.explain);

    let core = trimmed.trim_end_matches(['?', '.', '!']).trim_end();
    if core.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }

    let (rewritten, template_id) = if use_question {
        let with_aux = if INTERROGATIVES.contains(&first_word(core).to_ascii_lowercase().as_str())
        {
            core.to_string()
        } else {
            format!("Does {core}")
        };
        (
            format!("{QUESTION_PREFIX} {}?", capitalize_first(&with_aux)),
            TemplateId::AnswerFactually,
        )
    } else {
        (
            format!("{EXPLAIN_PREFIX} {core}."),
            TemplateId::ExplainWhether,
        )
    };

    Ok(StructuredPrompt {
        raw: raw.to_string(),
        rewritten,
        template_id,
        provenance: Provenance::Template,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    EntitySwap,
    NumberFlip,
    NegationFlip,
    SpanReplace,
}

/// Rule table loaded from JSON; see `assets/rules.json` for the schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleTable {
    pub entity_swaps: Vec<(String, String)>,
    pub number_offsets: Vec<i64>,
    pub negation_patterns: Vec<(String, String)>,
    pub span_replacements: Vec<(String, String)>,
}

impl RuleTable {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn bundled() -> Self {
        Self::from_json(include_str!("../assets/rules.json")).expect("bundled rule table")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynonymTable(pub std::collections::BTreeMap<String, Vec<String>>);

impl SynonymTable {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(SynonymTable(serde_json::from_str(json)?))
    }

    pub fn bundled() -> Self {
        Self::from_json(include_str!("../assets/synonyms.json")).expect("bundled synonym table")
    }

    pub fn empty() -> Self {
        SynonymTable(Default::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppliedRule {
    pub kind: CorruptionKind,
    pub matched: String,
    pub replacement: String,
    pub position: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corruption {
    pub text: String,
    pub trace: Vec<AppliedRule>,
}

struct Candidate {
    kind: CorruptionKind,
    start: usize,
    len: usize,
    replacement: String,
}

/// Case-insensitive substring search returning byte offsets.
fn find_all(haystack: &str, needle: &str) -> Vec<usize> {
    let hay = haystack.to_lowercase();
    let ndl = needle.to_lowercase();
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(pos) = hay[from..].find(&ndl) {
        out.push(from + pos);
        from += pos + ndl.len().max(1);
    }
    out
}

fn word_bounded(text: &str, start: usize, len: usize) -> bool {
    let before_ok = start == 0
        || !text[..start]
            .chars()
            .next_back()
            .is_some_and(|c| c.is_alphanumeric());
    let after_ok = start + len >= text.len()
        || !text[start + len..]
            .chars()
            .next()
            .is_some_and(|c| c.is_alphanumeric());
    before_ok && after_ok
}

/// Mirror the case of the matched span's first letter onto the replacement.
fn match_case(matched: &str, replacement: &str) -> String {
    if matched.chars().next().is_some_and(char::is_uppercase) {
        capitalize_first(replacement)
    } else {
        replacement.to_string()
    }
}

fn collect_candidates(text: &str, rules: &RuleTable, rng: &mut ChaCha12Rng) -> Vec<Candidate> {
    let mut candidates = Vec::new();

    for (from, to) in &rules.entity_swaps {
        for start in find_all(text, from) {
            if word_bounded(text, start, from.len()) {
                candidates.push(Candidate {
                    kind: CorruptionKind::EntitySwap,
                    start,
                    len: from.len(),
                    replacement: match_case(&text[start..start + from.len()], to),
                });
            }
        }
    }

    if !rules.number_offsets.is_empty() {
        let bytes = text.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i].is_ascii_digit() {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if word_bounded(text, start, i - start) {
                    if let Ok(value) = text[start..i].parse::<i64>() {
                        let offset =
                            rules.number_offsets[rng.random_range(0..rules.number_offsets.len())];
                        candidates.push(Candidate {
                            kind: CorruptionKind::NumberFlip,
                            start,
                            len: i - start,
                            replacement: (value + offset).to_string(),
                        });
                    }
                }
            } else {
                i += 1;
            }
        }
    }

    for (from, to) in &rules.negation_patterns {
        for start in find_all(text, from) {
            candidates.push(Candidate {
                kind: CorruptionKind::NegationFlip,
                start,
                len: from.len(),
                replacement: match_case(&text[start..start + from.len()], to),
            });
        }
    }

    for (from, to) in &rules.span_replacements {
        for start in find_all(text, from) {
            candidates.push(Candidate {
                kind: CorruptionKind::SpanReplace,
                start,
                len: from.len(),
                replacement: match_case(&text[start..start + from.len()], to),
            });
        }
    }

    // Keep only the longest candidate at any given start offset, drop
    // no-op replacements, and order deterministically.
    candidates.retain(|c| !text[c.start..c.start + c.len].eq_ignore_ascii_case(&c.replacement));
    candidates.sort_by(|a, b| a.start.cmp(&b.start).then(b.len.cmp(&a.len)));
    candidates.dedup_by(|b, a| a.start == b.start);
    candidates
}

/// Applies exactly one corruption rule, chosen deterministically from `seed`.
pub fn corrupt_rule_based(text: &str, rules: &RuleTable, seed: u64) -> Result<Corruption> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("corruption input"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let candidates = collect_candidates(text, rules, &mut rng);
    if candidates.is_empty() {
        return Err(Error::NoRuleMatches);
    }
    let chosen = &candidates[rng.random_range(0..candidates.len())];
    let mut out = String::with_capacity(text.len());
    out.push_str(&text[..chosen.start]);
    out.push_str(&chosen.replacement);
    out.push_str(&text[chosen.start + chosen.len..]);
    Ok(Corruption {
        text: out,
        trace: vec![AppliedRule {
            kind: chosen.kind,
            matched: text[chosen.start..chosen.start + chosen.len].to_string(),
            replacement: chosen.replacement.clone(),
            position: chosen.start,
        }],
    })
}

/// Synonym-table paraphrase followed by exactly one corruption. With an empty
/// synonym table this reduces to `corrupt_rule_based(text, rules, seed)`.
/// Inputs shorter than three words skip the paraphrase entirely.
pub fn paraphrase_mutate(
    text: &str,
    rules: &RuleTable,
    synonyms: &SynonymTable,
    seed: u64,
) -> Result<Corruption> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("paraphrase input"));
    }
    let word_count = text.split_whitespace().count();
    if word_count < 3 {
        return corrupt_rule_based(text, rules, seed);
    }

    let mut para_rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x70617261));
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String, rng: &mut ChaCha12Rng| {
        if word.is_empty() {
            return;
        }
        let key = word.to_lowercase();
        if let Some(alts) = synonyms.0.get(&key) {
            if !alts.is_empty() {
                let alt = &alts[rng.random_range(0..alts.len())];
                out.push_str(&match_case(word, alt));
                word.clear();
                return;
            }
        }
        out.push_str(word);
        word.clear();
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out, &mut para_rng);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out, &mut para_rng);

    corrupt_rule_based(&out, rules, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Grounded = 0,
    Hallucinated = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Synthetic,
    HumanAligned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledPair {
    pub prompt: StructuredPrompt,
    pub completion: String,
    pub label: Label,
    pub source: PairSource,
    /// Document the completion was derived from; detection features are
    /// computed against this document.
    pub source_doc_id: String,
    pub trace: Vec<AppliedRule>,
}

/// Fraction of hallucinated samples produced by rule corruption (the rest
/// come from the paraphrase mutator). Counts are rounded to the nearest
/// integer.
pub const RULE_CORRUPTION_FRACTION: f64 = 0.7;

/// Builds a balanced detection training set: `n/2` grounded pairs (document
/// text copied verbatim) and `n/2` hallucinated pairs, each from a distinct
/// source document.
pub fn build_negative_set(
    index: &CorpusIndex,
    rules: &RuleTable,
    synonyms: &SynonymTable,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledPair>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "negative set size must be even, got {n}"
        )));
    }
    if index.n_docs() == 0 {
        return Err(Error::EmptyInput("corpus"));
    }
    if n > index.n_docs() {
        return Err(Error::CorpusTooSmall {
            requested: n,
            achievable: index.n_docs() - index.n_docs() % 2,
        });
    }

    let mut order: Vec<usize> = (0..index.n_docs()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }

    let half = n / 2;
    let n_rule = (half as f64 * RULE_CORRUPTION_FRACTION).round() as usize;
    let mut pairs = Vec::with_capacity(n);
    let mut pool = order.into_iter();

    for _ in 0..half {
        let doc = index.doc(pool.next().expect("pool sized above")).unwrap();
        let prompt = doc_prompt(doc.title.as_deref(), &doc.text)?;
        pairs.push(LabeledPair {
            prompt,
            completion: doc.text.clone(),
            label: Label::Grounded,
            source: PairSource::HumanAligned,
            source_doc_id: doc.id.clone(),
            trace: Vec::new(),
        });
    }

    let mut made = 0;
    for doc_idx in pool {
        if made == half {
            break;
        }
        let doc = index.doc(doc_idx).unwrap();
        let sample_seed = derive_seed(seed, 1000 + made as u64);
        let corrupted = if made < n_rule {
            corrupt_rule_based(&doc.text, rules, sample_seed)
        } else {
            paraphrase_mutate(&doc.text, rules, synonyms, sample_seed)
        };
        let corrupted = match corrupted {
            Ok(c) => c,
            Err(Error::NoRuleMatches) => continue, // skip uncorruptible docs
            Err(e) => return Err(e),
        };
        debug_assert_ne!(corrupted.text, doc.text);
        let prompt = doc_prompt(doc.title.as_deref(), &doc.text)?;
        pairs.push(LabeledPair {
            prompt,
            completion: corrupted.text,
            label: Label::Hallucinated,
            source: PairSource::Synthetic,
            source_doc_id: doc.id.clone(),
            trace: corrupted.trace,
        });
        made += 1;
    }

    if made < half {
        return Err(Error::CorpusTooSmall {
            requested: n,
            achievable: 2 * made,
        });
    }
    Ok(pairs)
}

fn doc_prompt(title: Option<&str>, text: &str) -> Result<StructuredPrompt> {
    let raw = match title {
        Some(t) if !t.trim().is_empty() => t.to_string(),
        _ => text.split_whitespace().take(5).collect::<Vec<_>>().join(" "),
    };
    rewrite_prompt(&raw, TemplateSet::default())
}
