//! Corpus data model for nested span annotations: loading, validation,
//! subsampling, synthesis and statistics.
//!
//! Spans use inclusive `start`/`end` token indices. Overlapping and
//! fully nested spans are legal; duplicate `(start, end, label)`
//! triples are not.

mod jsonl;
mod synth;

pub use jsonl::{load_jsonl, write_jsonl};
pub use synth::{synthesize, SynthConfig};

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("no sentences")]
    Empty,
    #[error("invalid label set: {0}")]
    BadLabels(String),
    #[error("fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("invalid synthesis config: {0}")]
    BadSynthConfig(String),
}

/// One annotated span with inclusive endpoints.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<SpanAnnotation>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Ordered set of distinct labels; the position of a label is its class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>) -> Result<Self, CorpusError> {
        if labels.is_empty() {
            return Err(CorpusError::BadLabels("label set is empty".into()));
        }
        let mut by_name = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if by_name.insert(l.clone(), i).is_some() {
                return Err(CorpusError::BadLabels(format!("duplicate label {l:?}")));
            }
        }
        Ok(Self { labels, by_name })
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.by_name.get(label).copied()
    }

    pub fn name(&self, class: usize) -> &str {
        &self.labels[class]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = CorpusError;
    fn try_from(labels: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(labels)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(s: LabelSet) -> Self {
        s.labels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub labels: LabelSet,
}

impl Corpus {
    pub fn entity_count(&self) -> usize {
        self.sentences.iter().map(|s| s.entities.len()).sum()
    }
}

/// A single invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub sentence_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every sentence against the data-model invariants. All
/// problems are collected, none are thrown.
pub fn validate(corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut flag = |id: &str, message: String| {
        report.violations.push(Violation {
            sentence_id: id.to_string(),
            message,
        });
    };
    for sent in &corpus.sentences {
        let k = sent.tokens.len();
        if k == 0 {
            flag(&sent.id, "empty token list".into());
        }
        let mut seen = std::collections::HashSet::new();
        for ann in &sent.entities {
            if ann.start > ann.end {
                flag(
                    &sent.id,
                    format!("span start {} > end {}", ann.start, ann.end),
                );
            } else if ann.end >= k {
                flag(
                    &sent.id,
                    format!(
                        "span ({}, {}) outside sentence of length {k}",
                        ann.start, ann.end
                    ),
                );
            }
            if corpus.labels.index(&ann.label).is_none() {
                flag(&sent.id, format!("unknown label {:?}", ann.label));
            }
            if !seen.insert((ann.start, ann.end, ann.label.clone())) {
                flag(
                    &sent.id,
                    format!(
                        "duplicate annotation ({}, {}, {:?})",
                        ann.start, ann.end, ann.label
                    ),
                );
            }
        }
    }
    report
}

/// Uniform sentence-level subsample of `⌊fraction·N⌋` sentences
/// (at least one), without replacement, keeping corpus order.
/// Deterministic for a fixed seed; the label set is unchanged.
pub fn subsample(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::BadFraction(fraction));
    }
    let n = corpus.sentences.len();
    if n == 0 {
        return Ok(corpus.clone());
    }
    let m = ((fraction * n as f64).floor() as usize).clamp(1, n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..m {
        let j = rng.random_range(i..n);
        indices.swap(i, j);
    }
    let mut picked = indices[..m].to_vec();
    picked.sort_unstable();
    Ok(Corpus {
        sentences: picked
            .iter()
            .map(|&i| corpus.sentences[i].clone())
            .collect(),
        labels: corpus.labels.clone(),
    })
}

/// Per-class entity counts and ratios plus corpus-level histograms.
#[derive(Debug, Clone, Serialize)]
pub struct ClassStats {
    pub sentence_count: usize,
    pub entity_count: usize,
    /// One row per label, in label-set order.
    pub per_class: Vec<ClassCount>,
    /// entity length (inclusive token count) → occurrences
    pub entity_len_hist: BTreeMap<usize, usize>,
    /// sentence length → occurrences
    pub sentence_len_hist: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassCount {
    pub label: String,
    pub count: usize,
    pub ratio: f64,
}

pub fn class_stats(corpus: &Corpus) -> ClassStats {
    let mut counts = vec![0usize; corpus.labels.len()];
    let mut entity_len_hist = BTreeMap::new();
    let mut sentence_len_hist = BTreeMap::new();
    for sent in &corpus.sentences {
        *sentence_len_hist.entry(sent.tokens.len()).or_insert(0) += 1;
        for ann in &sent.entities {
            if let Some(c) = corpus.labels.index(&ann.label) {
                counts[c] += 1;
            }
            *entity_len_hist.entry(ann.end - ann.start + 1).or_insert(0) += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let per_class = counts
        .iter()
        .enumerate()
        .map(|(c, &count)| ClassCount {
            label: corpus.labels.name(c).to_string(),
            count,
            ratio: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        })
        .collect();
    ClassStats {
        sentence_count: corpus.sentences.len(),
        entity_count: total,
        per_class,
        entity_len_hist,
        sentence_len_hist,
    }
}

impl ClassStats {
    /// Tab-separated table: label, count, ratio.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\tcount\tratio\n");
        for row in &self.per_class {
            out.push_str(&format!("{}\t{}\t{:.6}\n", row.label, row.count, row.ratio));
        }
        out
    }
}

pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;

/// Token → index map with reserved UNK (0) and PAD (1) slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    by_token: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let by_token = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, by_token }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of `token`, falling back to UNK for out-of-vocabulary input.
    pub fn id_of(&self, token: &str) -> usize {
        self.by_token.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.by_token.contains_key(token)
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Builds a vocabulary from corpus tokens with frequency at least
/// `min_freq`, ordered by descending frequency with lexicographic
/// tie-breaking, after the reserved UNK and PAD entries.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Vocabulary {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for sent in &corpus.sentences {
        for tok in &sent.tokens {
            *freq.entry(tok.as_str()).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = freq.into_iter().filter(|&(_, n)| n >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens = vec!["<unk>".to_string(), "<pad>".to_string()];
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[allow(clippy::type_complexity)]
    pub(crate) fn corpus_from(
        labels: &[&str],
        sents: &[(&str, usize, &[(usize, usize, &str)])],
    ) -> Corpus {
        Corpus {
            sentences: sents
                .iter()
                .map(|(id, k, anns)| Sentence {
                    id: id.to_string(),
                    tokens: (0..*k).map(|t| format!("t{t}")).collect(),
                    entities: anns
                        .iter()
                        .map(|&(s, e, l)| SpanAnnotation {
                            start: s,
                            end: e,
                            label: l.to_string(),
                        })
                        .collect(),
                })
                .collect(),
            labels: LabelSet::new(labels.iter().map(|s| s.to_string()).collect()).unwrap(),
        }
    }

    #[test]
    fn validate_clean_corpus() {
        let c = corpus_from(&["X"], &[("a", 3, &[(0, 1, "X")])]);
        assert!(validate(&c).is_clean());
    }

    #[test]
    fn validate_reports_duplicates_and_bad_spans() {
        let c = corpus_from(
            &["X"],
            &[
                ("a", 2, &[(0, 1, "X"), (0, 1, "X")]),
                ("b", 2, &[(1, 0, "X")]),
            ],
        );
        let report = validate(&c);
        assert_eq!(report.violations.len(), 2);
        assert!(report.violations[0].message.contains("duplicate"));
        assert!(report.violations[1].message.contains("start 1 > end 0"));
    }

    #[test]
    fn validate_reports_out_of_range_span() {
        let c = corpus_from(&["X"], &[("a", 2, &[(0, 2, "X")])]);
        let report = validate(&c);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].message.contains("outside"));
    }

    #[test]
    fn subsample_identity_at_full_fraction() {
        let c = corpus_from(&["X"], &[("a", 2, &[]), ("b", 3, &[]), ("c", 4, &[])]);
        let sub = subsample(&c, 1.0, 7).unwrap();
        assert_eq!(sub.sentences, c.sentences);
    }

    #[test]
    fn subsample_matches_table_scale() {
        let sents: Vec<Sentence> = (0..15000)
            .map(|i| Sentence {
                id: i.to_string(),
                tokens: vec!["w".into()],
                entities: vec![],
            })
            .collect();
        let c = Corpus {
            sentences: sents,
            labels: LabelSet::new(vec!["X".into()]).unwrap(),
        };
        let sub = subsample(&c, 0.01, 1).unwrap();
        assert_eq!(sub.sentences.len(), 150);
    }

    #[test]
    fn subsample_is_deterministic() {
        let c = corpus_from(
            &["X"],
            &[("a", 2, &[]), ("b", 3, &[]), ("c", 4, &[]), ("d", 5, &[])],
        );
        let s1 = subsample(&c, 0.5, 99).unwrap();
        let s2 = subsample(&c, 0.5, 99).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.sentences.len(), 2);
    }

    #[test]
    fn subsample_rejects_bad_fraction() {
        let c = corpus_from(&["X"], &[("a", 2, &[])]);
        assert!(subsample(&c, 0.0, 0).is_err());
        assert!(subsample(&c, 1.5, 0).is_err());
    }

    #[test]
    fn class_stats_ratios() {
        let c = corpus_from(
            &["A", "B"],
            &[(
                "a",
                4,
                &[(0, 0, "A"), (1, 1, "A"), (2, 3, "A"), (0, 3, "B")],
            )],
        );
        let stats = class_stats(&c);
        assert_eq!(stats.entity_count, 4);
        assert_eq!(stats.per_class[0].count, 3);
        assert!((stats.per_class[0].ratio - 0.75).abs() < 1e-12);
        assert!((stats.per_class[1].ratio - 0.25).abs() < 1e-12);
        assert_eq!(stats.entity_len_hist[&1], 2);
        assert_eq!(stats.entity_len_hist[&2], 1);
        assert_eq!(stats.entity_len_hist[&4], 1);
    }

    #[test]
    fn class_stats_empty_corpus_is_all_zero() {
        let c = corpus_from(&["A", "B"], &[("a", 2, &[])]);
        let stats = class_stats(&c);
        assert_eq!(stats.entity_count, 0);
        assert!(stats
            .per_class
            .iter()
            .all(|r| r.count == 0 && r.ratio == 0.0));
    }

    #[test]
    fn class_stats_long_tail_biomedical_ratios() {
        // Entity mix shaped like a five-class biomedical corpus with a
        // 60.7 / 18.1 / 12.7 / 6.8 / 1.7 percent split.
        let counts = [607usize, 181, 127, 68, 17];
        let labels = ["protein", "dna", "cell_type", "cell_line", "rna"];
        let mut anns: Vec<(usize, usize, &str)> = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                anns.push((c, c, labels[c]));
            }
        }
        // duplicates are irrelevant to counting here; spread them over many sentences
        let sentences: Vec<Sentence> = anns
            .chunks(1)
            .enumerate()
            .map(|(i, chunk)| Sentence {
                id: i.to_string(),
                tokens: (0..5).map(|t| format!("t{t}")).collect(),
                entities: chunk
                    .iter()
                    .map(|&(s, e, l)| SpanAnnotation {
                        start: s,
                        end: e,
                        label: l.to_string(),
                    })
                    .collect(),
            })
            .collect();
        let c = Corpus {
            sentences,
            labels: LabelSet::new(labels.iter().map(|s| s.to_string()).collect()).unwrap(),
        };
        let stats = class_stats(&c);
        assert!((stats.per_class[0].ratio - 0.607).abs() < 1e-12);
        assert!((stats.per_class[4].ratio - 0.017).abs() < 1e-12);
        let ratio_sum: f64 = stats.per_class.iter().map(|r| r.ratio).sum();
        assert!((ratio_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vocab_min_freq_filters() {
        let c = Corpus {
            sentences: vec![Sentence {
                id: "a".into(),
                tokens: vec!["a".into(), "a".into(), "a".into(), "b".into()],
                entities: vec![],
            }],
            labels: LabelSet::new(vec!["X".into()]).unwrap(),
        };
        let v = build_vocab(&c, 2);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id_of("a"), 2);
        assert_eq!(v.id_of("b"), UNK_ID);
        let v_all = build_vocab(&c, 1);
        assert_eq!(v_all.len(), 4);
    }

    #[test]
    fn vocab_breaks_frequency_ties_lexicographically() {
        let c = Corpus {
            sentences: vec![Sentence {
                id: "a".into(),
                tokens: vec!["z".into(), "y".into(), "z".into(), "y".into()],
                entities: vec![],
            }],
            labels: LabelSet::new(vec!["X".into()]).unwrap(),
        };
        let v = build_vocab(&c, 1);
        assert_eq!(v.id_of("y"), 2);
        assert_eq!(v.id_of("z"), 3);
    }

    #[test]
    fn label_set_rejects_empty_and_duplicates() {
        assert!(LabelSet::new(vec![]).is_err());
        assert!(LabelSet::new(vec!["a".into(), "a".into()]).is_err());
    }
}
