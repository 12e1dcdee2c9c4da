//! Synthetic nested-NER corpora with a Zipf-distributed long tail of
//! classes, class-private lexicons, and proper (never partial) span
//! nesting.
//!
//! Each class owns a private lexicon split into role pools by word
//! index modulo `entity_len_cap + 1`: pool 0 holds interior words,
//! pool `l` holds start words of length-`l` entities. A span's start
//! word therefore encodes (class, length) and its remaining tokens
//! encode the class, which makes the corpus separable by a scorer that
//! only sees the two endpoint tokens and their offset. Later entities
//! may overwrite strict-interior positions of earlier ones (that is
//! what nesting means here), but never their endpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, LabelSet, Sentence, SpanAnnotation};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_sentences: usize,
    pub num_classes: usize,
    /// Class `c` is sampled with weight `(c + 1)^-zipf_exponent`.
    pub zipf_exponent: f64,
    pub nesting_prob: f64,
    pub entities_per_sentence_mean: f64,
    /// Inclusive `[min, max]` token count per sentence.
    pub sentence_len_range: (usize, usize),
    pub entity_len_cap: usize,
    /// Words per class lexicon; must exceed `entity_len_cap` so every
    /// role pool is inhabited.
    pub lexicon_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sentences: 1000,
            num_classes: 5,
            zipf_exponent: 1.5,
            nesting_prob: 0.2,
            entities_per_sentence_mean: 2.5,
            sentence_len_range: (8, 16),
            entity_len_cap: 3,
            lexicon_size: 24,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fail = |msg: String| Err(CorpusError::BadSynthConfig(msg));
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        if !(self.zipf_exponent > 0.0) {
            return fail(format!(
                "zipf_exponent must be > 0, got {}",
                self.zipf_exponent
            ));
        }
        if !(0.0..=1.0).contains(&self.nesting_prob) {
            return fail(format!(
                "nesting_prob must be in [0, 1], got {}",
                self.nesting_prob
            ));
        }
        if !(self.entities_per_sentence_mean > 0.0) {
            return fail(format!(
                "entities_per_sentence_mean must be > 0, got {}",
                self.entities_per_sentence_mean
            ));
        }
        let (lo, hi) = self.sentence_len_range;
        if lo < 1 || hi < lo {
            return fail(format!(
                "sentence_len_range [{lo}, {hi}] must satisfy 1 <= min <= max"
            ));
        }
        if self.entity_len_cap < 1 {
            return fail("entity_len_cap must be at least 1".into());
        }
        if self.lexicon_size < self.entity_len_cap + 1 {
            return fail(format!(
                "lexicon_size {} too small for entity_len_cap {} (need at least cap + 1 words)",
                self.lexicon_size, self.entity_len_cap
            ));
        }
        Ok(())
    }
}

/// Deterministic per seed. Class frequencies follow the configured
/// Zipf law; spans are disjoint or properly nested, never partially
/// overlapping.
pub fn synthesize(cfg: &SynthConfig) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zipf_cdf = zipf_cumulative(cfg.num_classes, cfg.zipf_exponent);
    let poisson = Poisson::new(cfg.entities_per_sentence_mean)
        .map_err(|e| CorpusError::BadSynthConfig(e.to_string()))?;

    let labels = LabelSet::new((0..cfg.num_classes).map(|c| format!("c{c:02}")).collect())?;
    let mut sentences = Vec::with_capacity(cfg.num_sentences);
    for idx in 0..cfg.num_sentences {
        sentences.push(make_sentence(idx, cfg, &zipf_cdf, &poisson, &mut rng));
    }
    Ok(Corpus { sentences, labels })
}

fn zipf_cumulative(classes: usize, exponent: f64) -> Vec<f64> {
    let mut acc = 0.0;
    (0..classes)
        .map(|c| {
            acc += ((c + 1) as f64).powf(-exponent);
            acc
        })
        .collect()
}

fn sample_class(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn make_sentence(
    idx: usize,
    cfg: &SynthConfig,
    zipf_cdf: &[f64],
    poisson: &Poisson<f64>,
    rng: &mut ChaCha8Rng,
) -> Sentence {
    let (lo, hi) = cfg.sentence_len_range;
    let k = rng.random_range(lo..=hi);
    let mut tokens: Vec<String> = (0..k)
        .map(|_| format!("f{}", rng.random_range(0..cfg.lexicon_size)))
        .collect();
    let wanted = poisson.sample(rng).round() as usize;

    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut entities: Vec<SpanAnnotation> = Vec::new();
    for _ in 0..wanted {
        let class = sample_class(zipf_cdf, rng);
        let nest_wanted = rng.random::<f64>() < cfg.nesting_prob;
        let placed = if nest_wanted {
            place_nested(&spans, cfg, rng).or_else(|| {
                // No span can host a child yet: plant one wide enough
                // (length >= 3) so later draws have a nesting target.
                place_disjoint(&spans, k, cfg, rng, true)
            })
        } else {
            place_disjoint(&spans, k, cfg, rng, false)
        };
        let Some((start, end)) = placed else { continue };
        write_entity_tokens(&mut tokens, start, end, class, cfg, rng);
        spans.push((start, end));
        entities.push(SpanAnnotation {
            start,
            end,
            label: format!("c{class:02}"),
        });
    }
    Sentence {
        id: format!("syn{idx}"),
        tokens,
        entities,
    }
}

/// A candidate must be disjoint from, or strictly inside, every
/// existing span; partial overlaps and shared endpoints are rejected.
fn compatible(spans: &[(usize, usize)], start: usize, end: usize) -> bool {
    spans
        .iter()
        .all(|&(a, b)| end < a || start > b || (start > a && end < b))
}

fn place_nested(
    spans: &[(usize, usize)],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize)> {
    let hosts: Vec<(usize, usize)> = spans
        .iter()
        .copied()
        .filter(|&(a, b)| b - a + 1 >= 3)
        .collect();
    if hosts.is_empty() {
        return None;
    }
    for _ in 0..8 {
        let (a, b) = hosts[rng.random_range(0..hosts.len())];
        let max_len = cfg.entity_len_cap.min(b - a - 1);
        let len = rng.random_range(1..=max_len);
        let start = rng.random_range(a + 1..=b - len);
        let end = start + len - 1;
        if compatible(spans, start, end) {
            return Some((start, end));
        }
    }
    None
}

fn place_disjoint(
    spans: &[(usize, usize)],
    k: usize,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    prefer_host_size: bool,
) -> Option<(usize, usize)> {
    let gaps = free_gaps(spans, k);
    let widest = gaps.iter().map(|&(a, b)| b - a + 1).max()?;
    if widest == 0 {
        return None;
    }
    let mut len = if prefer_host_size && cfg.entity_len_cap >= 3 {
        rng.random_range(3..=cfg.entity_len_cap)
    } else {
        rng.random_range(1..=cfg.entity_len_cap)
    };
    len = len.min(widest);
    let eligible: Vec<(usize, usize)> = gaps
        .into_iter()
        .filter(|&(a, b)| b - a + 1 >= len)
        .collect();
    let (a, b) = eligible[rng.random_range(0..eligible.len())];
    let start = rng.random_range(a..=b + 1 - len);
    Some((start, start + len - 1))
}

/// Maximal intervals of `[0, k)` not covered by any span.
fn free_gaps(spans: &[(usize, usize)], k: usize) -> Vec<(usize, usize)> {
    let mut covered: Vec<(usize, usize)> = spans.to_vec();
    covered.sort_unstable();
    let mut gaps = Vec::new();
    let mut cursor = 0usize;
    for (a, b) in covered {
        if a > cursor {
            gaps.push((cursor, a - 1));
        }
        cursor = cursor.max(b + 1);
    }
    if cursor < k {
        gaps.push((cursor, k - 1));
    }
    gaps
}

fn write_entity_tokens(
    tokens: &mut [String],
    start: usize,
    end: usize,
    class: usize,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) {
    let len = end - start + 1;
    tokens[start] = pool_word(class, len, cfg, rng);
    for slot in tokens.iter_mut().take(end + 1).skip(start + 1) {
        *slot = pool_word(class, 0, cfg, rng);
    }
}

/// Pool `p` of class `c` holds the lexicon words whose index is
/// congruent to `p` modulo `entity_len_cap + 1`.
fn pool_word(class: usize, pool: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> String {
    let stride = cfg.entity_len_cap + 1;
    let pool_size = (cfg.lexicon_size - pool).div_ceil(stride);
    let word = pool + rng.random_range(0..pool_size) * stride;
    format!("c{class:02}w{word:02}")
}
