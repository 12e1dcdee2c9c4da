//! JSONL corpus format.
//!
//! One record per line: `{"id": ..., "tokens": [...], "entities":
//! [{"start", "end", "label"}, ...]}` with inclusive `end`. An optional
//! first-line header `{"labels": [...]}` pins the label order;
//! otherwise labels are the sorted distinct annotation labels.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, LabelSet, Sentence, SpanAnnotation};

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    tokens: Vec<String>,
    #[serde(default)]
    entities: Vec<SpanAnnotation>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Line {
    Header(HeaderRecord),
    Sentence(SentenceRecord),
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Corpus, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut sentences = Vec::new();
    let mut header: Option<Vec<String>> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: lineno,
            msg: e.to_string(),
        })?;
        match parsed {
            Line::Header(h) => {
                if lineno != 1 || header.is_some() {
                    return Err(CorpusError::Malformed {
                        line: lineno,
                        msg: "label header allowed only as the first line".into(),
                    });
                }
                header = Some(h.labels);
            }
            Line::Sentence(rec) => {
                let sent = check_record(rec, lineno, sentences.len())?;
                sentences.push(sent);
            }
        }
    }
    if sentences.is_empty() {
        return Err(CorpusError::Empty);
    }
    let labels = match header {
        Some(labels) => LabelSet::new(labels)?,
        None => {
            let mut distinct: Vec<String> = sentences
                .iter()
                .flat_map(|s| s.entities.iter().map(|a| a.label.clone()))
                .collect();
            distinct.sort();
            distinct.dedup();
            LabelSet::new(distinct)?
        }
    };
    for sent in &sentences {
        for ann in &sent.entities {
            if labels.index(&ann.label).is_none() {
                return Err(CorpusError::BadLabels(format!(
                    "sentence {:?} uses label {:?} missing from the header",
                    sent.id, ann.label
                )));
            }
        }
    }
    Ok(Corpus { sentences, labels })
}

fn check_record(rec: SentenceRecord, lineno: usize, index: usize) -> Result<Sentence, CorpusError> {
    let k = rec.tokens.len();
    if k == 0 {
        return Err(CorpusError::Malformed {
            line: lineno,
            msg: "empty token list".into(),
        });
    }
    for ann in &rec.entities {
        if ann.start > ann.end {
            return Err(CorpusError::Malformed {
                line: lineno,
                msg: format!("span start {} > end {}", ann.start, ann.end),
            });
        }
        if ann.end >= k {
            return Err(CorpusError::Malformed {
                line: lineno,
                msg: format!(
                    "span ({}, {}) out of range for {} tokens",
                    ann.start, ann.end, k
                ),
            });
        }
    }
    let mut seen = std::collections::HashSet::new();
    for ann in &rec.entities {
        if !seen.insert((ann.start, ann.end, ann.label.clone())) {
            return Err(CorpusError::Malformed {
                line: lineno,
                msg: format!(
                    "duplicate annotation ({}, {}, {:?})",
                    ann.start, ann.end, ann.label
                ),
            });
        }
    }
    Ok(Sentence {
        id: rec.id.unwrap_or_else(|| index.to_string()),
        tokens: rec.tokens,
        entities: rec.entities,
    })
}

/// Writes the corpus with an explicit label header so the label order
/// survives a round trip.
pub fn write_jsonl(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = HeaderRecord {
        labels: corpus.labels.iter().map(str::to_string).collect(),
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).expect("serialize header")
    )?;
    for sent in &corpus.sentences {
        let rec = SentenceRecord {
            id: Some(sent.id.clone()),
            tokens: sent.tokens.clone(),
            entities: sent.entities.clone(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&rec).expect("serialize sentence")
        )?;
    }
    out.flush()?;
    Ok(())
}
