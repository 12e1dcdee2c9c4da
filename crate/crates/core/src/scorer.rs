//! Per-class span scoring.
//!
//! Every class has affine start/end projections over token
//! representations; the score of span `(i, j)` is the dot product of
//! the rotary-rotated start vector at position `i` and end vector at
//! position `j`, so scores depend on positions only through the offset
//! `j - i`. The backward pass is analytic: the rotation at a fixed
//! position is a linear map, its adjoint the inverse rotation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Sentence, Vocabulary};
use crate::mat::Mat;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("head dimension {0} is odd; rotary pairs need an even dimension")]
    OddHeadDim(usize),
    #[error("expected vectors of dimension {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no vectors for sentence {0:?}")]
    MissingVectors(String),
    #[error("sentence {id:?} has {expected} tokens but {got} vectors")]
    WrongVectorCount {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

/// Where token representations come from: a trainable lookup table
/// indexed by a vocabulary, or fixed per-sentence vectors exported by
/// an external encoder.
#[derive(Debug, Clone)]
pub enum EmbeddingSource {
    TrainableLookup {
        vocab: Vocabulary,
        table: Mat,
    },
    FileVectors {
        dim: usize,
        by_id: HashMap<String, Mat>,
    },
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            Self::TrainableLookup { table, .. } => table.cols(),
            Self::FileVectors { dim, .. } => *dim,
        }
    }
}

/// Token representations for one sentence plus, in lookup mode, the
/// table rows they came from (needed to route gradients back).
#[derive(Debug, Clone)]
pub struct Encoded {
    pub reps: Mat,
    pub token_ids: Option<Vec<usize>>,
}

/// Row `t` of the result represents token `t`. Lookup mode maps
/// out-of-vocabulary tokens to the UNK row.
pub fn encode(sentence: &Sentence, source: &EmbeddingSource) -> Result<Encoded, ScorerError> {
    match source {
        EmbeddingSource::TrainableLookup { vocab, table } => {
            let ids: Vec<usize> = sentence.tokens.iter().map(|t| vocab.id_of(t)).collect();
            let reps = Mat::from_fn(ids.len(), table.cols(), |r, c| table.get(ids[r], c));
            Ok(Encoded {
                reps,
                token_ids: Some(ids),
            })
        }
        EmbeddingSource::FileVectors { dim, by_id } => {
            let reps = by_id
                .get(&sentence.id)
                .ok_or_else(|| ScorerError::MissingVectors(sentence.id.clone()))?;
            if reps.rows() != sentence.tokens.len() {
                return Err(ScorerError::WrongVectorCount {
                    id: sentence.id.clone(),
                    expected: sentence.tokens.len(),
                    got: reps.rows(),
                });
            }
            if reps.cols() != *dim {
                return Err(ScorerError::DimMismatch {
                    expected: *dim,
                    got: reps.cols(),
                });
            }
            Ok(Encoded {
                reps: reps.clone(),
                token_ids: None,
            })
        }
    }
}

/// Reads per-sentence fixed vectors from JSONL records
/// `{"id": ..., "vectors": [[...] x k]}`.
pub fn load_file_vectors(
    path: impl AsRef<Path>,
    dim: usize,
) -> Result<HashMap<String, Mat>, ScorerError> {
    #[derive(Deserialize)]
    struct Record {
        id: String,
        vectors: Vec<Vec<f64>>,
    }
    let reader = BufReader::new(File::open(path)?);
    let mut by_id = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| ScorerError::Malformed {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if rec.vectors.iter().any(|v| v.len() != dim) {
            return Err(ScorerError::Malformed {
                line: lineno + 1,
                msg: format!("vector of wrong dimension (expected {dim})"),
            });
        }
        by_id.insert(rec.id, Mat::from_rows(&rec.vectors));
    }
    Ok(by_id)
}

/// Affine start/end projections for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassHead {
    /// d_in × d
    pub w_start: Mat,
    pub b_start: Vec<f64>,
    pub w_end: Mat,
    pub b_end: Vec<f64>,
}

impl ClassHead {
    pub fn zeros(d_in: usize, d: usize) -> Self {
        Self {
            w_start: Mat::zeros(d_in, d),
            b_start: vec![0.0; d],
            w_end: Mat::zeros(d_in, d),
            b_end: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub heads: Vec<ClassHead>,
    pub head_dim: usize,
    pub rope_base: f64,
    /// Optional 1/sqrt(d) score scaling; off by default, matching the
    /// bare bilinear form.
    pub scale_scores: bool,
}

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

impl ScorerParams {
    pub fn zeros(classes: usize, d_in: usize, d: usize) -> Result<Self, ScorerError> {
        if d % 2 != 0 {
            return Err(ScorerError::OddHeadDim(d));
        }
        Ok(Self {
            heads: (0..classes).map(|_| ClassHead::zeros(d_in, d)).collect(),
            head_dim: d,
            rope_base: DEFAULT_ROPE_BASE,
            scale_scores: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.heads.len()
    }
}

/// Per-class span scores in a C × L × L layout with a validity
/// predicate: cell (c, i, j) is live iff `i <= j < valid_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTensor {
    classes: usize,
    size: usize,
    valid_len: usize,
    scores: Vec<f64>,
}

impl ScoreTensor {
    pub fn zeros(classes: usize, size: usize, valid_len: usize) -> Self {
        assert!(valid_len <= size);
        Self {
            classes,
            size,
            valid_len,
            scores: vec![0.0; classes * size * size],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Padded side length L.
    pub fn size(&self) -> usize {
        self.size
    }

    /// True sentence length k; cells beyond it are masked out.
    pub fn valid_len(&self) -> usize {
        self.valid_len
    }

    #[inline]
    pub fn index(&self, class: usize, i: usize, j: usize) -> usize {
        (class * self.size + i) * self.size + j
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        i <= j && j < self.valid_len
    }

    #[inline]
    pub fn get(&self, class: usize, i: usize, j: usize) -> f64 {
        self.scores[self.index(class, i, j)]
    }

    #[inline]
    pub fn set(&mut self, class: usize, i: usize, j: usize, v: f64) {
        let idx = self.index(class, i, j);
        self.scores[idx] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.scores
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    /// Upper-triangular valid cells of one class slice.
    pub fn valid_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.valid_len).flat_map(move |i| (i..self.valid_len).map(move |j| (i, j)))
    }
}

/// `H` rows are start projections, `T` rows end projections; plain
/// affine maps, no nonlinearity.
pub fn project(reps: &Mat, head: &ClassHead) -> (Mat, Mat) {
    let h = affine(reps, &head.w_start, &head.b_start);
    let t = affine(reps, &head.w_end, &head.b_end);
    (h, t)
}

fn affine(reps: &Mat, w: &Mat, b: &[f64]) -> Mat {
    assert_eq!(reps.cols(), w.rows(), "projection input dim mismatch");
    let mut out = reps.matmul(w);
    for r in 0..out.rows() {
        for (c, &bias) in b.iter().enumerate() {
            out.add_at(r, c, bias);
        }
    }
    out
}

/// Planar rotation of consecutive pairs: pair `t` turns by
/// `pos * base^(-2t/d)`. Preserves the Euclidean norm.
pub fn rope_rotate(v: &[f64], pos: i64, base: f64) -> Result<Vec<f64>, ScorerError> {
    if v.len() % 2 != 0 {
        return Err(ScorerError::OddHeadDim(v.len()));
    }
    let mut out = vec![0.0; v.len()];
    rotate_into(v, pos, base, &mut out);
    Ok(out)
}

fn rotate_into(v: &[f64], pos: i64, base: f64, out: &mut [f64]) {
    let d = v.len();
    for t in 0..d / 2 {
        let theta = pos as f64 * base.powf(-2.0 * t as f64 / d as f64);
        let (sin, cos) = theta.sin_cos();
        out[2 * t] = v[2 * t] * cos - v[2 * t + 1] * sin;
        out[2 * t + 1] = v[2 * t] * sin + v[2 * t + 1] * cos;
    }
}

fn rotate_rows(m: &Mat, base: f64, sign: i64) -> Mat {
    let mut out = Mat::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        rotate_into(m.row(r), sign * r as i64, base, out.row_mut(r));
    }
    out
}

/// One class slice of span scores:
/// `scores[i][j] = dot(rotate(H_i, i), rotate(T_j, j))` on valid cells.
pub fn score_matrix(h: &Mat, t: &Mat, params: &ScorerParams) -> Mat {
    let rot_h = rotate_rows(h, params.rope_base, 1);
    let rot_t = rotate_rows(t, params.rope_base, 1);
    score_from_rotated(&rot_h, &rot_t, params)
}

fn score_from_rotated(rot_h: &Mat, rot_t: &Mat, params: &ScorerParams) -> Mat {
    let k = rot_h.rows();
    let scale = if params.scale_scores {
        1.0 / (params.head_dim as f64).sqrt()
    } else {
        1.0
    };
    let mut out = Mat::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let dot: f64 = rot_h
                .row(i)
                .iter()
                .zip(rot_t.row(j))
                .map(|(a, b)| a * b)
                .sum();
            out.set(i, j, dot * scale);
        }
    }
    out
}

/// Everything the backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub token_ids: Option<Vec<usize>>,
    pub reps: Mat,
    /// Rotated start/end projections, one pair per class.
    pub rotated: Vec<(Mat, Mat)>,
}

/// Full forward pass over one sentence. `size` is the padded tensor
/// side; the sentence length must not exceed it.
pub fn forward(
    sentence: &Sentence,
    source: &EmbeddingSource,
    params: &ScorerParams,
    size: usize,
) -> Result<(ScoreTensor, ForwardCache), ScorerError> {
    let encoded = encode(sentence, source)?;
    let k = sentence.tokens.len();
    assert!(k <= size, "sentence longer than tensor size");
    let mut tensor = ScoreTensor::zeros(params.classes(), size, k);
    let mut rotated = Vec::with_capacity(params.classes());
    for (class, head) in params.heads.iter().enumerate() {
        let (h, t) = project(&encoded.reps, head);
        let rot_h = rotate_rows(&h, params.rope_base, 1);
        let rot_t = rotate_rows(&t, params.rope_base, 1);
        let slice = score_from_rotated(&rot_h, &rot_t, params);
        for i in 0..k {
            for j in i..k {
                tensor.set(class, i, j, slice.get(i, j));
            }
        }
        rotated.push((rot_h, rot_t));
    }
    Ok((
        tensor,
        ForwardCache {
            token_ids: encoded.token_ids,
            reps: encoded.reps,
            rotated,
        },
    ))
}

/// Gradients for every scorer parameter and, in lookup mode, the
/// embedding table.
#[derive(Debug, Clone)]
pub struct ScorerGrads {
    pub heads: Vec<ClassHead>,
    pub table: Option<Mat>,
}

impl ScorerGrads {
    pub fn zeros(params: &ScorerParams, d_in: usize, table_rows: Option<usize>) -> Self {
        Self {
            heads: (0..params.classes())
                .map(|_| ClassHead::zeros(d_in, params.head_dim))
                .collect(),
            table: table_rows.map(|rows| Mat::zeros(rows, d_in)),
        }
    }
}

/// Chain-rule pass from per-cell score gradients back to projections,
/// rotations (adjoint = rotation by the negated position), affine
/// parameters and embedding rows. `grad_scores` must follow the layout
/// of the forward [`ScoreTensor`] and be zero on masked cells.
pub fn backward(
    grad_scores: &ScoreTensor,
    cache: &ForwardCache,
    params: &ScorerParams,
    grads: &mut ScorerGrads,
) {
    let k = cache.reps.rows();
    let d = params.head_dim;
    let d_in = cache.reps.cols();
    let scale = if params.scale_scores {
        1.0 / (d as f64).sqrt()
    } else {
        1.0
    };
    let mut grad_reps = Mat::zeros(k, d_in);
    for (class, (rot_h, rot_t)) in cache.rotated.iter().enumerate() {
        let mut grad_rot_h = Mat::zeros(k, d);
        let mut grad_rot_t = Mat::zeros(k, d);
        for i in 0..k {
            for j in i..k {
                let g = grad_scores.get(class, i, j) * scale;
                if g == 0.0 {
                    continue;
                }
                for x in 0..d {
                    grad_rot_h.add_at(i, x, g * rot_t.get(j, x));
                    grad_rot_t.add_at(j, x, g * rot_h.get(i, x));
                }
            }
        }
        let grad_h = rotate_rows(&grad_rot_h, params.rope_base, -1);
        let grad_t = rotate_rows(&grad_rot_t, params.rope_base, -1);
        let head = &params.heads[class];
        let ghead = &mut grads.heads[class];
        for i in 0..k {
            for b in 0..d {
                let gh = grad_h.get(i, b);
                let gt = grad_t.get(i, b);
                ghead.b_start[b] += gh;
                ghead.b_end[b] += gt;
                for a in 0..d_in {
                    let rep = cache.reps.get(i, a);
                    ghead.w_start.add_at(a, b, rep * gh);
                    ghead.w_end.add_at(a, b, rep * gt);
                    grad_reps.add_at(
                        i,
                        a,
                        head.w_start.get(a, b) * gh + head.w_end.get(a, b) * gt,
                    );
                }
            }
        }
    }
    if let (Some(table), Some(ids)) = (grads.table.as_mut(), cache.token_ids.as_ref()) {
        for (i, &id) in ids.iter().enumerate() {
            for a in 0..d_in {
                table.add_at(id, a, grad_reps.get(i, a));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Corpus, LabelSet};

    fn sentence(tokens: &[&str]) -> Sentence {
        Sentence {
            id: "s".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            entities: vec![],
        }
    }

    fn lookup_source(tokens: &[&str], d_in: usize) -> EmbeddingSource {
        let corpus = Corpus {
            sentences: vec![sentence(tokens)],
            labels: LabelSet::new(vec!["X".into()]).unwrap(),
        };
        let vocab = build_vocab(&corpus, 1);
        let rows = vocab.len();
        EmbeddingSource::TrainableLookup {
            vocab,
            table: Mat::from_fn(rows, d_in, |r, c| (r * d_in + c) as f64 * 0.1),
        }
    }

    #[test]
    fn encode_lookup_maps_oov_to_unk() {
        let source = lookup_source(&["a", "b"], 3);
        let enc = encode(&sentence(&["a", "zzz"]), &source).unwrap();
        let EmbeddingSource::TrainableLookup { vocab, table } = &source else {
            unreachable!()
        };
        assert_eq!(enc.reps.row(0), table.row(vocab.id_of("a")));
        assert_eq!(enc.reps.row(1), table.row(crate::corpus::UNK_ID));
    }

    #[test]
    fn encode_file_vectors_checks_counts() {
        let mut by_id = HashMap::new();
        by_id.insert("s".to_string(), Mat::zeros(3, 4));
        let source = EmbeddingSource::FileVectors { dim: 4, by_id };
        let err = encode(&sentence(&["a", "b"]), &source).unwrap_err();
        assert!(matches!(err, ScorerError::WrongVectorCount { .. }));
        let err = encode(&sentence(&["a"]), &source);
        assert!(err.is_err()); // 3 vectors for 1 token
    }

    #[test]
    fn file_vectors_load_and_validate() {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","vectors":[[1.0,2.0],[3.0,4.0]]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","vectors":[[5.0,6.0]]}}"#).unwrap();
        let by_id = load_file_vectors(f.path(), 2).unwrap();
        assert_eq!(by_id["a"].rows(), 2);
        assert_eq!(by_id["b"].row(0), &[5.0, 6.0]);

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, r#"{{"id":"a","vectors":[[1.0]]}}"#).unwrap();
        assert!(matches!(
            load_file_vectors(bad.path(), 2),
            Err(ScorerError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn project_identity_passes_reps_through() {
        let reps = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let head = ClassHead {
            w_start: Mat::from_fn(2, 2, |r, c| f64::from(r == c)),
            b_start: vec![0.0; 2],
            w_end: Mat::zeros(2, 2),
            b_end: vec![0.5, -0.5],
        };
        let (h, t) = project(&reps, &head);
        assert_eq!(h.row(0), reps.row(0));
        assert_eq!(h.row(1), reps.row(1));
        // zero weights leave only the bias
        assert_eq!(t.row(0), &[0.5, -0.5]);
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let v = [0.3, -1.2, 2.5, 0.0];
        assert_eq!(rope_rotate(&v, 0, DEFAULT_ROPE_BASE).unwrap(), v.to_vec());
    }

    #[test]
    fn rope_preserves_norm() {
        let v = [0.7, -0.1, 1.3, 2.2, -0.4, 0.9];
        let rotated = rope_rotate(&v, 17, DEFAULT_ROPE_BASE).unwrap();
        let n0: f64 = v.iter().map(|x| x * x).sum();
        let n1: f64 = rotated.iter().map(|x| x * x).sum();
        assert!((n0.sqrt() - n1.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rope_single_pair_matches_unit_rotation() {
        let out = rope_rotate(&[1.0, 0.0], 1, DEFAULT_ROPE_BASE).unwrap();
        assert!((out[0] - 1.0_f64.cos()).abs() < 1e-15);
        assert!((out[1] - 1.0_f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_rejects_odd_dimension() {
        assert!(matches!(
            rope_rotate(&[1.0, 2.0, 3.0], 1, DEFAULT_ROPE_BASE),
            Err(ScorerError::OddHeadDim(3))
        ));
    }

    #[test]
    fn score_at_origin_is_plain_dot() {
        let params = ScorerParams::zeros(1, 2, 2).unwrap();
        let h = Mat::from_rows(&[vec![1.0, 2.0]]);
        let t = Mat::from_rows(&[vec![3.0, -1.0]]);
        let s = score_matrix(&h, &t, &params);
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scores_depend_only_on_offset() {
        let params = ScorerParams::zeros(1, 2, 4).unwrap();
        let h_row = vec![0.4, -1.1, 0.9, 0.2];
        let t_row = vec![1.5, 0.3, -0.7, 0.8];
        let h = Mat::from_rows(&vec![h_row; 9]);
        let t = Mat::from_rows(&vec![t_row; 9]);
        let s = score_matrix(&h, &t, &params);
        for delta in 0..4 {
            let base = s.get(0, delta);
            for shift in 1..5 {
                assert!(
                    (s.get(shift, shift + delta) - base).abs() < 1e-9,
                    "offset {delta} shifted by {shift} moved the score"
                );
            }
        }
    }

    #[test]
    fn backward_of_zero_grad_is_zero() {
        let tokens = ["a", "b", "c"];
        let source = lookup_source(&tokens, 3);
        let params = ScorerParams::zeros(2, 3, 4).unwrap();
        let (scores, cache) = forward(&sentence(&tokens), &source, &params, 3).unwrap();
        let grad_scores = ScoreTensor::zeros(2, 3, scores.valid_len());
        let mut grads = ScorerGrads::zeros(&params, 3, Some(5));
        backward(&grad_scores, &cache, &params, &mut grads);
        assert!(grads.heads.iter().all(|h| {
            h.w_start.data().iter().all(|&x| x == 0.0) && h.b_start.iter().all(|&x| x == 0.0)
        }));
        assert!(grads.table.unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_upstream_gradient() {
        let tokens = ["a", "b", "c"];
        let source = lookup_source(&tokens, 3);
        let mut params = ScorerParams::zeros(1, 3, 4).unwrap();
        for (n, x) in params.heads[0].w_start.data_mut().iter_mut().enumerate() {
            *x = (n as f64 * 0.37).sin();
        }
        for (n, x) in params.heads[0].w_end.data_mut().iter_mut().enumerate() {
            *x = (n as f64 * 0.53).cos();
        }
        let (_, cache) = forward(&sentence(&tokens), &source, &params, 3).unwrap();
        let mut g1 = ScoreTensor::zeros(1, 3, 3);
        g1.set(0, 0, 2, 0.7);
        g1.set(0, 1, 1, -0.3);
        let mut g2 = g1.clone();
        for x in g2.data_mut() {
            *x *= 2.0;
        }
        let vocab_rows = 5;
        let mut out1 = ScorerGrads::zeros(&params, 3, Some(vocab_rows));
        let mut out2 = ScorerGrads::zeros(&params, 3, Some(vocab_rows));
        backward(&g1, &cache, &params, &mut out1);
        backward(&g2, &cache, &params, &mut out2);
        for (a, b) in out1.heads[0]
            .w_start
            .data()
            .iter()
            .zip(out2.heads[0].w_start.data())
        {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in out1
            .table
            .unwrap()
            .data()
            .iter()
            .zip(out2.table.unwrap().data())
        {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }
}
