//! Seeded random-instance gradient verification for every analytic
//! gradient path: the two losses, their combination, and the full
//! scorer chain down to projections and embedding rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{LabelSet, Sentence, SpanAnnotation, Vocabulary};
use crate::losses::{combined_loss, eiou_loss, emc_loss, finite_diff_check, EmcConfig, GoldTensor};
use crate::scorer::{backward, forward, EmbeddingSource, ScoreTensor, ScorerGrads};
use crate::trainer::{grads_to_flat, Model, TrainConfig};

/// Largest acceptable relative error between analytic and central
/// finite-difference gradients.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct ComponentResult {
    pub name: &'static str,
    pub worst_rel_err: f64,
    pub worst_seed: u64,
}

impl ComponentResult {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            worst_rel_err: 0.0,
            worst_seed: 0,
        }
    }

    fn record(&mut self, err: f64, seed: u64) {
        if err > self.worst_rel_err {
            self.worst_rel_err = err;
            self.worst_seed = seed;
        }
    }

    pub fn passed(&self) -> bool {
        self.worst_rel_err < TOLERANCE
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub components: Vec<ComponentResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentResult::passed)
    }
}

struct Instance {
    scores: ScoreTensor,
    gold: GoldTensor,
}

/// Random scores in a moderate range with at least one gold cell.
fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let len = rng.random_range(3..=8);
    let classes = rng.random_range(2..=4);
    let mut scores = ScoreTensor::zeros(classes, len, len);
    let mut gold = GoldTensor::zeros(classes, len, len);
    let cells: Vec<(usize, usize)> = scores.valid_cells().collect();
    for class in 0..classes {
        for &(i, j) in &cells {
            scores.set(class, i, j, rng.random_range(-2.0..2.0));
            if rng.random::<f64>() < 0.15 {
                gold.set(class, i, j);
            }
        }
    }
    if gold.total_gold() == 0 {
        let &(i, j) = &cells[rng.random_range(0..cells.len())];
        gold.set(rng.random_range(0..classes), i, j);
    }
    Instance { scores, gold }
}

/// Worst analytic-vs-finite-difference error of the whole pipeline
/// score = scorer(params), loss = combined(score), taken over every
/// parameter (embedding rows included).
fn scorer_chain_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(3..=8);
    let classes = rng.random_range(2..=4);
    let head_dim = if rng.random::<bool>() { 4 } else { 8 };
    let embed_dim = 6;
    let vocab_words = 10;

    let labels = LabelSet::new((0..classes).map(|c| format!("l{c}")).collect()).unwrap();
    let tokens: Vec<String> = (0..len)
        .map(|_| format!("w{}", rng.random_range(0..vocab_words)))
        .collect();
    let mut entities = Vec::new();
    for _ in 0..rng.random_range(1..=3) {
        let start = rng.random_range(0..len);
        let end = rng.random_range(start..len);
        let label = format!("l{}", rng.random_range(0..classes));
        if !entities.iter().any(|a: &SpanAnnotation| {
            (a.start, a.end, a.label.as_str()) == (start, end, label.as_str())
        }) {
            entities.push(SpanAnnotation { start, end, label });
        }
    }
    let sentence = Sentence {
        id: "g".into(),
        tokens,
        entities,
    };

    let vocab: Vocabulary = {
        let mut names = vec!["<unk>".to_string(), "<pad>".to_string()];
        names.extend((0..vocab_words).map(|w| format!("w{w}")));
        names.into()
    };
    let cfg = TrainConfig {
        head_dim,
        embed_dim,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::init(&labels, vocab, &cfg).unwrap();
    let gold = crate::losses::gold_tensor(&sentence, &labels, len).unwrap();
    let emc_cfg = EmcConfig::default();

    let loss_of = |model: &Model| {
        let (scores, _) = forward(&sentence, &model.source, &model.params, len).unwrap();
        combined_loss(&scores, &gold, 0.5, &emc_cfg).unwrap().value
    };

    // analytic: loss grad wrt scores, then the scorer backward pass
    let (scores, cache) = forward(&sentence, &model.source, &model.params, len).unwrap();
    let loss = combined_loss(&scores, &gold, 0.5, &emc_cfg).unwrap();
    let mut grad_scores = ScoreTensor::zeros(classes, len, len);
    grad_scores.data_mut().copy_from_slice(&loss.grad);
    let table_rows = match &model.source {
        EmbeddingSource::TrainableLookup { table, .. } => Some(table.rows()),
        EmbeddingSource::FileVectors { .. } => None,
    };
    let mut grads = ScorerGrads::zeros(&model.params, embed_dim, table_rows);
    backward(&grad_scores, &cache, &model.params, &mut grads);
    let analytic = grads_to_flat(&grads);

    let mut flat = model.to_flat();
    let mut worst = 0.0f64;
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + FD_STEP;
        model.set_from_flat(&flat);
        let up = loss_of(&model);
        flat[i] = orig - FD_STEP;
        model.set_from_flat(&flat);
        let down = loss_of(&model);
        flat[i] = orig;
        model.set_from_flat(&flat);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let rel = (analytic[i] - numeric).abs()
            / analytic[i]
                .abs()
                .max(numeric.abs())
                .max(crate::losses::EPS_REL_ERR);
        worst = worst.max(rel);
    }
    worst
}

/// Runs `instances` seeded random instances through every gradient
/// path and reports the worst relative error per component.
pub fn run(instances: usize, base_seed: u64) -> GradCheckReport {
    let emc_cfg = EmcConfig::default();
    let mut emc = ComponentResult::new("emc");
    let mut eiou = ComponentResult::new("eiou");
    let mut combined = ComponentResult::new("combined");
    let mut chain = ComponentResult::new("scorer_chain");
    for n in 0..instances {
        let seed = base_seed.wrapping_add(n as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        emc.record(
            finite_diff_check(
                |s| emc_loss(s, &inst.gold, &emc_cfg).unwrap(),
                &inst.scores,
                FD_STEP,
            ),
            seed,
        );
        eiou.record(
            finite_diff_check(|s| eiou_loss(s, &inst.gold).unwrap(), &inst.scores, FD_STEP),
            seed,
        );
        combined.record(
            finite_diff_check(
                |s| combined_loss(s, &inst.gold, 0.5, &emc_cfg).unwrap(),
                &inst.scores,
                FD_STEP,
            ),
            seed,
        );
        chain.record(scorer_chain_err(seed), seed);
    }
    GradCheckReport {
        instances,
        components: vec![emc, eiou, combined, chain],
    }
}
