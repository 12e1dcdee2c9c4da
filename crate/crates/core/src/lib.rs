//! Span-based nested named-entity recognition at desk scale.
//!
//! The crate scores every candidate token span with a rotary-position
//! bilinear head, trains the scores with a soft bounding-box IoU loss
//! combined with a multi-class imbalance loss, and decodes/evaluates
//! (start, end, label) triples. All gradients are analytic and are
//! verified against central finite differences.

pub mod corpus;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod mat;
pub mod scorer;
pub mod sweep;
pub mod tape;
pub mod trainer;

pub use corpus::{Corpus, LabelSet, Sentence, SpanAnnotation};
pub use eval::{EvalReport, PredictionSet};
pub use losses::{GoldTensor, LossResult};
pub use scorer::ScoreTensor;
