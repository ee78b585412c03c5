//! Quantguard: a desk-scale toolkit for studying how post-training 8-bit
//! quantization changes the adversarial robustness of transformer text
//! classifiers.
//!
//! The pipeline is: train a small transformer classifier ([`model`]), quantize
//! its matmul weights with an affine uint8 scheme ([`quant`]), attack both the
//! float and the quantized model with word-level substitution attacks
//! ([`attacks`], fed by the synonym machinery in [`lexicon`]), optionally run
//! the adversarial-training baseline ([`advtrain`]), and aggregate clean /
//! after-attack accuracy into reports ([`harness`]).

pub mod advtrain;
pub mod attacks;
pub mod error;
pub mod harness;
pub mod lexicon;
pub mod model;
pub mod quant;
pub mod rng;
pub mod tensor;
#[cfg(test)]
pub(crate) mod test_fixtures;
pub mod toy;

pub use attacks::{AttackConfig, AttackKind, AttackResult, AttackStatus, TokenClassifier};
pub use error::Error;
pub use harness::{Dataset, EvaluationReport, EvalMode, Split};
pub use lexicon::{EmbeddingStore, SynonymIndex, Vocabulary};
pub use model::{ClassifierOutput, ModelConfig, TextPipeline, TransformerClassifier};
pub use quant::{QuantParams, QuantizedClassifier, QuantizedTensor};
pub use tensor::Tensor2D;
