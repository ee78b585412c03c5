//! Adversarial-training baseline: attack a seeded sample of the training
//! set, add the successful perturbations (with their original labels) to the
//! corpus, and retrain from scratch under the same seed discipline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_example, AttackConfig, AttackStatus, TokenClassifier};
use crate::error::Error;
use crate::harness::Dataset;
use crate::lexicon::{SynonymIndex, Vocabulary};
use crate::model::{train, ModelConfig, TextPipeline, TransformerClassifier};

/// One attack attempt against a training example. Only `status == success`
/// records join the training corpus; the rest are kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source_id: usize,
    pub adversarial_text: String,
    /// Label inherited unchanged from the source example.
    pub label: u32,
    pub status: AttackStatus,
}

/// Attack a seeded uniform sample of `ceil(fraction * |train|)` examples
/// (drawn without replacement) and return one record per attempt, in source
/// order. Deterministic for a fixed `attack_config.seed`.
pub fn generate_augmentation(
    model: &dyn TokenClassifier,
    train: &Dataset,
    fraction: f64,
    index: &SynonymIndex,
    attack_config: &AttackConfig,
) -> Vec<AugmentationRecord> {
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "augmentation fraction must lie in (0, 1], got {fraction}"
    );
    let n = train.examples().len();
    let attempts = (fraction * n as f64).ceil() as usize;

    let mut ids: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = crate::rng::seeded_rng(attack_config.seed, "advtrain/sample");
        ids.shuffle(&mut rng);
    }
    let mut sample: Vec<usize> = ids.into_iter().take(attempts).collect();
    sample.sort_unstable();

    sample
        .into_par_iter()
        .map(|source_id| {
            let (text, label) = &train.examples()[source_id];
            let result = attack_example(model, text, *label, index, attack_config, source_id);
            AugmentationRecord {
                source_id,
                adversarial_text: result.perturbed_text,
                label: *label,
                status: result.status,
            }
        })
        .collect()
}

/// The full pipeline: train a base model, generate augmentation records
/// against it, retrain from scratch on the union of the training set and the
/// successful adversarial examples. Returns the retrained model along with
/// the records.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    config: &ModelConfig,
    train_ds: &Dataset,
    dev: &Dataset,
    vocab: &Vocabulary,
    epochs: usize,
    learning_rate: f32,
    fraction: f64,
    index: &SynonymIndex,
    attack_config: &AttackConfig,
) -> Result<(TransformerClassifier, Vec<AugmentationRecord>), Error> {
    let base = train(config, train_ds, dev, vocab, epochs, learning_rate)?;
    let pipeline = TextPipeline::new(&base, vocab);
    let records = generate_augmentation(&pipeline, train_ds, fraction, index, attack_config);
    let augmented = augment_dataset(train_ds, &records);
    let retrained = train(config, &augmented, dev, vocab, epochs, learning_rate)?;
    Ok((retrained, records))
}

/// The training set plus every successful adversarial example, labels
/// inherited from the sources.
pub fn augment_dataset(train: &Dataset, records: &[AugmentationRecord]) -> Dataset {
    let mut examples = train.examples().to_vec();
    examples.extend(
        records
            .iter()
            .filter(|r| r.status == AttackStatus::Success)
            .map(|r| (r.adversarial_text.clone(), r.label)),
    );
    Dataset::new(
        format!("{}+adv", train.name()),
        train.split(),
        examples,
        train.num_classes(),
    )
}
