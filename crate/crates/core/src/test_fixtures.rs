//! Shared test fixtures: the fixed-seed toy setup, trained once per test
//! binary.

use std::sync::OnceLock;

use crate::harness::Dataset;
use crate::lexicon::{EmbeddingStore, SynonymIndex, Vocabulary};
use crate::model::TransformerClassifier;
use crate::toy;

pub(crate) struct ToyFixture {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub vocab: Vocabulary,
    pub model: TransformerClassifier,
    pub store: EmbeddingStore,
    pub index: SynonymIndex,
}

pub(crate) const FIXTURE_SEED: u64 = 41;

pub(crate) fn toy_fixture() -> &'static ToyFixture {
    static FIXTURE: OnceLock<ToyFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let (train, dev, test) = toy::corpus(FIXTURE_SEED);
        let vocab = Vocabulary::from_texts(train.examples().iter().map(|(t, _)| t.as_str()));
        let config = toy::model_config(vocab.len(), FIXTURE_SEED);
        let model = crate::model::train(&config, &train, &dev, &vocab, toy::EPOCHS, toy::LEARNING_RATE)
            .expect("toy training converges");
        let store = toy::lexicon();
        let index = SynonymIndex::build(&store, &vocab, toy::SYNONYM_K, toy::MIN_COS);
        ToyFixture {
            train,
            dev,
            test,
            vocab,
            model,
            store,
            index,
        }
    })
}
