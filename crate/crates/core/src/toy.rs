//! Deterministic toy corpus and test lexicon.
//!
//! The lexicon is a hand-designed set of synonym clusters (good/great/fine,
//! bad/awful/poor, ...) embedded so that words within a cluster sit above the
//! default cosine threshold and words across clusters sit below it. The
//! corpus is a two-class sentiment set built from keyword templates; a
//! bag-of-words majority vote over the keyword lists classifies it perfectly,
//! which anchors the expected accuracies in tests.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::harness::{Dataset, Split};
use crate::rng::seeded_rng;

/// Synonym clusters. The first two members of each sentiment cluster are the
/// "trained" surface forms the corpus uses; later members only exist in the
/// lexicon, so substituting them exercises the unknown-word path.
pub const CLUSTERS: &[&[&str]] = &[
    // positive sentiment
    &["good", "great", "fine", "decent", "solid"],
    &["wonderful", "marvelous", "fabulous", "splendid"],
    &["excellent", "superb", "stellar", "exceptional"],
    &["charming", "delightful", "endearing", "winsome"],
    &["enjoyable", "pleasant", "agreeable", "likable"],
    &["moving", "touching", "stirring", "poignant"],
    &["brilliant", "dazzling", "radiant", "luminous"],
    &["funny", "hilarious", "amusing", "comical"],
    &["smart", "clever", "witty", "shrewd"],
    &["beautiful", "gorgeous", "lovely", "exquisite"],
    // negative sentiment
    &["bad", "awful", "poor", "lousy", "rotten"],
    &["terrible", "horrible", "dreadful", "abysmal"],
    &["boring", "tedious", "dull", "monotonous"],
    &["clumsy", "awkward", "sloppy", "bungling"],
    &["messy", "chaotic", "muddled", "jumbled"],
    &["stupid", "senseless", "mindless", "witless"],
    &["bland", "stale", "flat", "insipid"],
    &["annoying", "irritating", "grating", "vexing"],
    &["weak", "feeble", "flimsy", "anemic"],
    &["ugly", "hideous", "unsightly", "grotesque"],
    // neutral nouns and modifiers
    &["movie", "film", "flick", "picture"],
    &["story", "plot", "tale", "narrative"],
    &["acting", "performance", "portrayal"],
    &["ride", "journey", "trip", "excursion"],
    &["ending", "finale", "conclusion", "denouement"],
    &["scene", "sequence", "shot", "frame"],
    &["script", "screenplay", "dialogue", "writing"],
    &["director", "filmmaker", "auteur"],
    &["cast", "ensemble", "troupe"],
    &["music", "score", "soundtrack", "melody"],
    &["really", "truly", "genuinely", "honestly"],
    &["quite", "rather", "fairly", "somewhat"],
    &["very", "extremely", "exceedingly", "immensely"],
    &["thought", "felt", "believed", "reckoned"],
    &["watched", "saw", "viewed", "screened"],
    &["liked", "enjoyed", "adored", "savored"],
    &["disliked", "hated", "loathed", "resented"],
    &["seemed", "appeared", "looked"],
    &["started", "began", "opened", "commenced"],
    &["finished", "ended", "closed", "wrapped"],
];

const POSITIVE_CLUSTERS: std::ops::Range<usize> = 0..10;
const NEGATIVE_CLUSTERS: std::ops::Range<usize> = 10..20;

/// Angle step between cluster members, chosen so that within-cluster cosines
/// stay >= cos(24 deg) ~ 0.91 and cross-cluster cosines stay <= sin(24 deg)
/// ~ 0.41, cleanly separated by the default threshold of 0.5.
const MEMBER_ANGLE_STEP_DEG: f64 = 6.0;

/// Render the test lexicon in the embedding-file format ("word v1 ... vd").
///
/// Cluster `i` spans the plane of axes `i` and `i+1 (mod C)`; member `j`
/// sits at angle `j * 6 deg` inside that plane.
pub fn lexicon_text() -> String {
    let dim = CLUSTERS.len();
    let mut out = String::new();
    for (ci, members) in CLUSTERS.iter().enumerate() {
        for (mi, word) in members.iter().enumerate() {
            let angle = (mi as f64) * MEMBER_ANGLE_STEP_DEG * std::f64::consts::PI / 180.0;
            let mut v = vec![0.0f64; dim];
            v[ci] = angle.cos();
            v[(ci + 1) % dim] = angle.sin();
            out.push_str(word);
            for x in &v {
                out.push_str(&format!(" {x:.6}"));
            }
            out.push('\n');
        }
    }
    out
}

/// The test lexicon, parsed into an [`EmbeddingStore`].
///
/// [`EmbeddingStore`]: crate::lexicon::EmbeddingStore
pub fn lexicon() -> crate::lexicon::EmbeddingStore {
    crate::lexicon::EmbeddingStore::parse(&lexicon_text(), "toy-lexicon").expect("toy lexicon parses")
}

/// Keywords the corpus actually uses: the first two members of each
/// sentiment cluster.
fn surface_keywords(clusters: std::ops::Range<usize>) -> Vec<&'static str> {
    clusters.flat_map(|c| CLUSTERS[c][..2].iter().copied()).collect()
}

const NOUNS: &[&str] = &["movie", "film", "story", "plot", "acting", "ride", "ending", "script"];
const ADVERBS: &[&str] = &["really", "quite", "very"];
const VERBS: &[&str] = &["thought", "felt"];

/// One generated sentence. `contested` sentences carry two label-class
/// keywords and one opposite-class keyword; the majority still decides.
fn sentence(rng: &mut impl Rng, label: u32, contested: bool) -> String {
    let (own, other) = if label == 1 {
        (surface_keywords(POSITIVE_CLUSTERS), surface_keywords(NEGATIVE_CLUSTERS))
    } else {
        (surface_keywords(NEGATIVE_CLUSTERS), surface_keywords(POSITIVE_CLUSTERS))
    };
    let noun = *NOUNS.choose(rng).unwrap();
    let k1 = *own.choose(rng).unwrap();
    if contested {
        let k2 = *own.choose(rng).unwrap();
        let k3 = *other.choose(rng).unwrap();
        let noun2 = *NOUNS.choose(rng).unwrap();
        format!("the {noun} was {k1} and {k2} despite the {k3} {noun2}")
    } else {
        match rng.gen_range(0..4u32) {
            0 => format!("the {noun} was {k1}"),
            1 => format!("a {k1} {noun}"),
            2 => {
                let verb = *VERBS.choose(rng).unwrap();
                format!("i {verb} the {noun} was {k1}")
            }
            _ => {
                let adv = *ADVERBS.choose(rng).unwrap();
                format!("the {noun} seemed {adv} {k1}")
            }
        }
    }
}

/// Generate a labeled split with alternating labels; `contested_ratio` of
/// the examples get the three-keyword contested template.
fn split(name: &str, split: Split, n: usize, seed: u64, contested_ratio: f64) -> Dataset {
    let mut rng = seeded_rng(seed, &format!("toy-corpus/{name}/{split:?}"));
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let contested = rng.gen_bool(contested_ratio);
        examples.push((sentence(&mut rng, label, contested), label));
    }
    Dataset::new(name.to_string(), split, examples, 2)
}

/// The standard toy corpus: 160 train / 32 dev / 48 test examples.
pub fn corpus(seed: u64) -> (Dataset, Dataset, Dataset) {
    (
        split("toy", Split::Train, 160, seed, 0.4),
        split("toy", Split::Dev, 32, seed, 0.4),
        split("toy", Split::Test, 48, seed, 0.4),
    )
}

/// A small linearly separable corpus (single-keyword sentences only).
pub fn separable_corpus(seed: u64, n_train: usize, n_dev: usize) -> (Dataset, Dataset) {
    (
        split("toy-small", Split::Train, n_train, seed, 0.0),
        split("toy-small", Split::Dev, n_dev, seed, 0.0),
    )
}

/// Short sentences with few attackable tokens, for exhaustive-search oracles.
pub fn short_instances(seed: u64, n: usize) -> Vec<(String, u32)> {
    let mut rng = seeded_rng(seed, "toy-corpus/short");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let own = if label == 1 {
            surface_keywords(POSITIVE_CLUSTERS)
        } else {
            surface_keywords(NEGATIVE_CLUSTERS)
        };
        let k = *own.choose(&mut rng).unwrap();
        let noun = *NOUNS.choose(&mut rng).unwrap();
        let text = match rng.gen_range(0..2u32) {
            0 => format!("a {k} {noun}"),
            _ => format!("the {noun} was {k}"),
        };
        out.push((text, label));
    }
    out
}

/// Training epochs the toy setup uses.
pub const EPOCHS: usize = 8;
/// Learning rate the toy setup uses.
pub const LEARNING_RATE: f32 = 0.15;
/// Synonym-index defaults: top-k per word.
pub const SYNONYM_K: usize = 8;
/// Synonym-index defaults: cosine threshold.
pub const MIN_COS: f32 = 0.5;

/// The model configuration the toy experiments run with.
pub fn model_config(vocab_size: usize, seed: u64) -> crate::model::ModelConfig {
    crate::model::ModelConfig {
        vocab_size,
        max_seq_len: 16,
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        ffn_dim: 32,
        num_classes: 2,
        dropout: 0.0,
        seed,
    }
}

/// Bag-of-words majority vote over the keyword tables; the oracle the corpus
/// is constructed to satisfy.
pub fn bag_of_words_label(text: &str) -> Option<u32> {
    let pos = surface_keywords(POSITIVE_CLUSTERS);
    let neg = surface_keywords(NEGATIVE_CLUSTERS);
    let tokens = crate::lexicon::tokenize(text);
    let p = tokens.iter().filter(|t| pos.contains(&t.as_str())).count();
    let n = tokens.iter().filter(|t| neg.contains(&t.as_str())).count();
    match p.cmp(&n) {
        std::cmp::Ordering::Greater => Some(1),
        std::cmp::Ordering::Less => Some(0),
        std::cmp::Ordering::Equal => None,
    }
}
