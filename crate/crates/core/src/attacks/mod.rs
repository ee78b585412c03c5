//! Word-level adversarial attacks: deletion-based importance ranking shared
//! by all three algorithms, greedy substitution search (TextFooler, PWWS),
//! and discrete particle-swarm search (PSO).
//!
//! Attacks see the model only through [`TokenClassifier`], so the float and
//! quantized classifiers are attacked by identical code. All failure modes
//! are statuses, never errors; every model call is counted against the
//! query budget.

mod greedy;
mod pso;

pub use greedy::{pwws_attack, pwws_priority_scores, textfooler_attack};
pub use pso::pso_attack;

use serde::{Deserialize, Serialize};

pub use crate::model::TokenClassifier;
use crate::lexicon::{detokenize, is_word_token, tokenize, SynonymIndex};
use crate::model::ClassifierOutput;

/// Which search algorithm to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Textfooler,
    Pwws,
    Pso,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AttackKind::Textfooler => "textfooler",
            AttackKind::Pwws => "pwws",
            AttackKind::Pso => "pso",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "textfooler" => Ok(AttackKind::Textfooler),
            "pwws" => Ok(AttackKind::Pwws),
            "pso" => Ok(AttackKind::Pso),
            other => Err(format!("unknown attack kind {other:?} (expected textfooler|pwws|pso)")),
        }
    }
}

/// Attack hyperparameters. Budgets and sizes must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub attack_kind: AttackKind,
    pub max_candidates_per_word: usize,
    pub query_budget: usize,
    pub pso_population: usize,
    pub pso_iterations: usize,
    pub pso_mutation_prob: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(attack_kind: AttackKind, seed: u64) -> AttackConfig {
        AttackConfig {
            attack_kind,
            max_candidates_per_word: 8,
            query_budget: 2000,
            pso_population: 20,
            pso_iterations: 20,
            pso_mutation_prob: 0.3,
            seed,
        }
    }

    pub fn validate(&self) {
        assert!(self.max_candidates_per_word > 0, "max_candidates_per_word must be positive");
        assert!(self.query_budget > 0, "query_budget must be positive");
        assert!(self.pso_population > 0, "pso_population must be positive");
        assert!(
            (0.0..=1.0).contains(&self.pso_mutation_prob),
            "pso_mutation_prob must lie in [0, 1], got {}",
            self.pso_mutation_prob
        );
    }
}

/// Outcome of one attack attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackStatus {
    /// The model was right on the clean text and the attack flipped it.
    Success,
    /// The model was right on the clean text and stayed right.
    Failed,
    /// The model was already wrong on the clean text; not attacked.
    Skipped,
}

/// One committed word substitution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub position: usize,
    pub original: String,
    pub replacement: String,
}

/// Full record of one attack attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub original_text: String,
    pub perturbed_text: String,
    pub original_label: u32,
    pub original_prediction: usize,
    pub final_prediction: usize,
    pub status: AttackStatus,
    pub words_changed: usize,
    pub queries_used: usize,
    pub substitutions: Vec<Substitution>,
}

/// Run the configured attack against one example. `example_index` feeds the
/// per-example seed derivation, so examples can be attacked in any order (or
/// in parallel) with identical results.
pub fn attack_example(
    model: &dyn TokenClassifier,
    text: &str,
    label: u32,
    index: &SynonymIndex,
    config: &AttackConfig,
    example_index: usize,
) -> AttackResult {
    config.validate();
    match config.attack_kind {
        AttackKind::Textfooler => textfooler_attack(model, text, label, index, config),
        AttackKind::Pwws => pwws_attack(model, text, label, index, config),
        AttackKind::Pso => pso_attack(model, text, label, index, config, example_index),
    }
}

/// Deletion-based word importance: `score_i = P(y|x) - P(y|x without token
/// i)`. Non-word tokens score negative infinity and are never attacked.
/// Costs exactly `len(word tokens) + 1` model queries.
pub fn word_importance(model: &dyn TokenClassifier, tokens: &[String], true_label: u32) -> Vec<f32> {
    assert!(!tokens.is_empty(), "word_importance of an empty token list");
    let base = model.predict_tokens(tokens).probabilities[true_label as usize];
    let mut scores = vec![f32::NEG_INFINITY; tokens.len()];
    for i in 0..tokens.len() {
        if !is_word_token(&tokens[i]) {
            continue;
        }
        let mut deleted: Vec<String> = tokens.to_vec();
        deleted.remove(i);
        let p = model.predict_tokens(&deleted).probabilities[true_label as usize];
        scores[i] = base - p;
    }
    scores
}

/// Positions ordered by descending score; ties break toward the lower
/// index; `-inf` (unattackable) positions are dropped.
pub fn ranked_positions(scores: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i] != f32::NEG_INFINITY)
        .collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Re-derive every [`AttackResult`] invariant from scratch, re-running the
/// model on both texts. Used as a post-hoc audit over stored reports.
pub fn verify_result(
    model: &dyn TokenClassifier,
    index: &SynonymIndex,
    result: &AttackResult,
) -> bool {
    let orig_tokens = tokenize(&result.original_text);
    let pert_tokens = tokenize(&result.perturbed_text);
    if orig_tokens.len() != pert_tokens.len() {
        return false;
    }
    if result.words_changed != result.substitutions.len() {
        return false;
    }

    // Substitution records must be sorted, unique, in range, and must
    // account for exactly the positions where the texts differ.
    let mut seen = std::collections::BTreeSet::new();
    for sub in &result.substitutions {
        if sub.position >= orig_tokens.len() || !seen.insert(sub.position) {
            return false;
        }
        if orig_tokens[sub.position] != sub.original || pert_tokens[sub.position] != sub.replacement {
            return false;
        }
        if sub.original == sub.replacement || !is_word_token(&sub.original) {
            return false;
        }
        if !index.contains_pair(&sub.original, &sub.replacement) {
            return false;
        }
    }
    for i in 0..orig_tokens.len() {
        if orig_tokens[i] != pert_tokens[i] && !seen.contains(&i) {
            return false;
        }
    }

    let orig_out = model.predict_tokens(&orig_tokens);
    if orig_out.predicted_label != result.original_prediction {
        return false;
    }
    let pert_out = model.predict_tokens(&pert_tokens);
    if pert_out.predicted_label != result.final_prediction {
        return false;
    }

    let label = result.original_label as usize;
    match result.status {
        AttackStatus::Success => {
            result.original_prediction == label && result.final_prediction != label
        }
        AttackStatus::Failed => {
            result.original_prediction == label && result.final_prediction == label
        }
        AttackStatus::Skipped => {
            result.original_prediction != label
                && result.substitutions.is_empty()
                && result.perturbed_text == result.original_text
        }
    }
}

/// Query-budget bookkeeping: every model call goes through [`QueryBudget::query`].
pub(crate) struct QueryBudget {
    used: usize,
    cap: usize,
}

impl QueryBudget {
    pub(crate) fn new(cap: usize) -> QueryBudget {
        QueryBudget { used: 0, cap }
    }

    pub(crate) fn used(&self) -> usize {
        self.used
    }

    /// `None` once the budget is exhausted.
    pub(crate) fn query(
        &mut self,
        model: &dyn TokenClassifier,
        tokens: &[String],
    ) -> Option<ClassifierOutput> {
        if self.used >= self.cap {
            return None;
        }
        self.used += 1;
        Some(model.predict_tokens(tokens))
    }
}

/// Candidate replacements for one word: synonyms from the index, filtered to
/// single stable tokens, truncated to the per-word cap.
pub(crate) fn candidate_synonyms(
    index: &SynonymIndex,
    word: &str,
    max_candidates: usize,
) -> Vec<String> {
    index
        .synonyms(word)
        .iter()
        .map(|(s, _)| s.clone())
        .filter(|s| {
            let toks = tokenize(s);
            toks.len() == 1 && toks[0] == *s && is_word_token(s)
        })
        .take(max_candidates)
        .collect()
}

/// Assemble an [`AttackResult`], deriving the perturbed text and counters
/// from the working token list and committed substitutions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn build_result(
    original_text: &str,
    working_tokens: &[String],
    original_label: u32,
    original_prediction: usize,
    final_prediction: usize,
    status: AttackStatus,
    queries_used: usize,
    substitutions: Vec<Substitution>,
) -> AttackResult {
    let perturbed_text = if substitutions.is_empty() {
        original_text.to_string()
    } else {
        detokenize(working_tokens)
    };
    AttackResult {
        original_text: original_text.to_string(),
        perturbed_text,
        original_label,
        original_prediction,
        final_prediction,
        words_changed: substitutions.len(),
        queries_used,
        status,
        substitutions,
    }
}

#[cfg(test)]
mod tests;
