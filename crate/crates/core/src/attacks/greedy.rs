//! Greedy substitution search: TextFooler orders words by deletion
//! importance, PWWS by saliency-weighted best-synonym drop. Both then walk
//! the positions in order, trying synonyms and committing the one that most
//! reduces the true-class probability (or immediately flips the label).

use crate::lexicon::{is_word_token, tokenize, SynonymIndex, UNK_TOKEN};
use crate::model::ClassifierOutput;
use crate::tensor::softmax;

use super::{
    build_result, candidate_synonyms, ranked_positions, AttackConfig, AttackResult, AttackStatus,
    QueryBudget, Substitution, TokenClassifier,
};

/// Greedy attack with deletion-based word importance ordering.
pub fn textfooler_attack(
    model: &dyn TokenClassifier,
    text: &str,
    label: u32,
    index: &SynonymIndex,
    config: &AttackConfig,
) -> AttackResult {
    config.validate();
    let tokens = tokenize(text);
    let mut budget = QueryBudget::new(config.query_budget);

    let first = match budget.query(model, &tokens) {
        Some(out) => out,
        None => unreachable!("query_budget is positive"),
    };
    if first.predicted_label != label as usize {
        return build_result(
            text,
            &tokens,
            label,
            first.predicted_label,
            first.predicted_label,
            AttackStatus::Skipped,
            budget.used(),
            Vec::new(),
        );
    }
    if tokens.is_empty() {
        return build_result(
            text,
            &tokens,
            label,
            first.predicted_label,
            first.predicted_label,
            AttackStatus::Failed,
            budget.used(),
            Vec::new(),
        );
    }

    // Deletion-based importance, reusing the skip-check query as the base.
    let base_p = first.probabilities[label as usize];
    let mut scores = vec![f32::NEG_INFINITY; tokens.len()];
    for i in 0..tokens.len() {
        if !is_word_token(&tokens[i]) {
            continue;
        }
        let mut deleted = tokens.clone();
        deleted.remove(i);
        match budget.query(model, &deleted) {
            Some(out) => scores[i] = base_p - out.probabilities[label as usize],
            None => {
                return build_result(
                    text, &tokens, label, first.predicted_label, first.predicted_label,
                    AttackStatus::Failed, budget.used(), Vec::new(),
                )
            }
        }
    }

    greedy_search(
        model,
        text,
        &tokens,
        label,
        first.predicted_label,
        base_p,
        &ranked_positions(&scores),
        index,
        config,
        budget,
        None,
    )
}

/// Greedy attack with the PWWS priority ordering:
/// `priority(i) = best_drop(i) * softmax(saliency)(i)`, where saliency is
/// the probability drop when token i becomes UNK and best_drop is the drop
/// of the best synonym on the clean sentence.
pub fn pwws_attack(
    model: &dyn TokenClassifier,
    text: &str,
    label: u32,
    index: &SynonymIndex,
    config: &AttackConfig,
) -> AttackResult {
    config.validate();
    let tokens = tokenize(text);
    let mut budget = QueryBudget::new(config.query_budget);

    let first = match budget.query(model, &tokens) {
        Some(out) => out,
        None => unreachable!("query_budget is positive"),
    };
    if first.predicted_label != label as usize {
        return build_result(
            text,
            &tokens,
            label,
            first.predicted_label,
            first.predicted_label,
            AttackStatus::Skipped,
            budget.used(),
            Vec::new(),
        );
    }
    if tokens.is_empty() {
        return build_result(
            text,
            &tokens,
            label,
            first.predicted_label,
            first.predicted_label,
            AttackStatus::Failed,
            budget.used(),
            Vec::new(),
        );
    }

    let base_p = first.probabilities[label as usize];
    let scan = match priority_scan(model, &tokens, label, base_p, index, config, &mut budget, true) {
        ScanOutcome::Flipped { position, replacement, output } => {
            let mut working = tokens.clone();
            let original = working[position].clone();
            working[position] = replacement.clone();
            let final_prediction = output.predicted_label;
            return build_result(
                text,
                &working,
                label,
                first.predicted_label,
                final_prediction,
                AttackStatus::Success,
                budget.used(),
                vec![Substitution { position, original, replacement }],
            );
        }
        ScanOutcome::Exhausted => {
            return build_result(
                text, &tokens, label, first.predicted_label, first.predicted_label,
                AttackStatus::Failed, budget.used(), Vec::new(),
            )
        }
        ScanOutcome::Scores(scan) => scan,
    };

    let priorities = combine_priorities(&tokens, &scan);
    greedy_search(
        model,
        text,
        &tokens,
        label,
        first.predicted_label,
        base_p,
        &ranked_positions(&priorities),
        index,
        config,
        budget,
        Some(&scan.best_drop),
    )
}

/// The PWWS priority vector for a sentence, computed with a fresh budget and
/// no early exit. Unattackable positions score negative infinity.
pub fn pwws_priority_scores(
    model: &dyn TokenClassifier,
    text: &str,
    label: u32,
    index: &SynonymIndex,
    config: &AttackConfig,
) -> Vec<f32> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut budget = QueryBudget::new(usize::MAX);
    let base_p = model.predict_tokens(&tokens).probabilities[label as usize];
    match priority_scan(model, &tokens, label, base_p, index, config, &mut budget, false) {
        ScanOutcome::Scores(scan) => combine_priorities(&tokens, &scan),
        _ => unreachable!("scan without early exit or budget cap always yields scores"),
    }
}

struct PriorityScan {
    /// Saliency per position (NEG_INFINITY for non-word tokens).
    saliency: Vec<f32>,
    /// Best clean-sentence drop and candidate per position.
    best_drop: Vec<Option<(f32, String, ClassifierOutput)>>,
}

enum ScanOutcome {
    Scores(PriorityScan),
    Flipped {
        position: usize,
        replacement: String,
        output: ClassifierOutput,
    },
    Exhausted,
}

/// One pass over the clean sentence: UNK saliency per word position, then
/// every synonym of every attackable position. With `early_exit`, a flipping
/// probe returns immediately.
#[allow(clippy::too_many_arguments)]
fn priority_scan(
    model: &dyn TokenClassifier,
    tokens: &[String],
    label: u32,
    base_p: f32,
    index: &SynonymIndex,
    config: &AttackConfig,
    budget: &mut QueryBudget,
    early_exit: bool,
) -> ScanOutcome {
    let mut saliency = vec![f32::NEG_INFINITY; tokens.len()];
    for i in 0..tokens.len() {
        if !is_word_token(&tokens[i]) {
            continue;
        }
        let mut probe = tokens.to_vec();
        probe[i] = UNK_TOKEN.to_string();
        match budget.query(model, &probe) {
            Some(out) => saliency[i] = base_p - out.probabilities[label as usize],
            None => return ScanOutcome::Exhausted,
        }
    }

    let mut best_drop: Vec<Option<(f32, String, ClassifierOutput)>> = vec![None; tokens.len()];
    for i in 0..tokens.len() {
        if !is_word_token(&tokens[i]) {
            continue;
        }
        let candidates = candidate_synonyms(index, &tokens[i], config.max_candidates_per_word);
        for cand in candidates {
            let mut probe = tokens.to_vec();
            probe[i] = cand.clone();
            let out = match budget.query(model, &probe) {
                Some(out) => out,
                None => return ScanOutcome::Exhausted,
            };
            if early_exit && out.predicted_label != label as usize {
                return ScanOutcome::Flipped {
                    position: i,
                    replacement: cand,
                    output: out,
                };
            }
            let drop = base_p - out.probabilities[label as usize];
            let better = match &best_drop[i] {
                Some((prev, _, _)) => drop > *prev,
                None => true,
            };
            if better {
                best_drop[i] = Some((drop, cand, out));
            }
        }
    }
    ScanOutcome::Scores(PriorityScan { saliency, best_drop })
}

/// priority(i) = best_drop(i) * softmax(saliency over word positions)(i);
/// positions with no candidates stay at negative infinity.
fn combine_priorities(tokens: &[String], scan: &PriorityScan) -> Vec<f32> {
    let word_positions: Vec<usize> = (0..tokens.len())
        .filter(|&i| scan.saliency[i] != f32::NEG_INFINITY)
        .collect();
    let mut priorities = vec![f32::NEG_INFINITY; tokens.len()];
    if word_positions.is_empty() {
        return priorities;
    }
    let saliencies: Vec<f32> = word_positions.iter().map(|&i| scan.saliency[i]).collect();
    let weights = softmax(&saliencies);
    for (slot, &i) in word_positions.iter().enumerate() {
        if let Some((drop, _, _)) = &scan.best_drop[i] {
            priorities[i] = drop * weights[slot];
        }
    }
    priorities
}

/// Walk positions in the given order; at each, try every synonym of the
/// original word against the current working sentence and commit the one
/// with the largest probability drop (strictly reducing), or return
/// immediately on a label flip. Budget exhaustion returns best-so-far.
///
/// `clean_cache` carries candidate evaluations already made against the
/// clean sentence (the PWWS scan); they stay valid until the first commit
/// and are reused instead of re-querying.
#[allow(clippy::too_many_arguments)]
fn greedy_search(
    model: &dyn TokenClassifier,
    text: &str,
    tokens: &[String],
    label: u32,
    original_prediction: usize,
    base_p: f32,
    order: &[usize],
    index: &SynonymIndex,
    config: &AttackConfig,
    mut budget: QueryBudget,
    clean_cache: Option<&[Option<(f32, String, ClassifierOutput)>]>,
) -> AttackResult {
    let mut working = tokens.to_vec();
    let mut substitutions: Vec<Substitution> = Vec::new();
    let mut current_p = base_p;
    let mut current_prediction = original_prediction;

    for &pos in order {
        let original_word = tokens[pos].clone();
        if substitutions.is_empty() {
            if let Some(cache) = clean_cache {
                // The scan already evaluated every candidate of this position
                // against the clean sentence (none flipped, or the scan would
                // have exited); reuse its best instead of re-querying.
                if let Some((_, cand, out)) = &cache[pos] {
                    let p = out.probabilities[label as usize];
                    if p < current_p {
                        working[pos] = cand.clone();
                        substitutions.push(Substitution {
                            position: pos,
                            original: original_word,
                            replacement: cand.clone(),
                        });
                        current_p = p;
                        current_prediction = out.predicted_label;
                    }
                    continue;
                }
            }
        }
        let candidates = candidate_synonyms(index, &original_word, config.max_candidates_per_word);
        if candidates.is_empty() {
            continue;
        }
        let mut best: Option<(f32, String, ClassifierOutput)> = None;
        for cand in candidates {
            working[pos] = cand.clone();
            let out = match budget.query(model, &working) {
                Some(out) => out,
                None => {
                    // Budget exhausted: restore and report best-so-far.
                    working[pos] = original_word.clone();
                    return build_result(
                        text,
                        &working,
                        label,
                        original_prediction,
                        current_prediction,
                        AttackStatus::Failed,
                        budget.used(),
                        substitutions,
                    );
                }
            };
            if out.predicted_label != label as usize {
                substitutions.push(Substitution {
                    position: pos,
                    original: original_word,
                    replacement: cand,
                });
                return build_result(
                    text,
                    &working,
                    label,
                    original_prediction,
                    out.predicted_label,
                    AttackStatus::Success,
                    budget.used(),
                    substitutions,
                );
            }
            let p = out.probabilities[label as usize];
            let better = match &best {
                Some((prev, _, _)) => p < *prev,
                None => true,
            };
            if better {
                best = Some((p, cand, out));
            }
            working[pos] = original_word.clone();
        }
        if let Some((p, cand, out)) = best {
            // Commit only a strict improvement.
            if p < current_p {
                working[pos] = cand.clone();
                substitutions.push(Substitution {
                    position: pos,
                    original: original_word,
                    replacement: cand,
                });
                current_p = p;
                current_prediction = out.predicted_label;
            }
        }
    }

    build_result(
        text,
        &working,
        label,
        original_prediction,
        current_prediction,
        AttackStatus::Failed,
        budget.used(),
        substitutions,
    )
}
