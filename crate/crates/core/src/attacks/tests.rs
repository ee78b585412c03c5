use std::sync::atomic::{AtomicUsize, Ordering};

use super::*;
use crate::lexicon::{tokenize, SynonymIndex};
use crate::model::{ClassifierOutput, TextPipeline, TokenClassifier};
use crate::test_fixtures::toy_fixture;

/// Wrapper that counts forward calls, for query-accounting checks.
struct CountingModel<'a> {
    inner: &'a dyn TokenClassifier,
    calls: AtomicUsize,
}

impl<'a> CountingModel<'a> {
    fn new(inner: &'a dyn TokenClassifier) -> Self {
        CountingModel {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl TokenClassifier for CountingModel<'_> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn predict_tokens(&self, tokens: &[String]) -> ClassifierOutput {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_tokens(tokens)
    }
}

fn toy_pipeline() -> TextPipeline<'static, crate::model::TransformerClassifier> {
    let fx = toy_fixture();
    TextPipeline::new(&fx.model, &fx.vocab)
}

/// A label the toy model predicts for this text (so the attack is not
/// skipped) — the model's own clean prediction.
fn clean_prediction(text: &str) -> u32 {
    toy_pipeline().predict_tokens(&tokenize(text)).predicted_label as u32
}

fn small_config(kind: AttackKind) -> AttackConfig {
    let mut cfg = AttackConfig::new(kind, 71);
    cfg.max_candidates_per_word = 3;
    cfg
}

/// Every synonym combination of the attackable positions (<= 3 candidates
/// each), exhaustively enumerated.
fn exhaustive_outcomes(
    model: &dyn TokenClassifier,
    tokens: &[String],
    label: u32,
    index: &SynonymIndex,
    max_candidates: usize,
) -> (bool, f32) {
    let slots: Vec<(usize, Vec<String>)> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| crate::lexicon::is_word_token(t))
        .filter_map(|(i, t)| {
            let cands = candidate_synonyms(index, t, max_candidates);
            (!cands.is_empty()).then_some((i, cands))
        })
        .collect();
    let mut any_flip = false;
    let mut best_fitness = f32::NEG_INFINITY;
    let mut counters = vec![0usize; slots.len()];
    loop {
        let mut candidate = tokens.to_vec();
        for ((i, cands), &c) in slots.iter().zip(&counters) {
            if c > 0 {
                candidate[*i] = cands[c - 1].clone();
            }
        }
        let out = model.predict_tokens(&candidate);
        if out.predicted_label != label as usize {
            any_flip = true;
        }
        best_fitness = best_fitness.max(1.0 - out.probabilities[label as usize]);

        // Odometer over the choice space.
        let mut k = 0;
        loop {
            if k == slots.len() {
                return (any_flip, best_fitness);
            }
            counters[k] += 1;
            if counters[k] <= slots[k].1.len() {
                break;
            }
            counters[k] = 0;
            k += 1;
        }
    }
}

#[test]
fn importance_definition_at_one_word() {
    let model = toy_pipeline();
    let tokens = vec!["good".to_string()];
    let scores = word_importance(&model, &tokens, 1);
    let base = model.predict_tokens(&tokens).probabilities[1];
    let empty = model.predict_tokens(&[]).probabilities[1];
    assert_eq!(scores, vec![base - empty]);
}

#[test]
fn importance_of_duplicated_word_is_symmetric() {
    let model = toy_pipeline();
    let tokens: Vec<String> = vec!["good".into(), "good".into()];
    let scores = word_importance(&model, &tokens, 1);
    assert!((scores[0] - scores[1]).abs() <= 0.05);
}

#[test]
fn importance_matches_exhaustive_deletion_oracle() {
    let model = toy_pipeline();
    let tokens = tokenize("the movie was good and great despite the bad plot");
    let label = 1u32;
    let scores = word_importance(&model, &tokens, label);
    // Independent loop: recompute each deletion from scratch.
    let base = model.predict_tokens(&tokens).probabilities[label as usize];
    for (i, token) in tokens.iter().enumerate() {
        if !crate::lexicon::is_word_token(token) {
            assert_eq!(scores[i], f32::NEG_INFINITY);
            continue;
        }
        let mut deleted = tokens.clone();
        deleted.remove(i);
        let expect = base - model.predict_tokens(&deleted).probabilities[label as usize];
        assert_eq!(scores[i], expect, "score mismatch at position {i}");
    }
}

#[test]
fn importance_queries_cost_is_exact() {
    let model = toy_pipeline();
    let counting = CountingModel::new(&model);
    let tokens = tokenize("a good movie .");
    let words = tokens.iter().filter(|t| crate::lexicon::is_word_token(t)).count();
    word_importance(&counting, &tokens, 1);
    assert_eq!(counting.calls(), words + 1);
}

#[test]
fn ranked_positions_orders_by_score_then_index() {
    let scores = [0.5, f32::NEG_INFINITY, 0.9, 0.5];
    assert_eq!(ranked_positions(&scores), vec![2, 0, 3]);
}

#[test]
fn textfooler_skips_already_wrong_examples() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "the movie was good";
    let wrong_label = 1 - clean_prediction(text);
    let cfg = small_config(AttackKind::Textfooler);
    let result = textfooler_attack(&model, text, wrong_label, &fx.index, &cfg);
    assert_eq!(result.status, AttackStatus::Skipped);
    assert_eq!(result.perturbed_text, text);
    assert_eq!(result.queries_used, 1);
    assert!(result.substitutions.is_empty());
}

#[test]
fn textfooler_fails_without_synonyms() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "it was the same as that one";
    let label = clean_prediction(text);
    let cfg = small_config(AttackKind::Textfooler);
    let result = textfooler_attack(&model, text, label, &fx.index, &cfg);
    assert_eq!(result.status, AttackStatus::Failed);
    assert!(result.substitutions.is_empty());
    assert_eq!(result.perturbed_text, text);
}

#[test]
fn textfooler_successes_are_confirmed_by_exhaustive_search() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let cfg = small_config(AttackKind::Textfooler);
    let mut successes = 0;
    for (text, _) in crate::toy::short_instances(5, 40) {
        let label = clean_prediction(&text);
        let tokens = tokenize(&text);
        let result = textfooler_attack(&model, &text, label, &fx.index, &cfg);
        let (exhaustive_flip, _) =
            exhaustive_outcomes(&model, &tokens, label, &fx.index, cfg.max_candidates_per_word);
        if result.status == AttackStatus::Success {
            successes += 1;
            // Re-running the model on the perturbed text must confirm the flip.
            let out = model.predict_tokens(&tokenize(&result.perturbed_text));
            assert_ne!(out.predicted_label, label as usize);
            assert!(exhaustive_flip, "greedy success must imply exhaustive success");
            // Commit order must follow the importance ranking.
            let ranked = ranked_positions(&word_importance(&model, &tokens, label));
            let mut cursor = 0;
            for sub in &result.substitutions {
                let at = ranked[cursor..]
                    .iter()
                    .position(|&p| p == sub.position)
                    .expect("commit order follows importance order");
                cursor += at + 1;
            }
        }
    }
    assert!(successes > 0, "expected at least one greedy success on the short suite");
}

#[test]
fn textfooler_descent_is_monotone() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let cfg = AttackConfig::new(AttackKind::Textfooler, 71);
    for (text, _) in crate::toy::short_instances(9, 20) {
        let label = clean_prediction(&text);
        let result = textfooler_attack(&model, &text, label, &fx.index, &cfg);
        if result.substitutions.is_empty() {
            continue;
        }
        let tokens = tokenize(&text);
        let mut working = tokens.clone();
        let mut last_p = model.predict_tokens(&working).probabilities[label as usize];
        for (step, sub) in result.substitutions.iter().enumerate() {
            working[sub.position] = sub.replacement.clone();
            let out = model.predict_tokens(&working);
            let p = out.probabilities[label as usize];
            let flipped = out.predicted_label != label as usize;
            let is_last = step + 1 == result.substitutions.len();
            if is_last && result.status == AttackStatus::Success {
                assert!(p < last_p || flipped);
            } else {
                assert!(p < last_p, "commit {step} did not reduce P: {last_p} -> {p}");
            }
            last_p = p;
        }
    }
}

#[test]
fn query_accounting_is_exact_for_all_attacks() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "the movie was good and great despite the bad plot";
    let label = clean_prediction(text);
    for kind in [AttackKind::Textfooler, AttackKind::Pwws, AttackKind::Pso] {
        let counting = CountingModel::new(&model);
        let cfg = small_config(kind);
        let result = attack_example(&counting, text, label, &fx.index, &cfg, 3);
        assert_eq!(
            counting.calls(),
            result.queries_used,
            "{kind} recorded {} queries but made {}",
            result.queries_used,
            counting.calls()
        );
        assert!(result.queries_used <= cfg.query_budget);
    }
}

#[test]
fn budget_exhaustion_returns_best_so_far() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "the movie was good and great despite the bad plot";
    let label = clean_prediction(text);
    let mut cfg = small_config(AttackKind::Textfooler);
    cfg.query_budget = 5;
    let result = textfooler_attack(&model, text, label, &fx.index, &cfg);
    assert_eq!(result.status, AttackStatus::Failed);
    assert_eq!(result.queries_used, 5);
}

#[test]
fn pwws_fails_without_synonyms() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "it was the same as that one";
    let label = clean_prediction(text);
    let result = pwws_attack(&model, text, label, &fx.index, &small_config(AttackKind::Pwws));
    assert_eq!(result.status, AttackStatus::Failed);
    assert!(result.substitutions.is_empty());
}

#[test]
fn pwws_equals_textfooler_on_single_attackable_word() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    // Only "good" has synonyms in this sentence.
    let text = "it was good";
    let label = clean_prediction(text);
    let tf = textfooler_attack(&model, text, label, &fx.index, &small_config(AttackKind::Textfooler));
    let pw = pwws_attack(&model, text, label, &fx.index, &small_config(AttackKind::Pwws));
    assert_eq!(tf, pw);
}

#[test]
fn pwws_priorities_match_two_pass_recomputation() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "a good movie";
    let label = clean_prediction(text);
    let cfg = small_config(AttackKind::Pwws);
    let got = pwws_priority_scores(&model, text, label, &fx.index, &cfg);

    // Independent recomputation: separate saliency loop, separate
    // best-synonym loop, then the explicit combination.
    let tokens = tokenize(text);
    let base = model.predict_tokens(&tokens).probabilities[label as usize];
    let mut saliency = Vec::new();
    let mut word_positions = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if !crate::lexicon::is_word_token(t) {
            continue;
        }
        let mut probe = tokens.clone();
        probe[i] = crate::lexicon::UNK_TOKEN.to_string();
        saliency.push(base - model.predict_tokens(&probe).probabilities[label as usize]);
        word_positions.push(i);
    }
    let weights = crate::tensor::softmax(&saliency);
    let mut want = vec![f32::NEG_INFINITY; tokens.len()];
    for (slot, &i) in word_positions.iter().enumerate() {
        let cands = candidate_synonyms(&fx.index, &tokens[i], cfg.max_candidates_per_word);
        if cands.is_empty() {
            continue;
        }
        let mut best_drop = f32::NEG_INFINITY;
        for cand in cands {
            let mut probe = tokens.clone();
            probe[i] = cand;
            let drop = base - model.predict_tokens(&probe).probabilities[label as usize];
            best_drop = best_drop.max(drop);
        }
        want[i] = best_drop * weights[slot];
    }
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        if *w == f32::NEG_INFINITY {
            assert_eq!(*g, f32::NEG_INFINITY);
        } else {
            assert!((g - w).abs() < 1e-6, "priority {g} vs recomputed {w}");
        }
    }
}

#[test]
fn pso_fails_without_synonyms() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "it was the same as that one";
    let label = clean_prediction(text);
    let result = pso_attack(&model, text, label, &fx.index, &small_config(AttackKind::Pso), 0);
    assert_eq!(result.status, AttackStatus::Failed);
    assert!(result.substitutions.is_empty());
    assert_eq!(result.queries_used, 1);
}

#[test]
fn pso_zero_iterations_evaluates_initial_population_only() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "a good movie";
    let label = clean_prediction(text);
    let mut cfg = small_config(AttackKind::Pso);
    cfg.pso_iterations = 0;
    let counting = CountingModel::new(&model);
    let result = pso_attack(&counting, text, label, &fx.index, &cfg, 0);
    // At most the skip check plus one evaluation per particle.
    assert!(result.queries_used <= 1 + cfg.pso_population);
    assert_eq!(counting.calls(), result.queries_used);
}

#[test]
fn pso_never_beats_exhaustive_search() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let cfg = small_config(AttackKind::Pso);
    for (idx, (text, _)) in crate::toy::short_instances(13, 12).into_iter().enumerate() {
        let label = clean_prediction(&text);
        let tokens = tokenize(&text);
        let result = pso_attack(&model, &text, label, &fx.index, &cfg, idx);
        let (exhaustive_flip, exhaustive_best) =
            exhaustive_outcomes(&model, &tokens, label, &fx.index, cfg.max_candidates_per_word);
        let final_fitness =
            1.0 - model.predict_tokens(&tokenize(&result.perturbed_text)).probabilities[label as usize];
        assert!(
            final_fitness <= exhaustive_best + 1e-6,
            "PSO fitness {final_fitness} beats exhaustive best {exhaustive_best}"
        );
        if result.status == AttackStatus::Success {
            assert!(exhaustive_flip, "PSO success must imply exhaustive success");
        }
    }
}

#[test]
fn pso_is_deterministic_for_fixed_seed() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "the movie was good and great despite the bad plot";
    let label = clean_prediction(text);
    let cfg = small_config(AttackKind::Pso);
    let a = pso_attack(&model, text, label, &fx.index, &cfg, 5);
    let b = pso_attack(&model, text, label, &fx.index, &cfg, 5);
    assert_eq!(a, b);
}

#[test]
fn attacks_are_deterministic_for_fixed_seed() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "i thought the story was wonderful";
    let label = clean_prediction(text);
    for kind in [AttackKind::Textfooler, AttackKind::Pwws, AttackKind::Pso] {
        let cfg = small_config(kind);
        let a = attack_example(&model, text, label, &fx.index, &cfg, 2);
        let b = attack_example(&model, text, label, &fx.index, &cfg, 2);
        assert_eq!(a, b);
    }
}

#[test]
fn verify_result_accepts_attack_outputs_and_catches_tampering() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    for (idx, (text, _)) in crate::toy::short_instances(17, 10).into_iter().enumerate() {
        let label = clean_prediction(&text);
        for kind in [AttackKind::Textfooler, AttackKind::Pwws, AttackKind::Pso] {
            let cfg = small_config(kind);
            let result = attack_example(&model, &text, label, &fx.index, &cfg, idx);
            assert!(verify_result(&model, &fx.index, &result), "{kind} result failed audit");

            let mut corrupted = result.clone();
            corrupted.final_prediction = 1 - corrupted.final_prediction;
            assert!(!verify_result(&model, &fx.index, &corrupted));
        }
    }
}

#[test]
fn verify_result_rejects_out_of_index_replacements() {
    let fx = toy_fixture();
    let model = toy_pipeline();
    let text = "a good movie";
    let label = clean_prediction(text);
    let cfg = AttackConfig::new(AttackKind::Textfooler, 71);
    let result = textfooler_attack(&model, text, label, &fx.index, &cfg);
    if result.substitutions.is_empty() {
        // Force a fabricated substitution record instead.
        let mut fabricated = result;
        let tokens = tokenize(text);
        let mut perturbed = tokens.clone();
        perturbed[1] = "zebra".to_string();
        fabricated.perturbed_text = crate::lexicon::detokenize(&perturbed);
        fabricated.substitutions = vec![Substitution {
            position: 1,
            original: tokens[1].clone(),
            replacement: "zebra".into(),
        }];
        fabricated.words_changed = 1;
        assert!(!verify_result(&model, &fx.index, &fabricated));
    } else {
        let mut corrupted = result.clone();
        corrupted.substitutions[0].replacement = "zebra".into();
        assert!(!verify_result(&model, &fx.index, &corrupted));
    }
}

#[test]
fn attacks_share_one_code_path_across_model_kinds() {
    // The quantized model goes through the same attack entry point via the
    // TokenClassifier trait.
    let fx = toy_fixture();
    let quantized = crate::quant::quantize_model(&fx.model);
    let pipeline = TextPipeline::new(&quantized, &fx.vocab);
    let text = "a good movie";
    let out = pipeline.predict_tokens(&tokenize(text));
    let cfg = small_config(AttackKind::Textfooler);
    let result = textfooler_attack(&pipeline, text, out.predicted_label as u32, &fx.index, &cfg);
    assert!(verify_result(&pipeline, &fx.index, &result));
}
