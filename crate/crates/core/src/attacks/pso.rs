//! Discrete particle-swarm substitution search.
//!
//! A particle assigns each attackable position a synonym choice (0 keeps the
//! original word). Per iteration every position moves to its personal-best
//! value with probability omega, to the global-best value with probability
//! omega (omega annealed linearly from 0.8 to 0.2), then mutates to a random
//! choice with `pso_mutation_prob`. Fitness is `1 - P(true_label)`; a label
//! flip exits immediately.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::lexicon::{is_word_token, tokenize, SynonymIndex};
use crate::model::ClassifierOutput;

use super::{
    build_result, candidate_synonyms, AttackConfig, AttackResult, AttackStatus, QueryBudget,
    Substitution, TokenClassifier,
};

/// The swarm, kept separate from the driver loop so tests can step it and
/// watch the best-so-far trajectory.
pub(crate) struct PsoState {
    /// Candidate lists per attackable position.
    slots: Vec<Slot>,
    particles: Vec<Vec<usize>>,
    personal_best: Vec<(Vec<usize>, f32)>,
    global_best: Option<(Vec<usize>, f32, ClassifierOutput)>,
}

struct Slot {
    position: usize,
    candidates: Vec<String>,
}

pub(crate) enum StepOutcome {
    /// A particle flipped the label: its choices and the flipping output.
    Flip(Vec<usize>, ClassifierOutput),
    /// Budget exhausted mid-evaluation.
    Exhausted,
    Continue,
}

impl PsoState {
    fn new(slots: Vec<Slot>, population: usize, rng: &mut ChaCha8Rng) -> PsoState {
        // Each particle starts one random substitution away from the
        // original sentence.
        let particles = (0..population)
            .map(|_| {
                let mut choice = vec![0usize; slots.len()];
                let slot = rng.gen_range(0..slots.len());
                choice[slot] = 1 + rng.gen_range(0..slots[slot].candidates.len());
                choice
            })
            .collect();
        PsoState {
            slots,
            particles,
            personal_best: Vec::new(),
            global_best: None,
        }
    }

    fn apply(&self, tokens: &[String], choice: &[usize]) -> Vec<String> {
        let mut out = tokens.to_vec();
        for (slot, &c) in self.slots.iter().zip(choice) {
            if c > 0 {
                out[slot.position] = slot.candidates[c - 1].clone();
            }
        }
        out
    }

    pub(crate) fn global_best_fitness(&self) -> Option<f32> {
        self.global_best.as_ref().map(|(_, f, _)| *f)
    }

    /// Evaluate every particle, updating the bests; personal and global
    /// bests only ever improve strictly.
    fn evaluate(
        &mut self,
        model: &dyn TokenClassifier,
        tokens: &[String],
        label: u32,
        budget: &mut QueryBudget,
    ) -> StepOutcome {
        for (pi, particle) in self.particles.iter().enumerate() {
            let candidate_tokens = self.apply(tokens, particle);
            let out = match budget.query(model, &candidate_tokens) {
                Some(out) => out,
                None => return StepOutcome::Exhausted,
            };
            if out.predicted_label != label as usize {
                return StepOutcome::Flip(particle.clone(), out);
            }
            let fitness = 1.0 - out.probabilities[label as usize];
            if pi >= self.personal_best.len() {
                self.personal_best.push((particle.clone(), fitness));
            } else if fitness > self.personal_best[pi].1 {
                self.personal_best[pi] = (particle.clone(), fitness);
            }
            let improves_global = match &self.global_best {
                Some((_, best, _)) => fitness > *best,
                None => true,
            };
            if improves_global {
                self.global_best = Some((particle.clone(), fitness, out));
            }
        }
        StepOutcome::Continue
    }

    /// Move every particle: toward its personal best, toward the global
    /// best, then random mutation.
    fn advance(&mut self, omega: f64, mutation_prob: f64, rng: &mut ChaCha8Rng) {
        let global = self
            .global_best
            .as_ref()
            .map(|(choice, _, _)| choice.clone())
            .expect("advance follows at least one evaluation");
        for (pi, particle) in self.particles.iter_mut().enumerate() {
            let personal = self.personal_best[pi].0.clone();
            for s in 0..particle.len() {
                if rng.gen_bool(omega) {
                    particle[s] = personal[s];
                }
                if rng.gen_bool(omega) {
                    particle[s] = global[s];
                }
                if rng.gen_bool(mutation_prob) {
                    particle[s] = rng.gen_range(0..=self.slots[s].candidates.len());
                }
            }
        }
    }
}

/// Inertia schedule: linear from 0.8 down to 0.2 across the iterations.
fn omega_at(iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        return 0.8;
    }
    0.8 - 0.6 * iteration as f64 / (total - 1) as f64
}

/// Particle-swarm attack on one example. Deterministic for a fixed seed;
/// the generator derives from `config.seed` XOR the example index.
pub fn pso_attack(
    model: &dyn TokenClassifier,
    text: &str,
    label: u32,
    index: &SynonymIndex,
    config: &AttackConfig,
    example_index: usize,
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

    let slots: Vec<Slot> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| is_word_token(t))
        .filter_map(|(position, t)| {
            let candidates = candidate_synonyms(index, t, config.max_candidates_per_word);
            (!candidates.is_empty()).then_some(Slot { position, candidates })
        })
        .collect();
    if slots.is_empty() {
        // Degenerate population: nothing to perturb.
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

    let mut rng = crate::rng::example_rng(config.seed, "attacks/pso", example_index);
    let mut state = PsoState::new(slots, config.pso_population, &mut rng);

    let mut outcome = state.evaluate(model, &tokens, label, &mut budget);
    let mut iteration = 0;
    while matches!(outcome, StepOutcome::Continue) && iteration < config.pso_iterations {
        state.advance(omega_at(iteration, config.pso_iterations), config.pso_mutation_prob, &mut rng);
        outcome = state.evaluate(model, &tokens, label, &mut budget);
        iteration += 1;
    }

    match outcome {
        StepOutcome::Flip(choice, out) => {
            let working = state.apply(&tokens, &choice);
            let substitutions = substitutions_for(&state, &tokens, &choice);
            build_result(
                text,
                &working,
                label,
                first.predicted_label,
                out.predicted_label,
                AttackStatus::Success,
                budget.used(),
                substitutions,
            )
        }
        StepOutcome::Exhausted | StepOutcome::Continue => {
            // Report the best particle found; it never flipped, so the
            // attack failed.
            match &state.global_best {
                Some((choice, _, out)) => {
                    let working = state.apply(&tokens, choice);
                    let substitutions = substitutions_for(&state, &tokens, choice);
                    build_result(
                        text,
                        &working,
                        label,
                        first.predicted_label,
                        out.predicted_label,
                        AttackStatus::Failed,
                        budget.used(),
                        substitutions,
                    )
                }
                None => build_result(
                    text,
                    &tokens,
                    label,
                    first.predicted_label,
                    first.predicted_label,
                    AttackStatus::Failed,
                    budget.used(),
                    Vec::new(),
                ),
            }
        }
    }
}

fn substitutions_for(state: &PsoState, tokens: &[String], choice: &[usize]) -> Vec<Substitution> {
    state
        .slots
        .iter()
        .zip(choice)
        .filter(|(_, &c)| c > 0)
        .map(|(slot, &c)| Substitution {
            position: slot.position,
            original: tokens[slot.position].clone(),
            replacement: slot.candidates[c - 1].clone(),
        })
        .collect()
}

#[cfg(test)]
mod state_tests {
    use super::*;
    use crate::lexicon::Vocabulary;

    /// Scripted model: probability of class 0 decreases with the number of
    /// substituted tokens, never flipping.
    struct Scripted;

    impl TokenClassifier for Scripted {
        fn num_classes(&self) -> usize {
            2
        }

        fn predict_tokens(&self, tokens: &[String]) -> ClassifierOutput {
            let subs = tokens.iter().filter(|t| t.starts_with("alt")).count();
            let p0 = (0.9 - 0.05 * subs as f32).max(0.55);
            ClassifierOutput::from_probabilities(vec![p0, 1.0 - p0])
        }
    }

    #[test]
    fn global_best_fitness_never_worsens() {
        let store = crate::lexicon::EmbeddingStore::parse(
            "alpha 1 0 0\nalta 0.99 0.14 0\naltb 0.97 0.24 0\nbeta 0 1 0\naltc 0.14 0.99 0\n",
            "test",
        )
        .unwrap();
        let vocab = Vocabulary::build(["alpha", "beta", "alta"]);
        let index = crate::lexicon::SynonymIndex::build(&store, &vocab, 3, 0.5);
        let config = AttackConfig::new(super::super::AttackKind::Pso, 7);
        let tokens: Vec<String> = vec!["alpha".into(), "beta".into()];
        let slots: Vec<Slot> = tokens
            .iter()
            .enumerate()
            .filter_map(|(position, t)| {
                let candidates = candidate_synonyms(&index, t, 3);
                (!candidates.is_empty()).then_some(Slot { position, candidates })
            })
            .collect();
        assert!(!slots.is_empty());
        let mut rng = crate::rng::example_rng(config.seed, "attacks/pso", 0);
        let mut state = PsoState::new(slots, config.pso_population, &mut rng);
        let model = Scripted;
        let mut budget = QueryBudget::new(10_000);
        let mut last = f32::NEG_INFINITY;
        for it in 0..10 {
            let outcome = state.evaluate(&model, &tokens, 0, &mut budget);
            assert!(matches!(outcome, StepOutcome::Continue));
            let best = state.global_best_fitness().unwrap();
            assert!(best >= last, "global best worsened at iteration {it}");
            last = best;
            state.advance(omega_at(it, 10), config.pso_mutation_prob, &mut rng);
        }
    }
}
