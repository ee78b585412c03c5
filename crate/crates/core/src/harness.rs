//! Dataset ingestion, clean and under-attack evaluation, report assembly,
//! and report comparison.
//!
//! Transfer mode generates adversarial examples once, against the float
//! model, then scores both models on the very same perturbed texts; adaptive
//! mode runs the full attack against each model independently. Skipped
//! examples (clean misclassifications) stay in the denominator of every
//! accuracy, and each report records that choice.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attack_example, AttackConfig, AttackKind, AttackResult, AttackStatus, TokenClassifier,
};
use crate::error::Error;
use crate::lexicon::{tokenize, SynonymIndex};

/// Which split a dataset represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// A labeled text-classification dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    split: Split,
    examples: Vec<(String, u32)>,
    num_classes: usize,
    dropped_empty: usize,
}

impl Dataset {
    /// Build a dataset from in-memory examples. Labels out of range and
    /// empty texts are contract violations here; file ingestion handles them
    /// through [`load_dataset`].
    pub fn new(name: String, split: Split, examples: Vec<(String, u32)>, num_classes: usize) -> Dataset {
        for (text, label) in &examples {
            assert!(
                (*label as usize) < num_classes,
                "label {label} out of range for {num_classes} classes"
            );
            assert!(!text.trim().is_empty(), "dataset {name} contains an empty text");
        }
        Dataset {
            name,
            split,
            examples,
            num_classes,
            dropped_empty: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn examples(&self) -> &[(String, u32)] {
        &self.examples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Empty texts dropped during ingestion.
    pub fn dropped_empty(&self) -> usize {
        self.dropped_empty
    }
}

/// Load a two-column TSV (`text TAB integer-label`). An optional header row
/// is detected by a non-integer second column on the first line. Empty texts
/// are dropped with a count; file order is preserved.
pub fn load_dataset(path: &Path, name: &str, split: Split) -> Result<Dataset, Error> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let display = path.display().to_string();

    let mut examples = Vec::new();
    let mut dropped_empty = 0usize;
    let mut bad_labels: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let lineno = lineno + 1;
        let columns: Vec<&str> = line.split('\t').collect();
        if columns.len() != 2 {
            return Err(Error::Parse {
                path: display,
                line: lineno,
                message: format!("expected 2 tab-separated columns, found {}", columns.len()),
            });
        }
        let (text, label_str) = (columns[0], columns[1]);
        match label_str.trim().parse::<u32>() {
            Ok(label) => {
                if text.trim().is_empty() {
                    dropped_empty += 1;
                } else {
                    examples.push((text.to_string(), label));
                }
            }
            Err(_) => {
                if lineno == 1 {
                    // Header row.
                    continue;
                }
                bad_labels.push((lineno, label_str.to_string()));
            }
        }
    }
    if !bad_labels.is_empty() {
        let offenders: Vec<String> = bad_labels
            .iter()
            .map(|(line, value)| format!("line {line}: {value:?}"))
            .collect();
        return Err(Error::Parse {
            path: display,
            line: bad_labels[0].0,
            message: format!("unknown label values: {}", offenders.join(", ")),
        });
    }
    if dropped_empty > 0 {
        log::warn!("{display}: dropped {dropped_empty} empty texts");
    }
    let num_classes = examples.iter().map(|(_, l)| *l as usize + 1).max().unwrap_or(2).max(2);
    Ok(Dataset {
        name: name.to_string(),
        split,
        examples,
        num_classes,
        dropped_empty,
    })
}

/// Write a dataset in the same TSV format [`load_dataset`] reads.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), Error> {
    let mut body = String::new();
    for (text, label) in dataset.examples() {
        assert!(
            !text.contains('\t') && !text.contains('\n'),
            "dataset text contains a tab or newline"
        );
        body.push_str(text);
        body.push('\t');
        body.push_str(&label.to_string());
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Accuracy of the model over the first `n` examples. `n = 0` is defined as
/// zero with a logged warning.
pub fn evaluate_clean(model: &dyn TokenClassifier, dataset: &Dataset, n: usize) -> f64 {
    assert!(
        n <= dataset.examples().len(),
        "sample count {n} exceeds dataset size {}",
        dataset.examples().len()
    );
    if n == 0 {
        log::warn!("evaluate_clean over zero examples is defined as 0");
        return 0.0;
    }
    let correct = dataset.examples()[..n]
        .iter()
        .filter(|(text, label)| {
            model.predict_tokens(&tokenize(text)).predicted_label == *label as usize
        })
        .count();
    correct as f64 / n as f64
}

/// Evaluation mode for attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Generate adversarial examples against the float model once; score
    /// both models on the same texts.
    Transfer,
    /// Attack each model directly.
    Adaptive,
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Transfer => "transfer",
            EvalMode::Adaptive => "adaptive",
        })
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "transfer" => Ok(EvalMode::Transfer),
            "adaptive" => Ok(EvalMode::Adaptive),
            other => Err(format!("unknown mode {other:?} (expected transfer|adaptive)")),
        }
    }
}

/// Per-(model, attack, mode) evaluation numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackBlock {
    pub model_id: String,
    pub attack_kind: AttackKind,
    pub mode: EvalMode,
    pub clean_accuracy: f64,
    pub after_attack_accuracy: f64,
    pub attack_success_rate: f64,
    pub skip_rate: f64,
    pub mean_words_changed: f64,
    pub mean_queries: f64,
}

/// Aggregate report for one dataset and attack setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub sample_count: usize,
    pub models: Vec<String>,
    pub clean_accuracy: BTreeMap<String, f64>,
    /// Skipped examples stay in every denominator (denominator = n).
    pub denominator_includes_skipped: bool,
    pub attack_config: Option<AttackConfig>,
    pub attacks: Vec<AttackBlock>,
    /// Checkpoint byte sizes, when the caller evaluated from files.
    #[serde(default)]
    pub model_file_bytes: BTreeMap<String, u64>,
}

impl EvaluationReport {
    /// Enforce the report identities: `after = clean * (1 - success_rate)`
    /// to 1e-9, and after-attack accuracy never above clean accuracy.
    pub fn check_consistency(&self) -> Result<(), String> {
        for block in &self.attacks {
            let identity = block.clean_accuracy * (1.0 - block.attack_success_rate);
            if (block.after_attack_accuracy - identity).abs() > 1e-9 {
                return Err(format!(
                    "block {}/{}/{}: after {} != clean*(1-sr) {}",
                    block.model_id, block.attack_kind, block.mode, block.after_attack_accuracy, identity
                ));
            }
            if block.after_attack_accuracy > block.clean_accuracy + 1e-12 {
                return Err(format!(
                    "block {}/{}/{}: after-attack {} exceeds clean {}",
                    block.model_id,
                    block.attack_kind,
                    block.mode,
                    block.after_attack_accuracy,
                    block.clean_accuracy
                ));
            }
            if let Some(clean) = self.clean_accuracy.get(&block.model_id) {
                if (clean - block.clean_accuracy).abs() > 1e-12 {
                    return Err(format!(
                        "block {}/{}/{}: clean accuracy {} disagrees with report {}",
                        block.model_id, block.attack_kind, block.mode, block.clean_accuracy, clean
                    ));
                }
            }
        }
        Ok(())
    }
}

/// A model with the id it is reported under.
pub struct NamedModel<'a> {
    pub id: String,
    pub model: &'a dyn TokenClassifier,
}

impl<'a> NamedModel<'a> {
    pub fn new(id: impl Into<String>, model: &'a dyn TokenClassifier) -> Self {
        NamedModel { id: id.into(), model }
    }
}

/// One attack attempt as written to the JSONL report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResultRecord {
    pub dataset: String,
    pub example_id: usize,
    pub attack_kind: AttackKind,
    pub mode: EvalMode,
    /// The model the attack queried.
    pub model_id: String,
    #[serde(flatten)]
    pub result: AttackResult,
    pub config: AttackConfig,
}

/// Attack every one of the first `n` examples against `model`, in parallel,
/// collecting results in example order.
pub fn attack_suite(
    model: &dyn TokenClassifier,
    dataset: &Dataset,
    index: &SynonymIndex,
    config: &AttackConfig,
    n: usize,
) -> Vec<AttackResult> {
    assert!(
        n <= dataset.examples().len(),
        "sample count {n} exceeds dataset size {}",
        dataset.examples().len()
    );
    dataset.examples()[..n]
        .par_iter()
        .enumerate()
        .map(|(i, (text, label))| attack_example(model, text, *label, index, config, i))
        .collect()
}

/// Clean-and-under-attack evaluation of the float/quantized pair.
pub fn evaluate_under_attack(
    float_model: &NamedModel<'_>,
    quantized_model: &NamedModel<'_>,
    dataset: &Dataset,
    index: &SynonymIndex,
    attack_config: &AttackConfig,
    mode: EvalMode,
    n: usize,
) -> (EvaluationReport, Vec<AttackResultRecord>) {
    assert!(
        n <= dataset.examples().len(),
        "sample count {n} exceeds dataset size {}",
        dataset.examples().len()
    );
    let examples = &dataset.examples()[..n];

    let mut blocks = Vec::new();
    let mut records = Vec::new();
    let mut clean = BTreeMap::new();

    match mode {
        EvalMode::Transfer => {
            let results = attack_suite(float_model.model, dataset, index, attack_config, n);
            // Both models score the exact same perturbed texts.
            let perturbed: Vec<&str> = results.iter().map(|r| r.perturbed_text.as_str()).collect();

            let float_block =
                block_from_statuses(&float_model.id, attack_config.attack_kind, mode, &results);
            clean.insert(float_model.id.clone(), float_block.clean_accuracy);
            blocks.push(float_block);

            let quant_block = block_from_scoring(
                &quantized_model.id,
                attack_config.attack_kind,
                mode,
                quantized_model.model,
                examples,
                &perturbed,
                &results,
            );
            clean.insert(quantized_model.id.clone(), quant_block.clean_accuracy);
            blocks.push(quant_block);

            records.extend(to_records(dataset, mode, &float_model.id, attack_config, results));
        }
        EvalMode::Adaptive => {
            for named in [float_model, quantized_model] {
                let results = attack_suite(named.model, dataset, index, attack_config, n);
                let block = block_from_statuses(&named.id, attack_config.attack_kind, mode, &results);
                clean.insert(named.id.clone(), block.clean_accuracy);
                blocks.push(block);
                records.extend(to_records(dataset, mode, &named.id, attack_config, results));
            }
        }
    }

    let report = EvaluationReport {
        dataset: dataset.name().to_string(),
        sample_count: n,
        models: vec![float_model.id.clone(), quantized_model.id.clone()],
        clean_accuracy: clean,
        denominator_includes_skipped: true,
        attack_config: Some(attack_config.clone()),
        attacks: blocks,
        model_file_bytes: BTreeMap::new(),
    };
    debug_assert!(report.check_consistency().is_ok());
    (report, records)
}

fn to_records(
    dataset: &Dataset,
    mode: EvalMode,
    model_id: &str,
    config: &AttackConfig,
    results: Vec<AttackResult>,
) -> Vec<AttackResultRecord> {
    results
        .into_iter()
        .enumerate()
        .map(|(example_id, result)| AttackResultRecord {
            dataset: dataset.name().to_string(),
            example_id,
            attack_kind: config.attack_kind,
            mode,
            model_id: model_id.to_string(),
            result,
            config: config.clone(),
        })
        .collect()
}

/// Counters over the attack attempts of the model the attack queried:
/// skipped = clean-wrong, success = flipped.
fn block_from_statuses(
    model_id: &str,
    attack_kind: AttackKind,
    mode: EvalMode,
    results: &[AttackResult],
) -> AttackBlock {
    let n = results.len();
    let clean_correct = results.iter().filter(|r| r.status != AttackStatus::Skipped).count();
    let flipped = results.iter().filter(|r| r.status == AttackStatus::Success).count();
    finish_block(model_id, attack_kind, mode, n, clean_correct, flipped, results)
}

/// Counters for a model that did not generate the texts: its own clean
/// predictions define the skip rule; flips are counted on the shared
/// perturbed texts.
fn block_from_scoring(
    model_id: &str,
    attack_kind: AttackKind,
    mode: EvalMode,
    model: &dyn TokenClassifier,
    examples: &[(String, u32)],
    perturbed: &[&str],
    generation_results: &[AttackResult],
) -> AttackBlock {
    let n = examples.len();
    let outcomes: Vec<(bool, bool)> = examples
        .par_iter()
        .zip(perturbed)
        .map(|((text, label), perturbed_text)| {
            let want = *label as usize;
            let clean_ok = model.predict_tokens(&tokenize(text)).predicted_label == want;
            if !clean_ok {
                return (false, false);
            }
            let after_ok = model.predict_tokens(&tokenize(perturbed_text)).predicted_label == want;
            (true, !after_ok)
        })
        .collect();
    let clean_correct = outcomes.iter().filter(|(ok, _)| *ok).count();
    let flipped = outcomes.iter().filter(|(_, flip)| *flip).count();
    finish_block(model_id, attack_kind, mode, n, clean_correct, flipped, generation_results)
}

fn finish_block(
    model_id: &str,
    attack_kind: AttackKind,
    mode: EvalMode,
    n: usize,
    clean_correct: usize,
    flipped: usize,
    results: &[AttackResult],
) -> AttackBlock {
    let clean_accuracy = if n == 0 { 0.0 } else { clean_correct as f64 / n as f64 };
    let attack_success_rate = if clean_correct == 0 {
        0.0
    } else {
        flipped as f64 / clean_correct as f64
    };
    let after_attack_accuracy = if n == 0 {
        0.0
    } else {
        (clean_correct - flipped) as f64 / n as f64
    };
    let attempted: Vec<&AttackResult> =
        results.iter().filter(|r| r.status != AttackStatus::Skipped).collect();
    let (mean_words_changed, mean_queries) = if attempted.is_empty() {
        (0.0, 0.0)
    } else {
        (
            attempted.iter().map(|r| r.words_changed as f64).sum::<f64>() / attempted.len() as f64,
            attempted.iter().map(|r| r.queries_used as f64).sum::<f64>() / attempted.len() as f64,
        )
    };
    AttackBlock {
        model_id: model_id.to_string(),
        attack_kind,
        mode,
        clean_accuracy,
        after_attack_accuracy,
        attack_success_rate,
        skip_rate: if n == 0 { 0.0 } else { (n - clean_correct) as f64 / n as f64 },
        mean_words_changed,
        mean_queries,
    }
}

/// Write one JSON object per line.
pub fn save_attack_records(records: &[AttackResultRecord], path: &Path) -> Result<(), Error> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for record in records {
        let line = serde_json::to_string(record)
            .expect("attack records serialize");
        file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_attack_records(path: &Path) -> Result<Vec<AttackResultRecord>, Error> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .map(|(lineno, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn save_report(report: &EvaluationReport, path: &Path) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<EvaluationReport, Error> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model_id: String,
    pub attack_kind: AttackKind,
    pub mode: EvalMode,
    pub clean_accuracy: f64,
    pub after_attack_accuracy: f64,
    pub attack_success_rate: f64,
    /// After-attack accuracy minus the baseline model's, same attack/mode.
    pub delta_vs_baseline: f64,
}

/// Cross-report comparison: per-(model, attack, mode) after-attack
/// accuracies, deltas against the baseline model, and size ratios where
/// checkpoint sizes are known.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub dataset: String,
    pub sample_count: usize,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
    /// (model, baseline, quantized/original byte ratio).
    pub size_ratios: Vec<(String, String, f64)>,
}

/// Merge reports into a comparison table. Reports must agree on dataset,
/// sample count, attack settings, and attack/mode coverage; mismatches are
/// refused with a field-by-field diff.
pub fn compare_report(reports: &[EvaluationReport]) -> Result<ComparisonTable, Error> {
    assert!(!reports.is_empty(), "compare_report needs at least one report");
    let first = &reports[0];
    let mut diffs = Vec::new();
    for (i, other) in reports.iter().enumerate().skip(1) {
        if other.dataset != first.dataset {
            diffs.push(format!(
                "report {i}: dataset {:?} vs {:?}",
                other.dataset, first.dataset
            ));
        }
        if other.sample_count != first.sample_count {
            diffs.push(format!(
                "report {i}: sample_count {} vs {}",
                other.sample_count, first.sample_count
            ));
        }
        if !attack_settings_match(first.attack_config.as_ref(), other.attack_config.as_ref()) {
            diffs.push(format!(
                "report {i}: attack config {:?} vs {:?}",
                other.attack_config, first.attack_config
            ));
        }
        let mine = coverage(other);
        let base = coverage(first);
        if mine != base {
            diffs.push(format!("report {i}: attack coverage {mine:?} vs {base:?}"));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::ReportMismatch { diff: diffs.join("\n") });
    }

    let baseline = first.models[0].clone();
    let baseline_after: BTreeMap<(String, String), f64> = reports
        .iter()
        .flat_map(|r| r.attacks.iter())
        .filter(|b| b.model_id == baseline)
        .map(|b| ((b.attack_kind.to_string(), b.mode.to_string()), b.after_attack_accuracy))
        .collect();

    let mut rows = Vec::new();
    for report in reports {
        for block in &report.attacks {
            let key = (block.attack_kind.to_string(), block.mode.to_string());
            let delta = baseline_after
                .get(&key)
                .map(|base| block.after_attack_accuracy - base)
                .unwrap_or(0.0);
            rows.push(ComparisonRow {
                model_id: block.model_id.clone(),
                attack_kind: block.attack_kind,
                mode: block.mode,
                clean_accuracy: block.clean_accuracy,
                after_attack_accuracy: block.after_attack_accuracy,
                attack_success_rate: block.attack_success_rate,
                delta_vs_baseline: delta,
            });
        }
    }

    let mut sizes: BTreeMap<String, u64> = BTreeMap::new();
    for report in reports {
        for (model, bytes) in &report.model_file_bytes {
            sizes.entry(model.clone()).or_insert(*bytes);
        }
    }
    let mut size_ratios = Vec::new();
    if let Some(base_bytes) = sizes.get(&baseline).copied() {
        for (model, bytes) in &sizes {
            if model != &baseline {
                size_ratios.push((
                    model.clone(),
                    baseline.clone(),
                    crate::quant::byte_ratio(*bytes, base_bytes),
                ));
            }
        }
    }

    Ok(ComparisonTable {
        dataset: first.dataset.clone(),
        sample_count: first.sample_count,
        baseline,
        rows,
        size_ratios,
    })
}

fn attack_settings_match(a: Option<&AttackConfig>, b: Option<&AttackConfig>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a == b,
        (None, None) => true,
        _ => false,
    }
}

fn coverage(report: &EvaluationReport) -> Vec<(String, String)> {
    let mut cov: Vec<(String, String)> = report
        .attacks
        .iter()
        .map(|b| (b.attack_kind.to_string(), b.mode.to_string()))
        .collect();
    cov.sort();
    cov.dedup();
    cov
}

impl ComparisonTable {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "dataset: {}  samples: {}  baseline: {}\n",
            self.dataset, self.sample_count, self.baseline
        ));
        out.push_str(&format!(
            "{:<12} {:<11} {:<9} {:>7} {:>7} {:>8} {:>9}\n",
            "model", "attack", "mode", "clean", "after", "success", "delta"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<11} {:<9} {:>7.4} {:>7.4} {:>8.4} {:>+9.4}\n",
                row.model_id,
                row.attack_kind.to_string(),
                row.mode.to_string(),
                row.clean_accuracy,
                row.after_attack_accuracy,
                row.attack_success_rate,
                row.delta_vs_baseline
            ));
        }
        for (model, base, ratio) in &self.size_ratios {
            out.push_str(&format!("size ratio {model}/{base}: {ratio:.4}\n"));
        }
        out
    }

    /// CSV rendering with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,attack,mode,clean_accuracy,after_attack_accuracy,attack_success_rate,delta_vs_baseline\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.model_id,
                row.attack_kind,
                row.mode,
                row.clean_accuracy,
                row.after_attack_accuracy,
                row.attack_success_rate,
                row.delta_vs_baseline
            ));
        }
        out
    }
}
