//! Metrics: accuracy, corpus BLEU, label-explanation association and
//! simulatability, plus report aggregation and rendering.

mod bleu;

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bleu::{corpus_bleu, corpus_bleu_with, sentence_stats, tokenize, BleuStats, BleuTokenizer};

use crate::backend::{self, Generation, ModelFactory, Role, Seq2Seq, TrainConfig, TrainRecord};
use crate::corpus::{parse_joint_output, Example, PromptFormat};
use crate::error::{Error, Result};

/// Inputs per inference shard.
const SHARD: usize = 32;

pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Case-folded, whitespace-collapsed text without trailing punctuation.
pub fn normalize_explanation(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

/// Exact-match rate after trimming and case folding.
pub fn accuracy(predicted: &[String], gold: &[String]) -> Result<f64> {
    if predicted.is_empty() || predicted.len() != gold.len() {
        return Err(Error::contract(format!(
            "accuracy over {} predictions and {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    let hits = predicted
        .iter()
        .zip(gold)
        .filter(|(p, g)| normalize_label(p) == normalize_label(g))
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Greedy generation over many inputs, sharded across the rayon pool.
pub fn generate_all(model: &dyn Seq2Seq, inputs: &[String], max_len: usize) -> Result<Vec<Generation>> {
    let shards: Vec<Vec<Generation>> = inputs
        .par_chunks(SHARD)
        .map(|chunk| model.generate_batch(chunk, max_len))
        .collect::<Result<_>>()?;
    Ok(shards.into_iter().flatten().collect())
}

/// Label predictions of a predictor or joint model.
pub fn predict_labels(model: &dyn Seq2Seq, examples: &[Example], fmt: &PromptFormat, max_len: usize) -> Result<Vec<String>> {
    let inputs: Vec<String> = examples.iter().map(|e| fmt.predictor_input(&e.input_text)).collect();
    let gens = generate_all(model, &inputs, max_len)?;
    Ok(match model.role() {
        Role::Joint => gens.iter().map(|g| joint_label(&g.text, fmt)).collect(),
        _ => gens.into_iter().map(|g| g.text).collect(),
    })
}

fn joint_label(text: &str, fmt: &PromptFormat) -> String {
    let parsed = parse_joint_output(text, fmt);
    if parsed.well_formed {
        parsed.label
    } else {
        String::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationReport {
    pub rate: f64,
    pub n_inputs: usize,
    pub n_associated: usize,
    pub n_failed: usize,
}

fn explanations_for_labels(model: &dyn Seq2Seq, ex: &Example, labels: &[String], fmt: &PromptFormat, max_len: usize) -> Result<Vec<String>> {
    match model.role() {
        Role::Rationalizer => {
            let inputs: Vec<String> = labels.iter().map(|l| fmt.rationalizer_input(&ex.input_text, l)).collect();
            Ok(model.generate_batch(&inputs, max_len)?.into_iter().map(|g| g.text).collect())
        }
        Role::Joint => {
            let input = fmt.predictor_input(&ex.input_text);
            labels
                .iter()
                .map(|l| model.continue_generation(&input, &fmt.joint_prefix(l), max_len))
                .collect()
        }
        Role::Predictor => Err(Error::contract("association needs a rationalizer or joint model")),
    }
}

/// Fraction of inputs whose explanations differ pairwise across all
/// candidate labels.
pub fn label_explanation_association(
    model: &dyn Seq2Seq,
    examples: &[Example],
    label_vocabulary: &[String],
    fmt: &PromptFormat,
    max_len: usize,
) -> Result<AssociationReport> {
    if examples.is_empty() {
        return Err(Error::contract("association over an empty dataset"));
    }
    if model.role() == Role::Predictor {
        return Err(Error::contract("association needs a rationalizer or joint model"));
    }
    let outcomes: Vec<Option<bool>> = examples
        .par_iter()
        .map(|ex| {
            let labels = if ex.choices.is_empty() { label_vocabulary } else { &ex.choices };
            if labels.len() < 2 {
                log::warn!("fewer than two candidate labels for `{}`", ex.input_text);
                return None;
            }
            match explanations_for_labels(model, ex, labels, fmt, max_len) {
                Ok(expl) => {
                    let distinct: HashSet<String> = expl.iter().map(|e| normalize_explanation(e)).collect();
                    Some(distinct.len() == labels.len())
                }
                Err(e) => {
                    log::warn!("association generation failed for `{}`: {e}", ex.input_text);
                    None
                }
            }
        })
        .collect();
    let n_associated = outcomes.iter().filter(|o| **o == Some(true)).count();
    let n_failed = outcomes.iter().filter(|o| o.is_none()).count();
    Ok(AssociationReport {
        rate: n_associated as f64 / examples.len() as f64,
        n_inputs: examples.len(),
        n_associated,
        n_failed,
    })
}

/// A self-rationalizing model's output for one test input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleOutput {
    pub input_text: String,
    pub predicted_label: String,
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatabilityResult {
    /// Mean Φ in `[-1, 1]`.
    pub phi_mean: f64,
    pub control_accuracy: f64,
    pub treatment_accuracy: f64,
    pub n_examples: usize,
    /// Outputs skipped for lacking an explanation.
    pub excluded: usize,
    pub per_example: Vec<i8>,
}

/// `Φ_j = 1(y^T_j = ŷ_j) - 1(y^C_j = ŷ_j)`, averaged over outputs that carry
/// an explanation.
pub fn simulatability(
    control: &dyn Seq2Seq,
    treatment: &dyn Seq2Seq,
    outputs: &[RationaleOutput],
    fmt: &PromptFormat,
    max_len: usize,
) -> Result<SimulatabilityResult> {
    let kept: Vec<(&RationaleOutput, &str)> = outputs
        .iter()
        .filter_map(|o| match o.explanation.as_deref() {
            Some(e) if !e.trim().is_empty() => Some((o, e)),
            _ => None,
        })
        .collect();
    let excluded = outputs.len() - kept.len();
    if excluded > 0 {
        log::info!("simulatability: {excluded} output(s) without an explanation excluded");
    }
    if kept.is_empty() {
        return Err(Error::contract("no outputs with explanations"));
    }
    let control_inputs: Vec<String> = kept.iter().map(|(o, _)| fmt.simulator_input(&o.input_text, None)).collect();
    let treatment_inputs: Vec<String> = kept.iter().map(|(o, e)| fmt.simulator_input(&o.input_text, Some(e))).collect();
    let yc = generate_all(control, &control_inputs, max_len)?;
    let yt = generate_all(treatment, &treatment_inputs, max_len)?;
    let mut per_example = Vec::with_capacity(kept.len());
    let (mut c_hits, mut t_hits) = (0usize, 0usize);
    for (((o, _), c), t) in kept.iter().zip(&yc).zip(&yt) {
        let target = normalize_label(&o.predicted_label);
        let c_ok = normalize_label(&c.text) == target;
        let t_ok = normalize_label(&t.text) == target;
        c_hits += usize::from(c_ok);
        t_hits += usize::from(t_ok);
        per_example.push(i8::from(t_ok) - i8::from(c_ok));
    }
    let n = kept.len() as f64;
    Ok(SimulatabilityResult {
        phi_mean: per_example.iter().map(|&p| p as f64).sum::<f64>() / n,
        control_accuracy: c_hits as f64 / n,
        treatment_accuracy: t_hits as f64 / n,
        n_examples: kept.len(),
        excluded,
        per_example,
    })
}

/// Training records for the control (input only) and treatment
/// (input plus explanation) simulators.
pub fn simulator_records(examples: &[Example], fmt: &PromptFormat) -> (Vec<TrainRecord>, Vec<TrainRecord>) {
    let labeled: Vec<&Example> = examples.iter().filter(|e| e.is_labeled()).collect();
    let control = labeled
        .iter()
        .map(|e| TrainRecord::gold(fmt.simulator_input(&e.input_text, None), e.label.trim()))
        .collect();
    let treatment = labeled
        .iter()
        .map(|e| TrainRecord::gold(fmt.simulator_input(&e.input_text, Some(&e.explanation)), e.label.trim()))
        .collect();
    (control, treatment)
}

/// Trains both simulators on gold data.
pub fn train_simulators(
    factory: &dyn ModelFactory,
    train: &[Example],
    validation: &[Example],
    fmt: &PromptFormat,
    cfg: &TrainConfig,
) -> Result<(Box<dyn Seq2Seq>, Box<dyn Seq2Seq>)> {
    let (control_train, treatment_train) = simulator_records(train, fmt);
    let (control_val, treatment_val) = simulator_records(validation, fmt);
    let mut control = factory.create(Role::Predictor, cfg.seed ^ 0x5137)?;
    backend::train(control.as_mut(), &control_train, &control_val, cfg)?;
    let mut treatment = factory.create(Role::Predictor, cfg.seed ^ 0x7233)?;
    backend::train(treatment.as_mut(), &treatment_train, &treatment_val, cfg)?;
    Ok((control, treatment))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: Option<f64>,
    /// Corpus BLEU in `[0, 100]`.
    pub bleu: Option<f64>,
    pub association_rate: Option<f64>,
    /// Mean Φ in `[-1, 1]`.
    pub simulatability: Option<f64>,
    pub n_examples: usize,
    pub run_seeds: Vec<u64>,
}

/// Generates over `test` and scores labels and explanations for `role`.
///
/// Rationalizers are conditioned on the gold label, so they get no accuracy;
/// predictors produce no explanations, so they get no BLEU. Malformed joint
/// outputs count as a wrong label with an empty explanation.
pub fn evaluate(model: &dyn Seq2Seq, test: &[Example], fmt: &PromptFormat, max_len: usize) -> Result<(MetricReport, Vec<RationaleOutput>)> {
    if test.is_empty() {
        return Err(Error::contract("evaluation on an empty test set"));
    }
    let role = model.role();
    let inputs: Vec<String> = test
        .iter()
        .map(|e| match role {
            Role::Rationalizer => fmt.rationalizer_input(&e.input_text, &e.label),
            _ => fmt.predictor_input(&e.input_text),
        })
        .collect();
    let gens = generate_all(model, &inputs, max_len)?;
    let outputs: Vec<RationaleOutput> = test
        .iter()
        .zip(&gens)
        .map(|(e, g)| {
            let (label, explanation) = match role {
                Role::Predictor => (g.text.clone(), None),
                Role::Rationalizer => (e.label.clone(), Some(g.text.clone())),
                Role::Joint => {
                    let p = parse_joint_output(&g.text, fmt);
                    if p.well_formed {
                        (p.label, Some(p.explanation))
                    } else {
                        (String::new(), Some(String::new()))
                    }
                }
            };
            RationaleOutput {
                input_text: e.input_text.clone(),
                predicted_label: label,
                explanation,
            }
        })
        .collect();
    let gold_labels: Vec<String> = test.iter().map(|e| e.label.clone()).collect();
    let gold_expl: Vec<String> = test.iter().map(|e| e.explanation.clone()).collect();
    let predicted: Vec<String> = outputs.iter().map(|o| o.predicted_label.clone()).collect();
    let explanations: Vec<String> = outputs.iter().map(|o| o.explanation.clone().unwrap_or_default()).collect();
    let report = MetricReport {
        accuracy: match role {
            Role::Rationalizer => None,
            _ => Some(accuracy(&predicted, &gold_labels)?),
        },
        bleu: match role {
            Role::Predictor => None,
            _ => Some(corpus_bleu(&explanations, &gold_expl)?),
        },
        n_examples: test.len(),
        ..Default::default()
    };
    Ok((report, outputs))
}

fn mean_field(reports: &[MetricReport], f: impl Fn(&MetricReport) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = reports.iter().map(f).collect();
    vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Arithmetic mean over runs; a metric missing from any run is dropped.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
    if reports.is_empty() {
        return Err(Error::contract("no reports to aggregate"));
    }
    Ok(MetricReport {
        accuracy: mean_field(reports, |r| r.accuracy),
        bleu: mean_field(reports, |r| r.bleu),
        association_rate: mean_field(reports, |r| r.association_rate),
        simulatability: mean_field(reports, |r| r.simulatability),
        n_examples: reports[0].n_examples,
        run_seeds: reports.iter().flat_map(|r| r.run_seeds.iter().copied()).collect(),
    })
}

/// One point of a per-iteration metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seed: u64,
    pub stage: String,
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

fn cell(v: Option<f64>, scale: f64) -> String {
    v.map(|x| format!("{:.2}", x * scale)).unwrap_or_else(|| "-".into())
}

/// Plain-text table with accuracy and association in percent and Φ × 100.
pub fn render_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>5}\n", "run", "acc", "bleu", "assoc", "phi", "n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}  {:>8}  {:>5}",
            name,
            cell(r.accuracy, 100.0),
            cell(r.bleu, 1.0),
            cell(r.association_rate, 100.0),
            cell(r.simulatability, 100.0),
            r.n_examples
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Responder, ScriptedModel};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&s(&["a", "b"]), &s(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(accuracy(&s(&["a", "b"]), &s(&["c", "d"])).unwrap(), 0.0);
        assert_eq!(accuracy(&s(&["a", " B", "c", "d"]), &s(&["a", "b", "c", "x"])).unwrap(), 0.75);
        assert!(accuracy(&s(&["a"]), &s(&["a", "b"])).is_err());
    }

    #[test]
    fn explanation_normalization() {
        assert_eq!(normalize_explanation("  A  dog runs. "), "a dog runs");
        assert_eq!(normalize_explanation("A dog runs!?"), normalize_explanation("a dog   runs"));
    }

    fn dataset() -> Vec<Example> {
        (0..4).map(|i| Example::new(format!("input {i}"), "yes", "because")).collect()
    }

    #[test]
    fn constant_explanations_are_not_associated() {
        let m = ScriptedModel::new(Role::Rationalizer, Responder::Constant("same thing".into()));
        let r = label_explanation_association(&m, &dataset(), &s(&["yes", "no"]), &PromptFormat::default(), 16).unwrap();
        assert_eq!(r.rate, 0.0);
    }

    #[test]
    fn label_copying_explanations_are_associated() {
        // The rationalizer input ends with the label, so echoing it yields a
        // label-specific explanation.
        let m = ScriptedModel::new(Role::Rationalizer, Responder::Echo);
        let labels = s(&["yes", "no", "maybe"]);
        let r = label_explanation_association(&m, &dataset(), &labels, &PromptFormat::default(), 64).unwrap();
        assert_eq!(r.rate, 1.0);
        let mut reversed = labels.clone();
        reversed.reverse();
        let r2 = label_explanation_association(&m, &dataset(), &reversed, &PromptFormat::default(), 64).unwrap();
        assert_eq!(r.rate, r2.rate);
    }

    #[test]
    fn prefix_independent_joint_is_not_associated() {
        let m = ScriptedModel::new(Role::Joint, Responder::Constant("yes explanation: fixed".into()))
            .with_continuation(|_, _| "fixed".into());
        let r = label_explanation_association(&m, &dataset(), &s(&["yes", "no"]), &PromptFormat::default(), 16).unwrap();
        assert_eq!(r.rate, 0.0);
    }

    #[test]
    fn simulatability_extremes_and_identity() {
        let outputs: Vec<RationaleOutput> = (0..5)
            .map(|i| RationaleOutput {
                input_text: format!("x{i}"),
                predicted_label: "yes".into(),
                explanation: if i == 4 { None } else { Some("e".into()) },
            })
            .collect();
        let fmt = PromptFormat::default();
        let yes = ScriptedModel::new(Role::Predictor, Responder::Constant("yes".into()));
        let no = ScriptedModel::new(Role::Predictor, Responder::Constant("no".into()));
        let same = simulatability(&no, &no, &outputs, &fmt, 4).unwrap();
        assert_eq!(same.phi_mean, 0.0);
        let best = simulatability(&no, &yes, &outputs, &fmt, 4).unwrap();
        assert_eq!(best.phi_mean, 1.0);
        assert_eq!(best.excluded, 1);
        assert_eq!(best.n_examples, 4);
        assert_eq!(best.phi_mean, best.treatment_accuracy - best.control_accuracy);
        assert!(best.per_example.iter().all(|p| [-1, 0, 1].contains(p)));
    }

    #[test]
    fn perfect_joint_stub_scores_full_marks() {
        let test: Vec<Example> = (0..3)
            .map(|i| Example::new(format!("q{i}"), "yes", format!("the reason is number {i} here")))
            .collect();
        let fmt = PromptFormat::default();
        let table: std::collections::HashMap<String, String> = test
            .iter()
            .map(|e| (fmt.predictor_input(&e.input_text), fmt.joint_target(&e.label, &e.explanation)))
            .collect();
        let m = ScriptedModel::new(
            Role::Joint,
            Responder::Table {
                table,
                default: String::new(),
            },
        );
        let (report, _) = evaluate(&m, &test, &fmt, 64).unwrap();
        assert_eq!(report.accuracy, Some(1.0));
        assert!((report.bleu.unwrap() - 100.0).abs() < 1e-9);
        let p = ScriptedModel::new(Role::Predictor, Responder::Constant("yes".into()));
        assert_eq!(evaluate(&p, &test, &fmt, 8).unwrap().0.bleu, None);
    }

    #[test]
    fn aggregation_is_the_mean() {
        let a = MetricReport {
            accuracy: Some(0.5),
            bleu: Some(10.0),
            n_examples: 3,
            run_seeds: vec![1],
            ..Default::default()
        };
        let b = MetricReport {
            accuracy: Some(0.7),
            bleu: Some(20.0),
            n_examples: 3,
            run_seeds: vec![2],
            ..Default::default()
        };
        let m = aggregate(&[a, b]).unwrap();
        assert!((m.accuracy.unwrap() - 0.6).abs() < 1e-9);
        assert!((m.bleu.unwrap() - 15.0).abs() < 1e-9);
        assert_eq!(m.run_seeds, vec![1, 2]);
        assert_eq!(m.association_rate, None);
    }
}
