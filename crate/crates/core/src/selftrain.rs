//! The teacher / pseudo-label / student loop shared by both teachers.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backend::{self, ModelFactory, RecordWeight, Role, Seq2Seq, TrainConfig, TrainHistory, TrainRecord};
use crate::corpus::{format_model_io, parse_joint_output, write_jsonl, Example, PromptFormat};
use crate::error::{Error, Result};
use crate::eval::{self, TraceRecord};
use crate::losses::joint_token_weights;
use crate::text::token_count;

/// One generated training target for an unlabeled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledExample {
    #[serde(rename = "input")]
    pub input_text: String,
    pub pseudo_label: String,
    pub pseudo_explanation: String,
    pub confidence: f64,
    pub source_iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Accuracy,
    Bleu,
}

impl SelectionMetric {
    /// Accuracy for label-producing roles, BLEU for the rationalizer.
    pub fn for_role(role: Role) -> Self {
        match role {
            Role::Rationalizer => SelectionMetric::Bleu,
            Role::Predictor | Role::Joint => SelectionMetric::Accuracy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::Accuracy => "accuracy",
            SelectionMetric::Bleu => "bleu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    /// Iterations including the initial teacher (iteration 0).
    pub max_iterations: usize,
    pub selection_metric: SelectionMetric,
    pub iteration_patience: usize,
    pub train: TrainConfig,
    pub max_generation_len: usize,
    /// Drop pseudo-labels below this confidence; off by default.
    pub min_confidence: Option<f64>,
    /// Per-iteration pseudo-label dumps go here when set.
    pub dump_dir: Option<PathBuf>,
}

impl SelfTrainConfig {
    pub fn for_role(role: Role) -> Self {
        Self {
            max_iterations: 5,
            selection_metric: SelectionMetric::for_role(role),
            iteration_patience: 1,
            train: TrainConfig::default(),
            max_generation_len: 64,
            min_confidence: None,
            dump_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.iteration_patience == 0 {
            return Err(Error::Config("max_iterations and iteration_patience must be positive".into()));
        }
        if self.max_generation_len == 0 {
            return Err(Error::Config("max_generation_len must be positive".into()));
        }
        self.train.loss.validate()
    }
}

/// Generates pseudo-labels for `unlabeled`.
///
/// Rationalizer inputs embed the predictor's label for each input, taken from
/// `predictor_labels`; every unlabeled input must have one.
pub fn pseudo_label(
    model: &dyn Seq2Seq,
    unlabeled: &[Example],
    fmt: &PromptFormat,
    predictor_labels: Option<&HashMap<String, String>>,
    iteration: usize,
    max_len: usize,
) -> Result<Vec<PseudoLabeledExample>> {
    if unlabeled.is_empty() {
        return Ok(Vec::new());
    }
    let role = model.role();
    let labels: Vec<String> = match role {
        Role::Rationalizer => {
            let map = predictor_labels.ok_or_else(|| Error::MissingPredictorLabels {
                inputs: unlabeled.iter().map(|e| e.input_text.clone()).collect(),
            })?;
            let missing: Vec<String> = unlabeled
                .iter()
                .filter(|e| map.get(&e.input_text).is_none_or(|l| l.trim().is_empty()))
                .map(|e| e.input_text.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingPredictorLabels { inputs: missing });
            }
            unlabeled.iter().map(|e| map[&e.input_text].clone()).collect()
        }
        _ => Vec::new(),
    };
    let inputs: Vec<String> = match role {
        Role::Rationalizer => unlabeled
            .iter()
            .zip(&labels)
            .map(|(e, l)| fmt.rationalizer_input(&e.input_text, l))
            .collect(),
        _ => unlabeled.iter().map(|e| fmt.predictor_input(&e.input_text)).collect(),
    };
    let gens = eval::generate_all(model, &inputs, max_len)?;
    Ok(unlabeled
        .iter()
        .zip(gens)
        .enumerate()
        .map(|(i, (e, g))| {
            let confidence = g.confidence();
            let (pseudo_label, pseudo_explanation) = match role {
                Role::Predictor => (g.text, String::new()),
                Role::Rationalizer => (labels[i].clone(), g.text),
                Role::Joint => {
                    let p = parse_joint_output(&g.text, fmt);
                    (p.label, p.explanation)
                }
            };
            PseudoLabeledExample {
                input_text: e.input_text.clone(),
                pseudo_label,
                pseudo_explanation,
                confidence,
                source_iteration: iteration,
            }
        })
        .collect())
}

fn joint_weights(label: &str, target: &str, lambda: f64) -> Result<Vec<f64>> {
    let label_tokens = token_count(label);
    if label_tokens == 0 {
        return Err(Error::contract("joint target without a label"));
    }
    joint_token_weights(label_tokens, token_count(target) - label_tokens, lambda)
}

/// Gold training record for `role`.
pub fn gold_record(ex: &Example, role: Role, fmt: &PromptFormat, lambda_token: f64) -> Result<TrainRecord> {
    let (input, target) = format_model_io(ex, role, fmt, false)?;
    let mut record = TrainRecord::gold(input, target);
    match role {
        Role::Rationalizer => record.mlr_input = Some(format_model_io(ex, role, fmt, true)?.0),
        Role::Joint => record.token_weights = Some(joint_weights(&ex.label, &record.target, lambda_token)?),
        Role::Predictor => {}
    }
    Ok(record)
}

/// Pseudo training record for `role`, weighted by its confidence.
pub fn pseudo_record(p: &PseudoLabeledExample, role: Role, fmt: &PromptFormat, lambda_token: f64) -> Result<TrainRecord> {
    let ex = Example::new(p.input_text.clone(), p.pseudo_label.clone(), p.pseudo_explanation.clone());
    let mut record = gold_record(&ex, role, fmt, lambda_token)?;
    record.weight = RecordWeight::Confidence(p.confidence);
    Ok(record)
}

pub fn gold_records(examples: &[Example], role: Role, fmt: &PromptFormat, lambda_token: f64) -> Result<Vec<TrainRecord>> {
    examples.iter().map(|e| gold_record(e, role, fmt, lambda_token)).collect()
}

/// Validation score of `model` under `metric`.
pub fn selection_score(model: &dyn Seq2Seq, validation: &[Example], fmt: &PromptFormat, metric: SelectionMetric, max_len: usize) -> Result<f64> {
    let (report, _) = eval::evaluate(model, validation, fmt, max_len)?;
    let value = match metric {
        SelectionMetric::Accuracy => report.accuracy,
        SelectionMetric::Bleu => report.bleu,
    };
    value.ok_or_else(|| Error::contract(format!("{} is undefined for a {} model", metric.name(), model.role())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub metric: SelectionMetric,
    pub validation_metric: f64,
    /// Whether this iteration's model became the teacher.
    pub accepted: bool,
    pub n_pseudo: usize,
    pub mean_confidence: Option<f64>,
    pub history: TrainHistory,
}

pub struct SelfTrainResult {
    pub best: Box<dyn Seq2Seq>,
    pub best_iteration: usize,
    pub iterations: Vec<IterationRecord>,
    /// Pseudo-labels that trained the returned model (empty for iteration 0).
    pub best_pseudo_labels: Vec<PseudoLabeledExample>,
}

impl SelfTrainResult {
    pub fn best_metric(&self) -> f64 {
        self.iterations[self.best_iteration].validation_metric
    }

    pub fn few_shot_metric(&self) -> f64 {
        self.iterations[0].validation_metric
    }

    pub fn trace(&self, seed: u64, stage: &str) -> Vec<TraceRecord> {
        self.iterations
            .iter()
            .map(|r| TraceRecord {
                seed,
                stage: stage.to_string(),
                iteration: r.iteration,
                metric: r.metric.name().to_string(),
                value: r.validation_metric,
            })
            .collect()
    }
}

fn iteration_seed(base: u64, role: Role, iteration: usize) -> u64 {
    let role_offset = match role {
        Role::Predictor => 11,
        Role::Rationalizer => 23,
        Role::Joint => 37,
    };
    base.wrapping_mul(1_000_003).wrapping_add(role_offset * 1000 + iteration as u64)
}

/// Self-trains a `role` model.
///
/// Iteration 0 trains the teacher on `labeled` alone. Every later iteration
/// pseudo-labels `unlabeled` with the best model so far, trains a freshly
/// initialized student on the gold and pseudo records, and promotes it when
/// its validation metric strictly improves. The loop stops after
/// `max_iterations` or `iteration_patience` iterations without improvement.
#[allow(clippy::too_many_arguments)]
pub fn self_train(
    factory: &dyn ModelFactory,
    labeled: &[Example],
    unlabeled: &[Example],
    validation: &[Example],
    role: Role,
    fmt: &PromptFormat,
    predictor_labels: Option<&HashMap<String, String>>,
    cfg: &SelfTrainConfig,
) -> Result<SelfTrainResult> {
    cfg.validate()?;
    if labeled.is_empty() || validation.is_empty() {
        return Err(Error::contract("self-training needs labeled and validation examples"));
    }
    let lambda = cfg.train.loss.lambda_token;
    let gold = gold_records(labeled, role, fmt, lambda)?;
    let val_records = gold_records(validation, role, fmt, lambda)?;
    let train_cfg = |iteration: usize| TrainConfig {
        seed: iteration_seed(cfg.train.seed, role, iteration),
        ..cfg.train.clone()
    };

    let mut best = factory.create(role, iteration_seed(cfg.train.seed, role, 0))?;
    let history = backend::train(best.as_mut(), &gold, &val_records, &train_cfg(0))?;
    let score = selection_score(best.as_ref(), validation, fmt, cfg.selection_metric, cfg.max_generation_len)?;
    log::info!("{role} iteration 0 (few-shot): {} {score:.4}", cfg.selection_metric.name());
    let mut iterations = vec![IterationRecord {
        iteration: 0,
        metric: cfg.selection_metric,
        validation_metric: score,
        accepted: true,
        n_pseudo: 0,
        mean_confidence: None,
        history,
    }];
    let mut best_score = score;
    let mut best_iteration = 0;
    let mut best_pseudo = Vec::new();
    let mut stale = 0;

    for iteration in 1..cfg.max_iterations {
        if unlabeled.is_empty() {
            log::info!("{role}: no unlabeled data, stopping after the few-shot teacher");
            break;
        }
        let mut pseudo = pseudo_label(best.as_ref(), unlabeled, fmt, predictor_labels, iteration, cfg.max_generation_len)?;
        if let Some(dir) = &cfg.dump_dir {
            std::fs::create_dir_all(dir)?;
            write_jsonl(&dir.join(format!("{role}_iter{iteration}.jsonl")), &pseudo)?;
        }
        if let Some(min) = cfg.min_confidence {
            pseudo.retain(|p| p.confidence >= min);
        }
        pseudo.retain(|p| !p.pseudo_label.trim().is_empty());
        let mean_confidence = (!pseudo.is_empty()).then(|| pseudo.iter().map(|p| p.confidence).sum::<f64>() / pseudo.len() as f64);
        let mut records = gold.clone();
        for p in &pseudo {
            records.push(pseudo_record(p, role, fmt, lambda)?);
        }
        let mut student = factory.create(role, iteration_seed(cfg.train.seed, role, iteration))?;
        let history = backend::train(student.as_mut(), &records, &val_records, &train_cfg(iteration)).map_err(|e| {
            log::error!("{role} iteration {iteration} failed; best model is from iteration {best_iteration}");
            e
        })?;
        let score = selection_score(student.as_ref(), validation, fmt, cfg.selection_metric, cfg.max_generation_len)?;
        let accepted = score > best_score;
        log::info!(
            "{role} iteration {iteration}: {} {score:.4} ({})",
            cfg.selection_metric.name(),
            if accepted { "promoted" } else { "kept teacher" }
        );
        iterations.push(IterationRecord {
            iteration,
            metric: cfg.selection_metric,
            validation_metric: score,
            accepted,
            n_pseudo: pseudo.len(),
            mean_confidence,
            history,
        });
        if accepted {
            best = student;
            best_score = score;
            best_iteration = iteration;
            best_pseudo = pseudo;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.iteration_patience {
                break;
            }
        }
    }
    Ok(SelfTrainResult {
        best,
        best_iteration,
        iterations,
        best_pseudo_labels: best_pseudo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Responder, ScriptedFactory, ScriptedModel};

    fn fmt() -> PromptFormat {
        PromptFormat::default()
    }

    #[test]
    fn constant_predictor_pseudo_labels() {
        let m = ScriptedModel::new(Role::Predictor, Responder::Constant("A".into()));
        let unlabeled: Vec<Example> = (0..10).map(|i| Example::unlabeled(format!("x{i}"))).collect();
        let out = pseudo_label(&m, &unlabeled, &fmt(), None, 1, 8).unwrap();
        assert_eq!(out.len(), 10);
        assert!(out.iter().all(|p| p.pseudo_label == "A" && p.confidence == 1.0));
        assert!(pseudo_label(&m, &[], &fmt(), None, 1, 8).unwrap().is_empty());
    }

    #[test]
    fn rationalizer_requires_predictor_labels() {
        let m = ScriptedModel::new(Role::Rationalizer, Responder::Constant("because".into()));
        let unlabeled = vec![Example::unlabeled("x0"), Example::unlabeled("x1")];
        let mut labels = HashMap::new();
        labels.insert("x0".to_string(), "A".to_string());
        match pseudo_label(&m, &unlabeled, &fmt(), Some(&labels), 1, 8) {
            Err(Error::MissingPredictorLabels { inputs }) => assert_eq!(inputs, vec!["x1".to_string()]),
            other => panic!("unexpected {:?}", other.map(|v| v.len())),
        }
        labels.insert("x1".to_string(), "B".to_string());
        let out = pseudo_label(&m, &unlabeled, &fmt(), Some(&labels), 1, 8).unwrap();
        assert_eq!(out[1].pseudo_label, "B");
        assert_eq!(out[1].pseudo_explanation, "because");
    }

    #[test]
    fn joint_gold_record_carries_token_weights() {
        let ex = Example::new("x", "two words", "a b c");
        let r = gold_record(&ex, Role::Joint, &fmt(), 0.8).unwrap();
        let w = r.token_weights.unwrap();
        // label (2) | "explanation", ":", a, b, c | eos
        assert_eq!(w.len(), 2 + 5 + 1);
        assert_eq!(&w[..2], &[0.8, 0.8]);
        assert!(w[2..].iter().all(|&x| (x - 0.2).abs() < 1e-12));
    }

    /// A factory whose students answer the validation set correctly for the
    /// first `good` iterations' worth of inputs, so validation accuracy is
    /// scripted per instance.
    fn scripted_accuracy_factory(accuracies: Vec<usize>) -> ScriptedFactory {
        ScriptedFactory::new(move |role, instance, _| {
            let correct = accuracies[instance.min(accuracies.len() - 1)];
            let fmt = PromptFormat::default();
            let mut table = HashMap::new();
            for i in 0..10 {
                let answer = if i < correct { "A" } else { "B" };
                table.insert(fmt.predictor_input(&format!("v{i}")), answer.to_string());
            }
            ScriptedModel::new(
                role,
                Responder::Table {
                    table,
                    default: "A".into(),
                },
            )
        })
    }

    #[test]
    fn loop_stops_after_patience_and_returns_best() {
        // Validation accuracy: teacher 0.3, then 0.5, 0.7, then plateau.
        let factory = scripted_accuracy_factory(vec![3, 5, 7, 7, 7, 7]);
        let labeled = vec![Example::new("l0", "A", "")];
        let unlabeled: Vec<Example> = (0..4).map(|i| Example::unlabeled(format!("u{i}"))).collect();
        let validation: Vec<Example> = (0..10).map(|i| Example::new(format!("v{i}"), "A", "")).collect();
        let cfg = SelfTrainConfig {
            max_iterations: 10,
            ..SelfTrainConfig::for_role(Role::Predictor)
        };
        let r = self_train(&factory, &labeled, &unlabeled, &validation, Role::Predictor, &fmt(), None, &cfg).unwrap();
        assert_eq!(r.iterations.len(), 1 + 2 + cfg.iteration_patience);
        assert_eq!(r.best_iteration, 2);
        assert!((r.best_metric() - 0.7).abs() < 1e-12);
        assert!(r.best_metric() >= r.few_shot_metric());
        let creates = factory.events.events().iter().filter(|e| e.starts_with("create")).count();
        assert_eq!(creates, 4);
    }

    #[test]
    fn single_iteration_is_the_few_shot_model() {
        let factory = scripted_accuracy_factory(vec![4, 9]);
        let labeled = vec![Example::new("l0", "A", "")];
        let unlabeled = vec![Example::unlabeled("u0")];
        let validation: Vec<Example> = (0..10).map(|i| Example::new(format!("v{i}"), "A", "")).collect();
        let cfg = SelfTrainConfig {
            max_iterations: 1,
            ..SelfTrainConfig::for_role(Role::Predictor)
        };
        let r = self_train(&factory, &labeled, &unlabeled, &validation, Role::Predictor, &fmt(), None, &cfg).unwrap();
        assert_eq!(r.iterations.len(), 1);
        assert_eq!(r.best_iteration, 0);
        assert!((r.best_metric() - 0.4).abs() < 1e-12);
    }
}
