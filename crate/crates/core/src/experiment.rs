//! Experiment configuration and the five training regimes, run over several
//! seeds and averaged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{self, config_hash, ModelFactory, Role, Seq2Seq, TrainConfig, TransformerConfig, TransformerFactory};
use crate::corpus::{class_counts, load_dataset_with_vocabulary, sample_few_shot, write_jsonl, DatasetSplit, Example, PromptFormat};
use crate::dualteacher::{digest_examples, run_dual_teacher, DualTeacherConfig};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, TraceRecord};
use crate::losses::LossConfig;
use crate::selftrain::{gold_records, self_train, selection_score, SelectionMetric, SelfTrainConfig};
use crate::text::{Vocab, MASK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Joint model trained on the few-shot labeled set only.
    FewShot,
    /// Joint self-training with unweighted pseudo-labels.
    VanillaSt,
    /// Joint self-training with confidence-weighted pseudo-labels.
    ConfidenceSt,
    /// Predictor and rationalizer teachers distilled into a joint student.
    DualTeacher,
    /// Joint model trained on every labeled training example.
    FullySupervised,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::FewShot, Mode::VanillaSt, Mode::ConfidenceSt, Mode::DualTeacher, Mode::FullySupervised];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FewShot => "few_shot",
            Mode::VanillaSt => "vanilla_st",
            Mode::ConfidenceSt => "confidence_st",
            Mode::DualTeacher => "dual_teacher",
            Mode::FullySupervised => "fully_supervised",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Flat experiment configuration; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub mode: Mode,
    pub k_per_class: usize,
    pub lambda_token: f64,
    pub lambda_mlr: f64,
    pub label_smoothing: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub max_iterations: usize,
    pub iteration_patience: usize,
    pub labeled_batch_size: usize,
    pub pseudo_batch_size: usize,
    /// Number of runs; seed `i` is `base_seed + i`.
    pub seeds: usize,
    pub base_seed: u64,
    pub parallel_seeds: bool,
    pub max_generation_len: usize,
    pub min_confidence: Option<f64>,
    pub association: bool,
    pub simulatability: bool,
    /// Fixed label vocabulary; inferred from the data when empty.
    pub label_vocabulary: Vec<String>,

    pub task_prompt: String,
    pub field_markers: Vec<String>,
    pub label_marker: String,
    pub separator: String,
    pub mask_token: String,

    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fmt = PromptFormat::default();
        let model = TransformerConfig::default();
        let loss = LossConfig::default();
        Self {
            dataset: PathBuf::new(),
            output_dir: None,
            mode: Mode::DualTeacher,
            k_per_class: 100,
            lambda_token: loss.lambda_token,
            lambda_mlr: loss.lambda_mlr,
            label_smoothing: loss.label_smoothing,
            patience: 5,
            max_epochs: 100,
            max_iterations: 5,
            iteration_patience: 1,
            labeled_batch_size: 8,
            pseudo_batch_size: 16,
            seeds: 3,
            base_seed: 0,
            parallel_seeds: false,
            max_generation_len: 64,
            min_confidence: None,
            association: true,
            simulatability: false,
            label_vocabulary: Vec::new(),
            task_prompt: fmt.task_prompt,
            field_markers: fmt.field_markers,
            label_marker: fmt.label_marker,
            separator: fmt.separator_token_text,
            mask_token: MASK.to_string(),
            d_model: model.d_model,
            heads: model.heads,
            d_ff: model.d_ff,
            encoder_layers: model.encoder_layers,
            decoder_layers: model.decoder_layers,
            learning_rate: model.learning_rate,
            weight_decay: model.weight_decay,
            grad_clip: model.grad_clip,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss(true).validate()?;
        self.transformer().validate()?;
        let positive = [
            ("k_per_class", self.k_per_class),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("max_iterations", self.max_iterations),
            ("iteration_patience", self.iteration_patience),
            ("labeled_batch_size", self.labeled_batch_size),
            ("pseudo_batch_size", self.pseudo_batch_size),
            ("seeds", self.seeds),
            ("max_generation_len", self.max_generation_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(c) = self.min_confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("min_confidence must be in [0, 1], got {c}")));
            }
        }
        self.prompt_format().validate(&self.label_vocabulary)
    }

    pub fn prompt_format(&self) -> PromptFormat {
        PromptFormat {
            task_prompt: self.task_prompt.clone(),
            field_markers: self.field_markers.clone(),
            label_marker: self.label_marker.clone(),
            separator_token_text: self.separator.clone(),
            mask_token_text: self.mask_token.clone(),
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ..TransformerConfig::default()
        }
    }

    pub fn loss(&self, confidence_weighting: bool) -> LossConfig {
        LossConfig {
            lambda_token: self.lambda_token,
            lambda_mlr: self.lambda_mlr,
            label_smoothing: self.label_smoothing,
            confidence_weighting,
        }
    }

    pub fn train_config(&self, seed: u64, confidence_weighting: bool) -> TrainConfig {
        TrainConfig {
            loss: self.loss(confidence_weighting),
            patience: self.patience,
            max_epochs: self.max_epochs,
            labeled_batch_size: self.labeled_batch_size,
            pseudo_batch_size: self.pseudo_batch_size,
            seed,
        }
    }

    pub fn self_train_config(&self, role: Role, seed: u64, confidence_weighting: bool) -> SelfTrainConfig {
        SelfTrainConfig {
            max_iterations: self.max_iterations,
            selection_metric: SelectionMetric::for_role(role),
            iteration_patience: self.iteration_patience,
            train: self.train_config(seed, confidence_weighting),
            max_generation_len: self.max_generation_len,
            min_confidence: self.min_confidence,
            dump_dir: None,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_value(self).expect("config serializes"))
    }
}

/// Few-shot split for one seed: `(D_l, D_u)`.
pub fn split_for_seed(split: &DatasetSplit, mode: Mode, k_per_class: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    let (d_l, mut d_u) = if mode == Mode::FullySupervised {
        (split.labeled.clone(), Vec::new())
    } else {
        sample_few_shot(&split.labeled, k_per_class, seed)?
    };
    if mode != Mode::FullySupervised {
        d_u.extend(split.unlabeled.iter().cloned());
    }
    Ok((d_l, d_u))
}

/// Vocabulary over every training-side text and the prompt strings.
pub fn build_vocab(split: &DatasetSplit, fmt: &PromptFormat) -> Vocab {
    let mut texts: Vec<String> = vec![
        fmt.task_prompt.clone(),
        fmt.field_markers.join(" "),
        fmt.label_marker.clone(),
        fmt.separator_token_text.clone(),
        fmt.mask_token_text.clone(),
    ];
    texts.extend(split.label_vocabulary.iter().cloned());
    for e in split.labeled.iter().chain(&split.unlabeled).chain(&split.validation) {
        texts.push(e.input_text.clone());
        texts.push(e.label.clone());
        texts.push(e.explanation.clone());
        texts.extend(e.choices.iter().cloned());
    }
    Vocab::build(texts.iter().map(String::as_str))
}

/// Everything one seed produced.
pub struct SeedOutcome {
    pub seed: u64,
    pub report: MetricReport,
    /// Extra per-role test reports (predictor, rationalizer) for the
    /// dual-teacher mode.
    pub role_reports: BTreeMap<String, MetricReport>,
    pub trace: Vec<TraceRecord>,
    pub d_final_size: Option<usize>,
    pub joint: Box<dyn Seq2Seq>,
    pub predictor: Option<Box<dyn Seq2Seq>>,
    pub rationalizer: Option<Box<dyn Seq2Seq>>,
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> Option<PathBuf> {
    cfg.output_dir.as_ref().map(|d| d.join(format!("seed_{seed}")))
}

/// Trains and evaluates one seed of `cfg.mode` on a loaded split.
pub fn run_seed(cfg: &ExperimentConfig, split: &DatasetSplit, factory: &dyn ModelFactory, seed: u64) -> Result<SeedOutcome> {
    let fmt = cfg.prompt_format();
    let (d_l, d_u) = split_for_seed(split, cfg.mode, cfg.k_per_class, seed)?;
    log::info!("seed {seed}: mode {}, |D_l| = {}, |D_u| = {}", cfg.mode, d_l.len(), d_u.len());
    let out_dir = seed_dir(cfg, seed);
    let mut trace = Vec::new();
    let mut role_reports = BTreeMap::new();
    let (joint, predictor, rationalizer, d_final_size) = match cfg.mode {
        Mode::FewShot | Mode::FullySupervised => {
            let train_cfg = cfg.train_config(seed, false);
            let records = gold_records(&d_l, Role::Joint, &fmt, cfg.lambda_token)?;
            let val = gold_records(&split.validation, Role::Joint, &fmt, cfg.lambda_token)?;
            let mut joint = factory.create(Role::Joint, seed.wrapping_mul(1_000_003).wrapping_add(37_000))?;
            backend::train(joint.as_mut(), &records, &val, &train_cfg)?;
            let score = selection_score(joint.as_ref(), &split.validation, &fmt, SelectionMetric::Accuracy, cfg.max_generation_len)?;
            trace.push(TraceRecord {
                seed,
                stage: "joint".into(),
                iteration: 0,
                metric: "accuracy".into(),
                value: score,
            });
            (joint, None, None, Some(records.len()))
        }
        Mode::VanillaSt | Mode::ConfidenceSt => {
            let mut st = cfg.self_train_config(Role::Joint, seed, cfg.mode == Mode::ConfidenceSt);
            st.dump_dir = out_dir.as_ref().map(|d| d.join("pseudo_labels"));
            let r = self_train(factory, &d_l, &d_u, &split.validation, Role::Joint, &fmt, None, &st)?;
            trace.extend(r.trace(seed, "joint"));
            (r.best, None, None, None)
        }
        Mode::DualTeacher => {
            let mut dt = DualTeacherConfig {
                predictor: cfg.self_train_config(Role::Predictor, seed, true),
                rationalizer: cfg.self_train_config(Role::Rationalizer, seed, true),
                joint: cfg.train_config(seed, true),
                max_generation_len: cfg.max_generation_len,
                artifact_dir: out_dir.as_ref().map(|d| d.join("stages")),
            };
            if let Some(d) = &out_dir {
                dt.predictor.dump_dir = Some(d.join("pseudo_labels"));
                dt.rationalizer.dump_dir = Some(d.join("pseudo_labels"));
            }
            let r = run_dual_teacher(factory, &d_l, &d_u, &split.validation, &fmt, &dt)?;
            for (stage, iters) in [("predictor", &r.predictor_trace), ("rationalizer", &r.rationalizer_trace)] {
                trace.extend(iters.iter().map(|it| TraceRecord {
                    seed,
                    stage: stage.into(),
                    iteration: it.iteration,
                    metric: it.metric.name().into(),
                    value: it.validation_metric,
                }));
            }
            let (mut p_report, _) = eval::evaluate(r.predictor.as_ref(), &split.test, &fmt, cfg.max_generation_len)?;
            p_report.run_seeds = vec![seed];
            role_reports.insert("predictor".to_string(), p_report);
            let (mut r_report, _) = eval::evaluate(r.rationalizer.as_ref(), &split.test, &fmt, cfg.max_generation_len)?;
            if cfg.association {
                r_report.association_rate =
                    Some(eval::label_explanation_association(r.rationalizer.as_ref(), &split.test, &split.label_vocabulary, &fmt, cfg.max_generation_len)?.rate);
            }
            r_report.run_seeds = vec![seed];
            role_reports.insert("rationalizer".to_string(), r_report);
            (r.joint, Some(r.predictor), Some(r.rationalizer), Some(r.d_final_size))
        }
    };

    let (mut report, outputs) = eval::evaluate(joint.as_ref(), &split.test, &fmt, cfg.max_generation_len)?;
    report.run_seeds = vec![seed];
    if cfg.association {
        report.association_rate =
            Some(eval::label_explanation_association(joint.as_ref(), &split.test, &split.label_vocabulary, &fmt, cfg.max_generation_len)?.rate);
    }
    if cfg.simulatability {
        // Simulators see the same labeled budget as the model under test.
        let (control, treatment) = eval::train_simulators(factory, &d_l, &split.validation, &fmt, &cfg.train_config(seed, false))?;
        let sim = eval::simulatability(control.as_ref(), treatment.as_ref(), &outputs, &fmt, cfg.max_generation_len)?;
        report.simulatability = Some(sim.phi_mean);
    }
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir)?;
        joint.save(&dir.join("joint_model"))?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        write_jsonl(&dir.join("trace.jsonl"), &trace)?;
        write_jsonl(&dir.join("test_outputs.jsonl"), &outputs)?;
    }
    Ok(SeedOutcome {
        seed,
        report,
        role_reports,
        trace,
        d_final_size,
        joint,
        predictor,
        rationalizer,
    })
}

/// Written next to the results of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub data_digests: BTreeMap<String, String>,
    pub vocabulary_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub k_per_class: usize,
    pub mean: MetricReport,
    pub per_seed: Vec<MetricReport>,
    pub role_means: BTreeMap<String, MetricReport>,
    pub trace: Vec<TraceRecord>,
}

pub const REPORT_FILE: &str = "report.json";

pub fn load_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let vocabulary = (!cfg.label_vocabulary.is_empty()).then(|| cfg.label_vocabulary.clone());
    load_dataset_with_vocabulary(&cfg.dataset, &cfg.prompt_format(), vocabulary)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Reads the report written by a finished run.
pub fn load_report(run_dir: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(run_dir.join(REPORT_FILE))?)?)
}

pub fn load_manifest(run_dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(run_dir.join(MANIFEST_FILE))?)?)
}

/// Runs every seed of `cfg` on an already loaded split.
pub fn run_on_split(cfg: &ExperimentConfig, split: &DatasetSplit) -> Result<(ExperimentReport, Vec<SeedOutcome>)> {
    cfg.validate()?;
    let fmt = cfg.prompt_format();
    fmt.validate(&split.label_vocabulary)?;
    let vocab = build_vocab(split, &fmt);
    let factory = TransformerFactory::new(vocab, cfg.transformer())?;
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest {
            config: cfg.clone(),
            config_hash: cfg.hash(),
            data_digests: [
                ("labeled".to_string(), digest_examples(&split.labeled)?),
                ("unlabeled".to_string(), digest_examples(&split.unlabeled)?),
                ("validation".to_string(), digest_examples(&split.validation)?),
                ("test".to_string(), digest_examples(&split.test)?),
            ]
            .into(),
            vocabulary_size: factory.vocab.len(),
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    }
    let seeds = cfg.seed_list();
    let outcomes: Vec<SeedOutcome> = if cfg.parallel_seeds {
        seeds.par_iter().map(|&s| run_seed(cfg, split, &factory, s)).collect::<Result<_>>()?
    } else {
        seeds.iter().map(|&s| run_seed(cfg, split, &factory, s)).collect::<Result<_>>()?
    };
    let per_seed: Vec<MetricReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let mut role_means = BTreeMap::new();
    for role in ["predictor", "rationalizer"] {
        let reports: Vec<MetricReport> = outcomes.iter().filter_map(|o| o.role_reports.get(role).cloned()).collect();
        if !reports.is_empty() {
            role_means.insert(role.to_string(), eval::aggregate(&reports)?);
        }
    }
    let report = ExperimentReport {
        mode: cfg.mode,
        k_per_class: cfg.k_per_class,
        mean: eval::aggregate(&per_seed)?,
        per_seed,
        role_means,
        trace: outcomes.iter().flat_map(|o| o.trace.iter().cloned()).collect(),
    };
    if let Some(dir) = &cfg.output_dir {
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(dir.join("report.txt"), render_report(&report))?;
        write_jsonl(&dir.join("trace.jsonl"), &report.trace)?;
    }
    Ok((report, outcomes))
}

/// Loads the dataset and runs every seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let split = load_split(cfg)?;
    Ok(run_on_split(cfg, &split)?.0)
}

pub fn render_report(report: &ExperimentReport) -> String {
    let mut rows = vec![(format!("{} (mean)", report.mode), report.mean.clone())];
    for r in &report.per_seed {
        rows.push((format!("  seed {}", r.run_seeds.first().copied().unwrap_or_default()), r.clone()));
    }
    for (role, r) in &report.role_means {
        rows.push((format!("{role} teacher"), r.clone()));
    }
    eval::render_table(&rows)
}

/// One row per labeled-set size; sizes the data cannot supply are skipped.
pub fn sweep(cfg: &ExperimentConfig, k_values: &[usize]) -> Result<Vec<(usize, ExperimentReport)>> {
    cfg.validate()?;
    let split = load_split(cfg)?;
    sweep_on_split(cfg, &split, k_values)
}

pub fn sweep_on_split(cfg: &ExperimentConfig, split: &DatasetSplit, k_values: &[usize]) -> Result<Vec<(usize, ExperimentReport)>> {
    let supply = class_counts(&split.labeled).values().copied().min().unwrap_or(0);
    let mut rows = Vec::new();
    for &k in k_values {
        if k > supply {
            log::warn!("skipping k = {k}: the smallest class has {supply} labeled examples");
            continue;
        }
        let mut row_cfg = cfg.clone();
        row_cfg.k_per_class = k;
        row_cfg.output_dir = cfg.output_dir.as_ref().map(|d| d.join(format!("k_{k}")));
        rows.push((k, run_on_split(&row_cfg, split)?.0));
    }
    if let Some(dir) = &cfg.output_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("sweep.txt"), render_sweep(&rows))?;
        let json: Vec<serde_json::Value> = rows.iter().map(|(k, r)| serde_json::json!({"k_per_class": k, "mean": r.mean})).collect();
        std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(rows)
}

pub fn render_sweep(rows: &[(usize, ExperimentReport)]) -> String {
    let table: Vec<(String, MetricReport)> = rows.iter().map(|(k, r)| (format!("k={k}"), r.mean.clone())).collect();
    eval::render_table(&table)
}
