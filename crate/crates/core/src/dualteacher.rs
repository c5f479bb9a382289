//! Predictor and rationalizer teachers, each self-trained, distilled into one
//! joint label-and-explanation student.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{self, config_hash, ModelFactory, Role, Seq2Seq, TrainConfig, TrainHistory, TrainRecord};
use crate::corpus::{write_jsonl, Example, PromptFormat};
use crate::error::{Error, Result};
use crate::selftrain::{gold_records, pseudo_label, pseudo_record, self_train, IterationRecord, PseudoLabeledExample, SelfTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "predictor-ST")]
    PredictorSelfTrain,
    #[serde(rename = "predict-pseudo")]
    PredictPseudo,
    #[serde(rename = "rationalizer-ST")]
    RationalizerSelfTrain,
    #[serde(rename = "rationalize-pseudo")]
    RationalizePseudo,
    #[serde(rename = "joint-train")]
    JointTrain,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PredictorSelfTrain => "predictor-ST",
            Stage::PredictPseudo => "predict-pseudo",
            Stage::RationalizerSelfTrain => "rationalizer-ST",
            Stage::RationalizePseudo => "rationalize-pseudo",
            Stage::JointTrain => "joint-train",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTeacherConfig {
    pub predictor: SelfTrainConfig,
    pub rationalizer: SelfTrainConfig,
    pub joint: TrainConfig,
    pub max_generation_len: usize,
    /// Checkpoints, pseudo-labels and the stage manifest are written here.
    pub artifact_dir: Option<PathBuf>,
}

impl DualTeacherConfig {
    pub fn new(seed: u64) -> Self {
        let mut predictor = SelfTrainConfig::for_role(Role::Predictor);
        predictor.train.seed = seed;
        let mut rationalizer = SelfTrainConfig::for_role(Role::Rationalizer);
        rationalizer.train.seed = seed;
        Self {
            predictor,
            rationalizer,
            joint: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            max_generation_len: 64,
            artifact_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: String,
    pub checkpoint: Option<String>,
    pub artifact: Option<String>,
    pub metrics: serde_json::Value,
}

/// Record of a dual-teacher run, rewritten after every completed stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub config_hash: String,
    pub data_digests: BTreeMap<String, String>,
    pub stages: Vec<StageEntry>,
}

pub const STAGE_MANIFEST_FILE: &str = "stages.json";

impl StageManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(dir.join(STAGE_MANIFEST_FILE))?)?)
    }
}

pub fn digest_examples(examples: &[Example]) -> Result<String> {
    let mut h = Sha256::new();
    for e in examples {
        h.update(serde_json::to_vec(e)?);
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

pub struct DualTeacherResult {
    pub predictor: Box<dyn Seq2Seq>,
    pub rationalizer: Box<dyn Seq2Seq>,
    pub joint: Box<dyn Seq2Seq>,
    pub d_final_size: usize,
    /// D_pl with joint confidences.
    pub pseudo_labels: Vec<PseudoLabeledExample>,
    pub predictor_trace: Vec<IterationRecord>,
    pub rationalizer_trace: Vec<IterationRecord>,
    pub joint_history: TrainHistory,
    pub events: Vec<Stage>,
}

/// Pairs each predictor pseudo-label with the rationalizer's explanation for
/// it; the joint confidence is the product of the two teachers' confidences.
/// Pairs missing a label or an explanation are dropped.
pub fn combine_pseudo_labels(predicted: &[PseudoLabeledExample], rationalized: &[PseudoLabeledExample]) -> Vec<PseudoLabeledExample> {
    let by_input: HashMap<&str, &PseudoLabeledExample> = predicted.iter().map(|p| (p.input_text.as_str(), p)).collect();
    rationalized
        .iter()
        .filter_map(|r| {
            let p = by_input.get(r.input_text.as_str())?;
            if p.pseudo_label.trim().is_empty() || r.pseudo_explanation.trim().is_empty() {
                return None;
            }
            Some(PseudoLabeledExample {
                input_text: r.input_text.clone(),
                pseudo_label: p.pseudo_label.clone(),
                pseudo_explanation: r.pseudo_explanation.clone(),
                confidence: p.confidence * r.confidence,
                source_iteration: r.source_iteration,
            })
        })
        .collect()
}

/// `D_final = D_pl ∪ D_l` as joint training records. Pseudo-labels without
/// a label or explanation are left out.
pub fn build_joint_dataset(d_pl: &[PseudoLabeledExample], d_l: &[Example], fmt: &PromptFormat, lambda_token: f64) -> Result<Vec<TrainRecord>> {
    let mut mix = gold_records(d_l, Role::Joint, fmt, lambda_token)?;
    for p in d_pl {
        if p.pseudo_label.trim().is_empty() || p.pseudo_explanation.trim().is_empty() {
            continue;
        }
        mix.push(pseudo_record(p, Role::Joint, fmt, lambda_token)?);
    }
    Ok(mix)
}

/// Trains one joint student on the mix with early stopping.
pub fn train_joint(factory: &dyn ModelFactory, mix: &[TrainRecord], validation: &[Example], fmt: &PromptFormat, cfg: &TrainConfig) -> Result<(Box<dyn Seq2Seq>, TrainHistory)> {
    let val = gold_records(validation, Role::Joint, fmt, cfg.loss.lambda_token)?;
    let mut joint = factory.create(Role::Joint, cfg.seed.wrapping_mul(1_000_003).wrapping_add(37_999))?;
    let history = backend::train(joint.as_mut(), mix, &val, cfg)?;
    Ok((joint, history))
}

struct Artifacts {
    dir: Option<PathBuf>,
    manifest: StageManifest,
}

impl Artifacts {
    fn record(&mut self, stage: Stage, model: Option<&dyn Seq2Seq>, pseudo: Option<&[PseudoLabeledExample]>, metrics: serde_json::Value) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let mut entry = StageEntry {
            stage: stage.to_string(),
            metrics,
            ..Default::default()
        };
        if let Some(m) = model {
            let name = format!("{}_model", m.role());
            m.save(&dir.join(&name))?;
            entry.checkpoint = Some(name);
        }
        if let Some(p) = pseudo {
            let name = format!("{stage}.jsonl");
            write_jsonl(&dir.join(&name), p)?;
            entry.artifact = Some(name);
        }
        self.manifest.stages.push(entry);
        std::fs::write(dir.join(STAGE_MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}

fn stage_err(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.as_str(),
        source: Box::new(e),
    }
}

fn trace_json(trace: &[IterationRecord]) -> serde_json::Value {
    serde_json::json!(trace
        .iter()
        .map(|r| serde_json::json!({"iteration": r.iteration, r.metric.name(): r.validation_metric, "accepted": r.accepted}))
        .collect::<Vec<_>>())
}

/// Runs predictor self-training, task pseudo-labeling, rationalizer
/// self-training on predictor labels, rationale pseudo-labeling and joint
/// distillation, strictly in that order.
pub fn run_dual_teacher(
    factory: &dyn ModelFactory,
    d_l: &[Example],
    d_u: &[Example],
    d_val: &[Example],
    fmt: &PromptFormat,
    cfg: &DualTeacherConfig,
) -> Result<DualTeacherResult> {
    if d_l.iter().any(|e| !e.is_labeled()) || d_val.iter().any(|e| !e.is_labeled()) {
        return Err(Error::contract("labeled and validation examples need labels"));
    }
    let mut art = Artifacts {
        dir: cfg.artifact_dir.clone(),
        manifest: StageManifest {
            config_hash: config_hash(&serde_json::to_value(cfg)?),
            data_digests: [
                ("labeled".to_string(), digest_examples(d_l)?),
                ("unlabeled".to_string(), digest_examples(d_u)?),
                ("validation".to_string(), digest_examples(d_val)?),
            ]
            .into(),
            stages: Vec::new(),
        },
    };
    if let Some(dir) = &cfg.artifact_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut events = Vec::new();

    let stage = Stage::PredictorSelfTrain;
    let pred = self_train(factory, d_l, d_u, d_val, Role::Predictor, fmt, None, &cfg.predictor).map_err(stage_err(stage))?;
    events.push(stage);
    art.record(stage, Some(pred.best.as_ref()), None, trace_json(&pred.iterations)).map_err(stage_err(stage))?;

    let stage = Stage::PredictPseudo;
    let predicted = pseudo_label(pred.best.as_ref(), d_u, fmt, None, pred.best_iteration, cfg.max_generation_len).map_err(stage_err(stage))?;
    events.push(stage);
    let labeled_pool: Vec<&PseudoLabeledExample> = predicted.iter().filter(|p| !p.pseudo_label.trim().is_empty()).collect();
    let predictor_labels: HashMap<String, String> =
        labeled_pool.iter().map(|p| (p.input_text.clone(), p.pseudo_label.clone())).collect();
    let pool: Vec<Example> = d_u.iter().filter(|e| predictor_labels.contains_key(&e.input_text)).cloned().collect();
    art.record(stage, None, Some(&predicted), serde_json::json!({"pseudo_labels": predicted.len(), "usable": pool.len()}))
        .map_err(stage_err(stage))?;

    let stage = Stage::RationalizerSelfTrain;
    let rat = self_train(factory, d_l, &pool, d_val, Role::Rationalizer, fmt, Some(&predictor_labels), &cfg.rationalizer)
        .map_err(stage_err(stage))?;
    events.push(stage);
    art.record(stage, Some(rat.best.as_ref()), None, trace_json(&rat.iterations)).map_err(stage_err(stage))?;

    let stage = Stage::RationalizePseudo;
    let rationalized = pseudo_label(rat.best.as_ref(), &pool, fmt, Some(&predictor_labels), rat.best_iteration, cfg.max_generation_len)
        .map_err(stage_err(stage))?;
    events.push(stage);
    let d_pl = combine_pseudo_labels(&predicted, &rationalized);
    art.record(stage, None, Some(&d_pl), serde_json::json!({"pseudo_labels": d_pl.len()})).map_err(stage_err(stage))?;

    let stage = Stage::JointTrain;
    let mix = build_joint_dataset(&d_pl, d_l, fmt, cfg.joint.loss.lambda_token).map_err(stage_err(stage))?;
    let d_final_size = mix.len();
    let (joint, joint_history) = train_joint(factory, &mix, d_val, fmt, &cfg.joint).map_err(stage_err(stage))?;
    events.push(stage);
    art.record(
        stage,
        Some(joint.as_ref()),
        None,
        serde_json::json!({"d_final": d_final_size, "best_epoch": joint_history.best_epoch, "best_validation_loss": joint_history.best_validation_loss}),
    )
    .map_err(stage_err(stage))?;
    log::info!("dual teacher: |D_final| = {d_final_size}");

    Ok(DualTeacherResult {
        predictor: pred.best,
        rationalizer: rat.best,
        joint,
        d_final_size,
        pseudo_labels: d_pl,
        predictor_trace: pred.iterations,
        rationalizer_trace: rat.iterations,
        joint_history,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_joint_output;

    fn pl(input: &str, label: &str, expl: &str, conf: f64) -> PseudoLabeledExample {
        PseudoLabeledExample {
            input_text: input.into(),
            pseudo_label: label.into(),
            pseudo_explanation: expl.into(),
            confidence: conf,
            source_iteration: 1,
        }
    }

    #[test]
    fn product_confidence() {
        let joint = combine_pseudo_labels(&[pl("x", "A", "", 0.8)], &[pl("x", "A", "because", 0.5)]);
        assert_eq!(joint.len(), 1);
        assert!((joint[0].confidence - 0.4).abs() < 1e-12);
        assert_eq!(joint[0].pseudo_explanation, "because");
    }

    #[test]
    fn empty_pseudo_set_gives_gold_mix() {
        let fmt = PromptFormat::default();
        let d_l = vec![Example::new("a", "A", "x y"), Example::new("b", "B", "z")];
        let mix = build_joint_dataset(&[], &d_l, &fmt, 0.8).unwrap();
        assert_eq!(mix, gold_records(&d_l, Role::Joint, &fmt, 0.8).unwrap());
    }

    #[test]
    fn explanation_free_pseudo_records_are_dropped() {
        let fmt = PromptFormat::default();
        let d_pl = vec![pl("u0", "A", "reason", 0.3), pl("u1", "B", "", 0.9)];
        let mix = build_joint_dataset(&d_pl, &[Example::new("a", "A", "x")], &fmt, 0.8).unwrap();
        assert_eq!(mix.len(), 2);
        for r in &mix {
            assert!(parse_joint_output(&r.target, &fmt).well_formed);
        }
    }
}
