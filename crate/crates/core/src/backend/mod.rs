//! The seq2seq model contract used by every trainer and metric, a generic
//! early-stopping training driver, and two implementations: a scripted stub
//! for orchestration tests and a small trainable encoder-decoder transformer.

mod checkpoint;
mod stub;
mod transformer;

use std::any::Any;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::corpus::Role;
use crate::error::{Error, Result};
use crate::losses::{normalize_confidence_weights, LossConfig};
use crate::text::{token_count, Vocab};

pub use checkpoint::{config_hash, load_checkpoint, CheckpointManifest};
pub use stub::{EventLog, Responder, ScriptedFactory, ScriptedModel, StubDistribution};
pub use transformer::{LossTerms, TinyTransformer, TransformerConfig, TransformerFactory};

/// Probability vector over the vocabulary at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution(Vec<f64>);

impl StepDistribution {
    pub const TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::contract("step distribution must be non-empty and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::contract(format!("step distribution sums to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn entropy(&self) -> f64 {
        crate::losses::entropy(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Decoded text without the EOS token.
    pub text: String,
    pub sequence_log_prob: f64,
    /// One entry per emitted token, plus the EOS position when EOS was emitted.
    pub token_log_probs: Vec<f64>,
    pub ended_with_eos: bool,
}

impl Generation {
    pub fn new(text: String, token_log_probs: Vec<f64>, ended_with_eos: bool) -> Self {
        Self {
            text,
            sequence_log_prob: token_log_probs.iter().sum(),
            token_log_probs,
            ended_with_eos,
        }
    }

    pub fn confidence(&self) -> f64 {
        crate::losses::sequence_confidence(&self.token_log_probs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RecordWeight {
    /// Gold supervision with a fixed example weight.
    Fixed(f64),
    /// Pseudo-label carrying its teacher confidence; normalized per batch.
    Confidence(f64),
}

/// One training pair with its loss weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub input: String,
    pub target: String,
    /// One weight per target token plus one for EOS; uniform when absent.
    pub token_weights: Option<Vec<f64>>,
    pub weight: RecordWeight,
    /// Label-masked input for the MLR term (rationalizer records only).
    pub mlr_input: Option<String>,
}

impl TrainRecord {
    pub fn gold(input: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            target: target.into(),
            token_weights: None,
            weight: RecordWeight::Fixed(1.0),
            mlr_input: None,
        }
    }

    pub fn target_positions(&self) -> usize {
        token_count(&self.target) + 1
    }

    pub fn token_weights_or_uniform(&self) -> Vec<f64> {
        self.token_weights.clone().unwrap_or_else(|| vec![1.0; self.target_positions()])
    }
}

/// A batch: indices into the record slice and their effective example weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Shuffles gold and pseudo records separately, chunks them with their own
/// batch sizes and interleaves the chunks in random order. Pseudo batches get
/// per-batch normalized confidence weights when `confidence_weighting` is on.
pub fn make_batches(
    records: &[TrainRecord],
    labeled_batch_size: usize,
    pseudo_batch_size: usize,
    confidence_weighting: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Batch>> {
    if labeled_batch_size == 0 || pseudo_batch_size == 0 {
        return Err(Error::contract("batch sizes must be positive"));
    }
    let (mut gold, mut pseudo): (Vec<usize>, Vec<usize>) =
        (0..records.len()).partition(|&i| matches!(records[i].weight, RecordWeight::Fixed(_)));
    gold.shuffle(rng);
    pseudo.shuffle(rng);
    let mut batches = Vec::new();
    for chunk in gold.chunks(labeled_batch_size) {
        let weights = chunk
            .iter()
            .map(|&i| match records[i].weight {
                RecordWeight::Fixed(w) => w,
                RecordWeight::Confidence(_) => unreachable!(),
            })
            .collect();
        batches.push(Batch { indices: chunk.to_vec(), weights });
    }
    for chunk in pseudo.chunks(pseudo_batch_size) {
        let weights = if confidence_weighting {
            let conf: Vec<f64> = chunk
                .iter()
                .map(|&i| match records[i].weight {
                    RecordWeight::Confidence(c) => c,
                    RecordWeight::Fixed(_) => unreachable!(),
                })
                .collect();
            normalize_confidence_weights(&conf)?
        } else {
            vec![1.0; chunk.len()]
        };
        batches.push(Batch { indices: chunk.to_vec(), weights });
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Opaque parameter copy used for best-checkpoint restoration.
pub struct Snapshot(pub Box<dyn Any + Send + Sync>);

/// A trainable sequence-to-sequence model.
///
/// Inference methods take `&self` and must be safe to call concurrently;
/// training mutates the model and is single-writer.
pub trait Seq2Seq: Send + Sync {
    fn role(&self) -> Role;

    fn vocab(&self) -> &Vocab;

    fn vocabulary_size(&self) -> usize {
        self.vocab().len()
    }

    fn mask_token_id(&self) -> u32 {
        Vocab::MASK_ID
    }

    fn eos_token_id(&self) -> u32 {
        Vocab::EOS_ID
    }

    /// One optimizer step; returns the weighted batch loss.
    fn train_step(&mut self, batch: &[&TrainRecord], example_weights: &[f64], loss: &LossConfig) -> Result<f64>;

    /// Mean token-weighted NLL over `records` (no smoothing, no MLR).
    fn validation_loss(&self, records: &[TrainRecord]) -> Result<f64>;

    fn snapshot(&self) -> Result<Snapshot>;

    fn restore(&mut self, snapshot: &Snapshot) -> Result<()>;

    /// Greedy decoding until EOS or `max_len` tokens.
    fn generate_greedy(&self, input: &str, max_len: usize) -> Result<Generation>;

    fn generate_batch(&self, inputs: &[String], max_len: usize) -> Result<Vec<Generation>> {
        inputs.iter().map(|i| self.generate_greedy(i, max_len)).collect()
    }

    /// Teacher-forced log-probabilities of each output token and of EOS.
    fn score_sequence(&self, input: &str, output: &str) -> Result<Vec<f64>>;

    /// Teacher-forced full distributions, one per output token plus EOS.
    fn step_distributions(&self, input: &str, forced_output: &str) -> Result<Vec<StepDistribution>>;

    /// Greedy continuation after a forced decoder prefix; excludes the prefix.
    fn continue_generation(&self, input: &str, decoder_prefix: &str, max_len: usize) -> Result<String>;

    /// Persists the model under `dir` with a manifest.
    fn save(&self, dir: &Path) -> Result<()>;
}

/// Creates freshly initialized models.
pub trait ModelFactory: Send + Sync {
    fn create(&self, role: Role, seed: u64) -> Result<Box<dyn Seq2Seq>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub patience: usize,
    pub max_epochs: usize,
    pub labeled_batch_size: usize,
    pub pseudo_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            patience: 5,
            max_epochs: 100,
            labeled_batch_size: 8,
            pseudo_batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

fn check_records(records: &[TrainRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::contract("no training records"));
    }
    let mut any_positive = false;
    for r in records {
        let w = match r.weight {
            RecordWeight::Fixed(w) | RecordWeight::Confidence(w) => w,
        };
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::contract(format!("invalid example weight {w}")));
        }
        any_positive |= w > 0.0;
        if let Some(tw) = &r.token_weights {
            if tw.len() != r.target_positions() {
                return Err(Error::contract(format!(
                    "{} token weights for target `{}` with {} positions",
                    tw.len(),
                    r.target,
                    r.target_positions()
                )));
            }
        }
    }
    if !any_positive {
        return Err(Error::contract("all example weights are zero"));
    }
    Ok(())
}

/// Trains `model` epoch by epoch, keeps the parameters with the lowest
/// validation loss and stops after `patience` epochs without improvement.
pub fn train(model: &mut dyn Seq2Seq, records: &[TrainRecord], validation: &[TrainRecord], cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.loss.validate()?;
    check_records(records)?;
    if validation.is_empty() {
        return Err(Error::contract("validation set is empty"));
    }
    if cfg.patience == 0 || cfg.max_epochs == 0 {
        return Err(Error::contract("patience and max_epochs must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory {
        best_validation_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best: Option<Snapshot> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(
            records,
            cfg.labeled_batch_size,
            cfg.pseudo_batch_size,
            cfg.loss.confidence_weighting,
            &mut rng,
        )?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let rows: Vec<&TrainRecord> = batch.indices.iter().map(|&i| &records[i]).collect();
            let loss = model.train_step(&rows, &batch.weights, &cfg.loss)?;
            if !loss.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, batch {b}: inputs {:?}", rows.iter().map(|r| &r.input).collect::<Vec<_>>());
                return Err(Error::NonFiniteLoss { epoch, batch: b, value: loss });
            }
            total += loss;
        }
        let validation_loss = model.validation_loss(validation)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / batches.len() as f64,
            validation_loss,
        });
        log::debug!("epoch {epoch}: train {:.4} val {validation_loss:.4}", total / batches.len() as f64);
        if validation_loss < history.best_validation_loss {
            history.best_validation_loss = validation_loss;
            history.best_epoch = epoch;
            best = Some(model.snapshot()?);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    match best {
        Some(s) => model.restore(&s)?,
        None => return Err(Error::contract("validation loss never finite")),
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(c: f64) -> TrainRecord {
        TrainRecord {
            weight: RecordWeight::Confidence(c),
            ..TrainRecord::gold("x", "y")
        }
    }

    #[test]
    fn batches_keep_streams_apart() {
        let mut records: Vec<TrainRecord> = (0..10).map(|i| TrainRecord::gold(format!("g{i}"), "y")).collect();
        records.extend((0..20).map(|i| pseudo(0.1 + i as f64 / 40.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batches = make_batches(&records, 8, 16, true, &mut rng).unwrap();
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
        for b in &batches {
            let gold = b.indices.iter().filter(|&&i| i < 10).count();
            assert!(gold == 0 || gold == b.indices.len());
            if gold == 0 {
                assert!(b.indices.len() <= 16);
                let s: f64 = b.weights.iter().sum();
                assert!((s - b.indices.len() as f64).abs() < 1e-9);
            } else {
                assert!(b.indices.len() <= 8);
                assert!(b.weights.iter().all(|&w| w == 1.0));
            }
        }
    }

    #[test]
    fn unweighted_pseudo_batches() {
        let records: Vec<TrainRecord> = (0..5).map(|i| pseudo(i as f64 / 10.0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = make_batches(&records, 8, 16, false, &mut rng).unwrap();
        assert_eq!(batches[0].weights, vec![1.0; 5]);
    }

    #[test]
    fn rejects_degenerate_records() {
        assert!(check_records(&[]).is_err());
        let zero = TrainRecord {
            weight: RecordWeight::Fixed(0.0),
            ..TrainRecord::gold("a", "b")
        };
        assert!(check_records(&[zero.clone(), zero]).is_err());
        let bad = TrainRecord {
            token_weights: Some(vec![1.0]),
            ..TrainRecord::gold("a", "b c")
        };
        assert!(check_records(&[bad]).is_err());
    }

    #[test]
    fn step_distribution_normalization() {
        assert!(StepDistribution::new(vec![0.5, 0.5]).is_ok());
        assert!(StepDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(StepDistribution::new(vec![1.5, -0.5]).is_err());
    }
}
