//! Deterministic scripted backend for orchestration tests.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{Generation, ModelFactory, Role, Seq2Seq, Snapshot, StepDistribution, TrainRecord};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::text::{pretokenize, Vocab, EOS};

/// Shared, ordered log of what happened during a run.
#[derive(Debug, Clone, Default)]
pub struct EventLog(Arc<Mutex<Vec<String>>>);

impl EventLog {
    pub fn push(&self, event: impl Into<String>) {
        self.0.lock().unwrap().push(event.into());
    }

    pub fn events(&self) -> Vec<String> {
        self.0.lock().unwrap().clone()
    }
}

type RespondFn = Arc<dyn Fn(&str) -> String + Send + Sync>;
type ContinueFn = Arc<dyn Fn(&str, &str) -> String + Send + Sync>;

/// How the stub answers an input.
#[derive(Clone)]
pub enum Responder {
    Echo,
    Constant(String),
    Table { table: HashMap<String, String>, default: String },
    Func(RespondFn),
}

impl Responder {
    pub fn func(f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        Responder::Func(Arc::new(f))
    }

    fn respond(&self, input: &str) -> String {
        match self {
            Responder::Echo => input.to_string(),
            Responder::Constant(s) => s.clone(),
            Responder::Table { table, default } => table.get(input).cloned().unwrap_or_else(|| default.clone()),
            Responder::Func(f) => f(input),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StubDistribution {
    /// All mass on the scripted token.
    OneHot,
    /// Uniform over the vocabulary.
    Uniform,
}

/// A model whose outputs are scripted. With `memorize` on, training stores
/// every `(input, target)` pair and later answers those inputs verbatim.
pub struct ScriptedModel {
    role: Role,
    vocab: Vocab,
    responder: Responder,
    continuer: Option<ContinueFn>,
    distribution: StubDistribution,
    memorize: bool,
    memory: HashMap<String, String>,
    validation_script: Option<Vec<f64>>,
    validation_calls: AtomicUsize,
    restored_epoch: Option<usize>,
    events: Option<EventLog>,
    name: String,
}

struct StubState {
    memory: HashMap<String, String>,
    epoch: usize,
}

impl ScriptedModel {
    pub fn new(role: Role, responder: Responder) -> Self {
        Self {
            role,
            vocab: Vocab::build(std::iter::empty()),
            responder,
            continuer: None,
            distribution: StubDistribution::OneHot,
            memorize: false,
            memory: HashMap::new(),
            validation_script: None,
            validation_calls: AtomicUsize::new(0),
            restored_epoch: None,
            events: None,
            name: role.to_string(),
        }
    }

    pub fn with_vocab(mut self, vocab: Vocab) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn with_distribution(mut self, d: StubDistribution) -> Self {
        self.distribution = d;
        self
    }

    pub fn with_continuation(mut self, f: impl Fn(&str, &str) -> String + Send + Sync + 'static) -> Self {
        self.continuer = Some(Arc::new(f));
        self
    }

    pub fn memorizing(mut self) -> Self {
        self.memorize = true;
        self
    }

    /// Validation losses returned by successive `validation_loss` calls.
    pub fn with_validation_script(mut self, losses: Vec<f64>) -> Self {
        self.validation_script = Some(losses);
        self
    }

    pub fn with_events(mut self, log: EventLog, name: impl Into<String>) -> Self {
        self.events = Some(log);
        self.name = name.into();
        self
    }

    /// Epoch (1-based) whose state the last `restore` reinstated.
    pub fn restored_epoch(&self) -> Option<usize> {
        self.restored_epoch
    }

    fn respond(&self, input: &str) -> String {
        self.memory.get(input).cloned().unwrap_or_else(|| self.responder.respond(input))
    }

    fn log(&self, what: &str) {
        if let Some(e) = &self.events {
            e.push(format!("{what}:{}", self.name));
        }
    }

    fn scripted_ids(&self, input: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode(&self.respond(input));
        ids.push(Vocab::EOS_ID);
        ids
    }

    fn token_log_prob(&self, scripted: Option<u32>, actual: u32) -> f64 {
        match self.distribution {
            StubDistribution::Uniform => -(self.vocab.len() as f64).ln(),
            StubDistribution::OneHot => {
                if scripted == Some(actual) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

impl Seq2Seq for ScriptedModel {
    fn role(&self) -> Role {
        self.role
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn train_step(&mut self, batch: &[&TrainRecord], _weights: &[f64], _loss: &LossConfig) -> Result<f64> {
        self.log("train_step");
        if self.memorize {
            for r in batch {
                self.memory.insert(r.input.clone(), r.target.clone());
            }
        }
        Ok(1.0)
    }

    fn validation_loss(&self, records: &[TrainRecord]) -> Result<f64> {
        let call = self.validation_calls.fetch_add(1, Ordering::SeqCst);
        if let Some(script) = &self.validation_script {
            return Ok(script.get(call).or(script.last()).copied().unwrap_or(0.0));
        }
        let wrong = records.iter().filter(|r| self.respond(&r.input) != r.target).count();
        Ok(wrong as f64 / records.len().max(1) as f64)
    }

    fn snapshot(&self) -> Result<Snapshot> {
        Ok(Snapshot(Box::new(StubState {
            memory: self.memory.clone(),
            epoch: self.validation_calls.load(Ordering::SeqCst),
        })))
    }

    fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        let state = snapshot
            .0
            .downcast_ref::<StubState>()
            .ok_or_else(|| Error::contract("snapshot from a different backend"))?;
        self.memory = state.memory.clone();
        self.restored_epoch = Some(state.epoch);
        Ok(())
    }

    fn generate_greedy(&self, input: &str, max_len: usize) -> Result<Generation> {
        self.log("generate");
        let text = self.respond(input);
        let tokens = pretokenize(&text);
        let eos = tokens.len() < max_len;
        let kept = tokens.len().min(max_len);
        let per_token = self.token_log_prob(Some(0), 0);
        let positions = kept + usize::from(eos);
        Ok(Generation::new(tokens[..kept].join(" "), vec![per_token; positions], eos))
    }

    fn score_sequence(&self, input: &str, output: &str) -> Result<Vec<f64>> {
        let scripted = self.scripted_ids(input);
        let mut forced = self.vocab.encode(output);
        forced.push(Vocab::EOS_ID);
        Ok(forced
            .iter()
            .enumerate()
            .map(|(t, &id)| self.token_log_prob(scripted.get(t).copied(), id))
            .collect())
    }

    fn step_distributions(&self, input: &str, forced_output: &str) -> Result<Vec<StepDistribution>> {
        let scripted = self.scripted_ids(input);
        let positions = pretokenize(forced_output).len() + 1;
        let v = self.vocab.len();
        (0..positions)
            .map(|t| {
                let probs = match self.distribution {
                    StubDistribution::Uniform => vec![1.0 / v as f64; v],
                    StubDistribution::OneHot => {
                        let mut p = vec![0.0; v];
                        p[scripted.get(t).copied().unwrap_or(Vocab::EOS_ID) as usize] = 1.0;
                        p
                    }
                };
                StepDistribution::new(probs)
            })
            .collect()
    }

    fn continue_generation(&self, input: &str, decoder_prefix: &str, max_len: usize) -> Result<String> {
        let prefix = pretokenize(decoder_prefix);
        if prefix.is_empty() {
            return Err(Error::contract("decoder prefix is empty"));
        }
        let full_text = self.respond(input);
        let full = pretokenize(&full_text);
        let rest: Vec<&str> = if full.starts_with(&prefix) {
            full[prefix.len()..].to_vec()
        } else if let Some(f) = &self.continuer {
            return Ok(f(input, decoder_prefix));
        } else {
            full
        };
        Ok(rest.into_iter().take(max_len).filter(|t| *t != EOS).collect::<Vec<_>>().join(" "))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = super::CheckpointManifest::new("scripted", self.role, &self.vocab, &serde_json::Value::Null);
        manifest.write(dir)
    }
}

type Builder = dyn Fn(Role, usize, u64) -> ScriptedModel + Send + Sync;

/// Builds scripted models; `build(role, instance, seed)` sees a per-role
/// instance counter so tests can script successive students differently.
pub struct ScriptedFactory {
    build: Box<Builder>,
    counters: Mutex<HashMap<Role, usize>>,
    pub events: EventLog,
}

impl ScriptedFactory {
    pub fn new(build: impl Fn(Role, usize, u64) -> ScriptedModel + Send + Sync + 'static) -> Self {
        Self {
            build: Box::new(build),
            counters: Mutex::new(HashMap::new()),
            events: EventLog::default(),
        }
    }
}

impl ModelFactory for ScriptedFactory {
    fn create(&self, role: Role, seed: u64) -> Result<Box<dyn Seq2Seq>> {
        let instance = {
            let mut c = self.counters.lock().unwrap();
            let n = c.entry(role).or_insert(0);
            *n += 1;
            *n - 1
        };
        self.events.push(format!("create:{role}:{instance}"));
        let model = (self.build)(role, instance, seed).with_events(self.events.clone(), format!("{role}:{instance}"));
        Ok(Box::new(model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{train, TrainConfig};

    #[test]
    fn echo_stub_generates_input_with_zero_log_probs() {
        let m = ScriptedModel::new(Role::Joint, Responder::Echo);
        let g = m.generate_greedy("a b c", 10).unwrap();
        assert_eq!(g.text, "a b c");
        assert_eq!(g.token_log_probs, vec![0.0; 4]);
        assert_eq!(g.sequence_log_prob, 0.0);
        assert!(m.generate_greedy("a b c", 1).unwrap().text.split(' ').count() <= 1);
    }

    #[test]
    fn uniform_stub_scores_log_one_over_v() {
        let vocab = Vocab::build(["a b c d e"]);
        assert_eq!(vocab.len(), 10);
        let m = ScriptedModel::new(Role::Joint, Responder::Echo)
            .with_vocab(vocab)
            .with_distribution(StubDistribution::Uniform);
        for lp in m.score_sequence("a b", "c d e").unwrap() {
            assert!((lp - (0.1f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_stub_has_zero_entropy() {
        let vocab = Vocab::build(["x y"]);
        let m = ScriptedModel::new(Role::Predictor, Responder::Constant("x y".into())).with_vocab(vocab);
        let dists = m.step_distributions("in", "x y").unwrap();
        assert_eq!(dists.len(), 3);
        assert!(dists.iter().all(|d| d.entropy() == 0.0));
        let score = m.score_sequence("in", "x y").unwrap();
        for (d, lp) in dists.iter().zip(&score) {
            let forced = d.probs().iter().position(|&p| p == 1.0).unwrap();
            assert_eq!(d.probs()[forced].ln(), *lp);
        }
    }

    #[test]
    fn continuation_after_full_output_is_empty() {
        let m = ScriptedModel::new(Role::Joint, Responder::Constant("a explanation : b".into()));
        let g = m.generate_greedy("q", 20).unwrap();
        assert_eq!(m.continue_generation("q", &g.text, 20).unwrap(), "");
        assert_eq!(m.continue_generation("q", "a explanation:", 20).unwrap(), "b");
        assert!(m.continue_generation("q", "", 20).is_err());
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let mut m = ScriptedModel::new(Role::Predictor, Responder::Echo)
            .with_validation_script(vec![5.0, 4.0, 3.0, 3.0, 3.5, 3.0, 3.2, 3.1, 2.0]);
        let records = vec![TrainRecord::gold("a", "a")];
        let cfg = TrainConfig {
            patience: 5,
            ..TrainConfig::default()
        };
        let history = train(&mut m, &records, &records, &cfg).unwrap();
        assert_eq!(history.epochs.len(), 8);
        assert_eq!(history.best_epoch, 3);
        assert_eq!(m.restored_epoch(), Some(3));
    }

    #[test]
    fn zero_weights_are_rejected() {
        let mut m = ScriptedModel::new(Role::Predictor, Responder::Echo);
        let mut r = TrainRecord::gold("a", "a");
        r.weight = crate::backend::RecordWeight::Fixed(0.0);
        assert!(train(&mut m, &[r.clone(), r], &[TrainRecord::gold("a", "a")], &TrainConfig::default()).is_err());
    }
}
