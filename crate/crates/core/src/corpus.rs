//! Dataset ingestion, few-shot splitting and the text formats of the three
//! model roles.
//!
//! An input may hold several fields (premise and hypothesis, a question and
//! its choices). Fields are stored in one string separated by `\t`; record
//! files may also give `input` as an array of strings. Each field is rendered
//! behind the matching entry of [`PromptFormat::field_markers`], the last
//! marker repeating when there are more fields than markers.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{pretokenize, token_count, token_spans};

pub const FIELD_SEPARATOR: char = '\t';

/// Which conditional a model is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// P(label | input)
    Predictor,
    /// P(explanation | input, label)
    Rationalizer,
    /// P(label, explanation | input)
    Joint,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Predictor => "predictor",
            Role::Rationalizer => "rationalizer",
            Role::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One instance. Unlabeled instances carry empty `label` and `explanation`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "input", deserialize_with = "de_input")]
    pub input_text: String,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub explanation: String,
    /// Candidate answers for multiple-choice tasks; empty for classification.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
}

fn de_input<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Input {
        One(String),
        Fields(Vec<String>),
    }
    Ok(match Input::deserialize(d)? {
        Input::One(s) => s,
        Input::Fields(v) => v.join(&FIELD_SEPARATOR.to_string()),
    })
}

impl Example {
    pub fn new(input: impl Into<String>, label: impl Into<String>, explanation: impl Into<String>) -> Self {
        Self {
            input_text: input.into(),
            label: label.into(),
            explanation: explanation.into(),
            choices: Vec::new(),
        }
    }

    pub fn unlabeled(input: impl Into<String>) -> Self {
        Self::new(input, "", "")
    }

    pub fn is_labeled(&self) -> bool {
        !self.label.is_empty()
    }

    /// Copy with label and explanation blanked.
    pub fn blanked(&self) -> Self {
        Self {
            input_text: self.input_text.clone(),
            label: String::new(),
            explanation: String::new(),
            choices: self.choices.clone(),
        }
    }

    /// The stratification key: the label for classification, the answer
    /// position for multiple choice.
    fn class_key(&self) -> String {
        if self.choices.is_empty() {
            self.label.clone()
        } else {
            match self.choices.iter().position(|c| c == &self.label) {
                Some(i) => format!("choice{}", i + 1),
                None => self.label.clone(),
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub label_vocabulary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
    pub classes: usize,
    pub avg_label_tokens: f64,
    pub avg_explanation_tokens: f64,
}

impl DatasetSplit {
    pub fn stats(&self) -> SplitStats {
        let gold: Vec<&Example> = self.labeled.iter().chain(&self.validation).chain(&self.test).collect();
        let avg = |f: &dyn Fn(&Example) -> usize| {
            if gold.is_empty() {
                0.0
            } else {
                gold.iter().map(|e| f(e) as f64).sum::<f64>() / gold.len() as f64
            }
        };
        SplitStats {
            labeled: self.labeled.len(),
            unlabeled: self.unlabeled.len(),
            validation: self.validation.len(),
            test: self.test.len(),
            classes: self.label_vocabulary.len(),
            avg_label_tokens: avg(&|e| token_count(&e.label)),
            avg_explanation_tokens: avg(&|e| token_count(&e.explanation)),
        }
    }

    /// Candidate labels for one instance: its own choices for multiple
    /// choice, the label vocabulary otherwise.
    pub fn candidate_labels<'a>(&'a self, ex: &'a Example) -> &'a [String] {
        if ex.choices.is_empty() {
            &self.label_vocabulary
        } else {
            &ex.choices
        }
    }
}

/// Rendering templates for model inputs and targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFormat {
    pub task_prompt: String,
    pub field_markers: Vec<String>,
    /// Precedes the label in rationalizer inputs.
    pub label_marker: String,
    pub separator_token_text: String,
    pub mask_token_text: String,
}

impl Default for PromptFormat {
    fn default() -> Self {
        Self {
            task_prompt: "explain".into(),
            field_markers: Vec::new(),
            label_marker: "label:".into(),
            separator_token_text: "explanation:".into(),
            mask_token_text: crate::text::MASK.into(),
        }
    }
}

impl PromptFormat {
    pub fn nli() -> Self {
        Self {
            task_prompt: "explain nli".into(),
            field_markers: vec!["premise:".into(), "hypothesis:".into()],
            ..Self::default()
        }
    }

    pub fn validate(&self, label_vocabulary: &[String]) -> Result<()> {
        let sep = pretokenize(&self.separator_token_text);
        if sep.is_empty() {
            return Err(Error::Config("separator_token_text has no tokens".into()));
        }
        if pretokenize(&self.mask_token_text).len() != 1 {
            return Err(Error::Config(format!(
                "mask_token_text `{}` must be a single token",
                self.mask_token_text
            )));
        }
        for label in label_vocabulary {
            if find_subsequence(&pretokenize(label), &sep).is_some() {
                return Err(Error::Config(format!(
                    "label `{label}` contains the separator `{}`",
                    self.separator_token_text
                )));
            }
        }
        Ok(())
    }

    fn render_fields(&self, input_text: &str) -> String {
        input_text
            .split(FIELD_SEPARATOR)
            .enumerate()
            .map(|(i, field)| {
                let marker = self.field_markers.get(i).or(self.field_markers.last());
                match marker {
                    Some(m) => format!("{m} {}", field.trim()),
                    None => field.trim().to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn with_prompt(&self, body: &str) -> String {
        if self.task_prompt.is_empty() {
            body.to_string()
        } else {
            format!("{} {body}", self.task_prompt)
        }
    }

    pub fn predictor_input(&self, input_text: &str) -> String {
        self.with_prompt(&self.render_fields(input_text))
    }

    /// Rationalizer input with `label` rendered after the input fields.
    pub fn rationalizer_input(&self, input_text: &str, label: &str) -> String {
        format!("{} {} {}", self.predictor_input(input_text), self.label_marker, label.trim())
    }

    /// Rationalizer input with every label token replaced by one mask token.
    pub fn masked_rationalizer_input(&self, input_text: &str, label: &str) -> String {
        let masks = vec![self.mask_token_text.as_str(); token_count(label)].join(" ");
        format!("{} {} {}", self.predictor_input(input_text), self.label_marker, masks)
    }

    pub fn joint_target(&self, label: &str, explanation: &str) -> String {
        let explanation = explanation.trim();
        if explanation.is_empty() {
            format!("{} {}", label.trim(), self.separator_token_text)
        } else {
            format!("{} {} {explanation}", label.trim(), self.separator_token_text)
        }
    }

    /// Decoder prefix that forces `label` and the separator.
    pub fn joint_prefix(&self, label: &str) -> String {
        format!("{} {}", label.trim(), self.separator_token_text)
    }

    /// Simulator input: the predictor input, optionally followed by the
    /// separator and an explanation.
    pub fn simulator_input(&self, input_text: &str, explanation: Option<&str>) -> String {
        match explanation {
            Some(e) => format!("{} {} {}", self.predictor_input(input_text), self.separator_token_text, e.trim()),
            None => self.predictor_input(input_text),
        }
    }
}

/// Renders `(input, target)` for a role.
pub fn format_model_io(ex: &Example, role: Role, fmt: &PromptFormat, mask_label: bool) -> Result<(String, String)> {
    if mask_label && role != Role::Rationalizer {
        return Err(Error::contract(format!("label masking requested for role {role}")));
    }
    let io = match role {
        Role::Predictor => (fmt.predictor_input(&ex.input_text), ex.label.trim().to_string()),
        Role::Rationalizer => {
            if ex.label.trim().is_empty() {
                return Err(Error::contract("rationalizer input needs a label"));
            }
            let input = if mask_label {
                fmt.masked_rationalizer_input(&ex.input_text, &ex.label)
            } else {
                fmt.rationalizer_input(&ex.input_text, &ex.label)
            };
            (input, ex.explanation.trim().to_string())
        }
        Role::Joint => (fmt.predictor_input(&ex.input_text), fmt.joint_target(&ex.label, &ex.explanation)),
    };
    Ok(io)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointOutput {
    pub label: String,
    pub explanation: String,
    pub well_formed: bool,
}

/// Splits generated joint text at the first token-level occurrence of the
/// separator.
pub fn parse_joint_output(generated_text: &str, fmt: &PromptFormat) -> JointOutput {
    let sep = pretokenize(&fmt.separator_token_text);
    let spans = token_spans(generated_text);
    let tokens: Vec<&str> = spans.iter().map(|r| &generated_text[r.clone()]).collect();
    match find_subsequence(&tokens, &sep) {
        Some(i) if !sep.is_empty() => JointOutput {
            label: generated_text[..spans[i].start].trim().to_string(),
            explanation: generated_text[spans[i + sep.len() - 1].end..].trim().to_string(),
            well_formed: true,
        },
        _ => JointOutput {
            label: generated_text.trim().to_string(),
            explanation: String::new(),
            well_formed: false,
        },
    }
}

fn find_subsequence(haystack: &[&str], needle: &[&str]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_split(path: &Path) -> Result<Vec<Example>> {
    let records: Vec<Example> = read_jsonl(path)?;
    if let Some(i) = records.iter().position(|e| e.input_text.trim().is_empty()) {
        // Line numbers skip blank lines here; good enough to find the record.
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: "empty input".into(),
        });
    }
    Ok(records)
}

/// Loads `train.jsonl`, `validation.jsonl` and `test.jsonl` (and, if present,
/// `unlabeled.jsonl`) from `dir`, inferring the label vocabulary.
pub fn load_dataset(dir: &Path, fmt: &PromptFormat) -> Result<DatasetSplit> {
    load_dataset_with_vocabulary(dir, fmt, None)
}

/// As [`load_dataset`]; with `vocabulary` given, every gold label must be in
/// it. Without it, the vocabulary is the sorted set of labeled training labels
/// (validation labels when the training file has none).
pub fn load_dataset_with_vocabulary(
    dir: &Path,
    fmt: &PromptFormat,
    vocabulary: Option<Vec<String>>,
) -> Result<DatasetSplit> {
    let train = read_split(&dir.join("train.jsonl"))?;
    let validation = read_split(&dir.join("validation.jsonl"))?;
    let test = read_split(&dir.join("test.jsonl"))?;
    let extra = dir.join("unlabeled.jsonl");
    let mut unlabeled: Vec<Example> = if extra.exists() {
        read_split(&extra)?.iter().map(Example::blanked).collect()
    } else {
        Vec::new()
    };
    let (labeled, rest): (Vec<Example>, Vec<Example>) = train.into_iter().partition(Example::is_labeled);
    unlabeled.extend(rest.iter().map(Example::blanked));

    let classification = |e: &&Example| e.choices.is_empty() && e.is_labeled();
    let (label_vocabulary, checked): (Vec<String>, Vec<(&'static str, &Vec<Example>)>) = match vocabulary {
        Some(v) => (v, vec![("train", &labeled), ("validation", &validation), ("test", &test)]),
        None => {
            let from_train: BTreeSet<String> = labeled.iter().filter(classification).map(|e| e.label.clone()).collect();
            if from_train.is_empty() {
                let from_val = validation.iter().filter(classification).map(|e| e.label.clone()).collect::<BTreeSet<_>>();
                (from_val.into_iter().collect(), vec![("test", &test)])
            } else {
                (from_train.into_iter().collect(), vec![("validation", &validation), ("test", &test)])
            }
        }
    };
    for (split, records) in checked {
        for e in records.iter().filter(|e| e.is_labeled()) {
            let ok = if e.choices.is_empty() {
                label_vocabulary.contains(&e.label)
            } else {
                e.choices.contains(&e.label)
            };
            if !ok {
                let vocabulary = if e.choices.is_empty() { label_vocabulary.clone() } else { e.choices.clone() };
                return Err(Error::UnknownLabel {
                    label: e.label.clone(),
                    split,
                    vocabulary,
                });
            }
        }
    }
    fmt.validate(&label_vocabulary)?;

    let train_inputs: HashSet<&str> = labeled.iter().chain(&unlabeled).map(|e| e.input_text.as_str()).collect();
    let leaked = validation
        .iter()
        .chain(&test)
        .filter(|e| train_inputs.contains(e.input_text.as_str()))
        .count();
    if leaked > 0 {
        log::warn!("{leaked} validation/test inputs also occur in the training split");
    }

    let split = DatasetSplit {
        labeled,
        unlabeled,
        validation,
        test,
        label_vocabulary,
    };
    let s = split.stats();
    log::info!(
        "loaded {}: {} labeled, {} unlabeled, {} validation, {} test, {} classes",
        dir.display(),
        s.labeled,
        s.unlabeled,
        s.validation,
        s.test,
        s.classes
    );
    Ok(split)
}

/// Class-stratified sample of `k_per_class` labeled examples; everything else
/// becomes unlabeled. Both outputs keep the order of `full_train`.
pub fn sample_few_shot(full_train: &[Example], k_per_class: usize, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    if k_per_class == 0 {
        return Err(Error::contract("k_per_class must be positive"));
    }
    let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in full_train.iter().enumerate() {
        by_class.entry(e.class_key()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; full_train.len()];
    for (class, mut idx) in by_class {
        if idx.len() < k_per_class {
            return Err(Error::InsufficientClass {
                class,
                available: idx.len(),
                requested: k_per_class,
            });
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..k_per_class] {
            chosen[i] = true;
        }
    }
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (e, picked) in full_train.iter().zip(chosen) {
        if picked {
            labeled.push(e.clone());
        } else {
            unlabeled.push(e.blanked());
        }
    }
    Ok((labeled, unlabeled))
}

/// Examples per stratification class (label, or answer position for
/// multiple choice).
pub fn class_counts(examples: &[Example]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in examples.iter().filter(|e| e.is_labeled()) {
        *counts.entry(e.class_key()).or_insert(0) += 1;
    }
    counts
}
