//! A keyword-triggered classification task with label-templated
//! explanations, small enough to train end to end on a CPU.
//!
//! Every input mixes `keywords_per_input` distinct keywords of one class with
//! shared filler words. The label is that class. The explanation fills the
//! class template with the trigger, the first keyword in the input.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, Example};
use crate::error::{Error, Result};

const CLASS_NAMES: [&str; 8] = ["alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta"];
const QUALITIES: [&str; 8] = ["bright", "heavy", "quiet", "sharp", "round", "cold", "sweet", "rough"];
const TRIGGER: &str = "{trigger}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub n_classes: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub keywords_per_class: usize,
    pub n_fillers: usize,
    pub keywords_per_input: usize,
    pub fillers_per_input: usize,
    /// One explanation template per class containing `{trigger}`; generated
    /// from the class name when empty.
    pub templates: Vec<String>,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            n_train: 600,
            n_validation: 60,
            n_test: 150,
            keywords_per_class: 8,
            n_fillers: 30,
            keywords_per_input: 2,
            fillers_per_input: 4,
            templates: Vec::new(),
        }
    }
}

/// A generated task: the word lists plus the three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub classes: Vec<String>,
    pub keywords: Vec<Vec<String>>,
    pub fillers: Vec<String>,
    pub templates: Vec<String>,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let word: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
            .collect();
        if taken.insert(word.clone()) {
            out.push(word);
        }
    }
    out
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.n_classes) {
            return Err(Error::Synthetic(format!("n_classes must be in 2..={}", CLASS_NAMES.len())));
        }
        if self.keywords_per_input == 0 || self.keywords_per_input > self.keywords_per_class {
            return Err(Error::Synthetic("keywords_per_input must be in 1..=keywords_per_class".into()));
        }
        if self.fillers_per_input > self.n_fillers {
            return Err(Error::Synthetic("fillers_per_input exceeds n_fillers".into()));
        }
        if self.n_validation == 0 || self.n_test == 0 || self.n_train < self.n_classes {
            return Err(Error::Synthetic("every split needs examples".into()));
        }
        if !self.templates.is_empty() && self.templates.len() != self.n_classes {
            return Err(Error::Synthetic(format!(
                "{} templates for {} classes",
                self.templates.len(),
                self.n_classes
            )));
        }
        Ok(())
    }

    fn class_templates(&self) -> Result<Vec<String>> {
        let templates: Vec<String> = if self.templates.is_empty() {
            (0..self.n_classes)
                .map(|c| format!("the word {TRIGGER} is {} , so it is {}", QUALITIES[c], CLASS_NAMES[c]))
                .collect()
        } else {
            self.templates.clone()
        };
        let mut seen = HashMap::new();
        for (c, t) in templates.iter().enumerate() {
            if !t.contains(TRIGGER) {
                return Err(Error::Synthetic(format!("template `{t}` lacks {TRIGGER}")));
            }
            if let Some(prev) = seen.insert(t.trim().to_string(), c) {
                return Err(Error::Synthetic(format!(
                    "template collision between classes {} and {}",
                    CLASS_NAMES[prev], CLASS_NAMES[c]
                )));
            }
        }
        Ok(templates)
    }

    /// Generates the task deterministically from `seed`.
    pub fn generate(&self, seed: u64) -> Result<SyntheticTask> {
        self.validate()?;
        let templates = self.class_templates()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes: Vec<String> = CLASS_NAMES[..self.n_classes].iter().map(|s| s.to_string()).collect();
        let mut taken: HashSet<String> = templates
            .iter()
            .flat_map(|t| t.split_whitespace().map(str::to_string))
            .chain(classes.iter().cloned())
            .collect();
        let keywords: Vec<Vec<String>> = (0..self.n_classes)
            .map(|_| pseudo_words(&mut rng, self.keywords_per_class, &mut taken))
            .collect();
        let fillers = pseudo_words(&mut rng, self.n_fillers, &mut taken);

        let total = self.n_train + self.n_validation + self.n_test;
        let mut inputs_seen = HashSet::new();
        let mut examples = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while examples.len() < total {
            attempts += 1;
            if attempts > total * 100 {
                return Err(Error::Synthetic("word lists too small for the requested number of distinct inputs".into()));
            }
            // Balanced classes: cycle through them.
            let class = examples.len() % self.n_classes;
            let mut words: Vec<&String> = keywords[class].choose_multiple(&mut rng, self.keywords_per_input).collect();
            words.extend(fillers.choose_multiple(&mut rng, self.fillers_per_input));
            words.shuffle(&mut rng);
            let input = words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join(" ");
            if !inputs_seen.insert(input.clone()) {
                continue;
            }
            let trigger = words.iter().find(|w| keywords[class].contains(w)).unwrap();
            let explanation = templates[class].replace(TRIGGER, trigger);
            examples.push(Example::new(input, classes[class].clone(), explanation));
        }
        examples.shuffle(&mut rng);
        let test = examples.split_off(self.n_train + self.n_validation);
        let validation = examples.split_off(self.n_train);
        Ok(SyntheticTask {
            classes,
            keywords,
            fillers,
            templates,
            train: examples,
            validation,
            test,
        })
    }
}

impl SyntheticTask {
    /// The generating rule: the class whose keywords occur in the input.
    pub fn oracle_label(&self, input: &str) -> Option<&str> {
        let words: BTreeSet<&str> = input.split_whitespace().collect();
        let hits: Vec<usize> = (0..self.classes.len())
            .filter(|&c| self.keywords[c].iter().any(|k| words.contains(k.as_str())))
            .collect();
        match hits.as_slice() {
            [c] => Some(&self.classes[*c]),
            _ => None,
        }
    }

    /// Writes `train.jsonl`, `validation.jsonl` and `test.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("validation.jsonl"), &self.validation)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_disjoint() {
        let spec = SyntheticTaskSpec::default();
        let a = spec.generate(4).unwrap();
        assert_eq!(a, spec.generate(4).unwrap());
        assert_ne!(a.train, spec.generate(5).unwrap().train);
        let train: HashSet<&str> = a.train.iter().map(|e| e.input_text.as_str()).collect();
        assert!(a.test.iter().chain(&a.validation).all(|e| !train.contains(e.input_text.as_str())));
        assert_eq!(a.train.len(), 600);
    }

    #[test]
    fn explanations_name_the_trigger_and_class() {
        let task = SyntheticTaskSpec::default().generate(1).unwrap();
        for e in &task.train {
            assert!(e.explanation.ends_with(&e.label));
            let trigger = e.explanation.split_whitespace().nth(2).unwrap();
            assert!(e.input_text.split_whitespace().any(|w| w == trigger));
        }
    }

    #[test]
    fn colliding_templates_are_rejected() {
        let spec = SyntheticTaskSpec {
            n_classes: 2,
            templates: vec!["{trigger} again".into(), "{trigger} again".into()],
            ..SyntheticTaskSpec::default()
        };
        assert!(matches!(spec.generate(0), Err(Error::Synthetic(_))));
    }
}
