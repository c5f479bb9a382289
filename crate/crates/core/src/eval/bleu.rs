//! Corpus BLEU with the 13a and international tokenizers, numerically
//! matching the common reference scorer at its default settings
//! (exponential smoothing, single reference, 4-grams).

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BleuTokenizer {
    /// mteval-v13a, the reference scorer's default.
    #[default]
    Thirteen,
    /// mteval-v14 international tokenization.
    Intl,
}

fn regex13a() -> &'static [(Regex, &'static str); 4] {
    static RE: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            (Regex::new(r##"([{|}~\[\\\]^_`!"#$%&()*+:;<=>?@/ ])"##).unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    })
}

fn regex_intl() -> &'static [(Regex, &'static str); 3] {
    static RE: OnceLock<[(Regex, &'static str); 3]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            (Regex::new(r"(\P{N})(\p{P})").unwrap(), "$1 $2 "),
            (Regex::new(r"(\p{P})(\P{N})").unwrap(), " $1 $2"),
            (Regex::new(r"(\p{S})").unwrap(), " $1 "),
        ]
    })
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokenize(line: &str, tokenizer: BleuTokenizer) -> String {
    match tokenizer {
        BleuTokenizer::Thirteen => {
            let mut line = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
            if line.contains('&') {
                line = line
                    .replace("&quot;", "\"")
                    .replace("&amp;", "&")
                    .replace("&lt;", "<")
                    .replace("&gt;", ">");
            }
            let mut line = format!(" {line} ");
            for (re, rep) in regex13a() {
                line = re.replace_all(&line, *rep).into_owned();
            }
            collapse(&line)
        }
        BleuTokenizer::Intl => {
            let mut line = line.to_string();
            for (re, rep) in regex_intl() {
                line = re.replace_all(&line, *rep).into_owned();
            }
            collapse(&line)
        }
    }
}

/// Sufficient statistics of a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub correct: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub sys_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn sentence_stats(candidate: &str, reference: &str, tokenizer: BleuTokenizer) -> BleuStats {
    let cand = tokenize(candidate, tokenizer);
    let refr = tokenize(reference, tokenizer);
    let c: Vec<&str> = cand.split(' ').filter(|t| !t.is_empty()).collect();
    let r: Vec<&str> = refr.split(' ').filter(|t| !t.is_empty()).collect();
    let mut stats = BleuStats {
        sys_len: c.len(),
        ref_len: r.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let cc = ngram_counts(&c, n);
        let rc = ngram_counts(&r, n);
        stats.total[n - 1] = c.len().saturating_sub(n - 1);
        stats.correct[n - 1] = cc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum();
    }
    stats
}

fn my_log(x: f64) -> f64 {
    if x == 0.0 {
        -9_999_999_999.0
    } else {
        x.ln()
    }
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.correct[n] += other.correct[n];
            self.total[n] += other.total[n];
        }
        self.sys_len += other.sys_len;
        self.ref_len += other.ref_len;
    }

    /// BLEU in `[0, 100]` with exponential smoothing.
    pub fn score(&self) -> f64 {
        let bp = if self.sys_len < self.ref_len {
            if self.sys_len > 0 {
                (1.0 - self.ref_len as f64 / self.sys_len as f64).exp()
            } else {
                0.0
            }
        } else {
            1.0
        };
        if self.correct.iter().all(|&c| c == 0) {
            return 0.0;
        }
        let mut precisions = [0.0f64; MAX_ORDER];
        let mut smooth = 1.0;
        for n in 0..MAX_ORDER {
            if self.total[n] == 0 {
                break;
            }
            precisions[n] = if self.correct[n] == 0 {
                smooth *= 2.0;
                100.0 / (smooth * self.total[n] as f64)
            } else {
                100.0 * self.correct[n] as f64 / self.total[n] as f64
            };
        }
        bp * (precisions.iter().map(|&p| my_log(p)).sum::<f64>() / MAX_ORDER as f64).exp()
    }
}

/// Corpus BLEU with one reference per candidate.
pub fn corpus_bleu_with(candidates: &[String], references: &[String], tokenizer: BleuTokenizer) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("corpus BLEU of an empty candidate list"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        stats.add(&sentence_stats(c, r, tokenizer));
    }
    Ok(stats.score())
}

/// Corpus BLEU with the default 13a tokenizer.
pub fn corpus_bleu(candidates: &[String], references: &[String]) -> Result<f64> {
    corpus_bleu_with(candidates, references, BleuTokenizer::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenizes_like_13a() {
        assert_eq!(tokenize("Hello, world. It's 3.5-4 km!", BleuTokenizer::Thirteen), "Hello , world . It's 3.5 - 4 km !");
        assert_eq!(tokenize("a &amp; b", BleuTokenizer::Thirteen), "a & b");
    }

    #[test]
    fn identical_is_100_and_empty_is_0() {
        let refs = s(&["the cat sat on the mat", "a dog runs in the park"]);
        assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(corpus_bleu(&s(&["", ""]), &refs).unwrap(), 0.0);
        assert!(corpus_bleu(&[], &[]).is_err());
    }
}
