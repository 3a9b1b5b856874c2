//! Rouge-L and Rouge-1 between a generated continuation and its reference.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl RougeScore {
    fn from_overlap(overlap: usize, candidate_len: usize, reference_len: usize) -> Self {
        if candidate_len == 0 || reference_len == 0 || overlap == 0 {
            return Self::default();
        }
        let precision = overlap as f64 / candidate_len as f64;
        let recall = overlap as f64 / reference_len as f64;
        let f_measure = if precision == recall {
            precision
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f_measure,
        }
    }
}

/// Lowercased word tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSeq {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> TokenSeq {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Length of the longest common subsequence, two-row DP.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; short.len() + 1];
    let mut cur = vec![0usize; short.len() + 1];
    for x in long {
        for (j, y) in short.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> RougeScore {
    let lcs = lcs_len(&candidate.tokens, &reference.tokens);
    RougeScore::from_overlap(lcs, candidate.len(), reference.len())
}

/// Unigram overlap with clipped counts.
pub fn rouge_1(candidate: &TokenSeq, reference: &TokenSeq) -> RougeScore {
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    for t in &reference.tokens {
        *ref_counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &candidate.tokens {
        if let Some(c) = ref_counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    RougeScore::from_overlap(overlap, candidate.len(), reference.len())
}

/// Rouge-L and Rouge-1 F-measures of `output` against `reference` text.
pub fn score_texts(output: &str, reference: &str) -> (RougeScore, RougeScore) {
    let cand = tokenize(output);
    let refr = tokenize(reference);
    (rouge_l(&cand, &refr), rouge_1(&cand, &refr))
}
