use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::Distribution;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeVariant {
    Rouge1,
    RougeL,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Length of the longest common subsequence, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn unigram_overlap(a: &[String], b: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in b {
        *counts.entry(w).or_default() += 1;
    }
    let mut hits = 0;
    for w in a {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                hits += 1;
            }
        }
    }
    hits
}

/// ROUGE of `candidate` against `reference` over lowercased whitespace tokens.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> RougeScore {
    let c = words(candidate);
    let r = words(reference);
    let overlap = match variant {
        RougeVariant::Rouge1 => unigram_overlap(&c, &r),
        RougeVariant::RougeL => lcs_len(&c, &r),
    } as f64;
    let precision = if c.is_empty() { 0.0 } else { overlap / c.len() as f64 };
    let recall = if r.is_empty() { 0.0 } else { overlap / r.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore { precision, recall, f1 }
}

/// Fraction of examples whose estimated argmax equals the reference argmax.
pub fn precision_at_1(estimates: &[Distribution], references: &[Distribution]) -> Result<f64> {
    if estimates.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::Argument("precision@1 of an empty set".into()));
    }
    let mut hits = 0usize;
    for (e, r) in estimates.iter().zip(references) {
        if e.len() != r.len() {
            return Err(Error::Argument(format!("vocab sizes {} and {} differ", e.len(), r.len())));
        }
        if e.argmax() == r.argmax() {
            hits += 1;
        }
    }
    Ok(hits as f64 / estimates.len() as f64)
}

/// `−ln p_ref[argmax p_est]`, floored at probability 1e-12.
pub fn surprisal(reference: &Distribution, estimate: &Distribution) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Argument(format!(
            "vocab sizes {} and {} differ",
            reference.len(),
            estimate.len()
        )));
    }
    Ok(-reference.prob(estimate.argmax()).max(1e-12).ln())
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Vector;

    fn dist(p: &[f64]) -> Distribution {
        Distribution { probs: Vector(p.to_vec()) }
    }

    #[test]
    fn rouge_hand_cases() {
        let s = rouge("the cat sat", "the cat", RougeVariant::RougeL);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 0.8).abs() < 1e-12);
        let same = rouge("a b c", "A b  c", RougeVariant::Rouge1);
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let none = rouge("x y", "z", RougeVariant::RougeL);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let empty = rouge("", "", RougeVariant::Rouge1);
        assert_eq!(empty.f1, 0.0);
    }

    #[test]
    fn rouge1_clips_repeats() {
        let s = rouge("the the the", "the cat", RougeVariant::Rouge1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn precision_and_surprisal() {
        let a = dist(&[0.7, 0.2, 0.1]);
        let b = dist(&[0.1, 0.8, 0.1]);
        assert_eq!(precision_at_1(&[a.clone(), b.clone()], &[a.clone(), a.clone()]).unwrap(), 0.5);
        assert!(precision_at_1(&[a.clone()], &[]).is_err());
        assert_eq!(surprisal(&dist(&[1.0, 0.0]), &dist(&[0.9, 0.1])).unwrap(), 0.0);
        let u = dist(&[0.25; 4]);
        assert!((surprisal(&u, &dist(&[0.0, 0.0, 1.0, 0.0])).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((surprisal(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap() - 1e12f64.ln()).abs() < 1e-9);
    }
}
