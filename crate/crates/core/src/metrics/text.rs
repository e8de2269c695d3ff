//! Sequence-overlap metrics on token sequences and character strings.
//!
//! All scores are on a 0..=100 scale.

use std::collections::HashMap;
use std::hash::Hash;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n == 0 || tokens.len() < n {
        return counts;
    }
    for gram in tokens.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Matches clipped to the reference count, and the candidate n-gram total.
fn clipped_matches<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand_counts = ngram_counts(cand, n);
    let ref_counts = ngram_counts(reference, n);
    let matches = cand_counts
        .iter()
        .map(|(gram, c)| (*c).min(ref_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len().saturating_sub(n - 1))
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// ROUGE-N F1 × 100.
pub fn rouge_n<T: Eq + Hash>(cand: &[T], reference: &[T], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be positive");
    let (matches, cand_total) = clipped_matches(cand, reference, n);
    let ref_total = reference.len().saturating_sub(n - 1);
    if matches == 0 || cand_total == 0 || ref_total == 0 {
        return 0.0;
    }
    100.0 * f1(matches as f64 / cand_total as f64, matches as f64 / ref_total as f64)
}

/// Length of the longest common subsequence, in O(|a|·|b|) time and O(|b|) space.
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

/// ROUGE-L F1 × 100.
pub fn rouge_l<T: PartialEq>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference) as f64;
    100.0 * f1(lcs / cand.len() as f64, lcs / reference.len() as f64)
}

/// Mean of ROUGE-1, ROUGE-2 and ROUGE-L.
pub fn m_rouge<T: Eq + Hash>(cand: &[T], reference: &[T]) -> f64 {
    (rouge_n(cand, reference, 1) + rouge_n(cand, reference, 2) + rouge_l(cand, reference)) / 3.0
}

/// BLEU-4 × 100 with a single reference.
///
/// A zero modified precision at order n ≥ 2 is replaced by `1 / (2·c_n)`,
/// where `c_n` is the candidate's n-gram count (taken as 1 when the candidate
/// is shorter than n). A zero unigram precision makes the score 0.
pub fn bleu4<T: Eq + Hash>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (matches, total) = clipped_matches(cand, reference, n);
        let precision = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (2.0 * total.max(1) as f64)
        };
        log_sum += precision.ln();
    }
    let geo_mean = (log_sum / 4.0).exp();
    let bp = (1.0 - reference.len() as f64 / cand.len() as f64).exp().min(1.0);
    (100.0 * bp * geo_mean).min(100.0)
}

/// Levenshtein distance over `char`s.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    levenshtein_seq(&a, &b)
}

/// Levenshtein distance over arbitrary sequences (unit costs).
pub fn levenshtein_seq<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 · levenshtein / max(|cand|, |ref|)` in characters; 0 when both are empty.
pub fn edit_distance(cand: &str, reference: &str) -> f64 {
    let longest = cand.chars().count().max(reference.chars().count());
    if longest == 0 {
        return 0.0;
    }
    100.0 * levenshtein(cand, reference) as f64 / longest as f64
}
