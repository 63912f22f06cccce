//! Generation metrics (token F1, smoothed corpus BLEU, ROUGE-L) and
//! retrieval metrics (Recall@k, MRR@5). Generation scores are in [0, 100].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::tokenizer::split_words;

/// Additive smoothing numerator for n-gram orders with no match.
pub const BLEU_SMOOTHING: f64 = 0.1;
pub const BLEU_MAX_ORDER: usize = 4;

fn counts(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

fn f_measure(overlap: usize, pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 && ref_len == 0 {
        return 100.0;
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / ref_len as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// Multiset token overlap F1.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let p = split_words(prediction);
    let r = split_words(reference);
    let rc = counts(&r);
    let overlap: usize = counts(&p)
        .iter()
        .map(|(t, &n)| n.min(rc.get(t).copied().unwrap_or(0)))
        .sum();
    f_measure(overlap, p.len(), r.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// LCS F-measure with beta = 1.
pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    let p = split_words(prediction);
    let r = split_words(reference);
    f_measure(lcs_len(&p, &r), p.len(), r.len())
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over up to 4-grams with uniform weights and brevity penalty.
/// Statistics are summed over the corpus before taking precisions. An order
/// with zero matches uses precision `BLEU_SMOOTHING / max(total, 1)`.
pub fn corpus_bleu(predictions: &[String], references: &[String]) -> f64 {
    assert_eq!(predictions.len(), references.len(), "one reference per prediction");
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let (mut pred_len, mut ref_len) = (0usize, 0usize);
    for (p, r) in predictions.iter().zip(references) {
        let p = split_words(p);
        let r = split_words(r);
        pred_len += p.len();
        ref_len += r.len();
        for n in 1..=BLEU_MAX_ORDER {
            let rn = ngrams(&r, n);
            for (g, c) in ngrams(&p, n) {
                matches[n - 1] += c.min(rn.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += p.len().saturating_sub(n - 1);
        }
    }
    if pred_len == 0 {
        return if ref_len == 0 { 100.0 } else { 0.0 };
    }
    let log_p: f64 = (0..BLEU_MAX_ORDER)
        .map(|i| {
            let p = if matches[i] == 0 {
                BLEU_SMOOTHING / totals[i].max(1) as f64
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / BLEU_MAX_ORDER as f64;
    let bp = if pred_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / pred_len as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

/// 1-based rank of `gold` in `ranked`, if present.
pub fn gold_rank<S: AsRef<str>>(ranked: &[S], gold: &str) -> Option<usize> {
    ranked.iter().position(|id| id.as_ref() == gold).map(|i| i + 1)
}

/// Fraction of queries whose gold rank is at most `k`.
pub fn recall_at_k(gold_ranks: &[Option<usize>], k: usize) -> f64 {
    if gold_ranks.is_empty() {
        return 0.0;
    }
    gold_ranks.iter().filter(|r| matches!(r, Some(x) if *x <= k)).count() as f64 / gold_ranks.len() as f64
}

pub fn mrr_at_5(gold_ranks: &[Option<usize>]) -> f64 {
    if gold_ranks.is_empty() {
        return 0.0;
    }
    gold_ranks
        .iter()
        .map(|r| match r {
            Some(x) if *x <= 5 => 1.0 / *x as f64,
            _ => 0.0,
        })
        .sum::<f64>()
        / gold_ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationScores {
    pub f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub total: f64,
}

impl GenerationScores {
    /// Mean F1 and ROUGE-L over pairs, corpus BLEU, and their sum.
    pub fn compute(predictions: &[String], references: &[String]) -> Self {
        assert_eq!(predictions.len(), references.len(), "one reference per prediction");
        let n = predictions.len().max(1) as f64;
        let pairs = predictions.iter().zip(references);
        let f1 = pairs.clone().map(|(p, r)| token_f1(p, r)).sum::<f64>() / n;
        let rouge_l = pairs.map(|(p, r)| rouge_l(p, r)).sum::<f64>() / n;
        let bleu = corpus_bleu(predictions, references);
        Self {
            f1,
            bleu,
            rouge_l,
            total: f1 + bleu + rouge_l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub r_at: BTreeMap<usize, f64>,
    pub mrr_at_5: f64,
}

impl RetrievalScores {
    pub fn compute(gold_ranks: &[Option<usize>], ks: &[usize]) -> Self {
        Self {
            r_at: ks.iter().map(|&k| (k, recall_at_k(gold_ranks, k))).collect(),
            mrr_at_5: mrr_at_5(gold_ranks),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub bleu: f64,
    pub rouge_l: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub r_at: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mrr_at_5: Option<f64>,
}

impl MetricsReport {
    pub fn new(generation: GenerationScores, retrieval: Option<RetrievalScores>) -> Self {
        let (r_at, mrr) = match retrieval {
            Some(r) => (r.r_at, Some(r.mrr_at_5)),
            None => (BTreeMap::new(), None),
        };
        Self {
            f1: generation.f1,
            bleu: generation.bleu,
            rouge_l: generation.rouge_l,
            total: generation.total,
            r_at,
            mrr_at_5: mrr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("a b c", "a b c"), 100.0);
        assert!((token_f1("a b c", "a b d") - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(token_f1("a b", "c d"), 0.0);
        assert_eq!(token_f1("", ""), 100.0);
        assert_eq!(token_f1("", "a"), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("x y", "x y"), 100.0);
        assert_eq!(rouge_l("x", "y"), 0.0);
        assert!((rouge_l("a c", "a b c") - 80.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_identity_and_brevity() {
        assert!((corpus_bleu(&s(&["a b c d e"]), &s(&["a b c d e"])) - 100.0).abs() < 1e-9);
        let short = corpus_bleu(&s(&["a b c d"]), &s(&["a b c d e f"]));
        assert!((short - 100.0 * (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn retrieval_examples() {
        let ranks = [Some(1), Some(3), Some(7)];
        assert!((recall_at_k(&ranks, 5) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(mrr_at_5(&[Some(2), Some(2)]), 0.5);
        assert_eq!(mrr_at_5(&[Some(6), None]), 0.0);
        assert_eq!(recall_at_k(&[Some(1), Some(1)], 1), 1.0);
        assert_eq!(gold_rank(&["x", "y"], "y"), Some(2));
    }
}
