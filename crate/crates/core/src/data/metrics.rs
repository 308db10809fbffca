//! Evaluation metrics.

use std::collections::HashSet;

use super::tags::bioes_spans;

/// Fraction of equal positions, in percent. Empty input scores 0.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    assert_eq!(pred.len(), gold.len(), "prediction and gold lengths differ");
    if gold.is_empty() {
        return 0.0;
    }
    let correct = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    100.0 * correct as f64 / gold.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted: usize,
    pub gold: usize,
    pub correct: usize,
}

/// Span precision, recall and F1 in percent over BIOES tag sequences; a
/// span counts only with exact boundaries and type.
pub fn span_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> SpanScores {
    assert_eq!(pred.len(), gold.len(), "prediction and gold sentence counts differ");
    let (mut np, mut ng, mut nc) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let ps: HashSet<_> = bioes_spans(p).into_iter().collect();
        let gs: HashSet<_> = bioes_spans(g).into_iter().collect();
        np += ps.len();
        ng += gs.len();
        nc += ps.intersection(&gs).count();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let precision = ratio(nc, np);
    let recall = ratio(nc, ng);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SpanScores {
        precision,
        recall,
        f1,
        predicted: np,
        gold: ng,
        correct: nc,
    }
}
