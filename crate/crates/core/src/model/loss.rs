use serde::{Deserialize, Serialize};

use crate::corpus::RelationType;
use crate::linalg::log_sum_exp;

use super::N_CLASSES;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LogitVector {
    pub fn new(scores: Vec<f64>) -> Self {
        let lse = log_sum_exp(&scores);
        let probs = scores.iter().map(|s| (s - lse).exp()).collect();
        LogitVector { scores, probs }
    }

    /// Highest-scoring class; the lowest index wins exact ties.
    pub fn argmax(&self) -> RelationType {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        RelationType::from_index(best).unwrap_or(RelationType::None)
    }

    pub fn log_prob(&self, label: RelationType) -> f64 {
        let lse = log_sum_exp(&self.scores);
        (self.scores[label.index()] - lse).max(LOG_FLOOR.ln())
    }
}

/// Per-class loss weights, one per [`RelationType`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights { w: vec![1.0; N_CLASSES] }
    }

    /// Rescales positive weights to mean one.
    pub fn normalized(w: Vec<f64>) -> Self {
        assert_eq!(w.len(), N_CLASSES, "one weight per class");
        ClassWeights { w: normalize_mean(w) }
    }

    pub fn get(&self, label: RelationType) -> f64 {
        self.w[label.index()]
    }
}

pub(crate) fn normalize_mean(mut w: Vec<f64>) -> Vec<f64> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter_mut().for_each(|v| *v /= mean);
    w
}

/// `-w[label] * log p[label]`, with the probability floored at 1e-12.
pub fn class_weighted_ce(logits: &LogitVector, label: RelationType, weights: &ClassWeights) -> f64 {
    -weights.get(label) * logits.log_prob(label)
}

/// Loss and its gradient with respect to the scores.
pub(crate) fn weighted_ce_with_grad(
    logits: &LogitVector,
    label: RelationType,
    weights: &ClassWeights,
) -> (f64, Vec<f64>) {
    let w = weights.get(label);
    let loss = class_weighted_ce(logits, label, weights);
    let clamped = logits.probs[label.index()] < LOG_FLOOR;
    let grad = logits
        .probs
        .iter()
        .enumerate()
        .map(|(c, p)| {
            if clamped {
                0.0
            } else {
                w * (p - if c == label.index() { 1.0 } else { 0.0 })
            }
        })
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_log_fourteen() {
        let l = LogitVector::new(vec![0.3; 14]);
        let mut w = ClassWeights::uniform();
        w.w[9] = 2.5;
        let loss = class_weighted_ce(&l, RelationType::Inhibitor, &w);
        assert!((loss - 2.5 * 14f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_equal_plain_cross_entropy() {
        let scores: Vec<f64> = (0..14).map(|i| (i as f64 * 0.37).sin()).collect();
        let l = LogitVector::new(scores.clone());
        let plain = -(scores[4].exp() / scores.iter().map(|s| s.exp()).sum::<f64>()).ln();
        let loss = class_weighted_ce(&l, RelationType::AgonistInhibitor, &ClassWeights::uniform());
        assert!((loss - plain).abs() < 1e-12);
    }

    #[test]
    fn doubling_gold_weight_doubles_loss() {
        let l = LogitVector::new((0..14).map(|i| i as f64 * 0.1).collect());
        let mut w = ClassWeights::uniform();
        let base = class_weighted_ce(&l, RelationType::Agonist, &w);
        w.w[RelationType::Agonist.index()] *= 2.0;
        assert!((class_weighted_ce(&l, RelationType::Agonist, &w) - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn probabilities_and_shift_invariance() {
        let scores: Vec<f64> = (0..14).map(|i| ((i * 7) % 5) as f64).collect();
        let a = LogitVector::new(scores.clone());
        let b = LogitVector::new(scores.iter().map(|s| s + 123.0).collect());
        assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(a.argmax(), b.argmax());
        let pmax = a.probs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(a.probs[a.argmax().index()], pmax);
    }

    #[test]
    fn loss_is_clamped() {
        let mut scores = vec![0.0; 14];
        scores[0] = 1000.0;
        let l = LogitVector::new(scores);
        let (loss, grad) = weighted_ce_with_grad(&l, RelationType::Inhibitor, &ClassWeights::uniform());
        assert!((loss - -(1e-12f64.ln())).abs() < 1e-9);
        assert!(grad.iter().all(|g| *g == 0.0));
    }
}
