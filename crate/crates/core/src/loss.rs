//! Inverse-frequency class weights, weighted cross-entropy and recall-driven
//! weight adjustment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassDistribution;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Probabilities below this are clamped before taking the log.
pub const LOG_EPS: f64 = 1e-12;
pub const MIN_WEIGHT: f64 = 0.05;
pub const MAX_WEIGHT: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub raw: f64,
    pub normalized: f64,
}

/// Per-class loss weights. Serializes as `{class: {raw, normalized}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<String, WeightEntry>", try_from = "BTreeMap<String, WeightEntry>")]
pub struct ClassWeights {
    pub raw: BTreeMap<String, f64>,
    pub normalized: BTreeMap<String, f64>,
    pub normalization_target: f64,
}

impl From<ClassWeights> for BTreeMap<String, WeightEntry> {
    fn from(w: ClassWeights) -> Self {
        w.raw
            .iter()
            .map(|(k, &raw)| {
                (
                    k.clone(),
                    WeightEntry {
                        raw,
                        normalized: w.normalized[k],
                    },
                )
            })
            .collect()
    }
}

impl TryFrom<BTreeMap<String, WeightEntry>> for ClassWeights {
    type Error = Error;

    fn try_from(map: BTreeMap<String, WeightEntry>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::Empty("class weight table".into()));
        }
        if let Some((k, _)) = map
            .iter()
            .find(|(_, e)| !(e.raw.is_finite() && e.raw > 0.0 && e.normalized.is_finite() && e.normalized > 0.0))
        {
            return Err(Error::InvalidArgument(format!("weight for '{k}' must be positive and finite")));
        }
        Ok(ClassWeights {
            raw: map.iter().map(|(k, e)| (k.clone(), e.raw)).collect(),
            normalized: map.iter().map(|(k, e)| (k.clone(), e.normalized)).collect(),
            normalization_target: map.values().map(|e| e.normalized).sum(),
        })
    }
}

impl ClassWeights {
    /// Scales `raw` so the normalized weights sum to `target`.
    pub fn from_raw(raw: BTreeMap<String, f64>, target: f64) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("no classes to weight".into()));
        }
        if !(target.is_finite() && target > 0.0) {
            return Err(Error::InvalidArgument(format!("normalization target {target} must be positive")));
        }
        if let Some((k, v)) = raw.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!("raw weight {v} for '{k}' must be positive and finite")));
        }
        let sum: f64 = raw.values().sum();
        let normalized = raw.iter().map(|(k, v)| (k.clone(), v * target / sum)).collect();
        Ok(ClassWeights {
            raw,
            normalized,
            normalization_target: target,
        })
    }

    /// Weight 1 for every class.
    pub fn uniform<S: AsRef<str>>(classes: &[S]) -> Result<Self> {
        let raw = classes.iter().map(|c| (c.as_ref().to_string(), 1.0)).collect::<BTreeMap<_, _>>();
        let k = raw.len() as f64;
        Self::from_raw(raw, k)
    }

    /// Inverse-frequency weights from percentages in `(0, 100]`, normalized to sum to K.
    pub fn from_percentages(percentages: &BTreeMap<String, f64>) -> Result<Self> {
        let mut raw = BTreeMap::new();
        for (class, &pct) in percentages {
            if pct <= 0.0 {
                return Err(Error::ZeroCount(class.clone()));
            }
            if !(pct.is_finite() && pct <= 100.0) {
                return Err(Error::InvalidArgument(format!("percentage {pct} for '{class}' outside (0, 100]")));
            }
            raw.insert(class.clone(), 100.0 / pct);
        }
        let k = raw.len() as f64;
        Self::from_raw(raw, k)
    }

    pub fn classes(&self) -> impl Iterator<Item = &str> {
        self.normalized.keys().map(String::as_str)
    }

    pub fn get(&self, class: &str) -> Option<f64> {
        self.normalized.get(class).copied()
    }

    /// Normalized weights in the order of `classes`.
    pub fn vector<S: AsRef<str>>(&self, classes: &[S]) -> Result<Vec<f64>> {
        classes
            .iter()
            .map(|c| self.get(c.as_ref()).ok_or_else(|| Error::UnknownClass(c.as_ref().to_string())))
            .collect()
    }
}

/// Inverse-frequency weights for `classes`, using their share of the whole distribution.
pub fn compute_class_weights<S: AsRef<str>>(dist: &ClassDistribution, classes: &[S]) -> Result<ClassWeights> {
    if classes.is_empty() {
        return Err(Error::Empty("no classes requested".into()));
    }
    let mut pct = BTreeMap::new();
    for c in classes {
        let c = c.as_ref();
        match dist.percentage(c) {
            None => return Err(Error::ZeroCount(c.to_string())),
            Some(p) if p <= 0.0 => return Err(Error::ZeroCount(c.to_string())),
            Some(p) => {
                pct.insert(c.to_string(), p);
            }
        }
    }
    ClassWeights::from_percentages(&pct)
}

#[derive(Debug, Clone)]
pub struct CeOutput {
    /// Mean over the batch.
    pub loss: f64,
    pub per_instance: Vec<f64>,
    /// `dL/dlogits`, already scaled by `1/N`.
    pub grad: Tensor,
    /// Number of true-class probabilities that hit [`LOG_EPS`].
    pub clamped: usize,
}

/// `L_i = -sum_x w_x y_ix ln p_ix`, averaged over rows. `labels` may hold soft
/// targets; for one-hot rows the logit gradient is `w_true (p - y) / N`.
pub fn weighted_cross_entropy(probs: &Tensor, labels: &Tensor, weights: &[f64]) -> Result<CeOutput> {
    if probs.shape() != labels.shape() || probs.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: probs.shape().to_vec(),
            actual: labels.shape().to_vec(),
        });
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if weights.len() != k {
        return Err(Error::ShapeMismatch {
            expected: vec![k],
            actual: vec![weights.len()],
        });
    }
    let mut per_instance = Vec::with_capacity(n);
    let mut grad = vec![0.0; n * k];
    let mut clamped = 0;
    for i in 0..n {
        let p = probs.row(i);
        let y = labels.row(i);
        let mut li = 0.0;
        let mut wy = 0.0;
        for x in 0..k {
            if y[x] != 0.0 {
                if p[x] < LOG_EPS {
                    clamped += 1;
                }
                li -= weights[x] * y[x] * p[x].max(LOG_EPS).ln();
                wy += weights[x] * y[x];
            }
        }
        for j in 0..k {
            grad[i * k + j] = (p[j] * wy - weights[j] * y[j]) / n as f64;
        }
        per_instance.push(li);
    }
    let loss = per_instance.iter().sum::<f64>() / n as f64;
    Ok(CeOutput {
        loss,
        per_instance,
        grad: Tensor::new(vec![n, k], grad)?,
        clamped,
    })
}

/// Same as [`weighted_cross_entropy`] with class indices instead of one-hot rows.
pub fn weighted_cross_entropy_indices(probs: &Tensor, labels: &[usize], weights: &[f64]) -> Result<CeOutput> {
    let (n, k) = match probs.shape() {
        [n, k] => (*n, *k),
        s => {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), weights.len()],
                actual: s.to_vec(),
            })
        }
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: vec![labels.len()],
        });
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {k} classes")));
        }
        onehot[i * k + l] = 1.0;
    }
    weighted_cross_entropy(probs, &Tensor::new(vec![n, k], onehot)?, weights)
}

/// Classification objective used by the trainer.
pub trait Objective {
    fn evaluate(&self, probs: &Tensor, labels: &[usize]) -> Result<CeOutput>;
}

/// Weighted cross-entropy with a fixed weight per class index.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCrossEntropy {
    pub weights: Vec<f64>,
}

impl WeightedCrossEntropy {
    pub fn unweighted(n_classes: usize) -> Self {
        WeightedCrossEntropy {
            weights: vec![1.0; n_classes],
        }
    }

    pub fn from_weights<S: AsRef<str>>(w: &ClassWeights, classes: &[S]) -> Result<Self> {
        Ok(WeightedCrossEntropy {
            weights: w.vector(classes)?,
        })
    }
}

impl Objective for WeightedCrossEntropy {
    fn evaluate(&self, probs: &Tensor, labels: &[usize]) -> Result<CeOutput> {
        weighted_cross_entropy_indices(probs, labels, &self.weights)
    }
}

/// `w (1 + eta (target - recall))` clamped to `[MIN_WEIGHT, MAX_WEIGHT]`, before renormalization.
pub fn adjusted_weight(w: f64, recall: f64, target: f64, eta: f64) -> f64 {
    (w * (1.0 + eta * (target - recall))).clamp(MIN_WEIGHT, MAX_WEIGHT)
}

/// Multiplicative recall-gap update of the normalized weights, renormalized to the
/// same target sum. The returned `raw` holds the clamped pre-normalization values.
pub fn dynamic_weight_adjust(
    w: &ClassWeights,
    recall: &BTreeMap<String, f64>,
    target: f64,
    eta: f64,
) -> Result<ClassWeights> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::InvalidArgument(format!("adjustment rate eta={eta} must be >= 0")));
    }
    if !target.is_finite() {
        return Err(Error::NonFinite(format!("recall target {target}")));
    }
    let mut raw = BTreeMap::new();
    for (class, &wc) in &w.normalized {
        let r = *recall.get(class).ok_or_else(|| Error::UnknownClass(class.clone()))?;
        if !r.is_finite() {
            return Err(Error::NonFinite(format!("recall for '{class}'")));
        }
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("recall {r} for '{class}' outside [0, 1]")));
        }
        raw.insert(class.clone(), adjusted_weight(wc, r, target, eta));
    }
    ClassWeights::from_raw(raw, w.normalization_target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::softmax_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pct(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn inverse_frequency_weights_hand_values() {
        let w = ClassWeights::from_percentages(&pct(&[("ped", 21.61), ("cyc", 2.46), ("moto", 2.42)])).unwrap();
        assert!((w.raw["ped"] - 4.6275).abs() < 1e-4);
        assert!((w.raw["cyc"] - 40.6504).abs() < 1e-4);
        assert!((w.raw["moto"] - 41.3223).abs() < 1e-4);
        assert!((w.normalized["ped"] - 0.1603).abs() < 1e-4);
        assert!((w.normalized["cyc"] - 1.4082).abs() < 1e-4);
        assert!((w.normalized["moto"] - 1.4315).abs() < 1e-4);
        assert!((w.normalized.values().sum::<f64>() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn equal_shares_give_unit_weights() {
        let w = ClassWeights::from_percentages(&pct(&[("a", 50.0), ("b", 50.0)])).unwrap();
        assert!(w.normalized.values().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_share_is_rejected_with_hint() {
        let err = ClassWeights::from_percentages(&pct(&[("a", 100.0), ("b", 0.0)])).unwrap_err();
        assert!(matches!(err, Error::ZeroCount(ref c) if c == "b"));
        assert!(err.to_string().contains("oversample"));
    }

    #[test]
    fn json_shape_round_trips() {
        let w = ClassWeights::from_percentages(&pct(&[("a", 80.0), ("b", 20.0)])).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        assert!(s.starts_with("{\"a\":{\"raw\":"));
        let back: ClassWeights = serde_json::from_str(&s).unwrap();
        assert_eq!(back.raw, w.raw);
        assert!((back.normalization_target - 2.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_ce_hand_value() {
        let probs = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let out = weighted_cross_entropy_indices(&probs, &[1], &[1.0, 2.0]).unwrap();
        assert!((out.loss - 1.386294361).abs() < 1e-8);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let probs = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let out = weighted_cross_entropy_indices(&probs, &[1], &[1.0; 3]).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn zero_true_probability_is_clamped_and_flagged() {
        let probs = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let out = weighted_cross_entropy_indices(&probs, &[1], &[1.0, 1.0]).unwrap();
        assert!(out.loss.is_finite());
        assert!((out.loss + LOG_EPS.ln()).abs() < 1e-9);
        assert_eq!(out.clamped, 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, k) = (4, 3);
            let logits: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..3.0)).collect();
            let loss_of = |z: &[f64]| {
                let p = Tensor::new(vec![n, k], softmax_rows(z, k)).unwrap();
                weighted_cross_entropy_indices(&p, &labels, &w).unwrap()
            };
            let g = loss_of(&logits).grad;
            for j in 0..n * k {
                let h = 1e-6;
                let mut zp = logits.clone();
                zp[j] += h;
                let mut zm = logits.clone();
                zm[j] -= h;
                let fd = (loss_of(&zp).loss - loss_of(&zm).loss) / (2.0 * h);
                let an = g.data()[j];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn adjust_rule_arithmetic() {
        assert!((adjusted_weight(1.0, 0.5, 0.9, 0.5) - 1.2).abs() < 1e-12);
        assert!(adjusted_weight(1.0, 1.0, 0.9, 0.5) < 1.0);
        assert_eq!(adjusted_weight(1.0, 0.0, 0.9, 1e6), MAX_WEIGHT);
    }

    #[test]
    fn adjust_fixed_point_and_negative_eta() {
        let w = ClassWeights::from_percentages(&pct(&[("a", 70.0), ("b", 30.0)])).unwrap();
        let at_target = pct(&[("a", 0.9), ("b", 0.9)]);
        let same = dynamic_weight_adjust(&w, &at_target, 0.9, 0.7).unwrap();
        for (k, v) in &w.normalized {
            assert!((same.normalized[k] - v).abs() < 1e-12);
        }
        assert!(dynamic_weight_adjust(&w, &at_target, 0.9, -0.1).is_err());
    }

    #[test]
    fn adjust_keeps_target_sum() {
        let w = ClassWeights::uniform(&["a", "b", "c"]).unwrap();
        let out = dynamic_weight_adjust(&w, &pct(&[("a", 0.95), ("b", 0.4), ("c", 0.7)]), 0.9, 0.5).unwrap();
        assert!((out.normalized.values().sum::<f64>() - 3.0).abs() < 1e-9);
        assert!(out.normalized["b"] > out.normalized["c"]);
        assert!(out.normalized["c"] > out.normalized["a"]);
    }
}
