//! Rank correlation between per-class error rates and neuron selectivity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ClassErrors;

/// 1-based ranks with ties given the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho (Pearson correlation of average ranks). `None` when either
/// series is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![x.len()],
            actual: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("rank correlation needs at least 2 points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub x_metric: String,
    pub y_metric: String,
    pub points: Vec<CorrelationPoint>,
    pub coefficient: Option<f64>,
    /// `positive`, `negative` or `zero`; absent when undefined.
    pub sign: Option<String>,
    /// Why the coefficient is missing, if it is.
    pub undefined: Option<String>,
}

impl CorrelationTable {
    pub fn from_points(x_metric: &str, y_metric: &str, points: Vec<CorrelationPoint>) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "correlation needs at least 3 points, got {}",
                points.len()
            )));
        }
        let x: Vec<f64> = points.iter().map(|p| p.x).collect();
        let y: Vec<f64> = points.iter().map(|p| p.y).collect();
        let coefficient = spearman(&x, &y)?;
        let sign = coefficient.map(|c| {
            if c > 0.0 {
                "positive"
            } else if c < 0.0 {
                "negative"
            } else {
                "zero"
            }
            .to_string()
        });
        Ok(CorrelationTable {
            x_metric: x_metric.into(),
            y_metric: y_metric.into(),
            points,
            coefficient,
            sign,
            undefined: coefficient.is_none().then(|| "constant series".to_string()),
        })
    }

    /// Placeholder for a table that could not be formed.
    pub fn undefined(x_metric: &str, y_metric: &str, reason: String) -> Self {
        CorrelationTable {
            x_metric: x_metric.into(),
            y_metric: y_metric.into(),
            points: Vec::new(),
            coefficient: None,
            sign: None,
            undefined: Some(reason),
        }
    }
}

/// Rank correlation of per-class FN rate against mean selectivity, over the
/// classes that have both.
pub fn correlate_errors(
    errors: &BTreeMap<String, ClassErrors>,
    selectivity: &BTreeMap<String, f64>,
) -> Result<CorrelationTable> {
    let points = errors
        .iter()
        .filter_map(|(c, e)| {
            Some(CorrelationPoint {
                label: c.clone(),
                x: e.fn_rate?,
                y: *selectivity.get(c)?,
            })
        })
        .collect();
    CorrelationTable::from_points("fn_rate", "selectivity", points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_cases() {
        let x = [0.1, 0.5, 0.3];
        assert!((spearman(&x, &[1.0, 3.0, 2.0]).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[3.0, 1.0, 2.0]).unwrap().unwrap() + 1.0).abs() < 1e-12);
        // ranks (1,3,2) vs (2,1,3): d^2 = 1 + 4 + 1, rho = 1 - 6*6/(3*8)
        assert!((spearman(&x, &[0.2, 0.1, 0.4]).unwrap().unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(spearman(&x, &[0.5, 0.5, 0.5]).unwrap(), None);
        assert!(spearman(&x, &[1.0]).is_err());
    }

    #[test]
    fn table_flags_constant_selectivity() {
        let pts = |ys: [f64; 3]| {
            ys.iter()
                .enumerate()
                .map(|(i, &y)| CorrelationPoint {
                    label: i.to_string(),
                    x: i as f64,
                    y,
                })
                .collect::<Vec<_>>()
        };
        let t = CorrelationTable::from_points("fn_rate", "selectivity", pts([0.2; 3])).unwrap();
        assert!(t.coefficient.is_none() && t.undefined.is_some() && t.sign.is_none());
        let t = CorrelationTable::from_points("fn_rate", "selectivity", pts([0.3, 0.2, 0.1])).unwrap();
        assert_eq!(t.sign.as_deref(), Some("negative"));
        assert!(CorrelationTable::from_points("a", "b", pts([0.1, 0.2, 0.3])[..2].to_vec()).is_err());
    }
}
