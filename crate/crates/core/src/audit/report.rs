//! The bias report: pre/post metric bundles, deltas and verdicts.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::correlate::CorrelationTable;
use super::recalibrate::RecalibrationState;
use super::AuditConfig;
use crate::dataset::ClassDistribution;
use crate::error::{Error, Result};
use crate::loss::ClassWeights;
use crate::metrics::{MetricTable, TPErrorSet};
use crate::sampling::{AugmentPlan, ResamplePlan};

pub const REPORT_FORMAT: &str = "biaslens-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CostSensitive,
    Resample,
    Augment,
    Combined,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::CostSensitive, Strategy::Resample, Strategy::Augment, Strategy::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::CostSensitive => "cost_sensitive",
            Strategy::Resample => "resample",
            Strategy::Augment => "augment",
            Strategy::Combined => "combined",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerdictThresholds {
    /// A class improves only if its FN rate falls by at least this much.
    pub fn_rate_drop: f64,
    /// ... and its AP rises by at least this much.
    pub ap_gain: f64,
}

impl Default for VerdictThresholds {
    fn default() -> Self {
        VerdictThresholds {
            fn_rate_drop: 0.02,
            ap_gain: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Improved,
    Regressed,
    Unchanged,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Improved => "improved",
            Verdict::Regressed => "regressed",
            Verdict::Unchanged => "unchanged",
        })
    }
}

/// Improved iff FN rate fell and AP rose by the thresholds; regressed iff the
/// mirror image; unchanged otherwise (including a missing FN rate).
pub fn verdict(d_fn_rate: Option<f64>, d_ap: f64, t: &VerdictThresholds) -> Verdict {
    match d_fn_rate {
        Some(d) if d <= -t.fn_rate_drop && d_ap >= t.ap_gain => Verdict::Improved,
        Some(d) if d >= t.fn_rate_drop && d_ap <= -t.ap_gain => Verdict::Regressed,
        _ => Verdict::Unchanged,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub test_count: usize,
    /// Share of test samples classified correctly.
    pub recall: f64,
    /// Mean IoU of the predicted box, counted as 0 when the class is wrong, in percent.
    pub iou_pct: f64,
    pub ap: f64,
    /// This class's AP and TP errors combined with the NDS formula.
    pub nds: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub fp_rate: Option<f64>,
    pub fn_rate: Option<f64>,
    pub sensitivity: Option<f64>,
    pub selectivity: Option<f64>,
    /// ViT only: mean last-layer attention mass inside the box.
    pub attention_mass: Option<f64>,
    /// ViT only: mean input-patch relevance share inside the box.
    pub relevance_in_box: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    /// FNV-1a digest of the evaluated parameters.
    pub params_digest: String,
    pub train_records: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub map: f64,
    pub nds: f64,
    pub macro_iou: f64,
    pub macro_recall: f64,
    pub mean_tp_errors: TPErrorSet,
    pub iou_by_condition: MetricTable,
    /// Mean selectivity per layer and class on the test probe set.
    pub layer_selectivity: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationSection {
    pub strategy: Strategy,
    pub resample_plan: Option<ResamplePlan>,
    /// Loss weights used, in order; a single uniform entry means unweighted.
    pub weights_history: Vec<ClassWeights>,
    pub augment_plan: Option<AugmentPlan>,
    /// Geometric copies added one per record (non-attention path).
    pub geometric_copies: usize,
    pub train_distribution: ClassDistribution,
    pub recalibration: Option<RecalibrationState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub recall: f64,
    pub iou_pct: f64,
    pub ap: f64,
    pub fn_rate: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSection {
    pub per_class: BTreeMap<String, ClassDelta>,
    pub map: f64,
    pub nds: f64,
    pub macro_iou: f64,
    pub thresholds: VerdictThresholds,
}

impl DeltaSection {
    pub fn between(pre: &EvalSection, post: &EvalSection, thresholds: &VerdictThresholds) -> Self {
        let per_class = pre
            .per_class
            .iter()
            .filter_map(|(c, a)| {
                let b = post.per_class.get(c)?;
                let d_fn = a.fn_rate.zip(b.fn_rate).map(|(x, y)| y - x);
                let d_ap = b.ap - a.ap;
                Some((
                    c.clone(),
                    ClassDelta {
                        recall: b.recall - a.recall,
                        iou_pct: b.iou_pct - a.iou_pct,
                        ap: d_ap,
                        fn_rate: d_fn,
                        verdict: verdict(d_fn, d_ap, thresholds),
                    },
                ))
            })
            .collect();
        DeltaSection {
            per_class,
            map: post.map - pre.map,
            nds: post.nds - pre.nds,
            macro_iou: post.macro_iou - pre.macro_iou,
            thresholds: thresholds.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub format: String,
    pub version: u32,
    pub config: AuditConfig,
    pub classes: Vec<String>,
    pub dataset: ClassDistribution,
    /// `[train, val, test]` counts per class.
    pub split_counts: BTreeMap<String, [usize; 3]>,
    pub pre: EvalSection,
    pub correlation: CorrelationTable,
    pub mitigation: Option<MitigationSection>,
    pub post: Option<EvalSection>,
    pub deltas: Option<DeltaSection>,
}

impl BiasReport {
    /// JSON with every object's keys sorted, newline-terminated.
    pub fn to_canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: BiasReport = serde_json::from_str(text)?;
        if r.format != REPORT_FORMAT {
            return Err(Error::InvalidArgument(format!("not a bias report (format '{}')", r.format)));
        }
        if r.version != REPORT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported report version {}", r.version)));
        }
        Ok(r)
    }

    /// Human-readable summary.
    pub fn summary_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Bias report (seed {}, model {})", self.config.seed, self.config.model.kind());
        let _ = writeln!(out, "\nDataset: {} records", self.dataset.total);
        for (c, n) in &self.dataset.counts {
            let _ = writeln!(out, "  {c:<28} {n:>8}  {:>6.2}%", self.dataset.percentages[c]);
        }
        let section = |out: &mut String, title: &str, e: &EvalSection| {
            let _ = writeln!(
                out,
                "\n{title}: mAP {:.4}  NDS {:.4}  macro IoU {:.2}%  macro recall {:.4}",
                e.map, e.nds, e.macro_iou, e.macro_recall
            );
            let _ = writeln!(out, "  {:<28} {:>7} {:>7} {:>7} {:>5} {:>5} {:>8}", "class", "recall", "IoU%", "AP", "FP", "FN", "select.");
            for (c, m) in &e.per_class {
                let sel = m.selectivity.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    out,
                    "  {c:<28} {:>7.4} {:>7.2} {:>7.4} {:>5} {:>5} {:>8}",
                    m.recall, m.iou_pct, m.ap, m.false_positives, m.false_negatives, sel
                );
            }
        };
        section(&mut out, "Baseline", &self.pre);
        match self.correlation.coefficient {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "\nRank correlation {} vs {}: {r:.4} ({})",
                    self.correlation.x_metric,
                    self.correlation.y_metric,
                    self.correlation.sign.as_deref().unwrap_or("")
                );
            }
            None => {
                let _ = writeln!(
                    out,
                    "\nRank correlation {} vs {}: undefined ({})",
                    self.correlation.x_metric,
                    self.correlation.y_metric,
                    self.correlation.undefined.as_deref().unwrap_or("")
                );
            }
        }
        if let (Some(m), Some(post)) = (&self.mitigation, &self.post) {
            let _ = writeln!(out, "\nMitigation: {} ({} training records)", m.strategy, m.train_distribution.total);
            section(&mut out, "After mitigation", post);
        }
        if let Some(d) = &self.deltas {
            let _ = writeln!(
                out,
                "\nDeltas: mAP {:+.4}  NDS {:+.4}  macro IoU {:+.2}",
                d.map, d.nds, d.macro_iou
            );
            for (c, cd) in &d.per_class {
                let dfn = cd.fn_rate.map(|v| format!("{v:+.4}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    out,
                    "  {c:<28} recall {:+.4}  IoU {:+.2}  AP {:+.4}  FN rate {dfn}  -> {}",
                    cd.recall, cd.iou_pct, cd.ap, cd.verdict
                );
            }
        }
        out
    }
}
