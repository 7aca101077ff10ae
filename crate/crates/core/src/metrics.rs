//! Detection metrics: IoU, greedy matching, all-points AP, mAP, NDS and
//! per-class false-positive / false-negative tallies.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationRecord, BBox};
use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Names of the five true-positive error terms.
pub const TP_ERROR_NAMES: [&str; 5] = ["translation", "scale", "orientation", "velocity", "attribute"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub sample_id: String,
    pub class_label: String,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::InvalidRecord {
                sample_id: self.sample_id.clone(),
                line: None,
                message: "detection bbox must have x1 < x2 and y1 < y2".into(),
            });
        }
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidRecord {
                sample_id: self.sample_id.clone(),
                line: None,
                message: format!("score {} outside [0, 1]", self.score),
            });
        }
        Ok(())
    }
}

/// Reads detections from JSONL, one object per line.
pub fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        det.validate().map_err(|e| match e {
            Error::InvalidRecord { sample_id, message, .. } => Error::InvalidRecord {
                sample_id,
                line: Some(i + 1),
                message,
            },
            other => other,
        })?;
        out.push(det);
    }
    Ok(out)
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({}, {}, {}, {})",
                bx.x1, bx.y1, bx.x2, bx.y2
            )));
        }
    }
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Matching outcome for one class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMatch {
    /// TP flag per detection, in descending score order.
    pub flags: Vec<bool>,
    pub scores: Vec<f64>,
    /// Index into the input detection list, aligned with `flags`.
    pub det_index: Vec<usize>,
    /// Matched ground-truth index (into the input list) for TPs.
    pub gt_index: Vec<Option<usize>>,
    pub n_gt: usize,
    pub false_negatives: usize,
}

impl ClassMatch {
    pub fn true_positives(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn false_positives(&self) -> usize {
        self.flags.len() - self.true_positives()
    }

    /// `(detection index, ground-truth index)` of every TP.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.det_index.iter().zip(&self.gt_index).filter_map(|(&d, g)| g.map(|g| (d, g)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub per_class: BTreeMap<String, ClassMatch>,
    pub iou_threshold: f64,
}

/// Greedy matching: detections in descending score order (ties keep input
/// order) each take the highest-IoU unmatched ground truth of the same sample
/// and class when that IoU reaches `iou_threshold`; otherwise they are FPs.
pub fn match_detections(dets: &[Detection], gts: &[AnnotationRecord], iou_threshold: f64) -> Result<MatchResult> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "iou threshold {iou_threshold} outside (0, 1]"
        )));
    }
    for d in dets {
        d.validate()?;
    }
    for g in gts {
        if !g.bbox.is_valid() {
            return Err(Error::InvalidRecord {
                sample_id: g.sample_id.clone(),
                line: None,
                message: "ground-truth bbox is degenerate".into(),
            });
        }
    }
    let mut per_class: BTreeMap<String, ClassMatch> = BTreeMap::new();
    let mut groups: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        groups.entry((&g.sample_id, &g.class_label)).or_default().push(i);
        per_class.entry(g.class_label.clone()).or_default().n_gt += 1;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut taken = vec![false; gts.len()];
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = groups.get(&(d.sample_id.as_str(), d.class_label.as_str())) {
            for &gi in cands {
                if taken[gi] {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, &gts[gi].bbox);
                if v >= iou_threshold && best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
        }
        let cm = per_class.entry(d.class_label.clone()).or_default();
        cm.flags.push(best.is_some());
        cm.scores.push(d.score);
        cm.det_index.push(di);
        cm.gt_index.push(best.map(|(g, _)| g));
        if let Some((g, _)) = best {
            taken[g] = true;
        }
    }
    for cm in per_class.values_mut() {
        cm.false_negatives = cm.n_gt - cm.true_positives();
    }
    Ok(MatchResult {
        per_class,
        iou_threshold,
    })
}

/// Area under the precision/recall curve with right-max interpolated precision,
/// swept over `flags` in score order.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Empty("average precision needs at least one ground truth".into()));
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(flags.len());
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut running_max: f64 = 0.0;
    let mut interp = vec![0.0; points.len()];
    for k in (0..points.len()).rev() {
        running_max = running_max.max(points[k].1);
        interp[k] = running_max;
    }
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_recall) * interp[k];
        prev_recall = r;
    }
    Ok(ap)
}

/// AP of every class with at least one ground truth; the others are listed separately.
pub fn per_class_ap(m: &MatchResult) -> (BTreeMap<String, f64>, Vec<String>) {
    let mut aps = BTreeMap::new();
    let mut skipped = Vec::new();
    for (class, cm) in &m.per_class {
        match average_precision(&cm.flags, cm.n_gt) {
            Ok(ap) => {
                aps.insert(class.clone(), ap);
            }
            Err(_) => skipped.push(class.clone()),
        }
    }
    (aps, skipped)
}

/// Unweighted mean of per-class APs.
pub fn mean_ap(per_class: &BTreeMap<String, f64>) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::Empty("mean AP over zero classes".into()));
    }
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Named mean true-positive error terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TPErrorSet {
    pub entries: Vec<(String, f64)>,
}

impl TPErrorSet {
    /// The five standard terms with the given values.
    pub fn new(values: [f64; 5]) -> Self {
        TPErrorSet {
            entries: TP_ERROR_NAMES.iter().zip(values).map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }

    /// Translation and scale measured, the other three at 1 (no contribution).
    pub fn planar(translation: f64, scale: f64) -> Self {
        Self::new([translation, scale, 1.0, 1.0, 1.0])
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// `(5 mAP + sum(1 - min(1, mTP))) / 10`.
pub fn nds(map: f64, tps: &TPErrorSet) -> Result<f64> {
    if !(0.0..=1.0).contains(&map) {
        return Err(Error::InvalidArgument(format!("mAP {map} outside [0, 1]")));
    }
    let mut s = 5.0 * map;
    for (name, v) in &tps.entries {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::InvalidArgument(format!("TP error '{name}' = {v} must be finite and >= 0")));
        }
        s += 1.0 - v.min(1.0);
    }
    Ok(s / 10.0)
}

/// Distance between centers divided by the ground-truth diagonal.
pub fn translation_error(pred: &BBox, gt: &BBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let diag = gt.width().hypot(gt.height());
    (px - gx).hypot(py - gy) / diag
}

/// `1 - IoU` after aligning both boxes on a common center.
pub fn scale_error(pred: &BBox, gt: &BBox) -> f64 {
    let inter = pred.width().min(gt.width()) * pred.height().min(gt.height());
    1.0 - inter / (pred.area() + gt.area() - inter)
}

/// Mean translation/scale error over each class's TPs; classes without TPs get 1.
pub fn tp_errors(m: &MatchResult, dets: &[Detection], gts: &[AnnotationRecord]) -> BTreeMap<String, TPErrorSet> {
    m.per_class
        .iter()
        .map(|(class, cm)| {
            let pairs: Vec<_> = cm.pairs().collect();
            let set = if pairs.is_empty() {
                TPErrorSet::planar(1.0, 1.0)
            } else {
                let n = pairs.len() as f64;
                let t = pairs.iter().map(|&(d, g)| translation_error(&dets[d].bbox, &gts[g].bbox)).sum::<f64>() / n;
                let s = pairs.iter().map(|&(d, g)| scale_error(&dets[d].bbox, &gts[g].bbox)).sum::<f64>() / n;
                TPErrorSet::planar(t, s)
            };
            (class.clone(), set)
        })
        .collect()
}

/// Mean of each TP error term across classes.
pub fn mean_tp_errors(per_class: &BTreeMap<String, TPErrorSet>) -> Result<TPErrorSet> {
    let first = per_class.values().next().ok_or_else(|| Error::Empty("TP errors over zero classes".into()))?;
    let n = per_class.len() as f64;
    Ok(TPErrorSet {
        entries: first
            .entries
            .iter()
            .enumerate()
            .map(|(i, (name, _))| (name.clone(), per_class.values().map(|s| s.entries[i].1).sum::<f64>() / n))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassErrors {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub detections: usize,
    pub ground_truths: usize,
    /// FP per detection, `None` without detections.
    pub fp_rate: Option<f64>,
    /// FN per ground truth, `None` without ground truths.
    pub fn_rate: Option<f64>,
}

pub fn per_class_errors(m: &MatchResult) -> BTreeMap<String, ClassErrors> {
    m.per_class
        .iter()
        .map(|(class, cm)| {
            let fp = cm.false_positives();
            let det = cm.flags.len();
            (
                class.clone(),
                ClassErrors {
                    true_positives: cm.true_positives(),
                    false_positives: fp,
                    false_negatives: cm.false_negatives,
                    detections: det,
                    ground_truths: cm.n_gt,
                    fp_rate: (det > 0).then(|| fp as f64 / det as f64),
                    fn_rate: (cm.n_gt > 0).then(|| cm.false_negatives as f64 / cm.n_gt as f64),
                },
            )
        })
        .collect()
}

/// Per-class values by condition row, with an aggregate column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: String,
    pub classes: Vec<String>,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub condition: String,
    pub values: Vec<Option<f64>>,
    pub aggregate: Option<f64>,
}

impl MetricTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,condition");
        for c in &self.classes {
            let _ = write!(out, ",{c}");
        }
        out.push_str(",aggregate\n");
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        for r in &self.rows {
            let _ = write!(out, "{},{}", self.metric, r.condition);
            for v in &r.values {
                let _ = write!(out, ",{}", cell(*v));
            }
            let _ = writeln!(out, ",{}", cell(r.aggregate));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Condition;

    fn gt(sample: &str, class: &str, b: [f64; 4]) -> AnnotationRecord {
        AnnotationRecord {
            sample_id: sample.into(),
            class_label: class.into(),
            bbox: b.into(),
            condition: Condition::Normal,
            image_ref: None,
            image_size: (100, 100),
        }
    }

    fn det(sample: &str, class: &str, b: [f64; 4], score: f64) -> Detection {
        Detection {
            sample_id: sample.into(),
            class_label: class.into(),
            bbox: b.into(),
            score,
        }
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)).unwrap(), 0.0);
        assert!((iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap() - 1.0 / 7.0).abs() < 1e-12);
        assert!(iou(&a, &BBox::new(1.0, 1.0, 1.0, 3.0)).is_err());
    }

    #[test]
    fn ap_hand_example() {
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true, true], 2).unwrap(), 1.0);
        assert_eq!(average_precision(&[false, false], 2).unwrap(), 0.0);
        assert!(average_precision(&[true], 0).is_err());
    }

    #[test]
    fn map_of_table_row() {
        let m: BTreeMap<String, f64> = [("a", 86.3), ("b", 54.7), ("c", 77.8)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let v = mean_ap(&m).unwrap();
        assert!((v - 72.93).abs() < 0.005);
        assert!(mean_ap(&BTreeMap::new()).is_err());
    }

    #[test]
    fn nds_cases() {
        assert_eq!(nds(1.0, &TPErrorSet::new([0.0; 5])).unwrap(), 1.0);
        assert_eq!(nds(0.0, &TPErrorSet::new([1.0, 2.0, 1.0, 5.0, 1.0])).unwrap(), 0.0);
        let v = nds(0.6, &TPErrorSet::new([0.2, 0.4, 1.5, 0.0, 1.0])).unwrap();
        assert!((v - 0.54).abs() < 1e-12);
        assert!(nds(0.5, &TPErrorSet::new([-0.1, 0.0, 0.0, 0.0, 0.0])).is_err());
        assert!(nds(1.5, &TPErrorSet::new([0.0; 5])).is_err());
    }

    #[test]
    fn two_detections_on_one_truth() {
        let gts = vec![gt("s", "car", [10.0, 10.0, 20.0, 20.0])];
        let dets = vec![
            det("s", "car", [10.0, 10.0, 20.0, 21.0], 0.6),
            det("s", "car", [10.0, 10.0, 20.0, 20.0], 0.9),
        ];
        let m = match_detections(&dets, &gts, 0.5).unwrap();
        let cm = &m.per_class["car"];
        assert_eq!(cm.flags, vec![true, false]);
        assert_eq!(cm.det_index, vec![1, 0]);
        assert_eq!(cm.false_negatives, 0);
    }

    #[test]
    fn no_detections_are_all_misses() {
        let gts = vec![gt("a", "x", [0.0, 0.0, 5.0, 5.0]), gt("b", "x", [0.0, 0.0, 5.0, 5.0])];
        let m = match_detections(&[], &gts, 0.5).unwrap();
        assert_eq!(m.per_class["x"].false_negatives, 2);
        assert!(match_detections(&[], &gts, 0.0).is_err());
    }

    #[test]
    fn detections_only_match_same_sample_and_class() {
        let gts = vec![gt("a", "x", [0.0, 0.0, 5.0, 5.0])];
        let dets = vec![det("b", "x", [0.0, 0.0, 5.0, 5.0], 0.9), det("a", "y", [0.0, 0.0, 5.0, 5.0], 0.8)];
        let m = match_detections(&dets, &gts, 0.5).unwrap();
        let e = per_class_errors(&m);
        assert_eq!(e["x"].false_positives, 1);
        assert_eq!(e["x"].false_negatives, 1);
        assert_eq!(e["y"].false_positives, 1);
        assert_eq!(e["y"].fn_rate, None);
    }

    #[test]
    fn tp_error_terms() {
        let g = BBox::new(0.0, 0.0, 3.0, 4.0);
        assert_eq!(translation_error(&g, &g), 0.0);
        assert!((translation_error(&BBox::new(3.0, 4.0, 6.0, 8.0), &g) - 1.0).abs() < 1e-12);
        assert!(scale_error(&g, &g).abs() < 1e-12);
        let half = BBox::new(0.0, 0.0, 1.5, 4.0);
        assert!((scale_error(&half, &g) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn table_csv_layout() {
        let t = MetricTable {
            metric: "recall".into(),
            classes: vec!["a".into(), "b".into()],
            rows: vec![MetricRow {
                condition: "Normal".into(),
                values: vec![Some(50.0), None],
                aggregate: Some(50.0),
            }],
        };
        assert_eq!(t.to_csv(), "metric,condition,a,b,aggregate\nrecall,Normal,50.00,,50.00\n");
    }
}
