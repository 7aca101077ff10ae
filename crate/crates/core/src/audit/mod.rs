//! The audit loop: split the data, train a baseline, assess its bias, apply a
//! mitigation strategy, retrain and reassess.

mod correlate;
mod recalibrate;
mod report;
mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use correlate::{average_ranks, correlate_errors, spearman, CorrelationPoint, CorrelationTable};
pub use recalibrate::{
    recalibrate, recall_gap, RecalibrationConfig, RecalibrationHook, RecalibrationState, SharedWeights,
};
pub use report::{
    verdict, BiasReport, ClassDelta, ClassMetrics, DeltaSection, EvalSection, MitigationSection, Strategy, Verdict,
    VerdictThresholds, REPORT_FORMAT, REPORT_VERSION,
};
pub use synthetic::{generate, largest_remainder, SyntheticConfig, SYNTHETIC_CLASSES};

use crate::behavior::{
    compute_behavior, extract_attention, lrp_propagate, relevance_in_box, BehaviorConfig, ProbeSet,
};
use crate::dataset::{
    compute_distribution, load_manifest, stratified_split, AnnotationRecord, BBox, Condition, DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::loss::{compute_class_weights, ClassWeights, Objective, WeightedCrossEntropy, LOG_EPS};
use crate::metrics::{
    iou, match_detections, mean_ap, mean_tp_errors, nds, per_class_ap, per_class_errors, tp_errors, Detection,
    MetricRow, MetricTable, DEFAULT_IOU_THRESHOLD,
};
use crate::nn::{
    per_class_recall, predict, train, Architecture, MetricTrace, Mode, Model, ModelKind, NoHook, TrainConfig, TrainSet,
    EVAL_BATCH,
};
use crate::sampling::{
    apply_augment_with_image, attention_guided_augment_plan, lrp_informed_sample_plan, op_for_record,
    resample_with_indices, select_sources, stable_hash, AttentionPlanConfig, AugmentOp, AugmentPlan, RelevanceStat,
    ResamplePlan, DEFAULT_TAU_REL,
};

/// Where the audited records and images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// A JSONL manifest whose `image_ref`s are PGM files relative to its directory.
    Manifest(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<LabeledDataset> {
        match self {
            DataSource::Synthetic(cfg) => generate(cfg),
            DataSource::Manifest(path) => {
                let manifest = load_manifest(path)?;
                LabeledDataset::load(manifest, path.parent().unwrap_or(Path::new(".")))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditOptions {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub iou_threshold: f64,
    pub behavior: BehaviorConfig,
    pub verdict: VerdictThresholds,
    pub attention_plan: AttentionPlanConfig,
    pub tau_rel: f64,
    pub recalibration: RecalibrationConfig,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            train_fraction: 0.70,
            val_fraction: 0.15,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            behavior: BehaviorConfig::default(),
            verdict: VerdictThresholds::default(),
            attention_plan: AttentionPlanConfig::default(),
            tau_rel: DEFAULT_TAU_REL,
            recalibration: RecalibrationConfig::default(),
        }
    }
}

/// Everything that determines an audit's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub seed: u64,
    pub source: DataSource,
    pub model: Architecture,
    pub train: TrainConfig,
    #[serde(default)]
    pub options: AuditOptions,
}

impl AuditConfig {
    /// Default architecture and training settings for `kind`.
    pub fn new(source: DataSource, kind: ModelKind, n_classes: usize, seed: u64) -> Self {
        AuditConfig {
            seed,
            source,
            model: Architecture::default_for(kind, n_classes),
            train: TrainConfig::default_for(kind, seed),
            options: AuditOptions::default(),
        }
    }

    /// Eight hex digits identifying the configuration.
    pub fn hash8(&self) -> Result<String> {
        let json = serde_json::to_string(&serde_json::to_value(self)?)?;
        Ok(format!("{:08x}", stable_hash(0, &json) as u32))
    }

    /// `seed{seed}-{hash8}`.
    pub fn run_dir_name(&self) -> Result<String> {
        Ok(format!("seed{}-{}", self.seed, self.hash8()?))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let o = &self.options;
        if !(o.train_fraction > 0.0 && o.val_fraction > 0.0 && o.train_fraction + o.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions train={} val={} must be positive and leave a test share",
                o.train_fraction, o.val_fraction
            )));
        }
        if !(o.iou_threshold > 0.0 && o.iou_threshold <= 1.0) {
            return Err(Error::InvalidArgument(format!("iou threshold {} outside (0, 1]", o.iou_threshold)));
        }
        if o.behavior.probe_per_class == 0 {
            return Err(Error::InvalidArgument("probe_per_class must be positive".into()));
        }
        if !(o.recalibration.eta >= 0.0 && o.recalibration.epsilon_gap >= 0.0) {
            return Err(Error::InvalidArgument("recalibration eta and epsilon_gap must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sub-seed for one purpose (split, init, probe, ...) of a run seeded with `seed`.
pub fn derive(seed: u64, purpose: &str) -> u64 {
    stable_hash(seed, purpose)
}

/// FNV-1a over the little-endian parameter bytes, as 16 hex digits.
pub fn params_digest(params: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Records with their decoded images, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<GrayImage>,
}

impl LabeledDataset {
    pub fn new(manifest: DatasetManifest, images: Vec<GrayImage>) -> Result<Self> {
        if manifest.len() != images.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![manifest.len()],
                actual: vec![images.len()],
            });
        }
        for (r, img) in manifest.records.iter().zip(&images) {
            check_size(r, img)?;
        }
        Ok(LabeledDataset { manifest, images })
    }

    /// Reads every record's `image_ref` (a PGM path relative to `base`).
    pub fn load(manifest: DatasetManifest, base: &Path) -> Result<Self> {
        let mut images = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let rel = r.image_ref.as_ref().ok_or_else(|| Error::InvalidRecord {
                sample_id: r.sample_id.clone(),
                line: None,
                message: "record has no image_ref".into(),
            })?;
            let img = GrayImage::read_pgm(&base.join(rel))?;
            check_size(r, &img)?;
            images.push(img);
        }
        Ok(LabeledDataset { manifest, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        LabeledDataset {
            manifest: self.manifest.subset(idx),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }

    pub fn push(&mut self, record: AnnotationRecord, image: GrayImage) {
        self.manifest.taxonomy.insert(record.class_label.clone());
        self.manifest.records.push(record);
        self.images.push(image);
    }

    /// Applies a resampling plan to records and images alike.
    pub fn resample(&self, plan: &ResamplePlan) -> Result<Self> {
        let (manifest, idx) = resample_with_indices(&self.manifest, plan)?;
        Ok(LabeledDataset {
            manifest,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
        })
    }

    /// Model inputs resized to `(height, width)` with box targets normalized to
    /// `(cx, cy, w, h)` in `[0, 1]`.
    pub fn to_train_set(&self, classes: &[String], (height, width): (usize, usize)) -> Result<TrainSet> {
        let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut pixels = Vec::with_capacity(self.len() * height * width);
        let mut labels = Vec::with_capacity(self.len());
        let mut boxes = Vec::with_capacity(self.len());
        for (r, img) in self.manifest.records.iter().zip(&self.images) {
            labels.push(*index.get(r.class_label.as_str()).ok_or_else(|| Error::UnknownClass(r.class_label.clone()))?);
            pixels.extend_from_slice(&img.resize(width, height).data);
            let (w, h) = (r.image_size.0 as f64, r.image_size.1 as f64);
            let (cx, cy) = r.bbox.center();
            boxes.push([cx / w, cy / h, r.bbox.width() / w, r.bbox.height() / h]);
        }
        TrainSet::new(classes.to_vec(), (height, width), pixels, labels, boxes)
    }
}

fn check_size(r: &AnnotationRecord, img: &GrayImage) -> Result<()> {
    if (img.width as u32, img.height as u32) != r.image_size {
        return Err(Error::InvalidRecord {
            sample_id: r.sample_id.clone(),
            line: None,
            message: format!(
                "image is {}x{} but the record says {}x{}",
                img.width, img.height, r.image_size.0, r.image_size.1
            ),
        });
    }
    Ok(())
}

/// Pixel box from a normalized `(cx, cy, w, h)` prediction, clipped to the image
/// and kept non-degenerate.
pub fn decode_box(b: [f64; 4], (w, h): (u32, u32)) -> BBox {
    let (w, h) = (w as f64, h as f64);
    let axis = |c: f64, s: f64, size: f64| {
        let mut lo = ((c - s / 2.0) * size).clamp(0.0, size);
        let mut hi = ((c + s / 2.0) * size).clamp(0.0, size);
        let min = 1e-3;
        if hi - lo < min {
            hi = (lo + min).min(size);
            lo = hi - min;
        }
        (lo, hi)
    };
    let (x1, x2) = axis(b[0], b[2], w);
    let (y1, y2) = axis(b[1], b[3], h);
    BBox::new(x1, y1, x2, y2)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per-sample in-box relevance and loss for a ViT, plus the predicted classes.
pub fn relevance_stats(model: &Model, set: &TrainSet, records: &[AnnotationRecord]) -> Result<(Vec<RelevanceStat>, Vec<usize>)> {
    let mut stats = Vec::with_capacity(set.len());
    let mut predicted = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let pass = model.forward(&set.batch(chunk)?, Mode::Eval)?;
        let preds = pass.predictions();
        for (s, &i) in chunk.iter().enumerate() {
            let map = lrp_propagate(model, &pass, s, Some(preds[s]))?;
            let p = pass.probs.row(s)[set.labels[i]].max(LOG_EPS);
            stats.push(RelevanceStat {
                sample_id: records[i].sample_id.clone(),
                in_box_fraction: relevance_in_box(model, &map, &records[i])?,
                loss: -p.ln(),
            });
        }
        predicted.extend(preds);
    }
    Ok((stats, predicted))
}

fn train_objective(model: &mut Model, data: &TrainSet, val: &TrainSet, cfg: &TrainConfig, obj: &dyn Objective) -> Result<MetricTrace> {
    train(model, data, Some(val), cfg, obj, &mut NoHook)
}

/// Full evaluation of `model` on a labeled test split.
pub fn evaluate(
    model: &Model,
    test: &LabeledDataset,
    classes: &[String],
    options: &AuditOptions,
    seed: u64,
    trace: Option<&MetricTrace>,
    train_records: usize,
) -> Result<EvalSection> {
    let set = test.to_train_set(classes, model.architecture().input_size())?;
    let records = &test.manifest.records;
    let preds = predict(model, &set)?;
    let mut dets = Vec::with_capacity(set.len());
    let mut sample_iou = Vec::with_capacity(set.len());
    for (i, r) in records.iter().enumerate() {
        let bbox = decode_box(preds.boxes[i], r.image_size);
        let score = preds.prob_row(i).iter().copied().fold(0.0, f64::max);
        sample_iou.push(if preds.classes[i] == set.labels[i] { iou(&bbox, &r.bbox)? } else { 0.0 });
        dets.push(Detection {
            sample_id: r.sample_id.clone(),
            class_label: classes[preds.classes[i]].clone(),
            bbox,
            score,
        });
    }
    let matched = match_detections(&dets, records, options.iou_threshold)?;
    let (ap, _) = per_class_ap(&matched);
    let errors = per_class_errors(&matched);
    let tps = tp_errors(&matched, &dets, records);
    let recall = per_class_recall(&set.labels, &preds.classes, classes.len());

    let probe = ProbeSet::from_set(&set, options.behavior.probe_per_class, derive(seed, "probe"))?;
    let epochs = trace.map_or(0, |t| t.epochs.len());
    let behavior = compute_behavior(model, &probe, epochs, &options.behavior)?;
    let selectivity = behavior.class_mean_selectivity();
    let sensitivity = behavior.class_mean_sensitivity();

    let (mass, relevance) = if model.kind() == ModelKind::TinyVit {
        let all: Vec<usize> = (0..set.len()).collect();
        let summary = extract_attention(model, &set.batch(&all)?, records)?;
        let (stats, _) = relevance_stats(model, &set, records)?;
        let mut mass: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut rel: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            mass.entry(r.class_label.clone()).or_default().push(summary.sample_mass[i]);
            rel.entry(r.class_label.clone()).or_default().push(stats[i].in_box_fraction);
        }
        (Some(mass), Some(rel))
    } else {
        (None, None)
    };

    let mut per_class = BTreeMap::new();
    for (ci, c) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == ci).collect();
        let iou_pct = 100.0 * mean(&members.iter().map(|&i| sample_iou[i]).collect::<Vec<_>>()).unwrap_or(0.0);
        let e = errors.get(c).copied().unwrap_or_default();
        let ap_c = ap.get(c).copied().unwrap_or(0.0);
        let tp_c = tps.get(c).cloned().unwrap_or_else(|| crate::metrics::TPErrorSet::planar(1.0, 1.0));
        per_class.insert(
            c.clone(),
            ClassMetrics {
                test_count: members.len(),
                recall: recall[ci].unwrap_or(0.0),
                iou_pct,
                ap: ap_c,
                nds: nds(ap_c, &tp_c)?,
                true_positives: e.true_positives,
                false_positives: e.false_positives,
                false_negatives: e.false_negatives,
                fp_rate: e.fp_rate,
                fn_rate: e.fn_rate,
                sensitivity: sensitivity.get(c).copied(),
                selectivity: selectivity.get(c).copied(),
                attention_mass: mass.as_ref().and_then(|m| mean(m.get(c)?)),
                relevance_in_box: relevance.as_ref().and_then(|m| mean(m.get(c)?)),
            },
        );
    }

    let mut rows = Vec::new();
    for cond in Condition::ALL {
        let values: Vec<Option<f64>> = (0..classes.len())
            .map(|ci| {
                let v: Vec<f64> = (0..set.len())
                    .filter(|&i| set.labels[i] == ci && records[i].condition == cond)
                    .map(|i| 100.0 * sample_iou[i])
                    .collect();
                mean(&v)
            })
            .collect();
        if values.iter().all(Option::is_none) {
            continue;
        }
        let present: Vec<f64> = values.iter().flatten().copied().collect();
        rows.push(MetricRow {
            condition: cond.to_string(),
            aggregate: mean(&present),
            values,
        });
    }

    let map = mean_ap(&ap)?;
    let mean_tp = mean_tp_errors(&tps)?;
    let macro_iou = mean(&per_class.values().map(|m: &ClassMetrics| m.iou_pct).collect::<Vec<_>>()).unwrap_or(0.0);
    let macro_recall = mean(&per_class.values().map(|m: &ClassMetrics| m.recall).collect::<Vec<_>>()).unwrap_or(0.0);
    Ok(EvalSection {
        params_digest: params_digest(model.params()),
        train_records,
        epochs,
        final_loss: trace.and_then(|t| t.last()).map_or(0.0, |e| e.loss),
        per_class,
        map,
        nds: nds(map, &mean_tp)?,
        macro_iou,
        macro_recall,
        mean_tp_errors: mean_tp,
        iou_by_condition: MetricTable {
            metric: "iou_pct".into(),
            classes: classes.to_vec(),
            rows,
        },
        layer_selectivity: behavior.layer_mean_selectivity(),
    })
}

/// A completed pre-mitigation audit with what mitigation needs to continue.
#[derive(Debug, Clone)]
pub struct AuditRun {
    pub config: AuditConfig,
    pub data: LabeledDataset,
    pub split: Split,
    pub classes: Vec<String>,
    pub baseline: Model,
    pub baseline_trace: Option<MetricTrace>,
    pub report: BiasReport,
}

impl AuditRun {
    pub fn train_data(&self) -> LabeledDataset {
        self.data.subset(&self.split.train)
    }

    pub fn val_data(&self) -> LabeledDataset {
        self.data.subset(&self.split.val)
    }

    pub fn test_data(&self) -> LabeledDataset {
        self.data.subset(&self.split.test)
    }
}

struct Prepared {
    classes: Vec<String>,
    split: Split,
    split_counts: BTreeMap<String, [usize; 3]>,
}

fn prepare(config: &AuditConfig, data: &LabeledDataset) -> Result<Prepared> {
    config.validate()?;
    let classes: Vec<String> = data.manifest.taxonomy.iter().cloned().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument(format!("an audit needs at least 2 classes, found {}", classes.len())));
    }
    if config.model.n_classes() != classes.len() {
        return Err(Error::InvalidArgument(format!(
            "model predicts {} classes but the data has {}",
            config.model.n_classes(),
            classes.len()
        )));
    }
    let o = &config.options;
    let split = stratified_split(&data.manifest, o.train_fraction, o.val_fraction, derive(config.seed, "split"))?;
    let mut split_counts = BTreeMap::new();
    for c in &classes {
        let count = |idx: &[usize]| idx.iter().filter(|&&i| &data.manifest.records[i].class_label == c).count();
        let counts = [count(&split.train), count(&split.val), count(&split.test)];
        for (name, n) in ["train", "validation", "test"].iter().zip(counts) {
            if n == 0 {
                return Err(Error::Empty(format!("class '{c}' has no {name} samples after stratification")));
            }
        }
        split_counts.insert(c.clone(), counts);
    }
    Ok(Prepared {
        classes,
        split,
        split_counts,
    })
}

/// Trains the unweighted baseline and fills the pre-mitigation report.
pub fn run_audit(config: &AuditConfig, data: LabeledDataset) -> Result<AuditRun> {
    let prep = prepare(config, &data)?;
    let train_ds = data.subset(&prep.split.train);
    let input = config.model.input_size();
    let train_set = train_ds.to_train_set(&prep.classes, input)?;
    let val_set = data.subset(&prep.split.val).to_train_set(&prep.classes, input)?;
    let mut model = Model::new(config.model.clone(), derive(config.seed, "init"))?;
    let objective = WeightedCrossEntropy::unweighted(prep.classes.len());
    let trace = train_objective(&mut model, &train_set, &val_set, &config.train, &objective)?;
    finish_audit(config, data, prep, model, Some(trace))
}

/// Rebuilds an audit from its report and the stored baseline parameters, checking
/// that they match.
pub fn resume_audit(report: BiasReport, baseline: Model, data: LabeledDataset) -> Result<AuditRun> {
    let config = report.config.clone();
    if params_digest(baseline.params()) != report.pre.params_digest {
        return Err(Error::InvalidArgument(
            "baseline snapshot does not match the report's parameter digest".into(),
        ));
    }
    let prep = prepare(&config, &data)?;
    Ok(AuditRun {
        config,
        data,
        split: prep.split,
        classes: prep.classes,
        baseline,
        baseline_trace: None,
        report,
    })
}

fn finish_audit(config: &AuditConfig, data: LabeledDataset, prep: Prepared, model: Model, trace: Option<MetricTrace>) -> Result<AuditRun> {
    let test = data.subset(&prep.split.test);
    let pre = evaluate(
        &model,
        &test,
        &prep.classes,
        &config.options,
        config.seed,
        trace.as_ref(),
        prep.split.train.len(),
    )?;
    let errors: BTreeMap<_, _> = pre
        .per_class
        .iter()
        .map(|(c, m)| {
            (
                c.clone(),
                crate::metrics::ClassErrors {
                    true_positives: m.true_positives,
                    false_positives: m.false_positives,
                    false_negatives: m.false_negatives,
                    detections: m.true_positives + m.false_positives,
                    ground_truths: m.test_count,
                    fp_rate: m.fp_rate,
                    fn_rate: m.fn_rate,
                },
            )
        })
        .collect();
    let selectivity: BTreeMap<String, f64> = pre
        .per_class
        .iter()
        .filter_map(|(c, m)| Some((c.clone(), m.selectivity?)))
        .collect();
    let correlation = correlate_errors(&errors, &selectivity)
        .unwrap_or_else(|e| CorrelationTable::undefined("fn_rate", "selectivity", e.to_string()));
    let report = BiasReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config: config.clone(),
        classes: prep.classes.clone(),
        dataset: compute_distribution(&data.manifest)?,
        split_counts: prep.split_counts,
        pre,
        correlation,
        mitigation: None,
        post: None,
        deltas: None,
    };
    Ok(AuditRun {
        config: config.clone(),
        data,
        split: prep.split,
        classes: prep.classes,
        baseline: model,
        baseline_trace: trace,
        report,
    })
}

/// Outcome of a mitigation: the pre+post report and the retrained model.
#[derive(Debug, Clone)]
pub struct MitigationRun {
    pub report: BiasReport,
    pub model: Model,
    pub trace: MetricTrace,
    pub train_data: LabeledDataset,
}

/// Attention-guided copies plus relevance-informed duplicates, planned with `model`.
pub fn attention_augment(
    model: &Model,
    data: &LabeledDataset,
    classes: &[String],
    options: &AuditOptions,
    seed: u64,
) -> Result<(LabeledDataset, AugmentPlan)> {
    if model.kind() != ModelKind::TinyVit {
        return Err(Error::UnsupportedArchitecture(format!(
            "attention-guided augmentation needs tiny_vit attention maps, the model is {}",
            model.kind()
        )));
    }
    let set = data.to_train_set(classes, model.architecture().input_size())?;
    let records = &data.manifest.records;
    let all: Vec<usize> = (0..set.len()).collect();
    let summary = extract_attention(model, &set.batch(&all)?, records)?;
    let dist = compute_distribution(&data.manifest)?;
    let requests = attention_guided_augment_plan(&summary, &dist, &options.attention_plan)?;
    let mut out = data.clone();
    for req in &requests {
        for i in select_sources(&data.manifest, req, derive(seed, "augment")) {
            let (r, img) = apply_augment_with_image(&records[i], &data.images[i], req.op)?;
            out.push(r, img);
        }
    }
    let (stats, predicted) = relevance_stats(model, &set, records)?;
    let wrong: Vec<String> = (0..set.len())
        .filter(|&i| predicted[i] != set.labels[i])
        .map(|i| records[i].sample_id.clone())
        .collect();
    let ids = lrp_informed_sample_plan(&stats, &wrong, options.tau_rel);
    let first: BTreeMap<&str, usize> = records
        .iter()
        .enumerate()
        .rev()
        .map(|(i, r)| (r.sample_id.as_str(), i))
        .collect();
    for id in &ids {
        let i = first[id.as_str()];
        out.push(records[i].clone(), data.images[i].clone());
    }
    Ok((
        out,
        AugmentPlan {
            requests,
            oversample_ids: ids,
        },
    ))
}

/// One geometric copy of every record, the op chosen from `(seed, sample_id)`.
pub fn geometric_copies(data: &LabeledDataset, seed: u64) -> Result<LabeledDataset> {
    let mut out = data.clone();
    for (r, img) in data.manifest.records.iter().zip(&data.images) {
        let op = op_for_record(seed, &r.sample_id, &AugmentOp::GEOMETRIC)?;
        let (r2, img2) = apply_augment_with_image(r, img, op)?;
        out.push(r2, img2);
    }
    Ok(out)
}

/// Applies `strategy` to the training split, retrains from the baseline's seed
/// and configuration, and appends post metrics, deltas and verdicts.
pub fn run_mitigation(run: &AuditRun, strategy: Strategy) -> Result<MitigationRun> {
    let cfg = &run.config;
    let classes = &run.classes;
    let mut train_ds = run.train_data();
    let mut resample_plan = None;
    let mut augment_plan = None;
    let mut geometric = 0;
    let mut weights = ClassWeights::uniform(classes)?;
    match strategy {
        Strategy::CostSensitive => {
            weights = compute_class_weights(&compute_distribution(&train_ds.manifest)?, classes)?;
        }
        Strategy::Resample => {
            let plan = ResamplePlan::to_max(&train_ds.manifest, derive(cfg.seed, "resample"))?;
            train_ds = train_ds.resample(&plan)?;
            resample_plan = Some(plan);
        }
        Strategy::Augment => {
            let (ds, plan) = attention_augment(&run.baseline, &train_ds, classes, &cfg.options, cfg.seed)?;
            train_ds = ds;
            augment_plan = Some(plan);
        }
        Strategy::Combined => {
            let plan = ResamplePlan::to_median(&train_ds.manifest, derive(cfg.seed, "resample"))?;
            train_ds = train_ds.resample(&plan)?;
            resample_plan = Some(plan);
            if run.baseline.kind() == ModelKind::TinyVit {
                let (ds, plan) = attention_augment(&run.baseline, &train_ds, classes, &cfg.options, cfg.seed)?;
                train_ds = ds;
                augment_plan = Some(plan);
            } else {
                geometric = train_ds.len();
                train_ds = geometric_copies(&train_ds, derive(cfg.seed, "geometric"))?;
            }
            weights = compute_class_weights(&compute_distribution(&train_ds.manifest)?, classes)?;
        }
    }
    let objective = WeightedCrossEntropy::from_weights(&weights, classes)?;
    let mitigation = MitigationSection {
        strategy,
        resample_plan,
        weights_history: vec![weights],
        augment_plan,
        geometric_copies: geometric,
        train_distribution: compute_distribution(&train_ds.manifest)?,
        recalibration: None,
    };
    retrain(run, train_ds, &objective, &mut NoHook, mitigation)
}

fn retrain(
    run: &AuditRun,
    train_ds: LabeledDataset,
    objective: &dyn Objective,
    hook: &mut dyn crate::nn::EpochHook,
    mitigation: MitigationSection,
) -> Result<MitigationRun> {
    let cfg = &run.config;
    let input = cfg.model.input_size();
    let train_set = train_ds.to_train_set(&run.classes, input)?;
    let val_set = run.val_data().to_train_set(&run.classes, input)?;
    let mut model = Model::new(cfg.model.clone(), derive(cfg.seed, "init"))?;
    let trace = train(&mut model, &train_set, Some(&val_set), &cfg.train, objective, hook)?;
    let post = evaluate(
        &model,
        &run.test_data(),
        &run.classes,
        &cfg.options,
        cfg.seed,
        Some(&trace),
        train_ds.len(),
    )?;
    let mut report = run.report.clone();
    report.deltas = Some(DeltaSection::between(&report.pre, &post, &cfg.options.verdict));
    report.post = Some(post);
    report.mitigation = Some(mitigation);
    Ok(MitigationRun {
        report,
        model,
        trace,
        train_data: train_ds,
    })
}

/// Cost-sensitive retraining whose weights are recalibrated from validation
/// recall after every epoch until the recall gap closes or the budget runs out.
pub fn run_recalibration(run: &AuditRun) -> Result<(MitigationRun, RecalibrationState)> {
    let train_ds = run.train_data();
    let start = compute_class_weights(&compute_distribution(&train_ds.manifest)?, &run.classes)?;
    let objective = SharedWeights::new(run.classes.clone(), &start)?;
    let mut hook = RecalibrationHook {
        objective: objective.clone(),
        state: Some(RecalibrationState::new(start, run.config.options.recalibration.clone())),
    };
    let mitigation = MitigationSection {
        strategy: Strategy::CostSensitive,
        resample_plan: None,
        weights_history: Vec::new(),
        augment_plan: None,
        geometric_copies: 0,
        train_distribution: compute_distribution(&train_ds.manifest)?,
        recalibration: None,
    };
    let mut out = retrain(run, train_ds, &objective, &mut hook, mitigation)?;
    let state = hook.state.take().expect("state returned by the last epoch");
    if let Some(m) = &mut out.report.mitigation {
        m.weights_history = state.history.clone();
        m.recalibration = Some(state.clone());
    }
    Ok((out, state))
}

/// Runs `f` for every seed on a pool of `jobs` threads; results keep seed order.
pub fn run_seeds<T, F>(seeds: &[u64], jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_box_clips_and_stays_valid() {
        let b = decode_box([0.5, 0.5, 0.5, 0.25], (32, 32));
        assert_eq!(b, BBox::new(8.0, 12.0, 24.0, 20.0));
        let b = decode_box([1.0, 0.0, 0.0, 0.0], (32, 32));
        assert!(b.is_valid() && b.within(32.0, 32.0));
    }

    #[test]
    fn digest_tracks_bits() {
        assert_ne!(params_digest(&[0.0]), params_digest(&[-0.0]));
        assert_eq!(params_digest(&[1.5, 2.0]), params_digest(&[1.5, 2.0]));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = AuditConfig::new(DataSource::Synthetic(SyntheticConfig::imbalanced(7)), ModelKind::TinyCnn, 3, 7);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: AuditConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash8().unwrap(), cfg.hash8().unwrap());
        let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
        v["options"]["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<AuditConfig>(v).is_err());
        let other = AuditConfig { seed: 8, ..cfg.clone() };
        assert_ne!(other.run_dir_name().unwrap(), cfg.run_dir_name().unwrap());
        assert!(cfg.run_dir_name().unwrap().starts_with("seed7-"));
    }

    #[test]
    fn class_missing_from_a_split_is_an_error() {
        let cfg = SyntheticConfig {
            n: 40,
            proportions: vec![0.95, 0.025, 0.025],
            ..SyntheticConfig::imbalanced(1)
        };
        let data = generate(&cfg).unwrap();
        let audit = AuditConfig::new(DataSource::Synthetic(cfg), ModelKind::TinyCnn, 3, 1);
        assert!(matches!(prepare(&audit, &data), Err(Error::Empty(_))));
    }

    #[test]
    fn geometric_copies_double_and_keep_labels() {
        let data = generate(&SyntheticConfig {
            n: 12,
            ..SyntheticConfig::balanced(2)
        })
        .unwrap();
        let out = geometric_copies(&data, 5).unwrap();
        assert_eq!(out.len(), 24);
        for i in 0..12 {
            assert_eq!(out.manifest.records[12 + i].class_label, data.manifest.records[i].class_label);
            out.manifest.records[12 + i].validate().unwrap();
        }
    }
}
