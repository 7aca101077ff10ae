//! Neuron sensitivity and selectivity, attention-map extraction, relevance
//! propagation through self-attention, and heatmap export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationRecord, BBox, Condition};
use crate::error::{Error, Result};
use crate::image::write_pgm_bytes;
use crate::nn::{
    train, EpochHook, EpochRecord, ForwardPass, MetricTrace, Mode, Model, ModelKind, ModelSnapshot, Tensor,
    TrainConfig, TrainSet,
};
use crate::loss::Objective;

/// Mean absolute entry of an input gradient; zero when every entry is zero.
pub fn mean_abs_gradient(grad: &[f64]) -> f64 {
    if grad.is_empty() {
        return 0.0;
    }
    grad.iter().map(|g| g.abs()).sum::<f64>() / grad.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub score: f64,
    /// True when the probed unit passed no gradient back to the input.
    pub dead: bool,
}

/// Mean over `samples` of the mean `|da/dx|` over input pixels, for unit `neuron`
/// of probe layer `layer`.
pub fn sensitivity_score(model: &Model, samples: &Tensor, layer: usize, neuron: usize) -> Result<Sensitivity> {
    let pass = model.forward(samples, Mode::Eval)?;
    sensitivity_from_pass(model, &pass, layer, neuron)
}

fn sensitivity_from_pass(model: &Model, pass: &ForwardPass, layer: usize, neuron: usize) -> Result<Sensitivity> {
    let g = model.probe_input_gradient(pass, layer, neuron)?;
    let score = mean_abs_gradient(g.data());
    Ok(Sensitivity {
        score,
        dead: score == 0.0,
    })
}

/// `(a_c - a_avg) / max(a_c, a_avg)` per class, with `a_avg` the mean over all
/// classes including `c`; zero when the denominator is zero.
pub fn selectivity_score(class_means: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let avg = if class_means.is_empty() {
        0.0
    } else {
        class_means.values().sum::<f64>() / class_means.len() as f64
    };
    class_means
        .iter()
        .map(|(k, &a)| (k.clone(), selectivity(a, avg)))
        .collect()
}

pub fn selectivity(a_c: f64, a_avg: f64) -> f64 {
    let m = a_c.max(a_avg);
    if m == 0.0 {
        0.0
    } else {
        (a_c - a_avg) / m
    }
}

/// Fixed per-class probe batches.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub classes: Vec<String>,
    pub batches: Vec<Tensor>,
}

impl ProbeSet {
    /// Up to `per_class` samples of every class, drawn with `seed`.
    pub fn from_set(set: &TrainSet, per_class: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut batches = Vec::with_capacity(set.classes.len());
        for (ci, class) in set.classes.iter().enumerate() {
            let idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == ci).collect();
            if idx.is_empty() {
                return Err(Error::Empty(format!("probe set has no samples of class '{class}'")));
            }
            let take = per_class.min(idx.len()).max(1);
            let mut chosen: Vec<usize> = sample(&mut rng, idx.len(), take).into_iter().map(|k| idx[k]).collect();
            chosen.sort_unstable();
            batches.push(set.batch(&chosen)?);
        }
        Ok(ProbeSet {
            classes: set.classes.clone(),
            batches,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub probe_per_class: usize,
    /// Sensitivity is measured on at most this many evenly spaced units per layer.
    pub sensitivity_neurons: usize,
    pub compute_sensitivity: bool,
    /// Plateau threshold in selectivity units.
    pub plateau_delta: f64,
    pub plateau_window: usize,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        BehaviorConfig {
            probe_per_class: 128,
            sensitivity_neurons: 8,
            compute_sensitivity: true,
            plateau_delta: 0.01,
            plateau_window: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEntry {
    pub epoch: usize,
    pub layer: String,
    pub neuron: usize,
    pub class_label: String,
    pub mean_activation: f64,
    pub sensitivity: Option<f64>,
    pub selectivity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorScores {
    pub entries: Vec<BehaviorEntry>,
}

impl BehaviorScores {
    /// Mean selectivity per class over hidden-layer units.
    pub fn class_mean_selectivity(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.layer != "output") {
            let a = acc.entry(e.class_label.clone()).or_default();
            a.0 += e.selectivity;
            a.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n.max(1) as f64)).collect()
    }

    /// Mean selectivity per `(layer, class)`.
    pub fn layer_mean_selectivity(&self) -> BTreeMap<String, BTreeMap<String, f64>> {
        let mut acc: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
        for e in &self.entries {
            let a = acc.entry(e.layer.clone()).or_default().entry(e.class_label.clone()).or_default();
            a.0 += e.selectivity;
            a.1 += 1;
        }
        acc.into_iter()
            .map(|(l, m)| (l, m.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()))
            .collect()
    }

    /// Mean sensitivity per class over measured units.
    pub fn class_mean_sensitivity(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for e in &self.entries {
            if let Some(s) = e.sensitivity {
                let a = acc.entry(e.class_label.clone()).or_default();
                a.0 += s;
                a.1 += 1;
            }
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,layer,neuron,class,sensitivity,selectivity\n");
        for e in &self.entries {
            let sens = e.sensitivity.map(|s| format!("{s:.6e}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6}",
                e.epoch, e.layer, e.neuron, e.class_label, sens, e.selectivity
            );
        }
        out
    }
}

fn spaced(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        (0..n).collect()
    } else {
        (0..k).map(|i| i * n / k).collect()
    }
}

/// Sensitivity and selectivity of every probe unit on `probe`.
pub fn compute_behavior(model: &Model, probe: &ProbeSet, epoch: usize, config: &BehaviorConfig) -> Result<BehaviorScores> {
    if probe.classes.len() != model.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "probe set covers {} classes, model predicts {}",
            probe.classes.len(),
            model.n_classes()
        )));
    }
    let layers = model.probe_layers();
    let k = probe.classes.len();
    // means[layer][class][neuron]
    let mut means: Vec<Vec<Vec<f64>>> = layers.iter().map(|l| vec![vec![0.0; l.neurons]; k]).collect();
    let mut sens: Vec<Vec<Vec<Option<f64>>>> = layers.iter().map(|l| vec![vec![None; l.neurons]; k]).collect();
    for (ci, batch) in probe.batches.iter().enumerate() {
        let pass = model.forward(batch, Mode::Eval)?;
        let n = batch.batch();
        for (li, layer) in layers.iter().enumerate() {
            let acts = model.probe_activations(&pass, li)?;
            for j in 0..layer.neurons {
                means[li][ci][j] = (0..n).map(|s| acts[s * layer.neurons + j]).sum::<f64>() / n as f64;
            }
            if config.compute_sensitivity {
                for j in spaced(layer.neurons, config.sensitivity_neurons) {
                    sens[li][ci][j] = Some(sensitivity_from_pass(model, &pass, li, j)?.score);
                }
            }
        }
    }
    let mut entries = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        for j in 0..layer.neurons {
            let avg = (0..k).map(|c| means[li][c][j]).sum::<f64>() / k as f64;
            for (ci, class) in probe.classes.iter().enumerate() {
                entries.push(BehaviorEntry {
                    epoch,
                    layer: layer.name.clone(),
                    neuron: j,
                    class_label: class.clone(),
                    mean_activation: means[li][ci][j],
                    sensitivity: sens[li][ci][j],
                    selectivity: selectivity(means[li][ci][j], avg),
                });
            }
        }
    }
    Ok(BehaviorScores { entries })
}

/// Per-epoch behavior scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSeries {
    pub epochs: Vec<BehaviorScores>,
}

impl BehaviorSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,layer,neuron,class,sensitivity,selectivity\n");
        for s in &self.epochs {
            out.push_str(s.to_csv().split_once('\n').map(|x| x.1).unwrap_or(""));
        }
        out
    }

    /// Classes whose mean selectivity rose by less than `delta` across the last
    /// `window` epochs. Needs at least two epochs.
    pub fn plateaued(&self, delta: f64, window: usize) -> BTreeMap<String, bool> {
        let series: Vec<BTreeMap<String, f64>> = self.epochs.iter().map(|s| s.class_mean_selectivity()).collect();
        let Some(last) = series.last() else {
            return BTreeMap::new();
        };
        let start = series.len().saturating_sub(window.max(2));
        let first = &series[start];
        last.iter()
            .map(|(c, &v)| {
                let flagged = series.len() >= 2 && v - first.get(c).copied().unwrap_or(v) < delta;
                (c.clone(), flagged)
            })
            .collect()
    }
}

/// Epoch hook recording behavior scores (and optionally snapshots) after every epoch.
pub struct BehaviorTracker<'a> {
    pub probe: &'a ProbeSet,
    pub config: BehaviorConfig,
    pub series: BehaviorSeries,
    pub snapshots: Option<Vec<ModelSnapshot>>,
}

impl<'a> BehaviorTracker<'a> {
    pub fn new(probe: &'a ProbeSet, config: BehaviorConfig, keep_snapshots: bool) -> Self {
        BehaviorTracker {
            probe,
            config,
            series: BehaviorSeries::default(),
            snapshots: keep_snapshots.then(Vec::new),
        }
    }
}

impl EpochHook for BehaviorTracker<'_> {
    fn on_epoch(&mut self, epoch: usize, model: &Model, record: &mut EpochRecord) -> Result<()> {
        let scores = compute_behavior(model, self.probe, epoch, &self.config)?;
        let means = scores.class_mean_selectivity();
        record.selectivity = self.probe.classes.iter().map(|c| means.get(c).copied()).collect();
        self.series.epochs.push(scores);
        if let Some(s) = &mut self.snapshots {
            s.push(ModelSnapshot::capture(model, 0, None, Some(epoch)));
        }
        Ok(())
    }
}

/// Trains while scoring behavior on a fixed probe set after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn track_behavior(
    model: &mut Model,
    data: &TrainSet,
    val: Option<&TrainSet>,
    config: &TrainConfig,
    objective: &dyn Objective,
    probe: &ProbeSet,
    behavior: &BehaviorConfig,
    keep_snapshots: bool,
) -> Result<(MetricTrace, BehaviorSeries, Option<Vec<ModelSnapshot>>)> {
    let mut tracker = BehaviorTracker::new(probe, behavior.clone(), keep_snapshots);
    let trace = train(model, data, val, config, objective, &mut tracker)?;
    Ok((trace, tracker.series, tracker.snapshots))
}

/// Recomputes a behavior series from saved per-epoch snapshots.
pub fn replay_behavior(snapshots: &[ModelSnapshot], probe: &ProbeSet, config: &BehaviorConfig) -> Result<BehaviorSeries> {
    let mut series = BehaviorSeries::default();
    for (i, s) in snapshots.iter().enumerate() {
        series.epochs.push(compute_behavior(&s.to_model()?, probe, s.epoch.unwrap_or(i), config)?);
    }
    Ok(series)
}

/// Patch-grid geometry of a ViT input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }

    /// Tokens whose patch centers fall inside `bbox`, given in an image of
    /// `image_size = (width, height)` that is mapped onto the model input.
    pub fn tokens_in_box(&self, bbox: &BBox, image_size: (u32, u32)) -> Result<Vec<usize>> {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        if !bbox.is_valid() || !bbox.within(w, h) {
            return Err(Error::InvalidArgument(format!(
                "bbox ({}, {}, {}, {}) outside the {w}x{h} image",
                bbox.x1, bbox.y1, bbox.x2, bbox.y2
            )));
        }
        let sx = w / (self.cols * self.patch_size) as f64;
        let sy = h / (self.rows * self.patch_size) as f64;
        let p = self.patch_size as f64;
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cx = (c as f64 + 0.5) * p * sx;
                let cy = (r as f64 + 0.5) * p * sy;
                if bbox.contains_point(cx, cy) {
                    out.push(r * self.cols + c);
                }
            }
        }
        Ok(out)
    }
}

/// Column means of a row-stochastic `n x n` map: the mean query's distribution over keys.
pub fn mean_query(map: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in map.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v / n as f64;
        }
    }
    out
}

/// Attention summary over a batch of ViT inputs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub grid: Option<PatchGrid>,
    /// Mean over all samples, indexed `layer * heads + head`, each `tokens x tokens`.
    pub mean: Vec<Vec<f64>>,
    /// Same, per class.
    pub class_mean: BTreeMap<String, Vec<Vec<f64>>>,
    /// Mean attention mass inside the ground-truth box, per class and condition.
    pub mass_on_gt: BTreeMap<String, BTreeMap<Condition, f64>>,
    /// Per-sample mass, aligned with the input records.
    pub sample_mass: Vec<f64>,
}

impl AttentionSummary {
    /// Last-layer map averaged over heads for `class`, or over all samples.
    pub fn last_layer_map(&self, class: Option<&str>) -> Option<Vec<f64>> {
        let maps = match class {
            Some(c) => self.class_mean.get(c)?,
            None => &self.mean,
        };
        head_average(maps, self.layers.checked_sub(1)?, self.heads, self.tokens)
    }
}

fn head_average(maps: &[Vec<f64>], layer: usize, heads: usize, tokens: usize) -> Option<Vec<f64>> {
    let mut out = vec![0.0; tokens * tokens];
    for h in 0..heads {
        let m = maps.get(layer * heads + h)?;
        out.iter_mut().zip(m).for_each(|(o, v)| *o += v / heads as f64);
    }
    Some(out)
}

/// Mean-query attention mass on the tokens whose patch centers lie in `bbox`.
pub fn mass_in_box(map: &[f64], grid: &PatchGrid, bbox: &BBox, image_size: (u32, u32)) -> Result<f64> {
    let n = grid.tokens();
    if map.len() != n * n {
        return Err(Error::ShapeMismatch {
            expected: vec![n, n],
            actual: vec![map.len()],
        });
    }
    let q = mean_query(map, n);
    Ok(grid.tokens_in_box(bbox, image_size)?.iter().map(|&t| q[t]).sum())
}

/// Mass of the record's class-mean last-layer attention inside its box.
pub fn attention_mass_on_gt(summary: &AttentionSummary, record: &AnnotationRecord) -> Result<f64> {
    let grid = summary
        .grid
        .ok_or_else(|| Error::MissingCache("attention summary has no patch grid".into()))?;
    let map = summary
        .last_layer_map(Some(&record.class_label))
        .or_else(|| summary.last_layer_map(None))
        .ok_or_else(|| Error::Empty("attention summary holds no maps".into()))?;
    mass_in_box(&map, &grid, &record.bbox, record.image_size)
}

/// Patch grid of a ViT model; errors for other architectures.
pub fn vit_grid(model: &Model) -> Result<PatchGrid> {
    match model.architecture() {
        crate::nn::Architecture::TinyVit(c) => {
            let (rows, cols) = c.grid();
            Ok(PatchGrid {
                rows,
                cols,
                patch_size: c.patch_size,
            })
        }
        _ => Err(Error::UnsupportedArchitecture(format!(
            "attention needs a tiny_vit model, got {}",
            model.kind()
        ))),
    }
}

/// Runs `images` through a ViT and summarizes its attention. `records[i]`
/// annotates `images[i]`.
pub fn extract_attention(model: &Model, images: &Tensor, records: &[AnnotationRecord]) -> Result<AttentionSummary> {
    let grid = vit_grid(model)?;
    let n = images.batch();
    if records.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: vec![records.len()],
        });
    }
    let mut summary = AttentionSummary {
        grid: Some(grid),
        ..Default::default()
    };
    let mut class_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut group: BTreeMap<String, BTreeMap<Condition, (f64, usize)>> = BTreeMap::new();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(crate::nn::EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * images.row(0).len());
        for &i in chunk {
            data.extend_from_slice(images.row(i));
        }
        let mut shape = images.shape().to_vec();
        shape[0] = chunk.len();
        let pass = model.forward(&Tensor::new(shape, data)?, Mode::Eval)?;
        let (layers, heads, tokens) = pass
            .attention_dims()
            .ok_or_else(|| Error::MissingCache("forward pass kept no attention".into()))?;
        if summary.mean.is_empty() {
            summary.layers = layers;
            summary.heads = heads;
            summary.tokens = tokens;
            summary.mean = vec![vec![0.0; tokens * tokens]; layers * heads];
        }
        for (s, &i) in chunk.iter().enumerate() {
            let rec = &records[i];
            let cm = summary
                .class_mean
                .entry(rec.class_label.clone())
                .or_insert_with(|| vec![vec![0.0; tokens * tokens]; layers * heads]);
            *class_counts.entry(rec.class_label.clone()).or_default() += 1;
            for l in 0..layers {
                for h in 0..heads {
                    let a = pass.attention(s, l, h).expect("attention cached");
                    summary.mean[l * heads + h].iter_mut().zip(a).for_each(|(m, v)| *m += v);
                    cm[l * heads + h].iter_mut().zip(a).for_each(|(m, v)| *m += v);
                }
            }
            let mut last = vec![0.0; tokens * tokens];
            for h in 0..heads {
                let a = pass.attention(s, layers - 1, h).expect("attention cached");
                last.iter_mut().zip(a).for_each(|(m, v)| *m += v / heads as f64);
            }
            let mass = mass_in_box(&last, &grid, &rec.bbox, rec.image_size)?;
            summary.sample_mass.push(mass);
            let g = group.entry(rec.class_label.clone()).or_default().entry(rec.condition).or_default();
            g.0 += mass;
            g.1 += 1;
        }
    }
    for m in &mut summary.mean {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    for (c, maps) in &mut summary.class_mean {
        let k = class_counts[c] as f64;
        for m in maps {
            m.iter_mut().for_each(|v| *v /= k);
        }
    }
    summary.mass_on_gt = group
        .into_iter()
        .map(|(c, m)| (c, m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()))
        .collect();
    Ok(summary)
}

/// Relevance per token at every attention layer. `per_layer[l]` is the relevance
/// entering layer `l` from below; `per_layer[L]` is the initial relevance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub class_index: usize,
    pub per_layer: Vec<Vec<f64>>,
}

impl RelevanceMap {
    /// Relevance on the input patches.
    pub fn input(&self) -> &[f64] {
        &self.per_layer[0]
    }

    /// Largest `|sum R^(l) - sum R^(l+1)|` over layers.
    pub fn conservation_error(&self) -> f64 {
        self.per_layer
            .windows(2)
            .map(|w| (w[0].iter().sum::<f64>() - w[1].iter().sum::<f64>()).abs())
            .fold(0.0, f64::max)
    }
}

/// `R^(l)_j = sum_i A_ij R^(l+1)_i` with `A` averaged over heads, applied from the
/// top layer down. `attention[l][h]` is an `n x n` row-major map.
pub fn propagate_relevance(attention: &[Vec<Vec<f64>>], initial: &[f64], class_index: usize) -> Result<RelevanceMap> {
    let n = initial.len();
    let mut per_layer = vec![initial.to_vec()];
    for (l, heads) in attention.iter().enumerate().rev() {
        if heads.is_empty() || heads.iter().any(|a| a.len() != n * n) {
            return Err(Error::ShapeMismatch {
                expected: vec![n, n],
                actual: vec![heads.first().map_or(0, Vec::len)],
            });
        }
        let upper = per_layer.last().expect("non-empty");
        let mut r = vec![0.0; n];
        for a in heads {
            for i in 0..n {
                let ri = upper[i] / heads.len() as f64;
                for j in 0..n {
                    r[j] += a[i * n + j] * ri;
                }
            }
        }
        let _ = l;
        per_layer.push(r);
    }
    per_layer.reverse();
    Ok(RelevanceMap {
        class_index,
        per_layer,
    })
}

/// Relevance of sample `sample` in a cached ViT pass. Relevance 1 for the
/// predicted class (or `class`) starts on the mean-pooled representation, so each
/// final token receives `1/n`; MLP blocks pass relevance through unchanged.
pub fn lrp_propagate(model: &Model, pass: &ForwardPass, sample: usize, class: Option<usize>) -> Result<RelevanceMap> {
    if model.kind() != ModelKind::TinyVit {
        return Err(Error::UnsupportedArchitecture(format!(
            "relevance propagation needs a tiny_vit model, got {}",
            model.kind()
        )));
    }
    let (layers, heads, n) = pass
        .attention_dims()
        .ok_or_else(|| Error::MissingCache("relevance propagation needs a cached forward pass".into()))?;
    if sample >= pass.probs.batch() {
        return Err(Error::InvalidArgument(format!("sample {sample} out of range")));
    }
    let class_index = class.unwrap_or_else(|| pass.predictions()[sample]);
    let mut attention = Vec::with_capacity(layers);
    for l in 0..layers {
        attention.push(
            (0..heads)
                .map(|h| pass.attention(sample, l, h).expect("attention cached").to_vec())
                .collect(),
        );
    }
    propagate_relevance(&attention, &vec![1.0 / n as f64; n], class_index)
}

/// Share of input-patch relevance on the record's box.
pub fn relevance_in_box(model: &Model, map: &RelevanceMap, record: &AnnotationRecord) -> Result<f64> {
    let grid = vit_grid(model)?;
    let r = map.input();
    let total: f64 = r.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok(grid.tokens_in_box(&record.bbox, record.image_size)?.iter().map(|&t| r[t]).sum::<f64>() / total)
}

/// Min-max normalization to `[0, 1]`; a constant map becomes `128/255` everywhere.
pub fn normalize_heatmap(map: &[f64]) -> Result<Vec<f64>> {
    if map.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("heatmap contains NaN".into()));
    }
    if map.iter().any(|v| v.is_infinite()) {
        return Err(Error::NonFinite("heatmap contains an infinite value".into()));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if map.is_empty() || hi == lo {
        return Ok(vec![128.0 / 255.0; map.len()]);
    }
    Ok(map.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Writes `<stem>.pgm` (8-bit, each cell `scale x scale` pixels) and `<stem>.csv`
/// (normalized grid) for a `width x height` map.
pub fn export_heatmap(map: &[f64], width: usize, height: usize, scale: usize, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    if map.len() != width * height || width == 0 || height == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![height, width],
            actual: vec![map.len()],
        });
    }
    let scale = scale.max(1);
    let norm = normalize_heatmap(map)?;
    let mut pixels = Vec::with_capacity(width * height * scale * scale);
    for y in 0..height * scale {
        for x in 0..width * scale {
            pixels.push((norm[(y / scale) * width + x / scale] * 255.0).round() as u8);
        }
    }
    let pgm = stem.with_extension("pgm");
    write_pgm_bytes(&pgm, width * scale, height * scale, &pixels)?;
    let mut csv = String::new();
    for row in norm.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let csv_path = stem.with_extension("csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok((pgm, csv_path))
}

/// Reads a grid written by [`export_heatmap`].
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|c| {
                    c.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}
