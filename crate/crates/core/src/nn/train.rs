//! Mini-batch training loop, learning-rate schedules and the per-epoch metric trace.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Mode, Model, ModelKind, OutputGrad};
use super::optim::{Adam, AdamConfig};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::loss::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` after every `every_n` epochs.
    StepDecay { factor: f64, every_n: usize },
    /// Linear interpolation from the base rate to `to` over the run.
    LinearDecay { to: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every_n } => base * factor.powi((epoch / every_n.max(1)) as i32),
            LrSchedule::LinearDecay { to } => {
                if epochs <= 1 {
                    base
                } else {
                    base + (to - base) * epoch as f64 / (epochs - 1) as f64
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lr_schedule: LrSchedule,
    /// Weight of the box-regression MSE term added to the classification loss.
    pub box_loss_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// lr 1e-3, batch 32, weight decay 1e-4, no dropout, 10% decay every 10 epochs.
    pub fn cnn_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            weight_decay: 1e-4,
            dropout: 0.0,
            lr_schedule: LrSchedule::StepDecay {
                factor: 0.9,
                every_n: 10,
            },
            box_loss_weight: 1.0,
            seed,
        }
    }

    /// lr 1e-3 decaying linearly to 1e-5 over 30 epochs, batch 32, weight decay 3e-2, dropout 0.1.
    pub fn vit_default(seed: u64) -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 30,
            weight_decay: 3e-2,
            dropout: 0.1,
            lr_schedule: LrSchedule::LinearDecay { to: 1e-5 },
            box_loss_weight: 1.0,
            seed,
        }
    }

    pub fn default_for(kind: ModelKind, seed: u64) -> Self {
        match kind {
            ModelKind::TinyCnn => Self::cnn_default(seed),
            ModelKind::TinyVit => Self::vit_default(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.weight_decay >= 0.0 && self.box_loss_weight >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay and box_loss_weight must be >= 0".into()));
        }
        if let LrSchedule::StepDecay { factor, every_n } = self.lr_schedule {
            if !(factor > 0.0) || every_n == 0 {
                return Err(Error::InvalidArgument("step decay needs factor > 0 and every_n >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Images with class labels and normalized `(cx, cy, w, h)` box targets.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub classes: Vec<String>,
    pub height: usize,
    pub width: usize,
    /// `n * height * width` pixels, sample-major.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub boxes: Vec<[f64; 4]>,
}

impl TrainSet {
    pub fn new(
        classes: Vec<String>,
        (height, width): (usize, usize),
        images: Vec<f64>,
        labels: Vec<usize>,
        boxes: Vec<[f64; 4]>,
    ) -> Result<Self> {
        let n = labels.len();
        if images.len() != n * height * width || boxes.len() != n {
            return Err(Error::ShapeMismatch {
                expected: vec![n, 1, height, width],
                actual: vec![images.len() / (height * width).max(1), boxes.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes.len()) {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {} classes", classes.len())));
        }
        Ok(TrainSet {
            classes,
            height,
            width,
            images,
            labels,
            boxes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let s = self.height * self.width;
        &self.images[i * s..(i + 1) * s]
    }

    /// Stacks samples `idx` into a `[B, 1, H, W]` tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.height * self.width);
        for &i in idx {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(vec![idx.len(), 1, self.height, self.width], data)
    }

    pub fn subset(&self, idx: &[usize]) -> TrainSet {
        let mut images = Vec::with_capacity(idx.len() * self.height * self.width);
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        TrainSet {
            classes: self.classes.clone(),
            height: self.height,
            width: self.width,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            boxes: idx.iter().map(|&i| self.boxes[i]).collect(),
        }
    }
}

/// Evaluation-mode outputs over a whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub n_classes: usize,
    pub classes: Vec<usize>,
    /// `[N, K]` row-major.
    pub probs: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

impl Predictions {
    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

pub const EVAL_BATCH: usize = 64;

pub fn predict(model: &Model, set: &TrainSet) -> Result<Predictions> {
    let k = model.n_classes();
    let mut out = Predictions {
        n_classes: k,
        classes: Vec::with_capacity(set.len()),
        probs: Vec::with_capacity(set.len() * k),
        boxes: Vec::with_capacity(set.len()),
    };
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let pass = model.infer(&set.batch(chunk)?)?;
        out.classes.extend(pass.predictions());
        out.probs.extend_from_slice(pass.probs.data());
        out.boxes.extend(pass.boxes.rows().map(|r| [r[0], r[1], r[2], r[3]]));
    }
    Ok(out)
}

/// Fraction of each class's samples predicted as that class; `None` for absent classes.
pub fn per_class_recall(labels: &[usize], predicted: &[usize], n_classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; n_classes];
    let mut tot = vec![0usize; n_classes];
    for (&l, &p) in labels.iter().zip(predicted) {
        tot[l] += 1;
        if l == p {
            hit[l] += 1;
        }
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over training samples.
    pub loss: f64,
    pub recall: Vec<Option<f64>>,
    /// Filled in by an [`EpochHook`] when one tracks selectivity.
    pub selectivity: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub classes: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss");
        for c in &self.classes {
            let _ = write!(out, ",recall_{c}");
        }
        for c in &self.classes {
            let _ = write!(out, ",selectivity_{c}");
        }
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},{:.6e},{:.6}", e.epoch, e.lr, e.loss);
            for r in &e.recall {
                let _ = write!(out, ",{}", opt_cell(*r));
            }
            for i in 0..self.classes.len() {
                let _ = write!(out, ",{}", opt_cell(e.selectivity.get(i).copied().flatten()));
            }
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Called after every epoch with the updated model.
pub trait EpochHook {
    fn on_epoch(&mut self, epoch: usize, model: &Model, record: &mut EpochRecord) -> Result<()>;
}

/// Hook that does nothing.
pub struct NoHook;

impl EpochHook for NoHook {
    fn on_epoch(&mut self, _: usize, _: &Model, _: &mut EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Trains `model` in place with Adam. Per-epoch recall is measured on `val`
/// when given, otherwise on the training set.
pub fn train(
    model: &mut Model,
    data: &TrainSet,
    val: Option<&TrainSet>,
    config: &TrainConfig,
    objective: &dyn Objective,
    hook: &mut dyn EpochHook,
) -> Result<MetricTrace> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if data.classes.len() != model.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the model predicts {}",
            data.classes.len(),
            model.n_classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(model.n_params(), AdamConfig::default());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = MetricTrace {
        classes: data.classes.clone(),
        epochs: Vec::with_capacity(config.epochs),
    };
    let lambda = config.box_loss_weight;
    for epoch in 0..config.epochs {
        let lr = config.lr_schedule.rate(config.learning_rate, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let x = data.batch(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let pass = model.forward(
                &x,
                Mode::Train {
                    rng: &mut rng,
                    dropout: config.dropout,
                },
            )?;
            let ce = objective.evaluate(&pass.probs, &labels)?;
            let n = idx.len() as f64;
            let mut box_loss = 0.0;
            let mut gbox = Vec::with_capacity(idx.len() * 4);
            for (row, &i) in pass.boxes.rows().zip(idx) {
                for (p, t) in row.iter().zip(&data.boxes[i]) {
                    let d = p - t;
                    box_loss += d * d;
                    gbox.push(2.0 * lambda * d / n);
                }
            }
            let loss = ce.loss + lambda * box_loss / n;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss * n;
            let grad = OutputGrad {
                logits: ce.grad,
                boxes: (lambda > 0.0).then(|| Tensor::new(vec![idx.len(), 4], gbox)).transpose()?,
            };
            let g = model.backward(&pass, &grad)?;
            if g.params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            opt.step(model.params_mut(), &g.params, lr, config.weight_decay);
        }
        let eval = val.unwrap_or(data);
        let preds = predict(model, eval)?;
        let mut record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            recall: per_class_recall(&eval.labels, &preds.classes, model.n_classes()),
            selectivity: vec![None; model.n_classes()],
        };
        hook.on_epoch(epoch, model, &mut record)?;
        trace.epochs.push(record);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub config: TrainConfig,
    pub trace: MetricTrace,
    /// Mean of the final per-class recalls on the evaluation set.
    pub macro_recall: f64,
}

/// Trains a fresh copy of `base` for every config and reports each run.
/// The best run is the first with the highest final macro recall.
pub fn grid_search(
    base: &Model,
    data: &TrainSet,
    val: &TrainSet,
    configs: &[TrainConfig],
    objective: &dyn Objective,
) -> Result<(Vec<GridResult>, usize)> {
    if configs.is_empty() {
        return Err(Error::Empty("grid search over zero configs".into()));
    }
    let mut results = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut model = base.clone();
        let trace = train(&mut model, data, Some(val), cfg, objective, &mut NoHook)?;
        let rec: Vec<f64> = trace.last().map(|e| e.recall.iter().flatten().copied().collect()).unwrap_or_default();
        let macro_recall = if rec.is_empty() { 0.0 } else { rec.iter().sum::<f64>() / rec.len() as f64 };
        results.push(GridResult {
            config: cfg.clone(),
            trace,
            macro_recall,
        });
    }
    let best = results
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.macro_recall > results[b].macro_recall { i } else { b });
    Ok((results, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        let s = LrSchedule::StepDecay {
            factor: 0.9,
            every_n: 10,
        };
        assert_eq!(s.rate(1e-3, 9, 50), 1e-3);
        assert!((s.rate(1e-3, 10, 50) - 9e-4).abs() < 1e-15);
        assert!((s.rate(1e-3, 25, 50) - 8.1e-4).abs() < 1e-15);
        let l = LrSchedule::LinearDecay { to: 1e-5 };
        assert_eq!(l.rate(1e-3, 0, 30), 1e-3);
        assert!((l.rate(1e-3, 29, 30) - 1e-5).abs() < 1e-15);
        assert_eq!(LrSchedule::Constant.rate(0.1, 100, 3), 0.1);
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::cnn_default(0).validate().unwrap();
        TrainConfig::vit_default(0).validate().unwrap();
        let mut c = TrainConfig::cnn_default(0);
        c.epochs = 0;
        assert!(c.validate().is_err());
        c.epochs = 1;
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn recall_counts() {
        let r = per_class_recall(&[0, 0, 1, 1], &[0, 1, 1, 1], 3);
        assert_eq!(r, vec![Some(0.5), Some(1.0), None]);
    }

    #[test]
    fn trace_csv_header() {
        let t = MetricTrace {
            classes: vec!["a".into(), "b".into()],
            epochs: vec![EpochRecord {
                epoch: 0,
                lr: 1e-3,
                loss: 0.5,
                recall: vec![Some(1.0), None],
                selectivity: vec![None, Some(0.25)],
            }],
        };
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,lr,loss,recall_a,recall_b,selectivity_a,selectivity_b");
        assert_eq!(lines.next().unwrap(), "0,1.000000e-3,0.500000,1.000000,,,0.250000");
    }
}
