//! Iterative class-weight recalibration driven by validation recall.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{dynamic_weight_adjust, weighted_cross_entropy_indices, CeOutput, ClassWeights, Objective};
use crate::nn::{EpochHook, EpochRecord, Model, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecalibrationConfig {
    pub max_iterations: usize,
    /// Stop once `max recall - min recall` drops below this.
    pub epsilon_gap: f64,
    pub eta: f64,
    pub target_recall: f64,
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        RecalibrationConfig {
            max_iterations: 10,
            epsilon_gap: 0.05,
            eta: 0.5,
            target_recall: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationState {
    pub iteration: usize,
    pub config: RecalibrationConfig,
    pub weights: ClassWeights,
    /// Every weight vector used so far, oldest first.
    pub history: Vec<ClassWeights>,
    pub last_recall: BTreeMap<String, f64>,
    /// Recall gap observed at each call.
    pub gaps: Vec<f64>,
    pub converged: bool,
    pub stopped: bool,
}

impl RecalibrationState {
    pub fn new(weights: ClassWeights, config: RecalibrationConfig) -> Self {
        RecalibrationState {
            iteration: 0,
            stopped: config.max_iterations == 0,
            config,
            history: vec![weights.clone()],
            weights,
            last_recall: BTreeMap::new(),
            gaps: Vec::new(),
            converged: false,
        }
    }

    pub fn is_done(&self) -> bool {
        self.converged || self.stopped
    }
}

pub fn recall_gap(recall: &BTreeMap<String, f64>) -> f64 {
    let hi = recall.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = recall.values().copied().fold(f64::INFINITY, f64::min);
    if recall.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// One recalibration step: records the new validation recall, then either marks
/// the state converged (gap below `epsilon_gap`), stopped (iteration budget
/// spent), or adjusts the weights.
pub fn recalibrate(mut state: RecalibrationState, recall: &BTreeMap<String, f64>) -> Result<RecalibrationState> {
    if let Some((c, v)) = recall.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("validation recall {v} for '{c}'")));
    }
    if state.is_done() {
        return Ok(state);
    }
    let gap = recall_gap(recall);
    state.gaps.push(gap);
    state.last_recall = recall.clone();
    if gap < state.config.epsilon_gap {
        state.converged = true;
        return Ok(state);
    }
    if state.iteration >= state.config.max_iterations {
        state.stopped = true;
        return Ok(state);
    }
    state.weights = dynamic_weight_adjust(&state.weights, recall, state.config.target_recall, state.config.eta)?;
    state.history.push(state.weights.clone());
    state.iteration += 1;
    if state.iteration >= state.config.max_iterations {
        state.stopped = true;
    }
    Ok(state)
}

/// Weighted cross-entropy whose weights a [`RecalibrationHook`] updates between epochs.
#[derive(Debug, Clone)]
pub struct SharedWeights {
    classes: Vec<String>,
    weights: Rc<RefCell<Vec<f64>>>,
}

impl SharedWeights {
    pub fn new(classes: Vec<String>, w: &ClassWeights) -> Result<Self> {
        let v = w.vector(&classes)?;
        Ok(SharedWeights {
            classes,
            weights: Rc::new(RefCell::new(v)),
        })
    }

    fn set(&self, w: &ClassWeights) -> Result<()> {
        *self.weights.borrow_mut() = w.vector(&self.classes)?;
        Ok(())
    }
}

impl Objective for SharedWeights {
    fn evaluate(&self, probs: &Tensor, labels: &[usize]) -> Result<CeOutput> {
        weighted_cross_entropy_indices(probs, labels, &self.weights.borrow())
    }
}

/// Epoch hook applying [`recalibrate`] to the epoch's validation recall.
pub struct RecalibrationHook {
    pub objective: SharedWeights,
    pub state: Option<RecalibrationState>,
}

impl EpochHook for RecalibrationHook {
    fn on_epoch(&mut self, _epoch: usize, _model: &Model, record: &mut EpochRecord) -> Result<()> {
        let state = self.state.take().expect("state present between epochs");
        let recall: BTreeMap<String, f64> = self
            .objective
            .classes
            .iter()
            .zip(&record.recall)
            .filter_map(|(c, r)| Some((c.clone(), (*r)?)))
            .collect();
        let next = recalibrate(state, &recall)?;
        self.objective.set(&next.weights)?;
        self.state = Some(next);
        Ok(())
    }
}
