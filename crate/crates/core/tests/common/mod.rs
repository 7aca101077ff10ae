//! Central finite-difference gradient checker shared by the test targets.
#![allow(dead_code)]

use biaslens::loss::{weighted_cross_entropy_indices, Objective, WeightedCrossEntropy};
use biaslens::nn::{Architecture, Mode, Model, OutputGrad, Tensor, VitConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

pub fn small_vit() -> VitConfig {
    VitConfig {
        input_size: (32, 32),
        patch_size: 8,
        dim: 8,
        heads: 2,
        layers: 4,
        mlp_dim: 16,
        n_classes: 3,
    }
}

pub struct Case {
    pub model: Model,
    x: Tensor,
    labels: Vec<usize>,
    boxes: Vec<f64>,
    weights: Vec<f64>,
}

impl Case {
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let model = Model::new(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let n = 2;
        let [c, h, w] = model.input_shape();
        let x = Tensor::new(vec![n, c, h, w], (0..n * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        Case {
            labels: (0..n).map(|i| i % model.n_classes()).collect(),
            boxes: (0..n * 4).map(|_| rng.gen_range(0.2..0.8)).collect(),
            weights: (0..model.n_classes()).map(|_| rng.gen_range(0.2..2.0)).collect(),
            model,
            x,
        }
    }

    fn loss(&self, model: &Model, x: &Tensor) -> f64 {
        let pass = model.forward(x, Mode::Eval).unwrap();
        let ce = weighted_cross_entropy_indices(&pass.probs, &self.labels, &self.weights).unwrap();
        let n = self.labels.len() as f64;
        let mse: f64 = pass.boxes.data().iter().zip(&self.boxes).map(|(p, t)| (p - t).powi(2)).sum();
        ce.loss + mse / n
    }

    fn analytic(&self) -> (Vec<f64>, Vec<f64>) {
        let pass = self.model.forward(&self.x, Mode::Eval).unwrap();
        let obj = WeightedCrossEntropy {
            weights: self.weights.clone(),
        };
        let ce = obj.evaluate(&pass.probs, &self.labels).unwrap();
        let n = self.labels.len() as f64;
        let gbox: Vec<f64> = pass.boxes.data().iter().zip(&self.boxes).map(|(p, t)| 2.0 * (p - t) / n).collect();
        let grad = OutputGrad {
            logits: ce.grad,
            boxes: Some(Tensor::new(pass.boxes.shape().to_vec(), gbox).unwrap()),
        };
        let g = self.model.backward(&pass, &grad).unwrap();
        (g.params, g.input.into_data())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// Worst relative error over all parameters and over all input pixels.
pub fn check(case: &Case) -> (f64, f64) {
    let (gp, gx) = case.analytic();
    let mut worst_p: f64 = 0.0;
    for j in 0..case.model.n_params() {
        let mut m = case.model.clone();
        m.params_mut()[j] += EPS;
        let fp = case.loss(&m, &case.x);
        m.params_mut()[j] -= 2.0 * EPS;
        let fm = case.loss(&m, &case.x);
        worst_p = worst_p.max(rel_err((fp - fm) / (2.0 * EPS), gp[j]));
    }
    let mut worst_x: f64 = 0.0;
    for j in 0..case.x.len() {
        let mut x = case.x.clone();
        x.data_mut()[j] += EPS;
        let fp = case.loss(&case.model, &x);
        x.data_mut()[j] -= 2.0 * EPS;
        let fm = case.loss(&case.model, &x);
        worst_x = worst_x.max(rel_err((fp - fm) / (2.0 * EPS), gx[j]));
    }
    (worst_p, worst_x)
}

