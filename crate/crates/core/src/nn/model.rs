use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cnn::{CnnCache, CnnConfig, TinyCnn};
use super::ops;
use super::params::{Init, ParamLayout};
use super::tensor::Tensor;
use super::vit::{TinyVit, VitCache, VitConfig};
use crate::error::{Error, Result};

/// Forward-pass mode. Dropout is only ever applied in `Train`.
pub enum Mode<'a> {
    Eval,
    Train {
        rng: &'a mut ChaCha8Rng,
        dropout: f64,
    },
}

impl Mode<'_> {
    pub(crate) fn dropout_mask(&mut self, len: usize) -> Option<Vec<f64>> {
        use rand::Rng;
        match self {
            Mode::Train { rng, dropout } if *dropout > 0.0 => {
                let keep = 1.0 - *dropout;
                Some(
                    (0..len)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TinyCnn,
    TinyVit,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::TinyCnn => "tiny_cnn",
            ModelKind::TinyVit => "tiny_vit",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny_cnn" | "cnn" => Ok(ModelKind::TinyCnn),
            "tiny_vit" | "vit" => Ok(ModelKind::TinyVit),
            other => Err(Error::InvalidArgument(format!(
                "unknown model kind '{other}' (expected tiny_cnn or tiny_vit)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    TinyCnn(CnnConfig),
    TinyVit(VitConfig),
}

impl Architecture {
    /// Default desk-scale architecture for `kind` on 32x32 grayscale input.
    pub fn default_for(kind: ModelKind, n_classes: usize) -> Self {
        match kind {
            ModelKind::TinyCnn => Architecture::TinyCnn(CnnConfig::tiny(n_classes)),
            ModelKind::TinyVit => Architecture::TinyVit(VitConfig::tiny(n_classes)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Architecture::TinyCnn(_) => ModelKind::TinyCnn,
            Architecture::TinyVit(_) => ModelKind::TinyVit,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Architecture::TinyCnn(c) => c.n_classes,
            Architecture::TinyVit(c) => c.n_classes,
        }
    }

    /// `(height, width)` of the single-channel input.
    pub fn input_size(&self) -> (usize, usize) {
        match self {
            Architecture::TinyCnn(c) => c.input_size,
            Architecture::TinyVit(c) => c.input_size,
        }
    }
}

pub(crate) enum Cache {
    Cnn(CnnCache),
    Vit(VitCache),
}

/// Result of a forward pass over a batch.
pub struct ForwardPass {
    /// `[N, K]`
    pub logits: Tensor,
    /// `[N, K]`, rows sum to one.
    pub probs: Tensor,
    /// `[N, 4]` normalized `(cx, cy, w, h)` box estimates in `(0, 1)`.
    pub boxes: Tensor,
    pub(crate) cache: Option<Cache>,
}

impl ForwardPass {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Drops activation caches, keeping only the outputs.
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .rows()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect()
    }

    /// `(layers, heads, tokens)` when the pass came from a ViT with caches.
    pub fn attention_dims(&self) -> Option<(usize, usize, usize)> {
        match &self.cache {
            Some(Cache::Vit(c)) => Some(c.attention_dims()),
            _ => None,
        }
    }

    /// Head attention matrix `(tokens x tokens)` of one sample and layer.
    pub fn attention(&self, sample: usize, layer: usize, head: usize) -> Option<&[f64]> {
        match &self.cache {
            Some(Cache::Vit(c)) => c.attention(sample, layer, head),
            _ => None,
        }
    }
}

/// Upstream gradient of the loss with respect to the model outputs.
#[derive(Debug, Clone)]
pub struct OutputGrad {
    /// `[N, K]`
    pub logits: Tensor,
    /// `[N, 4]` gradient with respect to the sigmoid box outputs.
    pub boxes: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Same layout as [`Model::params`].
    pub params: Vec<f64>,
    /// `[N, 1, H, W]`
    pub input: Tensor,
}

/// Where backward starts.
pub(crate) enum Seed<'a> {
    Output(&'a OutputGrad),
    /// Gradient with respect to the probe activation map of a hidden layer.
    Probe { layer: usize, grad: Vec<f64> },
}

/// A layer whose units are exposed for behaviour analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLayer {
    pub name: String,
    pub neurons: usize,
}

/// Classification and box heads reading a pooled feature vector.
#[derive(Debug, Clone)]
pub(crate) struct Heads {
    pub dim: usize,
    pub n_classes: usize,
    cls_w: Range<usize>,
    cls_b: Range<usize>,
    box_w: Range<usize>,
    box_b: Range<usize>,
}

impl Heads {
    pub fn register(layout: &mut ParamLayout, dim: usize, n_classes: usize) -> Self {
        let cls_w = layout.add("head.cls.weight", vec![dim, n_classes], Init::FanIn(dim));
        let cls_b = layout.add("head.cls.bias", vec![n_classes], Init::Zeros);
        let box_w = layout.add("head.box.weight", vec![dim, 4], Init::FanIn(dim));
        let box_b = layout.add("head.box.bias", vec![4], Init::Zeros);
        Heads {
            dim,
            n_classes,
            cls_w,
            cls_b,
            box_w,
            box_b,
        }
    }

    pub fn forward(&self, params: &[f64], feats: &[f64], n: usize) -> (Tensor, Tensor, Tensor) {
        let k = self.n_classes;
        let logits = ops::dense_forward(
            feats,
            &params[self.cls_w.clone()],
            &params[self.cls_b.clone()],
            n,
            self.dim,
            k,
        );
        let probs = ops::softmax_rows(&logits, k);
        let mut boxes = ops::dense_forward(
            feats,
            &params[self.box_w.clone()],
            &params[self.box_b.clone()],
            n,
            self.dim,
            4,
        );
        boxes.iter_mut().for_each(|v| *v = ops::sigmoid(*v));
        (
            Tensor::from_parts(vec![n, k], logits),
            Tensor::from_parts(vec![n, k], probs),
            Tensor::from_parts(vec![n, 4], boxes),
        )
    }

    /// Accumulates head gradients and returns `dL/dfeats`.
    pub fn backward(
        &self,
        params: &[f64],
        feats: &[f64],
        boxes: &Tensor,
        grad: &OutputGrad,
        gp: &mut [f64],
    ) -> Vec<f64> {
        let n = boxes.batch();
        let (gw, gb) = split_pair(gp, &self.cls_w, &self.cls_b);
        let mut dfeat = ops::dense_backward(
            feats,
            &params[self.cls_w.clone()],
            grad.logits.data(),
            n,
            self.dim,
            self.n_classes,
            gw,
            gb,
        );
        if let Some(gbox) = &grad.boxes {
            let dpre: Vec<f64> = gbox
                .data()
                .iter()
                .zip(boxes.data())
                .map(|(g, s)| g * s * (1.0 - s))
                .collect();
            let (gw, gb) = split_pair(gp, &self.box_w, &self.box_b);
            let d2 = ops::dense_backward(feats, &params[self.box_w.clone()], &dpre, n, self.dim, 4, gw, gb);
            for (a, b) in dfeat.iter_mut().zip(d2) {
                *a += b;
            }
        }
        dfeat
    }
}

/// Two disjoint mutable sub-slices of the gradient vector.
pub(crate) fn split_pair<'a>(
    g: &'a mut [f64],
    a: &Range<usize>,
    b: &Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(a.end <= b.start);
    let (left, right) = g.split_at_mut(b.start);
    (&mut left[a.clone()], &mut right[..b.len()])
}

enum Net {
    Cnn(TinyCnn),
    Vit(TinyVit),
}

/// A network plus its flat parameter vector.
pub struct Model {
    arch: Architecture,
    net: Net,
    params: Vec<f64>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Model::from_params(self.arch.clone(), self.params.clone()).expect("valid model")
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("arch", &self.arch)
            .field("n_params", &self.params.len())
            .finish()
    }
}

impl Model {
    /// Builds the network and draws its parameters from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let net = Self::build(&arch)?;
        let params = net_layout(&net).initialize(seed);
        Ok(Model { arch, net, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let net = Self::build(&arch)?;
        let expected = net_layout(&net).len();
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![expected],
                actual: vec![params.len()],
            });
        }
        Ok(Model { arch, net, params })
    }

    fn build(arch: &Architecture) -> Result<Net> {
        Ok(match arch {
            Architecture::TinyCnn(c) => Net::Cnn(TinyCnn::new(c.clone())?),
            Architecture::TinyVit(c) => Net::Vit(TinyVit::new(c.clone())?),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind()
    }

    pub fn layout(&self) -> &ParamLayout {
        net_layout(&self.net)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes()
    }

    /// Expected input shape without the batch dimension: `[1, H, W]`.
    pub fn input_shape(&self) -> [usize; 3] {
        let (h, w) = self.arch.input_size();
        [1, h, w]
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let [c, h, w] = self.input_shape();
        let s = x.shape();
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            let mut expected = vec![s.first().copied().unwrap_or(1)];
            expected.extend([c, h, w]);
            return Err(Error::ShapeMismatch {
                expected,
                actual: s.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// Forward pass keeping the activation caches needed by `backward` and the probes.
    pub fn forward(&self, x: &Tensor, mut mode: Mode<'_>) -> Result<ForwardPass> {
        let n = self.check_input(x)?;
        Ok(match &self.net {
            Net::Cnn(net) => net.forward(&self.params, x.data(), n, &mut mode),
            Net::Vit(net) => net.forward(&self.params, x.data(), n, &mut mode),
        })
    }

    /// Evaluation-mode forward without caches.
    pub fn infer(&self, x: &Tensor) -> Result<ForwardPass> {
        Ok(self.forward(x, Mode::Eval)?.without_cache())
    }

    pub fn backward(&self, pass: &ForwardPass, grad: &OutputGrad) -> Result<Gradients> {
        let n = pass.logits.batch();
        if grad.logits.shape() != pass.logits.shape() {
            return Err(Error::ShapeMismatch {
                expected: pass.logits.shape().to_vec(),
                actual: grad.logits.shape().to_vec(),
            });
        }
        if let Some(b) = &grad.boxes {
            if b.shape() != pass.boxes.shape() {
                return Err(Error::ShapeMismatch {
                    expected: pass.boxes.shape().to_vec(),
                    actual: b.shape().to_vec(),
                });
            }
        }
        self.backward_seed(pass, Seed::Output(grad), n)
    }

    fn backward_seed(&self, pass: &ForwardPass, seed: Seed<'_>, n: usize) -> Result<Gradients> {
        let [c, h, w] = self.input_shape();
        let (params, input) = match (&self.net, &pass.cache) {
            (Net::Cnn(net), Some(Cache::Cnn(cache))) => net.backward(&self.params, cache, &pass.boxes, seed),
            (Net::Vit(net), Some(Cache::Vit(cache))) => net.backward(&self.params, cache, &pass.boxes, seed),
            (_, None) => return Err(Error::MissingCache("forward pass was run without caches".into())),
            _ => return Err(Error::MissingCache("cache belongs to a different architecture".into())),
        };
        Ok(Gradients {
            params,
            input: Tensor::from_parts(vec![n, c, h, w], input),
        })
    }

    /// Hidden probe layers followed by the output-probability layer.
    pub fn probe_layers(&self) -> Vec<ProbeLayer> {
        let mut layers = match &self.net {
            Net::Cnn(net) => net.probe_layers(),
            Net::Vit(net) => net.probe_layers(),
        };
        layers.push(ProbeLayer {
            name: "output".into(),
            neurons: self.n_classes(),
        });
        layers
    }

    fn n_hidden_probes(&self) -> usize {
        match &self.net {
            Net::Cnn(net) => net.probe_layers().len(),
            Net::Vit(net) => net.probe_layers().len(),
        }
    }

    /// Per-sample unit activations of probe layer `layer`, `[N, neurons]` row-major.
    ///
    /// Hidden units report their post-ReLU activation averaged over spatial
    /// positions (CNN channels) or tokens (ViT MLP units); the output layer
    /// reports class probabilities.
    pub fn probe_activations(&self, pass: &ForwardPass, layer: usize) -> Result<Vec<f64>> {
        let hidden = self.n_hidden_probes();
        if layer == hidden {
            return Ok(pass.probs.data().to_vec());
        }
        if layer > hidden {
            return Err(Error::InvalidArgument(format!(
                "probe layer {layer} out of range (0..={hidden})"
            )));
        }
        match (&self.net, &pass.cache) {
            (Net::Cnn(net), Some(Cache::Cnn(c))) => Ok(net.probe_activations(c, layer)),
            (Net::Vit(net), Some(Cache::Vit(c))) => Ok(net.probe_activations(c, layer)),
            _ => Err(Error::MissingCache("probe activations need a cached forward pass".into())),
        }
    }

    /// `d a / d x` for unit `neuron` of probe layer `layer`, one gradient image per sample.
    pub fn probe_input_gradient(&self, pass: &ForwardPass, layer: usize, neuron: usize) -> Result<Tensor> {
        let n = pass.logits.batch();
        let hidden = self.n_hidden_probes();
        let layers = self.probe_layers();
        if layer >= layers.len() || neuron >= layers[layer].neurons {
            return Err(Error::InvalidArgument(format!(
                "probe ({layer}, {neuron}) out of range"
            )));
        }
        if layer == hidden {
            let k = self.n_classes();
            let mut dlogits = vec![0.0; n * k];
            for (i, p) in pass.probs.rows().enumerate() {
                for c in 0..k {
                    let delta = if c == neuron { 1.0 } else { 0.0 };
                    dlogits[i * k + c] = p[neuron] * (delta - p[c]);
                }
            }
            let grad = OutputGrad {
                logits: Tensor::from_parts(vec![n, k], dlogits),
                boxes: None,
            };
            return Ok(self.backward_seed(pass, Seed::Output(&grad), n)?.input);
        }
        let grad = match (&self.net, &pass.cache) {
            (Net::Cnn(net), Some(Cache::Cnn(c))) => net.probe_seed(c, layer, neuron),
            (Net::Vit(net), Some(Cache::Vit(c))) => net.probe_seed(c, layer, neuron),
            _ => return Err(Error::MissingCache("probe gradient needs a cached forward pass".into())),
        };
        Ok(self.backward_seed(pass, Seed::Probe { layer, grad }, n)?.input)
    }
}

fn net_layout(net: &Net) -> &ParamLayout {
    match net {
        Net::Cnn(n) => &n.layout,
        Net::Vit(n) => &n.layout,
    }
}
