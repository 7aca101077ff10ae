//! Small convolutional classifier: `[conv -> ReLU -> max-pool] x L -> dense heads`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::model::{split_pair, ForwardPass, Heads, Mode, ProbeLayer, Seed};
use super::ops::{self, ConvGeom};
use super::params::{Init, ParamLayout};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    /// `(height, width)` of the single-channel input.
    pub input_size: (usize, usize),
    pub conv: Vec<ConvLayerSpec>,
    /// Max-pool window after every conv layer (1 disables pooling).
    pub pool: usize,
    pub n_classes: usize,
}

impl CnnConfig {
    /// Two 3x3 conv layers (4 and 8 channels) with 2x2 pooling on 32x32 input.
    pub fn tiny(n_classes: usize) -> Self {
        CnnConfig {
            input_size: (32, 32),
            conv: vec![
                ConvLayerSpec {
                    channels: 4,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                ConvLayerSpec {
                    channels: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
            ],
            pool: 2,
            n_classes,
        }
    }
}

#[derive(Debug, Clone)]
struct Stage {
    geom: ConvGeom,
    weight: Range<usize>,
    bias: Range<usize>,
    pooled_len: usize,
}

#[derive(Debug, Clone)]
pub struct TinyCnn {
    pub config: CnnConfig,
    stages: Vec<Stage>,
    feat_len: usize,
    heads: Heads,
    pub(crate) layout: ParamLayout,
}

pub(crate) struct StageCache {
    relu_out: Vec<f64>,
    pooled: Vec<f64>,
    pool_idx: Vec<usize>,
}

pub(crate) struct CnnCache {
    n: usize,
    input: Vec<f64>,
    stages: Vec<StageCache>,
    /// Flattened features fed to the heads (after dropout).
    features: Vec<f64>,
    dropout_mask: Option<Vec<f64>>,
}

impl TinyCnn {
    pub fn new(config: CnnConfig) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least 2 classes".into()));
        }
        if config.conv.is_empty() || config.pool == 0 {
            return Err(Error::InvalidArgument("CNN needs at least one conv layer and pool >= 1".into()));
        }
        let mut layout = ParamLayout::default();
        let mut stages = Vec::new();
        let (mut c, (mut h, mut w)) = (1, config.input_size);
        for (i, spec) in config.conv.iter().enumerate() {
            if spec.kernel == 0 || spec.stride == 0 || spec.channels == 0 || h + 2 * spec.pad < spec.kernel || w + 2 * spec.pad < spec.kernel {
                return Err(Error::InvalidArgument(format!("conv layer {i} does not fit its input")));
            }
            let geom = ConvGeom {
                in_c: c,
                out_c: spec.channels,
                in_h: h,
                in_w: w,
                kernel: spec.kernel,
                stride: spec.stride,
                pad: spec.pad,
            };
            let fan_in = c * spec.kernel * spec.kernel;
            let weight = layout.add(
                format!("conv{i}.weight"),
                vec![spec.channels, c, spec.kernel, spec.kernel],
                Init::FanIn(fan_in),
            );
            let bias = layout.add(format!("conv{i}.bias"), vec![spec.channels], Init::Zeros);
            let (ph, pw) = (geom.out_h() / config.pool, geom.out_w() / config.pool);
            if ph == 0 || pw == 0 {
                return Err(Error::InvalidArgument(format!("conv layer {i} pools to an empty map")));
            }
            stages.push(Stage {
                geom,
                weight,
                bias,
                pooled_len: spec.channels * ph * pw,
            });
            c = spec.channels;
            h = ph;
            w = pw;
        }
        let feat_len = c * h * w;
        let heads = Heads::register(&mut layout, feat_len, config.n_classes);
        Ok(TinyCnn {
            config,
            stages,
            feat_len,
            heads,
            layout,
        })
    }

    pub(crate) fn probe_layers(&self) -> Vec<ProbeLayer> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| ProbeLayer {
                name: format!("conv{i}"),
                neurons: s.geom.out_c,
            })
            .collect()
    }

    pub(crate) fn forward(&self, params: &[f64], x: &[f64], n: usize, mode: &mut Mode<'_>) -> ForwardPass {
        let mut caches: Vec<StageCache> = Vec::with_capacity(self.stages.len());
        for (si, stage) in self.stages.iter().enumerate() {
            let g = &stage.geom;
            let input: &[f64] = if si == 0 { x } else { &caches[si - 1].pooled };
            let mut relu_out = Vec::with_capacity(n * g.out_len());
            let mut pooled = Vec::with_capacity(n * stage.pooled_len);
            let mut pool_idx = Vec::with_capacity(n * stage.pooled_len);
            for i in 0..n {
                let xi = &input[i * g.in_len()..(i + 1) * g.in_len()];
                let mut y = ops::conv2d_forward(g, xi, &params[stage.weight.clone()], &params[stage.bias.clone()]);
                ops::relu_inplace(&mut y);
                let (p, idx) = ops::maxpool_forward(&y, g.out_c, g.out_h(), g.out_w(), self.config.pool);
                relu_out.extend_from_slice(&y);
                pooled.extend_from_slice(&p);
                pool_idx.extend_from_slice(&idx);
            }
            caches.push(StageCache {
                relu_out,
                pooled,
                pool_idx,
            });
        }
        let mut features = caches.last().expect("at least one stage").pooled.clone();
        let dropout_mask = mode.dropout_mask(features.len());
        if let Some(mask) = &dropout_mask {
            features.iter_mut().zip(mask).for_each(|(f, m)| *f *= m);
        }
        let (logits, probs, boxes) = self.heads.forward(params, &features, n);
        ForwardPass {
            logits,
            probs,
            boxes,
            cache: Some(super::model::Cache::Cnn(CnnCache {
                n,
                input: x.to_vec(),
                stages: caches,
                features,
                dropout_mask,
            })),
        }
    }

    pub(crate) fn backward(
        &self,
        params: &[f64],
        cache: &CnnCache,
        boxes: &super::tensor::Tensor,
        seed: Seed<'_>,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = cache.n;
        let mut gp = vec![0.0; self.layout.len()];
        // gradient w.r.t. the ReLU output of `start` (or its pooled output when `from_pool`)
        let (mut g, start, mut from_pool) = match seed {
            Seed::Output(grad) => {
                let mut dfeat = self.heads.backward(params, &cache.features, boxes, grad, &mut gp);
                if let Some(mask) = &cache.dropout_mask {
                    dfeat.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                }
                (dfeat, self.stages.len() - 1, true)
            }
            Seed::Probe { layer, grad } => (grad, layer, false),
        };
        for si in (0..=start).rev() {
            let stage = &self.stages[si];
            let geom = &stage.geom;
            let sc = &cache.stages[si];
            let input: &[f64] = if si == 0 { &cache.input } else { &cache.stages[si - 1].pooled };
            let mut next = vec![0.0; n * geom.in_len()];
            let (gw, gb) = split_pair(&mut gp, &stage.weight, &stage.bias);
            for i in 0..n {
                let relu_i = &sc.relu_out[i * geom.out_len()..(i + 1) * geom.out_len()];
                let d_relu = if from_pool {
                    let idx = &sc.pool_idx[i * stage.pooled_len..(i + 1) * stage.pooled_len];
                    let gi = &g[i * stage.pooled_len..(i + 1) * stage.pooled_len];
                    ops::maxpool_backward(idx, gi, geom.out_len())
                } else {
                    g[i * geom.out_len()..(i + 1) * geom.out_len()].to_vec()
                };
                let d_pre = ops::relu_backward(relu_i, &d_relu);
                let xi = &input[i * geom.in_len()..(i + 1) * geom.in_len()];
                let dx = ops::conv2d_backward(geom, xi, &params[stage.weight.clone()], &d_pre, gw, gb);
                next[i * geom.in_len()..(i + 1) * geom.in_len()].copy_from_slice(&dx);
            }
            g = next;
            from_pool = true;
        }
        (gp, g)
    }

    pub(crate) fn probe_activations(&self, cache: &CnnCache, layer: usize) -> Vec<f64> {
        let g = &self.stages[layer].geom;
        let plane = g.out_h() * g.out_w();
        let relu = &cache.stages[layer].relu_out;
        let mut out = Vec::with_capacity(cache.n * g.out_c);
        for i in 0..cache.n {
            for c in 0..g.out_c {
                let off = i * g.out_len() + c * plane;
                out.push(relu[off..off + plane].iter().sum::<f64>() / plane as f64);
            }
        }
        out
    }

    /// Upstream gradient selecting the spatial mean of channel `neuron` in every sample.
    pub(crate) fn probe_seed(&self, cache: &CnnCache, layer: usize, neuron: usize) -> Vec<f64> {
        let g = &self.stages[layer].geom;
        let plane = g.out_h() * g.out_w();
        let mut seed = vec![0.0; cache.n * g.out_len()];
        for i in 0..cache.n {
            let off = i * g.out_len() + neuron * plane;
            seed[off..off + plane].iter_mut().for_each(|v| *v = 1.0 / plane as f64);
        }
        seed
    }

    pub fn feature_len(&self) -> usize {
        self.feat_len
    }
}
