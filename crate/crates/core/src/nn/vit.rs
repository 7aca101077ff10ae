//! Tiny pre-norm vision transformer with mean-pooled tokens and cached attention.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::model::{split_pair, Cache, ForwardPass, Heads, Mode, ProbeLayer, Seed};
use super::ops::{self, LayerNormCache};
use super::params::{Init, ParamLayout};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    /// `(height, width)` of the single-channel input.
    pub input_size: (usize, usize),
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_dim: usize,
    pub n_classes: usize,
}

impl VitConfig {
    /// Patch 8, d = 32, 4 heads, 4 layers on 32x32 input.
    pub fn tiny(n_classes: usize) -> Self {
        VitConfig {
            input_size: (32, 32),
            patch_size: 8,
            dim: 32,
            heads: 4,
            layers: 4,
            mlp_dim: 64,
            n_classes,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_size.0 / self.patch_size, self.input_size.1 / self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (Range<usize>, Range<usize>),
    q: (Range<usize>, Range<usize>),
    k: (Range<usize>, Range<usize>),
    v: (Range<usize>, Range<usize>),
    o: (Range<usize>, Range<usize>),
    ln2: (Range<usize>, Range<usize>),
    mlp1: (Range<usize>, Range<usize>),
    mlp2: (Range<usize>, Range<usize>),
}

#[derive(Debug, Clone)]
pub struct TinyVit {
    pub config: VitConfig,
    patch: (Range<usize>, Range<usize>),
    pos: Range<usize>,
    blocks: Vec<Block>,
    ln_f: (Range<usize>, Range<usize>),
    heads: Heads,
    pub(crate) layout: ParamLayout,
}

struct BlockCache {
    ln1: LayerNormCache,
    u: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// One `tokens x tokens` matrix per head.
    attn: Vec<Vec<f64>>,
    concat: Vec<f64>,
    mask1: Option<Vec<f64>>,
    ln2: LayerNormCache,
    u2: Vec<f64>,
    hidden: Vec<f64>,
    mask2: Option<Vec<f64>>,
}

struct SampleCache {
    patches: Vec<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
}

pub(crate) struct VitCache {
    samples: Vec<SampleCache>,
    pooled: Vec<f64>,
    layers: usize,
    heads: usize,
    tokens: usize,
}

impl VitCache {
    pub fn attention_dims(&self) -> (usize, usize, usize) {
        (self.layers, self.heads, self.tokens)
    }

    pub fn attention(&self, sample: usize, layer: usize, head: usize) -> Option<&[f64]> {
        self.samples
            .get(sample)?
            .blocks
            .get(layer)?
            .attn
            .get(head)
            .map(Vec::as_slice)
    }
}

fn pair(layout: &mut ParamLayout, name: &str, w_shape: Vec<usize>, w_init: Init, b_len: usize, b_init: Init) -> (Range<usize>, Range<usize>) {
    let w = layout.add(format!("{name}.weight"), w_shape, w_init);
    let b = layout.add(format!("{name}.bias"), vec![b_len], b_init);
    (w, b)
}

/// Copies columns `[off, off + width)` of an `n x d` matrix.
fn take_cols(m: &[f64], n: usize, d: usize, off: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        out.extend_from_slice(&m[i * d + off..i * d + off + width]);
    }
    out
}

fn put_cols(m: &mut [f64], src: &[f64], n: usize, d: usize, off: usize, width: usize) {
    for i in 0..n {
        m[i * d + off..i * d + off + width].copy_from_slice(&src[i * width..(i + 1) * width]);
    }
}

impl TinyVit {
    pub fn new(config: VitConfig) -> Result<Self> {
        let c = &config;
        if c.n_classes < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least 2 classes".into()));
        }
        if c.patch_size == 0 || c.input_size.0 % c.patch_size != 0 || c.input_size.1 % c.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "input {:?} is not divisible into {}-pixel patches",
                c.input_size, c.patch_size
            )));
        }
        if c.heads == 0 || c.dim == 0 || c.dim % c.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} must be a positive multiple of heads {}",
                c.dim, c.heads
            )));
        }
        if c.mlp_dim == 0 {
            return Err(Error::InvalidArgument("mlp_dim must be positive".into()));
        }
        let (d, m, p) = (c.dim, c.mlp_dim, c.patch_size * c.patch_size);
        let n = c.tokens();
        let mut layout = ParamLayout::default();
        let patch = pair(&mut layout, "patch", vec![p, d], Init::FanIn(p), d, Init::Zeros);
        let pos = layout.add("pos_embed", vec![n, d], Init::Uniform(0.02));
        let mut blocks = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let name = |s: &str| format!("block{l}.{s}");
            let ln1 = (
                layout.add(name("ln1.gamma"), vec![d], Init::Ones),
                layout.add(name("ln1.beta"), vec![d], Init::Zeros),
            );
            let q = pair(&mut layout, &name("q"), vec![d, d], Init::FanIn(d), d, Init::Zeros);
            let k = pair(&mut layout, &name("k"), vec![d, d], Init::FanIn(d), d, Init::Zeros);
            let v = pair(&mut layout, &name("v"), vec![d, d], Init::FanIn(d), d, Init::Zeros);
            let o = pair(&mut layout, &name("o"), vec![d, d], Init::FanIn(d), d, Init::Zeros);
            let ln2 = (
                layout.add(name("ln2.gamma"), vec![d], Init::Ones),
                layout.add(name("ln2.beta"), vec![d], Init::Zeros),
            );
            let mlp1 = pair(&mut layout, &name("mlp1"), vec![d, m], Init::FanIn(d), m, Init::Zeros);
            let mlp2 = pair(&mut layout, &name("mlp2"), vec![m, d], Init::FanIn(m), d, Init::Zeros);
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                mlp1,
                mlp2,
            });
        }
        let ln_f = (
            layout.add("ln_f.gamma", vec![d], Init::Ones),
            layout.add("ln_f.beta", vec![d], Init::Zeros),
        );
        let heads = Heads::register(&mut layout, d, c.n_classes);
        Ok(TinyVit {
            config,
            patch,
            pos,
            blocks,
            ln_f,
            heads,
            layout,
        })
    }

    pub(crate) fn probe_layers(&self) -> Vec<ProbeLayer> {
        (0..self.config.layers)
            .map(|l| ProbeLayer {
                name: format!("block{l}.mlp"),
                neurons: self.config.mlp_dim,
            })
            .collect()
    }

    fn patchify(&self, img: &[f64]) -> Vec<f64> {
        let ps = self.config.patch_size;
        let (_, w) = self.config.input_size;
        let (gh, gw) = self.config.grid();
        let mut out = Vec::with_capacity(img.len());
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..ps {
                    let row = (py * ps + dy) * w + px * ps;
                    out.extend_from_slice(&img[row..row + ps]);
                }
            }
        }
        out
    }

    fn unpatchify(&self, patches: &[f64]) -> Vec<f64> {
        let ps = self.config.patch_size;
        let (h, w) = self.config.input_size;
        let (gh, gw) = self.config.grid();
        let mut img = vec![0.0; h * w];
        let mut it = patches.chunks(ps);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..ps {
                    let row = (py * ps + dy) * w + px * ps;
                    img[row..row + ps].copy_from_slice(it.next().expect("patch row"));
                }
            }
        }
        img
    }

    fn block_forward(&self, params: &[f64], b: &Block, h: &[f64], mode: &mut Mode<'_>) -> (Vec<f64>, BlockCache) {
        let c = &self.config;
        let (n, d, m, dk) = (c.tokens(), c.dim, c.mlp_dim, c.head_dim());
        let (u, ln1) = ops::layer_norm_forward(h, &params[b.ln1.0.clone()], &params[b.ln1.1.clone()], d);
        let q = ops::dense_forward(&u, &params[b.q.0.clone()], &params[b.q.1.clone()], n, d, d);
        let k = ops::dense_forward(&u, &params[b.k.0.clone()], &params[b.k.1.clone()], n, d, d);
        let v = ops::dense_forward(&u, &params[b.v.0.clone()], &params[b.v.1.clone()], n, d, d);
        let mut concat = vec![0.0; n * d];
        let mut attn = Vec::with_capacity(c.heads);
        for head in 0..c.heads {
            let off = head * dk;
            let qh = take_cols(&q, n, d, off, dk);
            let kh = take_cols(&k, n, d, off, dk);
            let vh = take_cols(&v, n, d, off, dk);
            let a = ops::attention_weights(&qh, &kh, n, dk).expect("head dims validated at construction");
            let oh = ops::matmul(&a, &vh, n, n, dk);
            put_cols(&mut concat, &oh, n, d, off, dk);
            attn.push(a);
        }
        let mut z = ops::dense_forward(&concat, &params[b.o.0.clone()], &params[b.o.1.clone()], n, d, d);
        let mask1 = mode.dropout_mask(n * d);
        if let Some(mk) = &mask1 {
            z.iter_mut().zip(mk).for_each(|(v, s)| *v *= s);
        }
        let h1: Vec<f64> = h.iter().zip(&z).map(|(a, b)| a + b).collect();
        let (u2, ln2) = ops::layer_norm_forward(&h1, &params[b.ln2.0.clone()], &params[b.ln2.1.clone()], d);
        let mut hidden = ops::dense_forward(&u2, &params[b.mlp1.0.clone()], &params[b.mlp1.1.clone()], n, d, m);
        ops::relu_inplace(&mut hidden);
        let mut y = ops::dense_forward(&hidden, &params[b.mlp2.0.clone()], &params[b.mlp2.1.clone()], n, m, d);
        let mask2 = mode.dropout_mask(n * d);
        if let Some(mk) = &mask2 {
            y.iter_mut().zip(mk).for_each(|(v, s)| *v *= s);
        }
        let h2 = h1.iter().zip(&y).map(|(a, b)| a + b).collect();
        (
            h2,
            BlockCache {
                ln1,
                u,
                q,
                k,
                v,
                attn,
                concat,
                mask1,
                ln2,
                u2,
                hidden,
                mask2,
            },
        )
    }

    /// Backward through one block given `dL/d(output)` and an optional extra
    /// gradient injected at the MLP hidden activation. Returns `dL/d(input)`.
    fn block_backward(
        &self,
        params: &[f64],
        b: &Block,
        bc: &BlockCache,
        gh2: &[f64],
        inject: Option<&[f64]>,
        gp: &mut [f64],
    ) -> Vec<f64> {
        let c = &self.config;
        let (n, d, m, dk) = (c.tokens(), c.dim, c.mlp_dim, c.head_dim());
        let scale = 1.0 / (dk as f64).sqrt();

        let mut gy = gh2.to_vec();
        if let Some(mk) = &bc.mask2 {
            gy.iter_mut().zip(mk).for_each(|(g, s)| *g *= s);
        }
        let (gw, gb) = split_pair(gp, &b.mlp2.0, &b.mlp2.1);
        let mut g_hidden = ops::dense_backward(&bc.hidden, &params[b.mlp2.0.clone()], &gy, n, m, d, gw, gb);
        if let Some(extra) = inject {
            g_hidden.iter_mut().zip(extra).for_each(|(g, e)| *g += e);
        }
        let g_m = ops::relu_backward(&bc.hidden, &g_hidden);
        let (gw, gb) = split_pair(gp, &b.mlp1.0, &b.mlp1.1);
        let g_u2 = ops::dense_backward(&bc.u2, &params[b.mlp1.0.clone()], &g_m, n, d, m, gw, gb);
        let (gg, gbeta) = split_pair(gp, &b.ln2.0, &b.ln2.1);
        let g_ln2 = ops::layer_norm_backward(&bc.ln2, &params[b.ln2.0.clone()], &g_u2, d, gg, gbeta);
        let gh1: Vec<f64> = gh2.iter().zip(&g_ln2).map(|(a, b)| a + b).collect();

        let mut gz = gh1.clone();
        if let Some(mk) = &bc.mask1 {
            gz.iter_mut().zip(mk).for_each(|(g, s)| *g *= s);
        }
        let (gw, gb) = split_pair(gp, &b.o.0, &b.o.1);
        let g_concat = ops::dense_backward(&bc.concat, &params[b.o.0.clone()], &gz, n, d, d, gw, gb);

        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        for head in 0..c.heads {
            let off = head * dk;
            let a = &bc.attn[head];
            let qh = take_cols(&bc.q, n, d, off, dk);
            let kh = take_cols(&bc.k, n, d, off, dk);
            let vh = take_cols(&bc.v, n, d, off, dk);
            let g_oh = take_cols(&g_concat, n, d, off, dk);
            let d_a = ops::matmul_bt(&g_oh, &vh, n, dk, n);
            let mut gvh = vec![0.0; n * dk];
            ops::add_matmul_at(&mut gvh, a, &g_oh, n, n, dk);
            let mut d_s = ops::softmax_rows_backward(a, &d_a, n);
            d_s.iter_mut().for_each(|v| *v *= scale);
            let gqh = ops::matmul(&d_s, &kh, n, n, dk);
            let mut gkh = vec![0.0; n * dk];
            ops::add_matmul_at(&mut gkh, &d_s, &qh, n, n, dk);
            put_cols(&mut gq, &gqh, n, d, off, dk);
            put_cols(&mut gk, &gkh, n, d, off, dk);
            put_cols(&mut gv, &gvh, n, d, off, dk);
        }
        let mut g_u = vec![0.0; n * d];
        for (proj, g) in [(&b.q, &gq), (&b.k, &gk), (&b.v, &gv)] {
            let (gw, gb) = split_pair(gp, &proj.0, &proj.1);
            let part = ops::dense_backward(&bc.u, &params[proj.0.clone()], g, n, d, d, gw, gb);
            g_u.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        let (gg, gbeta) = split_pair(gp, &b.ln1.0, &b.ln1.1);
        let g_ln1 = ops::layer_norm_backward(&bc.ln1, &params[b.ln1.0.clone()], &g_u, d, gg, gbeta);
        gh1.iter().zip(g_ln1).map(|(a, b)| a + b).collect()
    }

    pub(crate) fn forward(&self, params: &[f64], x: &[f64], n_samples: usize, mode: &mut Mode<'_>) -> ForwardPass {
        let c = &self.config;
        let (n, d, p) = (c.tokens(), c.dim, c.patch_size * c.patch_size);
        let img_len = c.input_size.0 * c.input_size.1;
        let mut samples = Vec::with_capacity(n_samples);
        let mut pooled = Vec::with_capacity(n_samples * d);
        for i in 0..n_samples {
            let patches = self.patchify(&x[i * img_len..(i + 1) * img_len]);
            let mut h = ops::dense_forward(&patches, &params[self.patch.0.clone()], &params[self.patch.1.clone()], n, p, d);
            h.iter_mut().zip(&params[self.pos.clone()]).for_each(|(a, b)| *a += b);
            let mut blocks = Vec::with_capacity(self.blocks.len());
            for b in &self.blocks {
                let (h2, bc) = self.block_forward(params, b, &h, mode);
                h = h2;
                blocks.push(bc);
            }
            let (f, ln_f) = ops::layer_norm_forward(&h, &params[self.ln_f.0.clone()], &params[self.ln_f.1.clone()], d);
            for j in 0..d {
                pooled.push((0..n).map(|t| f[t * d + j]).sum::<f64>() / n as f64);
            }
            samples.push(SampleCache { patches, blocks, ln_f });
        }
        let (logits, probs, boxes) = self.heads.forward(params, &pooled, n_samples);
        ForwardPass {
            logits,
            probs,
            boxes,
            cache: Some(Cache::Vit(VitCache {
                samples,
                pooled,
                layers: c.layers,
                heads: c.heads,
                tokens: n,
            })),
        }
    }

    pub(crate) fn backward(&self, params: &[f64], cache: &VitCache, boxes: &Tensor, seed: Seed<'_>) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let (n, d, p) = (c.tokens(), c.dim, c.patch_size * c.patch_size);
        let n_samples = cache.samples.len();
        let mut gp = vec![0.0; self.layout.len()];
        let (d_pooled, probe) = match seed {
            Seed::Output(grad) => (Some(self.heads.backward(params, &cache.pooled, boxes, grad, &mut gp)), None),
            Seed::Probe { layer, grad } => (None, Some((layer, grad))),
        };
        let mut input_grad = Vec::with_capacity(n_samples * c.input_size.0 * c.input_size.1);
        for (i, sc) in cache.samples.iter().enumerate() {
            let (mut gh, top) = match (&d_pooled, &probe) {
                (Some(dp), _) => {
                    let gpool = &dp[i * d..(i + 1) * d];
                    let gf: Vec<f64> = (0..n * d).map(|t| gpool[t % d] / n as f64).collect();
                    let (gg, gb) = split_pair(&mut gp, &self.ln_f.0, &self.ln_f.1);
                    (ops::layer_norm_backward(&sc.ln_f, &params[self.ln_f.0.clone()], &gf, d, gg, gb), self.blocks.len())
                }
                (None, Some((layer, _))) => (vec![0.0; n * d], layer + 1),
                (None, None) => unreachable!("seed is either output or probe"),
            };
            for l in (0..top).rev() {
                let inject = match &probe {
                    Some((layer, grad)) if *layer == l => {
                        let m = c.mlp_dim;
                        Some(&grad[i * n * m..(i + 1) * n * m])
                    }
                    _ => None,
                };
                gh = self.block_backward(params, &self.blocks[l], &sc.blocks[l], &gh, inject, &mut gp);
            }
            gp[self.pos.clone()].iter_mut().zip(&gh).for_each(|(a, b)| *a += b);
            let (gw, gb) = split_pair(&mut gp, &self.patch.0, &self.patch.1);
            let g_patches = ops::dense_backward(&sc.patches, &params[self.patch.0.clone()], &gh, n, p, d, gw, gb);
            input_grad.extend(self.unpatchify(&g_patches));
        }
        (gp, input_grad)
    }

    pub(crate) fn probe_activations(&self, cache: &VitCache, layer: usize) -> Vec<f64> {
        let (n, m) = (self.config.tokens(), self.config.mlp_dim);
        let mut out = Vec::with_capacity(cache.samples.len() * m);
        for sc in &cache.samples {
            let hidden = &sc.blocks[layer].hidden;
            for j in 0..m {
                out.push((0..n).map(|t| hidden[t * m + j]).sum::<f64>() / n as f64);
            }
        }
        out
    }

    /// Upstream gradient selecting the token-mean of MLP unit `neuron` in every sample.
    pub(crate) fn probe_seed(&self, cache: &VitCache, _layer: usize, neuron: usize) -> Vec<f64> {
        let (n, m) = (self.config.tokens(), self.config.mlp_dim);
        let mut seed = vec![0.0; cache.samples.len() * n * m];
        for i in 0..cache.samples.len() {
            for t in 0..n {
                seed[i * n * m + t * m + neuron] = 1.0 / n as f64;
            }
        }
        seed
    }
}
