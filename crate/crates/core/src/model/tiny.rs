#![allow(clippy::needless_range_loop)]
//! A small pre-LayerNorm decoder-only transformer with hand-written
//! backpropagation.
//!
//! All parameters live in one flat buffer; [`TinyTransformer::tensors`]
//! names the slices for checkpoints. Inference runs one position at a time
//! against a per-layer key/value cache; training runs whole sequences and
//! returns the flat gradient.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_context, HiddenVector, ModelCache, PositionOutput, TargetModel};
use crate::seq::TokenId;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context: usize,
    pub d_ff: usize,
}

impl TinyConfig {
    /// Two layers, width 64, four heads, 256 positions.
    pub fn desk(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            context: 256,
            d_ff: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.vocab > 512 {
            return Err(Error::Config(format!("vocab {} outside 1..=512", self.vocab)));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config("d_model must be a multiple of n_heads".into()));
        }
        if self.n_layers == 0 || self.context == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers, context and d_ff must be positive".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_fc: usize,
    b_fc: usize,
    w_proj: usize,
    b_proj: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    slots: Vec<(String, Vec<usize>, usize)>,
    total: usize,
}

impl Layout {
    fn new(cfg: &TinyConfig) -> Self {
        let (v, d, f, c) = (cfg.vocab, cfg.d_model, cfg.d_ff, cfg.context);
        let mut slots = Vec::new();
        let mut off = 0;
        let mut alloc = |name: String, shape: Vec<usize>| {
            let at = off;
            off += shape.iter().product::<usize>();
            slots.push((name, shape, at));
            at
        };
        let tok_emb = alloc("tok_emb".into(), vec![v, d]);
        let pos_emb = alloc("pos_emb".into(), vec![c, d]);
        let layers = (0..cfg.n_layers)
            .map(|l| LayerIdx {
                ln1_g: alloc(format!("h{l}.ln1.g"), vec![d]),
                ln1_b: alloc(format!("h{l}.ln1.b"), vec![d]),
                w_qkv: alloc(format!("h{l}.attn.w_qkv"), vec![3 * d, d]),
                b_qkv: alloc(format!("h{l}.attn.b_qkv"), vec![3 * d]),
                w_o: alloc(format!("h{l}.attn.w_o"), vec![d, d]),
                b_o: alloc(format!("h{l}.attn.b_o"), vec![d]),
                ln2_g: alloc(format!("h{l}.ln2.g"), vec![d]),
                ln2_b: alloc(format!("h{l}.ln2.b"), vec![d]),
                w_fc: alloc(format!("h{l}.mlp.w_fc"), vec![f, d]),
                b_fc: alloc(format!("h{l}.mlp.b_fc"), vec![f]),
                w_proj: alloc(format!("h{l}.mlp.w_proj"), vec![d, f]),
                b_proj: alloc(format!("h{l}.mlp.b_proj"), vec![d]),
            })
            .collect();
        let lnf_g = alloc("lnf.g".into(), vec![d]);
        let lnf_b = alloc("lnf.b".into(), vec![d]);
        let w_out = alloc("w_out".into(), vec![v, d]);
        Self {
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            slots,
            total: off,
        }
    }
}

// out = W x + b, W is rows x cols row-major
fn affine(w: &[f64], b: Option<&[f64]>, rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b.map_or(0.0, |b| b[r]);
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out[r] = acc;
    }
}

// dx += Wᵀ dy
fn affine_back_input(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (d, wi) in dx.iter_mut().zip(row) {
            *d += g * wi;
        }
    }
}

// dW += dy xᵀ
fn affine_back_weight(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for r in 0..rows {
        let g = dy[r];
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..(r + 1) * cols];
        for (d, xi) in row.iter_mut().zip(x) {
            *d += g * xi;
        }
    }
}

/// Returns (normalized xhat, 1/std) and writes `g * xhat + b` to `out`.
fn layer_norm(x: &[f64], g: &[f64], b: &[f64], out: &mut [f64], xhat: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = g[i] * xhat[i] + b[i];
    }
    rstd
}

fn layer_norm_back(dy: &[f64], xhat: &[f64], rstd: f64, g: &[f64], dg: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let n = dy.len() as f64;
    let mut mean_d = 0.0;
    let mut mean_dx = 0.0;
    for i in 0..dy.len() {
        let d = dy[i] * g[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
        mean_d += d;
        mean_dx += d * xhat[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for i in 0..dy.len() {
        let d = dy[i] * g[i];
        dx[i] += rstd * (d - mean_d - xhat[i] * mean_dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyTransformer {
    cfg: TinyConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Keys and values of every cached position, per layer.
#[derive(Clone, Debug, Default)]
pub struct TinyCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    d_model: usize,
}

impl ModelCache for TinyCache {
    fn len(&self) -> usize {
        self.len
    }

    fn truncate(&mut self, len: usize) {
        if len < self.len {
            for l in 0..self.keys.len() {
                self.keys[l].truncate(len * self.d_model);
                self.values[l].truncate(len * self.d_model);
            }
            self.len = len;
        }
    }
}

struct LayerActs {
    x_in: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>, // [head][t][j], j <= t
    att: Vec<f64>,
    x_mid: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

impl TinyTransformer {
    pub fn new<R: Rng + ?Sized>(cfg: TinyConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let proj = Normal::new(0.0, 0.02 / (2.0 * cfg.n_layers as f64).sqrt()).expect("valid std");
        for (name, _, off) in &layout.slots {
            let len = Self::slot_len(&layout, name);
            let slice = &mut params[*off..*off + len];
            if name.ends_with(".g") {
                slice.fill(1.0);
            } else if name.ends_with(".b") || name.contains(".b_") {
                slice.fill(0.0);
            } else if name.ends_with("w_proj") || name.ends_with("w_o") {
                slice.iter_mut().for_each(|p| *p = proj.sample(rng));
            } else {
                slice.iter_mut().for_each(|p| *p = normal.sample(rng));
            }
        }
        Ok(Self { cfg, layout, params })
    }

    fn slot_len(layout: &Layout, name: &str) -> usize {
        layout
            .slots
            .iter()
            .find(|s| s.0 == name)
            .map_or(0, |s| s.1.iter().product())
    }

    pub fn config(&self) -> &TinyConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter slices with their shapes.
    pub fn tensors(&self) -> Vec<(&str, &[usize], &[f64])> {
        self.layout
            .slots
            .iter()
            .map(|(name, shape, off)| {
                let len: usize = shape.iter().product();
                (name.as_str(), shape.as_slice(), &self.params[*off..*off + len])
            })
            .collect()
    }

    /// Rebuilds a model from named tensors, checking every name and shape.
    pub fn from_tensors<'a>(
        cfg: TinyConfig,
        tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f64])>,
    ) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![f64::NAN; layout.total];
        let mut seen = 0;
        for (name, shape, data) in tensors {
            let slot = layout
                .slots
                .iter()
                .find(|s| s.0 == name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor `{name}`")))?;
            if slot.1.as_slice() != shape || data.len() != shape.iter().product::<usize>() {
                return Err(Error::Config(format!("tensor `{name}` has the wrong shape")));
            }
            params[slot.2..slot.2 + data.len()].copy_from_slice(data);
            seen += 1;
        }
        if seen != layout.slots.len() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config(
                "checkpoint is missing tensors or holds non-finite values".into(),
            ));
        }
        Ok(Self { cfg, layout, params })
    }

    fn p(&self, off: usize, len: usize) -> &[f64] {
        &self.params[off..off + len]
    }

    /// One position of incremental inference.
    fn step(&self, cache: &mut TinyCache, token: TokenId, pos: usize) -> PositionOutput {
        let c = &self.cfg;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab);
        let hd = c.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x: Vec<f64> = self
            .p(self.layout.tok_emb + token.index() * d, d)
            .iter()
            .zip(self.p(self.layout.pos_emb + pos * d, d))
            .map(|(a, b)| a + b)
            .collect();
        let mut a = vec![0.0; d];
        let mut xhat = vec![0.0; d];
        let mut qkv = vec![0.0; 3 * d];
        let mut att = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut hbuf = vec![0.0; f];
        for (l, li) in self.layout.layers.iter().enumerate() {
            layer_norm(&x, self.p(li.ln1_g, d), self.p(li.ln1_b, d), &mut a, &mut xhat);
            affine(
                self.p(li.w_qkv, 3 * d * d),
                Some(self.p(li.b_qkv, 3 * d)),
                3 * d,
                d,
                &a,
                &mut qkv,
            );
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            let n = pos + 1;
            for h in 0..c.n_heads {
                let q = &qkv[h * hd..(h + 1) * hd];
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| {
                        let k = &cache.keys[l][j * d + h * hd..j * d + (h + 1) * hd];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                softmax_in_place(&mut scores);
                let o = &mut att[h * hd..(h + 1) * hd];
                o.fill(0.0);
                for (j, p) in scores.iter().enumerate() {
                    let vv = &cache.values[l][j * d + h * hd..j * d + (h + 1) * hd];
                    for (oi, vi) in o.iter_mut().zip(vv) {
                        *oi += p * vi;
                    }
                }
            }
            affine(self.p(li.w_o, d * d), Some(self.p(li.b_o, d)), d, d, &att, &mut tmp);
            x.iter_mut().zip(&tmp).for_each(|(xi, t)| *xi += t);
            layer_norm(&x, self.p(li.ln2_g, d), self.p(li.ln2_b, d), &mut a, &mut xhat);
            affine(self.p(li.w_fc, f * d), Some(self.p(li.b_fc, f)), f, d, &a, &mut hbuf);
            hbuf.iter_mut().for_each(|h| *h = gelu(*h));
            affine(
                self.p(li.w_proj, d * f),
                Some(self.p(li.b_proj, d)),
                d,
                f,
                &hbuf,
                &mut tmp,
            );
            x.iter_mut().zip(&tmp).for_each(|(xi, t)| *xi += t);
        }
        let mut hidden = vec![0.0; d];
        layer_norm(
            &x,
            self.p(self.layout.lnf_g, d),
            self.p(self.layout.lnf_b, d),
            &mut hidden,
            &mut xhat,
        );
        let mut logits = vec![0.0; v];
        affine(self.p(self.layout.w_out, v * d), None, v, d, &hidden, &mut logits);
        cache.len += 1;
        PositionOutput {
            logits,
            hidden: HiddenVector(hidden),
        }
    }

    /// Mean next-token cross-entropy over positions `loss_from..len-1` of
    /// `seq`, and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, seq: &[TokenId], loss_from: usize) -> Result<(f64, Vec<f64>)> {
        let c = &self.cfg;
        let (d, f, v, hdim) = (c.d_model, c.d_ff, c.vocab, c.head_dim());
        let t_len = seq.len();
        if t_len < 2 || t_len > c.context {
            return Err(Error::Usage(format!(
                "training sequence length {t_len} outside 2..={}",
                c.context
            )));
        }
        check_context(seq, v)?;
        let targets = t_len - 1;
        if loss_from >= targets {
            return Err(Error::Usage("no positions to score".into()));
        }
        let n_scored = (targets - loss_from) as f64;
        let scale = 1.0 / (hdim as f64).sqrt();
        let nh = c.n_heads;

        // forward
        let mut x = vec![0.0; t_len * d];
        for (t, tok) in seq.iter().enumerate() {
            let e = self.p(self.layout.tok_emb + tok.index() * d, d);
            let pe = self.p(self.layout.pos_emb + t * d, d);
            for i in 0..d {
                x[t * d + i] = e[i] + pe[i];
            }
        }
        let mut acts: Vec<LayerActs> = Vec::with_capacity(c.n_layers);
        for li in &self.layout.layers {
            let x_in = x.clone();
            let mut xhat1 = vec![0.0; t_len * d];
            let mut a1 = vec![0.0; t_len * d];
            let mut rstd1 = vec![0.0; t_len];
            let mut qkv = vec![0.0; t_len * 3 * d];
            for t in 0..t_len {
                let r = t * d..(t + 1) * d;
                rstd1[t] = layer_norm(
                    &x_in[r.clone()],
                    self.p(li.ln1_g, d),
                    self.p(li.ln1_b, d),
                    &mut a1[r.clone()],
                    &mut xhat1[r.clone()],
                );
                affine(
                    self.p(li.w_qkv, 3 * d * d),
                    Some(self.p(li.b_qkv, 3 * d)),
                    3 * d,
                    d,
                    &a1[r],
                    &mut qkv[t * 3 * d..(t + 1) * 3 * d],
                );
            }
            let mut probs = vec![0.0; nh * t_len * t_len];
            let mut att = vec![0.0; t_len * d];
            for h in 0..nh {
                for t in 0..t_len {
                    let q = &qkv[t * 3 * d + h * hdim..t * 3 * d + (h + 1) * hdim];
                    let row = &mut probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                    for (j, s) in row.iter_mut().enumerate() {
                        let k = &qkv[j * 3 * d + d + h * hdim..j * 3 * d + d + (h + 1) * hdim];
                        *s = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let o = &mut att[t * d + h * hdim..t * d + (h + 1) * hdim];
                    for (j, p) in row.iter().enumerate() {
                        let vv = &qkv[j * 3 * d + 2 * d + h * hdim..j * 3 * d + 2 * d + (h + 1) * hdim];
                        for (oi, vi) in o.iter_mut().zip(vv) {
                            *oi += p * vi;
                        }
                    }
                }
            }
            let mut x_mid = x_in.clone();
            let mut tmp = vec![0.0; d];
            for t in 0..t_len {
                affine(
                    self.p(li.w_o, d * d),
                    Some(self.p(li.b_o, d)),
                    d,
                    d,
                    &att[t * d..(t + 1) * d],
                    &mut tmp,
                );
                for i in 0..d {
                    x_mid[t * d + i] += tmp[i];
                }
            }
            let mut xhat2 = vec![0.0; t_len * d];
            let mut a2 = vec![0.0; t_len * d];
            let mut rstd2 = vec![0.0; t_len];
            let mut h_pre = vec![0.0; t_len * f];
            let mut h_act = vec![0.0; t_len * f];
            let mut x_out = x_mid.clone();
            for t in 0..t_len {
                let r = t * d..(t + 1) * d;
                rstd2[t] = layer_norm(
                    &x_mid[r.clone()],
                    self.p(li.ln2_g, d),
                    self.p(li.ln2_b, d),
                    &mut a2[r.clone()],
                    &mut xhat2[r.clone()],
                );
                affine(
                    self.p(li.w_fc, f * d),
                    Some(self.p(li.b_fc, f)),
                    f,
                    d,
                    &a2[r],
                    &mut h_pre[t * f..(t + 1) * f],
                );
                for i in 0..f {
                    h_act[t * f + i] = gelu(h_pre[t * f + i]);
                }
                affine(
                    self.p(li.w_proj, d * f),
                    Some(self.p(li.b_proj, d)),
                    d,
                    f,
                    &h_act[t * f..(t + 1) * f],
                    &mut tmp,
                );
                for i in 0..d {
                    x_out[t * d + i] += tmp[i];
                }
            }
            acts.push(LayerActs {
                x_in,
                xhat1,
                rstd1,
                a1,
                qkv,
                probs,
                att,
                x_mid,
                xhat2,
                rstd2,
                a2,
                h_pre,
                h_act,
            });
            x = x_out;
        }
        let mut xhatf = vec![0.0; t_len * d];
        let mut hidden = vec![0.0; t_len * d];
        let mut rstdf = vec![0.0; t_len];
        for t in 0..t_len {
            let r = t * d..(t + 1) * d;
            rstdf[t] = layer_norm(
                &x[r.clone()],
                self.p(self.layout.lnf_g, d),
                self.p(self.layout.lnf_b, d),
                &mut hidden[r.clone()],
                &mut xhatf[r],
            );
        }

        // loss + backward through the output projection
        let mut grad = vec![0.0; self.params.len()];
        let mut dhidden = vec![0.0; t_len * d];
        let mut loss = 0.0;
        let mut logits = vec![0.0; v];
        for t in loss_from..targets {
            let h = &hidden[t * d..(t + 1) * d];
            affine(self.p(self.layout.w_out, v * d), None, v, d, h, &mut logits);
            softmax_in_place(&mut logits);
            let gold = seq[t + 1].index();
            loss -= logits[gold].max(1e-300).ln();
            logits[gold] -= 1.0;
            logits.iter_mut().for_each(|g| *g /= n_scored);
            affine_back_weight(
                &mut grad[self.layout.w_out..self.layout.w_out + v * d],
                v,
                d,
                &logits,
                h,
            );
            affine_back_input(
                self.p(self.layout.w_out, v * d),
                v,
                d,
                &logits,
                &mut dhidden[t * d..(t + 1) * d],
            );
        }
        loss /= n_scored;

        let mut dx = vec![0.0; t_len * d];
        {
            let (gof, bof) = (self.layout.lnf_g, self.layout.lnf_b);
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for t in 0..t_len {
                let r = t * d..(t + 1) * d;
                layer_norm_back(
                    &dhidden[r.clone()],
                    &xhatf[r.clone()],
                    rstdf[t],
                    self.p(gof, d),
                    &mut dg,
                    &mut db,
                    &mut dx[r],
                );
            }
            add_into(&mut grad[gof..gof + d], &dg);
            add_into(&mut grad[bof..bof + d], &db);
        }

        for (li, act) in self.layout.layers.iter().zip(&acts).rev() {
            // MLP branch: x_out = x_mid + W_proj gelu(W_fc ln2(x_mid) + b_fc) + b_proj
            let mut dx_mid = dx.clone();
            let mut dh = vec![0.0; f];
            let mut da2 = vec![0.0; d];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for t in 0..t_len {
                let dy = &dx[t * d..(t + 1) * d];
                add_into(&mut grad[li.b_proj..li.b_proj + d], dy);
                affine_back_weight(
                    &mut grad[li.w_proj..li.w_proj + d * f],
                    d,
                    f,
                    dy,
                    &act.h_act[t * f..(t + 1) * f],
                );
                dh.fill(0.0);
                affine_back_input(self.p(li.w_proj, d * f), d, f, dy, &mut dh);
                for i in 0..f {
                    dh[i] *= gelu_grad(act.h_pre[t * f + i]);
                }
                add_into(&mut grad[li.b_fc..li.b_fc + f], &dh);
                affine_back_weight(
                    &mut grad[li.w_fc..li.w_fc + f * d],
                    f,
                    d,
                    &dh,
                    &act.a2[t * d..(t + 1) * d],
                );
                da2.fill(0.0);
                affine_back_input(self.p(li.w_fc, f * d), f, d, &dh, &mut da2);
                let r = t * d..(t + 1) * d;
                layer_norm_back(
                    &da2,
                    &act.xhat2[r.clone()],
                    act.rstd2[t],
                    self.p(li.ln2_g, d),
                    &mut dg,
                    &mut db,
                    &mut dx_mid[r],
                );
            }
            add_into(&mut grad[li.ln2_g..li.ln2_g + d], &dg);
            add_into(&mut grad[li.ln2_b..li.ln2_b + d], &db);

            // attention branch: x_mid = x_in + W_o att + b_o
            let mut dx_in = dx_mid.clone();
            let mut datt = vec![0.0; t_len * d];
            for t in 0..t_len {
                let dy = &dx_mid[t * d..(t + 1) * d];
                add_into(&mut grad[li.b_o..li.b_o + d], dy);
                affine_back_weight(
                    &mut grad[li.w_o..li.w_o + d * d],
                    d,
                    d,
                    dy,
                    &act.att[t * d..(t + 1) * d],
                );
                affine_back_input(self.p(li.w_o, d * d), d, d, dy, &mut datt[t * d..(t + 1) * d]);
            }
            let mut dqkv = vec![0.0; t_len * 3 * d];
            let mut dp = vec![0.0; t_len];
            for h in 0..nh {
                for t in 0..t_len {
                    let row = &act.probs[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                    let dout = &datt[t * d + h * hdim..t * d + (h + 1) * hdim];
                    let mut dot_pd = 0.0;
                    for j in 0..=t {
                        let vv = &act.qkv[j * 3 * d + 2 * d + h * hdim..j * 3 * d + 2 * d + (h + 1) * hdim];
                        dp[j] = dout.iter().zip(vv).map(|(a, b)| a * b).sum();
                        dot_pd += row[j] * dp[j];
                        let dv = &mut dqkv[j * 3 * d + 2 * d + h * hdim..j * 3 * d + 2 * d + (h + 1) * hdim];
                        for (dvi, gi) in dv.iter_mut().zip(dout) {
                            *dvi += row[j] * gi;
                        }
                    }
                    for j in 0..=t {
                        let ds = row[j] * (dp[j] - dot_pd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for i in 0..hdim {
                            let qi = t * 3 * d + h * hdim + i;
                            let ki = j * 3 * d + d + h * hdim + i;
                            dqkv[qi] += ds * act.qkv[ki];
                            dqkv[ki] += ds * act.qkv[qi];
                        }
                    }
                }
            }
            let mut da1 = vec![0.0; d];
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for t in 0..t_len {
                let dy = &dqkv[t * 3 * d..(t + 1) * 3 * d];
                add_into(&mut grad[li.b_qkv..li.b_qkv + 3 * d], dy);
                affine_back_weight(
                    &mut grad[li.w_qkv..li.w_qkv + 3 * d * d],
                    3 * d,
                    d,
                    dy,
                    &act.a1[t * d..(t + 1) * d],
                );
                da1.fill(0.0);
                affine_back_input(self.p(li.w_qkv, 3 * d * d), 3 * d, d, dy, &mut da1);
                let r = t * d..(t + 1) * d;
                layer_norm_back(
                    &da1,
                    &act.xhat1[r.clone()],
                    act.rstd1[t],
                    self.p(li.ln1_g, d),
                    &mut dg,
                    &mut db,
                    &mut dx_in[r],
                );
            }
            add_into(&mut grad[li.ln1_g..li.ln1_g + d], &dg);
            add_into(&mut grad[li.ln1_b..li.ln1_b + d], &db);
            debug_assert_eq!(act.x_in.len(), dx_in.len());
            debug_assert_eq!(act.x_mid.len(), dx_in.len());
            dx = dx_in;
        }

        for (t, tok) in seq.iter().enumerate() {
            let dy = &dx[t * d..(t + 1) * d];
            let te = self.layout.tok_emb + tok.index() * d;
            add_into(&mut grad[te..te + d], dy);
            let pe = self.layout.pos_emb + t * d;
            add_into(&mut grad[pe..pe + d], dy);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "transformer loss".into(),
            });
        }
        Ok((loss, grad))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl TargetModel for TinyTransformer {
    type Cache = TinyCache;

    fn vocab_size(&self) -> usize {
        self.cfg.vocab
    }

    fn hidden_dim(&self) -> usize {
        self.cfg.d_model
    }

    fn new_cache(&self) -> TinyCache {
        TinyCache {
            keys: vec![Vec::new(); self.cfg.n_layers],
            values: vec![Vec::new(); self.cfg.n_layers],
            len: 0,
            d_model: self.cfg.d_model,
        }
    }

    fn forward_cached(&self, cache: &mut TinyCache, context: &[TokenId]) -> Result<Vec<PositionOutput>> {
        check_context(context, self.cfg.vocab)?;
        if context.len() > self.cfg.context {
            return Err(Error::Model(format!(
                "context of {} tokens exceeds the model limit of {}",
                context.len(),
                self.cfg.context
            )));
        }
        if cache.len() > context.len() {
            return Err(Error::Usage("cache is longer than the context".into()));
        }
        let start = cache.len();
        Ok((start..context.len())
            .map(|pos| self.step(cache, context[pos], pos))
            .collect())
    }
}

/// Adam over a flat parameter buffer.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::tokens;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> TinyConfig {
        TinyConfig {
            vocab: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            context: 16,
            d_ff: 12,
        }
    }

    fn model(seed: u64) -> TinyTransformer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = TinyTransformer::new(small(), &mut rng).unwrap();
        // larger weights than the default init so the check exercises every path
        let normal = Normal::new(0.0, 0.4).unwrap();
        for p in m.params_mut() {
            *p += normal.sample(&mut rng);
        }
        m
    }

    #[test]
    fn desk_config_is_valid() {
        assert!(TinyConfig::desk(128).validate().is_ok());
        assert!(TinyConfig::desk(600).validate().is_err());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn cached_and_full_forward_agree() {
        let m = model(1);
        let ctx = tokens(&[1, 4, 2, 9, 3, 3, 7]);
        let full = m.forward(&ctx).unwrap();
        let mut cache = m.new_cache();
        let mut inc = m.forward_cached(&mut cache, &ctx[..3]).unwrap();
        inc.extend(m.forward_cached(&mut cache, &ctx).unwrap());
        assert_eq!(inc, full);
        // roll back and recompute the tail
        cache.truncate(4);
        assert_eq!(cache.len(), 4);
        let tail = m.forward_cached(&mut cache, &ctx).unwrap();
        assert_eq!(tail, full[4..].to_vec());
        assert!(full
            .iter()
            .all(|o| o.hidden.is_finite() && o.logits.iter().all(|l| l.is_finite())));
    }

    #[test]
    fn forward_agrees_with_training_loss() {
        let m = model(2);
        let seq = tokens(&[0, 5, 6, 2, 8, 10]);
        let outs = m.forward(&seq).unwrap();
        let mut want = 0.0;
        for t in 0..seq.len() - 1 {
            want -= crate::linalg::log_softmax(&outs[t].logits)[seq[t + 1].index()];
        }
        want /= (seq.len() - 1) as f64;
        let (loss, _) = m.loss_and_grad(&seq, 0).unwrap();
        assert!((loss - want).abs() < 1e-10, "{loss} vs {want}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model(3);
        let seq = tokens(&[0, 5, 6, 2, 8, 10, 4]);
        let (_, grad) = m.loss_and_grad(&seq, 1).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, _, _) in m.tensors() {
            let slot = m.layout.slots.iter().find(|s| s.0 == name).unwrap();
            let len: usize = slot.1.iter().product();
            // a handful of coordinates from each tensor
            for k in [0, len / 3, len / 2, len - 1] {
                let i = slot.2 + k;
                let mut plus = m.clone();
                plus.params[i] += eps;
                let mut minus = m.clone();
                minus.params[i] -= eps;
                let lp = plus.loss_and_grad(&seq, 1).unwrap().0;
                let lm = minus.loss_and_grad(&seq, 1).unwrap().0;
                let fd = (lp - lm) / (2.0 * eps);
                let denom = fd.abs().max(grad[i].abs()).max(1e-6);
                worst = worst.max((fd - grad[i]).abs() / denom);
            }
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = TinyTransformer::new(small(), &mut rng).unwrap();
        let seq = tokens(&[0, 5, 6, 2, 8, 10, 4, 5, 6, 2]);
        let (first, _) = m.loss_and_grad(&seq, 0).unwrap();
        let mut opt = Adam::new(m.num_params(), 1e-2);
        for _ in 0..150 {
            let (_, g) = m.loss_and_grad(&seq, 0).unwrap();
            opt.step(m.params_mut(), &g);
        }
        let (last, _) = m.loss_and_grad(&seq, 0).unwrap();
        assert!(last < 0.1 * first, "{first} -> {last}");
    }

    #[test]
    fn tensors_round_trip() {
        let m = model(4);
        let owned: Vec<(String, Vec<usize>, Vec<f64>)> = m
            .tensors()
            .into_iter()
            .map(|(n, s, d)| (n.to_string(), s.to_vec(), d.to_vec()))
            .collect();
        let back = TinyTransformer::from_tensors(
            small(),
            owned.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())),
        )
        .unwrap();
        assert_eq!(back, m);
        let missing = TinyTransformer::from_tensors(
            small(),
            owned[1..]
                .iter()
                .map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())),
        );
        assert!(missing.is_err());
    }

    #[test]
    fn context_limit_is_enforced() {
        let m = model(6);
        let long = vec![TokenId(1); 17];
        assert!(matches!(m.forward(&long), Err(Error::Model(_))));
    }
}
