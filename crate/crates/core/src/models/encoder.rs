//! Multi-kernel 1D convolutional encoder with global average pooling and an
//! MLP head, written out with explicit forward caches and backward passes.
//!
//! Block layout: optional 1×1 bottleneck, parallel "same"-padded convolutions
//! of several lengths, a max-pool(3) branch followed by a 1×1 convolution,
//! channel concatenation, per-channel bias and ReLU. Every `residual_every`
//! blocks a 1×1 shortcut from the group input is added before the ReLU.
//! There is no batch normalization; inputs are standardized per channel with
//! statistics fitted on the training data instead.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpCache};
use super::params::{AdamConfig, Parameters, TensorList, TensorListMut};
use crate::error::{validation, ClampError, Result};
use crate::features::{FeatureTensor, N_CHANNELS, SEGMENT_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Desk-scale model for CPU runs and tests.
    Tiny,
    Full,
}

impl std::str::FromStr for Profile {
    type Err = ClampError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Profile::Tiny),
            "full" => Ok(Profile::Full),
            other => Err(validation(format!("unknown profile {other:?} (expected tiny or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HapticEncoderConfig {
    pub in_channels: usize,
    pub seq_len: usize,
    pub n_blocks: usize,
    pub n_filters: usize,
    /// Width of the 1×1 bottleneck in front of the long convolutions.
    pub bottleneck: usize,
    pub kernel_lengths: Vec<usize>,
    pub residual_every: usize,
    /// Hidden widths of the head; the head has `head_hidden.len() + 1` layers.
    pub head_hidden: Vec<usize>,
    pub n_classes: usize,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Return the parameters of the epoch with the best validation accuracy
    /// instead of the last epoch's (only when a validation set is given).
    pub keep_best: bool,
}

impl Default for HapticEncoderConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl HapticEncoderConfig {
    pub fn full() -> Self {
        Self {
            in_channels: N_CHANNELS,
            seq_len: SEGMENT_LEN,
            n_blocks: 6,
            n_filters: 256,
            bottleneck: 32,
            kernel_lengths: vec![7, 13, 25, 45, 81, 143, 250],
            residual_every: 3,
            head_hidden: vec![1024, 256],
            n_classes: 14,
            optimizer: AdamConfig::with_lr(1e-5),
            batch_size: 64,
            epochs: 100,
            seed: 0,
            keep_best: true,
        }
    }

    pub fn tiny() -> Self {
        Self {
            n_blocks: 2,
            n_filters: 16,
            bottleneck: 16,
            kernel_lengths: vec![7, 15, 31],
            head_hidden: vec![32, 32],
            optimizer: AdamConfig::with_lr(1e-3),
            batch_size: 16,
            epochs: 16,
            ..Self::full()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Tiny => Self::tiny(),
            Profile::Full => Self::full(),
        }
    }

    pub fn block_width(&self) -> usize {
        self.n_filters * (self.kernel_lengths.len() + 1)
    }

    pub fn latent_dim(&self) -> usize {
        self.block_width()
    }

    pub fn head_dims(&self) -> Vec<usize> {
        let mut d = vec![self.latent_dim()];
        d.extend(&self.head_hidden);
        d.push(self.n_classes);
        d
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.seq_len == 0 {
            return Err(validation("in_channels and seq_len must be >= 1"));
        }
        if self.n_blocks == 0 || self.n_filters == 0 || self.bottleneck == 0 {
            return Err(validation("n_blocks, n_filters and bottleneck must be >= 1"));
        }
        if self.kernel_lengths.is_empty() || self.kernel_lengths.contains(&0) {
            return Err(validation("kernel_lengths must be non-empty and positive"));
        }
        if self.kernel_lengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(validation("kernel_lengths must be strictly increasing"));
        }
        if self.n_classes < 2 {
            return Err(validation("n_classes must be >= 2"));
        }
        if self.batch_size == 0 {
            return Err(validation("batch_size must be >= 1"));
        }
        if self.residual_every == 0 {
            return Err(validation("residual_every must be >= 1"));
        }
        self.optimizer.validate()
    }

    fn has_shortcut(&self, block: usize) -> bool {
        (block + 1) % self.residual_every == 0
    }

    fn block_in_channels(&self, block: usize) -> usize {
        if block == 0 {
            self.in_channels
        } else {
            self.block_width()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    /// `bottleneck × in`, absent when the block input has one channel.
    pub bottleneck: Option<Array2<f64>>,
    /// One `n_filters × (conv_in · K)` matrix per kernel length.
    pub branches: Vec<Array2<f64>>,
    /// 1×1 convolution after max pooling, `n_filters × in`.
    pub pool_conv: Array2<f64>,
    pub bias: Array1<f64>,
    pub shortcut_w: Option<Array2<f64>>,
    pub shortcut_b: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: HapticEncoderConfig,
    /// Input standardization, fitted on training data; not trained.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub head: Mlp,
}

fn he_uniform<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

impl EncoderParams {
    /// Seeded initialization with identity input standardization.
    pub fn init(cfg: &HapticEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nf = cfg.n_filters;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let c_in = cfg.block_in_channels(i);
            let bottleneck = (c_in > 1).then(|| he_uniform(cfg.bottleneck, c_in, c_in, &mut rng));
            let conv_in = if c_in > 1 { cfg.bottleneck } else { c_in };
            let branches =
                cfg.kernel_lengths.iter().map(|&k| he_uniform(nf, conv_in * k, conv_in * k, &mut rng)).collect();
            let pool_conv = he_uniform(nf, c_in, c_in, &mut rng);
            let (shortcut_w, shortcut_b) = if cfg.has_shortcut(i) {
                let res_in = cfg.block_in_channels(i + 1 - cfg.residual_every);
                (Some(he_uniform(cfg.block_width(), res_in, res_in, &mut rng)), Some(Array1::zeros(cfg.block_width())))
            } else {
                (None, None)
            };
            blocks.push(BlockParams {
                bottleneck,
                branches,
                pool_conv,
                bias: Array1::zeros(cfg.block_width()),
                shortcut_w,
                shortcut_b,
            });
        }
        let head = Mlp::init(&cfg.head_dims(), &mut rng);
        Ok(Self {
            config: cfg.clone(),
            input_mean: vec![0.0; cfg.in_channels],
            input_std: vec![1.0; cfg.in_channels],
            blocks,
            head,
        })
    }

    /// Fits per-channel mean and standard deviation over every timestep of
    /// the given tensors. Constant channels get unit scale.
    pub fn fit_input_stats(&mut self, xs: &[&FeatureTensor]) {
        let c = self.config.in_channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut n = 0.0;
        for x in xs {
            for (ch, (s, q)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in x.channel(ch) {
                    let v = v as f64;
                    *s += v;
                    *q += v * v;
                }
            }
            n += x.channel(0).len() as f64;
        }
        if n == 0.0 {
            return;
        }
        for ch in 0..c {
            let mean = sum[ch] / n;
            let var = (sq[ch] / n - mean * mean).max(0.0);
            self.input_mean[ch] = mean;
            self.input_std[ch] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }

    /// Raw tensor as `channels × time`, standardized.
    pub fn prepare(&self, x: &FeatureTensor) -> Result<Array2<f64>> {
        let (c, l) = (self.config.in_channels, self.config.seq_len);
        if x.data().len() != c * l {
            return Err(ClampError::Shape { expected: format!("{c}x{l}"), got: format!("{} values", x.data().len()) });
        }
        Ok(Array2::from_shape_fn((c, l), |(ch, t)| {
            (x.channel(ch)[t] as f64 - self.input_mean[ch]) / self.input_std[ch]
        }))
    }

    pub fn zero_head(&mut self) {
        for (_, t) in self.head.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// Parameters of the convolutional trunk only (excludes the head).
    pub fn trunk_hash(&self) -> String {
        let mut trunk = self.clone();
        trunk.zero_head();
        trunk.hash_hex()
    }
}

fn sl(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> TensorList<'_> {
        let mut out: TensorList<'_> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(w) = &b.bottleneck {
                out.push((format!("block{i}.bottleneck"), sl(w)));
            }
            for (k, w) in b.branches.iter().enumerate() {
                out.push((format!("block{i}.branch{k}"), sl(w)));
            }
            out.push((format!("block{i}.pool_conv"), sl(&b.pool_conv)));
            out.push((format!("block{i}.bias"), b.bias.as_slice().expect("standard layout")));
            if let (Some(w), Some(bb)) = (&b.shortcut_w, &b.shortcut_b) {
                out.push((format!("block{i}.shortcut_w"), sl(w)));
                out.push((format!("block{i}.shortcut_b"), bb.as_slice().expect("standard layout")));
            }
        }
        out.extend(self.head.tensors().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    fn tensors_mut(&mut self) -> TensorListMut<'_> {
        let mut out: TensorListMut<'_> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(w) = &mut b.bottleneck {
                out.push((format!("block{i}.bottleneck"), w.as_slice_mut().expect("standard layout")));
            }
            for (k, w) in b.branches.iter_mut().enumerate() {
                out.push((format!("block{i}.branch{k}"), w.as_slice_mut().expect("standard layout")));
            }
            out.push((format!("block{i}.pool_conv"), b.pool_conv.as_slice_mut().expect("standard layout")));
            out.push((format!("block{i}.bias"), b.bias.as_slice_mut().expect("standard layout")));
            if let (Some(w), Some(bb)) = (&mut b.shortcut_w, &mut b.shortcut_b) {
                out.push((format!("block{i}.shortcut_w"), w.as_slice_mut().expect("standard layout")));
                out.push((format!("block{i}.shortcut_b"), bb.as_slice_mut().expect("standard layout")));
            }
        }
        out.extend(self.head.tensors_mut().into_iter().map(|(n, t)| (format!("head.{n}"), t)));
        out
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }
}

/// Unfolds `x` (`c × l`) for a "same" convolution of length `k`: row
/// `ci·k + j` holds `x[ci, t + j − (k−1)/2]`, zero outside the signal.
fn im2col(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let (c, l) = x.dim();
    let pl = (k - 1) / 2;
    let mut col = Array2::zeros((c * k, l));
    for ci in 0..c {
        let row = x.row(ci);
        let xs = row.as_slice().expect("standard layout");
        for j in 0..k {
            let shift = j as isize - pl as isize;
            let lo = (-shift).max(0) as usize;
            let hi = (l as isize - shift).min(l as isize).max(lo as isize) as usize;
            if lo >= hi {
                continue;
            }
            let mut dst = col.row_mut(ci * k + j);
            let dst = dst.as_slice_mut().expect("standard layout");
            let src_lo = (lo as isize + shift) as usize;
            dst[lo..hi].copy_from_slice(&xs[src_lo..src_lo + (hi - lo)]);
        }
    }
    col
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im_add(dcol: &Array2<f64>, k: usize, dx: &mut Array2<f64>) {
    let (c, l) = dx.dim();
    let pl = (k - 1) / 2;
    for ci in 0..c {
        let mut drow = dx.row_mut(ci);
        let d = drow.as_slice_mut().expect("standard layout");
        for j in 0..k {
            let shift = j as isize - pl as isize;
            let lo = (-shift).max(0) as usize;
            let hi = (l as isize - shift).min(l as isize).max(lo as isize) as usize;
            if lo >= hi {
                continue;
            }
            let src = dcol.row(ci * k + j);
            let src = src.as_slice().expect("standard layout");
            let off = (lo as isize + shift) as usize;
            for (a, b) in d[off..off + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                *a += b;
            }
        }
    }
}

/// Max over `{t−1, t, t+1}` clipped to the signal; returns the argmax offset.
fn maxpool3(x: &Array2<f64>) -> (Array2<f64>, Vec<i8>) {
    let (c, l) = x.dim();
    let mut out = Array2::zeros((c, l));
    let mut arg = vec![0i8; c * l];
    for ci in 0..c {
        let row = x.row(ci);
        for t in 0..l {
            let mut best = row[t];
            let mut off = 0i8;
            if t > 0 && row[t - 1] > best {
                best = row[t - 1];
                off = -1;
            }
            if t + 1 < l && row[t + 1] > best {
                best = row[t + 1];
                off = 1;
            }
            out[[ci, t]] = best;
            arg[ci * l + t] = off;
        }
    }
    (out, arg)
}

fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut c);
    c
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Array2<f64>,
    conv_in: Option<Array2<f64>>,
    pooled: Array2<f64>,
    pool_arg: Vec<i8>,
    out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    pub latent: Vec<f64>,
    head: MlpCache,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        &self.head.output
    }
}

fn block_forward(p: &BlockParams, cfg: &HapticEncoderConfig, x: Array2<f64>, res: Option<&Array2<f64>>) -> BlockCache {
    let nf = cfg.n_filters;
    let l = x.ncols();
    let conv_in = p.bottleneck.as_ref().map(|w| matmul(w, &x));
    let src = conv_in.as_ref().unwrap_or(&x);
    let mut z = Array2::zeros((cfg.block_width(), l));
    for (k, (w, &klen)) in p.branches.iter().zip(&cfg.kernel_lengths).enumerate() {
        let col = im2col(src, klen);
        let mut dst = z.slice_mut(s![k * nf..(k + 1) * nf, ..]);
        general_mat_mul(1.0, w, &col, 0.0, &mut dst);
    }
    let (pooled, pool_arg) = maxpool3(&x);
    let nk = cfg.kernel_lengths.len();
    let mut dst = z.slice_mut(s![nk * nf.., ..]);
    general_mat_mul(1.0, &p.pool_conv, &pooled, 0.0, &mut dst);
    if let (Some(sw), Some(sb), Some(r)) = (&p.shortcut_w, &p.shortcut_b, res) {
        general_mat_mul(1.0, sw, r, 1.0, &mut z);
        z += &sb.view().insert_axis(Axis(1));
    }
    z += &p.bias.view().insert_axis(Axis(1));
    z.mapv_inplace(|v| v.max(0.0));
    BlockCache { input: x, conv_in, pooled, pool_arg, out: z }
}

/// Forward pass on a prepared (standardized) `channels × time` input.
pub fn forward_prepared(params: &EncoderParams, x: Array2<f64>) -> ForwardCache {
    let cfg = &params.config;
    let mut caches: Vec<BlockCache> = Vec::with_capacity(cfg.n_blocks);
    let mut h = x;
    for (i, bp) in params.blocks.iter().enumerate() {
        let res = cfg.has_shortcut(i).then(|| &caches[i + 1 - cfg.residual_every].input);
        let cache = block_forward(bp, cfg, h, res);
        h = cache.out.clone();
        caches.push(cache);
    }
    let latent = h.mean_axis(Axis(1)).expect("non-empty").to_vec();
    let head = params.head.forward(&latent);
    ForwardCache { blocks: caches, latent, head }
}

pub fn forward(params: &EncoderParams, x: &FeatureTensor) -> Result<ForwardCache> {
    Ok(forward_prepared(params, params.prepare(x)?))
}

/// Logits and pooled latent for one tensor.
pub fn encoder_forward(x: &FeatureTensor, params: &EncoderParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = forward(params, x)?;
    Ok((cache.head.output.clone(), cache.latent))
}

/// Backpropagates `d_logits` through the head and trunk, accumulating into
/// `grads`.
pub fn backward(params: &EncoderParams, cache: &ForwardCache, d_logits: &[f64], grads: &mut EncoderParams) {
    let d_latent = params.head.backward(&cache.head, d_logits, &mut grads.head);
    backward_from_latent(params, cache, &d_latent, grads);
}

/// Trunk-only backward from a latent gradient.
pub fn backward_from_latent(params: &EncoderParams, cache: &ForwardCache, d_latent: &[f64], grads: &mut EncoderParams) {
    let cfg = &params.config;
    let nb = cfg.n_blocks;
    let l = cfg.seq_len as f64;
    let last = &cache.blocks[nb - 1].out;
    let mut d_out = Array2::from_shape_fn(last.dim(), |(c, _)| d_latent[c] / l);
    let mut pending: Vec<Option<Array2<f64>>> = vec![None; nb];
    for i in (0..nb).rev() {
        let bp = &params.blocks[i];
        let bc = &cache.blocks[i];
        let g = &mut grads.blocks[i];
        let nf = cfg.n_filters;
        // ReLU mask.
        let mut dz = d_out;
        ndarray::Zip::from(&mut dz).and(&bc.out).for_each(|d, &o| {
            if o <= 0.0 {
                *d = 0.0
            }
        });
        g.bias += &dz.sum_axis(Axis(1));
        if let (Some(sw), Some(gw), Some(gb)) = (&bp.shortcut_w, &mut g.shortcut_w, &mut g.shortcut_b) {
            let src = i + 1 - cfg.residual_every;
            let res = &cache.blocks[src].input;
            general_mat_mul(1.0, &dz, &res.t(), 1.0, gw);
            *gb += &dz.sum_axis(Axis(1));
            if src > 0 {
                let mut dr = Array2::zeros(res.dim());
                general_mat_mul(1.0, &sw.t(), &dz, 0.0, &mut dr);
                pending[src] = Some(match pending[src].take() {
                    Some(p) => p + dr,
                    None => dr,
                });
            }
        }
        let need_dx = i > 0;
        let conv_src = bc.conv_in.as_ref().unwrap_or(&bc.input);
        let need_dconv = bp.bottleneck.is_some() || need_dx;
        let mut d_conv = Array2::<f64>::zeros(conv_src.dim());
        for (k, (w, &klen)) in bp.branches.iter().zip(&cfg.kernel_lengths).enumerate() {
            let dy = dz.slice(s![k * nf..(k + 1) * nf, ..]);
            let col = im2col(conv_src, klen);
            general_mat_mul(1.0, &dy, &col.t(), 1.0, &mut g.branches[k]);
            if need_dconv {
                let mut dcol = Array2::zeros(col.dim());
                general_mat_mul(1.0, &w.t(), &dy, 0.0, &mut dcol);
                col2im_add(&dcol, klen, &mut d_conv);
            }
        }
        let nk = cfg.kernel_lengths.len();
        let dym = dz.slice(s![nk * nf.., ..]);
        general_mat_mul(1.0, &dym, &bc.pooled.t(), 1.0, &mut g.pool_conv);
        if !need_dx {
            if let (Some(_), Some(gbn)) = (&bp.bottleneck, &mut g.bottleneck) {
                general_mat_mul(1.0, &d_conv, &bc.input.t(), 1.0, gbn);
            }
            break;
        }
        let mut dx = Array2::<f64>::zeros(bc.input.dim());
        let mut dpool = Array2::zeros(bc.pooled.dim());
        general_mat_mul(1.0, &bp.pool_conv.t(), &dym, 0.0, &mut dpool);
        let lw = bc.input.ncols();
        for ((ci, t), &d) in dpool.indexed_iter() {
            let src_t = (t as isize + bc.pool_arg[ci * lw + t] as isize) as usize;
            dx[[ci, src_t]] += d;
        }
        match (&bp.bottleneck, &mut g.bottleneck) {
            (Some(wb), Some(gbn)) => {
                general_mat_mul(1.0, &d_conv, &bc.input.t(), 1.0, gbn);
                general_mat_mul(1.0, &wb.t(), &d_conv, 1.0, &mut dx);
            }
            _ => dx += &d_conv,
        }
        if let Some(p) = pending[i].take() {
            dx += &p;
        }
        d_out = dx;
    }
}
