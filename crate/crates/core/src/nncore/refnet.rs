//! The reference network family.
//!
//! `conv3x3(F1) → ReLU → maxpool2 → conv3x3(F2) → ReLU → maxpool2 → global
//! average pool → dense(D) + ReLU + dropout → dense(L)`. Convolutions use
//! zero "same" padding, so the input side must be divisible by 4.
//!
//! Internally activations are laid out channel-major (`C × N × H × W`), which
//! turns each convolution into a single GEMM against an im2col buffer.

use std::hash::{Hash, Hasher};

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scalar::matmul;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Shape hyperparameters of one network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefNetArch {
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub labels: usize,
    pub dropout: f64,
    pub side: usize,
}

impl RefNetArch {
    pub fn validate(&self) -> Result<()> {
        if self.conv1 == 0 || self.conv2 == 0 || self.hidden == 0 || self.labels == 0 {
            return Err(Error::invalid(format!(
                "layer widths must be >= 1, got {:?}",
                self
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if self.side < 4 || !self.side.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "input side {} must be a positive multiple of 4",
                self.side
            )));
        }
        Ok(())
    }

    /// Spatial side of the Grad-CAM tap (post-ReLU conv2 activations).
    pub fn tap_side(&self) -> usize {
        self.side / 2
    }
}

/// Names of the parameter blocks, in serialization order.
pub const PARAM_GROUPS: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "hidden.weight",
    "hidden.bias",
    "output.weight",
    "output.bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RefNetParams<T = f32> {
    pub arch: RefNetArch,
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub hidden_w: Tensor<T>,
    pub hidden_b: Tensor<T>,
    pub out_w: Tensor<T>,
    pub out_b: Tensor<T>,
}

impl<T: Real> RefNetParams<T> {
    pub fn zeros(arch: RefNetArch) -> Result<Self> {
        arch.validate()?;
        let shapes = group_shapes(&arch);
        let mut it = shapes.iter().map(|s| Tensor::zeros(s));
        Ok(Self {
            arch,
            conv1_w: it.next().unwrap(),
            conv1_b: it.next().unwrap(),
            conv2_w: it.next().unwrap(),
            conv2_b: it.next().unwrap(),
            hidden_w: it.next().unwrap(),
            hidden_b: it.next().unwrap(),
            out_w: it.next().unwrap(),
            out_b: it.next().unwrap(),
        })
    }

    /// He-normal weights, zero biases.
    pub fn init(arch: RefNetArch, rng: &mut impl Rng) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let fan_ins = [9, 9 * arch.conv1, arch.conv2, arch.hidden];
        let weights = [
            &mut params.conv1_w,
            &mut params.conv2_w,
            &mut params.hidden_w,
            &mut params.out_w,
        ];
        for (w, fan_in) in weights.into_iter().zip(fan_ins) {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            for v in w.data_mut() {
                *v = T::of(normal.sample(rng));
            }
        }
        Ok(params)
    }

    /// Builds parameters from blocks given in [`PARAM_GROUPS`] order.
    pub fn from_blocks(arch: RefNetArch, blocks: Vec<Vec<T>>) -> Result<Self> {
        arch.validate()?;
        if blocks.len() != PARAM_GROUPS.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter blocks, got {}",
                PARAM_GROUPS.len(),
                blocks.len()
            )));
        }
        let mut tensors = Vec::with_capacity(8);
        for ((shape, data), name) in group_shapes(&arch).into_iter().zip(blocks).zip(PARAM_GROUPS) {
            tensors.push(Tensor::new(shape, data).map_err(|e| {
                Error::invalid(format!("parameter block {name}: {e}"))
            })?);
        }
        let mut it = tensors.into_iter();
        Ok(Self {
            arch,
            conv1_w: it.next().unwrap(),
            conv1_b: it.next().unwrap(),
            conv2_w: it.next().unwrap(),
            conv2_b: it.next().unwrap(),
            hidden_w: it.next().unwrap(),
            hidden_b: it.next().unwrap(),
            out_w: it.next().unwrap(),
            out_b: it.next().unwrap(),
        })
    }

    pub fn groups(&self) -> [&Tensor<T>; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.hidden_w,
            &self.hidden_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|g| g.is_finite())
    }

    pub fn cast<U: Real>(&self) -> RefNetParams<U> {
        RefNetParams {
            arch: self.arch,
            conv1_w: self.conv1_w.cast(),
            conv1_b: self.conv1_b.cast(),
            conv2_w: self.conv2_w.cast(),
            conv2_b: self.conv2_b.cast(),
            hidden_w: self.hidden_w.cast(),
            hidden_b: self.hidden_b.cast(),
            out_w: self.out_w.cast(),
            out_b: self.out_b.cast(),
        }
    }

    /// Checks every block against the shapes implied by `arch`.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        for ((tensor, shape), name) in self.groups().iter().zip(group_shapes(&self.arch)).zip(PARAM_GROUPS) {
            if tensor.dims() != shape.as_slice() {
                return Err(Error::shape(
                    name,
                    format!("expected {:?}, found {:?}", shape, tensor.dims()),
                ));
            }
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut hasher = std::collections::hash_map::DefaultHasher::new();
        for g in self.groups() {
            g.dims().hash(&mut hasher);
            for v in g.data() {
                v.f64().to_bits().hash(&mut hasher);
            }
        }
        hasher.finish()
    }
}

fn group_shapes(arch: &RefNetArch) -> Vec<Vec<usize>> {
    vec![
        vec![arch.conv1, 1, 3, 3],
        vec![arch.conv1],
        vec![arch.conv2, arch.conv1, 3, 3],
        vec![arch.conv2],
        vec![arch.hidden, arch.conv2],
        vec![arch.hidden],
        vec![arch.labels, arch.hidden],
        vec![arch.labels],
    ]
}

/// Forward-pass mode. Training draws a dropout mask from the supplied stream.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    arch: RefNetArch,
    fingerprint: u64,
    batch: usize,
    col1: Vec<T>,
    z1: Vec<T>,
    pool1_idx: Vec<u32>,
    col2: Vec<T>,
    z2: Vec<T>,
    a2: Vec<T>,
    pool2_idx: Vec<u32>,
    gap: Vec<T>,
    zh: Vec<T>,
    dropout_mask: Option<Vec<T>>,
    hd: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Post-ReLU conv2 activations of one sample, shaped `[F2, side/2, side/2]`.
    pub fn conv2_activation(&self, sample: usize) -> Tensor<T> {
        let f2 = self.arch.conv2;
        let h = self.arch.tap_side();
        let plane = h * h;
        let mut out = Vec::with_capacity(f2 * plane);
        for f in 0..f2 {
            let start = (f * self.batch + sample) * plane;
            out.extend_from_slice(&self.a2[start..start + plane]);
        }
        Tensor::new(vec![f2, h, h], out).expect("consistent tap shape")
    }
}

/// Runs the network on `batch` (`[N, 1, S, S]`) and returns logits `[N, L]`.
pub fn forward<T: Real>(
    params: &RefNetParams<T>,
    batch: &Tensor<T>,
    mode: Mode<'_>,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    params.validate()?;
    let arch = params.arch;
    let s = arch.side;
    let dims = batch.dims();
    if dims.len() != 4 || dims[1] != 1 || dims[2] != s || dims[3] != s || dims[0] == 0 {
        return Err(Error::shape(
            "input",
            format!("expected [N>=1, 1, {s}, {s}], found {:?}", dims),
        ));
    }
    if batch
        .data()
        .iter()
        .any(|v| !(v.is_finite() && *v >= T::zero() && *v <= T::one()))
    {
        return Err(Error::shape("input", "pixel values must lie in [0,1]"));
    }
    let n = dims[0];
    let (f1, f2, d, l) = (arch.conv1, arch.conv2, arch.hidden, arch.labels);

    // conv1: single input channel, so NCHW and CNHW coincide.
    let p1 = n * s * s;
    let mut col1 = vec![T::zero(); 9 * p1];
    im2col(batch.data(), 1, n, s, s, &mut col1);
    let mut z1 = vec![T::zero(); f1 * p1];
    matmul(params.conv1_w.data(), f1, 9, false, &col1, 9, p1, false, &mut z1, false);
    add_row_bias(&mut z1, params.conv1_b.data(), p1);
    let a1: Vec<T> = z1.iter().map(|&v| relu(v)).collect();
    let (pool1, pool1_idx) = max_pool2(&a1, f1, n, s, s);

    // conv2
    let s2 = s / 2;
    let p2 = n * s2 * s2;
    let k2 = 9 * f1;
    let mut col2 = vec![T::zero(); k2 * p2];
    im2col(&pool1, f1, n, s2, s2, &mut col2);
    let mut z2 = vec![T::zero(); f2 * p2];
    matmul(params.conv2_w.data(), f2, k2, false, &col2, k2, p2, false, &mut z2, false);
    add_row_bias(&mut z2, params.conv2_b.data(), p2);
    let a2: Vec<T> = z2.iter().map(|&v| relu(v)).collect();

    let (gap, pool2_idx) = pool_and_average(&a2, f2, n, s2);

    // dense head, columns are samples
    let mut zh = vec![T::zero(); d * n];
    matmul(params.hidden_w.data(), d, f2, false, &gap, f2, n, false, &mut zh, false);
    add_row_bias(&mut zh, params.hidden_b.data(), n);
    let mut hd: Vec<T> = zh.iter().map(|&v| relu(v)).collect();
    let dropout_mask = match mode {
        Mode::Train(rng) if arch.dropout > 0.0 => {
            let keep = T::of(1.0 / (1.0 - arch.dropout));
            let mask: Vec<T> = (0..d * n)
                .map(|_| {
                    if rng.random::<f64>() < arch.dropout {
                        T::zero()
                    } else {
                        keep
                    }
                })
                .collect();
            for (h, m) in hd.iter_mut().zip(&mask) {
                *h *= *m;
            }
            Some(mask)
        }
        _ => None,
    };
    let mut logits_t = vec![T::zero(); l * n];
    matmul(params.out_w.data(), l, d, false, &hd, d, n, false, &mut logits_t, false);
    add_row_bias(&mut logits_t, params.out_b.data(), n);

    let logits = Tensor::new(vec![n, l], transpose(&logits_t, l, n))?;
    let cache = ForwardCache {
        arch,
        fingerprint: params.fingerprint(),
        batch: n,
        col1,
        z1,
        pool1_idx,
        col2,
        z2,
        a2,
        pool2_idx,
        gap,
        zh,
        dropout_mask,
        hd,
    };
    Ok((logits, cache))
}

impl<T: Real> ForwardCache<T> {
    pub fn cast<U: Real>(&self) -> ForwardCache<U> {
        fn c<T: Real, U: Real>(v: &[T]) -> Vec<U> {
            v.iter().map(|x| U::of(x.f64())).collect()
        }
        ForwardCache {
            arch: self.arch,
            fingerprint: 0,
            batch: self.batch,
            col1: c(&self.col1),
            z1: c(&self.z1),
            pool1_idx: self.pool1_idx.clone(),
            col2: c(&self.col2),
            z2: c(&self.z2),
            a2: c(&self.a2),
            pool2_idx: self.pool2_idx.clone(),
            gap: c(&self.gap),
            zh: c(&self.zh),
            dropout_mask: self.dropout_mask.as_deref().map(c),
            hd: c(&self.hd),
        }
    }
}

/// Forward pass with every non-smooth decision (ReLU gates, pooling argmaxes,
/// dropout mask) taken from `gates` instead of being recomputed.
///
/// Around the point where `gates` was recorded this is a smooth function with
/// the same value and gradient as [`forward`], which makes it the right target
/// for finite differences with steps large enough to cross activation kinks.
pub fn forward_with_frozen_gates<T: Real>(
    params: &RefNetParams<T>,
    batch: &Tensor<T>,
    gates: &ForwardCache<T>,
) -> Result<Tensor<T>> {
    params.validate()?;
    let arch = params.arch;
    if gates.arch != arch {
        return Err(Error::shape("cache", "gates were recorded for a different architecture"));
    }
    let s = arch.side;
    let n = gates.batch;
    if batch.dims() != [n, 1, s, s] {
        return Err(Error::shape(
            "input",
            format!("expected [{n}, 1, {s}, {s}], found {:?}", batch.dims()),
        ));
    }
    let (f1, f2, d, l) = (arch.conv1, arch.conv2, arch.hidden, arch.labels);
    let gate = |z: &mut [T], recorded: &[T]| {
        for (v, r) in z.iter_mut().zip(recorded) {
            if *r <= T::zero() {
                *v = T::zero();
            }
        }
    };

    let p1 = n * s * s;
    let mut col1 = vec![T::zero(); 9 * p1];
    im2col(batch.data(), 1, n, s, s, &mut col1);
    let mut a1 = vec![T::zero(); f1 * p1];
    matmul(params.conv1_w.data(), f1, 9, false, &col1, 9, p1, false, &mut a1, false);
    add_row_bias(&mut a1, params.conv1_b.data(), p1);
    gate(&mut a1, &gates.z1);
    let pool1: Vec<T> = gates.pool1_idx.iter().map(|&i| a1[i as usize]).collect();

    let s2 = s / 2;
    let p2 = n * s2 * s2;
    let k2 = 9 * f1;
    let mut col2 = vec![T::zero(); k2 * p2];
    im2col(&pool1, f1, n, s2, s2, &mut col2);
    let mut a2 = vec![T::zero(); f2 * p2];
    matmul(params.conv2_w.data(), f2, k2, false, &col2, k2, p2, false, &mut a2, false);
    add_row_bias(&mut a2, params.conv2_b.data(), p2);
    gate(&mut a2, &gates.z2);
    let area = (s2 / 2) * (s2 / 2);
    let inv = T::of(1.0 / area as f64);
    let gap: Vec<T> = gates
        .pool2_idx
        .chunks_exact(area)
        .map(|plane| plane.iter().fold(T::zero(), |acc, &i| acc + a2[i as usize]) * inv)
        .collect();

    let mut h = vec![T::zero(); d * n];
    matmul(params.hidden_w.data(), d, f2, false, &gap, f2, n, false, &mut h, false);
    add_row_bias(&mut h, params.hidden_b.data(), n);
    gate(&mut h, &gates.zh);
    if let Some(mask) = &gates.dropout_mask {
        for (v, m) in h.iter_mut().zip(mask) {
            *v *= *m;
        }
    }
    let mut logits_t = vec![T::zero(); l * n];
    matmul(params.out_w.data(), l, d, false, &h, d, n, false, &mut logits_t, false);
    add_row_bias(&mut logits_t, params.out_b.data(), n);
    Tensor::new(vec![n, l], transpose(&logits_t, l, n))
}

struct HeadGrads<T> {
    out_w: Vec<T>,
    out_b: Vec<T>,
    hidden_w: Vec<T>,
    hidden_b: Vec<T>,
    /// Gradient with respect to the post-ReLU conv2 activations (CNHW).
    tap: Vec<T>,
}

fn check_cache<T: Real>(
    params: &RefNetParams<T>,
    cache: &ForwardCache<T>,
    upstream: &Tensor<T>,
) -> Result<()> {
    if cache.arch != params.arch || cache.fingerprint != params.fingerprint() {
        return Err(Error::shape(
            "cache",
            "forward cache was produced by different parameters",
        ));
    }
    if upstream.dims() != [cache.batch, params.arch.labels] {
        return Err(Error::shape(
            "output",
            format!(
                "upstream gradient {:?} does not match [{}, {}]",
                upstream.dims(),
                cache.batch,
                params.arch.labels
            ),
        ));
    }
    Ok(())
}

fn backward_head<T: Real>(
    params: &RefNetParams<T>,
    cache: &ForwardCache<T>,
    upstream: &Tensor<T>,
) -> HeadGrads<T> {
    let arch = params.arch;
    let (f2, d, l, n) = (arch.conv2, arch.hidden, arch.labels, cache.batch);
    let gt = transpose(upstream.data(), n, l);

    let out_b = row_sums(&gt, l, n);
    let mut out_w = vec![T::zero(); l * d];
    matmul(&gt, l, n, false, &cache.hd, d, n, true, &mut out_w, false);
    let mut dzh = vec![T::zero(); d * n];
    matmul(params.out_w.data(), l, d, true, &gt, l, n, false, &mut dzh, false);
    if let Some(mask) = &cache.dropout_mask {
        for (g, m) in dzh.iter_mut().zip(mask) {
            *g *= *m;
        }
    }
    for (g, z) in dzh.iter_mut().zip(&cache.zh) {
        if *z <= T::zero() {
            *g = T::zero();
        }
    }
    let hidden_b = row_sums(&dzh, d, n);
    let mut hidden_w = vec![T::zero(); d * f2];
    matmul(&dzh, d, n, false, &cache.gap, f2, n, true, &mut hidden_w, false);
    let mut dgap = vec![T::zero(); f2 * n];
    matmul(params.hidden_w.data(), d, f2, true, &dzh, d, n, false, &mut dgap, false);

    // global average pool of the pooled map, then unpool onto the argmax positions
    let s2 = arch.tap_side();
    let s4 = s2 / 2;
    let inv_area = T::of(1.0 / (s4 * s4) as f64);
    let mut tap = vec![T::zero(); f2 * n * s2 * s2];
    for (j, &src) in cache.pool2_idx.iter().enumerate() {
        let channel_sample = j / (s4 * s4);
        tap[src as usize] += dgap[channel_sample] * inv_area;
    }
    HeadGrads {
        out_w,
        out_b,
        hidden_w,
        hidden_b,
        tap,
    }
}

/// Reverse-mode pass through the whole network.
///
/// `upstream` is `dLoss/dlogits` (`[N, L]`). The cache must come from a
/// forward call on exactly these parameters.
pub fn backward<T: Real>(
    params: &RefNetParams<T>,
    cache: &ForwardCache<T>,
    upstream: &Tensor<T>,
) -> Result<RefNetParams<T>> {
    check_cache(params, cache, upstream)?;
    let arch = params.arch;
    let (f1, f2, n, s) = (arch.conv1, arch.conv2, cache.batch, arch.side);
    let head = backward_head(params, cache, upstream);

    let s2 = s / 2;
    let p2 = n * s2 * s2;
    let k2 = 9 * f1;
    let mut dz2 = head.tap;
    for (g, z) in dz2.iter_mut().zip(&cache.z2) {
        if *z <= T::zero() {
            *g = T::zero();
        }
    }
    let conv2_b = row_sums(&dz2, f2, p2);
    let mut conv2_w = vec![T::zero(); f2 * k2];
    matmul(&dz2, f2, p2, false, &cache.col2, k2, p2, true, &mut conv2_w, false);
    let mut dcol2 = vec![T::zero(); k2 * p2];
    matmul(params.conv2_w.data(), f2, k2, true, &dz2, f2, p2, false, &mut dcol2, false);
    let mut dpool1 = vec![T::zero(); f1 * p2];
    col2im(&dcol2, f1, n, s2, s2, &mut dpool1);

    let p1 = n * s * s;
    let mut dz1 = vec![T::zero(); f1 * p1];
    for (&src, g) in cache.pool1_idx.iter().zip(&dpool1) {
        dz1[src as usize] += *g;
    }
    for (g, z) in dz1.iter_mut().zip(&cache.z1) {
        if *z <= T::zero() {
            *g = T::zero();
        }
    }
    let conv1_b = row_sums(&dz1, f1, p1);
    let mut conv1_w = vec![T::zero(); f1 * 9];
    matmul(&dz1, f1, p1, false, &cache.col1, 9, p1, true, &mut conv1_w, false);

    RefNetParams::from_blocks(
        arch,
        vec![
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            head.hidden_w,
            head.hidden_b,
            head.out_w,
            head.out_b,
        ],
    )
}

/// Gradient of `sum(upstream ⊙ logits)` with respect to the post-ReLU conv2
/// activations, shaped `[N, F2, side/2, side/2]`.
pub fn tap_gradient<T: Real>(
    params: &RefNetParams<T>,
    cache: &ForwardCache<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_cache(params, cache, upstream)?;
    let head = backward_head(params, cache, upstream);
    let arch = params.arch;
    let s2 = arch.tap_side();
    let cnhw_to_nchw = swap_leading(&head.tap, arch.conv2, cache.batch, s2 * s2);
    Tensor::new(vec![cache.batch, arch.conv2, s2, s2], cnhw_to_nchw)
}

/// Evaluates the network head (pool → average → dense → dense) on a given
/// conv2 activation tensor `[N, F2, side/2, side/2]`, without dropout.
pub fn head_from_tap<T: Real>(params: &RefNetParams<T>, tap: &Tensor<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let arch = params.arch;
    let s2 = arch.tap_side();
    let dims = tap.dims();
    if dims.len() != 4 || dims[1] != arch.conv2 || dims[2] != s2 || dims[3] != s2 {
        return Err(Error::shape(
            "conv2",
            format!("expected [N, {}, {s2}, {s2}], found {:?}", arch.conv2, dims),
        ));
    }
    let n = dims[0];
    let a2 = swap_leading(tap.data(), n, arch.conv2, s2 * s2);
    let (gap, _) = pool_and_average(&a2, arch.conv2, n, s2);
    let mut zh = vec![T::zero(); arch.hidden * n];
    matmul(params.hidden_w.data(), arch.hidden, arch.conv2, false, &gap, arch.conv2, n, false, &mut zh, false);
    add_row_bias(&mut zh, params.hidden_b.data(), n);
    let h: Vec<T> = zh.iter().map(|&v| relu(v)).collect();
    let mut logits_t = vec![T::zero(); arch.labels * n];
    matmul(params.out_w.data(), arch.labels, arch.hidden, false, &h, arch.hidden, n, false, &mut logits_t, false);
    add_row_bias(&mut logits_t, params.out_b.data(), n);
    Tensor::new(vec![n, arch.labels], transpose(&logits_t, arch.labels, n))
}

#[inline]
fn relu<T: Real>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn add_row_bias<T: Real>(m: &mut [T], bias: &[T], cols: usize) {
    for (row, &b) in m.chunks_exact_mut(cols).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

fn row_sums<T: Real>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().fold(T::zero(), |a, &v| a + v))
        .collect()
}

fn transpose<T: Real>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// `[A, B, plane] → [B, A, plane]`.
fn swap_leading<T: Real>(m: &[T], a: usize, b: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m.len());
    for j in 0..b {
        for i in 0..a {
            let start = (i * b + j) * plane;
            out.extend_from_slice(&m[start..start + plane]);
        }
    }
    out
}

/// 2×2 max pool (stride 2) over a CNHW buffer; returns pooled values and the
/// flat input index of each maximum. Ties go to the first position in scan order.
fn max_pool2<T: Real>(inp: &[T], c: usize, n: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * n * ho * wo);
    let mut idx = Vec::with_capacity(c * n * ho * wo);
    for plane in 0..c * n {
        let base = plane * h * w;
        for y in 0..ho {
            for x in 0..wo {
                let mut best = base + 2 * y * w + 2 * x;
                for cand in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if inp[cand] > inp[best] {
                        best = cand;
                    }
                }
                out.push(inp[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Max-pools the conv2 activations and averages each pooled plane.
/// Returns the `F2 × N` feature matrix and the pooling argmax indices.
fn pool_and_average<T: Real>(a2: &[T], f2: usize, n: usize, s2: usize) -> (Vec<T>, Vec<u32>) {
    let (pooled, idx) = max_pool2(a2, f2, n, s2, s2);
    let area = (s2 / 2) * (s2 / 2);
    let inv = T::of(1.0 / area as f64);
    let gap = pooled
        .chunks_exact(area)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    (gap, idx)
}

/// Unfolds 3×3 zero-padded neighbourhoods of a CNHW buffer into a
/// `(C·9) × (N·H·W)` matrix.
fn im2col<T: Real>(inp: &[T], c: usize, n: usize, h: usize, w: usize, col: &mut [T]) {
    let plane = h * w;
    let cols = n * plane;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * cols..][..cols];
                for ni in 0..n {
                    let src = &inp[(ci * n + ni) * plane..][..plane];
                    let dst = &mut row[ni * plane..][..plane];
                    for y in 0..h {
                        let drow = &mut dst[y * w..][..w];
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            drow.fill(T::zero());
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        match kx {
                            0 => {
                                drow[0] = T::zero();
                                drow[1..].copy_from_slice(&srow[..w - 1]);
                            }
                            1 => drow.copy_from_slice(srow),
                            _ => {
                                drow[..w - 1].copy_from_slice(&srow[1..]);
                                drow[w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back onto a CNHW buffer.
fn col2im<T: Real>(col: &[T], c: usize, n: usize, h: usize, w: usize, out: &mut [T]) {
    let plane = h * w;
    let cols = n * plane;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * cols..][..cols];
                for ni in 0..n {
                    let src = &row[ni * plane..][..plane];
                    let dst = &mut out[(ci * n + ni) * plane..][..plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let grow = &src[y * w..][..w];
                        let drow = &mut dst[sy as usize * w..][..w];
                        match kx {
                            0 => {
                                for (d, g) in drow[..w - 1].iter_mut().zip(&grow[1..]) {
                                    *d += *g;
                                }
                            }
                            1 => {
                                for (d, g) in drow.iter_mut().zip(grow) {
                                    *d += *g;
                                }
                            }
                            _ => {
                                for (d, g) in drow[1..].iter_mut().zip(&grow[..w - 1]) {
                                    *d += *g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> RefNetArch {
        RefNetArch {
            conv1: 2,
            conv2: 3,
            hidden: 4,
            labels: 2,
            dropout: 0.2,
            side: 8,
        }
    }

    fn random_batch(n: usize, side: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * side * side).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![n, 1, side, side], data).unwrap()
    }

    #[test]
    fn zero_weights_yield_output_bias() {
        let mut p = RefNetParams::<f64>::zeros(arch()).unwrap();
        p.conv1_b.data_mut().fill(0.3);
        p.conv2_b.data_mut().fill(-0.2);
        p.hidden_b.data_mut().fill(0.7);
        p.out_b.data_mut().copy_from_slice(&[1.5, -2.0]);
        let batch = Tensor::filled(&[3, 1, 8, 8], 0.4);
        let (logits, _) = forward(&p, &batch, Mode::Eval).unwrap();
        for row in logits.data().chunks(2) {
            assert_eq!(row, &[1.5, -2.0]);
        }
    }

    #[test]
    fn global_average_of_constant_map() {
        let a2 = vec![0.75f64; 3 * 2 * 4 * 4];
        let (gap, _) = pool_and_average(&a2, 3, 2, 4);
        assert!(gap.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = RefNetParams::<f32>::init(arch(), &mut rng).unwrap();
        let batch = random_batch(2, 8, 1).cast::<f32>();
        let (a, _) = forward(&p, &batch, Mode::Eval).unwrap();
        let (b, _) = forward(&p, &batch, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_input_side() {
        let p = RefNetParams::<f32>::zeros(arch()).unwrap();
        let err = forward(&p, &Tensor::zeros(&[1, 1, 12, 12]), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
    }

    #[test]
    fn rejects_malformed_layer() {
        let mut p = RefNetParams::<f32>::zeros(arch()).unwrap();
        p.conv2_w = Tensor::zeros(&[3, 5, 3, 3]);
        let err = forward(&p, &Tensor::zeros(&[1, 1, 8, 8]), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("conv2.weight"), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = RefNetParams::<f64>::init(arch(), &mut rng).unwrap();
        let (_, cache) = forward(&p, &random_batch(2, 8, 2), Mode::Train(&mut rng)).unwrap();
        let g = backward(&p, &cache, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(g.groups().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn output_bias_gradient_is_batch_sum_of_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = RefNetParams::<f64>::init(arch(), &mut rng).unwrap();
        let (_, cache) = forward(&p, &random_batch(3, 8, 4), Mode::Eval).unwrap();
        let up = Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.05, -0.4, 0.6]).unwrap();
        let g = backward(&p, &cache, &up).unwrap();
        let expected = [0.1 + 0.3 - 0.4, -0.2 + 0.05 + 0.6];
        for (a, b) in g.out_b.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = RefNetParams::<f64>::init(arch(), &mut rng).unwrap();
        let (_, cache) = forward(&p, &random_batch(1, 8, 4), Mode::Eval).unwrap();
        p.out_b.data_mut()[0] += 1.0;
        let err = backward(&p, &cache, &Tensor::zeros(&[1, 2])).unwrap_err();
        assert!(err.to_string().contains("cache"), "{err}");
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let (c, n, h, w) = (2, 2, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..c * n * h * w).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..c * 9 * n * h * w).map(|_| rng.random()).collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, c, n, h, w, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, n, h, w, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn frozen_gates_reproduce_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = RefNetParams::<f64>::init(arch(), &mut rng).unwrap();
        let batch = random_batch(3, 8, 13);
        let (logits, cache) = forward(&p, &batch, Mode::Train(&mut rng)).unwrap();
        let again = forward_with_frozen_gates(&p, &batch, &cache).unwrap();
        for (a, b) in logits.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_from_tap_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = RefNetParams::<f64>::init(arch(), &mut rng).unwrap();
        let batch = random_batch(1, 8, 8);
        let (logits, cache) = forward(&p, &batch, Mode::Eval).unwrap();
        let tap = cache.conv2_activation(0);
        let dims = tap.dims().to_vec();
        let tap = Tensor::new(vec![1, dims[0], dims[1], dims[2]], tap.into_data()).unwrap();
        let again = head_from_tap(&p, &tap).unwrap();
        for (a, b) in logits.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
