//! Dense reference attention.
//!
//! Every mechanism here materializes its full causal weight matrix and is the
//! correctness oracle for the streaming kernel and the model's attention
//! layers. Arithmetic is carried out in `f64` regardless of the storage type.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array, Array4, ArrayBase, ArrayView2, Data, Dimension};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, int_pow, Real};

/// Epsilon used by the parameter-free LayerNorm that follows ReLA.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Mechanism hyperparameters shared by TRA and TDA.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttnParams {
    /// Threshold scale.
    pub beta: f64,
    /// Expected spurious survivors per row.
    pub kappa: f64,
    /// Integer exponent applied to the rectified margin.
    pub power: u32,
    /// Inhibition strength as stored. Always read through [`AttnParams::effective_lambda`].
    pub lambda: f64,
    pub norm_epsilon: f64,
}

impl Default for AttnParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            kappa: 1.0,
            power: 2,
            lambda: 0.5,
            norm_epsilon: 1e-6,
        }
    }
}

impl AttnParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParam(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParam(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if self.power < 1 {
            return Err(Error::InvalidParam("power must be >= 1".into()));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::InvalidParam(format!(
                "norm_epsilon must be > 0, got {}",
                self.norm_epsilon
            )));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidParam("lambda must be finite".into()));
        }
        Ok(())
    }

    /// `lambda` clamped to `[0, 1]`.
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.clamp(0.0, 1.0)
    }

    /// Threshold for 1-based row `row` at head dimension `head_dim`.
    pub fn threshold(&self, row: usize, head_dim: usize) -> f64 {
        self.beta * threshold_coefficient(row, self.kappa, head_dim)
    }
}

/// `sqrt(max(0, 2 ln((row + 1) / kappa)) / d)`, i.e. the threshold divided by beta.
///
/// `row` is 1-based: the first query sees one key and uses `ln(2 / kappa)`.
#[inline]
pub fn threshold_coefficient(row: usize, kappa: f64, head_dim: usize) -> f64 {
    let radicand = (2.0 * ((row as f64 + 1.0) / kappa).ln()).max(0.0);
    (radicand / head_dim as f64).sqrt()
}

/// Length-dependent threshold for 1-based row `row`.
pub fn threshold(row: usize, params: &AttnParams, head_dim: usize) -> Result<f64> {
    if row < 1 {
        return Err(Error::InvalidParam("threshold row index is 1-based".into()));
    }
    if head_dim < 1 {
        return Err(Error::InvalidParam("head_dim must be >= 1".into()));
    }
    params.validate()?;
    Ok(params.threshold(row, head_dim))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Softmax,
    Rela,
    DiffSoftmax,
    Tra,
    Tda,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Softmax,
        Mechanism::Rela,
        Mechanism::DiffSoftmax,
        Mechanism::Tra,
        Mechanism::Tda,
    ];

    /// Whether the mechanism reads a second query/key view.
    pub fn is_differential(self) -> bool {
        matches!(self, Mechanism::DiffSoftmax | Mechanism::Tda)
    }

    /// Whether the mechanism uses the length-dependent threshold.
    pub fn is_thresholded(self) -> bool {
        matches!(self, Mechanism::Tra | Mechanism::Tda)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Softmax => "softmax",
            Mechanism::Rela => "rela",
            Mechanism::DiffSoftmax => "diff_softmax",
            Mechanism::Tra => "tra",
            Mechanism::Tda => "tda",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParam(format!("unknown mechanism '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchDims {
    pub batch: usize,
    pub heads: usize,
    pub len: usize,
    pub head_dim: usize,
}

impl BatchDims {
    fn of<T>(a: &Array4<T>) -> Self {
        let s = a.shape();
        Self {
            batch: s[0],
            heads: s[1],
            len: s[2],
            head_dim: s[3],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.heads, self.len, self.head_dim)
    }
}

/// Query/key/value arrays of shape `[B, H, T, d]`, with an optional second
/// query/key view for differential mechanisms.
#[derive(Debug, Clone)]
pub struct AttnBatch<T> {
    pub q: Array4<T>,
    pub k: Array4<T>,
    pub v: Array4<T>,
    pub q2: Option<Array4<T>>,
    pub k2: Option<Array4<T>>,
}

impl<T: Real> AttnBatch<T> {
    pub fn new(q: Array4<T>, k: Array4<T>, v: Array4<T>) -> Result<Self> {
        let batch = Self {
            q,
            k,
            v,
            q2: None,
            k2: None,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn two_view(
        q: Array4<T>,
        k: Array4<T>,
        q2: Array4<T>,
        k2: Array4<T>,
        v: Array4<T>,
    ) -> Result<Self> {
        let batch = Self {
            q,
            k,
            v,
            q2: Some(q2),
            k2: Some(k2),
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.q.shape();
        let named = [
            ("q", Some(&self.q)),
            ("k", Some(&self.k)),
            ("v", Some(&self.v)),
            ("q2", self.q2.as_ref()),
            ("k2", self.k2.as_ref()),
        ];
        for (name, arr) in named {
            let Some(arr) = arr else { continue };
            if arr.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {:?}",
                    arr.shape(),
                    shape
                )));
            }
            if arr.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        if self.q2.is_some() != self.k2.is_some() {
            return Err(Error::Shape("q2 and k2 must be given together".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> BatchDims {
        BatchDims::of(&self.q)
    }

    pub fn is_differential(&self) -> bool {
        self.q2.is_some() && self.k2.is_some()
    }

    fn second_view(&self, who: &'static str) -> Result<(&Array4<T>, &Array4<T>)> {
        match (&self.q2, &self.k2) {
            (Some(q2), Some(k2)) => Ok((q2, k2)),
            _ => Err(Error::MissingSecondView(who)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnResult<T> {
    pub output: Array4<T>,
    /// Signed post-activation, post-mask weights `[B, H, T, T]`.
    pub weights: Option<Array4<T>>,
    pub mechanism: Mechanism,
}

/// Row-major `[T, d]` copy of one (batch, head) slice, widened to `f64`.
pub(crate) fn head_rows<T: Real>(a: &Array4<T>, b: usize, h: usize) -> Vec<f64> {
    let view: ArrayView2<T> = a.slice(ndarray::s![b, h, .., ..]);
    view.iter().map(|x| x.widen()).collect()
}

/// Scales `row` to unit L2 norm in place. Returns `false` on a zero-norm row.
#[inline]
pub(crate) fn normalize_in_place(row: &mut [f64]) -> bool {
    let norm = dot(row, row).sqrt();
    if norm == 0.0 {
        return false;
    }
    row.iter_mut().for_each(|x| *x /= norm);
    true
}

fn normalize_head(rows: &mut [f64], d: usize, b: usize, h: usize) -> Result<()> {
    for (t, row) in rows.chunks_mut(d).enumerate() {
        if !normalize_in_place(row) {
            return Err(Error::ZeroNormRow {
                index: vec![b, h, t],
            });
        }
    }
    Ok(())
}

/// L2-normalizes every length-`d` row along the last axis.
pub fn l2_normalize_rows<T, S, D>(x: &ArrayBase<S, D>) -> Result<Array<T, D>>
where
    T: Real,
    S: Data<Elem = T>,
    D: Dimension,
{
    let shape = x.shape().to_vec();
    let d = *shape.last().ok_or_else(|| Error::Shape("scalar input".into()))?;
    let mut out = x.as_standard_layout().into_owned();
    if d == 0 {
        return Ok(out);
    }
    let slice = out
        .as_slice_mut()
        .expect("standard layout arrays are contiguous");
    for (row_idx, row) in slice.chunks_mut(d).enumerate() {
        let ss: f64 = row.iter().map(|v| v.widen() * v.widen()).sum();
        if ss == 0.0 {
            return Err(Error::ZeroNormRow {
                index: unravel(row_idx, &shape[..shape.len() - 1]),
            });
        }
        let inv = 1.0 / ss.sqrt();
        row.iter_mut().for_each(|v| *v = T::narrow(v.widen() * inv));
    }
    Ok(out)
}

fn unravel(mut flat: usize, dims: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; dims.len()];
    for (slot, &n) in idx.iter_mut().zip(dims).rev() {
        *slot = flat % n;
        flat /= n;
    }
    idx
}

/// `y_k = gain_k * x_k / sqrt(mean(x^2) + eps)`. The zero vector maps to zero.
pub fn rmsnorm<T: Real>(x: &[T], gain: &[T], eps: f64) -> Vec<T> {
    assert_eq!(x.len(), gain.len(), "rmsnorm gain length mismatch");
    let wide: Vec<f64> = x.iter().map(|v| v.widen()).collect();
    let mut out = vec![0.0; wide.len()];
    rmsnorm_f64(&wide, &mut out, eps);
    out.iter()
        .zip(gain)
        .map(|(y, g)| T::narrow(y * g.widen()))
        .collect()
}

/// Unit-gain RMSNorm in `f64`.
pub(crate) fn rmsnorm_f64(x: &[f64], out: &mut [f64], eps: f64) {
    let ms = dot(x, x) / x.len() as f64;
    let denom = (ms + eps).sqrt();
    if ms == 0.0 || denom == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    for (o, v) in out.iter_mut().zip(x) {
        *o = v / denom;
    }
}

/// Parameter-free LayerNorm in `f64`.
pub(crate) fn layernorm_f64(x: &[f64], out: &mut [f64], eps: f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) / denom;
    }
}

/// `max(x, 0)^p`, exactly zero for `x <= 0`.
#[inline(always)]
pub(crate) fn rectified_power(x: f64, power: u32) -> f64 {
    if x > 0.0 {
        int_pow(x, power)
    } else {
        0.0
    }
}

/// Rectified, thresholded weights for one head on already-normalized rows.
/// Entries above the diagonal are exactly zero.
pub(crate) fn tra_head_weights(
    qn: &[f64],
    kn: &[f64],
    t: usize,
    d: usize,
    beta: f64,
    kappa: f64,
    power: u32,
) -> Vec<f64> {
    let mut w = vec![0.0; t * t];
    for i in 0..t {
        let tau = beta * threshold_coefficient(i + 1, kappa, d);
        let qi = &qn[i * d..(i + 1) * d];
        for j in 0..=i {
            let s = dot(qi, &kn[j * d..(j + 1) * d]);
            w[i * t + j] = rectified_power(s - tau, power);
        }
    }
    w
}

fn scaled_scores(q: &[f64], k: &[f64], t: usize, d: usize, scale: f64) -> Vec<f64> {
    let mut s = vec![0.0; t * t];
    for i in 0..t {
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..=i {
            s[i * t + j] = dot(qi, &k[j * d..(j + 1) * d]) * scale;
        }
    }
    s
}

pub(crate) fn softmax_head_weights(q: &[f64], k: &[f64], t: usize, d: usize, scale: f64) -> Vec<f64> {
    let mut s = scaled_scores(q, k, t, d, scale);
    for i in 0..t {
        let row = &mut s[i * t..i * t + i + 1];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        row.iter_mut().for_each(|x| *x /= sum);
    }
    s
}

/// `out_i = sum_{j <= i} w_ij v_j`, keys in ascending order.
pub(crate) fn aggregate(w: &[f64], v: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let oi = &mut out[i * d..(i + 1) * d];
        for j in 0..=i {
            let wij = w[i * t + j];
            if wij == 0.0 {
                continue;
            }
            for (o, vj) in oi.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += wij * vj;
            }
        }
    }
    out
}

struct HeadOut {
    weights: Vec<f64>,
    output: Vec<f64>,
}

fn run_heads<T, F>(dims: BatchDims, f: F) -> Result<(Array4<T>, Array4<T>)>
where
    T: Real,
    F: Fn(usize, usize) -> Result<HeadOut> + Sync,
{
    let BatchDims {
        batch,
        heads,
        len,
        head_dim,
    } = dims;
    let results: Vec<HeadOut> = (0..batch * heads)
        .into_par_iter()
        .map(|bh| f(bh / heads, bh % heads))
        .collect::<Result<_>>()?;
    let mut output = Array4::<T>::zeros((batch, heads, len, head_dim));
    let mut weights = Array4::<T>::zeros((batch, heads, len, len));
    for (bh, r) in results.into_iter().enumerate() {
        let (b, h) = (bh / heads, bh % heads);
        for (dst, src) in output
            .slice_mut(ndarray::s![b, h, .., ..])
            .iter_mut()
            .zip(&r.output)
        {
            *dst = T::narrow(*src);
        }
        for (dst, src) in weights
            .slice_mut(ndarray::s![b, h, .., ..])
            .iter_mut()
            .zip(&r.weights)
        {
            *dst = T::narrow(*src);
        }
    }
    Ok((output, weights))
}

fn apply_rows(x: &mut [f64], d: usize, f: impl Fn(&[f64], &mut [f64])) {
    let mut tmp = vec![0.0; d];
    for row in x.chunks_mut(d) {
        f(row, &mut tmp);
        row.copy_from_slice(&tmp);
    }
}

/// Causal softmax attention `softmax(QK^T * scale) V`.
pub fn softmax_dense<T: Real>(batch: &AttnBatch<T>, scale: f64) -> Result<AttnResult<T>> {
    batch.validate()?;
    let dims = batch.dims();
    let (t, d) = (dims.len, dims.head_dim);
    let (output, weights) = run_heads(dims, |b, h| {
        let q = head_rows(&batch.q, b, h);
        let k = head_rows(&batch.k, b, h);
        let v = head_rows(&batch.v, b, h);
        let w = softmax_head_weights(&q, &k, t, d, scale);
        let output = aggregate(&w, &v, t, d);
        Ok(HeadOut { weights: w, output })
    })?;
    Ok(AttnResult {
        output,
        weights: Some(weights),
        mechanism: Mechanism::Softmax,
    })
}

/// Rectified linear attention: `LayerNorm(max(QK^T * scale, 0) V)`.
pub fn rela_dense<T: Real>(batch: &AttnBatch<T>, scale: f64) -> Result<AttnResult<T>> {
    batch.validate()?;
    let dims = batch.dims();
    let (t, d) = (dims.len, dims.head_dim);
    let (output, weights) = run_heads(dims, |b, h| {
        let q = head_rows(&batch.q, b, h);
        let k = head_rows(&batch.k, b, h);
        let v = head_rows(&batch.v, b, h);
        let mut w = scaled_scores(&q, &k, t, d, scale);
        w.iter_mut().for_each(|x| *x = x.max(0.0));
        let mut output = aggregate(&w, &v, t, d);
        apply_rows(&mut output, d, |x, o| layernorm_f64(x, o, LAYERNORM_EPS));
        Ok(HeadOut { weights: w, output })
    })?;
    Ok(AttnResult {
        output,
        weights: Some(weights),
        mechanism: Mechanism::Rela,
    })
}

/// Differential softmax: `(softmax(S1) - lambda softmax(S2)) V` with `S = QK^T / sqrt(d)`.
pub fn diff_softmax_dense<T: Real>(batch: &AttnBatch<T>, params: &AttnParams) -> Result<AttnResult<T>> {
    batch.validate()?;
    let (q2a, k2a) = batch.second_view("diff_softmax")?;
    let dims = batch.dims();
    let (t, d) = (dims.len, dims.head_dim);
    let scale = 1.0 / (d as f64).sqrt();
    let lambda = params.effective_lambda();
    let (output, weights) = run_heads(dims, |b, h| {
        let q = head_rows(&batch.q, b, h);
        let k = head_rows(&batch.k, b, h);
        let q2 = head_rows(q2a, b, h);
        let k2 = head_rows(k2a, b, h);
        let v = head_rows(&batch.v, b, h);
        let mut w = softmax_head_weights(&q, &k, t, d, scale);
        let w2 = softmax_head_weights(&q2, &k2, t, d, scale);
        for (a, b2) in w.iter_mut().zip(&w2) {
            *a -= lambda * b2;
        }
        let output = aggregate(&w, &v, t, d);
        Ok(HeadOut { weights: w, output })
    })?;
    Ok(AttnResult {
        output,
        weights: Some(weights),
        mechanism: Mechanism::DiffSoftmax,
    })
}

fn tra_heads<T: Real>(batch: &AttnBatch<T>, params: &AttnParams, norm: bool) -> Result<(Array4<T>, Array4<T>)> {
    batch.validate()?;
    params.validate()?;
    let dims = batch.dims();
    let (t, d) = (dims.len, dims.head_dim);
    run_heads(dims, |b, h| {
        let mut q = head_rows(&batch.q, b, h);
        let mut k = head_rows(&batch.k, b, h);
        normalize_head(&mut q, d, b, h)?;
        normalize_head(&mut k, d, b, h)?;
        let v = head_rows(&batch.v, b, h);
        let w = tra_head_weights(&q, &k, t, d, params.beta, params.kappa, params.power);
        let mut output = aggregate(&w, &v, t, d);
        if norm {
            apply_rows(&mut output, d, |x, o| rmsnorm_f64(x, o, params.norm_epsilon));
        }
        Ok(HeadOut { weights: w, output })
    })
}

/// Threshold rectified attention with unit-gain RMSNorm on each output row.
pub fn tra_dense<T: Real>(batch: &AttnBatch<T>, params: &AttnParams) -> Result<AttnResult<T>> {
    let (output, weights) = tra_heads(batch, params, true)?;
    Ok(AttnResult {
        output,
        weights: Some(weights),
        mechanism: Mechanism::Tra,
    })
}

/// TRA aggregation `sum_j a_ij v_j` before RMSNorm.
pub fn tra_dense_prenorm<T: Real>(batch: &AttnBatch<T>, params: &AttnParams) -> Result<AttnResult<T>> {
    let (output, weights) = tra_heads(batch, params, false)?;
    Ok(AttnResult {
        output,
        weights: Some(weights),
        mechanism: Mechanism::Tra,
    })
}

fn tda_heads<T: Real>(batch: &AttnBatch<T>, params: &AttnParams, norm: bool) -> Result<(Array4<T>, Array4<T>)> {
    batch.validate()?;
    params.validate()?;
    let (q2a, k2a) = batch.second_view("tda")?;
    let dims = batch.dims();
    let (t, d) = (dims.len, dims.head_dim);
    let lambda = params.effective_lambda();
    run_heads(dims, |b, h| {
        let mut q = head_rows(&batch.q, b, h);
        let mut k = head_rows(&batch.k, b, h);
        let mut q2 = head_rows(q2a, b, h);
        let mut k2 = head_rows(k2a, b, h);
        for rows in [&mut q, &mut k, &mut q2, &mut k2] {
            normalize_head(rows, d, b, h)?;
        }
        let v = head_rows(&batch.v, b, h);
        let mut w = tra_head_weights(&q, &k, t, d, params.beta, params.kappa, params.power);
        let w2 = tra_head_weights(&q2, &k2, t, d, params.beta, params.kappa, params.power);
        for (a, b2) in w.iter_mut().zip(&w2) {
            *a -= lambda * b2;
        }
        let mut output = aggregate(&w, &v, t, d);
        if norm {
            apply_rows(&mut output, d, |x, o| rmsnorm_f64(x, o, params.norm_epsilon));
        }
        Ok(HeadOut { weights: w, output })
    })
}

/// Threshold differential attention: `RMSNorm(sum_j (a1_ij - lambda a2_ij) v_j)`.
pub fn tda_dense<T: Real>(batch: &AttnBatch<T>, params: &AttnParams) -> Result<AttnResult<T>> {
    let (output, weights) = tda_heads(batch, params, true)?;
    Ok(AttnResult {
        output,
        weights: Some(weights),
        mechanism: Mechanism::Tda,
    })
}

/// TDA aggregation before RMSNorm.
pub fn tda_dense_prenorm<T: Real>(batch: &AttnBatch<T>, params: &AttnParams) -> Result<AttnResult<T>> {
    let (output, weights) = tda_heads(batch, params, false)?;
    Ok(AttnResult {
        output,
        weights: Some(weights),
        mechanism: Mechanism::Tda,
    })
}

/// Dispatches to the dense reference for `mechanism`.
pub fn dense<T: Real>(mechanism: Mechanism, batch: &AttnBatch<T>, params: &AttnParams) -> Result<AttnResult<T>> {
    let scale = 1.0 / (batch.dims().head_dim as f64).sqrt();
    match mechanism {
        Mechanism::Softmax => softmax_dense(batch, scale),
        Mechanism::Rela => rela_dense(batch, scale),
        Mechanism::DiffSoftmax => diff_softmax_dense(batch, params),
        Mechanism::Tra => tra_dense(batch, params),
        Mechanism::Tda => tda_dense(batch, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn batch1(t: usize, d: usize, seed: u64) -> AttnBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = (1, 1, t, d);
        AttnBatch::new(random4(&mut rng, shape), random4(&mut rng, shape), random4(&mut rng, shape)).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let out = l2_normalize_rows(&arr1(&[3.0f64, 4.0])).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-12 && (out[1] - 0.8).abs() < 1e-12);
        let out = l2_normalize_rows(&arr1(&[1.0f64, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        let out = l2_normalize_rows(&arr1(&[1.0f64, 1.0])).unwrap();
        assert!((out[0] - 0.70710678).abs() < 1e-8);
        assert!((out[1] - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn normalize_zero_row_reports_index() {
        let x = Array2::from_shape_vec((3, 2), vec![1.0f32, 2.0, 0.0, 0.0, 5.0, 1.0]).unwrap();
        match l2_normalize_rows(&x) {
            Err(Error::ZeroNormRow { index }) => assert_eq!(index, vec![1]),
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn threshold_examples() {
        let p = |kappa| AttnParams {
            kappa,
            ..AttnParams::default()
        };
        assert_eq!(threshold(1, &p(2.0), 64).unwrap(), 0.0);
        // sqrt(2 ln 2 / 64) = sqrt(ln 2) / sqrt(32).
        let oracle = std::f64::consts::LN_2.sqrt() / 32f64.sqrt();
        assert!((threshold(1, &p(1.0), 64).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.1471763).abs() < 1e-7);
        assert_eq!(threshold(1, &p(4.0), 64).unwrap(), 0.0);
        assert!(threshold(0, &p(1.0), 64).is_err());
    }

    #[test]
    fn thresholds_monotone() {
        for kappa in [0.5, 1.0, 3.0, 17.0] {
            let p = AttnParams {
                kappa,
                ..AttnParams::default()
            };
            let mut prev = 0.0;
            for i in 1..5000 {
                let tau = threshold(i, &p, 32).unwrap();
                assert!(tau >= prev && tau.is_finite());
                prev = tau;
            }
        }
    }

    #[test]
    fn rmsnorm_examples() {
        assert_eq!(rmsnorm(&[0.0f64; 4], &[1.0; 4], 1e-6), vec![0.0; 4]);
        let y = rmsnorm(&[3.0f64, 4.0], &[1.0, 1.0], 0.0);
        assert!((y[0] - 0.84852814).abs() < 1e-8 && (y[1] - 1.13137085).abs() < 1e-8);
        let y = rmsnorm(&[2.5f64; 8], &[1.0; 8], 1e-12);
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn softmax_examples() {
        // Identical keys give uniform weights over the visible prefix.
        let q = Array4::from_shape_fn((1, 1, 4, 2), |(_, _, _, c)| c as f64 + 1.0);
        let k = Array4::from_elem((1, 1, 4, 2), 0.3);
        let v = Array4::from_elem((1, 1, 4, 2), 1.0);
        let r = softmax_dense(&AttnBatch::new(q, k, v).unwrap(), 1.0).unwrap();
        let w = r.weights.unwrap();
        for j in 0..4 {
            assert!((w[[0, 0, 3, j]] - 0.25).abs() < 1e-12);
        }
        assert_eq!(w[[0, 0, 0, 0]], 1.0);

        // Scores [ln 1, ln 3] on row 2.
        let q = Array4::from_shape_vec((1, 1, 2, 1), vec![1.0, 1.0]).unwrap();
        let k = Array4::from_shape_vec((1, 1, 2, 1), vec![0.0, 3f64.ln()]).unwrap();
        let v = Array4::zeros((1, 1, 2, 1));
        let w = softmax_dense(&AttnBatch::new(q, k, v).unwrap(), 1.0).unwrap().weights.unwrap();
        assert!((w[[0, 0, 1, 0]] - 0.25).abs() < 1e-12);
        assert!((w[[0, 0, 1, 1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_stochastic_and_causal() {
        let b = batch1(9, 4, 3);
        let w = softmax_dense(&b, 0.5).unwrap().weights.unwrap();
        for i in 0..9 {
            let row: f64 = (0..9).map(|j| w[[0, 0, i, j]]).sum();
            assert!((row - 1.0).abs() < 1e-6);
            for j in 0..9 {
                assert!(w[[0, 0, i, j]] >= 0.0);
                if j > i {
                    assert_eq!(w[[0, 0, i, j]].to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }

    #[test]
    fn rela_examples() {
        let q = Array4::from_shape_vec((1, 1, 2, 1), vec![1.0, 1.0]).unwrap();
        let k = Array4::from_shape_vec((1, 1, 2, 1), vec![2.0, -0.5]).unwrap();
        let v = Array4::from_shape_vec((1, 1, 2, 1), vec![1.0, 1.0]).unwrap();
        let w = rela_dense(&AttnBatch::new(q, k, v).unwrap(), 1.0).unwrap().weights.unwrap();
        assert_eq!(w[[0, 0, 1, 0]], 2.0);
        assert_eq!(w[[0, 0, 1, 1]], 0.0);

        // All scores negative: zero weights, LayerNorm(0) = 0.
        let q = Array4::from_elem((1, 1, 3, 2), 1.0);
        let k = Array4::from_elem((1, 1, 3, 2), -1.0);
        let v = Array4::from_elem((1, 1, 3, 2), 2.0);
        let r = rela_dense(&AttnBatch::new(q, k, v).unwrap(), 1.0).unwrap();
        assert!(r.weights.unwrap().iter().all(|&x| x == 0.0));
        assert!(r.output.iter().all(|&x| x == 0.0));
    }

    fn two_view(t: usize, d: usize, seed: u64) -> AttnBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (2, 2, t, d);
        AttnBatch::two_view(
            random4(&mut rng, s),
            random4(&mut rng, s),
            random4(&mut rng, s),
            random4(&mut rng, s),
            random4(&mut rng, s),
        )
        .unwrap()
    }

    #[test]
    fn diff_softmax_properties() {
        let b = two_view(7, 4, 11);
        let lam = 0.3;
        let p = AttnParams {
            lambda: lam,
            ..AttnParams::default()
        };
        let w = diff_softmax_dense(&b, &p).unwrap().weights.unwrap();
        for bb in 0..2 {
            for h in 0..2 {
                for i in 0..7 {
                    let s: f64 = (0..7).map(|j| w[[bb, h, i, j]]).sum();
                    assert!((s - (1.0 - lam)).abs() < 1e-12);
                }
            }
        }
        // Identical views with lambda 1 cancel exactly.
        let same = AttnBatch::two_view(b.q.clone(), b.k.clone(), b.q.clone(), b.k.clone(), b.v.clone()).unwrap();
        let p1 = AttnParams { lambda: 1.0, ..p };
        let r = diff_softmax_dense(&same, &p1).unwrap();
        assert!(r.weights.unwrap().iter().all(|&x| x == 0.0));
        // lambda 0 reduces to softmax.
        let p0 = AttnParams { lambda: 0.0, ..p };
        let r0 = diff_softmax_dense(&b, &p0).unwrap();
        let single = AttnBatch::new(b.q.clone(), b.k.clone(), b.v.clone()).unwrap();
        let rs = softmax_dense(&single, 0.5).unwrap();
        assert_eq!(r0.output, rs.output);
        assert!(diff_softmax_dense(&single, &p).is_err());
    }

    #[test]
    fn tra_rectifier_examples() {
        // Margin 0.5 - 0.1471795 squared.
        let x: f64 = 0.5 - 0.1471795;
        assert!((int_pow(x, 2) - 0.1244823).abs() < 1e-7);
        assert!((rectified_power(0.5 - 0.1471795, 2) - 0.1244823).abs() < 1e-7);
        // Score exactly at threshold is not a survivor.
        let tau = 0.1471795;
        assert_eq!(rectified_power(tau - tau, 2), 0.0);
        assert_eq!(rectified_power(-0.2, 3), 0.0);
    }

    #[test]
    fn tra_single_row_below_threshold_is_zero() {
        // q and k orthogonal: score 0 < tau_1.
        let q = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 0.0]).unwrap();
        let k = Array4::from_shape_vec((1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let v = Array4::from_shape_vec((1, 1, 1, 2), vec![3.0, -2.0]).unwrap();
        let r = tra_dense(&AttnBatch::new(q, k, v).unwrap(), &AttnParams::default()).unwrap();
        assert!(r.output.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tra_sparsity_exact_and_causal() {
        let b = batch1(40, 8, 5);
        let p = AttnParams::default();
        let r = tra_dense(&b, &p).unwrap();
        let w = r.weights.unwrap();
        let mut qn = head_rows(&b.q, 0, 0);
        let mut kn = head_rows(&b.k, 0, 0);
        normalize_head(&mut qn, 8, 0, 0).unwrap();
        normalize_head(&mut kn, 8, 0, 0).unwrap();
        for i in 0..40 {
            let tau = p.threshold(i + 1, 8);
            for j in 0..40 {
                let a = w[[0, 0, i, j]];
                if j > i {
                    assert_eq!(a.to_bits(), 0);
                    continue;
                }
                let s = dot(&qn[i * 8..i * 8 + 8], &kn[j * 8..j * 8 + 8]);
                assert_eq!(a > 0.0, s > tau);
                assert!(a >= 0.0);
            }
        }
    }

    #[test]
    fn tda_limits() {
        let b = two_view(6, 4, 21);
        let p0 = AttnParams {
            lambda: 0.0,
            ..AttnParams::default()
        };
        let single = AttnBatch::new(b.q.clone(), b.k.clone(), b.v.clone()).unwrap();
        assert_eq!(tda_dense(&b, &p0).unwrap().output, tra_dense(&single, &p0).unwrap().output);

        let same = AttnBatch::two_view(b.q.clone(), b.k.clone(), b.q.clone(), b.k.clone(), b.v.clone()).unwrap();
        let p1 = AttnParams {
            lambda: 1.0,
            ..AttnParams::default()
        };
        let r = tda_dense(&same, &p1).unwrap();
        assert!(r.weights.unwrap().iter().all(|&x| x == 0.0));
        assert!(r.output.iter().all(|&x| x == 0.0));
        assert!(matches!(tda_dense(&single, &p1), Err(Error::MissingSecondView(_))));

        // Delta arithmetic on one entry.
        let (a1, a2, lam): (f64, f64, f64) = (0.3, 0.5, 0.4);
        assert!((a1 - lam * a2 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn tda_is_linear_in_views() {
        let b = two_view(12, 4, 8);
        let p = AttnParams {
            lambda: 0.37,
            ..AttnParams::default()
        };
        let delta = tda_dense_prenorm(&b, &p).unwrap().output;
        let v1 = AttnBatch::new(b.q.clone(), b.k.clone(), b.v.clone()).unwrap();
        let v2 = AttnBatch::new(b.q2.clone().unwrap(), b.k2.clone().unwrap(), b.v.clone()).unwrap();
        let o1 = tra_dense_prenorm(&v1, &p).unwrap().output;
        let o2 = tra_dense_prenorm(&v2, &p).unwrap().output;
        let recon = &o1 - &(o2 * 0.37);
        let err = (&recon - &delta).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= 1e-6, "max abs err {err}");
    }

    #[test]
    fn tra_scale_invariant() {
        let b = batch1(16, 6, 9);
        let p = AttnParams::default();
        let w = tra_dense(&b, &p).unwrap().weights.unwrap();
        let mut q = b.q.clone();
        let mut k = b.k.clone();
        for i in 0..16 {
            let c = 0.1 + i as f64;
            q.slice_mut(ndarray::s![0, 0, i, ..]).mapv_inplace(|x| x * c);
            k.slice_mut(ndarray::s![0, 0, i, ..]).mapv_inplace(|x| x * (3.0 / c));
        }
        let w2 = tra_dense(&AttnBatch::new(q, k, b.v.clone()).unwrap(), &p).unwrap().weights.unwrap();
        let err = (&w - &w2).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err <= 1e-6);
    }

    #[test]
    fn batch_rejects_bad_shapes_and_nan() {
        let a = Array4::<f32>::zeros((1, 1, 2, 2));
        let bad = Array4::<f32>::zeros((1, 1, 3, 2));
        assert!(AttnBatch::new(a.clone(), bad, a.clone()).is_err());
        let mut nan = a.clone();
        nan[[0, 0, 0, 0]] = f32::NAN;
        assert!(matches!(AttnBatch::new(a.clone(), a.clone(), nan), Err(Error::NonFinite("v"))));
    }

    #[test]
    fn mechanism_parse_roundtrip() {
        for m in Mechanism::ALL {
            assert_eq!(m.as_str().parse::<Mechanism>().unwrap(), m);
        }
        assert!("entmax".parse::<Mechanism>().is_err());
    }
}
