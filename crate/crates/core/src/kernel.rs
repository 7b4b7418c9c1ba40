//! Tile-blocked streaming TRA forward/backward and the TDA wrapper.
//!
//! For each query tile the kernel walks key/value tiles in ascending order,
//! recomputes the `B_M x B_N` score block, applies the causal mask and the row
//! thresholds, and accumulates `W V` into a tile-local accumulator. No buffer
//! proportional to `T x T` is ever requested; every transient buffer goes
//! through a [`ScratchAudit`] so tests can verify that.
//!
//! Masked entries have their weight and derivative forced to zero, independent
//! of the sign of the threshold. Outputs are the raw aggregation; callers apply
//! RMSNorm.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array4, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attn::{normalize_in_place, rectified_power, threshold_coefficient, AttnBatch, AttnParams};
use crate::error::{Error, Result};
use crate::numeric::{dot, int_pow, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileConfig {
    /// Query tile rows.
    pub block_m: usize,
    /// Key/value tile rows.
    pub block_n: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            block_m: 64,
            block_n: 64,
        }
    }
}

impl TileConfig {
    pub fn new(block_m: usize, block_n: usize) -> Result<Self> {
        let tiles = Self { block_m, block_n };
        tiles.validate()?;
        Ok(tiles)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_m == 0 || self.block_n == 0 {
            return Err(Error::InvalidParam(format!(
                "tile sizes must be >= 1, got ({}, {})",
                self.block_m, self.block_n
            )));
        }
        Ok(())
    }
}

/// Counts every scratch request made by the kernel.
///
/// Safe to share across worker threads. `peak_live` is the high-water mark of
/// simultaneously live scratch elements over all workers.
#[derive(Debug, Default)]
pub struct ScratchAudit {
    live: AtomicUsize,
    peak: AtomicUsize,
    largest: AtomicUsize,
    requests: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScratchReport {
    pub peak_live_elems: usize,
    pub largest_request_elems: usize,
    pub requests: usize,
}

impl ScratchAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, len: usize) -> ScratchBuf<'_> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.largest.fetch_max(len, Ordering::Relaxed);
        let live = self.live.fetch_add(len, Ordering::SeqCst) + len;
        self.peak.fetch_max(live, Ordering::SeqCst);
        ScratchBuf {
            buf: vec![0.0; len],
            audit: self,
        }
    }

    pub fn report(&self) -> ScratchReport {
        ScratchReport {
            peak_live_elems: self.peak.load(Ordering::SeqCst),
            largest_request_elems: self.largest.load(Ordering::SeqCst),
            requests: self.requests.load(Ordering::SeqCst),
        }
    }
}

pub struct ScratchBuf<'a> {
    buf: Vec<f64>,
    audit: &'a ScratchAudit,
}

impl Deref for ScratchBuf<'_> {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.buf
    }
}

impl DerefMut for ScratchBuf<'_> {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.buf
    }
}

impl Drop for ScratchBuf<'_> {
    fn drop(&mut self) {
        self.audit.live.fetch_sub(self.buf.len(), Ordering::SeqCst);
    }
}

/// Gradients of `<dO, O>` with respect to the score-side queries/keys and values.
#[derive(Debug, Clone)]
pub struct GradTriple<T> {
    pub dq: Array4<T>,
    pub dk: Array4<T>,
    pub dv: Array4<T>,
    /// Gradient with respect to the threshold scale.
    pub dbeta: f64,
}

/// Gradients of the TDA aggregation.
#[derive(Debug, Clone)]
pub struct TdaGrads<T> {
    pub dq: Array4<T>,
    pub dk: Array4<T>,
    pub dq2: Array4<T>,
    pub dk2: Array4<T>,
    pub dv: Array4<T>,
    pub dbeta: f64,
    /// Gradient with respect to the stored (unclamped) lambda.
    pub dlambda: f64,
}

fn check_same_shape<T>(name: &'static str, a: &Array4<T>, reference: &[usize]) -> Result<()> {
    if a.shape() != reference {
        return Err(Error::Shape(format!(
            "{name} has shape {:?}, expected {:?}",
            a.shape(),
            reference
        )));
    }
    Ok(())
}

/// Copies `rows` rows starting at `start` into `dst`, optionally normalizing each.
fn load_rows<T: Real>(
    src: &ArrayView2<T>,
    start: usize,
    rows: usize,
    dst: &mut [f64],
    normalize: bool,
    bh: (usize, usize),
) -> Result<()> {
    let d = src.ncols();
    for r in 0..rows {
        let row = &mut dst[r * d..(r + 1) * d];
        for (o, x) in row.iter_mut().zip(src.row(start + r).iter()) {
            *o = x.widen();
        }
        if normalize && !normalize_in_place(row) {
            return Err(Error::ZeroNormRow {
                index: vec![bh.0, bh.1, start + r],
            });
        }
    }
    Ok(())
}

struct HeadInputs<'a, T> {
    q: ArrayView2<'a, T>,
    k: ArrayView2<'a, T>,
    v: ArrayView2<'a, T>,
    bh: (usize, usize),
}

fn forward_head<T: Real>(
    inp: &HeadInputs<'_, T>,
    params: &AttnParams,
    tiles: TileConfig,
    normalize: bool,
    audit: &ScratchAudit,
) -> Result<Vec<f64>> {
    let (t, d) = inp.q.dim();
    let bm = tiles.block_m.min(t).max(1);
    let bn = tiles.block_n.min(t).max(1);
    let mut q_tile = audit.alloc(bm * d);
    let mut k_tile = audit.alloc(bn * d);
    let mut v_tile = audit.alloc(bn * d);
    let mut w_tile = audit.alloc(bm * bn);
    let mut acc = audit.alloc(bm * d);
    let mut tau = audit.alloc(bm);
    let mut out = vec![0.0; t * d];

    for m in (0..t).step_by(bm) {
        let mr = bm.min(t - m);
        load_rows(&inp.q, m, mr, &mut q_tile, normalize, inp.bh)?;
        for (i, tau_i) in tau[..mr].iter_mut().enumerate() {
            *tau_i = params.threshold(m + i + 1, d);
        }
        acc.fill(0.0);
        let last_query = m + mr - 1;
        for n in (0..t).step_by(bn) {
            if n > last_query {
                break;
            }
            let nr = bn.min(t - n);
            load_rows(&inp.k, n, nr, &mut k_tile, normalize, inp.bh)?;
            load_rows(&inp.v, n, nr, &mut v_tile, false, inp.bh)?;
            for i in 0..mr {
                let qi = &q_tile[i * d..(i + 1) * d];
                for j in 0..nr {
                    w_tile[i * bn + j] = if n + j > m + i {
                        0.0
                    } else {
                        rectified_power(dot(qi, &k_tile[j * d..(j + 1) * d]) - tau[i], params.power)
                    };
                }
            }
            for i in 0..mr {
                let ai = &mut acc[i * d..(i + 1) * d];
                for j in 0..nr {
                    let w = w_tile[i * bn + j];
                    if w == 0.0 {
                        continue;
                    }
                    for (a, vj) in ai.iter_mut().zip(&v_tile[j * d..(j + 1) * d]) {
                        *a += w * vj;
                    }
                }
            }
        }
        out[m * d..(m + mr) * d].copy_from_slice(&acc[..mr * d]);
    }
    Ok(out)
}

struct HeadGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dbeta: f64,
}

fn backward_head<T: Real>(
    inp: &HeadInputs<'_, T>,
    upstream: &ArrayView2<T>,
    params: &AttnParams,
    tiles: TileConfig,
    normalize: bool,
    audit: &ScratchAudit,
) -> Result<HeadGrads> {
    let (t, d) = inp.q.dim();
    let p = params.power;
    let bm = tiles.block_m.min(t).max(1);
    let bn = tiles.block_n.min(t).max(1);
    let mut q_tile = audit.alloc(bm * d);
    let mut do_tile = audit.alloc(bm * d);
    let mut dq_tile = audit.alloc(bm * d);
    let mut k_tile = audit.alloc(bn * d);
    let mut v_tile = audit.alloc(bn * d);
    let mut w_tile = audit.alloc(bm * bn);
    let mut ds_tile = audit.alloc(bm * bn);
    let mut tau = audit.alloc(bm);
    let mut coef = audit.alloc(bm);

    // Gradient accumulators are the outputs, held wide until the final store.
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dbeta = 0.0;

    for m in (0..t).step_by(bm) {
        let mr = bm.min(t - m);
        load_rows(&inp.q, m, mr, &mut q_tile, normalize, inp.bh)?;
        load_rows(upstream, m, mr, &mut do_tile, false, inp.bh)?;
        for i in 0..mr {
            coef[i] = threshold_coefficient(m + i + 1, params.kappa, d);
            tau[i] = params.beta * coef[i];
        }
        dq_tile.fill(0.0);
        let last_query = m + mr - 1;
        for n in (0..t).step_by(bn) {
            if n > last_query {
                break;
            }
            let nr = bn.min(t - n);
            load_rows(&inp.k, n, nr, &mut k_tile, normalize, inp.bh)?;
            load_rows(&inp.v, n, nr, &mut v_tile, false, inp.bh)?;

            for i in 0..mr {
                let qi = &q_tile[i * d..(i + 1) * d];
                let doi = &do_tile[i * d..(i + 1) * d];
                let mut dtau = 0.0;
                for j in 0..nr {
                    let idx = i * bn + j;
                    if n + j > m + i {
                        w_tile[idx] = 0.0;
                        ds_tile[idx] = 0.0;
                        continue;
                    }
                    let x = dot(qi, &k_tile[j * d..(j + 1) * d]) - tau[i];
                    if x > 0.0 {
                        let g = p as f64 * int_pow(x, p - 1);
                        let dw = dot(doi, &v_tile[j * d..(j + 1) * d]);
                        w_tile[idx] = int_pow(x, p);
                        ds_tile[idx] = dw * g;
                        dtau -= ds_tile[idx];
                    } else {
                        w_tile[idx] = 0.0;
                        ds_tile[idx] = 0.0;
                    }
                }
                dbeta += coef[i] * dtau;
            }

            for i in 0..mr {
                let dqi = &mut dq_tile[i * d..(i + 1) * d];
                for j in 0..nr {
                    let ds = ds_tile[i * bn + j];
                    if ds == 0.0 {
                        continue;
                    }
                    for (a, kj) in dqi.iter_mut().zip(&k_tile[j * d..(j + 1) * d]) {
                        *a += ds * kj;
                    }
                }
            }
            for j in 0..nr {
                let row = n + j;
                let dvj = &mut dv[row * d..(row + 1) * d];
                for i in 0..mr {
                    let w = w_tile[i * bn + j];
                    if w == 0.0 {
                        continue;
                    }
                    for (a, g) in dvj.iter_mut().zip(&do_tile[i * d..(i + 1) * d]) {
                        *a += w * g;
                    }
                }
                let dkj = &mut dk[row * d..(row + 1) * d];
                for i in 0..mr {
                    let ds = ds_tile[i * bn + j];
                    if ds == 0.0 {
                        continue;
                    }
                    for (a, qv) in dkj.iter_mut().zip(&q_tile[i * d..(i + 1) * d]) {
                        *a += ds * qv;
                    }
                }
            }
        }
        dq[m * d..(m + mr) * d].copy_from_slice(&dq_tile[..mr * d]);
    }
    Ok(HeadGrads { dq, dk, dv, dbeta })
}

fn store<T: Real>(dst: &mut Array4<T>, b: usize, h: usize, src: &[f64]) {
    for (o, x) in dst.slice_mut(s![b, h, .., ..]).iter_mut().zip(src) {
        *o = T::narrow(*x);
    }
}

fn head_inputs<'a, T>(q: &'a Array4<T>, k: &'a Array4<T>, v: &'a Array4<T>, b: usize, h: usize) -> HeadInputs<'a, T> {
    HeadInputs {
        q: q.slice(s![b, h, .., ..]),
        k: k.slice(s![b, h, .., ..]),
        v: v.slice(s![b, h, .., ..]),
        bh: (b, h),
    }
}

/// Streaming TRA aggregation `sum_j (s_ij - tau_i)_+^p v_j` on explicit arrays.
pub fn tra_forward_streaming_audited<T: Real>(
    q: &Array4<T>,
    k: &Array4<T>,
    v: &Array4<T>,
    params: &AttnParams,
    tiles: TileConfig,
    normalize: bool,
    audit: &ScratchAudit,
) -> Result<Array4<T>> {
    params.validate()?;
    tiles.validate()?;
    let shape = q.shape().to_vec();
    check_same_shape("k", k, &shape)?;
    check_same_shape("v", v, &shape)?;
    let (bs, hs) = (shape[0], shape[1]);
    let heads: Vec<Vec<f64>> = (0..bs * hs)
        .into_par_iter()
        .map(|bh| {
            let inp = head_inputs(q, k, v, bh / hs, bh % hs);
            forward_head(&inp, params, tiles, normalize, audit)
        })
        .collect::<Result<_>>()?;
    let mut out = Array4::zeros(q.raw_dim());
    for (bh, o) in heads.iter().enumerate() {
        store(&mut out, bh / hs, bh % hs, o);
    }
    Ok(out)
}

/// Streaming TRA forward with internal L2 normalization of queries and keys.
pub fn tra_forward_streaming<T: Real>(batch: &AttnBatch<T>, params: &AttnParams, tiles: TileConfig) -> Result<Array4<T>> {
    let audit = ScratchAudit::new();
    tra_forward_streaming_audited(&batch.q, &batch.k, &batch.v, params, tiles, true, &audit)
}

/// Streaming TRA backward on explicit arrays.
///
/// When `normalize` is set, `dq`/`dk` are gradients with respect to the
/// normalized rows; chain them with [`l2_normalize_backward`].
#[allow(clippy::too_many_arguments)]
pub fn tra_backward_streaming_audited<T: Real>(
    q: &Array4<T>,
    k: &Array4<T>,
    v: &Array4<T>,
    params: &AttnParams,
    upstream: &Array4<T>,
    tiles: TileConfig,
    normalize: bool,
    audit: &ScratchAudit,
) -> Result<GradTriple<T>> {
    params.validate()?;
    tiles.validate()?;
    let shape = q.shape().to_vec();
    check_same_shape("k", k, &shape)?;
    check_same_shape("v", v, &shape)?;
    check_same_shape("upstream", upstream, &shape)?;
    let (bs, hs) = (shape[0], shape[1]);
    let heads: Vec<HeadGrads> = (0..bs * hs)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / hs, bh % hs);
            let inp = head_inputs(q, k, v, b, h);
            let up = upstream.slice(s![b, h, .., ..]);
            backward_head(&inp, &up, params, tiles, normalize, audit)
        })
        .collect::<Result<_>>()?;
    let mut dq = Array4::zeros(q.raw_dim());
    let mut dk = Array4::zeros(q.raw_dim());
    let mut dv = Array4::zeros(q.raw_dim());
    let mut dbeta = 0.0;
    for (bh, g) in heads.iter().enumerate() {
        let (b, h) = (bh / hs, bh % hs);
        store(&mut dq, b, h, &g.dq);
        store(&mut dk, b, h, &g.dk);
        store(&mut dv, b, h, &g.dv);
        dbeta += g.dbeta;
    }
    Ok(GradTriple { dq, dk, dv, dbeta })
}

/// Streaming TRA backward with internal normalization. `upstream` is the
/// gradient of the pre-RMSNorm aggregation.
pub fn tra_backward_streaming<T: Real>(
    batch: &AttnBatch<T>,
    params: &AttnParams,
    upstream: &Array4<T>,
    tiles: TileConfig,
) -> Result<GradTriple<T>> {
    let audit = ScratchAudit::new();
    tra_backward_streaming_audited(&batch.q, &batch.k, &batch.v, params, upstream, tiles, true, &audit)
}

/// Chains a gradient with respect to L2-normalized rows back to the raw rows:
/// `dx = (I - x~ x~^T) g / |x|`.
pub fn l2_normalize_backward<T: Real>(x: &Array4<T>, grad: &Array4<T>) -> Result<Array4<T>> {
    check_same_shape("grad", grad, x.shape())?;
    let mut out = Array4::zeros(x.raw_dim());
    let (bs, hs, ts, _) = x.dim();
    for b in 0..bs {
        for h in 0..hs {
            for t in 0..ts {
                let xr: Vec<f64> = x.slice(s![b, h, t, ..]).iter().map(|v| v.widen()).collect();
                let gr: Vec<f64> = grad.slice(s![b, h, t, ..]).iter().map(|v| v.widen()).collect();
                let norm = dot(&xr, &xr).sqrt();
                if norm == 0.0 {
                    return Err(Error::ZeroNormRow { index: vec![b, h, t] });
                }
                let proj = dot(&xr, &gr) / norm;
                for ((o, xv), gv) in out.slice_mut(s![b, h, t, ..]).iter_mut().zip(&xr).zip(&gr) {
                    *o = T::narrow((gv - xv / norm * proj) / norm);
                }
            }
        }
    }
    Ok(out)
}

/// Maps score-side gradients from [`tra_backward_streaming`] onto the raw `q`/`k`.
pub fn chain_normalization<T: Real>(batch: &AttnBatch<T>, grads: GradTriple<T>) -> Result<GradTriple<T>> {
    Ok(GradTriple {
        dq: l2_normalize_backward(&batch.q, &grads.dq)?,
        dk: l2_normalize_backward(&batch.k, &grads.dk)?,
        dv: grads.dv,
        dbeta: grads.dbeta,
    })
}

fn second_view<T>(batch: &AttnBatch<T>) -> Result<(&Array4<T>, &Array4<T>)> {
    match (&batch.q2, &batch.k2) {
        (Some(q2), Some(k2)) => Ok((q2, k2)),
        _ => Err(Error::MissingSecondView("tda")),
    }
}

/// Streaming TDA aggregation: `forward(view 1) - clamp(lambda) forward(view 2)`.
pub fn tda_streaming<T: Real>(
    batch: &AttnBatch<T>,
    params: &AttnParams,
    tiles: TileConfig,
    normalize: bool,
) -> Result<Array4<T>> {
    tda_streaming_audited(batch, params, tiles, normalize, &ScratchAudit::new())
}

pub fn tda_streaming_audited<T: Real>(
    batch: &AttnBatch<T>,
    params: &AttnParams,
    tiles: TileConfig,
    normalize: bool,
    audit: &ScratchAudit,
) -> Result<Array4<T>> {
    let (q2, k2) = second_view(batch)?;
    let o1 = tra_forward_streaming_audited(&batch.q, &batch.k, &batch.v, params, tiles, normalize, audit)?;
    let o2 = tra_forward_streaming_audited(q2, k2, &batch.v, params, tiles, normalize, audit)?;
    let lambda = params.effective_lambda();
    let mut out = o1;
    out.zip_mut_with(&o2, |a, b| *a = T::narrow(a.widen() - lambda * b.widen()));
    Ok(out)
}

/// Backward of [`tda_streaming`]. `dq`/`dk`/`dq2`/`dk2` are with respect to the
/// normalized rows when `normalize` is set.
pub fn tda_backward_streaming<T: Real>(
    batch: &AttnBatch<T>,
    params: &AttnParams,
    upstream: &Array4<T>,
    tiles: TileConfig,
    normalize: bool,
    audit: &ScratchAudit,
) -> Result<TdaGrads<T>> {
    let (q2, k2) = second_view(batch)?;
    let lambda = params.effective_lambda();
    let g1 = tra_backward_streaming_audited(&batch.q, &batch.k, &batch.v, params, upstream, tiles, normalize, audit)?;
    let up2 = upstream.mapv(|g| T::narrow(-lambda * g.widen()));
    let g2 = tra_backward_streaming_audited(q2, k2, &batch.v, params, &up2, tiles, normalize, audit)?;
    let dlambda = if params.lambda > 0.0 && params.lambda < 1.0 {
        let o2 = tra_forward_streaming_audited(q2, k2, &batch.v, params, tiles, normalize, audit)?;
        -o2.iter().zip(upstream).map(|(o, g)| o.widen() * g.widen()).sum::<f64>()
    } else {
        0.0
    };
    let mut dv = g1.dv;
    dv.zip_mut_with(&g2.dv, |a, b| *a = T::narrow(a.widen() + b.widen()));
    Ok(TdaGrads {
        dq: g1.dq,
        dk: g1.dk,
        dq2: g2.dq,
        dk2: g2.dk,
        dv,
        dbeta: g1.dbeta + g2.dbeta,
        dlambda,
    })
}

/// Materialized TRA forward+backward: builds full `T x T` score, weight and
/// derivative matrices. Baseline for benchmarking against the streaming path.
pub fn tra_dense_forward_backward<T: Real>(
    batch: &AttnBatch<T>,
    params: &AttnParams,
    upstream: &Array4<T>,
) -> Result<(Array4<T>, GradTriple<T>)> {
    params.validate()?;
    let (bs, hs, t, d) = batch.q.dim();
    check_same_shape("upstream", upstream, batch.q.shape())?;
    let mut out = Array4::zeros(batch.q.raw_dim());
    let mut dq = Array4::zeros(batch.q.raw_dim());
    let mut dk = Array4::zeros(batch.q.raw_dim());
    let mut dv = Array4::zeros(batch.q.raw_dim());
    let mut dbeta = 0.0;
    for b in 0..bs {
        for h in 0..hs {
            let mut q = crate::attn::head_rows(&batch.q, b, h);
            let mut k = crate::attn::head_rows(&batch.k, b, h);
            let v = crate::attn::head_rows(&batch.v, b, h);
            let up = crate::attn::head_rows(upstream, b, h);
            for rows in [&mut q, &mut k] {
                for (r, row) in rows.chunks_mut(d).enumerate() {
                    if !normalize_in_place(row) {
                        return Err(Error::ZeroNormRow { index: vec![b, h, r] });
                    }
                }
            }
            let mut w = vec![0.0; t * t];
            let mut g = vec![0.0; t * t];
            for i in 0..t {
                let tau = params.threshold(i + 1, d);
                for j in 0..=i {
                    let x = dot(&q[i * d..(i + 1) * d], &k[j * d..(j + 1) * d]) - tau;
                    if x > 0.0 {
                        w[i * t + j] = int_pow(x, params.power);
                        g[i * t + j] = params.power as f64 * int_pow(x, params.power - 1);
                    }
                }
            }
            let o = crate::attn::aggregate(&w, &v, t, d);
            let mut ds = vec![0.0; t * t];
            for i in 0..t {
                let coef = threshold_coefficient(i + 1, params.kappa, d);
                for j in 0..=i {
                    let dw = dot(&up[i * d..(i + 1) * d], &v[j * d..(j + 1) * d]);
                    ds[i * t + j] = dw * g[i * t + j];
                    dbeta -= coef * ds[i * t + j];
                }
            }
            let mut gq = vec![0.0; t * d];
            let mut gk = vec![0.0; t * d];
            let mut gv = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..=i {
                    let (dsij, wij) = (ds[i * t + j], w[i * t + j]);
                    for c in 0..d {
                        gq[i * d + c] += dsij * k[j * d + c];
                        gk[j * d + c] += dsij * q[i * d + c];
                        gv[j * d + c] += wij * up[i * d + c];
                    }
                }
            }
            store(&mut out, b, h, &o);
            store(&mut dq, b, h, &gq);
            store(&mut dk, b, h, &gk);
            store(&mut dv, b, h, &gv);
        }
    }
    Ok((out, GradTriple { dq, dk, dv, dbeta }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::{tda_dense_prenorm, tra_dense_prenorm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4<T: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<T> {
        Array4::from_shape_fn(shape, |_| T::narrow(rng.random_range(-1.0..1.0)))
    }

    fn batch<T: Real>(shape: (usize, usize, usize, usize), seed: u64, two: bool) -> AttnBatch<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = rand4(&mut rng, shape);
        let k = rand4(&mut rng, shape);
        let v = rand4(&mut rng, shape);
        if two {
            let q2 = rand4(&mut rng, shape);
            let k2 = rand4(&mut rng, shape);
            AttnBatch::two_view(q, k, q2, k2, v).unwrap()
        } else {
            AttnBatch::new(q, k, v).unwrap()
        }
    }

    fn max_abs_diff<T: Real>(a: &Array4<T>, b: &Array4<T>) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x.widen() - y.widen()).abs())
            .fold(0.0, f64::max)
    }

    // Low thresholds so a good fraction of entries survive.
    fn loose() -> AttnParams {
        AttnParams {
            beta: 0.3,
            ..AttnParams::default()
        }
    }

    #[test]
    fn tile_config_rejects_zero() {
        assert!(TileConfig::new(0, 4).is_err());
        assert!(TileConfig::new(4, 0).is_err());
        assert!(TileConfig::new(1, 1).is_ok());
    }

    #[test]
    fn forward_matches_dense_across_tilings() {
        let b = batch::<f32>((2, 2, 37, 8), 1, false);
        let p = loose();
        let dense = tra_dense_prenorm(&b, &p).unwrap().output;
        for (bm, bn) in [(1, 1), (8, 8), (16, 64), (37, 37), (5, 7), (64, 3)] {
            let tiles = TileConfig::new(bm, bn).unwrap();
            let out = tra_forward_streaming(&b, &p, tiles).unwrap();
            assert!(max_abs_diff(&out, &dense) <= 1e-5, "tiles ({bm},{bn})");
        }
    }

    #[test]
    fn single_tile_matches_untiled_loop() {
        let b = batch::<f64>((1, 1, 23, 4), 2, false);
        let p = loose();
        let out = tra_forward_streaming(&b, &p, TileConfig::new(23, 23).unwrap()).unwrap();
        // Plain row loop with the same reduction order.
        let mut q = crate::attn::head_rows(&b.q, 0, 0);
        let mut k = crate::attn::head_rows(&b.k, 0, 0);
        let v = crate::attn::head_rows(&b.v, 0, 0);
        q.chunks_mut(4).for_each(|r| assert!(normalize_in_place(r)));
        k.chunks_mut(4).for_each(|r| assert!(normalize_in_place(r)));
        for i in 0..23 {
            let tau = p.threshold(i + 1, 4);
            let mut acc = [0.0f64; 4];
            for j in 0..=i {
                let w = rectified_power(dot(&q[i * 4..i * 4 + 4], &k[j * 4..j * 4 + 4]) - tau, 2);
                if w == 0.0 {
                    continue;
                }
                for c in 0..4 {
                    acc[c] += w * v[j * 4 + c];
                }
            }
            for c in 0..4 {
                assert_eq!(out[[0, 0, i, c]].to_bits(), acc[c].to_bits());
            }
        }
    }

    #[test]
    fn all_below_threshold_gives_zero() {
        let b = batch::<f32>((1, 2, 16, 4), 3, false);
        let p = AttnParams {
            beta: 50.0,
            ..AttnParams::default()
        };
        let out = tra_forward_streaming(&b, &p, TileConfig::default()).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn local_derivative_examples() {
        // p = 2, s = 0.5, tau = 0.1.
        let x: f64 = 0.5 - 0.1;
        assert!((2.0 * int_pow(x, 1) - 0.8).abs() < 1e-12);
        // p = 1: derivative is the indicator alone.
        assert_eq!(1.0 * int_pow(0.3, 0), 1.0);
    }

    #[test]
    fn dead_rectifier_has_zero_gradient() {
        let b = batch::<f64>((1, 1, 12, 4), 4, false);
        let p = AttnParams {
            beta: 50.0,
            ..AttnParams::default()
        };
        let up = Array4::from_elem(b.q.raw_dim(), 1.0);
        let g = tra_backward_streaming(&b, &p, &up, TileConfig::new(5, 3).unwrap()).unwrap();
        assert!(g.dq.iter().chain(&g.dk).chain(&g.dv).all(|&x| x == 0.0));
        assert_eq!(g.dbeta, 0.0);
    }

    #[test]
    fn backward_tiling_invariant_and_matches_materialized() {
        let b = batch::<f64>((1, 2, 29, 6), 5, false);
        let p = loose();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up = rand4::<f64>(&mut rng, (1, 2, 29, 6));
        let (_, dense) = tra_dense_forward_backward(&b, &p, &up).unwrap();
        for (bm, bn) in [(1, 1), (4, 7), (29, 29), (64, 64)] {
            let g = tra_backward_streaming(&b, &p, &up, TileConfig::new(bm, bn).unwrap()).unwrap();
            assert!(max_abs_diff(&g.dq, &dense.dq) < 1e-12);
            assert!(max_abs_diff(&g.dk, &dense.dk) < 1e-12);
            assert!(max_abs_diff(&g.dv, &dense.dv) < 1e-12);
            assert!((g.dbeta - dense.dbeta).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_positions_get_no_gradient() {
        // Only the last key carries upstream-relevant signal through v; with
        // upstream nonzero only on row 0, row 0 sees key 0 alone.
        let b = batch::<f64>((1, 1, 10, 4), 6, false);
        let p = loose();
        let mut up = Array4::zeros(b.q.raw_dim());
        up.slice_mut(s![0, 0, 0, ..]).fill(1.0);
        let g = tra_backward_streaming(&b, &p, &up, TileConfig::new(3, 3).unwrap()).unwrap();
        for j in 1..10 {
            assert!(g.dk.slice(s![0, 0, j, ..]).iter().all(|&x| x == 0.0));
            assert!(g.dv.slice(s![0, 0, j, ..]).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tda_clamps_lambda_and_matches_dense() {
        let b = batch::<f32>((2, 1, 19, 8), 7, true);
        let tiles = TileConfig::new(6, 5).unwrap();
        let hi = AttnParams { lambda: 1.7, ..loose() };
        let one = AttnParams { lambda: 1.0, ..loose() };
        assert_eq!(
            tda_streaming(&b, &hi, tiles, true).unwrap(),
            tda_streaming(&b, &one, tiles, true).unwrap()
        );
        let lo = AttnParams { lambda: -0.3, ..loose() };
        let view1 = AttnBatch::new(b.q.clone(), b.k.clone(), b.v.clone()).unwrap();
        assert_eq!(
            tda_streaming(&b, &lo, tiles, true).unwrap(),
            tra_forward_streaming(&view1, &lo, tiles).unwrap()
        );
        let mid = AttnParams { lambda: 0.6, ..loose() };
        let dense = tda_dense_prenorm(&b, &mid).unwrap().output;
        assert!(max_abs_diff(&tda_streaming(&b, &mid, tiles, true).unwrap(), &dense) <= 1e-5);
        assert!(tda_streaming(&view1, &mid, tiles, true).is_err());
    }

    #[test]
    fn zero_norm_key_is_reported() {
        let mut b = batch::<f64>((1, 1, 6, 3), 8, false);
        b.k.slice_mut(s![0, 0, 4, ..]).fill(0.0);
        match tra_forward_streaming(&b, &loose(), TileConfig::new(2, 2).unwrap()) {
            Err(Error::ZeroNormRow { index }) => assert_eq!(index, vec![0, 0, 4]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn audit_counts_tile_buffers_only() {
        let b = batch::<f32>((1, 1, 256, 16), 9, false);
        let audit = ScratchAudit::new();
        tra_forward_streaming_audited(&b.q, &b.k, &b.v, &loose(), TileConfig::new(32, 32).unwrap(), true, &audit).unwrap();
        let r = audit.report();
        assert!(r.largest_request_elems <= 32 * 32);
        assert!(r.peak_live_elems <= 32 * 32 + 4 * 32 * 16 + 32);
        assert_eq!(audit.live.load(Ordering::SeqCst), 0);
    }
}
