//! Per-head attention with materialized weights, split into the weighting core
//! (scores to raw aggregation) and the per-head output normalization.

use super::ops::{gemm, layernorm_rows, layernorm_rows_backward, rmsnorm_rows, rmsnorm_rows_backward, Scalar};
use crate::attn::{threshold_coefficient, Mechanism, LAYERNORM_EPS};
use crate::numeric::int_pow;

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadSpec<'a, F> {
    pub mechanism: Mechanism,
    pub t: usize,
    pub dh: usize,
    pub beta: f64,
    /// Stored (unclamped) inhibition strength.
    pub lambda: f64,
    pub kappa: f64,
    pub power: u32,
    pub eps: f64,
    pub gain: Option<&'a [F]>,
    pub bias: Option<&'a [F]>,
}

impl<F> HeadSpec<'_, F> {
    pub fn effective_lambda(&self) -> f64 {
        self.lambda.clamp(0.0, 1.0)
    }

    fn lambda_active(&self) -> bool {
        self.lambda > 0.0 && self.lambda < 1.0
    }
}

pub(crate) struct HeadInputs<'a, F> {
    pub q: &'a [F],
    pub k: &'a [F],
    pub q2: Option<&'a [F]>,
    pub k2: Option<&'a [F]>,
    pub v: &'a [F],
}

#[derive(Debug, Clone, Default)]
pub(crate) struct CoreCache<F> {
    /// Softmax / ReLA weights, or view-1 TRA weights.
    pub a1: Vec<F>,
    /// Derivative of the TRA activation for view 1.
    pub g1: Vec<F>,
    pub a2: Vec<F>,
    pub g2: Vec<F>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct PostCache<F> {
    pub inv: Vec<F>,
    pub ln: Vec<(F, F)>,
}

pub(crate) struct CoreGrads<F> {
    pub dq: Vec<F>,
    pub dk: Vec<F>,
    pub dq2: Option<Vec<F>>,
    pub dk2: Option<Vec<F>>,
    pub dv: Vec<F>,
    pub dbeta: f64,
    pub dlambda: f64,
}

fn scores<F: Scalar>(q: &[F], k: &[F], t: usize, dh: usize) -> Vec<F> {
    let mut s = vec![F::zero(); t * t];
    gemm(false, true, t, dh, t, q, k, &mut s, false);
    s
}

fn softmax_weights<F: Scalar>(q: &[F], k: &[F], t: usize, dh: usize) -> Vec<F> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut s = scores(q, k, t, dh);
    for i in 0..t {
        let row = &mut s[i * t..(i + 1) * t];
        let max = row[..=i].iter().map(|x| x.widen()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut e = vec![0.0; i + 1];
        for (j, ej) in e.iter_mut().enumerate() {
            *ej = ((row[j].widen() - max) * scale).exp();
            sum += *ej;
        }
        for (j, x) in row.iter_mut().enumerate() {
            *x = if j <= i { F::narrow(e[j] / sum) } else { F::zero() };
        }
    }
    s
}

fn rela_weights<F: Scalar>(q: &[F], k: &[F], t: usize, dh: usize) -> Vec<F> {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut s = scores(q, k, t, dh);
    for i in 0..t {
        for j in 0..t {
            let x = &mut s[i * t + j];
            *x = if j <= i { F::narrow((x.widen() * scale).max(0.0)) } else { F::zero() };
        }
    }
    s
}

/// TRA weights and activation derivative on normalized rows.
fn tra_weights<F: Scalar>(q: &[F], k: &[F], spec: &HeadSpec<F>) -> (Vec<F>, Vec<F>) {
    let (t, dh, p) = (spec.t, spec.dh, spec.power);
    let mut w = scores(q, k, t, dh);
    let mut g = vec![F::zero(); t * t];
    for i in 0..t {
        let tau = spec.beta * threshold_coefficient(i + 1, spec.kappa, dh);
        for j in 0..t {
            let idx = i * t + j;
            let x = w[idx].widen() - tau;
            if j <= i && x > 0.0 {
                w[idx] = F::narrow(int_pow(x, p));
                g[idx] = F::narrow(p as f64 * int_pow(x, p - 1));
            } else {
                w[idx] = F::zero();
            }
        }
    }
    (w, g)
}

/// Signed combined weights `a1 - lambda a2` (or `a1`).
pub(crate) fn combined_weights<F: Scalar>(spec: &HeadSpec<F>, cache: &CoreCache<F>) -> Vec<F> {
    if spec.mechanism.is_differential() {
        let lam = spec.effective_lambda();
        cache
            .a1
            .iter()
            .zip(&cache.a2)
            .map(|(a, b)| F::narrow(a.widen() - lam * b.widen()))
            .collect()
    } else {
        cache.a1.clone()
    }
}

/// Weights and raw aggregation `sum_j a_ij v_j` for one head.
pub(crate) fn core_forward<F: Scalar>(spec: &HeadSpec<F>, inp: &HeadInputs<F>) -> (Vec<F>, CoreCache<F>) {
    let (t, dh) = (spec.t, spec.dh);
    let view2 = || (inp.q2.expect("second view"), inp.k2.expect("second view"));
    let cache = match spec.mechanism {
        Mechanism::Softmax => CoreCache {
            a1: softmax_weights(inp.q, inp.k, t, dh),
            ..Default::default()
        },
        Mechanism::Rela => CoreCache {
            a1: rela_weights(inp.q, inp.k, t, dh),
            ..Default::default()
        },
        Mechanism::DiffSoftmax => {
            let (q2, k2) = view2();
            CoreCache {
                a1: softmax_weights(inp.q, inp.k, t, dh),
                a2: softmax_weights(q2, k2, t, dh),
                ..Default::default()
            }
        }
        Mechanism::Tra => {
            let (a1, g1) = tra_weights(inp.q, inp.k, spec);
            CoreCache {
                a1,
                g1,
                ..Default::default()
            }
        }
        Mechanism::Tda => {
            let (q2, k2) = view2();
            let (a1, g1) = tra_weights(inp.q, inp.k, spec);
            let (a2, g2) = tra_weights(q2, k2, spec);
            CoreCache { a1, g1, a2, g2 }
        }
    };
    let w = combined_weights(spec, &cache);
    let mut raw = vec![F::zero(); t * dh];
    gemm(false, false, t, t, dh, &w, inp.v, &mut raw, false);
    (raw, cache)
}

/// Per-head output normalization: RMSNorm for TRA/TDA, LayerNorm for ReLA.
pub(crate) fn post_forward<F: Scalar>(spec: &HeadSpec<F>, raw: &[F], out: &mut [F]) -> PostCache<F> {
    match spec.mechanism {
        Mechanism::Tra | Mechanism::Tda => PostCache {
            inv: rmsnorm_rows(raw, spec.gain.expect("head gain"), spec.eps, out),
            ln: Vec::new(),
        },
        Mechanism::Rela => PostCache {
            inv: Vec::new(),
            ln: layernorm_rows(raw, spec.gain.expect("head gain"), spec.bias.expect("head bias"), LAYERNORM_EPS, out),
        },
        Mechanism::Softmax | Mechanism::DiffSoftmax => {
            out.copy_from_slice(raw);
            PostCache::default()
        }
    }
}

/// Returns `d raw` and accumulates into `dgain` / `dbias`.
pub(crate) fn post_backward<F: Scalar>(
    spec: &HeadSpec<F>,
    raw: &[F],
    cache: &PostCache<F>,
    dout: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
) -> Vec<F> {
    let mut draw = vec![F::zero(); raw.len()];
    match spec.mechanism {
        Mechanism::Tra | Mechanism::Tda => {
            rmsnorm_rows_backward(raw, spec.gain.expect("head gain"), &cache.inv, dout, &mut draw, dgain)
        }
        Mechanism::Rela => layernorm_rows_backward(
            raw,
            spec.gain.expect("head gain"),
            &cache.ln,
            dout,
            &mut draw,
            dgain,
            dbias,
        ),
        Mechanism::Softmax | Mechanism::DiffSoftmax => draw.copy_from_slice(dout),
    }
    draw
}

fn softmax_backward<F: Scalar>(a: &[F], da: &[F], t: usize, scale: f64) -> Vec<F> {
    let mut ds = vec![F::zero(); t * t];
    for i in 0..t {
        let row = i * t;
        let dotv: f64 = (0..=i).map(|j| a[row + j].widen() * da[row + j].widen()).sum();
        for j in 0..=i {
            ds[row + j] = F::narrow(a[row + j].widen() * (da[row + j].widen() - dotv) * scale);
        }
    }
    ds
}

/// `dS = dA * G` and the matching `d tau` contribution to `d beta`.
fn tra_backward_scores<F: Scalar>(g: &[F], da: &[F], sign: f64, spec: &HeadSpec<F>) -> (Vec<F>, f64) {
    let t = spec.t;
    let mut ds = vec![F::zero(); t * t];
    let mut dbeta = 0.0;
    for i in 0..t {
        let c = threshold_coefficient(i + 1, spec.kappa, spec.dh);
        let mut row_sum = 0.0;
        for j in 0..=i {
            let idx = i * t + j;
            let v = sign * da[idx].widen() * g[idx].widen();
            ds[idx] = F::narrow(v);
            row_sum += v;
        }
        dbeta -= c * row_sum;
    }
    (ds, dbeta)
}

fn score_grads<F: Scalar>(ds: &[F], q: &[F], k: &[F], t: usize, dh: usize) -> (Vec<F>, Vec<F>) {
    let mut dq = vec![F::zero(); t * dh];
    let mut dk = vec![F::zero(); t * dh];
    gemm(false, false, t, t, dh, ds, k, &mut dq, false);
    gemm(true, false, t, t, dh, ds, q, &mut dk, false);
    (dq, dk)
}

pub(crate) fn core_backward<F: Scalar>(
    spec: &HeadSpec<F>,
    inp: &HeadInputs<F>,
    cache: &CoreCache<F>,
    draw: &[F],
) -> CoreGrads<F> {
    let (t, dh) = (spec.t, spec.dh);
    let w = combined_weights(spec, cache);
    let mut dv = vec![F::zero(); t * dh];
    gemm(true, false, t, t, dh, &w, draw, &mut dv, false);
    let mut da = vec![F::zero(); t * t];
    gemm(false, true, t, dh, t, draw, inp.v, &mut da, false);
    let scale = 1.0 / (dh as f64).sqrt();
    let lam = spec.effective_lambda();
    let dlambda_from = |a2: &[F]| -> f64 {
        if !spec.lambda_active() {
            return 0.0;
        }
        -a2.iter().zip(&da).map(|(a, g)| a.widen() * g.widen()).sum::<f64>()
    };

    let (ds1, ds2, dbeta, dlambda) = match spec.mechanism {
        Mechanism::Softmax => (softmax_backward(&cache.a1, &da, t, scale), None, 0.0, 0.0),
        Mechanism::Rela => {
            let mut ds = vec![F::zero(); t * t];
            for (idx, d) in ds.iter_mut().enumerate() {
                if cache.a1[idx] > F::zero() {
                    *d = F::narrow(da[idx].widen() * scale);
                }
            }
            (ds, None, 0.0, 0.0)
        }
        Mechanism::DiffSoftmax => {
            let ds1 = softmax_backward(&cache.a1, &da, t, scale);
            let da2: Vec<F> = da.iter().map(|x| F::narrow(-lam * x.widen())).collect();
            let ds2 = softmax_backward(&cache.a2, &da2, t, scale);
            (ds1, Some(ds2), 0.0, dlambda_from(&cache.a2))
        }
        Mechanism::Tra => {
            let (ds, db) = tra_backward_scores(&cache.g1, &da, 1.0, spec);
            (ds, None, db, 0.0)
        }
        Mechanism::Tda => {
            let (ds1, db1) = tra_backward_scores(&cache.g1, &da, 1.0, spec);
            let (ds2, db2) = tra_backward_scores(&cache.g2, &da, -lam, spec);
            (ds1, Some(ds2), db1 + db2, dlambda_from(&cache.a2))
        }
    };
    let (dq, dk) = score_grads(&ds1, inp.q, inp.k, t, dh);
    let (dq2, dk2) = match ds2 {
        Some(ds2) => {
            let (a, b) = score_grads(&ds2, inp.q2.expect("second view"), inp.k2.expect("second view"), t, dh);
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    CoreGrads {
        dq,
        dk,
        dq2,
        dk2,
        dv,
        dbeta,
        dlambda,
    }
}
