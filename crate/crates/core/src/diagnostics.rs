//! Metrics over materialized causal weight matrices.
//!
//! All row indices exposed to callers are 1-based, matching the convention
//! that row `i` sees `i` keys.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Real;

pub const ENTROPY_EPS: f64 = 1e-12;

/// Signed causal weights for one (layer, head, instance).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub a: Array2<f64>,
    pub layer: usize,
    pub head: usize,
}

impl WeightMatrix {
    pub fn new(a: Array2<f64>, layer: usize, head: usize) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c {
            return Err(Error::Shape(format!("weight matrix must be square, got {r}x{c}")));
        }
        for i in 0..r {
            for j in i + 1..c {
                if a[[i, j]] != 0.0 {
                    return Err(Error::InvalidParam(format!(
                        "causal mask violated at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { a, layer, head })
    }

    pub fn len(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.a.nrows() == 0
    }

    /// Lower-triangular part of 0-based row `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..=i).map(|j| self.a[[i, j]]).collect()
    }
}

/// Splits a `[B, H, T, T]` weight tensor into per-(instance, head) matrices for `layer`.
pub fn split_weights<T: Real>(w: &Array4<T>, layer: usize) -> Result<Vec<WeightMatrix>> {
    let (bs, hs, t, t2) = w.dim();
    let mut out = Vec::with_capacity(bs * hs);
    for b in 0..bs {
        for h in 0..hs {
            let a = Array2::from_shape_fn((t, t2), |(i, j)| w[[b, h, i, j]].widen());
            out.push(WeightMatrix::new(a, layer, h)?);
        }
    }
    Ok(out)
}

/// Fraction of exact zeros among the `T(T+1)/2` causal positions.
pub fn sparsity(w: &WeightMatrix) -> f64 {
    let t = w.len();
    if t == 0 {
        return 0.0;
    }
    let mut zeros = 0usize;
    for i in 0..t {
        for j in 0..=i {
            if w.a[[i, j]] == 0.0 {
                zeros += 1;
            }
        }
    }
    zeros as f64 / (t * (t + 1) / 2) as f64
}

/// Mean of per-matrix sparsity.
pub fn mean_sparsity(ws: &[WeightMatrix]) -> f64 {
    if ws.is_empty() {
        return 0.0;
    }
    ws.iter().map(sparsity).sum::<f64>() / ws.len() as f64
}

/// Shannon entropy (nats) of `|a| / (|a|_1 + eps)`.
pub fn effective_entropy(row: &[f64], eps: f64) -> f64 {
    let l1: f64 = row.iter().map(|x| x.abs()).sum();
    if l1 == 0.0 {
        return 0.0;
    }
    let denom = l1 + eps;
    row.iter()
        .map(|x| x.abs() / denom)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

/// `entropy / ln(i)`; `None` for `i < 2`.
pub fn dispersion_ratio(entropy: f64, row: usize) -> Option<f64> {
    (row >= 2).then(|| entropy / (row as f64).ln())
}

/// `(1 / (T - k + 1)) sum_{i=k}^{T} 1/i` for 1-based `k`.
pub fn uniform_sink_baseline(t: usize, k: usize) -> f64 {
    let s: f64 = (k..=t).map(|i| 1.0 / i as f64).sum();
    s / (t - k + 1) as f64
}

/// Per-key `A~_k / A~^unif_k` for one matrix, indexed by 0-based key (`k - 1`).
pub fn sink_profile(w: &WeightMatrix) -> Vec<f64> {
    let t = w.len();
    let mut col = vec![0.0; t];
    for i in 0..t {
        let mass: f64 = (0..=i).map(|j| w.a[[i, j]].abs()).sum();
        if mass == 0.0 {
            continue;
        }
        for (j, c) in col.iter_mut().enumerate().take(i + 1) {
            *c += w.a[[i, j]].abs() / mass;
        }
    }
    // Baseline suffix sums of 1/i, accumulated from the last row backwards.
    let mut out = vec![0.0; t];
    let mut harmonic_tail = 0.0;
    for k0 in (0..t).rev() {
        harmonic_tail += 1.0 / (k0 + 1) as f64;
        let n = (t - k0) as f64;
        out[k0] = (col[k0] / n) / (harmonic_tail / n);
    }
    out
}

/// Mean of `A~_k / A~^unif_k` over every matrix in the stack, for 1-based `k`.
pub fn g_sink_ratio(stack: &[WeightMatrix], k: usize) -> Result<f64> {
    if stack.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for w in stack {
        if k < 1 || k > w.len() {
            return Err(Error::InvalidParam(format!(
                "sink key position {k} outside 1..={}",
                w.len()
            )));
        }
        total += sink_profile(w)[k - 1];
    }
    Ok(total / stack.len() as f64)
}

/// Largest `|a_ij|` over the causal positions.
pub fn max_abs(w: &WeightMatrix) -> f64 {
    let mut m = 0.0f64;
    for i in 0..w.len() {
        for j in 0..=i {
            m = m.max(w.a[[i, j]].abs());
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub layer: usize,
    pub head: usize,
    pub sparsity: f64,
    pub entropy_by_row: Vec<f64>,
    /// `None` for row 1.
    pub dispersion_ratio_by_row: Vec<Option<f64>>,
    pub sink_ratio: Vec<f64>,
    pub max_abs: f64,
}

impl DiagnosticsReport {
    pub fn compute(w: &WeightMatrix) -> Self {
        let entropy_by_row: Vec<f64> = (0..w.len())
            .map(|i| effective_entropy(&w.row(i), ENTROPY_EPS))
            .collect();
        let dispersion_ratio_by_row = entropy_by_row
            .iter()
            .enumerate()
            .map(|(i, &h)| dispersion_ratio(h, i + 1))
            .collect();
        Self {
            layer: w.layer,
            head: w.head,
            sparsity: sparsity(w),
            entropy_by_row,
            dispersion_ratio_by_row,
            sink_ratio: sink_profile(w),
            max_abs: max_abs(w),
        }
    }
}

/// Long-format CSV with columns `layer,head,metric,index,value`.
pub fn reports_to_csv(reports: &[DiagnosticsReport]) -> String {
    let mut out = String::from("layer,head,metric,index,value\n");
    for r in reports {
        let (l, h) = (r.layer, r.head);
        let _ = writeln!(out, "{l},{h},sparsity,0,{}", r.sparsity);
        let _ = writeln!(out, "{l},{h},max_abs,0,{}", r.max_abs);
        for (i, v) in r.entropy_by_row.iter().enumerate() {
            let _ = writeln!(out, "{l},{h},entropy,{},{v}", i + 1);
        }
        for (i, v) in r.dispersion_ratio_by_row.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(out, "{l},{h},dispersion_ratio,{},{v}", i + 1);
            }
        }
        for (k, v) in r.sink_ratio.iter().enumerate() {
            let _ = writeln!(out, "{l},{h},sink_ratio,{},{v}", k + 1);
        }
    }
    out
}

pub fn write_reports(reports: &[DiagnosticsReport], json_path: &Path, csv_path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(reports)?;
    std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    std::fs::write(csv_path, reports_to_csv(reports)).map_err(|e| Error::io(csv_path, e))?;
    Ok(())
}

/// Dense `[T, T]` matrix as CSV rows, for heatmap rendering.
pub fn matrix_to_csv(w: &WeightMatrix) -> String {
    let mut out = String::new();
    for i in 0..w.len() {
        let row: Vec<String> = w.a.row(i).iter().map(|x| x.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
