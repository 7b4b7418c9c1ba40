//! Python module `tda_attention`. Every attention function works on a single
//! head given as `T` rows of `d` floats.

use ndarray::{Array2, Array4};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tda_core::attn::{self, Mechanism};
use tda_core::diagnostics::{self, WeightMatrix};
use tda_core::kernel;
use tda_core::passkey::{self, ByteTokenizer};
use tda_core::theory::{self, NoiseModel};
use tda_core::{AttnBatch, AttnParams, TileConfig};

type Rows = Vec<Vec<f64>>;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// `[1, 1, T, d]` tensor from rows of equal length.
pub fn head_tensor(rows: &Rows) -> Result<Array4<f64>, String> {
    let t = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if t == 0 || d == 0 {
        return Err("expected a non-empty list of non-empty rows".into());
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        return Err(format!("row {bad} has length {}, expected {d}", rows[bad].len()));
    }
    Ok(Array4::from_shape_fn((1, 1, t, d), |(_, _, i, j)| rows[i][j]))
}

pub fn head_rows(a: &Array4<f64>) -> Rows {
    let (_, _, t, d) = a.dim();
    (0..t).map(|i| (0..d).map(|j| a[[0, 0, i, j]]).collect()).collect()
}

fn params(beta: f64, kappa: f64, power: u32, lambda: f64) -> PyResult<AttnParams> {
    let p = AttnParams {
        beta,
        kappa,
        power,
        lambda,
        ..Default::default()
    };
    p.validate().map_err(value_err)?;
    Ok(p)
}

/// Threshold of 1-based `row` for head width `head_dim`.
#[pyfunction]
#[pyo3(signature = (row, head_dim, beta=1.0, kappa=1.0))]
fn threshold(row: usize, head_dim: usize, beta: f64, kappa: f64) -> PyResult<f64> {
    attn::threshold(row, &params(beta, kappa, 2, 0.5)?, head_dim).map_err(value_err)
}

/// Dense attention output and weights `(output, weights)` for one head.
#[pyfunction]
#[pyo3(signature = (mechanism, q, k, v, q2=None, k2=None, beta=1.0, kappa=1.0, power=2, lambda_=0.5))]
#[allow(clippy::too_many_arguments)]
fn dense(
    mechanism: &str,
    q: Rows,
    k: Rows,
    v: Rows,
    q2: Option<Rows>,
    k2: Option<Rows>,
    beta: f64,
    kappa: f64,
    power: u32,
    lambda_: f64,
) -> PyResult<(Rows, Rows)> {
    let mech: Mechanism = mechanism.parse().map_err(value_err)?;
    let (q, k, v) = (head_tensor(&q), head_tensor(&k), head_tensor(&v));
    let (q, k, v) = (q.map_err(value_err)?, k.map_err(value_err)?, v.map_err(value_err)?);
    let batch = match (q2, k2) {
        (Some(q2), Some(k2)) => AttnBatch::two_view(
            q,
            k,
            head_tensor(&q2).map_err(value_err)?,
            head_tensor(&k2).map_err(value_err)?,
            v,
        ),
        _ => AttnBatch::new(q, k, v),
    }
    .map_err(value_err)?;
    let out = attn::dense(mech, &batch, &params(beta, kappa, power, lambda_)?).map_err(value_err)?;
    let weights = out.weights.as_ref().map(head_rows).unwrap_or_default();
    Ok((head_rows(&out.output), weights))
}

/// Tile-streaming TRA aggregation (before the output norm) for one head.
#[pyfunction]
#[pyo3(signature = (q, k, v, beta=1.0, kappa=1.0, power=2, block_m=64, block_n=64))]
#[allow(clippy::too_many_arguments)]
fn tra_streaming(
    q: Rows,
    k: Rows,
    v: Rows,
    beta: f64,
    kappa: f64,
    power: u32,
    block_m: usize,
    block_n: usize,
) -> PyResult<Rows> {
    let batch = AttnBatch::new(
        head_tensor(&q).map_err(value_err)?,
        head_tensor(&k).map_err(value_err)?,
        head_tensor(&v).map_err(value_err)?,
    )
    .map_err(value_err)?;
    let tiles = TileConfig::new(block_m, block_n).map_err(value_err)?;
    let out = kernel::tra_forward_streaming(&batch, &params(beta, kappa, power, 0.5)?, tiles).map_err(value_err)?;
    Ok(head_rows(&out))
}

fn matrix(rows: Rows) -> PyResult<WeightMatrix> {
    let t = rows.len();
    if rows.iter().any(|r| r.len() != t) {
        return Err(value_err("weight matrix must be square"));
    }
    let a = Array2::from_shape_fn((t, t), |(i, j)| rows[i][j]);
    WeightMatrix::new(a, 0, 0).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (row, eps=diagnostics::ENTROPY_EPS))]
fn effective_entropy(row: Vec<f64>, eps: f64) -> f64 {
    diagnostics::effective_entropy(&row, eps)
}

#[pyfunction]
fn sparsity(weights: Rows) -> PyResult<f64> {
    Ok(diagnostics::sparsity(&matrix(weights)?))
}

/// Mean sink ratio at 1-based key position `k` over a stack of matrices.
#[pyfunction]
fn g_sink_ratio(stack: Vec<Rows>, k: usize) -> PyResult<f64> {
    let ws = stack.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    diagnostics::g_sink_ratio(&ws, k).map_err(value_err)
}

/// Exact expected number of noise scores above the threshold in a row of `i` keys.
#[pyfunction]
#[pyo3(signature = (i, beta=1.0, kappa=1.0, sigma=1.0, head_dim=64))]
fn expected_survivors(i: usize, beta: f64, kappa: f64, sigma: f64, head_dim: usize) -> PyResult<f64> {
    let model = NoiseModel {
        sigma,
        head_dim,
        ..Default::default()
    };
    model.validate().map_err(value_err)?;
    Ok(theory::expected_survivors(i, &params(beta, kappa, 2, 0.5)?, &model))
}

/// `(prompt, passkey)` calibrated to `target_len` bytes.
#[pyfunction]
fn passkey_prompt(target_len: usize, seed: u64) -> PyResult<(String, u32)> {
    let t = passkey::build_prompt(target_len, seed, &ByteTokenizer).map_err(value_err)?;
    Ok((t.prompt, t.passkey))
}

#[pyfunction]
fn score_passkey_answer(answer: &str, passkey: u32) -> bool {
    passkey::score_answer(answer, passkey)
}

#[pymodule]
fn tda_attention(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(threshold, m)?)?;
    m.add_function(wrap_pyfunction!(dense, m)?)?;
    m.add_function(wrap_pyfunction!(tra_streaming, m)?)?;
    m.add_function(wrap_pyfunction!(effective_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(g_sink_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(expected_survivors, m)?)?;
    m.add_function(wrap_pyfunction!(passkey_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(score_passkey_answer, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_tensor_roundtrip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let a = head_tensor(&rows).unwrap();
        assert_eq!(a.dim(), (1, 1, 3, 2));
        assert_eq!(head_rows(&a), rows);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(head_tensor(&vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(head_tensor(&vec![]).is_err());
    }
}
