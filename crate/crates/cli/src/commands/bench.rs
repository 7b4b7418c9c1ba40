use std::fmt::Write as _;
use std::time::Instant;

use anyhow::{bail, Result};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use tda_core::kernel::{tra_backward_streaming_audited, tra_dense_forward_backward, tra_forward_streaming_audited};
use tda_core::{AttnBatch, AttnParams, ScratchAudit, TileConfig};

use crate::{write_json, write_text, RunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub t: usize,
    pub streaming_peak_elems: usize,
    pub streaming_largest_request: usize,
    pub dense_weight_elems: usize,
    pub dense_ms: Option<f64>,
    pub streaming_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log peak scratch against log T.
    pub scratch_exponent: f64,
    /// Every largest request stays below `T^2 / 2`.
    pub below_half_square: bool,
    pub passed: bool,
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn random(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
}

fn median_ms(reps: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Streaming scratch audit and dense-vs-streaming forward+backward latency.
///
/// `bench_memory.csv` is deterministic; `bench_timing.csv` is wall-clock.
pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchSummary> {
    let b = &cfg.bench;
    if b.lengths.len() < 2 {
        bail!("bench needs at least two sequence lengths");
    }
    let out = &cfg.output_dir;
    cfg.write_snapshot(out)?;
    let params = AttnParams::default();
    let tiles: TileConfig = cfg.tiles;
    let mut rows = Vec::new();
    for &t in &b.lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.master_seed() ^ t as u64);
        let shape = (b.batch, b.heads, t, b.head_dim);
        let batch = AttnBatch::new(random(&mut rng, shape), random(&mut rng, shape), random(&mut rng, shape))?;
        let upstream = random(&mut rng, shape);
        let streaming = |audit: &ScratchAudit| -> Result<()> {
            tra_forward_streaming_audited(&batch.q, &batch.k, &batch.v, &params, tiles, true, audit)?;
            tra_backward_streaming_audited(&batch.q, &batch.k, &batch.v, &params, &upstream, tiles, true, audit)?;
            Ok(())
        };
        let audit = ScratchAudit::new();
        streaming(&audit)?;
        let report = audit.report();
        let (dense_ms, streaming_ms) = if b.memory_only {
            (None, None)
        } else {
            let d = median_ms(b.repetitions, b.warmup, || {
                tra_dense_forward_backward(&batch, &params, &upstream)?;
                Ok(())
            })?;
            let s = median_ms(b.repetitions, b.warmup, || streaming(&ScratchAudit::new()))?;
            (Some(d), Some(s))
        };
        eprintln!(
            "T={t}: streaming peak {} elems, dense weights {} elems",
            report.peak_live_elems,
            b.batch * b.heads * t * t
        );
        rows.push(BenchRow {
            t,
            streaming_peak_elems: report.peak_live_elems,
            streaming_largest_request: report.largest_request_elems,
            dense_weight_elems: b.batch * b.heads * t * t,
            dense_ms,
            streaming_ms,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.streaming_peak_elems.max(1) as f64).collect();
    let scratch_exponent = loglog_slope(&xs, &ys);
    let below_half_square = rows.iter().all(|r| 2 * r.streaming_largest_request < r.t * r.t);

    let mut mem = String::from("T,streaming_peak_elems,streaming_largest_request,dense_weight_elems\n");
    for r in &rows {
        let _ = writeln!(
            mem,
            "{},{},{},{}",
            r.t, r.streaming_peak_elems, r.streaming_largest_request, r.dense_weight_elems
        );
    }
    let _ = writeln!(mem, "# scratch_exponent,{scratch_exponent}");
    write_text(out, "bench_memory.csv", &mem)?;
    if !b.memory_only {
        let mut timing = String::from("T,dense_ms,streaming_ms\n");
        for r in &rows {
            let _ = writeln!(
                timing,
                "{},{},{}",
                r.t,
                r.dense_ms.unwrap_or(f64::NAN),
                r.streaming_ms.unwrap_or(f64::NAN)
            );
        }
        write_text(out, "bench_timing.csv", &timing)?;
    }
    let summary = BenchSummary {
        passed: scratch_exponent < b.max_exponent && below_half_square,
        rows,
        scratch_exponent,
        below_half_square,
    };
    write_json(out, "summary.json", &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::loglog_slope;

    #[test]
    fn slope_of_power_laws() {
        let xs = [512.0, 1024.0, 2048.0, 4096.0];
        let sq: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((loglog_slope(&xs, &sq) - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&xs, &[5.0; 4]).abs() < 1e-12);
    }
}
