use std::fmt::Write as _;

use anyhow::{anyhow, bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use tda_core::diagnostics::{
    g_sink_ratio, matrix_to_csv, max_abs, reports_to_csv, sparsity, split_weights, DiagnosticsReport, WeightMatrix,
};
use tda_core::model::{Checkpoint, Corpus, Model, Scalar};

use crate::config::PROBE_SENTENCE;
use crate::{write_json, write_text, RunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnoseSummary {
    pub sequences: usize,
    pub seq_len: usize,
    pub mean_sparsity: f64,
    /// `(k, gSinkRatio(k))` over every layer, head and sequence.
    pub sink_ratio: Vec<(usize, f64)>,
}

/// Per-sequence, per-layer stacks of per-head weight matrices.
pub fn weight_stack<F: Scalar>(model: &Model<F>, sequences: &[Vec<u32>]) -> Result<Vec<Vec<Vec<WeightMatrix>>>> {
    sequences
        .iter()
        .map(|seq| {
            let layers = model.attention_weights(seq, 1, seq.len())?;
            layers
                .iter()
                .enumerate()
                .map(|(l, w)| split_weights(w, l).map_err(Into::into))
                .collect()
        })
        .collect()
}

/// `count` windows of `seq_len` bytes drawn from the held-out split.
pub fn heldout_windows(corpus: &Corpus, count: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if corpus.val.len() < seq_len {
        bail!("validation split has {} bytes, need {seq_len}", corpus.val.len());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = corpus.val.len() - seq_len;
    Ok((0..count)
        .map(|_| {
            let s = rng.random_range(0..=hi);
            corpus.val[s..s + seq_len].iter().map(|&b| b as u32).collect()
        })
        .collect())
}

/// Reports, ΔA matrices and sink ratios of a checkpoint on a probe text or
/// on random held-out windows.
pub fn cmd_diagnose(cfg: &RunConfig) -> Result<DiagnoseSummary> {
    let d = &cfg.diagnose;
    let path = d
        .checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("diagnose needs a checkpoint (--checkpoint or diagnose.checkpoint)"))?;
    let model = Checkpoint::load(path)?.into_model()?;
    let sequences = match (d.random_batches, &d.text) {
        (Some(n), _) => {
            if !cfg.corpus.is_file() {
                bail!("corpus file not found: {}", cfg.corpus.display());
            }
            let corpus = Corpus::load(&cfg.corpus)?;
            heldout_windows(&corpus, n, d.seq_len.unwrap_or(model.config.context_len), cfg.master_seed())?
        }
        (None, text) => vec![text.as_deref().unwrap_or(PROBE_SENTENCE).bytes().map(u32::from).collect()],
    };
    if sequences.is_empty() || sequences[0].is_empty() {
        bail!("nothing to diagnose: empty input");
    }
    let out = &cfg.output_dir;
    cfg.write_snapshot(out)?;
    let stacks = weight_stack(&model, &sequences)?;

    let first: Vec<DiagnosticsReport> = stacks[0].iter().flatten().map(DiagnosticsReport::compute).collect();
    write_json(out, "diagnostics.json", &first)?;
    write_text(out, "diagnostics.csv", &reports_to_csv(&first))?;
    if d.write_matrices {
        for w in stacks[0].iter().flatten() {
            write_text(out, &format!("delta_a/layer{}_head{}.csv", w.layer, w.head), &matrix_to_csv(w))?;
        }
    }

    let n_layers = stacks[0].len();
    let seq_len = sequences[0].len();
    let mut summary_csv = String::from("layer,head,sparsity,max_abs");
    for k in &d.sink_k {
        let _ = write!(summary_csv, ",sink_ratio_{k}");
    }
    summary_csv.push('\n');
    let mut sink_csv = String::from("k,layer,g_sink_ratio\n");
    for l in 0..n_layers {
        let n_heads = stacks[0][l].len();
        for h in 0..n_heads {
            let per_seq: Vec<WeightMatrix> = stacks.iter().map(|s| s[l][h].clone()).collect();
            let sp = per_seq.iter().map(sparsity).sum::<f64>() / per_seq.len() as f64;
            let ma = per_seq.iter().map(max_abs).fold(0.0f64, f64::max);
            let _ = write!(summary_csv, "{l},{h},{sp},{ma}");
            for &k in &d.sink_k {
                if k <= seq_len {
                    let _ = write!(summary_csv, ",{}", g_sink_ratio(&per_seq, k)?);
                } else {
                    summary_csv.push(',');
                }
            }
            summary_csv.push('\n');
        }
    }
    let all: Vec<WeightMatrix> = stacks.iter().flatten().flatten().cloned().collect();
    let mut sink_ratio = Vec::new();
    for &k in d.sink_k.iter().filter(|&&k| k >= 1 && k <= seq_len) {
        for l in 0..n_layers {
            let layer: Vec<WeightMatrix> = stacks.iter().flat_map(|s| s[l].iter().cloned()).collect();
            let _ = writeln!(sink_csv, "{k},{l},{}", g_sink_ratio(&layer, k)?);
        }
        let g = g_sink_ratio(&all, k)?;
        let _ = writeln!(sink_csv, "{k},all,{g}");
        sink_ratio.push((k, g));
    }
    write_text(out, "summary.csv", &summary_csv)?;
    write_text(out, "sink.csv", &sink_csv)?;

    let summary = DiagnoseSummary {
        sequences: sequences.len(),
        seq_len,
        mean_sparsity: all.iter().map(sparsity).sum::<f64>() / all.len() as f64,
        sink_ratio,
    };
    write_json(out, "summary.json", &summary)?;
    Ok(summary)
}
