use anyhow::{anyhow, Result};
use serde::{Deserialize, Serialize};

use tda_core::model::Checkpoint;
use tda_core::passkey::{
    accuracy_csv, run_trials, trials_jsonl, ByteTokenizer, ConstantDecoder, EchoDecoder, LengthAccuracy,
    PasskeyConfig, LENGTH_TOLERANCE,
};

use crate::config::Stub;
use crate::{write_json, write_text, RunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PasskeySummary {
    pub table: Vec<LengthAccuracy>,
}

/// Accuracy per prompt length for a checkpoint or a stub decoder.
pub fn cmd_passkey(cfg: &RunConfig) -> Result<PasskeySummary> {
    let p = &cfg.passkey;
    let out = &cfg.output_dir;
    cfg.write_snapshot(out)?;
    let pk = PasskeyConfig {
        lengths: p.lengths.clone(),
        trials_per_len: p.trials_per_len,
        max_new: p.max_new,
        seed: cfg.master_seed(),
    };
    let tok = ByteTokenizer;
    let (table, results) = match (p.stub, &p.checkpoint) {
        (Some(Stub::Echo), _) => run_trials(&EchoDecoder { tokenizer: &tok }, &tok, &pk)?,
        (Some(Stub::Constant), _) => run_trials(
            &ConstantDecoder {
                tokenizer: &tok,
                answer: " 0".into(),
            },
            &tok,
            &pk,
        )?,
        (None, Some(path)) => {
            let model = Checkpoint::load(path)?.into_model()?;
            let longest = p.lengths.iter().copied().max().unwrap_or(0);
            let need = (longest as f64 * (1.0 + LENGTH_TOLERANCE)).floor() as usize + p.max_new;
            // Rotary positions extrapolate past the trained context.
            let model = model.with_context_len(need.max(model.config.context_len))?;
            run_trials(&model, &tok, &pk)?
        }
        (None, None) => return Err(anyhow!("passkey needs a checkpoint (--checkpoint) or a stub (--stub)")),
    };
    write_text(out, "passkey.csv", &accuracy_csv(&table))?;
    if p.jsonl {
        write_text(out, "trials.jsonl", &trials_jsonl(&results)?)?;
    }
    let summary = PasskeySummary { table };
    write_json(out, "summary.json", &summary)?;
    Ok(summary)
}
