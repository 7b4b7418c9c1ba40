use std::path::PathBuf;

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use tda_core::attn::Mechanism;
use tda_core::model::{Corpus, LossRecord, Model, TrainOptions, Trainer};

use crate::{write_json, write_text, RunConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub mechanism: Mechanism,
    pub steps: usize,
    pub num_params: usize,
    pub final_val_loss: f64,
    pub checkpoint: PathBuf,
}

/// Writes `loss.csv`, `model.ckpt`, `summary.json` and the config snapshot.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    if !cfg.corpus.is_file() {
        bail!("corpus file not found: {}", cfg.corpus.display());
    }
    let out = &cfg.output_dir;
    cfg.write_snapshot(out)?;
    let corpus = Corpus::load(&cfg.corpus)?;
    let model = Model::<f32>::new(cfg.model.clone())?;
    let num_params = model.num_params();
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let checkpoint = out.join("model.ckpt");
    let total = cfg.train.total_steps;
    let mut progress = |r: &LossRecord| {
        if let Some(v) = r.val_loss {
            eprintln!(
                "step {:>6}/{total}  train {:.4}  val {:.4}  lr {:.2e}",
                r.step + 1,
                r.train_loss,
                v,
                r.lr
            );
        }
    };
    let mut opts = TrainOptions {
        checkpoint_path: Some(checkpoint.clone()),
        divergence_path: Some(out.join("diverged.ckpt")),
        on_record: Some(&mut progress),
    };
    let outcome = trainer.run(&corpus, &mut opts)?;
    write_text(out, "loss.csv", &LossRecord::csv(&outcome.records))?;
    let summary = TrainSummary {
        mechanism: cfg.model.mechanism,
        steps: trainer.step,
        num_params,
        final_val_loss: outcome.final_val_loss,
        checkpoint,
    };
    write_json(out, "summary.json", &summary)?;
    Ok(summary)
}
