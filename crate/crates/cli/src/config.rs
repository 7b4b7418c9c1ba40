//! Run configuration: preset defaults, overlaid by a JSON file, overlaid by flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use tda_core::attn::Mechanism;
use tda_core::model::{ModelConfig, TrainConfig};
use tda_core::passkey::{DEFAULT_MAX_NEW, DESK_LENGTHS, PAPER_LENGTHS};
use tda_core::theory::{NoiseModel, TrialConfig};
use tda_core::TileConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub trials: TrialConfig,
    pub noise: NoiseModel,
    /// Values of beta/sigma for the tail-exponent sweep.
    pub beta_sweep: Vec<f64>,
    pub beta_sweep_rows: Vec<usize>,
    /// Rows where the dispersion trend is compared: first and last.
    pub dispersion_rows: Vec<usize>,
    /// Softmax entropy ratio must exceed this at the last dispersion row.
    pub softmax_dispersion_floor: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        Self {
            trials: TrialConfig::default(),
            noise: NoiseModel::default(),
            beta_sweep: vec![0.5, 1.5],
            beta_sweep_rows: vec![1024],
            dispersion_rows: vec![64, 256, 1024, 4096],
            softmax_dispersion_floor: 0.9,
        }
    }
}

pub const PROBE_SENTENCE: &str = "The quick brown fox jumps over the lazy dog";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub checkpoint: Option<PathBuf>,
    /// Text to probe; the probe sentence when neither this nor `random_batches` is set.
    pub text: Option<String>,
    /// Number of random held-out windows to average over.
    pub random_batches: Option<usize>,
    /// Window length for `random_batches`; the model context when unset.
    pub seq_len: Option<usize>,
    pub sink_k: Vec<usize>,
    pub write_matrices: bool,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            text: None,
            random_batches: None,
            seq_len: None,
            sink_k: vec![1, 2, 4, 8],
            write_matrices: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stub {
    /// Answers with the needle read back from the prompt.
    Echo,
    /// Answers with a fixed wrong number.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PasskeySection {
    pub checkpoint: Option<PathBuf>,
    pub stub: Option<Stub>,
    pub lengths: Vec<usize>,
    pub trials_per_len: usize,
    pub max_new: usize,
    pub jsonl: bool,
}

impl Default for PasskeySection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            stub: None,
            lengths: DESK_LENGTHS.to_vec(),
            trials_per_len: 100,
            max_new: DEFAULT_MAX_NEW,
            jsonl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Skip wall-clock timing and only run the allocation audit.
    pub memory_only: bool,
    pub max_exponent: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            lengths: vec![512, 1024, 2048, 4096],
            batch: 1,
            heads: 1,
            head_dim: 64,
            repetitions: 5,
            warmup: 2,
            memory_only: false,
            max_exponent: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Overrides every component seed when set.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub output_dir: PathBuf,
    pub corpus: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub theory: TheorySection,
    pub tiles: TileConfig,
    pub diagnose: DiagnoseSection,
    pub passkey: PasskeySection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train, lengths) = match preset {
            Preset::Desk => (ModelConfig::desk(Mechanism::Tda), TrainConfig::desk(), DESK_LENGTHS.to_vec()),
            Preset::Paper => (ModelConfig::paper(Mechanism::Tda), TrainConfig::paper(), PAPER_LENGTHS.to_vec()),
        };
        Self {
            preset,
            seed: None,
            threads: None,
            output_dir: PathBuf::from("runs/latest"),
            corpus: PathBuf::from("data/shakespeare_1mb.txt"),
            model,
            train,
            theory: TheorySection::default(),
            tiles: TileConfig::default(),
            diagnose: DiagnoseSection::default(),
            passkey: PasskeySection {
                lengths,
                ..Default::default()
            },
            bench: BenchSection::default(),
        }
    }

    /// Preset defaults with the JSON file at `path` merged over them.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let mut base = serde_json::to_value(Self::preset(preset))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file: Value =
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if !file.is_object() {
                bail!("config {} must be a JSON object", path.display());
            }
            merge(&mut base, file);
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        Ok(cfg)
    }

    /// Pushes the master seed into every seeded component.
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.theory.trials.seed = seed;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.theory.trials.validate()?;
        self.theory.noise.validate()?;
        self.tiles.validate()?;
        Ok(self)
    }

    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Recursive object merge; non-object values in `over` replace those in `base`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
