use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, OptimizerState, RngState};
use super::ops::Scalar;
use super::Model;
use crate::error::{Error, Result};

/// Lower clamp applied to every threshold scale after an update.
pub const BETA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    /// Tokens per optimizer step; a multiple of `seq_len`.
    pub batch_tokens: usize,
    pub seq_len: usize,
    pub grad_clip: f64,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            lr_max: 2e-3,
            lr_min: 1e-4,
            warmup_steps: 100,
            total_steps: 2000,
            weight_decay: 0.1,
            batch_tokens: 1024,
            seq_len: 256,
            grad_clip: 1.0,
            eval_interval: 250,
            eval_batches: 8,
            seed: 1337,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-8,
        }
    }

    /// Schedule and batch geometry of the large-scale reference run.
    pub fn paper() -> Self {
        Self {
            lr_max: 1e-3,
            lr_min: 1e-4,
            warmup_steps: 715,
            total_steps: 190_730,
            batch_tokens: 524_288,
            seq_len: 1024,
            eval_interval: 250,
            eval_batches: 20,
            ..Self::desk()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_tokens / self.seq_len.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} / {}", self.lr_min, self.lr_max));
        }
        if self.total_steps == 0 || self.warmup_steps > self.total_steps {
            return bad(format!(
                "need warmup_steps <= total_steps and total_steps >= 1, got {} / {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.seq_len == 0 || self.batch_tokens == 0 || self.batch_tokens % self.seq_len != 0 {
            return bad(format!(
                "batch_tokens {} must be a positive multiple of seq_len {}",
                self.batch_tokens, self.seq_len
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("weight_decay must be >= 0 and grad_clip > 0".into());
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return bad("eval_interval and eval_batches must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam moments must lie in [0, 1) and adam_eps > 0".into());
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then cosine decay to `lr_min` at `total_steps`.
///
/// Warmup step `s` uses `lr_max (s + 1) / warmup`; step `warmup` is exactly `lr_max`.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_max * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    let drop = 0.5 * (1.0 - (std::f64::consts::PI * progress).cos());
    cfg.lr_max - drop * (cfg.lr_max - cfg.lr_min)
}

/// Decoupled weight decay Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub t: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(model: &Model<F>, cfg: &TrainConfig) -> Self {
        Self {
            t: 0,
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn step(&mut self, model: &mut Model<F>, grads: &[Vec<F>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (ti, tensor) in model.params.tensors.iter_mut().enumerate() {
            let wd = if tensor.decay { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for (j, p) in tensor.data.iter_mut().enumerate() {
                let g = grads[ti][j].widen();
                let mj = self.beta1 * m[j].widen() + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v[j].widen() + (1.0 - self.beta2) * g * g;
                m[j] = F::narrow(mj);
                v[j] = F::narrow(vj);
                let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                let x = p.widen();
                *p = F::narrow(x - lr * (update + wd * x));
            }
        }
    }
}

/// Scales `grads` so the global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x.widen() * x.widen())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for x in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *x = F::narrow(x.widen() * s);
        }
    }
    norm
}

/// Byte corpus split into a leading train part and a trailing validation part.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

/// `(inputs, targets)` flattened `[batch * seq]`.
pub type Batch = (Vec<u32>, Vec<u32>);

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>, val_fraction: f64) -> Result<Self> {
        let split = ((bytes.len() as f64) * (1.0 - val_fraction)).round() as usize;
        let split = split.min(bytes.len());
        let val = bytes[split..].to_vec();
        let mut train = bytes;
        train.truncate(split);
        Ok(Self { train, val })
    }

    /// 90/10 split of the file at `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes, 0.1)
    }

    fn window(data: &[u8], start: usize, seq: usize, x: &mut Vec<u32>, y: &mut Vec<u32>) {
        x.extend(data[start..start + seq].iter().map(|&b| b as u32));
        y.extend(data[start + 1..start + seq + 1].iter().map(|&b| b as u32));
    }

    fn check_len(data: &[u8], seq: usize, what: &str) -> Result<()> {
        if data.len() < seq + 1 {
            return Err(Error::InvalidParam(format!(
                "{what} split has {} bytes, need at least {}",
                data.len(),
                seq + 1
            )));
        }
        Ok(())
    }

    /// Random training windows for `step`, drawn from a stream keyed by `(seed, step)`.
    pub fn train_batch(&self, seed: u64, step: usize, batch: usize, seq: usize) -> Result<Batch> {
        Self::check_len(&self.train, seq, "train")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step as u64);
        let hi = self.train.len() - seq - 1;
        let (mut x, mut y) = (Vec::with_capacity(batch * seq), Vec::with_capacity(batch * seq));
        for _ in 0..batch {
            let start = rng.random_range(0..=hi);
            Self::window(&self.train, start, seq, &mut x, &mut y);
        }
        Ok((x, y))
    }

    /// `count` fixed validation batches at evenly spaced offsets.
    pub fn val_batches(&self, count: usize, batch: usize, seq: usize) -> Result<Vec<Batch>> {
        Self::check_len(&self.val, seq, "validation")?;
        let hi = self.val.len() - seq - 1;
        let total = count * batch;
        let mut out = Vec::with_capacity(count);
        for c in 0..count {
            let (mut x, mut y) = (Vec::with_capacity(batch * seq), Vec::with_capacity(batch * seq));
            for b in 0..batch {
                let k = c * batch + b;
                let start = if total > 1 { k * hi / (total - 1) } else { 0 };
                Self::window(&self.val, start, seq, &mut x, &mut y);
            }
            out.push((x, y));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl LossRecord {
    pub fn csv(records: &[LossRecord]) -> String {
        let mut out = String::from("step,train_loss,val_loss,lr\n");
        for r in records {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.step, r.train_loss, val, r.lr);
        }
        out
    }
}

/// Side effects of a training run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Latest checkpoint is rewritten here at every evaluation.
    pub checkpoint_path: Option<PathBuf>,
    /// Where a snapshot goes if the loss turns non-finite.
    pub divergence_path: Option<PathBuf>,
    pub on_record: Option<&'a mut dyn FnMut(&LossRecord)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<LossRecord>,
    pub final_val_loss: f64,
}

/// Stateful trainer, resumable from a [`Checkpoint`].
pub struct Trainer<F: Scalar = f32> {
    pub model: Model<F>,
    pub opt: AdamW<F>,
    pub cfg: TrainConfig,
    pub step: usize,
}

impl Trainer<f32> {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .train
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training configuration".into()))?;
        cfg.validate()?;
        let step = ckpt.step;
        let opt_state = ckpt.optimizer.clone();
        let model = ckpt.into_model()?;
        let mut opt = AdamW::new(&model, &cfg);
        if let Some(state) = opt_state {
            if state.m.len() != opt.m.len() || state.v.len() != opt.v.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            opt.t = state.t;
            opt.m = state.m;
            opt.v = state.v;
        }
        Ok(Self { model, opt, cfg, step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            train: Some(self.cfg.clone()),
            step: self.step,
            rng_state: RngState {
                seed: self.cfg.seed,
                next_step: self.step,
            },
            parameters: self.model.params.clone(),
            optimizer: Some(OptimizerState {
                t: self.opt.t,
                m: self.opt.m.clone(),
                v: self.opt.v.clone(),
            }),
        }
    }
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: Model<F>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.seq_len > model.config.context_len {
            return Err(Error::ContextOverflow {
                len: cfg.seq_len,
                max: model.config.context_len,
            });
        }
        let opt = AdamW::new(&model, &cfg);
        Ok(Self { model, opt, cfg, step: 0 })
    }

    /// One optimizer step on `batch`; returns the pre-update loss.
    pub fn step_on(&mut self, batch: &Batch) -> Result<f64> {
        let (bs, seq) = (self.cfg.batch_size(), self.cfg.seq_len);
        let (loss, mut grads) = self.model.loss_and_grads(&batch.0, &batch.1, bs, seq)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                loss: loss as f32,
            });
        }
        clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = lr_at(&self.cfg, self.step);
        self.opt.step(&mut self.model, &grads, lr, self.cfg.weight_decay);
        for t in self.model.params.tensors.iter_mut().filter(|t| t.name.ends_with("attn.beta")) {
            for b in t.data.iter_mut() {
                if b.widen() < BETA_FLOOR {
                    *b = F::narrow(BETA_FLOOR);
                }
            }
        }
        self.step += 1;
        Ok(loss)
    }

    pub fn eval(&self, batches: &[Batch]) -> Result<f64> {
        let (bs, seq) = (self.cfg.batch_size(), self.cfg.seq_len);
        let mut total = 0.0;
        for (x, y) in batches {
            total += self.model.loss(x, y, bs, seq)?;
        }
        Ok(total / batches.len() as f64)
    }
}

impl Trainer<f32> {
    /// Trains until `total_steps`, evaluating every `eval_interval` steps and at the end.
    pub fn run(&mut self, corpus: &Corpus, opts: &mut TrainOptions<'_>) -> Result<TrainOutcome> {
        let (bs, seq) = (self.cfg.batch_size(), self.cfg.seq_len);
        let val = corpus.val_batches(self.cfg.eval_batches, bs, seq)?;
        let mut records = Vec::with_capacity(self.cfg.total_steps.saturating_sub(self.step));
        let mut final_val = f64::NAN;
        while self.step < self.cfg.total_steps {
            let step = self.step;
            let lr = lr_at(&self.cfg, step);
            let batch = corpus.train_batch(self.cfg.seed, step, bs, seq)?;
            let loss = match self.step_on(&batch) {
                Ok(l) => l,
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(path) = &opts.divergence_path {
                        self.checkpoint().save(path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let done = self.step;
            let val_loss = if done % self.cfg.eval_interval == 0 || done == self.cfg.total_steps {
                let v = self.eval(&val)?;
                final_val = v;
                if let Some(path) = &opts.checkpoint_path {
                    self.checkpoint().save(path)?;
                }
                Some(v)
            } else {
                None
            };
            let rec = LossRecord {
                step,
                train_loss: loss,
                val_loss,
                lr,
            };
            if let Some(cb) = opts.on_record.as_mut() {
                cb(&rec);
            }
            records.push(rec);
        }
        if final_val.is_nan() {
            final_val = self.eval(&val)?;
        }
        Ok(TrainOutcome {
            records,
            final_val_loss: final_val,
        })
    }
}

/// Fresh model and trainer from configs, run to completion.
pub fn train(
    model_cfg: super::ModelConfig,
    cfg: TrainConfig,
    corpus: &Corpus,
    opts: &mut TrainOptions<'_>,
) -> Result<(Trainer<f32>, TrainOutcome)> {
    let model = Model::<f32>::new(model_cfg)?;
    let mut trainer = Trainer::new(model, cfg)?;
    let outcome = trainer.run(corpus, opts)?;
    Ok((trainer, outcome))
}
