use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tda_cli::commands::{cmd_bench, cmd_diagnose, cmd_passkey, cmd_train, cmd_verify_theory};
use tda_cli::config::Stub;
use tda_cli::{Preset, RunConfig};
use tda_core::attn::Mechanism;

#[derive(Parser)]
#[command(name = "tda", version, about = "Thresholded attention: training, diagnostics, theory checks, passkey retrieval, kernel benchmarks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration merged over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level language model.
    Train {
        #[arg(long)]
        mechanism: Option<Mechanism>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Sparsity, entropy, sink and ΔA reports for a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "random_batches")]
        text: Option<String>,
        /// Average over this many random held-out windows.
        #[arg(long)]
        random_batches: Option<usize>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        sink_k: Option<Vec<usize>>,
    },
    /// Monte Carlo checks of the survivor bounds and dispersion trend.
    VerifyTheory {
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Passkey retrieval accuracy by prompt length.
    Passkey {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        stub: Option<Stub>,
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        /// Also write every prompt and answer as JSON lines.
        #[arg(long)]
        jsonl: bool,
    },
    /// Dense vs streaming latency and streaming scratch growth.
    Bench {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        memory_only: bool,
    },
}

fn build_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.preset.unwrap_or_default(), g.config.as_deref())?;
    if let Some(p) = g.preset {
        cfg.preset = p;
    }
    if g.seed.is_some() {
        cfg.seed = g.seed;
    }
    if g.threads.is_some() {
        cfg.threads = g.threads;
    }
    if let Some(o) = &g.output {
        cfg.output_dir = o.clone();
    }
    match &cli.command {
        Command::Train {
            mechanism,
            steps,
            corpus,
        } => {
            if let Some(m) = mechanism {
                cfg.model.mechanism = *m;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = *s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(*s);
            }
            if let Some(c) = corpus {
                cfg.corpus = c.clone();
            }
        }
        Command::Diagnose {
            checkpoint,
            text,
            random_batches,
            seq_len,
            sink_k,
        } => {
            let d = &mut cfg.diagnose;
            if checkpoint.is_some() {
                d.checkpoint = checkpoint.clone();
            }
            if text.is_some() {
                d.text = text.clone();
                d.random_batches = None;
            }
            if random_batches.is_some() {
                d.random_batches = *random_batches;
            }
            if seq_len.is_some() {
                d.seq_len = *seq_len;
            }
            if let Some(k) = sink_k {
                d.sink_k = k.clone();
            }
        }
        Command::VerifyTheory { trials } => {
            if let Some(n) = trials {
                cfg.theory.trials.trials = *n;
            }
        }
        Command::Passkey {
            checkpoint,
            stub,
            lengths,
            trials,
            jsonl,
        } => {
            let p = &mut cfg.passkey;
            if checkpoint.is_some() {
                p.checkpoint = checkpoint.clone();
            }
            if stub.is_some() {
                p.stub = *stub;
            }
            if let Some(l) = lengths {
                p.lengths = l.clone();
            }
            if let Some(n) = trials {
                p.trials_per_len = *n;
            }
            p.jsonl |= jsonl;
        }
        Command::Bench {
            lengths,
            repetitions,
            warmup,
            memory_only,
        } => {
            let b = &mut cfg.bench;
            if let Some(l) = lengths {
                b.lengths = l.clone();
            }
            if let Some(r) = repetitions {
                b.repetitions = *r;
            }
            if let Some(w) = warmup {
                b.warmup = *w;
            }
            b.memory_only |= memory_only;
        }
    }
    cfg.resolve()
}

fn run(cli: &Cli, cfg: &RunConfig) -> anyhow::Result<bool> {
    Ok(match &cli.command {
        Command::Train { .. } => {
            let s = cmd_train(cfg)?;
            println!(
                "{}: {} steps, final validation loss {:.4}, checkpoint {}",
                s.mechanism,
                s.steps,
                s.final_val_loss,
                s.checkpoint.display()
            );
            true
        }
        Command::Diagnose { .. } => {
            let s = cmd_diagnose(cfg)?;
            println!("mean sparsity {:.4} over {} sequence(s) of {} tokens", s.mean_sparsity, s.sequences, s.seq_len);
            for (k, g) in &s.sink_ratio {
                println!("gSinkRatio({k}) = {g:.4}");
            }
            true
        }
        Command::VerifyTheory { .. } => {
            let s = cmd_verify_theory(cfg)?;
            for c in &s.checks {
                println!(
                    "{} {}: observed {:.6}, limit {:.6}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.observed,
                    c.limit
                );
            }
            println!("{} passed, {} failed", s.passed, s.failed);
            s.all_passed()
        }
        Command::Passkey { .. } => {
            let s = cmd_passkey(cfg)?;
            for r in &s.table {
                println!("length {:>5}: {}/{} correct ({:.2})", r.length, r.correct, r.trials, r.accuracy);
            }
            true
        }
        Command::Bench { .. } => {
            let s = cmd_bench(cfg)?;
            for r in &s.rows {
                match (r.dense_ms, r.streaming_ms) {
                    (Some(d), Some(st)) => println!(
                        "T={:>5}: dense {d:.1} ms, streaming {st:.1} ms, streaming scratch {} elems",
                        r.t, r.streaming_peak_elems
                    ),
                    _ => println!("T={:>5}: streaming scratch {} elems", r.t, r.streaming_peak_elems),
                }
            }
            println!("scratch growth exponent {:.3}", s.scratch_exponent);
            s.passed
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cfg.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
