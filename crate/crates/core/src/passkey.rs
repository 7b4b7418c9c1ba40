//! Passkey retrieval: a number hidden in filler text, recalled by greedy decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Scalar};

pub const INSTRUCTION: &str = "There is an important info hidden inside a lot of irrelevant text. \
Find it and memorize them. I will quiz you about the important information there.";
pub const GARBAGE: &str = "The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.";
pub const QUERY: &str = "What is the pass key? The pass key is";
pub const MAX_PASSKEY: u32 = 50_000;
pub const DEFAULT_MAX_NEW: usize = 12;
/// Relative tolerance on achieved prompt length.
pub const LENGTH_TOLERANCE: f64 = 0.02;

pub const DESK_LENGTHS: [usize; 4] = [256, 512, 1024, 2048];
pub const PAPER_LENGTHS: [usize; 8] = [500, 1000, 1500, 2000, 2500, 3000, 3500, 4000];

pub fn needle(passkey: u32) -> String {
    format!("The pass key is {passkey}. Remember it. {passkey} is the pass key.")
}

pub trait Tokenizer: Sync {
    fn encode(&self, text: &str) -> Vec<u32>;
    fn decode(&self, tokens: &[u32]) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Anything that can continue a token sequence greedily.
pub trait Decoder: Sync {
    fn context_len(&self) -> usize;
    fn greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>>;
}

impl<F: Scalar> Decoder for Model<F> {
    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        self.greedy_decode(prompt, max_new)
    }
}

/// Reads the needle back out of the prompt and answers with it.
pub struct EchoDecoder<'a, T: Tokenizer> {
    pub tokenizer: &'a T,
}

impl<T: Tokenizer> Decoder for EchoDecoder<'_, T> {
    fn context_len(&self) -> usize {
        usize::MAX
    }

    fn greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let parsed = parse_prompt(&self.tokenizer.decode(prompt))?;
        let mut out = self.tokenizer.encode(&format!(" {}.", parsed.passkey));
        out.truncate(max_new);
        Ok(out)
    }
}

/// Always answers with the same text.
pub struct ConstantDecoder<'a, T: Tokenizer> {
    pub tokenizer: &'a T,
    pub answer: String,
}

impl<T: Tokenizer> Decoder for ConstantDecoder<'_, T> {
    fn context_len(&self) -> usize {
        usize::MAX
    }

    fn greedy(&self, _prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let mut out = self.tokenizer.encode(&self.answer);
        out.truncate(max_new);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeyTrial {
    pub target_len: usize,
    pub passkey: u32,
    pub prefix_chars: usize,
    pub suffix_chars: usize,
    pub prompt: String,
    pub seed: u64,
}

impl PasskeyTrial {
    pub fn garbage_chars(&self) -> usize {
        self.prefix_chars + self.suffix_chars
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: PasskeyTrial,
    pub model_answer: String,
    pub correct: bool,
    pub achieved_len: usize,
}

/// The five newline-separated blocks of a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub prefix: String,
    pub passkey: u32,
    pub suffix: String,
}

/// First `n` characters of the garbage sentence repeated without end.
pub fn garbage_prefix(n: usize) -> String {
    GARBAGE.chars().cycle().take(n).collect()
}

fn assemble(passkey: u32, prefix_chars: usize, suffix_chars: usize) -> String {
    [
        INSTRUCTION.to_string(),
        garbage_prefix(prefix_chars),
        needle(passkey),
        // The suffix continues the same buffer after the prefix.
        GARBAGE.chars().cycle().skip(prefix_chars).take(suffix_chars).collect(),
        QUERY.to_string(),
    ]
    .join("\n")
}

/// Token length of the prompt with no garbage at all.
pub fn min_prompt_len(tokenizer: &impl Tokenizer, passkey: u32) -> usize {
    tokenizer.encode(&assemble(passkey, 0, 0)).len()
}

/// Seed of trial `index` at `length`, derived from the master seed.
pub fn trial_seed(master: u64, length: usize, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((length as u64) << 32) ^ index as u64);
    rng.random()
}

/// Samples a passkey and a garbage split, then bisects the garbage budget so
/// the tokenized prompt lands within 2% of `target_len`.
pub fn build_prompt(target_len: usize, seed: u64, tokenizer: &impl Tokenizer) -> Result<PasskeyTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let passkey = rng.random_range(1..=MAX_PASSKEY);
    let len_of = |n: usize| tokenizer.encode(&assemble(passkey, n, 0)).len();
    let base = len_of(0);
    let slack = (target_len as f64 * LENGTH_TOLERANCE).floor() as usize;
    if base > target_len + slack {
        return Err(Error::TargetTooSmall {
            target: target_len,
            min: base.saturating_sub(slack),
        });
    }
    // Smallest garbage count reaching the target; length is monotone in n.
    let (mut lo, mut hi) = (0usize, 1usize);
    while len_of(hi) < target_len {
        hi *= 2;
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if len_of(mid) < target_len {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    let mut n = lo;
    if n > 0 && target_len.abs_diff(len_of(n - 1)) < len_of(n).abs_diff(target_len) {
        n -= 1;
    }
    let prefix_chars = rng.random_range(0..=n);
    let suffix_chars = n - prefix_chars;
    let prompt = assemble(passkey, prefix_chars, suffix_chars);
    let achieved = tokenizer.encode(&prompt).len();
    if achieved.abs_diff(target_len) > slack {
        return Err(Error::InvalidParam(format!(
            "could not calibrate prompt to {target_len} tokens (got {achieved})"
        )));
    }
    Ok(PasskeyTrial {
        target_len,
        passkey,
        prefix_chars,
        suffix_chars,
        prompt,
        seed,
    })
}

/// Splits a prompt into its blocks and re-extracts the passkey.
pub fn parse_prompt(prompt: &str) -> Result<ParsedPrompt> {
    let bad = |m: &str| Error::MalformedPrompt(m.to_string());
    let blocks: Vec<&str> = prompt.split('\n').collect();
    if blocks.len() != 5 {
        return Err(Error::MalformedPrompt(format!("expected 5 blocks, found {}", blocks.len())));
    }
    if blocks[0] != INSTRUCTION {
        return Err(bad("instruction block differs"));
    }
    if blocks[4] != QUERY {
        return Err(bad("query block differs"));
    }
    let rest = blocks[2]
        .strip_prefix("The pass key is ")
        .ok_or_else(|| bad("needle block differs"))?;
    let (first, tail) = rest.split_once(". Remember it. ").ok_or_else(|| bad("needle block differs"))?;
    let second = tail
        .strip_suffix(" is the pass key.")
        .ok_or_else(|| bad("needle block differs"))?;
    if first != second {
        return Err(bad("needle repeats two different keys"));
    }
    let passkey: u32 = first.parse().map_err(|_| bad("passkey is not an integer"))?;
    if blocks[2] != needle(passkey) {
        return Err(bad("needle block differs"));
    }
    for g in [blocks[1], blocks[3]] {
        if !is_garbage_slice(g) {
            return Err(bad("garbage block is not cut from the filler text"));
        }
    }
    Ok(ParsedPrompt {
        prefix: blocks[1].to_string(),
        passkey,
        suffix: blocks[3].to_string(),
    })
}

fn is_garbage_slice(s: &str) -> bool {
    let period = GARBAGE.len();
    (0..period).any(|start| GARBAGE.chars().cycle().skip(start).take(s.chars().count()).eq(s.chars()))
}

/// Correct iff the stripped answer is the passkey, or its leading digit run
/// parses to the same integer.
pub fn score_answer(answer: &str, passkey: u32) -> bool {
    let stripped = answer.trim();
    if stripped == passkey.to_string() {
        return true;
    }
    let digits: String = stripped.chars().take_while(|c| c.is_ascii_digit()).collect();
    !digits.is_empty() && digits.trim_start_matches('0').parse::<u64>().ok() == Some(passkey as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthAccuracy {
    pub length: usize,
    pub trials: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct PasskeyConfig {
    pub lengths: Vec<usize>,
    pub trials_per_len: usize,
    pub max_new: usize,
    pub seed: u64,
}

impl Default for PasskeyConfig {
    fn default() -> Self {
        Self {
            lengths: DESK_LENGTHS.to_vec(),
            trials_per_len: 100,
            max_new: DEFAULT_MAX_NEW,
            seed: 1337,
        }
    }
}

pub fn run_trial(decoder: &impl Decoder, tokenizer: &impl Tokenizer, trial: PasskeyTrial, max_new: usize) -> TrialResult {
    let tokens = tokenizer.encode(&trial.prompt);
    let achieved_len = tokens.len();
    let (model_answer, correct) = match decoder.greedy(&tokens, max_new) {
        Ok(out) => {
            let text = tokenizer.decode(&out);
            let ok = score_answer(&text, trial.passkey);
            (text, ok)
        }
        Err(_) => (String::new(), false),
    };
    TrialResult {
        trial,
        model_answer,
        correct,
        achieved_len,
    }
}

/// Every trial at every length; results are ordered by length then index.
pub fn run_trials(
    decoder: &impl Decoder,
    tokenizer: &impl Tokenizer,
    cfg: &PasskeyConfig,
) -> Result<(Vec<LengthAccuracy>, Vec<TrialResult>)> {
    if let Some(&max) = cfg.lengths.iter().max() {
        let need = (max as f64 * (1.0 + LENGTH_TOLERANCE)).floor() as usize + cfg.max_new;
        if decoder.context_len() < need {
            return Err(Error::ContextOverflow {
                len: need,
                max: decoder.context_len(),
            });
        }
    }
    let mut table = Vec::new();
    let mut all = Vec::new();
    for &length in &cfg.lengths {
        let results: Vec<TrialResult> = (0..cfg.trials_per_len)
            .into_par_iter()
            .map(|i| {
                let trial = build_prompt(length, trial_seed(cfg.seed, length, i), tokenizer)?;
                Ok(run_trial(decoder, tokenizer, trial, cfg.max_new))
            })
            .collect::<Result<_>>()?;
        let correct = results.iter().filter(|r| r.correct).count();
        table.push(LengthAccuracy {
            length,
            trials: cfg.trials_per_len,
            correct,
            accuracy: if cfg.trials_per_len == 0 { 0.0 } else { correct as f64 / cfg.trials_per_len as f64 },
        });
        all.extend(results);
    }
    Ok((table, all))
}

pub fn accuracy_csv(table: &[LengthAccuracy]) -> String {
    let mut out = String::from("length,trials,correct,accuracy\n");
    for r in table {
        out.push_str(&format!("{},{},{},{}\n", r.length, r.trials, r.correct, r.accuracy));
    }
    out
}

pub fn trials_jsonl(results: &[TrialResult]) -> Result<String> {
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Chi-square p-value of `samples` against the uniform law on `1..=max`
/// with `bins` equal-width bins.
pub fn uniformity_p_value(samples: &[u32], max: u32, bins: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let b = ((s as u64 - 1) * bins as u64 / max as u64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ChiSquared::new((bins - 1) as f64).expect("bins >= 2").sf(stat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_text() {
        assert_eq!(needle(1234), "The pass key is 1234. Remember it. 1234 is the pass key.");
    }

    #[test]
    fn prompt_is_deterministic() {
        let t = ByteTokenizer;
        assert_eq!(build_prompt(512, 9, &t).unwrap(), build_prompt(512, 9, &t).unwrap());
    }

    #[test]
    fn prompt_roundtrips_through_parser() {
        let t = ByteTokenizer;
        for seed in 0..50 {
            let trial = build_prompt(1024, seed, &t).unwrap();
            let parsed = parse_prompt(&trial.prompt).unwrap();
            assert_eq!(parsed.passkey, trial.passkey);
            assert_eq!(parsed.prefix.len(), trial.prefix_chars);
            assert_eq!(parsed.suffix.len(), trial.suffix_chars);
            let n = t.encode(&trial.prompt).len();
            assert!(n.abs_diff(1024) <= 20);
        }
    }

    #[test]
    fn too_small_target_is_rejected() {
        assert!(matches!(
            build_prompt(128, 0, &ByteTokenizer),
            Err(Error::TargetTooSmall { target: 128, .. })
        ));
    }

    #[test]
    fn scoring() {
        assert!(score_answer(" 1234\n", 1234));
        assert!(score_answer("1234", 1234));
        assert!(score_answer(" 1234. Remember", 1234));
        assert!(!score_answer(" 12345", 1234));
        assert!(!score_answer(" 123", 1234));
        assert!(!score_answer("", 1234));
        assert!(!score_answer(" key 1234", 1234));
    }

    #[test]
    fn echo_and_constant_stubs() {
        let t = ByteTokenizer;
        let cfg = PasskeyConfig {
            trials_per_len: 10,
            ..Default::default()
        };
        let (table, _) = run_trials(&EchoDecoder { tokenizer: &t }, &t, &cfg).unwrap();
        assert!(table.iter().all(|r| r.accuracy == 1.0));
        let constant = ConstantDecoder {
            tokenizer: &t,
            answer: " 0".into(),
        };
        let (table, _) = run_trials(&constant, &t, &cfg).unwrap();
        assert!(table.iter().all(|r| r.accuracy == 0.0));
    }

    #[test]
    fn csv_columns() {
        let csv = accuracy_csv(&[LengthAccuracy {
            length: 256,
            trials: 4,
            correct: 1,
            accuracy: 0.25,
        }]);
        assert_eq!(csv, "length,trials,correct,accuracy\n256,4,1,0.25\n");
    }
}
