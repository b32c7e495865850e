//! Sliding-window perplexity, passkey retrieval and reference models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LanguageModel;
use crate::numerics::{log_sum_exp, SplitMix64, Tensor};

/// Summed negative log-likelihood and the number of scored targets.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NllTally {
    pub nll: f64,
    pub tokens: usize,
}

impl NllTally {
    pub fn merge(self, other: NllTally) -> NllTally {
        NllTally { nll: self.nll + other.nll, tokens: self.tokens + other.tokens }
    }

    pub fn ppl(&self) -> f64 {
        (self.nll / self.tokens as f64).exp()
    }
}

/// Right ends of the evaluation windows for a sequence of `len` tokens.
///
/// A window ending at `e` feeds tokens `[max(0, e − W), e)` and predicts
/// targets up to and including index `e`. Ends run `W, W + S, …` and the
/// last one is clamped to `len − 1`, so every target in `1..len` is covered.
pub fn window_ends(len: usize, window: usize, stride: usize) -> Vec<usize> {
    let last = len.saturating_sub(1);
    let mut ends = Vec::new();
    let mut e = window;
    while e < last {
        ends.push(e);
        e += stride;
    }
    ends.push(last);
    ends
}

fn check_window(model: &dyn LanguageModel, len: usize, window: usize, stride: usize) -> Result<()> {
    if window > model.max_context() {
        return Err(Error::Context { len: window, max: model.max_context() });
    }
    if stride == 0 || stride > window {
        return Err(Error::Config(format!("stride {stride} must lie in 1..={window}")));
    }
    if len < 2 {
        return Err(Error::Length(format!("need at least two tokens, got {len}")));
    }
    Ok(())
}

/// Strided perplexity tally: each target is scored once, by the first window
/// whose prediction span reaches it.
pub fn sliding_window_nll(model: &dyn LanguageModel, tokens: &[u32], window: usize, stride: usize) -> Result<NllTally> {
    check_window(model, tokens.len(), window, stride)?;
    let mut tally = NllTally::default();
    let mut scored_up_to = 0;
    for e in window_ends(tokens.len(), window, stride) {
        let start = e.saturating_sub(window);
        let logits = model.logits(&tokens[start..e])?;
        for t in scored_up_to + 1..=e {
            let row = logits.row(t - 1 - start);
            tally.nll += log_sum_exp(row) - row[tokens[t] as usize];
            tally.tokens += 1;
        }
        scored_up_to = e;
    }
    if !tally.nll.is_finite() {
        return Err(Error::NonFinite("sliding-window NLL".into()));
    }
    Ok(tally)
}

pub fn sliding_window_ppl(model: &dyn LanguageModel, tokens: &[u32], window: usize, stride: usize) -> Result<f64> {
    Ok(sliding_window_nll(model, tokens, window, stride)?.ppl())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub window: usize,
    pub eval_length: usize,
    pub ppl: f64,
    pub tokens_scored: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub schedule: String,
    pub psc: bool,
    pub lora_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub rows: Vec<PplRow>,
    pub meta: ReportMeta,
}

impl PplReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("window,eval_length,ppl,tokens_scored\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.window, r.eval_length, r.ppl, r.tokens_scored));
        }
        out
    }
}

/// One row per `(window, eval_length)`; documents are truncated to
/// `eval_length` and those that are shorter are skipped. The stride of each
/// window is `min(stride, window)`.
pub fn ppl_sweep(
    model: &dyn LanguageModel,
    documents: &[Vec<u32>],
    windows: &[usize],
    eval_lengths: &[usize],
    stride: usize,
    meta: ReportMeta,
) -> Result<PplReport> {
    let mut rows = Vec::new();
    for &window in windows {
        for &len in eval_lengths {
            let docs: Vec<&[u32]> = documents.iter().filter(|d| d.len() >= len).map(|d| &d[..len]).collect();
            if docs.is_empty() {
                return Err(Error::Data(format!("no document has {len} tokens")));
            }
            let tallies: Vec<Result<NllTally>> =
                docs.par_iter().map(|d| sliding_window_nll(model, d, window, stride.min(window))).collect();
            let mut total = NllTally::default();
            for t in tallies {
                total = total.merge(t?);
            }
            rows.push(PplRow { window, eval_length: len, ppl: total.ppl(), tokens_scored: total.tokens });
        }
    }
    Ok(PplReport { rows, meta })
}

pub const PASSKEY_PREAMBLE: &str = "There is an important info hidden inside a lot of irrelevant text.\n\
Find it and memorize them.I will quiz you about the important information there.\n";
pub const PASSKEY_FILLER: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go.\nThere and back again.\n";
pub const PASSKEY_QUESTION: &str = "What is the pass key? The pass key is";
pub const KEY_RANGE: (u32, u32) = (1, 50_000);
/// Generated characters read after the prompt.
pub const MAX_ANSWER_CHARS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasskeyTask {
    /// Filler repetitions before the key sentence.
    pub m: usize,
    /// Filler repetitions after the key sentence.
    pub n: usize,
    pub key: u32,
}

fn key_sentence(key: u32) -> String {
    format!("The pass key is {key}. Remember it. {key} is the pass key.\n\n")
}

/// Assembles the prompt bytes: preamble, blank line, `m` fillers, blank
/// line, key sentence, `n` fillers, blank line, question.
pub fn make_passkey_prompt(task: &PasskeyTask) -> Result<Vec<u8>> {
    if !(KEY_RANGE.0..=KEY_RANGE.1).contains(&task.key) {
        return Err(Error::Range(format!("pass key {} outside [1, 50000]", task.key)));
    }
    let mut out = String::from(PASSKEY_PREAMBLE);
    out.push('\n');
    out.push_str(&PASSKEY_FILLER.repeat(task.m));
    out.push('\n');
    out.push_str(&key_sentence(task.key));
    out.push_str(&PASSKEY_FILLER.repeat(task.n));
    out.push('\n');
    out.push_str(PASSKEY_QUESTION);
    Ok(out.into_bytes())
}

/// Byte offset at which the key sentence starts.
pub fn key_offset(task: &PasskeyTask) -> usize {
    PASSKEY_PREAMBLE.len() + 2 + task.m * PASSKEY_FILLER.len()
}

/// Draws a task whose prompt has the largest filler count fitting in
/// `target_len` bytes, with the key sentence at a uniformly chosen slot.
pub fn sample_passkey_task(target_len: usize, rng: &mut SplitMix64) -> Result<PasskeyTask> {
    let key = KEY_RANGE.0 + rng.below((KEY_RANGE.1 - KEY_RANGE.0 + 1) as u64) as u32;
    let minimal = make_passkey_prompt(&PasskeyTask { m: 0, n: 0, key })?.len();
    if target_len < minimal {
        return Err(Error::Length(format!(
            "target length {target_len} is below the minimal prompt of {minimal} bytes"
        )));
    }
    let fillers = (target_len - minimal) / PASSKEY_FILLER.len();
    let m = rng.below(fillers as u64 + 1) as usize;
    Ok(PasskeyTask { m, n: fillers - m, key })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of at most `max_new` tokens, stopping at the first
/// non-digit after a digit. Inputs longer than the context keep their tail.
pub fn greedy_answer(model: &dyn LanguageModel, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    let mut generated = Vec::new();
    let mut seen_digit = false;
    for _ in 0..max_new {
        let start = seq.len().saturating_sub(model.max_context());
        let logits = model.logits(&seq[start..])?;
        let next = argmax(logits.row(logits.rows() - 1)) as u32;
        let is_digit = (b'0' as u32..=b'9' as u32).contains(&next);
        if seen_digit && !is_digit {
            break;
        }
        seen_digit |= is_digit;
        generated.push(next);
        seq.push(next);
    }
    Ok(generated)
}

/// Skips leading spaces and reads the digits that follow.
pub fn parse_answer(generated: &[u32]) -> Option<u32> {
    let digits: String = generated
        .iter()
        .skip_while(|&&t| t == b' ' as u32)
        .take_while(|&&t| (b'0' as u32..=b'9' as u32).contains(&t))
        .map(|&t| t as u8 as char)
        .collect();
    digits.parse().ok()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasskeyRow {
    pub length: usize,
    pub trials: usize,
    pub accuracy: f64,
}

pub fn passkey_csv(rows: &[PasskeyRow]) -> String {
    let mut out = String::from("length,trials,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.length, r.trials, r.accuracy));
    }
    out
}

/// Exact-match retrieval accuracy per target prompt length.
pub fn passkey_eval(model: &dyn LanguageModel, lengths: &[usize], trials: usize, seed: u64) -> Result<Vec<PasskeyRow>> {
    if trials == 0 {
        return Err(Error::Config("passkey trials must be ≥ 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &length in lengths {
        let tasks: Vec<PasskeyTask> =
            (0..trials).map(|_| sample_passkey_task(length, &mut rng)).collect::<Result<_>>()?;
        let hits: Vec<Result<bool>> = tasks
            .par_iter()
            .map(|task| {
                let prompt: Vec<u32> = make_passkey_prompt(task)?.into_iter().map(u32::from).collect();
                let answer = greedy_answer(model, &prompt, MAX_ANSWER_CHARS)?;
                Ok(parse_answer(&answer) == Some(task.key))
            })
            .collect();
        let mut correct = 0;
        for h in hits {
            correct += usize::from(h?);
        }
        rows.push(PasskeyRow { length, trials, accuracy: correct as f64 / trials as f64 });
    }
    Ok(rows)
}

/// Equal logits everywhere.
#[derive(Clone, Copy, Debug)]
pub struct UniformModel {
    pub vocab: usize,
    pub max_context: usize,
}

impl LanguageModel for UniformModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_context(&self) -> usize {
        self.max_context
    }
    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        Ok(Tensor::zeros(&[tokens.len(), self.vocab]))
    }
}

/// Logits drawn from a stream seeded by the whole prefix.
#[derive(Clone, Copy, Debug)]
pub struct RandomLogitModel {
    pub vocab: usize,
    pub max_context: usize,
    pub seed: u64,
}

impl LanguageModel for RandomLogitModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_context(&self) -> usize {
        self.max_context
    }
    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(tokens.len() * self.vocab);
        let mut h = self.seed;
        for &t in tokens {
            h = SplitMix64::new(h ^ u64::from(t).wrapping_mul(0x9E37_79B9_7F4A_7C15)).next_u64();
            let mut rng = SplitMix64::new(h);
            data.extend((0..self.vocab).map(|_| rng.standard_normal()));
        }
        Tensor::new(vec![tokens.len(), self.vocab], data)
    }
}

/// Reads the key out of its context and spells it after the final question.
/// Only the last row carries a prediction; earlier rows are uniform.
#[derive(Clone, Copy, Debug)]
pub struct EchoOracle {
    pub vocab: usize,
    pub max_context: usize,
}

fn find(haystack: &[u32], needle: &[u8], from_end: bool) -> Option<usize> {
    let n = needle.len();
    if haystack.len() < n {
        return None;
    }
    let matches = |i: &usize| haystack[*i..*i + n].iter().zip(needle).all(|(&a, &b)| a == b as u32);
    if from_end {
        (0..=haystack.len() - n).rev().find(matches)
    } else {
        (0..=haystack.len() - n).find(matches)
    }
}

impl EchoOracle {
    fn next_token(&self, tokens: &[u32]) -> Option<u32> {
        let marker = b"The pass key is ";
        let k = find(tokens, marker, false)? + marker.len();
        let key: Vec<u32> = tokens[k..].iter().copied().take_while(|t| (48..=57).contains(t)).collect();
        let q = find(tokens, PASSKEY_QUESTION.as_bytes(), true)? + PASSKEY_QUESTION.len();
        let written = tokens.len() - q;
        let answer: Vec<u32> = std::iter::once(b' ' as u32).chain(key).chain(std::iter::once(b'.' as u32)).collect();
        answer.get(written).copied()
    }
}

impl LanguageModel for EchoOracle {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn max_context(&self) -> usize {
        self.max_context
    }
    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut out = Tensor::zeros(&[tokens.len(), self.vocab]);
        if let Some(next) = self.next_token(tokens) {
            if (next as usize) < self.vocab && !tokens.is_empty() {
                out.set2(tokens.len() - 1, next as usize, 1.0);
            }
        }
        Ok(out)
    }
}
