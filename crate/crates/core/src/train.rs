//! AdamW, warmup schedule, gradient accumulation, the fine-tuning loop and
//! the adapter rank-deficiency experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{chunk, Corpus};
use crate::error::{Error, Result};
use crate::lora::{lora_apply, lora_backward_acc, LoraAdapter};
use crate::model::{ModelState, ParamFamily};
use crate::numerics::{SplitMix64, Tensor};
use crate::phase::PhaseShiftSpec;
use crate::psc::{calibrate_backward_vec, calibrate_vec, PscHeadWeights};
use crate::rope::RotaryCache;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_baseline_steps")]
    pub baseline_steps: usize,
    /// Minimum relative perplexity improvement between evaluations.
    #[serde(default = "default_min_improvement")]
    pub min_improvement: f64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

fn default_eval_every() -> usize {
    250
}
fn default_baseline_steps() -> usize {
    500
}
fn default_min_improvement() -> f64 {
    1e-3
}
fn default_eval_samples() -> usize {
    8
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            eval_every: default_eval_every(),
            baseline_steps: default_baseline_steps(),
            min_improvement: default_min_improvement(),
            eval_samples: default_eval_samples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    pub early_stop: Option<EarlyStop>,
    /// Families to train; `None` keeps the model's default registry.
    pub trainable: Option<Vec<ParamFamily>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 20,
            total_steps: 200,
            batch_size: 1,
            grad_accum: 4,
            seq_len: 64,
            seed: 0,
            checkpoint_every: 0,
            early_stop: None,
            trainable: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("lr and eps must be positive and weight_decay non-negative".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!("warmup {} exceeds total steps {}", self.warmup_steps, self.total_steps));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.seq_len < 2 {
            return bad("batch_size and grad_accum must be ≥ 1 and seq_len ≥ 2".into());
        }
        if let Some(es) = &self.early_stop {
            if es.eval_every == 0 || es.eval_samples == 0 {
                return bad("early_stop.eval_every and eval_samples must be ≥ 1".into());
            }
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_steps`, constant afterwards. Steps count from 1.
pub fn lr_at(config: &TrainConfig, step: usize) -> f64 {
    if config.warmup_steps == 0 {
        return config.lr;
    }
    config.lr * (step as f64 / config.warmup_steps as f64).min(1.0)
}

/// Bias-corrected AdamW with decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every parameter that has a gradient. Non-finite gradients are
    /// rejected before anything is modified.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::Training { param: name.clone(), msg: "gradient is not finite".into() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Training { param: name, msg: format!("gradient shape {:?}", g.shape()) });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                *w -= lr * (update + cfg.weight_decay * *w);
            }
            if p.data().iter().any(|w| !w.is_finite()) {
                return Err(Error::Training { param: name, msg: "update produced a non-finite weight".into() });
            }
        }
        Ok(())
    }
}

/// Averages micro-batch gradients.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    sum: BTreeMap<String, Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            match self.sum.get_mut(name) {
                Some(s) => s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    self.sum.insert(name.clone(), g.clone());
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean gradient and reset; `None` when nothing was accumulated.
    pub fn take_mean(&mut self) -> Option<BTreeMap<String, Tensor>> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        self.count = 0;
        Some(std::mem::take(&mut self.sum).into_iter().map(|(k, t)| (k, t.scale(1.0 / n))).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: usize,
    rng: u64,
    optimizer_step: u64,
    history: Vec<HistoryRow>,
    last_eval_ppl: Option<f64>,
    stopped: bool,
    train: TrainConfig,
}

const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

/// Single-writer training loop over fixed-length segments.
pub struct Trainer {
    pub state: ModelState,
    pub config: TrainConfig,
    optimizer: AdamW,
    segments: Vec<Vec<u32>>,
    rng: SplitMix64,
    step: usize,
    history: Vec<HistoryRow>,
    last_eval_ppl: Option<f64>,
    stopped: bool,
}

impl Trainer {
    pub fn new(mut state: ModelState, corpus: &Corpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if let Some(families) = &config.trainable {
            state.set_trainable(families.iter().copied());
        }
        if state.trainable().is_empty() {
            return Err(Error::Config("no trainable parameter families registered".into()));
        }
        let seq = config.seq_len.min(state.config.max_context);
        let segments = chunk(corpus, seq)?;
        if segments.is_empty() {
            return Err(Error::Data(format!("corpus yields no segment of {seq} tokens")));
        }
        let rng = SplitMix64::new(config.seed);
        Ok(Self {
            state,
            config,
            optimizer: AdamW::new(),
            segments,
            rng,
            step: 0,
            history: Vec::new(),
            last_eval_ppl: None,
            stopped: false,
        })
    }

    /// Restores model weights, optimiser moments and loop state from a checkpoint.
    pub fn resume(path: &Path, corpus: &Corpus) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let ts: TrainState = ck
            .train_state
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("{} carries no training state", path.display())))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string())))?;
        let state = checkpoint::model_from_checkpoint(&ck)?;
        let mut t = Self::new(state, corpus, ts.train.clone())?;
        t.step = ts.step;
        t.rng = SplitMix64::new(ts.rng);
        t.history = ts.history;
        t.last_eval_ppl = ts.last_eval_ppl;
        t.stopped = ts.stopped;
        t.optimizer.step = ts.optimizer_step;
        for (name, tensor) in ck.tensors {
            if let Some(p) = name.strip_prefix(MOMENT1) {
                t.optimizer.m.insert(p.to_string(), tensor);
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                t.optimizer.v.insert(p.to_string(), tensor);
            }
        }
        Ok(t)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.stopped || self.step >= self.config.total_steps
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ts = TrainState {
            step: self.step,
            rng: self.rng.state(),
            optimizer_step: self.optimizer.step,
            history: self.history.clone(),
            last_eval_ppl: self.last_eval_ppl,
            stopped: self.stopped,
            train: self.config.clone(),
        };
        let mut extra: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in &self.optimizer.m {
            extra.push((format!("{MOMENT1}{n}"), t));
        }
        for (n, t) in &self.optimizer.v {
            extra.push((format!("{MOMENT2}{n}"), t));
        }
        checkpoint::save_model(path, &self.state, &extra, Some(&serde_json::to_value(ts)?))
    }

    /// One optimiser step over `grad_accum` micro-batches.
    pub fn train_step(&mut self) -> Result<HistoryRow> {
        let mut acc = GradAccumulator::default();
        let mut loss_sum = 0.0;
        for _ in 0..self.config.grad_accum {
            let batch: Vec<usize> =
                (0..self.config.batch_size).map(|_| self.rng.below(self.segments.len() as u64) as usize).collect();
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> =
                batch.par_iter().map(|&i| self.state.loss_and_grads(&self.segments[i])).collect();
            let mut micro = GradAccumulator::default();
            for r in results {
                let (loss, grads) = r?;
                loss_sum += loss;
                micro.add(&grads);
            }
            if let Some(mean) = micro.take_mean() {
                acc.add(&mean);
            }
        }
        let step = self.step + 1;
        let lr = lr_at(&self.config, step);
        if let Some(grads) = acc.take_mean() {
            self.optimizer.step(self.state.weights.named_mut(), &grads, lr, &self.config)?;
        }
        self.step = step;
        let row = HistoryRow { step, loss: loss_sum / (self.config.grad_accum * self.config.batch_size) as f64, lr };
        if !row.loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        self.history.push(row);
        Ok(row)
    }

    /// Perplexity over a fixed subset of segments.
    fn subset_ppl(&self, n: usize) -> Result<f64> {
        let n = n.min(self.segments.len());
        let losses: Vec<Result<f64>> = self.segments[..n].par_iter().map(|s| self.state.loss(s)).collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok((total / n as f64).exp())
    }

    fn check_early_stop(&mut self) -> Result<()> {
        let Some(es) = self.config.early_stop.clone() else { return Ok(()) };
        if self.step < es.baseline_steps || !(self.step - es.baseline_steps).is_multiple_of(es.eval_every) {
            return Ok(());
        }
        let ppl = self.subset_ppl(es.eval_samples)?;
        if let Some(prev) = self.last_eval_ppl {
            if (prev - ppl) / prev < es.min_improvement {
                self.stopped = true;
            }
        }
        self.last_eval_ppl = Some(ppl);
        Ok(())
    }

    /// Trains until `total_steps` or early stop, checkpointing into `checkpoint` when given.
    pub fn run(&mut self, checkpoint: Option<&Path>) -> Result<&[HistoryRow]> {
        self.run_until(self.config.total_steps, checkpoint)
    }

    /// Like [`Trainer::run`] but halts after `limit` total steps.
    pub fn run_until(&mut self, limit: usize, checkpoint: Option<&Path>) -> Result<&[HistoryRow]> {
        let limit = limit.min(self.config.total_steps);
        while self.step < limit && !self.stopped {
            self.train_step()?;
            self.check_early_stop()?;
            if let (Some(path), true) = (checkpoint, self.config.checkpoint_every > 0) {
                if self.step.is_multiple_of(self.config.checkpoint_every) {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(&self.history)
    }
}

/// Trains the registered families of `state` on `corpus` and returns the history.
pub fn fine_tune(
    state: ModelState,
    corpus: &Corpus,
    config: TrainConfig,
    checkpoint: Option<PathBuf>,
) -> Result<(ModelState, Vec<HistoryRow>)> {
    if corpus.is_empty() || corpus.total_tokens() == 0 {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut trainer = Trainer::new(state, corpus, config)?;
    trainer.run(checkpoint.as_deref())?;
    let history = trainer.history.clone();
    Ok((trainer.state, history))
}

/// Settings of the adapter rank-deficiency experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticConfig {
    /// Input width of the projection.
    pub d_model: usize,
    pub head_dim: usize,
    pub rank: usize,
    pub base: f64,
    /// Number of leading frequency pairs that carry a phase shift.
    pub shifted_pairs: Option<usize>,
    pub shift_range: (f64, f64),
    pub max_position: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            head_dim: 16,
            rank: 2,
            base: 10_000.0,
            shifted_pairs: None,
            shift_range: (0.02, 0.08),
            max_position: 32,
            train_samples: 1024,
            eval_samples: 256,
            steps: 600,
            lr: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticResult {
    pub seed: u64,
    pub baseline_mse: f64,
    pub mse_lora_only: f64,
    pub mse_lora_psc: f64,
}

pub fn diagnostic_csv(rows: &[DiagnosticResult]) -> String {
    let mut out = String::from("seed,baseline_mse,mse_lora_only,mse_lora_psc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.seed, r.baseline_mse, r.mse_lora_only, r.mse_lora_psc));
    }
    out
}

struct Sample {
    x: Vec<f64>,
    pos: usize,
    y: Vec<f64>,
}

struct Student {
    adapter: LoraAdapter,
    psc: Option<PscHeadWeights>,
}

impl Student {
    fn predict(&self, w: &Tensor, cache: &RotaryCache, s: &Sample) -> Result<Vec<f64>> {
        let mut z = vec![0.0; w.rows()];
        let mut ax = vec![0.0; self.adapter.rank()];
        lora_apply(w, Some(&self.adapter), &s.x, &mut z, &mut ax);
        cache.rotate(&mut z, s.pos)?;
        Ok(match &self.psc {
            Some(p) => calibrate_vec(p, &z).0,
            None => z,
        })
    }

    fn mse(&self, w: &Tensor, cache: &RotaryCache, set: &[Sample]) -> Result<f64> {
        let mut total = 0.0;
        for s in set {
            let y = self.predict(w, cache, s)?;
            total += y.iter().zip(&s.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
        }
        Ok(total / set.len() as f64)
    }

    fn grads(&self, w: &Tensor, cache: &RotaryCache, set: &[Sample]) -> Result<BTreeMap<String, Tensor>> {
        let d = w.rows();
        let mut ga = self.adapter.zeros_like();
        let mut gp = self.psc.as_ref().map(|p| PscHeadWeights::zeros(p.head_dim()));
        let scale = 2.0 / (d * set.len()) as f64;
        for s in set {
            let mut z = vec![0.0; d];
            let mut ax = vec![0.0; self.adapter.rank()];
            lora_apply(w, Some(&self.adapter), &s.x, &mut z, &mut ax);
            cache.rotate(&mut z, s.pos)?;
            let mut dz = vec![0.0; d];
            match (&self.psc, gp.as_mut()) {
                (Some(p), Some(g)) => {
                    let (out, trace) = calibrate_vec(p, &z);
                    let up: Vec<f64> = out.iter().zip(&s.y).map(|(a, b)| scale * (a - b)).collect();
                    calibrate_backward_vec(p, &z, &trace, &up, g, &mut dz);
                }
                _ => dz.iter_mut().zip(z.iter().zip(&s.y)).for_each(|(g, (a, b))| *g = scale * (a - b)),
            }
            cache.rotate_inverse(&mut dz, s.pos)?;
            let mut dx = vec![0.0; w.cols()];
            lora_backward_acc(w, Some(&self.adapter), &s.x, &ax, &dz, Some(&mut ga), None, &mut dx);
        }
        let mut out = BTreeMap::from([("a".to_string(), ga.a), ("b".to_string(), ga.b)]);
        if let Some(g) = gp {
            out.insert("w1".into(), g.w1);
            out.insert("w2".into(), g.w2);
        }
        Ok(out)
    }

    fn params(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("a".to_string(), &mut self.adapter.a), ("b".to_string(), &mut self.adapter.b)];
        if let Some(p) = &mut self.psc {
            v.push(("w1".into(), &mut p.w1));
            v.push(("w2".into(), &mut p.w2));
        }
        v
    }
}

/// Fits a rank-`r` adapter with and without a post-rotary calibration gate to
/// a teacher that rotates with the shifted frequencies of `spec`.
///
/// Teacher: `y = R(Θ*, m) W x`. Students: `R(Θ̂, m)(W + BA) x`, optionally
/// followed by `(1 + P(·)) ⊙ ·`. Both students share the same adapter
/// initialisation, data and optimiser settings.
pub fn rank_deficiency_diagnostic(cfg: &DiagnosticConfig, spec: &PhaseShiftSpec) -> Result<DiagnosticResult> {
    let dh = spec.head_dim();
    if dh != cfg.head_dim {
        return Err(Error::Config(format!("shift spec has head dim {dh}, config says {}", cfg.head_dim)));
    }
    crate::lora::check_rank(dh, cfg.d_model, cfg.rank)?;
    if cfg.train_samples == 0 || cfg.eval_samples == 0 || cfg.max_position == 0 {
        return Err(Error::Config("diagnostic needs samples and positions".into()));
    }
    let mut rng = SplitMix64::new(cfg.seed);
    let w = Tensor::uniform(&[dh, cfg.d_model], 1.0 / (cfg.d_model as f64).sqrt(), &mut rng);
    let hat = RotaryCache::new(&spec.theta_hat, cfg.max_position, spec.layout)?;
    let star = RotaryCache::new(&spec.theta_star, cfg.max_position, spec.layout)?;
    let draw = |n: usize, rng: &mut SplitMix64| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let x: Vec<f64> = (0..cfg.d_model).map(|_| rng.standard_normal()).collect();
                let pos = rng.below(cfg.max_position as u64) as usize;
                let mut y = vec![0.0; dh];
                crate::numerics::matvec(w.data(), dh, cfg.d_model, &x, &mut y);
                star.rotate(&mut y, pos)?;
                Ok(Sample { x, pos, y })
            })
            .collect()
    };
    let train = draw(cfg.train_samples, &mut rng)?;
    let eval = draw(cfg.eval_samples, &mut rng)?;
    let adapter = LoraAdapter::init(dh, cfg.d_model, cfg.rank, &mut rng)?;
    let gate = PscHeadWeights::init(dh, &mut rng);

    let tc = TrainConfig { lr: cfg.lr, warmup_steps: 0, total_steps: cfg.steps, ..TrainConfig::default() };
    let fit = |mut student: Student| -> Result<f64> {
        let mut opt = AdamW::new();
        for _ in 0..cfg.steps {
            let g = student.grads(&w, &hat, &train)?;
            opt.step(student.params(), &g, cfg.lr, &tc)?;
        }
        student.mse(&w, &hat, &eval)
    };
    let baseline = Student { adapter: adapter.clone(), psc: None }.mse(&w, &hat, &eval)?;
    let mse_lora_only = fit(Student { adapter: adapter.clone(), psc: None })?;
    let mse_lora_psc = fit(Student { adapter, psc: Some(gate) })?;
    Ok(DiagnosticResult { seed: cfg.seed, baseline_mse: baseline, mse_lora_only, mse_lora_psc })
}

/// The shift spec implied by `cfg`: base frequencies as `Θ̂`, the leading
/// `shifted_pairs` (default all) offset by draws from `shift_range`.
pub fn diagnostic_spec(cfg: &DiagnosticConfig) -> Result<PhaseShiftSpec> {
    let hat = crate::rope::frequencies(&crate::rope::FrequencySchedule::base(cfg.base, cfg.head_dim))?;
    let shifted = cfg.shifted_pairs.unwrap_or(cfg.head_dim / 2);
    let mut rng = SplitMix64::new(cfg.seed.wrapping_add(SPEC_STREAM));
    crate::phase::spec_with_shifted_pairs(&hat, shifted, 1, crate::rope::Layout::HalfBlocks, cfg.shift_range, &mut rng)
}

const SPEC_STREAM: u64 = 0x5348_4946_5453_5045;

/// [`rank_deficiency_diagnostic`] on [`diagnostic_spec`] for each seed.
pub fn diagnostic_sweep(cfg: &DiagnosticConfig, seeds: &[u64]) -> Result<Vec<DiagnosticResult>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let c = DiagnosticConfig { seed, ..cfg.clone() };
            rank_deficiency_diagnostic(&c, &diagnostic_spec(&c)?)
        })
        .collect()
}
