//! Experiment commands: each reads a [`RunConfig`] plus input files and
//! writes CSV reports (and checkpoints) into an output directory.

use std::path::{Path, PathBuf};

use crate::checkpoint::{self, write_atomic};
use crate::config::RunConfig;
use crate::data::{load_corpus, synth_repeat_corpus, Corpus};
use crate::error::{Error, Result};
use crate::eval::{passkey_csv, passkey_eval, ppl_sweep, EchoOracle, ReportMeta};
use crate::model::{LanguageModel, ModelState};
use crate::phase::{phase_norm_distribution, rank_sweep, rank_sweep_csv};
use crate::rope::{frequencies, schedule_csv, FrequencySchedule};
use crate::train::{diagnostic_csv, diagnostic_sweep, history_csv, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const PPL_FILE: &str = "ppl.csv";
pub const PASSKEY_FILE: &str = "passkey.csv";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.csv";
pub const RANK_FILE: &str = "rank.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const DIST_FILE: &str = "dist.csv";
pub const DIST_HIST_FILE: &str = "dist_hist.csv";

/// Atomically writes `contents` to `dir/name`.
pub fn write_report(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes())?;
    Ok(path)
}

/// `(i, theta)` rows of the configured schedule.
pub fn schedule_dump(cfg: &RunConfig) -> Result<String> {
    Ok(schedule_csv(&frequencies(&cfg.schedule)?))
}

/// Shift-matrix rank for every shifted-pair count at each configured position.
pub fn rank_report(cfg: &RunConfig) -> Result<String> {
    let a = &cfg.analysis;
    let hat = frequencies(&FrequencySchedule::base(cfg.schedule.base_value(), a.rank_head_dim))?;
    let rows = rank_sweep(&hat, &a.rank_positions, cfg.model.layout, a.shift_range, a.rank_tol, cfg.seed)?;
    Ok(rank_sweep_csv(&rows))
}

fn training_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let d = &cfg.data;
    let mut corpus = match (&d.train_dir, &d.synthetic) {
        (Some(dir), _) => load_corpus(dir, d.min_len, cfg.seed)?,
        (None, Some(s)) => synth_repeat_corpus(s.pattern.as_bytes(), s.total_len, s.noise_rate, cfg.seed)?,
        (None, None) => return Err(Error::Config("data.train_dir or data.synthetic is required".into())),
    };
    if let Some(n) = d.max_documents {
        corpus.truncate(n);
    }
    Ok(corpus)
}

fn eval_corpus(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data.eval_dir {
        Some(dir) => {
            let mut c = load_corpus(dir, cfg.data.min_len, cfg.seed)?;
            if let Some(n) = cfg.data.max_documents {
                c.truncate(n);
            }
            Ok(c)
        }
        None => training_corpus(cfg),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub steps: usize,
    pub final_loss: f64,
}

/// Trains (or resumes) and writes the checkpoint and loss history.
/// `stop_after` halts once that many total steps are done.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<TrainOutcome> {
    let corpus = training_corpus(cfg)?;
    let ck = out.join(CHECKPOINT_FILE);
    let mut trainer = match resume {
        Some(path) => Trainer::resume(path, &corpus)?,
        None => Trainer::new(ModelState::init(cfg.model_config()?, cfg.seed)?, &corpus, cfg.train.clone())?,
    };
    trainer.run_until(stop_after.unwrap_or(usize::MAX), Some(&ck))?;
    let history = write_report(out, HISTORY_FILE, &history_csv(trainer.history()))?;
    Ok(TrainOutcome {
        checkpoint: ck,
        history,
        steps: trainer.step_count(),
        final_loss: trainer.history().last().map_or(f64::NAN, |r| r.loss),
    })
}

fn load_checkpoint(path: &Path) -> Result<ModelState> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load_model(path)
}

fn meta(state: &ModelState) -> ReportMeta {
    let schedule = serde_json::to_value(&state.config.schedule)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
        .unwrap_or_default();
    ReportMeta {
        schedule,
        psc: state.config.psc.is_some(),
        lora_rank: state.config.lora.as_ref().map_or(0, |l| l.rank),
    }
}

/// Sliding-window perplexity for every configured `(window, eval_length)`.
pub fn ppl(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let state = load_checkpoint(checkpoint)?;
    let corpus = eval_corpus(cfg)?;
    let e = &cfg.eval;
    let report = ppl_sweep(&state, &corpus.documents, &e.windows, &e.eval_lengths, e.stride, meta(&state))?;
    write_report(out, PPL_FILE, &report.to_csv())
}

/// Passkey accuracy per configured length, from a checkpoint or the echo oracle.
pub fn passkey(cfg: &RunConfig, checkpoint: Option<&Path>, echo_oracle: bool, out: &Path) -> Result<PathBuf> {
    let e = &cfg.eval;
    let rows = if echo_oracle {
        let oracle = EchoOracle { vocab: cfg.model.vocab_size, max_context: usize::MAX };
        passkey_eval(&oracle, &e.passkey_lengths, e.passkey_trials, cfg.seed)?
    } else {
        let path = checkpoint.ok_or_else(|| Error::Config("passkey needs --checkpoint or --echo-oracle".into()))?;
        let state = load_checkpoint(path)?;
        passkey_eval(&state as &dyn LanguageModel, &e.passkey_lengths, e.passkey_trials, cfg.seed)?
    };
    write_report(out, PASSKEY_FILE, &passkey_csv(&rows))
}

/// LoRA-only vs LoRA+PSC fits of the shifted-rotation teacher, one row per seed.
pub fn diagnostic(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let a = &cfg.analysis;
    let rows = diagnostic_sweep(&a.diagnostic, &a.diagnostic_seeds)?;
    write_report(out, DIAGNOSTIC_FILE, &diagnostic_csv(&rows))
}

/// Phase and norm distribution of pre-rotary queries of one layer.
pub fn dist(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let state = load_checkpoint(checkpoint)?;
    let corpus = eval_corpus(cfg)?;
    let doc = corpus.documents.first().ok_or_else(|| Error::Data("evaluation corpus is empty".into()))?;
    let tokens = &doc[..doc.len().min(state.config.max_context)];
    let queries = state.query_embeddings(tokens, cfg.analysis.dist_layer)?;
    let stats = phase_norm_distribution(&queries, state.config.layout, cfg.analysis.dist_bins)?;
    Ok((write_report(out, DIST_FILE, &stats.to_csv())?, write_report(out, DIST_HIST_FILE, &stats.histogram_csv())?))
}
