//! Runs every acceptance criterion and prints one PASS/FAIL line for each.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use psclab_core::commands;
use psclab_core::data::{synth_repeat_corpus, ByteTokenizer};
use psclab_core::eval::{
    make_passkey_prompt, passkey_eval, sliding_window_nll, window_ends, EchoOracle, PasskeyTask, RandomLogitModel,
    UniformModel,
};
use psclab_core::lora::{lora_backward, lora_forward, LoraAdapter, LoraTarget};
use psclab_core::model::LoraConfig;
use psclab_core::numerics::{finite_diff_grad, log_sum_exp, max_relative_error};
use psclab_core::phase::{shift_rank, spec_with_shifted_pairs, verify_composition, PhaseShiftSpec};
use psclab_core::psc::{self, gate_vec, Placement, PscHeadWeights};
use psclab_core::rope::{frequencies, relative_score};
use psclab_core::train::{diagnostic_sweep, DiagnosticConfig, TrainConfig, Trainer};
use psclab_core::{
    FrequencySchedule, LanguageModel, Layout, ModelConfig, ModelState, ParamFamily, RunConfig, SplitMix64, Tensor,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn rotary_relative_identity() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(101);
    let mut worst: f64 = 0.0;
    for d in [2, 8, 64] {
        let freqs = frequencies(&FrequencySchedule::base(10_000.0, d)).map_err(|e| e.to_string())?;
        let layout = if d == 8 { Layout::PairInterleaved } else { Layout::HalfBlocks };
        for _ in 0..100 {
            let xm = Tensor::uniform(&[d], 1.0, &mut rng);
            let xn = Tensor::uniform(&[d], 1.0, &mut rng);
            let bound = 1.0 / (d as f64).sqrt();
            let wq = Tensor::uniform(&[d, d], bound, &mut rng);
            let wk = Tensor::uniform(&[d, d], bound, &mut rng);
            let m = rng.below(2048) as usize;
            let n = rng.below(2048) as usize;
            let t = rng.below(2048) as usize;
            let a = relative_score(&xm, &xn, &wq, &wk, m, n, &freqs, layout).map_err(|e| e.to_string())?;
            let b = relative_score(&xm, &xn, &wq, &wk, m + t, n + t, &freqs, layout).map_err(|e| e.to_string())?;
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-10, format!("max |Δscore| = {worst:e}"))?;
    within(t0.elapsed(), 1.0)?;
    Ok(format!("300 cases, max |Δscore| = {worst:.2e}"))
}

fn composition_theorem() -> Outcome {
    let t0 = Instant::now();
    let mut rng = SplitMix64::new(202);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let d = 2 * (1 + rng.below(32) as usize);
        let star: Vec<f64> = (0..d / 2).map(|_| rng.uniform(1e-4, 1.0)).collect();
        let hat: Vec<f64> = (0..d / 2).map(|_| rng.uniform(1e-4, 1.0)).collect();
        let m = rng.below(4096) as usize;
        let layout = if case % 2 == 0 { Layout::HalfBlocks } else { Layout::PairInterleaved };
        let spec = PhaseShiftSpec::new(Tensor::vector(star).unwrap(), Tensor::vector(hat).unwrap(), m, layout)
            .map_err(|e| e.to_string())?;
        worst = worst.max(verify_composition(&spec).map_err(|e| e.to_string())?);
    }
    ensure(worst <= 1e-10, format!("max entry error {worst:e}"))?;
    within(t0.elapsed(), 1.0)?;
    Ok(format!("100 specs, max entry error {worst:.2e}"))
}

fn rank_claims() -> Outcome {
    let t0 = Instant::now();
    let mut checked = 0;
    for d in [4, 8, 128] {
        let hat = frequencies(&FrequencySchedule::base(10_000.0, d)).map_err(|e| e.to_string())?;
        for count in [0, 1, 2, d / 2] {
            for m in [1, 7, 1024] {
                let mut rng = SplitMix64::new((d * 10_000 + count * 100 + m) as u64);
                let spec = spec_with_shifted_pairs(&hat, count, m, Layout::HalfBlocks, (0.05, 0.5), &mut rng)
                    .map_err(|e| e.to_string())?;
                let rank = shift_rank(&spec, 1e-8).map_err(|e| e.to_string())?;
                ensure(rank == 2 * count, format!("d={d} shifted={count} m={m}: rank {rank}"))?;
                if count == d / 2 {
                    ensure(rank == d, format!("d={d} m={m}: all pairs shifted but rank {rank}"))?;
                }
                checked += 1;
            }
        }
    }
    within(t0.elapsed(), 5.0)?;
    Ok(format!("{checked} configurations, rank = 2·shifted everywhere"))
}

fn toy_config(psc: Option<Placement>, lora: Option<LoraConfig>) -> ModelConfig {
    let mut cfg = RunConfig::default().model_config().unwrap();
    cfg.psc = psc;
    cfg.lora = lora;
    cfg
}

fn all_targets(rank: usize) -> LoraConfig {
    LoraConfig { rank, targets: vec![LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O], scale: 1.0 }
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.below(vocab as u64) as u32).collect()
}

fn identity_at_init() -> Outcome {
    let base = ModelState::init(toy_config(None, None), 11).map_err(|e| e.to_string())?;
    let toks = random_tokens(128, 258, 12);
    let reference = base.forward(&toks).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for placement in [Placement::Pre, Placement::Post] {
        let full =
            ModelState::init(toy_config(Some(placement), Some(all_targets(4))), 11).map_err(|e| e.to_string())?;
        worst = worst.max(full.forward(&toks).unwrap().max_abs_diff(&reference).unwrap());
    }
    ensure(worst <= 1e-12, format!("max logit difference {worst:e}"))?;
    Ok(format!("pre and post placement, max logit difference {worst:.1e}"))
}

fn gate_bound() -> Outcome {
    let d = 4;
    let mut rng = SplitMix64::new(505);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut evaluations = 0usize;
    let mut weights = PscHeadWeights::init(d, &mut rng);
    for i in 0..1_000_000 {
        if i % 1000 == 0 {
            let scale = [0.1, 1.0, 10.0, 1e3][(i / 1000) % 4];
            weights = PscHeadWeights {
                w1: Tensor::uniform(&[d, d], scale, &mut rng),
                w2: Tensor::uniform(&[d, d], scale, &mut rng),
            };
        }
        let x: Vec<f64> = (0..d).map(|_| rng.uniform(-50.0, 50.0)).collect();
        for p in gate_vec(&weights, &x).gate {
            lo = lo.min(p);
            hi = hi.max(p);
        }
        evaluations += 1;
    }
    ensure(lo > -0.5 && hi < 0.5, format!("gate range [{lo}, {hi}]"))?;
    ensure(1.0 + lo > 0.5 && 1.0 + hi < 1.5, "multiplier left (0.5, 1.5)")?;
    Ok(format!("{evaluations} evaluations, gate in [{lo:.6}, {hi:.6}]"))
}

fn wake_adapters(state: &mut ModelState, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for (name, t) in state.weights.named_mut() {
        if name.starts_with("psc.") || name.starts_with("lora.") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.uniform(-0.5, 0.5));
        }
    }
}

const GRAD_FLOOR: f64 = 1e-3;

fn tiny_config(placement: Placement) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 1,
        mlp_hidden: 12,
        vocab_size: 11,
        max_context: 32,
        schedule: FrequencySchedule::base(10_000.0, 4),
        layout: Layout::HalfBlocks,
        psc: Some(placement),
        lora: Some(all_targets(2)),
        norm_eps: 1e-6,
    }
}

fn psc_grad_error(seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let (heads, seq, d) = (2, 3, 4);
    let ws: Vec<PscHeadWeights> = (0..heads)
        .map(|_| PscHeadWeights {
            w1: Tensor::uniform(&[d, d], 1.0, &mut rng),
            w2: Tensor::uniform(&[d, d], 1.0, &mut rng),
        })
        .collect();
    let x = Tensor::uniform(&[1, heads, seq, d], 1.0, &mut rng);
    let up = Tensor::uniform(&[1, heads, seq, d], 1.0, &mut rng);
    let objective = |ws: &[PscHeadWeights], x: &Tensor| -> f64 {
        psc::apply_pre(x, ws).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    let g = psc::backward(&x, &ws, &up).unwrap();
    let mut worst =
        max_relative_error(g.x.data(), finite_diff_grad(|t| objective(&ws, t), &x).unwrap().data(), GRAD_FLOOR);
    for h in 0..heads {
        for which in 0..2 {
            let base = if which == 0 { &ws[h].w1 } else { &ws[h].w2 };
            let numeric = finite_diff_grad(
                |t| {
                    let mut probe = ws.clone();
                    if which == 0 {
                        probe[h].w1 = t.clone();
                    } else {
                        probe[h].w2 = t.clone();
                    }
                    objective(&probe, &x)
                },
                base,
            )
            .unwrap();
            let analytic = if which == 0 { &g.heads[h].w1 } else { &g.heads[h].w2 };
            worst = worst.max(max_relative_error(analytic.data(), numeric.data(), GRAD_FLOOR));
        }
    }
    worst
}

fn lora_grad_error(seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let (d, k, r) = (6, 8, 3);
    let w = Tensor::uniform(&[d, k], 1.0, &mut rng);
    let adapter =
        LoraAdapter::new(Tensor::uniform(&[r, k], 1.0, &mut rng), Tensor::uniform(&[d, r], 1.0, &mut rng), 0.7)
            .unwrap();
    let x = Tensor::uniform(&[k], 1.0, &mut rng);
    let up = Tensor::uniform(&[d], 1.0, &mut rng);
    let objective = |ad: &LoraAdapter| -> f64 {
        lora_forward(&w, ad, &x).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
    };
    let g = lora_backward(&w, &adapter, &x, &up).unwrap();
    let na = finite_diff_grad(|t| objective(&LoraAdapter { a: t.clone(), ..adapter.clone() }), &adapter.a).unwrap();
    let nb = finite_diff_grad(|t| objective(&LoraAdapter { b: t.clone(), ..adapter.clone() }), &adapter.b).unwrap();
    max_relative_error(g.a.data(), na.data(), GRAD_FLOOR).max(max_relative_error(g.b.data(), nb.data(), GRAD_FLOOR))
}

fn model_grad_error(seed: u64) -> f64 {
    let placement = if seed.is_multiple_of(2) { Placement::Pre } else { Placement::Post };
    let mut m = ModelState::init(tiny_config(placement), seed).unwrap();
    wake_adapters(&mut m, seed + 1000);
    let mut families = ParamFamily::BASE.to_vec();
    families.extend([ParamFamily::Psc, ParamFamily::Lora]);
    m.set_trainable(families);
    let toks = random_tokens(6, 11, seed + 2000);
    let (_, analytic) = m.loss_and_grads(&toks).unwrap();
    let mut worst: f64 = 0.0;
    for (name, g) in &analytic {
        let x0 = m.weights.get(name).unwrap().clone();
        let numeric = finite_diff_grad(
            |t| {
                let mut probe = m.clone();
                *probe.weights.get_mut(name).unwrap() = t.clone();
                probe.loss(&toks).unwrap()
            },
            &x0,
        )
        .unwrap();
        worst = worst.max(max_relative_error(g.data(), numeric.data(), GRAD_FLOOR));
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let (mut p, mut l, mut f) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        p = p.max(psc_grad_error(seed));
        l = l.max(lora_grad_error(seed));
        f = f.max(model_grad_error(seed));
    }
    ensure(p < 1e-5 && l < 1e-5 && f < 1e-5, format!("max relative error psc {p:e}, lora {l:e}, model {f:e}"))?;
    within(t0.elapsed(), 30.0)?;
    Ok(format!("20 seeds, max relative error psc {p:.1e}, lora {l:.1e}, model {f:.1e}"))
}

fn parameter_accounting() -> Outcome {
    let extra = psc::param_count(32, 32, 32, 128);
    ensure(extra == 67_108_864, format!("count {extra}"))?;
    let fraction = extra as f64 / 6_738_415_616.0;
    ensure(fraction < 0.01, format!("fraction {fraction}"))?;
    ensure((fraction - 0.00996).abs() < 5e-5, format!("fraction {fraction}"))?;
    Ok(format!("{extra} extra parameters, {:.3}% of the base model", fraction * 100.0))
}

fn brute_force_nll(model: &dyn LanguageModel, toks: &[u32], window: usize, stride: usize) -> (f64, usize) {
    let ends = window_ends(toks.len(), window, stride);
    let mut nll = 0.0;
    for t in 1..toks.len() {
        let e = *ends.iter().find(|&&e| e >= t).unwrap();
        let ctx = &toks[e.saturating_sub(window)..t];
        let logits = model.logits(ctx).unwrap();
        let row = logits.row(ctx.len() - 1);
        nll += log_sum_exp(row) - row[toks[t] as usize];
    }
    (nll, toks.len() - 1)
}

fn perplexity_oracle() -> Outcome {
    let t0 = Instant::now();
    let uniform = UniformModel { vocab: 258, max_context: 256 };
    let toks = random_tokens(600, 258, 808);
    let ppl = sliding_window_nll(&uniform, &toks, 256, 64).map_err(|e| e.to_string())?.ppl();
    ensure((ppl - 258.0).abs() / 258.0 < 1e-9, format!("uniform ppl {ppl}"))?;

    let mut cfg = toy_config(None, None);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 2;
    cfg.mlp_hidden = 16;
    cfg.layers = 1;
    cfg.schedule = FrequencySchedule::base(10_000.0, 8);
    let model = ModelState::init(cfg, 809).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for stride in [256, 100, 1] {
        let fast = sliding_window_nll(&model, &toks, 256, stride).map_err(|e| e.to_string())?;
        let (slow_nll, slow_tokens) = brute_force_nll(&model, &toks, 256, stride);
        ensure(fast.tokens == slow_tokens, format!("stride {stride}: {} vs {slow_tokens} tokens", fast.tokens))?;
        let slow_ppl = (slow_nll / slow_tokens as f64).exp();
        worst = worst.max((fast.ppl() - slow_ppl).abs() / slow_ppl);
    }
    ensure(worst < 1e-10, format!("strided vs brute force relative gap {worst:e}"))?;
    within(t0.elapsed(), 10.0)?;
    Ok(format!("uniform ppl {ppl}, strided vs brute force gap {worst:.1e}"))
}

const GOLDEN_MINIMAL_PROMPT: &str = "There is an important info hidden inside a lot of irrelevant text.\n\
Find it and memorize them.I will quiz you about the important information there.\n\
\n\
\n\
The pass key is 4711. Remember it. 4711 is the pass key.\n\
\n\
\n\
What is the pass key? The pass key is";

const GOLDEN_FILLER: &str =
    "The grass is green. The sky is blue. The sun is yellow. Here we go.\nThere and back again.\n";

fn passkey_harness() -> Outcome {
    let minimal = make_passkey_prompt(&PasskeyTask { m: 0, n: 0, key: 4711 }).map_err(|e| e.to_string())?;
    ensure(minimal == GOLDEN_MINIMAL_PROMPT.as_bytes(), "minimal prompt differs from the template")?;
    let two = make_passkey_prompt(&PasskeyTask { m: 2, n: 1, key: 50_000 }).map_err(|e| e.to_string())?;
    let expected = format!(
        "There is an important info hidden inside a lot of irrelevant text.\n\
Find it and memorize them.I will quiz you about the important information there.\n\n{f}{f}\n\
The pass key is 50000. Remember it. 50000 is the pass key.\n\n{f}\nWhat is the pass key? The pass key is",
        f = GOLDEN_FILLER
    );
    ensure(two == expected.as_bytes(), "filled prompt differs from the template")?;

    let echo = EchoOracle { vocab: ByteTokenizer::VOCAB_SIZE, max_context: usize::MAX };
    let rows = passkey_eval(&echo, &[256, 1024, 4096], 20, 909).map_err(|e| e.to_string())?;
    ensure(rows.iter().all(|r| r.accuracy == 1.0), format!("echo accuracy {rows:?}"))?;
    let random = RandomLogitModel { vocab: ByteTokenizer::VOCAB_SIZE, max_context: 4096, seed: 910 };
    let rows_r = passkey_eval(&random, &[256, 1024], 20, 911).map_err(|e| e.to_string())?;
    let worst = rows_r.iter().map(|r| r.accuracy).fold(0.0, f64::max);
    ensure(worst < 0.05, format!("random model accuracy {worst}"))?;
    Ok(format!("prompts byte-exact, echo accuracy 1.0, random accuracy {worst}"))
}

fn rank_deficiency_diagnostic() -> Outcome {
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..10).collect();
    let rows = diagnostic_sweep(&DiagnosticConfig::default(), &seeds).map_err(|e| e.to_string())?;
    let wins = rows.iter().filter(|r| r.mse_lora_psc < r.mse_lora_only).count();
    let ratio: f64 = rows.iter().map(|r| r.mse_lora_psc / r.mse_lora_only).sum::<f64>() / rows.len() as f64;
    ensure(wins >= 8, format!("LoRA+PSC better in {wins}/10 seeds"))?;
    within(t0.elapsed(), 120.0)?;
    Ok(format!("LoRA+PSC better in {wins}/10 seeds, mean MSE ratio {ratio:.3}"))
}

const SMOKE_TEXT: &[u8] = b"The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again. ";

fn smoke_trainer(checkpoint_every: usize) -> (Trainer, ModelState, psclab_core::data::Corpus) {
    let state = ModelState::init(toy_config(Some(Placement::Pre), Some(all_targets(4))), 0).unwrap();
    let initial = state.clone();
    let corpus = synth_repeat_corpus(SMOKE_TEXT, 512, 0.0, 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        total_steps: 2000,
        seq_len: 64,
        batch_size: 2,
        grad_accum: 1,
        checkpoint_every,
        ..TrainConfig::default()
    };
    (Trainer::new(state, &corpus, cfg).unwrap(), initial, corpus)
}

fn fine_tune_smoke() -> Outcome {
    let (mut trainer, initial, corpus) = smoke_trainer(0);
    let mut reached = None;
    while trainer.step_count() < 2000 {
        trainer.run_until(trainer.step_count() + 20, None).map_err(|e| e.to_string())?;
        let h = trainer.history();
        let tail = &h[h.len() - 20..];
        let avg = tail.iter().map(|r| r.loss).sum::<f64>() / 20.0;
        if avg < 0.1 {
            reached = Some((trainer.step_count(), avg));
            break;
        }
    }
    let (steps, avg) = reached.ok_or_else(|| {
        let h = trainer.history();
        let avg = h[h.len() - 20..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
        format!("trailing loss {avg:.4} after 2000 steps")
    })?;

    let trained = trainer_state(&trainer)?;
    for (name, before) in initial.weights.named() {
        let fam = ParamFamily::of(&name);
        let after = trained.weights.get(&name).unwrap();
        if fam == ParamFamily::Psc || fam == ParamFamily::Lora {
            continue;
        }
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("frozen tensor {name} changed"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck = dir.path().join("smoke.bin");
    let (mut straight, _, _) = smoke_trainer(0);
    straight.run_until(120, None).map_err(|e| e.to_string())?;
    let (mut first, _, _) = smoke_trainer(0);
    first.run_until(60, Some(&ck)).map_err(|e| e.to_string())?;
    let mut resumed = Trainer::resume(&ck, &corpus).map_err(|e| e.to_string())?;
    resumed.run_until(120, None).map_err(|e| e.to_string())?;
    let bits = |t: &Trainer| t.history().iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    let (sb, rb) = (bits(&straight), bits(&resumed));
    let first_gap = sb.iter().zip(&rb).position(|(a, b)| a != b);
    ensure(
        sb == rb,
        format!("resumed loss trajectory differs from step {first_gap:?} ({} vs {} rows)", sb.len(), rb.len()),
    )?;
    let (a, b) = (trainer_state(&straight)?, trainer_state(&resumed)?);
    for ((name, x), (_, y)) in a.weights.named().into_iter().zip(b.weights.named()) {
        let same = x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        ensure(same, format!("resumed weights differ in {name}"))?;
    }
    Ok(format!("trailing-20 loss {avg:.4} at step {steps}; frozen weights unchanged; resume bitwise identical"))
}

fn trainer_state(trainer: &Trainer) -> Result<ModelState, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("state.bin");
    trainer.save(&path).map_err(|e| e.to_string())?;
    psclab_core::checkpoint::load_model(&path).map_err(|e| e.to_string())
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn same_as_golden(out: &Path, report: &str, golden: &str) -> Result<(), String> {
    let got = std::fs::read_to_string(out.join(report)).map_err(|e| e.to_string())?;
    let want = std::fs::read_to_string(fixtures().join("golden").join(golden)).map_err(|e| e.to_string())?;
    ensure(got == want, format!("{report} differs from golden {golden}"))
}

fn end_to_end_pipeline() -> Outcome {
    let t0 = Instant::now();
    let cfg = RunConfig::load(&fixtures().join("pipeline.json")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path();
    let trained = commands::train(&cfg, out, None, None).map_err(|e| e.to_string())?;
    commands::ppl(&cfg, &trained.checkpoint, out).map_err(|e| e.to_string())?;
    commands::passkey(&cfg, None, true, out).map_err(|e| e.to_string())?;
    commands::diagnostic(&cfg, out).map_err(|e| e.to_string())?;
    same_as_golden(out, commands::HISTORY_FILE, "history.csv")?;
    same_as_golden(out, commands::PPL_FILE, "ppl.csv")?;
    same_as_golden(out, commands::PASSKEY_FILE, "passkey_echo.csv")?;
    same_as_golden(out, commands::DIAGNOSTIC_FILE, "diagnostic.csv")?;
    commands::passkey(&cfg, Some(&trained.checkpoint), false, out).map_err(|e| e.to_string())?;
    within(t0.elapsed(), 300.0)?;
    Ok(format!("train → ppl → passkey → diagnostic matched goldens in {:.1}s", t0.elapsed().as_secs_f64()))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("rotary relative-position identity", rotary_relative_identity),
        ("composition of shift and rotation", composition_theorem),
        ("rank of the shift correction", rank_claims),
        ("calibration identity at init", identity_at_init),
        ("gate bound", gate_bound),
        ("gradient correctness", gradient_correctness),
        ("parameter accounting", parameter_accounting),
        ("sliding-window perplexity oracle", perplexity_oracle),
        ("passkey harness", passkey_harness),
        ("rank-deficiency diagnostic", rank_deficiency_diagnostic),
        ("fine-tune smoke", fine_tune_smoke),
        ("end-to-end pipeline", end_to_end_pipeline),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} [{secs:.2}s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL criterion {:>2} {name}: {why} [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
