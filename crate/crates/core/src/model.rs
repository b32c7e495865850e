//! Toy decoder-only transformer with rotary attention, optional phase shift
//! calibration and LoRA, and a hand-written backward pass.
//!
//! Blocks are pre-norm (RMS normalisation) with causal multi-head attention
//! and a SiLU-gated MLP. Attention dataflow per layer:
//! project q, k, v → pre-calibration → rotary → post-calibration →
//! causal softmax attention (kv heads shared across query groups) → output
//! projection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{check_rank, lora_apply, lora_backward_acc, LoraAdapter, LoraTarget};
use crate::numerics::{
    log_sum_exp, matvec, matvec_t_acc, outer_acc, silu_grad_scalar, silu_scalar, softmax_in_place, SplitMix64, Tensor,
};
use crate::psc::{calibrate_backward_vec, calibrate_vec, GateTrace, Placement, PscModule};
use crate::rope::{frequencies, FrequencySchedule, Layout, RotaryCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    #[serde(default = "default_lora_targets")]
    pub targets: Vec<LoraTarget>,
    #[serde(default = "default_lora_scale")]
    pub scale: f64,
}

fn default_lora_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Q, LoraTarget::K]
}

fn default_lora_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub schedule: FrequencySchedule,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default)]
    pub psc: Option<Placement>,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.mlp_hidden == 0 {
            return bad("layers, d_model, mlp_hidden and vocab_size must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!("n_heads {} is not divisible by n_kv_heads {}", self.n_heads, self.n_kv_heads));
        }
        if self.max_context < 2 {
            return bad(format!("max_context must be ≥ 2, got {}", self.max_context));
        }
        if self.schedule.head_dim() != self.head_dim() {
            return bad(format!(
                "schedule head_dim {} differs from model head dim {}",
                self.schedule.head_dim(),
                self.head_dim()
            ));
        }
        self.schedule.validate()?;
        if let Some(l) = &self.lora {
            for t in &l.targets {
                let (d, k) = self.projection_shape(*t);
                check_rank(d, k, l.rank)?;
            }
        }
        Ok(())
    }

    /// `[out × in]` of a projection.
    pub fn projection_shape(&self, target: LoraTarget) -> (usize, usize) {
        let dh = self.head_dim();
        match target {
            LoraTarget::Q => (self.n_heads * dh, self.d_model),
            LoraTarget::K | LoraTarget::V => (self.n_kv_heads * dh, self.d_model),
            LoraTarget::O => (self.d_model, self.d_model),
        }
    }
}

/// Groups of parameters that can be trained or frozen together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamFamily {
    Embedding,
    Attention,
    Norm,
    Mlp,
    Head,
    Psc,
    Lora,
}

impl ParamFamily {
    pub const BASE: [ParamFamily; 5] =
        [ParamFamily::Embedding, ParamFamily::Attention, ParamFamily::Norm, ParamFamily::Mlp, ParamFamily::Head];

    pub fn of(name: &str) -> ParamFamily {
        if name.starts_with("psc.") {
            ParamFamily::Psc
        } else if name.starts_with("lora.") {
            ParamFamily::Lora
        } else if name == "embed" {
            ParamFamily::Embedding
        } else if name == "lm_head" {
            ParamFamily::Head
        } else if name.ends_with("norm") {
            ParamFamily::Norm
        } else if name.ends_with(".wq") || name.ends_with(".wk") || name.ends_with(".wv") || name.ends_with(".wo") {
            ParamFamily::Attention
        } else {
            ParamFamily::Mlp
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub psc: Option<PscModule>,
    pub lora: BTreeMap<LoraTarget, LoraAdapter>,
}

impl LayerWeights {
    fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            attn_norm: z(&self.attn_norm),
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            mlp_norm: z(&self.mlp_norm),
            w_gate: z(&self.w_gate),
            w_up: z(&self.w_up),
            w_down: z(&self.w_down),
            psc: self.psc.as_ref().map(PscModule::zeros_like),
            lora: self.lora.iter().map(|(k, v)| (*k, v.zeros_like())).collect(),
        }
    }
}

/// Every weight of the model; also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
}

impl ModelWeights {
    pub fn zeros_like(&self) -> Self {
        Self {
            embed: Tensor::zeros(self.embed.shape()),
            layers: self.layers.iter().map(LayerWeights::zeros_like).collect(),
            final_norm: Tensor::zeros(self.final_norm.shape()),
            lm_head: Tensor::zeros(self.lm_head.shape()),
        }
    }

    /// All tensors with their checkpoint names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embed".into(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &layer.attn_norm));
            out.push((format!("layer{l}.wq"), &layer.wq));
            out.push((format!("layer{l}.wk"), &layer.wk));
            out.push((format!("layer{l}.wv"), &layer.wv));
            out.push((format!("layer{l}.wo"), &layer.wo));
            out.push((format!("layer{l}.mlp_norm"), &layer.mlp_norm));
            out.push((format!("layer{l}.w_gate"), &layer.w_gate));
            out.push((format!("layer{l}.w_up"), &layer.w_up));
            out.push((format!("layer{l}.w_down"), &layer.w_down));
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(psc) = &layer.psc {
                for (kind, heads) in [("q", &psc.q_heads), ("k", &psc.k_heads)] {
                    for (h, w) in heads.iter().enumerate() {
                        out.push((format!("psc.layer{l}.{kind}.head{h}.w1"), &w.w1));
                        out.push((format!("psc.layer{l}.{kind}.head{h}.w2"), &w.w2));
                    }
                }
            }
            for (target, ad) in &layer.lora {
                out.push((format!("lora.layer{l}.{}.a", target.tag()), &ad.a));
                out.push((format!("lora.layer{l}.{}.b", target.tag()), &ad.b));
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Mutable counterpart of [`ModelWeights::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![("embed".into(), &mut self.embed)];
        let mut extras: Vec<(String, &mut Tensor)> = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.attn_norm"), &mut layer.attn_norm));
            out.push((format!("layer{l}.wq"), &mut layer.wq));
            out.push((format!("layer{l}.wk"), &mut layer.wk));
            out.push((format!("layer{l}.wv"), &mut layer.wv));
            out.push((format!("layer{l}.wo"), &mut layer.wo));
            out.push((format!("layer{l}.mlp_norm"), &mut layer.mlp_norm));
            out.push((format!("layer{l}.w_gate"), &mut layer.w_gate));
            out.push((format!("layer{l}.w_up"), &mut layer.w_up));
            out.push((format!("layer{l}.w_down"), &mut layer.w_down));
            if let Some(psc) = &mut layer.psc {
                for (kind, heads) in [("q", &mut psc.q_heads), ("k", &mut psc.k_heads)] {
                    for (h, w) in heads.iter_mut().enumerate() {
                        extras.push((format!("psc.layer{l}.{kind}.head{h}.w1"), &mut w.w1));
                        extras.push((format!("psc.layer{l}.{kind}.head{h}.w2"), &mut w.w2));
                    }
                }
            }
            for (target, ad) in &mut layer.lora {
                extras.push((format!("lora.layer{l}.{}.a", target.tag()), &mut ad.a));
                extras.push((format!("lora.layer{l}.{}.b", target.tag()), &mut ad.b));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("lm_head".into(), &mut self.lm_head));
        // keep psc/lora after the base tensors, grouped by layer as in `named`
        extras.sort_by_key(|(name, _)| extra_order(name));
        out.extend(extras);
        out
    }
}

fn extra_order(name: &str) -> (usize, u8) {
    let rest = name.split_once(".layer").map(|(_, r)| r).unwrap_or("");
    let layer = rest.split('.').next().and_then(|l| l.parse().ok()).unwrap_or(0);
    (layer, if name.starts_with("psc.") { 0 } else { 1 })
}

/// Weights, configuration, rotary tables and the set of trainable families.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    trainable: BTreeSet<ParamFamily>,
    rotary: RotaryCache,
}

/// Minimal interface the evaluation harnesses need.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;
    fn max_context(&self) -> usize;
    /// Logits `[tokens.len() × vocab]`; row `t` predicts token `t + 1`.
    fn logits(&self, tokens: &[u32]) -> Result<Tensor>;
}

const PSC_STREAM: u64 = 0x5053_435f_494e_4954;
const LORA_STREAM: u64 = 0x4c4f_5241_5f49_4e49;

impl ModelState {
    /// Seeded initialisation. Base, calibration and adapter weights come from
    /// separate streams so toggling PSC or LoRA never changes the base model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let (d, hid, v) = (config.d_model, config.mlp_hidden, config.vocab_size);
        let dh = config.head_dim();
        let lin = |rows: usize, cols: usize, rng: &mut SplitMix64| {
            Tensor::uniform(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
        };
        let embed = Tensor::normal(&[v, d], 1.0, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerWeights {
                attn_norm: Tensor::filled(&[d], 1.0),
                wq: lin(config.n_heads * dh, d, &mut rng),
                wk: lin(config.n_kv_heads * dh, d, &mut rng),
                wv: lin(config.n_kv_heads * dh, d, &mut rng),
                wo: lin(d, d, &mut rng),
                mlp_norm: Tensor::filled(&[d], 1.0),
                w_gate: lin(hid, d, &mut rng),
                w_up: lin(hid, d, &mut rng),
                w_down: lin(d, hid, &mut rng),
                psc: None,
                lora: BTreeMap::new(),
            });
        }
        let final_norm = Tensor::filled(&[d], 1.0);
        let lm_head = Tensor::normal(&[v, d], 1.0, &mut rng);

        let mut psc_rng = SplitMix64::new(seed ^ PSC_STREAM);
        let mut lora_rng = SplitMix64::new(seed ^ LORA_STREAM);
        for layer in &mut layers {
            if let Some(placement) = config.psc {
                layer.psc = Some(PscModule::init(config.n_heads, config.n_kv_heads, dh, placement, &mut psc_rng));
            }
            if let Some(lc) = &config.lora {
                for &t in &lc.targets {
                    let (rows, cols) = config.projection_shape(t);
                    let mut ad = LoraAdapter::init(rows, cols, lc.rank, &mut lora_rng)?;
                    ad.scale = lc.scale;
                    layer.lora.insert(t, ad);
                }
            }
        }
        let weights = ModelWeights { embed, layers, final_norm, lm_head };
        Self::from_weights(config, weights)
    }

    pub fn from_weights(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let freqs = frequencies(&config.schedule)?;
        let rotary = RotaryCache::new(&freqs, config.max_context, config.layout)?;
        let trainable = default_trainable(&config);
        Ok(Self { config, weights, trainable, rotary })
    }

    pub fn trainable(&self) -> &BTreeSet<ParamFamily> {
        &self.trainable
    }

    pub fn set_trainable(&mut self, families: impl IntoIterator<Item = ParamFamily>) {
        self.trainable = families.into_iter().collect();
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(&ParamFamily::of(name))
    }

    /// Names of every tensor currently registered for training.
    pub fn trainable_names(&self) -> Vec<String> {
        self.weights.named().into_iter().map(|(n, _)| n).filter(|n| self.is_trainable(n)).collect()
    }

    /// Swaps the frequency schedule (and rotary tables) in place.
    pub fn set_schedule(&mut self, schedule: FrequencySchedule) -> Result<()> {
        let mut config = self.config.clone();
        config.schedule = schedule;
        config.validate()?;
        let freqs = frequencies(&config.schedule)?;
        self.rotary = RotaryCache::new(&freqs, config.max_context, config.layout)?;
        self.config = config;
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::Context { len: tokens.len(), max: self.config.max_context });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Vocab { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Logits `[seq × vocab]`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let trace = self.run(tokens, false)?;
        Ok(trace.logits)
    }

    /// Mean next-token cross-entropy over `tokens[1..]`.
    pub fn loss(&self, tokens: &[u32]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Length("loss needs at least two tokens".into()));
        }
        let logits = self.forward(tokens)?;
        Ok(nll_sum(&logits, tokens) / (tokens.len() - 1) as f64)
    }

    /// Loss and gradients for every registered parameter (keyed by name).
    pub fn loss_and_grads(&self, tokens: &[u32]) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let (loss, full) = self.loss_and_full_grads(tokens)?;
        let grads =
            full.named().into_iter().filter(|(n, _)| self.is_trainable(n)).map(|(n, t)| (n, t.clone())).collect();
        Ok((loss, grads))
    }

    /// Gradients for every registered parameter.
    pub fn backward(&self, tokens: &[u32]) -> Result<BTreeMap<String, Tensor>> {
        Ok(self.loss_and_grads(tokens)?.1)
    }

    /// Loss and a full gradient container; frozen families hold zeros.
    pub fn loss_and_full_grads(&self, tokens: &[u32]) -> Result<(f64, ModelWeights)> {
        if tokens.len() < 2 {
            return Err(Error::Length("loss needs at least two tokens".into()));
        }
        self.check_tokens(tokens)?;
        let trace = self.run(tokens, true)?;
        let t_len = tokens.len();
        let vocab = self.config.vocab_size;
        let denom = (t_len - 1) as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t_len * vocab];
        for t in 0..t_len - 1 {
            let row = trace.logits.row(t);
            let target = tokens[t + 1] as usize;
            loss += log_sum_exp(row) - row[target];
            let drow = &mut dlogits[t * vocab..(t + 1) * vocab];
            drow.copy_from_slice(row);
            softmax_in_place(drow);
            drow[target] -= 1.0;
            drow.iter_mut().for_each(|g| *g /= denom);
        }
        let grads = self.backprop(tokens, &trace, &dlogits);
        Ok((loss / denom, grads))
    }

    /// Pre-rotary query vectors of one layer, `[seq·n_heads × d_h]`.
    pub fn query_embeddings(&self, tokens: &[u32], layer: usize) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        if layer >= self.config.layers {
            return Err(Error::Range(format!("layer {layer} of {}", self.config.layers)));
        }
        let trace = self.run(tokens, true)?;
        let dh = self.config.head_dim();
        let q = &trace.layers[layer].q_lin;
        Tensor::new(vec![q.len() / dh, dh], q.clone())
    }

    fn run(&self, tokens: &[u32], keep: bool) -> Result<ForwardTrace> {
        let cfg = &self.config;
        let (t_len, d, dh) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let (nh, nkv) = (cfg.n_heads, cfg.n_kv_heads);
        let group = nh / nkv;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = vec![0.0; t_len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            h[t * d..(t + 1) * d].copy_from_slice(self.weights.embed.row(tok as usize));
        }
        let mut layer_traces = Vec::new();
        for lw in &self.weights.layers {
            let h_in = h.clone();
            let (a, attn_rms) = rms_norm_rows(&h_in, d, &lw.attn_norm, cfg.norm_eps);
            let q_ad = lw.lora.get(&LoraTarget::Q);
            let k_ad = lw.lora.get(&LoraTarget::K);
            let v_ad = lw.lora.get(&LoraTarget::V);
            let o_ad = lw.lora.get(&LoraTarget::O);
            let (q_lin, q_ax) = project_rows(&lw.wq, q_ad, &a, t_len);
            let (k_lin, k_ax) = project_rows(&lw.wk, k_ad, &a, t_len);
            let (v, v_ax) = project_rows(&lw.wv, v_ad, &a, t_len);

            let placement = lw.psc.as_ref().map(|p| p.placement);
            let calib = |vecs: &[f64], heads: usize, which_q: bool, stage: Placement| -> (Vec<f64>, Vec<GateTrace>) {
                match (&lw.psc, placement) {
                    (Some(psc), Some(p)) if p == stage => {
                        let weights = if which_q { &psc.q_heads } else { &psc.k_heads };
                        let mut out = vec![0.0; vecs.len()];
                        let mut traces = Vec::with_capacity(vecs.len() / dh);
                        for (slot, (src, dst)) in vecs.chunks(dh).zip(out.chunks_mut(dh)).enumerate() {
                            let (o, tr) = calibrate_vec(&weights[slot % heads], src);
                            dst.copy_from_slice(&o);
                            traces.push(tr);
                        }
                        (out, traces)
                    }
                    _ => (vecs.to_vec(), Vec::new()),
                }
            };
            let (q_pre, q_pre_tr) = calib(&q_lin, nh, true, Placement::Pre);
            let (k_pre, k_pre_tr) = calib(&k_lin, nkv, false, Placement::Pre);
            let mut q_rot = q_pre.clone();
            let mut k_rot = k_pre.clone();
            for t in 0..t_len {
                for chunk in q_rot[t * nh * dh..(t + 1) * nh * dh].chunks_mut(dh) {
                    self.rotary.rotate(chunk, t)?;
                }
                for chunk in k_rot[t * nkv * dh..(t + 1) * nkv * dh].chunks_mut(dh) {
                    self.rotary.rotate(chunk, t)?;
                }
            }
            let (q_fin, q_post_tr) = calib(&q_rot, nh, true, Placement::Post);
            let (k_fin, k_post_tr) = calib(&k_rot, nkv, false, Placement::Post);

            // probs[h][t][u] for u ≤ t, stored as a dense [nh × T × T] block
            let mut probs = vec![0.0; nh * t_len * t_len];
            let mut o = vec![0.0; t_len * nh * dh];
            for head in 0..nh {
                let g = head / group;
                for t in 0..t_len {
                    let q = &q_fin[(t * nh + head) * dh..(t * nh + head + 1) * dh];
                    let row = &mut probs[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t + 1];
                    for (u, s) in row.iter_mut().enumerate() {
                        let k = &k_fin[(u * nkv + g) * dh..(u * nkv + g + 1) * dh];
                        *s = scale * dot(q, k);
                    }
                    softmax_in_place(row);
                    let out = &mut o[(t * nh + head) * dh..(t * nh + head + 1) * dh];
                    for (u, &p) in row.iter().enumerate() {
                        let vv = &v[(u * nkv + g) * dh..(u * nkv + g + 1) * dh];
                        for (ov, x) in out.iter_mut().zip(vv) {
                            *ov += p * x;
                        }
                    }
                }
            }
            let (attn_out, o_ax) = project_rows(&lw.wo, o_ad, &o, t_len);
            for (hv, av) in h.iter_mut().zip(&attn_out) {
                *hv += av;
            }
            let h_mid = h.clone();
            let (b, mlp_rms) = rms_norm_rows(&h_mid, d, &lw.mlp_norm, cfg.norm_eps);
            let hid = cfg.mlp_hidden;
            let (gate_pre, _) = project_rows(&lw.w_gate, None, &b, t_len);
            let (up, _) = project_rows(&lw.w_up, None, &b, t_len);
            let m: Vec<f64> = gate_pre.iter().zip(&up).map(|(&g, &u)| silu_scalar(g) * u).collect();
            let mut mlp_out = vec![0.0; t_len * d];
            for t in 0..t_len {
                matvec(lw.w_down.data(), d, hid, &m[t * hid..(t + 1) * hid], &mut mlp_out[t * d..(t + 1) * d]);
            }
            for (hv, mv) in h.iter_mut().zip(&mlp_out) {
                *hv += mv;
            }
            if keep {
                layer_traces.push(LayerTrace {
                    h_in,
                    a,
                    attn_rms,
                    q_lin,
                    q_ax,
                    k_lin,
                    k_ax,
                    v,
                    v_ax,
                    q_pre_tr,
                    k_pre_tr,
                    q_rot,
                    k_rot,
                    q_post_tr,
                    k_post_tr,
                    q_fin,
                    k_fin,
                    probs,
                    o,
                    o_ax,
                    h_mid,
                    b,
                    mlp_rms,
                    gate_pre,
                    up,
                    m,
                });
            }
        }
        let (f, final_rms) = rms_norm_rows(&h, d, &self.weights.final_norm, cfg.norm_eps);
        let vocab = cfg.vocab_size;
        let mut logits = vec![0.0; t_len * vocab];
        for t in 0..t_len {
            matvec(
                self.weights.lm_head.data(),
                vocab,
                d,
                &f[t * d..(t + 1) * d],
                &mut logits[t * vocab..(t + 1) * vocab],
            );
        }
        let logits = Tensor::new(vec![t_len, vocab], logits)
            .map_err(|e| Error::NonFinite(format!("forward pass produced non-finite logits ({e})")))?;
        Ok(ForwardTrace { layers: layer_traces, h_final: h, f, final_rms, logits })
    }

    fn backprop(&self, tokens: &[u32], trace: &ForwardTrace, dlogits: &[f64]) -> ModelWeights {
        let cfg = &self.config;
        let (t_len, d, dh) = (tokens.len(), cfg.d_model, cfg.head_dim());
        let (nh, nkv, hid, vocab) = (cfg.n_heads, cfg.n_kv_heads, cfg.mlp_hidden, cfg.vocab_size);
        let group = nh / nkv;
        let scale = 1.0 / (dh as f64).sqrt();
        let train = |f: ParamFamily| self.trainable.contains(&f);
        let mut g = self.weights.zeros_like();

        let mut df = vec![0.0; t_len * d];
        for t in 0..t_len {
            let drow = &dlogits[t * vocab..(t + 1) * vocab];
            matvec_t_acc(self.weights.lm_head.data(), vocab, d, drow, &mut df[t * d..(t + 1) * d]);
            if train(ParamFamily::Head) {
                outer_acc(drow, &trace.f[t * d..(t + 1) * d], g.lm_head.data_mut());
            }
        }
        let mut dh_res = vec![0.0; t_len * d];
        rms_norm_backward(
            &trace.h_final,
            &trace.final_rms,
            &self.weights.final_norm,
            &df,
            d,
            train(ParamFamily::Norm).then_some(&mut g.final_norm),
            &mut dh_res,
        );

        for (l, (lw, tr)) in self.weights.layers.iter().zip(&trace.layers).enumerate().rev() {
            let gl = &mut g.layers[l];
            // MLP branch; dh_res is the gradient at the block output
            let mut dm = vec![0.0; t_len * hid];
            for t in 0..t_len {
                let dout = &dh_res[t * d..(t + 1) * d];
                matvec_t_acc(lw.w_down.data(), d, hid, dout, &mut dm[t * hid..(t + 1) * hid]);
                if train(ParamFamily::Mlp) {
                    outer_acc(dout, &tr.m[t * hid..(t + 1) * hid], gl.w_down.data_mut());
                }
            }
            let mut db = vec![0.0; t_len * d];
            for t in 0..t_len {
                let mut dgate = vec![0.0; hid];
                let mut dup = vec![0.0; hid];
                for j in 0..hid {
                    let idx = t * hid + j;
                    dgate[j] = dm[idx] * tr.up[idx] * silu_grad_scalar(tr.gate_pre[idx]);
                    dup[j] = dm[idx] * silu_scalar(tr.gate_pre[idx]);
                }
                let dbt = &mut db[t * d..(t + 1) * d];
                matvec_t_acc(lw.w_gate.data(), hid, d, &dgate, dbt);
                matvec_t_acc(lw.w_up.data(), hid, d, &dup, dbt);
                if train(ParamFamily::Mlp) {
                    let bt = &tr.b[t * d..(t + 1) * d];
                    outer_acc(&dgate, bt, gl.w_gate.data_mut());
                    outer_acc(&dup, bt, gl.w_up.data_mut());
                }
            }
            let mut dh_mid = dh_res.clone();
            rms_norm_backward(
                &tr.h_mid,
                &tr.mlp_rms,
                &lw.mlp_norm,
                &db,
                d,
                train(ParamFamily::Norm).then_some(&mut gl.mlp_norm),
                &mut dh_mid,
            );

            // attention output projection
            let lora_on = train(ParamFamily::Lora);
            let attn_on = train(ParamFamily::Attention);
            let mut d_o = vec![0.0; t_len * nh * dh];
            {
                let o_ad = lw.lora.get(&LoraTarget::O);
                let mut o_grad = gl.lora.get_mut(&LoraTarget::O).filter(|_| lora_on);
                let r = o_ad.map_or(0, LoraAdapter::rank);
                for t in 0..t_len {
                    lora_backward_acc(
                        &lw.wo,
                        o_ad,
                        &tr.o[t * d..(t + 1) * d],
                        &tr.o_ax[t * r..(t + 1) * r],
                        &dh_mid[t * d..(t + 1) * d],
                        o_grad.as_deref_mut(),
                        attn_on.then_some(&mut gl.wo),
                        &mut d_o[t * d..(t + 1) * d],
                    );
                }
            }

            // softmax attention
            let mut dq_fin = vec![0.0; t_len * nh * dh];
            let mut dk_fin = vec![0.0; t_len * nkv * dh];
            let mut dv = vec![0.0; t_len * nkv * dh];
            for head in 0..nh {
                let gidx = head / group;
                for t in 0..t_len {
                    let p = &tr.probs[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t + 1];
                    let dout = &d_o[(t * nh + head) * dh..(t * nh + head + 1) * dh];
                    let mut dp = vec![0.0; t + 1];
                    for u in 0..=t {
                        let vv = &tr.v[(u * nkv + gidx) * dh..(u * nkv + gidx + 1) * dh];
                        dp[u] = dot(dout, vv);
                        let dvv = &mut dv[(u * nkv + gidx) * dh..(u * nkv + gidx + 1) * dh];
                        for (x, o) in dvv.iter_mut().zip(dout) {
                            *x += p[u] * o;
                        }
                    }
                    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let q = &tr.q_fin[(t * nh + head) * dh..(t * nh + head + 1) * dh];
                    for u in 0..=t {
                        let ds = p[u] * (dp[u] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k = &tr.k_fin[(u * nkv + gidx) * dh..(u * nkv + gidx + 1) * dh];
                        let dq = &mut dq_fin[(t * nh + head) * dh..(t * nh + head + 1) * dh];
                        for (x, kv) in dq.iter_mut().zip(k) {
                            *x += ds * kv;
                        }
                        let dk = &mut dk_fin[(u * nkv + gidx) * dh..(u * nkv + gidx + 1) * dh];
                        for (x, qv) in dk.iter_mut().zip(q) {
                            *x += ds * qv;
                        }
                    }
                }
            }

            // calibration and rotary, in reverse
            let psc_on = train(ParamFamily::Psc);
            let calib_back = |input: &[f64],
                              traces: &[GateTrace],
                              upstream: Vec<f64>,
                              heads: usize,
                              is_q: bool,
                              gl: &mut LayerWeights|
             -> Vec<f64> {
                if traces.is_empty() {
                    return upstream;
                }
                let psc = lw.psc.as_ref().expect("traces imply calibration");
                let weights = if is_q { &psc.q_heads } else { &psc.k_heads };
                let mut dx = vec![0.0; input.len()];
                let mut scratch = crate::psc::PscHeadWeights::zeros(dh);
                for (slot, ((src, up), gx)) in
                    input.chunks(dh).zip(upstream.chunks(dh)).zip(dx.chunks_mut(dh)).enumerate()
                {
                    let head = slot % heads;
                    if psc_on {
                        let gpsc = gl.psc.as_mut().expect("gradient mirrors weights");
                        let target = if is_q { &mut gpsc.q_heads[head] } else { &mut gpsc.k_heads[head] };
                        calibrate_backward_vec(&weights[head], src, &traces[slot], up, target, gx);
                    } else {
                        calibrate_backward_vec(&weights[head], src, &traces[slot], up, &mut scratch, gx);
                    }
                }
                dx
            };
            let mut dq_rot = calib_back(&tr.q_rot, &tr.q_post_tr, dq_fin, nh, true, gl);
            let mut dk_rot = calib_back(&tr.k_rot, &tr.k_post_tr, dk_fin, nkv, false, gl);
            for t in 0..t_len {
                for chunk in dq_rot[t * nh * dh..(t + 1) * nh * dh].chunks_mut(dh) {
                    self.rotary.rotate_inverse(chunk, t).expect("positions checked in forward");
                }
                for chunk in dk_rot[t * nkv * dh..(t + 1) * nkv * dh].chunks_mut(dh) {
                    self.rotary.rotate_inverse(chunk, t).expect("positions checked in forward");
                }
            }
            let dq_lin = calib_back(&tr.q_lin, &tr.q_pre_tr, dq_rot, nh, true, gl);
            let dk_lin = calib_back(&tr.k_lin, &tr.k_pre_tr, dk_rot, nkv, false, gl);

            // q, k, v projections
            let mut da = vec![0.0; t_len * d];
            for (target, w, x_ax, upstream) in [
                (LoraTarget::Q, &lw.wq, &tr.q_ax, &dq_lin),
                (LoraTarget::K, &lw.wk, &tr.k_ax, &dk_lin),
                (LoraTarget::V, &lw.wv, &tr.v_ax, &dv),
            ] {
                let ad = lw.lora.get(&target);
                let r = ad.map_or(0, LoraAdapter::rank);
                let out_dim = w.rows();
                let mut dw = match target {
                    LoraTarget::Q => Some(&mut gl.wq),
                    LoraTarget::K => Some(&mut gl.wk),
                    _ => Some(&mut gl.wv),
                }
                .filter(|_| attn_on);
                let mut ad_grad = gl.lora.get_mut(&target).filter(|_| lora_on);
                for t in 0..t_len {
                    lora_backward_acc(
                        w,
                        ad,
                        &tr.a[t * d..(t + 1) * d],
                        &x_ax[t * r..(t + 1) * r],
                        &upstream[t * out_dim..(t + 1) * out_dim],
                        ad_grad.as_deref_mut(),
                        dw.as_deref_mut(),
                        &mut da[t * d..(t + 1) * d],
                    );
                }
            }
            let mut dh_in = dh_mid.clone();
            rms_norm_backward(
                &tr.h_in,
                &tr.attn_rms,
                &lw.attn_norm,
                &da,
                d,
                train(ParamFamily::Norm).then_some(&mut gl.attn_norm),
                &mut dh_in,
            );
            dh_res = dh_in;
        }

        if train(ParamFamily::Embedding) {
            for (t, &tok) in tokens.iter().enumerate() {
                let row = &mut g.embed.data_mut()[tok as usize * d..(tok as usize + 1) * d];
                for (x, gv) in row.iter_mut().zip(&dh_res[t * d..(t + 1) * d]) {
                    *x += gv;
                }
            }
        }
        g
    }

    /// True when perturbing `tokens[p]` leaves every logit row before `p` unchanged (≤ 1e-12).
    pub fn causality_probe(&self, tokens: &[u32], p: usize) -> Result<bool> {
        if p >= tokens.len() {
            return Err(Error::Range(format!("probe position {p} beyond sequence of {}", tokens.len())));
        }
        let before = self.forward(tokens)?;
        let mut perturbed = tokens.to_vec();
        perturbed[p] = (perturbed[p] + 1) % self.config.vocab_size as u32;
        let after = self.forward(&perturbed)?;
        let vocab = self.config.vocab_size;
        Ok(before.data()[..p * vocab].iter().zip(&after.data()[..p * vocab]).all(|(a, b)| (a - b).abs() <= 1e-12))
    }

    /// Total number of scalar weights, optionally restricted to the registry.
    pub fn parameter_count(&self, trainable_only: bool) -> usize {
        self.weights
            .named()
            .into_iter()
            .filter(|(n, _)| !trainable_only || self.is_trainable(n))
            .map(|(_, t)| t.len())
            .sum()
    }
}

fn default_trainable(config: &ModelConfig) -> BTreeSet<ParamFamily> {
    let mut set = BTreeSet::new();
    if config.psc.is_some() {
        set.insert(ParamFamily::Psc);
    }
    if config.lora.is_some() {
        set.insert(ParamFamily::Lora);
    }
    if set.is_empty() {
        set.extend(ParamFamily::BASE);
    }
    set
}

impl LanguageModel for ModelState {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_context(&self) -> usize {
        self.config.max_context
    }

    fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        self.forward(tokens)
    }
}

/// `Σ_t −log softmax(logits_t)[tokens_{t+1}]` over `t < len − 1`.
pub fn nll_sum(logits: &Tensor, tokens: &[u32]) -> f64 {
    (0..tokens.len().saturating_sub(1))
        .map(|t| {
            let row = logits.row(t);
            log_sum_exp(row) - row[tokens[t + 1] as usize]
        })
        .sum()
}

struct LayerTrace {
    h_in: Vec<f64>,
    a: Vec<f64>,
    attn_rms: Vec<f64>,
    q_lin: Vec<f64>,
    q_ax: Vec<f64>,
    k_lin: Vec<f64>,
    k_ax: Vec<f64>,
    v: Vec<f64>,
    v_ax: Vec<f64>,
    q_pre_tr: Vec<GateTrace>,
    k_pre_tr: Vec<GateTrace>,
    q_rot: Vec<f64>,
    k_rot: Vec<f64>,
    q_post_tr: Vec<GateTrace>,
    k_post_tr: Vec<GateTrace>,
    q_fin: Vec<f64>,
    k_fin: Vec<f64>,
    probs: Vec<f64>,
    o: Vec<f64>,
    o_ax: Vec<f64>,
    h_mid: Vec<f64>,
    b: Vec<f64>,
    mlp_rms: Vec<f64>,
    gate_pre: Vec<f64>,
    up: Vec<f64>,
    m: Vec<f64>,
}

struct ForwardTrace {
    layers: Vec<LayerTrace>,
    h_final: Vec<f64>,
    f: Vec<f64>,
    final_rms: Vec<f64>,
    logits: Tensor,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise `g ⊙ x / rms(x)`; returns the output and each row's `1/rms`.
fn rms_norm_rows(x: &[f64], d: usize, gain: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / d);
    for (row, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + eps).sqrt();
        for ((o, v), g) in dst.iter_mut().zip(row).zip(gain.data()) {
            *o = g * v * r;
        }
        inv.push(r);
    }
    (out, inv)
}

/// Accumulates `∂/∂x` into `dx` and (optionally) `∂/∂gain`.
fn rms_norm_backward(
    x: &[f64],
    inv: &[f64],
    gain: &Tensor,
    dy: &[f64],
    d: usize,
    mut dgain: Option<&mut Tensor>,
    dx: &mut [f64],
) {
    for (t, ((row, dyr), dxr)) in x.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
        let r = inv[t];
        // n = x·r; dn = dy ⊙ g; dx = r·(dn − n·mean(dn ⊙ n))
        let mut dot_dn_n = 0.0;
        for j in 0..d {
            let n = row[j] * r;
            let dn = dyr[j] * gain.data()[j];
            dot_dn_n += dn * n;
            if let Some(dg) = dgain.as_deref_mut() {
                dg.data_mut()[j] += dyr[j] * n;
            }
        }
        let mean = dot_dn_n / d as f64;
        for j in 0..d {
            let n = row[j] * r;
            let dn = dyr[j] * gain.data()[j];
            dxr[j] += r * (dn - n * mean);
        }
    }
}

/// Projects every row of `x` through `W` (plus adapter); returns outputs and `A x` per row.
fn project_rows(w: &Tensor, adapter: Option<&LoraAdapter>, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let (out_dim, in_dim) = (w.rows(), w.cols());
    let r = adapter.map_or(0, LoraAdapter::rank);
    let mut out = vec![0.0; rows * out_dim];
    let mut ax = vec![0.0; rows * r];
    for t in 0..rows {
        lora_apply(
            w,
            adapter,
            &x[t * in_dim..(t + 1) * in_dim],
            &mut out[t * out_dim..(t + 1) * out_dim],
            &mut ax[t * r..(t + 1) * r],
        );
    }
    (out, ax)
}
