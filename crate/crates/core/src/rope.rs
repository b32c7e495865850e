//! Rotary position embeddings and the context-extension frequency schedules.
//!
//! Every schedule produces `d/2` positive frequencies `θ_i`; coordinate pair
//! `i` of a query or key at position `m` is rotated by the angle `m·θ_i`.
//! Which coordinates form pair `i` depends on the [`Layout`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// How coordinates are grouped into rotation pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Pair `i` is `(2i, 2i+1)`.
    PairInterleaved,
    /// Pair `i` is `(i, i + d/2)`, the block-wise arrangement used by most checkpoints.
    #[default]
    HalfBlocks,
}

impl Layout {
    /// Coordinates of pair `i` in a vector of dimension `d`.
    #[inline]
    pub fn pair(self, d: usize, i: usize) -> (usize, usize) {
        match self {
            Layout::PairInterleaved => (2 * i, 2 * i + 1),
            Layout::HalfBlocks => (i, i + d / 2),
        }
    }

    /// Permutation `p` with `p[half_blocks_index] = self_index`.
    pub fn permutation_from_half_blocks(self, d: usize) -> Vec<usize> {
        let mut p = vec![0; d];
        for i in 0..d / 2 {
            let (a, b) = Layout::HalfBlocks.pair(d, i);
            let (x, y) = self.pair(d, i);
            p[a] = x;
            p[b] = y;
        }
        p
    }
}

/// Per-dimension blend ramp from the original YaRN construction.
///
/// `r_i = context·θ_i/(2π)` counts rotations of pair `i` over the trained
/// context; the blend is `0` below `alpha`, `1` above `beta`, linear between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct YarnRamp {
    pub alpha: f64,
    pub beta: f64,
    pub context: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrequencySchedule {
    /// `θ_i = b^(−2i/d)` for 0-based `i`.
    Base { base: f64, head_dim: usize },
    /// Position interpolation: `(L/L')·θ_i`.
    Pi { base: f64, head_dim: usize, context: usize, extended_context: usize },
    /// NTK-aware base change: `(b·s^(d/(d−2)))^(−2i/d)`.
    NtkAware { base: f64, head_dim: usize, scale: f64 },
    /// Blend `(1−γ)·θ_i/s + γ·θ_i`, optionally with a per-dimension γ ramp.
    Yarn {
        base: f64,
        head_dim: usize,
        scale: f64,
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ramp: Option<YarnRamp>,
    },
    /// Searched per-dimension factors: `θ_i / factor_i`.
    Custom { base: f64, head_dim: usize, factors: Vec<f64> },
}

impl FrequencySchedule {
    pub fn base(base: f64, head_dim: usize) -> Self {
        FrequencySchedule::Base { base, head_dim }
    }

    pub fn head_dim(&self) -> usize {
        match self {
            FrequencySchedule::Base { head_dim, .. }
            | FrequencySchedule::Pi { head_dim, .. }
            | FrequencySchedule::NtkAware { head_dim, .. }
            | FrequencySchedule::Yarn { head_dim, .. }
            | FrequencySchedule::Custom { head_dim, .. } => *head_dim,
        }
    }

    pub fn base_value(&self) -> f64 {
        match self {
            FrequencySchedule::Base { base, .. }
            | FrequencySchedule::Pi { base, .. }
            | FrequencySchedule::NtkAware { base, .. }
            | FrequencySchedule::Yarn { base, .. }
            | FrequencySchedule::Custom { base, .. } => *base,
        }
    }

    /// Same schedule with a different head dimension (used when the model
    /// section of a config fixes `d_h`).
    pub fn with_head_dim(&self, d: usize) -> Self {
        let mut s = self.clone();
        match &mut s {
            FrequencySchedule::Base { head_dim, .. }
            | FrequencySchedule::Pi { head_dim, .. }
            | FrequencySchedule::NtkAware { head_dim, .. }
            | FrequencySchedule::Yarn { head_dim, .. }
            | FrequencySchedule::Custom { head_dim, .. } => *head_dim = d,
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.head_dim();
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::Schedule(format!("head dimension must be even and ≥ 2, got {d}")));
        }
        let b = self.base_value();
        if !(b > 1.0) || !b.is_finite() {
            return Err(Error::Schedule(format!("base must exceed 1, got {b}")));
        }
        match self {
            FrequencySchedule::Base { .. } => {}
            FrequencySchedule::Pi { context, extended_context, .. } => {
                if *context < 1 || extended_context < context {
                    return Err(Error::Schedule(format!(
                        "need extended_context ≥ context ≥ 1, got {extended_context} and {context}"
                    )));
                }
            }
            FrequencySchedule::NtkAware { scale, .. } => {
                check_scale(*scale)?;
                if d < 4 {
                    return Err(Error::Schedule("NTK-aware scaling needs head_dim ≥ 4".into()));
                }
            }
            FrequencySchedule::Yarn { scale, gamma, ramp, .. } => {
                check_scale(*scale)?;
                if !(0.0..=1.0).contains(gamma) {
                    return Err(Error::Schedule(format!("gamma must lie in [0, 1], got {gamma}")));
                }
                if let Some(r) = ramp {
                    if !(r.beta > r.alpha) || r.context == 0 {
                        return Err(Error::Schedule(format!("ramp needs beta > alpha and context ≥ 1, got {r:?}")));
                    }
                }
            }
            FrequencySchedule::Custom { factors, .. } => {
                if factors.len() != d / 2 {
                    return Err(Error::Schedule(format!("expected {} factors, got {}", d / 2, factors.len())));
                }
                if let Some(f) = factors.iter().find(|f| !(**f > 0.0) || !f.is_finite()) {
                    return Err(Error::Schedule(format!("factors must be positive, got {f}")));
                }
            }
        }
        Ok(())
    }
}

fn check_scale(s: f64) -> Result<()> {
    if !(s >= 1.0) || !s.is_finite() {
        return Err(Error::Schedule(format!("scale factor must be ≥ 1, got {s}")));
    }
    Ok(())
}

fn base_thetas(base: f64, d: usize) -> Vec<f64> {
    (0..d / 2).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect()
}

/// Per-pair frequencies for a schedule.
pub fn frequencies(schedule: &FrequencySchedule) -> Result<Tensor> {
    schedule.validate()?;
    let d = schedule.head_dim();
    let thetas = match schedule {
        FrequencySchedule::Base { base, .. } => base_thetas(*base, d),
        FrequencySchedule::Pi { base, context, extended_context, .. } => {
            let ratio = *context as f64 / *extended_context as f64;
            base_thetas(*base, d).into_iter().map(|t| ratio * t).collect()
        }
        FrequencySchedule::NtkAware { base, scale, .. } => {
            let adjusted = base * scale.powf(d as f64 / (d as f64 - 2.0));
            base_thetas(adjusted, d)
        }
        FrequencySchedule::Yarn { base, scale, gamma, ramp, .. } => base_thetas(*base, d)
            .into_iter()
            .map(|t| {
                let g = match ramp {
                    Some(r) => yarn_ramp_gamma(r, t),
                    None => *gamma,
                };
                (1.0 - g) * t / scale + g * t
            })
            .collect(),
        FrequencySchedule::Custom { base, factors, .. } => {
            base_thetas(*base, d).into_iter().zip(factors).map(|(t, f)| t / f).collect()
        }
    };
    Tensor::vector(thetas)
}

fn yarn_ramp_gamma(ramp: &YarnRamp, theta: f64) -> f64 {
    let rotations = ramp.context as f64 * theta / (2.0 * std::f64::consts::PI);
    ((rotations - ramp.alpha) / (ramp.beta - ramp.alpha)).clamp(0.0, 1.0)
}

/// CSV with header `i,theta`, one row per pair (0-based `i`).
pub fn schedule_csv(freqs: &Tensor) -> String {
    let mut out = String::from("i,theta\n");
    for (i, t) in freqs.data().iter().enumerate() {
        out.push_str(&format!("{i},{t}\n"));
    }
    out
}

/// Precomputed `cos(m·θ_i)`, `sin(m·θ_i)` for positions `0..max_pos`.
#[derive(Clone, Debug)]
pub struct RotaryCache {
    cos: Tensor,
    sin: Tensor,
    freqs: Tensor,
    layout: Layout,
}

impl RotaryCache {
    pub fn new(freqs: &Tensor, max_pos: usize, layout: Layout) -> Result<Self> {
        if max_pos == 0 {
            return Err(Error::Range("rotary cache needs max_pos ≥ 1".into()));
        }
        if freqs.shape().len() != 1 || freqs.is_empty() {
            return Err(Error::Dimension(format!("frequencies must be a vector, got {:?}", freqs.shape())));
        }
        let half = freqs.len();
        let mut cos = Tensor::zeros(&[max_pos, half]);
        let mut sin = Tensor::zeros(&[max_pos, half]);
        for m in 0..max_pos {
            for (i, &theta) in freqs.data().iter().enumerate() {
                let angle = m as f64 * theta;
                cos.set2(m, i, angle.cos());
                sin.set2(m, i, angle.sin());
            }
        }
        Ok(Self { cos, sin, freqs: freqs.clone(), layout })
    }

    pub fn cos_table(&self) -> &Tensor {
        &self.cos
    }

    pub fn sin_table(&self) -> &Tensor {
        &self.sin
    }

    pub fn frequencies(&self) -> &Tensor {
        &self.freqs
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn max_pos(&self) -> usize {
        self.cos.rows()
    }

    pub fn head_dim(&self) -> usize {
        2 * self.freqs.len()
    }

    fn check_pos(&self, pos: usize) -> Result<()> {
        if pos >= self.max_pos() {
            return Err(Error::Range(format!("position {pos} outside rotary cache of {} positions", self.max_pos())));
        }
        Ok(())
    }

    /// Rotates one head vector in place by `pos·θ`.
    pub fn rotate(&self, x: &mut [f64], pos: usize) -> Result<()> {
        self.check_pos(pos)?;
        self.rotate_signed(x, pos, 1.0);
        Ok(())
    }

    /// Applies the inverse rotation (the transpose), used by backward passes.
    pub fn rotate_inverse(&self, x: &mut [f64], pos: usize) -> Result<()> {
        self.check_pos(pos)?;
        self.rotate_signed(x, pos, -1.0);
        Ok(())
    }

    fn rotate_signed(&self, x: &mut [f64], pos: usize, sign: f64) {
        let d = self.head_dim();
        let cos = self.cos.row(pos);
        let sin = self.sin.row(pos);
        for i in 0..d / 2 {
            let (a, b) = self.layout.pair(d, i);
            let (c, s) = (cos[i], sign * sin[i]);
            let (xa, xb) = (x[a], x[b]);
            x[a] = c * xa - s * xb;
            x[b] = s * xa + c * xb;
        }
    }
}

/// Rotates a `[batch × heads × seq × d_h]` tensor; `positions[s]` is the
/// position of sequence slot `s`.
pub fn apply_rotary(x: &Tensor, positions: &[usize], cache: &RotaryCache) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!("expected [batch, heads, seq, d_h], got {shape:?}")));
    }
    let (seq, d) = (shape[2], shape[3]);
    if d != cache.head_dim() {
        return Err(Error::Dimension(format!("head dim {d} does not match cache head dim {}", cache.head_dim())));
    }
    if positions.len() != seq {
        return Err(Error::Dimension(format!("{} positions for sequence of {seq}", positions.len())));
    }
    let mut out = x.clone();
    for (slot, vec) in out.data_mut().chunks_mut(d).enumerate() {
        cache.rotate(vec, positions[slot % seq])?;
    }
    Ok(out)
}

/// Dense `R^d_{Θ,m}`: block-diagonal rotation by `m·θ_i` placed per layout.
pub fn rotary_matrix(freqs: &[f64], m: f64, layout: Layout) -> Tensor {
    let d = 2 * freqs.len();
    let mut r = Tensor::zeros(&[d, d]);
    for (i, &theta) in freqs.iter().enumerate() {
        let (a, b) = layout.pair(d, i);
        let (s, c) = (m * theta).sin_cos();
        r.set2(a, a, c);
        r.set2(a, b, -s);
        r.set2(b, a, s);
        r.set2(b, b, c);
    }
    r
}

/// `⟨R_m W_q x_m, R_n W_k x_n⟩` with `W` stored `[d × d]` acting on column vectors.
#[allow(clippy::too_many_arguments)]
pub fn relative_score(
    xm: &Tensor,
    xn: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    m: usize,
    n: usize,
    freqs: &Tensor,
    layout: Layout,
) -> Result<f64> {
    let d = xm.len();
    if xn.len() != d || wq.shape() != [d, d] || wk.shape() != [d, d] || freqs.len() * 2 != d {
        return Err(Error::Dimension(format!(
            "relative_score shapes disagree: x {d}, W {:?}/{:?}, {} frequencies",
            wq.shape(),
            wk.shape(),
            freqs.len()
        )));
    }
    let rotate = |w: &Tensor, x: &Tensor, pos: usize| {
        let mut v = vec![0.0; d];
        crate::numerics::matvec(w.data(), d, d, x.data(), &mut v);
        for (i, &theta) in freqs.data().iter().enumerate() {
            let (a, b) = layout.pair(d, i);
            let (s, c) = (pos as f64 * theta).sin_cos();
            let (va, vb) = (v[a], v[b]);
            v[a] = c * va - s * vb;
            v[b] = s * va + c * vb;
        }
        v
    };
    let q = rotate(wq, xm, m);
    let k = rotate(wk, xn, n);
    Ok(q.iter().zip(&k).map(|(a, b)| a * b).sum())
}
