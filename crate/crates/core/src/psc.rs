//! Phase shift calibration: a per-head two-layer gate
//! `P(x) = ½·tanh(W2 · silu(W1 · x))` applied multiplicatively as
//! `(1 + P(x)) ⊙ x` to queries and keys.
//!
//! Weights are stored the way the batched einsum reads them: `w1[d][r]`
//! maps input coordinate `d` to hidden unit `r` (`'bnsd,ndr->bnsr'`) and
//! `w2[r][d]` maps back (`'bnsr,nrd->bnsd'`). Stacking the per-head blocks
//! along the diagonal gives the block-diagonal matrices of the full layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{half_tanh_open, silu_grad_scalar, silu_scalar, SplitMix64, Tensor};

/// Where calibration sits relative to the rotary transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `rotary((1 + P(x)) ⊙ x)`
    #[default]
    Pre,
    /// `(1 + P(f)) ⊙ f` with `f = rotary(x)`
    Post,
}

/// One head's gate weights, both `[d_h × d_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PscHeadWeights {
    pub w1: Tensor,
    pub w2: Tensor,
}

impl PscHeadWeights {
    /// `w1 ~ U(−1/√d_h, 1/√d_h)`, `w2 = 0`, which makes the gate exactly zero.
    pub fn init(d_h: usize, rng: &mut SplitMix64) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        Self { w1: Tensor::uniform(&[d_h, d_h], bound, rng), w2: Tensor::zeros(&[d_h, d_h]) }
    }

    pub fn zeros(d_h: usize) -> Self {
        Self { w1: Tensor::zeros(&[d_h, d_h]), w2: Tensor::zeros(&[d_h, d_h]) }
    }

    pub fn head_dim(&self) -> usize {
        self.w1.rows()
    }

    fn check(&self, d: usize) -> Result<()> {
        if self.w1.shape() != [d, d] || self.w2.shape() != [d, d] {
            return Err(Error::Config(format!(
                "gate weights {:?}/{:?} do not match head dim {d}",
                self.w1.shape(),
                self.w2.shape()
            )));
        }
        Ok(())
    }
}

/// Intermediate values of one gate evaluation.
#[derive(Clone, Debug)]
pub struct GateTrace {
    pre_act: Vec<f64>,
    hidden: Vec<f64>,
    /// `P(x)`.
    pub gate: Vec<f64>,
}

/// Evaluates `P(x)` for a single head vector.
pub fn gate_vec(w: &PscHeadWeights, x: &[f64]) -> GateTrace {
    let d = x.len();
    let (w1, w2) = (w.w1.data(), w.w2.data());
    let mut pre_act = vec![0.0; d];
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w1[i * d..(i + 1) * d];
        for (h, wv) in pre_act.iter_mut().zip(row) {
            *h += xi * wv;
        }
    }
    let hidden: Vec<f64> = pre_act.iter().map(|&h| silu_scalar(h)).collect();
    let mut z = vec![0.0; d];
    for (r, &a) in hidden.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &w2[r * d..(r + 1) * d];
        for (zj, wv) in z.iter_mut().zip(row) {
            *zj += a * wv;
        }
    }
    let gate = z.into_iter().map(half_tanh_open).collect();
    GateTrace { pre_act, hidden, gate }
}

/// `(1 + P(x)) ⊙ x` for a single head vector, with its trace.
pub fn calibrate_vec(w: &PscHeadWeights, x: &[f64]) -> (Vec<f64>, GateTrace) {
    let trace = gate_vec(w, x);
    let out = x.iter().zip(&trace.gate).map(|(xi, p)| xi * (1.0 + p)).collect();
    (out, trace)
}

/// Backward of [`calibrate_vec`]: accumulates into `grads` and `dx`.
pub fn calibrate_backward_vec(
    w: &PscHeadWeights,
    x: &[f64],
    trace: &GateTrace,
    upstream: &[f64],
    grads: &mut PscHeadWeights,
    dx: &mut [f64],
) {
    let d = x.len();
    let (w1, w2) = (w.w1.data(), w.w2.data());
    // out_j = x_j (1 + p_j)
    let mut dz = vec![0.0; d];
    for j in 0..d {
        dx[j] += upstream[j] * (1.0 + trace.gate[j]);
        let dp = upstream[j] * x[j];
        // p = ½tanh(z) ⇒ dp/dz = ½(1 − tanh²z) = ½ − 2p²
        dz[j] = dp * (0.5 - 2.0 * trace.gate[j] * trace.gate[j]);
    }
    let gw2 = grads.w2.data_mut();
    let mut dh = vec![0.0; d];
    for r in 0..d {
        let a = trace.hidden[r];
        let row = &w2[r * d..(r + 1) * d];
        let grow = &mut gw2[r * d..(r + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            grow[j] += a * dz[j];
            acc += row[j] * dz[j];
        }
        dh[r] = acc * silu_grad_scalar(trace.pre_act[r]);
    }
    let gw1 = grads.w1.data_mut();
    for i in 0..d {
        let row = &w1[i * d..(i + 1) * d];
        let grow = &mut gw1[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for r in 0..d {
            grow[r] += x[i] * dh[r];
            acc += row[r] * dh[r];
        }
        dx[i] += acc;
    }
}

fn check_heads(x: &Tensor, heads: &[PscHeadWeights]) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("expected [batch, heads, seq, d_h], got {s:?}")));
    }
    if s[1] != heads.len() {
        return Err(Error::Config(format!(
            "tensor has {} heads but {} gate weight blocks were given",
            s[1],
            heads.len()
        )));
    }
    for h in heads {
        h.check(s[3])?;
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// `P(x)` over a `[batch × heads × seq × d_h]` tensor.
pub fn gate(x: &Tensor, heads: &[PscHeadWeights]) -> Result<Tensor> {
    let (_, n_heads, seq, d) = check_heads(x, heads)?;
    let mut out = Tensor::zeros(x.shape());
    for (slot, (src, dst)) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)).enumerate() {
        let head = (slot / seq) % n_heads;
        dst.copy_from_slice(&gate_vec(&heads[head], src).gate);
    }
    Ok(out)
}

fn calibrate(x: &Tensor, heads: &[PscHeadWeights]) -> Result<Tensor> {
    let (_, n_heads, seq, d) = check_heads(x, heads)?;
    let mut out = Tensor::zeros(x.shape());
    for (slot, (src, dst)) in x.data().chunks(d).zip(out.data_mut().chunks_mut(d)).enumerate() {
        let head = (slot / seq) % n_heads;
        dst.copy_from_slice(&calibrate_vec(&heads[head], src).0);
    }
    Ok(out)
}

/// Pre-calibration: `x + P(x) ⊙ x`, to be fed to the rotary transform.
pub fn apply_pre(x: &Tensor, heads: &[PscHeadWeights]) -> Result<Tensor> {
    calibrate(x, heads)
}

/// Post-calibration: `(P(f) + 1) ⊙ f` on already rotated embeddings.
pub fn apply_post(f: &Tensor, heads: &[PscHeadWeights]) -> Result<Tensor> {
    calibrate(f, heads)
}

/// Gradients of `Σ upstream ⊙ calibrate(x)`.
#[derive(Clone, Debug)]
pub struct PscGrads {
    pub heads: Vec<PscHeadWeights>,
    pub x: Tensor,
}

pub fn backward(x: &Tensor, heads: &[PscHeadWeights], upstream: &Tensor) -> Result<PscGrads> {
    let (_, n_heads, seq, d) = check_heads(x, heads)?;
    if upstream.shape() != x.shape() {
        return Err(Error::Dimension(format!("upstream {:?} does not match input {:?}", upstream.shape(), x.shape())));
    }
    let mut grads: Vec<PscHeadWeights> = heads.iter().map(|_| PscHeadWeights::zeros(d)).collect();
    let mut dx = Tensor::zeros(x.shape());
    for (slot, ((src, up), gx)) in
        x.data().chunks(d).zip(upstream.data().chunks(d)).zip(dx.data_mut().chunks_mut(d)).enumerate()
    {
        let head = (slot / seq) % n_heads;
        let trace = gate_vec(&heads[head], src);
        calibrate_backward_vec(&heads[head], src, &trace, up, &mut grads[head], gx);
    }
    Ok(PscGrads { heads: grads, x: dx })
}

/// Gate weights for one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PscModule {
    pub q_heads: Vec<PscHeadWeights>,
    pub k_heads: Vec<PscHeadWeights>,
    pub placement: Placement,
    pub head_dim: usize,
}

impl PscModule {
    pub fn init(
        n_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
        placement: Placement,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            q_heads: (0..n_heads).map(|_| PscHeadWeights::init(head_dim, rng)).collect(),
            k_heads: (0..n_kv_heads).map(|_| PscHeadWeights::init(head_dim, rng)).collect(),
            placement,
            head_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            q_heads: self.q_heads.iter().map(|_| PscHeadWeights::zeros(self.head_dim)).collect(),
            k_heads: self.k_heads.iter().map(|_| PscHeadWeights::zeros(self.head_dim)).collect(),
            placement: self.placement,
            head_dim: self.head_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.head_dim * self.head_dim * (self.q_heads.len() + self.k_heads.len())
    }
}

/// Extra parameters added by calibrating every layer: `2·d_h²·(n_heads + n_kv_heads)·layers`.
pub fn param_count(layers: u64, n_heads: u64, n_kv_heads: u64, d_h: u64) -> u64 {
    2 * d_h * d_h * (n_heads + n_kv_heads) * layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn single(x: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, 1, x.len()], x.to_vec()).unwrap()
    }

    fn identity_heads() -> Vec<PscHeadWeights> {
        vec![PscHeadWeights { w1: Tensor::identity(2), w2: Tensor::identity(2) }]
    }

    // ½·tanh(silu(1)) to 30 digits
    const GATE_AT_ONE: f64 = 0.311_856_274_912_937_8;

    #[test]
    fn zero_weights_zero_gate() {
        let heads = vec![PscHeadWeights::zeros(3)];
        let g = gate(&single(&[1.0, -2.0, 3.0]), &heads).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_path_oracle() {
        let g = gate(&single(&[1.0, 0.0]), &identity_heads()).unwrap();
        let silu1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.data()[0] - 0.5 * silu1.tanh()).abs() < 1e-16);
        assert!((g.data()[0] - GATE_AT_ONE).abs() < 1e-15);
        assert_eq!(g.data()[1], 0.0);

        let pre = apply_pre(&single(&[1.0, 0.0]), &identity_heads()).unwrap();
        assert!((pre.data()[0] - (1.0 + GATE_AT_ONE)).abs() < 1e-15);
        assert_eq!(pre.data()[1], 0.0);

        let post = apply_post(&single(&[0.3, -0.8]), &identity_heads()).unwrap();
        let a = [silu_scalar(0.3), silu_scalar(-0.8)];
        for (j, f) in [0.3, -0.8].iter().enumerate() {
            assert!((post.data()[j] - f * (1.0 + 0.5 * a[j].tanh())).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_when_w2_zero() {
        let mut rng = SplitMix64::new(1);
        let heads: Vec<_> = (0..2).map(|_| PscHeadWeights::init(4, &mut rng)).collect();
        let x = Tensor::normal(&[2, 2, 3, 4], 1.0, &mut rng);
        assert_eq!(apply_pre(&x, &heads).unwrap(), x);
        assert_eq!(apply_post(&x, &heads).unwrap(), x);
        let zero = Tensor::zeros(&[1, 2, 1, 4]);
        assert_eq!(apply_pre(&zero, &heads).unwrap(), zero);
    }

    #[test]
    fn head_count_mismatch() {
        let heads = vec![PscHeadWeights::zeros(2)];
        let x = Tensor::zeros(&[1, 2, 1, 2]);
        assert!(matches!(gate(&x, &heads), Err(Error::Config(_))));
    }

    #[test]
    fn backward_trivial_cases() {
        let mut rng = SplitMix64::new(2);
        let heads = vec![PscHeadWeights::init(4, &mut rng)];
        let x = Tensor::normal(&[1, 1, 2, 4], 1.0, &mut rng);

        let g = backward(&x, &heads, &Tensor::zeros(x.shape())).unwrap();
        assert!(g.x.data().iter().all(|&v| v == 0.0));
        assert!(g.heads[0].w1.data().iter().chain(g.heads[0].w2.data()).all(|&v| v == 0.0));

        // W2 = 0: the input gradient passes through unchanged, W2 still learns
        let up = Tensor::normal(x.shape(), 1.0, &mut rng);
        let g = backward(&x, &heads, &up).unwrap();
        assert_eq!(g.x, up);
        assert!(g.heads[0].w2.max_abs() > 0.0);
        assert_eq!(g.heads[0].w1.max_abs(), 0.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = SplitMix64::new(seed);
            let d = 4;
            let heads = vec![
                PscHeadWeights {
                    w1: Tensor::normal(&[d, d], 0.7, &mut rng),
                    w2: Tensor::normal(&[d, d], 0.7, &mut rng),
                },
                PscHeadWeights {
                    w1: Tensor::normal(&[d, d], 0.7, &mut rng),
                    w2: Tensor::normal(&[d, d], 0.7, &mut rng),
                },
            ];
            let x = Tensor::normal(&[1, 2, 3, d], 1.0, &mut rng);
            let up = Tensor::normal(x.shape(), 1.0, &mut rng);
            let objective = |x: &Tensor, heads: &[PscHeadWeights]| -> f64 {
                let out = apply_pre(x, heads).unwrap();
                out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let g = backward(&x, &heads, &up).unwrap();

            let num_x = finite_diff_grad(|t| objective(t, &heads), &x).unwrap();
            assert!(max_relative_error(g.x.data(), num_x.data(), 1e-3) < 1e-6);
            for h in 0..2 {
                let num_w1 = finite_diff_grad(
                    |t| {
                        let mut hs = heads.clone();
                        hs[h].w1 = t.clone();
                        objective(&x, &hs)
                    },
                    &heads[h].w1,
                )
                .unwrap();
                let num_w2 = finite_diff_grad(
                    |t| {
                        let mut hs = heads.clone();
                        hs[h].w2 = t.clone();
                        objective(&x, &hs)
                    },
                    &heads[h].w2,
                )
                .unwrap();
                assert!(max_relative_error(g.heads[h].w1.data(), num_w1.data(), 1e-3) < 1e-6, "seed {seed}");
                assert!(max_relative_error(g.heads[h].w2.data(), num_w2.data(), 1e-3) < 1e-6, "seed {seed}");
            }
        }
    }

    #[test]
    fn parameter_accounting() {
        assert_eq!(param_count(32, 32, 32, 128), 67_108_864);
        assert_eq!(param_count(1, 1, 1, 2), 16);
        assert_eq!(param_count(4, 4, 4, 16), 16_384);
        let mut rng = SplitMix64::new(0);
        assert_eq!(PscModule::init(4, 2, 8, Placement::Pre, &mut rng).param_count(), 2 * 64 * 6);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn gate_bounded_and_multiplier_in_range(seed in any::<u64>(), scale in 0.01f64..50.0) {
            let mut rng = SplitMix64::new(seed);
            let heads = vec![PscHeadWeights {
                w1: Tensor::normal(&[4, 4], scale, &mut rng),
                w2: Tensor::normal(&[4, 4], scale, &mut rng),
            }];
            let x = Tensor::normal(&[1, 1, 8, 4], scale, &mut rng);
            let g = gate(&x, &heads).unwrap();
            prop_assert!(g.data().iter().all(|&p| p > -0.5 && p < 0.5));
            let out = apply_pre(&x, &heads).unwrap();
            for (o, xi) in out.data().iter().zip(x.data()) {
                prop_assert!(o.abs() >= 0.5 * xi.abs() && o.abs() <= 1.5 * xi.abs());
            }
        }

        #[test]
        fn heads_are_independent(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let mut heads: Vec<_> = (0..3).map(|_| PscHeadWeights {
                w1: Tensor::normal(&[4, 4], 1.0, &mut rng),
                w2: Tensor::normal(&[4, 4], 1.0, &mut rng),
            }).collect();
            let x = Tensor::normal(&[2, 3, 5, 4], 1.0, &mut rng);
            let before = apply_pre(&x, &heads).unwrap();
            heads[1].w2 = Tensor::normal(&[4, 4], 1.0, &mut rng);
            let after = apply_pre(&x, &heads).unwrap();
            for (slot, (a, b)) in before.data().chunks(4).zip(after.data().chunks(4)).enumerate() {
                let head = (slot / 5) % 3;
                if head != 1 {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
