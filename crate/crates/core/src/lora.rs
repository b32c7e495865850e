//! Low-rank adapters on frozen projection matrices: `y = W x + scale · B (A x)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matvec, matvec_t_acc, outer_acc, SplitMix64, Tensor};

/// Projection a LoRA adapter can attach to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    pub fn tag(self) -> &'static str {
        match self {
            LoraTarget::Q => "q",
            LoraTarget::K => "k",
            LoraTarget::V => "v",
            LoraTarget::O => "o",
        }
    }
}

/// `A: [r × k]`, `B: [d × r]` for a base weight `W: [d × k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
}

impl LoraAdapter {
    /// `A ~ U(−1/√k, 1/√k)`, `B = 0`, scale 1.
    pub fn init(d: usize, k: usize, rank: usize, rng: &mut SplitMix64) -> Result<Self> {
        check_rank(d, k, rank)?;
        let bound = 1.0 / (k as f64).sqrt();
        Ok(Self { a: Tensor::uniform(&[rank, k], bound, rng), b: Tensor::zeros(&[d, rank]), scale: 1.0 })
    }

    pub fn new(a: Tensor, b: Tensor, scale: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.rows() != b.cols() {
            return Err(Error::Dimension(format!("adapter factors {:?} and {:?} do not chain", a.shape(), b.shape())));
        }
        check_rank(b.rows(), a.cols(), a.rows())?;
        Ok(Self { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self { a: Tensor::zeros(self.a.shape()), b: Tensor::zeros(self.b.shape()), scale: self.scale }
    }

    fn check_base(&self, w: &Tensor) -> Result<()> {
        if w.shape() != [self.b.rows(), self.a.cols()] {
            return Err(Error::Dimension(format!(
                "base weight {:?} does not match adapter [{} × {}]",
                w.shape(),
                self.b.rows(),
                self.a.cols()
            )));
        }
        check_rank(self.b.rows(), self.a.cols(), self.rank())
    }
}

/// Enforces `r ≤ min(d, k)/2`.
pub fn check_rank(d: usize, k: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d.min(k) / 2 {
        return Err(Error::Config(format!("LoRA rank {rank} must lie in 1..={} for a {d} × {k} weight", d.min(k) / 2)));
    }
    Ok(())
}

/// `W x + scale · B (A x)`; `W` is never modified.
pub fn lora_forward(w: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    adapter.check_base(w)?;
    if x.len() != w.cols() {
        return Err(Error::Dimension(format!("input of {} for weight {:?}", x.len(), w.shape())));
    }
    let mut out = vec![0.0; w.rows()];
    lora_apply(w, Some(adapter), x.data(), &mut out, &mut vec![0.0; adapter.rank()]);
    Tensor::vector(out)
}

/// Slice-level forward; `ax` receives `A x` (empty when no adapter).
pub fn lora_apply(w: &Tensor, adapter: Option<&LoraAdapter>, x: &[f64], out: &mut [f64], ax: &mut [f64]) {
    let (d, k) = (w.rows(), w.cols());
    matvec(w.data(), d, k, x, out);
    if let Some(ad) = adapter {
        let r = ad.rank();
        matvec(ad.a.data(), r, k, x, ax);
        for (i, o) in out.iter_mut().enumerate() {
            let brow = &ad.b.data()[i * r..(i + 1) * r];
            *o += ad.scale * brow.iter().zip(ax.iter()).map(|(b, a)| b * a).sum::<f64>();
        }
    }
}

/// Slice-level backward. Accumulates adapter gradients into `grads`, the
/// base gradient into `dw` when requested, and the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn lora_backward_acc(
    w: &Tensor,
    adapter: Option<&LoraAdapter>,
    x: &[f64],
    ax: &[f64],
    upstream: &[f64],
    grads: Option<&mut LoraAdapter>,
    dw: Option<&mut Tensor>,
    dx: &mut [f64],
) {
    let (d, k) = (w.rows(), w.cols());
    matvec_t_acc(w.data(), d, k, upstream, dx);
    if let Some(dw) = dw {
        outer_acc(upstream, x, dw.data_mut());
    }
    if let Some(ad) = adapter {
        let r = ad.rank();
        // bt_g = scale · Bᵀ upstream
        let mut bt_g = vec![0.0; r];
        matvec_t_acc(ad.b.data(), d, r, upstream, &mut bt_g);
        bt_g.iter_mut().for_each(|v| *v *= ad.scale);
        matvec_t_acc(ad.a.data(), r, k, &bt_g, dx);
        if let Some(g) = grads {
            let scaled: Vec<f64> = upstream.iter().map(|u| u * ad.scale).collect();
            outer_acc(&scaled, ax, g.b.data_mut());
            outer_acc(&bt_g, x, g.a.data_mut());
        }
    }
}

/// `W + scale · B A`.
pub fn lora_merge(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    adapter.check_base(w)?;
    w.add(&matmul(&adapter.b, &adapter.a)?.scale(adapter.scale))
}

/// Gradients of `⟨upstream, lora_forward(W, adapter, x)⟩` with respect to `A` and `B`.
pub fn lora_backward(w: &Tensor, adapter: &LoraAdapter, x: &Tensor, upstream: &Tensor) -> Result<LoraAdapter> {
    adapter.check_base(w)?;
    if x.len() != w.cols() || upstream.len() != w.rows() {
        return Err(Error::Dimension("input or upstream does not match the base weight".into()));
    }
    let mut ax = vec![0.0; adapter.rank()];
    matvec(adapter.a.data(), adapter.rank(), w.cols(), x.data(), &mut ax);
    let mut grads = adapter.zeros_like();
    let mut dx = vec![0.0; w.cols()];
    lora_backward_acc(w, Some(adapter), x.data(), &ax, upstream.data(), Some(&mut grads), None, &mut dx);
    Ok(grads)
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::numerics::matrix_rank;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn product_rank_bounded(seed in any::<u64>(), r in 1usize..=4) {
            let mut rng = SplitMix64::new(seed);
            let a = Tensor::normal(&[r, 8], 1.0, &mut rng);
            let b = Tensor::normal(&[8, r], 1.0, &mut rng);
            prop_assert!(matrix_rank(&matmul(&b, &a).unwrap(), 1e-8).unwrap() <= r);
        }

        #[test]
        fn merge_equivalence(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let w = Tensor::normal(&[6, 8], 1.0, &mut rng);
            let ad = LoraAdapter::new(Tensor::normal(&[3, 8], 1.0, &mut rng),
                                      Tensor::normal(&[6, 3], 1.0, &mut rng), 0.7).unwrap();
            let x = Tensor::normal(&[8], 1.0, &mut rng);
            let snapshot = w.clone();
            let via_adapter = lora_forward(&w, &ad, &x).unwrap();
            let merged = lora_merge(&w, &ad).unwrap();
            let via_merge = matmul(&merged, &x.clone().reshape(vec![8, 1]).unwrap()).unwrap();
            for (p, q) in via_adapter.data().iter().zip(via_merge.data()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
            }
            prop_assert_eq!(w, snapshot);
        }
    }
}
