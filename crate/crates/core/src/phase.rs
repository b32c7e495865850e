//! Phase-shift analysis: the correction rotation between ideal and actual
//! frequencies, its rank, and phase/norm statistics of embeddings.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matrix_rank, SplitMix64, Tensor};
use crate::rope::{rotary_matrix, Layout};

/// Angle tolerance (radians) below which a pair counts as unshifted.
pub const SHIFT_ANGLE_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct PhaseShiftSpec {
    /// Ideal frequencies `Θ*`.
    pub theta_star: Tensor,
    /// Frequencies actually used, `Θ̂`.
    pub theta_hat: Tensor,
    pub position: usize,
    pub layout: Layout,
}

impl PhaseShiftSpec {
    pub fn new(theta_star: Tensor, theta_hat: Tensor, position: usize, layout: Layout) -> Result<Self> {
        if theta_star.len() != theta_hat.len() || theta_star.is_empty() {
            return Err(Error::Dimension(format!(
                "frequency vectors differ in length: {} vs {}",
                theta_star.len(),
                theta_hat.len()
            )));
        }
        if theta_star.data().iter().chain(theta_hat.data()).any(|t| !(*t > 0.0)) {
            return Err(Error::Range("frequencies must be positive".into()));
        }
        Ok(Self { theta_star, theta_hat, position, layout })
    }

    pub fn head_dim(&self) -> usize {
        2 * self.theta_star.len()
    }

    /// Per-pair frequency differences `θ*_i − θ̂_i`.
    pub fn shifts(&self) -> Vec<f64> {
        self.theta_star.data().iter().zip(self.theta_hat.data()).map(|(a, b)| a - b).collect()
    }

    /// Number of pairs whose accumulated angle is not a multiple of 2π.
    pub fn effectively_shifted_pairs(&self) -> usize {
        self.shifts()
            .iter()
            .filter(|&&delta| {
                let angle = (self.position as f64 * delta).rem_euclid(TAU);
                angle > SHIFT_ANGLE_TOL && TAU - angle > SHIFT_ANGLE_TOL
            })
            .count()
    }
}

/// `R̃^d_{Θ*−Θ̂, m}`: block `i` rotates by `m(θ*_i − θ̂_i)`.
pub fn build_shift_matrix(spec: &PhaseShiftSpec) -> Tensor {
    rotary_matrix(&spec.shifts(), spec.position as f64, spec.layout)
}

/// `max |R̃·R(Θ̂,m) − R(Θ*,m)|` over all entries, each side built independently.
pub fn verify_composition(spec: &PhaseShiftSpec) -> Result<f64> {
    let m = spec.position as f64;
    let shift = build_shift_matrix(spec);
    let actual = rotary_matrix(spec.theta_hat.data(), m, spec.layout);
    let ideal = rotary_matrix(spec.theta_star.data(), m, spec.layout);
    matmul(&shift, &actual)?.max_abs_diff(&ideal)
}

/// Rank of `R̃ − I`, with the tolerance measured against the unit scale of `I`.
pub fn shift_rank(spec: &PhaseShiftSpec, rel_tol: f64) -> Result<usize> {
    let shift = build_shift_matrix(spec);
    let d = spec.head_dim();
    let diff = shift.sub(&Tensor::identity(d))?;
    let scale = diff.max_abs();
    if scale == 0.0 {
        return Ok(0);
    }
    matrix_rank(&diff, rel_tol * scale.max(1.0) / scale)
}

/// Builds a spec whose first `shifted` pairs are offset by random amounts in
/// `[lo, hi]` relative to `theta_hat`.
pub fn spec_with_shifted_pairs(
    theta_hat: &Tensor,
    shifted: usize,
    position: usize,
    layout: Layout,
    (lo, hi): (f64, f64),
    rng: &mut SplitMix64,
) -> Result<PhaseShiftSpec> {
    if shifted > theta_hat.len() {
        return Err(Error::Range(format!("cannot shift {shifted} of {} pairs", theta_hat.len())));
    }
    let mut star = theta_hat.clone();
    for t in star.data_mut().iter_mut().take(shifted) {
        *t += rng.uniform(lo, hi);
    }
    PhaseShiftSpec::new(star, theta_hat.clone(), position, layout)
}

/// One row of a rank sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankRow {
    pub num_shifted: usize,
    pub position: usize,
    pub rank: usize,
}

/// Rank of `R̃ − I` for every shifted-pair count `0..=d/2` at each position.
pub fn rank_sweep(
    theta_hat: &Tensor,
    positions: &[usize],
    layout: Layout,
    shift_range: (f64, f64),
    rel_tol: f64,
    seed: u64,
) -> Result<Vec<RankRow>> {
    let mut rows = Vec::new();
    for &position in positions {
        for num_shifted in 0..=theta_hat.len() {
            let mut rng = SplitMix64::new(seed ^ ((num_shifted as u64) << 32));
            let spec = spec_with_shifted_pairs(theta_hat, num_shifted, position, layout, shift_range, &mut rng)?;
            rows.push(RankRow { num_shifted, position, rank: shift_rank(&spec, rel_tol)? });
        }
    }
    Ok(rows)
}

pub fn rank_sweep_csv(rows: &[RankRow]) -> String {
    let mut out = String::from("num_shifted,m,rank\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.num_shifted, r.position, r.rank));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over the observed range of `values`.
    pub fn over_range(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        if values.is_empty() {
            return Self { lo: 0.0, hi: 0.0, counts };
        }
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let idx = if width > 0.0 { ((v - lo) / width) as usize } else { 0 };
            counts[idx.min(bins - 1)] += 1;
        }
        Self { lo, hi, counts }
    }

    pub fn bin_edges(&self) -> Vec<(f64, f64)> {
        let n = self.counts.len();
        let width = (self.hi - self.lo) / n as f64;
        (0..n).map(|i| (self.lo + i as f64 * width, self.lo + (i + 1) as f64 * width)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

impl Moments {
    fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Phase and norm of every coordinate pair, read as a complex number.
#[derive(Clone, Debug)]
pub struct PhaseNormStats {
    pub pair_index: Vec<usize>,
    /// `atan2(y, x)` in `(−π, π]`.
    pub phases: Vec<f64>,
    pub norms: Vec<f64>,
    pub phase_hist: Histogram,
    pub norm_hist: Histogram,
    pub phase_moments: Moments,
    pub norm_moments: Moments,
}

pub const DEFAULT_BINS: usize = 64;

pub fn phase_norm_distribution(embeddings: &Tensor, layout: Layout, bins: usize) -> Result<PhaseNormStats> {
    if embeddings.shape().len() != 2 || !embeddings.cols().is_multiple_of(2) {
        return Err(Error::Dimension(format!("expected [tokens × even d], got {:?}", embeddings.shape())));
    }
    let d = embeddings.cols();
    let mut pair_index = Vec::new();
    let mut phases = Vec::new();
    let mut norms = Vec::new();
    for t in 0..embeddings.rows() {
        let row = embeddings.row(t);
        for i in 0..d / 2 {
            let (a, b) = layout.pair(d, i);
            let (x, y) = (row[a], row[b]);
            let mut phase = y.atan2(x);
            // atan2 returns −π for (negative, −0.0); fold into the half-open range
            if phase <= -PI {
                phase = PI;
            }
            pair_index.push(i);
            phases.push(phase);
            norms.push(x.hypot(y));
        }
    }
    Ok(PhaseNormStats {
        phase_hist: Histogram::over_range(&phases, bins),
        norm_hist: Histogram::over_range(&norms, bins),
        phase_moments: Moments::of(&phases),
        norm_moments: Moments::of(&norms),
        pair_index,
        phases,
        norms,
    })
}

impl PhaseNormStats {
    /// Rows `pair_index,phase,norm`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_index,phase,norm\n");
        for ((i, p), n) in self.pair_index.iter().zip(&self.phases).zip(&self.norms) {
            out.push_str(&format!("{i},{p},{n}\n"));
        }
        out
    }

    /// Rows `quantity,bin,lo,hi,count` for both histograms.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("quantity,bin,lo,hi,count\n");
        for (name, hist) in [("phase", &self.phase_hist), ("norm", &self.norm_hist)] {
            for (bin, ((lo, hi), count)) in hist.bin_edges().into_iter().zip(&hist.counts).enumerate() {
                out.push_str(&format!("{name},{bin},{lo},{hi},{count}\n"));
            }
        }
        out
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn random_spec(seed: u64, d: usize, m: usize) -> PhaseShiftSpec {
        let mut rng = SplitMix64::new(seed);
        let star = (0..d / 2).map(|_| rng.uniform(1e-4, 1.0)).collect();
        let hat = (0..d / 2).map(|_| rng.uniform(1e-4, 1.0)).collect();
        PhaseShiftSpec::new(Tensor::vector(star).unwrap(), Tensor::vector(hat).unwrap(), m, Layout::HalfBlocks).unwrap()
    }

    proptest! {
        #[test]
        fn shift_matrix_is_orthogonal(seed in any::<u64>(), m in 0usize..10_000) {
            let r = build_shift_matrix(&random_spec(seed, 16, m));
            let rtr = matmul(&r.transpose().unwrap(), &r).unwrap();
            prop_assert!(rtr.max_abs_diff(&Tensor::identity(16)).unwrap() <= 1e-12);
        }

        #[test]
        fn composition_holds(seed in any::<u64>(), m in 1usize..=64) {
            prop_assert!(verify_composition(&random_spec(seed, 8, m)).unwrap() <= 1e-10);
        }

        #[test]
        fn rank_is_twice_shifted_count(seed in any::<u64>(), d in prop::sample::select(vec![4usize, 8, 32, 128]),
                                       m in 1usize..=10_000, frac in 0.0f64..=1.0) {
            let mut rng = SplitMix64::new(seed);
            let hat = Tensor::vector((0..d / 2).map(|_| rng.uniform(1e-4, 1.0)).collect()).unwrap();
            let k = ((d / 2) as f64 * frac) as usize;
            let spec = spec_with_shifted_pairs(&hat, k, m, Layout::HalfBlocks, (0.01, 0.5), &mut rng).unwrap();
            let rank = shift_rank(&spec, 1e-8).unwrap();
            prop_assert_eq!(rank % 2, 0);
            prop_assert_eq!(rank, 2 * spec.effectively_shifted_pairs());
        }

        #[test]
        fn phases_scale_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = SplitMix64::new(seed);
            let e = Tensor::normal(&[16, 8], 1.0, &mut rng);
            let a = phase_norm_distribution(&e, Layout::HalfBlocks, 8).unwrap();
            let b = phase_norm_distribution(&e.scale(scale), Layout::HalfBlocks, 8).unwrap();
            for (p, q) in a.phases.iter().zip(&b.phases) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
            for (n, k) in a.norms.iter().zip(&b.norms) {
                prop_assert!((n * scale - k).abs() <= 1e-12 * k.max(1.0));
            }
        }
    }
}
