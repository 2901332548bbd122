//! Global variational state and natural-gradient SVI updates.
//!
//! `q(π_k) = Beta(a_k, b_k)`, `q(γ_obs) = Gamma(c, d)`, `q(γ_w) = Gamma(e, f)` and
//! `q(φ_kd) = N(μ_kd / τ_kd, 1 / τ_kd)`. All fields are stored in the coordinates in
//! which the SVI convex combination is taken: Beta pseudo-counts, Gamma shape/rate,
//! Gaussian precision and precision-scaled mean.
//!
//! Loadings carry one precision per (feature, dimension). With fully observed rows all
//! entries of a row of `tau` coincide and the update reduces to a single `τ_k`; with
//! missing entries each dimension only accumulates evidence from rows that observe it.

use std::ops::AddAssign;

use log::warn;
use ndarray::Array2;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};

use crate::error::{BpfaError, Result};
use crate::math::digamma;
use crate::model::{GlobalSample, Hyperparameters, PI_CEIL, PI_FLOOR};
use crate::rng::Rng;

/// Floor applied to shapes, rates and precisions after a step.
pub const POSITIVE_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVariationalState {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    /// K × D Gaussian precisions.
    pub tau: Array2<f64>,
    /// K × D precision-scaled means.
    pub mu: Array2<f64>,
}

/// Per-datum (or summed) contribution to the global natural parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalStats {
    pub z_sum: Vec<f64>,
    pub z_comp_sum: Vec<f64>,
    pub c_count: f64,
    pub d_stat: f64,
    pub e_count: f64,
    pub f_stat: f64,
    /// K × D, zero at unobserved dimensions.
    pub tau_stat: Array2<f64>,
    /// K × D, zero at unobserved dimensions.
    pub mu_stat: Array2<f64>,
}

impl NaturalStats {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            z_sum: vec![0.0; k],
            z_comp_sum: vec![0.0; k],
            c_count: 0.0,
            d_stat: 0.0,
            e_count: 0.0,
            f_stat: 0.0,
            tau_stat: Array2::zeros((k, d)),
            mu_stat: Array2::zeros((k, d)),
        }
    }

    pub fn k(&self) -> usize {
        self.z_sum.len()
    }

    pub fn d(&self) -> usize {
        self.tau_stat.ncols()
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.z_sum.iter_mut().chain(self.z_comp_sum.iter_mut()) {
            *v *= s;
        }
        self.c_count *= s;
        self.d_stat *= s;
        self.e_count *= s;
        self.f_stat *= s;
        self.tau_stat *= s;
        self.mu_stat *= s;
    }

    /// Sums a sequence of stats in order.
    pub fn sum<'a>(k: usize, d: usize, items: impl IntoIterator<Item = &'a NaturalStats>) -> Self {
        let mut acc = Self::zeros(k, d);
        for s in items {
            acc += s;
        }
        acc
    }
}

impl AddAssign<&NaturalStats> for NaturalStats {
    fn add_assign(&mut self, rhs: &NaturalStats) {
        for (a, b) in self.z_sum.iter_mut().zip(&rhs.z_sum) {
            *a += b;
        }
        for (a, b) in self.z_comp_sum.iter_mut().zip(&rhs.z_comp_sum) {
            *a += b;
        }
        self.c_count += rhs.c_count;
        self.d_stat += rhs.d_stat;
        self.e_count += rhs.e_count;
        self.f_stat += rhs.f_stat;
        self.tau_stat += &rhs.tau_stat;
        self.mu_stat += &rhs.mu_stat;
    }
}

/// Expected (or, for a sampled β, exact) global quantities consumed by local inference.
///
/// A `GlobalSample` is represented as a degenerate moment record with zero loading
/// variance, so every local routine is written once against this type.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMoments {
    /// `E[log(π_k / (1 - π_k))]`.
    pub logit_pi: Vec<f64>,
    pub gamma_obs: f64,
    pub gamma_w: f64,
    /// K × D loading means.
    pub phi: Array2<f64>,
    /// K × D loading variances; `None` for a sampled β.
    pub phi_var: Option<Array2<f64>>,
}

impl GlobalMoments {
    pub fn from_sample(beta: &GlobalSample) -> Self {
        Self {
            logit_pi: beta
                .pi
                .iter()
                .map(|&p| {
                    let p = p.clamp(PI_FLOOR, PI_CEIL);
                    p.ln() - (-p).ln_1p()
                })
                .collect(),
            gamma_obs: beta.gamma_obs,
            gamma_w: beta.gamma_w,
            phi: beta.phi.clone(),
            phi_var: None,
        }
    }

    pub fn k(&self) -> usize {
        self.logit_pi.len()
    }

    pub fn d(&self) -> usize {
        self.phi.ncols()
    }

    /// `E[φ_k φ_kᵀ]` diagonal summary: `‖E φ_k‖² + Σ_d Var φ_kd` for every k.
    pub fn phi_second_moment(&self) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let m: f64 = self.phi.row(k).iter().map(|x| x * x).sum();
                let v: f64 = self.phi_var.as_ref().map_or(0.0, |v| v.row(k).sum());
                m + v
            })
            .collect()
    }
}

impl GlobalVariationalState {
    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn d(&self) -> usize {
        self.tau.ncols()
    }

    /// Checks positivity and the prior precision floor `τ ≥ D`.
    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if self.b.len() != k || self.tau.nrows() != k || self.mu.dim() != self.tau.dim() {
            return Err(BpfaError::Shape("inconsistent variational state shapes".into()));
        }
        let scalars = [("c", self.c), ("d", self.d), ("e", self.e), ("f", self.f)];
        for (name, v) in scalars {
            if !(v.is_finite() && v > 0.0) {
                return Err(BpfaError::Degenerate(format!("{name} = {v}")));
            }
        }
        if self.a.iter().chain(&self.b).any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(BpfaError::Degenerate("non-positive Beta parameter".into()));
        }
        if self.tau.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(BpfaError::Degenerate("non-positive loading precision".into()));
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(BpfaError::Degenerate("non-finite loading mean".into()));
        }
        Ok(())
    }

    /// Re-establishes positivity after an update. Negative or non-finite values are errors;
    /// tiny positive values are floored with a warning.
    fn enforce_positivity(&mut self) -> Result<()> {
        fn fix(name: &str, v: &mut f64) -> Result<()> {
            if !v.is_finite() || *v < 0.0 {
                return Err(BpfaError::Degenerate(format!("{name} = {v}")));
            }
            if *v < POSITIVE_FLOOR {
                warn!("{name} = {v:e} floored at {POSITIVE_FLOOR:e}");
                *v = POSITIVE_FLOOR;
            }
            Ok(())
        }
        for v in self.a.iter_mut() {
            fix("a_k", v)?;
        }
        for v in self.b.iter_mut() {
            fix("b_k", v)?;
        }
        fix("c", &mut self.c)?;
        fix("d", &mut self.d)?;
        fix("e", &mut self.e)?;
        fix("f", &mut self.f)?;
        for v in self.tau.iter_mut() {
            fix("tau", v)?;
        }
        if self.mu.iter().any(|v| !v.is_finite()) {
            return Err(BpfaError::Degenerate("non-finite loading mean".into()));
        }
        Ok(())
    }

    /// Starting point when no warm start is available: prior pseudo-counts plus one,
    /// prior loading precision and loading means with per-entry variance `1/D`.
    pub fn random_init(hyper: &Hyperparameters, d: usize, rng: &mut Rng) -> Result<Self> {
        hyper.validate()?;
        let (alpha, beta) = hyper.beta_prior();
        let k = hyper.k;
        let df = d as f64;
        let mu = Array2::from_shape_simple_fn((k, d), || {
            let e: f64 = StandardNormal.sample(rng);
            e * df.sqrt()
        });
        Ok(Self {
            a: vec![alpha + 1.0; k],
            b: vec![beta + 1.0; k],
            c: hyper.c_prior + 1.0,
            d: hyper.d_prior + 1.0,
            e: hyper.e_prior + 1.0,
            f: hyper.f_prior + 1.0,
            tau: Array2::from_elem((k, d), df),
            mu,
        })
    }
}

/// Prior natural parameters `[a/K, b(K-1)/K, c', d', e', f', D, 0]`, laid out as a state.
pub fn prior_natural(hyper: &Hyperparameters, d: usize) -> Result<GlobalVariationalState> {
    hyper.validate()?;
    let (alpha, beta) = hyper.beta_prior();
    let k = hyper.k;
    Ok(GlobalVariationalState {
        a: vec![alpha; k],
        b: vec![beta; k],
        c: hyper.c_prior,
        d: hyper.d_prior,
        e: hyper.e_prior,
        f: hyper.f_prior,
        tau: Array2::from_elem((k, d), d as f64),
        mu: Array2::zeros((k, d)),
    })
}

/// Robbins–Monro step size `(t + t0)^(-ζ)`.
pub fn step_size(t: u64, hyper: &Hyperparameters) -> Result<f64> {
    if t < 1 {
        return Err(BpfaError::InvalidArgument("iteration index starts at 1".into()));
    }
    Ok((t as f64 + hyper.t0).powf(-hyper.zeta))
}

fn check_stats_shape(stats: &NaturalStats, k: usize, d: usize) -> Result<()> {
    if stats.k() != k
        || stats.z_comp_sum.len() != k
        || stats.tau_stat.dim() != (k, d)
        || stats.mu_stat.dim() != (k, d)
    {
        return Err(BpfaError::Shape(format!(
            "natural stats are {}×{}, state is {k}×{d}",
            stats.k(),
            stats.d()
        )));
    }
    Ok(())
}

/// One SVI step: `λ ← (1-ρ) λ + ρ (η + N/|B| Σ_{i∈B} η̂_i)` in natural coordinates.
pub fn svi_step(
    state: &GlobalVariationalState,
    prior: &GlobalVariationalState,
    batch: &[NaturalStats],
    n_total: usize,
    rho: f64,
) -> Result<GlobalVariationalState> {
    if batch.is_empty() {
        return Err(BpfaError::InvalidArgument("empty minibatch".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(BpfaError::InvalidArgument(format!("step size {rho} outside [0, 1]")));
    }
    let (k, d) = (state.k(), state.d());
    for s in batch {
        check_stats_shape(s, k, d)?;
    }
    let mut sum = NaturalStats::sum(k, d, batch);
    sum.scale(n_total as f64 / batch.len() as f64);
    let keep = 1.0 - rho;
    let blend = |old: f64, prior: f64, stat: f64| keep * old + rho * (prior + stat);

    let mut next = state.clone();
    for kk in 0..k {
        next.a[kk] = blend(state.a[kk], prior.a[kk], sum.z_sum[kk]);
        next.b[kk] = blend(state.b[kk], prior.b[kk], sum.z_comp_sum[kk]);
    }
    next.c = blend(state.c, prior.c, sum.c_count);
    next.d = blend(state.d, prior.d, sum.d_stat);
    next.e = blend(state.e, prior.e, sum.e_count);
    next.f = blend(state.f, prior.f, sum.f_stat);
    ndarray::Zip::from(&mut next.tau)
        .and(&state.tau)
        .and(&prior.tau)
        .and(&sum.tau_stat)
        .for_each(|n, &o, &p, &s| *n = blend(o, p, s));
    ndarray::Zip::from(&mut next.mu)
        .and(&state.mu)
        .and(&prior.mu)
        .and(&sum.mu_stat)
        .for_each(|n, &o, &p, &s| *n = blend(o, p, s));
    next.enforce_positivity()?;
    Ok(next)
}

/// Closed-form batch update from full-data expectations (the reference M-step).
pub fn full_batch_cavi_update(
    prior: &GlobalVariationalState,
    all_stats: &[NaturalStats],
) -> Result<GlobalVariationalState> {
    let (k, d) = (prior.k(), prior.d());
    let mut next = prior.clone();
    for s in all_stats {
        check_stats_shape(s, k, d)?;
        for kk in 0..k {
            next.a[kk] += s.z_sum[kk];
            next.b[kk] += s.z_comp_sum[kk];
        }
        next.c += s.c_count;
        next.d += s.d_stat;
        next.e += s.e_count;
        next.f += s.f_stat;
        next.tau += &s.tau_stat;
        next.mu += &s.mu_stat;
    }
    next.enforce_positivity()?;
    Ok(next)
}

/// Draws `β ~ q(β)`.
pub fn sample_global(state: &GlobalVariationalState, rng: &mut Rng) -> Result<GlobalSample> {
    let k = state.k();
    let mut pi = Vec::with_capacity(k);
    for kk in 0..k {
        let dist = Beta::new(state.a[kk], state.b[kk])
            .map_err(|e| BpfaError::Degenerate(format!("Beta({}, {}): {e}", state.a[kk], state.b[kk])))?;
        pi.push(dist.sample(rng).clamp(PI_FLOOR, PI_CEIL));
    }
    let phi = ndarray::Zip::from(&state.mu)
        .and(&state.tau)
        .map_collect(|&m, &t| {
            let e: f64 = StandardNormal.sample(rng);
            m / t + e / t.sqrt()
        });
    let gamma = |shape: f64, rate: f64, rng: &mut Rng| -> Result<f64> {
        let g = Gamma::new(shape, 1.0 / rate)
            .map_err(|e| BpfaError::Degenerate(format!("Gamma({shape}, {rate}): {e}")))?;
        Ok(g.sample(rng).max(f64::MIN_POSITIVE))
    };
    let gamma_obs = gamma(state.c, state.d, rng)?;
    let gamma_w = gamma(state.e, state.f, rng)?;
    Ok(GlobalSample {
        pi,
        phi,
        gamma_w,
        gamma_obs,
    })
}

/// Exact moments of the variational factors.
pub fn expected_global(state: &GlobalVariationalState) -> GlobalMoments {
    GlobalMoments {
        logit_pi: state
            .a
            .iter()
            .zip(&state.b)
            .map(|(&a, &b)| digamma(a) - digamma(b))
            .collect(),
        gamma_obs: state.c / state.d,
        gamma_w: state.e / state.f,
        phi: &state.mu / &state.tau,
        phi_var: Some(state.tau.mapv(|t| 1.0 / t)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_stats(k: usize, d: usize, rng: &mut crate::rng::Rng) -> NaturalStats {
        let mut s = NaturalStats::zeros(k, d);
        for kk in 0..k {
            let z: f64 = rng.gen();
            s.z_sum[kk] = z;
            s.z_comp_sum[kk] = 1.0 - z;
        }
        s.c_count = d as f64 / 2.0;
        s.d_stat = rng.gen::<f64>() * 3.0;
        s.e_count = k as f64 / 2.0;
        s.f_stat = rng.gen::<f64>() * 2.0;
        s.tau_stat = Array2::from_shape_simple_fn((k, d), || rng.gen::<f64>() * 5.0);
        s.mu_stat = Array2::from_shape_simple_fn((k, d), || rng.gen::<f64>() * 4.0 - 2.0);
        s
    }

    fn random_state(k: usize, d: usize, rng: &mut crate::rng::Rng) -> GlobalVariationalState {
        let mut h = Hyperparameters::with_k(k);
        h.a = 1.0 + rng.gen::<f64>() * 10.0;
        let prior = prior_natural(&h, d).unwrap();
        let stats: Vec<_> = (0..5).map(|_| random_stats(k, d, rng)).collect();
        full_batch_cavi_update(&prior, &stats).unwrap()
    }

    #[test]
    fn prior_block_matches_defaults() {
        let h = Hyperparameters::with_k(10);
        let p = prior_natural(&h, 7).unwrap();
        assert!(p.a.iter().all(|&a| (a - 1.0).abs() < 1e-15));
        assert!(p.b.iter().all(|&b| (b - 9.0).abs() < 1e-15));
        assert!(p.mu.iter().all(|&m| m == 0.0));
        assert!(p.tau.iter().all(|&t| t == 7.0));
        assert_eq!((p.c, p.d, p.e, p.f), (1.0, 10.0, 1.0, 1.0));
    }

    #[test]
    fn step_sizes() {
        let h = Hyperparameters::default();
        assert_eq!(step_size(1, &h).unwrap(), 1.0);
        assert!((step_size(16, &h).unwrap() - 0.125).abs() < 1e-15);
        let h2 = Hyperparameters {
            t0: 1000.0,
            zeta: 0.5,
            ..h
        };
        let r = step_size(1, &h2).unwrap();
        assert!((r - 1001f64.powf(-0.5)).abs() < 1e-15);
        assert!(r < 0.032);
        assert!(step_size(0, &h).is_err());
    }

    #[test]
    fn zero_step_leaves_state_unchanged() {
        let mut rng = seeded(1);
        let h = Hyperparameters::with_k(4);
        let prior = prior_natural(&h, 3).unwrap();
        let state = random_state(4, 3, &mut rng);
        let batch = vec![random_stats(4, 3, &mut rng)];
        let next = svi_step(&state, &prior, &batch, 10, 0.0).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn empty_features_give_prior_counts() {
        let h = Hyperparameters::with_k(5);
        let prior = prior_natural(&h, 2).unwrap();
        let n = 12;
        let stats: Vec<_> = (0..n)
            .map(|_| {
                let mut s = NaturalStats::zeros(5, 2);
                s.z_comp_sum = vec![1.0; 5];
                s
            })
            .collect();
        let next = full_batch_cavi_update(&prior, &stats).unwrap();
        for kk in 0..5 {
            assert!((next.a[kk] - 2.0).abs() < 1e-15);
            assert!((next.b[kk] - (10.0 * 4.0 / 5.0 + n as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_step_is_idempotent_for_fixed_stats() {
        let mut rng = seeded(4);
        let h = Hyperparameters::with_k(3);
        let prior = prior_natural(&h, 2).unwrap();
        let state = random_state(3, 2, &mut rng);
        let batch: Vec<_> = (0..4).map(|_| random_stats(3, 2, &mut rng)).collect();
        let once = svi_step(&state, &prior, &batch, 4, 1.0).unwrap();
        let twice = svi_step(&once, &prior, &batch, 4, 1.0).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn sample_global_concentrates_for_huge_precision() {
        let mut rng = seeded(2);
        let mut state = random_state(3, 4, &mut rng);
        state.tau.fill(1e12);
        state.mu = Array2::from_shape_fn((3, 4), |(k, d)| (k as f64 - d as f64) * 1e12);
        let beta = sample_global(&state, &mut rng).unwrap();
        for ((k, d), &p) in beta.phi.indexed_iter() {
            assert!((p - (k as f64 - d as f64)).abs() < 1e-4);
        }
    }

    #[test]
    fn sampled_noise_precision_mean() {
        let mut rng = seeded(3);
        let mut state = random_state(2, 2, &mut rng);
        state.c = 3.0;
        state.d = 1.5;
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_global(&state, &mut rng).unwrap().gamma_obs)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let se = (3.0f64).sqrt() / 1.5 / (n as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sample_global_is_deterministic() {
        let state = random_state(4, 3, &mut seeded(8));
        let a = sample_global(&state, &mut seeded(1)).unwrap();
        let b = sample_global(&state, &mut seeded(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expected_moments_closed_forms() {
        let mut state = random_state(2, 3, &mut seeded(5));
        state.a[0] = 2.5;
        state.b[0] = 2.5;
        state.c = 2.0;
        state.d = 4.0;
        let m = expected_global(&state);
        assert!(m.logit_pi[0].abs() < 1e-14);
        assert_eq!(m.gamma_obs, 0.5);
        let second = m.phi_second_moment();
        let direct: f64 = (0..3)
            .map(|d| (state.mu[[1, d]] / state.tau[[1, d]]).powi(2) + 1.0 / state.tau[[1, d]])
            .sum();
        assert!((second[1] - direct).abs() < 1e-12);
    }

    #[test]
    fn expected_moments_match_monte_carlo() {
        let mut rng = seeded(13);
        let mut state = random_state(2, 2, &mut rng);
        state.a = vec![1.7, 4.0];
        state.b = vec![3.2, 0.9];
        state.tau.fill(2.0);
        let m = expected_global(&state);
        let n = 1_000_000usize;
        let (mut s_logit, mut s_logit2) = (0.0, 0.0);
        let (mut s_phi, mut s_phi2) = (0.0, 0.0);
        for _ in 0..n {
            let b = sample_global(&state, &mut rng).unwrap();
            let l = (b.pi[0] / (1.0 - b.pi[0])).ln();
            s_logit += l;
            s_logit2 += l * l;
            let p = b.phi[[1, 1]];
            s_phi += p * p;
            s_phi2 += p.powi(4);
        }
        let nf = n as f64;
        let check = |s: f64, s2: f64, target: f64| {
            let mean = s / nf;
            let se = ((s2 / nf - mean * mean) / nf).sqrt();
            assert!((mean - target).abs() < 3.0 * se, "{mean} vs {target} (se {se})");
        };
        check(s_logit, s_logit2, m.logit_pi[0]);
        let target = m.phi[[1, 1]].powi(2) + m.phi_var.as_ref().unwrap()[[1, 1]];
        check(s_phi, s_phi2, target);
    }

    #[test]
    fn mismatched_stats_are_rejected() {
        let h = Hyperparameters::with_k(3);
        let prior = prior_natural(&h, 2).unwrap();
        let bad = NaturalStats::zeros(4, 2);
        assert!(svi_step(&prior, &prior, &[bad], 1, 0.5).is_err());
        assert!(svi_step(&prior, &prior, &[], 1, 0.5).is_err());
    }

    #[test]
    fn negative_result_is_degenerate() {
        let h = Hyperparameters::with_k(2);
        let prior = prior_natural(&h, 1).unwrap();
        let mut s = NaturalStats::zeros(2, 1);
        s.d_stat = -100.0;
        assert!(matches!(
            svi_step(&prior, &prior, &[s], 1, 1.0),
            Err(BpfaError::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn step_preserves_invariants(seed in any::<u64>(), rho in 0.0f64..=1.0, n in 1usize..1000) {
            let mut rng = seeded(seed);
            let (k, d) = (3, 4);
            let h = Hyperparameters::with_k(k);
            let prior = prior_natural(&h, d).unwrap();
            let state = random_state(k, d, &mut rng);
            let batch: Vec<_> = (0..3).map(|_| random_stats(k, d, &mut rng)).collect();
            let next = svi_step(&state, &prior, &batch, n, rho).unwrap();
            prop_assert!(next.validate().is_ok());
            prop_assert!(next.tau.iter().all(|&t| t >= d as f64 - 1e-9));
        }

        #[test]
        fn step_is_affine_in_rho(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let (k, d) = (2, 3);
            let h = Hyperparameters::with_k(k);
            let prior = prior_natural(&h, d).unwrap();
            let state = random_state(k, d, &mut rng);
            let batch: Vec<_> = (0..2).map(|_| random_stats(k, d, &mut rng)).collect();
            let s0 = svi_step(&state, &prior, &batch, 50, 0.0).unwrap();
            let s1 = svi_step(&state, &prior, &batch, 50, 1.0).unwrap();
            let mid = svi_step(&state, &prior, &batch, 50, 0.5).unwrap();
            let close = |x: f64, y: f64, z: f64| (x - 0.5 * (y + z)).abs() <= 1e-12 * (1.0 + x.abs());
            for kk in 0..k {
                prop_assert!(close(mid.a[kk], s0.a[kk], s1.a[kk]));
                prop_assert!(close(mid.b[kk], s0.b[kk], s1.b[kk]));
            }
            prop_assert!(close(mid.c, s0.c, s1.c));
            prop_assert!(close(mid.d, s0.d, s1.d));
            prop_assert!(close(mid.f, s0.f, s1.f));
            for ((m, a), b) in mid.mu.iter().zip(&s0.mu).zip(&s1.mu) {
                prop_assert!(close(*m, *a, *b));
            }
            for ((m, a), b) in mid.tau.iter().zip(&s0.tau).zip(&s1.tau) {
                prop_assert!(close(*m, *a, *b));
            }
        }

        #[test]
        fn reduction_order_is_immaterial(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let items: Vec<_> = (0..9).map(|_| random_stats(3, 3, &mut rng)).collect();
            let forward = NaturalStats::sum(3, 3, &items);
            let backward = NaturalStats::sum(3, 3, items.iter().rev());
            let rel = |a: f64, b: f64| (a - b).abs() <= 1e-10 * (1.0 + a.abs());
            prop_assert!(rel(forward.d_stat, backward.d_stat));
            for (a, b) in forward.mu_stat.iter().zip(&backward.mu_stat) {
                prop_assert!(rel(*a, *b));
            }
        }
    }
}
