//! The truncated beta-Bernoulli factor model.
//!
//! Observations follow `y_i = (z_i ∘ w_i) Φ + ε_i` with `z_ik ~ Bernoulli(π_k)`,
//! `π_k ~ Beta(a/K, b(K-1)/K)`, `w_i ~ N(0, γ_w⁻¹ I)`, `φ_k ~ N(0, D⁻¹ I)` and
//! `ε_i ~ N(0, γ_obs⁻¹ I)`. The precisions carry Gamma priors during inference.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BpfaError, Result};
use crate::math::{log_beta_pdf, log_gamma_pdf, log_normal_pdf};
use crate::rng::Rng;

/// Smallest distance from {0, 1} kept for sampled feature probabilities.
pub const PI_FLOOR: f64 = 1e-300;
pub const PI_CEIL: f64 = 1.0 - 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Beta-process mass.
    pub a: f64,
    /// Beta-process concentration.
    pub b: f64,
    /// Gamma shape for the noise precision.
    pub c_prior: f64,
    /// Gamma rate for the noise precision.
    pub d_prior: f64,
    /// Gamma shape for the weight precision.
    pub e_prior: f64,
    /// Gamma rate for the weight precision.
    pub f_prior: f64,
    /// Truncation level.
    pub k: usize,
    pub t0: f64,
    pub zeta: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            a: 10.0,
            b: 10.0,
            c_prior: 1.0,
            d_prior: 10.0,
            e_prior: 1.0,
            f_prior: 1.0,
            k: 40,
            t0: 0.0,
            zeta: 0.75,
        }
    }
}

impl Hyperparameters {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("a", self.a),
            ("b", self.b),
            ("c_prior", self.c_prior),
            ("d_prior", self.d_prior),
            ("e_prior", self.e_prior),
            ("f_prior", self.f_prior),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(BpfaError::InvalidHyperparameters(format!(
                    "{name} must be a finite positive real, got {v}"
                )));
            }
        }
        // K = 1 makes the second Beta parameter b(K-1)/K vanish.
        if self.k < 2 {
            return Err(BpfaError::InvalidHyperparameters(format!(
                "truncation level K must be at least 2, got {}",
                self.k
            )));
        }
        if !(self.t0.is_finite() && self.t0 >= 0.0) {
            return Err(BpfaError::InvalidHyperparameters(format!(
                "t0 must be nonnegative, got {}",
                self.t0
            )));
        }
        if !(self.zeta > 0.5 && self.zeta <= 1.0) {
            return Err(BpfaError::InvalidHyperparameters(format!(
                "zeta must lie in (0.5, 1], got {}",
                self.zeta
            )));
        }
        Ok(())
    }

    /// Prior Beta parameters `(a/K, b(K-1)/K)` shared by every feature.
    pub fn beta_prior(&self) -> (f64, f64) {
        let k = self.k as f64;
        (self.a / k, self.b * (k - 1.0) / k)
    }
}

/// One concrete draw of the global variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSample {
    pub pi: Vec<f64>,
    /// K × D loadings; row `k` is `φ_k`.
    pub phi: Array2<f64>,
    pub gamma_w: f64,
    pub gamma_obs: f64,
}

impl GlobalSample {
    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn d(&self) -> usize {
        self.phi.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.nrows() != self.pi.len() {
            return Err(BpfaError::Shape(format!(
                "phi has {} rows but pi has {} entries",
                self.phi.nrows(),
                self.pi.len()
            )));
        }
        if self.pi.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(BpfaError::InvalidArgument("pi entries must lie in (0, 1)".into()));
        }
        if !(self.gamma_w > 0.0 && self.gamma_obs > 0.0) {
            return Err(BpfaError::InvalidArgument("precisions must be positive".into()));
        }
        Ok(())
    }
}

/// Local variables of a single datum.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSample {
    pub z: Vec<bool>,
    pub w: Vec<f64>,
}

impl LocalSample {
    pub fn zeros(k: usize) -> Self {
        Self {
            z: vec![false; k],
            w: vec![0.0; k],
        }
    }

    /// `z ∘ w` as reals.
    pub fn loadings(&self) -> impl Iterator<Item = f64> + '_ {
        self.z.iter().zip(&self.w).map(|(&z, &w)| if z { w } else { 0.0 })
    }
}

/// A (possibly partially observed) data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: Array2<f64>,
    /// `true` marks an observed entry.
    pub mask: Array2<bool>,
    pub row_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(y: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if y.dim() != mask.dim() {
            return Err(BpfaError::Shape(format!(
                "data is {:?} but mask is {:?}",
                y.dim(),
                mask.dim()
            )));
        }
        let row_ids = (0..y.nrows()).collect();
        Ok(Self { y, mask, row_ids })
    }

    pub fn fully_observed(y: Array2<f64>) -> Self {
        let mask = Array2::from_elem(y.dim(), true);
        let row_ids = (0..y.nrows()).collect();
        Self { y, mask, row_ids }
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn d(&self) -> usize {
        self.y.ncols()
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Rejects rows without a single observed entry.
    pub fn check_rows_observed(&self) -> Result<()> {
        for (i, row) in self.mask.rows().into_iter().enumerate() {
            if !row.iter().any(|&m| m) {
                return Err(BpfaError::InvalidArgument(format!(
                    "row {} (id {}) has no observed entries",
                    i, self.row_ids[i]
                )));
            }
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> (&[f64], &[bool]) {
        (
            self.y.row(i).to_slice().expect("standard layout"),
            self.mask.row(i).to_slice().expect("standard layout"),
        )
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let d = self.d();
        let mut y = Array2::zeros((rows.len(), d));
        let mut mask = Array2::from_elem((rows.len(), d), false);
        for (r, &i) in rows.iter().enumerate() {
            y.row_mut(r).assign(&self.y.row(i));
            mask.row_mut(r).assign(&self.mask.row(i));
        }
        Dataset {
            y,
            mask,
            row_ids: rows.iter().map(|&i| self.row_ids[i]).collect(),
        }
    }
}

/// Draws `π_k ~ Beta(a/K, b(K-1)/K)` independently for each of the K atoms.
pub fn sample_truncated_beta_process(hyper: &Hyperparameters, rng: &mut Rng) -> Result<Vec<f64>> {
    hyper.validate()?;
    let (alpha, beta) = hyper.beta_prior();
    let dist = Beta::new(alpha, beta)
        .map_err(|e| BpfaError::InvalidHyperparameters(format!("beta prior: {e}")))?;
    Ok((0..hyper.k)
        .map(|_| dist.sample(rng).clamp(PI_FLOOR, PI_CEIL))
        .collect())
}

/// Draws data rows given fixed global variables. Every entry is observed.
pub fn sample_from_globals(
    beta: &GlobalSample,
    n: usize,
    rng: &mut Rng,
) -> (Dataset, Vec<LocalSample>) {
    let (k, d) = (beta.k(), beta.d());
    let w_sd = beta.gamma_w.powf(-0.5);
    let noise_sd = beta.gamma_obs.powf(-0.5);
    let mut y = Array2::zeros((n, d));
    let mut locals = Vec::with_capacity(n);
    for i in 0..n {
        let mut local = LocalSample::zeros(k);
        for kk in 0..k {
            local.z[kk] = rng.gen::<f64>() < beta.pi[kk];
            let e: f64 = StandardNormal.sample(rng);
            local.w[kk] = w_sd * e;
        }
        let mut row = y.row_mut(i);
        for (kk, l) in local.loadings().enumerate() {
            if l != 0.0 {
                row.scaled_add(l, &beta.phi.row(kk));
            }
        }
        for v in row.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += noise_sd * e;
        }
        locals.push(local);
    }
    (Dataset::fully_observed(y), locals)
}

/// Draws a synthetic dataset from the prior with fixed precisions.
pub fn sample_generative(
    hyper: &Hyperparameters,
    n: usize,
    d: usize,
    gamma_w: f64,
    gamma_obs: f64,
    rng: &mut Rng,
) -> Result<(Dataset, GlobalSample, Vec<LocalSample>)> {
    if n == 0 || d == 0 {
        return Err(BpfaError::InvalidArgument("N and D must be at least 1".into()));
    }
    if !(gamma_w > 0.0 && gamma_obs > 0.0) {
        return Err(BpfaError::InvalidArgument("precisions must be positive".into()));
    }
    let pi = sample_truncated_beta_process(hyper, rng)?;
    let phi_sd = (d as f64).powf(-0.5);
    let phi = Array2::from_shape_simple_fn((hyper.k, d), || {
        let e: f64 = StandardNormal.sample(rng);
        phi_sd * e
    });
    let beta = GlobalSample {
        pi,
        phi,
        gamma_w,
        gamma_obs,
    };
    let (data, locals) = sample_from_globals(&beta, n, rng);
    Ok((data, beta, locals))
}

/// Log prior density of the global variables.
pub fn log_prior_globals(beta: &GlobalSample, hyper: &Hyperparameters) -> f64 {
    let (alpha, bpar) = hyper.beta_prior();
    let d = beta.d() as f64;
    let mut lp: f64 = beta.pi.iter().map(|&p| log_beta_pdf(p, alpha, bpar)).sum();
    lp += beta.phi.iter().map(|&x| log_normal_pdf(x, 0.0, d)).sum::<f64>();
    lp += log_gamma_pdf(beta.gamma_obs, hyper.c_prior, hyper.d_prior);
    lp += log_gamma_pdf(beta.gamma_w, hyper.e_prior, hyper.f_prior);
    lp
}

/// Exact log joint density `log p(β, ψ, Y)`; the likelihood ranges over observed entries only.
pub fn log_joint(
    beta: &GlobalSample,
    psi: &[LocalSample],
    data: &Dataset,
    hyper: &Hyperparameters,
) -> Result<f64> {
    if psi.len() != data.n() {
        return Err(BpfaError::Shape(format!(
            "{} local samples for {} rows",
            psi.len(),
            data.n()
        )));
    }
    if data.n() > 0 && beta.d() != data.d() {
        return Err(BpfaError::Shape(format!(
            "phi has {} columns, data has {}",
            beta.d(),
            data.d()
        )));
    }
    let mut lp = log_prior_globals(beta, hyper);
    for (i, local) in psi.iter().enumerate() {
        if local.z.len() != beta.k() || local.w.len() != beta.k() {
            return Err(BpfaError::Shape(format!("local sample {i} has wrong length")));
        }
        for (kk, &z) in local.z.iter().enumerate() {
            let p = beta.pi[kk];
            lp += if z { p.ln() } else { (-p).ln_1p() };
            lp += log_normal_pdf(local.w[kk], 0.0, beta.gamma_w);
        }
        let (y, mask) = data.row(i);
        let mut fit = vec![0.0; beta.d()];
        for (kk, l) in local.loadings().enumerate() {
            if l != 0.0 {
                for (f, &p) in fit.iter_mut().zip(beta.phi.row(kk)) {
                    *f += l * p;
                }
            }
        }
        for j in 0..y.len() {
            if mask[j] {
                lp += log_normal_pdf(y[j], fit[j], beta.gamma_obs);
            }
        }
    }
    Ok(lp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{ln_gamma, LN_2PI};
    use crate::rng::seeded;

    fn tiny_beta() -> GlobalSample {
        GlobalSample {
            pi: vec![0.3, 0.6],
            phi: ndarray::array![[0.5], [-1.0]],
            gamma_w: 2.0,
            gamma_obs: 3.0,
        }
    }

    #[test]
    fn k_equal_one_is_rejected() {
        let h = Hyperparameters::with_k(1);
        assert!(h.validate().is_err());
        assert!(sample_truncated_beta_process(&h, &mut seeded(0)).is_err());
    }

    #[test]
    fn zeta_outside_range_is_rejected() {
        let mut h = Hyperparameters { zeta: 0.5, ..Hyperparameters::default() };
        assert!(h.validate().is_err());
        h.zeta = 1.0;
        assert!(h.validate().is_ok());
    }

    #[test]
    fn beta_process_mean_matches_beta_mean() {
        let h = Hyperparameters::with_k(10);
        let mut rng = seeded(11);
        let reps = 10_000;
        let mut sum = 0.0;
        for _ in 0..reps {
            sum += sample_truncated_beta_process(&h, &mut rng).unwrap().iter().sum::<f64>();
        }
        let mean = sum / (reps * 10) as f64;
        assert!((mean - 0.1).abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn beta_process_total_mass_near_a_over_b() {
        // E[Σπ] = K·(a/K)/(a/K + b(K-1)/K) = 100·0.1/10 = 1.0 for a=b=10, K=100.
        let h = Hyperparameters::with_k(100);
        let mut rng = seeded(5);
        let reps = 20_000;
        let total: f64 = (0..reps)
            .map(|_| sample_truncated_beta_process(&h, &mut rng).unwrap().iter().sum::<f64>())
            .sum();
        let mean = total / reps as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean total mass {mean}");
    }

    #[test]
    fn beta_process_is_deterministic() {
        let h = Hyperparameters::default();
        let a = sample_truncated_beta_process(&h, &mut seeded(3)).unwrap();
        let b = sample_truncated_beta_process(&h, &mut seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_limit_reproduces_loadings() {
        let h = Hyperparameters::with_k(8);
        let (data, beta, locals) =
            sample_generative(&h, 50, 6, 1.0, 1e12, &mut seeded(1)).unwrap();
        for (i, local) in locals.iter().enumerate() {
            for j in 0..6 {
                let fit: f64 = local
                    .loadings()
                    .enumerate()
                    .map(|(k, l)| l * beta.phi[[k, j]])
                    .sum();
                assert!((data.y[[i, j]] - fit).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn empirical_noise_variance_matches_gamma_obs() {
        let h = Hyperparameters::with_k(80);
        let (data, beta, locals) =
            sample_generative(&h, 2_500, 40, 1.0, 100.0, &mut seeded(2)).unwrap();
        let mut ss = 0.0;
        for (i, local) in locals.iter().enumerate() {
            for j in 0..40 {
                let fit: f64 = local
                    .loadings()
                    .enumerate()
                    .map(|(k, l)| l * beta.phi[[k, j]])
                    .sum();
                ss += (data.y[[i, j]] - fit).powi(2);
            }
        }
        let var = ss / (2_500.0 * 40.0);
        assert!((var - 0.01).abs() < 0.001, "noise variance {var}");
    }

    #[test]
    fn empty_feature_set_gives_pure_noise() {
        let beta = GlobalSample {
            pi: vec![PI_FLOOR; 5],
            phi: Array2::from_elem((5, 10), 1.0),
            gamma_w: 1.0,
            gamma_obs: 4.0,
        };
        let (data, locals) = sample_from_globals(&beta, 4_000, &mut seeded(4));
        assert!(locals.iter().all(|l| l.z.iter().all(|&z| !z)));
        let n = data.y.len() as f64;
        let mean = data.y.sum() / n;
        let var = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 0.25).abs() < 3.0 * 0.25 * (2.0 / n).sqrt() + 1e-3, "var {var}");
    }

    #[test]
    fn generation_is_bitwise_reproducible() {
        let h = Hyperparameters::with_k(6);
        let a = sample_generative(&h, 20, 5, 1.0, 100.0, &mut seeded(9)).unwrap();
        let b = sample_generative(&h, 20, 5, 1.0, 100.0, &mut seeded(9)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn log_joint_of_empty_data_is_prior() {
        let h = Hyperparameters::default();
        let beta = tiny_beta();
        let data = Dataset::fully_observed(Array2::zeros((0, 1)));
        let lj = log_joint(&beta, &[], &data, &h).unwrap();
        assert_eq!(lj, log_prior_globals(&beta, &h));
    }

    #[test]
    fn log_joint_single_datum_by_hand() {
        // K=2 only because K=1 is invalid; hand evaluation of every density term.
        let h = Hyperparameters {
            a: 2.0,
            b: 3.0,
            c_prior: 1.5,
            d_prior: 2.5,
            e_prior: 2.0,
            f_prior: 0.5,
            k: 2,
            t0: 0.0,
            zeta: 0.75,
        };
        let beta = tiny_beta();
        let local = LocalSample {
            z: vec![true, false],
            w: vec![0.8, -0.4],
        };
        let data = Dataset::fully_observed(ndarray::array![[0.7]]);
        let lj = log_joint(&beta, &[local], &data, &h).unwrap();

        let (al, be) = (1.0, 1.5);
        let lbeta = ln_gamma(al) + ln_gamma(be) - ln_gamma(al + be);
        let mut expect = 0.0;
        for &p in &[0.3f64, 0.6] {
            expect += (al - 1.0) * p.ln() + (be - 1.0) * (1.0 - p).ln() - lbeta;
        }
        // φ prior with precision D = 1.
        for &x in &[0.5f64, -1.0] {
            expect += -0.5 * LN_2PI - 0.5 * x * x;
        }
        expect += 1.5 * 2.5f64.ln() - ln_gamma(1.5) + 0.5 * 3f64.ln() - 2.5 * 3.0;
        expect += 2.0 * 0.5f64.ln() - ln_gamma(2.0) + 2f64.ln() - 0.5 * 2.0;
        expect += 0.3f64.ln() + 0.4f64.ln();
        for &w in &[0.8f64, -0.4] {
            expect += 0.5 * (2f64.ln() - LN_2PI) - w * w;
        }
        let resid = 0.7 - 0.8 * 0.5;
        expect += 0.5 * (3f64.ln() - LN_2PI) - 1.5 * resid * resid;
        assert!((lj - expect).abs() < 1e-12, "{lj} vs {expect}");
    }

    #[test]
    fn doubling_noise_precision_changes_only_likelihood_and_prior() {
        let h = Hyperparameters::with_k(4);
        let (data, mut beta, locals) =
            sample_generative(&h, 7, 3, 1.0, 9.0, &mut seeded(21)).unwrap();
        beta.gamma_obs = 9.0;
        let l1 = log_joint(&beta, &locals, &data, &h).unwrap();
        let mut beta2 = beta.clone();
        beta2.gamma_obs = 18.0;
        let l2 = log_joint(&beta2, &locals, &data, &h).unwrap();
        let mut rss = 0.0;
        for (i, local) in locals.iter().enumerate() {
            for j in 0..3 {
                let fit: f64 = local
                    .loadings()
                    .enumerate()
                    .map(|(k, l)| l * beta.phi[[k, j]])
                    .sum();
                rss += (data.y[[i, j]] - fit).powi(2);
            }
        }
        let n_obs = 21.0;
        let lik = 0.5 * n_obs * 2f64.ln() - 0.5 * 9.0 * rss;
        let prior = (h.c_prior - 1.0) * 2f64.ln() - h.d_prior * 9.0;
        assert!((l2 - l1 - (lik + prior)).abs() < 1e-9);
    }

    #[test]
    fn log_joint_is_neg_inf_at_boundary_probabilities() {
        let h = Hyperparameters::default();
        let mut beta = tiny_beta();
        beta.pi[1] = 1.0;
        let local = LocalSample {
            z: vec![true, false],
            w: vec![0.1, 0.1],
        };
        let data = Dataset::fully_observed(ndarray::array![[0.0]]);
        assert_eq!(
            log_joint(&beta, &[local], &data, &h).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn log_joint_slice_integrates_to_gaussian_normaliser() {
        // Integrating exp(log_joint) over one weight recovers the joint with that weight
        // marginalised; for an unobserved datum this is the weight prior normaliser.
        let h = Hyperparameters::default();
        let beta = tiny_beta();
        let mut data = Dataset::fully_observed(ndarray::array![[0.4]]);
        data.mask[[0, 0]] = false;
        let base = LocalSample {
            z: vec![true, true],
            w: vec![0.0, 0.2],
        };
        let at = |w: f64| {
            let mut l = base.clone();
            l.w[0] = w;
            log_joint(&beta, &[l], &data, &h).unwrap()
        };
        let reference = at(0.0) - log_normal_pdf(0.0, 0.0, beta.gamma_w);
        let n = 20_000;
        let step = 20.0 / n as f64;
        let mut integral = 0.0;
        for s in 0..=n {
            let w = -10.0 + s as f64 * step;
            let weight = if s == 0 || s == n { 0.5 } else { 1.0 };
            integral += weight * (at(w) - reference).exp();
        }
        integral *= step;
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn rows_without_observations_are_rejected() {
        let mut data = Dataset::fully_observed(Array2::zeros((3, 2)));
        data.mask[[1, 0]] = false;
        data.mask[[1, 1]] = false;
        assert!(data.check_rows_observed().is_err());
    }
}
