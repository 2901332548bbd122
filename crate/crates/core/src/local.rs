//! Local inference strategies.
//!
//! Each strategy sees one datum and a view of the global variables, either the
//! expected moments of `q(β)` (MF-SVI, Mimno-SVI) or a single draw `β ~ q(β)`
//! (MF-SSVI, Titsias-SSVI, Gibbs-SSVI), and returns that datum's expected
//! contribution to the global natural parameters.
//!
//! Everything a strategy needs from a datum reduces to three quantities over the
//! observed dimensions `O`: `r_k = Σ_O φ̄_kd y_d`, the Gram matrix
//! `S_kj = Σ_O φ̄_kd φ̄_jd` (plus `Σ_O Var φ_kd` on the diagonal) and `‖y‖²_O`.

use std::fmt;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BpfaError, Result};
use crate::math::{bernoulli_entropy, sigmoid};
use crate::model::{GlobalSample, LocalSample};
use crate::rng::Rng;
use crate::variational::{GlobalMoments, NaturalStats};

/// Bernoulli means are kept inside `[THETA_EPS, 1 - THETA_EPS]`.
pub const THETA_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "MF_SVI")]
    MfSvi,
    #[serde(rename = "MF_SSVI")]
    MfSsvi,
    #[serde(rename = "TITSIAS_SSVI")]
    TitsiasSsvi,
    #[serde(rename = "MIMNO_SVI")]
    MimnoSvi,
    #[serde(rename = "GIBBS_SSVI")]
    GibbsSsvi,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::MfSvi,
        Strategy::MfSsvi,
        Strategy::TitsiasSsvi,
        Strategy::MimnoSvi,
        Strategy::GibbsSsvi,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::MfSvi => "MF_SVI",
            Strategy::MfSsvi => "MF_SSVI",
            Strategy::TitsiasSsvi => "TITSIAS_SSVI",
            Strategy::MimnoSvi => "MIMNO_SVI",
            Strategy::GibbsSsvi => "GIBBS_SSVI",
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Strategy::MfSvi => "mf-svi",
            Strategy::MfSsvi => "mf-ssvi",
            Strategy::TitsiasSsvi => "titsias-ssvi",
            Strategy::MimnoSvi => "mimno-svi",
            Strategy::GibbsSsvi => "gibbs-ssvi",
        }
    }

    /// Structured strategies condition the local family on a sampled β.
    pub fn uses_sampled_globals(self) -> bool {
        matches!(
            self,
            Strategy::MfSsvi | Strategy::TitsiasSsvi | Strategy::GibbsSsvi
        )
    }

    /// Strategies that estimate local expectations with a Gibbs chain.
    pub fn is_sampler(self) -> bool {
        matches!(self, Strategy::MimnoSvi | Strategy::GibbsSsvi)
    }

    pub fn family(self) -> Option<VariationalFamily> {
        match self {
            Strategy::MfSvi | Strategy::MfSsvi => Some(VariationalFamily::MeanField),
            Strategy::TitsiasSsvi => Some(VariationalFamily::Titsias),
            Strategy::MimnoSvi | Strategy::GibbsSsvi => None,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = BpfaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.cli_name() == norm)
            .ok_or_else(|| BpfaError::Config(format!("unknown strategy '{s}'")))
    }
}

/// Parametric local families optimised by coordinate ascent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariationalFamily {
    /// `q(z_k) q(w_k)` fully factorised.
    MeanField,
    /// `q(z_k) q(w_k | z_k)` with the `z_k = 0` branch fixed to the weight prior.
    Titsias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GibbsKernel {
    /// Draws `z_k` with `w_k` integrated out, then `w_k | z_k`.
    Blocked,
    /// Draws `z_k | w_k`, then `w_k | z_k`.
    SingleSite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsOptions {
    pub burn_in: usize,
    pub n_samples: usize,
    pub kernel: GibbsKernel,
    pub random_scan: bool,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        Self {
            burn_in: 3,
            n_samples: 3,
            kernel: GibbsKernel::Blocked,
            random_scan: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalOptions {
    pub max_sweeps: usize,
    pub rel_tol: f64,
    pub gibbs: GibbsOptions,
    /// Pins every weight to this value; only `z` is inferred.
    pub fixed_weight: Option<f64>,
    /// Drop the noise precision from the loading-mean statistic.
    pub unscaled_mu_stat: bool,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 100,
            rel_tol: 1e-8,
            gibbs: GibbsOptions::default(),
            fixed_weight: None,
            unscaled_mu_stat: false,
        }
    }
}

impl LocalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.gibbs.n_samples == 0 {
            return Err(BpfaError::Config("n_samples must be at least 1".into()));
        }
        if self.max_sweeps == 0 {
            return Err(BpfaError::Config("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalVariationalParams {
    pub theta: Vec<f64>,
    pub nu: Vec<f64>,
    pub kappa: Vec<f64>,
}

impl LocalVariationalParams {
    /// `θ = 0.5`, `ν = 0`, `κ` at the weight prior precision.
    pub fn initial(k: usize, gamma_w: f64) -> Self {
        Self {
            theta: vec![0.5; k],
            nu: vec![0.0; k],
            kappa: vec![gamma_w; k],
        }
    }

    pub fn k(&self) -> usize {
        self.theta.len()
    }

    fn clamp(&mut self) {
        for t in self.theta.iter_mut() {
            *t = t.clamp(THETA_EPS, 1.0 - THETA_EPS);
        }
    }

    /// `(E[w_k | active], E[w_k² | active])`.
    fn weight_moments(&self, k: usize, fixed: Option<f64>) -> (f64, f64) {
        match fixed {
            Some(w) => (w, w * w),
            None => {
                let m = self.nu[k] / self.kappa[k];
                (m, m * m + 1.0 / self.kappa[k])
            }
        }
    }

    /// Draws `(z, w)` from the local family.
    pub fn draw(&self, family: VariationalFamily, gamma_w: f64, fixed: Option<f64>, rng: &mut Rng) -> LocalSample {
        let k = self.k();
        let mut s = LocalSample::zeros(k);
        for kk in 0..k {
            s.z[kk] = rng.gen::<f64>() < self.theta[kk];
            let e: f64 = StandardNormal.sample(rng);
            s.w[kk] = match fixed {
                Some(w) => w,
                None => match (family, s.z[kk]) {
                    (VariationalFamily::Titsias, false) => e / gamma_w.sqrt(),
                    _ => self.nu[kk] / self.kappa[kk] + e / self.kappa[kk].sqrt(),
                },
            };
        }
        s
    }

    /// `E[z_k w_k]` under the family.
    pub fn mean_loadings(&self, fixed: Option<f64>) -> Vec<f64> {
        (0..self.k())
            .map(|k| self.theta[k] * self.weight_moments(k, fixed).0)
            .collect()
    }
}

/// Gram matrix of the loading means over `obs`, with loading variances on the diagonal.
pub fn gram_over(view: &GlobalMoments, obs: &[usize]) -> Vec<f64> {
    let k = view.k();
    let mut gram = vec![0.0; k * k];
    let all = obs.len() == view.d();
    for a in 0..k {
        let ra = view.phi.row(a);
        let ra = ra.as_slice().expect("standard layout");
        for b in a..k {
            let rb = view.phi.row(b);
            let rb = rb.as_slice().expect("standard layout");
            let v: f64 = if all {
                ra.iter().zip(rb).map(|(x, y)| x * y).sum()
            } else {
                obs.iter().map(|&d| ra[d] * rb[d]).sum()
            };
            gram[a * k + b] = v;
            gram[b * k + a] = v;
        }
        if let Some(var) = &view.phi_var {
            let vr = var.row(a);
            let extra: f64 = if all {
                vr.sum()
            } else {
                obs.iter().map(|&d| vr[d]).sum()
            };
            gram[a * k + a] += extra;
        }
    }
    gram
}

/// Precomputed quantities for one datum against one global view.
#[derive(Debug, Clone)]
pub struct LocalProblem<'a> {
    pub view: &'a GlobalMoments,
    pub y: &'a [f64],
    pub obs: Vec<usize>,
    pub r: Vec<f64>,
    pub gram: Vec<f64>,
    pub y_sq: f64,
}

impl<'a> LocalProblem<'a> {
    pub fn new(view: &'a GlobalMoments, y: &'a [f64], mask: &[bool]) -> Result<Self> {
        Self::with_gram(view, y, mask, None)
    }

    /// `full_gram` is reused when every dimension of the datum is observed.
    pub fn with_gram(
        view: &'a GlobalMoments,
        y: &'a [f64],
        mask: &[bool],
        full_gram: Option<&[f64]>,
    ) -> Result<Self> {
        let d = view.d();
        if y.len() != d || mask.len() != d {
            return Err(BpfaError::Shape(format!(
                "datum has {} values and {} mask bits, loadings have {d} columns",
                y.len(),
                mask.len()
            )));
        }
        let obs: Vec<usize> = (0..d).filter(|&j| mask[j]).collect();
        let k = view.k();
        let r = (0..k)
            .map(|kk| {
                let row = view.phi.row(kk);
                obs.iter().map(|&j| row[j] * y[j]).sum()
            })
            .collect();
        let gram = match full_gram {
            Some(g) if obs.len() == d => {
                debug_assert_eq!(g.len(), k * k);
                g.to_vec()
            }
            _ => gram_over(view, &obs),
        };
        let y_sq = obs.iter().map(|&j| y[j] * y[j]).sum();
        Ok(Self {
            view,
            y,
            obs,
            r,
            gram,
            y_sq,
        })
    }

    pub fn k(&self) -> usize {
        self.r.len()
    }

    #[inline]
    fn s(&self, a: usize, b: usize) -> f64 {
        self.gram[a * self.k() + b]
    }

    /// `g = S u`.
    fn gram_times(&self, u: &[f64]) -> Vec<f64> {
        let k = self.k();
        (0..k)
            .map(|a| {
                self.gram[a * k..(a + 1) * k]
                    .iter()
                    .zip(u)
                    .map(|(s, x)| s * x)
                    .sum()
            })
            .collect()
    }

    /// `½ E‖y - Σ z_k w_k φ_k‖²_O` given first moments `u_k = E[z_k w_k]` and
    /// second moments `q_k = E[z_k w_k²]`, assuming independence across features.
    fn half_expected_residual(&self, u: &[f64], q: &[f64]) -> f64 {
        let k = self.k();
        let g = self.gram_times(u);
        let mut quad = 0.0;
        for a in 0..k {
            quad += u[a] * g[a] + (q[a] - u[a] * u[a]) * self.s(a, a);
        }
        let lin: f64 = u.iter().zip(&self.r).map(|(x, r)| x * r).sum();
        0.5 * (self.y_sq - 2.0 * lin + quad)
    }

    /// Loading-mean and precision statistics shared by every strategy.
    fn loading_stats(&self, u: &[f64], q: &[f64], stats: &mut NaturalStats, weight: f64, literal_mu: bool) {
        let gamma = self.view.gamma_obs;
        let mu_scale = if literal_mu { 1.0 } else { gamma };
        let mut fit = vec![0.0; self.obs.len()];
        for (kk, &uk) in u.iter().enumerate() {
            if uk != 0.0 {
                let row = self.view.phi.row(kk);
                for (f, &j) in fit.iter_mut().zip(&self.obs) {
                    *f += uk * row[j];
                }
            }
        }
        for (kk, (&uk, &qk)) in u.iter().zip(q).enumerate() {
            let phi = self.view.phi.row(kk);
            let mut tau_row = stats.tau_stat.row_mut(kk);
            for &j in &self.obs {
                tau_row[j] += weight * gamma * qk;
            }
            if uk != 0.0 {
                let mut mu_row = stats.mu_stat.row_mut(kk);
                for (&j, &f) in self.obs.iter().zip(&fit) {
                    // y_d minus every other feature's contribution.
                    mu_row[j] += weight * mu_scale * uk * (self.y[j] - f + uk * phi[j]);
                }
            }
        }
    }
}

/// Result of optimising a parametric local family.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub params: LocalVariationalParams,
    /// Local ELBO after initialisation and after every sweep.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
}

impl LocalFit {
    pub fn elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("trace has the initial value")
    }
}

fn cross_residual(problem: &LocalProblem, g: &[f64], u: &[f64], k: usize) -> f64 {
    problem.r[k] - (g[k] - problem.s(k, k) * u[k])
}

/// Local ELBO up to constants that do not depend on the local parameters.
pub fn local_elbo(
    params: &LocalVariationalParams,
    problem: &LocalProblem,
    family: VariationalFamily,
    opts: &LocalOptions,
) -> f64 {
    let k = params.k();
    let view = problem.view;
    let (gamma, gamma_w) = (view.gamma_obs, view.gamma_w);
    let fixed = opts.fixed_weight;
    let mut u = vec![0.0; k];
    let mut q = vec![0.0; k];
    let mut elbo = 0.0;
    for kk in 0..k {
        let th = params.theta[kk];
        let (m, s) = params.weight_moments(kk, fixed);
        u[kk] = th * m;
        q[kk] = th * s;
        elbo += th * view.logit_pi[kk] + bernoulli_entropy(th);
        if fixed.is_none() {
            let kap = params.kappa[kk];
            match family {
                VariationalFamily::MeanField => {
                    elbo += -0.5 * gamma_w * s - 0.5 * kap.ln();
                }
                VariationalFamily::Titsias => {
                    elbo += -0.5 * gamma_w * (th * s + (1.0 - th) / gamma_w);
                    elbo += -0.5 * (th * (kap.ln() - 1.0) + (1.0 - th) * (gamma_w.ln() - 1.0));
                }
            }
        }
    }
    // -γ/2 E‖y - Σ z w φ‖² without the constant ‖y‖² term.
    elbo += -gamma * (problem.half_expected_residual(&u, &q) - 0.5 * problem.y_sq);
    elbo
}

/// Analytic gradient of [`local_elbo`] with respect to `(θ, ν, κ)`.
pub fn local_elbo_gradient(
    params: &LocalVariationalParams,
    problem: &LocalProblem,
    family: VariationalFamily,
    opts: &LocalOptions,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = params.k();
    let view = problem.view;
    let (gamma, gamma_w) = (view.gamma_obs, view.gamma_w);
    let fixed = opts.fixed_weight;
    let u = params.mean_loadings(fixed);
    let g = problem.gram_times(&u);
    let mut d_theta = vec![0.0; k];
    let mut d_nu = vec![0.0; k];
    let mut d_kappa = vec![0.0; k];
    for kk in 0..k {
        let th = params.theta[kk];
        let (m, s) = params.weight_moments(kk, fixed);
        let r = cross_residual(problem, &g, &u, kk);
        let skk = problem.s(kk, kk);
        let entropy = ((1.0 - th) / th).ln();
        if fixed.is_some() {
            d_theta[kk] = gamma * m * r - 0.5 * gamma * s * skk + view.logit_pi[kk] + entropy;
            continue;
        }
        let (nu, kap) = (params.nu[kk], params.kappa[kk]);
        let a = gamma * th * r;
        let (b, log_kappa_coef) = match family {
            VariationalFamily::MeanField => {
                d_theta[kk] = gamma * m * r - 0.5 * gamma * s * skk + view.logit_pi[kk] + entropy;
                (-0.5 * (gamma * th * skk + gamma_w), -0.5)
            }
            VariationalFamily::Titsias => {
                d_theta[kk] = gamma * m * r - 0.5 * (gamma * skk + gamma_w) * s + 0.5
                    - 0.5 * kap.ln()
                    + 0.5 * gamma_w.ln()
                    + view.logit_pi[kk]
                    + entropy;
                (-0.5 * th * (gamma * skk + gamma_w), -0.5 * th)
            }
        };
        d_nu[kk] = a / kap + b * 2.0 * nu / (kap * kap);
        d_kappa[kk] = -a * nu / (kap * kap) + b * (-2.0 * nu * nu / kap.powi(3) - 1.0 / (kap * kap))
            + log_kappa_coef / kap;
    }
    (d_theta, d_nu, d_kappa)
}

/// Closed-form block update of feature `kk`; returns the new `E[z_k w_k]`.
fn coordinate_update(
    params: &mut LocalVariationalParams,
    problem: &LocalProblem,
    family: VariationalFamily,
    opts: &LocalOptions,
    r: f64,
    kk: usize,
) -> f64 {
    let view = problem.view;
    let (gamma, gamma_w) = (view.gamma_obs, view.gamma_w);
    let skk = problem.s(kk, kk);
    let logodds = match (opts.fixed_weight, family) {
        (Some(w), _) => gamma * w * r - 0.5 * gamma * w * w * skk + view.logit_pi[kk],
        (None, VariationalFamily::MeanField) => {
            let th = params.theta[kk];
            let prec = gamma * th * skk + gamma_w;
            params.kappa[kk] = prec;
            params.nu[kk] = gamma * th * r;
            let m = params.nu[kk] / prec;
            let s = m * m + 1.0 / prec;
            gamma * m * r - 0.5 * gamma * s * skk + view.logit_pi[kk]
        }
        (None, VariationalFamily::Titsias) => {
            let prec = gamma * skk + gamma_w;
            params.kappa[kk] = prec;
            params.nu[kk] = gamma * r;
            let m = params.nu[kk] / prec;
            let s = m * m + 1.0 / prec;
            gamma * m * r - 0.5 * prec * s + 0.5 - 0.5 * prec.ln() + 0.5 * gamma_w.ln() + view.logit_pi[kk]
        }
    };
    params.theta[kk] = sigmoid(logodds).clamp(THETA_EPS, 1.0 - THETA_EPS);
    params.theta[kk] * params.weight_moments(kk, opts.fixed_weight).0
}

/// Cyclic coordinate ascent on the local ELBO. Every block update is the exact
/// maximiser, so the trace is non-decreasing.
pub fn optimize_local(
    problem: &LocalProblem,
    init: LocalVariationalParams,
    family: VariationalFamily,
    opts: &LocalOptions,
) -> LocalFit {
    let mut params = init;
    params.clamp();
    let k = params.k();
    let mut u = params.mean_loadings(opts.fixed_weight);
    let mut g = problem.gram_times(&u);
    let mut trace = vec![local_elbo(&params, problem, family, opts)];
    let mut converged = false;
    for _ in 0..opts.max_sweeps {
        for kk in 0..k {
            let r = cross_residual(problem, &g, &u, kk);
            let new_u = coordinate_update(&mut params, problem, family, opts, r, kk);
            let delta = new_u - u[kk];
            if delta != 0.0 {
                for (a, ga) in g.iter_mut().enumerate() {
                    *ga += delta * problem.s(a, kk);
                }
                u[kk] = new_u;
            }
        }
        // Refresh to keep incremental error from accumulating.
        g = problem.gram_times(&u);
        let elbo = local_elbo(&params, problem, family, opts);
        let prev = *trace.last().unwrap();
        trace.push(elbo);
        if (elbo - prev).abs() <= opts.rel_tol * elbo.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        debug!("local optimisation stopped after {} sweeps", opts.max_sweeps);
    }
    LocalFit {
        params,
        elbo_trace: trace,
        converged,
    }
}

/// Expected natural statistics under an optimised parametric family.
pub fn stats_from_variational(
    params: &LocalVariationalParams,
    problem: &LocalProblem,
    family: VariationalFamily,
    opts: &LocalOptions,
) -> NaturalStats {
    let (k, d) = (params.k(), problem.view.d());
    let gamma_w = problem.view.gamma_w;
    let mut stats = NaturalStats::zeros(k, d);
    let mut u = vec![0.0; k];
    let mut q = vec![0.0; k];
    let mut w_sq = 0.0;
    for kk in 0..k {
        let th = params.theta[kk];
        let (m, s) = params.weight_moments(kk, opts.fixed_weight);
        u[kk] = th * m;
        q[kk] = th * s;
        stats.z_sum[kk] = th;
        stats.z_comp_sum[kk] = 1.0 - th;
        w_sq += match (opts.fixed_weight, family) {
            (None, VariationalFamily::Titsias) => th * s + (1.0 - th) / gamma_w,
            _ => s,
        };
    }
    stats.c_count = problem.obs.len() as f64 / 2.0;
    stats.d_stat = problem.half_expected_residual(&u, &q).max(0.0);
    stats.e_count = k as f64 / 2.0;
    stats.f_stat = 0.5 * w_sq;
    problem.loading_stats(&u, &q, &mut stats, 1.0, opts.unscaled_mu_stat);
    stats
}

/// Exact natural statistics of a single local sample.
pub fn stats_from_sample(sample: &LocalSample, problem: &LocalProblem, opts: &LocalOptions) -> NaturalStats {
    let mut stats = NaturalStats::zeros(problem.k(), problem.view.d());
    accumulate_sample_stats(sample, problem, opts, 1.0, &mut stats);
    stats
}

fn accumulate_sample_stats(
    sample: &LocalSample,
    problem: &LocalProblem,
    opts: &LocalOptions,
    weight: f64,
    stats: &mut NaturalStats,
) {
    let k = problem.k();
    let u: Vec<f64> = sample.loadings().collect();
    let q: Vec<f64> = u.iter().zip(&sample.w).map(|(&x, &w)| x * w).collect();
    for kk in 0..k {
        let z = if sample.z[kk] { 1.0 } else { 0.0 };
        stats.z_sum[kk] += weight * z;
        stats.z_comp_sum[kk] += weight * (1.0 - z);
    }
    stats.c_count += weight * problem.obs.len() as f64 / 2.0;
    stats.d_stat += weight * problem.half_expected_residual(&u, &q).max(0.0);
    stats.e_count += weight * k as f64 / 2.0;
    stats.f_stat += weight * 0.5 * sample.w.iter().map(|w| w * w).sum::<f64>();
    problem.loading_stats(&u, &q, stats, weight, opts.unscaled_mu_stat);
}

/// Initial chain state: every feature off, `w ~ N(0, γ_w⁻¹)` (or the fixed weight).
/// Inactive features leave the residual untouched, so early sweeps are not spent
/// undoing random activations.
pub fn initial_local_sample(view: &GlobalMoments, fixed: Option<f64>, rng: &mut Rng) -> LocalSample {
    let mut s = LocalSample::zeros(view.k());
    let sd = view.gamma_w.powf(-0.5);
    for w in s.w.iter_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *w = fixed.unwrap_or(sd * e);
    }
    s
}

/// One Gibbs sweep over all features, in place.
pub fn gibbs_sweep(state: &mut LocalSample, problem: &LocalProblem, opts: &LocalOptions, rng: &mut Rng) {
    let k = problem.k();
    let view = problem.view;
    let (gamma, gamma_w) = (view.gamma_obs, view.gamma_w);
    let mut u: Vec<f64> = state.loadings().collect();
    let mut g = problem.gram_times(&u);
    let mut order: Vec<usize> = (0..k).collect();
    if opts.gibbs.random_scan {
        order.shuffle(rng);
    }
    for kk in order {
        let r = cross_residual(problem, &g, &u, kk);
        let skk = problem.s(kk, kk);
        let prec = gamma * skk + gamma_w;
        let (z, w) = match opts.fixed_weight {
            Some(w) => {
                let lo = view.logit_pi[kk] - 0.5 * gamma * (w * w * skk - 2.0 * w * r);
                (rng.gen::<f64>() < sigmoid(lo), w)
            }
            None => {
                let lo = match opts.gibbs.kernel {
                    GibbsKernel::Blocked => {
                        let gr = gamma * r;
                        view.logit_pi[kk] + 0.5 * gr * gr / prec - 0.5 * (prec / gamma_w).ln()
                    }
                    GibbsKernel::SingleSite => {
                        let w = state.w[kk];
                        view.logit_pi[kk] - 0.5 * gamma * (w * w * skk - 2.0 * w * r)
                    }
                };
                let z = rng.gen::<f64>() < sigmoid(lo);
                let e: f64 = StandardNormal.sample(rng);
                let w = if z {
                    gamma * r / prec + e / prec.sqrt()
                } else {
                    e / gamma_w.sqrt()
                };
                (z, w)
            }
        };
        state.z[kk] = z;
        state.w[kk] = w;
        let new_u = if z { w } else { 0.0 };
        let delta = new_u - u[kk];
        if delta != 0.0 {
            for (a, ga) in g.iter_mut().enumerate() {
                *ga += delta * problem.s(a, kk);
            }
            u[kk] = new_u;
        }
    }
}

/// Runs `burn_in` sweeps, then `n_samples` sweeps whose end states are retained.
pub fn run_local_chain(
    problem: &LocalProblem,
    init: LocalSample,
    opts: &LocalOptions,
    rng: &mut Rng,
) -> Vec<LocalSample> {
    let mut state = init;
    for _ in 0..opts.gibbs.burn_in {
        gibbs_sweep(&mut state, problem, opts, rng);
    }
    let mut kept = Vec::with_capacity(opts.gibbs.n_samples);
    for _ in 0..opts.gibbs.n_samples {
        gibbs_sweep(&mut state, problem, opts, rng);
        kept.push(state.clone());
    }
    kept
}

/// Mean of the per-sample statistics over retained chain states.
pub fn stats_from_samples(samples: &[LocalSample], problem: &LocalProblem, opts: &LocalOptions) -> NaturalStats {
    let mut stats = NaturalStats::zeros(problem.k(), problem.view.d());
    let weight = 1.0 / samples.len() as f64;
    for s in samples {
        accumulate_sample_stats(s, problem, opts, weight, &mut stats);
    }
    stats
}

/// What a strategy produced for one datum.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub stats: NaturalStats,
    pub fit: Option<LocalFit>,
    pub samples: Vec<LocalSample>,
}

/// Runs `strategy` on one datum. `view` must match the strategy: expected moments for
/// unstructured strategies, a sampled β (via [`GlobalMoments::from_sample`]) otherwise.
pub fn infer_local(
    strategy: Strategy,
    view: &GlobalMoments,
    y: &[f64],
    mask: &[bool],
    opts: &LocalOptions,
    full_gram: Option<&[f64]>,
    rng: &mut Rng,
) -> Result<LocalOutcome> {
    let problem = LocalProblem::with_gram(view, y, mask, full_gram)?;
    Ok(solve_local(strategy, &problem, opts, rng))
}

pub fn solve_local(strategy: Strategy, problem: &LocalProblem, opts: &LocalOptions, rng: &mut Rng) -> LocalOutcome {
    let view = problem.view;
    match strategy.family() {
        Some(family) => {
            let init = LocalVariationalParams::initial(view.k(), view.gamma_w);
            let fit = optimize_local(problem, init, family, opts);
            let stats = stats_from_variational(&fit.params, problem, family, opts);
            LocalOutcome {
                stats,
                fit: Some(fit),
                samples: Vec::new(),
            }
        }
        None => {
            let init = initial_local_sample(view, opts.fixed_weight, rng);
            let samples = run_local_chain(problem, init, opts, rng);
            let stats = stats_from_samples(&samples, problem, opts);
            LocalOutcome {
                stats,
                fit: None,
                samples,
            }
        }
    }
}

pub fn mf_svi_local(
    moments: &GlobalMoments,
    y: &[f64],
    mask: &[bool],
    init: LocalVariationalParams,
    opts: &LocalOptions,
) -> Result<(LocalFit, NaturalStats)> {
    parametric(moments, y, mask, init, VariationalFamily::MeanField, opts)
}

pub fn mf_ssvi_local(
    beta: &GlobalSample,
    y: &[f64],
    mask: &[bool],
    init: LocalVariationalParams,
    opts: &LocalOptions,
) -> Result<(LocalFit, NaturalStats)> {
    let view = GlobalMoments::from_sample(beta);
    parametric(&view, y, mask, init, VariationalFamily::MeanField, opts)
}

pub fn titsias_ssvi_local(
    beta: &GlobalSample,
    y: &[f64],
    mask: &[bool],
    init: LocalVariationalParams,
    opts: &LocalOptions,
) -> Result<(LocalFit, NaturalStats)> {
    let view = GlobalMoments::from_sample(beta);
    parametric(&view, y, mask, init, VariationalFamily::Titsias, opts)
}

fn parametric(
    view: &GlobalMoments,
    y: &[f64],
    mask: &[bool],
    init: LocalVariationalParams,
    family: VariationalFamily,
    opts: &LocalOptions,
) -> Result<(LocalFit, NaturalStats)> {
    if init.k() != view.k() {
        return Err(BpfaError::Shape("initial parameters have the wrong length".into()));
    }
    let problem = LocalProblem::new(view, y, mask)?;
    let fit = optimize_local(&problem, init, family, opts);
    let stats = stats_from_variational(&fit.params, &problem, family, opts);
    Ok((fit, stats))
}

pub fn mimno_gibbs_local(
    moments: &GlobalMoments,
    y: &[f64],
    mask: &[bool],
    opts: &LocalOptions,
    rng: &mut Rng,
) -> Result<NaturalStats> {
    opts.validate()?;
    Ok(infer_local(Strategy::MimnoSvi, moments, y, mask, opts, None, rng)?.stats)
}

pub fn gibbs_ssvi_local(
    beta: &GlobalSample,
    y: &[f64],
    mask: &[bool],
    opts: &LocalOptions,
    rng: &mut Rng,
) -> Result<NaturalStats> {
    opts.validate()?;
    let view = GlobalMoments::from_sample(beta);
    Ok(infer_local(Strategy::GibbsSsvi, &view, y, mask, opts, None, rng)?.stats)
}
