//! Full-data uncollapsed Gibbs sampler over every local and global variable.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::error::{BpfaError, Result};
use crate::local::{gibbs_sweep, gram_over, LocalOptions, LocalProblem};
use crate::model::{Dataset, GlobalSample, Hyperparameters, LocalSample, PI_CEIL, PI_FLOOR};
use crate::rng::{stream, Rng};
use crate::variational::GlobalMoments;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub beta: GlobalSample,
    pub psi: Vec<LocalSample>,
    pub iteration: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ChainOptions {
    /// Kernel and scan order for the local sweep.
    pub local: LocalOptions,
    /// Update rows concurrently; each row gets its own generator stream.
    pub parallel_locals: bool,
}

impl ChainState {
    /// Globals at prior-scale values, locals drawn from their prior given those globals.
    pub fn initial(data: &Dataset, hyper: &Hyperparameters, rng: &mut Rng) -> Result<Self> {
        hyper.validate()?;
        let (k, d) = (hyper.k, data.d());
        let (a0, b0) = hyper.beta_prior();
        let pi = vec![a0 / (a0 + b0); k];
        let sd = (d as f64).powf(-0.5);
        let phi = Array2::from_shape_simple_fn((k, d), || {
            let e: f64 = StandardNormal.sample(rng);
            sd * e
        });
        let beta = GlobalSample {
            pi,
            phi,
            gamma_w: 1.0,
            gamma_obs: 1.0,
        };
        let psi = (0..data.n())
            .map(|_| {
                let mut s = LocalSample::zeros(k);
                for kk in 0..k {
                    s.z[kk] = rng.gen::<f64>() < beta.pi[kk];
                    s.w[kk] = StandardNormal.sample(rng);
                }
                s
            })
            .collect();
        Ok(Self {
            beta,
            psi,
            iteration: 0,
        })
    }

    pub fn validate(&self, data: &Dataset) -> Result<()> {
        self.beta.validate()?;
        if self.beta.d() != data.d() || self.psi.len() != data.n() {
            return Err(BpfaError::Shape(format!(
                "chain holds {} rows of dimension {}, data is {}×{}",
                self.psi.len(),
                self.beta.d(),
                data.n(),
                data.d()
            )));
        }
        if self.psi.iter().any(|s| s.z.len() != self.beta.k() || s.w.len() != self.beta.k()) {
            return Err(BpfaError::Shape("local sample length differs from K".into()));
        }
        Ok(())
    }
}

/// `y - (z∘w)Φ` at observed entries, zero elsewhere.
fn residuals(state: &ChainState, data: &Dataset) -> Array2<f64> {
    let mut res = Array2::zeros((data.n(), data.d()));
    for (i, s) in state.psi.iter().enumerate() {
        let (y, mask) = data.row(i);
        let mut row = res.row_mut(i);
        for j in 0..data.d() {
            if mask[j] {
                row[j] = y[j];
            }
        }
        for (kk, u) in s.loadings().enumerate() {
            if u != 0.0 {
                let phi = state.beta.phi.row(kk);
                for j in 0..data.d() {
                    if mask[j] {
                        row[j] -= u * phi[j];
                    }
                }
            }
        }
    }
    res
}

fn gamma_draw(shape: f64, rate: f64, rng: &mut Rng) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("shape and rate are positive")
        .sample(rng)
}

/// One sweep: locals in row order, then π, Φ, γ_obs and γ_w.
pub fn gibbs_iteration(
    state: ChainState,
    data: &Dataset,
    hyper: &Hyperparameters,
    opts: &ChainOptions,
    rng: &mut Rng,
) -> Result<ChainState> {
    state.validate(data)?;
    if state.beta.k() != hyper.k {
        return Err(BpfaError::Shape("chain K differs from hyperparameters".into()));
    }
    let ChainState {
        mut beta,
        mut psi,
        iteration,
    } = state;
    let (n, d, k) = (data.n(), data.d(), hyper.k);

    // Locals given β.
    let view = GlobalMoments::from_sample(&beta);
    let full_gram = gram_over(&view, &(0..d).collect::<Vec<_>>());
    let local_seed: u64 = rng.gen();
    let update = |i: usize, s: &mut LocalSample| -> Result<()> {
        let (y, mask) = data.row(i);
        let problem = LocalProblem::with_gram(&view, y, mask, Some(&full_gram))?;
        let mut r = stream(local_seed, &[i as u64]);
        gibbs_sweep(s, &problem, &opts.local, &mut r);
        Ok(())
    };
    if opts.parallel_locals {
        psi.par_iter_mut()
            .enumerate()
            .try_for_each(|(i, s)| update(i, s))?;
    } else {
        for (i, s) in psi.iter_mut().enumerate() {
            update(i, s)?;
        }
    }

    // Feature probabilities.
    let (a0, b0) = hyper.beta_prior();
    for kk in 0..k {
        let on = psi.iter().filter(|s| s.z[kk]).count() as f64;
        let p: f64 = Beta::new(a0 + on, b0 + n as f64 - on)
            .expect("beta parameters are positive")
            .sample(rng);
        beta.pi[kk] = p.clamp(PI_FLOOR, PI_CEIL);
    }

    // Loadings, one feature at a time against the running residual.
    let mut next = ChainState {
        beta,
        psi,
        iteration,
    };
    let mut res = residuals(&next, data);
    let gamma = next.beta.gamma_obs;
    let mut num = vec![0.0; d];
    let mut prec = vec![0.0; d];
    for kk in 0..k {
        num.fill(0.0);
        prec.fill(0.0);
        let phi_old: Vec<f64> = next.beta.phi.row(kk).to_vec();
        for (i, s) in next.psi.iter().enumerate() {
            if !s.z[kk] {
                continue;
            }
            let u = s.w[kk];
            let (_, mask) = data.row(i);
            let row = res.row(i);
            for j in 0..d {
                if mask[j] {
                    num[j] += u * (row[j] + u * phi_old[j]);
                    prec[j] += u * u;
                }
            }
        }
        let mut phi_row = next.beta.phi.row_mut(kk);
        for j in 0..d {
            let p = d as f64 + gamma * prec[j];
            let e: f64 = StandardNormal.sample(rng);
            phi_row[j] = gamma * num[j] / p + e / p.sqrt();
        }
        let phi_new = phi_row.to_vec();
        for (i, s) in next.psi.iter().enumerate() {
            if !s.z[kk] {
                continue;
            }
            let u = s.w[kk];
            let (_, mask) = data.row(i);
            let mut row = res.row_mut(i);
            for j in 0..d {
                if mask[j] {
                    row[j] -= u * (phi_new[j] - phi_old[j]);
                }
            }
        }
    }

    // Precisions.
    let rss: f64 = res.iter().map(|r| r * r).sum();
    next.beta.gamma_obs = gamma_draw(
        hyper.c_prior + data.observed_count() as f64 / 2.0,
        hyper.d_prior + 0.5 * rss,
        rng,
    );
    let w_sq: f64 = next.psi.iter().flat_map(|s| s.w.iter()).map(|w| w * w).sum();
    next.beta.gamma_w = gamma_draw(
        hyper.e_prior + (n * k) as f64 / 2.0,
        hyper.f_prior + 0.5 * w_sq,
        rng,
    );
    next.iteration += 1;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    /// Every `thin`-th state.
    pub states: Vec<ChainState>,
    /// Cumulative wall-clock seconds after each iteration.
    pub elapsed_s: Vec<f64>,
}

/// Runs `iterations` sweeps from a fresh initial state.
pub fn run_chain(
    data: &Dataset,
    hyper: &Hyperparameters,
    iterations: usize,
    thin: usize,
    opts: &ChainOptions,
    rng: &mut Rng,
) -> Result<ChainRun> {
    let init = ChainState::initial(data, hyper, rng)?;
    continue_chain(init, data, hyper, iterations, thin, opts, rng)
}

/// Runs `iterations` further sweeps from `state`.
pub fn continue_chain(
    state: ChainState,
    data: &Dataset,
    hyper: &Hyperparameters,
    iterations: usize,
    thin: usize,
    opts: &ChainOptions,
    rng: &mut Rng,
) -> Result<ChainRun> {
    if iterations == 0 {
        return Err(BpfaError::InvalidArgument("iterations must be at least 1".into()));
    }
    if thin == 0 {
        return Err(BpfaError::InvalidArgument("thin must be at least 1".into()));
    }
    let start = Instant::now();
    let mut state = state;
    let mut run = ChainRun {
        states: Vec::with_capacity(iterations / thin),
        elapsed_s: Vec::with_capacity(iterations),
    };
    for it in 1..=iterations {
        state = gibbs_iteration(state, data, hyper, opts, rng)?;
        run.elapsed_s.push(start.elapsed().as_secs_f64());
        if it % thin == 0 {
            run.states.push(state.clone());
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;

    fn tiny_hyper(k: usize) -> Hyperparameters {
        Hyperparameters::with_k(k)
    }

    #[test]
    fn reproducible_thinned_chain() {
        let data = Dataset::fully_observed(array![[0.5, -1.0], [2.0, 0.1], [0.0, 0.3]]);
        let h = tiny_hyper(3);
        let a = run_chain(&data, &h, 5, 1, &ChainOptions::default(), &mut seeded(4)).unwrap();
        let b = run_chain(&data, &h, 5, 1, &ChainOptions::default(), &mut seeded(4)).unwrap();
        assert_eq!(a.states.len(), 5);
        assert_eq!(a.states, b.states);
        assert!(a.elapsed_s.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(a.states[4].iteration, 5);
        let c = run_chain(&data, &h, 6, 3, &ChainOptions::default(), &mut seeded(4)).unwrap();
        assert_eq!(c.states.len(), 2);
    }

    #[test]
    fn parallel_locals_match_sequential() {
        let data = Dataset::fully_observed(Array2::from_shape_fn((20, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0));
        let h = tiny_hyper(4);
        let seq = run_chain(&data, &h, 3, 1, &ChainOptions::default(), &mut seeded(1)).unwrap();
        let opts = ChainOptions {
            parallel_locals: true,
            ..ChainOptions::default()
        };
        let par = run_chain(&data, &h, 3, 1, &opts, &mut seeded(1)).unwrap();
        assert_eq!(seq.states, par.states);
    }

    #[test]
    fn zero_iterations_rejected() {
        let data = Dataset::fully_observed(array![[1.0]]);
        assert!(run_chain(&data, &tiny_hyper(2), 0, 1, &ChainOptions::default(), &mut seeded(0)).is_err());
    }

    #[test]
    fn unobserved_data_recovers_prior_marginals() {
        let mask = Array2::from_elem((3, 2), false);
        let data = Dataset::new(Array2::zeros((3, 2)), mask).unwrap();
        let h = Hyperparameters {
            a: 2.0,
            b: 2.0,
            ..tiny_hyper(2)
        };
        let run = run_chain(&data, &h, 40_000, 1, &ChainOptions::default(), &mut seeded(9)).unwrap();
        let n = run.states.len() as f64;
        let (a0, b0) = h.beta_prior();
        let pi_mean = run.states.iter().map(|s| s.beta.pi[0]).sum::<f64>() / n;
        assert!((pi_mean - a0 / (a0 + b0)).abs() < 0.02, "{pi_mean}");
        let go = run.states.iter().map(|s| s.beta.gamma_obs).sum::<f64>() / n;
        assert!((go - h.c_prior / h.d_prior).abs() < 0.01, "{go}");
        let phi2 = run.states.iter().map(|s| s.beta.phi[[1, 0]].powi(2)).sum::<f64>() / n;
        assert!((phi2 - 0.5).abs() < 0.03, "{phi2}");
        let z = run.states.iter().map(|s| s.psi[1].z[0] as u8 as f64).sum::<f64>() / n;
        assert!((z - a0 / (a0 + b0)).abs() < 0.03, "{z}");
    }

    /// Single-site sampler for one scalar observation and two features, written from
    /// the joint density. Returns post-burn-in means of `(Σz, ln γ_obs, fitted value)`.
    fn reference_moments(y: f64, h: &Hyperparameters, iters: usize, seed: u64) -> [f64; 3] {
        let mut rng = seeded(seed);
        let kf = h.k as f64;
        let (a0, b0) = (h.a / kf, h.b * (kf - 1.0) / kf);
        let mut pi = [0.5f64; 2];
        let mut phi = [1.0, -1.0];
        let (mut g, mut gw) = (1.0, 1.0);
        let mut z = [true, false];
        let mut w = [0.0; 2];
        let mut acc = [0.0; 3];
        let burn = iters / 10;
        for it in 0..iters {
            for k in 0..2 {
                let o = 1 - k;
                let rest = y - if z[o] { w[o] * phi[o] } else { 0.0 };
                let l1 = pi[k].ln() - 0.5 * g * (rest - w[k] * phi[k]).powi(2);
                let l0 = (1.0 - pi[k]).ln() - 0.5 * g * rest * rest;
                z[k] = rng.gen::<f64>() < 1.0 / (1.0 + (l0 - l1).exp());
                let p = gw + if z[k] { g * phi[k] * phi[k] } else { 0.0 };
                let m = if z[k] { g * phi[k] * rest / p } else { 0.0 };
                let e: f64 = StandardNormal.sample(&mut rng);
                w[k] = m + e / p.sqrt();
            }
            for k in 0..2 {
                let on = z[k] as u8 as f64;
                pi[k] = Beta::new(a0 + on, b0 + 1.0 - on).unwrap().sample(&mut rng);
            }
            for k in 0..2 {
                let o = 1 - k;
                let rest = y - if z[o] { w[o] * phi[o] } else { 0.0 };
                let u = if z[k] { w[k] } else { 0.0 };
                let p = 1.0 + g * u * u;
                let e: f64 = StandardNormal.sample(&mut rng);
                phi[k] = g * u * rest / p + e / p.sqrt();
            }
            let fit: f64 = (0..2).map(|k| if z[k] { w[k] * phi[k] } else { 0.0 }).sum();
            g = Gamma::new(h.c_prior + 0.5, 1.0 / (h.d_prior + 0.5 * (y - fit).powi(2)))
                .unwrap()
                .sample(&mut rng);
            gw = Gamma::new(h.e_prior + 1.0, 1.0 / (h.f_prior + 0.5 * (w[0] * w[0] + w[1] * w[1])))
                .unwrap()
                .sample(&mut rng);
            if it >= burn {
                acc[0] += (z[0] as u8 + z[1] as u8) as f64;
                acc[1] += g.ln();
                acc[2] += fit;
            }
        }
        acc.map(|x| x / (iters - burn) as f64)
    }

    #[test]
    fn single_cell_chain_matches_reference_sampler() {
        let y = 1.3;
        let data = Dataset::fully_observed(array![[y]]);
        let h = Hyperparameters {
            a: 1.0,
            b: 1.0,
            ..Hyperparameters::with_k(2)
        };
        let iters = 200_000;
        let burn = iters / 10;
        for kernel in [crate::local::GibbsKernel::SingleSite, crate::local::GibbsKernel::Blocked] {
            let mut opts = ChainOptions::default();
            opts.local.gibbs.kernel = kernel;
            let mut rng = seeded(17);
            let mut state = ChainState::initial(&data, &h, &mut rng).unwrap();
            let mut acc = [0.0; 3];
            for it in 0..iters {
                state = gibbs_iteration(state, &data, &h, &opts, &mut rng).unwrap();
                if it >= burn {
                    let s = &state.psi[0];
                    acc[0] += s.z.iter().filter(|&&z| z).count() as f64;
                    acc[1] += state.beta.gamma_obs.ln();
                    acc[2] += s.loadings().zip(state.beta.phi.column(0)).map(|(u, p)| u * p).sum::<f64>();
                }
            }
            let lib = acc.map(|x| x / (iters - burn) as f64);
            let reference = reference_moments(y, &h, iters, 23);
            for (what, l, r, tol) in [("Σz", lib[0], reference[0], 0.03), ("ln γ", lib[1], reference[1], 0.05), ("fit", lib[2], reference[2], 0.05)] {
                assert!((l - r).abs() < tol, "{kernel:?} {what}: {l} vs {r}");
            }
        }
    }
}
