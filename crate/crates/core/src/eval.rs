//! Held-out predictive metrics.
//!
//! Predictions for a row pair `M` draws of the globals with local variables
//! inferred from that row's training entries. The log-likelihood of a row is the
//! log of the average over draws of the Gaussian density of its held-out entries;
//! rows are summed.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{HoldoutSpec, Image};
use crate::error::{BpfaError, Result};
use crate::gibbs_baseline::ChainState;
use crate::local::{
    gram_over, initial_local_sample, optimize_local, run_local_chain, LocalOptions, LocalProblem,
    LocalVariationalParams, Strategy,
};
use crate::math::{log_mean_exp, LN_2PI};
use crate::model::{Dataset, GlobalSample, LocalSample};
use crate::rng::{purpose, stream};
use crate::variational::{expected_global, sample_global, GlobalMoments, GlobalVariationalState};

/// Written in place of `+∞` dB when a reconstruction is exact.
pub const PSNR_SENTINEL_DB: f64 = 999.0;

/// Source of predictive draws.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    /// A fitted `q(β)` together with the local strategy used to train it.
    Variational {
        state: &'a GlobalVariationalState,
        strategy: Strategy,
        opts: &'a LocalOptions,
    },
    /// Retained chain states; each supplies β and the row's own locals.
    Chain { states: &'a [ChainState] },
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Σ over rows of the per-row log predictive density of its targets.
    pub loglik: f64,
    /// Predictive mean of every entry of the requested rows.
    pub mean: Array2<f64>,
}

/// `Σ_d log N(y_d | Σ_k u_k φ_kd, 1/γ)` over `targets`.
fn score(u: &[f64], beta: &GlobalSample, targets: &[(usize, f64)]) -> f64 {
    let half_log = 0.5 * (beta.gamma_obs.ln() - LN_2PI);
    targets
        .iter()
        .map(|&(j, y)| {
            let yhat: f64 = u.iter().enumerate().map(|(k, &x)| x * beta.phi[[k, j]]).sum();
            half_log - 0.5 * beta.gamma_obs * (y - yhat).powi(2)
        })
        .sum()
}

fn add_mean(acc: &mut [f64], u: &[f64], phi: &Array2<f64>, weight: f64) {
    for (k, &x) in u.iter().enumerate() {
        if x != 0.0 {
            for (a, p) in acc.iter_mut().zip(phi.row(k)) {
                *a += weight * x * p;
            }
        }
    }
}

/// Predictions for `rows` of `train`; `targets[r]` lists the `(column, value)` pairs
/// scored for `rows[r]`.
pub fn predict(
    predictor: Predictor,
    train: &Dataset,
    rows: &[usize],
    targets: &[Vec<(usize, f64)>],
    m: usize,
    seed: u64,
) -> Result<Prediction> {
    if targets.len() != rows.len() {
        return Err(BpfaError::Shape("one target list per row is required".into()));
    }
    let d = train.d();
    let per_row: Vec<(f64, Vec<f64>)> = match predictor {
        Predictor::Chain { states } => {
            if states.is_empty() {
                return Err(BpfaError::InvalidArgument("no chain states to predict from".into()));
            }
            let w = 1.0 / states.len() as f64;
            rows.par_iter()
                .zip(targets)
                .map(|(&i, t)| {
                    let mut mean = vec![0.0; d];
                    let logs: Vec<f64> = states
                        .iter()
                        .map(|s| {
                            let u: Vec<f64> = s.psi[i].loadings().collect();
                            add_mean(&mut mean, &u, &s.beta.phi, w);
                            score(&u, &s.beta, t)
                        })
                        .collect();
                    (log_mean_exp(&logs), mean)
                })
                .collect()
        }
        Predictor::Variational {
            state,
            strategy,
            opts,
        } => {
            if m == 0 {
                return Err(BpfaError::InvalidArgument("M must be at least 1".into()));
            }
            for &i in rows {
                if !train.mask.row(i).iter().any(|&b| b) {
                    return Err(BpfaError::InvalidArgument(format!("row {i} has no training entries")));
                }
            }
            let globals = (0..m)
                .map(|j| sample_global(state, &mut stream(seed, &[purpose::EVAL, purpose::GLOBAL, j as u64])))
                .collect::<Result<Vec<_>>>()?;
            let all: Vec<usize> = (0..d).collect();
            let views: Vec<(GlobalMoments, Vec<f64>)> = if strategy.uses_sampled_globals() {
                globals
                    .iter()
                    .map(|g| {
                        let v = GlobalMoments::from_sample(g);
                        let gram = gram_over(&v, &all);
                        (v, gram)
                    })
                    .collect()
            } else {
                let v = expected_global(state);
                let gram = gram_over(&v, &all);
                vec![(v, gram)]
            };
            let ctx = VariationalContext {
                strategy,
                opts,
                globals: &globals,
                views: &views,
                seed,
            };
            rows.par_iter()
                .zip(targets)
                .map(|(&i, t)| ctx.row(train, i, t))
                .collect::<Result<Vec<_>>>()?
        }
    };
    let mut mean = Array2::zeros((rows.len(), d));
    let mut loglik = 0.0;
    for (r, (ll, mu)) in per_row.into_iter().enumerate() {
        if !targets[r].is_empty() {
            loglik += ll;
        }
        mean.row_mut(r).assign(&ndarray::ArrayView1::from(&mu));
    }
    Ok(Prediction { loglik, mean })
}

struct VariationalContext<'a> {
    strategy: Strategy,
    opts: &'a LocalOptions,
    globals: &'a [GlobalSample],
    views: &'a [(GlobalMoments, Vec<f64>)],
    seed: u64,
}

impl VariationalContext<'_> {
    fn row(&self, train: &Dataset, i: usize, targets: &[(usize, f64)]) -> Result<(f64, Vec<f64>)> {
        let (y, mask) = train.row(i);
        let m = self.globals.len();
        let w = 1.0 / m as f64;
        let mut rng = stream(self.seed, &[purpose::EVAL, purpose::LOCAL, i as u64]);
        let mut mean = vec![0.0; train.d()];
        let mut logs = Vec::with_capacity(m);
        let fixed = self.opts.fixed_weight;
        let mut emit = |j: usize, sample: &LocalSample, expected: &[f64], logs: &mut Vec<f64>| {
            let beta = &self.globals[j];
            let u: Vec<f64> = sample.loadings().collect();
            add_mean(&mut mean, expected, &beta.phi, w);
            logs.push(score(&u, beta, targets));
        };
        match (self.strategy.family(), self.strategy.uses_sampled_globals()) {
            (Some(family), false) => {
                let (view, gram) = &self.views[0];
                let problem = LocalProblem::with_gram(view, y, mask, Some(gram))?;
                let fit = optimize_local(&problem, LocalVariationalParams::initial(view.k(), view.gamma_w), family, self.opts);
                let expected = fit.params.mean_loadings(fixed);
                for j in 0..m {
                    let s = fit.params.draw(family, view.gamma_w, fixed, &mut rng);
                    emit(j, &s, &expected, &mut logs);
                }
            }
            (Some(family), true) => {
                for (j, (view, gram)) in self.views.iter().enumerate() {
                    let problem = LocalProblem::with_gram(view, y, mask, Some(gram))?;
                    let fit = optimize_local(&problem, LocalVariationalParams::initial(view.k(), view.gamma_w), family, self.opts);
                    let expected = fit.params.mean_loadings(fixed);
                    let s = fit.params.draw(family, view.gamma_w, fixed, &mut rng);
                    emit(j, &s, &expected, &mut logs);
                }
            }
            (None, false) => {
                let (view, gram) = &self.views[0];
                let problem = LocalProblem::with_gram(view, y, mask, Some(gram))?;
                let mut opts = *self.opts;
                opts.gibbs.n_samples = m;
                let init = initial_local_sample(view, fixed, &mut rng);
                let kept = run_local_chain(&problem, init, &opts, &mut rng);
                for (j, s) in kept.iter().enumerate() {
                    let u: Vec<f64> = s.loadings().collect();
                    emit(j, s, &u, &mut logs);
                }
            }
            (None, true) => {
                // The mean averages every retained state; the last one is scored.
                for (j, (view, gram)) in self.views.iter().enumerate() {
                    let problem = LocalProblem::with_gram(view, y, mask, Some(gram))?;
                    let init = initial_local_sample(view, fixed, &mut rng);
                    let kept = run_local_chain(&problem, init, self.opts, &mut rng);
                    let mut u = vec![0.0; view.k()];
                    for s in &kept {
                        for (a, x) in u.iter_mut().zip(s.loadings()) {
                            *a += x / kept.len() as f64;
                        }
                    }
                    emit(j, kept.last().expect("n_samples >= 1"), &u, &mut logs);
                }
            }
        }
        Ok((log_mean_exp(&logs), mean))
    }
}

/// Sum over test rows of the log predictive density of the held-out entries.
pub fn predictive_loglik(
    predictor: Predictor,
    train: &Dataset,
    holdout: &HoldoutSpec,
    m: usize,
    seed: u64,
) -> Result<f64> {
    let by_row = holdout.by_row(train.n());
    let rows: Vec<usize> = (0..train.n()).filter(|&i| !by_row[i].is_empty()).collect();
    let targets: Vec<_> = rows.iter().map(|&i| by_row[i].clone()).collect();
    Ok(predict(predictor, train, &rows, &targets, m, seed)?.loglik)
}

/// Mean squared error of `predictions` (indexed like the data) at `entries`.
pub fn predictive_mse(predictions: &Array2<f64>, entries: &[(usize, usize)], truth: &[f64]) -> Result<f64> {
    if entries.is_empty() {
        return Err(BpfaError::InvalidArgument("no entries to score".into()));
    }
    if entries.len() != truth.len() {
        return Err(BpfaError::Shape("entries and truth differ in length".into()));
    }
    let sse: f64 = entries
        .iter()
        .zip(truth)
        .map(|(&(i, j), &t)| (predictions[[i, j]] - t).powi(2))
        .sum();
    Ok(sse / entries.len() as f64)
}

/// `20 log10(max_value / rmse)` over all pixels; `+∞` for an exact match.
pub fn psnr(original: &Image, reconstruction: &Image, max_value: f64) -> Result<f64> {
    if original.height != reconstruction.height || original.width != reconstruction.width {
        return Err(BpfaError::Shape("images differ in size".into()));
    }
    if !(max_value > 0.0) {
        return Err(BpfaError::InvalidArgument("max_value must be positive".into()));
    }
    let mse = original
        .pixels
        .iter()
        .zip(&reconstruction.pixels)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / original.pixels.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (max_value / mse.sqrt()).log10())
}

/// One evaluation checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Training time excluding evaluation; `null` when wall-clock recording is off.
    pub wall_clock_s: Option<f64>,
    pub epoch: f64,
    pub iteration: u64,
    pub pred_loglik: f64,
    pub pred_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_db: Option<f64>,
    pub strategy: String,
    pub seed: u64,
}

impl MetricRecord {
    pub fn with_psnr(mut self, db: f64) -> Self {
        self.psnr_db = Some(if db.is_finite() { db } else { PSNR_SENTINEL_DB });
        self
    }
}

pub fn write_metrics<W: Write>(mut out: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_metrics<R: BufRead>(input: R) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| BpfaError::SchemaMismatch(format!("metrics line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
