//! Python bindings: hyperparameters, the global variational state, per-datum local
//! inference, experiment runs and the image/standardization helpers.
//!
//! Matrices cross the boundary as lists of rows; `numpy` arrays convert with
//! `.tolist()`.

use std::path::PathBuf;

use bpfa::checkpoint::{self, Checkpoint};
use bpfa::data::{self, Image};
use bpfa::eval::{self, MetricRecord};
use bpfa::experiment::{self, ExperimentConfig};
use bpfa::local::{infer_local, LocalOptions, Strategy};
use bpfa::model::{Dataset, GlobalSample, Hyperparameters};
use bpfa::rng::seeded;
use bpfa::variational::{
    expected_global, prior_natural, sample_global, step_size, svi_step, GlobalMoments, GlobalVariationalState,
    NaturalStats,
};
use bpfa::BpfaError;
use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: BpfaError) -> PyErr {
    match e {
        BpfaError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_array<T: Clone>(rows: Vec<Vec<T>>) -> PyResult<Array2<T>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows<T: Clone>(a: &Array2<T>) -> Vec<Vec<T>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse_strategy(name: &str) -> PyResult<Strategy> {
    name.parse().map_err(err)
}

#[pyclass(name = "Hyperparameters", from_py_object)]
#[derive(Clone)]
struct PyHyperparameters {
    inner: Hyperparameters,
}

#[pymethods]
impl PyHyperparameters {
    #[new]
    #[pyo3(signature = (k=40, a=None, b=None, c=None, d=None, e=None, f=None, t0=None, zeta=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        k: usize,
        a: Option<f64>,
        b: Option<f64>,
        c: Option<f64>,
        d: Option<f64>,
        e: Option<f64>,
        f: Option<f64>,
        t0: Option<f64>,
        zeta: Option<f64>,
    ) -> PyResult<Self> {
        let base = Hyperparameters::with_k(k);
        let inner = Hyperparameters {
            a: a.unwrap_or(base.a),
            b: b.unwrap_or(base.b),
            c_prior: c.unwrap_or(base.c_prior),
            d_prior: d.unwrap_or(base.d_prior),
            e_prior: e.unwrap_or(base.e_prior),
            f_prior: f.unwrap_or(base.f_prior),
            t0: t0.unwrap_or(base.t0),
            zeta: zeta.unwrap_or(base.zeta),
            k,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    /// Robbins-Monro step size at iteration `t` (t ≥ 1).
    fn step_size(&self, t: u64) -> PyResult<f64> {
        step_size(t, &self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Natural parameters of `q(β)`.
#[pyclass(name = "GlobalState", from_py_object)]
#[derive(Clone)]
struct PyGlobalState {
    inner: GlobalVariationalState,
}

#[pymethods]
impl PyGlobalState {
    #[staticmethod]
    fn random(hyper: &PyHyperparameters, d: usize, seed: u64) -> PyResult<Self> {
        let inner = GlobalVariationalState::random_init(&hyper.inner, d, &mut seeded(seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn prior(hyper: &PyHyperparameters, d: usize) -> PyResult<Self> {
        Ok(Self {
            inner: prior_natural(&hyper.inner, d).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        match checkpoint::load(&path).map_err(err)? {
            Checkpoint::Svi { state, .. } => Ok(Self { inner: state }),
            Checkpoint::Chain { .. } => Err(PyValueError::new_err("checkpoint holds a Gibbs chain")),
        }
    }

    #[pyo3(signature = (path, iteration=0, seed=0))]
    fn save(&self, path: PathBuf, iteration: u64, seed: u64) -> PyResult<()> {
        let ck = Checkpoint::Svi {
            state: self.inner.clone(),
            iteration,
            seed,
        };
        checkpoint::save(&path, &ck).map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d()
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.a.clone()
    }

    #[getter]
    fn b(&self) -> Vec<f64> {
        self.inner.b.clone()
    }

    #[getter]
    fn tau(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.tau)
    }

    #[getter]
    fn mu(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.mu)
    }

    /// Expected feature probabilities `a / (a + b)`.
    fn feature_probabilities(&self) -> Vec<f64> {
        self.inner.a.iter().zip(&self.inner.b).map(|(a, b)| a / (a + b)).collect()
    }

    /// Expected loadings, precisions and the `E[logit π]` record.
    fn expected<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        moments_dict(py, &expected_global(&self.inner))
    }

    /// One draw of β.
    fn sample<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let s = sample_global(&self.inner, &mut seeded(seed)).map_err(err)?;
        sample_dict(py, &s)
    }

    /// Natural-gradient step from per-datum statistics.
    fn step(&self, prior: &PyGlobalState, stats: Vec<PyRef<PyStats>>, n_total: usize, rho: f64) -> PyResult<Self> {
        let batch: Vec<NaturalStats> = stats.iter().map(|s| s.inner.clone()).collect();
        Ok(Self {
            inner: svi_step(&self.inner, &prior.inner, &batch, n_total, rho).map_err(err)?,
        })
    }
}

fn moments_dict<'py>(py: Python<'py>, m: &GlobalMoments) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("logit_pi", m.logit_pi.clone())?;
    out.set_item("gamma_obs", m.gamma_obs)?;
    out.set_item("gamma_w", m.gamma_w)?;
    out.set_item("phi", to_rows(&m.phi))?;
    Ok(out)
}

fn sample_dict<'py>(py: Python<'py>, s: &GlobalSample) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("pi", s.pi.clone())?;
    out.set_item("phi", to_rows(&s.phi))?;
    out.set_item("gamma_w", s.gamma_w)?;
    out.set_item("gamma_obs", s.gamma_obs)?;
    Ok(out)
}

/// Sufficient statistics contributed by one datum.
#[pyclass(name = "NaturalStats")]
struct PyStats {
    inner: NaturalStats,
}

#[pymethods]
impl PyStats {
    #[getter]
    fn z_sum(&self) -> Vec<f64> {
        self.inner.z_sum.clone()
    }

    #[getter]
    fn z_comp_sum(&self) -> Vec<f64> {
        self.inner.z_comp_sum.clone()
    }

    #[getter]
    fn c_count(&self) -> f64 {
        self.inner.c_count
    }

    #[getter]
    fn d_stat(&self) -> f64 {
        self.inner.d_stat
    }

    #[getter]
    fn e_count(&self) -> f64 {
        self.inner.e_count
    }

    #[getter]
    fn f_stat(&self) -> f64 {
        self.inner.f_stat
    }

    #[getter]
    fn tau_stat(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.tau_stat)
    }

    #[getter]
    fn mu_stat(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.mu_stat)
    }
}

/// Local inference for one datum. Structured strategies condition on a draw of β
/// from `state`; the others use its expectations.
#[pyfunction]
#[pyo3(signature = (strategy, state, y, mask, seed, burn_in=3, n_samples=3))]
#[allow(clippy::too_many_arguments)]
fn local_stats(
    strategy: &str,
    state: &PyGlobalState,
    y: Vec<f64>,
    mask: Vec<bool>,
    seed: u64,
    burn_in: usize,
    n_samples: usize,
) -> PyResult<PyStats> {
    let strategy = parse_strategy(strategy)?;
    let mut rng = seeded(seed);
    let view = if strategy.uses_sampled_globals() {
        GlobalMoments::from_sample(&sample_global(&state.inner, &mut rng).map_err(err)?)
    } else {
        expected_global(&state.inner)
    };
    let mut opts = LocalOptions::default();
    opts.gibbs.burn_in = burn_in;
    opts.gibbs.n_samples = n_samples;
    opts.validate().map_err(err)?;
    let out = infer_local(strategy, &view, &y, &mask, &opts, None, &mut rng).map_err(err)?;
    Ok(PyStats { inner: out.stats })
}

/// Experiment configuration; keyword arguments use the CLI key names with `_`
/// in place of `-`.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = ExperimentConfig::default();
        if let Some(kw) = kwargs {
            for (key, value) in kw.iter() {
                let key: String = key.extract()?;
                let value = value.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    _ => value,
                };
                inner.set(&key.replace('_', "-"), &value).map_err(err)?;
            }
        }
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    /// Trains with the configured strategy; returns the metric records.
    fn run<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let out = experiment::run_experiment(&self.inner).map_err(err)?;
        out.records.iter().map(|r| record_dict(py, r)).collect()
    }

    /// Runs the full-data Gibbs baseline; returns the metric records.
    fn baseline<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let out = experiment::run_baseline(&self.inner).map_err(err)?;
        out.records.iter().map(|r| record_dict(py, r)).collect()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

fn record_dict<'py>(py: Python<'py>, r: &MetricRecord) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("wall_clock_s", r.wall_clock_s)?;
    out.set_item("epoch", r.epoch)?;
    out.set_item("iteration", r.iteration)?;
    out.set_item("pred_loglik", r.pred_loglik)?;
    out.set_item("pred_mse", r.pred_mse)?;
    out.set_item("psnr_db", r.psnr_db)?;
    out.set_item("strategy", &r.strategy)?;
    out.set_item("seed", r.seed)?;
    Ok(out)
}

/// Standardizes observed entries per column; returns `(y_std, means, stds)`.
#[pyfunction]
fn standardize(y: Vec<Vec<f64>>, mask: Vec<Vec<bool>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
    let (ys, rec) = data::standardize(&to_array(y)?, &to_array(mask)?).map_err(err)?;
    Ok((to_rows(&ys), rec.means, rec.stds))
}

/// Overlapping `patch × patch` patches of a row-major image, one per row.
#[pyfunction]
#[pyo3(signature = (pixels, height, width, patch=8))]
fn patchify(pixels: Vec<f64>, height: usize, width: usize, patch: usize) -> PyResult<Vec<Vec<f64>>> {
    let img = Image::new(height, width, pixels, 255.0).map_err(err)?;
    Ok(to_rows(&data::patchify(&img, None, patch).map_err(err)?.y))
}

/// Averages overlapping patch predictions back into a row-major image.
#[pyfunction]
#[pyo3(signature = (patches, height, width, patch=8, max_value=255.0))]
fn reconstruct(patches: Vec<Vec<f64>>, height: usize, width: usize, patch: usize, max_value: f64) -> PyResult<Vec<f64>> {
    let img = data::reconstruct_from_patches(&to_array(patches)?, height, width, patch, None, max_value).map_err(err)?;
    Ok(img.pixels)
}

/// PSNR in dB between two row-major images of the same size.
#[pyfunction]
#[pyo3(signature = (original, reconstruction, height, width, max_value=255.0))]
fn psnr(original: Vec<f64>, reconstruction: Vec<f64>, height: usize, width: usize, max_value: f64) -> PyResult<f64> {
    let a = Image::new(height, width, original, max_value).map_err(err)?;
    let b = Image::new(height, width, reconstruction, max_value).map_err(err)?;
    eval::psnr(&a, &b, max_value).map_err(err)
}

/// Fraction of observed entries per row; a quick check on masks built in Python.
#[pyfunction]
fn observed_fraction(mask: Vec<Vec<bool>>) -> PyResult<Vec<f64>> {
    let m = to_array(mask)?;
    let ds = Dataset::new(Array2::zeros(m.dim()), m).map_err(err)?;
    Ok(ds
        .mask
        .rows()
        .into_iter()
        .map(|r| r.iter().filter(|&&b| b).count() as f64 / r.len().max(1) as f64)
        .collect())
}

/// Labels of every local strategy.
#[pyfunction]
fn strategies() -> Vec<&'static str> {
    Strategy::ALL.iter().map(|s| s.label()).collect()
}

#[pymodule]
fn bpfa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHyperparameters>()?;
    m.add_class::<PyGlobalState>()?;
    m.add_class::<PyStats>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(local_stats, m)?)?;
    m.add_function(wrap_pyfunction!(standardize, m)?)?;
    m.add_function(wrap_pyfunction!(patchify, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(observed_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(strategies, m)?)?;
    m.add("PSNR_SENTINEL_DB", eval::PSNR_SENTINEL_DB)?;
    Ok(())
}
