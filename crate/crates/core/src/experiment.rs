//! Experiment driver: task construction, the SVI loop, the Gibbs baseline loop,
//! evaluation scheduling and artifact output.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{self, Checkpoint};
use crate::data::{
    gibbs_warm_start, holdout_entries, make_denoising_task, make_interpolation_mask, patchify,
    read_image, read_matrix, reconstruct_from_patches, standardize, synthetic_image, write_image,
    HoldoutSpec, Image, StandardizationRecord,
};
use crate::error::{BpfaError, Result};
use crate::eval::{predict, predictive_mse, psnr, read_metrics, write_metrics, MetricRecord, Predictor};
use crate::gibbs_baseline::{gibbs_iteration, ChainOptions, ChainState};
use crate::local::{gram_over, solve_local, GibbsKernel, LocalOptions, LocalProblem, Strategy};
use crate::model::{sample_generative, Dataset, Hyperparameters};
use crate::rng::{purpose, stream};
use crate::variational::{
    expected_global, prior_natural, sample_global, step_size, svi_step, GlobalMoments, GlobalVariationalState,
    NaturalStats,
};

const PATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Task {
    Synthetic,
    ImageInterp,
    ImageDenoise,
    Matrix,
}

impl FromStr for Task {
    type Err = BpfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Task::Synthetic),
            "image-interp" => Ok(Task::ImageInterp),
            "image-denoise" => Ok(Task::ImageDenoise),
            "matrix" => Ok(Task::Matrix),
            _ => Err(BpfaError::Config(format!("unknown task '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InitSpec {
    Random,
    Gibbs { subset: usize, iterations: usize },
}

impl FromStr for InitSpec {
    type Err = BpfaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "random" {
            return Ok(InitSpec::Random);
        }
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["gibbs", subset, iters] => {
                let bad = || BpfaError::Config(format!("bad init '{s}'"));
                Ok(InitSpec::Gibbs {
                    subset: subset.parse().map_err(|_| bad())?,
                    iterations: iters.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(BpfaError::Config(format!(
                "init must be 'random' or 'gibbs:<subset>:<iters>', got '{s}'"
            ))),
        }
    }
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSpec::Random => f.write_str("random"),
            InitSpec::Gibbs { subset, iterations } => write!(f, "gibbs:{subset}:{iterations}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub strategy: Strategy,
    pub hyper: Hyperparameters,
    pub batch_size: usize,
    pub epochs: f64,
    /// Overrides `epochs` when set.
    pub iterations: Option<u64>,
    pub eval_every_s: f64,
    /// Evaluate on an iteration schedule instead of the wall clock.
    pub eval_every_iters: Option<u64>,
    pub seed: u64,
    pub init: InitSpec,
    pub m_samples: usize,
    pub local: LocalOptions,
    pub holdout: f64,
    pub observe_frac: f64,
    pub noise_sd: f64,
    pub n: usize,
    pub d: usize,
    pub k_true: usize,
    pub gamma_w_true: f64,
    pub gamma_obs_true: f64,
    pub image: Option<PathBuf>,
    pub crop: Option<usize>,
    pub matrix: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub record_wall_clock: bool,
    /// Number of recent chain states the baseline predicts with.
    pub window: usize,
    pub parallel_locals: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Synthetic,
            strategy: Strategy::GibbsSsvi,
            hyper: Hyperparameters::default(),
            batch_size: 100,
            epochs: 10.0,
            iterations: None,
            eval_every_s: 5.0,
            eval_every_iters: None,
            seed: 0,
            init: InitSpec::Random,
            m_samples: 64,
            local: LocalOptions::default(),
            holdout: 0.075,
            observe_frac: 0.2,
            noise_sd: 15.0,
            n: 2000,
            d: 40,
            k_true: 20,
            gamma_w_true: 1.0,
            gamma_obs_true: 100.0,
            image: None,
            crop: None,
            matrix: None,
            mask: None,
            out: None,
            resume: None,
            record_wall_clock: true,
            window: 16,
            parallel_locals: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| BpfaError::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(BpfaError::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

impl ExperimentConfig {
    /// Sets one option by its flag name (without leading dashes).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches('-');
        let h = &mut self.hyper;
        match key {
            "task" => self.task = parse(key, value)?,
            "strategy" => self.strategy = parse(key, value)?,
            "K" | "k" => h.k = parse(key, value)?,
            "a" => h.a = parse(key, value)?,
            "b" => h.b = parse(key, value)?,
            "c" => h.c_prior = parse(key, value)?,
            "d" => h.d_prior = parse(key, value)?,
            "e" => h.e_prior = parse(key, value)?,
            "f" => h.f_prior = parse(key, value)?,
            "t0" => h.t0 = parse(key, value)?,
            "zeta" => h.zeta = parse(key, value)?,
            "batch" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "iterations" => self.iterations = Some(parse(key, value)?),
            "eval-every-s" => self.eval_every_s = parse(key, value)?,
            "eval-every-iters" => self.eval_every_iters = Some(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "init" => self.init = parse(key, value)?,
            "M" | "m" => self.m_samples = parse(key, value)?,
            "burnin" => self.local.gibbs.burn_in = parse(key, value)?,
            "nsamples" => self.local.gibbs.n_samples = parse(key, value)?,
            "kernel" => {
                self.local.gibbs.kernel = match value.trim() {
                    "blocked" => GibbsKernel::Blocked,
                    "single-site" => GibbsKernel::SingleSite,
                    _ => return Err(BpfaError::Config(format!("unknown kernel '{value}'"))),
                }
            }
            "random-scan" => self.local.gibbs.random_scan = parse_bool(key, value)?,
            "max-sweeps" => self.local.max_sweeps = parse(key, value)?,
            "unscaled-mu-stat" => self.local.unscaled_mu_stat = parse_bool(key, value)?,
            "holdout" => self.holdout = parse(key, value)?,
            "observe-frac" => self.observe_frac = parse(key, value)?,
            "noise-sd" => self.noise_sd = parse(key, value)?,
            "N" | "n" => self.n = parse(key, value)?,
            "D" | "dim" => self.d = parse(key, value)?,
            "K-true" | "k-true" => self.k_true = parse(key, value)?,
            "gamma-w" => self.gamma_w_true = parse(key, value)?,
            "gamma-obs" => self.gamma_obs_true = parse(key, value)?,
            "image" => self.image = Some(PathBuf::from(value.trim())),
            "crop" => self.crop = Some(parse(key, value)?),
            "matrix" => self.matrix = Some(PathBuf::from(value.trim())),
            "mask" => self.mask = Some(PathBuf::from(value.trim())),
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "resume" => self.resume = Some(PathBuf::from(value.trim())),
            "wall-clock" => self.record_wall_clock = parse_bool(key, value)?,
            "window" => self.window = parse(key, value)?,
            "parallel-locals" => self.parallel_locals = parse_bool(key, value)?,
            _ => return Err(BpfaError::Config(format!("unknown option '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| BpfaError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.local.validate()?;
        if self.batch_size == 0 {
            return Err(BpfaError::Config("batch size must be positive".into()));
        }
        if self.m_samples == 0 {
            return Err(BpfaError::Config("M must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(BpfaError::Config("window must be at least 1".into()));
        }
        if self.eval_every_iters == Some(0) || !(self.eval_every_s > 0.0) {
            return Err(BpfaError::Config("evaluation interval must be positive".into()));
        }
        if matches!(self.task, Task::ImageInterp | Task::ImageDenoise) && self.image.is_none() {
            info!("no image given; using the built-in test pattern");
        }
        if self.task == Task::Matrix && self.matrix.is_none() {
            return Err(BpfaError::Config("matrix task needs a matrix file".into()));
        }
        Ok(())
    }
}

/// Image-task bookkeeping needed to score reconstructions.
#[derive(Debug, Clone)]
pub struct ImageContext {
    pub clean: Image,
    pub corrupted: Image,
    pub pixel_mask: Vec<bool>,
    /// Clean patches in standardized units.
    pub clean_std: Array2<f64>,
}

/// A training set plus whatever is needed to score it.
#[derive(Debug, Clone)]
pub struct PreparedTask {
    pub train: Dataset,
    pub record: StandardizationRecord,
    pub holdout: Option<HoldoutSpec>,
    pub image: Option<ImageContext>,
}

impl PreparedTask {
    /// Rows to predict and the `(column, value)` pairs scored in each.
    fn targets(&self) -> (Vec<usize>, Vec<Vec<(usize, f64)>>) {
        let n = self.train.n();
        match (&self.image, &self.holdout) {
            (Some(img), _) => {
                let rows: Vec<usize> = (0..n).collect();
                let t = rows
                    .iter()
                    .map(|&i| {
                        (0..self.train.d())
                            .filter(|&j| !self.train.mask[[i, j]])
                            .map(|j| (j, img.clean_std[[i, j]]))
                            .collect()
                    })
                    .collect();
                (rows, t)
            }
            (None, Some(h)) => {
                let by_row = h.by_row(n);
                let rows: Vec<usize> = (0..n).filter(|&i| !by_row[i].is_empty()).collect();
                let t = rows.iter().map(|&i| by_row[i].clone()).collect();
                (rows, t)
            }
            (None, None) => (Vec::new(), Vec::new()),
        }
    }
}

fn load_image(config: &ExperimentConfig) -> Result<Image> {
    let img = match &config.image {
        Some(p) => read_image(p)?,
        None => synthetic_image(config.crop.unwrap_or(64), config.crop.unwrap_or(64)),
    };
    match config.crop {
        Some(c) if c < img.height || c < img.width => {
            let (top, left) = ((img.height - c.min(img.height)) / 2, (img.width - c.min(img.width)) / 2);
            img.crop(top, left, c.min(img.height), c.min(img.width))
        }
        _ => Ok(img),
    }
}

/// Builds the training data and evaluation targets for a configuration.
pub fn prepare_task(config: &ExperimentConfig) -> Result<PreparedTask> {
    match config.task {
        Task::Synthetic | Task::Matrix => {
            let raw = if config.task == Task::Synthetic {
                let gen = Hyperparameters {
                    k: config.k_true,
                    ..config.hyper
                };
                let mut rng = stream(config.seed, &[purpose::DATA]);
                sample_generative(&gen, config.n, config.d, config.gamma_w_true, config.gamma_obs_true, &mut rng)?.0
            } else {
                let path = config.matrix.as_ref().expect("validated");
                read_matrix(path, config.mask.as_deref())?
            };
            let (train, mut holdout) = holdout_entries(&raw, config.holdout, config.seed)?;
            let (y, record) = standardize(&train.y, &train.mask)?;
            for (v, &(_, j)) in holdout.values.iter_mut().zip(&holdout.test_entries) {
                *v = (*v - record.means[j]) / record.stds[j];
            }
            let train = Dataset {
                y,
                mask: train.mask,
                row_ids: train.row_ids,
            };
            Ok(PreparedTask {
                train,
                record,
                holdout: Some(holdout),
                image: None,
            })
        }
        Task::ImageInterp | Task::ImageDenoise => {
            let clean = load_image(config)?;
            let mut rng = stream(config.seed, &[purpose::MASK]);
            let (corrupted, pixel_mask) = if config.task == Task::ImageInterp {
                let m = make_interpolation_mask(&clean, config.observe_frac, &mut rng)?;
                (clean.clone(), m)
            } else {
                make_denoising_task(&clean, config.observe_frac, config.noise_sd, &mut rng)?
            };
            let patches = patchify(&corrupted, Some(&pixel_mask), PATCH)?;
            let (y, record) = standardize(&patches.y, &patches.mask)?;
            let clean_patches = patchify(&clean, None, PATCH)?;
            let mut clean_std = clean_patches.y;
            for ((_, j), v) in clean_std.indexed_iter_mut() {
                *v = (*v - record.means[j]) / record.stds[j];
            }
            let train = Dataset {
                y,
                mask: patches.mask,
                row_ids: patches.row_ids,
            };
            Ok(PreparedTask {
                train,
                record,
                holdout: None,
                image: Some(ImageContext {
                    clean,
                    corrupted,
                    pixel_mask,
                    clean_std,
                }),
            })
        }
    }
}

/// Everything a run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub final_iteration: u64,
    pub state: Option<GlobalVariationalState>,
    pub chain: Option<ChainState>,
    pub reconstruction: Option<Image>,
}

struct Evaluation {
    loglik: f64,
    mse: f64,
    psnr: Option<f64>,
    recon: Option<Image>,
}

fn evaluate(task: &PreparedTask, predictor: Predictor, m: usize, seed: u64) -> Result<Evaluation> {
    let (rows, targets) = task.targets();
    let pred = predict(predictor, &task.train, &rows, &targets, m, seed)?;
    let mut entries = Vec::new();
    let mut truth = Vec::new();
    for (r, t) in targets.iter().enumerate() {
        for &(j, v) in t {
            entries.push((r, j));
            truth.push(v);
        }
    }
    let mse = if entries.is_empty() {
        f64::NAN
    } else {
        predictive_mse(&pred.mean, &entries, &truth)?
    };
    let (psnr_db, recon) = match &task.image {
        Some(img) => {
            let recon = reconstruct_from_patches(
                &pred.mean,
                img.clean.height,
                img.clean.width,
                PATCH,
                Some(&task.record),
                img.clean.max_value,
            )?;
            (Some(psnr(&img.clean, &recon, img.clean.max_value)?), Some(recon))
        }
        None => (None, None),
    };
    Ok(Evaluation {
        loglik: pred.loglik,
        mse,
        psnr: psnr_db,
        recon,
    })
}

fn initial_state(config: &ExperimentConfig, train: &Dataset) -> Result<GlobalVariationalState> {
    match config.init {
        InitSpec::Random => {
            GlobalVariationalState::random_init(&config.hyper, train.d(), &mut stream(config.seed, &[purpose::INIT]))
        }
        InitSpec::Gibbs { subset, iterations } => {
            gibbs_warm_start(train, &config.hyper, subset.min(train.n()), iterations, config.seed)
        }
    }
}

fn total_iterations(config: &ExperimentConfig, n: usize) -> u64 {
    config
        .iterations
        .unwrap_or_else(|| (config.epochs * n as f64 / config.batch_size as f64).ceil() as u64)
}

/// Evaluation trigger shared by the SVI and baseline loops.
struct Schedule {
    every_iters: Option<u64>,
    every_s: f64,
    last_eval_s: f64,
}

impl Schedule {
    fn due(&mut self, iteration: u64, train_s: f64, last: bool) -> bool {
        let due = last
            || match self.every_iters {
                Some(k) => iteration.is_multiple_of(k),
                None => train_s - self.last_eval_s >= self.every_s,
            };
        if due {
            self.last_eval_s = train_s;
        }
        due
    }
}

/// One SVI iteration: sample a minibatch, run the local strategy per datum and
/// take a natural-gradient step.
pub fn svi_iteration(
    state: &GlobalVariationalState,
    prior: &GlobalVariationalState,
    train: &Dataset,
    config: &ExperimentConfig,
    t: u64,
) -> Result<GlobalVariationalState> {
    let n = train.n();
    let mut batch_rng = stream(config.seed, &[purpose::BATCH, t]);
    let batch: Vec<usize> = (0..config.batch_size).map(|_| batch_rng.gen_range(0..n)).collect();
    let view = if config.strategy.uses_sampled_globals() {
        GlobalMoments::from_sample(&sample_global(state, &mut stream(config.seed, &[purpose::GLOBAL, t]))?)
    } else {
        expected_global(state)
    };
    let gram = gram_over(&view, &(0..train.d()).collect::<Vec<_>>());
    let stats = batch
        .par_iter()
        .enumerate()
        .map(|(b, &i)| {
            let (y, mask) = train.row(i);
            let problem = LocalProblem::with_gram(&view, y, mask, Some(&gram))?;
            let mut rng = stream(config.seed, &[purpose::LOCAL, t, b as u64]);
            Ok(solve_local(config.strategy, &problem, &config.local, &mut rng).stats)
        })
        .collect::<Result<Vec<NaturalStats>>>()?;
    svi_step(state, prior, &stats, n, step_size(t, &config.hyper)?)
}

/// Trains with the configured SVI strategy and evaluates on schedule.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let task = prepare_task(config)?;
    run_prepared(config, &task)
}

/// [`run_experiment`] on an already prepared task.
pub fn run_prepared(config: &ExperimentConfig, task: &PreparedTask) -> Result<RunOutput> {
    config.validate()?;
    let train = &task.train;
    train.check_rows_observed()?;
    if config.batch_size > train.n() {
        return Err(BpfaError::Config(format!(
            "batch size {} exceeds {} rows",
            config.batch_size,
            train.n()
        )));
    }
    let prior = prior_natural(&config.hyper, train.d())?;
    let (mut state, start) = match &config.resume {
        Some(p) => match checkpoint::load(p)? {
            Checkpoint::Svi { state, iteration, .. } => {
                if state.k() != config.hyper.k || state.d() != train.d() {
                    return Err(BpfaError::Shape("checkpoint does not match the configuration".into()));
                }
                (state, iteration)
            }
            Checkpoint::Chain { .. } => {
                return Err(BpfaError::Config("cannot resume SVI from a chain checkpoint".into()))
            }
        },
        None => (initial_state(config, train)?, 0),
    };
    let total = total_iterations(config, train.n());
    let mut schedule = Schedule {
        every_iters: config.eval_every_iters,
        every_s: config.eval_every_s,
        last_eval_s: 0.0,
    };
    let mut records = Vec::new();
    let mut recon = None;
    let mut train_s = 0.0;
    for t in start + 1..=total {
        let tick = Instant::now();
        state = svi_iteration(&state, &prior, train, config, t)?;
        train_s += tick.elapsed().as_secs_f64();
        if schedule.due(t, train_s, t == total) {
            let opts = config.local;
            let predictor = Predictor::Variational {
                state: &state,
                strategy: config.strategy,
                opts: &opts,
            };
            let ev = evaluate(task, predictor, config.m_samples, config.seed)?;
            let rec = record(config, config.strategy.label(), t, t as f64 * config.batch_size as f64 / train.n() as f64, train_s, &ev);
            info!("{} iteration {t}: loglik {:.4} mse {:.5}", config.strategy, ev.loglik, ev.mse);
            records.push(rec);
            recon = ev.recon;
        }
    }
    let out = RunOutput {
        records,
        final_iteration: total.max(start),
        state: Some(state),
        chain: None,
        reconstruction: recon,
    };
    write_artifacts(config, &out)?;
    Ok(out)
}

fn record(config: &ExperimentConfig, label: &str, iteration: u64, epoch: f64, train_s: f64, ev: &Evaluation) -> MetricRecord {
    let rec = MetricRecord {
        wall_clock_s: config.record_wall_clock.then_some(train_s),
        epoch,
        iteration,
        pred_loglik: ev.loglik,
        pred_mse: ev.mse,
        psnr_db: None,
        strategy: label.into(),
        seed: config.seed,
    };
    match ev.psnr {
        Some(db) => rec.with_psnr(db),
        None => rec,
    }
}

/// Label used for the Gibbs baseline in metric files.
pub const BASELINE_LABEL: &str = "GIBBS_BASELINE";

/// Runs the full-data Gibbs chain with the same evaluation schedule. One iteration
/// is one sweep over every row.
pub fn run_baseline(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let task = prepare_task(config)?;
    run_baseline_prepared(config, &task)
}

pub fn run_baseline_prepared(config: &ExperimentConfig, task: &PreparedTask) -> Result<RunOutput> {
    config.validate()?;
    let train = &task.train;
    let opts = ChainOptions {
        local: config.local,
        parallel_locals: config.parallel_locals,
    };
    let mut state = match &config.resume {
        Some(p) => match checkpoint::load(p)? {
            Checkpoint::Chain { state, .. } => state,
            Checkpoint::Svi { .. } => {
                return Err(BpfaError::Config("cannot resume the baseline from an SVI checkpoint".into()))
            }
        },
        None => ChainState::initial(train, &config.hyper, &mut stream(config.seed, &[purpose::INIT]))?,
    };
    let total = config.iterations.unwrap_or(config.epochs.ceil() as u64);
    let mut schedule = Schedule {
        every_iters: config.eval_every_iters,
        every_s: config.eval_every_s,
        last_eval_s: 0.0,
    };
    let mut window: VecDeque<ChainState> = VecDeque::with_capacity(config.window);
    let mut records = Vec::new();
    let mut recon = None;
    let mut train_s = 0.0;
    let start = state.iteration;
    for t in start + 1..=total {
        let tick = Instant::now();
        let mut rng = stream(config.seed, &[purpose::CHAIN, t]);
        state = gibbs_iteration(state, train, &config.hyper, &opts, &mut rng)?;
        if window.len() == config.window {
            window.pop_front();
        }
        window.push_back(state.clone());
        train_s += tick.elapsed().as_secs_f64();
        if schedule.due(t, train_s, t == total) {
            let states: Vec<ChainState> = window.iter().cloned().collect();
            let ev = evaluate(task, Predictor::Chain { states: &states }, states.len(), config.seed)?;
            info!("baseline iteration {t}: loglik {:.4} mse {:.5}", ev.loglik, ev.mse);
            records.push(record(config, BASELINE_LABEL, t, t as f64, train_s, &ev));
            recon = ev.recon;
        }
    }
    let out = RunOutput {
        records,
        final_iteration: state.iteration,
        state: None,
        chain: Some(state),
        reconstruction: recon,
    };
    write_artifacts(config, &out)?;
    Ok(out)
}

fn write_artifacts(config: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    let Some(dir) = &config.out else {
        return Ok(());
    };
    fs::create_dir_all(dir)?;
    let metrics = dir.join("metrics.jsonl");
    write_metrics(fs::File::create(&metrics)?, &out.records)?;
    let ckpt = match (&out.state, &out.chain) {
        (Some(state), _) => Checkpoint::Svi {
            state: state.clone(),
            iteration: out.final_iteration,
            seed: config.seed,
        },
        (None, Some(chain)) => Checkpoint::Chain {
            state: chain.clone(),
            seed: config.seed,
        },
        (None, None) => unreachable!("every run produces a state"),
    };
    checkpoint::save(&dir.join("final.ckpt"), &ckpt)?;
    if let Some(img) = &out.reconstruction {
        write_image(&dir.join("recon.pgm"), img)?;
    }
    fs::write(dir.join("plotdata.csv"), emit_plot_data(&[metrics])?)?;
    Ok(())
}

/// Merges metric files into one long-format CSV sorted by strategy, then time.
pub fn emit_plot_data(files: &[PathBuf]) -> Result<String> {
    if files.is_empty() {
        return Err(BpfaError::InvalidArgument("no metric files given".into()));
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(read_metrics(BufReader::new(fs::File::open(f)?))?);
    }
    for r in &rows {
        if r.strategy != BASELINE_LABEL && r.strategy.parse::<Strategy>().is_err() {
            return Err(BpfaError::SchemaMismatch(format!("unknown strategy label '{}'", r.strategy)));
        }
    }
    rows.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then(a.wall_clock_s.unwrap_or(0.0).total_cmp(&b.wall_clock_s.unwrap_or(0.0)))
            .then(a.iteration.cmp(&b.iteration))
            .then(a.seed.cmp(&b.seed))
    });
    let mut out = String::from("strategy,seed,iteration,epoch,time_s,pred_loglik,pred_mse,psnr_db\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.seed,
            r.iteration,
            r.epoch,
            opt(r.wall_clock_s),
            r.pred_loglik,
            r.pred_mse,
            opt(r.psnr_db)
        ));
    }
    Ok(out)
}
