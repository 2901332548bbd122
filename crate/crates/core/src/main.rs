use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use bpfa::experiment::{emit_plot_data, run_baseline, run_experiment, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bpfa", version, about = "Beta process factor analysis with stochastic variational inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with one SVI strategy.
    Run(RunArgs),
    /// Run the full-data Gibbs sampler.
    Baseline(RunArgs),
    /// Merge metric files into one CSV.
    Plotdata {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// synthetic | image-interp | image-denoise | matrix
    #[arg(long)]
    task: Option<String>,
    /// mf-svi | mf-ssvi | titsias-ssvi | mimno-svi | gibbs-ssvi
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<f64>,
    /// Fixed iteration count; overrides --epochs.
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// random | gibbs:<subset>:<iters>
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    nsamples: Option<usize>,
    /// blocked | single-site
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    eval_every_s: Option<f64>,
    /// Evaluate every n iterations instead of on the wall clock.
    #[arg(long)]
    eval_every_iters: Option<u64>,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    observe_frac: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long)]
    unscaled_mu_stat: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write null wall-clock times so repeated runs give identical files.
    #[arg(long)]
    no_wall_clock: bool,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long = "D")]
    d: Option<usize>,
    #[arg(long = "K-true")]
    k_true: Option<usize>,
    #[arg(long)]
    gamma_obs: Option<f64>,
    #[arg(long)]
    gamma_w: Option<f64>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Center crop to a square of this side.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Chain states used for baseline predictions.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    parallel_locals: bool,
}

impl RunArgs {
    fn config(&self) -> bpfa::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_text(&fs::read_to_string(p)?)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let flags: [(&str, Option<String>); 30] = [
            ("task", self.task.clone()),
            ("strategy", self.strategy.clone()),
            ("K", self.k.map(|v| v.to_string())),
            ("batch", self.batch.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("init", self.init.clone()),
            ("burnin", self.burnin.map(|v| v.to_string())),
            ("nsamples", self.nsamples.map(|v| v.to_string())),
            ("kernel", self.kernel.clone()),
            ("eval-every-s", self.eval_every_s.map(|v| v.to_string())),
            ("eval-every-iters", self.eval_every_iters.map(|v| v.to_string())),
            ("holdout", self.holdout.map(|v| v.to_string())),
            ("observe-frac", self.observe_frac.map(|v| v.to_string())),
            ("noise-sd", self.noise_sd.map(|v| v.to_string())),
            ("M", self.m.map(|v| v.to_string())),
            ("unscaled-mu-stat", self.unscaled_mu_stat.then(|| "true".into())),
            ("out", path(&self.out)),
            ("resume", path(&self.resume)),
            ("wall-clock", self.no_wall_clock.then(|| "false".into())),
            ("N", self.n.map(|v| v.to_string())),
            ("D", self.d.map(|v| v.to_string())),
            ("K-true", self.k_true.map(|v| v.to_string())),
            ("gamma-obs", self.gamma_obs.map(|v| v.to_string())),
            ("gamma-w", self.gamma_w.map(|v| v.to_string())),
            ("image", path(&self.image)),
            ("crop", self.crop.map(|v| v.to_string())),
            ("matrix", path(&self.matrix)),
            ("mask", path(&self.mask)),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        if let Some(w) = self.window {
            cfg.set("window", &w.to_string())?;
        }
        if self.parallel_locals {
            cfg.set("parallel-locals", "true")?;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => args.config().and_then(|c| run_experiment(&c)).map(|_| ()),
        Command::Baseline(args) => args.config().and_then(|c| run_baseline(&c)).map(|_| ()),
        Command::Plotdata { files, out } => emit_plot_data(&files).and_then(|csv| match out {
            Some(p) => fs::write(p, csv).map_err(Into::into),
            None => {
                print!("{csv}");
                Ok(())
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
