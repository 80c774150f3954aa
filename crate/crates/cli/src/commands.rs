//! Command-line interface.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vtslam::WeightStrategy;

use crate::config::{preset, ExperimentConfig};
use crate::experiment::{
    execute_all, run_baseline, run_filter, run_ids, simulate, summarize, RunId, RunRecord, Simulation,
};
use crate::output::{self, read_json, write_json, Manifest, VtRecord};

#[derive(Debug, Parser)]
#[command(
    name = "vtslam",
    version,
    about = "Multipath SLAM with virtual transmitters: simulation and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate ground truth and measurements for every run.
    Simulate(Common),
    /// Run the filter and the LOS-only baseline on simulated runs in `--out`.
    Filter(FilterArgs),
    /// Recompute summary metrics from the run directories in `--out`.
    Evaluate(EvaluateArgs),
    /// Simulate, filter and evaluate in one go.
    Run(Common),
    /// Run several weighting strategies on identical seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Built-in scenario (scenario1 or scenario2).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub strategy: Option<WeightStrategy>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub strategy: Option<WeightStrategy>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// Directory written by `simulate`.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// Directory written by `run` or `simulate` + `filter`.
    #[arg(long, default_value = "results")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Strategies to compare.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "multi-feature,empty-set,closed-form-single-cluster"
    )]
    pub strategies: Vec<WeightStrategy>,
}

impl Common {
    /// Loads the preset or config file and applies command-line overrides.
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match (&self.preset, &self.config) {
            (Some(name), None) => preset(name)?,
            (None, Some(path)) => ExperimentConfig::load(path)?,
            (None, None) => bail!("one of --preset or --config is required"),
            (Some(_), Some(_)) => bail!("--preset and --config are mutually exclusive"),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.particles {
            cfg.filter.num_particles = n;
        }
        if let Some(s) = self.strategy {
            cfg.filter.strategy = s;
        }
        if let Some(t) = self.trajectories {
            cfg.trajectories = t;
        }
        if let Some(r) = self.reps {
            cfg.repetitions = r;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), cfg)?;
    let vts: Vec<VtRecord> = cfg.ground_truth()?.iter().map(VtRecord::from).collect();
    write_json(&out.join("vts.json"), &vts)
}

pub fn run_experiment(command: &str, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<crate::experiment::Metrics> {
    let start = Instant::now();
    prepare_out(out, cfg)?;
    let outcomes = execute_all(cfg)?;
    for o in &outcomes {
        output::write_run(out, o)?;
    }
    let records: Vec<RunRecord> = outcomes.iter().map(RunRecord::from).collect();
    let metrics = summarize(cfg, &records)?;
    output::write_summary(out, &metrics, &records)?;
    let manifest = Manifest::new(command, cfg, &outcomes, start.elapsed().as_secs_f64());
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(metrics)
}

fn cmd_simulate(args: &Common) -> anyhow::Result<()> {
    configure_threads(args.threads)?;
    let cfg = args.resolve()?;
    prepare_out(&args.out, &cfg)?;
    let vts = cfg.ground_truth()?;
    let sims: Vec<(RunId, Simulation)> = run_ids(&cfg)
        .into_par_iter()
        .map(|id| (id, simulate(&cfg, &vts, &id.seeds)))
        .collect();
    for (id, sim) in &sims {
        let scans: Vec<_> = sim.scans.iter().map(|s| s.measurements.clone()).collect();
        output::write_simulation(&output::run_dir(&args.out, id), id, &sim.truth, &scans)?;
    }
    println!("simulated {} runs into {}", sims.len(), args.out.display());
    Ok(())
}

fn cmd_filter(args: &FilterArgs) -> anyhow::Result<()> {
    configure_threads(args.threads)?;
    let mut cfg: ExperimentConfig = read_json(&args.out.join("config.json"))?;
    if let Some(n) = args.particles {
        cfg.filter.num_particles = n;
    }
    if let Some(s) = args.strategy {
        cfg.filter.strategy = s;
    }
    cfg.validate()?;
    write_json(&args.out.join("config.json"), &cfg)?;
    let vts = cfg.ground_truth()?;
    let dirs = output::list_run_dirs(&args.out)?;
    dirs.par_iter()
        .map(|dir| -> anyhow::Result<()> {
            let id: RunId = read_json(&dir.join("run.json"))?;
            let truth = output::read_truth(&dir.join("truth.csv"))?;
            let scans = output::read_measurements(&dir.join("measurements.csv"), truth.len().saturating_sub(1))?;
            let sim = Simulation {
                truth,
                scans: scans
                    .into_iter()
                    .map(|measurements| vtslam::SimulatedScan {
                        measurements,
                        origins: Vec::new(),
                    })
                    .collect(),
            };
            let proposed = run_filter(&cfg, &vts, &sim, id.seeds.filter, cfg.filter.strategy)?;
            let baseline = run_baseline(&cfg, &vts, &sim)?;
            output::write_track(&dir.join("estimates.csv"), &proposed.track, &sim.truth)?;
            output::write_track(&dir.join("baseline.csv"), &baseline, &sim.truth)?;
            output::write_map(&dir.join("map.json"), &proposed.final_map, &proposed.final_mixture)
        })
        .collect::<anyhow::Result<Vec<()>>>()?;
    println!("filtered {} runs in {}", dirs.len(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let cfg: ExperimentConfig = read_json(&args.out.join("config.json"))?;
    let records = output::list_run_dirs(&args.out)?
        .iter()
        .map(|d| output::read_record(d))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let metrics = summarize(&cfg, &records)?;
    output::write_summary(&args.out, &metrics, &records)?;
    print_metrics(&metrics);
    Ok(())
}

fn print_metrics(m: &crate::experiment::Metrics) {
    println!(
        "{} [{}] runs={} proposed RMSE={:.3} m baseline RMSE={:.3} m",
        m.name, m.strategy, m.runs, m.proposed.rmse, m.baseline.rmse
    );
    for v in &m.vts {
        let rmse = v.rmse.map_or("-".to_string(), |r| format!("{r:.3}"));
        println!(
            "  VT{} ({:.2}, {:.2}, b={:.2}): RMSE {rmse} m, matched {}, missed {}",
            v.index + 1,
            v.x,
            v.y,
            v.bias,
            v.matched,
            v.missed
        );
    }
}

fn cmd_run(args: &Common) -> anyhow::Result<()> {
    configure_threads(args.threads)?;
    let cfg = args.resolve()?;
    let metrics = run_experiment("run", &cfg, &args.out)?;
    print_metrics(&metrics);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: WeightStrategy,
    pub rmse: f64,
    pub per_run_rmse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub reference: WeightStrategy,
    pub other: WeightStrategy,
    /// Fraction of runs where the reference RMSE is at most the other's.
    pub reference_not_worse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub name: String,
    pub seed: u64,
    pub strategies: Vec<StrategySummary>,
    pub paired: Vec<PairedComparison>,
}

pub fn run_sweep(cfg: &ExperimentConfig, strategies: &[WeightStrategy], out: &Path) -> anyhow::Result<SweepSummary> {
    if strategies.is_empty() {
        bail!("no strategies given");
    }
    let mut summaries = Vec::new();
    for &s in strategies {
        let mut c = cfg.clone();
        c.filter.strategy = s;
        let m = run_experiment("sweep", &c, &out.join(s.name()))?;
        print_metrics(&m);
        summaries.push(StrategySummary {
            strategy: s,
            rmse: m.proposed.rmse,
            per_run_rmse: m.per_run.iter().map(|r| r.proposed_rmse).collect(),
        });
    }
    let reference = &summaries[0];
    let paired = summaries[1..]
        .iter()
        .map(|o| {
            let wins = reference
                .per_run_rmse
                .iter()
                .zip(&o.per_run_rmse)
                .filter(|(a, b)| a <= b)
                .count();
            PairedComparison {
                reference: reference.strategy,
                other: o.strategy,
                reference_not_worse: wins as f64 / reference.per_run_rmse.len() as f64,
            }
        })
        .collect();
    let summary = SweepSummary {
        name: cfg.name.clone(),
        seed: cfg.seed,
        strategies: summaries,
        paired,
    };
    write_json(&out.join("sweep.json"), &summary)?;
    Ok(summary)
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    configure_threads(args.common.threads)?;
    let cfg = args.common.resolve()?;
    std::fs::create_dir_all(&args.common.out).with_context(|| format!("creating {}", args.common.out.display()))?;
    let summary = run_sweep(&cfg, &args.strategies, &args.common.out)?;
    for p in &summary.paired {
        println!(
            "{} not worse than {} in {:.0}% of runs",
            p.reference,
            p.other,
            100.0 * p.reference_not_worse
        );
    }
    Ok(())
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Filter(a) => cmd_filter(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}
