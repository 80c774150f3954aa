//! Monte Carlo runs: simulate, filter, baseline, summarize.

use std::time::Instant;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vtslam::gm_phd::MapSnapshot;
use vtslam::metrics::cdf_at;
use vtslam::{
    generate_measurements, generate_trajectory, localization_rmse, vt_rmse, Agent, Filter, FilterStats, LosEkf,
    SimulatedScan, Vt, WeightStrategy,
};

use crate::config::{ExperimentConfig, RunSeeds};

/// Identifies one Monte Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunId {
    pub trajectory: usize,
    pub repetition: usize,
    pub seeds: RunSeeds,
}

impl RunId {
    pub fn dir_name(&self) -> String {
        format!("traj{:03}_rep{:03}", self.trajectory, self.repetition)
    }
}

pub fn run_ids(cfg: &ExperimentConfig) -> Vec<RunId> {
    (0..cfg.trajectories)
        .flat_map(|t| {
            (0..cfg.repetitions).map(move |r| RunId {
                trajectory: t,
                repetition: r,
                seeds: RunSeeds::derive(cfg.seed, t, r),
            })
        })
        .collect()
}

/// Ground truth and measurements of one run. `truth[k]` is the state at step
/// `k`; `scans[k - 1]` is observed at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub truth: Vec<Agent>,
    pub scans: Vec<SimulatedScan<f64>>,
}

pub fn simulate(cfg: &ExperimentConfig, vts: &[Vt], seeds: &RunSeeds) -> Simulation {
    let mut traj_rng = ChaCha8Rng::seed_from_u64(seeds.trajectory);
    let truth = generate_trajectory(cfg.initial_state.agent(), &cfg.motion, cfg.steps, &mut traj_rng);
    let mut meas_rng = ChaCha8Rng::seed_from_u64(seeds.measurements);
    let anchor = nalgebra::Vector2::from(cfg.environment.anchor);
    let scans = generate_measurements(&truth, &anchor, vts, &cfg.sensor(vts), cfg.motion.dt, &mut meas_rng);
    Simulation { truth, scans }
}

/// Per-step estimates of one method with their position errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub estimates: Vec<Agent>,
    pub errors: Vec<f64>,
}

impl Track {
    fn new(estimates: Vec<Agent>, truth: &[Agent]) -> Self {
        let errors = estimates
            .iter()
            .zip(&truth[1..])
            .map(|(e, t)| (e.position - t.position).norm())
            .collect();
        Self { estimates, errors }
    }
}

#[derive(Debug, Clone)]
pub struct FilterRun {
    pub track: Track,
    pub final_map: Vec<Vt>,
    pub final_mixture: MapSnapshot,
    pub stats: FilterStats,
    pub seconds: f64,
}

pub fn run_filter(
    cfg: &ExperimentConfig,
    vts: &[Vt],
    sim: &Simulation,
    seed: u64,
    strategy: WeightStrategy,
) -> anyhow::Result<FilterRun> {
    let mut fc = cfg.filter_config(vts)?;
    fc.strategy = strategy;
    let anchor = nalgebra::Vector2::from(cfg.environment.anchor);
    let mut filter = Filter::new(fc, anchor, cfg.initial_state.agent(), seed)?;
    let start = Instant::now();
    let mut estimates = Vec::with_capacity(sim.scans.len());
    let mut final_map = Vec::new();
    for scan in &sim.scans {
        let est = filter.step(&scan.measurements);
        estimates.push(est.state);
        final_map = est.map;
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(FilterRun {
        track: Track::new(estimates, &sim.truth),
        final_map,
        final_mixture: filter.best_map().snapshot(),
        stats: filter.stats(),
        seconds,
    })
}

pub fn run_baseline(cfg: &ExperimentConfig, vts: &[Vt], sim: &Simulation) -> anyhow::Result<Track> {
    let anchor = nalgebra::Vector2::from(cfg.environment.anchor);
    let mut ekf = LosEkf::new(&cfg.initial_state.agent(), cfg.motion, cfg.sensor(vts), anchor);
    let estimates = sim
        .scans
        .iter()
        .enumerate()
        .map(|(k, s)| {
            ekf.step(&s.measurements)
                .with_context(|| format!("baseline failed at step {}", k + 1))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Track::new(estimates, &sim.truth))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub id: RunId,
    pub simulation: Simulation,
    pub proposed: FilterRun,
    pub baseline: Track,
}

/// Simulates one run and feeds the identical scans to both methods.
pub fn execute(cfg: &ExperimentConfig, vts: &[Vt], id: RunId) -> anyhow::Result<RunOutcome> {
    let simulation = simulate(cfg, vts, &id.seeds);
    let proposed = run_filter(cfg, vts, &simulation, id.seeds.filter, cfg.filter.strategy)
        .with_context(|| format!("run {}", id.dir_name()))?;
    let baseline = run_baseline(cfg, vts, &simulation)?;
    Ok(RunOutcome {
        id,
        simulation,
        proposed,
        baseline,
    })
}

/// Executes every run of the config in parallel; results keep run order.
pub fn execute_all(cfg: &ExperimentConfig) -> anyhow::Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let vts = cfg.ground_truth()?;
    run_ids(cfg).into_par_iter().map(|id| execute(cfg, &vts, id)).collect()
}

/// What the summary needs from one run; also reconstructible from files.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub trajectory: usize,
    pub repetition: usize,
    pub proposed_errors: Vec<f64>,
    pub baseline_errors: Vec<f64>,
    pub final_map: Vec<Vt>,
}

impl From<&RunOutcome> for RunRecord {
    fn from(o: &RunOutcome) -> Self {
        Self {
            trajectory: o.id.trajectory,
            repetition: o.id.repetition,
            proposed_errors: o.proposed.track.errors.clone(),
            baseline_errors: o.baseline.errors.clone(),
            final_map: o.proposed.final_map.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub rmse: f64,
    /// `(error, fraction)` on a fixed grid.
    pub cdf: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VtRow {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub bias: f64,
    pub rmse: Option<f64>,
    pub matched: usize,
    pub missed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub trajectory: usize,
    pub repetition: usize,
    pub proposed_rmse: f64,
    pub baseline_rmse: f64,
    pub map_size: usize,
}

/// Deterministic summary of a set of runs (no timings).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub name: String,
    pub strategy: WeightStrategy,
    pub seed: u64,
    pub config_hash: String,
    pub runs: usize,
    pub proposed: MethodSummary,
    pub baseline: MethodSummary,
    pub vts: Vec<VtRow>,
    pub per_run: Vec<RunMetrics>,
}

pub const CDF_GRID_STEP: f64 = 0.05;
pub const CDF_GRID_MAX: f64 = 20.0;

fn summarize_method<'a>(runs: impl Iterator<Item = &'a [f64]> + Clone) -> MethodSummary {
    let all: Vec<f64> = runs.clone().flatten().copied().collect();
    let n = (CDF_GRID_MAX / CDF_GRID_STEP).round() as usize;
    let cdf = (0..=n)
        .map(|i| {
            let x = i as f64 * CDF_GRID_STEP;
            [x, cdf_at(&all, x)]
        })
        .collect();
    MethodSummary {
        rmse: localization_rmse(runs).unwrap_or(f64::NAN),
        cdf,
    }
}

pub fn summarize(cfg: &ExperimentConfig, records: &[RunRecord]) -> anyhow::Result<Metrics> {
    let truth = cfg.ground_truth()?;
    let maps: Vec<Vec<Vt>> = records.iter().map(|r| r.final_map.clone()).collect();
    let scores = vt_rmse(&maps, &truth, &cfg.evaluation);
    let vts = scores
        .into_iter()
        .map(|s| VtRow {
            index: s.index,
            x: truth[s.index].position.x,
            y: truth[s.index].position.y,
            bias: truth[s.index].bias,
            rmse: s.rmse,
            matched: s.matched,
            missed: s.missed,
        })
        .collect();
    let per_run = records
        .iter()
        .map(|r| RunMetrics {
            trajectory: r.trajectory,
            repetition: r.repetition,
            proposed_rmse: localization_rmse([r.proposed_errors.as_slice()]).unwrap_or(f64::NAN),
            baseline_rmse: localization_rmse([r.baseline_errors.as_slice()]).unwrap_or(f64::NAN),
            map_size: r.final_map.len(),
        })
        .collect();
    Ok(Metrics {
        name: cfg.name.clone(),
        strategy: cfg.filter.strategy,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        runs: records.len(),
        proposed: summarize_method(records.iter().map(|r| r.proposed_errors.as_slice())),
        baseline: summarize_method(records.iter().map(|r| r.baseline_errors.as_slice())),
        vts,
        per_run,
    })
}
