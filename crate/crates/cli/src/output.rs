//! On-disk layout of experiment results.
//!
//! ```text
//! <out>/config.json        resolved experiment config
//! <out>/vts.json           ground-truth virtual transmitters
//! <out>/metrics.json       deterministic summary (no timings)
//! <out>/cdf.csv            empirical error CDF per method
//! <out>/vt_rmse.csv        per-VT mapping accuracy
//! <out>/manifest.json      hash, seeds, version, wall times, repair counts
//! <out>/runs/trajTTT_repRRR/
//!     run.json             run indices and seeds
//!     truth.csv            true states
//!     measurements.csv     step, type (LOS/NLOS), range, bearing
//!     estimates.csv        proposed filter estimates and errors
//!     baseline.csv         LOS-only EKF estimates and errors
//!     map.json             final extracted map and best-particle mixture
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nalgebra::Vector2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vtslam::gm_phd::MapSnapshot;
use vtslam::metrics::error_cdf;
use vtslam::{Agent, FilterStats, Interaction, MeasurementSet, RangeBearing, RepairCounters, Scan, Vt};

use crate::config::ExperimentConfig;
use crate::experiment::{Metrics, RunId, RunOutcome, RunRecord, Track};

pub const RUNS_DIR: &str = "runs";

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing JSON")?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> anyhow::Result<D> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn read_csv<D: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<D>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub step: usize,
    pub est_x: f64,
    pub est_y: f64,
    pub est_vx: f64,
    pub est_vy: f64,
    pub est_b: f64,
    pub true_x: f64,
    pub true_y: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasurementKind {
    #[serde(rename = "LOS")]
    Los,
    #[serde(rename = "NLOS")]
    Nlos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub step: usize,
    #[serde(rename = "type")]
    pub kind: MeasurementKind,
    pub range: f64,
    pub bearing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VtRecord {
    pub x: f64,
    pub y: f64,
    pub bias: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub path: Vec<Interaction>,
}

impl From<&Vt> for VtRecord {
    fn from(v: &Vt) -> Self {
        Self {
            x: v.position.x,
            y: v.position.y,
            bias: v.bias,
            path: v.provenance.clone(),
        }
    }
}

impl VtRecord {
    pub fn to_vt(&self) -> Vt {
        let mut v = Vt::new(Vector2::new(self.x, self.y), self.bias);
        v.provenance = self.path.clone();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub extracted: Vec<VtRecord>,
    pub mixture: MapSnapshot,
}

pub fn run_dir(out: &Path, id: &RunId) -> PathBuf {
    out.join(RUNS_DIR).join(id.dir_name())
}

/// Run directories under `out`, sorted by name.
pub fn list_run_dirs(out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let root = out.join(RUNS_DIR);
    let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no run directories in {}", root.display());
    }
    Ok(dirs)
}

pub fn write_truth(path: &Path, truth: &[Agent]) -> anyhow::Result<()> {
    write_csv(
        path,
        truth.iter().enumerate().map(|(step, s)| TruthRow {
            step,
            x: s.position.x,
            y: s.position.y,
            vx: s.velocity.x,
            vy: s.velocity.y,
            b: s.bias,
        }),
    )
}

pub fn read_truth(path: &Path) -> anyhow::Result<Vec<Agent>> {
    let rows: Vec<TruthRow> = read_csv(path)?;
    for (i, r) in rows.iter().enumerate() {
        if r.step != i {
            bail!("{}: expected step {i}, found {}", path.display(), r.step);
        }
    }
    Ok(rows
        .iter()
        .map(|r| Agent::new(Vector2::new(r.x, r.y), Vector2::new(r.vx, r.vy), r.b))
        .collect())
}

/// Scans are numbered from step 1.
pub fn write_measurements(path: &Path, scans: &[Scan]) -> anyhow::Result<()> {
    let rows = scans.iter().enumerate().flat_map(|(k, s)| {
        let step = k + 1;
        let los = s.los.iter().map(move |z| MeasurementRow {
            step,
            kind: MeasurementKind::Los,
            range: z.range,
            bearing: z.bearing,
        });
        let nlos = s.nlos.iter().map(move |z| MeasurementRow {
            step,
            kind: MeasurementKind::Nlos,
            range: z.range,
            bearing: z.bearing,
        });
        los.chain(nlos)
    });
    write_csv(path, rows)
}

pub fn read_measurements(path: &Path, steps: usize) -> anyhow::Result<Vec<Scan>> {
    let rows: Vec<MeasurementRow> = read_csv(path)?;
    let mut scans = vec![MeasurementSet::default(); steps];
    for r in rows {
        if r.step == 0 || r.step > steps {
            bail!("{}: step {} outside 1..={steps}", path.display(), r.step);
        }
        let z = RangeBearing {
            range: r.range,
            bearing: r.bearing,
        };
        let scan = &mut scans[r.step - 1];
        match r.kind {
            MeasurementKind::Los if scan.los.is_some() => {
                bail!("{}: two LOS measurements at step {}", path.display(), r.step)
            }
            MeasurementKind::Los => scan.los = Some(z),
            MeasurementKind::Nlos => scan.nlos.push(z),
        }
    }
    Ok(scans)
}

pub fn write_track(path: &Path, track: &Track, truth: &[Agent]) -> anyhow::Result<()> {
    write_csv(
        path,
        track
            .estimates
            .iter()
            .zip(&truth[1..])
            .zip(&track.errors)
            .enumerate()
            .map(|(k, ((e, t), err))| EstimateRow {
                step: k + 1,
                est_x: e.position.x,
                est_y: e.position.y,
                est_vx: e.velocity.x,
                est_vy: e.velocity.y,
                est_b: e.bias,
                true_x: t.position.x,
                true_y: t.position.y,
                error: *err,
            }),
    )
}

pub fn read_errors(path: &Path) -> anyhow::Result<Vec<f64>> {
    let rows: Vec<EstimateRow> = read_csv(path)?;
    Ok(rows.into_iter().map(|r| r.error).collect())
}

pub fn write_map(path: &Path, extracted: &[Vt], mixture: &MapSnapshot) -> anyhow::Result<()> {
    write_json(
        path,
        &MapFile {
            extracted: extracted.iter().map(VtRecord::from).collect(),
            mixture: mixture.clone(),
        },
    )
}

/// Writes the simulation part of a run directory.
pub fn write_simulation(dir: &Path, id: &RunId, truth: &[Agent], scans: &[Scan]) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("run.json"), id)?;
    write_truth(&dir.join("truth.csv"), truth)?;
    write_measurements(&dir.join("measurements.csv"), scans)
}

pub fn write_run(out: &Path, outcome: &RunOutcome) -> anyhow::Result<()> {
    let dir = run_dir(out, &outcome.id);
    let truth = &outcome.simulation.truth;
    let scans: Vec<Scan> = outcome
        .simulation
        .scans
        .iter()
        .map(|s| s.measurements.clone())
        .collect();
    write_simulation(&dir, &outcome.id, truth, &scans)?;
    write_track(&dir.join("estimates.csv"), &outcome.proposed.track, truth)?;
    write_track(&dir.join("baseline.csv"), &outcome.baseline, truth)?;
    write_map(
        &dir.join("map.json"),
        &outcome.proposed.final_map,
        &outcome.proposed.final_mixture,
    )
}

/// Reconstructs the summary inputs of a run from its directory.
pub fn read_record(dir: &Path) -> anyhow::Result<RunRecord> {
    let id: RunId = read_json(&dir.join("run.json"))?;
    let map: MapFile = read_json(&dir.join("map.json"))?;
    Ok(RunRecord {
        trajectory: id.trajectory,
        repetition: id.repetition,
        proposed_errors: read_errors(&dir.join("estimates.csv"))?,
        baseline_errors: read_errors(&dir.join("baseline.csv"))?,
        final_map: map.extracted.iter().map(VtRecord::to_vt).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct CdfRow<'a> {
    method: &'a str,
    error: f64,
    fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct VtCsvRow {
    vt: usize,
    x: f64,
    y: f64,
    bias: f64,
    rmse: Option<f64>,
    matched: usize,
    missed: usize,
}

/// Writes `metrics.json`, `cdf.csv` and `vt_rmse.csv`.
pub fn write_summary(out: &Path, metrics: &Metrics, records: &[RunRecord]) -> anyhow::Result<()> {
    write_json(&out.join("metrics.json"), metrics)?;
    let pooled =
        |f: fn(&RunRecord) -> &Vec<f64>| -> Vec<f64> { records.iter().flat_map(|r| f(r).iter().copied()).collect() };
    let proposed = error_cdf(&pooled(|r| &r.proposed_errors));
    let baseline = error_cdf(&pooled(|r| &r.baseline_errors));
    let rows = proposed
        .iter()
        .map(|&(error, fraction)| CdfRow {
            method: "proposed",
            error,
            fraction,
        })
        .chain(baseline.iter().map(|&(error, fraction)| CdfRow {
            method: "baseline",
            error,
            fraction,
        }));
    write_csv(&out.join("cdf.csv"), rows)?;
    write_csv(
        &out.join("vt_rmse.csv"),
        metrics.vts.iter().map(|v| VtCsvRow {
            vt: v.index,
            x: v.x,
            y: v.y,
            bias: v.bias,
            rmse: v.rmse,
            matched: v.matched,
            missed: v.missed,
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub trajectory: usize,
    pub repetition: usize,
    pub seeds: crate::config::RunSeeds,
    pub filter_seconds: f64,
    pub seconds_per_step: f64,
    pub stats: FilterStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub threads: usize,
    pub wall_seconds: f64,
    pub repairs: RepairCounters,
    pub association_truncations: u64,
    pub uniform_resets: u64,
    pub runs: Vec<RunManifest>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, outcomes: &[RunOutcome], wall_seconds: f64) -> Self {
        let mut repairs = RepairCounters::default();
        let mut association_truncations = 0;
        let mut uniform_resets = 0;
        let runs = outcomes
            .iter()
            .map(|o| {
                let s = o.proposed.stats;
                repairs += s.repairs;
                association_truncations += s.association_truncations;
                uniform_resets += s.uniform_resets;
                RunManifest {
                    trajectory: o.id.trajectory,
                    repetition: o.id.repetition,
                    seeds: o.id.seeds,
                    filter_seconds: o.proposed.seconds,
                    seconds_per_step: o.proposed.seconds / o.proposed.track.estimates.len().max(1) as f64,
                    stats: s,
                }
            })
            .collect();
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            master_seed: cfg.seed,
            threads: rayon::current_num_threads(),
            wall_seconds,
            repairs,
            association_truncations,
            uniform_resets,
            runs,
        }
    }
}
