//! Evaluation: localization RMSE, empirical error CDFs and per-VT mapping
//! RMSE under a gated optimal assignment to ground truth.

use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::geometry::VirtualTransmitter;

/// Outcome of one filter run against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    /// 2-D position error per step (m).
    pub errors: Vec<f64>,
    pub final_map: Vec<VirtualTransmitter<f64>>,
    pub truth: Vec<VirtualTransmitter<f64>>,
    /// Mean wall time per step (s).
    pub seconds_per_step: f64,
}

/// Root mean squared error pooled over every step of every run.
/// Returns `None` when there are no errors at all.
pub fn localization_rmse<'a, I>(runs: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (sum, n) = runs
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Empirical CDF as `(error, fraction <= error)` points, one per distinct
/// value, sorted ascending.
pub fn error_cdf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted: Vec<f64> = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == e => last.1 = frac,
            _ => out.push((e, frac)),
        }
    }
    out
}

/// Fraction of errors at or below `x`.
pub fn cdf_at(errors: &[f64], x: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e <= x).count() as f64 / errors.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VtMatchConfig {
    /// Weight of the squared bias difference in the matching distance.
    pub lambda_bias: f64,
    /// Largest matching distance accepted (m).
    pub gate: f64,
}

impl Default for VtMatchConfig {
    fn default() -> Self {
        Self {
            lambda_bias: 1.0,
            gate: 5.0,
        }
    }
}

fn match_distance(est: &VirtualTransmitter<f64>, truth: &VirtualTransmitter<f64>, cfg: &VtMatchConfig) -> f64 {
    let dp = (est.position - truth.position).norm_squared();
    let db = est.bias - truth.bias;
    (dp + cfg.lambda_bias * db * db).sqrt()
}

/// Optimal one-to-one matching of estimates to ground-truth VTs.
/// `result[i]` is the estimate index matched to truth `i`, if any.
///
/// Each truth VT either takes an estimate within the gate or stays unmatched
/// at the cost of the gate, so the total is minimized over both choices.
/// Exact ties go to the lower truth index.
pub fn assign_vts(
    estimates: &[VirtualTransmitter<f64>],
    truth: &[VirtualTransmitter<f64>],
    cfg: &VtMatchConfig,
) -> Vec<Option<usize>> {
    let n = truth.len();
    let m = estimates.len();
    if n == 0 {
        return Vec::new();
    }
    let tie = cfg.gate.abs().max(1.0) * 1e-12;
    let cost: Vec<Vec<f64>> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut row = vec![f64::INFINITY; m + n];
            for (j, e) in estimates.iter().enumerate() {
                let d = match_distance(e, t, cfg);
                if d <= cfg.gate {
                    row[j] = d + tie * i as f64;
                }
            }
            row[m + i] = cfg.gate + tie * n as f64;
            row
        })
        .collect();
    let solution = assignment::solve(&cost).expect("dummy columns keep the problem feasible");
    solution.rows.into_iter().map(|j| (j < m).then_some(j)).collect()
}

/// Per-VT mapping accuracy across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VtScore {
    pub index: usize,
    /// 2-D position RMSE over matched runs; `None` if never matched.
    pub rmse: Option<f64>,
    pub matched: usize,
    pub missed: usize,
}

/// Matches each run's extracted map to `truth` and pools the 2-D position
/// errors per ground-truth VT.
pub fn vt_rmse(
    maps: &[Vec<VirtualTransmitter<f64>>],
    truth: &[VirtualTransmitter<f64>],
    cfg: &VtMatchConfig,
) -> Vec<VtScore> {
    let mut sums = vec![0.0; truth.len()];
    let mut matched = vec![0usize; truth.len()];
    for map in maps {
        for (i, m) in assign_vts(map, truth, cfg).into_iter().enumerate() {
            if let Some(j) = m {
                sums[i] += (map[j].position - truth[i].position).norm_squared();
                matched[i] += 1;
            }
        }
    }
    (0..truth.len())
        .map(|i| VtScore {
            index: i,
            rmse: (matched[i] > 0).then(|| (sums[i] / matched[i] as f64).sqrt()),
            matched: matched[i],
            missed: maps.len() - matched[i],
        })
        .collect()
}
