//! Rao-Blackwellized particle filter: particles carry an agent state, a weight
//! and a private GM-PHD map of virtual transmitters.
//!
//! One [`PhdSlamFilter::step`] runs, in order: propagation through the motion
//! model, birth from the previous step's unmatched measurements, map
//! prediction, gated map update, particle reweighting, bookkeeping of the new
//! unmatched measurements, prune/merge, ESS-triggered resampling and
//! estimation. The per-particle phase runs in parallel; each particle draws
//! from its own RNG stream so results do not depend on the thread count.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment;
use crate::error::{invalid, Error, Result};
use crate::geometry::{predict_from_state, RangeBearing, VirtualTransmitter};
use crate::gm_phd::{
    birth_component, extract_map, predict, prune_merge, update, BirthParams, GaussianComponent, GaussianMixtureMap,
    MapConfig, RepairCounters,
};
use crate::motion::{propagate, sample_noise, AgentState, MotionParams, Vector5};
use crate::scalar::{log_sum_exp, neg_infinity, Scalar};
use crate::simulator::{clutter_density, position_in_fov, MeasurementSet, SensorParams};

/// Choice of the free map variable used when weighting particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightStrategy {
    /// All extracted features.
    MultiFeature,
    /// The empty map.
    EmptySet,
    /// Only the strongest extracted feature.
    SingleFeature,
    /// Closed-form single-cluster PHD likelihood (comparison baseline).
    ClosedFormSingleCluster,
}

impl WeightStrategy {
    pub const ALL: [WeightStrategy; 4] = [
        WeightStrategy::MultiFeature,
        WeightStrategy::EmptySet,
        WeightStrategy::SingleFeature,
        WeightStrategy::ClosedFormSingleCluster,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            WeightStrategy::MultiFeature => "multi-feature",
            WeightStrategy::EmptySet => "empty-set",
            WeightStrategy::SingleFeature => "single-feature",
            WeightStrategy::ClosedFormSingleCluster => "closed-form-single-cluster",
        }
    }
}

impl fmt::Display for WeightStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|w| w.name() == key || (key == "closed-form" && *w == WeightStrategy::ClosedFormSingleCluster))
            .ok_or_else(|| invalid("strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig<T> {
    pub num_particles: usize,
    pub motion: MotionParams<T>,
    pub sensor: SensorParams<T>,
    pub birth: BirthParams<T>,
    pub map: MapConfig<T>,
    pub strategy: WeightStrategy,
    /// Resample when ESS drops below this fraction of the particle count.
    pub ess_threshold: T,
    /// Minimum component weight for a map feature.
    pub extraction_threshold: T,
    /// Largest number of association terms summed exactly per gating cluster.
    pub association_budget: usize,
    /// Number of ranked assignments kept when the budget is exceeded.
    pub truncation_terms: usize,
    /// Optional per-component std of the initial particle spread.
    pub initial_spread: Option<[T; 5]>,
}

impl<T: Scalar> FilterConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.num_particles == 0 {
            return Err(invalid("num_particles", "must be at least 1"));
        }
        self.motion.validate()?;
        self.sensor.validate()?;
        self.birth.validate()?;
        if !(self.sensor.sigma_d > T::zero() && self.sensor.sigma_theta > T::zero()) {
            return Err(invalid("sigma_d/sigma_theta", "filter needs positive NLOS noise"));
        }
        if !(self.map.gate_threshold > T::zero()) {
            return Err(invalid("gate_threshold", "must be positive"));
        }
        if !(self.ess_threshold >= T::zero() && self.ess_threshold <= T::one()) {
            return Err(invalid("ess_threshold", "must lie in [0, 1]"));
        }
        if self.association_budget == 0 || self.truncation_terms == 0 {
            return Err(invalid(
                "association_budget",
                "budget and truncation terms must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle<T: Scalar> {
    pub state: AgentState<T>,
    /// State at the previous step; births are constructed from it.
    pub prev_state: AgentState<T>,
    pub weight: T,
    pub map: GaussianMixtureMap<T>,
    /// NLOS measurements of the previous step that gated with no component.
    pub pending_births: Vec<RangeBearing<T>>,
}

impl<T: Scalar> Particle<T> {
    pub fn new(state: AgentState<T>, weight: T) -> Self {
        Self {
            state,
            prev_state: state,
            weight,
            map: GaussianMixtureMap::new(Vec::new()),
            pending_births: Vec::new(),
        }
    }
}

fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Samples every particle from the motion model. The proposal equals the
/// transition density, so weights are left untouched.
pub fn propagate_particles<T: Scalar, R: Rng + ?Sized>(
    particles: &mut [Particle<T>],
    params: &MotionParams<T>,
    rng: &mut R,
) {
    let seed: u64 = rng.random();
    particles.par_iter_mut().enumerate().for_each(|(i, p)| {
        let mut prng = particle_rng(seed, i);
        propagate_one(p, params, &mut prng);
    });
}

fn propagate_one<T: Scalar, R: Rng + ?Sized>(p: &mut Particle<T>, params: &MotionParams<T>, rng: &mut R) {
    let noise = sample_noise(rng, params);
    p.prev_state = p.state;
    p.state = propagate(&p.state, &noise, params.dt);
}

fn gaussian_log_pdf2<T: Scalar>(residual: &Vector2<T>, sd: T, stheta: T) -> T {
    let a = residual.x / sd;
    let b = residual.y / stheta;
    -(T::two_pi() * sd * stheta).ln() - T::lit(0.5) * (a * a + b * b)
}

/// Log of the LOS factor; zero (factor 1) when the scan has no LOS entry.
pub fn los_log_likelihood<T: Scalar>(
    state: &AgentState<T>,
    z0: Option<&RangeBearing<T>>,
    anchor: &Vector2<T>,
    sensor: &SensorParams<T>,
) -> T {
    let Some(z0) = z0 else {
        return T::zero();
    };
    let anchor_state = Vector3::new(anchor.x, anchor.y, T::zero());
    match predict_from_state(state, &anchor_state) {
        Ok(pred) => gaussian_log_pdf2(&z0.innovation(&pred), sensor.sigma_d0, sensor.sigma_theta0),
        Err(_) => neg_infinity(),
    }
}

/// LOS factor as a density.
pub fn los_likelihood<T: Scalar>(
    state: &AgentState<T>,
    z0: Option<&RangeBearing<T>>,
    anchor: &Vector2<T>,
    sensor: &SensorParams<T>,
) -> T {
    los_log_likelihood(state, z0, anchor, sensor).exp()
}

/// Settings for evaluating the multi-object measurement likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationSettings<T> {
    pub gate_threshold: T,
    pub budget: usize,
    pub truncation_terms: usize,
}

/// `ln p(Z | x, features)` under Poisson clutter and independent detections,
/// plus a flag set when a cluster had to be truncated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureLikelihood<T> {
    pub log_value: T,
    pub truncated: bool,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = i;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Exact (or budget-truncated) multi-object likelihood of the NLOS scan given
/// point features at `features`.
///
/// The sum over one-to-one associations is restricted to pairs whose squared
/// Mahalanobis innovation under the measurement noise is within the gate. The
/// gating graph is split into connected clusters whose sums multiply; a cluster
/// whose enumeration exceeds the budget is approximated by its
/// `truncation_terms` highest-ranked associations.
pub fn multi_feature_log_likelihood<T: Scalar>(
    features: &[Vector3<T>],
    measurements: &[RangeBearing<T>],
    agent: &AgentState<T>,
    sensor: &SensorParams<T>,
    settings: &AssociationSettings<T>,
) -> FeatureLikelihood<T> {
    let nf = features.len();
    let nm = measurements.len();
    let log_kappa: Vec<f64> = measurements
        .iter()
        .map(|z| clutter_density(z, sensor).as_f64().ln())
        .collect();
    let mut pd = vec![0.0f64; nf];
    // ln(P_D g(z|f)) for gated pairs
    let mut pair: Vec<Vec<Option<f64>>> = vec![vec![None; nm]; nf];
    let sd = sensor.sigma_d;
    let st = sensor.sigma_theta;
    for (f, feat) in features.iter().enumerate() {
        let Ok(pred) = predict_from_state(agent, feat) else {
            continue;
        };
        if !position_in_fov(agent, &Vector2::new(feat.x, feat.y), sensor.fov_radius) {
            continue;
        }
        pd[f] = sensor.p_detect.as_f64();
        if pd[f] <= 0.0 {
            continue;
        }
        for (l, z) in measurements.iter().enumerate() {
            let nu = z.innovation(&pred);
            let (a, b) = (nu.x / sd, nu.y / st);
            let d2 = a * a + b * b;
            if d2 <= settings.gate_threshold {
                pair[f][l] = Some(pd[f].ln() + gaussian_log_pdf2(&nu, sd, st).as_f64());
            }
        }
    }

    let mut uf = UnionFind((0..nf + nm).collect());
    for (f, row) in pair.iter().enumerate() {
        for (l, p) in row.iter().enumerate() {
            if p.is_some() {
                uf.union(f, nf + l);
            }
        }
    }
    let mut clusters: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    let mut root_slot: Vec<Option<usize>> = vec![None; nf + nm];
    for node in 0..nf + nm {
        let r = uf.find(node);
        let slot = *root_slot[r].get_or_insert_with(|| {
            clusters.push((Vec::new(), Vec::new()));
            clusters.len() - 1
        });
        if node < nf {
            clusters[slot].0.push(node);
        } else {
            clusters[slot].1.push(node - nf);
        }
    }

    let mut total = -sensor.lambda_clutter.as_f64();
    let mut truncated = false;
    for (fs, ls) in &clusters {
        let value = match (fs.len(), ls.len()) {
            (1, 0) => (1.0 - pd[fs[0]]).ln(),
            (0, 1) => log_kappa[ls[0]],
            _ => match enumerate_cluster(fs, ls, &pd, &pair, &log_kappa, settings.budget) {
                Some(v) => v,
                None => {
                    truncated = true;
                    ranked_cluster(fs, ls, &pd, &pair, &log_kappa, settings.truncation_terms)
                }
            },
        };
        total += value;
    }
    FeatureLikelihood {
        log_value: T::lit(total),
        truncated,
    }
}

/// Exact cluster sum by depth-first enumeration; `None` past the budget.
fn enumerate_cluster(
    fs: &[usize],
    ls: &[usize],
    pd: &[f64],
    pair: &[Vec<Option<f64>>],
    log_kappa: &[f64],
    budget: usize,
) -> Option<f64> {
    struct Search<'a> {
        fs: &'a [usize],
        ls: &'a [usize],
        pd: &'a [f64],
        pair: &'a [Vec<Option<f64>>],
        log_kappa: &'a [f64],
        used: Vec<bool>,
        terms: Vec<f64>,
        budget: usize,
    }
    impl Search<'_> {
        fn run(&mut self, depth: usize, acc: f64) -> bool {
            if depth == self.fs.len() {
                if self.terms.len() >= self.budget {
                    return false;
                }
                let unused: f64 = self
                    .ls
                    .iter()
                    .zip(&self.used)
                    .filter(|(_, u)| !**u)
                    .map(|(&l, _)| self.log_kappa[l])
                    .sum();
                self.terms.push(acc + unused);
                return true;
            }
            let f = self.fs[depth];
            let miss = (1.0 - self.pd[f]).ln();
            if miss > f64::NEG_INFINITY && !self.run(depth + 1, acc + miss) {
                return false;
            }
            for k in 0..self.ls.len() {
                if self.used[k] {
                    continue;
                }
                if let Some(lp) = self.pair[f][self.ls[k]] {
                    self.used[k] = true;
                    let ok = self.run(depth + 1, acc + lp);
                    self.used[k] = false;
                    if !ok {
                        return false;
                    }
                }
            }
            true
        }
    }
    let mut search = Search {
        fs,
        ls,
        pd,
        pair,
        log_kappa,
        used: vec![false; ls.len()],
        terms: Vec::new(),
        budget,
    };
    if !search.run(0, 0.0) {
        return None;
    }
    Some(log_sum_exp(&search.terms))
}

/// Sum of the `k` largest association terms via ranked assignment.
fn ranked_cluster(
    fs: &[usize],
    ls: &[usize],
    pd: &[f64],
    pair: &[Vec<Option<f64>>],
    log_kappa: &[f64],
    k: usize,
) -> f64 {
    // floor keeps the ratio form finite when a measurement has zero clutter density
    let floor = f64::MIN_POSITIVE.ln();
    let lk: Vec<f64> = ls.iter().map(|&l| log_kappa[l].max(floor)).collect();
    let nf = fs.len();
    let nm = ls.len();
    let cost: Vec<Vec<f64>> = fs
        .iter()
        .enumerate()
        .map(|(r, &f)| {
            let mut row = vec![f64::INFINITY; nm + nf];
            for (c, &l) in ls.iter().enumerate() {
                if let Some(lp) = pair[f][l] {
                    row[c] = -(lp - lk[c]);
                }
            }
            let miss = (1.0 - pd[f]).ln();
            if miss > f64::NEG_INFINITY {
                row[nm + r] = -miss;
            }
            row
        })
        .collect();
    let best = assignment::k_best(&cost, k);
    let terms: Vec<f64> = best.iter().map(|a| -a.cost).collect();
    lk.iter().sum::<f64>() + log_sum_exp(&terms)
}

/// Everything the NLOS weight factor needs from one particle's map update.
#[derive(Debug, Clone, Copy)]
pub struct NlosInputs<'a, T: Scalar> {
    pub agent: &'a AgentState<T>,
    pub measurements: &'a [RangeBearing<T>],
    /// Predicted map, after births.
    pub prior: &'a GaussianMixtureMap<T>,
    /// Updated map, before pruning.
    pub posterior: &'a GaussianMixtureMap<T>,
    /// Per-measurement update denominators.
    pub denominators: &'a [T],
    /// `sum_j P_D,j alpha_j` of the predicted map.
    pub detected_mass: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlosFactor<T> {
    pub log_value: T,
    pub truncated: bool,
}

impl<T: Scalar> NlosFactor<T> {
    pub fn value(&self) -> T {
        self.log_value.exp()
    }
}

/// Features used as the free map variable for a strategy.
pub fn strategy_features<T: Scalar>(
    posterior: &GaussianMixtureMap<T>,
    strategy: WeightStrategy,
    extraction_threshold: T,
) -> Vec<Vector3<T>> {
    match strategy {
        WeightStrategy::MultiFeature => extract_map(posterior, extraction_threshold)
            .iter()
            .map(VirtualTransmitter::state)
            .collect(),
        WeightStrategy::SingleFeature => posterior
            .components
            .iter()
            .filter(|c| c.weight >= extraction_threshold)
            .fold(None::<&GaussianComponent<T>>, |best, c| match best {
                Some(b) if b.weight >= c.weight => Some(b),
                _ => Some(c),
            })
            .map(|c| {
                let mut m = c.mean;
                m.z = m.z.max(T::zero());
                vec![m]
            })
            .unwrap_or_default(),
        WeightStrategy::EmptySet | WeightStrategy::ClosedFormSingleCluster => Vec::new(),
    }
}

/// NLOS contribution to a particle's weight,
/// `p(Z | x, L) * p_prior(L) / p_post(L)` for the strategy's feature set `L`,
/// with Poisson set densities built from the predicted and updated maps.
/// The closed-form strategy instead uses the single-cluster expression
/// `exp(-sum P_D alpha - lambda_c) * prod_z (kappa(z) + sum_j P_D alpha_j q_j(z))`.
pub fn nlos_weight_factor<T: Scalar>(
    inputs: &NlosInputs<'_, T>,
    strategy: WeightStrategy,
    sensor: &SensorParams<T>,
    extraction_threshold: T,
    association: &AssociationSettings<T>,
) -> NlosFactor<T> {
    if strategy == WeightStrategy::ClosedFormSingleCluster {
        let log_value = inputs
            .denominators
            .iter()
            .fold(-inputs.detected_mass - sensor.lambda_clutter, |acc, &d| acc + d.ln());
        return NlosFactor {
            log_value,
            truncated: false,
        };
    }
    let features = strategy_features(inputs.posterior, strategy, extraction_threshold);
    let mut log_value = inputs.posterior.mass() - inputs.prior.mass();
    for f in &features {
        log_value += inputs.prior.log_density(f) - inputs.posterior.log_density(f);
    }
    let lik = multi_feature_log_likelihood(&features, inputs.measurements, inputs.agent, sensor, association);
    NlosFactor {
        log_value: log_value + lik.log_value,
        truncated: lik.truncated,
    }
}

/// Multiplies weights by `exp(log_factors)` and renormalizes in the log
/// domain. Returns `true` when every factor vanished and the weights were
/// reset to uniform.
pub fn reweight<T: Scalar>(particles: &mut [Particle<T>], log_factors: &[T]) -> bool {
    let logs: Vec<T> = particles
        .iter()
        .zip(log_factors)
        .map(|(p, &lf)| {
            let v = p.weight.ln() + lf;
            if v.is_finite() {
                v
            } else {
                neg_infinity()
            }
        })
        .collect();
    let norm = log_sum_exp(&logs);
    if !norm.is_finite() {
        let u = T::one() / T::lit(particles.len() as f64);
        particles.iter_mut().for_each(|p| p.weight = u);
        return true;
    }
    for (p, &l) in particles.iter_mut().zip(&logs) {
        p.weight = (l - norm).exp();
    }
    false
}

pub fn effective_sample_size<T: Scalar>(weights: impl IntoIterator<Item = T>) -> T {
    let sum_sq = weights.into_iter().fold(T::zero(), |a, w| a + w * w);
    T::one() / sum_sq
}

/// Systematic resampling: one uniform offset, `n` evenly spaced pointers.
pub fn systematic_resample_indices<T: Scalar, R: Rng + ?Sized>(weights: &[T], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let step = 1.0 / n as f64;
    let offset = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0].as_f64();
    let mut j = 0;
    for i in 0..n {
        let u = offset + i as f64 * step;
        while cumulative < u && j + 1 < n {
            j += 1;
            cumulative += weights[j].as_f64();
        }
        out.push(j);
    }
    out
}

/// Resamples (with uniform weights afterwards) when ESS falls below
/// `threshold_fraction * N`. Surviving maps are deep copies.
pub fn resample_if_needed<T: Scalar, R: Rng + ?Sized>(
    particles: &mut Vec<Particle<T>>,
    threshold_fraction: T,
    rng: &mut R,
) -> bool {
    let n = particles.len();
    let ess = effective_sample_size(particles.iter().map(|p| p.weight));
    if !(ess < threshold_fraction * T::lit(n as f64)) {
        return false;
    }
    let weights: Vec<T> = particles.iter().map(|p| p.weight).collect();
    let idx = systematic_resample_indices(&weights, rng);
    let u = T::one() / T::lit(n as f64);
    let mut next: Vec<Particle<T>> = idx.iter().map(|&i| particles[i].clone()).collect();
    next.iter_mut().for_each(|p| p.weight = u);
    *particles = next;
    true
}

/// Weighted-mean agent state and the map of the highest-weight particle.
pub fn estimate<T: Scalar>(
    particles: &[Particle<T>],
    extraction_threshold: T,
) -> (AgentState<T>, Vec<VirtualTransmitter<T>>) {
    let mean = particles
        .iter()
        .fold(Vector5::zeros(), |acc, p| acc + p.state.to_vector() * p.weight);
    let best = particles
        .iter()
        .enumerate()
        .fold(None::<(usize, T)>, |best, (i, p)| match best {
            Some((_, w)) if w >= p.weight => best,
            _ => Some((i, p.weight)),
        });
    let map = best
        .map(|(i, _)| extract_map(&particles[i].map, extraction_threshold))
        .unwrap_or_default();
    (AgentState::from_vector(&mean), map)
}

/// Counters of events the filter handled internally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterStats {
    pub repairs: RepairCounters,
    pub association_truncations: u64,
    pub uniform_resets: u64,
    pub resamples: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEstimate<T: Scalar> {
    pub state: AgentState<T>,
    pub map: Vec<VirtualTransmitter<T>>,
    pub ess: T,
    pub resampled: bool,
}

struct ParticleOutcome<T> {
    log_factor: T,
    truncated: bool,
    repairs: RepairCounters,
}

/// The multipath PHD-SLAM filter.
#[derive(Debug, Clone)]
pub struct PhdSlamFilter<T: Scalar> {
    config: FilterConfig<T>,
    anchor: Vector2<T>,
    particles: Vec<Particle<T>>,
    rng: ChaCha8Rng,
    steps: usize,
    stats: FilterStats,
}

impl<T: Scalar> PhdSlamFilter<T> {
    /// All particles start at `initial` (optionally spread by
    /// `config.initial_spread`) with uniform weights and empty maps.
    pub fn new(config: FilterConfig<T>, anchor: Vector2<T>, initial: AgentState<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.num_particles;
        let w = T::one() / T::lit(n as f64);
        let particles = (0..n)
            .map(|_| {
                let mut state = initial;
                if let Some(spread) = &config.initial_spread {
                    let mut v = state.to_vector();
                    for (k, s) in spread.iter().enumerate() {
                        let z: f64 = rng.sample(rand_distr::StandardNormal);
                        v[k] += *s * T::lit(z);
                    }
                    state = AgentState::from_vector(&v);
                }
                Particle::new(state, w)
            })
            .collect();
        Ok(Self {
            config,
            anchor,
            particles,
            rng,
            steps: 0,
            stats: FilterStats::default(),
        })
    }

    /// Resumes from an explicit particle set. Weights are renormalized; the
    /// particle count must match the config.
    pub fn from_particles(
        config: FilterConfig<T>,
        anchor: Vector2<T>,
        mut particles: Vec<Particle<T>>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if particles.len() != config.num_particles {
            return Err(invalid(
                "particles",
                format!("expected {} particles, got {}", config.num_particles, particles.len()),
            ));
        }
        let total = particles.iter().fold(T::zero(), |a, p| a + p.weight);
        if !(total > T::zero()) || !total.is_finite() {
            return Err(invalid("particles", "weights must have a positive finite sum"));
        }
        particles.iter_mut().for_each(|p| p.weight /= total);
        Ok(Self {
            config,
            anchor,
            particles,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            stats: FilterStats::default(),
        })
    }

    pub fn config(&self) -> &FilterConfig<T> {
        &self.config
    }

    pub fn particles(&self) -> &[Particle<T>] {
        &self.particles
    }

    pub fn stats(&self) -> FilterStats {
        self.stats
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// The map of the highest-weight particle.
    pub fn best_map(&self) -> &GaussianMixtureMap<T> {
        let mut best = &self.particles[0];
        for p in &self.particles[1..] {
            if p.weight > best.weight {
                best = p;
            }
        }
        &best.map
    }

    fn process_particle(&self, p: &mut Particle<T>, scan: &MeasurementSet<T>) -> ParticleOutcome<T> {
        let cfg = &self.config;
        let births: Vec<_> = p
            .pending_births
            .iter()
            .filter_map(|z| birth_component(z, &p.prev_state, &cfg.birth, &cfg.sensor))
            .collect();
        let prior = predict(&p.map, births, &cfg.map);
        let outcome = update(&prior, &scan.nlos, &p.state, &cfg.sensor, cfg.map.gate_threshold);
        let inputs = NlosInputs {
            agent: &p.state,
            measurements: &scan.nlos,
            prior: &prior,
            posterior: &outcome.map,
            denominators: &outcome.denominators,
            detected_mass: outcome.detected_mass,
        };
        let association = AssociationSettings {
            gate_threshold: cfg.map.gate_threshold,
            budget: cfg.association_budget,
            truncation_terms: cfg.truncation_terms,
        };
        let nlos = nlos_weight_factor(
            &inputs,
            cfg.strategy,
            &cfg.sensor,
            cfg.extraction_threshold,
            &association,
        );
        let los = los_log_likelihood(&p.state, scan.los.as_ref(), &self.anchor, &cfg.sensor);
        p.pending_births = outcome.unmatched.iter().map(|&l| scan.nlos[l]).collect();
        p.map = prune_merge(
            &outcome.map,
            cfg.map.prune_threshold,
            cfg.map.merge_threshold,
            cfg.map.max_components,
        );
        ParticleOutcome {
            log_factor: los + nlos.log_value,
            truncated: nlos.truncated,
            repairs: outcome.repairs,
        }
    }

    /// Processes one scan and returns the step's estimates.
    pub fn step(&mut self, scan: &MeasurementSet<T>) -> StepEstimate<T> {
        let seed: u64 = self.rng.random();
        let mut particles = std::mem::take(&mut self.particles);
        let outcomes: Vec<ParticleOutcome<T>> = particles
            .par_iter_mut()
            .enumerate()
            .map(|(i, p)| {
                let mut prng = particle_rng(seed, i);
                propagate_one(p, &self.config.motion, &mut prng);
                self.process_particle(p, scan)
            })
            .collect();

        let mut log_factors = Vec::with_capacity(outcomes.len());
        for o in &outcomes {
            log_factors.push(o.log_factor);
            self.stats.repairs += o.repairs;
            self.stats.association_truncations += u64::from(o.truncated);
        }
        if reweight(&mut particles, &log_factors) {
            self.stats.uniform_resets += 1;
        }
        let ess = effective_sample_size(particles.iter().map(|p| p.weight));
        let resampled = resample_if_needed(&mut particles, self.config.ess_threshold, &mut self.rng);
        if resampled {
            self.stats.resamples += 1;
        }
        self.particles = particles;
        self.steps += 1;
        let (state, map) = estimate(&self.particles, self.config.extraction_threshold);
        StepEstimate {
            state,
            map,
            ess,
            resampled,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gm_phd::GaussianComponent;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn sensor() -> SensorParams<f64> {
        SensorParams {
            sigma_d: 0.3,
            sigma_theta: 4f64.to_radians(),
            sigma_d0: 0.05,
            sigma_theta0: 2f64.to_radians(),
            p_detect: 0.95,
            lambda_clutter: 0.02,
            fov_radius: 35.0,
            range_max: 61.93,
            los_end_time: 6.0,
        }
    }

    fn agent(x: f64, y: f64) -> AgentState<f64> {
        AgentState::new(Vector2::new(x, y), Vector2::new(1.0, 0.0), 0.3)
    }

    fn particles(states: &[AgentState<f64>], weights: &[f64]) -> Vec<Particle<f64>> {
        states.iter().zip(weights).map(|(s, &w)| Particle::new(*s, w)).collect()
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in WeightStrategy::ALL {
            assert_eq!(s.name().parse::<WeightStrategy>().unwrap(), s);
        }
        assert_eq!(
            "closed-form".parse::<WeightStrategy>().unwrap(),
            WeightStrategy::ClosedFormSingleCluster
        );
        assert_eq!(
            "MULTI_FEATURE".parse::<WeightStrategy>().unwrap(),
            WeightStrategy::MultiFeature
        );
        assert!("bogus".parse::<WeightStrategy>().is_err());
    }

    #[test]
    fn zero_noise_propagation_translates_and_keeps_weights() {
        let params = MotionParams {
            sigma_x: 0.0,
            sigma_y: 0.0,
            sigma_b: 0.0,
            dt: 0.08,
        };
        let mut ps = particles(&[agent(0.0, 0.0), agent(1.0, 2.0)], &[0.3, 0.7]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        propagate_particles(&mut ps, &params, &mut rng);
        assert_relative_eq!(ps[0].state.position, Vector2::new(0.08, 0.0), epsilon = 1e-12);
        assert_relative_eq!(ps[1].state.position, Vector2::new(1.08, 2.0), epsilon = 1e-12);
        assert_eq!(ps[0].prev_state.position, Vector2::new(0.0, 0.0));
        assert_eq!((ps[0].weight, ps[1].weight), (0.3, 0.7));
    }

    #[test]
    fn propagation_reproducible_under_seed() {
        let params = MotionParams {
            sigma_x: 0.5,
            sigma_y: 0.5,
            sigma_b: 0.01,
            dt: 0.08,
        };
        let run = || {
            let mut ps = particles(&vec![agent(0.0, 0.0); 50], &[0.02; 50]);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            propagate_particles(&mut ps, &params, &mut rng);
            propagate_particles(&mut ps, &params, &mut rng);
            ps.iter().map(|p| p.state).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        // distinct streams per particle
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn los_likelihood_examples() {
        let s = sensor();
        let anchor = Vector2::new(0.0, 0.0);
        let state = agent(3.0, 4.0);
        let z0 = RangeBearing::new(5.0 + 0.3, (-4.0f64).atan2(-3.0));
        let peak = los_likelihood(&state, Some(&z0), &anchor, &s);
        assert_relative_eq!(
            peak,
            1.0 / (2.0 * std::f64::consts::PI * s.sigma_d0 * s.sigma_theta0),
            epsilon = 1e-9
        );
        assert_eq!(los_likelihood(&state, None, &anchor, &s), 1.0);
        let mut prev = peak;
        for k in 1..10 {
            let z = RangeBearing::new(z0.range + 0.02 * k as f64, z0.bearing);
            let v = los_likelihood(&state, Some(&z), &anchor, &s);
            assert!(v < prev);
            prev = v;
        }
    }

    fn map_with(components: &[(f64, [f64; 3])]) -> GaussianMixtureMap<f64> {
        GaussianMixtureMap::new(
            components
                .iter()
                .map(|&(w, m)| {
                    GaussianComponent::new(
                        w,
                        Vector3::from(m),
                        Matrix3::from_diagonal(&Vector3::new(0.2, 0.2, 0.1)),
                    )
                })
                .collect(),
        )
    }

    fn assoc() -> AssociationSettings<f64> {
        AssociationSettings {
            gate_threshold: 9.21,
            budget: 10_000,
            truncation_terms: 50,
        }
    }

    #[test]
    fn empty_set_factor_examples() {
        let s = sensor();
        let a = agent(0.0, 0.0);
        let prior = map_with(&[(1.0, [10.0, 5.0, 1.0])]);
        let posterior = map_with(&[(0.05, [10.0, 5.0, 1.0]), (0.9, [10.1, 5.0, 1.0])]);
        let inputs = NlosInputs {
            agent: &a,
            measurements: &[],
            prior: &prior,
            posterior: &posterior,
            denominators: &[],
            detected_mass: 0.95,
        };
        let f = nlos_weight_factor(&inputs, WeightStrategy::EmptySet, &s, 0.5, &assoc());
        assert_relative_eq!(f.value(), (0.95f64 - 1.0 - 0.02).exp(), epsilon = 1e-12);

        let z = [RangeBearing::new(12.0, 0.4)];
        let inputs = NlosInputs {
            measurements: &z,
            ..inputs
        };
        let f = nlos_weight_factor(&inputs, WeightStrategy::EmptySet, &s, 0.5, &assoc());
        let kappa = clutter_density(&z[0], &s);
        assert_relative_eq!(f.value(), kappa * (0.95f64 - 1.0 - 0.02).exp(), epsilon = 1e-15);
    }

    #[test]
    fn multi_feature_equals_empty_set_without_features() {
        let s = sensor();
        let a = agent(0.0, 0.0);
        let prior = map_with(&[(0.2, [10.0, 5.0, 1.0])]);
        let posterior = map_with(&[(0.1, [10.0, 5.0, 1.0]), (0.3, [10.1, 5.0, 1.0])]);
        let z = [RangeBearing::new(12.0, 0.4), RangeBearing::new(30.0, -1.0)];
        let inputs = NlosInputs {
            agent: &a,
            measurements: &z,
            prior: &prior,
            posterior: &posterior,
            denominators: &[],
            detected_mass: 0.19,
        };
        let mf = nlos_weight_factor(&inputs, WeightStrategy::MultiFeature, &s, 0.5, &assoc());
        let es = nlos_weight_factor(&inputs, WeightStrategy::EmptySet, &s, 0.5, &assoc());
        assert_relative_eq!(mf.log_value, es.log_value, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_uses_update_denominators() {
        let s = sensor();
        let a = agent(0.0, 0.0);
        let m = map_with(&[(1.0, [10.0, 5.0, 1.0])]);
        let inputs = NlosInputs {
            agent: &a,
            measurements: &[],
            prior: &m,
            posterior: &m,
            denominators: &[2.0, 0.5],
            detected_mass: 0.95,
        };
        let f = nlos_weight_factor(&inputs, WeightStrategy::ClosedFormSingleCluster, &s, 0.5, &assoc());
        assert_relative_eq!(f.value(), (-0.95f64 - 0.02).exp() * 2.0 * 0.5, epsilon = 1e-12);
    }

    #[test]
    fn single_feature_picks_strongest() {
        let posterior = map_with(&[(0.6, [1.0, 0.0, 0.0]), (0.9, [2.0, 0.0, 0.0]), (0.3, [3.0, 0.0, 0.0])]);
        let f = strategy_features(&posterior, WeightStrategy::SingleFeature, 0.5);
        assert_eq!(f, vec![Vector3::new(2.0, 0.0, 0.0)]);
        let weak = map_with(&[(0.3, [1.0, 0.0, 0.0])]);
        assert!(strategy_features(&weak, WeightStrategy::SingleFeature, 0.5).is_empty());
        assert_eq!(
            strategy_features(&posterior, WeightStrategy::MultiFeature, 0.5).len(),
            2
        );
    }

    #[test]
    fn truncation_kicks_in_past_budget() {
        let s = SensorParams {
            sigma_d: 5.0,
            sigma_theta: 1.0,
            ..sensor()
        };
        let a = agent(0.0, 0.0);
        let feats: Vec<_> = (0..5).map(|i| Vector3::new(10.0 + 0.1 * i as f64, 2.0, 1.0)).collect();
        let zs: Vec<_> = feats.iter().map(|f| predict_from_state(&a, f).unwrap()).collect();
        let exact = multi_feature_log_likelihood(&feats, &zs, &a, &s, &assoc());
        assert!(!exact.truncated);
        let tight = AssociationSettings {
            budget: 10,
            truncation_terms: 5000,
            ..assoc()
        };
        let approx = multi_feature_log_likelihood(&feats, &zs, &a, &s, &tight);
        assert!(approx.truncated);
        // enough ranked terms recover the exact sum
        assert_relative_eq!(approx.log_value, exact.log_value, epsilon = 1e-9);
        let few = AssociationSettings {
            budget: 10,
            truncation_terms: 3,
            ..assoc()
        };
        let rough = multi_feature_log_likelihood(&feats, &zs, &a, &s, &few);
        assert!(rough.log_value < exact.log_value);
    }

    #[test]
    fn reweight_examples() {
        let states = vec![agent(0.0, 0.0); 10];
        let mut ps = particles(&states, &[0.1; 10]);
        assert!(!reweight(&mut ps, &[-3.0; 10]));
        for p in &ps {
            assert_relative_eq!(p.weight, 0.1, epsilon = 1e-12);
        }
        let mut factors = vec![0.0; 10];
        factors[3] = 10f64.ln();
        reweight(&mut ps, &factors);
        assert_relative_eq!(ps[3].weight, 10.0 / 19.0, epsilon = 1e-12);
        let total: f64 = ps.iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() <= 1e-12);

        // underflow-prone factors stay normalized thanks to the log domain
        reweight(
            &mut ps,
            &[
                -2000.0, -2001.0, -2002.0, -2003.0, -2004.0, -2005.0, -2006.0, -2007.0, -2008.0, -2009.0,
            ],
        );
        let total: f64 = ps.iter().map(|p| p.weight).sum();
        assert!((total - 1.0).abs() <= 1e-12);

        assert!(reweight(&mut ps, &[f64::NEG_INFINITY; 10]));
        assert!(ps.iter().all(|p| p.weight == 0.1));
    }

    #[test]
    fn ess_examples() {
        assert_relative_eq!(effective_sample_size(vec![0.001; 1000]), 1000.0, epsilon = 1e-9);
        let mut one_hot = vec![0.0; 10];
        one_hot[4] = 1.0;
        assert_eq!(effective_sample_size(one_hot), 1.0);
    }

    #[test]
    fn resampling_resets_weights_and_ess() {
        let states: Vec<_> = (0..100).map(|i| agent(i as f64, 0.0)).collect();
        let mut weights = vec![0.0; 100];
        weights[10] = 0.5;
        weights[20] = 0.5;
        let mut ps = particles(&states, &weights);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(resample_if_needed(&mut ps, 0.5, &mut rng));
        assert_relative_eq!(
            effective_sample_size(ps.iter().map(|p| p.weight)),
            100.0,
            epsilon = 1e-9
        );
        let at10 = ps.iter().filter(|p| p.state.position.x == 10.0).count();
        assert_eq!(at10, 50);
        // uniform weights never trigger
        assert!(!resample_if_needed(&mut ps, 0.5, &mut rng));
    }

    #[test]
    fn resampling_is_unbiased() {
        let weights = [0.05, 0.4, 0.15, 0.3, 0.1];
        let values = [1.0, -2.0, 3.5, 0.5, 7.0];
        let true_mean: f64 = weights.iter().zip(values).map(|(w, v)| w * v).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 10_000;
        let means: Vec<f64> = (0..trials)
            .map(|_| {
                let idx = systematic_resample_indices(&weights, &mut rng);
                idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
            })
            .collect();
        let avg = means.iter().sum::<f64>() / trials as f64;
        let var = means.iter().map(|m| (m - avg).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!((avg - true_mean).abs() <= 3.0 * se + 1e-12, "{avg} vs {true_mean}");
    }

    #[test]
    fn estimate_examples() {
        let x = AgentState::new(Vector2::new(1.0, 2.0), Vector2::new(0.5, -0.5), 0.4);
        let neg = AgentState::from_vector(&(-x.to_vector()));
        let (e, _) = estimate(&particles(&[x, neg], &[0.5, 0.5]), 0.5);
        assert_relative_eq!(e.to_vector(), Vector5::zeros(), epsilon = 1e-15);

        let (e, _) = estimate(&particles(&[x], &[1.0]), 0.5);
        assert_eq!(e, x);

        let y = AgentState::new(Vector2::new(3.0, 0.0), Vector2::zeros(), 1.0);
        let (e, _) = estimate(&particles(&[x, y], &[0.25, 0.75]), 0.5);
        assert_relative_eq!(e.bias, 0.25 * 0.4 + 0.75 * 1.0, epsilon = 1e-15);
    }

    #[test]
    fn estimate_uses_best_particle_map() {
        let mut ps = particles(&[agent(0.0, 0.0), agent(0.0, 0.0)], &[0.3, 0.7]);
        ps[0].map = map_with(&[(1.0, [1.0, 1.0, 0.0])]);
        ps[1].map = map_with(&[(1.0, [5.0, 5.0, 2.0]), (0.9, [6.0, 1.0, 0.0])]);
        let (_, map) = estimate(&ps, 0.5);
        assert_eq!(map.len(), 2);
        assert_eq!(map[0].position, Vector2::new(5.0, 5.0));
    }
}
