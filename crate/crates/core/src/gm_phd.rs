//! Gaussian-mixture PHD intensity over VT states `(x, y, bias)`.
//!
//! Each particle owns one [`GaussianMixtureMap`]. The map is predicted by
//! appending measurement-driven birth components and corrected with the
//! GM-PHD update, where every (component, measurement) pair that passes the
//! gate is refined by an extended Kalman correction.

use nalgebra::{Cholesky, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{measurement_jacobians, predict_from_state, RangeBearing, VirtualTransmitter};
use crate::motion::AgentState;
use crate::scalar::{log_sum_exp, neg_infinity, Scalar};
use crate::simulator::{clutter_density, position_in_fov, SensorParams};

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent<T: Scalar> {
    pub weight: T,
    pub mean: Vector3<T>,
    pub covariance: Matrix3<T>,
}

impl<T: Scalar> GaussianComponent<T> {
    pub fn new(weight: T, mean: Vector3<T>, covariance: Matrix3<T>) -> Self {
        Self {
            weight,
            mean,
            covariance,
        }
    }

    pub fn position(&self) -> Vector2<T> {
        Vector2::new(self.mean.x, self.mean.y)
    }

    /// Log of the normalized Gaussian density at `x` (weight not included).
    pub fn log_pdf(&self, x: &Vector3<T>) -> T {
        match Cholesky::new(self.covariance) {
            Some(chol) => {
                let d = x - self.mean;
                let maha = d.dot(&chol.solve(&d));
                let log_det = chol.l().diagonal().iter().fold(T::zero(), |a, v| a + v.ln()) * T::lit(2.0);
                -T::lit(0.5) * (maha + log_det + T::lit(3.0) * T::two_pi().ln())
            }
            None => neg_infinity(),
        }
    }
}

/// A PHD intensity represented as a weighted sum of Gaussians.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianMixtureMap<T: Scalar> {
    pub components: Vec<GaussianComponent<T>>,
}

impl<T: Scalar> GaussianMixtureMap<T> {
    pub fn new(components: Vec<GaussianComponent<T>>) -> Self {
        Self { components }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Expected number of VTs: the sum of component weights.
    pub fn mass(&self) -> T {
        self.components.iter().fold(T::zero(), |a, c| a + c.weight)
    }

    /// Log of the intensity at `x`.
    pub fn log_density(&self, x: &Vector3<T>) -> T {
        let terms: Vec<T> = self
            .components
            .iter()
            .filter(|c| c.weight > T::zero())
            .map(|c| c.weight.ln() + c.log_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn snapshot(&self) -> MapSnapshot {
        MapSnapshot {
            components: self
                .components
                .iter()
                .map(|c| ComponentSnapshot {
                    weight: c.weight.as_f64(),
                    mean: [c.mean.x.as_f64(), c.mean.y.as_f64(), c.mean.z.as_f64()],
                    // nalgebra storage is column-major; emit row-major
                    covariance: std::array::from_fn(|k| c.covariance[(k / 3, k % 3)].as_f64()),
                })
                .collect(),
        }
    }
}

/// JSON-friendly copy of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSnapshot {
    pub components: Vec<ComponentSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSnapshot {
    pub weight: f64,
    pub mean: [f64; 3],
    /// Row-major 3x3.
    pub covariance: [f64; 9],
}

impl ComponentSnapshot {
    pub fn to_component<T: Scalar>(&self) -> GaussianComponent<T> {
        GaussianComponent {
            weight: T::lit(self.weight),
            mean: Vector3::new(T::lit(self.mean[0]), T::lit(self.mean[1]), T::lit(self.mean[2])),
            covariance: Matrix3::from_fn(|i, j| T::lit(self.covariance[i * 3 + j])),
        }
    }
}

/// Adaptive birth settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirthParams<T> {
    /// Fraction of the bias-free range placed between agent and VT.
    pub gamma: T,
    /// Variance scale along the range-ambiguity line.
    pub zeta: T,
    /// Variance scale across the bearing.
    pub iota: T,
    /// Variance scale on the third principal axis.
    pub xi: T,
    pub alpha_birth: T,
}

impl<T: Scalar> BirthParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= T::zero() && self.gamma <= T::one()) {
            return Err(invalid("gamma", "must lie in [0, 1]"));
        }
        for (name, v) in [("zeta", self.zeta), ("iota", self.iota), ("xi", self.xi)] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }
        if !(self.alpha_birth > T::zero()) {
            return Err(invalid("alpha_birth", "must be positive"));
        }
        Ok(())
    }
}

/// Mixture management knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig<T> {
    /// Squared Mahalanobis gate on the innovation (chi-square, 2 dof).
    pub gate_threshold: T,
    pub prune_threshold: T,
    /// Squared Mahalanobis distance under which components are merged.
    pub merge_threshold: T,
    pub max_components: usize,
}

impl<T: Scalar> Default for MapConfig<T> {
    fn default() -> Self {
        Self {
            gate_threshold: T::lit(9.21),
            prune_threshold: T::lit(1e-5),
            merge_threshold: T::lit(4.0),
            max_components: 100,
        }
    }
}

/// Counts of numerical repairs applied during updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RepairCounters {
    pub covariance_repairs: u64,
    pub bias_clamps: u64,
}

impl std::ops::AddAssign for RepairCounters {
    fn add_assign(&mut self, rhs: Self) {
        self.covariance_repairs += rhs.covariance_repairs;
        self.bias_clamps += rhs.bias_clamps;
    }
}

/// Rotation taking the birth principal axes to `(x, y, bias)` coordinates.
/// Column 1 runs along the range-ambiguity line, column 2 across the bearing.
pub fn birth_rotation<T: Scalar>(theta: T) -> Matrix3<T> {
    let (s, c) = theta.sin_cos();
    let r = T::one() / T::lit(2.0).sqrt();
    #[rustfmt::skip]
    let t = Matrix3::new(
        c * r, -s,        c * r,
        s * r,  c,        s * r,
        -r,     T::zero(), r,
    );
    t
}

/// Diagonal birth covariance in principal-axis coordinates.
pub fn birth_axis_variances<T: Scalar>(range_excess: T, bp: &BirthParams<T>, sensor: &SensorParams<T>) -> Vector3<T> {
    let d2 = range_excess * range_excess;
    Vector3::new(
        bp.zeta * d2,
        bp.iota * d2 * sensor.sigma_theta * sensor.sigma_theta,
        bp.xi * sensor.sigma_d * sensor.sigma_d,
    )
}

/// Birth component for a measurement that matched no existing component,
/// placed on the line of VT states consistent with the measured range.
/// Returns `None` when the range does not exceed the agent bias.
pub fn birth_component<T: Scalar>(
    z: &RangeBearing<T>,
    prev_state: &AgentState<T>,
    bp: &BirthParams<T>,
    sensor: &SensorParams<T>,
) -> Option<GaussianComponent<T>> {
    let excess = z.range - prev_state.bias;
    if !(excess > T::zero()) {
        return None;
    }
    let (s, c) = z.bearing.sin_cos();
    let dist = bp.gamma * excess;
    let mean = Vector3::new(
        prev_state.position.x + dist * c,
        prev_state.position.y + dist * s,
        (T::one() - bp.gamma) * excess,
    );
    let t = birth_rotation(z.bearing);
    let sigma = Matrix3::from_diagonal(&birth_axis_variances(excess, bp, sensor));
    let cov = t * sigma * t.transpose();
    Some(GaussianComponent::new(
        bp.alpha_birth,
        mean,
        (cov + cov.transpose()) * T::lit(0.5),
    ))
}

/// Prediction for static VTs: prior components plus births. Triggers
/// [`prune_merge`] only when the component cap would be exceeded.
pub fn predict<T: Scalar>(
    map: &GaussianMixtureMap<T>,
    births: Vec<GaussianComponent<T>>,
    config: &MapConfig<T>,
) -> GaussianMixtureMap<T> {
    let mut components = Vec::with_capacity(map.len() + births.len());
    components.extend(map.components.iter().cloned());
    components.extend(births);
    let out = GaussianMixtureMap::new(components);
    if out.len() > config.max_components {
        prune_merge(
            &out,
            config.prune_threshold,
            config.merge_threshold,
            config.max_components,
        )
    } else {
        out
    }
}

fn measurement_noise<T: Scalar>(sensor: &SensorParams<T>) -> Matrix2<T> {
    Matrix2::new(
        sensor.sigma_d * sensor.sigma_d,
        T::zero(),
        T::zero(),
        sensor.sigma_theta * sensor.sigma_theta,
    )
}

/// Linearized measurement model around one component.
struct Linearized<T: Scalar> {
    predicted: RangeBearing<T>,
    s_inv: Matrix2<T>,
    log_norm: T,
    gain: Matrix3x2<T>,
    corrected_cov: Matrix3<T>,
    p_detect: T,
}

impl<T: Scalar> Linearized<T> {
    fn squared_distance(&self, z: &RangeBearing<T>) -> (Vector2<T>, T) {
        let nu = z.innovation(&self.predicted);
        (nu, nu.dot(&(self.s_inv * nu)))
    }
}

fn detection_probability<T: Scalar>(gc: &GaussianComponent<T>, agent: &AgentState<T>, sensor: &SensorParams<T>) -> T {
    if position_in_fov(agent, &gc.position(), sensor.fov_radius) {
        sensor.p_detect
    } else {
        T::zero()
    }
}

fn linearize<T: Scalar>(
    gc: &GaussianComponent<T>,
    agent: &AgentState<T>,
    sensor: &SensorParams<T>,
    r: &Matrix2<T>,
) -> Option<Linearized<T>> {
    let predicted = predict_from_state(agent, &gc.mean).ok()?;
    let (h, _) = measurement_jacobians(agent, &gc.mean).ok()?;
    let ch = gc.covariance * h.transpose();
    let s = h * ch + r;
    let s = (s + s.transpose()) * T::lit(0.5);
    let det = s.determinant();
    if !(det > T::zero()) {
        return None;
    }
    let s_inv = s.try_inverse()?;
    let gain = ch * s_inv;
    let ikh = Matrix3::identity() - gain * h;
    let joseph = ikh * gc.covariance * ikh.transpose() + gain * r * gain.transpose();
    Some(Linearized {
        predicted,
        s_inv,
        log_norm: -(T::two_pi().ln() + T::lit(0.5) * det.ln()),
        gain,
        corrected_cov: (joseph + joseph.transpose()) * T::lit(0.5),
        p_detect: detection_probability(gc, agent, sensor),
    })
}

/// Result of gating a measurement list against a map.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gating {
    /// `matches[l]` lists the component indices gated with measurement `l`.
    pub matches: Vec<Vec<usize>>,
    /// Measurements that passed no component's gate.
    pub unmatched: Vec<usize>,
}

fn gate_linearized<T: Scalar>(lin: &[Option<Linearized<T>>], measurements: &[RangeBearing<T>], threshold: T) -> Gating {
    let mut matches = Vec::with_capacity(measurements.len());
    let mut unmatched = Vec::new();
    for (l, z) in measurements.iter().enumerate() {
        let gated: Vec<usize> = lin
            .iter()
            .enumerate()
            .filter_map(|(j, lj)| {
                let lj = lj.as_ref()?;
                if !(lj.p_detect > T::zero()) {
                    return None;
                }
                (lj.squared_distance(z).1 <= threshold).then_some(j)
            })
            .collect();
        if gated.is_empty() {
            unmatched.push(l);
        }
        matches.push(gated);
    }
    Gating { matches, unmatched }
}

fn linearize_map<T: Scalar>(
    map: &GaussianMixtureMap<T>,
    agent: &AgentState<T>,
    sensor: &SensorParams<T>,
) -> Vec<Option<Linearized<T>>> {
    let r = measurement_noise(sensor);
    map.components.iter().map(|c| linearize(c, agent, sensor, &r)).collect()
}

/// Coarse gating: a pair passes when the squared Mahalanobis innovation is at
/// most `gate_threshold`. Components outside the FOV (zero detection
/// probability) or with degenerate geometry never gate.
pub fn gate<T: Scalar>(
    map: &GaussianMixtureMap<T>,
    measurements: &[RangeBearing<T>],
    agent: &AgentState<T>,
    sensor: &SensorParams<T>,
    gate_threshold: T,
) -> Gating {
    gate_linearized(&linearize_map(map, agent, sensor), measurements, gate_threshold)
}

/// Density of `z` under the linearized model of one component.
pub fn component_likelihood<T: Scalar>(
    gc: &GaussianComponent<T>,
    z: &RangeBearing<T>,
    agent: &AgentState<T>,
    sensor: &SensorParams<T>,
) -> T {
    match linearize(gc, agent, sensor, &measurement_noise(sensor)) {
        Some(lin) => {
            let (_, d2) = lin.squared_distance(z);
            (lin.log_norm - T::lit(0.5) * d2).exp()
        }
        None => T::zero(),
    }
}

/// Output of [`update`].
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome<T: Scalar> {
    pub map: GaussianMixtureMap<T>,
    /// Indices of measurements that gated with no component.
    pub unmatched: Vec<usize>,
    /// Per measurement: `kappa(z) + sum_j P_D,j alpha_j q_j(z)` over gated `j`.
    pub denominators: Vec<T>,
    /// `sum_j P_D,j alpha_j` of the predicted map.
    pub detected_mass: T,
    pub repairs: RepairCounters,
}

fn repair_covariance<T: Scalar>(cov: Matrix3<T>, repairs: &mut RepairCounters) -> Matrix3<T> {
    if Cholesky::new(cov).is_some() {
        return cov;
    }
    repairs.covariance_repairs += 1;
    let sym = (cov + cov.transpose()) * T::lit(0.5);
    let scale = (sym.trace().abs() / T::lit(3.0)).max(T::lit(1e-12));
    let mut jitter = scale * T::lit(1e-9);
    loop {
        let candidate = sym + Matrix3::identity() * jitter;
        if Cholesky::new(candidate).is_some() {
            return candidate;
        }
        jitter *= T::lit(10.0);
    }
}

/// GM-PHD corrector with EKF-refined components.
///
/// The result holds a missed-detection copy of every component (weight scaled
/// by `1 - P_D`) followed by, for each measurement, one corrected component per
/// gated pair. Both numerator and denominator of the weight only range over
/// gated pairs. Corrected biases that fall below zero are clamped.
pub fn update<T: Scalar>(
    map: &GaussianMixtureMap<T>,
    measurements: &[RangeBearing<T>],
    agent: &AgentState<T>,
    sensor: &SensorParams<T>,
    gate_threshold: T,
) -> UpdateOutcome<T> {
    let lin = linearize_map(map, agent, sensor);
    let gating = gate_linearized(&lin, measurements, gate_threshold);
    let mut repairs = RepairCounters::default();

    let mut components = Vec::with_capacity(map.len() * (1 + measurements.len()));
    let mut detected_mass = T::zero();
    for (gc, lj) in map.components.iter().zip(&lin) {
        let pd = match lj {
            Some(l) => l.p_detect,
            // geometry undefined: treat as undetectable
            None => T::zero(),
        };
        detected_mass += pd * gc.weight;
        components.push(GaussianComponent::new(
            (T::one() - pd) * gc.weight,
            gc.mean,
            gc.covariance,
        ));
    }

    let mut corrected_covs: Vec<Option<Matrix3<T>>> = vec![None; map.len()];
    let mut denominators = Vec::with_capacity(measurements.len());
    let mut numerators: Vec<T> = Vec::new();
    for (z, gated) in measurements.iter().zip(&gating.matches) {
        numerators.clear();
        let mut denom = clutter_density(z, sensor);
        for &j in gated {
            let l = lin[j].as_ref().expect("gated components are linearized");
            let (_, d2) = l.squared_distance(z);
            let num = l.p_detect * map.components[j].weight * (l.log_norm - T::lit(0.5) * d2).exp();
            numerators.push(num);
            denom += num;
        }
        denominators.push(denom);
        if !(denom > T::zero()) {
            continue;
        }
        for (&j, &num) in gated.iter().zip(&numerators) {
            let l = lin[j].as_ref().expect("gated components are linearized");
            let (nu, _) = l.squared_distance(z);
            let mut mean = map.components[j].mean + l.gain * nu;
            if mean.z < T::zero() {
                mean.z = T::zero();
                repairs.bias_clamps += 1;
            }
            let cov = *corrected_covs[j].get_or_insert_with(|| repair_covariance(l.corrected_cov, &mut repairs));
            components.push(GaussianComponent::new(num / denom, mean, cov));
        }
    }

    UpdateOutcome {
        map: GaussianMixtureMap::new(components),
        unmatched: gating.unmatched,
        denominators,
        detected_mass,
        repairs,
    }
}

fn squared_mahalanobis<T: Scalar>(d: &Vector3<T>, chol: &Option<Cholesky<T, nalgebra::U3>>) -> T {
    match chol {
        Some(c) => d.dot(&c.solve(d)),
        None => T::lit(f64::INFINITY),
    }
}

/// Prunes components with weight below `prune_threshold`, merges groups within
/// squared Mahalanobis distance `merge_threshold` of the strongest remaining
/// component (moment matched), and keeps the `cap` strongest results. The
/// output is sorted by decreasing weight.
pub fn prune_merge<T: Scalar>(
    map: &GaussianMixtureMap<T>,
    prune_threshold: T,
    merge_threshold: T,
    cap: usize,
) -> GaussianMixtureMap<T> {
    let mut kept: Vec<&GaussianComponent<T>> = map.components.iter().filter(|c| c.weight >= prune_threshold).collect();
    kept.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap_or(std::cmp::Ordering::Equal));
    let chols: Vec<_> = kept.iter().map(|c| Cholesky::new(c.covariance)).collect();
    let mut used = vec![false; kept.len()];
    let mut merged = Vec::with_capacity(kept.len());
    for i in 0..kept.len() {
        if used[i] {
            continue;
        }
        let lead = kept[i].mean;
        let group: Vec<usize> = (i..kept.len())
            .filter(|&j| {
                !used[j] && (j == i || squared_mahalanobis(&(kept[j].mean - lead), &chols[j]) <= merge_threshold)
            })
            .collect();
        if group.len() == 1 {
            used[i] = true;
            merged.push(kept[i].clone());
            continue;
        }
        let weight = group.iter().fold(T::zero(), |a, &j| a + kept[j].weight);
        let mean = group
            .iter()
            .fold(Vector3::zeros(), |a, &j| a + kept[j].mean * kept[j].weight)
            / weight;
        let mut cov = Matrix3::zeros();
        for &j in &group {
            used[j] = true;
            let d = kept[j].mean - mean;
            cov += (kept[j].covariance + d * d.transpose()) * kept[j].weight;
        }
        cov /= weight;
        merged.push(GaussianComponent::new(
            weight,
            mean,
            (cov + cov.transpose()) * T::lit(0.5),
        ));
    }
    merged.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap_or(std::cmp::Ordering::Equal));
    merged.truncate(cap);
    GaussianMixtureMap::new(merged)
}

/// Map estimate: the mean of every component with weight at least
/// `weight_threshold`, repeated `round(weight)` times when the weight reaches
/// 1.5 (coincident VTs share one component). Strongest components first.
pub fn extract_map<T: Scalar>(map: &GaussianMixtureMap<T>, weight_threshold: T) -> Vec<VirtualTransmitter<T>> {
    let mut selected: Vec<&GaussianComponent<T>> =
        map.components.iter().filter(|c| c.weight >= weight_threshold).collect();
    selected.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = Vec::new();
    for c in selected {
        let copies = if c.weight >= T::lit(1.5) {
            c.weight.round().as_f64() as usize
        } else {
            1
        };
        let mut vt = VirtualTransmitter::from_state(&c.mean);
        vt.bias = vt.bias.max(T::zero());
        for _ in 0..copies {
            out.push(vt.clone());
        }
    }
    out
}
