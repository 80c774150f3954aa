//! Ground truth and random-finite-set measurement generation.

use nalgebra::Vector2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{predict_measurement, RangeBearing, VirtualTransmitter};
use crate::motion::{propagate, sample_noise, AgentState, MotionParams};
use crate::scalar::{wrap_angle, Scalar};

/// Measurement noise, detection and clutter settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorParams<T> {
    /// NLOS range noise std (m).
    pub sigma_d: T,
    /// NLOS bearing noise std (rad).
    pub sigma_theta: T,
    /// LOS range noise std (m).
    pub sigma_d0: T,
    /// LOS bearing noise std (rad).
    pub sigma_theta0: T,
    pub p_detect: T,
    /// Expected clutter points per scan.
    pub lambda_clutter: T,
    /// Detection radius around the agent (m).
    pub fov_radius: T,
    /// Upper range bound of the clutter space (m).
    pub range_max: T,
    /// LOS measurements exist only while `t <= los_end_time` (s).
    pub los_end_time: T,
}

impl<T: Scalar> SensorParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_detect >= T::zero() && self.p_detect <= T::one()) {
            return Err(invalid("p_detect", "must lie in [0, 1]"));
        }
        for (name, v) in [
            ("sigma_d", self.sigma_d),
            ("sigma_theta", self.sigma_theta),
            ("sigma_d0", self.sigma_d0),
            ("sigma_theta0", self.sigma_theta0),
            ("lambda_clutter", self.lambda_clutter),
        ] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }
        if !(self.fov_radius > T::zero()) {
            return Err(invalid("fov_radius", "must be positive"));
        }
        if !(self.range_max > T::zero()) {
            return Err(invalid("range_max", "must be positive"));
        }
        Ok(())
    }
}

/// One scan as seen by a filter: an optional LOS observation plus the
/// unlabeled NLOS/clutter observations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet<T> {
    pub los: Option<RangeBearing<T>>,
    pub nlos: Vec<RangeBearing<T>>,
}

/// Ground-truth origin of an NLOS measurement (evaluation side channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasurementOrigin {
    /// Index into the ground-truth VT list.
    Vt(usize),
    Clutter,
}

/// A simulated scan together with the origin of every NLOS entry.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedScan<T> {
    pub measurements: MeasurementSet<T>,
    /// `origins[i]` labels `measurements.nlos[i]`.
    pub origins: Vec<MeasurementOrigin>,
}

/// Samples a trajectory of `steps + 1` states starting at `init`.
pub fn generate_trajectory<T: Scalar, R: Rng + ?Sized>(
    init: AgentState<T>,
    params: &MotionParams<T>,
    steps: usize,
    rng: &mut R,
) -> Vec<AgentState<T>> {
    let mut out = Vec::with_capacity(steps + 1);
    out.push(init);
    let mut state = init;
    for _ in 0..steps {
        let n = sample_noise(rng, params);
        state = propagate(&state, &n, params.dt);
        out.push(state);
    }
    out
}

/// Closed-ball FOV test on the agent-to-VT Euclidean distance.
pub fn in_fov<T: Scalar>(agent: &AgentState<T>, vt: &VirtualTransmitter<T>, fov_radius: T) -> bool {
    position_in_fov(agent, &vt.position, fov_radius)
}

pub(crate) fn position_in_fov<T: Scalar>(agent: &AgentState<T>, p: &Vector2<T>, fov_radius: T) -> bool {
    (agent.position - p).norm() <= fov_radius
}

/// Uniform clutter intensity over `[0, range_max] x (-pi, pi]`; zero outside.
pub fn clutter_density<T: Scalar>(z: &RangeBearing<T>, sensor: &SensorParams<T>) -> T {
    let inside = z.range >= T::zero() && z.range <= sensor.range_max && z.bearing > -T::pi() && z.bearing <= T::pi();
    if inside {
        sensor.lambda_clutter / (sensor.range_max * T::two_pi())
    } else {
        T::zero()
    }
}

fn gaussian<T: Scalar, R: Rng + ?Sized>(rng: &mut R, sigma: T) -> T {
    let z: f64 = rng.sample(StandardNormal);
    sigma * T::lit(z)
}

fn noisy<T: Scalar, R: Rng + ?Sized>(rng: &mut R, clean: RangeBearing<T>, sd: T, stheta: T) -> RangeBearing<T> {
    let dr = gaussian(rng, sd);
    let db = gaussian(rng, stheta);
    RangeBearing {
        range: clean.range + dr,
        bearing: wrap_angle(clean.bearing + db),
    }
}

/// Generates one scan per state in `trajectory[1..]`; scan `k-1` belongs to
/// step `k` at time `k * dt`.
///
/// Per scan the RNG is consumed in a fixed order: LOS detection and noise,
/// each VT's detection and noise in list order, clutter count and points,
/// then the shuffle of the NLOS list.
pub fn generate_measurements<T: Scalar, R: Rng + ?Sized>(
    trajectory: &[AgentState<T>],
    anchor: &Vector2<T>,
    vts: &[VirtualTransmitter<T>],
    sensor: &SensorParams<T>,
    dt: T,
    rng: &mut R,
) -> Vec<SimulatedScan<T>> {
    let anchor_vt = VirtualTransmitter::new(*anchor, T::zero());
    let p_detect = sensor.p_detect.as_f64();
    let lambda = sensor.lambda_clutter.as_f64();
    let clutter_count = if lambda > 0.0 { Poisson::new(lambda).ok() } else { None };
    let time_slack = T::lit(1e-9);
    trajectory
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, agent)| {
            let t = T::lit(k as f64) * dt;
            let mut los = None;
            if t <= sensor.los_end_time + time_slack && rng.random::<f64>() < p_detect {
                if let Ok(clean) = predict_measurement(agent, &anchor_vt) {
                    los = Some(noisy(rng, clean, sensor.sigma_d0, sensor.sigma_theta0));
                }
            }
            let mut tagged: Vec<(RangeBearing<T>, MeasurementOrigin)> = Vec::new();
            for (i, vt) in vts.iter().enumerate() {
                if !in_fov(agent, vt, sensor.fov_radius) {
                    continue;
                }
                if rng.random::<f64>() >= p_detect {
                    continue;
                }
                if let Ok(clean) = predict_measurement(agent, vt) {
                    let z = noisy(rng, clean, sensor.sigma_d, sensor.sigma_theta);
                    tagged.push((z, MeasurementOrigin::Vt(i)));
                }
            }
            if let Some(poisson) = &clutter_count {
                let n = poisson.sample(rng) as usize;
                for _ in 0..n {
                    let range = sensor.range_max * T::lit(rng.random::<f64>());
                    // uniform on (-pi, pi]
                    let bearing = T::pi() - T::two_pi() * T::lit(rng.random::<f64>());
                    tagged.push((RangeBearing { range, bearing }, MeasurementOrigin::Clutter));
                }
            }
            tagged.shuffle(rng);
            let (nlos, origins) = tagged.into_iter().unzip();
            SimulatedScan {
                measurements: MeasurementSet { los, nlos },
                origins,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sensor() -> SensorParams<f64> {
        SensorParams {
            sigma_d: 0.3,
            sigma_theta: 4f64.to_radians(),
            sigma_d0: 0.05,
            sigma_theta0: 2f64.to_radians(),
            p_detect: 0.95,
            lambda_clutter: 0.02,
            fov_radius: 35.0,
            range_max: 35.0,
            los_end_time: 6.0,
        }
    }

    fn noiseless() -> SensorParams<f64> {
        SensorParams {
            sigma_d: 0.0,
            sigma_theta: 0.0,
            sigma_d0: 0.0,
            sigma_theta0: 0.0,
            p_detect: 1.0,
            lambda_clutter: 0.0,
            ..sensor()
        }
    }

    fn still_motion() -> MotionParams<f64> {
        MotionParams {
            sigma_x: 0.0,
            sigma_y: 0.0,
            sigma_b: 0.0,
            dt: 0.08,
        }
    }

    fn start() -> AgentState<f64> {
        AgentState::new(Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), 0.3)
    }

    #[test]
    fn straight_line_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = generate_trajectory(start(), &still_motion(), 10, &mut rng);
        assert_eq!(traj.len(), 11);
        for w in traj.windows(2) {
            assert!((w[1].position.x - w[0].position.x - 0.08).abs() < 1e-12);
            assert_eq!(w[1].position.y, 0.0);
        }
    }

    #[test]
    fn trajectory_is_reproducible() {
        let motion = MotionParams {
            sigma_x: 0.5,
            sigma_y: 0.5,
            sigma_b: 0.01,
            dt: 0.08,
        };
        let a = generate_trajectory(start(), &motion, 375, &mut ChaCha8Rng::seed_from_u64(5));
        let b = generate_trajectory(start(), &motion, 375, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.len(), 376);
        assert_eq!(a, b);
    }

    #[test]
    fn fov_is_closed_ball() {
        let agent = AgentState::new(Vector2::zeros(), Vector2::zeros(), 0.0);
        assert!(in_fov(
            &agent,
            &VirtualTransmitter::new(Vector2::new(0.0, 20.0), 0.0),
            35.0
        ));
        assert!(!in_fov(
            &agent,
            &VirtualTransmitter::new(Vector2::new(0.0, 40.0), 0.0),
            35.0
        ));
        assert!(in_fov(
            &agent,
            &VirtualTransmitter::new(Vector2::new(0.0, 35.0), 0.0),
            35.0
        ));
    }

    #[test]
    fn clutter_density_examples() {
        let k = clutter_density(&RangeBearing::new(10.0, 0.3), &sensor());
        assert!((k - 9.0946e-5).abs() < 1e-8);
        let mut s = sensor();
        s.lambda_clutter = 0.0;
        assert_eq!(clutter_density(&RangeBearing::new(10.0, 0.3), &s), 0.0);
        assert_eq!(clutter_density(&RangeBearing::new(40.0, 0.3), &sensor()), 0.0);
        // density times the measurement-space volume recovers lambda
        let volume = sensor().range_max * 2.0 * std::f64::consts::PI;
        assert!((clutter_density(&RangeBearing::new(1.0, -1.0), &sensor()) * volume - 0.02).abs() < 1e-15);
    }

    #[test]
    fn noiseless_measurements_match_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let traj = generate_trajectory(start(), &still_motion(), 100, &mut rng);
        let vt = VirtualTransmitter::new(Vector2::new(0.0, 20.0), 0.0);
        let scans = generate_measurements(
            &traj,
            &Vector2::zeros(),
            std::slice::from_ref(&vt),
            &noiseless(),
            0.08,
            &mut rng,
        );
        assert_eq!(scans.len(), 100);
        for (k, scan) in scans.iter().enumerate() {
            assert_eq!(scan.measurements.nlos.len(), 1);
            let expected = predict_measurement(&traj[k + 1], &vt).unwrap();
            assert_eq!(scan.measurements.nlos[0], expected);
            assert_eq!(scan.origins, vec![MeasurementOrigin::Vt(0)]);
            // LOS window: t = (k+1) * 0.08 <= 6 s  <=>  k + 1 <= 75
            assert_eq!(scan.measurements.los.is_some(), k < 75);
        }
    }

    #[test]
    fn clutter_rate_matches_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let traj = vec![start(); n + 1];
        let scans = generate_measurements(&traj, &Vector2::zeros(), &[], &sensor(), 0.08, &mut rng);
        let total: usize = scans.iter().map(|s| s.measurements.nlos.len()).sum();
        let mean = total as f64 / n as f64;
        let band = 3.0 * (0.02f64 / n as f64).sqrt();
        assert!((mean - 0.02).abs() <= band, "mean clutter {mean}");
        for s in &scans {
            for z in &s.measurements.nlos {
                assert!(z.range >= 0.0 && z.range <= 35.0);
                assert!(z.bearing > -std::f64::consts::PI && z.bearing <= std::f64::consts::PI);
            }
        }
    }

    #[test]
    fn detection_rate_matches_p_detect() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = sensor();
        s.lambda_clutter = 0.0;
        let vts: Vec<_> = [(0.0, 20.0), (10.0, -5.0), (10.0, 25.0), (-8.0, 3.0)]
            .iter()
            .map(|&(x, y)| VirtualTransmitter::new(Vector2::new(x, y), 1.0))
            .collect();
        let n = 10_000;
        let traj = vec![AgentState::new(Vector2::new(1.0, 1.0), Vector2::zeros(), 0.0); n + 1];
        let scans = generate_measurements(&traj, &Vector2::zeros(), &vts, &s, 0.08, &mut rng);
        let total: usize = scans.iter().map(|s| s.measurements.nlos.len()).sum();
        let mean = total as f64 / n as f64;
        let band = 3.0 * (4.0 * 0.95 * 0.05 / n as f64).sqrt();
        assert!((mean - 3.8).abs() <= band, "mean detections {mean}");
        let per_vt = (0..4)
            .map(|i| {
                scans
                    .iter()
                    .filter(|s| s.origins.contains(&MeasurementOrigin::Vt(i)))
                    .count() as f64
                    / n as f64
            })
            .collect::<Vec<_>>();
        let band = 3.0 * (0.95 * 0.05 / n as f64).sqrt();
        for rate in per_vt {
            assert!((rate - 0.95).abs() <= band);
        }
    }

    #[test]
    fn out_of_fov_vt_is_never_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj = vec![start(); 200];
        let far = VirtualTransmitter::new(Vector2::new(0.0, 40.0), 0.0);
        let scans = generate_measurements(&traj, &Vector2::zeros(), &[far], &noiseless(), 0.08, &mut rng);
        assert!(scans.iter().all(|s| s.measurements.nlos.is_empty()));
    }

    #[test]
    fn measurement_sets_carry_no_labels() {
        // Exhaustive destructuring: adding an origin field would break this.
        let MeasurementSet::<f64> { los, nlos } = MeasurementSet::default();
        assert!(los.is_none() && nlos.is_empty());
    }
}
