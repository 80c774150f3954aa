//! LOS-only extended Kalman filter baseline. It uses the anchor measurement
//! while it is available and coasts on the motion model afterwards.

use nalgebra::{Matrix2, Matrix2x5, Matrix5, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{measurement_jacobians, predict_from_state, RangeBearing};
use crate::motion::{process_noise_covariance, transition_matrices, AgentState, MotionParams, Vector5};
use crate::scalar::Scalar;
use crate::simulator::{MeasurementSet, SensorParams};

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState<T: Scalar> {
    pub mean: Vector5<T>,
    pub covariance: Matrix5<T>,
}

impl<T: Scalar> EkfState<T> {
    /// Starts at `initial` with covariance `variance * I`.
    pub fn new(initial: &AgentState<T>, variance: T) -> Self {
        Self {
            mean: initial.to_vector(),
            covariance: Matrix5::identity() * variance,
        }
    }

    pub fn agent(&self) -> AgentState<T> {
        AgentState::from_vector(&self.mean)
    }
}

pub fn ekf_predict<T: Scalar>(state: &EkfState<T>, params: &MotionParams<T>) -> Result<EkfState<T>> {
    let (a, _) = transition_matrices(params.dt)?;
    let q = process_noise_covariance(params)?;
    Ok(EkfState {
        mean: a * state.mean,
        covariance: a * state.covariance * a.transpose() + q,
    })
}

/// Jacobian of the anchor range/bearing with respect to the agent state.
pub fn los_jacobian<T: Scalar>(agent: &AgentState<T>, anchor: &Vector2<T>) -> Result<Matrix2x5<T>> {
    let (_, h) = measurement_jacobians(agent, &Vector3::new(anchor.x, anchor.y, T::zero()))?;
    Ok(h)
}

/// Joseph-form update with the LOS measurement `z0`.
pub fn ekf_update<T: Scalar>(
    state: &EkfState<T>,
    z0: &RangeBearing<T>,
    anchor: &Vector2<T>,
    sensor: &SensorParams<T>,
) -> Result<EkfState<T>> {
    let agent = state.agent();
    let anchor_state = Vector3::new(anchor.x, anchor.y, T::zero());
    let predicted = predict_from_state(&agent, &anchor_state)?;
    let h = los_jacobian(&agent, anchor)?;
    let r = Matrix2::new(
        sensor.sigma_d0 * sensor.sigma_d0,
        T::zero(),
        T::zero(),
        sensor.sigma_theta0 * sensor.sigma_theta0,
    );
    let s = h * state.covariance * h.transpose() + r;
    let s_inv = s.try_inverse().ok_or(Error::DegenerateGeometry)?;
    let k = state.covariance * h.transpose() * s_inv;
    let nu = z0.innovation(&predicted);
    let ikh = Matrix5::identity() - k * h;
    let cov = ikh * state.covariance * ikh.transpose() + k * r * k.transpose();
    Ok(EkfState {
        mean: state.mean + k * nu,
        covariance: (cov + cov.transpose()) * T::lit(0.5),
    })
}

/// Stateful runner over a measurement sequence.
#[derive(Debug, Clone)]
pub struct LosEkf<T: Scalar> {
    state: EkfState<T>,
    motion: MotionParams<T>,
    sensor: SensorParams<T>,
    anchor: Vector2<T>,
}

impl<T: Scalar> LosEkf<T> {
    pub const INITIAL_VARIANCE: f64 = 1e-4;

    pub fn new(initial: &AgentState<T>, motion: MotionParams<T>, sensor: SensorParams<T>, anchor: Vector2<T>) -> Self {
        Self {
            state: EkfState::new(initial, T::lit(Self::INITIAL_VARIANCE)),
            motion,
            sensor,
            anchor,
        }
    }

    pub fn state(&self) -> &EkfState<T> {
        &self.state
    }

    /// Predicts, then corrects if the scan carries a LOS measurement.
    pub fn step(&mut self, scan: &MeasurementSet<T>) -> Result<AgentState<T>> {
        let mut next = ekf_predict(&self.state, &self.motion)?;
        if let Some(z0) = &scan.los {
            next = ekf_update(&next, z0, &self.anchor, &self.sensor)?;
        }
        self.state = next;
        Ok(self.state.agent())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Cholesky;

    fn motion() -> MotionParams<f64> {
        MotionParams {
            sigma_x: 0.5,
            sigma_y: 0.5,
            sigma_b: 0.01,
            dt: 0.08,
        }
    }

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

    #[test]
    fn predict_grows_position_variance() {
        let s = EkfState {
            mean: Vector5::zeros(),
            covariance: Matrix5::zeros(),
        };
        let p = ekf_predict(&s, &motion()).unwrap();
        assert_relative_eq!(p.covariance[(0, 0)], 0.0032f64.powi(2) * 0.25, epsilon = 1e-18);
        assert_relative_eq!(p.covariance[(2, 2)], 0.08f64.powi(2) * 0.25, epsilon = 1e-15);
        assert_relative_eq!(p.covariance[(4, 4)], 0.08f64.powi(2) * 1e-4, epsilon = 1e-18);
    }

    #[test]
    fn los_jacobian_matches_finite_differences() {
        let anchor = Vector2::new(1.0f64, -2.0);
        let agent = AgentState::new(Vector2::new(7.0, 3.0), Vector2::new(0.4, -1.0), 0.2);
        let h = los_jacobian(&agent, &anchor).unwrap();
        let anchor_state = Vector3::new(anchor.x, anchor.y, 0.0);
        let eps = 1e-6;
        for j in 0..5 {
            let mut plus = agent.to_vector();
            let mut minus = agent.to_vector();
            plus[j] += eps;
            minus[j] -= eps;
            let zp = predict_from_state(&AgentState::from_vector(&plus), &anchor_state).unwrap();
            let zm = predict_from_state(&AgentState::from_vector(&minus), &anchor_state).unwrap();
            let d = zp.innovation(&zm) / (2.0 * eps);
            assert!((d.x - h[(0, j)]).abs() < 1e-6, "range column {j}");
            assert!((d.y - h[(1, j)]).abs() < 1e-6, "bearing column {j}");
        }
    }

    #[test]
    fn update_shrinks_covariance_and_wraps_bearing() {
        let anchor = Vector2::new(0.0, 0.0);
        // bearing from the agent to the anchor sits next to the +-pi seam
        let agent = AgentState::new(Vector2::new(5.0, 0.001), Vector2::zeros(), 0.0);
        let state = EkfState::new(&agent, 0.01);
        let truth = predict_from_state(&agent, &Vector3::zeros()).unwrap();
        let z = RangeBearing::new(truth.range, truth.bearing - 0.01);
        assert!(z.bearing > 3.0);
        let updated = ekf_update(&state, &z, &anchor, &sensor()).unwrap();
        assert!(updated.covariance.trace() < state.covariance.trace());
        assert!((updated.mean - state.mean).norm() < 0.1);
    }

    #[test]
    fn covariance_stays_spd_over_many_cycles() {
        let anchor = Vector2::new(0.0, 0.0);
        let mut ekf = LosEkf::new(
            &AgentState::new(Vector2::new(0.0, 0.5), Vector2::new(1.0, 0.0), 0.3),
            motion(),
            sensor(),
            anchor,
        );
        for k in 0..10_000 {
            let agent = ekf.state().agent();
            let z = predict_from_state(&agent, &Vector3::zeros()).ok();
            let scan = MeasurementSet {
                los: if k % 3 == 0 { z } else { None },
                nlos: Vec::new(),
            };
            ekf.step(&scan).unwrap();
            let c = ekf.state().covariance;
            assert!(Cholesky::new(c).is_some(), "cycle {k} not SPD");
            assert_relative_eq!(c, c.transpose(), epsilon = 1e-12);
        }
    }

    #[test]
    fn coasts_without_los() {
        let init = AgentState::new(Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0), 0.3);
        let mut ekf = LosEkf::new(&init, motion(), sensor(), Vector2::new(0.0, 0.0));
        let est = ekf.step(&MeasurementSet::default()).unwrap();
        assert_relative_eq!(est.position, Vector2::new(0.08, 0.0), epsilon = 1e-15);
    }
}
