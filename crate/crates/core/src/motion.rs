//! Constant-velocity agent kinematics with a drifting ranging bias.

use nalgebra::{Matrix3, Matrix5, Matrix5x3, SVector, Vector2, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

pub type Vector5<T> = SVector<T, 5>;

/// Agent position, velocity and ranging bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState<T: Scalar> {
    pub position: Vector2<T>,
    pub velocity: Vector2<T>,
    pub bias: T,
}

impl<T: Scalar> AgentState<T> {
    pub fn new(position: Vector2<T>, velocity: Vector2<T>, bias: T) -> Self {
        Self {
            position,
            velocity,
            bias,
        }
    }

    /// Stacked as `(x, y, vx, vy, b)`.
    pub fn to_vector(&self) -> Vector5<T> {
        Vector5::from([
            self.position.x,
            self.position.y,
            self.velocity.x,
            self.velocity.y,
            self.bias,
        ])
    }

    pub fn from_vector(v: &Vector5<T>) -> Self {
        Self {
            position: Vector2::new(v[0], v[1]),
            velocity: Vector2::new(v[2], v[3]),
            bias: v[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Process noise standard deviations and the step length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionParams<T> {
    /// Acceleration noise std along x (m/s^2).
    pub sigma_x: T,
    /// Acceleration noise std along y (m/s^2).
    pub sigma_y: T,
    /// Bias drift std (m/s).
    pub sigma_b: T,
    /// Step length (s).
    pub dt: T,
}

impl<T: Scalar> MotionParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) {
            return Err(invalid("dt", "must be positive"));
        }
        for (name, v) in [
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("sigma_b", self.sigma_b),
        ] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn noise_covariance(&self) -> Matrix3<T> {
        Matrix3::from_diagonal(&Vector3::new(
            self.sigma_x * self.sigma_x,
            self.sigma_y * self.sigma_y,
            self.sigma_b * self.sigma_b,
        ))
    }
}

/// State transition `A` (5x5) and noise gain `B` (5x3) for step `dt`.
pub fn transition_matrices<T: Scalar>(dt: T) -> Result<(Matrix5<T>, Matrix5x3<T>)> {
    if !(dt > T::zero()) {
        return Err(invalid("dt", "must be positive"));
    }
    let mut a = Matrix5::identity();
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    let half_dt2 = dt * dt / T::lit(2.0);
    let mut b = Matrix5x3::zeros();
    b[(0, 0)] = half_dt2;
    b[(1, 1)] = half_dt2;
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    b[(4, 2)] = dt;
    Ok((a, b))
}

/// Covariance of `B n` for one step: `B diag(sigma^2) B^T`.
pub fn process_noise_covariance<T: Scalar>(params: &MotionParams<T>) -> Result<Matrix5<T>> {
    let (_, b) = transition_matrices(params.dt)?;
    Ok(b * params.noise_covariance() * b.transpose())
}

/// Applies one step `x' = A x + B n`.
pub fn propagate<T: Scalar>(state: &AgentState<T>, noise: &Vector3<T>, dt: T) -> AgentState<T> {
    let half_dt2 = dt * dt / T::lit(2.0);
    let accel = Vector2::new(noise.x, noise.y);
    AgentState {
        position: state.position + state.velocity * dt + accel * half_dt2,
        velocity: state.velocity + accel * dt,
        bias: state.bias + noise.z * dt,
    }
}

/// Draws `(u_x, u_y, u_b)` as independent zero-mean Gaussians.
pub fn sample_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, params: &MotionParams<T>) -> Vector3<T> {
    let mut draw = |sigma: T| {
        let z: f64 = rng.sample(StandardNormal);
        sigma * T::lit(z)
    };
    let ux = draw(params.sigma_x);
    let uy = draw(params.sigma_y);
    let ub = draw(params.sigma_b);
    Vector3::new(ux, uy, ub)
}
