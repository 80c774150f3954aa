//! Multipath SLAM with virtual transmitters.
//!
//! A Rao-Blackwellized particle filter estimates the agent state while every
//! particle keeps a GM-PHD map over virtual transmitter states
//! `(x, y, bias)`. The crate also ships the scenario simulator, a LOS-only
//! EKF baseline and evaluation metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`.
//!
//! ```
//! use nalgebra::Vector2;
//! use vtslam::{enumerate_vts, Environment, Reflector};
//!
//! let env = Environment::new(
//!     Vector2::new(0.0, 0.0),
//!     vec![Reflector::horizontal(10.0)],
//!     vec![Vector2::new(10.0, -5.0)],
//! )
//! .unwrap();
//! let vts = enumerate_vts(&env, 2).unwrap();
//! assert_eq!(vts.len(), 4);
//! ```

// negated float comparisons are how NaN inputs get rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod ekf;
pub mod error;
pub mod geometry;
pub mod gm_phd;
pub mod metrics;
pub mod motion;
pub mod rbpf;
pub mod scalar;
pub mod simulator;

pub use ekf::{ekf_predict, ekf_update, los_jacobian, EkfState, LosEkf};
pub use error::{Error, Result};
pub use geometry::{
    enumerate_vts, measurement_jacobians, mirror_point, predict_from_state, predict_measurement, Environment,
    Interaction, RangeBearing, Reflector, VirtualTransmitter, MAX_INTERACTION_ORDER,
};
pub use gm_phd::{
    birth_component, birth_rotation, extract_map, prune_merge, BirthParams, GaussianComponent, GaussianMixtureMap,
    MapConfig, MapSnapshot, RepairCounters,
};
pub use metrics::{error_cdf, localization_rmse, vt_rmse, RunResult, VtMatchConfig, VtScore};
pub use motion::{propagate, transition_matrices, AgentState, MotionParams, Vector5};
pub use rbpf::{FilterConfig, FilterStats, Particle, PhdSlamFilter, StepEstimate, WeightStrategy};
pub use scalar::{wrap_angle, Scalar};
pub use simulator::{
    generate_measurements, generate_trajectory, in_fov, MeasurementOrigin, MeasurementSet, SensorParams, SimulatedScan,
};

/// `f64` instantiations.
pub type Agent = AgentState<f64>;
pub type Vt = VirtualTransmitter<f64>;
pub type Measurement = RangeBearing<f64>;
pub type Scan = MeasurementSet<f64>;
pub type Map = GaussianMixtureMap<f64>;
pub type Component = GaussianComponent<f64>;
pub type Motion = MotionParams<f64>;
pub type Sensor = SensorParams<f64>;
pub type Birth = BirthParams<f64>;
pub type Config = FilterConfig<f64>;
pub type Filter = PhdSlamFilter<f64>;
pub type Env = Environment<f64>;
