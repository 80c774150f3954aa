//! Environment description and the virtual-transmitter (VT) model.
//!
//! Every non-line-of-sight path is described as a direct transmission from a
//! virtual transmitter with a 2-D position and an additional propagation bias.
//! Reflections move the virtual source to its mirror image; a scattering
//! re-emits the signal from the scatterer and adds the path length travelled
//! so far to the bias.

use nalgebra::{Matrix2x3, Matrix2x5, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::AgentState;
use crate::scalar::{wrap_angle, Scalar};

/// Maximum interaction chain depth supported by [`enumerate_vts`].
pub const MAX_INTERACTION_ORDER: usize = 2;

/// Agent/VT separation below which the measurement function is undefined (m).
const DEGENERATE_DISTANCE: f64 = 1e-9;

/// An infinite reflecting line, given by a point on it and its unit normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflector<T: Scalar> {
    point: Vector2<T>,
    normal: Vector2<T>,
}

impl<T: Scalar> Reflector<T> {
    /// Builds a reflector; the normal is rescaled to unit length.
    pub fn new(point: Vector2<T>, normal: Vector2<T>) -> Result<Self> {
        let norm = normal.norm();
        if !(norm > T::zero()) || !norm.is_finite() || !point.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidEnvironment(
                "reflector needs a finite point and a non-zero normal".into(),
            ));
        }
        Ok(Self {
            point,
            normal: normal / norm,
        })
    }

    /// The line `y = c`.
    pub fn horizontal(c: T) -> Self {
        Self {
            point: Vector2::new(T::zero(), c),
            normal: Vector2::new(T::zero(), T::one()),
        }
    }

    /// The line `x = c`.
    pub fn vertical(c: T) -> Self {
        Self {
            point: Vector2::new(c, T::zero()),
            normal: Vector2::new(T::one(), T::zero()),
        }
    }

    pub fn point(&self) -> &Vector2<T> {
        &self.point
    }

    pub fn normal(&self) -> &Vector2<T> {
        &self.normal
    }

    pub fn signed_distance(&self, p: &Vector2<T>) -> T {
        (p - self.point).dot(&self.normal)
    }
}

/// Anchor, reflectors and point scatterers of a propagation scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment<T: Scalar> {
    anchor: Vector2<T>,
    reflectors: Vec<Reflector<T>>,
    scatterers: Vec<Vector2<T>>,
}

impl<T: Scalar> Environment<T> {
    pub fn new(anchor: Vector2<T>, reflectors: Vec<Reflector<T>>, scatterers: Vec<Vector2<T>>) -> Result<Self> {
        for (i, r) in reflectors.iter().enumerate() {
            if r.signed_distance(&anchor).abs() <= T::lit(DEGENERATE_DISTANCE) {
                return Err(Error::InvalidEnvironment(format!("anchor lies on reflector {i}")));
            }
        }
        if scatterers.iter().any(|s| !s.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidEnvironment("non-finite scatterer".into()));
        }
        Ok(Self {
            anchor,
            reflectors,
            scatterers,
        })
    }

    pub fn anchor(&self) -> &Vector2<T> {
        &self.anchor
    }

    pub fn reflectors(&self) -> &[Reflector<T>] {
        &self.reflectors
    }

    pub fn scatterers(&self) -> &[Vector2<T>] {
        &self.scatterers
    }
}

/// One propagation interaction in a path from the anchor to the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Interaction {
    Reflection(usize),
    Scattering(usize),
}

/// A virtual transmitter: position, additional propagation bias and the
/// interaction chain it was derived from (empty for estimated VTs).
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTransmitter<T: Scalar> {
    pub position: Vector2<T>,
    pub bias: T,
    pub provenance: Vec<Interaction>,
}

impl<T: Scalar> VirtualTransmitter<T> {
    pub fn new(position: Vector2<T>, bias: T) -> Self {
        Self {
            position,
            bias,
            provenance: Vec::new(),
        }
    }

    pub fn from_state(state: &Vector3<T>) -> Self {
        Self::new(Vector2::new(state.x, state.y), state.z)
    }

    /// The 3-D state `(x, y, bias)`.
    pub fn state(&self) -> Vector3<T> {
        Vector3::new(self.position.x, self.position.y, self.bias)
    }
}

/// A range-bearing observation; bearing lives in (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBearing<T> {
    pub range: T,
    pub bearing: T,
}

impl<T: Scalar> RangeBearing<T> {
    pub fn new(range: T, bearing: T) -> Self {
        Self {
            range,
            bearing: wrap_angle(bearing),
        }
    }

    /// Innovation `self - predicted` with the bearing difference wrapped.
    pub fn innovation(&self, predicted: &RangeBearing<T>) -> Vector2<T> {
        Vector2::new(
            self.range - predicted.range,
            wrap_angle(self.bearing - predicted.bearing),
        )
    }
}

/// Reflects `p` across the reflector line.
pub fn mirror_point<T: Scalar>(p: &Vector2<T>, line: &Reflector<T>) -> Vector2<T> {
    let d = line.signed_distance(p);
    p - line.normal * (d + d)
}

fn push_chain<T: Scalar>(env: &Environment<T>, chain: &[Interaction], out: &mut Vec<VirtualTransmitter<T>>) {
    let mut source = env.anchor;
    let mut bias = T::zero();
    for step in chain {
        match *step {
            Interaction::Reflection(i) => source = mirror_point(&source, &env.reflectors[i]),
            Interaction::Scattering(i) => {
                let s = env.scatterers[i];
                bias += (source - s).norm();
                source = s;
            }
        }
    }
    out.push(VirtualTransmitter {
        position: source,
        bias,
        provenance: chain.to_vec(),
    });
}

/// Enumerates one VT per admissible interaction chain of length `1..=max_order`.
///
/// Chains never repeat the same reflector or scatterer back to back. Output is
/// grouped as: single reflections, single scatterings, double reflections,
/// scattering-then-reflection, reflection-then-scattering, double scatterings.
/// Coincident VTs with different provenance are all kept.
pub fn enumerate_vts<T: Scalar>(env: &Environment<T>, max_order: usize) -> Result<Vec<VirtualTransmitter<T>>> {
    if max_order > MAX_INTERACTION_ORDER {
        return Err(Error::UnsupportedOrder(max_order));
    }
    let refl: Vec<Interaction> = (0..env.reflectors.len()).map(Interaction::Reflection).collect();
    let scat: Vec<Interaction> = (0..env.scatterers.len()).map(Interaction::Scattering).collect();
    let mut out = Vec::new();
    if max_order == 0 {
        return Ok(out);
    }
    for &r in &refl {
        push_chain(env, &[r], &mut out);
    }
    for &s in &scat {
        push_chain(env, &[s], &mut out);
    }
    if max_order < 2 {
        return Ok(out);
    }
    let pairs = |first: &[Interaction], second: &[Interaction], out: &mut Vec<_>| {
        for &a in first {
            for &b in second {
                if a != b {
                    push_chain(env, &[a, b], out);
                }
            }
        }
    };
    pairs(&refl, &refl, &mut out);
    pairs(&scat, &refl, &mut out);
    pairs(&refl, &scat, &mut out);
    pairs(&scat, &scat, &mut out);
    Ok(out)
}

fn separation<T: Scalar>(agent: &AgentState<T>, target: &Vector2<T>) -> Result<(Vector2<T>, T)> {
    let delta = target - agent.position;
    let dist = delta.norm();
    if !(dist > T::lit(DEGENERATE_DISTANCE)) {
        return Err(Error::DegenerateGeometry);
    }
    Ok((delta, dist))
}

/// Noise-free range-bearing observation of a VT from the agent.
pub fn predict_measurement<T: Scalar>(agent: &AgentState<T>, vt: &VirtualTransmitter<T>) -> Result<RangeBearing<T>> {
    predict_from_state(agent, &vt.state())
}

/// [`predict_measurement`] for a raw `(x, y, bias)` VT state.
pub fn predict_from_state<T: Scalar>(agent: &AgentState<T>, vt: &Vector3<T>) -> Result<RangeBearing<T>> {
    let (delta, dist) = separation(agent, &Vector2::new(vt.x, vt.y))?;
    Ok(RangeBearing {
        range: dist + agent.bias + vt.z,
        bearing: wrap_angle(delta.y.atan2(delta.x)),
    })
}

/// Jacobians of the measurement function with respect to the VT state
/// `(x, y, bias)` and the agent state `(x, y, vx, vy, bias)`.
pub fn measurement_jacobians<T: Scalar>(
    agent: &AgentState<T>,
    vt: &Vector3<T>,
) -> Result<(Matrix2x3<T>, Matrix2x5<T>)> {
    let (delta, dist) = separation(agent, &Vector2::new(vt.x, vt.y))?;
    let ux = delta.x / dist;
    let uy = delta.y / dist;
    let d2 = dist * dist;
    let bx = -delta.y / d2;
    let by = delta.x / d2;
    let zero = T::zero();
    let one = T::one();
    #[rustfmt::skip]
    let wrt_vt = Matrix2x3::new(
        ux, uy, one,
        bx, by, zero,
    );
    #[rustfmt::skip]
    let wrt_agent = Matrix2x5::new(
        -ux, -uy, zero, zero, one,
        -bx, -by, zero, zero, zero,
    );
    Ok((wrt_vt, wrt_agent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn agent_at(x: f64, y: f64, b: f64) -> AgentState<f64> {
        AgentState::new(Vector2::new(x, y), Vector2::zeros(), b)
    }

    #[test]
    fn mirror_examples() {
        let p = mirror_point(&Vector2::new(0.0, 0.0), &Reflector::horizontal(10.0));
        assert_relative_eq!(p, Vector2::new(0.0, 20.0));
        let p = mirror_point(&Vector2::new(10.0, -5.0), &Reflector::vertical(10.0));
        assert_relative_eq!(p, Vector2::new(10.0, -5.0));
        let p = mirror_point(&Vector2::new(3.0, 4.0), &Reflector::horizontal(0.0));
        assert_relative_eq!(p, Vector2::new(3.0, -4.0));
    }

    #[test]
    fn reflector_normal_is_normalized() {
        let r = Reflector::<f64>::new(Vector2::new(1.0, 1.0), Vector2::new(3.0, 4.0)).unwrap();
        assert!((r.normal().norm() - 1.0).abs() <= 1e-12);
        assert!(Reflector::<f64>::new(Vector2::new(1.0, 1.0), Vector2::zeros()).is_err());
    }

    #[test]
    fn anchor_on_reflector_is_rejected() {
        let env = Environment::new(Vector2::new(0.0, 10.0), vec![Reflector::horizontal(10.0)], vec![]);
        assert!(matches!(env, Err(Error::InvalidEnvironment(_))));
    }

    #[test]
    fn empty_environment_has_no_vts() {
        let env = Environment::<f64>::new(Vector2::zeros(), vec![], vec![]).unwrap();
        assert!(enumerate_vts(&env, 2).unwrap().is_empty());
    }

    #[test]
    fn order_above_two_is_rejected() {
        let env = Environment::<f64>::new(Vector2::zeros(), vec![], vec![]).unwrap();
        assert_eq!(enumerate_vts(&env, 3).unwrap_err(), Error::UnsupportedOrder(3));
    }

    #[test]
    fn first_order_only() {
        let env = Environment::new(
            Vector2::new(0.0, 0.0),
            vec![Reflector::horizontal(10.0)],
            vec![Vector2::new(10.0, -5.0)],
        )
        .unwrap();
        let vts = enumerate_vts(&env, 1).unwrap();
        assert_eq!(vts.len(), 2);
    }

    #[test]
    fn predict_examples() {
        let z = predict_measurement(
            &agent_at(0.0, 0.0, 0.0),
            &VirtualTransmitter::new(Vector2::new(3.0, 4.0), 0.0),
        )
        .unwrap();
        assert_relative_eq!(z.range, 5.0, epsilon = 1e-12);
        assert_relative_eq!(z.bearing, (4.0f64 / 3.0).atan(), epsilon = 1e-12);

        let b_vt = 125f64.sqrt();
        let z = predict_measurement(
            &agent_at(0.0, 0.0, 0.3),
            &VirtualTransmitter::new(Vector2::new(10.0, -5.0), b_vt),
        )
        .unwrap();
        assert_relative_eq!(z.range, 22.6607, epsilon = 1e-4);
        assert_relative_eq!(z.bearing, -0.4636, epsilon = 1e-4);

        let z = predict_measurement(
            &agent_at(0.0, 0.0, 0.0),
            &VirtualTransmitter::new(Vector2::new(-1.0, 0.0), 0.0),
        )
        .unwrap();
        assert_eq!(z.bearing, std::f64::consts::PI);
        // -0.0 in the y component must not flip the boundary to -pi.
        let z = predict_measurement(
            &agent_at(0.0, 0.0, 0.0),
            &VirtualTransmitter::new(Vector2::new(-1.0, -0.0), 0.0),
        )
        .unwrap();
        assert_eq!(z.bearing, std::f64::consts::PI);
    }

    #[test]
    fn coincident_positions_are_degenerate() {
        let vt = VirtualTransmitter::new(Vector2::new(1.0, 2.0), 0.0);
        assert_eq!(
            predict_measurement(&agent_at(1.0, 2.0, 0.0), &vt).unwrap_err(),
            Error::DegenerateGeometry
        );
        assert!(measurement_jacobians(&agent_at(1.0, 2.0, 0.0), &vt.state()).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let (h_vt, h_agent) = measurement_jacobians(&agent_at(0.0, 0.0, 0.0), &Vector3::new(3.0, 4.0, 0.0)).unwrap();
        let expected = Matrix2x3::new(0.6, 0.8, 1.0, -0.16, 0.12, 0.0);
        assert_relative_eq!(h_vt, expected, epsilon = 1e-12);
        assert_eq!(h_agent[(0, 2)], 0.0);
        assert_eq!(h_agent[(1, 3)], 0.0);

        let (h_vt, _) = measurement_jacobians(&agent_at(2.0, -1.0, 0.4), &Vector3::new(2.0, 9.0, 1.5)).unwrap();
        assert_relative_eq!(h_vt[(1, 0)], -0.1, epsilon = 1e-12);
        assert_relative_eq!(h_vt[(1, 1)], 0.0, epsilon = 1e-12);
        assert_eq!(h_vt[(1, 2)], 0.0);
    }

    #[test]
    fn generic_over_f32() {
        let agent = AgentState::<f32>::new(Vector2::new(0.0, 0.0), Vector2::zeros(), 0.0);
        let z = predict_from_state(&agent, &Vector3::new(3.0f32, 4.0, 0.0)).unwrap();
        assert!((z.range - 5.0).abs() < 1e-6);
        let img = mirror_point(&Vector2::new(0.0f32, 0.0), &Reflector::horizontal(10.0));
        assert!((img.y - 20.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn mirror_is_involution(
            px in -100.0f64..100.0, py in -100.0f64..100.0,
            lx in -50.0f64..50.0, ly in -50.0f64..50.0,
            angle in -3.2f64..3.2,
        ) {
            let line = Reflector::new(Vector2::new(lx, ly), Vector2::new(angle.cos(), angle.sin())).unwrap();
            let p = Vector2::new(px, py);
            let back = mirror_point(&mirror_point(&p, &line), &line);
            prop_assert!((back - p).norm() <= 1e-12);
        }

        #[test]
        fn bearing_is_canonical(
            ax in -50.0f64..50.0, ay in -50.0f64..50.0,
            vx in -50.0f64..50.0, vy in -50.0f64..50.0,
        ) {
            prop_assume!((ax - vx).hypot(ay - vy) > 1e-6);
            let z = predict_from_state(&agent_at(ax, ay, 0.0), &Vector3::new(vx, vy, 0.0)).unwrap();
            prop_assert!(z.bearing > -std::f64::consts::PI && z.bearing <= std::f64::consts::PI);
        }
    }
}
