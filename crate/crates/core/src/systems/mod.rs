//! Plant abstraction for nonlinear parameter-varying systems, plus the two
//! benchmark plants, parameter trajectories and the LQR machinery used for
//! controller pre-training.

mod pendulum;
mod quadrotor;
mod riccati;
#[doc(hidden)]
pub mod synthetic;

pub use pendulum::{Pendulum, PendulumConstants};
pub use quadrotor::{Quadrotor, QuadrotorConstants};
pub use riccati::{lqr_gain_schedule, solve_care, spectral_abscissa, GainSchedule};

use crate::diff::tape::{GradTape, Var};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Axis-aligned box (hyper-rectangle) with `lo <= hi` per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Shape {
                context: "box bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l <= h) {
                return Err(Error::Config(format!(
                    "box axis {i}: lower bound {l} exceeds upper bound {h}"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn half_width(&self, axis: usize) -> f64 {
        0.5 * (self.hi[axis] - self.lo[axis])
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&v, (&l, &h))| v >= l && v <= h)
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (v, (&l, &h)) in p.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(l, h);
        }
    }

    pub fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut [f64]) {
        for (o, (&l, &h)) in out.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *o = if l == h { l } else { rng.gen_range(l..h) };
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut out);
        out
    }

    /// Corner points in canonical lexicographic order; degenerate axes
    /// (lo == hi) contribute a single coordinate, halving the count.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let free: Vec<usize> = (0..self.dim()).filter(|&i| self.lo[i] < self.hi[i]).collect();
        let k = free.len();
        let mut out = Vec::with_capacity(1 << k);
        for idx in 0..(1u64 << k) {
            let mut v = self.lo.clone();
            for (bit, &axis) in free.iter().enumerate() {
                if idx >> (k - 1 - bit) & 1 == 1 {
                    v[axis] = self.hi[axis];
                }
            }
            out.push(v);
        }
        out
    }
}

/// Plant descriptor: dynamics, equilibrium, domains, bounds and encoder.
///
/// The equilibrium state is the origin; `equilibrium_input(theta)` is the
/// input holding it there for each admissible parameter value.
pub trait NpvSystem: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    /// Region of interest for states.
    fn state_box(&self) -> &BoxSet;
    /// Admissible parameter values.
    fn param_box(&self) -> &BoxSet;
    /// Admissible parameter rates.
    fn rate_box(&self) -> &BoxSet;
    fn input_lo(&self) -> &[f64];
    fn input_hi(&self) -> &[f64];

    fn dynamics(&self, x: &[f64], u: &[f64], theta: &[f64], out: &mut [f64]);

    /// Jacobians (df/dx, df/du, df/dtheta) at an arbitrary point.
    fn dynamics_jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

    fn equilibrium_input(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// d(equilibrium input)/d(theta).
    fn equilibrium_input_jacobian(&self, theta: &[f64]) -> DMatrix<f64>;

    /// (A, B) of the linearization at the origin with the equilibrium input.
    fn linearize(&self, theta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let u = self.equilibrium_input(theta)?;
        let x = vec![0.0; self.state_dim()];
        let (fx, fu, _) = self.dynamics_jacobians(&x, &u, theta);
        Ok((fx, fu))
    }

    /// Width of the encoded state fed to the networks.
    fn enc_dim(&self) -> usize {
        self.state_dim()
    }

    /// Globally smooth state representation (identity unless overridden).
    fn encode(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    /// Row-major `enc_dim x state_dim` Jacobian of the encoder.
    fn encoder_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        let n = self.state_dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            out[i * n + i] = 1.0;
        }
    }

    /// Directional derivative of the encoder Jacobian along `dx`,
    /// row-major `enc_dim x state_dim`. Zero for affine encoders.
    fn encoder_jacobian_dot(&self, _x: &[f64], _dx: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Record the dynamics on a tape with `u` as recorded variables and
    /// `x`, `theta` as constants. Used for weight gradients of losses that
    /// contain the closed-loop vector field.
    fn taped_dynamics(&self, tape: &mut GradTape, x: &[f64], u: &[Var], theta: &[f64])
        -> Vec<Var>;

    /// Encoded coordinates of the origin.
    fn encoded_origin(&self) -> Vec<f64> {
        let x = vec![0.0; self.state_dim()];
        let mut e = vec![0.0; self.enc_dim()];
        self.encode(&x, &mut e);
        e
    }
}

/// Closed-form parameter trajectory t -> (theta(t), dtheta/dt(t)).
///
/// Each axis follows `offset + amp * cos(freq * t + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTrajectory {
    pub offset: Vec<f64>,
    pub amp: Vec<f64>,
    pub freq: Vec<f64>,
    pub phase: Vec<f64>,
}

impl ParamTrajectory {
    pub fn constant(theta: &[f64]) -> Self {
        let n = theta.len();
        Self {
            offset: theta.to_vec(),
            amp: vec![0.0; n],
            freq: vec![0.0; n],
            phase: vec![0.0; n],
        }
    }

    /// Pendulum demo schedule: theta(t) = 0.6 + 0.4 cos t.
    pub fn pendulum_demo() -> Self {
        Self {
            offset: vec![0.6],
            amp: vec![0.4],
            freq: vec![1.0],
            phase: vec![0.0],
        }
    }

    /// Quadrotor demo disturbance as printed:
    /// (2 sin(pi t), 2 cos(3/4 pi t), 2 cos(pi/2 t)). Its rate exceeds the
    /// quadrotor rate box; use [`Self::quadrotor_demo_conforming`] when the
    /// rate bound must hold.
    pub fn quadrotor_demo_printed() -> Self {
        use std::f64::consts::PI;
        Self {
            offset: vec![0.0; 3],
            amp: vec![2.0; 3],
            freq: vec![PI, 0.75 * PI, 0.5 * PI],
            phase: vec![-0.5 * PI, 0.0, 0.0],
        }
    }

    /// Same shape as the printed demo with frequencies scaled so the rate
    /// stays inside [-0.5, 0.5]^3: max |rate| = 2 * 0.25 = 0.5.
    pub fn quadrotor_demo_conforming() -> Self {
        Self {
            offset: vec![0.0; 3],
            amp: vec![2.0; 3],
            freq: vec![0.25, 0.1875, 0.125],
            phase: vec![-0.5 * std::f64::consts::PI, 0.0, 0.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let mut theta = Vec::with_capacity(self.dim());
        let mut rate = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let a = self.freq[i] * t + self.phase[i];
            theta.push(self.offset[i] + self.amp[i] * a.cos());
            rate.push(-self.amp[i] * self.freq[i] * a.sin());
        }
        (theta, rate)
    }

    /// Sampled check that theta(t) and its rate stay inside the given
    /// boxes over the horizon.
    pub fn admissible(&self, theta_box: &BoxSet, rate_box: &BoxSet, horizon: f64) -> bool {
        let steps = 2000;
        (0..=steps).all(|k| {
            let t = horizon * k as f64 / steps as f64;
            let (theta, rate) = self.eval(t);
            theta_box.contains(&theta) && rate_box.contains(&rate)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vertices_of_interval() {
        let b = BoxSet::new(vec![-0.1], vec![0.1]).unwrap();
        assert_eq!(b.vertices(), vec![vec![-0.1], vec![0.1]]);
    }

    #[test]
    fn vertices_of_cube() {
        let b = BoxSet::new(vec![-0.5; 3], vec![0.5; 3]).unwrap();
        let v = b.vertices();
        assert_eq!(v.len(), 8);
        assert_eq!(v[0], vec![-0.5, -0.5, -0.5]);
        assert_eq!(v[7], vec![0.5, 0.5, 0.5]);
        // Lexicographic: first axis most significant.
        assert_eq!(v[4], vec![0.5, -0.5, -0.5]);
    }

    #[test]
    fn degenerate_axis_halves_vertex_count() {
        let b = BoxSet::new(vec![-1.0, 0.0], vec![1.0, 0.0]).unwrap();
        let v = b.vertices();
        assert_eq!(v.len(), 2);
        assert!(v.iter().all(|p| p[1] == 0.0));
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn pendulum_demo_trajectory_is_admissible() {
        let traj = ParamTrajectory::pendulum_demo();
        let theta_box = BoxSet::new(vec![0.2], vec![1.0]).unwrap();
        let rate_box = BoxSet::new(vec![-0.5], vec![0.5]).unwrap();
        assert!(traj.admissible(&theta_box, &rate_box, 20.0));
        let (theta, rate) = traj.eval(0.0);
        assert!((theta[0] - 1.0).abs() < 1e-12);
        assert!(rate[0].abs() < 1e-12);
    }

    #[test]
    fn quadrotor_printed_rate_violates_conforming_holds() {
        let theta_box = BoxSet::new(vec![-2.0; 3], vec![2.0; 3]).unwrap();
        let rate_box = BoxSet::new(vec![-0.5; 3], vec![0.5; 3]).unwrap();
        let printed = ParamTrajectory::quadrotor_demo_printed();
        assert!(!printed.admissible(&theta_box, &rate_box, 20.0));
        let conforming = ParamTrajectory::quadrotor_demo_conforming();
        assert!(conforming.admissible(&theta_box, &rate_box, 60.0));
    }
}
