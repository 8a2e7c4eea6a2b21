//! Quadrotor translational dynamics under a three-axis disturbance force,
//! NED convention with yaw fixed at zero.
//!
//! State (position, velocity) in the inertial frame; inputs are total
//! thrust and the roll/pitch attitude references tracked by a faster
//! inner loop. The scheduling parameter is the disturbance force vector.

use super::{BoxSet, NpvSystem};
use crate::diff::tape::{GradTape, Var};
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadrotorConstants {
    pub mass: f64,
    pub gravity: f64,
    pub thrust_max: f64,
}

impl Default for QuadrotorConstants {
    fn default() -> Self {
        Self {
            mass: 0.5,
            gravity: 9.81,
            thrust_max: 11.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Quadrotor {
    c: QuadrotorConstants,
    inv_m: f64,
    state_box: BoxSet,
    param_box: BoxSet,
    rate_box: BoxSet,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
}

impl Quadrotor {
    pub fn new(c: QuadrotorConstants) -> Self {
        Self {
            inv_m: 1.0 / c.mass,
            state_box: BoxSet::new(vec![-6.0; 6], vec![6.0; 6]).unwrap(),
            param_box: BoxSet::new(vec![-2.0; 3], vec![2.0; 3]).unwrap(),
            rate_box: BoxSet::new(vec![-0.5; 3], vec![0.5; 3]).unwrap(),
            u_lo: vec![0.0, -0.5 * PI, -PI],
            u_hi: vec![c.thrust_max, 0.5 * PI, PI],
            c,
        }
    }

    pub fn constants(&self) -> &QuadrotorConstants {
        &self.c
    }

    /// Thrust direction in the inertial frame for roll/pitch (yaw = 0):
    /// third column of Ry(pitch) Rx(roll).
    fn thrust_axis(roll: f64, pitch: f64) -> [f64; 3] {
        [
            pitch.sin() * roll.cos(),
            -roll.sin(),
            pitch.cos() * roll.cos(),
        ]
    }
}

impl Default for Quadrotor {
    fn default() -> Self {
        Self::new(QuadrotorConstants::default())
    }
}

impl NpvSystem for Quadrotor {
    fn name(&self) -> &'static str {
        "quadrotor"
    }

    fn state_dim(&self) -> usize {
        6
    }

    fn input_dim(&self) -> usize {
        3
    }

    fn param_dim(&self) -> usize {
        3
    }

    fn state_box(&self) -> &BoxSet {
        &self.state_box
    }

    fn param_box(&self) -> &BoxSet {
        &self.param_box
    }

    fn rate_box(&self) -> &BoxSet {
        &self.rate_box
    }

    fn input_lo(&self) -> &[f64] {
        &self.u_lo
    }

    fn input_hi(&self) -> &[f64] {
        &self.u_hi
    }

    fn dynamics(&self, x: &[f64], u: &[f64], theta: &[f64], out: &mut [f64]) {
        let (tau, roll, pitch) = (u[0], u[1], u[2]);
        let axis = Self::thrust_axis(roll, pitch);
        out[0] = x[3];
        out[1] = x[4];
        out[2] = x[5];
        out[3] = -tau * self.inv_m * axis[0] + theta[0] * self.inv_m;
        out[4] = -tau * self.inv_m * axis[1] + theta[1] * self.inv_m;
        out[5] = self.c.gravity - tau * self.inv_m * axis[2] + theta[2] * self.inv_m;
    }

    fn dynamics_jacobians(
        &self,
        _x: &[f64],
        u: &[f64],
        _theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (tau, roll, pitch) = (u[0], u[1], u[2]);
        let (sr, cr) = (roll.sin(), roll.cos());
        let (sp, cp) = (pitch.sin(), pitch.cos());
        let k = self.inv_m;

        let mut fx = DMatrix::zeros(6, 6);
        for i in 0..3 {
            fx[(i, 3 + i)] = 1.0;
        }

        let mut fu = DMatrix::zeros(6, 3);
        // d(accel)/d tau = -axis/m
        fu[(3, 0)] = -k * sp * cr;
        fu[(4, 0)] = k * sr;
        fu[(5, 0)] = -k * cp * cr;
        // d(accel)/d roll
        fu[(3, 1)] = tau * k * sp * sr;
        fu[(4, 1)] = tau * k * cr;
        fu[(5, 1)] = tau * k * cp * sr;
        // d(accel)/d pitch
        fu[(3, 2)] = -tau * k * cp * cr;
        fu[(4, 2)] = 0.0;
        fu[(5, 2)] = tau * k * sp * cr;

        let mut ft = DMatrix::zeros(6, 3);
        for i in 0..3 {
            ft[(3 + i, i)] = k;
        }
        (fx, fu, ft)
    }

    fn equilibrium_input(&self, theta: &[f64]) -> Result<Vec<f64>> {
        // Thrust must cancel gravity plus the disturbance:
        // tau * axis = m g e3 + theta.
        let w = [
            theta[0],
            theta[1],
            self.c.mass * self.c.gravity + theta[2],
        ];
        let tau = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        if tau <= 1e-9 || tau >= self.c.thrust_max {
            return Err(Error::Config(format!(
                "equilibrium thrust {tau:.3} N outside (0, {}) for disturbance {theta:?}",
                self.c.thrust_max
            )));
        }
        let roll = (-w[1] / tau).asin();
        let pitch = w[0].atan2(w[2]);
        if !(self.u_lo[1] < roll && roll < self.u_hi[1]) {
            return Err(Error::Config(format!(
                "equilibrium roll {roll:.3} rad outside attitude limits"
            )));
        }
        if !(self.u_lo[2] < pitch && pitch < self.u_hi[2]) {
            return Err(Error::Config(format!(
                "equilibrium pitch {pitch:.3} rad outside attitude limits"
            )));
        }
        Ok(vec![tau, roll, pitch])
    }

    fn equilibrium_input_jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        let w = [
            theta[0],
            theta[1],
            self.c.mass * self.c.gravity + theta[2],
        ];
        let tau = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        // s^2 = w0^2 + w2^2 (horizontal-vertical plane norm without w1)
        let s2 = w[0] * w[0] + w[2] * w[2];
        let s = s2.sqrt();
        let t2 = tau * tau;
        let mut j = DMatrix::zeros(3, 3);
        // d tau / d theta = w / tau
        j[(0, 0)] = w[0] / tau;
        j[(0, 1)] = w[1] / tau;
        j[(0, 2)] = w[2] / tau;
        // roll = asin(-w1 / tau)
        j[(1, 0)] = w[1] * w[0] / (t2 * s);
        j[(1, 1)] = -s / t2;
        j[(1, 2)] = w[1] * w[2] / (t2 * s);
        // pitch = atan2(w0, w2)
        j[(2, 0)] = w[2] / s2;
        j[(2, 1)] = 0.0;
        j[(2, 2)] = -w[0] / s2;
        j
    }

    fn taped_dynamics(
        &self,
        tape: &mut GradTape,
        x: &[f64],
        u: &[Var],
        theta: &[f64],
    ) -> Vec<Var> {
        let k = self.inv_m;
        let v: Vec<Var> = (3..6).map(|i| tape.leaf(x[i])).collect();
        let sr = tape.sin(u[1]);
        let cr = tape.cos(u[1]);
        let sp = tape.sin(u[2]);
        let cp = tape.cos(u[2]);
        // ax = -tau/m * sp*cr + tx/m
        let sp_cr = tape.mul(sp, cr);
        let t1 = tape.mul(u[0], sp_cr);
        let t1 = tape.scale(t1, -k);
        let ax = tape.add_const(t1, theta[0] * k);
        // ay = tau/m * sr + ty/m
        let t2 = tape.mul(u[0], sr);
        let t2 = tape.scale(t2, k);
        let ay = tape.add_const(t2, theta[1] * k);
        // az = g - tau/m * cp*cr + tz/m
        let cp_cr = tape.mul(cp, cr);
        let t3 = tape.mul(u[0], cp_cr);
        let t3 = tape.scale(t3, -k);
        let az = tape.add_const(t3, self.c.gravity + theta[2] * k);
        vec![v[0], v[1], v[2], ax, ay, az]
    }
}
