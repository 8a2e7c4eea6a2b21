//! Inverted pendulum with a scheduling parameter scaling the control
//! effectiveness of the torque actuator.
//!
//! State (angle, angular velocity); the angle is encoded as (sin, cos) for
//! a smooth global representation, so the encoded state is 3-dimensional.

use super::{BoxSet, NpvSystem};
use crate::diff::tape::{GradTape, Var};
use crate::error::Result;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumConstants {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    pub torque_limit: f64,
}

impl Default for PendulumConstants {
    fn default() -> Self {
        Self {
            mass: 0.1,
            length: 0.5,
            damping: 0.2,
            gravity: 9.81,
            torque_limit: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pendulum {
    c: PendulumConstants,
    /// gravity / length
    g_l: f64,
    /// damping / (m L^2)
    damp: f64,
    /// 1 / (m L^2)
    inv_ml2: f64,
    state_box: BoxSet,
    param_box: BoxSet,
    rate_box: BoxSet,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
}

impl Pendulum {
    pub fn new(c: PendulumConstants) -> Self {
        let ml2 = c.mass * c.length * c.length;
        Self {
            g_l: c.gravity / c.length,
            damp: c.damping / ml2,
            inv_ml2: 1.0 / ml2,
            state_box: BoxSet::new(
                vec![-std::f64::consts::PI, -6.0],
                vec![std::f64::consts::PI, 6.0],
            )
            .unwrap(),
            param_box: BoxSet::new(vec![0.2], vec![1.0]).unwrap(),
            rate_box: BoxSet::new(vec![-0.1], vec![0.1]).unwrap(),
            u_lo: vec![-c.torque_limit],
            u_hi: vec![c.torque_limit],
            c,
        }
    }

    pub fn constants(&self) -> &PendulumConstants {
        &self.c
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new(PendulumConstants::default())
    }
}

impl NpvSystem for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        1
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
        out[0] = x[1];
        out[1] = self.g_l * x[0].sin() - self.damp * x[1] + theta[0] * u[0] * self.inv_ml2;
    }

    fn dynamics_jacobians(
        &self,
        x: &[f64],
        u: &[f64],
        theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let fx = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, self.g_l * x[0].cos(), -self.damp]);
        let fu = DMatrix::from_row_slice(2, 1, &[0.0, theta[0] * self.inv_ml2]);
        let ft = DMatrix::from_row_slice(2, 1, &[0.0, u[0] * self.inv_ml2]);
        (fx, fu, ft)
    }

    fn equilibrium_input(&self, _theta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn equilibrium_input_jacobian(&self, _theta: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn enc_dim(&self) -> usize {
        3
    }

    fn encode(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[0].sin();
        out[1] = x[0].cos();
        out[2] = x[1];
    }

    fn encoder_jacobian(&self, x: &[f64], out: &mut [f64]) {
        // rows: d(sin)/dx, d(cos)/dx, d(vel)/dx over columns (angle, vel)
        out.copy_from_slice(&[x[0].cos(), 0.0, -x[0].sin(), 0.0, 0.0, 1.0]);
    }

    fn encoder_jacobian_dot(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[
            -x[0].sin() * dx[0],
            0.0,
            -x[0].cos() * dx[0],
            0.0,
            0.0,
            0.0,
        ]);
    }

    fn taped_dynamics(
        &self,
        tape: &mut GradTape,
        x: &[f64],
        u: &[Var],
        theta: &[f64],
    ) -> Vec<Var> {
        let xdot0 = tape.leaf(x[1]);
        let drift = self.g_l * x[0].sin() - self.damp * x[1];
        let forced = tape.scale(u[0], theta[0] * self.inv_ml2);
        let xdot1 = tape.add_const(forced, drift);
        vec![xdot0, xdot1]
    }
}
