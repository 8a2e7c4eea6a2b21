//! Tiny closed-form plants used by tests: scalar linear dynamics with an
//! ignored input channel, so certificate conditions can be checked by hand.

use super::{BoxSet, NpvSystem};
use crate::diff::tape::{GradTape, Var};
use crate::error::Result;
use nalgebra::DMatrix;

/// xdot = rate * x + gain * u, one state, one input, one parameter that
/// does not enter the dynamics. `gain = 0` gives the uncontrollable
/// stable/unstable stubs used in verifier tests.
#[derive(Debug, Clone)]
pub struct ScalarLinear {
    pub rate: f64,
    pub gain: f64,
    state_box: BoxSet,
    param_box: BoxSet,
    rate_box: BoxSet,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
}

impl ScalarLinear {
    pub fn new(rate: f64, gain: f64) -> Self {
        Self {
            rate,
            gain,
            state_box: BoxSet::new(vec![-2.0], vec![2.0]).unwrap(),
            param_box: BoxSet::new(vec![0.0], vec![1.0]).unwrap(),
            rate_box: BoxSet::new(vec![-0.1], vec![0.1]).unwrap(),
            u_lo: vec![-1.0],
            u_hi: vec![1.0],
        }
    }

    /// Stable drift with no control effect.
    pub fn decaying() -> Self {
        Self::new(-1.0, 0.0)
    }

    /// Unstable drift with no control effect.
    pub fn exploding() -> Self {
        Self::new(1.0, 0.0)
    }

    /// Freeze the parameter rate to zero (single rate-box vertex).
    pub fn with_frozen_rate(mut self) -> Self {
        self.rate_box = BoxSet::new(vec![0.0], vec![0.0]).unwrap();
        self
    }
}

/// Undamped harmonic oscillator with an ignored input; energy is
/// conserved exactly, which pins down integrator drift in tests.
#[derive(Debug, Clone)]
pub struct Oscillator {
    state_box: BoxSet,
    param_box: BoxSet,
    rate_box: BoxSet,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
}

impl Default for Oscillator {
    fn default() -> Self {
        Self {
            state_box: BoxSet::new(vec![-2.0; 2], vec![2.0; 2]).unwrap(),
            param_box: BoxSet::new(vec![0.0], vec![1.0]).unwrap(),
            rate_box: BoxSet::new(vec![-0.1], vec![0.1]).unwrap(),
            u_lo: vec![-1.0],
            u_hi: vec![1.0],
        }
    }
}

impl NpvSystem for Oscillator {
    fn name(&self) -> &'static str {
        "oscillator"
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

    fn dynamics(&self, x: &[f64], _u: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = -x[0];
    }

    fn dynamics_jacobians(
        &self,
        _x: &[f64],
        _u: &[f64],
        _theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
        )
    }

    fn equilibrium_input(&self, _theta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn equilibrium_input_jacobian(&self, _theta: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn taped_dynamics(
        &self,
        tape: &mut GradTape,
        x: &[f64],
        _u: &[Var],
        _theta: &[f64],
    ) -> Vec<Var> {
        vec![tape.leaf(x[1]), tape.leaf(-x[0])]
    }
}

impl NpvSystem for ScalarLinear {
    fn name(&self) -> &'static str {
        "scalar-linear"
    }

    fn state_dim(&self) -> usize {
        1
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

    fn dynamics(&self, x: &[f64], u: &[f64], _theta: &[f64], out: &mut [f64]) {
        out[0] = self.rate * x[0] + self.gain * u[0];
    }

    fn dynamics_jacobians(
        &self,
        _x: &[f64],
        _u: &[f64],
        _theta: &[f64],
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(1, 1, &[self.rate]),
            DMatrix::from_row_slice(1, 1, &[self.gain]),
            DMatrix::zeros(1, 1),
        )
    }

    fn equilibrium_input(&self, _theta: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0])
    }

    fn equilibrium_input_jacobian(&self, _theta: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(1, 1)
    }

    fn taped_dynamics(
        &self,
        tape: &mut GradTape,
        x: &[f64],
        u: &[Var],
        _theta: &[f64],
    ) -> Vec<Var> {
        let forced = tape.scale(u[0], self.gain);
        vec![tape.add_const(forced, self.rate * x[0])]
    }
}
