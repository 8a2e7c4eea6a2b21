//! Bounded parameter-dependent controller anchored at the equilibrium.
//!
//! The network head h(x, theta) has an identity output layer; the physical
//! input is
//!
//!   u = lo + (tanh(h(x,th) - h(0,th) + atanh(u_eq_normalized)) + 1)/2 * (hi - lo)
//!
//! so every output stays strictly inside the bounds (tanh image is open)
//! and the controller returns exactly the equilibrium input at the origin.
//! Saturation is applied after the anchor shift; summing pre-saturated
//! terms instead could leave the normalized range.

use crate::diff::tape::{GradTape, Var};
use crate::diff::taped::{TapedMlp, TapedParams};
use crate::diff::{MlpScratch, NetworkParams};
use crate::error::{Error, Result};
use crate::systems::NpvSystem;

/// Saturation guard on the shifted pre-activation: tanh(18) is still
/// strictly below 1 in f64, so clamping here keeps the output interval
/// open; tanh of anything larger rounds to exactly 1.
const PRE_CLAMP: f64 = 18.0;

#[derive(Debug, Clone)]
pub struct PdController {
    pub pi: NetworkParams,
    u_lo: Vec<f64>,
    u_hi: Vec<f64>,
}

/// Buffers for controller evaluation (two network passes: x and origin).
#[derive(Debug, Clone)]
pub struct CtrlScratch {
    at_x: MlpScratch,
    at_origin: MlpScratch,
    e: Vec<f64>,
    w: Vec<f64>,
    w0: Vec<f64>,
    pre: Vec<f64>,
    enc_jac: Vec<f64>,
    cot: Vec<f64>,
    hx_row: Vec<f64>,
    h0_row: Vec<f64>,
}

impl CtrlScratch {
    pub fn new(ctrl: &PdController, sys: &dyn NpvSystem) -> Self {
        let p = sys.enc_dim();
        let d = p + sys.param_dim();
        let e0 = sys.encoded_origin();
        let mut w0 = vec![0.0; d];
        w0[..p].copy_from_slice(&e0);
        Self {
            at_x: MlpScratch::new(&ctrl.pi),
            at_origin: MlpScratch::new(&ctrl.pi),
            e: vec![0.0; p],
            w: vec![0.0; d],
            w0,
            pre: vec![0.0; sys.input_dim()],
            enc_jac: vec![0.0; p * sys.state_dim()],
            cot: vec![0.0; sys.input_dim()],
            hx_row: vec![0.0; d],
            h0_row: vec![0.0; d],
        }
    }
}

impl PdController {
    /// Validates network shape and that the equilibrium input is strictly
    /// interior to the bounds across a parameter grid.
    pub fn new(pi: NetworkParams, sys: &dyn NpvSystem) -> Result<Self> {
        pi.validate()?;
        if pi.output_tanh {
            return Err(Error::Config(
                "controller head must use an identity output layer".into(),
            ));
        }
        let want_in = sys.enc_dim() + sys.param_dim();
        if pi.in_width() != want_in {
            return Err(Error::Shape {
                context: "controller network input width",
                expected: want_in,
                got: pi.in_width(),
            });
        }
        if pi.out_width() != sys.input_dim() {
            return Err(Error::Shape {
                context: "controller network output width",
                expected: sys.input_dim(),
                got: pi.out_width(),
            });
        }
        let ctrl = Self {
            pi,
            u_lo: sys.input_lo().to_vec(),
            u_hi: sys.input_hi().to_vec(),
        };
        // Interiority sweep over the parameter box.
        let tb = sys.param_box();
        let per_axis = match tb.dim() {
            1 => 101,
            2 => 21,
            _ => 9,
        };
        let count = per_axis_usize(per_axis, tb.dim());
        let mut theta = vec![0.0; tb.dim()];
        for idx in 0..count {
            let mut rem = idx;
            for ax in 0..tb.dim() {
                let k = rem % per_axis;
                rem /= per_axis;
                theta[ax] = tb.lo[ax]
                    + (tb.hi[ax] - tb.lo[ax]) * k as f64 / (per_axis - 1) as f64;
            }
            let u_eq = sys.equilibrium_input(&theta)?;
            for (i, &u) in u_eq.iter().enumerate() {
                let t = ctrl.normalized_eq(i, u);
                if !(t.abs() < 1.0 - 1e-9) {
                    return Err(Error::Config(format!(
                        "equilibrium input {u} on or outside bounds [{}, {}] at theta {theta:?}",
                        ctrl.u_lo[i], ctrl.u_hi[i]
                    )));
                }
            }
        }
        Ok(ctrl)
    }

    pub fn input_lo(&self) -> &[f64] {
        &self.u_lo
    }

    pub fn input_hi(&self) -> &[f64] {
        &self.u_hi
    }

    #[inline]
    fn normalized_eq(&self, i: usize, u_eq: f64) -> f64 {
        2.0 * (u_eq - self.u_lo[i]) / (self.u_hi[i] - self.u_lo[i]) - 1.0
    }

    /// Physical control input; strictly inside the bounds. Arithmetic
    /// order matches [`Self::taped_control`] bit for bit.
    pub fn control(
        &self,
        sys: &dyn NpvSystem,
        x: &[f64],
        theta: &[f64],
        s: &mut CtrlScratch,
        u: &mut [f64],
    ) -> Result<()> {
        let p = sys.enc_dim();
        sys.encode(x, &mut s.e);
        s.w[..p].copy_from_slice(&s.e);
        s.w[p..].copy_from_slice(theta);
        s.w0[p..].copy_from_slice(theta);
        s.at_x.forward(&self.pi, &s.w);
        s.at_origin.forward(&self.pi, &s.w0);
        let u_eq = sys.equilibrium_input(theta)?;
        for i in 0..u.len() {
            let t_eq = self.normalized_eq(i, u_eq[i]);
            let pre = s.at_x.output()[i] - s.at_origin.output()[i] + t_eq.atanh();
            s.pre[i] = pre;
            let span = self.u_hi[i] - self.u_lo[i];
            u[i] = 0.5 * span * pre.clamp(-PRE_CLAMP, PRE_CLAMP).tanh()
                + (self.u_lo[i] + 0.5 * span);
        }
        Ok(())
    }

    /// Control together with its Jacobians d u / d x and d u / d theta
    /// (row-major n_u x n and n_u x n_theta).
    #[allow(clippy::too_many_arguments)]
    pub fn control_jacobian(
        &self,
        sys: &dyn NpvSystem,
        x: &[f64],
        theta: &[f64],
        s: &mut CtrlScratch,
        u: &mut [f64],
        du_dx: &mut [f64],
        du_dtheta: &mut [f64],
    ) -> Result<()> {
        self.control(sys, x, theta, s, u)?;
        let n = sys.state_dim();
        let p = sys.enc_dim();
        let nt = sys.param_dim();
        let nu = sys.input_dim();
        sys.encoder_jacobian(x, &mut s.enc_jac);
        let du_eq = sys.equilibrium_input_jacobian(theta);
        let u_eq = sys.equilibrium_input(theta)?;
        for i in 0..nu {
            s.cot.iter_mut().for_each(|c| *c = 0.0);
            s.cot[i] = 1.0;
            {
                let CtrlScratch { at_x, cot, hx_row, .. } = s;
                at_x.backprop_input(&self.pi, cot, hx_row);
            }
            {
                let CtrlScratch {
                    at_origin, cot, h0_row, ..
                } = s;
                at_origin.backprop_input(&self.pi, cot, h0_row);
            }
            let span = self.u_hi[i] - self.u_lo[i];
            let th = s.pre[i].clamp(-PRE_CLAMP, PRE_CLAMP).tanh();
            let gate = if s.pre[i].abs() <= PRE_CLAMP { 1.0 } else { 0.0 };
            let gain = 0.5 * span * (1.0 - th * th) * gate;
            // State part: d pre / dx = dh/de * J_enc (origin pass has no x).
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..p {
                    acc += s.hx_row[k] * s.enc_jac[k * n + j];
                }
                du_dx[i * n + j] = gain * acc;
            }
            // Parameter part: head at x minus head at origin plus the
            // normalized-equilibrium shift.
            let t_eq = self.normalized_eq(i, u_eq[i]);
            for j in 0..nt {
                let shift = (2.0 / span) * du_eq[(i, j)] / (1.0 - t_eq * t_eq);
                du_dtheta[i * nt + j] =
                    gain * (s.hx_row[p + j] - s.h0_row[p + j] + shift);
            }
        }
        Ok(())
    }

    /// Record the controller on a tape: x and theta are constants, the
    /// network parameters are already-loaded leaves. Returns the input vars.
    pub fn taped_control(
        &self,
        tape: &mut GradTape,
        params: &TapedParams,
        mlp: &mut TapedMlp,
        sys: &dyn NpvSystem,
        x: &[f64],
        theta: &[f64],
    ) -> Result<Vec<Var>> {
        let p = sys.enc_dim();
        let d = p + sys.param_dim();
        let mut e = vec![0.0; p];
        sys.encode(x, &mut e);
        let mut w = vec![0.0; d];
        w[..p].copy_from_slice(&e);
        w[p..].copy_from_slice(theta);
        let e0 = sys.encoded_origin();
        let mut w0 = w.clone();
        w0[..p].copy_from_slice(&e0);
        let u_eq = sys.equilibrium_input(theta)?;

        let w_vars: Vec<Var> = w.iter().map(|&v| tape.leaf(v)).collect();
        let h_x = mlp.forward(tape, params, &self.pi, &w_vars);
        let w0_vars: Vec<Var> = w0.iter().map(|&v| tape.leaf(v)).collect();
        let h_0 = mlp.forward(tape, params, &self.pi, &w0_vars);

        let clamp_lo = tape.leaf(-PRE_CLAMP);
        let clamp_hi = tape.leaf(PRE_CLAMP);
        let mut u = Vec::with_capacity(u_eq.len());
        for i in 0..u_eq.len() {
            let t_eq = self.normalized_eq(i, u_eq[i]);
            let diff = tape.sub(h_x[i], h_0[i]);
            let pre = tape.add_const(diff, t_eq.atanh());
            let pre = tape.max(pre, clamp_lo);
            let pre = tape.min(pre, clamp_hi);
            let sat = tape.tanh(pre);
            let span = self.u_hi[i] - self.u_lo[i];
            let scaled = tape.scale(sat, 0.5 * span);
            u.push(tape.add_const(scaled, self.u_lo[i] + 0.5 * span));
        }
        Ok(u)
    }
}

fn per_axis_usize(per_axis: usize, dim: usize) -> usize {
    per_axis.pow(dim as u32)
}
