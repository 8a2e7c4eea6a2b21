//! Closed-loop evaluation: the time derivative of the Lyapunov function
//! along the controlled dynamics, its gradients with respect to the
//! attacked point, and tape recordings of the same quantities for weight
//! gradients.
//!
//! With d = (f(x, u(x,th), th), th_rate), the derivative is
//! Vdot = <grad_x V, f> + <grad_th V, th_rate>. Its gradient in (x, th)
//! splits into a Hessian-vector product along d plus a correction through
//! the (x, th)-dependence of the vector field and the controller.

use super::controller::{CtrlScratch, PdController};
use super::lyapunov::{LyapScratch, LyapunovFunction};
use crate::diff::tape::{GradTape, Var};
use crate::diff::taped::{TapedMlp, TapedParams};
use crate::error::Result;
use crate::systems::NpvSystem;

/// Reduction of the per-vertex decay values inside the attack objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Sum over the rate-box vertices (training adversary).
    SumVertices,
    /// Worst single vertex (verification adversary).
    WorstVertex,
}

pub struct ClosedLoop<'a> {
    pub sys: &'a dyn NpvSystem,
    pub lyap: &'a LyapunovFunction,
    pub ctrl: &'a PdController,
    /// Vertices of the rate box, canonical order.
    pub vertices: Vec<Vec<f64>>,
    vertex_sum: Vec<f64>,
}

/// Buffers for closed-loop evaluation at one sample.
pub struct ClScratch {
    pub lyap: LyapScratch,
    pub ctrl: CtrlScratch,
    u: Vec<f64>,
    xdot: Vec<f64>,
    gx: Vec<f64>,
    gt: Vec<f64>,
    gx_dot: Vec<f64>,
    gt_dot: Vec<f64>,
    du_dx: Vec<f64>,
    du_dt: Vec<f64>,
    dir_x: Vec<f64>,
    dir_t: Vec<f64>,
    fu_q: Vec<f64>,
    enc_jac: Vec<f64>,
    pub vdot: Vec<f64>,
}

impl ClScratch {
    pub fn new(cl: &ClosedLoop) -> Self {
        let n = cl.sys.state_dim();
        let nu = cl.sys.input_dim();
        let nt = cl.sys.param_dim();
        Self {
            lyap: LyapScratch::new(cl.lyap, cl.sys),
            ctrl: CtrlScratch::new(cl.ctrl, cl.sys),
            u: vec![0.0; nu],
            xdot: vec![0.0; n],
            gx: vec![0.0; n],
            gt: vec![0.0; nt],
            gx_dot: vec![0.0; n],
            gt_dot: vec![0.0; nt],
            du_dx: vec![0.0; nu * n],
            du_dt: vec![0.0; nu * nt],
            dir_x: vec![0.0; n],
            dir_t: vec![0.0; nt],
            fu_q: vec![0.0; nu],
            enc_jac: vec![0.0; cl.sys.enc_dim() * n],
            vdot: vec![0.0; cl.vertices.len()],
        }
    }
}

impl<'a> ClosedLoop<'a> {
    pub fn new(
        sys: &'a dyn NpvSystem,
        lyap: &'a LyapunovFunction,
        ctrl: &'a PdController,
    ) -> Self {
        let vertices = sys.rate_box().vertices();
        let nt = sys.param_dim();
        let mut vertex_sum = vec![0.0; nt];
        for v in &vertices {
            for (s, &c) in vertex_sum.iter_mut().zip(v) {
                *s += c;
            }
        }
        Self {
            sys,
            lyap,
            ctrl,
            vertices,
            vertex_sum,
        }
    }

    /// Vdot at one rate vector; affine in the rate.
    pub fn lyapunov_derivative(
        &self,
        x: &[f64],
        theta: &[f64],
        theta_rate: &[f64],
        s: &mut ClScratch,
    ) -> Result<f64> {
        self.ctrl.control(self.sys, x, theta, &mut s.ctrl, &mut s.u)?;
        self.sys.dynamics(x, &s.u, theta, &mut s.xdot);
        self.lyap
            .gradients(self.sys, x, theta, &mut s.lyap, &mut s.gx, &mut s.gt);
        let drift: f64 = s.gx.iter().zip(&s.xdot).map(|(a, b)| a * b).sum();
        let rate: f64 = s.gt.iter().zip(theta_rate).map(|(a, b)| a * b).sum();
        Ok(drift + rate)
    }

    /// Vdot at every rate-box vertex, stored in `s.vdot`. Returns the
    /// squared encoded displacement as a byproduct.
    pub fn vdot_vertices(&self, x: &[f64], theta: &[f64], s: &mut ClScratch) -> Result<f64> {
        self.ctrl.control(self.sys, x, theta, &mut s.ctrl, &mut s.u)?;
        self.sys.dynamics(x, &s.u, theta, &mut s.xdot);
        self.lyap
            .gradients(self.sys, x, theta, &mut s.lyap, &mut s.gx, &mut s.gt);
        let drift: f64 = s.gx.iter().zip(&s.xdot).map(|(a, b)| a * b).sum();
        for (out, v) in s.vdot.iter_mut().zip(&self.vertices) {
            let rate: f64 = s.gt.iter().zip(v).map(|(a, b)| a * b).sum();
            *out = drift + rate;
        }
        Ok(self.lyap.displacement_sq(self.sys, x, &mut s.lyap))
    }

    /// Decay-condition residual max over vertices: vdot + k_decay ||z||^2.
    pub fn worst_vertex_residual(
        &self,
        x: &[f64],
        theta: &[f64],
        k_decay: f64,
        s: &mut ClScratch,
    ) -> Result<(f64, usize)> {
        let z2 = self.vdot_vertices(x, theta, s)?;
        let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
        for (i, &v) in s.vdot.iter().enumerate() {
            if v > best {
                best = v;
                arg = i;
            }
        }
        Ok((best + k_decay * z2, arg))
    }

    /// Vertex-sum attack objective: sum_v vdot_v + k_decay ||z||^2.
    pub fn vertex_sum_objective(
        &self,
        x: &[f64],
        theta: &[f64],
        k_decay: f64,
        s: &mut ClScratch,
    ) -> Result<f64> {
        let z2 = self.vdot_vertices(x, theta, s)?;
        Ok(s.vdot.iter().sum::<f64>() + k_decay * z2)
    }

    /// Objective value and its gradient with respect to (x, theta).
    #[allow(clippy::too_many_arguments)]
    pub fn attack_gradient(
        &self,
        x: &[f64],
        theta: &[f64],
        k_decay: f64,
        mode: AttackMode,
        s: &mut ClScratch,
        grad_x: &mut [f64],
        grad_theta: &mut [f64],
    ) -> Result<f64> {
        let n = self.sys.state_dim();
        let nt = self.sys.param_dim();
        let nu = self.sys.input_dim();
        self.ctrl.control_jacobian(
            self.sys, x, theta, &mut s.ctrl, &mut s.u, &mut s.du_dx, &mut s.du_dt,
        )?;
        self.sys.dynamics(x, &s.u, theta, &mut s.xdot);
        let (fx, fu, ft) = self.sys.dynamics_jacobians(x, &s.u, theta);

        // Direction of the Hessian-vector product and the multiplier on
        // the drift correction.
        let value;
        let z2;
        let scale: f64;
        match mode {
            AttackMode::SumVertices => {
                scale = self.vertices.len() as f64;
                for (d, &xd) in s.dir_x.iter_mut().zip(&s.xdot) {
                    *d = scale * xd;
                }
                s.dir_t.copy_from_slice(&self.vertex_sum);
                let (dir_x, dir_t) = (s.dir_x.clone(), s.dir_t.clone());
                self.lyap.gradients_dual(
                    self.sys, x, theta, &dir_x, &dir_t, &mut s.lyap, &mut s.gx,
                    &mut s.gx_dot, &mut s.gt, &mut s.gt_dot,
                );
                let drift: f64 = s.gx.iter().zip(&s.xdot).map(|(a, b)| a * b).sum();
                let rate: f64 = s.gt.iter().zip(&self.vertex_sum).map(|(a, b)| a * b).sum();
                z2 = self.lyap.displacement_sq(self.sys, x, &mut s.lyap);
                value = scale * drift + rate + k_decay * z2;
            }
            AttackMode::WorstVertex => {
                scale = 1.0;
                z2 = self.vdot_vertices(x, theta, s)?;
                let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
                for (i, &v) in s.vdot.iter().enumerate() {
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                value = best + k_decay * z2;
                s.dir_x.copy_from_slice(&s.xdot);
                s.dir_t.copy_from_slice(&self.vertices[arg]);
                let (dir_x, dir_t) = (s.dir_x.clone(), s.dir_t.clone());
                self.lyap.gradients_dual(
                    self.sys, x, theta, &dir_x, &dir_t, &mut s.lyap, &mut s.gx,
                    &mut s.gx_dot, &mut s.gt, &mut s.gt_dot,
                );
            }
        }

        // Correction through the vector field: scale * (d xdot / d .)' grad_x V
        // with d xdot/dx = fx + fu du/dx and d xdot/dth = ft + fu du/dth.
        for k in 0..nu {
            let mut acc = 0.0;
            for i in 0..n {
                acc += fu[(i, k)] * s.gx[i];
            }
            s.fu_q[k] = acc;
        }
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += fx[(i, j)] * s.gx[i];
            }
            for k in 0..nu {
                acc += s.fu_q[k] * s.du_dx[k * n + j];
            }
            grad_x[j] = s.gx_dot[j] + scale * acc;
        }
        for j in 0..nt {
            let mut acc = 0.0;
            for i in 0..n {
                acc += ft[(i, j)] * s.gx[i];
            }
            for k in 0..nu {
                acc += s.fu_q[k] * s.du_dt[k * nt + j];
            }
            grad_theta[j] = s.gt_dot[j] + scale * acc;
        }

        // Quadratic-floor term: grad_x k ||z||^2 = 2 k J_enc' z.
        let p = self.sys.enc_dim();
        self.sys.encoder_jacobian(x, &mut s.enc_jac);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..p {
                acc += s.enc_jac[i * n + j] * s.lyap.z[i];
            }
            grad_x[j] += 2.0 * k_decay * acc;
        }
        Ok(value)
    }
}

/// Tape leaves for both networks; gradients concatenate as [phi | pi].
pub struct TapedNets {
    pub phi: TapedParams,
    pub pi: TapedParams,
}

impl TapedNets {
    pub fn load(tape: &mut GradTape, lyap: &LyapunovFunction, ctrl: &PdController) -> Self {
        Self {
            phi: TapedParams::load(tape, &lyap.phi),
            pi: TapedParams::load(tape, &ctrl.pi),
        }
    }

    pub fn param_count(&self) -> usize {
        self.phi.param_count() + self.pi.param_count()
    }

    /// Gather both gradients after a backward sweep.
    pub fn gradient(&self, tape: &GradTape, out: &mut [f64]) -> Result<()> {
        let np = self.phi.param_count();
        self.phi.gradient(tape, &mut out[..np])?;
        self.pi.gradient(tape, &mut out[np..])?;
        Ok(())
    }
}

/// Recorded quantities of one training sample.
pub struct SampleGraph {
    /// Vdot at each rate-box vertex.
    pub vdots: Vec<Var>,
    /// V(x, theta) as recorded.
    pub value: Var,
    /// Squared encoded displacement (constant).
    pub disp_sq: f64,
}

/// Reusable buffers for recording sample graphs.
#[derive(Default)]
pub struct GraphScratch {
    phi_mlp: TapedMlp,
    pi_mlp: TapedMlp,
}

impl GraphScratch {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<'a> ClosedLoop<'a> {
    /// Record V, and Vdot at every vertex, for one sample. The returned
    /// vars depend on both networks' parameter leaves, including through
    /// the input-derivative channels, so a reverse sweep yields the full
    /// mixed weight gradient.
    pub fn record_sample(
        &self,
        tape: &mut GradTape,
        nets: &TapedNets,
        gs: &mut GraphScratch,
        x: &[f64],
        theta: &[f64],
    ) -> Result<SampleGraph> {
        let sys = self.sys;
        let p = sys.enc_dim();
        let n = sys.state_dim();
        let nt = sys.param_dim();

        // Controller and closed-loop vector field on tape.
        let u = self
            .ctrl
            .taped_control(tape, &nets.pi, &mut gs.pi_mlp, sys, x, theta)?;
        let xdot = sys.taped_dynamics(tape, x, &u, theta);

        // Constants of the V computation.
        let mut e = vec![0.0; p];
        sys.encode(x, &mut e);
        let e0 = sys.encoded_origin();
        let z: Vec<f64> = e.iter().zip(&e0).map(|(a, b)| a - b).collect();
        let z2: f64 = z.iter().map(|v| v * v).sum();
        let mut enc_jac = vec![0.0; p * n];
        sys.encoder_jacobian(x, &mut enc_jac);

        let mut w_vars: Vec<Var> = Vec::with_capacity(p + nt);
        for &v in e.iter().chain(theta) {
            w_vars.push(tape.leaf(v));
        }

        // Channel 0: direction (xdot through the encoder, zero on theta).
        // Channels 1..: canonical parameter directions.
        let one = tape.leaf(1.0);
        let mut seeds: Vec<Vec<Option<Var>>> = Vec::with_capacity(1 + nt);
        let mut ch0: Vec<Option<Var>> = vec![None; p + nt];
        let mut zdot_vars: Vec<Option<Var>> = vec![None; p];
        for i in 0..p {
            let mut acc: Option<Var> = None;
            for j in 0..n {
                let c = enc_jac[i * n + j];
                if c != 0.0 {
                    let term = tape.scale(xdot[j], c);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term),
                        None => term,
                    });
                }
            }
            ch0[i] = acc;
            zdot_vars[i] = acc;
        }
        seeds.push(ch0);
        for c in 0..nt {
            let mut seed: Vec<Option<Var>> = vec![None; p + nt];
            seed[p + c] = Some(one);
            seeds.push(seed);
        }

        let (phi, phi_dots) =
            gs.phi_mlp
                .forward_dual(tape, &nets.phi, &self.lyap.phi, &w_vars, &seeds);

        // s = phi' z and its directional derivatives.
        let dot_with_z = |tape: &mut GradTape, vs: &[Var]| -> Var {
            let mut acc: Option<Var> = None;
            for (i, &v) in vs.iter().enumerate() {
                let term = tape.scale(v, z[i]);
                acc = Some(match acc {
                    Some(a) => tape.add(a, term),
                    None => term,
                });
            }
            acc.expect("nonempty output")
        };
        let s_var = dot_with_z(tape, &phi);
        // sdot_0 = phi_dot_0' z + phi' zdot.
        let mut sdot0 = dot_with_z(tape, &phi_dots[0]);
        for i in 0..p {
            if let Some(zd) = zdot_vars[i] {
                let term = tape.mul(phi[i], zd);
                sdot0 = tape.add(sdot0, term);
            }
        }
        // dv_x = 2 s sdot_0 + 2 eps z' zdot.
        let s_sdot0 = tape.mul(s_var, sdot0);
        let mut dv_x = tape.scale(s_sdot0, 2.0);
        for i in 0..p {
            if let Some(zd) = zdot_vars[i] {
                let term = tape.scale(zd, 2.0 * self.lyap.epsilon * z[i]);
                dv_x = tape.add(dv_x, term);
            }
        }
        // dv_theta_c = 2 s sdot_c (the floor term does not see theta).
        let mut dv_t = Vec::with_capacity(nt);
        for c in 0..nt {
            let sd = dot_with_z(tape, &phi_dots[1 + c]);
            let prod = tape.mul(s_var, sd);
            dv_t.push(tape.scale(prod, 2.0));
        }

        let mut vdots = Vec::with_capacity(self.vertices.len());
        for v in &self.vertices {
            let mut acc = dv_x;
            for (c, &rate) in v.iter().enumerate() {
                if rate != 0.0 {
                    let term = tape.scale(dv_t[c], rate);
                    acc = tape.add(acc, term);
                }
            }
            vdots.push(acc);
        }

        let s_sq = tape.mul(s_var, s_var);
        let value = tape.add_const(s_sq, self.lyap.epsilon * z2);
        Ok(SampleGraph {
            vdots,
            value,
            disp_sq: z2,
        })
    }

    /// Record V(x, theta) only (no derivative channels); used for the
    /// level-set terms where the maximizing parameter is held fixed.
    pub fn record_value(
        &self,
        tape: &mut GradTape,
        nets: &TapedNets,
        gs: &mut GraphScratch,
        x: &[f64],
        theta: &[f64],
    ) -> Var {
        let sys = self.sys;
        let p = sys.enc_dim();
        let mut e = vec![0.0; p];
        sys.encode(x, &mut e);
        let e0 = sys.encoded_origin();
        let z: Vec<f64> = e.iter().zip(&e0).map(|(a, b)| a - b).collect();
        let z2: f64 = z.iter().map(|v| v * v).sum();
        let mut w_vars: Vec<Var> = Vec::with_capacity(p + sys.param_dim());
        for &v in e.iter().chain(theta) {
            w_vars.push(tape.leaf(v));
        }
        let phi = gs.phi_mlp.forward(tape, &nets.phi, &self.lyap.phi, &w_vars);
        let mut acc: Option<Var> = None;
        for (i, &v) in phi.iter().enumerate() {
            let term = tape.scale(v, z[i]);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let s_var = acc.expect("nonempty output");
        let s_sq = tape.mul(s_var, s_var);
        tape.add_const(s_sq, self.lyap.epsilon * z2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::NetworkParams;
    use crate::systems::synthetic::ScalarLinear;
    use crate::systems::{Pendulum, Quadrotor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pend_setup(seed: u64) -> (Pendulum, LyapunovFunction, PdController) {
        let sys = Pendulum::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = NetworkParams::random(&[4, 8, 8, 3], true, &mut rng);
        let pi = NetworkParams::random(&[4, 8, 8, 1], false, &mut rng);
        let lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
        let ctrl = PdController::new(pi, &sys).unwrap();
        (sys, lyap, ctrl)
    }

    #[test]
    fn zero_rate_leaves_drift_term() {
        let (sys, lyap, ctrl) = pend_setup(1);
        let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
        let mut s = ClScratch::new(&cl);
        let x = [0.8, -1.0];
        let th = [0.5];
        let v0 = cl.lyapunov_derivative(&x, &th, &[0.0], &mut s).unwrap();
        let v1 = cl.lyapunov_derivative(&x, &th, &[0.1], &mut s).unwrap();
        let v2 = cl.lyapunov_derivative(&x, &th, &[-0.1], &mut s).unwrap();
        // Affine in the rate, symmetric around the drift value.
        assert!((0.5 * (v1 + v2) - v0).abs() < 1e-12);
    }

    #[test]
    fn affine_in_rate() {
        let (sys, lyap, ctrl) = pend_setup(2);
        let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
        let mut s = ClScratch::new(&cl);
        let x = [1.5, 2.0];
        let th = [0.3];
        let a = cl.lyapunov_derivative(&x, &th, &[0.07], &mut s).unwrap();
        let b = cl.lyapunov_derivative(&x, &th, &[-0.03], &mut s).unwrap();
        let mid = cl.lyapunov_derivative(&x, &th, &[0.02], &mut s).unwrap();
        assert!((mid - 0.5 * (a + b)).abs() < 1e-12);
    }

    #[test]
    fn hand_system_decay() {
        // xdot = -x ignoring control, V = eps x^2: Vdot = -2 eps x^2.
        let sys = ScalarLinear::decaying();
        let phi = NetworkParams::zeros(&[2, 3, 1], true);
        let pi = NetworkParams::zeros(&[2, 3, 1], false);
        let lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
        let ctrl = PdController::new(pi, &sys).unwrap();
        let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
        let mut s = ClScratch::new(&cl);
        for &x in &[0.5, -1.2, 1.9] {
            let v = cl.lyapunov_derivative(&[x], &[0.5], &[0.0], &mut s).unwrap();
            assert!((v - (-2.0 * 1e-2 * x * x)).abs() < 1e-14, "vdot {v}");
        }
    }

    #[test]
    fn rate_box_vertices_dominate_interior() {
        let (sys, lyap, ctrl) = pend_setup(3);
        let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
        let mut s = ClScratch::new(&cl);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let x = sys.state_box().sample(&mut rng);
            let th = sys.param_box().sample(&mut rng);
            let rate = sys.rate_box().sample(&mut rng);
            let interior = cl.lyapunov_derivative(&x, &th, &rate, &mut s).unwrap();
            cl.vdot_vertices(&x, &th, &mut s).unwrap();
            let worst = s.vdot.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(interior <= worst + 1e-9);
        }
    }

    #[test]
    fn attack_gradient_matches_finite_differences() {
        for (mode, seed) in [(AttackMode::SumVertices, 5u64), (AttackMode::WorstVertex, 6)] {
            let (sys, lyap, ctrl) = pend_setup(seed);
            let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
            let mut s = ClScratch::new(&cl);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let k3 = 0.1;
            let objective = |cl: &ClosedLoop, x: &[f64], th: &[f64], s: &mut ClScratch| match mode
            {
                AttackMode::SumVertices => cl.vertex_sum_objective(x, th, k3, s).unwrap(),
                AttackMode::WorstVertex => cl.worst_vertex_residual(x, th, k3, s).unwrap().0,
            };
            for _ in 0..15 {
                let x = sys.state_box().sample(&mut rng);
                let th = sys.param_box().sample(&mut rng);
                let mut gx = [0.0; 2];
                let mut gt = [0.0; 1];
                let val = cl
                    .attack_gradient(&x, &th, k3, mode, &mut s, &mut gx, &mut gt)
                    .unwrap();
                assert!((val - objective(&cl, &x, &th, &mut s)).abs() < 1e-10);
                let h = 1e-6;
                for j in 0..2 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += h;
                    xm[j] -= h;
                    let fd =
                        (objective(&cl, &xp, &th, &mut s) - objective(&cl, &xm, &th, &mut s))
                            / (2.0 * h);
                    assert!(
                        (gx[j] - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                        "{mode:?} gx[{j}]: {} vs {fd}",
                        gx[j]
                    );
                }
                let fd = (objective(&cl, &x, &[th[0] + h], &mut s)
                    - objective(&cl, &x, &[th[0] - h], &mut s))
                    / (2.0 * h);
                assert!(
                    (gt[0] - fd).abs() <= 1e-4 * (1.0 + fd.abs()),
                    "{mode:?} gt: {} vs {fd}",
                    gt[0]
                );
            }
        }
    }

    #[test]
    fn quadrotor_attack_gradient_matches_finite_differences() {
        let sys = Quadrotor::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let phi = NetworkParams::random(&[9, 8, 8, 6], true, &mut rng);
        let pi = NetworkParams::random(&[9, 8, 8, 3], false, &mut rng);
        let lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
        let ctrl = PdController::new(pi, &sys).unwrap();
        let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
        let mut s = ClScratch::new(&cl);
        let k3 = 0.1;
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let th: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut gx = [0.0; 6];
        let mut gt = [0.0; 3];
        cl.attack_gradient(&x, &th, k3, AttackMode::SumVertices, &mut s, &mut gx, &mut gt)
            .unwrap();
        let h = 1e-5;
        for j in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = cl.vertex_sum_objective(&xp, &th, k3, &mut s).unwrap();
            let fm = cl.vertex_sum_objective(&xm, &th, k3, &mut s).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((gx[j] - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "gx[{j}]");
        }
        for j in 0..3 {
            let mut tp = th.clone();
            let mut tm = th.clone();
            tp[j] += h;
            tm[j] -= h;
            let fp = cl.vertex_sum_objective(&x, &tp, k3, &mut s).unwrap();
            let fm = cl.vertex_sum_objective(&x, &tm, k3, &mut s).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((gt[j] - fd).abs() <= 1e-4 * (1.0 + fd.abs()), "gt[{j}]");
        }
    }

    #[test]
    fn recorded_sample_matches_fused_values() {
        let (sys, lyap, ctrl) = pend_setup(8);
        let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
        let mut s = ClScratch::new(&cl);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = GradTape::new();
        let mut gs = GraphScratch::new();
        for _ in 0..10 {
            let x = sys.state_box().sample(&mut rng);
            let th = sys.param_box().sample(&mut rng);
            tape.clear();
            let nets = TapedNets::load(&mut tape, &lyap, &ctrl);
            let g = cl.record_sample(&mut tape, &nets, &mut gs, &x, &th).unwrap();
            let z2 = cl.vdot_vertices(&x, &th, &mut s).unwrap();
            assert!((g.disp_sq - z2).abs() < 1e-15);
            for (i, &vd) in g.vdots.iter().enumerate() {
                let fused = s.vdot[i];
                let taped = tape.val(vd);
                assert!(
                    (fused - taped).abs() <= 1e-10 * (1.0 + fused.abs()),
                    "vertex {i}: fused {fused} vs taped {taped}"
                );
            }
            let mut ls = LyapScratch::new(&lyap, &sys);
            let v = lyap.value(&sys, &x, &th, &mut ls);
            assert_eq!(tape.val(g.value).to_bits(), v.to_bits());
        }
    }

    #[test]
    fn recorded_sample_weight_gradient_matches_finite_differences() {
        // Full mixed-derivative check through the closed loop: the loss is
        // the worst-vertex residual hinge, exactly what training descends.
        let sys = Pendulum::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let phi = NetworkParams::random(&[4, 6, 3], true, &mut rng);
        let pi = NetworkParams::random(&[4, 6, 1], false, &mut rng);
        let mut lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
        let mut ctrl = PdController::new(pi, &sys).unwrap();
        let samples: Vec<(Vec<f64>, Vec<f64>)> = (0..10)
            .map(|_| {
                (
                    sys.state_box().sample(&mut rng),
                    sys.param_box().sample(&mut rng),
                )
            })
            .collect();
        let k3 = 0.1;

        let loss_fn = |lyap: &LyapunovFunction, ctrl: &PdController| -> f64 {
            let cl = ClosedLoop::new(&sys, lyap, ctrl);
            let mut s = ClScratch::new(&cl);
            let mut acc = 0.0;
            for (x, th) in &samples {
                let z2 = cl.vdot_vertices(x, th, &mut s).unwrap();
                for &vd in s.vdot.iter() {
                    acc += (vd + k3 * z2).max(0.0);
                }
            }
            acc / samples.len() as f64
        };

        // Taped loss and gradient.
        let mut tape = GradTape::new();
        let nets = TapedNets::load(&mut tape, &lyap, &ctrl);
        let mut gs = GraphScratch::new();
        let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
        let mut terms = Vec::new();
        for (x, th) in &samples {
            let g = cl.record_sample(&mut tape, &nets, &mut gs, x, th).unwrap();
            for &vd in &g.vdots {
                let shifted = tape.add_const(vd, k3 * g.disp_sq);
                terms.push(tape.relu(shifted));
            }
        }
        let total = tape.sum(&terms);
        let loss = tape.scale(total, 1.0 / samples.len() as f64);
        tape.backward(loss);
        let mut grad = vec![0.0; nets.param_count()];
        nets.gradient(&tape, &mut grad).unwrap();
        assert!((tape.val(loss) - loss_fn(&lyap, &ctrl)).abs() < 1e-10);

        // Weight finite differences across both networks.
        let np = lyap.phi.param_count();
        let h = 1e-4;
        let mut flat = Vec::new();
        lyap.phi.append_flat(&mut flat);
        ctrl.pi.append_flat(&mut flat);
        let mut worst = 0.0_f64;
        // Probe a spread of parameters rather than all ~100: every 7th.
        for pidx in (0..flat.len()).step_by(7) {
            let keep = flat[pidx];
            flat[pidx] = keep + h;
            set_both(&mut lyap, &mut ctrl, &flat, np);
            let fp = loss_fn(&lyap, &ctrl);
            flat[pidx] = keep - h;
            set_both(&mut lyap, &mut ctrl, &flat, np);
            let fm = loss_fn(&lyap, &ctrl);
            flat[pidx] = keep;
            set_both(&mut lyap, &mut ctrl, &flat, np);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad[pidx] - fd).abs() / (grad[pidx].abs() + h);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "loss weight-gradient FD error {worst}");
    }

    fn set_both(lyap: &mut LyapunovFunction, ctrl: &mut PdController, flat: &[f64], np: usize) {
        lyap.phi.set_from_flat(&flat[..np]);
        ctrl.pi.set_from_flat(&flat[np..]);
    }
}
