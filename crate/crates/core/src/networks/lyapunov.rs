//! Parameter-dependent Lyapunov function with a built-in quadratic floor.
//!
//! V(x, theta) = (phi' z)^2 + eps ||z||^2 with z the encoded displacement
//! from the origin and phi a network of the encoded state and parameters.
//! V is zero exactly at the origin and at least eps ||z||^2 everywhere, so
//! only the decay condition is left to training.

use crate::diff::{MlpScratch, NetworkParams};
use crate::error::{Error, Result};
use crate::systems::NpvSystem;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct LyapunovFunction {
    pub phi: NetworkParams,
    pub epsilon: f64,
}

/// Reusable buffers sized for one (system, network) pair.
#[derive(Debug, Clone)]
pub struct LyapScratch {
    pub(crate) mlp: MlpScratch,
    e: Vec<f64>,
    e0: Vec<f64>,
    pub(crate) z: Vec<f64>,
    w: Vec<f64>,
    wdot: Vec<f64>,
    zdot: Vec<f64>,
    enc_jac: Vec<f64>,
    enc_jac_dot: Vec<f64>,
    jz: Vec<f64>,
    jz_dot: Vec<f64>,
    gw: Vec<f64>,
    gw_dot: Vec<f64>,
}

impl LyapScratch {
    pub fn new(lyap: &LyapunovFunction, sys: &dyn NpvSystem) -> Self {
        let p = sys.enc_dim();
        let n = sys.state_dim();
        let d = p + sys.param_dim();
        Self {
            mlp: MlpScratch::new(&lyap.phi),
            e: vec![0.0; p],
            e0: sys.encoded_origin(),
            z: vec![0.0; p],
            w: vec![0.0; d],
            wdot: vec![0.0; d],
            zdot: vec![0.0; p],
            enc_jac: vec![0.0; p * n],
            enc_jac_dot: vec![0.0; p * n],
            jz: vec![0.0; d],
            jz_dot: vec![0.0; d],
            gw: vec![0.0; d],
            gw_dot: vec![0.0; d],
        }
    }

    /// Encode x and assemble the network input [enc(x), theta].
    fn load(&mut self, sys: &dyn NpvSystem, x: &[f64], theta: &[f64]) {
        sys.encode(x, &mut self.e);
        for (zi, (ei, oi)) in self.z.iter_mut().zip(self.e.iter().zip(&self.e0)) {
            *zi = ei - oi;
        }
        let p = self.e.len();
        self.w[..p].copy_from_slice(&self.e);
        self.w[p..].copy_from_slice(theta);
    }
}

impl LyapunovFunction {
    pub fn new(phi: NetworkParams, epsilon: f64, sys: &dyn NpvSystem) -> Result<Self> {
        if epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        phi.validate()?;
        let want_in = sys.enc_dim() + sys.param_dim();
        if phi.in_width() != want_in {
            return Err(Error::Shape {
                context: "lyapunov network input width",
                expected: want_in,
                got: phi.in_width(),
            });
        }
        if phi.out_width() != sys.enc_dim() {
            return Err(Error::Shape {
                context: "lyapunov network output width",
                expected: sys.enc_dim(),
                got: phi.out_width(),
            });
        }
        Ok(Self { phi, epsilon })
    }

    /// Squared norm of the encoded displacement at x.
    pub fn displacement_sq(&self, sys: &dyn NpvSystem, x: &[f64], s: &mut LyapScratch) -> f64 {
        sys.encode(x, &mut s.e);
        s.e.iter().zip(&s.e0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn value(&self, sys: &dyn NpvSystem, x: &[f64], theta: &[f64], s: &mut LyapScratch) -> f64 {
        s.load(sys, x, theta);
        s.mlp.forward(&self.phi, &s.w);
        let phi = s.mlp.output();
        let mut dot = 0.0;
        let mut z2 = 0.0;
        for i in 0..s.z.len() {
            dot += phi[i] * s.z[i];
            z2 += s.z[i] * s.z[i];
        }
        dot * dot + self.epsilon * z2
    }

    /// V plus its gradients with respect to the state and the parameters.
    pub fn gradients(
        &self,
        sys: &dyn NpvSystem,
        x: &[f64],
        theta: &[f64],
        s: &mut LyapScratch,
        gx: &mut [f64],
        gtheta: &mut [f64],
    ) -> f64 {
        s.load(sys, x, theta);
        s.mlp.forward(&self.phi, &s.w);
        let p = s.z.len();
        let mut dot = 0.0;
        let mut z2 = 0.0;
        for i in 0..p {
            dot += s.mlp.output()[i] * s.z[i];
            z2 += s.z[i] * s.z[i];
        }
        // grad_w (phi' z) = J' z (+ phi on the encoded part).
        {
            let LyapScratch { mlp, z, jz, .. } = s;
            mlp.backprop_input(&self.phi, z, jz);
        }
        let phi = s.mlp.output();
        for i in 0..s.gw.len() {
            let direct = if i < p { phi[i] } else { 0.0 };
            let zpart = if i < p { s.z[i] } else { 0.0 };
            s.gw[i] = 2.0 * dot * (s.jz[i] + direct) + 2.0 * self.epsilon * zpart;
        }
        // Chain through the encoder for the state part.
        sys.encoder_jacobian(x, &mut s.enc_jac);
        let n = sys.state_dim();
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..p {
                acc += s.enc_jac[i * n + j] * s.gw[i];
            }
            gx[j] = acc;
        }
        gtheta.copy_from_slice(&s.gw[p..]);
        dot * dot + self.epsilon * z2
    }

    /// Gradients together with their directional derivatives along
    /// (dx, dtheta): the Hessian-vector product needed for attack
    /// gradients of the decay condition.
    #[allow(clippy::too_many_arguments)]
    pub fn gradients_dual(
        &self,
        sys: &dyn NpvSystem,
        x: &[f64],
        theta: &[f64],
        dx: &[f64],
        dtheta: &[f64],
        s: &mut LyapScratch,
        gx: &mut [f64],
        gx_dot: &mut [f64],
        gtheta: &mut [f64],
        gtheta_dot: &mut [f64],
    ) {
        s.load(sys, x, theta);
        let p = s.z.len();
        let n = sys.state_dim();
        // Input-space seed: zdot = J_enc dx on the encoded part, dtheta after.
        sys.encoder_jacobian(x, &mut s.enc_jac);
        for i in 0..p {
            let mut acc = 0.0;
            for j in 0..n {
                acc += s.enc_jac[i * n + j] * dx[j];
            }
            s.zdot[i] = acc;
        }
        s.wdot[..p].copy_from_slice(&s.zdot);
        s.wdot[p..].copy_from_slice(dtheta);
        let seed: &[f64] = &s.wdot;
        s.mlp.forward_dual(&self.phi, &s.w, &[seed]);

        let mut dot = 0.0;
        let mut dot_t = 0.0;
        {
            let phi = s.mlp.output();
            let phi_t = s.mlp.tangent_output(0);
            for i in 0..p {
                dot += phi[i] * s.z[i];
                dot_t += phi_t[i] * s.z[i] + phi[i] * s.zdot[i];
            }
        }
        {
            let LyapScratch {
                mlp, z, zdot, jz, jz_dot, ..
            } = s;
            mlp.backprop_input_dual(&self.phi, 0, z, zdot, jz, jz_dot);
        }
        let phi = s.mlp.output();
        let phi_t = s.mlp.tangent_output(0);
        for i in 0..s.gw.len() {
            let (direct, direct_t, zpart, zpart_t) = if i < p {
                (phi[i], phi_t[i], s.z[i], s.zdot[i])
            } else {
                (0.0, 0.0, 0.0, 0.0)
            };
            let gs = s.jz[i] + direct;
            let gs_t = s.jz_dot[i] + direct_t;
            s.gw[i] = 2.0 * dot * gs + 2.0 * self.epsilon * zpart;
            s.gw_dot[i] = 2.0 * (dot_t * gs + dot * gs_t) + 2.0 * self.epsilon * zpart_t;
        }
        sys.encoder_jacobian_dot(x, dx, &mut s.enc_jac_dot);
        for j in 0..n {
            let mut acc = 0.0;
            let mut acc_dot = 0.0;
            for i in 0..p {
                acc += s.enc_jac[i * n + j] * s.gw[i];
                acc_dot +=
                    s.enc_jac_dot[i * n + j] * s.gw[i] + s.enc_jac[i * n + j] * s.gw_dot[i];
            }
            gx[j] = acc;
            gx_dot[j] = acc_dot;
        }
        gtheta.copy_from_slice(&s.gw[p..]);
        gtheta_dot.copy_from_slice(&s.gw_dot[p..]);
    }

    /// Estimate of max over the parameter box of V(x, .), by projected
    /// gradient ascent from random probes plus the box vertices (vertices
    /// only when the box has at most 4 axes). Monotone in the probes:
    /// the result is at least V(x, theta) for every probed theta.
    pub fn level_value<R: Rng>(
        &self,
        sys: &dyn NpvSystem,
        x: &[f64],
        probe_count: usize,
        ascent_steps: usize,
        rng: &mut R,
        s: &mut LyapScratch,
    ) -> f64 {
        self.level_argmax(sys, x, probe_count, ascent_steps, rng, s, &[]).0
    }

    /// As [`Self::level_value`] but also returns the maximizing parameter,
    /// and accepts extra warm-start candidates.
    #[allow(clippy::too_many_arguments)]
    pub fn level_argmax<R: Rng>(
        &self,
        sys: &dyn NpvSystem,
        x: &[f64],
        probe_count: usize,
        ascent_steps: usize,
        rng: &mut R,
        s: &mut LyapScratch,
        warm: &[&[f64]],
    ) -> (f64, Vec<f64>) {
        assert!(probe_count >= 1, "need at least one probe");
        let tb = sys.param_box();
        let d = tb.dim();
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        for w in warm {
            candidates.push(w.to_vec());
        }
        if d <= 4 {
            candidates.extend(tb.vertices());
        }
        for _ in 0..probe_count {
            candidates.push(tb.sample(rng));
        }
        let mut gx = vec![0.0; sys.state_dim()];
        let mut gt = vec![0.0; d];
        let mut best_v = f64::NEG_INFINITY;
        let mut best_theta = candidates[0].clone();
        for mut theta in candidates {
            let mut local_best = self.value(sys, x, &theta, s);
            let mut local_theta = theta.clone();
            for _ in 0..ascent_steps {
                self.gradients(sys, x, &theta, s, &mut gx, &mut gt);
                for ax in 0..d {
                    theta[ax] += 0.1 * tb.half_width(ax) * gt[ax];
                }
                tb.clamp(&mut theta);
                let v = self.value(sys, x, &theta, s);
                if v > local_best {
                    local_best = v;
                    local_theta.copy_from_slice(&theta);
                }
            }
            if local_best > best_v {
                best_v = local_best;
                best_theta = local_theta;
            }
        }
        (best_v, best_theta)
    }
}
