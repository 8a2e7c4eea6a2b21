//! Fixed-step RK4 integration of the closed loop under a parameter
//! schedule, recording states, inputs, parameters and the Lyapunov value.

use crate::error::Result;
use crate::networks::{CtrlScratch, LyapScratch, LyapunovFunction, PdController};
use crate::systems::{NpvSystem, ParamTrajectory};

/// States beyond this norm flag the trajectory as diverged.
const DIVERGENCE_NORM: f64 = 1e6;

/// Deep-settle early exit: once the state and V have been this far below
/// the reporting thresholds for `SETTLE_STEPS` consecutive steps, the
/// remaining horizon cannot change any verdict and integration stops.
const SETTLE_NORM: f64 = 1e-7;
const SETTLE_V: f64 = 1e-12;
const SETTLE_STEPS: usize = 500;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub thetas: Vec<Vec<f64>>,
    pub v_values: Vec<f64>,
    pub diverged: bool,
}

impl Trajectory {
    /// CSV with header: t, state..., input..., theta..., V.
    pub fn to_csv(&self, sys: &dyn NpvSystem) -> String {
        let mut out = String::from("t");
        for i in 0..sys.state_dim() {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..sys.input_dim() {
            out.push_str(&format!(",u{i}"));
        }
        for i in 0..sys.param_dim() {
            out.push_str(&format!(",theta{i}"));
        }
        out.push_str(",V\n");
        for k in 0..self.times.len() {
            out.push_str(&format!("{:.6}", self.times[k]));
            for v in &self.states[k] {
                out.push_str(&format!(",{:.9e}", v));
            }
            for v in &self.inputs[k] {
                out.push_str(&format!(",{:.9e}", v));
            }
            for v in &self.thetas[k] {
                out.push_str(&format!(",{:.9e}", v));
            }
            out.push_str(&format!(",{:.9e}\n", self.v_values[k]));
        }
        out
    }
}

/// Classical RK4 with the controller evaluated at every internal stage
/// using the schedule at the stage time. With `early_settle`, integration
/// stops once the state has been pinned at numerical equilibrium for a
/// sustained stretch.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    sys: &dyn NpvSystem,
    ctrl: &PdController,
    lyap: &LyapunovFunction,
    x0: &[f64],
    traj: &ParamTrajectory,
    dt: f64,
    t_final: f64,
    early_settle: bool,
) -> Result<Trajectory> {
    assert!(dt > 0.0, "step must be positive");
    assert!(t_final >= dt, "horizon must cover at least one step");
    let n = sys.state_dim();
    let nu = sys.input_dim();
    let steps = (t_final / dt).round() as usize;
    let mut cs = CtrlScratch::new(ctrl, sys);
    let mut ls = LyapScratch::new(lyap, sys);

    let mut x = x0.to_vec();
    let mut u = vec![0.0; nu];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut xs = vec![0.0; n];

    let mut out = Trajectory {
        dt,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        thetas: Vec::with_capacity(steps + 1),
        v_values: Vec::with_capacity(steps + 1),
        diverged: false,
    };

    let mut settled = 0usize;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (theta, _) = traj.eval(t);
        ctrl.control(sys, &x, &theta, &mut cs, &mut u)?;
        let v = lyap.value(sys, &x, &theta, &mut ls);
        out.times.push(t);
        out.states.push(x.clone());
        out.inputs.push(u.clone());
        out.thetas.push(theta.clone());
        out.v_values.push(v);

        let norm = x.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            out.diverged = true;
            break;
        }
        if early_settle {
            if norm < SETTLE_NORM && v < SETTLE_V {
                settled += 1;
                if settled >= SETTLE_STEPS {
                    break;
                }
            } else {
                settled = 0;
            }
        }
        if k == steps {
            break;
        }

        // Stage 1 at t (u already computed).
        sys.dynamics(&x, &u, &theta, &mut k1);
        // Stage 2 at t + dt/2.
        let (th_mid, _) = traj.eval(t + 0.5 * dt);
        for i in 0..n {
            xs[i] = x[i] + 0.5 * dt * k1[i];
        }
        ctrl.control(sys, &xs, &th_mid, &mut cs, &mut u)?;
        sys.dynamics(&xs, &u, &th_mid, &mut k2);
        // Stage 3 at t + dt/2.
        for i in 0..n {
            xs[i] = x[i] + 0.5 * dt * k2[i];
        }
        ctrl.control(sys, &xs, &th_mid, &mut cs, &mut u)?;
        sys.dynamics(&xs, &u, &th_mid, &mut k3);
        // Stage 4 at t + dt.
        let (th_end, _) = traj.eval(t + dt);
        for i in 0..n {
            xs[i] = x[i] + dt * k3[i];
        }
        ctrl.control(sys, &xs, &th_end, &mut cs, &mut u)?;
        sys.dynamics(&xs, &u, &th_end, &mut k4);

        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(out)
}
