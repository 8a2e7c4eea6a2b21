//! Continuous algebraic Riccati solver and the gain schedule built on it.
//!
//! The stabilizing solution is obtained by integrating the differential
//! Riccati equation dP/ds = A'P + PA - P B R^-1 B' P + Q from P(0) = Q
//! with fixed-step RK4 until the derivative norm drops below 1e-10. For
//! PSD terminal conditions on stabilizable pairs this converges
//! monotonically to the stabilizing fixed point at these dimensions.

use super::NpvSystem;
use crate::error::{Error, Result};
use nalgebra::DMatrix;

const RK4_STEP: f64 = 1e-3;
const DERIV_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-6;
const MAX_STEPS: usize = 2_000_000;

fn riccati_rhs(
    a_t: &DMatrix<f64>,
    a: &DMatrix<f64>,
    gain_core: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    a_t * p + p * a - p * gain_core * p + q
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Largest real part over the eigenvalues of a square matrix.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|c| c.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solve A'P + PA - P B R^-1 B' P + Q = 0 for the stabilizing P and the
/// state-feedback gain K = R^-1 B' P.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "A must be square");
    assert_eq!(b.nrows(), n, "B row count must match A");
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Solver("input weight R is singular".into()))?;
    let gain_core = b * &r_inv * b.transpose();
    let a_t = a.transpose();

    let mut p = q.clone();
    let h = RK4_STEP;
    let mut converged = false;
    for _ in 0..MAX_STEPS {
        let k1 = riccati_rhs(&a_t, a, &gain_core, q, &p);
        if inf_norm(&k1) < DERIV_TOL {
            converged = true;
            break;
        }
        let k2 = riccati_rhs(&a_t, a, &gain_core, q, &(&p + &k1 * (h / 2.0)));
        let k3 = riccati_rhs(&a_t, a, &gain_core, q, &(&p + &k2 * (h / 2.0)));
        let k4 = riccati_rhs(&a_t, a, &gain_core, q, &(&p + &k3 * h));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver("Riccati integration blew up".into()));
        }
    }
    if !converged {
        return Err(Error::Solver(format!(
            "Riccati integration did not converge within {MAX_STEPS} steps"
        )));
    }
    // Symmetrize away integration drift.
    p = (&p + p.transpose()) * 0.5;
    let residual = inf_norm(&riccati_rhs(&a_t, a, &gain_core, q, &p));
    if residual > RESIDUAL_TOL {
        return Err(Error::Solver(format!(
            "Riccati residual {residual:.3e} exceeds {RESIDUAL_TOL:.0e}"
        )));
    }
    let k = &r_inv * b.transpose() * &p;
    Ok((p, k))
}

/// Gain table over a grid of parameter values with nearest-neighbor lookup.
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub grid: Vec<Vec<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Gain at the grid point closest to `theta` (Euclidean).
    pub fn nearest(&self, theta: &[f64]) -> &DMatrix<f64> {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (i, g) in self.grid.iter().enumerate() {
            let d: f64 = g.iter().zip(theta).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        &self.gains[best]
    }
}

/// Per-grid-point CARE solve over a uniform grid covering the parameter
/// box; every closed loop A - B K must be Hurwitz.
pub fn lqr_gain_schedule(
    sys: &dyn NpvSystem,
    points_per_axis: usize,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<GainSchedule> {
    assert!(points_per_axis >= 1);
    let theta_box = sys.param_box();
    let d = theta_box.dim();
    let count = points_per_axis.pow(d as u32);
    let mut grid = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rem = idx;
        let mut theta = vec![0.0; d];
        for (ax, t) in theta.iter_mut().enumerate() {
            let k = rem % points_per_axis;
            rem /= points_per_axis;
            *t = if points_per_axis == 1 {
                0.5 * (theta_box.lo[ax] + theta_box.hi[ax])
            } else {
                theta_box.lo[ax]
                    + (theta_box.hi[ax] - theta_box.lo[ax]) * k as f64
                        / (points_per_axis - 1) as f64
            };
        }
        grid.push(theta);
    }

    let mut gains = Vec::with_capacity(count);
    for theta in &grid {
        let (a, b) = sys.linearize(theta)?;
        let (_, k) = solve_care(&a, &b, q, r)
            .map_err(|e| Error::Solver(format!("at theta {theta:?}: {e}")))?;
        let closed = &a - &b * &k;
        let alpha = spectral_abscissa(&closed);
        if alpha >= 0.0 {
            return Err(Error::Solver(format!(
                "closed loop not Hurwitz at theta {theta:?} (abscissa {alpha:.3e})"
            )));
        }
        gains.push(k);
    }
    Ok(GainSchedule { grid, gains })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{Pendulum, Quadrotor};

    #[test]
    fn scalar_riccati_analytic() {
        // xdot = x + u, Q = R = 1: P = 1 + sqrt(2), K = P.
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let b = DMatrix::from_row_slice(1, 1, &[1.0]);
        let q = DMatrix::identity(1, 1);
        let r = DMatrix::identity(1, 1);
        let (p, k) = solve_care(&a, &b, &q, &r).unwrap();
        let expect = 1.0 + 2.0_f64.sqrt();
        assert!((p[(0, 0)] - expect).abs() < 1e-6, "P = {}", p[(0, 0)]);
        assert!((k[(0, 0)] - expect).abs() < 1e-6);
    }

    #[test]
    fn double_integrator_analytic() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let (_, k) = solve_care(&a, &b, &q, &r).unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((k[(0, 1)] - 3.0_f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn hurwitz_plant_with_zero_cost_gives_zero_gain() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.2, 0.0, -2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = DMatrix::zeros(2, 2);
        let r = DMatrix::identity(1, 1);
        let (p, k) = solve_care(&a, &b, &q, &r).unwrap();
        assert!(inf_norm(&p) < 1e-9);
        assert!(inf_norm(&k) < 1e-9);
    }

    #[test]
    fn pendulum_gains_grow_as_effectiveness_drops() {
        let sys = Pendulum::default();
        let q = DMatrix::identity(2, 2);
        let r = DMatrix::identity(1, 1);
        let (a1, b1) = sys.linearize(&[1.0]).unwrap();
        let (_, k1) = solve_care(&a1, &b1, &q, &r).unwrap();
        let (a2, b2) = sys.linearize(&[0.2]).unwrap();
        let (_, k2) = solve_care(&a2, &b2, &q, &r).unwrap();
        assert!(k2.norm() > k1.norm());
    }

    #[test]
    fn single_point_grid() {
        let sys = Pendulum::default();
        let sched =
            lqr_gain_schedule(&sys, 1, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1))
                .unwrap();
        assert_eq!(sched.len(), 1);
        assert_eq!(sched.grid[0], vec![0.6]);
    }

    #[test]
    fn schedules_are_hurwitz_for_both_plants() {
        let pend = Pendulum::default();
        let sched =
            lqr_gain_schedule(&pend, 9, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1))
                .unwrap();
        assert_eq!(sched.len(), 9);
        let quad = Quadrotor::default();
        let sched =
            lqr_gain_schedule(&quad, 3, &DMatrix::identity(6, 6), &DMatrix::identity(3, 3))
                .unwrap();
        assert_eq!(sched.len(), 27);
    }

    #[test]
    fn nearest_neighbor_lookup() {
        let sched = GainSchedule {
            grid: vec![vec![0.0], vec![1.0]],
            gains: vec![DMatrix::zeros(1, 1), DMatrix::identity(1, 1)],
        };
        assert_eq!(sched.nearest(&[0.8])[(0, 0)], 1.0);
        assert_eq!(sched.nearest(&[0.2])[(0, 0)], 0.0);
    }
}
