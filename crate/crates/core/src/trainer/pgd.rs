//! Projected gradient ascent over a box, used both as the training
//! adversary and (with a larger budget) as the empirical verifier.

use crate::systems::BoxSet;

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Best iterate found (the start itself when nothing improved).
    pub point: Vec<f64>,
    /// Objective at the best iterate.
    pub value: f64,
    /// A non-finite gradient or value aborted this start.
    pub nonfinite: bool,
}

/// Ascend `objective` from each start: p <- clamp(p + frac * halfwidth * g)
/// per axis. Returns the best iterate per start, never worse than the
/// start value. The closure returns the objective value and writes its
/// gradient.
pub fn pgd_attack<F>(
    mut objective: F,
    bounds: &BoxSet,
    starts: &[Vec<f64>],
    steps: usize,
    step_frac: f64,
) -> Vec<AttackOutcome>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = bounds.dim();
    let axis_step: Vec<f64> = (0..d).map(|ax| step_frac * bounds.half_width(ax)).collect();
    let mut grad = vec![0.0; d];
    let mut out = Vec::with_capacity(starts.len());
    'starts: for start in starts {
        debug_assert!(bounds.contains(start), "start must lie inside the box");
        let mut p = start.clone();
        let v0 = objective(&p, &mut grad);
        if !v0.is_finite() {
            out.push(AttackOutcome {
                point: start.clone(),
                value: v0,
                nonfinite: true,
            });
            continue;
        }
        let mut best = AttackOutcome {
            point: p.clone(),
            value: v0,
            nonfinite: false,
        };
        for _ in 0..steps {
            if grad.iter().any(|g| !g.is_finite()) {
                out.push(AttackOutcome {
                    point: start.clone(),
                    value: v0,
                    nonfinite: true,
                });
                continue 'starts;
            }
            for ax in 0..d {
                p[ax] += axis_step[ax] * grad[ax];
            }
            bounds.clamp(&mut p);
            let v = objective(&p, &mut grad);
            if !v.is_finite() {
                out.push(AttackOutcome {
                    point: start.clone(),
                    value: v0,
                    nonfinite: true,
                });
                continue 'starts;
            }
            if v > best.value {
                best.value = v;
                best.point.copy_from_slice(&p);
            }
        }
        out.push(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_bowl_converges_to_center() {
        let bounds = BoxSet::new(vec![-2.0, -2.0], vec![2.0, 2.0]).unwrap();
        let c = [0.7, -0.3];
        let obj = |p: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..2 {
                v -= (p[i] - c[i]) * (p[i] - c[i]);
                g[i] = -2.0 * (p[i] - c[i]);
            }
            v
        };
        let starts = vec![vec![-1.5, 1.5], vec![1.9, 1.9]];
        let res = pgd_attack(obj, &bounds, &starts, 50, 0.05);
        for r in res {
            assert!(!r.nonfinite);
            assert!((r.point[0] - c[0]).abs() < 1e-3);
            assert!((r.point[1] - c[1]).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_objective_reaches_signed_vertex() {
        let bounds = BoxSet::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let a = [2.0, -3.0];
        let obj = |p: &[f64], g: &mut [f64]| {
            g.copy_from_slice(&a);
            a[0] * p[0] + a[1] * p[1]
        };
        let res = pgd_attack(obj, &bounds, &[vec![0.0, 0.0]], 40, 0.2);
        assert_eq!(res[0].point, vec![1.0, -1.0]);
    }

    #[test]
    fn start_at_maximizer_keeps_value() {
        let bounds = BoxSet::new(vec![-1.0], vec![1.0]).unwrap();
        let obj = |p: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * p[0];
            -p[0] * p[0]
        };
        let res = pgd_attack(obj, &bounds, &[vec![0.0]], 25, 0.1);
        assert_eq!(res[0].value, 0.0);
        assert_eq!(res[0].point, vec![0.0]);
    }

    #[test]
    fn monotone_in_objective() {
        let bounds = BoxSet::new(vec![-1.0], vec![1.0]).unwrap();
        let obj = |p: &[f64], g: &mut [f64]| {
            g[0] = p[0].cos();
            p[0].sin()
        };
        for start in [-0.9, -0.2, 0.4, 0.99] {
            let res = pgd_attack(obj, &bounds, &[vec![start]], 15, 0.1);
            assert!(res[0].value >= start.sin());
        }
    }

    #[test]
    fn non_finite_gradient_returns_start() {
        let bounds = BoxSet::new(vec![-1.0], vec![1.0]).unwrap();
        let obj = |_p: &[f64], g: &mut [f64]| {
            g[0] = f64::NAN;
            0.5
        };
        let res = pgd_attack(obj, &bounds, &[vec![0.3]], 10, 0.1);
        assert!(res[0].nonfinite);
        assert_eq!(res[0].point, vec![0.3]);
    }
}
