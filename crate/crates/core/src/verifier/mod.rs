//! Empirical verification: adversarial attack campaigns over the
//! certified level set, trajectory sweeps under admissible parameter
//! schedules, and level-set slice extraction.

mod integrate;
mod report;

pub use integrate::{integrate, Trajectory};
pub use report::{RoaGrid, VerificationReport, WorstOffender};

use crate::error::{Error, Result};
use crate::networks::{ClScratch, ClosedLoop, LyapScratch};
use crate::systems::{NpvSystem, ParamTrajectory};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Verification campaign settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Attack samples drawn inside the level set.
    pub pgd_samples: usize,
    pub pgd_steps: usize,
    pub pgd_restarts: usize,
    pub pgd_step_frac: f64,
    /// Residual tolerance counted as a violation.
    pub tolerance: f64,
    pub traj_samples: usize,
    pub dt: f64,
    pub horizon: f64,
    /// Final-state ball counted as converged.
    pub convergence_radius: f64,
    pub level_probes: usize,
    pub level_ascent_steps: usize,
    pub k_decay: f64,
    pub rho: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            pgd_samples: 100_000,
            pgd_steps: 100,
            pgd_restarts: 5,
            pgd_step_frac: 0.05,
            tolerance: 1e-3,
            traj_samples: 10_000,
            dt: 0.005,
            horizon: 20.0,
            convergence_radius: 1e-2,
            level_probes: 64,
            level_ascent_steps: 10,
            k_decay: 0.1,
            rho: 1.0,
        }
    }
}

fn mix(mut h: u64, tag: u64, a: u64) -> u64 {
    for v in [tag, a] {
        h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
    }
    h
}

fn stream(base: u64, tag: u64, a: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(mix(base, tag, a))
}

/// What the attack campaigns need from a certificate candidate. The real
/// implementation wraps the closed loop; tests inject rigged stubs.
pub trait RoaModel: Sync {
    type Scratch: Send;
    fn scratch(&self) -> Self::Scratch;
    fn sys(&self) -> &dyn NpvSystem;
    /// Worst-vertex decay residual and the maximizing vertex index.
    fn residual(&self, x: &[f64], theta: &[f64], s: &mut Self::Scratch) -> Result<(f64, usize)>;
    /// Residual plus its gradient in (x, theta).
    fn residual_grad(
        &self,
        x: &[f64],
        theta: &[f64],
        s: &mut Self::Scratch,
        gx: &mut [f64],
        gt: &mut [f64],
    ) -> Result<f64>;
    /// Estimated max over the parameter box of V(x, .).
    fn level(
        &self,
        x: &[f64],
        probes: usize,
        steps: usize,
        rng: &mut ChaCha8Rng,
        s: &mut Self::Scratch,
    ) -> f64;
    /// Cheap warm-started level refresh returning the maximizer.
    fn level_warm(
        &self,
        x: &[f64],
        warm: &[f64],
        steps: usize,
        rng: &mut ChaCha8Rng,
        s: &mut Self::Scratch,
    ) -> (f64, Vec<f64>);
    /// Rate vector of the given vertex index.
    fn vertex(&self, idx: usize) -> Vec<f64>;
}

/// The trained certificate and controller as an attackable model.
pub struct CertifiedModel<'a> {
    pub cl: &'a ClosedLoop<'a>,
    pub k_decay: f64,
}

pub struct CertifiedScratch {
    cl: ClScratch,
    lyap: LyapScratch,
}

impl<'a> RoaModel for CertifiedModel<'a> {
    type Scratch = CertifiedScratch;

    fn scratch(&self) -> CertifiedScratch {
        CertifiedScratch {
            cl: ClScratch::new(self.cl),
            lyap: LyapScratch::new(self.cl.lyap, self.cl.sys),
        }
    }

    fn sys(&self) -> &dyn NpvSystem {
        self.cl.sys
    }

    fn residual(&self, x: &[f64], theta: &[f64], s: &mut CertifiedScratch) -> Result<(f64, usize)> {
        self.cl.worst_vertex_residual(x, theta, self.k_decay, &mut s.cl)
    }

    fn residual_grad(
        &self,
        x: &[f64],
        theta: &[f64],
        s: &mut CertifiedScratch,
        gx: &mut [f64],
        gt: &mut [f64],
    ) -> Result<f64> {
        self.cl.attack_gradient(
            x,
            theta,
            self.k_decay,
            crate::networks::AttackMode::WorstVertex,
            &mut s.cl,
            gx,
            gt,
        )
    }

    fn level(
        &self,
        x: &[f64],
        probes: usize,
        steps: usize,
        rng: &mut ChaCha8Rng,
        s: &mut CertifiedScratch,
    ) -> f64 {
        self.cl.lyap.level_value(self.cl.sys, x, probes, steps, rng, &mut s.lyap)
    }

    fn level_warm(
        &self,
        x: &[f64],
        warm: &[f64],
        steps: usize,
        rng: &mut ChaCha8Rng,
        s: &mut CertifiedScratch,
    ) -> (f64, Vec<f64>) {
        self.cl
            .lyap
            .level_argmax(self.cl.sys, x, 1, steps, rng, &mut s.lyap, &[warm])
    }

    fn vertex(&self, idx: usize) -> Vec<f64> {
        self.cl.vertices[idx].clone()
    }
}

const EMPTY_SET_MIN_RATE: f64 = 1e-4;
const EMPTY_SET_MAX_DRAWS: u64 = 10_000_000;

/// Rejection-sample `count` states uniformly from the level set
/// {x : level(x) <= rho}. Returns the points and the acceptance rate
/// (a Monte-Carlo estimate of the level-set volume fraction of the state
/// box). Deterministic for a given seed, independent of thread count.
pub fn sample_level_set<M: RoaModel>(
    model: &M,
    rho: f64,
    count: usize,
    probes: usize,
    steps: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, f64)> {
    assert!(count >= 1, "need at least one sample");
    let xb = model.sys().state_box();
    let block = 4096usize;
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut draws: u64 = 0;
    let mut block_start: u64 = 0;
    while accepted.len() < count {
        let results: Vec<Option<Vec<f64>>> = (0..block)
            .into_par_iter()
            .map_init(
                || model.scratch(),
                |s, i| {
                    let mut rng = stream(seed, 31, block_start + i as u64);
                    let x = xb.sample(&mut rng);
                    let lvl = model.level(&x, probes, steps, &mut rng, s);
                    if lvl <= rho {
                        Some(x)
                    } else {
                        None
                    }
                },
            )
            .collect();
        for r in results {
            draws += 1;
            if let Some(x) = r {
                accepted.push(x);
                if accepted.len() == count {
                    break;
                }
            }
        }
        block_start += block as u64;
        let rate = accepted.len() as f64 / draws as f64;
        if draws >= EMPTY_SET_MAX_DRAWS && rate < EMPTY_SET_MIN_RATE {
            return Err(Error::EmptyLevelSet {
                min_rate: EMPTY_SET_MIN_RATE,
                draws,
            });
        }
    }
    let rate = accepted.len() as f64 / draws as f64;
    Ok((accepted, rate))
}

/// Strong adversarial campaign over the level set: from each sampled
/// state (plus random parameter restarts), ascend the worst-vertex decay
/// residual while rejecting iterates that leave the level set. A sample
/// counts as a violation when its best confirmed-inside residual exceeds
/// the tolerance.
pub fn verify_pgd<M: RoaModel>(model: &M, cfg: &VerifyConfig, seed: u64) -> Result<VerificationReport> {
    assert!(cfg.pgd_samples >= 1);
    let (points, _rate) = sample_level_set(
        model,
        cfg.rho,
        cfg.pgd_samples,
        cfg.level_probes,
        cfg.level_ascent_steps,
        seed,
    )?;
    let sys = model.sys();
    let n = sys.state_dim();
    let xb = sys.state_box();
    let tb = sys.param_box();
    let axis_step_x: Vec<f64> = (0..n).map(|ax| cfg.pgd_step_frac * xb.half_width(ax)).collect();
    let axis_step_t: Vec<f64> = (0..tb.dim())
        .map(|ax| cfg.pgd_step_frac * tb.half_width(ax))
        .collect();

    struct SampleResult {
        residual: f64,
        x: Vec<f64>,
        theta: Vec<f64>,
        vertex: usize,
    }

    let results: Result<Vec<SampleResult>> = points
        .par_iter()
        .enumerate()
        .map_init(
            || model.scratch(),
            |s, (idx, x0)| {
                let mut rng = stream(seed, 32, idx as u64);
                let mut best = SampleResult {
                    residual: f64::NEG_INFINITY,
                    x: x0.clone(),
                    theta: tb.sample(&mut rng),
                    vertex: 0,
                };
                let mut gx = vec![0.0; n];
                let mut gt = vec![0.0; tb.dim()];
                for _restart in 0..cfg.pgd_restarts {
                    let mut x = x0.clone();
                    let mut theta = tb.sample(&mut rng);
                    let (_, mut theta_hat) =
                        model.level_warm(&x, &theta, cfg.level_ascent_steps, &mut rng, s);
                    let mut cur = model.residual_grad(&x, &theta, s, &mut gx, &mut gt)?;
                    let mut local_best = cur;
                    let mut local_x = x.clone();
                    let mut local_theta = theta.clone();
                    let mut no_gain = 0usize;
                    for _step in 0..cfg.pgd_steps {
                        if !cur.is_finite() || gx.iter().chain(gt.iter()).any(|g| !g.is_finite()) {
                            break;
                        }
                        let mut nx = x.clone();
                        let mut nt = theta.clone();
                        for ax in 0..n {
                            nx[ax] = (nx[ax] + axis_step_x[ax] * gx[ax])
                                .clamp(xb.lo[ax], xb.hi[ax]);
                        }
                        for ax in 0..tb.dim() {
                            nt[ax] = (nt[ax] + axis_step_t[ax] * gt[ax])
                                .clamp(tb.lo[ax], tb.hi[ax]);
                        }
                        // Reject moves that leave the level set.
                        let (lvl, th_hat) = model.level_warm(&nx, &theta_hat, 2, &mut rng, s);
                        if lvl <= cfg.rho {
                            x = nx;
                            theta = nt;
                            theta_hat = th_hat;
                            cur = model.residual_grad(&x, &theta, s, &mut gx, &mut gt)?;
                            if cur > local_best + 1e-12 {
                                local_best = cur;
                                local_x.copy_from_slice(&x);
                                local_theta.copy_from_slice(&theta);
                                no_gain = 0;
                            } else {
                                no_gain += 1;
                            }
                        } else {
                            no_gain += 1;
                        }
                        if no_gain >= 8 {
                            break;
                        }
                    }
                    if local_best > best.residual {
                        // Confirm membership with the full budget before
                        // keeping the iterate; fall back to the start.
                        let lvl = model.level(
                            &local_x,
                            cfg.level_probes,
                            cfg.level_ascent_steps,
                            &mut rng,
                            s,
                        );
                        let (res, point, th) = if lvl <= cfg.rho {
                            (local_best, local_x.clone(), local_theta.clone())
                        } else {
                            let (r, _) = model.residual(x0, &local_theta, s)?;
                            (r, x0.clone(), local_theta.clone())
                        };
                        if res > best.residual {
                            let (re_res, vert) = model.residual(&point, &th, s)?;
                            best = SampleResult {
                                residual: re_res,
                                x: point,
                                theta: th,
                                vertex: vert,
                            };
                            debug_assert!((re_res - res).abs() <= 1e-9 * (1.0 + res.abs()));
                        }
                    }
                }
                Ok(best)
            },
        )
        .collect();
    let results = results?;

    let mut violations = 0usize;
    let mut worst: Option<WorstOffender> = None;
    for r in &results {
        if r.residual > cfg.tolerance {
            violations += 1;
        }
        if worst.as_ref().map_or(true, |w| r.residual > w.value) {
            worst = Some(WorstOffender {
                x: r.x.clone(),
                theta: r.theta.clone(),
                theta_rate: model.vertex(r.vertex),
                value: r.residual,
            });
        }
    }
    Ok(VerificationReport {
        samples: results.len(),
        violations,
        violation_rate: violations as f64 / results.len() as f64,
        tolerance: cfg.tolerance,
        worst,
        convergence_fraction: None,
        monotonicity_fraction: None,
        seed,
    })
}

/// Monotonicity slack: V may rise by at most this fraction of (1 + V)
/// between consecutive samples.
const MONOTONE_SLACK: f64 = 1e-6;

/// Integrate from level-set samples under an admissible parameter
/// trajectory; check convergence to the origin and that V never rises
/// beyond slack.
pub fn verify_trajectories(
    cl: &ClosedLoop,
    traj: &ParamTrajectory,
    cfg: &VerifyConfig,
    seed: u64,
) -> Result<VerificationReport> {
    assert!(cfg.traj_samples >= 1);
    let model = CertifiedModel { cl, k_decay: cfg.k_decay };
    let (points, _) = sample_level_set(
        &model,
        cfg.rho,
        cfg.traj_samples,
        cfg.level_probes,
        cfg.level_ascent_steps,
        seed,
    )?;
    let results: Result<Vec<(bool, bool)>> = points
        .par_iter()
        .map(|x0| {
            let t = integrate(cl.sys, cl.ctrl, cl.lyap, x0, traj, cfg.dt, cfg.horizon, true)?;
            let last = t.states.last().expect("nonempty trajectory");
            let norm: f64 = last.iter().map(|v| v * v).sum::<f64>().sqrt();
            let converged = !t.diverged && norm <= cfg.convergence_radius;
            let mut monotone = true;
            for k in 1..t.v_values.len() {
                if t.v_values[k] > t.v_values[k - 1] + MONOTONE_SLACK * (1.0 + t.v_values[k - 1]) {
                    monotone = false;
                    break;
                }
            }
            Ok((converged, monotone))
        })
        .collect();
    let results = results?;
    let total = results.len();
    let conv = results.iter().filter(|(c, _)| *c).count();
    let mono = results.iter().filter(|(_, m)| *m).count();
    let violations = results.iter().filter(|(c, m)| !*c || !*m).count();
    Ok(VerificationReport {
        samples: total,
        violations,
        violation_rate: violations as f64 / total as f64,
        tolerance: MONOTONE_SLACK,
        worst: None,
        convergence_fraction: Some(conv as f64 / total as f64),
        monotonicity_fraction: Some(mono as f64 / total as f64),
        seed,
    })
}

/// Membership grid of the level set over a two-axis slice of the state
/// box, other coordinates fixed.
#[allow(clippy::too_many_arguments)]
pub fn roa_slice_grid<M: RoaModel>(
    model: &M,
    rho: f64,
    axes: (usize, usize),
    resolution: (usize, usize),
    fixed: &[f64],
    probes: usize,
    steps: usize,
    seed: u64,
) -> RoaGrid {
    let xb = model.sys().state_box();
    assert!(axes.0 < xb.dim() && axes.1 < xb.dim() && axes.0 != axes.1, "invalid slice axes");
    assert!(resolution.0 >= 2 && resolution.1 >= 2, "need at least 2 points per axis");
    assert_eq!(fixed.len(), xb.dim());
    let cells: Vec<(usize, usize)> = (0..resolution.0)
        .flat_map(|i| (0..resolution.1).map(move |j| (i, j)))
        .collect();
    let membership: Vec<bool> = cells
        .par_iter()
        .map_init(
            || model.scratch(),
            |s, &(i, j)| {
                let mut x = fixed.to_vec();
                x[axes.0] = xb.lo[axes.0]
                    + (xb.hi[axes.0] - xb.lo[axes.0]) * i as f64 / (resolution.0 - 1) as f64;
                x[axes.1] = xb.lo[axes.1]
                    + (xb.hi[axes.1] - xb.lo[axes.1]) * j as f64 / (resolution.1 - 1) as f64;
                let mut rng = stream(seed, 33, (i * resolution.1 + j) as u64);
                model.level(&x, probes, steps, &mut rng, s) <= rho
            },
        )
        .collect();
    RoaGrid {
        axes,
        lo: (xb.lo[axes.0], xb.lo[axes.1]),
        hi: (xb.hi[axes.0], xb.hi[axes.1]),
        resolution,
        fixed: fixed.to_vec(),
        membership,
        rho,
    }
}
