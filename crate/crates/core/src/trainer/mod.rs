//! Two-stage counterexample-guided synthesis: controller pre-training
//! against an LQR gain schedule, stage-one joint training over the whole
//! region of interest, and stage-two level-set refinement that certifies
//! and grows the candidate region of attraction.

mod adam;
mod buffer;
mod pgd;

pub use adam::{adam_step, sgd_step, AdamState, OptimizerKind};
pub use buffer::{BufferEntry, SampleBuffer};
pub use pgd::{pgd_attack, AttackOutcome};

use crate::diff::tape::{GradTape, Var};
use crate::error::{Error, Result};
use crate::networks::{
    AttackMode, ClScratch, ClosedLoop, GraphScratch, LyapScratch, LyapunovFunction, PdController,
    TapedNets,
};
use crate::systems::{BoxSet, GainSchedule, NpvSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Reduction of per-vertex decay residuals into the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Hinge each vertex separately, then sum: a positive vertex cannot
    /// be cancelled by a negative one.
    #[default]
    PerVertexHinge,
    /// Hinge the vertex sum (the literal stage-one loss as published).
    PaperSum,
    /// Hinge only the worst vertex.
    WorstVertex,
}

/// All hyperparameters of the two training stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_iters: usize,
    /// Per-stage iteration overrides; `max_iters` applies when unset.
    pub stage1_max_iters: Option<usize>,
    pub stage2_max_iters: Option<usize>,
    pub epochs_per_iter: usize,
    pub pgd_steps: usize,
    /// Stage-two stagnation window (iterations without new counterexamples).
    pub stagnation_window: usize,
    pub samples_per_iter: usize,
    /// Decay margin k3 in vdot <= -k3 ||z||^2.
    pub k_decay: f64,
    /// PGD step as a fraction of each axis half-width.
    pub pgd_step_frac: f64,
    /// Stage-two certification loss weight.
    pub w_cert: f64,
    /// Stage-two growth loss weight.
    pub w_grow: f64,
    /// Level-set constant defining the certified region.
    pub rho: f64,
    pub learning_rate: f64,
    /// Quadratic floor of the Lyapunov parameterization.
    pub epsilon: f64,
    pub buffer_capacity: usize,
    pub minibatch: usize,
    pub loss_mode: LossMode,
    pub optimizer: OptimizerKind,
    /// Random probes for inner level-set maximization during training.
    pub level_probes: usize,
    pub level_ascent_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            stage1_max_iters: None,
            stage2_max_iters: None,
            epochs_per_iter: 10,
            pgd_steps: 20,
            stagnation_window: 100,
            samples_per_iter: 1024,
            k_decay: 0.1,
            pgd_step_frac: 0.05,
            w_cert: 1.0,
            w_grow: 0.5,
            rho: 1.0,
            learning_rate: 1e-5,
            epsilon: 1e-2,
            buffer_capacity: 200_000,
            minibatch: 4096,
            loss_mode: LossMode::default(),
            optimizer: OptimizerKind::default(),
            level_probes: 64,
            level_ascent_steps: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs_per_iter", self.epochs_per_iter),
            ("samples_per_iter", self.samples_per_iter),
            ("buffer_capacity", self.buffer_capacity),
            ("minibatch", self.minibatch),
            ("level_probes", self.level_probes),
            ("stagnation_window", self.stagnation_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.rho <= 0.0 {
            return Err(Error::Config("rho must be positive".into()));
        }
        if self.k_decay <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("k_decay and epsilon must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.pgd_step_frac <= 0.0 {
            return Err(Error::Config(
                "learning_rate and pgd_step_frac must be positive".into(),
            ));
        }
        if self.w_cert < 0.0 || self.w_grow < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Stagnation,
    Diverged,
}

/// One per-iteration record of the training history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: u64,
    pub stage: u8,
    pub violation_rate: f64,
    pub buffer_size: usize,
    pub loss: f64,
    pub loss_cert: f64,
    pub loss_grow: f64,
    /// Monte-Carlo fraction of the state box inside the level set
    /// (stage two only; NaN in stage one).
    pub volume_estimate: f64,
    pub wall_time_s: f64,
}

impl HistoryRow {
    pub const CSV_HEADER: &'static str =
        "iteration,stage,violation_rate,buffer_size,loss,loss_cert,loss_grow,volume_estimate,wall_time_s";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6e},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.3}",
            self.iteration,
            self.stage,
            self.violation_rate,
            self.buffer_size,
            self.loss,
            self.loss_cert,
            self.loss_grow,
            self.volume_estimate,
            self.wall_time_s
        )
    }

    /// Deterministic content (wall time stripped) for history digests.
    pub fn digest_line(&self) -> String {
        format!(
            "{},{},{:.6e},{},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.iteration,
            self.stage,
            self.violation_rate,
            self.buffer_size,
            self.loss,
            self.loss_cert,
            self.loss_grow,
            self.volume_estimate
        )
    }
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
    pub inserted_total: u64,
    /// Counterexample buffer at exit (diagnostics; every entry records
    /// its insertion-time violation).
    pub cex_buffer: SampleBuffer,
}

fn mix(mut h: u64, tag: u64, a: u64, b: u64) -> u64 {
    for v in [tag, a, b] {
        h ^= v.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58476d1ce4e5b9);
        h ^= h >> 27;
    }
    h
}

fn stream(base: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(base, tag, a, b))
}

fn product_box(sys: &dyn NpvSystem) -> BoxSet {
    let xb = sys.state_box();
    let tb = sys.param_box();
    let mut lo = xb.lo.clone();
    lo.extend_from_slice(&tb.lo);
    let mut hi = xb.hi.clone();
    hi.extend_from_slice(&tb.hi);
    BoxSet::new(lo, hi).expect("valid product box")
}

// ---------------------------------------------------------------------
// Loss values (evaluation path; the taped versions below must agree).
// ---------------------------------------------------------------------

fn mode_reduce(residuals: &[f64], mode: LossMode) -> f64 {
    match mode {
        LossMode::PerVertexHinge => residuals.iter().map(|r| r.max(0.0)).sum(),
        LossMode::PaperSum => residuals.iter().sum::<f64>().max(0.0),
        LossMode::WorstVertex => residuals
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0),
    }
}

/// Stage-one empirical decay loss over a batch of (x, theta) points.
pub fn stage1_loss(
    cl: &ClosedLoop,
    batch: &[(Vec<f64>, Vec<f64>)],
    k_decay: f64,
    mode: LossMode,
) -> Result<f64> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let mut s = ClScratch::new(cl);
    let mut acc = 0.0;
    let mut residuals = vec![0.0; cl.vertices.len()];
    for (x, theta) in batch {
        let z2 = cl.vdot_vertices(x, theta, &mut s)?;
        for (r, &vd) in residuals.iter_mut().zip(s.vdot.iter()) {
            *r = vd + k_decay * z2;
        }
        acc += mode_reduce(&residuals, mode);
    }
    Ok(acc / batch.len() as f64)
}

/// Stage-two loss pair: certification over counterexamples inside the
/// level set, growth over uniformly drawn candidates.
pub struct Stage2Losses {
    pub cert: f64,
    pub grow: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn stage2_losses<R: Rng>(
    cl: &ClosedLoop,
    cex_batch: &[(Vec<f64>, Vec<f64>)],
    cand_batch: &[(Vec<f64>, Vec<f64>)],
    rho: f64,
    k_decay: f64,
    level_probes: usize,
    level_steps: usize,
    rng: &mut R,
) -> Result<Stage2Losses> {
    assert!(
        !cex_batch.is_empty() && !cand_batch.is_empty(),
        "batches must be nonempty"
    );
    let mut s = ClScratch::new(cl);
    let mut ls = LyapScratch::new(cl.lyap, cl.sys);
    let mut cert = 0.0;
    for (x, theta) in cex_batch {
        let (res, _) = cl.worst_vertex_residual(x, theta, k_decay, &mut s)?;
        let level = cl
            .lyap
            .level_value(cl.sys, x, level_probes, level_steps, rng, &mut ls);
        cert += res.min(rho - level).max(0.0);
    }
    let mut grow = 0.0;
    for (x, _theta) in cand_batch {
        let level = cl
            .lyap
            .level_value(cl.sys, x, level_probes, level_steps, rng, &mut ls);
        grow += (level - rho).max(0.0);
    }
    Ok(Stage2Losses {
        cert: cert / cex_batch.len() as f64,
        grow: grow / cand_batch.len() as f64,
    })
}

// ---------------------------------------------------------------------
// Taped minibatch gradients (deterministic chunked accumulation).
// ---------------------------------------------------------------------

const GRAD_CHUNK: usize = 16;

thread_local! {
    /// Reused per worker thread: the tape arena for one gradient chunk
    /// grows once and is cleared between chunks.
    static GRAD_WORKSPACE: std::cell::RefCell<(GradTape, GraphScratch)> =
        std::cell::RefCell::new((GradTape::new(), GraphScratch::new()));
}

/// Record the stage-one loss terms of one chunk and return the chunk sum.
fn record_stage1_chunk(
    tape: &mut GradTape,
    nets: &TapedNets,
    gs: &mut GraphScratch,
    cl: &ClosedLoop,
    points: &[(Vec<f64>, Vec<f64>)],
    k_decay: f64,
    mode: LossMode,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(points.len());
    for (x, theta) in points {
        let g = cl.record_sample(tape, nets, gs, x, theta)?;
        let term = match mode {
            LossMode::PerVertexHinge => {
                let mut hinges = Vec::with_capacity(g.vdots.len());
                for &vd in &g.vdots {
                    let r = tape.add_const(vd, k_decay * g.disp_sq);
                    hinges.push(tape.relu(r));
                }
                tape.sum(&hinges)
            }
            LossMode::PaperSum => {
                let total = tape.sum(&g.vdots);
                let shifted =
                    tape.add_const(total, g.vdots.len() as f64 * k_decay * g.disp_sq);
                tape.relu(shifted)
            }
            LossMode::WorstVertex => {
                let mut worst = g.vdots[0];
                for &vd in &g.vdots[1..] {
                    worst = tape.max(worst, vd);
                }
                let shifted = tape.add_const(worst, k_decay * g.disp_sq);
                tape.relu(shifted)
            }
        };
        terms.push(term);
    }
    Ok(tape.sum(&terms))
}

/// Chunk-parallel gradient of the mean stage-one loss over `points`.
/// Chunk boundaries and the reduction order are fixed, so the result does
/// not depend on the worker count.
fn stage1_minibatch_gradient(
    cl: &ClosedLoop,
    points: &[(Vec<f64>, Vec<f64>)],
    k_decay: f64,
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    let chunks: Vec<&[(Vec<f64>, Vec<f64>)]> = points.chunks(GRAD_CHUNK).collect();
    let partials: Result<Vec<(f64, Vec<f64>)>> = chunks
        .par_iter()
        .map(|chunk| {
            GRAD_WORKSPACE.with(|ws| {
                let (tape, gs) = &mut *ws.borrow_mut();
                tape.clear();
                let nets = TapedNets::load(tape, cl.lyap, cl.ctrl);
                let total = record_stage1_chunk(tape, &nets, gs, cl, chunk, k_decay, mode)?;
                tape.backward(total);
                let mut grad = vec![0.0; nets.param_count()];
                nets.gradient(tape, &mut grad)?;
                Ok((tape.val(total), grad))
            })
        })
        .collect();
    let partials = partials?;
    let n = points.len() as f64;
    let mut grad = vec![0.0; partials[0].1.len()];
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Stage-two certification terms for points with precomputed level
/// maximizers: relu(min(worst residual, rho - V(x, theta_hat))).
fn record_stage2_cert_chunk(
    tape: &mut GradTape,
    nets: &TapedNets,
    gs: &mut GraphScratch,
    cl: &ClosedLoop,
    points: &[(Vec<f64>, Vec<f64>, Vec<f64>)],
    rho: f64,
    k_decay: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(points.len());
    for (x, theta, theta_hat) in points {
        let g = cl.record_sample(tape, nets, gs, x, theta)?;
        let mut worst = g.vdots[0];
        for &vd in &g.vdots[1..] {
            worst = tape.max(worst, vd);
        }
        let residual = tape.add_const(worst, k_decay * g.disp_sq);
        let v_at_hat = cl.record_value(tape, nets, gs, x, theta_hat);
        let neg_v = tape.neg(v_at_hat);
        let margin = tape.add_const(neg_v, rho);
        let gated = tape.min(residual, margin);
        terms.push(tape.relu(gated));
    }
    Ok(tape.sum(&terms))
}

/// Stage-two growth terms: relu(V(x, theta_hat) - rho).
fn record_stage2_grow_chunk(
    tape: &mut GradTape,
    nets: &TapedNets,
    gs: &mut GraphScratch,
    cl: &ClosedLoop,
    points: &[(Vec<f64>, Vec<f64>)],
    rho: f64,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(points.len());
    for (x, theta_hat) in points {
        let v = cl.record_value(tape, nets, gs, x, theta_hat);
        let shifted = tape.add_const(v, -rho);
        terms.push(tape.relu(shifted));
    }
    Ok(tape.sum(&terms))
}

fn chunked_gradient<T, F>(cl: &ClosedLoop, points: &[T], record: F) -> Result<(f64, Vec<f64>)>
where
    T: Sync,
    F: Fn(&mut GradTape, &TapedNets, &mut GraphScratch, &ClosedLoop, &[T]) -> Result<Var>
        + Sync,
{
    let chunks: Vec<&[T]> = points.chunks(GRAD_CHUNK).collect();
    let partials: Result<Vec<(f64, Vec<f64>)>> = chunks
        .par_iter()
        .map(|chunk| {
            GRAD_WORKSPACE.with(|ws| {
                let (tape, gs) = &mut *ws.borrow_mut();
                tape.clear();
                let nets = TapedNets::load(tape, cl.lyap, cl.ctrl);
                let total = record(tape, &nets, gs, cl, chunk)?;
                tape.backward(total);
                let mut grad = vec![0.0; nets.param_count()];
                nets.gradient(tape, &mut grad)?;
                Ok((tape.val(total), grad))
            })
        })
        .collect();
    let partials = partials?;
    let n = points.len() as f64;
    let mut grad = vec![0.0; partials[0].1.len()];
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

// ---------------------------------------------------------------------
// Parameter plumbing shared by the stages.
// ---------------------------------------------------------------------

struct ParamVec {
    flat: Vec<f64>,
    split: usize,
}

impl ParamVec {
    fn gather(lyap: &LyapunovFunction, ctrl: &PdController) -> Self {
        let mut flat = Vec::with_capacity(lyap.phi.param_count() + ctrl.pi.param_count());
        lyap.phi.append_flat(&mut flat);
        ctrl.pi.append_flat(&mut flat);
        Self {
            split: lyap.phi.param_count(),
            flat,
        }
    }

    fn scatter(&self, lyap: &mut LyapunovFunction, ctrl: &mut PdController) {
        lyap.phi.set_from_flat(&self.flat[..self.split]);
        ctrl.pi.set_from_flat(&self.flat[self.split..]);
    }
}

fn apply_update(
    params: &mut ParamVec,
    grad: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lyap: &mut LyapunovFunction,
    ctrl: &mut PdController,
) {
    match cfg.optimizer {
        OptimizerKind::Adam => adam_step(&mut params.flat, grad, state, cfg.learning_rate),
        OptimizerKind::Sgd => sgd_step(&mut params.flat, grad, state, cfg.learning_rate),
    }
    params.scatter(lyap, ctrl);
}

/// Loss-divergence tracker: trips on non-finite losses or on a sustained
/// blow-up relative to the recent minimum.
struct DivergenceGuard {
    window: std::collections::VecDeque<f64>,
    streak: usize,
}

impl DivergenceGuard {
    fn new() -> Self {
        Self {
            window: std::collections::VecDeque::new(),
            streak: 0,
        }
    }

    fn observe(&mut self, loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        let min = self.window.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.window.len() >= 20 && loss > 10.0 * min + 1e-9 {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.window.push_back(loss);
        if self.window.len() > 100 {
            self.window.pop_front();
        }
        self.streak >= 50
    }
}

const ATTACK_CHUNK: usize = 32;

// ---------------------------------------------------------------------
// Stage I
// ---------------------------------------------------------------------

/// Counterexample-guided joint synthesis over the whole region of
/// interest. Returns the per-iteration history; the networks are updated
/// in place (restored to the best-loss snapshot on divergence).
pub fn run_stage1<R: Rng>(
    sys: &dyn NpvSystem,
    lyap: &mut LyapunovFunction,
    ctrl: &mut PdController,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StageReport> {
    cfg.validate()?;
    let max_iters = cfg.stage1_max_iters.unwrap_or(cfg.max_iters);
    let base: u64 = rng.gen();
    let joint_box = product_box(sys);
    let n = sys.state_dim();
    let mut buffer = SampleBuffer::new(cfg.buffer_capacity);
    let mut params = ParamVec::gather(lyap, ctrl);
    let mut opt = AdamState::new(params.flat.len());
    let mut guard = DivergenceGuard::new();
    let mut best = (f64::INFINITY, params.flat.clone());
    let mut history = Vec::new();
    let mut stagnant = 0usize;
    let mut inserted_total = 0u64;
    let mut stop = StopReason::MaxIterations;

    for iter in 0..max_iters {
        let t0 = Instant::now();
        let mut srng = stream(base, 1, iter as u64, 0);
        let starts: Vec<Vec<f64>> = (0..cfg.samples_per_iter)
            .map(|_| joint_box.sample(&mut srng))
            .collect();

        // Adversarial search for decay violations.
        let cl = ClosedLoop::new(sys, lyap, ctrl);
        let attacked: Vec<(AttackOutcome, f64)> = starts
            .par_chunks(ATTACK_CHUNK)
            .flat_map_iter(|chunk| {
                let mut s = ClScratch::new(&cl);
                let outcomes = pgd_attack(
                    |p, g| {
                        let (gx, gt) = g.split_at_mut(n);
                        cl.attack_gradient(
                            &p[..n],
                            &p[n..],
                            cfg.k_decay,
                            AttackMode::SumVertices,
                            &mut s,
                            gx,
                            gt,
                        )
                        .unwrap_or(f64::NAN)
                    },
                    &joint_box,
                    chunk,
                    cfg.pgd_steps,
                    cfg.pgd_step_frac,
                );
                let with_resid: Vec<(AttackOutcome, f64)> = outcomes
                    .into_iter()
                    .map(|o| {
                        let r = cl
                            .worst_vertex_residual(&o.point[..n], &o.point[n..], cfg.k_decay, &mut s)
                            .map(|(v, _)| v)
                            .unwrap_or(f64::NAN);
                        (o, r)
                    })
                    .collect();
                with_resid
            })
            .collect();

        let mut inserted = 0u64;
        let mut violations = 0usize;
        for (o, residual) in &attacked {
            if residual.is_finite() && *residual > 0.0 {
                violations += 1;
                buffer.push(BufferEntry {
                    x: o.point[..n].to_vec(),
                    theta: o.point[n..].to_vec(),
                    theta_hat: o.point[n..].to_vec(),
                    violation: *residual,
                    iteration: iter as u64,
                });
                inserted += 1;
            }
        }
        inserted_total += inserted;
        let violation_rate = violations as f64 / cfg.samples_per_iter as f64;

        // Minibatched descent over the buffer.
        let mut loss = 0.0;
        if !buffer.is_empty() {
            for epoch in 0..cfg.epochs_per_iter {
                let mut mrng = stream(base, 2, iter as u64, epoch as u64);
                let idx = buffer.minibatch_indices(cfg.minibatch, &mut mrng);
                let points: Vec<(Vec<f64>, Vec<f64>)> = idx
                    .iter()
                    .map(|&i| {
                        let e = buffer.get(i);
                        (e.x.clone(), e.theta.clone())
                    })
                    .collect();
                let cl = ClosedLoop::new(sys, lyap, ctrl);
                let (l, grad) =
                    stage1_minibatch_gradient(&cl, &points, cfg.k_decay, cfg.loss_mode)?;
                loss = l;
                apply_update(&mut params, &grad, &mut opt, cfg, lyap, ctrl);
            }
        }

        if loss < best.0 {
            best = (loss, params.flat.clone());
        }
        history.push(HistoryRow {
            iteration: iter as u64,
            stage: 1,
            violation_rate,
            buffer_size: buffer.len(),
            loss,
            loss_cert: f64::NAN,
            loss_grow: f64::NAN,
            volume_estimate: f64::NAN,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        if guard.observe(loss) {
            params.flat.copy_from_slice(&best.1);
            params.scatter(lyap, ctrl);
            stop = StopReason::Diverged;
            break;
        }
        // Stop once violations are rare and the buffer has stopped growing.
        if inserted == 0 {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        if violation_rate < 0.01 && stagnant >= 100 {
            stop = StopReason::Stagnation;
            break;
        }
    }
    Ok(StageReport {
        history,
        stop,
        inserted_total,
        cex_buffer: buffer,
    })
}

// ---------------------------------------------------------------------
// Stage II
// ---------------------------------------------------------------------

/// Level-set-guided refinement: adversaries are sought inside the
/// candidate region, and a growth loss keeps the region from collapsing.
pub fn run_stage2<R: Rng>(
    sys: &dyn NpvSystem,
    lyap: &mut LyapunovFunction,
    ctrl: &mut PdController,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StageReport> {
    cfg.validate()?;
    let max_iters = cfg.stage2_max_iters.unwrap_or(cfg.max_iters);
    let base: u64 = rng.gen();
    let joint_box = product_box(sys);
    let n = sys.state_dim();
    let mut cex_buffer = SampleBuffer::new(cfg.buffer_capacity);
    let mut cand_buffer = SampleBuffer::new(cfg.buffer_capacity);
    let mut params = ParamVec::gather(lyap, ctrl);
    let mut opt = AdamState::new(params.flat.len());
    let mut guard = DivergenceGuard::new();
    let mut best = (f64::INFINITY, params.flat.clone());
    let mut history = Vec::new();
    let mut stagnant = 0usize;
    let mut inserted_total = 0u64;
    let mut stop = StopReason::MaxIterations;
    // Cheap budgets for the inner maximization inside the attack loop;
    // the configured budget is used for the descent terms.
    let quick_probes = (cfg.level_probes / 8).max(1);
    let quick_steps = (cfg.level_ascent_steps / 2).max(1);

    for iter in 0..max_iters {
        let t0 = Instant::now();
        let mut srng = stream(base, 11, iter as u64, 0);
        let starts: Vec<Vec<f64>> = (0..cfg.samples_per_iter)
            .map(|_| joint_box.sample(&mut srng))
            .collect();

        let cl = ClosedLoop::new(sys, lyap, ctrl);
        // Attack the level-gated objective min(decay violation, rho - level).
        let attacked: Vec<(Vec<f64>, f64, Vec<f64>)> = starts
            .par_chunks(ATTACK_CHUNK)
            .enumerate()
            .flat_map_iter(|(ci, chunk)| {
                let mut s = ClScratch::new(&cl);
                let mut ls = LyapScratch::new(cl.lyap, cl.sys);
                let axis_step: Vec<f64> = (0..joint_box.dim())
                    .map(|ax| cfg.pgd_step_frac * joint_box.half_width(ax))
                    .collect();
                let mut out = Vec::with_capacity(chunk.len());
                for (si, start) in chunk.iter().enumerate() {
                    let mut prng =
                        stream(base, 12, iter as u64, (ci * ATTACK_CHUNK + si) as u64);
                    let mut p = start.clone();
                    let mut gx = vec![0.0; n];
                    let mut gt = vec![0.0; joint_box.dim() - n];
                    let (_, mut theta_hat) = cl.lyap.level_argmax(
                        cl.sys,
                        &p[..n],
                        quick_probes,
                        cfg.level_ascent_steps,
                        &mut prng,
                        &mut ls,
                        &[],
                    );
                    let mut best_pt = p.clone();
                    let mut best_val = f64::NEG_INFINITY;
                    for _ in 0..=cfg.pgd_steps {
                        let (lvl, th) = cl.lyap.level_argmax(
                            cl.sys,
                            &p[..n],
                            1,
                            quick_steps,
                            &mut prng,
                            &mut ls,
                            &[&theta_hat],
                        );
                        theta_hat = th;
                        let eq_val = cl
                            .attack_gradient(
                                &p[..n],
                                &p[n..],
                                cfg.k_decay,
                                AttackMode::SumVertices,
                                &mut s,
                                &mut gx,
                                &mut gt,
                            )
                            .unwrap_or(f64::NAN);
                        if !eq_val.is_finite() {
                            break;
                        }
                        let margin = cfg.rho - lvl;
                        let val = eq_val.min(margin);
                        if val > best_val {
                            best_val = val;
                            best_pt.copy_from_slice(&p);
                        }
                        if margin < eq_val {
                            // Level branch active: ascend -grad_x V(x, theta_hat).
                            let mut gt_hat = vec![0.0; gt.len()];
                            cl.lyap.gradients(
                                cl.sys,
                                &p[..n],
                                &theta_hat,
                                &mut ls,
                                &mut gx,
                                &mut gt_hat,
                            );
                            for ax in 0..n {
                                p[ax] -= axis_step[ax] * gx[ax];
                            }
                        } else {
                            for ax in 0..joint_box.dim() {
                                let g = if ax < n { gx[ax] } else { gt[ax - n] };
                                p[ax] += axis_step[ax] * g;
                            }
                        }
                        joint_box.clamp(&mut p);
                    }
                    out.push((best_pt, best_val, theta_hat.clone()));
                }
                out
            })
            .collect();

        let mut inserted = 0u64;
        let mut violations = 0usize;
        {
            let mut s = ClScratch::new(&cl);
            let mut ls = LyapScratch::new(cl.lyap, cl.sys);
            for (si, (pt, _, th_warm)) in attacked.iter().enumerate() {
                let mut vrng = stream(base, 13, iter as u64, si as u64);
                let (res, _) = cl.worst_vertex_residual(&pt[..n], &pt[n..], cfg.k_decay, &mut s)?;
                let (lvl, th_hat) = cl.lyap.level_argmax(
                    cl.sys,
                    &pt[..n],
                    quick_probes,
                    cfg.level_ascent_steps,
                    &mut vrng,
                    &mut ls,
                    &[th_warm],
                );
                let gated = res.min(cfg.rho - lvl);
                if gated.is_finite() && gated > 0.0 {
                    violations += 1;
                    cex_buffer.push(BufferEntry {
                        x: pt[..n].to_vec(),
                        theta: pt[n..].to_vec(),
                        theta_hat: th_hat,
                        violation: gated,
                        iteration: iter as u64,
                    });
                    inserted += 1;
                }
            }
        }
        inserted_total += inserted;
        let violation_rate = violations as f64 / cfg.samples_per_iter as f64;

        // Refill the candidate buffer.
        let mut crng = stream(base, 14, iter as u64, 0);
        for _ in 0..cfg.samples_per_iter {
            let p = joint_box.sample(&mut crng);
            cand_buffer.push(BufferEntry {
                x: p[..n].to_vec(),
                theta: p[n..].to_vec(),
                theta_hat: p[n..].to_vec(),
                violation: 0.0,
                iteration: iter as u64,
            });
        }

        let mut loss_cert = 0.0;
        let mut loss_grow = 0.0;
        for epoch in 0..cfg.epochs_per_iter {
            let mut mrng = stream(base, 15, iter as u64, epoch as u64);
            // Certification terms need the level maximizer per point.
            let mut cert_grad: Option<(f64, Vec<f64>)> = None;
            if !cex_buffer.is_empty() {
                let idx = cex_buffer.minibatch_indices(cfg.minibatch, &mut mrng);
                let cl = ClosedLoop::new(sys, lyap, ctrl);
                let points: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = idx
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let e = cex_buffer.get(i);
                        let mut ls = LyapScratch::new(cl.lyap, cl.sys);
                        let mut prng = stream(base, 16, (iter * 1000 + epoch) as u64, k as u64);
                        let (_, th_hat) = cl.lyap.level_argmax(
                            cl.sys,
                            &e.x,
                            1,
                            quick_steps,
                            &mut prng,
                            &mut ls,
                            &[&e.theta_hat],
                        );
                        (e.x.clone(), e.theta.clone(), th_hat)
                    })
                    .collect();
                cert_grad = Some(chunked_gradient(&cl, &points, |t, nets, gs, cl, pts| {
                    record_stage2_cert_chunk(t, nets, gs, cl, pts, cfg.rho, cfg.k_decay)
                })?);
            }
            let mut grow_grad: Option<(f64, Vec<f64>)> = None;
            if !cand_buffer.is_empty() && cfg.w_grow > 0.0 {
                let idx = cand_buffer.minibatch_indices(cfg.minibatch, &mut mrng);
                let cl = ClosedLoop::new(sys, lyap, ctrl);
                let points: Vec<(Vec<f64>, Vec<f64>)> = idx
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let e = cand_buffer.get(i);
                        let mut ls = LyapScratch::new(cl.lyap, cl.sys);
                        let mut prng = stream(base, 17, (iter * 1000 + epoch) as u64, k as u64);
                        let (_, th_hat) = cl.lyap.level_argmax(
                            cl.sys,
                            &e.x,
                            1,
                            quick_steps,
                            &mut prng,
                            &mut ls,
                            &[&e.theta_hat],
                        );
                        (e.x.clone(), th_hat)
                    })
                    .collect();
                grow_grad = Some(chunked_gradient(&cl, &points, |t, nets, gs, cl, pts| {
                    record_stage2_grow_chunk(t, nets, gs, cl, pts, cfg.rho)
                })?);
            }
            let len = params.flat.len();
            let mut grad = vec![0.0; len];
            if let Some((l, g)) = &cert_grad {
                loss_cert = *l;
                for i in 0..len {
                    grad[i] += cfg.w_cert * g[i];
                }
            }
            if let Some((l, g)) = &grow_grad {
                loss_grow = *l;
                for i in 0..len {
                    grad[i] += cfg.w_grow * g[i];
                }
            }
            if cert_grad.is_some() || grow_grad.is_some() {
                apply_update(&mut params, &grad, &mut opt, cfg, lyap, ctrl);
            }
        }
        let loss = cfg.w_cert * loss_cert + cfg.w_grow * loss_grow;

        // Monte-Carlo level-set volume diagnostic.
        let volume_estimate = {
            let cl = ClosedLoop::new(sys, lyap, ctrl);
            let mut vrng = stream(base, 18, iter as u64, 0);
            let mut ls = LyapScratch::new(cl.lyap, cl.sys);
            let samples = 512;
            let mut inside = 0usize;
            for _ in 0..samples {
                let x = sys.state_box().sample(&mut vrng);
                let lvl = cl.lyap.level_value(
                    cl.sys,
                    &x,
                    quick_probes,
                    quick_steps,
                    &mut vrng,
                    &mut ls,
                );
                if lvl <= cfg.rho {
                    inside += 1;
                }
            }
            inside as f64 / samples as f64
        };

        if loss < best.0 {
            best = (loss, params.flat.clone());
        }
        history.push(HistoryRow {
            iteration: iter as u64,
            stage: 2,
            violation_rate,
            buffer_size: cex_buffer.len(),
            loss,
            loss_cert,
            loss_grow,
            volume_estimate,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });

        if guard.observe(loss) {
            params.flat.copy_from_slice(&best.1);
            params.scatter(lyap, ctrl);
            stop = StopReason::Diverged;
            break;
        }
        if inserted == 0 {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        if violation_rate < 0.01 && stagnant >= cfg.stagnation_window {
            stop = StopReason::Stagnation;
            break;
        }
    }
    Ok(StageReport {
        history,
        stop,
        inserted_total,
        cex_buffer,
    })
}

// ---------------------------------------------------------------------
// Controller pre-training
// ---------------------------------------------------------------------

/// Pre-training hyperparameters (gain-schedule fit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    /// LQR grid points per parameter axis.
    pub lqr_grid: usize,
    /// State and input cost scales (Q = q I, R = r I).
    pub lqr_q: f64,
    pub lqr_r: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 4096,
            epochs: 40,
            minibatch: 256,
            learning_rate: 1e-3,
            lqr_grid: 9,
            lqr_q: 1.0,
            lqr_r: 1.0,
        }
    }
}

/// Fit the controller to the scheduled LQR law u*(theta) - K(theta) x,
/// clamped 1% inside the input bounds. Returns the per-epoch MSE, which
/// should trend down; a sustained 10x blow-up aborts.
pub fn pretrain_controller<R: Rng>(
    sys: &dyn NpvSystem,
    ctrl: &mut PdController,
    schedule: &GainSchedule,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if schedule.is_empty() {
        return Err(Error::Config("gain schedule is empty".into()));
    }
    let base: u64 = rng.gen();
    let n = sys.state_dim();
    let nu = sys.input_dim();
    let mut srng = stream(base, 21, 0, 0);
    // Fixed sample set with clamped LQR targets.
    let mut inputs: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(cfg.samples);
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let x = sys.state_box().sample(&mut srng);
        let theta = sys.param_box().sample(&mut srng);
        let k = schedule.nearest(&theta);
        let u_eq = sys.equilibrium_input(&theta)?;
        let mut target = vec![0.0; nu];
        for i in 0..nu {
            let mut v = u_eq[i];
            for j in 0..n {
                v -= k[(i, j)] * x[j];
            }
            let span = sys.input_hi()[i] - sys.input_lo()[i];
            let margin = 0.01 * span;
            target[i] = v.clamp(sys.input_lo()[i] + margin, sys.input_hi()[i] - margin);
        }
        inputs.push((x, theta));
        targets.push(target);
    }

    let mut flat = Vec::with_capacity(ctrl.pi.param_count());
    ctrl.pi.append_flat(&mut flat);
    let mut opt = AdamState::new(flat.len());
    let mut epoch_mse = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut blowups = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..cfg.samples).collect();
        let mut erng = stream(base, 22, epoch as u64, 0);
        for i in (1..order.len()).rev() {
            let j = erng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for mb in order.chunks(cfg.minibatch) {
            let items: Vec<(usize, &[f64], &[f64], &[f64])> = mb
                .iter()
                .map(|&i| {
                    (
                        i,
                        inputs[i].0.as_slice(),
                        inputs[i].1.as_slice(),
                        targets[i].as_slice(),
                    )
                })
                .collect();
            let ctrl_ref = &*ctrl;
            let partials: Result<Vec<(f64, Vec<f64>)>> = items
                .par_chunks(GRAD_CHUNK)
                .map(|chunk| {
                    GRAD_WORKSPACE.with(|ws| {
                        let (tape, _) = &mut *ws.borrow_mut();
                        tape.clear();
                        let mut mlp = crate::diff::taped::TapedMlp::new();
                        let params = crate::diff::taped::TapedParams::load(tape, &ctrl_ref.pi);
                        let mut terms = Vec::new();
                        for (_, x, theta, target) in chunk {
                            let u = ctrl_ref.taped_control(tape, &params, &mut mlp, sys, x, theta)?;
                            for (i, &ui) in u.iter().enumerate() {
                                let d = tape.add_const(ui, -target[i]);
                                terms.push(tape.mul(d, d));
                            }
                        }
                        let total = tape.sum(&terms);
                        tape.backward(total);
                        let mut grad = vec![0.0; params.param_count()];
                        params.gradient(tape, &mut grad)?;
                        Ok((tape.val(total), grad))
                    })
                })
                .collect();
            let partials = partials?;
            let batch = mb.len() as f64;
            let mut grad = vec![0.0; flat.len()];
            let mut loss = 0.0;
            for (l, g) in &partials {
                loss += l;
                for (acc, v) in grad.iter_mut().zip(g) {
                    *acc += v;
                }
            }
            loss /= batch;
            grad.iter_mut().for_each(|g| *g /= batch);
            adam_step(&mut flat, &grad, &mut opt, cfg.learning_rate);
            ctrl.pi.set_from_flat(&flat);
            sum += loss;
            count += 1;
            best = best.min(loss);
            if loss > 10.0 * best + 1e-12 {
                blowups += 1;
                if blowups > 100 {
                    return Err(Error::Diverged(format!(
                        "pre-training MSE {loss:.3e} vs best {best:.3e} after {} steps",
                        opt.step_count()
                    )));
                }
            } else {
                blowups = 0;
            }
        }
        epoch_mse.push(sum / count as f64);
    }
    Ok(epoch_mse)
}

#[cfg(test)]
mod tests;
