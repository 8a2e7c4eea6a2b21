//! Configuration, persistence and command dispatch.
//!
//! Everything written under the output directory is deterministic for a
//! fixed config and seed; wall-clock metadata goes to a separate
//! `run_meta.json` so content files stay byte-comparable.

use crate::diff::NetworkParams;
use crate::error::{Error, Result};
use crate::networks::{ClosedLoop, LyapunovFunction, PdController};
use crate::systems::{
    lqr_gain_schedule, NpvSystem, ParamTrajectory, Pendulum, PendulumConstants, Quadrotor,
    QuadrotorConstants,
};
use crate::trainer::{
    pretrain_controller, run_stage1, run_stage2, HistoryRow, PretrainConfig, StageReport,
    TrainConfig,
};
use crate::verifier::{
    integrate, roa_slice_grid, sample_level_set, verify_pgd, verify_trajectories, CertifiedModel,
    VerifyConfig,
};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Plant selection with overridable physical constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemSpec {
    Pendulum(PendulumConstants),
    Quadrotor(QuadrotorConstants),
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::Pendulum(PendulumConstants::default())
    }
}

impl SystemSpec {
    pub fn build(&self) -> Box<dyn NpvSystem> {
        match self {
            SystemSpec::Pendulum(c) => Box::new(Pendulum::new(*c)),
            SystemSpec::Quadrotor(c) => Box::new(Quadrotor::new(*c)),
        }
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub system: SystemSpec,
    /// Lyapunov network widths; empty selects the per-system default.
    pub phi_dims: Vec<usize>,
    /// Controller network widths; empty selects the per-system default.
    pub pi_dims: Vec<usize>,
    /// Output activation of the Lyapunov network.
    pub phi_output_tanh: bool,
    /// Scale applied to the Lyapunov network's output layer at
    /// initialization; small values start the level set near the whole
    /// state box (V close to its quadratic floor).
    pub phi_init_output_scale: f64,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub verify: VerifyConfig,
    /// Master seed; stage streams derive from it.
    pub seed: u64,
    /// Initial states per demo trajectory in `simulate`.
    pub simulate_count: usize,
    /// Grid points per axis for `roa`.
    pub roa_resolution: usize,
    /// Verification thresholds enforced under --require.
    pub required_max_violation_rate: f64,
    pub required_min_convergence: f64,
}

fn default_phi_dims(sys: &dyn NpvSystem) -> Vec<usize> {
    let d = sys.enc_dim() + sys.param_dim();
    vec![d, 64, 128, sys.enc_dim()]
}

fn default_pi_dims(sys: &dyn NpvSystem) -> Vec<usize> {
    let d = sys.enc_dim() + sys.param_dim();
    if sys.name() == "quadrotor" {
        vec![d, 64, 128, 64, sys.input_dim()]
    } else {
        vec![d, 64, 128, sys.input_dim()]
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemSpec::default(),
            phi_dims: Vec::new(),
            pi_dims: Vec::new(),
            phi_output_tanh: true,
            phi_init_output_scale: 1.0,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            verify: VerifyConfig::default(),
            seed: 0,
            simulate_count: 10,
            roa_resolution: 61,
            required_max_violation_rate: 0.01,
            required_min_convergence: 0.99,
        }
    }
}

impl RunConfig {
    pub fn pendulum_default() -> Self {
        Self::default()
    }

    /// Effective network widths (config override or per-system default).
    pub fn network_dims(&self, sys: &dyn NpvSystem) -> (Vec<usize>, Vec<usize>) {
        let phi = if self.phi_dims.is_empty() {
            default_phi_dims(sys)
        } else {
            self.phi_dims.clone()
        };
        let pi = if self.pi_dims.is_empty() {
            default_pi_dims(sys)
        } else {
            self.pi_dims.clone()
        };
        (phi, pi)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let sys = self.system.build();
        let want_in = sys.enc_dim() + sys.param_dim();
        let (phi, pi) = self.network_dims(sys.as_ref());
        if phi.first() != Some(&want_in) {
            return Err(Error::Config(format!(
                "phi_dims: input width must equal encoded state + parameter width ({want_in})"
            )));
        }
        if phi.last() != Some(&sys.enc_dim()) {
            return Err(Error::Config(format!(
                "phi_dims: output width must equal the encoded state width ({})",
                sys.enc_dim()
            )));
        }
        if pi.first() != Some(&want_in) {
            return Err(Error::Config(format!(
                "pi_dims: input width must equal encoded state + parameter width ({want_in})"
            )));
        }
        if pi.last() != Some(&sys.input_dim()) {
            return Err(Error::Config(format!(
                "pi_dims: output width must equal the input dimension ({})",
                sys.input_dim()
            )));
        }
        if self.roa_resolution < 2 {
            return Err(Error::Config("roa_resolution must be at least 2".into()));
        }
        if self.simulate_count == 0 {
            return Err(Error::Config("simulate_count must be positive".into()));
        }
        if !(self.phi_init_output_scale > 0.0) {
            return Err(Error::Config("phi_init_output_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Kept small and deterministic; identifies a training run's history
/// without storing every row in the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HistoryDigest {
    pub rows: usize,
    pub final_violation_rate: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_volume_estimate: Option<f64>,
    pub sha256: String,
}

impl HistoryDigest {
    pub fn from_rows(rows: &[HistoryRow]) -> Self {
        let mut hasher = Sha256::new();
        for r in rows {
            hasher.update(r.digest_line().as_bytes());
            hasher.update(b"\n");
        }
        let last = rows.last();
        let some_finite = |v: f64| if v.is_finite() { Some(v) } else { None };
        Self {
            rows: rows.len(),
            final_violation_rate: last.and_then(|r| some_finite(r.violation_rate)),
            final_loss: last.and_then(|r| some_finite(r.loss)),
            final_volume_estimate: last.and_then(|r| some_finite(r.volume_estimate)),
            sha256: hex_string(&hasher.finalize()),
        }
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trained parameter sets plus the configuration and seed that produced
/// them. Round-trips value-identically through JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub lyapunov: NetworkParams,
    pub epsilon: f64,
    pub controller: NetworkParams,
    pub history: HistoryDigest,
    pub seed: u64,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string_pretty(ckpt)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Config("checkpoint missing version field".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            got: version as u32,
        });
    }
    let ckpt: Checkpoint = serde_json::from_value(value)?;
    ckpt.config.validate()?;
    ckpt.lyapunov.validate()?;
    ckpt.controller.validate()?;
    Ok(ckpt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Train,
    VerifyPgd,
    VerifyTraj,
    Simulate,
    Roa,
}

#[derive(Debug)]
pub struct DispatchArgs {
    pub command: Command,
    pub config: RunConfig,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub samples_override: Option<usize>,
    pub require: bool,
}

fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut text = String::from(HistoryRow::CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn mix(mut h: u64, tag: u64) -> u64 {
    h ^= tag.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = h.wrapping_mul(0xbf58476d1ce4e5b9);
    h ^ (h >> 27)
}

struct LoadedModel {
    sys: Box<dyn NpvSystem>,
    lyap: LyapunovFunction,
    ctrl: PdController,
}

fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedModel> {
    let sys = ckpt.config.system.build();
    let lyap = LyapunovFunction::new(ckpt.lyapunov.clone(), ckpt.epsilon, sys.as_ref())?;
    let ctrl = PdController::new(ckpt.controller.clone(), sys.as_ref())?;
    Ok(LoadedModel { sys, lyap, ctrl })
}

fn fresh_networks(cfg: &RunConfig, sys: &dyn NpvSystem, seed: u64) -> Result<(LyapunovFunction, PdController)> {
    let (phi_dims, pi_dims) = cfg.network_dims(sys);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 100));
    let mut phi = NetworkParams::random(&phi_dims, cfg.phi_output_tanh, &mut rng);
    let last = phi.num_layers() - 1;
    for w in phi.weights[last].iter_mut() {
        *w *= cfg.phi_init_output_scale;
    }
    let pi = NetworkParams::random(&pi_dims, false, &mut rng);
    Ok((
        LyapunovFunction::new(phi, cfg.train.epsilon, sys)?,
        PdController::new(pi, sys)?,
    ))
}

fn demo_trajectories(sys: &dyn NpvSystem) -> Vec<(String, ParamTrajectory)> {
    match sys.name() {
        "pendulum" => vec![("demo".into(), ParamTrajectory::pendulum_demo())],
        "quadrotor" => vec![
            ("printed".into(), ParamTrajectory::quadrotor_demo_printed()),
            (
                "conforming".into(),
                ParamTrajectory::quadrotor_demo_conforming(),
            ),
        ],
        _ => {
            let center: Vec<f64> = sys
                .param_box()
                .lo
                .iter()
                .zip(&sys.param_box().hi)
                .map(|(l, h)| 0.5 * (l + h))
                .collect();
            vec![("constant".into(), ParamTrajectory::constant(&center))]
        }
    }
}

/// Demo parameter schedule used by trajectory verification: the
/// admissible one for each plant.
pub fn verification_trajectory(sys: &dyn NpvSystem) -> ParamTrajectory {
    match sys.name() {
        "pendulum" => ParamTrajectory::pendulum_demo(),
        "quadrotor" => ParamTrajectory::quadrotor_demo_conforming(),
        _ => {
            let center: Vec<f64> = sys
                .param_box()
                .lo
                .iter()
                .zip(&sys.param_box().hi)
                .map(|(l, h)| 0.5 * (l + h))
                .collect();
            ParamTrajectory::constant(&center)
        }
    }
}

/// Run one command end to end. Returns the process exit code: nonzero on
/// hard errors (via Err) or, under --require, on failed thresholds.
pub fn dispatch(args: &DispatchArgs) -> Result<i32> {
    let mut cfg = args.config.clone();
    if let Some(seed) = args.seed_override {
        cfg.seed = seed;
    }
    if let Some(samples) = args.samples_override {
        cfg.verify.pgd_samples = samples;
        cfg.verify.traj_samples = samples;
    }
    cfg.validate()?;
    fs::create_dir_all(&args.out_dir)?;
    write_json(&args.out_dir.join("effective_config.json"), &cfg)?;
    let started = std::time::SystemTime::now();

    let code = match args.command {
        Command::Pretrain => cmd_pretrain(&cfg, args)?,
        Command::Train => cmd_train(&cfg, args)?,
        Command::VerifyPgd => cmd_verify_pgd(&cfg, args)?,
        Command::VerifyTraj => cmd_verify_traj(&cfg, args)?,
        Command::Simulate => cmd_simulate(&cfg, args)?,
        Command::Roa => cmd_roa(&cfg, args)?,
    };

    let meta = serde_json::json!({
        "started_unix_ms": started
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        "elapsed_s": started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0),
        "command": format!("{:?}", args.command),
    });
    write_json(&args.out_dir.join("run_meta.json"), &meta)?;
    Ok(code)
}

fn build_schedule(cfg: &RunConfig, sys: &dyn NpvSystem) -> Result<crate::systems::GainSchedule> {
    let n = sys.state_dim();
    let nu = sys.input_dim();
    let q = DMatrix::identity(n, n) * cfg.pretrain.lqr_q;
    let r = DMatrix::identity(nu, nu) * cfg.pretrain.lqr_r;
    lqr_gain_schedule(sys, cfg.pretrain.lqr_grid, &q, &r)
}

fn cmd_pretrain(cfg: &RunConfig, args: &DispatchArgs) -> Result<i32> {
    let sys = cfg.system.build();
    let (lyap, mut ctrl) = fresh_networks(cfg, sys.as_ref(), cfg.seed)?;
    let schedule = build_schedule(cfg, sys.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 200));
    let mse = pretrain_controller(sys.as_ref(), &mut ctrl, &schedule, &cfg.pretrain, &mut rng)?;
    let mut text = String::from("epoch,mse\n");
    for (i, m) in mse.iter().enumerate() {
        text.push_str(&format!("{i},{m:.9e}\n"));
    }
    fs::write(args.out_dir.join("pretrain_mse.csv"), text)?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        lyapunov: lyap.phi.clone(),
        epsilon: lyap.epsilon,
        controller: ctrl.pi.clone(),
        history: HistoryDigest::default(),
        seed: cfg.seed,
    };
    save_checkpoint(&args.out_dir.join("pretrained.json"), &ckpt)?;
    println!(
        "pretrain: {} epochs, final MSE {:.3e}",
        mse.len(),
        mse.last().unwrap_or(&f64::NAN)
    );
    Ok(0)
}

fn cmd_train(cfg: &RunConfig, args: &DispatchArgs) -> Result<i32> {
    let sys = cfg.system.build();
    let (mut lyap, mut ctrl) = match &args.checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let m = model_from_checkpoint(&ckpt)?;
            (m.lyap, m.ctrl)
        }
        None => {
            let (lyap, mut ctrl) = fresh_networks(cfg, sys.as_ref(), cfg.seed)?;
            let schedule = build_schedule(cfg, sys.as_ref())?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 200));
            pretrain_controller(sys.as_ref(), &mut ctrl, &schedule, &cfg.pretrain, &mut rng)?;
            (lyap, ctrl)
        }
    };

    let train_seed = mix(cfg.seed, cfg.train.seed.wrapping_add(300));
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed);
    let report1 = run_stage1(sys.as_ref(), &mut lyap, &mut ctrl, &cfg.train, &mut rng)?;
    save_stage(cfg, args, &lyap, &ctrl, "stage1.json", &report1, &report1.history)?;

    let report2 = run_stage2(sys.as_ref(), &mut lyap, &mut ctrl, &cfg.train, &mut rng)?;
    let mut all_rows = report1.history.clone();
    all_rows.extend(report2.history.iter().cloned());
    save_stage(cfg, args, &lyap, &ctrl, "stage2.json", &report2, &all_rows)?;
    write_history_csv(&args.out_dir.join("history.csv"), &all_rows)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn save_stage(
    cfg: &RunConfig,
    args: &DispatchArgs,
    lyap: &LyapunovFunction,
    ctrl: &PdController,
    name: &str,
    report: &StageReport,
    rows: &[HistoryRow],
) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        lyapunov: lyap.phi.clone(),
        epsilon: lyap.epsilon,
        controller: ctrl.pi.clone(),
        history: HistoryDigest::from_rows(rows),
        seed: cfg.seed,
    };
    save_checkpoint(&args.out_dir.join(name), &ckpt)?;
    println!(
        "{name}: stop {:?}, {} iterations, inserted {}",
        report.stop,
        report.history.len(),
        report.inserted_total
    );
    Ok(())
}

fn require_checkpoint(args: &DispatchArgs) -> Result<Checkpoint> {
    let path = args.checkpoint.as_ref().ok_or_else(|| {
        Error::Config("this command needs --checkpoint pointing at a trained model".into())
    })?;
    load_checkpoint(path)
}

fn cmd_verify_pgd(cfg: &RunConfig, args: &DispatchArgs) -> Result<i32> {
    let ckpt = require_checkpoint(args)?;
    let m = model_from_checkpoint(&ckpt)?;
    let cl = ClosedLoop::new(m.sys.as_ref(), &m.lyap, &m.ctrl);
    let model = CertifiedModel {
        cl: &cl,
        k_decay: cfg.verify.k_decay,
    };
    let report = verify_pgd(&model, &cfg.verify, mix(cfg.seed, 400))?;
    write_json(&args.out_dir.join("verify_pgd.json"), &report)?;
    println!(
        "verify-pgd: {} samples, violation rate {:.4e} (tol {:.1e})",
        report.samples, report.violation_rate, report.tolerance
    );
    if args.require && report.violation_rate > cfg.required_max_violation_rate {
        return Ok(2);
    }
    Ok(0)
}

fn cmd_verify_traj(cfg: &RunConfig, args: &DispatchArgs) -> Result<i32> {
    let ckpt = require_checkpoint(args)?;
    let m = model_from_checkpoint(&ckpt)?;
    let cl = ClosedLoop::new(m.sys.as_ref(), &m.lyap, &m.ctrl);
    let traj = verification_trajectory(m.sys.as_ref());
    let report = verify_trajectories(&cl, &traj, &cfg.verify, mix(cfg.seed, 500))?;
    write_json(&args.out_dir.join("verify_traj.json"), &report)?;
    println!(
        "verify-traj: {} samples, convergence {:.4}, monotone {:.4}",
        report.samples,
        report.convergence_fraction.unwrap_or(f64::NAN),
        report.monotonicity_fraction.unwrap_or(f64::NAN)
    );
    if args.require
        && report.convergence_fraction.unwrap_or(0.0) < cfg.required_min_convergence
    {
        return Ok(2);
    }
    Ok(0)
}

fn cmd_simulate(cfg: &RunConfig, args: &DispatchArgs) -> Result<i32> {
    let ckpt = require_checkpoint(args)?;
    let m = model_from_checkpoint(&ckpt)?;
    let cl = ClosedLoop::new(m.sys.as_ref(), &m.lyap, &m.ctrl);
    let model = CertifiedModel {
        cl: &cl,
        k_decay: cfg.verify.k_decay,
    };
    let (points, _) = sample_level_set(
        &model,
        cfg.verify.rho,
        cfg.simulate_count,
        cfg.verify.level_probes,
        cfg.verify.level_ascent_steps,
        mix(cfg.seed, 600),
    )?;
    for (name, traj) in demo_trajectories(m.sys.as_ref()) {
        for (i, x0) in points.iter().enumerate() {
            let t = integrate(
                m.sys.as_ref(),
                &m.ctrl,
                &m.lyap,
                x0,
                &traj,
                cfg.verify.dt,
                cfg.verify.horizon,
                false,
            )?;
            let path = args.out_dir.join(format!("traj_{name}_{i:02}.csv"));
            fs::write(path, t.to_csv(m.sys.as_ref()))?;
        }
    }
    println!("simulate: wrote {} trajectories", cfg.simulate_count);
    Ok(0)
}

fn cmd_roa(cfg: &RunConfig, args: &DispatchArgs) -> Result<i32> {
    let ckpt = require_checkpoint(args)?;
    let m = model_from_checkpoint(&ckpt)?;
    let cl = ClosedLoop::new(m.sys.as_ref(), &m.lyap, &m.ctrl);
    let model = CertifiedModel {
        cl: &cl,
        k_decay: cfg.verify.k_decay,
    };
    let fixed = vec![0.0; m.sys.state_dim()];
    let grid = roa_slice_grid(
        &model,
        cfg.verify.rho,
        (0, 1),
        (cfg.roa_resolution, cfg.roa_resolution),
        &fixed,
        cfg.verify.level_probes,
        cfg.verify.level_ascent_steps,
        mix(cfg.seed, 700),
    );
    fs::write(args.out_dir.join("roa_grid.csv"), grid.to_csv())?;
    fs::write(args.out_dir.join("roa_slice.svg"), grid.to_svg())?;
    let inside = grid.membership.iter().filter(|&&m| m).count();
    println!(
        "roa: {}/{} grid points inside the level set",
        inside,
        grid.membership.len()
    );
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn smoke_config() -> RunConfig {
        let mut cfg = RunConfig::pendulum_default();
        cfg.phi_dims = vec![4, 8, 3];
        cfg.pi_dims = vec![4, 8, 1];
        cfg.train = TrainConfig {
            max_iters: 1,
            epochs_per_iter: 2,
            pgd_steps: 3,
            samples_per_iter: 16,
            minibatch: 8,
            level_probes: 2,
            level_ascent_steps: 1,
            learning_rate: 1e-3,
            ..Default::default()
        };
        cfg.pretrain = PretrainConfig {
            samples: 64,
            epochs: 2,
            minibatch: 32,
            lqr_grid: 3,
            ..Default::default()
        };
        cfg.verify = VerifyConfig {
            pgd_samples: 20,
            pgd_steps: 3,
            pgd_restarts: 1,
            traj_samples: 5,
            dt: 0.01,
            horizon: 1.0,
            level_probes: 2,
            level_ascent_steps: 1,
            ..Default::default()
        };
        cfg.simulate_count = 2;
        cfg.roa_resolution = 5;
        cfg
    }

    #[test]
    fn empty_config_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.system, SystemSpec::default());
        assert_eq!(cfg.train, TrainConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"learning_rte\": 1.0}");
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>("{\"train\": {\"lerning_rate\": 1.0}}");
        assert!(err.is_err());
    }

    #[test]
    fn wrong_controller_width_rejected() {
        let mut cfg = RunConfig::pendulum_default();
        cfg.pi_dims = vec![4, 64, 128, 3];
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("pi_dims"));
    }

    #[test]
    fn config_roundtrip_identity() {
        let cfg = smoke_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_forward_bits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config();
        let sys = cfg.system.build();
        let (lyap, ctrl) = fresh_networks(&cfg, sys.as_ref(), 42).unwrap();
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg,
            lyapunov: lyap.phi.clone(),
            epsilon: lyap.epsilon,
            controller: ctrl.pi.clone(),
            history: HistoryDigest::default(),
            seed: 42,
        };
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = ckpt.lyapunov.forward(&x).unwrap();
            let b = loaded.lyapunov.forward(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{\"version\": 1, \"config\"").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn version_bump_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config();
        let sys = cfg.system.build();
        let (lyap, ctrl) = fresh_networks(&cfg, sys.as_ref(), 1).unwrap();
        let mut ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg,
            lyapunov: lyap.phi.clone(),
            epsilon: lyap.epsilon,
            controller: ctrl.pi.clone(),
            history: HistoryDigest::default(),
            seed: 1,
        };
        ckpt.version = CHECKPOINT_VERSION + 1;
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { .. })
        ));
    }

    #[test]
    fn train_smoke_writes_two_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let args = DispatchArgs {
            command: Command::Train,
            config: smoke_config(),
            checkpoint: None,
            out_dir: dir.path().to_path_buf(),
            seed_override: Some(7),
            samples_override: None,
            require: false,
        };
        let code = dispatch(&args).unwrap();
        assert_eq!(code, 0);
        assert!(dir.path().join("stage1.json").exists());
        assert!(dir.path().join("stage2.json").exists());
        assert!(dir.path().join("history.csv").exists());
        assert!(dir.path().join("effective_config.json").exists());

        // The stage-2 checkpoint drives the downstream commands.
        let ckpt_path = dir.path().join("stage2.json");
        for (command, artifact) in [
            (Command::VerifyPgd, "verify_pgd.json"),
            (Command::VerifyTraj, "verify_traj.json"),
            (Command::Roa, "roa_slice.svg"),
            (Command::Simulate, "traj_demo_00.csv"),
        ] {
            let args = DispatchArgs {
                command,
                config: smoke_config(),
                checkpoint: Some(ckpt_path.clone()),
                out_dir: dir.path().to_path_buf(),
                seed_override: Some(7),
                samples_override: None,
                require: false,
            };
            let code = dispatch(&args).unwrap();
            assert_eq!(code, 0);
            assert!(dir.path().join(artifact).exists(), "{artifact} missing");
        }
    }

    #[test]
    fn verify_without_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let args = DispatchArgs {
            command: Command::VerifyPgd,
            config: smoke_config(),
            checkpoint: None,
            out_dir: dir.path().to_path_buf(),
            seed_override: None,
            samples_override: None,
            require: false,
        };
        assert!(dispatch(&args).is_err());
    }
}
