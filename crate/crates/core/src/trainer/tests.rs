use super::*;
use crate::diff::NetworkParams;
use crate::systems::synthetic::ScalarLinear;
use crate::systems::{lqr_gain_schedule, Pendulum};
use nalgebra::DMatrix;

fn scalar_setup(
    sys: &ScalarLinear,
    epsilon: f64,
) -> (LyapunovFunction, PdController) {
    let phi = NetworkParams::zeros(&[2, 3, 1], true);
    let pi = NetworkParams::zeros(&[2, 3, 1], false);
    (
        LyapunovFunction::new(phi, epsilon, sys).unwrap(),
        PdController::new(pi, sys).unwrap(),
    )
}

fn small_config() -> TrainConfig {
    TrainConfig {
        max_iters: 3,
        epochs_per_iter: 2,
        pgd_steps: 3,
        samples_per_iter: 32,
        minibatch: 16,
        buffer_capacity: 1000,
        level_probes: 4,
        level_ascent_steps: 2,
        learning_rate: 1e-3,
        ..Default::default()
    }
}

#[test]
fn mode_reduction_hand_example() {
    // Residuals (+1, -3): hinge-per-vertex 1, literal sum 0, worst 1.
    let r = [1.0, -3.0];
    assert_eq!(mode_reduce(&r, LossMode::PerVertexHinge), 1.0);
    assert_eq!(mode_reduce(&r, LossMode::PaperSum), 0.0);
    assert_eq!(mode_reduce(&r, LossMode::WorstVertex), 1.0);
}

#[test]
fn modes_agree_on_single_vertex() {
    let sys = ScalarLinear::exploding().with_frozen_rate();
    let (lyap, ctrl) = scalar_setup(&sys, 1e-2);
    let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
    assert_eq!(cl.vertices.len(), 1);
    let batch = vec![(vec![1.5], vec![0.5])];
    let k3 = 0.05;
    let a = stage1_loss(&cl, &batch, k3, LossMode::PerVertexHinge).unwrap();
    let b = stage1_loss(&cl, &batch, k3, LossMode::PaperSum).unwrap();
    let c = stage1_loss(&cl, &batch, k3, LossMode::WorstVertex).unwrap();
    // Single positive violation: all modes return it exactly.
    let want = 2.0 * 1e-2 * 1.5 * 1.5 + k3 * 1.5 * 1.5;
    assert!((a - want).abs() < 1e-12);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(a.to_bits(), c.to_bits());
}

#[test]
fn satisfied_batch_gives_zero_loss_in_every_mode() {
    let sys = ScalarLinear::decaying();
    let (lyap, ctrl) = scalar_setup(&sys, 1e-2);
    let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
    let batch: Vec<(Vec<f64>, Vec<f64>)> =
        (1..10).map(|i| (vec![0.2 * i as f64], vec![0.5])).collect();
    for mode in [LossMode::PerVertexHinge, LossMode::PaperSum, LossMode::WorstVertex] {
        assert_eq!(stage1_loss(&cl, &batch, 1e-2, mode).unwrap(), 0.0);
    }
}

#[test]
fn taped_minibatch_loss_matches_evaluation_path() {
    let sys = Pendulum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let phi = NetworkParams::random(&[4, 6, 3], true, &mut rng);
    let pi = NetworkParams::random(&[4, 6, 1], false, &mut rng);
    let lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
    let ctrl = PdController::new(pi, &sys).unwrap();
    let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
    let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..33)
        .map(|_| {
            (
                sys.state_box().sample(&mut rng),
                sys.param_box().sample(&mut rng),
            )
        })
        .collect();
    for mode in [LossMode::PerVertexHinge, LossMode::PaperSum, LossMode::WorstVertex] {
        let reference = stage1_loss(&cl, &batch, 0.1, mode).unwrap();
        let (taped, grad) = stage1_minibatch_gradient(&cl, &batch, 0.1, mode).unwrap();
        assert!(
            (reference - taped).abs() <= 1e-10 * (1.0 + reference.abs()),
            "{mode:?}: {reference} vs {taped}"
        );
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}

#[test]
fn stage2_losses_mask_and_hinge() {
    // Unstable plant, V = ||z||^2 exactly (epsilon 1, zero network).
    let sys = ScalarLinear::exploding();
    let (lyap, ctrl) = scalar_setup(&sys, 1.0);
    let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // x = 2: level = 4 > rho = 1, violation positive => masked to zero.
    let cex = vec![(vec![2.0], vec![0.5])];
    // Candidate at level 4 vs rho 3.7 => hinge 0.3; candidate inside => 0.
    let cand_out = vec![(vec![2.0], vec![0.5])];
    let cand_in = vec![(vec![0.5], vec![0.5])];
    let l = stage2_losses(&cl, &cex, &cand_out, 1.0, 0.05, 4, 3, &mut rng).unwrap();
    assert_eq!(l.cert, 0.0, "outside-level point must be masked");
    let l2 = stage2_losses(&cl, &cex, &cand_out, 3.7, 0.05, 4, 3, &mut rng).unwrap();
    assert!((l2.grow - 0.3).abs() < 1e-9, "grow hinge {}", l2.grow);
    let l3 = stage2_losses(&cl, &cex, &cand_in, 3.7, 0.05, 4, 3, &mut rng).unwrap();
    assert_eq!(l3.grow, 0.0);
    // Huge rho: everything inside, growth loss vanishes.
    let l4 = stage2_losses(&cl, &cex, &cand_out, 1e9, 0.05, 4, 3, &mut rng).unwrap();
    assert_eq!(l4.grow, 0.0);
}

#[test]
fn stage1_zero_iterations_keeps_parameters() {
    let sys = Pendulum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phi = NetworkParams::random(&[4, 6, 3], true, &mut rng);
    let pi = NetworkParams::random(&[4, 6, 1], false, &mut rng);
    let mut lyap = LyapunovFunction::new(phi.clone(), 1e-2, &sys).unwrap();
    let mut ctrl = PdController::new(pi.clone(), &sys).unwrap();
    let cfg = TrainConfig {
        max_iters: 0,
        ..small_config()
    };
    let report = run_stage1(&sys, &mut lyap, &mut ctrl, &cfg, &mut rng).unwrap();
    assert!(report.history.is_empty());
    assert_eq!(lyap.phi, phi);
    assert_eq!(ctrl.pi, pi);
}

#[test]
fn stage1_certified_plant_exits_by_stagnation() {
    // Stable scalar plant with V = eps x^2 and k3 < 2 eps: the decay
    // condition holds everywhere, no counterexamples ever appear.
    let sys = ScalarLinear::decaying();
    let (mut lyap, mut ctrl) = scalar_setup(&sys, 1e-2);
    let phi_before = lyap.phi.clone();
    let cfg = TrainConfig {
        max_iters: 150,
        samples_per_iter: 16,
        pgd_steps: 3,
        epochs_per_iter: 1,
        k_decay: 1e-2,
        ..small_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let report = run_stage1(&sys, &mut lyap, &mut ctrl, &cfg, &mut rng).unwrap();
    assert_eq!(report.stop, StopReason::Stagnation);
    assert_eq!(report.history.len(), 100);
    assert_eq!(report.inserted_total, 0);
    assert!(report.history.iter().all(|h| h.violation_rate == 0.0));
    assert_eq!(lyap.phi, phi_before, "no signal, no drift");
}

#[test]
fn stage1_buffer_entries_record_positive_violations() {
    let sys = Pendulum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let phi = NetworkParams::random(&[4, 6, 3], true, &mut rng);
    let pi = NetworkParams::random(&[4, 6, 1], false, &mut rng);
    let mut lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
    let mut ctrl = PdController::new(pi, &sys).unwrap();
    let cfg = small_config();
    let report = run_stage1(&sys, &mut lyap, &mut ctrl, &cfg, &mut rng).unwrap();
    assert!(report.cex_buffer.len() > 0, "random nets should violate");
    for e in report.cex_buffer.iter() {
        assert!(e.violation > 0.0);
        assert!(sys.state_box().contains(&e.x));
        assert!(sys.param_box().contains(&e.theta));
    }
}

#[test]
fn training_is_deterministic_for_fixed_seed() {
    let sys = Pendulum::default();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phi = NetworkParams::random(&[4, 6, 3], true, &mut rng);
        let pi = NetworkParams::random(&[4, 6, 1], false, &mut rng);
        let mut lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
        let mut ctrl = PdController::new(pi, &sys).unwrap();
        let cfg = small_config();
        let r1 = run_stage1(&sys, &mut lyap, &mut ctrl, &cfg, &mut rng).unwrap();
        let r2 = run_stage2(&sys, &mut lyap, &mut ctrl, &cfg, &mut rng).unwrap();
        let mut flat = Vec::new();
        lyap.phi.append_flat(&mut flat);
        ctrl.pi.append_flat(&mut flat);
        let hist: Vec<String> = r1
            .history
            .iter()
            .chain(r2.history.iter())
            .map(|h| h.digest_line())
            .collect();
        (flat, hist)
    };
    let (fa, ha) = run();
    let (fb, hb) = run();
    assert_eq!(ha, hb, "history streams differ");
    for (a, b) in fa.iter().zip(&fb) {
        assert_eq!(a.to_bits(), b.to_bits(), "parameters differ");
    }
}

#[test]
fn stage2_growth_loss_vanishes_for_huge_level() {
    let sys = Pendulum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let phi = NetworkParams::random(&[4, 6, 3], true, &mut rng);
    let pi = NetworkParams::random(&[4, 6, 1], false, &mut rng);
    let mut lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
    let mut ctrl = PdController::new(pi, &sys).unwrap();
    let cfg = TrainConfig {
        max_iters: 2,
        rho: 1e9,
        ..small_config()
    };
    let report = run_stage2(&sys, &mut lyap, &mut ctrl, &cfg, &mut rng).unwrap();
    for h in &report.history {
        assert_eq!(h.loss_grow, 0.0);
        assert_eq!(h.volume_estimate, 1.0);
    }
}

#[test]
fn pretrain_fits_zero_gain_midpoint_target() {
    // All-zero gains with a midpoint equilibrium: the optimal head is
    // constant; the fit should drive the MSE down hard.
    let sys = Pendulum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let pi = NetworkParams::random(&[4, 8, 8, 1], false, &mut rng);
    let mut ctrl = PdController::new(pi, &sys).unwrap();
    let schedule = GainSchedule {
        grid: vec![vec![0.6]],
        gains: vec![DMatrix::zeros(1, 2)],
    };
    let cfg = PretrainConfig {
        samples: 512,
        epochs: 60,
        minibatch: 128,
        ..Default::default()
    };
    let mse = pretrain_controller(&sys, &mut ctrl, &schedule, &cfg, &mut rng).unwrap();
    assert!(mse[mse.len() - 1] < 1e-3, "final MSE {}", mse[mse.len() - 1]);
    assert!(mse[mse.len() - 1] < mse[0]);
}

#[test]
fn pretrain_mse_trends_down() {
    let sys = Pendulum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pi = NetworkParams::random(&[4, 8, 8, 1], false, &mut rng);
    let mut ctrl = PdController::new(pi, &sys).unwrap();
    let q = DMatrix::identity(2, 2);
    let r = DMatrix::identity(1, 1);
    let schedule = lqr_gain_schedule(&sys, 9, &q, &r).unwrap();
    let cfg = PretrainConfig {
        samples: 1024,
        epochs: 20,
        minibatch: 128,
        ..Default::default()
    };
    let mse = pretrain_controller(&sys, &mut ctrl, &schedule, &cfg, &mut rng).unwrap();
    let head: f64 = mse[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = mse[mse.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "MSE did not decrease: head {head}, tail {tail}");
}

#[test]
fn config_validation_rejects_bad_values() {
    let mut cfg = TrainConfig::default();
    cfg.rho = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.minibatch = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.w_grow = -1.0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}
