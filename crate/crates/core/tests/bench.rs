//! Manual timing probes for the hot kernels (run with --ignored).

use neural_npv::diff::tape::GradTape;
use neural_npv::diff::NetworkParams;
use neural_npv::networks::*;
use neural_npv::systems::{NpvSystem, Pendulum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[test]
#[ignore]
fn kernel_timings() {
    let sys = Pendulum::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi = NetworkParams::random(&[4, 64, 128, 3], true, &mut rng);
    let pi = NetworkParams::random(&[4, 64, 128, 1], false, &mut rng);
    let lyap = LyapunovFunction::new(phi, 1e-2, &sys).unwrap();
    let ctrl = PdController::new(pi, &sys).unwrap();
    let cl = ClosedLoop::new(&sys, &lyap, &ctrl);
    let mut s = ClScratch::new(&cl);
    let mut ls = LyapScratch::new(&lyap, &sys);

    let x = [0.7, -1.2];
    let th = [0.5];
    let n = 2000;

    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n {
        acc += lyap.value(&sys, &x, &th, &mut ls);
    }
    println!("V value:           {:8.2} us  ({acc:.3e})", t0.elapsed().as_secs_f64() * 1e6 / n as f64);

    let mut gx = [0.0; 2];
    let mut gt = [0.0; 1];
    let t0 = Instant::now();
    for _ in 0..n {
        acc += lyap.gradients(&sys, &x, &th, &mut ls, &mut gx, &mut gt);
    }
    println!("V gradients:       {:8.2} us", t0.elapsed().as_secs_f64() * 1e6 / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        acc += cl.worst_vertex_residual(&x, &th, 0.1, &mut s).unwrap().0;
    }
    println!("worst residual:    {:8.2} us", t0.elapsed().as_secs_f64() * 1e6 / n as f64);

    let t0 = Instant::now();
    for _ in 0..n {
        acc += cl
            .attack_gradient(&x, &th, 0.1, AttackMode::SumVertices, &mut s, &mut gx, &mut gt)
            .unwrap();
    }
    println!("attack grad (sum): {:8.2} us", t0.elapsed().as_secs_f64() * 1e6 / n as f64);

    let t0 = Instant::now();
    let mut prng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        acc += lyap.level_value(&sys, &x, 8, 4, &mut prng, &mut ls);
    }
    println!("level (8p,4s):     {:8.2} us", t0.elapsed().as_secs_f64() * 1e6 / 200.0);

    // Taped sample graph + backward.
    let mut tape = GradTape::new();
    let mut gs = GraphScratch::new();
    let t0 = Instant::now();
    let reps = 200;
    let mut nodes = 0;
    for _ in 0..reps {
        tape.clear();
        let nets = TapedNets::load(&mut tape, &lyap, &ctrl);
        let g = cl.record_sample(&mut tape, &nets, &mut gs, &x, &th).unwrap();
        let shifted = tape.add_const(g.vdots[0], 0.1 * g.disp_sq);
        let loss = tape.relu(shifted);
        tape.backward(loss);
        let mut grad = vec![0.0; nets.param_count()];
        nets.gradient(&tape, &mut grad).unwrap();
        nodes = tape.len();
        acc += grad[0];
    }
    println!(
        "taped sample:      {:8.2} us  ({nodes} nodes)",
        t0.elapsed().as_secs_f64() * 1e6 / reps as f64
    );

    // Chunked: params loaded once per 16 samples.
    let t0 = Instant::now();
    for _ in 0..(reps / 16).max(1) {
        tape.clear();
        let nets = TapedNets::load(&mut tape, &lyap, &ctrl);
        let mut terms = Vec::new();
        for _ in 0..16 {
            let g = cl.record_sample(&mut tape, &nets, &mut gs, &x, &th).unwrap();
            let shifted = tape.add_const(g.vdots[0], 0.1 * g.disp_sq);
            terms.push(tape.relu(shifted));
        }
        let loss = tape.sum(&terms);
        tape.backward(loss);
        let mut grad = vec![0.0; nets.param_count()];
        nets.gradient(&tape, &mut grad).unwrap();
        nodes = tape.len();
        acc += grad[0];
    }
    println!(
        "taped chunk16/smp: {:8.2} us  ({nodes} nodes)",
        t0.elapsed().as_secs_f64() * 1e6 / ((reps / 16).max(1) * 16) as f64
    );
    assert!(acc.is_finite());
}
