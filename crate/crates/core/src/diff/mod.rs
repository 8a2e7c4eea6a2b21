//! Differentiation engine for small tanh multilayer perceptrons.
//!
//! Three cooperating pieces:
//!
//! * [`NetworkParams`] — plain parameter storage with forward evaluation,
//!   exact input Jacobians and finite-difference self-checks.
//! * [`tape::GradTape`] — reverse-mode tape used for weight gradients of
//!   losses, including losses whose graph contains input-derivative nodes
//!   (see [`taped`]).
//! * [`MlpScratch`] — allocation-free fused kernels (forward, input
//!   backprop, directional forward, directional backprop) used by the hot
//!   evaluation paths. These compute the same quantities as the tape and
//!   are cross-checked against it in tests.
//!
//! Everything is 64-bit; evaluation is a pure function of (params, input).

pub mod tape;
pub mod taped;

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Weights and biases of one multilayer perceptron.
///
/// Layer `l` maps width `layer_dims[l]` to `layer_dims[l+1]` with a
/// row-major weight matrix. Hidden activations are tanh; the output layer
/// is tanh or identity according to `output_tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layer_dims: Vec<usize>,
    /// Per layer, row-major `out_width x in_width`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub output_tanh: bool,
}

impl NetworkParams {
    /// All-zero network of the given layer widths.
    pub fn zeros(layer_dims: &[usize], output_tanh: bool) -> Self {
        assert!(layer_dims.len() >= 2, "need at least input and output widths");
        let weights = (0..layer_dims.len() - 1)
            .map(|l| vec![0.0; layer_dims[l + 1] * layer_dims[l]])
            .collect();
        let biases = (0..layer_dims.len() - 1)
            .map(|l| vec![0.0; layer_dims[l + 1]])
            .collect();
        Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            output_tanh,
        }
    }

    /// Uniform init in +-1/sqrt(fan_in), biases zero.
    pub fn random<R: Rng>(layer_dims: &[usize], output_tanh: bool, rng: &mut R) -> Self {
        let mut net = Self::zeros(layer_dims, output_tanh);
        for l in 0..net.num_layers() {
            let bound = 1.0 / (layer_dims[l] as f64).sqrt();
            for w in net.weights[l].iter_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        net
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn in_width(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn out_width(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Shape and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("layer_dims must list positive widths".into()));
        }
        if self.weights.len() != self.num_layers() || self.biases.len() != self.num_layers() {
            return Err(Error::Config("layer count mismatch".into()));
        }
        for l in 0..self.num_layers() {
            let (nin, nout) = (self.layer_dims[l], self.layer_dims[l + 1]);
            if self.weights[l].len() != nin * nout {
                return Err(Error::Shape {
                    context: "weight matrix",
                    expected: nin * nout,
                    got: self.weights[l].len(),
                });
            }
            if self.biases[l].len() != nout {
                return Err(Error::Shape {
                    context: "bias vector",
                    expected: nout,
                    got: self.biases[l].len(),
                });
            }
            if self.weights[l].iter().chain(&self.biases[l]).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: l,
                    context: "network parameters",
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.weights[l].len() + self.biases[l].len())
            .sum()
    }

    /// Append all parameters (per layer: weights row-major, then biases).
    pub fn append_flat(&self, out: &mut Vec<f64>) {
        for l in 0..self.num_layers() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
    }

    /// Overwrite parameters from a flat slice in `append_flat` order.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut k = 0;
        for l in 0..self.num_layers() {
            let nw = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
    }

    /// Forward evaluation of a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.in_width() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.in_width(),
                got: input.len(),
            });
        }
        let mut scratch = MlpScratch::new(self);
        scratch.forward(self, input);
        Ok(scratch.output().to_vec())
    }

    /// Forward evaluation of a batch; pure function of (params, batch).
    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut scratch = MlpScratch::new(self);
        let mut out = Vec::with_capacity(inputs.len());
        for input in inputs {
            if input.len() != self.in_width() {
                return Err(Error::Shape {
                    context: "network input",
                    expected: self.in_width(),
                    got: input.len(),
                });
            }
            scratch.forward(self, input);
            out.push(scratch.output().to_vec());
        }
        Ok(out)
    }

    /// Exact Jacobian d(output)/d(input), shape `out_width x in_width`,
    /// assembled from one reverse sweep per output row.
    pub fn input_jacobian(&self, input: &[f64]) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.in_width() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.in_width(),
                got: input.len(),
            });
        }
        let mut scratch = MlpScratch::new(self);
        scratch.forward(self, input);
        for (l, a) in scratch.acts.iter().enumerate() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: l,
                    context: "forward activation",
                });
            }
        }
        let m = self.out_width();
        let mut jac = vec![vec![0.0; self.in_width()]; m];
        let mut cot = vec![0.0; m];
        for (i, row) in jac.iter_mut().enumerate() {
            cot.iter_mut().for_each(|c| *c = 0.0);
            cot[i] = 1.0;
            scratch.backprop_input(self, &cot, row);
        }
        Ok(jac)
    }

    /// Max over Jacobian entries of |analytic - central difference| / (|analytic| + h).
    pub fn finite_diff_check(&self, point: &[f64], h: f64) -> Result<f64> {
        assert!(h > 0.0, "step must be positive");
        let jac = self.input_jacobian(point)?;
        let mut worst = 0.0_f64;
        let mut xp = point.to_vec();
        let mut xm = point.to_vec();
        for j in 0..self.in_width() {
            xp.copy_from_slice(point);
            xm.copy_from_slice(point);
            xp[j] += h;
            xm[j] -= h;
            let fp = self.forward(&xp)?;
            let fm = self.forward(&xm)?;
            for i in 0..self.out_width() {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let rel = (jac[i][j] - fd).abs() / (jac[i][j].abs() + h);
                worst = worst.max(rel);
            }
        }
        Ok(worst)
    }
}

/// Batch of input vectors with optional directional-derivative seeds.
#[derive(Debug, Clone, Default)]
pub struct DualBatch {
    pub primal: Vec<Vec<f64>>,
    pub tangents: Option<Vec<Vec<f64>>>,
}

impl DualBatch {
    pub fn new(primal: Vec<Vec<f64>>, tangents: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if let Some(t) = &tangents {
            if t.len() != primal.len() {
                return Err(Error::Shape {
                    context: "dual batch size",
                    expected: primal.len(),
                    got: t.len(),
                });
            }
            for (p, tv) in primal.iter().zip(t) {
                if p.len() != tv.len() {
                    return Err(Error::Shape {
                        context: "dual batch width",
                        expected: p.len(),
                        got: tv.len(),
                    });
                }
            }
        }
        Ok(Self { primal, tangents })
    }
}

/// Evaluate the network on a dual batch: primal outputs plus, when seeds
/// are present, the matching directional derivatives of each output.
pub fn forward_dual_batch(net: &NetworkParams, batch: &DualBatch) -> Result<DualBatch> {
    let mut scratch = MlpScratch::new(net);
    let mut primal = Vec::with_capacity(batch.primal.len());
    let mut tangents = batch.tangents.as_ref().map(|_| Vec::with_capacity(batch.primal.len()));
    for (i, input) in batch.primal.iter().enumerate() {
        if input.len() != net.in_width() {
            return Err(Error::Shape {
                context: "network input",
                expected: net.in_width(),
                got: input.len(),
            });
        }
        match (&batch.tangents, &mut tangents) {
            (Some(seeds), Some(out_t)) => {
                let seed: &[f64] = &seeds[i];
                scratch.forward_dual(net, input, &[seed]);
                out_t.push(scratch.tangent_output(0).to_vec());
            }
            _ => scratch.forward(net, input),
        }
        primal.push(scratch.output().to_vec());
    }
    DualBatch::new(primal, tangents)
}

/// Reusable activation / tangent / cotangent buffers for one network shape.
///
/// The fused kernels here mirror the taped computation exactly (same
/// operation order) so that values agree bit for bit with the tape path.
#[derive(Debug, Clone)]
pub struct MlpScratch {
    /// Post-activation values, acts[0] = input, acts[L] = output.
    acts: Vec<Vec<f64>>,
    /// Directional derivatives of pre-activations, per channel.
    pre_tangents: Vec<Vec<Vec<f64>>>,
    /// Directional derivatives of post-activations, per channel.
    tangents: Vec<Vec<Vec<f64>>>,
    /// Scratch cotangent (primal reverse sweep).
    cot: Vec<Vec<f64>>,
    /// Scratch cotangent tangents (directional reverse sweep).
    cot_dot: Vec<Vec<f64>>,
}

const MAX_CHANNELS: usize = 4;

impl MlpScratch {
    pub fn new(net: &NetworkParams) -> Self {
        let acts: Vec<Vec<f64>> = net.layer_dims.iter().map(|&d| vec![0.0; d]).collect();
        Self {
            pre_tangents: vec![acts.clone(); MAX_CHANNELS],
            tangents: vec![acts.clone(); MAX_CHANNELS],
            cot: acts.clone(),
            cot_dot: acts.clone(),
            acts,
        }
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    pub fn tangent_output(&self, channel: usize) -> &[f64] {
        self.tangents[channel].last().unwrap()
    }

    /// Plain forward pass, storing all activations.
    pub fn forward(&mut self, net: &NetworkParams, input: &[f64]) {
        self.acts[0].copy_from_slice(input);
        for l in 0..net.num_layers() {
            let (nin, nout) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let w = &net.weights[l];
            let tanh_layer = l + 1 < net.num_layers() || net.output_tanh;
            let (lo, hi) = self.acts.split_at_mut(l + 1);
            let a = &lo[l];
            let out = &mut hi[0];
            for i in 0..nout {
                let row = &w[i * nin..(i + 1) * nin];
                let mut s = net.biases[l][i];
                for j in 0..nin {
                    s += row[j] * a[j];
                }
                out[i] = if tanh_layer { s.tanh() } else { s };
            }
        }
    }

    /// Forward pass carrying `seeds.len()` directional-derivative channels
    /// alongside the primal values. Seeds are in input space.
    pub fn forward_dual(&mut self, net: &NetworkParams, input: &[f64], seeds: &[&[f64]]) {
        let k = seeds.len();
        assert!(k <= MAX_CHANNELS);
        self.acts[0].copy_from_slice(input);
        for (c, seed) in seeds.iter().enumerate() {
            self.tangents[c][0].copy_from_slice(seed);
        }
        for l in 0..net.num_layers() {
            let (nin, nout) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let w = &net.weights[l];
            let tanh_layer = l + 1 < net.num_layers() || net.output_tanh;
            for i in 0..nout {
                let row = &w[i * nin..(i + 1) * nin];
                let mut s = net.biases[l][i];
                for j in 0..nin {
                    s += row[j] * self.acts[l][j];
                }
                let y = if tanh_layer { s.tanh() } else { s };
                self.acts[l + 1][i] = y;
                let dact = if tanh_layer { 1.0 - y * y } else { 1.0 };
                for c in 0..k {
                    let mut sd = 0.0;
                    let tin = &self.tangents[c][l];
                    for j in 0..nin {
                        sd += row[j] * tin[j];
                    }
                    self.pre_tangents[c][l + 1][i] = sd;
                    self.tangents[c][l + 1][i] = dact * sd;
                }
            }
        }
    }

    /// Reverse sweep from an output cotangent to the input gradient:
    /// `grad = J^T cot`. Requires a preceding `forward`/`forward_dual`.
    pub fn backprop_input(&mut self, net: &NetworkParams, out_cot: &[f64], grad: &mut [f64]) {
        let last = net.num_layers();
        self.cot[last].copy_from_slice(out_cot);
        for l in (0..net.num_layers()).rev() {
            let (nin, nout) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let w = &net.weights[l];
            let tanh_layer = l + 1 < net.num_layers() || net.output_tanh;
            let (lo, hi) = self.cot.split_at_mut(l + 1);
            let cin = &mut lo[l];
            let cout = &hi[0];
            cin.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..nout {
                let y = self.acts[l + 1][i];
                let m = if tanh_layer { cout[i] * (1.0 - y * y) } else { cout[i] };
                if m == 0.0 {
                    continue;
                }
                let row = &w[i * nin..(i + 1) * nin];
                for j in 0..nin {
                    cin[j] += row[j] * m;
                }
            }
        }
        grad.copy_from_slice(&self.cot[0]);
    }

    /// Directional derivative of `backprop_input` along forward channel
    /// `channel`: computes both `grad = J^T cot` and its tangent
    /// `grad_dot = D_seed(J^T cot)` given the cotangent and its tangent.
    /// Requires a preceding `forward_dual` that populated the channel.
    pub fn backprop_input_dual(
        &mut self,
        net: &NetworkParams,
        channel: usize,
        out_cot: &[f64],
        out_cot_dot: &[f64],
        grad: &mut [f64],
        grad_dot: &mut [f64],
    ) {
        let last = net.num_layers();
        self.cot[last].copy_from_slice(out_cot);
        self.cot_dot[last].copy_from_slice(out_cot_dot);
        for l in (0..net.num_layers()).rev() {
            let (nin, nout) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let w = &net.weights[l];
            let tanh_layer = l + 1 < net.num_layers() || net.output_tanh;
            let (clo, chi) = self.cot.split_at_mut(l + 1);
            let (dlo, dhi) = self.cot_dot.split_at_mut(l + 1);
            let cin = &mut clo[l];
            let cout = &chi[0];
            let din = &mut dlo[l];
            let dout = &dhi[0];
            cin.iter_mut().for_each(|v| *v = 0.0);
            din.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..nout {
                // m = act'(s) * cot; the tangent needs act''(s) * s_dot * cot.
                // tanh: act' = 1 - y^2, act'' enters as -2 y (1 - y^2).
                let (m, md) = if tanh_layer {
                    let y = self.acts[l + 1][i];
                    let dact = 1.0 - y * y;
                    let sdot = self.pre_tangents[channel][l + 1][i];
                    (
                        cout[i] * dact,
                        dout[i] * dact + cout[i] * (-2.0 * y * dact) * sdot,
                    )
                } else {
                    (cout[i], dout[i])
                };
                if m == 0.0 && md == 0.0 {
                    continue;
                }
                let row = &w[i * nin..(i + 1) * nin];
                for j in 0..nin {
                    cin[j] += row[j] * m;
                    din[j] += row[j] * md;
                }
            }
        }
        grad.copy_from_slice(&self.cot[0]);
        grad_dot.copy_from_slice(&self.cot_dot[0]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ident_layer(n: usize) -> NetworkParams {
        let mut net = NetworkParams::zeros(&[n, n], false);
        for i in 0..n {
            net.weights[0][i * n + i] = 1.0;
        }
        net
    }

    #[test]
    fn zero_net_maps_to_zero() {
        let net = NetworkParams::zeros(&[3, 5, 2], false);
        let out = net.forward(&[0.3, -1.2, 0.8]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_through() {
        let net = ident_layer(4);
        let v = vec![0.1, -0.7, 2.0, 0.0];
        assert_eq!(net.forward(&v).unwrap(), v);
    }

    #[test]
    fn scalar_tanh_composition() {
        // 1-1-1 net, hidden weight 1, output weight 1, identity output.
        let mut net = NetworkParams::zeros(&[1, 1, 1], false);
        net.weights[0][0] = 1.0;
        net.weights[1][0] = 1.0;
        let out = net.forward(&[0.5]).unwrap();
        assert!((out[0] - 0.5_f64.tanh()).abs() < 1e-15);
        assert!((out[0] - 0.462117).abs() < 1e-6);
    }

    #[test]
    fn shape_error_reported() {
        let net = NetworkParams::zeros(&[3, 2], false);
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::Shape { expected: 3, got: 2, .. })
        ));
    }

    #[test]
    fn linear_jacobian_is_weight_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = NetworkParams::random(&[4, 3], false, &mut rng);
        let jac = net.input_jacobian(&[0.2, -0.4, 1.0, 0.5]).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(jac[i][j], net.weights[0][i * 4 + j]);
            }
        }
    }

    #[test]
    fn zero_net_jacobian_is_zero() {
        let net = NetworkParams::zeros(&[3, 4, 2], true);
        let jac = net.input_jacobian(&[0.1, 0.2, 0.3]).unwrap();
        assert!(jac.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let net = NetworkParams::random(&[3, 8, 8, 2], true, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = net.finite_diff_check(&x, 1e-5).unwrap();
            assert!(err <= 1e-6, "finite diff error {err}");
        }
    }

    #[test]
    fn linear_finite_diff_at_machine_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = NetworkParams::random(&[4, 3], false, &mut rng);
        let err = net.finite_diff_check(&[0.1, 0.5, -0.3, 0.9], 1e-5).unwrap();
        assert!(err <= 1e-10, "linear net error {err}");
    }

    #[test]
    fn central_difference_richardson_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = NetworkParams::random(&[2, 6, 6, 1], true, &mut rng);
        let x = vec![0.3, -0.2];
        // Coarse steps so truncation dominates roundoff.
        let e1 = net.finite_diff_check(&x, 2e-3).unwrap();
        let e2 = net.finite_diff_check(&x, 1e-3).unwrap();
        let ratio = e1 / e2;
        assert!(
            (2.5..6.0).contains(&ratio),
            "expected ~4x decay, got ratio {ratio} ({e1} vs {e2})"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let net = NetworkParams::random(&[4, 16, 16, 3], true, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn linearity_with_identity_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let net = NetworkParams::random(&[3, 2], false, &mut rng);
        let v = vec![0.4, -1.1, 2.2];
        let scaled: Vec<f64> = v.iter().map(|x| 4.0 * x).collect();
        let a = net.forward(&v).unwrap();
        let b = net.forward(&scaled).unwrap();
        for (u, w) in a.iter().zip(&b) {
            assert_eq!((4.0 * u).to_bits(), w.to_bits());
        }
    }

    #[test]
    fn dual_batch_matches_jacobian_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let net = NetworkParams::random(&[3, 7, 2], true, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seed: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = DualBatch::new(vec![x.clone()], Some(vec![seed.clone()])).unwrap();
        let out = forward_dual_batch(&net, &batch).unwrap();
        let jac = net.input_jacobian(&x).unwrap();
        let t = &out.tangents.unwrap()[0];
        for i in 0..2 {
            let jv: f64 = (0..3).map(|j| jac[i][j] * seed[j]).sum();
            assert!((t[i] - jv).abs() < 1e-12);
        }
    }

    #[test]
    fn dual_batch_rejects_mismatched_seeds() {
        let err = DualBatch::new(vec![vec![1.0, 2.0]], Some(vec![vec![1.0]]));
        assert!(err.is_err());
    }
}
