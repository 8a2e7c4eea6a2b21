//! Network evaluation recorded on a [`GradTape`].
//!
//! Parameters are loaded as tape leaves once per sample graph; forward
//! passes then record every multiply-accumulate. Directional derivatives
//! with respect to the *inputs* are recorded as ordinary tape operations
//! (one tangent channel per direction), so a single reverse sweep over the
//! finished graph yields d(loss)/d(weights) even when the loss consumes
//! those input derivatives.

use super::tape::{GradTape, Var};
use super::NetworkParams;
use crate::error::{Error, Result};

/// Tape leaf ids of one network's parameters, in `append_flat` order.
#[derive(Debug, Clone)]
pub struct TapedParams {
    layer_start: Vec<u32>,
    dims: Vec<usize>,
    count: usize,
}

impl TapedParams {
    /// Push every weight and bias of `net` onto the tape as leaves.
    pub fn load(tape: &mut GradTape, net: &NetworkParams) -> Self {
        let mut layer_start = Vec::with_capacity(net.num_layers());
        for l in 0..net.num_layers() {
            let mut first = None;
            for &w in &net.weights[l] {
                let v = tape.leaf(w);
                first.get_or_insert(v.0);
            }
            for &b in &net.biases[l] {
                let v = tape.leaf(b);
                first.get_or_insert(v.0);
            }
            layer_start.push(first.expect("layer has parameters"));
        }
        Self {
            layer_start,
            dims: net.layer_dims.clone(),
            count: net.param_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.count
    }

    #[inline]
    fn weight(&self, l: usize, i: usize, j: usize) -> Var {
        let nin = self.dims[l];
        Var(self.layer_start[l] + (i * nin + j) as u32)
    }

    #[inline]
    fn bias(&self, l: usize, i: usize) -> Var {
        let nin = self.dims[l];
        let nout = self.dims[l + 1];
        Var(self.layer_start[l] + (nout * nin + i) as u32)
    }

    /// Gather d(loss)/d(param) after a backward sweep, flat order.
    pub fn gradient(&self, tape: &GradTape, out: &mut [f64]) -> Result<()> {
        if self.count == 0 {
            return Err(Error::EmptyGradient);
        }
        assert_eq!(out.len(), self.count);
        let mut k = 0;
        for l in 0..self.dims.len() - 1 {
            let n = self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
            for off in 0..n {
                out[k] = tape.adjoint(Var(self.layer_start[l] + off as u32));
                k += 1;
            }
        }
        Ok(())
    }
}

/// Weight gradient of a recorded scalar loss, aligned with the flat
/// parameter layout of the network that produced `params`.
pub fn weight_gradient(tape: &mut GradTape, loss: Var, params: &TapedParams) -> Result<Vec<f64>> {
    if params.param_count() == 0 {
        return Err(Error::EmptyGradient);
    }
    tape.backward(loss);
    let mut grad = vec![0.0; params.param_count()];
    params.gradient(tape, &mut grad)?;
    Ok(grad)
}

/// Reusable buffers for recording forward passes of one network shape.
#[derive(Debug, Default, Clone)]
pub struct TapedMlp {
    cur: Vec<Var>,
    next: Vec<Var>,
    tan_cur: Vec<Vec<Var>>,
    tan_next: Vec<Vec<Var>>,
}

impl TapedMlp {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a primal forward pass. `input` holds already-recorded vars.
    /// Returns the output vars.
    pub fn forward(
        &mut self,
        tape: &mut GradTape,
        params: &TapedParams,
        net: &NetworkParams,
        input: &[Var],
    ) -> Vec<Var> {
        assert_eq!(input.len(), net.in_width());
        self.cur.clear();
        self.cur.extend_from_slice(input);
        for l in 0..net.num_layers() {
            let (nin, nout) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let tanh_layer = l + 1 < net.num_layers() || net.output_tanh;
            self.next.clear();
            for i in 0..nout {
                let mut s = params.bias(l, i);
                for j in 0..nin {
                    let p = tape.mul(params.weight(l, i, j), self.cur[j]);
                    s = tape.add(s, p);
                }
                self.next.push(if tanh_layer { tape.tanh(s) } else { s });
            }
            std::mem::swap(&mut self.cur, &mut self.next);
        }
        self.cur.clone()
    }

    /// Record a forward pass with `seeds.len()` input-tangent channels.
    /// A seed entry of `None` is a structural zero (skipped in products).
    /// Returns (primal outputs, per-channel tangent outputs).
    #[allow(clippy::type_complexity)]
    pub fn forward_dual(
        &mut self,
        tape: &mut GradTape,
        params: &TapedParams,
        net: &NetworkParams,
        input: &[Var],
        seeds: &[Vec<Option<Var>>],
    ) -> (Vec<Var>, Vec<Vec<Var>>) {
        let k = seeds.len();
        assert_eq!(input.len(), net.in_width());
        self.cur.clear();
        self.cur.extend_from_slice(input);
        self.tan_cur.resize(k, Vec::new());
        self.tan_next.resize(k, Vec::new());
        // First layer handled with Option seeds, later layers dense.
        let mut first = true;
        let mut seed_cur: Vec<Vec<Option<Var>>> = seeds.to_vec();
        for l in 0..net.num_layers() {
            let (nin, nout) = (net.layer_dims[l], net.layer_dims[l + 1]);
            let tanh_layer = l + 1 < net.num_layers() || net.output_tanh;
            self.next.clear();
            for t in &mut self.tan_next {
                t.clear();
            }
            for i in 0..nout {
                let mut s = params.bias(l, i);
                for j in 0..nin {
                    let p = tape.mul(params.weight(l, i, j), self.cur[j]);
                    s = tape.add(s, p);
                }
                // Tangent pre-activations per channel.
                let mut sdots: Vec<Option<Var>> = Vec::with_capacity(k);
                for c in 0..k {
                    let mut sd: Option<Var> = None;
                    for j in 0..nin {
                        let tj = if first {
                            seed_cur[c][j]
                        } else {
                            Some(self.tan_cur[c][j])
                        };
                        if let Some(tj) = tj {
                            let p = tape.mul(params.weight(l, i, j), tj);
                            sd = Some(match sd {
                                Some(acc) => tape.add(acc, p),
                                None => p,
                            });
                        }
                    }
                    sdots.push(sd);
                }
                if tanh_layer {
                    let y = tape.tanh(s);
                    self.next.push(y);
                    // dact = 1 - y^2, same order as the fused kernels so
                    // both paths agree bit for bit.
                    let y2 = tape.mul(y, y);
                    let ny2 = tape.neg(y2);
                    let dact = tape.add_const(ny2, 1.0);
                    for (c, sd) in sdots.into_iter().enumerate() {
                        let sd = sd.expect("dense tangent after first layer");
                        self.tan_next[c].push(tape.mul(dact, sd));
                    }
                } else {
                    self.next.push(s);
                    for (c, sd) in sdots.into_iter().enumerate() {
                        self.tan_next[c].push(sd.expect("dense tangent after first layer"));
                    }
                }
            }
            std::mem::swap(&mut self.cur, &mut self.next);
            std::mem::swap(&mut self.tan_cur, &mut self.tan_next);
            if first {
                first = false;
                seed_cur.clear();
            }
        }
        (self.cur.clone(), self.tan_cur.clone())
    }
}
