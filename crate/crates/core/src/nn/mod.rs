//! Minimal differentiable compute: feed-forward approximators with
//! hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `f64` vector per network. Each layer stores
//! its weight matrix as `n_in x n_out` row-major followed by its bias, so a
//! batch forward pass is `x . W + b` on row-major batches.

mod adam;
mod checkpoint;
mod gradcheck;

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointEntry};
pub use gradcheck::{finite_diff_check, grad, FnObjective, Objective};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutputTransform {
    Identity,
    /// `scale * tanh(u)`.
    TanhScaled(f64),
    Softmax,
}

/// Shape of a feed-forward network. `widths` lists every layer width from
/// input to output, so `widths.len() - 1` affine layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximatorSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub output: OutputTransform,
}

impl ApproximatorSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, activation: Activation, transform: OutputTransform) -> Self {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self {
            widths,
            activation,
            output: transform,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::invalid("approximator needs at least one layer"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("approximator widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlice {
    n_in: usize,
    n_out: usize,
    weight: usize,
    bias: usize,
}

/// A network shape bound to a parameter layout. Holds no parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: ApproximatorSpec,
    layers: Vec<LayerSlice>,
    n_params: usize,
}

/// Flat parameters with the network they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: ApproximatorSpec,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: ApproximatorSpec) -> Result<Self> {
        let net = Mlp::new(layout.clone())?;
        check_dim("parameter vector", net.n_params(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { values, layout })
    }
}

/// Intermediate values of a batch forward pass, consumed by [`Mlp::backward_into`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new(spec: ApproximatorSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        let mut offset = 0;
        for pair in spec.widths.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            layers.push(LayerSlice {
                n_in,
                n_out,
                weight: offset,
                bias: offset + n_in * n_out,
            });
            offset += n_in * n_out + n_out;
        }
        Ok(Self {
            spec,
            layers,
            n_params: offset,
        })
    }

    pub fn spec(&self) -> &ApproximatorSpec {
        &self.spec
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Range of the final layer's bias inside the flat parameters.
    pub fn output_bias_range(&self) -> std::ops::Range<usize> {
        let last = self.layers.last().expect("validated spec");
        last.bias..last.bias + last.n_out
    }

    /// Uniform `+-1/sqrt(fan_in)` initialization; the output layer is scaled
    /// by `output_scale`.
    pub fn init(&self, rng: &mut Rng, output_scale: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let bound = 1.0 / (layer.n_in as f64).sqrt() * if i == last { output_scale } else { 1.0 };
            for p in &mut params[layer.weight..layer.bias + layer.n_out] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        params
    }

    fn weight<'a>(&self, params: &'a [f64], layer: &LayerSlice) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((layer.n_in, layer.n_out), &params[layer.weight..layer.bias])
            .expect("layout matches parameter slice")
    }

    fn bias<'a>(&self, params: &'a [f64], layer: &LayerSlice) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[layer.bias..layer.bias + layer.n_out])
    }

    /// Batch forward pass. `x` is `batch x input_dim`.
    pub fn forward_batch(&self, params: &[f64], x: ArrayView2<'_, f64>) -> ForwardCache {
        debug_assert_eq!(params.len(), self.n_params);
        debug_assert_eq!(x.ncols(), self.input_dim());
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut u = h.dot(&self.weight(params, layer));
            u += &self.bias(params, layer);
            let next = if i == last {
                apply_output(self.spec.output, &u)
            } else {
                apply_hidden(self.spec.activation, &u)
            };
            inputs.push(h);
            pre.push(u);
            h = next;
        }
        ForwardCache {
            inputs,
            pre,
            output: h,
        }
    }

    /// Evaluation-only forward pass.
    pub fn predict(&self, params: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_batch(params, x).output
    }

    /// Checked single-input forward pass.
    pub fn forward(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        check_dim("forward input", self.input_dim(), input.len())?;
        check_dim("forward params", self.n_params, params.len())?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("single row");
        Ok(self.predict(params, x).into_raw_vec_and_offset().0)
    }

    /// Backpropagates `d_out` (gradient of the loss w.r.t. the network
    /// output), adding the parameter gradient into `grad` and returning the
    /// gradient w.r.t. the input batch.
    pub fn backward_into(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        d_out: ArrayView2<'_, f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        debug_assert_eq!(grad.len(), self.n_params);
        let last = self.layers.len() - 1;
        let mut delta = output_backward(self.spec.output, &cache.pre[last], &cache.output, d_out);
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            if i != last {
                hidden_backward(self.spec.activation, &cache.pre[i], &mut delta);
            }
            let gw = cache.inputs[i].t().dot(&delta);
            for (g, v) in grad[layer.weight..layer.bias].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grad[layer.bias..layer.bias + layer.n_out].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            delta = delta.dot(&self.weight(params, layer).t());
        }
        delta
    }
}

fn apply_hidden(act: Activation, u: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => u.mapv(|v| if v > 0.0 { v } else { 0.0 }),
        Activation::Tanh => u.mapv(f64::tanh),
    }
}

/// Multiplies `delta` in place by the activation derivative at `u`. The relu
/// subgradient at 0 is 0.
fn hidden_backward(act: Activation, u: &Array2<f64>, delta: &mut Array2<f64>) {
    match act {
        Activation::Relu => delta.zip_mut_with(u, |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        }),
        Activation::Tanh => delta.zip_mut_with(u, |d, &v| {
            let t = v.tanh();
            *d *= 1.0 - t * t;
        }),
    }
}

fn apply_output(t: OutputTransform, u: &Array2<f64>) -> Array2<f64> {
    match t {
        OutputTransform::Identity => u.clone(),
        OutputTransform::TanhScaled(c) => u.mapv(|v| c * v.tanh()),
        OutputTransform::Softmax => {
            let mut out = u.clone();
            for mut row in out.rows_mut() {
                let p = softmax(row.as_slice().expect("standard layout"));
                row.assign(&Array1::from(p));
            }
            out
        }
    }
}

fn output_backward(t: OutputTransform, u: &Array2<f64>, y: &Array2<f64>, d_out: ArrayView2<'_, f64>) -> Array2<f64> {
    match t {
        OutputTransform::Identity => d_out.to_owned(),
        OutputTransform::TanhScaled(c) => {
            let mut d = d_out.to_owned();
            d.zip_mut_with(u, |d, &v| {
                let th = v.tanh();
                *d *= c * (1.0 - th * th);
            });
            d
        }
        OutputTransform::Softmax => {
            let mut d = d_out.to_owned();
            for (mut drow, prow) in d.rows_mut().into_iter().zip(y.rows()) {
                let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                drow.zip_mut_with(&prow, |g, &p| *g = p * (*g - dot));
            }
            d
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(logits)))`, stable.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Row-major batch view helper.
pub fn batch_view(data: &[f64], cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((data.len() / cols, cols), data).expect("data length is a multiple of cols")
}

/// Soft target update `target <- tau * online + (1 - tau) * target`.
pub fn polyak_update(target: &mut [f64], online: &[f64], tau: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Straight-line evaluation used as an oracle: explicit loops over the
    /// `n_in x n_out` layout with no ndarray involvement.
    fn oracle_forward(spec: &ApproximatorSpec, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let mut off = 0;
        let n_layers = spec.widths.len() - 1;
        for l in 0..n_layers {
            let (n_in, n_out) = (spec.widths[l], spec.widths[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut u = vec![0.0; n_out];
            for o in 0..n_out {
                let mut acc = b[o];
                for i in 0..n_in {
                    acc += h[i] * w[i * n_out + o];
                }
                u[o] = acc;
            }
            h = if l + 1 < n_layers {
                u.iter()
                    .map(|&v| match spec.activation {
                        Activation::Relu => v.max(0.0),
                        Activation::Tanh => v.tanh(),
                    })
                    .collect()
            } else {
                match spec.output {
                    OutputTransform::Identity => u,
                    OutputTransform::TanhScaled(c) => u.iter().map(|v| c * v.tanh()).collect(),
                    OutputTransform::Softmax => {
                        let m = u.iter().cloned().fold(f64::MIN, f64::max);
                        let e: Vec<f64> = u.iter().map(|v| (v - m).exp()).collect();
                        let s: f64 = e.iter().sum();
                        e.iter().map(|v| v / s).collect()
                    }
                }
            };
        }
        h
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Mlp::new(ApproximatorSpec::new(3, &[4], 2, Activation::Relu, OutputTransform::Identity)).unwrap();
        let out = net.forward(&vec![0.0; net.n_params()], &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let net = Mlp::new(ApproximatorSpec::new(1, &[], 2, Activation::Relu, OutputTransform::Softmax)).unwrap();
        let out = net.forward(&vec![0.0; net.n_params()], &[0.3]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_computed_tiny_net() {
        // 2 -> 2 (relu) -> 1, weights chosen by hand:
        // layer 1: W = [[1, -1], [2, 0.5]] (n_in x n_out), b = [0.5, -1]
        // layer 2: W = [[2], [-3]], b = [0.25]
        // input [1, 2]: u1 = [1 + 4 + 0.5, -1 + 1 - 1] = [5.5, -1] -> relu [5.5, 0]
        // out = 2 * 5.5 + 0.25 = 11.25
        let spec = ApproximatorSpec::new(2, &[2], 1, Activation::Relu, OutputTransform::Identity);
        let net = Mlp::new(spec).unwrap();
        let params = vec![1.0, -1.0, 2.0, 0.5, 0.5, -1.0, 2.0, -3.0, 0.25];
        assert_eq!(net.forward(&params, &[1.0, 2.0]).unwrap(), vec![11.25]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = rng::seeded(3);
        for (act, out) in [
            (Activation::Relu, OutputTransform::Identity),
            (Activation::Tanh, OutputTransform::TanhScaled(2.0)),
            (Activation::Tanh, OutputTransform::Softmax),
        ] {
            let spec = ApproximatorSpec::new(4, &[5, 3], 3, act, out);
            let net = Mlp::new(spec.clone()).unwrap();
            let params = net.init(&mut rng, 1.0);
            let input: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = net.forward(&params, &input).unwrap();
            let want = oracle_forward(&spec, &params, &input);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Mlp::new(ApproximatorSpec::new(2, &[3], 1, Activation::Relu, OutputTransform::Identity)).unwrap();
        let mut params = vec![0.1; net.n_params()];
        assert!(matches!(net.forward(&params, &[1.0]), Err(Error::DimensionMismatch { .. })));
        params[0] = f64::NAN;
        assert!(matches!(net.forward(&params, &[1.0, 1.0]), Err(Error::NonFinite(_))));
        assert!(Mlp::new(ApproximatorSpec { widths: vec![3], activation: Activation::Relu, output: OutputTransform::Identity }).is_err());
    }

    #[test]
    fn forward_is_repeatable() {
        let net = Mlp::new(ApproximatorSpec::new(3, &[8, 8], 2, Activation::Relu, OutputTransform::Identity)).unwrap();
        let params = net.init(&mut rng::seeded(0), 1.0);
        let a = net.forward(&params, &[0.1, 0.2, 0.3]).unwrap();
        let b = net.forward(&params, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a, b);
    }
}
