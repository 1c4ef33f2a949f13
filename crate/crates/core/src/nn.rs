//! Dense tanh networks with hand-written reverse mode.
//!
//! Small enough to keep every buffer explicit: a [`ModelParams`] is a chain of
//! affine layers, each followed by `tanh` or nothing. Gradients come back as a
//! [`GradientBundle`] holding both the parameter and the input gradient, which
//! is what the attack (input side) and the adaptation losses (parameter side)
//! consume.

use crate::error::{contract, Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            let z = b + dot(row, input);
            match self.activation {
                Activation::Tanh => z.tanh(),
                Activation::Identity => z,
            }
        }));
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return contract("network needs at least one layer");
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return contract(format!("layer {i} buffers do not match {}x{}", l.outputs, l.inputs));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return contract(format!("layer {i} has non-finite entries"));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return contract(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                ));
            }
        }
        Ok(Self { layers })
    }

    /// Xavier-uniform weights, zero biases. `dims` lists the width of every
    /// activation including input and output; `activations` has one entry per layer.
    pub fn xavier<R: Rng + ?Sized>(dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(dims.len(), activations.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out, act);
                for v in &mut layer.weights {
                    *v = rng.gen_range(-bound..bound);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        assert_eq!(input.len(), self.input_dim(), "contract violation: input width");
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            layer.apply(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Activations of every layer, starting with the input itself.
    fn trace(&self, input: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(input.len(), self.input_dim(), "contract violation: input width");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(acts.last().unwrap(), &mut out);
            acts.push(out);
        }
        acts
    }

    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> GradientBundle {
        let mut params = ParamGrads::zeros_like(self);
        let input_grad = self.backward_accumulate(input, upstream, 1.0, Some(&mut params));
        GradientBundle { params, input_grad }
    }

    /// Adds `scale * d<upstream, f(input)>/d theta` into `acc` (when given) and
    /// returns the input gradient (unscaled).
    pub fn backward_accumulate(
        &self,
        input: &[f64],
        upstream: &[f64],
        scale: f64,
        mut acc: Option<&mut ParamGrads>,
    ) -> Vec<f64> {
        assert_eq!(upstream.len(), self.output_dim(), "contract violation: upstream width");
        let acts = self.trace(input);
        let mut delta = upstream.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let out = &acts[li + 1];
            if layer.activation == Activation::Tanh {
                for (d, a) in delta.iter_mut().zip(out) {
                    *d *= 1.0 - a * a;
                }
            }
            let prev = &acts[li];
            if let Some(acc) = acc.as_deref_mut() {
                let g = &mut acc.layers[li];
                for ((row, gb), &d) in g.weights.chunks_exact_mut(layer.inputs).zip(&mut g.bias).zip(&delta) {
                    let sd = scale * d;
                    *gb += sd;
                    for (gw, p) in row.iter_mut().zip(prev) {
                        *gw += sd * p;
                    }
                }
            }
            let mut back = vec![0.0; layer.inputs];
            for (row, &d) in layer.weights.chunks_exact(layer.inputs).zip(&delta) {
                for (b, w) in back.iter_mut().zip(row) {
                    *b += d * w;
                }
            }
            delta = back;
        }
        delta
    }

    /// Parameters flattened layer by layer (weights then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "contract violation: flat parameter length");
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Gradient buffers shaped like a [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, factor: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += factor * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += factor * y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: ParamGrads,
    pub input_grad: Vec<f64>,
}

/// Softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return contract(format!("label {label} out of range for {} logits", logits.len()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Heavy-ball SGD: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, len: usize) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("invalid sgd settings lr={lr} momentum={momentum}")));
        }
        Ok(Self { lr, momentum, velocity: vec![0.0; len] })
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.velocity.len(), "contract violation: optimizer width");
        assert_eq!(grads.len(), self.velocity.len(), "contract violation: gradient width");
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// One optimizer step on a whole network.
pub fn sgd_step(params: &mut ModelParams, grads: &ParamGrads, opt: &mut Sgd) -> Result<()> {
    let mut flat = params.to_flat();
    opt.step(&mut flat, &grads.to_flat())?;
    params.set_flat(&flat);
    Ok(())
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between the analytic gradient of
/// `cross_entropy(forward(input), label)` and central differences, over all
/// parameters and input coordinates.
pub fn grad_check(params: &ModelParams, input: &[f64], label: usize, h: f64) -> f64 {
    let loss = |p: &ModelParams, x: &[f64]| cross_entropy(&p.forward(x), label).unwrap().0;
    let (_, g_logits) = cross_entropy(&params.forward(input), label).unwrap();
    let analytic = params.backward(input, &g_logits);

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    let base = params.to_flat();
    for (i, a) in analytic.params.to_flat().into_iter().enumerate() {
        let mut flat = base.clone();
        flat[i] = base[i] + h;
        probe.set_flat(&flat);
        let up = loss(&probe, input);
        flat[i] = base[i] - h;
        probe.set_flat(&flat);
        let down = loss(&probe, input);
        worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
    }
    let mut x = input.to_vec();
    for (i, a) in analytic.input_grad.iter().enumerate() {
        x[i] = input[i] + h;
        let up = loss(params, &x);
        x[i] = input[i] - h;
        let down = loss(params, &x);
        x[i] = input[i];
        worst = worst.max(rel_err(*a, (up - down) / (2.0 * h)));
    }
    worst
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSNN";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the flat binary checkpoint:
/// `"CSNN"`, version `u32`, layer count `u32`, then per layer
/// `(inputs u32, outputs u32, activation u8)`, then for every layer the
/// row-major weights followed by the bias as little-endian `f64`.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.layers.len() as u32).to_le_bytes())?;
    for l in &params.layers {
        w.write_all(&(l.inputs as u32).to_le_bytes())?;
        w.write_all(&(l.outputs as u32).to_le_bytes())?;
        w.write_all(&[match l.activation {
            Activation::Tanh => 0u8,
            Activation::Identity => 1u8,
        }])?;
    }
    for v in params.to_flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a network checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let inputs = read_u32(&mut r)? as usize;
        let outputs = read_u32(&mut r)? as usize;
        let mut act = [0u8; 1];
        r.read_exact(&mut act)?;
        let activation = match act[0] {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            other => return Err(Error::Data(format!("unknown activation tag {other}"))),
        };
        layers.push(Layer::zeros(inputs, outputs, activation));
    }
    let mut params = ModelParams::new(layers).map_err(|e| Error::Data(e.to_string()))?;
    let mut flat = vec![0.0; params.num_params()];
    let mut buf = [0u8; 8];
    for v in &mut flat {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    params.set_flat(&flat);
    ModelParams::new(params.layers).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64, dims: &[usize]) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acts = vec![Activation::Tanh; dims.len() - 2];
        acts.push(Activation::Identity);
        let mut p = ModelParams::xavier(dims, &acts, &mut rng);
        // Non-zero biases so the check exercises them.
        for l in p.layers_mut() {
            for b in &mut l.bias {
                *b = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    /// Second evaluator written independently of `Layer::apply`.
    fn naive_forward(p: &ModelParams, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in p.layers() {
            let mut next = vec![0.0; l.outputs];
            for o in 0..l.outputs {
                let mut z = l.bias[o];
                for i in 0..l.inputs {
                    z += l.weights[o * l.inputs + i] * cur[i];
                }
                next[o] = if l.activation == Activation::Tanh { z.tanh() } else { z };
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn identity_and_zero_layers() {
        let mut id = Layer::zeros(2, 2, Activation::Identity);
        id.weights = vec![1.0, 0.0, 0.0, 1.0];
        let p = ModelParams::new(vec![id]).unwrap();
        assert_eq!(p.forward(&[1.0, 2.0]), vec![1.0, 2.0]);
        let g = p.backward(&[1.0, 2.0], &[1.0, 0.0]);
        assert_eq!(g.input_grad, vec![1.0, 0.0]);

        let z = ModelParams::new(vec![Layer::zeros(3, 2, Activation::Tanh)]).unwrap();
        assert_eq!(z.forward(&[0.3, -2.0, 5.0]), vec![0.0, 0.0]);
        let x = [0.3, -2.0, 5.0];
        let up = [0.7, -1.1];
        let g = z.backward(&x, &up);
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(g.params.layers[0].weights[o * 3 + i], up[o] * x[i]);
            }
        }
    }

    #[test]
    fn forward_matches_naive_evaluator() {
        let p = random_net(7, &[4, 6, 3]);
        let x = [1.0, 0.0, 0.0, 0.0];
        let a = p.forward(&x);
        let b = naive_forward(&p, &x);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
        assert_eq!(p.forward(&x), a);
    }

    #[test]
    fn chain_mismatch_rejected() {
        let r = ModelParams::new(vec![Layer::zeros(2, 3, Activation::Tanh), Layer::zeros(4, 1, Activation::Identity)]);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let (l, g) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        let (l, _) = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-300 || l == 0.0);
        let (l, g) = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((l - 0.407_605_964_444_380_1).abs() < 1e-14);
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(cross_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn sgd_updates() {
        let mut opt = Sgd::new(0.1, 0.0, 1).unwrap();
        let mut p = [1.0];
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);

        let mut opt = Sgd::new(0.1, 0.9, 1).unwrap();
        let mut p = [0.0];
        opt.step(&mut p, &[1.0]).unwrap();
        opt.step(&mut p, &[1.0]).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);

        let mut opt = Sgd::new(0.1, 0.9, 2).unwrap();
        let mut p = [0.3, -0.2];
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [0.3, -0.2]);

        assert!(matches!(opt.step(&mut p, &[f64::NAN, 0.0]), Err(Error::Training(_))));
        assert!(Sgd::new(0.0, 0.0, 1).is_err());
        assert!(Sgd::new(0.1, 1.0, 1).is_err());
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for seed in 0..10 {
            let p = random_net(seed, &[5, 8, 7, 3]);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = grad_check(&p, &x, (seed % 3) as usize, 1e-5);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_network_grad_check() {
        let p = ModelParams::new(vec![Layer::zeros(3, 4, Activation::Tanh), Layer::zeros(4, 2, Activation::Identity)])
            .unwrap();
        assert!(grad_check(&p, &[0.1, 0.2, -0.3], 1, 1e-5) < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let p = random_net(3, &[4, 5, 2]);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"CSNN");
        assert_eq!(buf.len(), 4 + 4 + 4 + 2 * 9 + 8 * p.num_params());
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Data(_))));
    }
}
