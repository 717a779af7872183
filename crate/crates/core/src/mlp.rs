//! Small multilayer perceptron used as the Q-network.
//!
//! Hidden layers are affine + ReLU, the output layer is affine. Everything
//! is `f64` and row-major: a layer's weight matrix has one row per output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dqn::Transition;

#[derive(Debug, Error, PartialEq)]
pub enum MlpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameter and gradient shapes differ")]
    ShapeMismatch,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("bad snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], biases: vec![0.0; out_dim] }
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.in_dim == other.in_dim
            && self.out_dim == other.out_dim
            && self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.in_dim).zip(&self.biases) {
            out.push(b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

/// Network parameters (the prediction network or its frozen target copy).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Gradients with the same shape as [`NetworkParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self { layers: params.layers.iter().map(|l| Layer::zeros(l.in_dim, l.out_dim)).collect() }
    }

    /// All entries, layer by layer, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases).copied()).collect()
    }
}

impl NetworkParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Mutable reference to the `index`-th parameter in [`Gradients::flat`] order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                return &mut l.weights[index];
            }
            index -= l.weights.len();
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

/// Glorot-uniform weights and zero biases from a seeded generator.
pub fn init_params(
    input_dim: usize,
    hidden_sizes: &[usize],
    output_dim: usize,
    seed: u64,
) -> NetworkParams {
    assert!(input_dim > 0 && output_dim > 0, "dimensions must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden_sizes);
    dims.push(output_dim);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            assert!(fan_out > 0, "hidden sizes must be positive");
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
            Layer { in_dim: fan_in, out_dim: fan_out, weights, biases: vec![0.0; fan_out] }
        })
        .collect();
    NetworkParams { layers, hidden_activation: Activation::Relu, output_activation: Activation::Identity }
}

/// Q-values for every action.
pub fn forward(params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>, MlpError> {
    check_input(params, input)?;
    let mut cur = input.to_vec();
    let mut next = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        layer.affine(&cur, &mut next);
        let act = params.activation(i);
        next.iter_mut().for_each(|v| *v = act.apply(*v));
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

fn check_input(params: &NetworkParams, input: &[f64]) -> Result<(), MlpError> {
    if input.len() != params.input_dim() {
        return Err(MlpError::DimensionMismatch { expected: params.input_dim(), got: input.len() });
    }
    Ok(())
}

/// Activations kept for backpropagation: `inputs[i]` feeds layer `i`,
/// `pre[i]` is that layer's affine output.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

fn forward_trace(params: &NetworkParams, input: &[f64]) -> Trace {
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut cur = input.to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = Vec::with_capacity(layer.out_dim);
        layer.affine(&cur, &mut z);
        let act = params.activation(i);
        let a = z.iter().map(|v| act.apply(*v)).collect();
        inputs.push(std::mem::replace(&mut cur, a));
        pre.push(z);
    }
    Trace { inputs, pre, output: cur }
}

/// Accumulates the gradient of `sum_j d_output[j] * output[j]` into `grads`.
fn backward(params: &NetworkParams, trace: &Trace, d_output: Vec<f64>, grads: &mut Gradients) {
    let mut delta = d_output;
    for i in (0..params.layers.len()).rev() {
        let layer = &params.layers[i];
        let act = params.activation(i);
        for (d, z) in delta.iter_mut().zip(&trace.pre[i]) {
            *d *= act.derivative(*z);
        }
        let g = &mut grads.layers[i];
        let input = &trace.inputs[i];
        for (row, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            g.biases[row] += d;
            let gw = &mut g.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
            for (w, x) in gw.iter_mut().zip(input) {
                *w += d * x;
            }
        }
        if i > 0 {
            let mut prev = vec![0.0; layer.in_dim];
            for (row, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let w = &layer.weights[row * layer.in_dim..(row + 1) * layer.in_dim];
                for (p, wv) in prev.iter_mut().zip(w) {
                    *p += d * wv;
                }
            }
            delta = prev;
        }
    }
}

/// Bootstrap target `r + gamma * max_a Q(s', a; target)`, or `r` for a
/// terminal transition.
pub fn td_target(target: &NetworkParams, t: &Transition, gamma: f64) -> Result<f64, MlpError> {
    if t.terminal {
        return Ok(t.r);
    }
    let next = forward(target, t.s_next.values())?;
    Ok(t.r + gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Mean squared TD error over `batch` and its exact gradient with respect
/// to `params`. `target` is treated as a constant.
pub fn loss_and_gradients(
    params: &NetworkParams,
    target: &NetworkParams,
    batch: &[Transition],
    gamma: f64,
) -> Result<(f64, Gradients), MlpError> {
    if batch.is_empty() {
        return Err(MlpError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for t in batch {
        check_input(params, t.s.values())?;
        let a = t.a.index();
        if a >= params.output_dim() {
            return Err(MlpError::DimensionMismatch { expected: params.output_dim(), got: a + 1 });
        }
        let y = td_target(target, t, gamma)?;
        let trace = forward_trace(params, t.s.values());
        let residual = trace.output[a] - y;
        loss += residual * residual;
        let mut d_out = vec![0.0; params.output_dim()];
        d_out[a] = 2.0 * residual / n;
        backward(params, &trace, d_out, &mut grads);
    }
    Ok((loss / n, grads))
}

/// Loss only; used by tests and metrics.
pub fn batch_loss(
    params: &NetworkParams,
    target: &NetworkParams,
    batch: &[Transition],
    gamma: f64,
) -> Result<f64, MlpError> {
    if batch.is_empty() {
        return Err(MlpError::EmptyBatch);
    }
    let mut loss = 0.0;
    for t in batch {
        let q = forward(params, t.s.values())?;
        let pred = *q
            .get(t.a.index())
            .ok_or(MlpError::DimensionMismatch { expected: q.len(), got: t.a.index() + 1 })?;
        let r = pred - td_target(target, t, gamma)?;
        loss += r * r;
    }
    Ok(loss / batch.len() as f64)
}

pub fn sgd_step(params: &NetworkParams, grads: &Gradients, alpha: f64) -> Result<NetworkParams, MlpError> {
    if params.layers.len() != grads.layers.len()
        || !params.layers.iter().zip(&grads.layers).all(|(p, g)| p.same_shape(g))
    {
        return Err(MlpError::ShapeMismatch);
    }
    let mut out = params.clone();
    for (p, g) in out.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in p.weights.iter_mut().zip(&g.weights) {
            *w -= alpha * gw;
        }
        for (b, gb) in p.biases.iter_mut().zip(&g.biases) {
            *b -= alpha * gb;
        }
    }
    Ok(out)
}

/// Deep copy used to refresh the target network.
pub fn copy_params(src: &NetworkParams) -> NetworkParams {
    src.clone()
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"QNET";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Binary checkpoint: `"QNET"`, version, layer count, then per layer
/// `in_dim`, `out_dim`, row-major weights and biases. Integers are `u32`
/// and reals `f64`, all little-endian.
pub fn to_snapshot(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * params.param_count() + 8 * params.layers.len());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        out.extend_from_slice(&(l.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        for v in l.weights.iter().chain(&l.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_snapshot(bytes: &[u8]) -> Result<NetworkParams, MlpError> {
    let err = |m: &str| MlpError::Snapshot(m.to_owned());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], MlpError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| err("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != SNAPSHOT_MAGIC {
        return Err(err("bad magic"));
    }
    let read_u32 = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let version = read_u32(take(4)?);
    if version != SNAPSHOT_VERSION as usize {
        return Err(MlpError::Snapshot(format!("unsupported version {version}")));
    }
    let count = read_u32(take(4)?);
    let mut layers = Vec::new();
    for _ in 0..count {
        let in_dim = read_u32(take(4)?);
        let out_dim = read_u32(take(4)?);
        if let Some(prev) = layers.last().map(|l: &Layer| l.out_dim) {
            if prev != in_dim {
                return Err(err("adjacent layer dimensions disagree"));
            }
        }
        let mut read_vec = |n: usize| -> Result<Vec<f64>, MlpError> {
            let raw = take(n.checked_mul(8).ok_or_else(|| err("size overflow"))?)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let weights = read_vec(in_dim * out_dim)?;
        let biases = read_vec(out_dim)?;
        layers.push(Layer { in_dim, out_dim, weights, biases });
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes"));
    }
    if layers.is_empty() {
        return Err(err("no layers"));
    }
    Ok(NetworkParams { layers, hidden_activation: Activation::Relu, output_activation: Activation::Identity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashchain::{ActionId, EnvState};

    fn transition(s: Vec<f64>, a: u32, r: f64, s_next: Vec<f64>, terminal: bool) -> Transition {
        Transition { s: EnvState(s), a: ActionId(a), r, s_next: EnvState(s_next), terminal }
    }

    fn single_linear(weights: Vec<f64>, biases: Vec<f64>, in_dim: usize) -> NetworkParams {
        let out_dim = biases.len();
        NetworkParams {
            layers: vec![Layer { in_dim, out_dim, weights, biases }],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(init_params(2, &[8, 8], 4, 3), init_params(2, &[8, 8], 4, 3));
        assert_ne!(init_params(2, &[8, 8], 4, 3), init_params(2, &[8, 8], 4, 4));
    }

    #[test]
    fn init_without_hidden_layers() {
        let p = init_params(3, &[], 2, 0);
        assert_eq!(p.layers.len(), 1);
        assert_eq!((p.input_dim(), p.output_dim()), (3, 2));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let p = init_params(4, &[8], 3, 11);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!((bound - 0.7071).abs() < 1e-4);
        assert!(p.layers[0].weights.iter().all(|w| w.abs() <= bound));
        assert!(p.layers[0].biases.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = init_params(2, &[5], 3, 1);
        for l in &mut p.layers {
            l.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        assert_eq!(forward(&p, &[3.0, -2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_network() {
        let p = single_linear(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2);
        assert_eq!(forward(&p, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = init_params(2, &[4], 3, 1);
        assert_eq!(forward(&p, &[1.0]), Err(MlpError::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn forward_matches_numpy() {
        // 2 -> 3 (ReLU) -> 2. Expected output computed with numpy:
        //   h = maximum(W1 @ x + b1, 0); y = W2 @ h + b2
        let p = NetworkParams {
            layers: vec![
                Layer {
                    in_dim: 2,
                    out_dim: 3,
                    weights: vec![0.5, -1.25, 0.75, 0.3, -0.6, -0.2],
                    biases: vec![0.1, -0.4, 0.05],
                },
                Layer { in_dim: 3, out_dim: 2, weights: vec![1.5, -0.7, 0.2, -0.3, 0.9, 1.1], biases: vec![0.25, -0.5] },
            ],
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        };
        let y = forward(&p, &[2.0, 0.5]).unwrap();
        let expected = [0.0875, 0.4825];
        for (a, b) in y.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn loss_arithmetic_single_transition() {
        // Q(s, a) = 0.5 from the prediction net; target net gives max 2.0.
        let theta = single_linear(vec![0.0, 0.0], vec![0.5, 0.0], 1);
        let target = single_linear(vec![0.0, 0.0], vec![2.0, 1.0], 1);
        let batch = [transition(vec![1.0], 0, 1.0, vec![0.0], false)];
        let (loss, grads) = loss_and_gradients(&theta, &target, &batch, 0.9).unwrap();
        assert!((loss - 5.29).abs() < 1e-12);
        // d/dbias0 = 2 * (0.5 - 2.8) = -4.6; untaken action gets nothing
        assert!((grads.layers[0].biases[0] + 4.6).abs() < 1e-12);
        assert_eq!(grads.layers[0].biases[1], 0.0);
    }

    #[test]
    fn terminal_target_is_reward() {
        let theta = single_linear(vec![0.0], vec![0.5], 1);
        let target = single_linear(vec![0.0], vec![100.0], 1);
        let batch = [transition(vec![1.0], 0, 1.0, vec![0.0], true)];
        let (loss, _) = loss_and_gradients(&theta, &target, &batch, 0.9).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_gives_zero_gradients() {
        let theta = single_linear(vec![0.0, 0.0], vec![2.8, 0.0], 1);
        let target = single_linear(vec![0.0, 0.0], vec![2.0, 1.0], 1);
        let batch = [
            transition(vec![1.0], 0, 1.0, vec![0.0], false),
            transition(vec![-3.0], 0, 1.0, vec![4.0], false),
        ];
        let (loss, grads) = loss_and_gradients(&theta, &target, &batch, 0.9).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flat().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn loss_errors() {
        let p = init_params(2, &[3], 2, 0);
        assert_eq!(loss_and_gradients(&p, &p, &[], 0.9).unwrap_err(), MlpError::EmptyBatch);
        let bad_action = [transition(vec![0.0, 0.0], 5, 0.0, vec![0.0, 0.0], false)];
        assert!(matches!(loss_and_gradients(&p, &p, &bad_action, 0.9), Err(MlpError::DimensionMismatch { .. })));
        let bad_state = [transition(vec![0.0], 0, 0.0, vec![0.0, 0.0], false)];
        assert!(matches!(loss_and_gradients(&p, &p, &bad_state, 0.9), Err(MlpError::DimensionMismatch { .. })));
    }

    #[test]
    fn sgd_arithmetic() {
        let p = single_linear(vec![1.0], vec![0.0], 1);
        let g = Gradients { layers: vec![Layer { in_dim: 1, out_dim: 1, weights: vec![2.0], biases: vec![0.0] }] };
        let q = sgd_step(&p, &g, 0.1).unwrap();
        assert!((q.layers[0].weights[0] - 0.8).abs() < 1e-15);
        assert_eq!(sgd_step(&p, &Gradients::zeros_like(&p), 0.1).unwrap(), p);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let p = init_params(2, &[3], 2, 0);
        let g = Gradients::zeros_like(&init_params(2, &[4], 2, 0));
        assert_eq!(sgd_step(&p, &g, 0.1), Err(MlpError::ShapeMismatch));
    }

    #[test]
    fn copy_is_independent() {
        let mut src = init_params(2, &[4], 2, 9);
        let copy = copy_params(&src);
        assert_eq!(copy, src);
        assert_eq!(to_snapshot(&copy), to_snapshot(&src));
        src.layers[0].weights[0] += 1.0;
        assert_ne!(copy, src);
    }

    #[test]
    fn snapshot_round_trip_and_errors() {
        let p = init_params(2, &[32, 32], 4, 42);
        let bytes = to_snapshot(&p);
        assert_eq!(&bytes[..4], b"QNET");
        assert_eq!(from_snapshot(&bytes).unwrap(), p);
        assert!(from_snapshot(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_snapshot(&bad).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(from_snapshot(&v2).is_err());
    }

    #[test]
    fn sgd_descends_fixed_quadratic() {
        // Fit a fixed batch repeatedly; with a small step the loss falls monotonically.
        let mut theta = init_params(2, &[6], 3, 5);
        let target = init_params(2, &[6], 3, 6);
        let batch = [
            transition(vec![0.0, 1.0], 0, 1.0, vec![1.0, 1.0], false),
            transition(vec![2.0, 1.0], 2, -0.5, vec![2.0, 2.0], false),
            transition(vec![1.0, 3.0], 1, 0.2, vec![0.0, 0.0], true),
        ];
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            let (loss, g) = loss_and_gradients(&theta, &target, &batch, 0.9).unwrap();
            assert!(loss <= last, "{loss} > {last}");
            last = loss;
            theta = sgd_step(&theta, &g, 0.01).unwrap();
        }
        assert!(last < 0.5 * batch_loss(&init_params(2, &[6], 3, 5), &target, &batch, 0.9).unwrap());
    }
}
