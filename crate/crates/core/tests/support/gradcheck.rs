//! Central finite-difference check of the TD loss gradient.
//!
//! The numeric side re-implements the forward pass and loss in
//! double-double arithmetic. With ReLU hidden layers the loss is piecewise
//! quadratic in any single parameter, so away from kinks the central
//! difference carries no truncation error and plain `f64` cancellation is
//! the only noise left; ~106-bit evaluation removes it.

use std::ops::{Add, Mul, Neg, Sub};

use pourl_core::dqn::Transition;
use pourl_core::mlp::{init_params, loss_and_gradients, Activation, NetworkParams};
use pourl_core::{ActionId, EnvState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
pub const MIN_MAGNITUDE: f64 = 1e-8;

pub struct Case {
    pub params: NetworkParams,
    pub target: NetworkParams,
    pub batch: Vec<Transition>,
    pub gamma: f64,
}

/// Random network (dims <= 8, depth <= 3) with random biases and a random
/// batch of at most four transitions.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(1..=8usize);
    let output = rng.random_range(1..=8usize);
    let hidden: Vec<usize> = (0..rng.random_range(0..=2usize)).map(|_| rng.random_range(1..=8)).collect();
    let mut params = init_params(input, &hidden, output, rng.random());
    let mut target = init_params(input, &hidden, output, rng.random());
    for net in [&mut params, &mut target] {
        for layer in &mut net.layers {
            for b in &mut layer.biases {
                *b = rng.random_range(-0.5..0.5);
            }
        }
    }
    let state = |rng: &mut ChaCha8Rng| EnvState((0..input).map(|_| rng.random_range(-2.0..2.0)).collect());
    let batch = (0..rng.random_range(1..=4usize))
        .map(|_| Transition {
            s: state(&mut rng),
            a: ActionId(rng.random_range(0..output as u32)),
            r: rng.random_range(-1.0..1.0),
            s_next: state(&mut rng),
            terminal: rng.random_bool(0.3),
        })
        .collect();
    Case { params, target, batch, gamma: rng.random_range(0.0..1.0) }
}

pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Number of coordinates compared and those whose analytic and numeric
/// gradients disagree.
pub fn check(case: &Case) -> (usize, Vec<Mismatch>) {
    let (_, grads) = loss_and_gradients(&case.params, &case.target, &case.batch, case.gamma).unwrap();
    check_against(case, &grads.flat())
}

pub fn check_against(case: &Case, analytic: &[f64]) -> (usize, Vec<Mismatch>) {
    let mut checked = 0;
    let mut bad = Vec::new();
    for (index, &g) in analytic.iter().enumerate() {
        let numeric = central_difference(case, index);
        if g.abs() <= MIN_MAGNITUDE {
            continue;
        }
        checked += 1;
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs());
        if rel > REL_TOL {
            bad.push(Mismatch { index, analytic: g, numeric });
        }
    }
    (checked, bad)
}

fn central_difference(case: &Case, index: usize) -> f64 {
    let loss_at = |delta: f64| {
        let mut p = case.params.clone();
        let base = *p.param_mut(index);
        dd_loss(&p, Some((index, Dd::from(base) + Dd::from(delta))), case)
    };
    let diff = loss_at(STEP) - loss_at(-STEP);
    (diff.hi + diff.lo) / (2.0 * STEP * case.batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
struct Dd {
    hi: f64,
    lo: f64,
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + -o
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }
}

fn dd_forward(net: &NetworkParams, over: Option<(usize, Dd)>, x: &[f64]) -> Vec<Dd> {
    // flat index order: per layer, weights then biases
    let mut offset = 0;
    let mut act: Vec<Dd> = x.iter().map(|&v| Dd::from(v)).collect();
    let last = net.layers.len() - 1;
    for (li, layer) in net.layers.iter().enumerate() {
        let value = |i: usize, v: f64| match over {
            Some((k, d)) if k == offset + i => d,
            _ => Dd::from(v),
        };
        let nw = layer.weights.len();
        let mut out = Vec::with_capacity(layer.out_dim);
        for r in 0..layer.out_dim {
            let mut z = value(nw + r, layer.biases[r]);
            for c in 0..layer.in_dim {
                let idx = r * layer.in_dim + c;
                z = z + value(idx, layer.weights[idx]) * act[c];
            }
            let activation = if li == last { net.output_activation } else { net.hidden_activation };
            out.push(match activation {
                Activation::Relu if z.hi < 0.0 || (z.hi == 0.0 && z.lo <= 0.0) => Dd::from(0.0),
                _ => z,
            });
        }
        offset += nw + layer.biases.len();
        act = out;
    }
    act
}

/// Sum (not mean) of squared TD errors.
fn dd_loss(params: &NetworkParams, over: Option<(usize, Dd)>, case: &Case) -> Dd {
    let mut sum = Dd::from(0.0);
    for t in &case.batch {
        let y = if t.terminal {
            Dd::from(t.r)
        } else {
            let next = dd_forward(&case.target, None, t.s_next.values());
            let best = next.into_iter().fold(None, |m: Option<Dd>, v| match m {
                Some(m) if m >= v => Some(m),
                _ => Some(v),
            });
            Dd::from(t.r) + Dd::from(case.gamma) * best.unwrap()
        };
        let r = dd_forward(params, over, t.s.values())[t.a.index()] - y;
        sum = sum + r * r;
    }
    sum
}
