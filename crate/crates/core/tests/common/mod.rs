#![allow(dead_code)]

pub mod grad;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tbdfs::graph::{GraphBuilder, TemporalGraph};
use tbdfs::sampler::TemporalPath;
use tbdfs::tensor::{Tape, Tensor, Var};

pub const FD_EPS: f64 = 1e-5;

/// Relative error with a small floor so that two near-zero gradients agree.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` around `x` along every coordinate.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPS;
            let up = f(&probe);
            probe[i] = orig - FD_EPS;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Largest relative error between the tape gradient and central differences
/// of `sum(w * op(inputs))` over every input element, for a fixed random `w`.
pub fn op_gradient_error(inputs: &[Tensor], weight_seed: u64, op: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let weights = |tape: &Tape, out: Var| {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        uniform(&mut rng, tape.value(out).shape(), -1.0, 1.0)
    };
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&mut tape, &vars);
        let w = weights(&tape, out);
        tape.value(out).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars);
    let w = tape.constant(weights(&tape, out));
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap().data().to_vec();
        let numeric = numeric_grad(input.data(), |probe| {
            let mut values = inputs.to_vec();
            values[k] = Tensor::new(input.shape().to_vec(), probe.to_vec()).unwrap();
            eval(&values)
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

/// Six nodes, eight timestamped edges with distinct features.
pub fn toy_graph(d: usize) -> TemporalGraph {
    let mut b = GraphBuilder::new(d);
    let nodes: Vec<_> = (0..6).map(|i| b.add_node(format!("n{i}"))).collect();
    for (i, n) in nodes.iter().enumerate() {
        let f: Vec<f64> = (0..d).map(|k| ((i * 7 + k * 3) % 5) as f64 * 0.3 - 0.6).collect();
        b.set_node_features(*n, &f).unwrap();
    }
    let edges = [
        (0, 1, 1.0),
        (1, 2, 2.0),
        (2, 3, 3.0),
        (0, 2, 4.0),
        (3, 4, 5.0),
        (4, 0, 6.0),
        (1, 5, 7.0),
        (5, 0, 8.0),
    ];
    for (k, (s, t, ts)) in edges.iter().enumerate() {
        let f: Vec<f64> = (0..d).map(|j| ((k + j) % 3) as f64 * 0.2 - 0.1).collect();
        b.add_event_with_features(nodes[*s], nodes[*t], *ts, f).unwrap();
    }
    b.build()
}

/// Random graph with integer timestamps so that ties occur.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, max_events: usize, d: usize) -> TemporalGraph {
    let n = rng.gen_range(2..=max_nodes);
    let m = rng.gen_range(1..=max_events);
    let horizon = rng.gen_range(5..=60);
    let mut b = GraphBuilder::new(d);
    let nodes: Vec<_> = (0..n).map(|i| b.add_node(format!("v{i}"))).collect();
    for node in &nodes {
        let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.set_node_features(*node, &f).unwrap();
    }
    for _ in 0..m {
        let s = rng.gen_range(0..n);
        let mut t = rng.gen_range(0..n - 1);
        if t >= s {
            t += 1;
        }
        let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.add_event_with_features(nodes[s], nodes[t], rng.gen_range(0..horizon) as f64, f)
            .unwrap();
    }
    b.build()
}

/// A few query times per node: before everything, at a tie, inside, after.
pub fn queries(g: &TemporalGraph, rng: &mut ChaCha8Rng) -> Vec<(usize, f64)> {
    let times: Vec<f64> = g.events().iter().map(|e| e.ts).collect();
    let last = times.iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::new();
    for node in 0..g.node_count() {
        let tie = times[rng.gen_range(0..times.len())];
        for t in [0.0, tie, rng.gen_range(0.0..=last) + 0.5, last + 1.0] {
            out.push((node, t));
        }
    }
    out
}

/// Sorted (node, ts) sequences, the identity of a path collection.
pub fn signatures(paths: &[TemporalPath]) -> Vec<Vec<(usize, u64)>> {
    let mut s: Vec<_> = paths.iter().map(TemporalPath::signature).collect();
    s.sort();
    s
}
