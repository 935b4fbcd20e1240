//! Gradient checks shared by the gradient tests and the acceptance run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tbdfs::layers::RunMode;
use tbdfs::model::{ModelConfig, ParamStore, TbdfsModel};
use tbdfs::tensor::{Tape, Tensor, Var};
use tbdfs::timeenc::TimeEncoder;

use super::{numeric_grad, op_gradient_error, rel_err, toy_graph, uniform};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct OpCase {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub op: OpFn,
}

impl OpCase {
    pub fn error(&self) -> f64 {
        op_gradient_error(&self.inputs, 99, &self.op)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inputs in [-2, 2] kept away from the relu kink.
fn off_kink(seed: u64, shape: &[usize]) -> Tensor {
    let t = uniform(&mut rng(seed), shape, -2.0, 2.0);
    let data = t
        .data()
        .iter()
        .map(|v| if v.abs() < 0.1 { v + 0.3 } else { *v })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn case(name: impl Into<String>, inputs: Vec<Tensor>, op: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name: name.into(),
        inputs,
        op: Box::new(op),
    }
}

/// One case per differentiable tape operation, including every broadcast
/// pattern of the binary ops.
pub fn op_cases() -> Vec<OpCase> {
    let mut out = Vec::new();
    let a = uniform(&mut rng(1), &[3, 4], -2.0, 2.0);
    let b = uniform(&mut rng(2), &[3, 4], -2.0, 2.0);
    out.push(case("add", vec![a.clone(), b.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    }));
    out.push(case("sub", vec![a.clone(), b.clone()], |t, v| {
        t.sub(v[0], v[1]).unwrap()
    }));
    out.push(case("mul", vec![a.clone(), b], |t, v| t.mul(v[0], v[1]).unwrap()));

    let row = uniform(&mut rng(4), &[1, 4], -2.0, 2.0);
    let col = uniform(&mut rng(5), &[3, 1], -2.0, 2.0);
    let vec = uniform(&mut rng(6), &[4], -2.0, 2.0);
    let one = uniform(&mut rng(7), &[1], -2.0, 2.0);
    for (name, other) in [("row", row), ("column", col), ("vector", vec), ("scalar", one)] {
        out.push(case(format!("add {name}"), vec![a.clone(), other.clone()], |t, v| {
            t.add(v[0], v[1]).unwrap()
        }));
        out.push(case(format!("sub {name}"), vec![other.clone(), a.clone()], |t, v| {
            t.sub(v[0], v[1]).unwrap()
        }));
        out.push(case(format!("mul {name}"), vec![a.clone(), other], |t, v| {
            t.mul(v[0], v[1]).unwrap()
        }));
    }

    let x = off_kink(8, &[2, 5]);
    out.push(case("scale", vec![x.clone()], |t, v| t.scale(v[0], -1.7)));
    out.push(case("neg", vec![x.clone()], |t, v| t.neg(v[0])));
    out.push(case("relu", vec![x.clone()], |t, v| t.relu(v[0])));
    out.push(case("sigmoid", vec![x.clone()], |t, v| t.sigmoid(v[0])));
    out.push(case("log_sigmoid", vec![x.clone()], |t, v| t.log_sigmoid(v[0])));
    out.push(case("cos", vec![x.clone()], |t, v| t.cos(v[0])));
    out.push(case("sin", vec![x], |t, v| t.sin(v[0])));
    let positive = uniform(&mut rng(9), &[2, 5], 0.2, 2.0);
    out.push(case("log", vec![positive], |t, v| t.log(v[0]).unwrap()));
    let points = Tensor::vector(vec![-2.0, 0.0, 2.0]).unwrap();
    out.push(case("sigmoid at -2, 0, 2", vec![points], |t, v| t.sigmoid(v[0])));

    let m = uniform(&mut rng(11), &[4, 2], -2.0, 2.0);
    out.push(case("matmul", vec![a.clone(), m], |t, v| t.matmul(v[0], v[1]).unwrap()));
    out.push(case("transpose", vec![a.clone()], |t, v| t.transpose(v[0]).unwrap()));

    let v5 = uniform(&mut rng(12), &[5], -2.0, 2.0);
    out.push(case("softmax vector", vec![v5], |t, v| t.softmax(v[0], 0).unwrap()));
    out.push(case("softmax rows", vec![a.clone()], |t, v| {
        t.softmax(v[0], 1).unwrap()
    }));
    out.push(case("softmax columns", vec![a.clone()], |t, v| {
        t.softmax(v[0], 0).unwrap()
    }));
    let s = uniform(&mut rng(14), &[6, 1], -2.0, 2.0);
    out.push(case("segment_softmax", vec![s], |t, v| {
        t.segment_softmax(v[0], &[0, 0, 1, 2, 2, 2]).unwrap()
    }));

    let r = uniform(&mut rng(15), &[4, 3], -2.0, 2.0);
    out.push(case("sum", vec![r.clone()], |t, v| t.sum(v[0])));
    out.push(case("mean", vec![r.clone()], |t, v| t.mean(v[0])));
    out.push(case("sum_axis 0", vec![r.clone()], |t, v| t.sum_axis(v[0], 0).unwrap()));
    out.push(case("sum_axis 1", vec![r.clone()], |t, v| t.sum_axis(v[0], 1).unwrap()));
    out.push(case("segment_sum", vec![r], |t, v| {
        t.segment_sum(v[0], &[1, 0, 1, 2], 3).unwrap()
    }));

    let p = uniform(&mut rng(16), &[2, 3], -2.0, 2.0);
    let q = uniform(&mut rng(17), &[2, 2], -2.0, 2.0);
    let c = uniform(&mut rng(18), &[1, 3], -2.0, 2.0);
    out.push(case("concat axis 1", vec![p.clone(), q], |t, v| {
        t.concat(&[v[0], v[1]], 1).unwrap()
    }));
    out.push(case("concat axis 0", vec![p.clone(), c], |t, v| {
        t.concat(&[v[0], v[1]], 0).unwrap()
    }));
    out.push(case("index_select", vec![p.clone()], |t, v| {
        t.index_select(v[0], 1, &[2, 0, 2]).unwrap()
    }));
    out.push(case("gather_rows", vec![p.clone()], |t, v| {
        t.gather_rows(v[0], &[1, 1, 0]).unwrap()
    }));
    out.push(case("reshape", vec![p], |t, v| t.reshape(v[0], &[3, 2]).unwrap()));

    let d = uniform(&mut rng(19), &[4, 5], -2.0, 2.0);
    out.push(case("dropout with a fixed mask", vec![d], |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        t.dropout(v[0], 0.3, true, &mut r).unwrap()
    }));

    let freqs = Tensor::vector(vec![0.9, -0.4, 0.15, 1.3]).unwrap();
    out.push(case("time encoding freqs", vec![freqs], |t, v| {
        let enc = TimeEncoder::new(8).unwrap();
        enc.encode_on_tape(t, v[0], &[0.0, 0.5, 1.7, 3.2]).unwrap()
    }));
    out
}

/// d = 4, one head, two layers, on the six-node toy graph, with nonzero
/// biases so that no parameter group sits at a symmetric point.
pub fn toy_model() -> TbdfsModel {
    let config = ModelConfig {
        dim: 4,
        heads: 1,
        layers: 2,
        fanout: 3,
        dropout: 0.0,
        alpha: 0.4,
        ..ModelConfig::default()
    };
    let mut model = TbdfsModel::new(config, 11).unwrap();
    let mut r = rng(23);
    for (name, t) in model.params.iter_mut() {
        if name.contains(".b") {
            for v in t.data_mut() {
                *v = rand::Rng::gen_range(&mut r, -0.3..0.3);
            }
        }
    }
    model
}

pub struct ModelGradCheck {
    pub worst: f64,
    pub worst_param: String,
    /// Parameters whose analytic gradient is identically zero.
    pub silent: Vec<String>,
}

/// Contrastive loss over two (src, dst, negative, t) triples, analytic
/// gradients against central differences for every parameter.
pub fn end_to_end_check() -> ModelGradCheck {
    let g = toy_graph(4);
    let model = toy_model();
    let triples = [(5, 0, 3, 8.5), (1, 5, 2, 7.5)];
    let loss_of = |m: &TbdfsModel| -> f64 {
        triples
            .iter()
            .map(|(s, d, n, t)| m.edge_gradients(&g, *s, *d, *n, *t, &mut RunMode::Eval).unwrap().0)
            .sum()
    };
    let mut analytic = ParamStore::new();
    for (s, d, n, t) in triples {
        let (_, grads) = model.edge_gradients(&g, s, d, n, t, &mut RunMode::Eval).unwrap();
        for (name, gt) in grads.iter() {
            match analytic.get_mut(name) {
                Some(acc) => acc.data_mut().iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b),
                None => analytic.insert(name.clone(), gt.clone()),
            }
        }
    }

    let mut check = ModelGradCheck {
        worst: 0.0,
        worst_param: String::new(),
        silent: Vec::new(),
    };
    for (name, value) in model.params.iter() {
        let numeric = numeric_grad(value.data(), |probe| {
            let mut m = model.clone();
            m.params.get_mut(name).unwrap().data_mut().copy_from_slice(probe);
            loss_of(&m)
        });
        let grad = analytic.get(name).unwrap();
        if grad.data().iter().all(|v| *v == 0.0) {
            check.silent.push(name.clone());
        }
        for (a, n) in grad.data().iter().zip(&numeric) {
            let e = rel_err(*a, *n);
            if e > check.worst {
                check.worst = e;
                check.worst_param = name.clone();
            }
        }
    }
    check
}
