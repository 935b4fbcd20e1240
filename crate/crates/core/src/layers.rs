//! Attention building blocks: feature assembly, neighborhood attention,
//! path attention, path-set aggregation and the BFS/DFS balance.
//!
//! All functions operate on batches of rows so a whole sampled neighborhood
//! (or path set) is processed with a handful of tape operations.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// How a group of rows is pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Attention,
    Mean,
}

/// Whether dropout is active for a forward pass.
pub enum RunMode<'r> {
    Eval,
    Train { dropout: f64, rng: &'r mut ChaCha8Rng },
}

impl RunMode<'_> {
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            RunMode::Eval => Ok(x),
            RunMode::Train { dropout, rng } => tape.dropout(x, *dropout, true, &mut **rng),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Two-layer perceptron `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FfnParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub heads: Vec<HeadParams>,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct AggregateParams {
    pub heads: Vec<HeadParams>,
    pub output: Var,
}

/// Layer output together with the per-head attention weights (one score per
/// key row, before dropout).
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn ffn(tape: &mut Tape, x: Var, p: &FfnParams, mode: &mut RunMode) -> Result<Var, TensorError> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add(h, p.b1)?;
    let h = tape.relu(h);
    let h = mode.dropout(tape, h)?;
    let out = tape.matmul(h, p.w2)?;
    tape.add(out, p.b2)
}

/// `h ‖ x_edge ‖ Φ(Δt)` row by row.
pub fn neighbor_features(tape: &mut Tape, h: Var, edge: Var, time: Var) -> Result<Var, TensorError> {
    tape.concat(&[h, edge, time], 1)
}

/// `h ‖ 0 ‖ Φ(0)`: the target's own feature, with no edge.
pub fn self_features(tape: &mut Tape, h: Var, phi_zero: Var) -> Result<Var, TensorError> {
    let shape = tape.value(h).shape().to_vec();
    let zeros = tape.constant(Tensor::zeros(&shape)?);
    tape.concat(&[h, zeros, phi_zero], 1)
}

/// Row routing for [`grouped_attention`]: key row `r` is scored against query
/// row `query_rows[r]` and pooled into output group `groups[r]`.
pub struct Routing<'a> {
    pub query_rows: &'a [usize],
    pub key_rows: Option<&'a [usize]>,
    pub groups: &'a [usize],
    pub group_count: usize,
}

/// Multi-head dot-product attention over ragged groups. Groups without keys
/// produce zero rows. Returns `[group_count, heads * width]`.
pub fn grouped_attention(
    tape: &mut Tape,
    heads: &[HeadParams],
    queries: Var,
    keys: Var,
    routing: &Routing,
    pooling: Aggregation,
    score_scale: f64,
    mode: &mut RunMode,
) -> Result<Attended, TensorError> {
    let n = routing.groups.len();
    if routing.query_rows.len() != n || routing.key_rows.is_some_and(|k| k.len() != n) {
        return Err(TensorError::Shape {
            op: "grouped_attention",
            lhs: vec![n],
            rhs: vec![routing.query_rows.len()],
        });
    }
    let uniform = match pooling {
        Aggregation::Mean => {
            let mut sizes = vec![0usize; routing.group_count];
            for g in routing.groups {
                sizes[*g] += 1;
            }
            let w: Vec<f64> = routing.groups.iter().map(|g| 1.0 / sizes[*g] as f64).collect();
            Some(Tensor::vector(w)?)
        }
        Aggregation::Attention => None,
    };

    // Scores use (x_q W_Q W_K^T) . x_k and values pool raw rows before W_V,
    // so per-key work stays linear in the feature width.
    let rows = match routing.key_rows {
        Some(r) => tape.gather_rows(keys, r)?,
        None => keys,
    };
    let mut outputs = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for head in heads {
        let alpha = match &uniform {
            Some(w) => tape.constant(w.clone()),
            None => {
                let q = tape.matmul(queries, head.query)?;
                let key_t = tape.transpose(head.key)?;
                let qk = tape.matmul(q, key_t)?;
                let qk = tape.gather_rows(qk, routing.query_rows)?;
                let prod = tape.mul(qk, rows)?;
                let mut scores = tape.sum_axis(prod, 1)?;
                if score_scale != 1.0 {
                    scores = tape.scale(scores, score_scale);
                }
                tape.segment_softmax(scores, routing.groups)?
            }
        };
        weights.push(alpha);
        let alpha = mode.dropout(tape, alpha)?;
        let column = tape.reshape(alpha, &[n, 1])?;
        let weighted = tape.mul(rows, column)?;
        let pooled = tape.segment_sum(weighted, routing.groups, routing.group_count)?;
        outputs.push(tape.matmul(pooled, head.value)?);
    }
    let output = if outputs.len() == 1 {
        outputs[0]
    } else {
        tape.concat(&outputs, 1)?
    };
    Ok(Attended { output, weights })
}

fn zero_heads(tape: &mut Tape, rows: usize, width: usize) -> Result<Var, TensorError> {
    Ok(tape.constant(Tensor::zeros(&[rows, width])?))
}

/// One neighborhood-attention layer for a batch of `q` targets.
///
/// `self_f` is `[q, 3d]`, `neigh_f` is `[n, 3d]` (or `None` when no target
/// has neighbors), `parents[r]` names the target of neighbor row `r`, and
/// `h_prev` is `[q, d]`. Output: `FFN(h_prev ‖ heads)`, `[q, d]`.
pub fn bfs_attend(
    tape: &mut Tape,
    layer: &AttentionLayer,
    self_f: Var,
    neigh_f: Option<Var>,
    parents: &[usize],
    h_prev: Var,
    mode: &mut RunMode,
) -> Result<Attended, TensorError> {
    let q = tape.value(self_f).shape()[0];
    let width = tape.value(self_f).shape()[1];
    let (heads, weights) = match neigh_f {
        Some(keys) if !parents.is_empty() => {
            let routing = Routing {
                query_rows: parents,
                key_rows: None,
                groups: parents,
                group_count: q,
            };
            let a = grouped_attention(
                tape,
                &layer.heads,
                self_f,
                keys,
                &routing,
                Aggregation::Attention,
                1.0,
                mode,
            )?;
            (a.output, a.weights)
        }
        _ => (zero_heads(tape, q, width * layer.heads.len())?, Vec::new()),
    };
    let input = tape.concat(&[h_prev, heads], 1)?;
    let output = ffn(tape, input, &layer.ffn, mode)?;
    Ok(Attended { output, weights })
}

/// Encodes each path into a `d`-vector.
///
/// `target_self` (`[1, 3d]`) queries the path's node features; `entry_f`
/// holds one `[3d]` row per tree entry and `paths[r]` lists the rows of path
/// `r`. Output: `FFN(x_target ‖ heads)` per path, `[paths.len(), d]`.
pub fn dfs_path_encode(
    tape: &mut Tape,
    layer: &AttentionLayer,
    target_self: Var,
    target_raw: Var,
    entry_f: Var,
    paths: &[Vec<usize>],
    pooling: Aggregation,
    mode: &mut RunMode,
) -> Result<Attended, TensorError> {
    if paths.is_empty() || paths.iter().any(Vec::is_empty) {
        return Err(TensorError::InvalidShape {
            op: "dfs_path_encode",
            shape: vec![paths.len()],
            reason: "paths must be non-empty".into(),
        });
    }
    let key_rows: Vec<usize> = paths.iter().flatten().copied().collect();
    let groups: Vec<usize> = paths
        .iter()
        .enumerate()
        .flat_map(|(r, p)| std::iter::repeat(r).take(p.len()))
        .collect();
    let query_rows = vec![0; key_rows.len()];
    let routing = Routing {
        query_rows: &query_rows,
        key_rows: Some(&key_rows),
        groups: &groups,
        group_count: paths.len(),
    };
    let attended = grouped_attention(tape, &layer.heads, target_self, entry_f, &routing, pooling, 1.0, mode)?;
    let raw = tape.gather_rows(target_raw, &vec![0; paths.len()])?;
    let input = tape.concat(&[raw, attended.output], 1)?;
    let output = ffn(tape, input, &layer.ffn, mode)?;
    Ok(Attended {
        output,
        weights: attended.weights,
    })
}

/// Pools path encodings `[P, d]` into one `[1, d]` vector, querying with the
/// BFS representation. No paths gives a zero vector.
pub fn dfs_aggregate(
    tape: &mut Tape,
    params: &AggregateParams,
    h_bfs: Var,
    path_reprs: Option<Var>,
    pooling: Aggregation,
    mode: &mut RunMode,
) -> Result<Attended, TensorError> {
    let d = tape.value(h_bfs).shape()[1];
    let Some(reprs) = path_reprs else {
        return Ok(Attended {
            output: tape.constant(Tensor::zeros(&[1, d])?),
            weights: Vec::new(),
        });
    };
    let p = tape.value(reprs).shape()[0];
    match pooling {
        Aggregation::Mean => {
            let total = tape.sum_axis(reprs, 0)?;
            let mean = tape.scale(total, 1.0 / p as f64);
            let output = tape.reshape(mean, &[1, d])?;
            Ok(Attended {
                output,
                weights: Vec::new(),
            })
        }
        Aggregation::Attention => {
            let zeros = vec![0; p];
            let routing = Routing {
                query_rows: &zeros,
                key_rows: None,
                groups: &zeros,
                group_count: 1,
            };
            let scale = 1.0 / (d as f64).sqrt();
            let a = grouped_attention(
                tape,
                &params.heads,
                h_bfs,
                reprs,
                &routing,
                Aggregation::Attention,
                scale,
                mode,
            )?;
            let output = tape.matmul(a.output, params.output)?;
            Ok(Attended {
                output,
                weights: a.weights,
            })
        }
    }
}

/// `alpha * h_bfs + (1 - alpha) * h_dfs`.
pub fn balance(tape: &mut Tape, h_bfs: Var, h_dfs: Var, alpha: f64) -> Result<Var, TensorError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TensorError::Config(format!("balance alpha {alpha} outside [0, 1]")));
    }
    let a = tape.scale(h_bfs, alpha);
    let b = tape.scale(h_dfs, 1.0 - alpha);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn leaf(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::matrix(rows, cols, data).unwrap())
    }

    fn random(tape: &mut Tape, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Var {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        leaf(tape, rows, cols, data)
    }

    fn layer(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionLayer {
        let w = 3 * d;
        let heads = (0..heads)
            .map(|_| HeadParams {
                query: random(tape, rng, w, w),
                key: random(tape, rng, w, w),
                value: random(tape, rng, w, w),
            })
            .collect::<Vec<_>>();
        let inp = d + w * heads.len();
        let ffn = FfnParams {
            w1: random(tape, rng, inp, d),
            b1: random(tape, rng, 1, d),
            w2: random(tape, rng, d, d),
            b2: random(tape, rng, 1, d),
        };
        AttentionLayer { heads, ffn }
    }

    #[test]
    fn feature_assembly() {
        let mut tape = Tape::new();
        for d in [4, 8] {
            let h = leaf(&mut tape, 1, d, vec![0.0; d]);
            let e = leaf(&mut tape, 1, d, vec![0.0; d]);
            let phi: Vec<f64> = (0..d).map(|i| i as f64 + 1.0).collect();
            let t = leaf(&mut tape, 1, d, phi.clone());
            let f = neighbor_features(&mut tape, h, e, t).unwrap();
            let v = tape.value(f).data().to_vec();
            assert_eq!(v.len(), 3 * d);
            assert!(v[..2 * d].iter().all(|x| *x == 0.0));
            assert_eq!(&v[2 * d..], phi.as_slice());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random(&mut tape, &mut rng, 1, 4);
        let phi0 = random(&mut tape, &mut rng, 1, 4);
        let s = self_features(&mut tape, h, phi0).unwrap();
        let zero_edge = leaf(&mut tape, 1, 4, vec![0.0; 4]);
        let n = neighbor_features(&mut tape, h, zero_edge, phi0).unwrap();
        assert_eq!(tape.value(s), tape.value(n));
        assert!(tape.value(s).data()[4..8].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn singleton_and_symmetric_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let lay = layer(&mut tape, &mut rng, 2, 2);
        let self_f = random(&mut tape, &mut rng, 1, 6);
        let h_prev = random(&mut tape, &mut rng, 1, 2);
        let one = random(&mut tape, &mut rng, 1, 6);
        let out = bfs_attend(&mut tape, &lay, self_f, Some(one), &[0], h_prev, &mut RunMode::Eval).unwrap();
        for w in &out.weights {
            assert_eq!(tape.value(*w).data(), &[1.0]);
        }
        let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut both = row.clone();
        both.extend(&row);
        let twins = leaf(&mut tape, 2, 6, both);
        let out = bfs_attend(
            &mut tape,
            &lay,
            self_f,
            Some(twins),
            &[0, 0],
            h_prev,
            &mut RunMode::Eval,
        )
        .unwrap();
        for w in &out.weights {
            for v in tape.value(*w).data() {
                assert!((v - 0.5).abs() < 1e-9);
            }
        }
    }

    /// Scalar re-derivation of one head over two neighbors with d = 2.
    #[test]
    fn bfs_attend_matches_scalar_oracle() {
        let d = 2;
        let w = 3 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect() };
        let (wq, wk, wv) = (r(w * w), r(w * w), r(w * w));
        let (w1, b1, w2, b2) = (r((d + w) * d), r(d), r(d * d), r(d));
        let self_f = r(w);
        let neigh = [r(w), r(w)];
        let h_prev = r(d);

        // oracle
        let proj =
            |m: &[f64], x: &[f64]| -> Vec<f64> { (0..w).map(|c| (0..w).map(|k| x[k] * m[k * w + c]).sum()).collect() };
        let q = proj(&wq, &self_f);
        let scores: Vec<f64> = neigh
            .iter()
            .map(|n| proj(&wk, n).iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let att: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let mut head = vec![0.0; w];
        for (a, n) in att.iter().zip(&neigh) {
            for (h, v) in head.iter_mut().zip(proj(&wv, n)) {
                *h += a * v;
            }
        }
        let mut input = h_prev.clone();
        input.extend(&head);
        let hidden: Vec<f64> = (0..d)
            .map(|c| (input.iter().enumerate().map(|(k, x)| x * w1[k * d + c]).sum::<f64>() + b1[c]).max(0.0))
            .collect();
        let expected: Vec<f64> = (0..d)
            .map(|c| hidden.iter().enumerate().map(|(k, x)| x * w2[k * d + c]).sum::<f64>() + b2[c])
            .collect();

        let mut tape = Tape::new();
        let lay = AttentionLayer {
            heads: vec![HeadParams {
                query: leaf(&mut tape, w, w, wq),
                key: leaf(&mut tape, w, w, wk),
                value: leaf(&mut tape, w, w, wv),
            }],
            ffn: FfnParams {
                w1: leaf(&mut tape, d + w, d, w1),
                b1: leaf(&mut tape, 1, d, b1),
                w2: leaf(&mut tape, d, d, w2),
                b2: leaf(&mut tape, 1, d, b2),
            },
        };
        let s = leaf(&mut tape, 1, w, self_f);
        let mut nb = neigh[0].clone();
        nb.extend(&neigh[1]);
        let n = leaf(&mut tape, 2, w, nb);
        let hp = leaf(&mut tape, 1, d, h_prev);
        let out = bfs_attend(&mut tape, &lay, s, Some(n), &[0, 0], hp, &mut RunMode::Eval).unwrap();
        for (a, b) in tape.value(out.output).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn empty_neighborhood_uses_zero_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let lay = layer(&mut tape, &mut rng, 2, 2);
        let self_f = random(&mut tape, &mut rng, 1, 6);
        let h_prev = random(&mut tape, &mut rng, 1, 2);
        let out = bfs_attend(&mut tape, &lay, self_f, None, &[], h_prev, &mut RunMode::Eval).unwrap();
        let zeros = tape.leaf(Tensor::zeros(&[1, 12]).unwrap());
        let input = tape.concat(&[h_prev, zeros], 1).unwrap();
        let expected = ffn(&mut tape, input, &lay.ffn, &mut RunMode::Eval).unwrap();
        assert_eq!(tape.value(out.output), tape.value(expected));
    }

    #[test]
    fn path_encoding_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let lay = layer(&mut tape, &mut rng, 2, 2);
        let target_self = random(&mut tape, &mut rng, 1, 6);
        let raw = random(&mut tape, &mut rng, 1, 2);
        let entries = random(&mut tape, &mut rng, 3, 6);
        // length-1 path: the single node gets all the weight
        let out = dfs_path_encode(
            &mut tape,
            &lay,
            target_self,
            raw,
            entries,
            &[vec![0]],
            Aggregation::Attention,
            &mut RunMode::Eval,
        )
        .unwrap();
        for w in &out.weights {
            assert_eq!(tape.value(*w).data(), &[1.0]);
        }
        // identical paths encode identically
        let out = dfs_path_encode(
            &mut tape,
            &lay,
            target_self,
            raw,
            entries,
            &[vec![0, 1], vec![2], vec![0, 1]],
            Aggregation::Attention,
            &mut RunMode::Eval,
        )
        .unwrap();
        let v = tape.value(out.output);
        assert_eq!(v.row(0), v.row(2));
        assert_ne!(v.row(0), v.row(1));
        assert!(dfs_path_encode(
            &mut tape,
            &lay,
            target_self,
            raw,
            entries,
            &[],
            Aggregation::Attention,
            &mut RunMode::Eval
        )
        .is_err());
    }

    fn aggregate_params(tape: &mut Tape, rng: &mut ChaCha8Rng, d: usize, m: usize) -> AggregateParams {
        AggregateParams {
            heads: (0..m)
                .map(|_| HeadParams {
                    query: random(tape, rng, d, d),
                    key: random(tape, rng, d, d),
                    value: random(tape, rng, d, d),
                })
                .collect(),
            output: random(tape, rng, d * m, d),
        }
    }

    #[test]
    fn aggregate_single_path_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let p = aggregate_params(&mut tape, &mut rng, 4, 2);
        let h = random(&mut tape, &mut rng, 1, 4);
        let path = random(&mut tape, &mut rng, 1, 4);
        let out = dfs_aggregate(&mut tape, &p, h, Some(path), Aggregation::Attention, &mut RunMode::Eval).unwrap();
        let v0 = tape.matmul(path, p.heads[0].value).unwrap();
        let v1 = tape.matmul(path, p.heads[1].value).unwrap();
        let cat = tape.concat(&[v0, v1], 1).unwrap();
        let expected = tape.matmul(cat, p.output).unwrap();
        assert!(tape.value(out.output).max_abs_diff(tape.value(expected)) < 1e-15);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut tape = Tape::new();
        let p = aggregate_params(&mut tape, &mut rng, 4, 2);
        let h = random(&mut tape, &mut rng, 1, 4);
        let rows = random(&mut tape, &mut rng, 5, 4);
        let shuffled = tape.gather_rows(rows, &[3, 0, 4, 1, 2]).unwrap();
        for pooling in [Aggregation::Attention, Aggregation::Mean] {
            let a = dfs_aggregate(&mut tape, &p, h, Some(rows), pooling, &mut RunMode::Eval).unwrap();
            let b = dfs_aggregate(&mut tape, &p, h, Some(shuffled), pooling, &mut RunMode::Eval).unwrap();
            assert!(tape.value(a.output).max_abs_diff(tape.value(b.output)) < 1e-12);
        }
        let empty = dfs_aggregate(&mut tape, &p, h, None, Aggregation::Attention, &mut RunMode::Eval).unwrap();
        assert_eq!(tape.value(empty.output).data(), &[0.0; 4]);
    }

    #[test]
    fn mean_pooling_paths() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = aggregate_params(&mut tape, &mut rng, 2, 1);
        let h = leaf(&mut tape, 1, 2, vec![0.0, 0.0]);
        let rows = leaf(&mut tape, 2, 2, vec![1.0, 2.0, 3.0, 6.0]);
        let out = dfs_aggregate(&mut tape, &p, h, Some(rows), Aggregation::Mean, &mut RunMode::Eval).unwrap();
        assert_eq!(tape.value(out.output).data(), &[2.0, 4.0]);
    }

    #[test]
    fn balance_endpoints() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, 1, 3, vec![1.0, -2.0, 0.25]);
        let b = leaf(&mut tape, 1, 3, vec![3.0, 5.0, -7.5]);
        let one = balance(&mut tape, a, b, 1.0).unwrap();
        assert_eq!(tape.value(one).data(), tape.value(a).data());
        let zero = balance(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(tape.value(zero).data(), tape.value(b).data());
        let mid = balance(&mut tape, a, b, 0.5).unwrap();
        assert_eq!(tape.value(mid).data(), &[2.0, 1.5, -3.625]);
        assert!(balance(&mut tape, a, b, 1.5).is_err());
    }
}
