//! The full representation model: sampled neighborhood trees are encoded
//! breadth-first (stacked attention layers) and depth-first (path attention
//! plus path-set aggregation), then blended, and pairs of representations
//! are scored by a small link predictor.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalGraph};
use crate::layers::{
    balance, bfs_attend, dfs_aggregate, dfs_path_encode, neighbor_features, self_features, AggregateParams,
    Aggregation, AttentionLayer, FfnParams, HeadParams, RunMode,
};
use crate::sampler::{expand_with, path_indices, subsample_paths, BfsTree, NeighborPolicy, SamplerConfig};
use crate::tensor::{Tape, Tensor, Var};
use crate::timeenc::TimeEncoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub fanout: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub path_pooling: Aggregation,
    pub paths_pooling: Aggregation,
    pub time_encoding: bool,
    pub temporal_mask: bool,
    pub neighbor_policy: NeighborPolicy,
    pub max_paths: Option<usize>,
    pub sampler_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 2,
            layers: 2,
            fanout: 20,
            alpha: 0.5,
            dropout: 0.1,
            path_pooling: Aggregation::Attention,
            paths_pooling: Aggregation::Attention,
            time_encoding: true,
            temporal_mask: true,
            neighbor_policy: NeighborPolicy::MostRecent,
            max_paths: None,
            sampler_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.dim % 2 != 0 {
            return fail(format!("dim must be even and positive, got {}", self.dim));
        }
        if self.heads == 0 || self.layers == 0 || self.fanout == 0 {
            return fail("heads, layers and fanout must all be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.max_paths == Some(0) {
            return fail("max_paths must be positive when set".into());
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            depth: self.layers,
            fanout: self.fanout,
            policy: self.neighbor_policy,
            temporal_mask: self.temporal_mask,
            seed: self.sampler_seed,
            max_paths: self.max_paths,
        }
    }

    /// Every parameter name with its shape.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let d = self.dim;
        let w = 3 * d;
        let mut shapes = BTreeMap::new();
        shapes.insert("time.freqs".to_string(), vec![d / 2]);
        let attention = |prefix: &str, shapes: &mut BTreeMap<String, Vec<usize>>| {
            for m in 0..self.heads {
                for p in ["wq", "wk", "wv"] {
                    shapes.insert(format!("{prefix}.h{m}.{p}"), vec![w, w]);
                }
            }
            shapes.insert(format!("{prefix}.ffn.w1"), vec![d + w * self.heads, d]);
            shapes.insert(format!("{prefix}.ffn.b1"), vec![d]);
            shapes.insert(format!("{prefix}.ffn.w2"), vec![d, d]);
            shapes.insert(format!("{prefix}.ffn.b2"), vec![d]);
        };
        for l in 1..=self.layers {
            attention(&format!("bfs.l{l}"), &mut shapes);
        }
        attention("dfs.path", &mut shapes);
        for m in 0..self.heads {
            for p in ["wq", "wk", "wv"] {
                shapes.insert(format!("dfs.agg.h{m}.{p}"), vec![d, d]);
            }
        }
        shapes.insert("dfs.agg.wo".to_string(), vec![d * self.heads, d]);
        shapes.insert("scorer.w1".to_string(), vec![2 * d, d]);
        shapes.insert("scorer.b1".to_string(), vec![d]);
        shapes.insert("scorer.w2".to_string(), vec![d, 1]);
        shapes.insert("scorer.b2".to_string(), vec![1]);
        shapes
    }
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Which representation [`TbdfsModel::represent`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// The balanced blend; skips the DFS branch entirely when alpha is 1.
    Auto,
    /// The balanced blend with both branches always computed.
    Full,
    BfsOnly,
    DfsOnly,
}

/// Parameters recorded as leaves of one tape.
pub struct Bound {
    pub vars: BTreeMap<String, Var>,
    pub freqs: Var,
    pub bfs: Vec<AttentionLayer>,
    pub path: AttentionLayer,
    pub aggregate: AggregateParams,
    pub scorer: FfnParams,
}

/// A neighborhood tree with a flat numbering: the root is 0 and each layer
/// follows all shallower ones.
struct FlatTree<'t> {
    tree: &'t BfsTree,
    offsets: Vec<usize>,
    nodes: Vec<NodeId>,
    times: Vec<f64>,
    events: Vec<usize>,
    parents: Vec<usize>,
}

impl<'t> FlatTree<'t> {
    fn new(tree: &'t BfsTree) -> Self {
        let offsets = tree.flat_offsets();
        let n = *offsets.last().unwrap();
        let mut nodes = Vec::with_capacity(n);
        let mut times = Vec::with_capacity(n);
        let mut events = Vec::with_capacity(n);
        let mut parents = Vec::with_capacity(n);
        nodes.push(tree.root);
        times.push(tree.time);
        events.push(usize::MAX);
        parents.push(0);
        for (l, layer) in tree.layers.iter().enumerate() {
            for e in layer {
                nodes.push(e.node);
                times.push(e.ts);
                events.push(e.event_id);
                parents.push(offsets[l] + e.parent);
            }
        }
        Self {
            tree,
            offsets,
            nodes,
            times,
            events,
            parents,
        }
    }

    /// Number of entries at depth below `depth`.
    fn upto(&self, depth: usize) -> usize {
        self.offsets[depth.min(self.offsets.len() - 1)]
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }
}

fn rows_constant<'a>(tape: &mut Tape, d: usize, rows: impl Iterator<Item = &'a [f64]>) -> Result<Var> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    Ok(tape.constant(Tensor::matrix(n, d, data)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TbdfsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl TbdfsModel {
    /// Glorot-uniform matrices, zero biases, geometric time frequencies.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = TimeEncoder::new(config.dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.parameter_shapes() {
            let value = if name == "time.freqs" {
                Tensor::vector(encoder.initial_frequencies())?
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)?
            } else {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data = (0..shape[0] * shape[1]).map(|_| rng.gen_range(-a..a)).collect();
                Tensor::new(shape, data)?
            };
            params.insert(name, value);
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (name, shape) in &shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn encoder(&self) -> TimeEncoder {
        TimeEncoder::new(self.config.dim).expect("validated dimension")
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        let v = |name: &str| vars[name];
        let heads = |prefix: &str| {
            (0..self.config.heads)
                .map(|m| HeadParams {
                    query: v(&format!("{prefix}.h{m}.wq")),
                    key: v(&format!("{prefix}.h{m}.wk")),
                    value: v(&format!("{prefix}.h{m}.wv")),
                })
                .collect::<Vec<_>>()
        };
        let ffn = |prefix: &str| FfnParams {
            w1: v(&format!("{prefix}.w1")),
            b1: v(&format!("{prefix}.b1")),
            w2: v(&format!("{prefix}.w2")),
            b2: v(&format!("{prefix}.b2")),
        };
        let layer = |prefix: &str| AttentionLayer {
            heads: heads(prefix),
            ffn: ffn(&format!("{prefix}.ffn")),
        };
        Bound {
            freqs: v("time.freqs"),
            bfs: (1..=self.config.layers).map(|l| layer(&format!("bfs.l{l}"))).collect(),
            path: layer("dfs.path"),
            aggregate: AggregateParams {
                heads: heads("dfs.agg"),
                output: v("dfs.agg.wo"),
            },
            scorer: ffn("scorer"),
            vars,
        }
    }

    fn time_rows(&self, tape: &mut Tape, b: &Bound, dts: &[f64]) -> Result<Var> {
        if self.config.time_encoding {
            Ok(self.encoder().encode_on_tape(tape, b.freqs, dts)?)
        } else {
            Ok(tape.constant(Tensor::zeros(&[dts.len(), self.config.dim])?))
        }
    }

    pub fn tree(&self, g: &TemporalGraph, node: NodeId, t: f64) -> Result<BfsTree> {
        expand_with(g, node, t, &self.config.sampler())
    }

    /// Stacked neighborhood attention over the tree, evaluated bottom-up.
    fn bfs_pass(
        &self,
        tape: &mut Tape,
        b: &Bound,
        g: &TemporalGraph,
        flat: &FlatTree,
        mode: &mut RunMode,
    ) -> Result<Var> {
        let d = self.config.dim;
        let depth = self.config.layers;
        let mut rep = rows_constant(tape, d, flat.nodes.iter().map(|n| g.node_feat(*n)))?;
        let mut rows = flat.len();
        for (l, layer) in (1..=depth).zip(&b.bfs) {
            let q = flat.upto(depth - l + 1);
            let children_end = flat.upto(depth - l + 2);
            let h_prev = if rows == q {
                rep
            } else {
                tape.gather_rows(rep, &(0..q).collect::<Vec<_>>())?
            };
            let phi0 = self.time_rows(tape, b, &vec![0.0; q])?;
            let self_f = self_features(tape, h_prev, phi0)?;
            let children: Vec<usize> = (1..children_end).collect();
            let parents: Vec<usize> = children.iter().map(|c| flat.parents[*c]).collect();
            let neigh_f = if children.is_empty() {
                None
            } else {
                let h = tape.gather_rows(rep, &children)?;
                let edges = rows_constant(tape, d, children.iter().map(|c| g.edge_feat(flat.events[*c])))?;
                let dts: Vec<f64> = children
                    .iter()
                    .map(|c| flat.times[flat.parents[*c]] - flat.times[*c])
                    .collect();
                let phi = self.time_rows(tape, b, &dts)?;
                Some(neighbor_features(tape, h, edges, phi)?)
            };
            rep = bfs_attend(tape, layer, self_f, neigh_f, &parents, h_prev, mode)?.output;
            rows = q;
        }
        Ok(rep)
    }

    /// Path attention over every root-to-leaf chain of the tree, then
    /// aggregation of the path encodings queried by `h_bfs`.
    fn dfs_pass(
        &self,
        tape: &mut Tape,
        b: &Bound,
        g: &TemporalGraph,
        flat: &FlatTree,
        h_bfs: Var,
        mode: &mut RunMode,
    ) -> Result<Var> {
        let d = self.config.dim;
        let chains = subsample_paths(path_indices(flat.tree), flat.tree, &self.config.sampler());
        if chains.is_empty() {
            return Ok(dfs_aggregate(tape, &b.aggregate, h_bfs, None, self.config.paths_pooling, mode)?.output);
        }
        let entries = 1..flat.len();
        let x = rows_constant(tape, d, entries.clone().map(|e| g.node_feat(flat.nodes[e])))?;
        let edges = rows_constant(tape, d, entries.clone().map(|e| g.edge_feat(flat.events[e])))?;
        let dts: Vec<f64> = entries.map(|e| flat.tree.time - flat.times[e]).collect();
        let phi = self.time_rows(tape, b, &dts)?;
        let entry_f = neighbor_features(tape, x, edges, phi)?;
        let paths: Vec<Vec<usize>> = chains
            .iter()
            .map(|c| c.iter().map(|&(l, i)| flat.offsets[l + 1] + i - 1).collect())
            .collect();
        let raw = rows_constant(tape, d, std::iter::once(g.node_feat(flat.tree.root)))?;
        let phi0 = self.time_rows(tape, b, &[0.0])?;
        let target_self = self_features(tape, raw, phi0)?;
        let reprs = dfs_path_encode(
            tape,
            &b.path,
            target_self,
            raw,
            entry_f,
            &paths,
            self.config.path_pooling,
            mode,
        )?;
        Ok(dfs_aggregate(
            tape,
            &b.aggregate,
            h_bfs,
            Some(reprs.output),
            self.config.paths_pooling,
            mode,
        )?
        .output)
    }

    /// Representation of `node` at time `t` as a `[1, d]` tape variable.
    pub fn represent(
        &self,
        tape: &mut Tape,
        b: &Bound,
        g: &TemporalGraph,
        node: NodeId,
        t: f64,
        branch: Branch,
        mode: &mut RunMode,
    ) -> Result<Var> {
        if g.dim() != self.config.dim {
            return Err(Error::Config(format!(
                "graph features have dim {}, model expects {}",
                g.dim(),
                self.config.dim
            )));
        }
        let tree = self.tree(g, node, t)?;
        let flat = FlatTree::new(&tree);
        let h_bfs = self.bfs_pass(tape, b, g, &flat, mode)?;
        let alpha = self.config.alpha;
        match branch {
            Branch::BfsOnly => Ok(h_bfs),
            Branch::Auto if alpha == 1.0 => Ok(h_bfs),
            Branch::DfsOnly => self.dfs_pass(tape, b, g, &flat, h_bfs, mode),
            Branch::Auto | Branch::Full => {
                let h_dfs = self.dfs_pass(tape, b, g, &flat, h_bfs, mode)?;
                Ok(balance(tape, h_bfs, h_dfs, alpha)?)
            }
        }
    }

    /// Evaluation-mode representation as a plain vector.
    pub fn embed(&self, g: &TemporalGraph, node: NodeId, t: f64, branch: Branch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let h = self.represent(&mut tape, &b, g, node, t, branch, &mut RunMode::Eval)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Probability that `src` links to `dst` at time `t`.
    pub fn link_probability(&self, g: &TemporalGraph, src: NodeId, dst: NodeId, t: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let mut mode = RunMode::Eval;
        let hs = self.represent(&mut tape, &b, g, src, t, Branch::Auto, &mut mode)?;
        let hd = self.represent(&mut tape, &b, g, dst, t, Branch::Auto, &mut mode)?;
        let logit = link_logit(&mut tape, &b.scorer, hs, hd)?;
        let p = tape.sigmoid(logit);
        Ok(tape.value(p).data()[0])
    }

    /// Contrastive loss of one positive edge and one corrupted destination:
    /// `-(log σ(s(src, dst)) + log σ(-s(src, neg)))`.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        g: &TemporalGraph,
        src: NodeId,
        dst: NodeId,
        neg: NodeId,
        t: f64,
        mode: &mut RunMode,
    ) -> Result<Var> {
        let hs = self.represent(tape, b, g, src, t, Branch::Auto, mode)?;
        let hd = self.represent(tape, b, g, dst, t, Branch::Auto, mode)?;
        let hn = self.represent(tape, b, g, neg, t, Branch::Auto, mode)?;
        let pos = link_logit(tape, &b.scorer, hs, hd)?;
        let neg = link_logit(tape, &b.scorer, hs, hn)?;
        Ok(contrastive_loss(tape, pos, neg)?)
    }

    /// Loss value and gradient for every parameter of one training triple.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_gradients(
        &self,
        g: &TemporalGraph,
        src: NodeId,
        dst: NodeId,
        neg: NodeId,
        t: f64,
        mode: &mut RunMode,
    ) -> Result<(f64, ParamStore)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let loss = self.edge_loss(&mut tape, &b, g, src, dst, neg, t, mode)?;
        let mut grads = tape.backward(loss)?;
        let mut out = ParamStore::new();
        for (name, var) in &b.vars {
            let grad = grads.take(*var).expect("every leaf receives a gradient");
            out.insert(name.clone(), grad);
        }
        Ok((tape.value(loss).data()[0], out))
    }
}

/// Pre-sigmoid score `FFN(h_i ‖ h_j)` as a `[1, 1]` variable.
pub fn link_logit(tape: &mut Tape, scorer: &FfnParams, h_i: Var, h_j: Var) -> Result<Var> {
    let x = tape.concat(&[h_i, h_j], 1)?;
    let h = tape.matmul(x, scorer.w1)?;
    let h = tape.add(h, scorer.b1)?;
    let h = tape.relu(h);
    let s = tape.matmul(h, scorer.w2)?;
    Ok(tape.add(s, scorer.b2)?)
}

/// `-(log σ(pos) + log σ(-neg))` summed to a scalar, in the fused form.
pub fn contrastive_loss(tape: &mut Tape, pos: Var, neg: Var) -> Result<Var> {
    let a = tape.log_sigmoid(pos);
    let n = tape.neg(neg);
    let b = tape.log_sigmoid(n);
    let total = tape.add(a, b)?;
    let s = tape.sum(total);
    Ok(tape.neg(s))
}
