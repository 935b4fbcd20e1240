//! Layered temporal neighborhood expansion and temporal path harvesting.
//!
//! [`expand`] builds the recursive neighborhood used by the BFS encoder; the
//! same tree yields every temporal path ending at the root through
//! [`collect_paths`], with no further graph queries.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalArc, TemporalGraph};

/// Which of the eligible neighbors to keep when more than `fanout` exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NeighborPolicy {
    #[default]
    MostRecent,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub depth: usize,
    pub fanout: usize,
    pub policy: NeighborPolicy,
    /// When false, events at or after the query time are eligible too.
    pub temporal_mask: bool,
    pub seed: u64,
    pub max_paths: Option<usize>,
}

impl SamplerConfig {
    pub fn new(depth: usize, fanout: usize) -> Self {
        Self {
            depth,
            fanout,
            policy: NeighborPolicy::MostRecent,
            temporal_mask: true,
            seed: 0,
            max_paths: None,
        }
    }
}

/// A sampled temporal neighbor; `parent` indexes the previous layer
/// (layer 1 entries all have parent 0, the root).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeEntry {
    pub node: NodeId,
    pub ts: f64,
    pub event_id: usize,
    pub parent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfsTree {
    pub root: NodeId,
    pub time: f64,
    /// `layers[0]` holds layer 1.
    pub layers: Vec<Vec<TreeEntry>>,
}

impl BfsTree {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.first().map_or(true, Vec::is_empty)
    }

    pub fn entry_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Offsets of each layer in a flat numbering where the root is 0 and
    /// layer-`l` entries follow all shallower ones. Has `depth + 2` items.
    pub fn flat_offsets(&self) -> Vec<usize> {
        let mut offsets = vec![0, 1];
        for layer in &self.layers {
            offsets.push(offsets.last().unwrap() + layer.len());
        }
        offsets
    }

    /// Distinct (node, timestamp) events reachable in the tree.
    pub fn receptive_field(&self) -> BTreeSet<(NodeId, u64)> {
        self.layers.iter().flatten().map(|e| (e.node, e.ts.to_bits())).collect()
    }
}

/// A time-respecting path ending at `nodes[0]`, ordered latest to earliest:
/// `hops[r]` is the arc from `nodes[r]` to `nodes[r + 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalPath {
    pub nodes: Vec<NodeId>,
    pub hops: Vec<TemporalArc>,
    pub target_time: f64,
}

impl TemporalPath {
    pub fn len(&self) -> usize {
        self.hops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hops.is_empty()
    }

    /// (node, ts bits) per hop; the identity used for set comparisons.
    pub fn signature(&self) -> Vec<(NodeId, u64)> {
        self.hops.iter().map(|h| (h.nbr, h.ts.to_bits())).collect()
    }

    pub fn is_time_decreasing(&self) -> bool {
        let mut prev = self.target_time;
        self.hops.iter().all(|h| {
            let ok = h.ts < prev;
            prev = h.ts;
            ok
        })
    }
}

fn query_seed(seed: u64, node: NodeId, t: f64) -> u64 {
    // splitmix-style mixing; only needs to be deterministic.
    let mut z = seed ^ (node as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ t.to_bits().rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Neighbors of `node` at time `t` under `cfg`, ascending by time.
pub fn select_neighbors(g: &TemporalGraph, node: NodeId, t: f64, cfg: &SamplerConfig) -> Result<Vec<TemporalArc>> {
    let eligible = if cfg.temporal_mask {
        g.neighbors_before(node, t)?
    } else {
        g.arcs(node)?
    };
    if eligible.len() <= cfg.fanout {
        return Ok(eligible.to_vec());
    }
    Ok(match cfg.policy {
        NeighborPolicy::MostRecent => eligible[eligible.len() - cfg.fanout..].to_vec(),
        NeighborPolicy::Uniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(cfg.seed, node, t));
            let mut picked = sample(&mut rng, eligible.len(), cfg.fanout).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| eligible[i]).collect()
        }
    })
}

/// Recursive neighborhood of `(root, t)`: layer 1 is the root's temporal
/// neighbors, layer `l + 1` the temporal neighbors of each layer-`l` entry
/// queried at that entry's event time.
pub fn expand_with(g: &TemporalGraph, root: NodeId, t: f64, cfg: &SamplerConfig) -> Result<BfsTree> {
    if cfg.depth == 0 || cfg.fanout == 0 {
        return Err(Error::Config("expansion needs depth >= 1 and fanout >= 1".into()));
    }
    g.arcs(root)?;
    let mut layers: Vec<Vec<TreeEntry>> = Vec::with_capacity(cfg.depth);
    let first = select_neighbors(g, root, t, cfg)?
        .into_iter()
        .map(|a| TreeEntry {
            node: a.nbr,
            ts: a.ts,
            event_id: a.event_id,
            parent: 0,
        })
        .collect();
    layers.push(first);
    for l in 1..cfg.depth {
        let mut next = Vec::new();
        for (parent, e) in layers[l - 1].iter().enumerate() {
            for a in select_neighbors(g, e.node, e.ts, cfg)? {
                next.push(TreeEntry {
                    node: a.nbr,
                    ts: a.ts,
                    event_id: a.event_id,
                    parent,
                });
            }
        }
        layers.push(next);
    }
    Ok(BfsTree { root, time: t, layers })
}

/// [`expand_with`] using the "k most recent before t" policy.
pub fn expand(g: &TemporalGraph, root: NodeId, t: f64, depth: usize, fanout: usize) -> Result<BfsTree> {
    expand_with(g, root, t, &SamplerConfig::new(depth, fanout))
}

/// Root-to-leaf branches of the tree as (layer, index) chains, depth-first.
/// Branches that stop before the last layer are kept.
pub fn path_indices(tree: &BfsTree) -> Vec<Vec<(usize, usize)>> {
    let depth = tree.depth();
    // Children of one parent are contiguous because each layer is built
    // parent by parent.
    let mut child_ranges: Vec<Vec<(usize, usize)>> = Vec::with_capacity(depth);
    for l in 0..depth {
        let parents = if l == 0 { 1 } else { tree.layers[l - 1].len() };
        let mut ranges = vec![(0, 0); parents];
        if let Some(layer) = tree.layers.get(l) {
            let mut i = 0;
            while i < layer.len() {
                let p = layer[i].parent;
                let start = i;
                while i < layer.len() && layer[i].parent == p {
                    i += 1;
                }
                ranges[p] = (start, i);
            }
        }
        child_ranges.push(ranges);
    }

    let mut out = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::with_capacity(depth);
    fn walk(
        layer: usize,
        parent: usize,
        child_ranges: &[Vec<(usize, usize)>],
        stack: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        let (start, end) = if layer < child_ranges.len() {
            child_ranges[layer][parent]
        } else {
            (0, 0)
        };
        if start == end {
            if !stack.is_empty() {
                out.push(stack.clone());
            }
            return;
        }
        for idx in start..end {
            stack.push((layer, idx));
            walk(layer + 1, idx, child_ranges, stack, out);
            stack.pop();
        }
    }
    walk(0, 0, &child_ranges, &mut stack, &mut out);
    out
}

fn to_path(tree: &BfsTree, chain: &[(usize, usize)]) -> TemporalPath {
    let mut nodes = vec![tree.root];
    let mut hops = Vec::with_capacity(chain.len());
    for &(l, i) in chain {
        let e = tree.layers[l][i];
        nodes.push(e.node);
        hops.push(TemporalArc {
            nbr: e.node,
            ts: e.ts,
            event_id: e.event_id,
        });
    }
    TemporalPath {
        nodes,
        hops,
        target_time: tree.time,
    }
}

/// Every temporal path ending at the tree root, one per leaf.
pub fn collect_paths(tree: &BfsTree) -> Vec<TemporalPath> {
    path_indices(tree).iter().map(|c| to_path(tree, c)).collect()
}

/// Optionally thins path chains to `max_paths`, uniformly and deterministically,
/// keeping their relative order.
pub fn subsample_paths(
    chains: Vec<Vec<(usize, usize)>>,
    tree: &BfsTree,
    cfg: &SamplerConfig,
) -> Vec<Vec<(usize, usize)>> {
    match cfg.max_paths {
        Some(cap) if chains.len() > cap => {
            let mut rng = ChaCha8Rng::seed_from_u64(query_seed(cfg.seed ^ 0xA5A5, tree.root, tree.time));
            let mut keep = sample(&mut rng, chains.len(), cap).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| chains[i].clone()).collect()
        }
        _ => chains,
    }
}

/// Default cap for [`brute_force_paths`].
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

fn count_paths(g: &TemporalGraph, node: NodeId, t: f64, remaining: usize, limit: u64, count: &mut u64) -> Result<()> {
    let arcs = g.neighbors_before(node, t)?;
    if remaining == 0 || arcs.is_empty() {
        *count += 1;
        return Ok(());
    }
    for a in arcs {
        if *count > limit {
            return Ok(());
        }
        count_paths(g, a.nbr, a.ts, remaining - 1, limit, count)?;
    }
    Ok(())
}

/// Exhaustive enumeration over the full adjacency of every maximal
/// strictly-time-decreasing path with at most `depth` hops ending at `root`
/// before `t`. Refuses when more than [`BRUTE_FORCE_LIMIT`] paths exist.
pub fn brute_force_paths(g: &TemporalGraph, root: NodeId, t: f64, depth: usize) -> Result<Vec<TemporalPath>> {
    brute_force_paths_limited(g, root, t, depth, BRUTE_FORCE_LIMIT)
}

pub fn brute_force_paths_limited(
    g: &TemporalGraph,
    root: NodeId,
    t: f64,
    depth: usize,
    limit: u64,
) -> Result<Vec<TemporalPath>> {
    if depth == 0 {
        return Err(Error::Config("path depth must be at least 1".into()));
    }
    let mut counted = 0;
    count_paths(g, root, t, depth, limit, &mut counted)?;
    if counted > limit {
        return Err(Error::PathLimit {
            estimate: counted,
            limit,
        });
    }

    fn extend(
        g: &TemporalGraph,
        node: NodeId,
        t: f64,
        remaining: usize,
        nodes: &mut Vec<NodeId>,
        hops: &mut Vec<TemporalArc>,
        target_time: f64,
        out: &mut Vec<TemporalPath>,
    ) -> Result<()> {
        let arcs = g.neighbors_before(node, t)?;
        if remaining == 0 || arcs.is_empty() {
            if !hops.is_empty() {
                out.push(TemporalPath {
                    nodes: nodes.clone(),
                    hops: hops.clone(),
                    target_time,
                });
            }
            return Ok(());
        }
        for a in arcs {
            nodes.push(a.nbr);
            hops.push(*a);
            extend(g, a.nbr, a.ts, remaining - 1, nodes, hops, target_time, out)?;
            nodes.pop();
            hops.pop();
        }
        Ok(())
    }

    let mut out = Vec::new();
    extend(g, root, t, depth, &mut vec![root], &mut Vec::new(), t, &mut out)?;
    Ok(out)
}

/// Distinct (node, timestamp) events touched by a set of paths.
pub fn paths_receptive_field(paths: &[TemporalPath]) -> BTreeSet<(NodeId, u64)> {
    paths
        .iter()
        .flat_map(|p| p.hops.iter().map(|h| (h.nbr, h.ts.to_bits())))
        .collect()
}
