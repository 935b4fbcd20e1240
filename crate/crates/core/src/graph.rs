//! Immutable temporal graph: time-sorted adjacency, features, CSV ingestion
//! and chronological splitting.

use std::collections::HashMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

/// Fan-out value meaning "no cap".
pub const UNLIMITED: usize = usize::MAX;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: negative timestamp {ts}")]
    NegativeTimestamp { line: u64, ts: f64 },
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("unknown node name `{0}`")]
    UnknownNodeName(String),
    #[error("invalid timestamp {0}")]
    InvalidTimestamp(f64),
    #[error("feature vector has length {got}, graph dimension is {dim}")]
    FeatureLength { got: usize, dim: usize },
    #[error("graph has {0} events; at least 10 are needed for a chronological split")]
    TooFewEvents(usize),
    #[error("invalid split fractions train={train} val={val}")]
    InvalidFractions { train: f64, val: f64 },
}

/// One undirected interaction. `event_id` is the event's position in
/// chronological order (ties keep load order).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalEdgeEvent {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: f64,
    pub event_id: usize,
}

/// Directed half of an event as seen from one endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalArc {
    pub nbr: NodeId,
    pub ts: f64,
    pub event_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalGraph {
    dim: usize,
    node_names: Vec<String>,
    name_index: HashMap<String, NodeId>,
    node_feats: Vec<f64>,
    events: Vec<TemporalEdgeEvent>,
    edge_feats: Vec<f64>,
    offsets: Vec<usize>,
    arcs: Vec<TemporalArc>,
    bipartite: bool,
    destinations: Vec<NodeId>,
}

/// Accumulates nodes and events, then freezes them into a [`TemporalGraph`].
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    dim: usize,
    node_names: Vec<String>,
    node_feats: Vec<f64>,
    raw: Vec<(NodeId, NodeId, f64, Vec<f64>)>,
    bipartite: bool,
}

impl GraphBuilder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            node_names: Vec::new(),
            node_feats: Vec::new(),
            raw: Vec::new(),
            bipartite: false,
        }
    }

    pub fn bipartite(mut self, bipartite: bool) -> Self {
        self.bipartite = bipartite;
        self
    }

    pub fn add_node(&mut self, name: impl Into<String>) -> NodeId {
        self.node_names.push(name.into());
        self.node_feats.extend(std::iter::repeat(0.0).take(self.dim));
        self.node_names.len() - 1
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn set_node_features(&mut self, node: NodeId, feats: &[f64]) -> Result<(), GraphError> {
        if node >= self.node_names.len() {
            return Err(GraphError::UnknownNode(node));
        }
        if feats.len() != self.dim {
            return Err(GraphError::FeatureLength {
                got: feats.len(),
                dim: self.dim,
            });
        }
        self.node_feats[node * self.dim..(node + 1) * self.dim].copy_from_slice(feats);
        Ok(())
    }

    /// Adds an event with zero edge features.
    pub fn add_event(&mut self, src: NodeId, dst: NodeId, ts: f64) -> Result<(), GraphError> {
        self.add_event_with_features(src, dst, ts, vec![0.0; self.dim])
    }

    pub fn add_event_with_features(
        &mut self,
        src: NodeId,
        dst: NodeId,
        ts: f64,
        feats: Vec<f64>,
    ) -> Result<(), GraphError> {
        let n = self.node_names.len();
        for node in [src, dst] {
            if node >= n {
                return Err(GraphError::UnknownNode(node));
            }
        }
        if !ts.is_finite() || ts < 0.0 {
            return Err(GraphError::InvalidTimestamp(ts));
        }
        if feats.len() != self.dim {
            return Err(GraphError::FeatureLength {
                got: feats.len(),
                dim: self.dim,
            });
        }
        self.raw.push((src, dst, ts, feats));
        Ok(())
    }

    pub fn build(self) -> TemporalGraph {
        let GraphBuilder {
            dim,
            node_names,
            node_feats,
            mut raw,
            bipartite,
        } = self;
        // Stable: equal timestamps keep insertion order.
        raw.sort_by(|a, b| a.2.total_cmp(&b.2));

        let n = node_names.len();
        let mut events = Vec::with_capacity(raw.len());
        let mut edge_feats = Vec::with_capacity(raw.len() * dim);
        let mut degree = vec![0usize; n];
        let mut is_dst = vec![false; n];
        for (event_id, (src, dst, ts, feats)) in raw.into_iter().enumerate() {
            events.push(TemporalEdgeEvent { src, dst, ts, event_id });
            edge_feats.extend(feats);
            degree[src] += 1;
            degree[dst] += 1;
            is_dst[dst] = true;
        }

        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut fill = offsets.clone();
        let placeholder = TemporalArc {
            nbr: 0,
            ts: 0.0,
            event_id: 0,
        };
        let mut arcs = vec![placeholder; offsets[n]];
        // Events are already chronological, so each bucket fills in (ts, event_id) order.
        for e in &events {
            for (from, to) in [(e.src, e.dst), (e.dst, e.src)] {
                arcs[fill[from]] = TemporalArc {
                    nbr: to,
                    ts: e.ts,
                    event_id: e.event_id,
                };
                fill[from] += 1;
            }
        }

        let name_index = node_names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let destinations = (0..n).filter(|i| is_dst[*i]).collect();
        TemporalGraph {
            dim,
            node_names,
            name_index,
            node_feats,
            events,
            edge_feats,
            offsets,
            arcs,
            bipartite,
            destinations,
        }
    }
}

/// How feature columns are located in an event CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureColumns {
    /// Every column that is not `src`, `dst` or `ts`, including unnamed trailing fields.
    Remaining,
    /// All fields from this zero-based column index to the end of the row.
    StartingAt(usize),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub src: String,
    pub dst: String,
    pub ts: String,
    pub features: FeatureColumns,
    /// Negative candidates are restricted to destination nodes.
    pub bipartite: bool,
    /// Source and destination ids name different nodes even when equal.
    pub separate_namespaces: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            src: "src".into(),
            dst: "dst".into(),
            ts: "ts".into(),
            features: FeatureColumns::Remaining,
            bipartite: false,
            separate_namespaces: false,
        }
    }
}

impl CsvSchema {
    /// Layout of the public JODIE interaction files
    /// (`user_id,item_id,timestamp,state_label,features...`).
    pub fn jodie() -> Self {
        Self {
            src: "user_id".into(),
            dst: "item_id".into(),
            ts: "timestamp".into(),
            features: FeatureColumns::StartingAt(4),
            bipartite: true,
            separate_namespaces: true,
        }
    }
}

fn fit_to_dim(mut v: Vec<f64>, dim: usize) -> Vec<f64> {
    v.resize(dim, 0.0);
    v
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, GraphError> {
    let file = std::fs::File::open(path).map_err(|source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn csv_err(e: csv::Error, path: &Path) -> GraphError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => GraphError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => GraphError::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

fn parse_f64(field: &str, line: u64, what: &str) -> Result<f64, GraphError> {
    field.parse::<f64>().map_err(|_| GraphError::Parse {
        line,
        message: format!("cannot parse {what} `{field}` as a number"),
    })
}

struct RawRow {
    src: String,
    dst: String,
    ts: f64,
    feats: Vec<f64>,
}

/// Loads a headered event CSV. Missing features become zeros; extra feature
/// columns beyond `dim` are dropped.
pub fn load_csv(path: &Path, schema: &CsvSchema, dim: usize) -> Result<TemporalGraph, GraphError> {
    load_csv_with_nodes(path, None, schema, dim)
}

/// Like [`load_csv`], also reading a `node_id,f1..fn` sidecar.
pub fn load_csv_with_nodes(
    path: &Path,
    node_features: Option<&Path>,
    schema: &CsvSchema,
    dim: usize,
) -> Result<TemporalGraph, GraphError> {
    let mut reader = open_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_err(e, path))?.clone();
    let mut rows: Vec<RawRow> = Vec::new();
    if !headers.is_empty() {
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| GraphError::MissingColumn(name.to_string()))
        };
        let (src_i, dst_i, ts_i) = (col(&schema.src)?, col(&schema.dst)?, col(&schema.ts)?);
        for record in reader.records() {
            let record = record.map_err(|e| csv_err(e, path))?;
            let line = record.position().map_or(0, |p| p.line());
            let field = |i: usize| {
                record.get(i).ok_or_else(|| GraphError::Parse {
                    line,
                    message: format!("row has {} fields, expected at least {}", record.len(), i + 1),
                })
            };
            let src = field(src_i)?.to_string();
            let dst = field(dst_i)?.to_string();
            let ts = parse_f64(field(ts_i)?, line, "timestamp")?;
            if !ts.is_finite() {
                return Err(GraphError::Parse {
                    line,
                    message: format!("non-finite timestamp {ts}"),
                });
            }
            if ts < 0.0 {
                return Err(GraphError::NegativeTimestamp { line, ts });
            }
            let feature_fields: Vec<usize> = match &schema.features {
                FeatureColumns::Remaining => (0..record.len())
                    .filter(|i| ![src_i, dst_i, ts_i].contains(i))
                    .collect(),
                FeatureColumns::StartingAt(start) => (*start..record.len()).collect(),
                FeatureColumns::None => Vec::new(),
            };
            let mut feats = Vec::with_capacity(dim);
            for i in feature_fields.into_iter().take(dim) {
                let f = field(i)?;
                feats.push(if f.is_empty() {
                    0.0
                } else {
                    parse_f64(f, line, "feature")?
                });
            }
            rows.push(RawRow {
                src,
                dst,
                ts,
                feats: fit_to_dim(feats, dim),
            });
        }
    }

    // Node ids follow first appearance in chronological order so that row
    // order in the file does not matter when timestamps are distinct.
    rows.sort_by(|a, b| a.ts.total_cmp(&b.ts));
    let mut builder = GraphBuilder::new(dim).bipartite(schema.bipartite);
    let mut ids: HashMap<String, NodeId> = HashMap::new();
    let mut intern = |builder: &mut GraphBuilder, name: String| -> NodeId {
        *ids.entry(name.clone()).or_insert_with(|| builder.add_node(name))
    };
    let (src_prefix, dst_prefix) = if schema.separate_namespaces {
        ("src:", "dst:")
    } else {
        ("", "")
    };
    for row in rows {
        let s = intern(&mut builder, format!("{src_prefix}{}", row.src));
        let d = intern(&mut builder, format!("{dst_prefix}{}", row.dst));
        builder.add_event_with_features(s, d, row.ts, row.feats)?;
    }

    if let Some(node_path) = node_features {
        let mut reader = open_reader(node_path)?;
        for record in reader.records() {
            let record = record.map_err(|e| csv_err(e, node_path))?;
            let line = record.position().map_or(0, |p| p.line());
            let Some(name) = record.get(0) else { continue };
            // Features for nodes that never interact are ignored.
            let Some(&node) = ids.get(name) else { continue };
            let mut feats = Vec::with_capacity(dim);
            for f in record.iter().skip(1).take(dim) {
                feats.push(parse_f64(f, line, "node feature")?);
            }
            builder.set_node_features(node, &fit_to_dim(feats, dim))?;
        }
    }
    Ok(builder.build())
}

/// Writes `src,dst,ts,f1..fd` rows in event order, plus an optional
/// `node_id,f1..fd` sidecar. Reading both back with [`load_csv_with_nodes`]
/// and the default schema reproduces events and features exactly; node ids
/// are renumbered by first appearance and isolated nodes are dropped.
pub fn write_csv(g: &TemporalGraph, events: &Path, nodes: Option<&Path>) -> Result<(), GraphError> {
    let fail = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| GraphError::Write {
            path: path.clone(),
            source: e.into(),
        }
    };
    let feature_header = (1..=g.dim()).map(|k| format!("f{k}"));
    let mut w = csv::Writer::from_path(events).map_err(fail(events))?;
    let header: Vec<String> = ["src", "dst", "ts"]
        .iter()
        .map(|s| s.to_string())
        .chain(feature_header.clone())
        .collect();
    w.write_record(&header).map_err(fail(events))?;
    for (k, e) in g.events().iter().enumerate() {
        let mut row = vec![
            g.node_names[e.src].clone(),
            g.node_names[e.dst].clone(),
            e.ts.to_string(),
        ];
        row.extend(g.edge_feat(k).iter().map(f64::to_string));
        w.write_record(&row).map_err(fail(events))?;
    }
    w.flush().map_err(|source| GraphError::Write {
        path: events.to_path_buf(),
        source,
    })?;
    if let Some(path) = nodes {
        let mut w = csv::Writer::from_path(path).map_err(fail(path))?;
        let header: Vec<String> = std::iter::once("node_id".to_string()).chain(feature_header).collect();
        w.write_record(&header).map_err(fail(path))?;
        for n in 0..g.node_count() {
            let mut row = vec![g.node_names[n].clone()];
            row.extend(g.node_feat(n).iter().map(f64::to_string));
            w.write_record(&row).map_err(fail(path))?;
        }
        w.flush().map_err(|source| GraphError::Write {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub events: usize,
    pub arcs: usize,
    pub dim: usize,
    pub bipartite: bool,
    pub ts_min: Option<f64>,
    pub ts_max: Option<f64>,
}

/// Chronological train/val/test partition over event positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBundle {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
    pub t_train_end: f64,
    pub t_val_end: f64,
}

impl TemporalGraph {
    pub fn builder(dim: usize) -> GraphBuilder {
        GraphBuilder::new(dim)
    }

    /// Builder pre-populated with this graph's nodes, features and events.
    pub fn to_builder(&self) -> GraphBuilder {
        let mut b = GraphBuilder::new(self.dim).bipartite(self.bipartite);
        b.node_names = self.node_names.clone();
        b.node_feats = self.node_feats.clone();
        b.raw = self
            .events
            .iter()
            .map(|e| (e.src, e.dst, e.ts, self.edge_feat(e.event_id).to_vec()))
            .collect();
        b
    }

    /// The same nodes with only the first `events` chronological events.
    pub fn prefix(&self, events: usize) -> TemporalGraph {
        let mut b = self.to_builder();
        b.raw.truncate(events);
        b.build()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.node_names.len()
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    pub fn is_bipartite(&self) -> bool {
        self.bipartite
    }

    /// Nodes that appear as the destination of at least one event.
    pub fn destinations(&self) -> &[NodeId] {
        &self.destinations
    }

    /// Events in chronological order; `events()[k].event_id == k`.
    pub fn events(&self) -> &[TemporalEdgeEvent] {
        &self.events
    }

    pub fn node_name(&self, node: NodeId) -> Option<&str> {
        self.node_names.get(node).map(String::as_str)
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, GraphError> {
        self.name_index
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownNodeName(name.to_string()))
    }

    pub fn node_feat(&self, node: NodeId) -> &[f64] {
        &self.node_feats[node * self.dim..(node + 1) * self.dim]
    }

    pub fn edge_feat(&self, event_id: usize) -> &[f64] {
        &self.edge_feats[event_id * self.dim..(event_id + 1) * self.dim]
    }

    fn check_node(&self, node: NodeId) -> Result<(), GraphError> {
        if node < self.node_count() {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(node))
        }
    }

    /// Full adjacency of `node`, ascending by (ts, event_id).
    pub fn arcs(&self, node: NodeId) -> Result<&[TemporalArc], GraphError> {
        self.check_node(node)?;
        Ok(&self.arcs[self.offsets[node]..self.offsets[node + 1]])
    }

    /// Every arc of `node` strictly before `t`, ascending.
    pub fn neighbors_before(&self, node: NodeId, t: f64) -> Result<&[TemporalArc], GraphError> {
        if t.is_nan() {
            return Err(GraphError::InvalidTimestamp(t));
        }
        let arcs = self.arcs(node)?;
        let end = arcs.partition_point(|a| a.ts < t);
        Ok(&arcs[..end])
    }

    /// The `k` most recent arcs of `node` with `ts < t`, ascending by time.
    pub fn temporal_neighbors(&self, node: NodeId, t: f64, k: usize) -> Result<&[TemporalArc], GraphError> {
        let before = self.neighbors_before(node, t)?;
        Ok(&before[before.len().saturating_sub(k)..])
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            nodes: self.node_count(),
            events: self.event_count(),
            arcs: self.arcs.len(),
            dim: self.dim,
            bipartite: self.bipartite,
            ts_min: self.events.first().map(|e| e.ts),
            ts_max: self.events.last().map(|e| e.ts),
        }
    }

    /// Splits events by count: `floor(train_frac * n)` for training,
    /// `floor(val_frac * n)` for validation, the remainder for testing.
    pub fn chronological_split(&self, train_frac: f64, val_frac: f64) -> Result<SplitBundle, GraphError> {
        let n = self.events.len();
        let valid = train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0;
        if !valid {
            return Err(GraphError::InvalidFractions {
                train: train_frac,
                val: val_frac,
            });
        }
        if n < 10 {
            return Err(GraphError::TooFewEvents(n));
        }
        // The epsilon keeps e.g. 0.7 * 1000 from flooring to 699.
        let n_train = ((train_frac * n as f64) + 1e-9).floor() as usize;
        let n_val = ((val_frac * n as f64) + 1e-9).floor() as usize;
        let val_end = n_train + n_val;
        if n_train == 0 || n_val == 0 || val_end >= n {
            return Err(GraphError::InvalidFractions {
                train: train_frac,
                val: val_frac,
            });
        }
        Ok(SplitBundle {
            train: 0..n_train,
            val: n_train..val_end,
            test: val_end..n,
            t_train_end: self.events[n_train - 1].ts,
            t_val_end: self.events[val_end - 1].ts,
        })
    }
}
