use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tbdfs::graph::{load_csv_with_nodes, write_csv, CsvSchema, TemporalGraph};

pub const MANIFEST: &str = "dataset.json";
pub const EVENTS: &str = "events.csv";
pub const NODES: &str = "nodes.csv";

/// Describes a dataset directory written by `gen-synth` or `prepare`.
/// File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub events: PathBuf,
    pub node_features: Option<PathBuf>,
    pub dim: usize,
    pub bipartite: bool,
    /// How the dataset was produced.
    pub source: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Schema {
    /// `src,dst,ts,f1..fn`
    #[default]
    Default,
    /// `user_id,item_id,timestamp,state_label,f1..fn`
    Jodie,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// A `dataset.json` manifest, a directory holding one, or an event CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Node feature CSV (`node_id,f1..fn`) for a raw event CSV.
    #[arg(long)]
    pub node_features: Option<PathBuf>,
    /// Column layout of a raw event CSV.
    #[arg(long, value_enum, default_value_t = Schema::Default)]
    pub schema: Schema,
    /// Draw negatives only from destination nodes (raw CSV only).
    #[arg(long)]
    pub bipartite: bool,
}

pub struct Dataset {
    pub graph: TemporalGraph,
    /// Echoed into reports.
    pub description: Value,
}

fn manifest_path(data: &Path) -> Option<PathBuf> {
    if data.is_dir() {
        return Some(data.join(MANIFEST));
    }
    (data.extension().and_then(|e| e.to_str()) == Some("json")).then(|| data.to_path_buf())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a dataset manifest", path.display()))
}

impl DataArgs {
    /// Feature dimension stored in a manifest, if the data is one.
    pub fn manifest_dim(&self) -> Result<Option<usize>> {
        match manifest_path(&self.data) {
            Some(p) => Ok(Some(read_manifest(&p)?.dim)),
            None => Ok(None),
        }
    }

    /// Loads the graph with features padded or truncated to `dim`.
    pub fn load(&self, dim: usize) -> Result<Dataset> {
        if let Some(path) = manifest_path(&self.data) {
            let m = read_manifest(&path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            let events = base.join(&m.events);
            let nodes = m.node_features.as_ref().map(|n| base.join(n));
            let schema = CsvSchema {
                bipartite: m.bipartite,
                ..CsvSchema::default()
            };
            if dim != m.dim {
                log::warn!(
                    "dataset dim {} differs from model dim {dim}; features are resized",
                    m.dim
                );
            }
            let graph = load_csv_with_nodes(&events, nodes.as_deref(), &schema, dim)?;
            let description = serde_json::json!({ "manifest": m });
            return Ok(Dataset { graph, description });
        }
        let mut schema = match self.schema {
            Schema::Default => CsvSchema::default(),
            Schema::Jodie => CsvSchema::jodie(),
        };
        schema.bipartite |= self.bipartite;
        let graph = load_csv_with_nodes(&self.data, self.node_features.as_deref(), &schema, dim)?;
        let description = serde_json::json!({
            "events": self.data,
            "node_features": self.node_features,
            "schema": schema,
        });
        Ok(Dataset { graph, description })
    }
}

/// Writes `events.csv`, `nodes.csv` and `dataset.json` into `dir`.
pub fn write_dataset(dir: &Path, g: &TemporalGraph, source: Value) -> Result<Manifest> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    write_csv(g, &dir.join(EVENTS), Some(&dir.join(NODES)))?;
    let m = Manifest {
        events: EVENTS.into(),
        node_features: Some(NODES.into()),
        dim: g.dim(),
        bipartite: g.is_bipartite(),
        source,
    };
    write_json(&dir.join(MANIFEST), &m)?;
    Ok(m)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        bail!("{} exists and is not a directory", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}
