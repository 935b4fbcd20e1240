use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::{json, Map, Value};
use tbdfs::trainer::TrainConfig;

/// Training configuration: an optional JSON file, then flag overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with any subset of the training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Feature and hidden dimension (defaults to the dataset's).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Most recent neighbors kept per node.
    #[arg(long)]
    pub fanout: Option<usize>,
    /// Weight of the BFS branch; 1 is BFS only, 0 is DFS only.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Multiplier on the learning rate of the time-encoding frequencies.
    #[arg(long)]
    pub time_lr_scale: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn set(root: &mut Value, path: &[&str], v: Value) {
    let mut patch = v;
    for key in path.iter().rev() {
        let mut m = Map::new();
        m.insert((*key).to_string(), patch);
        patch = Value::Object(m);
    }
    merge(root, patch);
}

impl ConfigArgs {
    /// Effective configuration and whether the model dimension was chosen
    /// explicitly (in the file or by flag).
    pub fn resolve(&self) -> Result<(TrainConfig, bool)> {
        let mut value = serde_json::to_value(TrainConfig::default())?;
        let mut dim_set = false;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let file: Value =
                serde_json::from_str(&text).with_context(|| format!("{} is not valid JSON", path.display()))?;
            dim_set = file.pointer("/model/dim").is_some();
            merge(&mut value, file);
        }
        let model = [
            ("dim", self.dim.map(|v| json!(v))),
            ("layers", self.layers.map(|v| json!(v))),
            ("heads", self.heads.map(|v| json!(v))),
            ("fanout", self.fanout.map(|v| json!(v))),
            ("alpha", self.alpha.map(|v| json!(v))),
            ("dropout", self.dropout.map(|v| json!(v))),
        ];
        for (key, v) in model {
            if let Some(v) = v {
                set(&mut value, &["model", key], v);
            }
        }
        let top = [
            ("lr", self.lr.map(|v| json!(v))),
            ("time_lr_scale", self.time_lr_scale.map(|v| json!(v))),
            ("weight_decay", self.weight_decay.map(|v| json!(v))),
            ("batch_size", self.batch_size.map(|v| json!(v))),
            ("epochs", self.epochs.map(|v| json!(v))),
            ("patience", self.patience.map(|v| json!(v))),
            ("seed", self.seed.map(|v| json!(v))),
            ("train_frac", self.train_frac.map(|v| json!(v))),
            ("val_frac", self.val_frac.map(|v| json!(v))),
        ];
        for (key, v) in top {
            if let Some(v) = v {
                set(&mut value, &[key], v);
            }
        }
        dim_set |= self.dim.is_some();
        let cfg: TrainConfig = serde_json::from_value(value).context("invalid training configuration")?;
        Ok((cfg, dim_set))
    }
}

/// Parses `0,1,2` or a range `0..5`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a >= b {
            bail!("empty seed range {s}");
        }
        return Ok((a..b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse::<u64>().with_context(|| format!("bad seed `{x}`")))
        .collect()
}

pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            let v: f64 = x.trim().parse().with_context(|| format!("bad alpha `{x}`"))?;
            if !(0.0..=1.0).contains(&v) {
                bail!("alpha {v} outside [0, 1]");
            }
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"lr": 0.5, "model": {"heads": 4, "dim": 6}}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            heads: Some(3),
            epochs: Some(2),
            ..ConfigArgs::default()
        };
        let (cfg, dim_set) = args.resolve().unwrap();
        assert_eq!((cfg.lr, cfg.model.heads, cfg.model.dim, cfg.epochs), (0.5, 3, 6, 2));
        assert!(dim_set);
        assert_eq!(cfg.model.layers, TrainConfig::default().model.layers);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"learning_rate": 0.5}"#).unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..ConfigArgs::default()
        };
        assert!(args.resolve().is_err());
    }

    #[test]
    fn seed_lists_and_ranges() {
        assert_eq!(parse_seeds("3,1,2").unwrap(), vec![3, 1, 2]);
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("a").is_err());
        assert_eq!(parse_grid("0,0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("1.5").is_err());
    }
}
