use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use tbdfs::evalbench::{
    ablation_csv, ablation_grid, alpha_sweep, default_alpha_grid, evaluate, gen_planted, sweep_csv, PlantedParams,
    Variant,
};
use tbdfs::graph::UNLIMITED;
use tbdfs::sampler::{collect_paths, expand};
use tbdfs::trainer::{train_with_callback, Checkpoint, TrainConfig};

mod config;
mod data;

use config::{parse_grid, parse_seeds, ConfigArgs};
use data::{ensure_dir, write_dataset, write_json, write_text, DataArgs};

/// Temporal link prediction with BFS and DFS attention over event graphs.
#[derive(Debug, Parser)]
#[command(name = "tbdfs", version)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print node, event and timestamp statistics as JSON.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        /// Feature dimension to load raw CSV features at.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Normalize an event CSV into a dataset directory with splits.
    Prepare {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        dim: Option<usize>,
        /// Keep only the first N events in time order.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0.7)]
        train_frac: f64,
        #[arg(long, default_value_t = 0.15)]
        val_frac: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic user-item revisit dataset.
    GenSynth(GenSynthArgs),
    /// Train a model and write a checkpoint with its epoch log.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the validation or test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Negative sampling seed (defaults to the training seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation variant over several seeds.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Variant to run (repeatable): full, -BFS, -DFS, path-avg, paths-avg, -time.
        #[arg(long = "variant", allow_hyphen_values = true)]
        variants: Vec<String>,
        /// Comma-separated seeds or a range such as `0..5`.
        #[arg(long, default_value = "0..5")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over a grid of alpha values.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated alpha values (defaults to 0, 0.1, ..., 1).
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "0..5")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the temporal paths ending at a node as JSON lines.
    Paths {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        dim: Option<usize>,
        /// Node name as it appears in the data.
        #[arg(long)]
        node: String,
        #[arg(long)]
        time: f64,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        /// Most recent neighbors per hop (unlimited when omitted).
        #[arg(long)]
        fanout: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Val,
    Test,
}

#[derive(Debug, clap::Args)]
struct GenSynthArgs {
    /// JSON file with generator parameters; flags override it.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    /// User-driven events, not counting noise.
    #[arg(long)]
    events: Option<usize>,
    #[arg(long)]
    revisit_prob: Option<f64>,
    #[arg(long)]
    noise_edges: Option<usize>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("TBDFS_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Stats { data, dim } => {
            let dim = data_dim(&data, dim)?;
            let ds = data.load(dim)?;
            println!("{}", serde_json::to_string_pretty(&ds.graph.stats())?);
        }
        Command::Prepare {
            data,
            dim,
            limit,
            train_frac,
            val_frac,
            out,
        } => {
            let dim = data_dim(&data, dim)?;
            let ds = data.load(dim)?;
            let g = match limit {
                Some(n) => ds.graph.prefix(n.min(ds.graph.event_count())),
                None => ds.graph,
            };
            let splits = g.chronological_split(train_frac, val_frac)?;
            ensure_dir(&out)?;
            write_dataset(&out, &g, json!({ "prepared_from": ds.description, "limit": limit }))?;
            write_json(&out.join("splits.json"), &splits)?;
            write_json(&out.join("stats.json"), &g.stats())?;
            log::info!("wrote {} events to {}", g.event_count(), out.display());
        }
        Command::GenSynth(args) => gen_synth(args)?,
        Command::Train { data, cfg, out } => {
            let cfg = effective_config(&data, &cfg)?;
            train_cmd(&data, &cfg, &out)?;
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = &ckpt.config;
            let ds = data.load(cfg.model.dim)?;
            let g = &ds.graph;
            let splits = g.chronological_split(cfg.train_frac, cfg.val_frac)?;
            let model = ckpt.model()?;
            let seed = seed.unwrap_or(cfg.seed);
            let result = match split {
                Split::Test => evaluate(&model, g, splits.test.clone(), seed)?,
                Split::Val => evaluate(&model, &g.prefix(splits.val.end), splits.val.clone(), seed)?,
            };
            ensure_dir(&out)?;
            let report = json!({
                "split": format!("{split:?}").to_lowercase(),
                "seed": seed,
                "checkpoint": ckpt.meta,
                "config": cfg,
                "data": ds.description,
                "result": result,
            });
            write_json(&out.join("eval_report.json"), &report)?;
            println!("accuracy {:.4} f1 {:.4}", result.accuracy, result.f1);
        }
        Command::Ablate {
            data,
            cfg,
            variants,
            seeds,
            out,
        } => {
            let cfg = effective_config(&data, &cfg)?;
            let seeds = parse_seeds(&seeds)?;
            let variants = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants
                    .iter()
                    .map(|v| v.parse())
                    .collect::<Result<Vec<Variant>, _>>()?
            };
            let ds = data.load(cfg.model.dim)?;
            let splits = ds.graph.chronological_split(cfg.train_frac, cfg.val_frac)?;
            let rows = ablation_grid(&ds.graph, &splits, &cfg, &seeds, &variants)?;
            ensure_dir(&out)?;
            let report = json!({ "config": cfg, "data": ds.description, "seeds": seeds, "rows": rows });
            write_json(&out.join("ablation.json"), &report)?;
            write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
            print!("{}", ablation_csv(&rows));
        }
        Command::Sweep {
            data,
            cfg,
            grid,
            seeds,
            out,
        } => {
            let cfg = effective_config(&data, &cfg)?;
            let seeds = parse_seeds(&seeds)?;
            let grid = match grid {
                Some(s) => parse_grid(&s)?,
                None => default_alpha_grid(),
            };
            let ds = data.load(cfg.model.dim)?;
            let splits = ds.graph.chronological_split(cfg.train_frac, cfg.val_frac)?;
            let rows = alpha_sweep(&ds.graph, &splits, &cfg, &grid, &seeds)?;
            ensure_dir(&out)?;
            let report = json!({ "config": cfg, "data": ds.description, "seeds": seeds, "rows": rows });
            write_json(&out.join("sweep.json"), &report)?;
            write_text(&out.join("sweep.csv"), &sweep_csv(&rows))?;
            print!("{}", sweep_csv(&rows));
        }
        Command::Paths {
            data,
            dim,
            node,
            time,
            depth,
            fanout,
        } => {
            let dim = data_dim(&data, dim)?;
            let g = data.load(dim)?.graph;
            let root = g.node_id(&node)?;
            let tree = expand(&g, root, time, depth, fanout.unwrap_or(UNLIMITED))?;
            let name = |n: usize| g.node_name(n).unwrap_or_default().to_string();
            for p in collect_paths(&tree) {
                let hops: Vec<_> = p
                    .hops
                    .iter()
                    .map(|h| json!({ "node": name(h.nbr), "ts": h.ts, "event": h.event_id }))
                    .collect();
                println!("{}", json!({ "target": node, "time": time, "hops": hops }));
            }
        }
    }
    Ok(())
}

/// Dimension to load data at when no model configuration applies.
fn data_dim(data: &DataArgs, dim: Option<usize>) -> Result<usize> {
    Ok(match dim {
        Some(d) => d,
        None => data.manifest_dim()?.unwrap_or(TrainConfig::default().model.dim),
    })
}

fn effective_config(data: &DataArgs, args: &ConfigArgs) -> Result<TrainConfig> {
    let (mut cfg, dim_set) = args.resolve()?;
    if !dim_set {
        if let Some(d) = data.manifest_dim()? {
            cfg.model.dim = d;
        }
    }
    cfg.validate()?;
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);
    Ok(cfg)
}

fn train_cmd(data: &DataArgs, cfg: &TrainConfig, out: &Path) -> Result<()> {
    let ds = data.load(cfg.model.dim)?;
    let g = &ds.graph;
    let splits = g.chronological_split(cfg.train_frac, cfg.val_frac)?;
    ensure_dir(out)?;
    let mut log_lines = String::new();
    let outcome = train_with_callback(g, &splits, cfg, |e| {
        log::info!(
            "epoch {} loss {:.4} val acc {:.4} f1 {:.4} ({:.1}s)",
            e.epoch,
            e.train_loss,
            e.val_acc,
            e.val_f1,
            e.seconds
        );
        log_lines.push_str(&serde_json::to_string(e).expect("epoch log serializes"));
        log_lines.push('\n');
    })?;
    write_text(&out.join("train_log.jsonl"), &log_lines)?;
    let ckpt = Checkpoint::from_outcome(cfg, &outcome);
    ckpt.save(&out.join("checkpoint.tbdf"))?;
    // Wall-clock times stay in the log so the report is reproducible.
    let epochs: Vec<_> = outcome
        .log
        .iter()
        .map(|e| json!({ "epoch": e.epoch, "train_loss": e.train_loss, "val_acc": e.val_acc, "val_f1": e.val_f1 }))
        .collect();
    let report = json!({
        "config": cfg,
        "data": ds.description,
        "splits": splits,
        "best_epoch": outcome.best_epoch,
        "best_val_acc": ckpt.meta.val_acc,
        "epochs": epochs,
    });
    write_json(&out.join("train_report.json"), &report)?;
    println!("best epoch {} val acc {:?}", outcome.best_epoch, ckpt.meta.val_acc);
    Ok(())
}

fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut params = match &args.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("{} is not valid generator JSON", p.display()))?
        }
        None => PlantedParams::default(),
    };
    macro_rules! over {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = args.$flag { params.$field = v; })*
        };
    }
    over!(users => n_users, items => n_items, events => events, revisit_prob => revisit_prob,
        noise_edges => noise_edges, horizon => horizon, period => period, dim => dim);
    let data = gen_planted(&params, args.seed)?;
    ensure_dir(&args.out)?;
    write_dataset(
        &args.out,
        &data.graph,
        json!({ "generator": "planted", "seed": args.seed, "params": params }),
    )?;
    log::info!("wrote {} events to {}", data.graph.event_count(), args.out.display());
    Ok(())
}
