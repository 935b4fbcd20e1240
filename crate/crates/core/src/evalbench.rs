//! Link-prediction evaluation, multi-seed aggregation, ablations, alpha
//! sweeps, and a synthetic revisit dataset with a known predictive motif.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, NodeId, SplitBundle, TemporalGraph};
use crate::layers::{Aggregation, RunMode};
use crate::model::{link_logit, Branch, TbdfsModel};
use crate::sampler::brute_force_paths;
use crate::tensor::Tape;
use crate::trainer::{stream_seed, train, NegativeSampler, TrainConfig};

/// Anything that assigns a link probability to `(src, dst)` at time `t`.
pub trait LinkScorer: Sync {
    fn probability(&self, g: &TemporalGraph, src: NodeId, dst: NodeId, t: f64) -> Result<f64>;

    /// Probabilities of a positive and a negative destination for one source.
    fn pair(&self, g: &TemporalGraph, src: NodeId, pos: NodeId, neg: NodeId, t: f64) -> Result<(f64, f64)> {
        Ok((self.probability(g, src, pos, t)?, self.probability(g, src, neg, t)?))
    }
}

impl LinkScorer for TbdfsModel {
    fn probability(&self, g: &TemporalGraph, src: NodeId, dst: NodeId, t: f64) -> Result<f64> {
        self.link_probability(g, src, dst, t)
    }

    fn pair(&self, g: &TemporalGraph, src: NodeId, pos: NodeId, neg: NodeId, t: f64) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let mut mode = RunMode::Eval;
        let hs = self.represent(&mut tape, &b, g, src, t, Branch::Auto, &mut mode)?;
        let hp = self.represent(&mut tape, &b, g, pos, t, Branch::Auto, &mut mode)?;
        let hn = self.represent(&mut tape, &b, g, neg, t, Branch::Auto, &mut mode)?;
        let sp = link_logit(&mut tape, &b.scorer, hs, hp)?;
        let sn = link_logit(&mut tape, &b.scorer, hs, hn)?;
        let pp = tape.sigmoid(sp);
        let pn = tape.sigmoid(sn);
        Ok((tape.value(pp).data()[0], tape.value(pn).data()[0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// F1 of the positive class; 0 when nothing is predicted or present.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub f1: f64,
    pub confusion: Confusion,
}

pub const THRESHOLD: f64 = 0.5;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Scores every event in `edges` against one uniformly drawn corrupted
/// destination. A probability above 0.5 predicts a link.
pub fn evaluate<S: LinkScorer + ?Sized>(
    scorer: &S,
    g: &TemporalGraph,
    edges: Range<usize>,
    seed: u64,
) -> Result<EvalResult> {
    if edges.is_empty() {
        return Err(Error::EmptySplit);
    }
    let negatives = NegativeSampler::new(g);
    let scores: Vec<Result<(f64, f64)>> = edges
        .into_par_iter()
        .map(|k| {
            let e = g.events()[k];
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed ^ EVAL_STREAM, 0, k as u64));
            let neg = negatives.sample(e.src, e.dst, &mut rng)?;
            scorer.pair(g, e.src, e.dst, neg, e.ts)
        })
        .collect();
    let mut confusion = Confusion::default();
    for s in scores {
        let (p, n) = s?;
        confusion.record(p > THRESHOLD, true);
        confusion.record(n > THRESHOLD, false);
    }
    Ok(EvalResult {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        confusion,
    })
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-tailed paired Student's t-test of `a - b`. Identical samples report
/// t = 0, p = 1; a constant non-zero difference reports an infinite t and p = 0.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Config(format!(
            "paired t-test needs two equal-length samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = (diffs.len() - 1) as f64;
    let (mean, sd) = mean_std(&diffs);
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        });
    }
    let t = mean / (sd / (diffs.len() as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Config(e.to_string()))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, df, p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub f1: f64,
    pub best_epoch: usize,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedResult>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub config: TrainConfig,
}

impl MetricsReport {
    pub fn from_runs(config: &TrainConfig, runs: Vec<SeedResult>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|r| r.f1).collect();
        let (acc_mean, acc_std) = mean_std(&acc);
        let (f1_mean, f1_std) = mean_std(&f1);
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            runs,
            acc_mean,
            acc_std,
            f1_mean,
            f1_std,
            config: config.clone(),
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    pub fn val_accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.val_acc.unwrap_or(0.0)).collect()
    }
}

/// Trains one model and evaluates it on the test split.
pub fn run_seed(g: &TemporalGraph, splits: &SplitBundle, config: &TrainConfig, seed: u64) -> Result<SeedResult> {
    let cfg = TrainConfig { seed, ..config.clone() };
    let outcome = train(g, splits, &cfg)?;
    let test = evaluate(&outcome.model, g, splits.test.clone(), seed)?;
    Ok(SeedResult {
        seed,
        accuracy: test.accuracy,
        f1: test.f1,
        best_epoch: outcome.best_epoch,
        val_acc: outcome.best_val_acc.is_finite().then_some(outcome.best_val_acc),
    })
}

/// One training run and test evaluation per seed.
pub fn run_seeds(
    g: &TemporalGraph,
    splits: &SplitBundle,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<MetricsReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("run_seeds needs at least two seeds".into()));
    }
    let runs = seeds
        .iter()
        .map(|s| run_seed(g, splits, config, *s))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_runs(config, runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "-BFS")]
    NoBfs,
    #[serde(rename = "-DFS")]
    NoDfs,
    #[serde(rename = "path-avg")]
    PathAvg,
    #[serde(rename = "paths-avg")]
    PathsAvg,
    #[serde(rename = "-time")]
    NoTime,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoBfs,
        Variant::NoDfs,
        Variant::PathAvg,
        Variant::PathsAvg,
        Variant::NoTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoBfs => "-BFS",
            Variant::NoDfs => "-DFS",
            Variant::PathAvg => "path-avg",
            Variant::PathsAvg => "paths-avg",
            Variant::NoTime => "-time",
        }
    }

    /// The configuration with this variant's single component removed.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        match self {
            Variant::Full => {}
            Variant::NoBfs => m.alpha = 0.0,
            Variant::NoDfs => m.alpha = 1.0,
            Variant::PathAvg => m.path_pooling = Aggregation::Mean,
            Variant::PathsAvg => m.paths_pooling = Aggregation::Mean,
            Variant::NoTime => {
                m.time_encoding = false;
                m.temporal_mask = false;
            }
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v = match s.trim().to_ascii_lowercase().as_str() {
            "full" => Variant::Full,
            "-bfs" | "no-bfs" => Variant::NoBfs,
            "-dfs" | "no-dfs" => Variant::NoDfs,
            "path-avg" => Variant::PathAvg,
            "paths-avg" => Variant::PathsAvg,
            "-time" | "no-time" => Variant::NoTime,
            _ => return Err(Error::UnknownVariant(s.to_string())),
        };
        Ok(v)
    }
}

/// Dotted paths of every leaf value that differs between two configurations.
pub fn config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(
                        &p,
                        x.get(k).unwrap_or(&Value::Null),
                        y.get(k).unwrap_or(&Value::Null),
                        out,
                    );
                }
            }
            _ if a != b => out.push(prefix.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    walk("", &va, &vb, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Fields changed relative to the full configuration.
    pub changed: Vec<String>,
    pub report: MetricsReport,
    /// Paired t-test of this variant's accuracies against the full model's,
    /// when the full model is part of the grid.
    pub vs_full: Option<TTest>,
}

pub fn ablation_grid(
    g: &TemporalGraph,
    splits: &SplitBundle,
    base: &TrainConfig,
    seeds: &[u64],
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    let mut rows = variants
        .iter()
        .map(|v| {
            let cfg = v.apply(base);
            Ok(AblationRow {
                variant: *v,
                changed: config_diff(base, &cfg),
                report: run_seeds(g, splits, &cfg, seeds)?,
                vs_full: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(full) = rows
        .iter()
        .find(|r| r.variant == Variant::Full)
        .map(|r| r.report.accuracies())
    {
        for r in rows.iter_mut().filter(|r| r.variant != Variant::Full) {
            r.vs_full = Some(paired_t_test(&r.report.accuracies(), &full)?);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("variant,acc_mean,acc_std,f1_mean,f1_std,t_vs_full,p_vs_full,changed\n");
    for r in rows {
        let (t, p) = r
            .vs_full
            .map_or((String::new(), String::new()), |x| (x.t.to_string(), x.p.to_string()));
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variant,
            r.report.acc_mean,
            r.report.acc_std,
            r.report.f1_mean,
            r.report.f1_std,
            t,
            p,
            r.changed.join(";")
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub report: MetricsReport,
}

/// `0.0, 0.1, ..., 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn alpha_sweep(
    g: &TemporalGraph,
    splits: &SplitBundle,
    base: &TrainConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&alpha| {
            let mut cfg = base.clone();
            cfg.model.alpha = alpha;
            let report = run_seeds(g, splits, &cfg, seeds)?;
            Ok(SweepRow {
                alpha,
                acc_mean: report.acc_mean,
                acc_std: report.acc_std,
                f1_mean: report.f1_mean,
                f1_std: report.f1_std,
                report,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("alpha,acc_mean,acc_std,f1_mean,f1_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.alpha, r.acc_mean, r.acc_std, r.f1_mean, r.f1_std
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedParams {
    pub n_users: usize,
    pub n_items: usize,
    /// Number of user-driven events.
    pub events: usize,
    /// Chance that a user returns to an item once more, `period` after the
    /// previous visit.
    pub revisit_prob: f64,
    /// Extra events between uniformly random users and items.
    pub noise_edges: usize,
    pub horizon: f64,
    pub dim: usize,
    /// Gap between consecutive visits of the same user to the same item.
    pub period: f64,
}

impl Default for PlantedParams {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 200,
            events: 4500,
            revisit_prob: 0.8,
            noise_edges: 500,
            horizon: 1000.0,
            dim: 8,
            period: 50.0,
        }
    }
}

/// A generated revisit stream. `revisit[k]` marks events whose (user, item)
/// pair already occurred earlier.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedDataset {
    pub graph: TemporalGraph,
    pub revisit: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPair {
    pub src: NodeId,
    pub dst: NodeId,
    pub ts: f64,
    pub label: bool,
}

/// Bipartite user-item stream built from visit chains: a chain starts with a
/// uniformly random (user, item, time) and, with probability `revisit_prob`
/// per step, the same user returns to the same item `period` later. Chains
/// are added until `events` user events exist; `noise_edges` uniform events
/// are mixed in. Node features are Gaussian with variance `1 / dim` and
/// carry no signal.
pub fn gen_planted(params: &PlantedParams, seed: u64) -> Result<PlantedDataset> {
    if !(0.0..=1.0).contains(&params.revisit_prob) {
        return Err(Error::Config(format!(
            "revisit_prob {} outside [0, 1]",
            params.revisit_prob
        )));
    }
    if params.n_users == 0 || params.n_items < 2 || params.dim == 0 || params.events + params.noise_edges == 0 {
        return Err(Error::Config(
            "planted dataset needs users, at least two items, events and dim".into(),
        ));
    }
    if !(params.horizon > 0.0) || !(params.period > 0.0) {
        return Err(Error::Config("horizon and period must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new(params.dim).bipartite(true);
    let scale = 1.0 / (params.dim as f64).sqrt();
    let users: Vec<NodeId> = (0..params.n_users).map(|u| b.add_node(format!("u{u}"))).collect();
    let items: Vec<NodeId> = (0..params.n_items).map(|i| b.add_node(format!("i{i}"))).collect();
    for n in users.iter().chain(&items) {
        let f: Vec<f64> = (0..params.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        b.set_node_features(*n, &f)?;
    }

    // (time, user, item)
    let mut raw: Vec<(f64, usize, usize)> = Vec::with_capacity(params.events + params.noise_edges);
    while raw.len() < params.events {
        let (u, i) = (rng.gen_range(0..params.n_users), rng.gen_range(0..params.n_items));
        let mut t = rng.gen_range(0.0..params.horizon);
        raw.push((t, u, i));
        while raw.len() < params.events && rng.gen_bool(params.revisit_prob) {
            t += params.period;
            if t >= params.horizon {
                break;
            }
            raw.push((t, u, i));
        }
    }
    for _ in 0..params.noise_edges {
        raw.push((
            rng.gen_range(0.0..params.horizon),
            rng.gen_range(0..params.n_users),
            rng.gen_range(0..params.n_items),
        ));
    }
    raw.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut seen = BTreeSet::new();
    let mut revisit = Vec::with_capacity(raw.len());
    for (ts, u, i) in raw {
        revisit.push(!seen.insert((u, i)));
        b.add_event(users[u], items[i], ts)?;
    }
    Ok(PlantedDataset {
        graph: b.build(),
        revisit,
    })
}

impl PlantedDataset {
    /// Revisit events in `edges` as positives, each paired with an item the
    /// user has never touched before that time as a negative.
    pub fn labeled_pairs(&self, edges: Range<usize>, seed: u64) -> Vec<LabeledPair> {
        let g = &self.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = g.destinations();
        let mut out = Vec::new();
        for k in edges {
            if !self.revisit[k] {
                continue;
            }
            let e = g.events()[k];
            let touched: BTreeSet<NodeId> = g
                .neighbors_before(e.src, e.ts)
                .expect("valid node")
                .iter()
                .map(|a| a.nbr)
                .collect();
            let fresh: Vec<NodeId> = items.iter().copied().filter(|i| !touched.contains(i)).collect();
            out.push(LabeledPair {
                src: e.src,
                dst: e.dst,
                ts: e.ts,
                label: true,
            });
            if let Some(n) = fresh.choose(&mut rng) {
                out.push(LabeledPair {
                    src: e.src,
                    dst: *n,
                    ts: e.ts,
                    label: false,
                });
            }
        }
        out
    }
}

/// Rule-based detector: predicts a link iff a one-hop temporal path from
/// `dst` into `src` exists before `t`, i.e. the pair has met before.
pub fn revisit_oracle(g: &TemporalGraph, src: NodeId, dst: NodeId, t: f64) -> Result<bool> {
    Ok(brute_force_paths(g, src, t, 1)?
        .iter()
        .any(|p| p.nodes.get(1) == Some(&dst)))
}
