//! Contrastive link-prediction training: one corrupted destination per
//! positive edge, Adam updates, validation-based early stopping, and a
//! binary checkpoint format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use log::info;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::evaluate;
use crate::graph::{NodeId, SplitBundle, TemporalGraph};
use crate::layers::RunMode;
use crate::model::{ModelConfig, ParamStore, TbdfsModel};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the time-encoding frequencies. A step of
    /// `lr` on a frequency shifts the phase of a gap `dt` by `lr * dt`, which
    /// in raw time units can be far larger than any other parameter's effect.
    pub time_lr_scale: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            time_lr_scale: 1.0,
            batch_size: 200,
            epochs: 10,
            patience: 5,
            seed: 0,
            train_frac: 0.7,
            val_frac: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.time_lr_scale >= 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer settings out of range".into()))
        }
    }
}

/// SplitMix64-style mixing of a seed with stream coordinates, so every
/// (epoch, edge) pair draws from its own generator.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform corrupted destinations. Bipartite graphs draw from the destination
/// side; other graphs from every node except the edge's endpoints.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    candidates: Vec<NodeId>,
    bipartite: bool,
}

impl NegativeSampler {
    pub fn new(g: &TemporalGraph) -> Self {
        let candidates = if g.is_bipartite() {
            g.destinations().to_vec()
        } else {
            (0..g.node_count()).collect()
        };
        Self::with_candidates(candidates, g.is_bipartite())
    }

    pub fn with_candidates(mut candidates: Vec<NodeId>, bipartite: bool) -> Self {
        candidates.sort_unstable();
        candidates.dedup();
        Self { candidates, bipartite }
    }

    pub fn candidates(&self) -> &[NodeId] {
        &self.candidates
    }

    pub fn sample<R: Rng + ?Sized>(&self, src: NodeId, dst: NodeId, rng: &mut R) -> Result<NodeId> {
        let mut excluded: Vec<usize> = if self.bipartite { vec![dst] } else { vec![src, dst] }
            .into_iter()
            .filter_map(|n| self.candidates.binary_search(&n).ok())
            .collect();
        excluded.sort_unstable();
        excluded.dedup();
        let valid = self.candidates.len() - excluded.len();
        if valid == 0 {
            return Err(Error::Sampling(format!(
                "no negative candidate for edge ({src}, {dst}) among {} nodes",
                self.candidates.len()
            )));
        }
        let mut pick = rng.gen_range(0..valid);
        for pos in excluded {
            if pick >= pos {
                pick += 1;
            }
        }
        Ok(self.candidates[pick])
    }
}

/// Adam with optional L2 weight decay folded into the gradient.
const TIME_FREQS: &str = "time.freqs";

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub time_lr_scale: f64,
    step: i32,
    first: ParamStore,
    second: ParamStore,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            time_lr_scale: cfg.time_lr_scale,
            step: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, p) in params.iter_mut() {
            let lr = if name == TIME_FREQS {
                self.lr * self.time_lr_scale
            } else {
                self.lr
            };
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
            if self.first.get(name).is_none() {
                self.first.insert(name.clone(), Tensor::zeros(p.shape())?);
                self.second.insert(name.clone(), Tensor::zeros(p.shape())?);
            }
            let m = self.first.get_mut(name).unwrap().data_mut();
            let v = self.second.get_mut(name).unwrap().data_mut();
            for (((w, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g + self.weight_decay * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TbdfsModel,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e;

/// Summed loss and gradients over a batch of training events, processed in
/// parallel and reduced in batch order.
pub fn batch_gradients(
    model: &TbdfsModel,
    g: &TemporalGraph,
    negatives: &NegativeSampler,
    events: &[usize],
    epoch: usize,
    seed: u64,
    train: bool,
) -> Result<(f64, ParamStore)> {
    let dropout = model.config.dropout;
    let results: Vec<Result<(f64, ParamStore)>> = events
        .par_iter()
        .map(|&k| {
            let e = g.events()[k];
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed ^ TRAIN_STREAM, epoch as u64, k as u64));
            let neg = negatives.sample(e.src, e.dst, &mut rng)?;
            let mut mode = if train {
                RunMode::Train { dropout, rng: &mut rng }
            } else {
                RunMode::Eval
            };
            model.edge_gradients(g, e.src, e.dst, neg, e.ts, &mut mode)
        })
        .collect();
    let mut total = 0.0;
    let mut sum: Option<ParamStore> = None;
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        match sum.as_mut() {
            None => sum = Some(grads),
            Some(acc) => {
                for (name, t) in acc.iter_mut() {
                    for (a, b) in t.data_mut().iter_mut().zip(grads.get(name).unwrap().data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    let grads = sum.ok_or_else(|| Error::Config("empty training batch".into()))?;
    Ok((total, grads))
}

/// Mean per-edge loss of `model` over `events` without dropout or updates,
/// with negatives drawn from the epoch-0 stream. Used as the epoch-0 point of
/// a learning curve.
pub fn mean_edge_loss(
    model: &TbdfsModel,
    g: &TemporalGraph,
    negatives: &NegativeSampler,
    events: &[usize],
    seed: u64,
) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::EmptySplit);
    }
    let losses: Vec<Result<f64>> = events
        .par_iter()
        .map(|&k| {
            let e = g.events()[k];
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed ^ TRAIN_STREAM, 0, k as u64));
            let neg = negatives.sample(e.src, e.dst, &mut rng)?;
            let mut tape = Tape::new();
            let b = model.bind(&mut tape);
            let loss = model.edge_loss(&mut tape, &b, g, e.src, e.dst, neg, e.ts, &mut RunMode::Eval)?;
            Ok(tape.value(loss).data()[0])
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / events.len() as f64)
}

/// Trains on `splits.train`, selecting the epoch with the best validation
/// accuracy. Training queries only see training events; validation sees
/// training and validation events.
pub fn train(g: &TemporalGraph, splits: &SplitBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_callback(g, splits, cfg, |_| {})
}

pub fn train_with_callback(
    g: &TemporalGraph,
    splits: &SplitBundle,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut model = TbdfsModel::new(cfg.model.clone(), cfg.seed)?;
    let train_graph = g.prefix(splits.train.end);
    let val_graph = g.prefix(splits.val.end);
    let negatives = NegativeSampler::new(&train_graph);
    let mut adam = Adam::new(cfg);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut log = Vec::new();
    let events: Vec<usize> = splits.train.clone().collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for (b, batch) in events.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&model, &train_graph, &negatives, batch, epoch, cfg.seed, true)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            total += loss;
            adam.update(&mut model.params, &grads)?;
        }
        let (val_acc, val_f1) = if splits.val.is_empty() {
            (0.0, 0.0)
        } else {
            let r = evaluate(&model, &val_graph, splits.val.clone(), cfg.seed)?;
            (r.accuracy, r.f1)
        };
        let entry = EpochLog {
            epoch,
            train_loss: total / events.len() as f64,
            val_acc,
            val_f1,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.5} val acc {:.4} f1 {:.4} ({:.1}s)",
            entry.train_loss, val_acc, val_f1, entry.seconds
        );
        on_epoch(&entry);
        log.push(entry);
        if val_acc > best_val {
            best_val = val_acc;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_epoch,
        best_val_acc: if best_epoch == 0 { f64::NAN } else { best_val },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_acc: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    meta: CheckpointMeta,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TBDF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated: {e}")))?;
    Ok(buf)
}

impl Checkpoint {
    pub fn from_outcome(config: &TrainConfig, outcome: &TrainOutcome) -> Self {
        Self {
            config: config.clone(),
            meta: CheckpointMeta {
                epoch: outcome.best_epoch,
                val_acc: outcome.best_val_acc.is_finite().then_some(outcome.best_val_acc),
                seed: config.seed,
            },
            params: outcome.model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<TbdfsModel> {
        TbdfsModel::from_params(self.config.model.clone(), self.params.clone())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })
        .map_err(|e| bad(e.to_string()))?;
        let io = |e: std::io::Error| bad(e.to_string());
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(t.rank() as u32).to_le_bytes()).map_err(io)?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes()).map_err(io)?;
            }
            for x in t.data() {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = read_bytes(r, 4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = read_u32(r)? as usize;
        let header: Header = serde_json::from_slice(&read_bytes(r, len)?).map_err(|e| bad(e.to_string()))?;
        let count = read_u32(r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let name = String::from_utf8(read_bytes(r, len)?).map_err(|e| bad(e.to_string()))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = read_bytes(r, n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        let ck = Self {
            config: header.config,
            meta: header.meta,
            params,
        };
        ck.model()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(&mut BufReader::new(file))
    }
}
