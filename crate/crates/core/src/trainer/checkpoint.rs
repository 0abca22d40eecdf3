//! Checkpoint directories: `manifest.json` (configuration echo, counters,
//! masks, rng states, tensor index with per-tensor CRC32) and `tensors.bin`
//! (little-endian `f64`, concatenated in manifest order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, RunResult, TrainConfig, TrainerState};
use crate::error::{Error, Result};
use crate::inference::TaskAutoencoder;
use crate::moe::{Expert, MoEBlock, Router, SelectionCounter};
use crate::numerics::{Matrix, OptimizerState, Param, Rng};
use crate::tasks::SuiteConfig;
use crate::tensor_io;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "moeforge-checkpoint";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStates {
    pub init: [u64; 4],
    pub batch: [u64; 4],
    pub autoencoder: [u64; 4],
}

/// Snapshot after `tasks_done` tasks, plus the evaluation rows so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tasks_done: usize,
    pub suite: SuiteConfig,
    pub config: TrainConfig,
    pub model: Model,
    pub autoencoders: Vec<TaskAutoencoder>,
    pub rng: RngStates,
    pub accuracy_rows: Vec<Vec<f64>>,
    pub oracle_rows: Vec<Vec<f64>>,
    pub heatmap_rows: Vec<Vec<usize>>,
    pub log: Vec<String>,
}

impl Checkpoint {
    pub fn capture(state: &TrainerState, run: &RunResult) -> Self {
        Self {
            tasks_done: state.tasks_done,
            suite: run.suite.clone(),
            config: run.config.clone(),
            model: state.model.clone(),
            autoencoders: state.autoencoders.clone(),
            rng: RngStates {
                init: state.init_rng.state(),
                batch: state.batch_rng.state(),
                autoencoder: state.ae_rng.state(),
            },
            accuracy_rows: run.accuracy.rows().to_vec(),
            oracle_rows: run.oracle_accuracy.rows().to_vec(),
            heatmap_rows: run.heatmap.rows().to_vec(),
            log: run.log.clone(),
        }
    }

    /// Trainer state to continue from.
    pub fn state(&self) -> TrainerState {
        TrainerState {
            model: self.model.clone(),
            autoencoders: self.autoencoders.clone(),
            init_rng: Rng::from_state(self.rng.init, super::MODEL_STREAM),
            batch_rng: Rng::from_state(self.rng.batch, super::BATCH_STREAM),
            ae_rng: Rng::from_state(self.rng.autoencoder, crate::inference::AUTOENCODER_STREAM),
            tasks_done: self.tasks_done,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VersionProbe {
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the blob.
    offset: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct BlockMeta {
    counts: Vec<u64>,
    frozen: Vec<bool>,
    routers: Vec<usize>,
    top_k: usize,
    ln_eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    format: String,
    tasks_done: usize,
    suite: SuiteConfig,
    config: TrainConfig,
    temperature: f64,
    rng: RngStates,
    blocks: Vec<BlockMeta>,
    autoencoder_tasks: Vec<usize>,
    /// AdamW step count per parameter tensor.
    optimizer_steps: BTreeMap<String, u64>,
    blob: String,
    blob_bytes: u64,
    tensors: Vec<TensorEntry>,
    accuracy_rows: Vec<Vec<f64>>,
    oracle_rows: Vec<Vec<f64>>,
    heatmap_rows: Vec<Vec<usize>>,
    log: Vec<String>,
}

#[derive(Default)]
struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
    steps: BTreeMap<String, u64>,
}

impl BlobWriter {
    fn put(&mut self, name: String, m: &Matrix) {
        let offset = self.bytes.len();
        tensor_io::encode_raw(m, &mut self.bytes);
        self.entries.push(TensorEntry {
            crc32: crc32fast::hash(&self.bytes[offset..]),
            name,
            rows: m.rows(),
            cols: m.cols(),
            offset: offset as u64,
        });
    }

    fn put_param(&mut self, name: &str, p: &Param) {
        self.put(name.to_string(), &p.value);
        self.put(format!("{name}.m"), &p.state.first);
        self.put(format!("{name}.v"), &p.state.second);
        self.steps.insert(name.to_string(), p.state.step);
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    entries: std::slice::Iter<'a, TensorEntry>,
    steps: &'a BTreeMap<String, u64>,
}

impl BlobReader<'_> {
    fn take(&mut self, name: &str) -> Result<Matrix> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| Error::State(format!("checkpoint has no tensor `{name}`")))?;
        if e.name != name {
            return Err(Error::State(format!("expected tensor `{name}`, found `{}`", e.name)));
        }
        let start = e.offset as usize;
        let end = start + e.rows * e.cols * 8;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[start..end];
        let computed = crc32fast::hash(slice);
        if computed != e.crc32 {
            return Err(Error::Checksum {
                name: e.name.clone(),
                stored: e.crc32,
                computed,
            });
        }
        tensor_io::decode_raw(slice, e.rows, e.cols)
    }

    fn take_param(&mut self, name: &str) -> Result<Param> {
        let value = self.take(name)?;
        let first = self.take(&format!("{name}.m"))?;
        let second = self.take(&format!("{name}.v"))?;
        let step = *self
            .steps
            .get(name)
            .ok_or_else(|| Error::State(format!("no optimizer step recorded for `{name}`")))?;
        Ok(Param {
            value,
            state: OptimizerState { first, second, step },
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = BlobWriter::default();
    let model = &ckpt.model;
    w.put_param("input.w", &model.input_w);
    w.put_param("input.b", &model.input_b);
    w.put("class_embeddings".into(), &model.class_embeddings);
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (b, blk) in model.blocks.iter().enumerate() {
        let p = format!("block{b}");
        w.put_param(&format!("{p}.ln_gamma"), &blk.ln_gamma);
        w.put_param(&format!("{p}.ln_beta"), &blk.ln_beta);
        w.put_param(&format!("{p}.w1"), &blk.w1);
        w.put_param(&format!("{p}.b1"), &blk.b1);
        w.put_param(&format!("{p}.w2"), &blk.w2);
        w.put_param(&format!("{p}.b2"), &blk.b2);
        for (e, ex) in blk.experts.iter().enumerate() {
            w.put_param(&format!("{p}.expert{e}.down"), &ex.down);
            w.put_param(&format!("{p}.expert{e}.up"), &ex.up);
        }
        for (t, r) in &blk.routers {
            w.put_param(&format!("{p}.router{t}.weight"), &r.weight);
            w.put_param(&format!("{p}.router{t}.bias"), &r.bias);
        }
        blocks.push(BlockMeta {
            counts: blk.counter.counts.clone(),
            frozen: blk.frozen_mask(),
            routers: blk.routers.keys().copied().collect(),
            top_k: blk.top_k,
            ln_eps: blk.ln_eps,
        });
    }
    for ae in &ckpt.autoencoders {
        w.put(format!("ae{}.encoder", ae.task), &ae.encoder);
        w.put(format!("ae{}.decoder", ae.task), &ae.decoder);
        w.put(format!("ae{}.threshold", ae.task), &Matrix::row_vector(&[ae.threshold]));
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        format: FORMAT.into(),
        tasks_done: ckpt.tasks_done,
        suite: ckpt.suite.clone(),
        config: ckpt.config.clone(),
        temperature: model.temperature,
        rng: ckpt.rng,
        blocks,
        autoencoder_tasks: ckpt.autoencoders.iter().map(|a| a.task).collect(),
        optimizer_steps: w.steps,
        blob: BLOB.into(),
        blob_bytes: w.bytes.len() as u64,
        tensors: w.entries,
        accuracy_rows: ckpt.accuracy_rows.clone(),
        oracle_rows: ckpt.oracle_rows.clone(),
        heatmap_rows: ckpt.heatmap_rows.clone(),
        log: ckpt.log.clone(),
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &w.bytes).map_err(|e| Error::io(&blob_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Numeric(format!("checkpoint manifest: {e}")))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let probe: VersionProbe =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if probe.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: probe.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::format(&path, format!("unknown format `{}`", m.format)));
    }
    let blob_path = dir.join(&m.blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if (bytes.len() as u64) < m.blob_bytes {
        return Err(Error::Truncated {
            expected: m.blob_bytes,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 > m.blob_bytes {
        return Err(Error::format(&blob_path, "trailing bytes after the last tensor"));
    }
    let mut r = BlobReader {
        bytes: &bytes,
        entries: m.tensors.iter(),
        steps: &m.optimizer_steps,
    };

    let input_w = r.take_param("input.w")?;
    let input_b = r.take_param("input.b")?;
    let class_embeddings = r.take("class_embeddings")?;
    let mut blocks = Vec::with_capacity(m.blocks.len());
    for (b, meta) in m.blocks.iter().enumerate() {
        let p = format!("block{b}");
        let ln_gamma = r.take_param(&format!("{p}.ln_gamma"))?;
        let ln_beta = r.take_param(&format!("{p}.ln_beta"))?;
        let w1 = r.take_param(&format!("{p}.w1"))?;
        let b1 = r.take_param(&format!("{p}.b1"))?;
        let w2 = r.take_param(&format!("{p}.w2"))?;
        let b2 = r.take_param(&format!("{p}.b2"))?;
        let mut experts = Vec::with_capacity(meta.frozen.len());
        for (e, &frozen) in meta.frozen.iter().enumerate() {
            let down = r.take_param(&format!("{p}.expert{e}.down"))?;
            let up = r.take_param(&format!("{p}.expert{e}.up"))?;
            experts.push(Expert { down, up, frozen });
        }
        let mut routers = BTreeMap::new();
        for &t in &meta.routers {
            let weight = r.take_param(&format!("{p}.router{t}.weight"))?;
            let bias = r.take_param(&format!("{p}.router{t}.bias"))?;
            routers.insert(t, Router { task: t, weight, bias });
        }
        if meta.counts.len() != experts.len() {
            return Err(Error::format(&path, format!("block {b}: counter length differs from expert count")));
        }
        blocks.push(MoEBlock {
            ln_gamma,
            ln_beta,
            w1,
            b1,
            w2,
            b2,
            experts,
            routers,
            counter: SelectionCounter {
                counts: meta.counts.clone(),
            },
            top_k: meta.top_k,
            ln_eps: meta.ln_eps,
        });
    }
    let mut autoencoders = Vec::with_capacity(m.autoencoder_tasks.len());
    for &t in &m.autoencoder_tasks {
        let encoder = r.take(&format!("ae{t}.encoder"))?;
        let decoder = r.take(&format!("ae{t}.decoder"))?;
        let threshold = r.take(&format!("ae{t}.threshold"))?.get(0, 0);
        autoencoders.push(TaskAutoencoder {
            task: t,
            encoder,
            decoder,
            trained: true,
            threshold,
        });
    }
    if r.entries.next().is_some() {
        return Err(Error::format(&path, "unused tensors in the index"));
    }
    Ok(Checkpoint {
        tasks_done: m.tasks_done,
        suite: m.suite,
        config: m.config,
        model: Model {
            input_w,
            input_b,
            blocks,
            class_embeddings,
            temperature: m.temperature,
        },
        autoencoders,
        rng: m.rng,
        accuracy_rows: m.accuracy_rows,
        oracle_rows: m.oracle_rows,
        heatmap_rows: m.heatmap_rows,
        log: m.log,
    })
}
