//! Training loop and checkpoint container.
//!
//! Training is fully deterministic: parameters come from the config seed,
//! batches walk the corpus round-robin, and batch gradients are accumulated
//! in a fixed sequential order. Two runs with equal inputs produce
//! bit-identical parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::DualTokenStream;
use crate::model::{loss_and_grads, ModelConfig, ModelError, ModelParams};
use crate::tensor::TensorError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Leading bytes of the checkpoint container.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"NTPPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            lr: 1e-3,
            batch: 4,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss at each step, evaluated before that step's update.
    pub loss_history: Vec<f64>,
    pub steps_done: usize,
}

/// Scales all gradients so their joint l2 norm is at most `max`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    fn new(sizes: &[usize]) -> Adam {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (ti, tensor) in params.tensors_mut().into_iter().enumerate() {
            let g = &grads[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for (ci, p) in tensor.data_mut().iter_mut().enumerate() {
                m[ci] = ADAM_BETA1 * m[ci] + (1.0 - ADAM_BETA1) * g[ci];
                v[ci] = ADAM_BETA2 * v[ci] + (1.0 - ADAM_BETA2) * g[ci] * g[ci];
                let mh = m[ci] / bc1;
                let vh = v[ci] / bc2;
                *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn check_corpus(config: &ModelConfig, corpus: &[DualTokenStream]) -> Result<(), ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::TooShort { got: 0, need: 1 });
    }
    for s in corpus {
        // One pair step gives a lone begin-of-sequence transition per
        // channel and no cross-step structure to learn from.
        if s.steps() < 2 {
            return Err(ModelError::TooShort {
                got: s.steps(),
                need: 2,
            });
        }
        if s.depth() != config.depth {
            return Err(ModelError::DepthMismatch {
                stream: s.depth(),
                model: config.depth,
            });
        }
    }
    Ok(())
}

/// Trains a fresh model (seeded by `config.seed`) on the corpus.
pub fn train(
    config: ModelConfig,
    corpus: &[DualTokenStream],
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainReport), ModelError> {
    let mut params = ModelParams::init(config)?;
    let report = train_in_place(&mut params, corpus, opts)?;
    Ok((params, report))
}

/// Runs `opts.steps` optimizer steps on existing parameters.
pub fn train_in_place(
    params: &mut ModelParams,
    corpus: &[DualTokenStream],
    opts: &TrainOptions,
) -> Result<TrainReport, ModelError> {
    check_corpus(&params.config, corpus)?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut history = Vec::with_capacity(opts.steps);
    let batch = opts.batch.max(1);
    for step in 0..opts.steps {
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut loss_sum = 0.0;
        for k in 0..batch {
            let stream = &corpus[(step * batch + k) % corpus.len()];
            let (l, g) = match loss_and_grads(params, stream) {
                Ok(v) => v,
                // A blown-up forward pass (overflowed logits) is reported
                // as divergence, matching a non-finite loss.
                Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(ModelError::Diverged {
                        step,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += l;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, x) in acc.iter_mut().zip(gi) {
                    *a += x;
                }
            }
        }
        let loss = loss_sum / batch as f64;
        if !loss.is_finite() {
            return Err(ModelError::Diverged { step, loss });
        }
        history.push(loss);
        let inv = 1.0 / batch as f64;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= inv;
            }
        }
        if let Some(max) = opts.grad_clip {
            clip_global_norm(&mut grads, max);
        }
        adam.step(params, &grads, opts.lr);
    }
    Ok(TrainReport {
        loss_history: history,
        steps_done: opts.steps,
    })
}

// ── Checkpoint container ────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated in {0}")]
    Truncated(&'static str),
    #[error("blob holds {got} values but the config needs {need}")]
    BlobSize { got: usize, need: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    steps_done: usize,
    loss_history: Vec<f64>,
}

/// Writes a single-file checkpoint: magic, version, manifest length,
/// manifest JSON, then every tensor's values as little-endian `f64` in
/// [`ModelParams::tensors`] order.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    report: &TrainReport,
) -> Result<(), CheckpointError> {
    let manifest = serde_json::to_vec(&Manifest {
        config: params.config,
        steps_done: report.steps_done,
        loss_history: report.loss_history.clone(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for t in params.tensors() {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into parameters and its training report.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainReport), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated("magic"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)
        .map_err(|_| CheckpointError::Truncated("version"))?;
    let version = u32::from_le_bytes(v4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)
        .map_err(|_| CheckpointError::Truncated("manifest length"))?;
    let mlen = u64::from_le_bytes(l8) as usize;
    let mut mbytes = vec![0u8; mlen];
    r.read_exact(&mut mbytes)
        .map_err(|_| CheckpointError::Truncated("manifest"))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)?;

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    if blob.len() % 8 != 0 {
        return Err(CheckpointError::Truncated("value blob"));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let mut params = ModelParams::init(manifest.config)?;
    let need = params.n_params();
    if values.len() != need {
        return Err(CheckpointError::BlobSize {
            got: values.len(),
            need,
        });
    }
    let mut off = 0;
    for t in params.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
    Ok((
        params,
        TrainReport {
            loss_history: manifest.loss_history,
            steps_done: manifest.steps_done,
        },
    ))
}
