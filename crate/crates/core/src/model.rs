//! Dual-channel decoder-only transformer over interleaved token pairs.
//!
//! One stack serves both the flat (`depth = 1`) and residual (`depth > 1`)
//! token layouts; the difference is entirely in sequence length, mask block
//! size, and depth encoding period. Every forward pass starts from a stream
//! with a begin-of-sequence pair occupying step 0 on both channels, so the
//! first real pair is predicted from a position that exists.
//!
//! Each position is trained to predict the next token of its own channel in
//! that channel's flattened depth-innermost order: depth `d` targets depth
//! `d+1` of the same step, the deepest targets depth 1 of the next step,
//! and each channel's final position has no target. Combined with the
//! pair-wise causal mask this realizes per-channel next-token prediction in
//! which a channel's step-`t` token is conditioned on both channels through
//! step `t-1` plus its own shallower depths at `t`, never on the other
//! channel's step-`t` tokens.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    interleave, CodecError, DualTokenStream, InterleavedSequence, PositionMeta, Vocab,
};
use crate::embed::{embed_sequence, rope_angles, EmbeddingNodes};
use crate::graph::{Graph, NodeId, Reduction};
use crate::mask::build_mask;
use crate::tensor::{Tensor, TensorError};

pub const INIT_STD: f64 = 0.02;
pub const FFN_MULT: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("d_model {d_model} not divisible into {n_heads} heads")]
    HeadSplit { d_model: usize, n_heads: usize },
    #[error("head width {head_dim} must be even for rotary pairs")]
    OddHeadDim { head_dim: usize },
    #[error("{0} must be nonzero")]
    ZeroField(&'static str),
    #[error("rope base must be a finite value > 1, got {0}")]
    BadRopeBase(f64),
    #[error("stream depth {stream} does not match model depth {model}")]
    DepthMismatch { stream: usize, model: usize },
    #[error("sequence of {steps} pair steps exceeds the model's max of {max}")]
    TooLong { steps: usize, max: usize },
    #[error("need at least {need} pair steps, got {got}")]
    TooShort { got: usize, need: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab: Vocab,
    /// Codebook depth D: 1 for flat streams, >1 for residual stacks.
    pub depth: usize,
    /// Upper bound on pair steps of any processed sequence, the
    /// begin-of-sequence step included. Sizes the inference cache.
    pub max_steps: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (v, name) in [
            (self.d_model, "d_model"),
            (self.n_layers, "n_layers"),
            (self.n_heads, "n_heads"),
            (self.vocab.content as usize, "vocab"),
            (self.depth, "depth"),
            (self.max_steps, "max_steps"),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroField(name));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::HeadSplit {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if self.head_dim() % 2 != 0 {
            return Err(ModelError::OddHeadDim {
                head_dim: self.head_dim(),
            });
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(ModelError::BadRopeBase(self.rope_base));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        FFN_MULT * self.d_model
    }

    /// Output head width: content vocabulary plus reserved ids.
    pub fn alphabet(&self) -> usize {
        self.vocab.total() as usize
    }

    /// A small model good for walkthroughs and integration tests.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab: Vocab::new(32),
            depth: 1,
            max_steps: 256,
            rope_base: 10_000.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_gain: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_gain: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// All trainable tensors. Flat iteration order is the serialization
/// contract: codebook, channel, depth_proj, then per layer attn_gain, wq,
/// wk, wv, wo, ffn_gain, w1, w2, then final_gain, head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub codebook: Tensor,
    pub channel: Tensor,
    pub depth_proj: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub head: Tensor,
}

/// Standard normal via Box-Muller so initialization depends only on the
/// seeded byte stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| normal(rng) * std).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

impl ModelParams {
    /// Fresh parameters: gaussian `N(0, 0.02)` weights, residual output
    /// projections scaled down by `1/sqrt(2 * n_layers)`, unit norm gains.
    pub fn init(config: ModelConfig) -> Result<ModelParams, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let residual_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
        let codebook = gaussian_matrix(&mut rng, config.alphabet(), d, INIT_STD);
        let channel = gaussian_matrix(&mut rng, 2, d, INIT_STD);
        let depth_proj = gaussian_matrix(&mut rng, 2, d, INIT_STD);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                attn_gain: Tensor::new(vec![d], vec![1.0; d])?,
                wq: gaussian_matrix(&mut rng, d, d, INIT_STD),
                wk: gaussian_matrix(&mut rng, d, d, INIT_STD),
                wv: gaussian_matrix(&mut rng, d, d, INIT_STD),
                wo: gaussian_matrix(&mut rng, d, d, residual_std),
                ffn_gain: Tensor::new(vec![d], vec![1.0; d])?,
                w1: gaussian_matrix(&mut rng, d, config.ffn_dim(), INIT_STD),
                w2: gaussian_matrix(&mut rng, config.ffn_dim(), d, residual_std),
            });
        }
        let final_gain = Tensor::new(vec![d], vec![1.0; d])?;
        let head = gaussian_matrix(&mut rng, d, config.alphabet(), INIT_STD);
        Ok(ModelParams {
            config,
            codebook,
            channel,
            depth_proj,
            layers,
            final_gain,
            head,
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.codebook, &self.channel, &self.depth_proj];
        for l in &self.layers {
            out.extend([
                &l.attn_gain,
                &l.wq,
                &l.wk,
                &l.wv,
                &l.wo,
                &l.ffn_gain,
                &l.w1,
                &l.w2,
            ]);
        }
        out.push(&self.final_gain);
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> =
            vec![&mut self.codebook, &mut self.channel, &mut self.depth_proj];
        for l in &mut self.layers {
            out.push(&mut l.attn_gain);
            out.push(&mut l.wq);
            out.push(&mut l.wk);
            out.push(&mut l.wv);
            out.push(&mut l.wo);
            out.push(&mut l.ffn_gain);
            out.push(&mut l.w1);
            out.push(&mut l.w2);
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.head);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Copy with the two channel embedding rows exchanged.
    pub fn with_swapped_channel_rows(&self) -> ModelParams {
        let mut out = self.clone();
        let d = self.config.d_model;
        let data = out.channel.data_mut();
        for j in 0..d {
            data.swap(j, d + j);
        }
        out
    }

    /// Copy with channel embedding rows tied (both set to row A), making the
    /// two speakers architecturally indistinguishable.
    pub fn with_tied_channel_rows(&self) -> ModelParams {
        let mut out = self.clone();
        let d = self.config.d_model;
        let data = out.channel.data_mut();
        let (a, b) = data.split_at_mut(d);
        b.copy_from_slice(a);
        out
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub graph: Graph,
    pub logits: NodeId,
    /// Param nodes in [`ModelParams::tensors`] order.
    pub param_nodes: Vec<NodeId>,
}

/// Per-position class targets: the next same-channel token in flattened
/// depth-innermost order, `None` at each channel's final position.
pub fn target_map(seq: &InterleavedSequence) -> Vec<Option<usize>> {
    let d_max = seq.depth();
    let steps = seq.steps();
    (0..seq.len())
        .map(|i| {
            let PositionMeta {
                step,
                channel,
                depth,
            } = seq.meta(i);
            let succ = if depth < d_max {
                Some(seq.position_of(step, channel, depth + 1))
            } else if step + 1 < steps {
                Some(seq.position_of(step + 1, channel, 1))
            } else {
                None
            };
            succ.map(|p| seq.tokens()[p] as usize)
        })
        .collect()
}

fn check_sequence(config: &ModelConfig, seq: &InterleavedSequence) -> Result<(), ModelError> {
    if seq.depth() != config.depth {
        return Err(ModelError::DepthMismatch {
            stream: seq.depth(),
            model: config.depth,
        });
    }
    if seq.steps() > config.max_steps {
        return Err(ModelError::TooLong {
            steps: seq.steps(),
            max: config.max_steps,
        });
    }
    for &t in seq.tokens() {
        if (t as usize) >= config.alphabet() {
            return Err(ModelError::Codec(CodecError::TokenOutOfRange {
                token: t,
                limit: config.alphabet() as u32,
            }));
        }
    }
    Ok(())
}

/// Builds the full differentiable forward pass over an interleaved sequence
/// and returns logits of shape `[len, alphabet]`.
pub fn build_forward(params: &ModelParams, seq: &InterleavedSequence) -> Result<Forward, ModelError> {
    let cfg = &params.config;
    check_sequence(cfg, seq)?;
    if seq.is_empty() {
        return Err(ModelError::TooShort { got: 0, need: 1 });
    }
    let mut g = Graph::new();
    let mut param_nodes = Vec::new();
    let insert = |g: &mut Graph, t: &Tensor| -> NodeId { g.param(t.clone()) };

    let codebook = insert(&mut g, &params.codebook);
    let channel = insert(&mut g, &params.channel);
    let depth_proj = insert(&mut g, &params.depth_proj);
    param_nodes.extend([codebook, channel, depth_proj]);

    struct LayerNodes {
        attn_gain: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        ffn_gain: NodeId,
        w1: NodeId,
        w2: NodeId,
    }
    let mut layer_nodes = Vec::with_capacity(cfg.n_layers);
    for l in &params.layers {
        let ln = LayerNodes {
            attn_gain: insert(&mut g, &l.attn_gain),
            wq: insert(&mut g, &l.wq),
            wk: insert(&mut g, &l.wk),
            wv: insert(&mut g, &l.wv),
            wo: insert(&mut g, &l.wo),
            ffn_gain: insert(&mut g, &l.ffn_gain),
            w1: insert(&mut g, &l.w1),
            w2: insert(&mut g, &l.w2),
        };
        param_nodes.extend([
            ln.attn_gain,
            ln.wq,
            ln.wk,
            ln.wv,
            ln.wo,
            ln.ffn_gain,
            ln.w1,
            ln.w2,
        ]);
        layer_nodes.push(ln);
    }
    let final_gain = insert(&mut g, &params.final_gain);
    let head = insert(&mut g, &params.head);
    param_nodes.push(final_gain);
    param_nodes.push(head);

    let tables = EmbeddingNodes {
        codebook,
        channel,
        depth_proj,
    };
    let mut x = embed_sequence(&mut g, tables, seq)?;

    let steps: Vec<usize> = (0..seq.len()).map(|i| seq.meta(i).step).collect();
    let angles = rope_angles(&steps, cfg.head_dim(), cfg.rope_base)?;
    let mask_bias = g.constant(build_mask(seq.steps(), cfg.depth).bias());
    let head_dim = cfg.head_dim();
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

    for ln in &layer_nodes {
        let h = g.rms_norm(x, ln.attn_gain)?;
        let q = g.matmul(h, ln.wq)?;
        let k = g.matmul(h, ln.wk)?;
        let v = g.matmul(h, ln.wv)?;
        let qr = g.rope(q, cfg.n_heads, &angles)?;
        let kr = g.rope(k, cfg.n_heads, &angles)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hidx in 0..cfg.n_heads {
            let off = hidx * head_dim;
            let qh = g.slice_cols(qr, off, head_dim)?;
            let kh = g.slice_cols(kr, off, head_dim)?;
            let vh = g.slice_cols(v, off, head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scaled = g.scale(scores, inv_sqrt);
            let biased = g.add(scaled, mask_bias)?;
            let attn = g.softmax_rows_pair_grouped(biased, cfg.depth)?;
            let ctx = g.matmul_pair_grouped(attn, vh, cfg.depth)?;
            heads.push(ctx);
        }
        let ctx = g.concat_cols(&heads)?;
        let attn_out = g.matmul(ctx, ln.wo)?;
        x = g.add(x, attn_out)?;

        let h2 = g.rms_norm(x, ln.ffn_gain)?;
        let f1 = g.matmul(h2, ln.w1)?;
        let act = g.gelu(f1);
        let f2 = g.matmul(act, ln.w2)?;
        x = g.add(x, f2)?;
    }

    let xf = g.rms_norm(x, final_gain)?;
    let logits = g.matmul(xf, head)?;
    Ok(Forward {
        graph: g,
        logits,
        param_nodes,
    })
}

/// Stream interleaved behind its begin-of-sequence pair, ready for the model.
pub fn model_sequence(
    config: &ModelConfig,
    stream: &DualTokenStream,
) -> Result<InterleavedSequence, ModelError> {
    stream.check_vocab(config.vocab)?;
    Ok(interleave(&stream.with_bos_pair(config.vocab.bos())))
}

/// Mean next-token cross-entropy over both channels of one stream.
pub fn loss(params: &ModelParams, stream: &DualTokenStream) -> Result<f64, ModelError> {
    let (value, _, _) = loss_graph(params, stream, Reduction::Mean)?;
    Ok(value)
}

/// Log of the model's joint probability of the full stream given only the
/// begin-of-sequence pair: the sum of per-position target log-probs.
pub fn joint_logprob(params: &ModelParams, stream: &DualTokenStream) -> Result<f64, ModelError> {
    let (nll_sum, _, _) = loss_graph(params, stream, Reduction::Sum)?;
    Ok(-nll_sum)
}

/// Scalar objective plus live graph handles, for training steps.
pub fn loss_graph(
    params: &ModelParams,
    stream: &DualTokenStream,
    reduction: Reduction,
) -> Result<(f64, Forward, NodeId), ModelError> {
    if stream.steps() == 0 {
        return Err(ModelError::TooShort { got: 0, need: 1 });
    }
    let seq = model_sequence(&params.config, stream)?;
    let mut fwd = build_forward(params, &seq)?;
    let targets = target_map(&seq);
    let ce = fwd.graph.cross_entropy(
        fwd.logits,
        &targets,
        reduction,
        Some(params.config.depth),
    )?;
    let value = fwd.graph.value(ce).item();
    Ok((value, fwd, ce))
}

/// Full-sequence logits for a stream, begin-of-sequence step included; row
/// `i` matches interleaved position `i`.
pub fn full_logits(params: &ModelParams, stream: &DualTokenStream) -> Result<Tensor, ModelError> {
    let seq = model_sequence(&params.config, stream)?;
    let fwd = build_forward(params, &seq)?;
    Ok(fwd.graph.value(fwd.logits).clone())
}

/// Loss and parameter gradients (in [`ModelParams::tensors`] order) for one
/// stream. Gradients of a batch are averaged by the caller.
pub fn loss_and_grads(
    params: &ModelParams,
    stream: &DualTokenStream,
) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
    let (value, fwd, ce) = loss_graph(params, stream, Reduction::Mean)?;
    let grads = fwd.graph.backward(ce)?;
    let out = fwd
        .param_nodes
        .iter()
        .enumerate()
        .map(|(k, &id)| {
            grads
                .get(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; params.tensors()[k].len()])
        })
        .collect();
    Ok((value, out))
}
