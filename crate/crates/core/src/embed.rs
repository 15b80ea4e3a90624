//! Input embeddings for interleaved dual-channel sequences.
//!
//! A position's embedding is the sum of three terms: the codebook row of its
//! token, a learned per-channel row, and a cyclic depth encoding projected
//! into model space. Pair-step position enters later, as a rotary rotation
//! of queries and keys (see [`rope_angles`]); both channels of one step
//! share the same rotation, so same-step positions are distinguished only by
//! the channel and depth terms here.

use crate::codec::{InterleavedSequence, PositionMeta};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Tensor, TensorError};

/// Unit-circle point for depth index `i` of a `d_max`-deep codebook:
/// `(sin(2*pi*i/d_max), cos(2*pi*i/d_max))`. Period `d_max`, so depth
/// `d` in `1..=d_max` uses `i = d - 1` and the encoding repeats across
/// steps. With `d_max = 1` every position gets `(0, 1)`.
pub fn cyclic_depth(i: usize, d_max: usize) -> (f64, f64) {
    assert!(d_max >= 1, "depth must be at least 1");
    let theta = 2.0 * std::f64::consts::PI * (i % d_max) as f64 / d_max as f64;
    (theta.sin(), theta.cos())
}

/// `[len, 2]` matrix of cyclic depth encodings, one row per position.
pub fn depth_basis(metas: &[PositionMeta], d_max: usize) -> Tensor {
    let mut data = Vec::with_capacity(metas.len() * 2);
    for m in metas {
        let (s, c) = cyclic_depth(m.depth - 1, d_max);
        data.push(s);
        data.push(c);
    }
    Tensor::matrix(metas.len(), 2, data).expect("basis shape")
}

/// Rotary angles per position: row `i` is `step[i] * base^(-2j/head_dim)`
/// for `j` in `0..head_dim/2`. Positions of the same pair step, either
/// channel, any depth, get identical rows.
pub fn rope_angles(steps: &[usize], head_dim: usize, base: f64) -> Result<Tensor, TensorError> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(TensorError::RankMismatch {
            op: "rope_angles",
            need: "even head_dim",
            got: vec![head_dim],
        });
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| base.powf(-2.0 * j as f64 / head_dim as f64))
        .collect();
    let mut data = Vec::with_capacity(steps.len() * half);
    for &t in steps {
        for &w in &freqs {
            data.push(t as f64 * w);
        }
    }
    Tensor::matrix(steps.len(), half, data)
}

/// Embedding tables inserted into a graph for one forward pass.
#[derive(Clone, Copy)]
pub struct EmbeddingNodes {
    /// `[V + S, d_model]` token codebook.
    pub codebook: NodeId,
    /// `[2, d_model]`, row 0 for channel A, row 1 for channel B.
    pub channel: NodeId,
    /// `[2, d_model]` projection of the cyclic depth encoding.
    pub depth_proj: NodeId,
}

/// Sums token, channel, and depth terms into `[len, d_model]` input rows.
pub fn embed_sequence(
    g: &mut Graph,
    tables: EmbeddingNodes,
    seq: &InterleavedSequence,
) -> Result<NodeId, TensorError> {
    let metas: Vec<PositionMeta> = (0..seq.len()).map(|i| seq.meta(i)).collect();
    let token_ids: Vec<usize> = seq.tokens().iter().map(|&t| t as usize).collect();
    let channel_ids: Vec<usize> = metas.iter().map(|m| m.channel.index()).collect();

    let tok = g.embed(tables.codebook, &token_ids)?;
    let ch = g.embed(tables.channel, &channel_ids)?;
    let basis = g.constant(depth_basis(&metas, seq.depth()));
    let dep = g.matmul(basis, tables.depth_proj)?;
    let sum = g.add(tok, ch)?;
    g.add(sum, dep)
}
