//! Pair-wise causal attention masks over interleaved dual-channel layouts.
//!
//! The sequence is tiled into `2D x 2D` blocks, one per pair step. A query
//! sees everything in earlier steps' blocks, both channels, all depths. The
//! diagonal block is split into four `D x D` sub-blocks: each channel sees
//! its own shallower-or-equal depths (lower triangle including the
//! diagonal) and nothing of the other channel, so the two speakers of one
//! step stay mutually invisible. With `D = 1` this collapses to blocks of
//! `2 x 2` whose diagonal alone is open: plain pair-causal masking.
//!
//! [`build_mask`] assembles the boolean matrix block by block;
//! [`visible`] states the same relation in closed form over position
//! metadata. The two are written independently and tested against each
//! other entry for entry.

use crate::codec::position_meta;
use crate::tensor::Tensor;

/// Additive logit bias of a masked entry. Finite so arithmetic stays
/// NaN-free, large enough that masked softmax weights underflow to zero.
pub const MASKED_LOGIT_BIAS: f64 = -1e30;

/// Dense boolean visibility matrix of side `2 * steps * depth`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    side: usize,
    depth: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.side + j]
    }

    /// Additive bias matrix: 0 where allowed, [`MASKED_LOGIT_BIAS`] where not.
    pub fn bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASKED_LOGIT_BIAS })
            .collect();
        Tensor::matrix(self.side, self.side, data).expect("bias shape")
    }

    /// One `0`/`1` row per query, for debugging dumps.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(self.side * (self.side + 1));
        for i in 0..self.side {
            for j in 0..self.side {
                out.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the mask for `steps` pair steps of codebook depth `depth` by
/// tiling blocks: full blocks under the step diagonal, lower-triangular
/// same-channel sub-blocks on it.
pub fn build_mask(steps: usize, depth: usize) -> AttentionMask {
    assert!(depth >= 1, "depth must be at least 1");
    let period = 2 * depth;
    let side = steps * period;
    let mut allowed = vec![false; side * side];
    for qs in 0..steps {
        let row0 = qs * period;
        // Earlier steps: the whole 2D-wide block row is open.
        for r in 0..period {
            let row = &mut allowed[(row0 + r) * side..(row0 + r) * side + qs * period];
            row.fill(true);
        }
        // Diagonal block: per-channel lower triangles, cross-channel closed.
        for ch in 0..2 {
            for qd in 0..depth {
                let i = row0 + ch * depth + qd;
                for kd in 0..=qd {
                    allowed[i * side + row0 + ch * depth + kd] = true;
                }
            }
        }
    }
    AttentionMask {
        side,
        depth,
        allowed,
    }
}

/// Closed-form visibility: key `j` is visible from query `i` iff `j` lies in
/// an earlier pair step, or in the same step on the same channel at a depth
/// no greater than the query's.
pub fn visible(i: usize, j: usize, depth: usize) -> bool {
    let q = position_meta(i, depth);
    let k = position_meta(j, depth);
    k.step < q.step || (k.step == q.step && k.channel == q.channel && k.depth <= q.depth)
}
