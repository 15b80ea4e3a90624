//! Dual-channel token streams and their flattened interleaved layout.
//!
//! A dialogue is two synchronized token grids, one per speaker channel, each
//! `T` steps of `D` codebook depths. The model consumes a single flattened
//! sequence that interleaves the two channels step by step, depths innermost:
//!
//! ```text
//! index(t, ch, d) = t*2D + ch*D + (d-1)      ch: 0 = A, 1 = B; d: 1..=D
//! step(i)    = i / (2D)
//! channel(i) = A if i mod 2D < D else B
//! depth(i)   = (i mod D) + 1
//! ```
//!
//! so `T=2, D=2` with frames `a=[[1,2],[5,6]], b=[[3,4],[7,8]]` flattens to
//! `[1,2,3,4,5,6,7,8]`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("channels differ in length: a has {a} frames, b has {b}")]
    ChannelLengthMismatch { a: usize, b: usize },
    #[error("frame {frame} has {got} tokens, stream depth is {depth}")]
    RaggedFrame {
        frame: usize,
        got: usize,
        depth: usize,
    },
    #[error("depth must be at least 1")]
    ZeroDepth,
    #[error("flat sequence length {len} is not divisible by 2*depth = {period}")]
    InterleaveLength { len: usize, period: usize },
    #[error("token {token} outside vocabulary of size {limit}")]
    TokenOutOfRange { token: TokenId, limit: u32 },
    #[error("frame rate must be positive and finite, got {0}")]
    BadFrameRate(f64),
    #[error("stream {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Frames per second of the underlying codec; 40 matches a 25 ms hop.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 40.0;

/// Content vocabulary plus the two reserved ids that every stream may use.
/// Content tokens are `0..content`, silence is `content`, and the
/// begin-of-sequence token is `content + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub content: u32,
}

impl Vocab {
    pub const SPECIALS: u32 = 2;

    pub fn new(content: u32) -> Self {
        Vocab { content }
    }

    pub fn sil(&self) -> TokenId {
        self.content
    }

    pub fn bos(&self) -> TokenId {
        self.content + 1
    }

    /// Total alphabet size `V + S`, the width of the model's output head.
    pub fn total(&self) -> u32 {
        self.content + Vocab::SPECIALS
    }

    pub fn check(&self, token: TokenId) -> Result<(), CodecError> {
        if token >= self.total() {
            return Err(CodecError::TokenOutOfRange {
                token,
                limit: self.total(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    A,
    B,
}

impl Channel {
    pub fn other(self) -> Channel {
        match self {
            Channel::A => Channel::B,
            Channel::B => Channel::A,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Channel::A => 0,
            Channel::B => 1,
        }
    }
}

/// Two synchronized token grids of identical `steps x depth` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTokenStream {
    frame_rate_hz: f64,
    depth: usize,
    steps: usize,
    /// Flat `steps * depth`, row per step.
    a: Vec<TokenId>,
    b: Vec<TokenId>,
}

impl DualTokenStream {
    pub fn from_frames(
        frame_rate_hz: f64,
        depth: usize,
        a: &[Vec<TokenId>],
        b: &[Vec<TokenId>],
    ) -> Result<Self, CodecError> {
        if depth == 0 {
            return Err(CodecError::ZeroDepth);
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(CodecError::BadFrameRate(frame_rate_hz));
        }
        if a.len() != b.len() {
            return Err(CodecError::ChannelLengthMismatch {
                a: a.len(),
                b: b.len(),
            });
        }
        let flatten = |frames: &[Vec<TokenId>]| -> Result<Vec<TokenId>, CodecError> {
            let mut out = Vec::with_capacity(frames.len() * depth);
            for (i, f) in frames.iter().enumerate() {
                if f.len() != depth {
                    return Err(CodecError::RaggedFrame {
                        frame: i,
                        got: f.len(),
                        depth,
                    });
                }
                out.extend_from_slice(f);
            }
            Ok(out)
        };
        Ok(DualTokenStream {
            frame_rate_hz,
            depth,
            steps: a.len(),
            a: flatten(a)?,
            b: flatten(b)?,
        })
    }

    /// Builds from flat per-channel token rows (`steps * depth` each).
    pub fn from_flat(
        frame_rate_hz: f64,
        depth: usize,
        a: Vec<TokenId>,
        b: Vec<TokenId>,
    ) -> Result<Self, CodecError> {
        if depth == 0 {
            return Err(CodecError::ZeroDepth);
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(CodecError::BadFrameRate(frame_rate_hz));
        }
        if a.len() != b.len() {
            return Err(CodecError::ChannelLengthMismatch {
                a: a.len(),
                b: b.len(),
            });
        }
        if a.len() % depth != 0 {
            return Err(CodecError::InterleaveLength {
                len: a.len(),
                period: depth,
            });
        }
        let steps = a.len() / depth;
        Ok(DualTokenStream {
            frame_rate_hz,
            depth,
            steps,
            a,
            b,
        })
    }

    pub fn empty(frame_rate_hz: f64, depth: usize) -> Result<Self, CodecError> {
        DualTokenStream::from_flat(frame_rate_hz, depth, vec![], vec![])
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn frame(&self, ch: Channel, t: usize) -> &[TokenId] {
        let row = match ch {
            Channel::A => &self.a,
            Channel::B => &self.b,
        };
        &row[t * self.depth..(t + 1) * self.depth]
    }

    pub fn channel_flat(&self, ch: Channel) -> &[TokenId] {
        match ch {
            Channel::A => &self.a,
            Channel::B => &self.b,
        }
    }

    pub fn push_pair(&mut self, a_frame: &[TokenId], b_frame: &[TokenId]) {
        assert_eq!(a_frame.len(), self.depth);
        assert_eq!(b_frame.len(), self.depth);
        self.a.extend_from_slice(a_frame);
        self.b.extend_from_slice(b_frame);
        self.steps += 1;
    }

    /// Exchanges the two channels. An involution.
    pub fn swap_channels(&self) -> DualTokenStream {
        DualTokenStream {
            frame_rate_hz: self.frame_rate_hz,
            depth: self.depth,
            steps: self.steps,
            a: self.b.clone(),
            b: self.a.clone(),
        }
    }

    /// Keeps the first `steps` pair steps.
    pub fn truncate_steps(&self, steps: usize) -> DualTokenStream {
        let keep = steps.min(self.steps);
        DualTokenStream {
            frame_rate_hz: self.frame_rate_hz,
            depth: self.depth,
            steps: keep,
            a: self.a[..keep * self.depth].to_vec(),
            b: self.b[..keep * self.depth].to_vec(),
        }
    }

    /// New stream with one all-`bos` pair step prepended.
    pub fn with_bos_pair(&self, bos: TokenId) -> DualTokenStream {
        let mut a = vec![bos; self.depth];
        a.extend_from_slice(&self.a);
        let mut b = vec![bos; self.depth];
        b.extend_from_slice(&self.b);
        DualTokenStream {
            frame_rate_hz: self.frame_rate_hz,
            depth: self.depth,
            steps: self.steps + 1,
            a,
            b,
        }
    }

    pub fn check_vocab(&self, vocab: Vocab) -> Result<(), CodecError> {
        for &t in self.a.iter().chain(&self.b) {
            vocab.check(t)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionMeta {
    /// Pair step, 0-based.
    pub step: usize,
    pub channel: Channel,
    /// Codebook depth, 1-based.
    pub depth: usize,
}

/// The flattened interleaved sequence the model actually reads.
#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    frame_rate_hz: f64,
    depth: usize,
    tokens: Vec<TokenId>,
}

impl InterleavedSequence {
    pub fn from_tokens(
        frame_rate_hz: f64,
        depth: usize,
        tokens: Vec<TokenId>,
    ) -> Result<Self, CodecError> {
        if depth == 0 {
            return Err(CodecError::ZeroDepth);
        }
        if tokens.len() % (2 * depth) != 0 {
            return Err(CodecError::InterleaveLength {
                len: tokens.len(),
                period: 2 * depth,
            });
        }
        Ok(InterleavedSequence {
            frame_rate_hz,
            depth,
            tokens,
        })
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn steps(&self) -> usize {
        self.tokens.len() / (2 * self.depth)
    }

    pub fn meta(&self, i: usize) -> PositionMeta {
        position_meta(i, self.depth)
    }

    pub fn position_of(&self, step: usize, channel: Channel, depth: usize) -> usize {
        position_index(step, channel, depth, self.depth)
    }
}

/// Metadata of flat index `i` in a sequence of codebook depth `d_max`.
pub fn position_meta(i: usize, d_max: usize) -> PositionMeta {
    let period = 2 * d_max;
    let channel = if i % period < d_max {
        Channel::A
    } else {
        Channel::B
    };
    PositionMeta {
        step: i / period,
        channel,
        depth: (i % d_max) + 1,
    }
}

/// Flat index of `(step, channel, depth)`; inverse of [`position_meta`].
pub fn position_index(step: usize, channel: Channel, depth: usize, d_max: usize) -> usize {
    debug_assert!((1..=d_max).contains(&depth));
    step * 2 * d_max + channel.index() * d_max + (depth - 1)
}

/// Flattens the two channels into the interleaved model layout.
pub fn interleave(stream: &DualTokenStream) -> InterleavedSequence {
    let d = stream.depth();
    let mut tokens = Vec::with_capacity(2 * stream.steps() * d);
    for t in 0..stream.steps() {
        tokens.extend_from_slice(stream.frame(Channel::A, t));
        tokens.extend_from_slice(stream.frame(Channel::B, t));
    }
    InterleavedSequence {
        frame_rate_hz: stream.frame_rate_hz(),
        depth: d,
        tokens,
    }
}

/// Splits an interleaved sequence back into its two channels.
pub fn deinterleave(seq: &InterleavedSequence) -> DualTokenStream {
    let d = seq.depth();
    let steps = seq.steps();
    let mut a = Vec::with_capacity(steps * d);
    let mut b = Vec::with_capacity(steps * d);
    for t in 0..steps {
        let base = t * 2 * d;
        a.extend_from_slice(&seq.tokens[base..base + d]);
        b.extend_from_slice(&seq.tokens[base + d..base + 2 * d]);
    }
    DualTokenStream {
        frame_rate_hz: seq.frame_rate_hz(),
        depth: d,
        steps,
        a,
        b,
    }
}

// ── JSONL persistence ───────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct StreamRecord {
    frame_rate_hz: f64,
    depth: usize,
    a: Vec<Vec<TokenId>>,
    b: Vec<Vec<TokenId>>,
}

impl From<&DualTokenStream> for StreamRecord {
    fn from(s: &DualTokenStream) -> Self {
        let frames = |ch: Channel| (0..s.steps()).map(|t| s.frame(ch, t).to_vec()).collect();
        StreamRecord {
            frame_rate_hz: s.frame_rate_hz(),
            depth: s.depth(),
            a: frames(Channel::A),
            b: frames(Channel::B),
        }
    }
}

/// Writes one stream per line.
pub fn write_streams_jsonl(path: &Path, streams: &[DualTokenStream]) -> Result<(), CodecError> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in streams {
        serde_json::to_writer(&mut w, &StreamRecord::from(s)).map_err(|e| CodecError::Json {
            line: 0,
            source: e,
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every stream of a JSONL file, validating shape per line.
pub fn read_streams_jsonl(path: &Path) -> Result<Vec<DualTokenStream>, CodecError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StreamRecord =
            serde_json::from_str(&line).map_err(|e| CodecError::Json {
                line: idx + 1,
                source: e,
            })?;
        let stream = DualTokenStream::from_frames(rec.frame_rate_hz, rec.depth, &rec.a, &rec.b)
            .map_err(|e| CodecError::Line {
                line: idx + 1,
                source: Box::new(e),
            })?;
        out.push(stream);
    }
    Ok(out)
}
