//! Chunk-wise generation over a single growing key-value cache.
//!
//! One [`InferenceSession`] owns one [`KvCache`] holding both channels'
//! rows in the interleaved order; rows are only appended, never rebuilt,
//! so memory grows linearly with committed positions. The incremental
//! forward reproduces the batch forward's arithmetic exactly: the same
//! kernels, the same pair-grouped reduction order, and literal masked
//! terms whose `exp` underflows to zero, so cached logits equal
//! full-sequence logits as `f64` values, not merely within tolerance.
//!
//! Both channels of a pair step are predicted from logits captured before
//! either channel's step tokens are committed, which keeps the two
//! predictions independent given the pair history. The A rows of a step
//! enter the cache before its B rows, but neither is visible to the other.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{position_meta, Channel, DualTokenStream, PositionMeta, TokenId};
use crate::embed::cyclic_depth;
use crate::graph::{gelu_scalar, RMS_EPS};
use crate::mask::{visible, MASKED_LOGIT_BIAS};
use crate::model::{ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("session is full: {max} content pair steps already committed")]
    Full { max: usize },
    #[error("frame carries {got} tokens, model depth needs {need}")]
    WrongDepth { got: usize, need: usize },
    #[error("token {token} is outside the samplable alphabet of {limit}")]
    BadToken { token: TokenId, limit: TokenId },
    #[error("temperature must be finite and non-negative, got {0}")]
    BadTemperature(f64),
    #[error("chunk size must be at least 1")]
    ZeroChunk,
    #[error("channel {ch:?} cannot commit step {got}: partner channel is at step {other}")]
    OutOfOrder { ch: Channel, got: usize, other: usize },
}

/// Independent RNG streams for the two sampled channels. Swapping the
/// seeds together with the channel roles swaps sampled outputs exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerSeeds {
    pub a: u64,
    pub b: u64,
}

impl SamplerSeeds {
    pub fn swapped(self) -> SamplerSeeds {
        SamplerSeeds {
            a: self.b,
            b: self.a,
        }
    }
}

// ── The cache ───────────────────────────────────────────────────────

/// Append-only per-layer key/value rows for every committed position, in
/// interleaved order, tagged with (step, channel, depth).
pub struct KvCache {
    n_layers: usize,
    d_model: usize,
    capacity_rows: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    metas: Vec<PositionMeta>,
}

impl KvCache {
    fn new(n_layers: usize, d_model: usize, max_steps: usize, depth: usize) -> KvCache {
        let capacity_rows = 2 * max_steps * depth;
        KvCache {
            n_layers,
            d_model,
            capacity_rows,
            k: (0..n_layers)
                .map(|_| Vec::with_capacity(capacity_rows * d_model))
                .collect(),
            v: (0..n_layers)
                .map(|_| Vec::with_capacity(capacity_rows * d_model))
                .collect(),
            metas: Vec::with_capacity(capacity_rows),
        }
    }

    pub fn committed_rows(&self) -> usize {
        self.metas.len()
    }

    pub fn capacity_rows(&self) -> usize {
        self.capacity_rows
    }

    /// Bytes of attention payload: every committed row stores one key and
    /// one value vector of `d_model` doubles per layer. Exactly
    /// `committed_rows * n_layers * 2 * d_model * 8`.
    pub fn cache_bytes(&self) -> usize {
        self.committed_rows() * self.n_layers * 2 * self.d_model * 8
    }
}

// ── Row kernels (exact mirrors of the batch graph ops) ──────────────

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for c in 0..a.len() {
        s += a[c] * b[c];
    }
    s
}

/// `x (1 x k) * w (k x n)`, accumulated k-ascending like the batch matmul.
fn matvec(x: &[f64], w: &crate::tensor::Tensor) -> Vec<f64> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), k);
    let wd = w.data();
    let mut out = vec![0.0; n];
    for (c, &xc) in x.iter().enumerate() {
        let wrow = &wd[c * n..(c + 1) * n];
        for j in 0..n {
            out[j] += xc * wrow[j];
        }
    }
    out
}

fn rms_row(x: &[f64], gain: &crate::tensor::Tensor) -> Vec<f64> {
    let n = x.len();
    let gv = gain.data();
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    (0..n).map(|j| x[j] * inv * gv[j]).collect()
}

fn rope_row(row: &mut [f64], step: usize, n_heads: usize, head_dim: usize, base: f64) {
    let half = head_dim / 2;
    for h in 0..n_heads {
        for j in 0..half {
            let w = base.powf(-2.0 * j as f64 / head_dim as f64);
            let th = step as f64 * w;
            let (sin, cos) = th.sin_cos();
            let c0 = h * head_dim + 2 * j;
            let (x0, x1) = (row[c0], row[c0 + 1]);
            row[c0] = x0 * cos - x1 * sin;
            row[c0 + 1] = x0 * sin + x1 * cos;
        }
    }
}

/// Pair-grouped left-to-right sum over the committed prefix `0..n`. The
/// batch reduction runs over the full row, where positions beyond the
/// prefix contribute exact zeros; a trailing partial pair is therefore
/// reduced as a zero-padded `s0 + s1` pair, matching those bits.
fn chunk_padded_sum(n: usize, group: usize, mut f: impl FnMut(usize) -> f64) -> f64 {
    let chunk = 2 * group;
    let mut total = 0.0;
    let mut i = 0;
    while i + chunk <= n {
        let mut s0 = 0.0;
        for k in i..i + group {
            s0 += f(k);
        }
        let mut s1 = 0.0;
        for k in i + group..i + chunk {
            s1 += f(k);
        }
        total += s0 + s1;
        i += chunk;
    }
    if i < n {
        let mut s0 = 0.0;
        for k in i..(i + group).min(n) {
            s0 += f(k);
        }
        let mut s1 = 0.0;
        let lo = i + group;
        if lo < n {
            for k in lo..n {
                s1 += f(k);
            }
        }
        total += s0 + s1;
    }
    total
}

// ── The session ─────────────────────────────────────────────────────

/// Logits captured while committing one pair step: row `d-1` is the
/// prediction made right after the depth-`d` token entered the cache.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

/// Incremental forward state: the cache plus, per channel, the pending
/// logits that predict that channel's next step-initial token. Pending
/// logits are captured when the channel's previous deepest row commits,
/// before anything of the next step exists, so each channel's next token
/// is independent of the partner's same-step token.
pub struct InferenceSession<'p> {
    params: &'p ModelParams,
    cache: KvCache,
    pending: [Vec<f64>; 2],
    steps: [usize; 2],
}

impl<'p> InferenceSession<'p> {
    pub fn new(params: &'p ModelParams) -> Result<InferenceSession<'p>, StreamError> {
        let cfg = &params.config;
        cfg.validate()?;
        let mut s = InferenceSession {
            params,
            cache: KvCache::new(cfg.n_layers, cfg.d_model, cfg.max_steps, cfg.depth),
            pending: [Vec::new(), Vec::new()],
            steps: [0, 0],
        };
        let bos = cfg.vocab.bos();
        for ch in [Channel::A, Channel::B] {
            for d in 1..=cfg.depth {
                let meta = PositionMeta {
                    step: 0,
                    channel: ch,
                    depth: d,
                };
                let logits = s.commit_row(bos, meta);
                if d == cfg.depth {
                    s.pending[ch.index()] = logits;
                }
            }
        }
        Ok(s)
    }

    /// Content pair steps fully committed (the begin-of-sequence step is
    /// not counted).
    pub fn steps(&self) -> usize {
        self.steps[1]
    }

    /// Content pair steps the session can hold in total.
    pub fn capacity_steps(&self) -> usize {
        self.params.config.max_steps - 1
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    /// Logits predicting `ch`'s next step-initial token.
    pub fn peek_logits(&self, ch: Channel) -> &[f64] {
        &self.pending[ch.index()]
    }

    fn begin_channel_step(&self, ch: Channel) -> Result<usize, StreamError> {
        let (own, other) = (self.steps[ch.index()], self.steps[ch.other().index()]);
        let aligned = match ch {
            Channel::A => own == other,
            Channel::B => own + 1 == other,
        };
        if !aligned {
            return Err(StreamError::OutOfOrder {
                ch,
                got: own + 1,
                other,
            });
        }
        if own >= self.capacity_steps() {
            return Err(StreamError::Full {
                max: self.capacity_steps(),
            });
        }
        Ok(own + 1)
    }

    fn check_frame(&self, tokens: &[TokenId]) -> Result<(), StreamError> {
        let cfg = &self.params.config;
        if tokens.len() != cfg.depth {
            return Err(StreamError::WrongDepth {
                got: tokens.len(),
                need: cfg.depth,
            });
        }
        let limit = cfg.vocab.bos();
        for &t in tokens {
            if t >= limit {
                return Err(StreamError::BadToken { token: t, limit });
            }
        }
        Ok(())
    }

    /// Commits one channel's tokens for its next pair step, returning the
    /// logits captured after each depth row.
    pub fn commit_channel_step(
        &mut self,
        ch: Channel,
        tokens: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, StreamError> {
        let step = self.begin_channel_step(ch)?;
        self.check_frame(tokens)?;
        let depth = self.params.config.depth;
        let mut rows = Vec::with_capacity(depth);
        for (i, &tok) in tokens.iter().enumerate() {
            let meta = PositionMeta {
                step,
                channel: ch,
                depth: i + 1,
            };
            rows.push(self.commit_row(tok, meta));
        }
        self.pending[ch.index()] = rows.last().expect("depth >= 1").clone();
        self.steps[ch.index()] += 1;
        Ok(rows)
    }

    /// Commits a full pair step, channel A's rows then channel B's.
    pub fn commit_pair(
        &mut self,
        a: &[TokenId],
        b: &[TokenId],
    ) -> Result<StepLogits, StreamError> {
        let ra = self.commit_channel_step(Channel::A, a)?;
        let rb = self.commit_channel_step(Channel::B, b)?;
        Ok(StepLogits { a: ra, b: rb })
    }

    /// Samples one channel's next frame depth-by-depth and commits it.
    /// The step-initial token comes from logits captured before this pair
    /// step existed; deeper tokens condition on the shallower ones.
    pub fn sample_channel_step(
        &mut self,
        ch: Channel,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TokenId>, StreamError> {
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(StreamError::BadTemperature(temperature));
        }
        let step = self.begin_channel_step(ch)?;
        let cfg = &self.params.config;
        let allowed = cfg.vocab.bos() as usize;
        let depth = cfg.depth;
        let mut tokens = Vec::with_capacity(depth);
        let mut logits = std::mem::take(&mut self.pending[ch.index()]);
        for d in 1..=depth {
            let tok = sample_token(&logits, allowed, temperature, rng);
            tokens.push(tok);
            let meta = PositionMeta {
                step,
                channel: ch,
                depth: d,
            };
            logits = self.commit_row(tok, meta);
        }
        self.pending[ch.index()] = logits;
        self.steps[ch.index()] += 1;
        Ok(tokens)
    }

    /// Appends one position to the cache and returns its logits. Rows
    /// must arrive in interleaved order; the cache tags each row and the
    /// attention below re-checks visibility against those tags.
    fn commit_row(&mut self, token: TokenId, meta: PositionMeta) -> Vec<f64> {
        let params = self.params;
        let cfg = &params.config;
        let d = cfg.d_model;
        debug_assert_eq!(meta, position_meta(self.cache.metas.len(), cfg.depth));

        // Embedding: token row + channel row + projected cyclic depth.
        let cb = params.codebook.data();
        let chrow = &params.channel.data()[meta.channel.index() * d..][..d];
        let tokrow = &cb[token as usize * d..][..d];
        let dp = params.depth_proj.data();
        let (sin, cos) = cyclic_depth(meta.depth - 1, cfg.depth);
        let mut x = vec![0.0; d];
        for j in 0..d {
            let mut dep = 0.0;
            dep += sin * dp[j];
            dep += cos * dp[d + j];
            x[j] = (tokrow[j] + chrow[j]) + dep;
        }

        self.cache.metas.push(meta);
        let head_dim = cfg.head_dim();
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();
        for (l, lp) in params.layers.iter().enumerate() {
            let xn = rms_row(&x, &lp.attn_gain);
            let mut q = matvec(&xn, &lp.wq);
            let mut k = matvec(&xn, &lp.wk);
            let v = matvec(&xn, &lp.wv);
            rope_row(&mut q, meta.step, cfg.n_heads, head_dim, cfg.rope_base);
            rope_row(&mut k, meta.step, cfg.n_heads, head_dim, cfg.rope_base);
            self.cache.k[l].extend_from_slice(&k);
            self.cache.v[l].extend_from_slice(&v);

            let ctx = attend(
                &q,
                &self.cache.k[l],
                &self.cache.v[l],
                &self.cache.metas,
                meta,
                cfg.depth,
                cfg.n_heads,
                head_dim,
                inv_sqrt,
            );
            let attn_out = matvec(&ctx, &lp.wo);
            for j in 0..d {
                x[j] += attn_out[j];
            }

            let x2 = rms_row(&x, &lp.ffn_gain);
            let f1 = matvec(&x2, &lp.w1);
            let act: Vec<f64> = f1.iter().map(|&u| gelu_scalar(u)).collect();
            let f2 = matvec(&act, &lp.w2);
            for j in 0..d {
                x[j] += f2[j];
            }
        }
        let xf = rms_row(&x, &params.final_gain);
        matvec(&xf, &params.head)
    }
}

/// Masked attention of the newest row over every cached row. Masked
/// scores take the same additive bias as the batch path, so their `exp`
/// underflows to the same exact zeros.
#[allow(clippy::too_many_arguments)]
fn attend(
    q: &[f64],
    k_slab: &[f64],
    v_slab: &[f64],
    metas: &[PositionMeta],
    my: PositionMeta,
    depth: usize,
    n_heads: usize,
    head_dim: usize,
    inv_sqrt: f64,
) -> Vec<f64> {
    let n = metas.len();
    let me = n - 1;
    let d_model = n_heads * head_dim;
    let mut ctx = vec![0.0; d_model];
    let mut e = vec![0.0; n];
    for h in 0..n_heads {
        let off = h * head_dim;
        let qh = &q[off..off + head_dim];
        let mut mx = f64::NEG_INFINITY;
        for (j, mj) in metas.iter().enumerate() {
            let vis = mj.step < my.step
                || (mj.step == my.step && mj.channel == my.channel && mj.depth <= my.depth);
            debug_assert_eq!(vis, visible(me, j, depth), "cache tags disagree with the mask");
            let kh = &k_slab[j * d_model + off..][..head_dim];
            let bias = if vis { 0.0 } else { MASKED_LOGIT_BIAS };
            let s = dot(qh, kh) * inv_sqrt + bias;
            e[j] = s;
            if s > mx {
                mx = s;
            }
        }
        for s in e.iter_mut() {
            *s = (*s - mx).exp();
        }
        let denom = chunk_padded_sum(n, depth, |j| e[j]);
        for s in e.iter_mut() {
            *s /= denom;
        }
        for col in 0..head_dim {
            ctx[off + col] =
                chunk_padded_sum(n, depth, |j| e[j] * v_slab[j * d_model + off + col]);
        }
    }
    ctx
}

/// Greedy at zero temperature (ties take the lowest id), otherwise one
/// stabilized softmax draw. Ids at or above `allowed` are never produced.
fn sample_token(
    logits: &[f64],
    allowed: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> TokenId {
    debug_assert!(allowed >= 1 && allowed <= logits.len());
    if temperature == 0.0 {
        let mut best = 0;
        for i in 1..allowed {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let mut mx = f64::NEG_INFINITY;
    for &l in &logits[..allowed] {
        let z = l / temperature;
        if z > mx {
            mx = z;
        }
    }
    let exps: Vec<f64> = logits[..allowed]
        .iter()
        .map(|&l| (l / temperature - mx).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in exps.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as TokenId;
        }
    }
    (allowed - 1) as TokenId
}

// ── Free-running generation ─────────────────────────────────────────

/// Samples `new_steps` pair steps beyond an optional prompt, both
/// channels from their own RNG streams, and returns prompt plus
/// continuation. With no prompt the stream carries `frame_rate_hz`.
pub fn generate_free(
    params: &ModelParams,
    prompt: Option<&DualTokenStream>,
    new_steps: usize,
    temperature: f64,
    seeds: SamplerSeeds,
    frame_rate_hz: f64,
) -> Result<DualTokenStream, StreamError> {
    if !(temperature.is_finite() && temperature >= 0.0) {
        return Err(StreamError::BadTemperature(temperature));
    }
    let mut session = InferenceSession::new(params)?;
    let depth = params.config.depth;
    let prompt_steps = prompt.map_or(0, |p| p.steps());
    if prompt_steps + new_steps > session.capacity_steps() {
        return Err(StreamError::Full {
            max: session.capacity_steps(),
        });
    }
    let rate = prompt.map_or(frame_rate_hz, |p| p.frame_rate_hz());
    let mut a_flat: Vec<TokenId> = Vec::with_capacity((prompt_steps + new_steps) * depth);
    let mut b_flat: Vec<TokenId> = Vec::with_capacity((prompt_steps + new_steps) * depth);
    if let Some(p) = prompt {
        for t in 0..p.steps() {
            let (fa, fb) = (p.frame(Channel::A, t), p.frame(Channel::B, t));
            session.commit_pair(fa, fb)?;
            a_flat.extend_from_slice(fa);
            b_flat.extend_from_slice(fb);
        }
    }
    let mut rng_a = ChaCha8Rng::seed_from_u64(seeds.a);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seeds.b);
    for _ in 0..new_steps {
        let fa = session.sample_channel_step(Channel::A, temperature, &mut rng_a)?;
        let fb = session.sample_channel_step(Channel::B, temperature, &mut rng_b)?;
        a_flat.extend_from_slice(&fa);
        b_flat.extend_from_slice(&fb);
    }
    Ok(DualTokenStream::from_flat(rate, depth, a_flat, b_flat)
        .expect("both channels advance together"))
}

// ── Conversation over a wire ────────────────────────────────────────

/// One line of the newline-delimited JSON conversation format:
/// `{"t":<frame>,"ch":"a"|"b","tokens":[...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub t: usize,
    #[serde(with = "wire_channel")]
    pub ch: Channel,
    pub tokens: Vec<TokenId>,
}

mod wire_channel {
    use super::Channel;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ch: &Channel, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match ch {
            Channel::A => "a",
            Channel::B => "b",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Channel, D::Error> {
        match String::deserialize(d)?.as_str() {
            "a" => Ok(Channel::A),
            "b" => Ok(Channel::B),
            other => Err(de::Error::custom(format!("unknown channel {other:?}"))),
        }
    }
}

/// Turn-based exchange: the caller speaks channel A, the model answers on
/// channel B. Frames are exchanged in chunks of `chunk` (strict
/// alternation) unless `eager`, which answers every frame immediately.
/// Every consumed A frame produces exactly one emitted B frame.
pub struct ConverseSession<'p> {
    inner: InferenceSession<'p>,
    chunk: usize,
    eager: bool,
    temperature: f64,
    rng_b: ChaCha8Rng,
    queue: Vec<Vec<TokenId>>,
    consumed: usize,
    emitted: usize,
}

impl<'p> ConverseSession<'p> {
    pub fn new(
        params: &'p ModelParams,
        chunk: usize,
        temperature: f64,
        seed: u64,
        eager: bool,
    ) -> Result<ConverseSession<'p>, StreamError> {
        if chunk == 0 {
            return Err(StreamError::ZeroChunk);
        }
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(StreamError::BadTemperature(temperature));
        }
        Ok(ConverseSession {
            inner: InferenceSession::new(params)?,
            chunk,
            eager,
            temperature,
            rng_b: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new(),
            consumed: 0,
            emitted: 0,
        })
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn cache_bytes(&self) -> usize {
        self.inner.cache().cache_bytes()
    }

    /// Feeds one caller frame. Replies arrive when the current chunk
    /// completes (immediately when eager): one B message per A frame.
    pub fn push_user_frame(&mut self, tokens: &[TokenId]) -> Result<Vec<WireMessage>, StreamError> {
        self.inner.check_frame(tokens)?;
        self.queue.push(tokens.to_vec());
        if self.eager || self.queue.len() >= self.chunk {
            self.drain()
        } else {
            Ok(Vec::new())
        }
    }

    /// Answers any buffered frames; call at the end of the caller's turn.
    pub fn flush(&mut self) -> Result<Vec<WireMessage>, StreamError> {
        self.drain()
    }

    fn drain(&mut self) -> Result<Vec<WireMessage>, StreamError> {
        let mut out = Vec::with_capacity(self.queue.len());
        for frame in std::mem::take(&mut self.queue) {
            self.inner.commit_channel_step(Channel::A, &frame)?;
            self.consumed += 1;
            let reply =
                self.inner
                    .sample_channel_step(Channel::B, self.temperature, &mut self.rng_b)?;
            out.push(WireMessage {
                t: self.emitted,
                ch: Channel::B,
                tokens: reply,
            });
            self.emitted += 1;
        }
        Ok(out)
    }
}

// ── Latency measurement ─────────────────────────────────────────────

/// One timed self-play round: `chunk` pair steps sampled end to end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub round: usize,
    pub latency_ms: f64,
    pub cache_bytes: usize,
}

/// Times `rounds` chunks of self-play generation after `warmup` untimed
/// chunks, reporting per-round latency and the exact cache footprint.
pub fn bench_latency(
    params: &ModelParams,
    rounds: usize,
    chunk: usize,
    temperature: f64,
    seeds: SamplerSeeds,
    warmup: usize,
) -> Result<Vec<LatencyRow>, StreamError> {
    if chunk == 0 {
        return Err(StreamError::ZeroChunk);
    }
    let mut session = InferenceSession::new(params)?;
    let total = (warmup + rounds) * chunk;
    if total > session.capacity_steps() {
        return Err(StreamError::Full {
            max: session.capacity_steps(),
        });
    }
    let mut rng_a = ChaCha8Rng::seed_from_u64(seeds.a);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seeds.b);
    let mut rows = Vec::with_capacity(rounds);
    for round in 0..warmup + rounds {
        let t0 = Instant::now();
        for _ in 0..chunk {
            session.sample_channel_step(Channel::A, temperature, &mut rng_a)?;
            session.sample_channel_step(Channel::B, temperature, &mut rng_b)?;
        }
        let latency_ms = t0.elapsed().as_secs_f64() * 1e3;
        if round >= warmup {
            rows.push(LatencyRow {
                round: round - warmup,
                latency_ms,
                cache_bytes: session.cache().cache_bytes(),
            });
        }
    }
    Ok(rows)
}
