//! Synthetic dual-channel dialogue with known ground-truth events.
//!
//! A floor-holder semi-Markov process plans voiced intervals for both
//! speakers, records every event as it is decided, then paints tokens:
//! voiced frames draw from a per-speaker order-k Markov chain, silent
//! frames carry the silence token. The plan keeps every within-channel
//! silence at or above the segmentation threshold and keeps overlap and
//! backchannel intervals clear of IPU borders, so the analyzer's
//! segmentation recovers the planned trace exactly.
//!
//! Floor hand-offs draw one of four moves: an interruption (the listener
//! cuts in before the holder finishes), an overlapped switch (same
//! geometry, shorter), a gap switch (silence, then the other speaker), or
//! a pause continuation (silence, same speaker). Backchannels are short
//! listener utterances strictly inside the holder's IPU.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyze::{threshold_frames, Event, EventKind, EventTrace, Scope, DEFAULT_SILENCE_MS};
use crate::codec::{Channel, DualTokenStream, TokenId, Vocab};

/// Mean overlap length at a cooperative overlapped switch.
pub const OVERLAP_MEAN_FRAMES: f64 = 4.0;
/// Mean overlap length at an interruption (deeper cut-in).
pub const INTERRUPT_MEAN_FRAMES: f64 = 6.0;
const MARKOV_TOP_P: f64 = 0.55;
const MARKOV_SECOND_P: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{name} = {value} is outside [0, 1]")]
    BadRate { name: &'static str, value: f64 },
    #[error("interruption + overlap rates sum to {0}, must be at most 1")]
    RateMass(f64),
    #[error("{name} = {value} must be a finite length of at least 1 frame")]
    BadLength { name: &'static str, value: f64 },
    #[error("frame rate must be positive and finite, got {0}")]
    BadFrameRate(f64),
    #[error("content vocabulary needs at least 2 tokens, got {0}")]
    TinyVocab(u32),
    #[error("markov order must be at least 1")]
    ZeroOrder,
    #[error("{frames} frames cannot host the profile (needs at least {need})")]
    Infeasible { frames: usize, need: usize },
    #[error("stream must have depth 1, got {0}")]
    NotFlat(usize),
}

/// Knobs of the two-speaker activity process and its content chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueProfile {
    pub frame_rate_hz: f64,
    pub mean_ipu_frames: f64,
    pub mean_pause_frames: f64,
    pub mean_gap_frames: f64,
    pub overlap_rate: f64,
    pub interruption_rate: f64,
    pub backchannel_rate: f64,
    /// Among hand-offs that are neither overlapped nor interruptions, the
    /// share that switches speakers across a gap; the rest are same-speaker
    /// pause continuations. Zero pins the floor to speaker A forever.
    pub gap_switch_share: f64,
    pub markov_order: usize,
    pub vocab: Vocab,
    pub seed: u64,
}

impl Default for DialogueProfile {
    fn default() -> Self {
        DialogueProfile {
            frame_rate_hz: 40.0,
            mean_ipu_frames: 60.0,
            mean_pause_frames: 16.0,
            mean_gap_frames: 12.0,
            overlap_rate: 0.12,
            interruption_rate: 0.08,
            backchannel_rate: 0.15,
            gap_switch_share: 0.5,
            markov_order: 2,
            vocab: Vocab::new(32),
            seed: 1234,
        }
    }
}

impl DialogueProfile {
    pub fn validate(&self, frames: usize) -> Result<(), SynthError> {
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(SynthError::BadFrameRate(self.frame_rate_hz));
        }
        for (name, value) in [
            ("overlap_rate", self.overlap_rate),
            ("interruption_rate", self.interruption_rate),
            ("backchannel_rate", self.backchannel_rate),
            ("gap_switch_share", self.gap_switch_share),
        ] {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(SynthError::BadRate { name, value });
            }
        }
        let mass = self.interruption_rate + self.overlap_rate;
        if mass > 1.0 {
            return Err(SynthError::RateMass(mass));
        }
        for (name, value) in [
            ("mean_ipu_frames", self.mean_ipu_frames),
            ("mean_pause_frames", self.mean_pause_frames),
            ("mean_gap_frames", self.mean_gap_frames),
        ] {
            if !value.is_finite() || value < 1.0 {
                return Err(SynthError::BadLength { name, value });
            }
        }
        if self.vocab.content < 2 {
            return Err(SynthError::TinyVocab(self.vocab.content));
        }
        if self.markov_order == 0 {
            return Err(SynthError::ZeroOrder);
        }
        let threshold = threshold_frames(self.frame_rate_hz, DEFAULT_SILENCE_MS);
        let need = (self.mean_ipu_frames + self.mean_pause_frames + self.mean_gap_frames)
            .ceil() as usize;
        let need = need.max(2 * threshold);
        if frames < need {
            return Err(SynthError::Infeasible { frames, need });
        }
        Ok(())
    }

    fn threshold(&self) -> usize {
        threshold_frames(self.frame_rate_hz, DEFAULT_SILENCE_MS)
    }
}

/// One generated stream with its ground-truth events.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStream {
    pub stream: DualTokenStream,
    pub trace: EventTrace,
}

/// Decision-level counts across a generation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenStats {
    pub streams: usize,
    pub frames: usize,
    pub ipus: usize,
    /// Floor hand-off draws, one per finished holder IPU.
    pub decisions: usize,
    pub pauses: usize,
    pub gap_switches: usize,
    pub overlap_switches: usize,
    pub interruptions: usize,
    /// Overlapped moves that fell back to a gap switch because no legal
    /// overlap length existed.
    pub degraded_switches: usize,
    /// IPUs whose backchannel draw fired.
    pub backchannel_draws: usize,
    pub backchannels_placed: usize,
    /// IPUs long enough to host a backchannel.
    pub backchannel_eligible: usize,
}

impl GenStats {
    fn absorb(&mut self, other: &GenStats) {
        self.streams += other.streams;
        self.frames += other.frames;
        self.ipus += other.ipus;
        self.decisions += other.decisions;
        self.pauses += other.pauses;
        self.gap_switches += other.gap_switches;
        self.overlap_switches += other.overlap_switches;
        self.interruptions += other.interruptions;
        self.degraded_switches += other.degraded_switches;
        self.backchannel_draws += other.backchannel_draws;
        self.backchannels_placed += other.backchannels_placed;
        self.backchannel_eligible += other.backchannel_eligible;
    }
}

// ── Seeding and small samplers ──────────────────────────────────────

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic 64-bit mix of two values, for deriving independent
/// sub-seeds from one master seed.
pub fn mix2(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a).wrapping_add(b))
}

/// Geometric sample with the given mean, support starting at 1.
fn geom(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let p = 1.0 / mean;
    let u: f64 = rng.gen();
    let k = 1.0 + ((1.0 - u).ln() / (1.0 - p).ln()).floor();
    if !k.is_finite() || k < 1.0 {
        return 1;
    }
    // Cap pathological tail draws at a generous multiple of the mean.
    (k as usize).min((mean * 50.0).ceil() as usize)
}

// ── Content chains ──────────────────────────────────────────────────

/// Order-k Markov chain over content tokens. The transition structure is a
/// pure function of (corpus seed, speaker), shared by every stream of a
/// corpus so models can learn it; only the draws use the stream RNG.
struct MarkovChain {
    order: usize,
    vocab: u32,
    table_seed: u64,
    state: Vec<TokenId>,
    rng: ChaCha8Rng,
}

impl MarkovChain {
    fn new(profile: &DialogueProfile, channel: Channel, stream_seed: u64) -> MarkovChain {
        let speaker = channel.index() as u64;
        MarkovChain {
            order: profile.markov_order,
            vocab: profile.vocab.content,
            table_seed: mix2(profile.seed, 0x7ab1_0000 + speaker),
            state: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(mix2(stream_seed, 0x00c0_0000 + speaker)),
        }
    }

    fn state_hash(&self) -> u64 {
        let mut h = self.table_seed;
        for &t in &self.state {
            h = mix2(h, t as u64 + 1);
        }
        h
    }

    fn next(&mut self) -> TokenId {
        let h = self.state_hash();
        let top = (mix2(h, 1) % self.vocab as u64) as TokenId;
        let second = (mix2(h, 2) % self.vocab as u64) as TokenId;
        let u: f64 = self.rng.gen();
        let tok = if u < MARKOV_TOP_P {
            top
        } else if u < MARKOV_TOP_P + MARKOV_SECOND_P {
            second
        } else {
            self.rng.gen_range(0..self.vocab)
        };
        self.state.push(tok);
        if self.state.len() > self.order {
            self.state.remove(0);
        }
        tok
    }
}

// ── The activity plan ───────────────────────────────────────────────

struct Plan {
    ipus: [Vec<(usize, usize)>; 2],
    pauses: Vec<(Channel, usize, usize)>,
    gaps: Vec<(usize, usize)>,
    overlaps: Vec<(usize, usize)>,
}

struct Planner<'p> {
    profile: &'p DialogueProfile,
    threshold: usize,
    frames: usize,
    rng: ChaCha8Rng,
    plan: Plan,
    /// End of each channel's most recent voiced interval.
    last_voiced: [usize; 2],
    stats: GenStats,
}

impl<'p> Planner<'p> {
    fn new(profile: &'p DialogueProfile, frames: usize, stream_seed: u64) -> Planner<'p> {
        Planner {
            profile,
            threshold: profile.threshold(),
            frames,
            rng: ChaCha8Rng::seed_from_u64(mix2(stream_seed, 0x0b0e)),
            plan: Plan {
                ipus: [Vec::new(), Vec::new()],
                pauses: Vec::new(),
                gaps: Vec::new(),
                overlaps: Vec::new(),
            },
            last_voiced: [0, 0],
            stats: GenStats::default(),
        }
    }

    fn push_interval(&mut self, ch: Channel, s: usize, e: usize) {
        self.plan.ipus[ch.index()].push((s, e));
        self.last_voiced[ch.index()] = e;
    }

    fn ipu_len(&mut self) -> usize {
        geom(&mut self.rng, self.profile.mean_ipu_frames).max(self.threshold)
    }

    /// Tries to place one listener backchannel strictly inside the holder's
    /// IPU `[s, e)`. `k_in` is the overlap tail at the IPU's start, which
    /// the listener may still own.
    fn maybe_backchannel(&mut self, holder: Channel, s: usize, e: usize, k_in: usize) {
        let thr = self.threshold;
        let lo = s + k_in + thr;
        let hi_end = e.saturating_sub(thr);
        let eligible = hi_end > lo && hi_end - lo >= 2;
        if eligible {
            self.stats.backchannel_eligible += 1;
        }
        if self.rng.gen::<f64>() >= self.profile.backchannel_rate {
            return;
        }
        self.stats.backchannel_draws += 1;
        if !eligible {
            return;
        }
        let max_len = (hi_end - lo).min(thr).max(2).min(hi_end - lo);
        let len = self.rng.gen_range(2..=max_len);
        let start = self.rng.gen_range(lo..=hi_end - len);
        let other = holder.other();
        self.push_interval(other, start, start + len);
        self.plan.overlaps.push((start, start + len));
        self.stats.backchannels_placed += 1;
    }

    /// Runs the floor machine until the next IPU would start past the end.
    fn run(&mut self) {
        let thr = self.threshold;
        let mut holder = Channel::A;
        let mut start = 0usize;
        let mut len = self.ipu_len();
        let mut k_in = 0usize;
        while start < self.frames {
            let end = start + len;
            self.push_interval(holder, start, end);
            self.stats.ipus += 1;
            self.maybe_backchannel(holder, start, end, k_in);

            // Floor hand-off.
            self.stats.decisions += 1;
            let u: f64 = self.rng.gen();
            let other = holder.other();
            let overlapped = if u < self.profile.interruption_rate {
                self.stats.interruptions += 1;
                Some(INTERRUPT_MEAN_FRAMES)
            } else if u < self.profile.interruption_rate + self.profile.overlap_rate {
                self.stats.overlap_switches += 1;
                Some(OVERLAP_MEAN_FRAMES)
            } else {
                None
            };

            if let Some(mean) = overlapped {
                let next_len = self.ipu_len();
                let drawn = geom(&mut self.rng, mean).max(2).min(2 * thr);
                // The overlap must start strictly inside the holder's IPU,
                // leave the listener's previous voicing a full threshold
                // behind, and let the listener outlast the holder by a
                // threshold so the hand-off sticks.
                let cap = (end - start - 1)
                    .min(next_len - thr)
                    .min((end - thr).saturating_sub(self.last_voiced[other.index()]));
                let k = drawn.min(cap);
                if k >= 2 {
                    self.plan.overlaps.push((end - k, end));
                    holder = other;
                    start = end - k;
                    len = next_len;
                    k_in = k;
                    continue;
                }
                // No legal overlap length: hand over across a gap instead.
                self.stats.degraded_switches += 1;
                let g = geom(&mut self.rng, self.profile.mean_gap_frames).max(thr);
                self.plan.gaps.push((end, end + g));
                holder = other;
                start = end + g;
                len = next_len;
                k_in = 0;
                continue;
            }

            if self.rng.gen::<f64>() < self.profile.gap_switch_share {
                self.stats.gap_switches += 1;
                let g = geom(&mut self.rng, self.profile.mean_gap_frames).max(thr);
                self.plan.gaps.push((end, end + g));
                holder = other;
                start = end + g;
            } else {
                self.stats.pauses += 1;
                let p = geom(&mut self.rng, self.profile.mean_pause_frames).max(thr);
                self.plan.pauses.push((holder, end, end + p));
                start = end + p;
            }
            len = self.ipu_len();
            k_in = 0;
        }
    }

    /// Clips the plan to the stream bounds, applying the same edge rules
    /// the analyzer uses: IPUs and overlaps are cut at the end, silences
    /// that no longer precede a visible IPU are dropped.
    fn clipped(mut self) -> (Plan, GenStats) {
        let f = self.frames;
        for ipus in &mut self.plan.ipus {
            ipus.retain(|&(s, _)| s < f);
            for iv in ipus.iter_mut() {
                iv.1 = iv.1.min(f);
            }
        }
        self.plan.overlaps.retain(|&(s, _)| s < f);
        for iv in &mut self.plan.overlaps {
            iv.1 = iv.1.min(f);
        }
        self.plan.pauses.retain(|&(_, _, e)| e < f);
        self.plan.gaps.retain(|&(_, e)| e < f);
        (self.plan, self.stats)
    }
}

/// Builds the event list from a clipped plan; turns merge same-channel
/// IPUs across that channel's pauses, exactly as segmentation does.
fn plan_events(plan: &Plan, frames: usize, frame_rate_hz: f64) -> EventTrace {
    let mut events = Vec::new();
    for (ch, ipus) in [
        (Channel::A, &plan.ipus[0]),
        (Channel::B, &plan.ipus[1]),
    ] {
        let mut sorted = ipus.clone();
        sorted.sort_unstable();
        for &(s, e) in &sorted {
            events.push(Event {
                kind: EventKind::Ipu,
                scope: ch.into(),
                start: s,
                end: e,
            });
        }
        let pause_set: HashSet<(usize, usize)> = plan
            .pauses
            .iter()
            .filter(|&&(pch, _, _)| pch == ch)
            .map(|&(_, s, e)| (s, e))
            .collect();
        let mut i = 0;
        while i < sorted.len() {
            let t_start = sorted[i].0;
            let mut t_end = sorted[i].1;
            while i + 1 < sorted.len() && pause_set.contains(&(t_end, sorted[i + 1].0)) {
                i += 1;
                t_end = sorted[i].1;
            }
            events.push(Event {
                kind: EventKind::Turn,
                scope: ch.into(),
                start: t_start,
                end: t_end,
            });
            i += 1;
        }
    }
    for &(ch, s, e) in &plan.pauses {
        events.push(Event {
            kind: EventKind::Pause,
            scope: ch.into(),
            start: s,
            end: e,
        });
    }
    for &(s, e) in &plan.gaps {
        events.push(Event {
            kind: EventKind::Gap,
            scope: Scope::Pair,
            start: s,
            end: e,
        });
    }
    for &(s, e) in &plan.overlaps {
        events.push(Event {
            kind: EventKind::Overlap,
            scope: Scope::Pair,
            start: s,
            end: e,
        });
    }
    EventTrace::new(frames, frame_rate_hz, events)
}

fn paint(
    profile: &DialogueProfile,
    plan: &Plan,
    frames: usize,
    stream_seed: u64,
) -> DualTokenStream {
    let sil = profile.vocab.sil();
    let mut tracks = [vec![sil; frames], vec![sil; frames]];
    for (ch, track) in [Channel::A, Channel::B].into_iter().zip(&mut tracks) {
        let mut chain = MarkovChain::new(profile, ch, stream_seed);
        let mut ipus = plan.ipus[ch.index()].clone();
        ipus.sort_unstable();
        for (s, e) in ipus {
            for t in s..e {
                track[t] = chain.next();
            }
        }
    }
    let [a, b] = tracks;
    DualTokenStream::from_flat(profile.frame_rate_hz, 1, a, b)
        .expect("painted tracks share one length")
}

/// Generates stream `index` of the corpus identified by the profile seed.
pub fn generate_one(
    profile: &DialogueProfile,
    frames: usize,
    index: u64,
) -> Result<(GeneratedStream, GenStats), SynthError> {
    profile.validate(frames)?;
    let stream_seed = mix2(profile.seed, index);
    let mut planner = Planner::new(profile, frames, stream_seed);
    planner.run();
    let (plan, mut stats) = planner.clipped();
    let trace = plan_events(&plan, frames, profile.frame_rate_hz);
    let stream = paint(profile, &plan, frames, stream_seed);
    stats.streams = 1;
    stats.frames = frames;
    Ok((GeneratedStream { stream, trace }, stats))
}

/// Generates a corpus of equal-length streams plus aggregate statistics.
pub fn generate(
    profile: &DialogueProfile,
    frames: usize,
    n_streams: usize,
) -> Result<(Vec<GeneratedStream>, GenStats), SynthError> {
    profile.validate(frames)?;
    let mut out = Vec::with_capacity(n_streams);
    let mut stats = GenStats::default();
    for i in 0..n_streams {
        let (g, s) = generate_one(profile, frames, i as u64)?;
        stats.absorb(&s);
        out.push(g);
    }
    Ok((out, stats))
}

// ── Depth lifting ───────────────────────────────────────────────────

/// Per-token depth-`d` codes for lifting flat streams onto an RVQ grid,
/// plus the salt that made the code table injective. The scan is
/// deterministic: salts are tried from zero upward until no two content
/// tokens share a code tuple.
pub fn rvq_codes(vocab: Vocab, depth: usize) -> (u64, Vec<Vec<TokenId>>) {
    assert!(depth >= 1, "depth must be at least 1");
    let v = vocab.content as u64;
    let mut salt = 0u64;
    loop {
        let codes: Vec<Vec<TokenId>> = (0..v)
            .map(|x| {
                (0..depth)
                    .map(|d| (mix2(mix2(salt, x), d as u64) % v) as TokenId)
                    .collect()
            })
            .collect();
        let distinct: HashSet<&Vec<TokenId>> = codes.iter().collect();
        if distinct.len() == codes.len() {
            return (salt, codes);
        }
        salt += 1;
    }
}

/// Expands a depth-1 stream to depth `D`: content token x becomes its
/// code tuple, silence becomes D silence tokens.
pub fn to_rvq(
    stream: &DualTokenStream,
    depth: usize,
    vocab: Vocab,
) -> Result<DualTokenStream, SynthError> {
    if stream.depth() != 1 {
        return Err(SynthError::NotFlat(stream.depth()));
    }
    if depth == 1 {
        return Ok(stream.clone());
    }
    let (_, codes) = rvq_codes(vocab, depth);
    let sil = vocab.sil();
    let lift = |flat: &[TokenId]| -> Vec<TokenId> {
        let mut out = Vec::with_capacity(flat.len() * depth);
        for &x in flat {
            if x == sil {
                out.extend(std::iter::repeat(sil).take(depth));
            } else {
                out.extend_from_slice(&codes[x as usize]);
            }
        }
        out
    };
    let a = lift(stream.channel_flat(Channel::A));
    let b = lift(stream.channel_flat(Channel::B));
    Ok(DualTokenStream::from_flat(stream.frame_rate_hz(), depth, a, b)
        .expect("lifting preserves frame counts"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analyze::{segment, ActivityStream};

    fn quiet_profile() -> DialogueProfile {
        DialogueProfile {
            overlap_rate: 0.0,
            interruption_rate: 0.0,
            backchannel_rate: 0.0,
            ..DialogueProfile::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = DialogueProfile::default();
        let (g1, s1) = generate(&p, 1200, 3).unwrap();
        let (g2, s2) = generate(&p, 1200, 3).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(s1, s2);
        let moved = DialogueProfile { seed: 99, ..p };
        let (g3, _) = generate(&moved, 1200, 3).unwrap();
        assert_ne!(g1, g3);
    }

    #[test]
    fn zero_overlap_rates_mean_no_simultaneous_speech() {
        let p = quiet_profile();
        let (gens, stats) = generate(&p, 2400, 8).unwrap();
        assert_eq!(stats.overlap_switches + stats.interruptions, 0);
        for g in &gens {
            let act = ActivityStream::from_stream(&g.stream, p.vocab.sil());
            for t in 0..act.frames() {
                assert!(!(act.a[t] && act.b[t]), "both voiced at {t}");
            }
            assert_eq!(g.trace.count(EventKind::Overlap), 0);
        }
    }

    #[test]
    fn solo_speaker_profile_keeps_channel_b_silent() {
        let p = DialogueProfile {
            gap_switch_share: 0.0,
            ..quiet_profile()
        };
        let (gens, _) = generate(&p, 2400, 4).unwrap();
        for g in &gens {
            let sil = p.vocab.sil();
            assert!(g
                .stream
                .channel_flat(Channel::B)
                .iter()
                .all(|&t| t == sil));
            assert_eq!(g.trace.count(EventKind::Gap), 0);
            assert_eq!(g.trace.count(EventKind::Overlap), 0);
            assert!(g.trace.ipus(Channel::B).is_empty());
            assert!(g.trace.count(EventKind::Ipu) > 0);
            // The analyzer agrees.
            let seg = segment(&g.stream, sil, DEFAULT_SILENCE_MS);
            assert_eq!(seg, g.trace);
        }
    }

    #[test]
    fn tokens_and_trace_are_mutually_consistent() {
        let p = DialogueProfile::default();
        let (gens, _) = generate(&p, 1800, 6).unwrap();
        let sil = p.vocab.sil();
        for g in &gens {
            for ch in [Channel::A, Channel::B] {
                let ipus = g.trace.ipus(ch);
                let flat = g.stream.channel_flat(ch);
                for (t, &tok) in flat.iter().enumerate() {
                    let inside = ipus.iter().any(|&(s, e)| s <= t && t < e);
                    assert_eq!(
                        tok != sil,
                        inside,
                        "channel {ch:?} frame {t}: token {tok}, inside {inside}"
                    );
                    if tok != sil {
                        assert!(tok < p.vocab.content);
                    }
                }
            }
        }
    }

    #[test]
    fn analyzer_recovers_planned_trace_exactly() {
        // The central cross-validation: decision-recorded ground truth
        // equals token-level segmentation, including overlap-heavy and
        // backchannel-heavy profiles.
        let profiles = [
            DialogueProfile::default(),
            DialogueProfile {
                overlap_rate: 0.3,
                interruption_rate: 0.2,
                backchannel_rate: 0.5,
                mean_pause_frames: 10.0,
                mean_gap_frames: 9.0,
                seed: 77,
                ..DialogueProfile::default()
            },
            quiet_profile(),
        ];
        for p in &profiles {
            let (gens, _) = generate(p, 2000, 12).unwrap();
            for (i, g) in gens.iter().enumerate() {
                let seg = segment(&g.stream, p.vocab.sil(), DEFAULT_SILENCE_MS);
                assert_eq!(seg, g.trace, "profile seed {} stream {i}", p.seed);
            }
        }
    }

    #[test]
    fn decision_rates_track_profile_rates() {
        let p = DialogueProfile {
            mean_ipu_frames: 40.0,
            ..DialogueProfile::default()
        };
        let (_, stats) = generate(&p, 2400, 120).unwrap();
        assert!(stats.decisions > 3000, "only {} decisions", stats.decisions);
        let d = stats.decisions as f64;
        let residual = 1.0 - p.interruption_rate - p.overlap_rate;
        let checks = [
            ("interruptions", stats.interruptions as f64 / d, p.interruption_rate),
            ("overlap switches", stats.overlap_switches as f64 / d, p.overlap_rate),
            ("gap switches", stats.gap_switches as f64 / d, residual * p.gap_switch_share),
            ("pauses", stats.pauses as f64 / d, residual * (1.0 - p.gap_switch_share)),
            (
                "backchannel draws",
                stats.backchannel_draws as f64 / stats.ipus as f64,
                p.backchannel_rate,
            ),
        ];
        for (name, got, want) in checks {
            assert!(
                (got - want).abs() / want < 0.1,
                "{name}: got {got:.4}, want {want:.4}"
            );
        }
        // Degradations must stay rare for the rates to be meaningful.
        assert!((stats.degraded_switches as f64) < 0.05 * d);
        assert!(stats.backchannels_placed > 0);
    }

    #[test]
    fn infeasible_profiles_are_rejected() {
        let p = DialogueProfile::default();
        assert!(matches!(
            generate(&p, 10, 1),
            Err(SynthError::Infeasible { .. })
        ));
        let bad = DialogueProfile {
            overlap_rate: 1.3,
            ..DialogueProfile::default()
        };
        assert!(matches!(
            generate(&bad, 2400, 1),
            Err(SynthError::BadRate { name: "overlap_rate", .. })
        ));
        let heavy = DialogueProfile {
            overlap_rate: 0.6,
            interruption_rate: 0.6,
            ..DialogueProfile::default()
        };
        assert!(matches!(generate(&heavy, 2400, 1), Err(SynthError::RateMass(_))));
        let tiny = DialogueProfile {
            vocab: Vocab::new(1),
            ..DialogueProfile::default()
        };
        assert!(matches!(generate(&tiny, 2400, 1), Err(SynthError::TinyVocab(1))));
    }

    #[test]
    fn rvq_identity_at_depth_one() {
        let p = DialogueProfile::default();
        let (g, _) = generate_one(&p, 1200, 0).unwrap();
        let lifted = to_rvq(&g.stream, 1, p.vocab).unwrap();
        assert_eq!(lifted, g.stream);
    }

    #[test]
    fn rvq_codes_are_injective_and_sil_lifts_to_all_sil() {
        let vocab = Vocab::new(32);
        let (_, codes) = rvq_codes(vocab, 2);
        let distinct: HashSet<_> = codes.iter().collect();
        assert_eq!(distinct.len(), 32);

        let p = DialogueProfile::default();
        let (g, _) = generate_one(&p, 1200, 1).unwrap();
        let lifted = to_rvq(&g.stream, 2, p.vocab).unwrap();
        assert_eq!(lifted.depth(), 2);
        assert_eq!(lifted.steps(), g.stream.steps());
        let sil = p.vocab.sil();
        for t in 0..g.stream.steps() {
            for ch in [Channel::A, Channel::B] {
                let src = g.stream.frame(ch, t)[0];
                let dst = lifted.frame(ch, t);
                if src == sil {
                    assert!(dst.iter().all(|&x| x == sil));
                } else {
                    assert_eq!(dst, &codes[src as usize][..]);
                }
            }
        }
    }

    #[test]
    fn rvq_roundtrip_recovers_the_flat_stream() {
        let vocab = Vocab::new(32);
        let (_, codes) = rvq_codes(vocab, 3);
        let decode: std::collections::HashMap<&[TokenId], TokenId> = codes
            .iter()
            .enumerate()
            .map(|(x, c)| (c.as_slice(), x as TokenId))
            .collect();
        let p = DialogueProfile::default();
        let (g, _) = generate_one(&p, 900, 2).unwrap();
        let lifted = to_rvq(&g.stream, 3, vocab).unwrap();
        let sil = vocab.sil();
        for ch in [Channel::A, Channel::B] {
            for t in 0..g.stream.steps() {
                let src = g.stream.frame(ch, t)[0];
                let dst = lifted.frame(ch, t);
                let back = if dst.iter().all(|&x| x == sil) {
                    sil
                } else {
                    decode[dst]
                };
                assert_eq!(back, src);
            }
        }
    }

    #[test]
    fn markov_content_is_skewed_not_uniform() {
        // With an order-1 profile, observed bigram rows are exactly the
        // chain's transition rows, so their modes must carry far more
        // than the uniform share.
        let p = DialogueProfile {
            markov_order: 1,
            ..DialogueProfile::default()
        };
        let (gens, _) = generate(&p, 2400, 10).unwrap();
        let sil = p.vocab.sil();
        let v = p.vocab.content as usize;
        let mut follow = vec![vec![0usize; v]; v];
        for g in &gens {
            let flat = g.stream.channel_flat(Channel::A);
            for w in flat.windows(2) {
                if w[0] != sil && w[1] != sil {
                    follow[w[0] as usize][w[1] as usize] += 1;
                }
            }
        }
        let (mut peaked, mut rows) = (0usize, 0usize);
        for row in &follow {
            let total: usize = row.iter().sum();
            if total < 30 {
                continue;
            }
            rows += 1;
            let max = *row.iter().max().unwrap();
            if max as f64 > 3.0 * total as f64 / v as f64 {
                peaked += 1;
            }
        }
        assert!(rows > 0);
        assert!(
            peaked * 10 >= rows * 8,
            "only {peaked}/{rows} rows are peaked"
        );
    }
}
