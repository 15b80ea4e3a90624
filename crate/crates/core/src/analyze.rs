//! Turn-taking segmentation and evaluation statistics.
//!
//! Activity is read straight from tokens: a channel is voiced at a frame
//! iff any of the frame's depth tokens differs from the silence token. The
//! event taxonomy over the resulting two boolean tracks:
//!
//! - IPU: per channel, a maximal voiced run; voiced runs separated by a
//!   silent run shorter than the threshold merge into one IPU, so an IPU
//!   interval is bordered by threshold-long silence or a stream edge.
//! - Classified silence: a maximal run of frames where both channels are
//!   silent, lying inside no IPU interval of either channel and touching
//!   no stream edge. It is a pause when some channel is voiced both at the
//!   frame before and the frame after the run (scoped to that channel),
//!   otherwise a gap.
//! - Overlap: a maximal run of frames where both channels are voiced.
//! - Turn: per channel, consecutive IPUs merge across a pause scoped to
//!   that channel; every IPU lies in exactly one turn.
//!
//! Stream-edge silences are unattributable and classify as nothing. A
//! silence bordered by both channels on both sides (possible only in
//! hand-built streams) is recorded as a pair-scoped pause and never merges
//! turns.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Channel, DualTokenStream, TokenId};

pub const DEFAULT_SILENCE_MS: f64 = 200.0;

#[derive(Debug, Error)]
pub enum AnalyzeError {
    #[error("no traces to report on")]
    EmptyReport,
    #[error("total duration is zero")]
    ZeroDuration,
    #[error("frame rate mismatch: {a} vs {b}")]
    RateMismatch { a: f64, b: f64 },
    #[error("trace line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Stream(#[from] crate::stream::StreamError),
    #[error("swap evaluation needs at least one continuation step")]
    NoContinuation,
}

/// Silence threshold in frames for a given frame rate; 200 ms at 40 Hz is
/// 8 frames. Always at least one frame.
pub fn threshold_frames(frame_rate_hz: f64, silence_ms: f64) -> usize {
    ((silence_ms / 1000.0 * frame_rate_hz).round() as usize).max(1)
}

// ── Event taxonomy ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Ipu,
    Pause,
    Gap,
    Overlap,
    Turn,
}

impl EventKind {
    fn rank(self) -> u8 {
        match self {
            EventKind::Ipu => 0,
            EventKind::Pause => 1,
            EventKind::Gap => 2,
            EventKind::Overlap => 3,
            EventKind::Turn => 4,
        }
    }
}

/// Which side an event belongs to. Gaps and overlaps are properties of the
/// pair; IPUs, turns, and pauses belong to one speaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    A,
    B,
    Pair,
}

impl Scope {
    fn rank(self) -> u8 {
        match self {
            Scope::A => 0,
            Scope::B => 1,
            Scope::Pair => 2,
        }
    }

    pub fn channel(self) -> Option<Channel> {
        match self {
            Scope::A => Some(Channel::A),
            Scope::B => Some(Channel::B),
            Scope::Pair => None,
        }
    }

    pub fn swapped(self) -> Scope {
        match self {
            Scope::A => Scope::B,
            Scope::B => Scope::A,
            Scope::Pair => Scope::Pair,
        }
    }
}

impl From<Channel> for Scope {
    fn from(ch: Channel) -> Scope {
        match ch {
            Channel::A => Scope::A,
            Channel::B => Scope::B,
        }
    }
}

/// Half-open frame interval `[start, end)` tagged with kind and scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub scope: Scope,
    pub start: usize,
    pub end: usize,
}

impl Event {
    pub fn frames(&self) -> usize {
        self.end - self.start
    }
}

fn event_key(e: &Event) -> (usize, usize, u8, u8) {
    (e.start, e.end, e.kind.rank(), e.scope.rank())
}

/// Every event of one stream, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub frames: usize,
    pub frame_rate_hz: f64,
    pub events: Vec<Event>,
}

impl EventTrace {
    pub fn new(frames: usize, frame_rate_hz: f64, mut events: Vec<Event>) -> EventTrace {
        events.sort_by_key(event_key);
        EventTrace {
            frames,
            frame_rate_hz,
            events,
        }
    }

    pub fn of_kind(&self, kind: EventKind) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.of_kind(kind).count()
    }

    pub fn frames_of(&self, kind: EventKind) -> usize {
        self.of_kind(kind).map(Event::frames).sum()
    }

    /// IPU intervals of one channel, in time order.
    pub fn ipus(&self, ch: Channel) -> Vec<(usize, usize)> {
        let scope = Scope::from(ch);
        self.of_kind(EventKind::Ipu)
            .filter(|e| e.scope == scope)
            .map(|e| (e.start, e.end))
            .collect()
    }

    /// The same trace with channel labels exchanged.
    pub fn swap_channels(&self) -> EventTrace {
        let events = self
            .events
            .iter()
            .map(|e| Event {
                scope: e.scope.swapped(),
                ..*e
            })
            .collect();
        EventTrace::new(self.frames, self.frame_rate_hz, events)
    }
}

// ── Activity extraction and segmentation ────────────────────────────

/// Per-channel voicing tracks of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityStream {
    pub frame_rate_hz: f64,
    pub a: Vec<bool>,
    pub b: Vec<bool>,
}

impl ActivityStream {
    /// Voiced iff any depth token of the frame differs from `sil`.
    pub fn from_stream(stream: &DualTokenStream, sil: TokenId) -> ActivityStream {
        let voiced = |ch: Channel| -> Vec<bool> {
            (0..stream.steps())
                .map(|t| stream.frame(ch, t).iter().any(|&tok| tok != sil))
                .collect()
        };
        ActivityStream {
            frame_rate_hz: stream.frame_rate_hz(),
            a: voiced(Channel::A),
            b: voiced(Channel::B),
        }
    }

    pub fn frames(&self) -> usize {
        self.a.len()
    }

    /// The activity track of one channel.
    pub fn track(&self, ch: Channel) -> &[bool] {
        match ch {
            Channel::A => &self.a,
            Channel::B => &self.b,
        }
    }
}

/// Maximal runs of `true`, as half-open intervals.
fn true_runs(v: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &x) in v.iter().enumerate() {
        match (x, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, v.len()));
    }
    runs
}

/// Merges runs whose separating silence is shorter than `threshold`.
fn merge_runs(runs: &[(usize, usize)], threshold: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(runs.len());
    for &(s, e) in runs {
        match out.last_mut() {
            Some((_, pe)) if s - *pe < threshold => *pe = e,
            _ => out.push((s, e)),
        }
    }
    out
}

fn covered(ipus: &[(usize, usize)], frame: usize) -> bool {
    ipus.iter().any(|&(s, e)| s <= frame && frame < e)
}

/// Segments boolean activity into the full event taxonomy.
pub fn segment_activity(act: &ActivityStream, silence_ms: f64) -> EventTrace {
    let t_len = act.frames();
    let threshold = threshold_frames(act.frame_rate_hz, silence_ms);
    let ipus_a = merge_runs(&true_runs(&act.a), threshold);
    let ipus_b = merge_runs(&true_runs(&act.b), threshold);

    let mut events = Vec::new();
    for (ch, ipus) in [(Channel::A, &ipus_a), (Channel::B, &ipus_b)] {
        for &(s, e) in ipus {
            events.push(Event {
                kind: EventKind::Ipu,
                scope: ch.into(),
                start: s,
                end: e,
            });
        }
    }

    // Classified silences. Maximal both-silent runs never straddle an IPU
    // interval boundary (intervals begin and end on voiced frames), so a
    // run is inside an interval iff its first frame is.
    let both_silent: Vec<bool> = (0..t_len).map(|t| !act.a[t] && !act.b[t]).collect();
    let mut pauses = Vec::new();
    for (s, e) in true_runs(&both_silent) {
        if s == 0 || e == t_len {
            continue;
        }
        if covered(&ipus_a, s) || covered(&ipus_b, s) {
            continue;
        }
        let before = (act.a[s - 1], act.b[s - 1]);
        let after = (act.a[e], act.b[e]);
        let scope = match (before.0 && after.0, before.1 && after.1) {
            (true, false) => Some(Scope::A),
            (false, true) => Some(Scope::B),
            (true, true) => Some(Scope::Pair),
            (false, false) => None,
        };
        match scope {
            Some(scope) => {
                if let Some(ch) = scope.channel() {
                    pauses.push((ch, s, e));
                }
                events.push(Event {
                    kind: EventKind::Pause,
                    scope,
                    start: s,
                    end: e,
                });
            }
            None => events.push(Event {
                kind: EventKind::Gap,
                scope: Scope::Pair,
                start: s,
                end: e,
            }),
        }
    }

    let both_voiced: Vec<bool> = (0..t_len).map(|t| act.a[t] && act.b[t]).collect();
    for (s, e) in true_runs(&both_voiced) {
        events.push(Event {
            kind: EventKind::Overlap,
            scope: Scope::Pair,
            start: s,
            end: e,
        });
    }

    let pause_set: HashSet<(Channel, usize, usize)> = pauses.into_iter().collect();
    for (ch, ipus) in [(Channel::A, &ipus_a), (Channel::B, &ipus_b)] {
        let mut i = 0;
        while i < ipus.len() {
            let start = ipus[i].0;
            let mut end = ipus[i].1;
            while i + 1 < ipus.len() && pause_set.contains(&(ch, end, ipus[i + 1].0)) {
                i += 1;
                end = ipus[i].1;
            }
            events.push(Event {
                kind: EventKind::Turn,
                scope: ch.into(),
                start,
                end,
            });
            i += 1;
        }
    }

    EventTrace::new(t_len, act.frame_rate_hz, events)
}

/// Segments a token stream directly; `sil` names the silence token.
pub fn segment(stream: &DualTokenStream, sil: TokenId, silence_ms: f64) -> EventTrace {
    segment_activity(&ActivityStream::from_stream(stream, sil), silence_ms)
}

// ── Reports ─────────────────────────────────────────────────────────

/// Occurrence and duration statistics normalized per minute of dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventReport {
    pub frame_rate_hz: f64,
    pub minutes: f64,
    pub ipu_per_min: f64,
    pub ipu_sec_per_min: f64,
    pub pause_per_min: f64,
    pub pause_sec_per_min: f64,
    pub gap_per_min: f64,
    pub gap_sec_per_min: f64,
    pub overlap_per_min: f64,
    pub overlap_sec_per_min: f64,
    pub turn_count: usize,
}

/// Names of the eight normalized metrics, in [`EventReport::metrics`] order.
pub const METRIC_NAMES: [&str; 8] = [
    "ipu_per_min",
    "ipu_sec_per_min",
    "pause_per_min",
    "pause_sec_per_min",
    "gap_per_min",
    "gap_sec_per_min",
    "overlap_per_min",
    "overlap_sec_per_min",
];

impl EventReport {
    pub fn metrics(&self) -> [f64; 8] {
        [
            self.ipu_per_min,
            self.ipu_sec_per_min,
            self.pause_per_min,
            self.pause_sec_per_min,
            self.gap_per_min,
            self.gap_sec_per_min,
            self.overlap_per_min,
            self.overlap_sec_per_min,
        ]
    }

    /// CSV rows `metric,occurrences_per_min,duration_s_per_min`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,occurrences_per_min,duration_s_per_min\n");
        for (name, occ, dur) in [
            ("ipu", self.ipu_per_min, self.ipu_sec_per_min),
            ("pause", self.pause_per_min, self.pause_sec_per_min),
            ("gap", self.gap_per_min, self.gap_sec_per_min),
            ("overlap", self.overlap_per_min, self.overlap_sec_per_min),
        ] {
            s.push_str(&format!("{name},{occ},{dur}\n"));
        }
        s
    }
}

/// Aggregates traces into per-minute statistics.
pub fn report(traces: &[EventTrace]) -> Result<EventReport, AnalyzeError> {
    let first = traces.first().ok_or(AnalyzeError::EmptyReport)?;
    let rate = first.frame_rate_hz;
    let mut frames = 0usize;
    for t in traces {
        if t.frame_rate_hz != rate {
            return Err(AnalyzeError::RateMismatch {
                a: rate,
                b: t.frame_rate_hz,
            });
        }
        frames += t.frames;
    }
    if frames == 0 {
        return Err(AnalyzeError::ZeroDuration);
    }
    let minutes = frames as f64 / rate / 60.0;
    let count = |k: EventKind| traces.iter().map(|t| t.count(k)).sum::<usize>() as f64;
    let secs = |k: EventKind| {
        traces.iter().map(|t| t.frames_of(k)).sum::<usize>() as f64 / rate
    };
    Ok(EventReport {
        frame_rate_hz: rate,
        minutes,
        ipu_per_min: count(EventKind::Ipu) / minutes,
        ipu_sec_per_min: secs(EventKind::Ipu) / minutes,
        pause_per_min: count(EventKind::Pause) / minutes,
        pause_sec_per_min: secs(EventKind::Pause) / minutes,
        gap_per_min: count(EventKind::Gap) / minutes,
        gap_sec_per_min: secs(EventKind::Gap) / minutes,
        overlap_per_min: count(EventKind::Overlap) / minutes,
        overlap_sec_per_min: secs(EventKind::Overlap) / minutes,
        turn_count: traces.iter().map(|t| t.count(EventKind::Turn)).sum(),
    })
}

/// Absolute metric differences between two reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub frame_rate_hz: f64,
    pub abs: [f64; 8],
}

impl DeltaReport {
    pub fn max(&self) -> f64 {
        self.abs.iter().cloned().fold(0.0, f64::max)
    }

    /// CSV rows `metric,delta`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,delta\n");
        for (name, v) in METRIC_NAMES.iter().zip(self.abs) {
            s.push_str(&format!("{name},{v}\n"));
        }
        s
    }
}

/// `|a − b|` per normalized metric.
pub fn delta(a: &EventReport, b: &EventReport) -> Result<DeltaReport, AnalyzeError> {
    if a.frame_rate_hz != b.frame_rate_hz {
        return Err(AnalyzeError::RateMismatch {
            a: a.frame_rate_hz,
            b: b.frame_rate_hz,
        });
    }
    let ma = a.metrics();
    let mb = b.metrics();
    let mut abs = [0.0; 8];
    for i in 0..8 {
        abs[i] = (ma[i] - mb[i]).abs();
    }
    Ok(DeltaReport {
        frame_rate_hz: a.frame_rate_hz,
        abs,
    })
}

// ── Speaker-swap robustness ─────────────────────────────────────────

/// Controls for [`swap_eval`]'s continuation runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapEvalOptions {
    /// Prefix of each corpus stream used as the prompt.
    pub prompt_steps: usize,
    /// Continuation length sampled beyond the prompt.
    pub new_steps: usize,
    pub temperature: f64,
    /// Base sampler seeds; each prompt derives its own pair, and the
    /// swapped run uses the derived pair swapped.
    pub seeds: crate::stream::SamplerSeeds,
    /// Silence threshold for segmenting the continuations.
    pub silence_ms: f64,
}

impl Default for SwapEvalOptions {
    fn default() -> Self {
        SwapEvalOptions {
            prompt_steps: 40,
            new_steps: 200,
            temperature: 0.7,
            seeds: crate::stream::SamplerSeeds { a: 17, b: 18 },
            silence_ms: DEFAULT_SILENCE_MS,
        }
    }
}

/// Everything the speaker-swap evaluation measures: per-run turn-taking
/// reports, their deltas against the corpus reference, and the
/// per-metric robustness `|Δ_original − Δ_swapped|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEvalOutcome {
    pub reference: EventReport,
    pub original: EventReport,
    pub swapped: EventReport,
    pub delta_original: DeltaReport,
    pub delta_swapped: DeltaReport,
    pub robustness: DeltaReport,
}

impl SwapEvalOutcome {
    pub fn max_robustness(&self) -> f64 {
        self.robustness.max()
    }
}

/// Measures how much generated turn-taking statistics depend on which
/// speaker sits on which channel. Each corpus stream contributes a prompt
/// prefix; continuations are sampled once as-is and once with the prompt
/// channels (and the per-prompt sampler seeds) swapped, and both
/// continuation corpora are compared against the full corpus reference.
/// A model that treats the channels symmetrically - tied channel
/// embedding rows - yields bit-identical mirrored continuations, so every
/// robustness entry is exactly zero.
pub fn swap_eval(
    params: &crate::model::ModelParams,
    corpus: &[DualTokenStream],
    opts: &SwapEvalOptions,
) -> Result<SwapEvalOutcome, AnalyzeError> {
    use crate::stream::{generate_free, SamplerSeeds};
    use crate::synth::mix2;

    if opts.new_steps == 0 {
        return Err(AnalyzeError::NoContinuation);
    }
    let sil = params.config.vocab.sil();
    let mut ref_traces = Vec::with_capacity(corpus.len());
    let mut orig_traces = Vec::with_capacity(corpus.len());
    let mut swap_traces = Vec::with_capacity(corpus.len());
    for (i, stream) in corpus.iter().enumerate() {
        ref_traces.push(segment(stream, sil, opts.silence_ms));
        let prompt = stream.truncate_steps(opts.prompt_steps.min(stream.steps()));
        let seeds = SamplerSeeds {
            a: mix2(opts.seeds.a, i as u64),
            b: mix2(opts.seeds.b, i as u64),
        };
        let continuation = |p: &DualTokenStream, s: SamplerSeeds| -> Result<_, AnalyzeError> {
            let full = generate_free(
                params,
                Some(p),
                opts.new_steps,
                opts.temperature,
                s,
                p.frame_rate_hz(),
            )?;
            // Only the sampled frames count as model behavior.
            let depth = full.depth();
            let skip = p.steps() * depth;
            let tail = DualTokenStream::from_flat(
                full.frame_rate_hz(),
                depth,
                full.channel_flat(Channel::A)[skip..].to_vec(),
                full.channel_flat(Channel::B)[skip..].to_vec(),
            )
            .expect("continuation keeps the stream well-formed");
            Ok(segment(&tail, sil, opts.silence_ms))
        };
        orig_traces.push(continuation(&prompt, seeds)?);
        swap_traces.push(continuation(&prompt.swap_channels(), seeds.swapped())?);
    }
    let reference = report(&ref_traces)?;
    let original = report(&orig_traces)?;
    let swapped = report(&swap_traces)?;
    let delta_original = delta(&original, &reference)?;
    let delta_swapped = delta(&swapped, &reference)?;
    let mut abs = [0.0; 8];
    for i in 0..8 {
        abs[i] = (delta_original.abs[i] - delta_swapped.abs[i]).abs();
    }
    let robustness = DeltaReport {
        frame_rate_hz: reference.frame_rate_hz,
        abs,
    };
    Ok(SwapEvalOutcome {
        reference,
        original,
        swapped,
        delta_original,
        delta_swapped,
        robustness,
    })
}

// ── Trace files ─────────────────────────────────────────────────────

/// One trace per line, as JSON.
pub fn write_traces_jsonl(path: &Path, traces: &[EventTrace]) -> Result<(), AnalyzeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in traces {
        serde_json::to_writer(&mut w, t).map_err(|source| AnalyzeError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces_jsonl(path: &Path) -> Result<Vec<EventTrace>, AnalyzeError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: EventTrace =
            serde_json::from_str(&line).map_err(|source| AnalyzeError::Json { line: i + 1, source })?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const RATE: f64 = 40.0;

    fn activity(a: &[(usize, usize)], b: &[(usize, usize)], frames: usize) -> ActivityStream {
        let paint = |ivs: &[(usize, usize)]| {
            let mut v = vec![false; frames];
            for &(s, e) in ivs {
                for x in &mut v[s..e] {
                    *x = true;
                }
            }
            v
        };
        ActivityStream {
            frame_rate_hz: RATE,
            a: paint(a),
            b: paint(b),
        }
    }

    fn kinds(trace: &EventTrace, kind: EventKind) -> Vec<(Scope, usize, usize)> {
        trace
            .of_kind(kind)
            .map(|e| (e.scope, e.start, e.end))
            .collect()
    }

    #[test]
    fn single_ipu_report_numbers() {
        // One 2.5 s utterance in a 60 s stream.
        let act = activity(&[(0, 100)], &[], 2400);
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(kinds(&trace, EventKind::Ipu), vec![(Scope::A, 0, 100)]);
        assert_eq!(trace.count(EventKind::Pause), 0);
        assert_eq!(trace.count(EventKind::Gap), 0);
        assert_eq!(trace.count(EventKind::Overlap), 0);
        assert_eq!(kinds(&trace, EventKind::Turn), vec![(Scope::A, 0, 100)]);
        let rep = report(&[trace]).unwrap();
        assert!((rep.ipu_per_min - 1.0).abs() < 1e-12);
        assert!((rep.ipu_sec_per_min - 2.5).abs() < 1e-12);
        assert_eq!(rep.turn_count, 1);
    }

    #[test]
    fn sub_threshold_silence_merges_ipus() {
        // 4-frame silence at 40 Hz (threshold 8) merges the two runs.
        let act = activity(&[(0, 40), (44, 80)], &[], 200);
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(kinds(&trace, EventKind::Ipu), vec![(Scope::A, 0, 80)]);
        // The merged interior silence is not a classified pause.
        assert_eq!(trace.count(EventKind::Pause), 0);
        // At or above threshold the runs stay separate.
        let act2 = activity(&[(0, 40), (48, 80)], &[], 200);
        let trace2 = segment_activity(&act2, DEFAULT_SILENCE_MS);
        assert_eq!(
            kinds(&trace2, EventKind::Ipu),
            vec![(Scope::A, 0, 40), (Scope::A, 48, 80)]
        );
        assert_eq!(kinds(&trace2, EventKind::Pause), vec![(Scope::A, 40, 48)]);
    }

    #[test]
    fn three_interval_fixture_counts() {
        // A speaks, B cuts in with a 5-frame overlap and takes the floor,
        // then A re-enters after a 10-frame silence: gap (speaker change).
        let act = activity(&[(0, 40), (100, 130)], &[(35, 90)], 140);
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(
            kinds(&trace, EventKind::Ipu),
            vec![(Scope::A, 0, 40), (Scope::B, 35, 90), (Scope::A, 100, 130)]
        );
        assert_eq!(kinds(&trace, EventKind::Overlap), vec![(Scope::Pair, 35, 40)]);
        assert_eq!(kinds(&trace, EventKind::Gap), vec![(Scope::Pair, 90, 100)]);
        assert_eq!(trace.count(EventKind::Pause), 0);
        assert_eq!(trace.count(EventKind::Turn), 3);
    }

    #[test]
    fn pause_keeps_speaker_gap_switches() {
        // A, silence, A again: pause. Then A, silence, B: gap.
        let act = activity(&[(0, 20), (30, 50)], &[(70, 90)], 120);
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(kinds(&trace, EventKind::Pause), vec![(Scope::A, 20, 30)]);
        assert_eq!(kinds(&trace, EventKind::Gap), vec![(Scope::Pair, 50, 70)]);
        // The pause merges A's IPUs into one turn; the gap starts B's turn.
        assert_eq!(
            kinds(&trace, EventKind::Turn),
            vec![(Scope::A, 0, 50), (Scope::B, 70, 90)]
        );
    }

    #[test]
    fn edge_silences_are_unclassified() {
        let act = activity(&[(20, 60)], &[], 100);
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(trace.count(EventKind::Pause), 0);
        assert_eq!(trace.count(EventKind::Gap), 0);
        assert_eq!(trace.count(EventKind::Ipu), 1);
    }

    #[test]
    fn degenerate_both_sided_silence_is_pair_pause() {
        // Both channels stop together and restart together; neither speaker
        // can claim the pause, and it must not merge turns.
        let act = activity(&[(0, 20), (32, 50)], &[(0, 20), (32, 50)], 60);
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(kinds(&trace, EventKind::Pause), vec![(Scope::Pair, 20, 32)]);
        assert_eq!(trace.count(EventKind::Turn), 4);
    }

    #[test]
    fn silence_inside_merged_ipu_with_other_channel_silent_is_not_classified() {
        // A's sub-threshold silence sits inside A's merged IPU interval;
        // B is silent throughout, so the frames are both-silent but covered.
        let act = activity(&[(0, 40), (44, 80)], &[(100, 140)], 160);
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(kinds(&trace, EventKind::Ipu), vec![(Scope::A, 0, 80), (Scope::B, 100, 140)]);
        assert_eq!(trace.count(EventKind::Pause), 0);
        assert_eq!(kinds(&trace, EventKind::Gap), vec![(Scope::Pair, 80, 100)]);
    }

    #[test]
    fn empty_stream_gives_empty_trace() {
        let act = ActivityStream {
            frame_rate_hz: RATE,
            a: vec![],
            b: vec![],
        };
        let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
        assert_eq!(trace.frames, 0);
        assert!(trace.events.is_empty());
    }

    #[test]
    fn segment_reads_tokens_through_sil() {
        let s = DualTokenStream::from_frames(
            RATE,
            2,
            &[vec![5, 9], vec![9, 9], vec![9, 2]],
            &[vec![9, 9], vec![9, 9], vec![9, 9]],
        )
        .unwrap();
        let act = ActivityStream::from_stream(&s, 9);
        // Frame 1 of A is all-SIL; with threshold 1 ms the runs split.
        assert_eq!(act.a, vec![true, false, true]);
        assert_eq!(act.b, vec![false, false, false]);
        let trace = segment(&s, 9, DEFAULT_SILENCE_MS);
        // 1-frame silence is below the 8-frame threshold: one merged IPU.
        assert_eq!(kinds(&trace, EventKind::Ipu), vec![(Scope::A, 0, 3)]);
    }

    #[test]
    fn doubling_the_corpus_keeps_per_minute_values() {
        let act = activity(&[(0, 40), (60, 100)], &[(120, 160)], 200);
        let t = segment_activity(&act, DEFAULT_SILENCE_MS);
        let once = report(&[t.clone()]).unwrap();
        let twice = report(&[t.clone(), t]).unwrap();
        for (x, y) in once.metrics().iter().zip(twice.metrics()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(twice.turn_count, 2 * once.turn_count);
    }

    #[test]
    fn delta_is_zero_on_self_and_symmetric() {
        let act1 = activity(&[(0, 40), (60, 100)], &[(120, 160)], 200);
        let act2 = activity(&[(0, 80)], &[(90, 160)], 200);
        let r1 = report(&[segment_activity(&act1, DEFAULT_SILENCE_MS)]).unwrap();
        let r2 = report(&[segment_activity(&act2, DEFAULT_SILENCE_MS)]).unwrap();
        let zero = delta(&r1, &r1).unwrap();
        assert!(zero.abs.iter().all(|&x| x == 0.0));
        let d12 = delta(&r1, &r2).unwrap();
        let d21 = delta(&r2, &r1).unwrap();
        assert_eq!(d12, d21);
    }

    #[test]
    fn report_errors() {
        assert!(matches!(report(&[]), Err(AnalyzeError::EmptyReport)));
        let t0 = EventTrace::new(0, RATE, vec![]);
        assert!(matches!(report(&[t0]), Err(AnalyzeError::ZeroDuration)));
        let ta = EventTrace::new(10, 40.0, vec![]);
        let tb = EventTrace::new(10, 50.0, vec![]);
        assert!(matches!(
            report(&[ta, tb]),
            Err(AnalyzeError::RateMismatch { .. })
        ));
    }

    #[test]
    fn trace_jsonl_roundtrip() {
        let act = activity(&[(0, 40), (60, 100)], &[(35, 45)], 160);
        let t1 = segment_activity(&act, DEFAULT_SILENCE_MS);
        let t2 = segment_activity(&activity(&[(0, 20)], &[], 40), DEFAULT_SILENCE_MS);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.jsonl");
        write_traces_jsonl(&path, &[t1.clone(), t2.clone()]).unwrap();
        let back = read_traces_jsonl(&path).unwrap();
        assert_eq!(back, vec![t1, t2]);
    }

    // Frame categories of the partition property.
    fn frame_category(trace: &EventTrace, act: &ActivityStream, ch: Channel, t: usize) -> u8 {
        let in_ipu = trace
            .of_kind(EventKind::Ipu)
            .any(|e| e.scope == ch.into() && e.start <= t && t < e.end);
        if in_ipu {
            return if act.track(ch)[t] { 0 } else { 1 };
        }
        let classified = trace
            .events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::Pause | EventKind::Gap))
            .any(|e| e.start <= t && t < e.end);
        if classified {
            2
        } else {
            3
        }
    }

    proptest! {
        #[test]
        fn swap_equivariance(bits_a in prop::collection::vec(any::<bool>(), 0..160),
                             bits_b in prop::collection::vec(any::<bool>(), 0..160)) {
            let n = bits_a.len().min(bits_b.len());
            let act = ActivityStream { frame_rate_hz: RATE, a: bits_a[..n].to_vec(), b: bits_b[..n].to_vec() };
            let swapped = ActivityStream { frame_rate_hz: RATE, a: act.b.clone(), b: act.a.clone() };
            let t1 = segment_activity(&act, DEFAULT_SILENCE_MS).swap_channels();
            let t2 = segment_activity(&swapped, DEFAULT_SILENCE_MS);
            prop_assert_eq!(t1, t2);
        }

        #[test]
        fn larger_threshold_never_increases_ipu_count(bits in prop::collection::vec(any::<bool>(), 0..200)) {
            let act = ActivityStream { frame_rate_hz: RATE, a: bits.clone(), b: vec![false; bits.len()] };
            let short = segment_activity(&act, 200.0);
            let long = segment_activity(&act, 400.0);
            prop_assert!(long.count(EventKind::Ipu) <= short.count(EventKind::Ipu));
        }

        #[test]
        fn every_frame_has_exactly_one_category(bits_a in prop::collection::vec(any::<bool>(), 1..150),
                                                bits_b in prop::collection::vec(any::<bool>(), 1..150)) {
            let n = bits_a.len().min(bits_b.len());
            let act = ActivityStream { frame_rate_hz: RATE, a: bits_a[..n].to_vec(), b: bits_b[..n].to_vec() };
            let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
            // Categories: 0 voiced-in-IPU, 1 silent-within-IPU (merged),
            // 2 classified silence, 3 edge/uncovered silence. A voiced
            // frame must always be category 0; the category function is
            // total, so this checks IPU coverage of voiced frames plus
            // mutual exclusion of IPU membership and classified silences.
            for ch in [Channel::A, Channel::B] {
                for t in 0..n {
                    let cat = frame_category(&trace, &act, ch, t);
                    if act.track(ch)[t] {
                        prop_assert_eq!(cat, 0, "voiced frame {} channel {:?}", t, ch);
                    } else {
                        prop_assert!(cat >= 1);
                    }
                }
            }
            // Classified silences never overlap an IPU of either channel.
            for e in trace.events.iter().filter(|e| matches!(e.kind, EventKind::Pause | EventKind::Gap)) {
                for ipu in trace.of_kind(EventKind::Ipu) {
                    prop_assert!(e.end <= ipu.start || ipu.end <= e.start);
                }
            }
        }

        #[test]
        fn turns_partition_ipus(bits_a in prop::collection::vec(any::<bool>(), 1..150),
                                bits_b in prop::collection::vec(any::<bool>(), 1..150)) {
            let n = bits_a.len().min(bits_b.len());
            let act = ActivityStream { frame_rate_hz: RATE, a: bits_a[..n].to_vec(), b: bits_b[..n].to_vec() };
            let trace = segment_activity(&act, DEFAULT_SILENCE_MS);
            for ch in [Channel::A, Channel::B] {
                let ipus = trace.ipus(ch);
                let turns: Vec<(usize, usize)> = trace
                    .of_kind(EventKind::Turn)
                    .filter(|e| e.scope == ch.into())
                    .map(|e| (e.start, e.end))
                    .collect();
                // Each IPU lies inside exactly one same-channel turn.
                for (s, e) in &ipus {
                    let n_hosts = turns.iter().filter(|(ts, te)| ts <= s && e <= te).count();
                    prop_assert_eq!(n_hosts, 1);
                }
                // Turn boundaries coincide with IPU boundaries.
                for (ts, te) in &turns {
                    prop_assert!(ipus.iter().any(|(s, _)| s == ts));
                    prop_assert!(ipus.iter().any(|(_, e)| e == te));
                }
            }
        }
    }

    mod swap_evaluation {
        use super::super::*;
        use crate::codec::Vocab;
        use crate::model::{ModelConfig, ModelParams};
        use crate::synth::{generate, DialogueProfile};

        fn setup() -> (ModelConfig, Vec<DualTokenStream>, SwapEvalOptions) {
            let config = ModelConfig {
                d_model: 32,
                n_layers: 1,
                n_heads: 2,
                vocab: Vocab::new(8),
                depth: 1,
                max_steps: 40,
                rope_base: 10000.0,
                seed: 23,
            };
            let profile = DialogueProfile {
                vocab: config.vocab,
                mean_ipu_frames: 10.0,
                mean_pause_frames: 8.0,
                mean_gap_frames: 8.0,
                ..DialogueProfile::default()
            };
            let corpus: Vec<DualTokenStream> = generate(&profile, 30, 3)
                .unwrap()
                .0
                .into_iter()
                .map(|g| g.stream)
                .collect();
            let opts = SwapEvalOptions {
                prompt_steps: 10,
                new_steps: 25,
                temperature: 0.8,
                ..SwapEvalOptions::default()
            };
            (config, corpus, opts)
        }

        #[test]
        fn tied_channel_rows_give_exactly_zero_robustness() {
            let (config, corpus, opts) = setup();
            let params = ModelParams::init(config).unwrap().with_tied_channel_rows();
            let out = swap_eval(&params, &corpus, &opts).unwrap();
            assert_eq!(out.original, out.swapped);
            assert_eq!(out.robustness.abs, [0.0; 8]);
            assert_eq!(out.max_robustness(), 0.0);
        }

        #[test]
        fn untied_channel_rows_give_finite_robustness() {
            let (config, corpus, opts) = setup();
            let params = ModelParams::init(config).unwrap();
            let out = swap_eval(&params, &corpus, &opts).unwrap();
            assert!(out.robustness.abs.iter().all(|v| v.is_finite()));
            assert!(out.delta_original.abs.iter().all(|v| v.is_finite()));
            assert!(out.delta_swapped.abs.iter().all(|v| v.is_finite()));
            // Deterministic end to end.
            let again = swap_eval(&params, &corpus, &opts).unwrap();
            assert_eq!(out, again);
        }

        #[test]
        fn zero_continuation_is_rejected() {
            let (config, corpus, opts) = setup();
            let params = ModelParams::init(config).unwrap();
            let bad = SwapEvalOptions {
                new_steps: 0,
                ..opts
            };
            assert!(matches!(
                swap_eval(&params, &corpus, &bad),
                Err(AnalyzeError::NoContinuation)
            ));
        }
    }
}
