//! Next-token-pair prediction over dual-channel spoken-dialogue token
//! streams: a two-speaker decoder-only transformer with a pair-wise causal
//! mask, trained and sampled one time-step pair at a time.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`]: dense `f64` tensors and reverse-mode autodiff.
//! - [`codec`]: dual-channel streams, the interleaved layout, and file I/O.
//! - [`embed`]: token, channel, cyclic-depth, and rotary position encoding.
//! - [`mask`]: the pair-wise causal attention mask and its oracle.
//! - [`model`]: the transformer, training objective, and joint likelihood.
//! - [`train`]: the optimizer loop and checkpoint container.
//! - [`synth`]: synthetic dialogues with known ground-truth events.
//! - [`analyze`]: turn-taking segmentation, reports, and comparisons.
//! - [`stream`]: chunk-wise generation over a single growing KV cache.

pub mod analyze;
pub mod codec;
pub mod embed;
pub mod graph;
pub mod mask;
pub mod model;
pub mod stream;
pub mod synth;
pub mod tensor;
pub mod train;

pub use analyze::{
    delta, read_traces_jsonl, report, segment, segment_activity, swap_eval, threshold_frames,
    write_traces_jsonl, ActivityStream, AnalyzeError, DeltaReport, Event, EventKind, EventReport,
    EventTrace, Scope, SwapEvalOptions, SwapEvalOutcome, DEFAULT_SILENCE_MS, METRIC_NAMES,
};
pub use codec::{
    deinterleave, interleave, position_index, position_meta, read_streams_jsonl,
    write_streams_jsonl, Channel, CodecError, DualTokenStream, InterleavedSequence, PositionMeta,
    TokenId, Vocab, DEFAULT_FRAME_RATE_HZ,
};
pub use graph::{Gradients, Graph, NodeId, Reduction};
pub use mask::{build_mask, visible, AttentionMask, MASKED_LOGIT_BIAS};
pub use model::{
    build_forward, full_logits, joint_logprob, loss, loss_and_grads, model_sequence, target_map,
    Forward, ModelConfig, ModelError, ModelParams,
};
pub use stream::{
    bench_latency, generate_free, ConverseSession, InferenceSession, KvCache, LatencyRow,
    SamplerSeeds, StepLogits, StreamError, WireMessage,
};
pub use synth::{
    generate, generate_one, mix2, rvq_codes, to_rvq, DialogueProfile, GenStats, GeneratedStream,
    SynthError, INTERRUPT_MEAN_FRAMES, OVERLAP_MEAN_FRAMES,
};
pub use tensor::{Tensor, TensorError};
pub use train::{
    load_checkpoint, save_checkpoint, train, train_in_place, CheckpointError, TrainOptions,
    TrainReport,
};
