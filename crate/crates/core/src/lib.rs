//! Modality-aware KV cache pruning.
//!
//! The crate scores cached keys from an observation window of attention weights, splits each
//! key's score into the part it receives from queries of its own modality (intra) and from the
//! other modality (inter), selects top-k independently on both and keeps the intersection plus a
//! recent window. Simplified baselines, a toy decode simulator and distribution diagnostics sit
//! alongside for comparison.

pub mod cache;
pub mod config;
pub mod decompose;
pub mod diagnostics;
pub mod error;
pub mod matrix;
pub mod modality;
pub mod policies;
pub mod report;
pub mod scoring;
pub mod select;
pub mod simulator;
pub mod svg;
pub mod synth;
pub mod trace;

pub use cache::KvCache;
pub use config::{ConfigError, HeadMode, PruneConfig};
pub use decompose::{block_views, cross_self_importance, BlockViews, ImportanceScores};
pub use diagnostics::{js_divergence, kde, layer_report, Bandwidth, DensityCurve, DiagnosticsConfig, DivergenceReport};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use modality::{Modality, TaggedSequence};
pub use policies::{new_policy, EvictionPolicy, PolicyDecision, PolicyKind};
pub use scoring::{Logits, Weights};
pub use select::{PruneMask, Selection};
pub use simulator::{run_decode, sweep, DecodeSource, ReplaySource, RunReport, RunSettings, SweepAxis, SweepPoint, SynthSource};
pub use synth::{synth_decoder, Interleave, SynthModel, SynthSpec};
pub use trace::{AttentionTrace, TraceError, TraceStep};
