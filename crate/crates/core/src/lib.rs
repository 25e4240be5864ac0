//! Multi-angle question answering: slot encodings, angle sampling, metrics,
//! model backends, data preparation and evaluation.

pub mod backend;
pub mod codec;
pub mod error;
pub mod harness;
pub mod ingest;
pub mod metrics;
pub mod par;
pub mod sampler;
pub mod seed;
pub mod slots;

pub use backend::{Backend, DecodeMode, DecodeOptions, GenerationResult, RemoteBackend, ToyBackend, ToyModelParams};
pub use codec::{encode_input, encode_output, parse_output, OrderPolicy, ParsedOutput};
pub use error::{Error, Result};
pub use harness::{eval_all_angles, rank_candidates, AngleReport, MetricConfig, Query, QueryOutcome};
pub use metrics::MetricKind;
pub use par::Execution;
pub use sampler::{enumerate_all_angles, sample_training_pairs, EncodedPair, SamplerConfig};
pub use seed::SeedMixer;
pub use slots::{Angle, AnglePreset, Dataset, Instance, SlotRegistry};
