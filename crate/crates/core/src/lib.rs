//! Linear-network adapters for multi-task BLSTM acoustic models.
//!
//! The crate covers the neural building blocks ([`nn`]), the two adapter
//! parameterizations ([`adapters`]), the multi-task model and its insertion
//! slots ([`model`]), synthetic speaker corpora ([`corpus`]), training and
//! adaptation ([`training`]) and objective measures ([`metrics`]).

pub mod adapters;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod streams;
pub mod training;

pub use adapters::{
    param_count, trainable_count, Adapter, AdapterKind, FullLnAdapter, LrpdAdapter,
};
pub use corpus::{
    compute_norm_stats, load_corpus, make_speaker, save_corpus, synthesize_corpus, Corpus,
    CorpusConfig, NormStats, SpeakerSpec, Split, Utterance,
};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use model::{
    build_model, load_model, save_model, BlockGroup, InsertionPolicy, ModelConfig, MultiTaskModel,
    SlotPosition, TrainMask, TrainMode,
};
pub use nn::{Layer, Matrix};
pub use streams::{HeadDims, Stream, Streams};
pub use training::{adapt, evaluate, train_sd, TrainConfig, TrainRecord};
