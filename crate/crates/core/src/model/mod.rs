//! Toy spiking transformer assembled from the crate's layers, plus the
//! training loop.

pub mod attention;
pub mod config;
pub mod data;
pub mod net;
pub mod train;
pub mod verify;

pub use attention::spiking_attention;
pub use config::{parse_kv, RtformerConfig};
pub use data::Dataset;
pub use net::{build, closed_form_trainable, InferOptions, InferenceOutput, NetMode, RtformerNet};
pub use train::{cross_entropy_op, evaluate, train_epoch, EpochMetrics, Sgd, TrainConfig};
pub use verify::{verify_fusion, VerifyOptions, VerifyReport};
