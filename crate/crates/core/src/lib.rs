//! Desk-scale laboratory for prefill reduction in decoder-only transformers.
//!
//! The crate contains a small GQA transformer ([`model`]), the rewiring that
//! lets prompt tokens skip the later layers by projecting their KV caches from
//! one earlier layer ([`swiftkv`]), grouped cross-layer cache sharing and FP8
//! cache storage ([`kvcache`]), a partial-parameter distillation trainer with a
//! small reverse-mode tape ([`distill`]), analytic FLOPs accounting and hidden
//! state similarity ([`analysis`]), and a chunked-prefill serving simulator
//! ([`servesim`]).

// `!(x > 0.0)` is used on purpose throughout validation: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod servesim;
pub mod swiftkv;

pub use error::{Error, Result};
pub use kvcache::{AccountingMode, CacheConfig, KvCache, Quantization};
pub use model::{HiddenTrace, ModelConfig, Parameters};
pub use numerics::{Matrix, Precision};
pub use swiftkv::{GroupMap, StudentParameters, SwiftKvConfig};
