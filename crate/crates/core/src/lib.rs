//! Coupled quantization for key/value activation caches.
//!
//! Contiguous channels of a key or value activation matrix are grouped and
//! quantized jointly against learned multi-channel centroids. The crate
//! covers dependency analysis between channels, centroid learning with
//! uniform or Fisher-weighted k-means, a bit-packed codec with baseline
//! quantizers, and a single-head attention decode simulator for measuring
//! how cache quantization degrades attention outputs.

pub mod actdata;
pub mod attnsim;
pub mod baselines;
pub mod clustering;
pub mod cqcodec;
pub mod error;
pub mod infostats;
pub mod rng;

pub use actdata::{
    kv_cache_bytes, load_activations, save_activations, synth_correlated, synth_gradients,
    ActivationMatrix, GradientSpec, Mixing, ModelDims, SynthSpec,
};
pub use cqcodec::{
    bits_per_fpn, codebook_param_count, dequantize, fisher_weights, learn_codebook,
    quantization_error, quantize, CQConfig, Codebook, Coupling, LearningMode, QuantizedCache,
};
pub use error::{Error, ErrorClass, Result};
