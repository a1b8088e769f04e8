//! slam-micro: a desk-scale, modular encoder→projector→LM framework for
//! audio-language experiments on synthetic tone-code corpora.

pub mod aligner;
pub mod assembly;
pub mod assets;
pub mod autograd;
pub mod captioner;
pub mod decoding;
pub mod encoders;
pub mod error;
pub mod features;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod projectors;
pub mod recipes;
pub mod synth_corpus;
pub mod tensor;
pub mod trainer;
pub mod vocab;
