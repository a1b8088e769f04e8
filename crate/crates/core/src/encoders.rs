//! Toy trainable encoders in the two families the framework composes:
//! frame-wise (length-preserving transformer over feature frames) and
//! sequence-wise (frame encoder, mean pool over time, output projection —
//! a single embedding regardless of input length).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::features::FeatureSeq;
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::{sinusoid_positions, Matrix};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameEncoderCfg {
    pub in_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for FrameEncoderCfg {
    fn default() -> Self {
        FrameEncoderCfg {
            in_dim: 40,
            hidden: 64,
            blocks: 2,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SequenceEncoderCfg {
    pub frame: FrameEncoderCfg,
    pub out_dim: usize,
}

pub fn add_frame_encoder_params(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    cfg: &FrameEncoderCfg,
) {
    nn::add_linear_params(store, seed, &format!("{prefix}.in_proj"), cfg.hidden, cfg.in_dim);
    for i in 0..cfg.blocks {
        nn::add_transformer_block_params(
            store,
            seed,
            &format!("{prefix}.block{i}"),
            cfg.hidden,
            4 * cfg.hidden,
        );
    }
    nn::add_layer_norm_params(store, &format!("{prefix}.ln_out"), cfg.hidden);
}

pub fn add_sequence_encoder_params(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    cfg: &SequenceEncoderCfg,
) {
    add_frame_encoder_params(store, seed, prefix, &cfg.frame);
    nn::add_linear_params(
        store,
        seed,
        &format!("{prefix}.out_proj"),
        cfg.out_dim,
        cfg.frame.hidden,
    );
}

/// T×in_dim → T×hidden at the same frame rate. Positions are added at the
/// input projection; they exist for attention, so a block-free encoder
/// (used to probe permutation invariance) stays position-free.
pub fn encode_frames_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &FrameEncoderCfg,
    x: NodeId,
) -> Result<NodeId> {
    let width = g.value(x).cols();
    if width != cfg.in_dim {
        return Err(Error::DimensionMismatch {
            context: "encoder input width".into(),
            left: width,
            right: cfg.in_dim,
        });
    }
    let t = g.value(x).rows();
    let mut h = nn::linear(g, store, &format!("{prefix}.in_proj"), x);
    if cfg.blocks > 0 {
        let pos = g.constant(sinusoid_positions(t, cfg.hidden));
        h = g.add(h, pos);
    }
    for i in 0..cfg.blocks {
        h = nn::transformer_block(
            g,
            store,
            &format!("{prefix}.block{i}"),
            h,
            cfg.heads,
            None,
            &mut None,
        );
    }
    Ok(nn::layer_norm(g, store, &format!("{prefix}.ln_out"), h))
}

/// Mean-pools the frame encoding and projects to `out_dim`: exactly one
/// output vector for any T ≥ 1.
pub fn encode_sequence_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &SequenceEncoderCfg,
    x: NodeId,
) -> Result<NodeId> {
    if g.value(x).rows() == 0 {
        return Err(Error::EmptyFeature("sequence encoder input".into()));
    }
    let h = encode_frames_graph(g, store, prefix, &cfg.frame, x)?;
    let pooled = g.mean_pool_rows(h);
    Ok(nn::linear(g, store, &format!("{prefix}.out_proj"), pooled))
}

/// Inference wrapper preserving the frame-rate contract.
pub fn encode_frames(
    store: &ParamStore,
    prefix: &str,
    cfg: &FrameEncoderCfg,
    f: &FeatureSeq,
) -> Result<FeatureSeq> {
    let mut g = Graph::new();
    let x = g.constant(f.frames.clone());
    let y = encode_frames_graph(&mut g, store, prefix, cfg, x)?;
    Ok(FeatureSeq::new(g.value(y).clone(), f.frame_rate_hz))
}

pub fn encode_sequence(
    store: &ParamStore,
    prefix: &str,
    cfg: &SequenceEncoderCfg,
    f: &FeatureSeq,
) -> Result<Matrix> {
    let mut g = Graph::new();
    let x = g.constant(f.frames.clone());
    let y = encode_sequence_graph(&mut g, store, prefix, cfg, x)?;
    Ok(g.value(y).clone())
}
