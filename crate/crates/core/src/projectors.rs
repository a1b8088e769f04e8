//! Projectors bridging encoder output into the LM embedding space.
//!
//! Two families: the variable-length linear projector (concatenate k
//! consecutive frames, two ReLU-joined affine maps, output rate = input
//! rate / k) and the fixed-length query projector (Q learned queries
//! cross-attending over all input frames, always Q outputs).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::features::{EmbedSeq, FeatureSeq};
use crate::nn;
use crate::params::{init_uniform, ParamStore};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LinearProjectorCfg {
    pub downsample_factor: usize,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct QFormerCfg {
    pub query_count: usize,
    pub kv_dim: usize,
    pub out_dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

pub fn add_linear_projector_params(
    store: &mut ParamStore,
    seed: u64,
    prefix: &str,
    cfg: &LinearProjectorCfg,
) {
    let cat = cfg.downsample_factor * cfg.in_dim;
    nn::add_linear_params(store, seed, &format!("{prefix}.l1"), cfg.hidden_dim, cat);
    nn::add_linear_params(store, seed, &format!("{prefix}.l2"), cfg.out_dim, cfg.hidden_dim);
}

pub fn add_qformer_params(store: &mut ParamStore, seed: u64, prefix: &str, cfg: &QFormerCfg) {
    let qn = format!("{prefix}.query");
    store.insert(
        qn.clone(),
        init_uniform(seed, &qn, cfg.query_count, cfg.out_dim, cfg.out_dim),
    );
    for i in 0..cfg.blocks {
        let b = format!("{prefix}.block{i}");
        nn::add_layer_norm_params(store, &format!("{b}.ln1"), cfg.out_dim);
        nn::add_attention_params(
            store,
            seed,
            &format!("{b}.cross"),
            cfg.out_dim,
            cfg.kv_dim,
            cfg.out_dim,
        );
        nn::add_layer_norm_params(store, &format!("{b}.ln2"), cfg.out_dim);
        nn::add_ff_params(store, seed, &format!("{b}.ff"), cfg.out_dim, 4 * cfg.out_dim);
    }
}

/// floor(T/k) outputs; output frame t sees exactly input frames
/// [t·k, t·k+k). Trailing T mod k frames are dropped.
pub fn project_linear_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &LinearProjectorCfg,
    x: NodeId,
) -> Result<NodeId> {
    let (t, width) = g.value(x).shape();
    if width != cfg.in_dim {
        return Err(Error::DimensionMismatch {
            context: "linear projector input width".into(),
            left: width,
            right: cfg.in_dim,
        });
    }
    let k = cfg.downsample_factor;
    if t < k {
        return Err(Error::TooShort { len: t, need: k });
    }
    let t_out = t / k;
    let kept = g.slice_rows(x, 0, t_out * k);
    // Row-major reinterpretation: k consecutive H-rows become one k·H row.
    let windows = g.reshape(kept, t_out, k * cfg.in_dim);
    let h = nn::linear(g, store, &format!("{prefix}.l1"), windows);
    let h = g.relu(h);
    Ok(nn::linear(g, store, &format!("{prefix}.l2"), h))
}

/// Exactly Q outputs for any T ≥ 1; every output attends over all frames.
pub fn project_qformer_graph(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &QFormerCfg,
    x: NodeId,
) -> Result<NodeId> {
    let (t, width) = g.value(x).shape();
    if width != cfg.kv_dim {
        return Err(Error::DimensionMismatch {
            context: "qformer input width".into(),
            left: width,
            right: cfg.kv_dim,
        });
    }
    if t == 0 {
        return Err(Error::EmptyFeature("qformer input".into()));
    }
    let qn = format!("{prefix}.query");
    let mut q = g.param(&qn, store.get(&qn), store.is_trainable(&qn));
    for i in 0..cfg.blocks {
        let b = format!("{prefix}.block{i}");
        let h = nn::layer_norm(g, store, &format!("{b}.ln1"), q);
        let attn = nn::multi_head_attention(
            g,
            store,
            &format!("{b}.cross"),
            h,
            x,
            cfg.heads,
            None,
            &mut None,
        );
        q = g.add(q, attn);
        q = nn::feed_forward_block(g, store, &format!("{b}.ln2"), &format!("{b}.ff"), q);
    }
    Ok(q)
}

pub fn project_linear(
    store: &ParamStore,
    prefix: &str,
    cfg: &LinearProjectorCfg,
    f: &FeatureSeq,
) -> Result<EmbedSeq> {
    let mut g = Graph::new();
    let x = g.constant(f.frames.clone());
    let y = project_linear_graph(&mut g, store, prefix, cfg, x)?;
    Ok(EmbedSeq {
        embeds: g.value(y).clone(),
        frame_rate_hz: Some(f.frame_rate_hz / cfg.downsample_factor as f64),
    })
}

pub fn project_qformer(
    store: &ParamStore,
    prefix: &str,
    cfg: &QFormerCfg,
    f: &FeatureSeq,
) -> Result<EmbedSeq> {
    let mut g = Graph::new();
    let x = g.constant(f.frames.clone());
    let y = project_qformer_graph(&mut g, store, prefix, cfg, x)?;
    Ok(EmbedSeq {
        embeds: g.value(y).clone(),
        frame_rate_hz: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(seed: u64, t: usize, d: usize) -> FeatureSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSeq::new(Matrix::from_fn(t, d, |_, _| rng.gen_range(-1.0..1.0)), 50.0)
    }

    fn lin_cfg(k: usize) -> LinearProjectorCfg {
        LinearProjectorCfg {
            downsample_factor: k,
            in_dim: 8,
            hidden_dim: 10,
            out_dim: 12,
        }
    }

    #[test]
    fn fifty_hz_with_k5_becomes_ten_hz() {
        let cfg = lin_cfg(5);
        let mut store = ParamStore::new();
        add_linear_projector_params(&mut store, 3, "projector", &cfg);
        let out = project_linear(&store, "projector", &cfg, &feats(1, 500, 8)).unwrap();
        assert_eq!(out.len(), 100);
        assert_eq!(out.embeds.cols(), 12);
        assert_eq!(out.frame_rate_hz, Some(10.0));
    }

    #[test]
    fn k100_gives_half_hz_music_rate() {
        let cfg = lin_cfg(100);
        let mut store = ParamStore::new();
        add_linear_projector_params(&mut store, 3, "projector", &cfg);
        let out = project_linear(&store, "projector", &cfg, &feats(2, 500, 8)).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out.frame_rate_hz, Some(0.5));
    }

    #[test]
    fn trailing_frames_are_dropped() {
        let cfg = lin_cfg(5);
        let mut store = ParamStore::new();
        add_linear_projector_params(&mut store, 3, "projector", &cfg);
        let full = project_linear(&store, "projector", &cfg, &feats(7, 503, 8)).unwrap();
        assert_eq!(full.len(), 100);
        // The first 500 frames alone give the identical embeddings.
        let f = feats(7, 503, 8);
        let head = FeatureSeq::new(f.frames.slice_rows(0, 500), 50.0);
        let trimmed = project_linear(&store, "projector", &cfg, &head).unwrap();
        assert_eq!(full.embeds, trimmed.embeds);
    }

    #[test]
    fn too_short_input_errors_with_both_numbers() {
        let cfg = lin_cfg(5);
        let mut store = ParamStore::new();
        add_linear_projector_params(&mut store, 3, "projector", &cfg);
        let err = project_linear(&store, "projector", &cfg, &feats(1, 3, 8)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn linear_projection_is_local_to_its_window() {
        let cfg = lin_cfg(4);
        let mut store = ParamStore::new();
        add_linear_projector_params(&mut store, 5, "projector", &cfg);
        let base = feats(11, 32, 8);
        let a = project_linear(&store, "projector", &cfg, &base).unwrap();
        // Perturb input frame 9 → only output row 2 may change.
        let mut frames = base.frames.clone();
        frames.set(9, 3, frames.get(9, 3) + 1.0);
        let b = project_linear(
            &store,
            "projector",
            &cfg,
            &FeatureSeq::new(frames, 50.0),
        )
        .unwrap();
        for r in 0..a.len() {
            let diff = a
                .embeds
                .slice_rows(r, r + 1)
                .max_abs_diff(&b.embeds.slice_rows(r, r + 1));
            if r == 9 / 4 {
                assert!(diff > 0.0);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }

    fn qf_cfg() -> QFormerCfg {
        QFormerCfg {
            query_count: 6,
            kv_dim: 8,
            out_dim: 12,
            blocks: 2,
            heads: 2,
        }
    }

    #[test]
    fn qformer_emits_exactly_q_outputs() {
        let cfg = qf_cfg();
        let mut store = ParamStore::new();
        add_qformer_params(&mut store, 4, "projector", &cfg);
        for t in [1usize, 17, 500] {
            let out = project_qformer(&store, "projector", &cfg, &feats(t as u64, t, 8)).unwrap();
            assert_eq!(out.len(), 6);
            assert_eq!(out.embeds.cols(), 12);
            assert_eq!(out.frame_rate_hz, None);
        }
    }

    #[test]
    fn qformer_is_sensitive_to_any_single_frame() {
        let cfg = qf_cfg();
        let mut store = ParamStore::new();
        add_qformer_params(&mut store, 4, "projector", &cfg);
        let base = feats(21, 40, 8);
        let a = project_qformer(&store, "projector", &cfg, &base).unwrap();
        let mut frames = base.frames.clone();
        frames.set(17, 2, frames.get(17, 2) + 0.5);
        let b = project_qformer(
            &store,
            "projector",
            &cfg,
            &FeatureSeq::new(frames, 50.0),
        )
        .unwrap();
        assert!(a.embeds.max_abs_diff(&b.embeds) > 1e-9);
    }

    #[test]
    fn qformer_rejects_empty_input() {
        let cfg = qf_cfg();
        let mut store = ParamStore::new();
        add_qformer_params(&mut store, 4, "projector", &cfg);
        let empty = FeatureSeq::new(Matrix::zeros(0, 8), 50.0);
        assert!(project_qformer(&store, "projector", &cfg, &empty).is_err());
    }
}
