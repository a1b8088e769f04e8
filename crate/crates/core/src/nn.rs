//! Graph-building blocks shared by the encoders, projectors and the LM:
//! linear layers (with optional low-rank adapters), layer norm, multi-head
//! attention and transformer blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::params::{init_uniform, ParamStore};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// Per-item dropout source for LoRA A-path inputs. Training only.
pub struct DropoutCtx {
    rng: ChaCha8Rng,
    pub p: f64,
}

impl DropoutCtx {
    pub fn new(seed: u64, p: f64) -> Self {
        DropoutCtx {
            rng: ChaCha8Rng::seed_from_u64(seed),
            p,
        }
    }

    /// Inverted-dropout mask: kept entries are scaled by 1/(1−p).
    pub fn mask(&mut self, rows: usize, cols: usize) -> Matrix {
        let keep = 1.0 - self.p;
        Matrix::from_fn(rows, cols, |_, _| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

/// Adapter scale and dropout for LoRA-bearing linear layers.
pub struct LoraCtx {
    pub scale: f64,
    pub dropout: Option<DropoutCtx>,
}

pub fn add_linear_params(store: &mut ParamStore, seed: u64, name: &str, d_out: usize, d_in: usize) {
    store.insert(
        format!("{name}.w"),
        init_uniform(seed, &format!("{name}.w"), d_out, d_in, d_in),
    );
    store.insert(
        format!("{name}.b"),
        init_uniform(seed, &format!("{name}.b"), 1, d_out, d_in),
    );
}

pub fn add_layer_norm_params(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Matrix::from_fn(1, dim, |_, _| 1.0));
    store.insert(format!("{name}.b"), Matrix::zeros(1, dim));
}

/// y = x·Wᵀ + b for the stored layer `name`.
pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> NodeId {
    let wn = format!("{name}.w");
    let bn = format!("{name}.b");
    let w = g.param(&wn, store.get(&wn), store.is_trainable(&wn));
    let b = g.param(&bn, store.get(&bn), store.is_trainable(&bn));
    let h = g.matmul_nt(x, w);
    g.add_row(h, b)
}

/// Linear layer that also applies a low-rank adapter when the store holds
/// `lora.{name}.a` / `lora.{name}.b`: y = xWᵀ + b + scale·(drop(x)·Aᵀ)·Bᵀ.
pub fn linear_lora(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
    lora: &mut Option<LoraCtx>,
) -> NodeId {
    let base = linear(g, store, name, x);
    let an = format!("lora.{name}.a");
    let bn = format!("lora.{name}.b");
    if !store.contains(&an) {
        return base;
    }
    let ctx = lora
        .as_mut()
        .expect("adapter params present but no LoraCtx supplied");
    let a = g.param(&an, store.get(&an), store.is_trainable(&an));
    let b = g.param(&bn, store.get(&bn), store.is_trainable(&bn));
    let a_in = match ctx.dropout.as_mut() {
        Some(d) if d.p > 0.0 => {
            let (r, c) = g.value(x).shape();
            let mask = g.constant(d.mask(r, c));
            g.hadamard(x, mask)
        }
        _ => x,
    };
    let low = g.matmul_nt(a_in, a);
    let up = g.matmul_nt(low, b);
    let delta = g.scale(up, ctx.scale);
    g.add(base, delta)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: NodeId) -> NodeId {
    let gn = format!("{name}.g");
    let bn = format!("{name}.b");
    let gamma = g.param(&gn, store.get(&gn), store.is_trainable(&gn));
    let beta = g.param(&bn, store.get(&bn), store.is_trainable(&bn));
    g.layer_norm(x, gamma, beta, LN_EPS)
}

pub fn causal_mask(rows: usize) -> Matrix {
    Matrix::from_fn(rows, rows, |i, j| if j <= i { 0.0 } else { -1e30 })
}

/// Multi-head scaled dot-product attention. `q_in` is M×Eq, `kv_in` is
/// T×Ekv; q/k/v project into `attn_dim` split over `heads`, the output
/// projection maps back to Eq. Pass a mask of shape M×T or `None`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
    mask: Option<&Matrix>,
    lora: &mut Option<LoraCtx>,
) -> NodeId {
    let q = linear_lora(g, store, &format!("{name}.q"), q_in, lora);
    let k = linear_lora(g, store, &format!("{name}.k"), kv_in, lora);
    let v = linear_lora(g, store, &format!("{name}.v"), kv_in, lora);
    let attn_dim = g.value(q).cols();
    assert_eq!(attn_dim % heads, 0, "attention width not divisible by heads");
    let dh = attn_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mask_node = mask.map(|m| g.constant(m.clone()));

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, c0, c1);
        let kh = g.slice_cols(k, c0, c1);
        let vh = g.slice_cols(v, c0, c1);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, scale);
        let scores = match mask_node {
            Some(m) => g.add(scores, m),
            None => scores,
        };
        let weights = g.softmax_rows(scores);
        head_outs.push(g.matmul(weights, vh));
    }
    let cat = g.concat_cols(&head_outs);
    linear_lora(g, store, &format!("{name}.o"), cat, lora)
}

pub fn add_attention_params(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    q_dim: usize,
    kv_dim: usize,
    attn_dim: usize,
) {
    add_linear_params(store, seed, &format!("{name}.q"), attn_dim, q_dim);
    add_linear_params(store, seed, &format!("{name}.k"), attn_dim, kv_dim);
    add_linear_params(store, seed, &format!("{name}.v"), attn_dim, kv_dim);
    add_linear_params(store, seed, &format!("{name}.o"), q_dim, attn_dim);
}

pub fn add_ff_params(store: &mut ParamStore, seed: u64, name: &str, dim: usize, hidden: usize) {
    add_linear_params(store, seed, &format!("{name}.l1"), hidden, dim);
    add_linear_params(store, seed, &format!("{name}.l2"), dim, hidden);
}

/// Pre-norm residual feed-forward: x + W2·relu(W1·ln(x)).
pub fn feed_forward_block(
    g: &mut Graph,
    store: &ParamStore,
    ln_name: &str,
    ff_name: &str,
    x: NodeId,
) -> NodeId {
    let h = layer_norm(g, store, ln_name, x);
    let h = linear(g, store, &format!("{ff_name}.l1"), h);
    let h = g.relu(h);
    let h = linear(g, store, &format!("{ff_name}.l2"), h);
    g.add(x, h)
}

/// Pre-norm residual self-attention followed by feed-forward.
pub fn transformer_block(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: NodeId,
    heads: usize,
    mask: Option<&Matrix>,
    lora: &mut Option<LoraCtx>,
) -> NodeId {
    let h = layer_norm(g, store, &format!("{name}.ln1"), x);
    let attn = multi_head_attention(g, store, &format!("{name}.attn"), h, h, heads, mask, lora);
    let x = g.add(x, attn);
    feed_forward_block(g, store, &format!("{name}.ln2"), &format!("{name}.ff"), x)
}

pub fn add_transformer_block_params(
    store: &mut ParamStore,
    seed: u64,
    name: &str,
    dim: usize,
    ff_hidden: usize,
) {
    add_layer_norm_params(store, &format!("{name}.ln1"), dim);
    add_attention_params(store, seed, &format!("{name}.attn"), dim, dim, dim);
    add_layer_norm_params(store, &format!("{name}.ln2"), dim);
    add_ff_params(store, seed, &format!("{name}.ff"), dim, ff_hidden);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store() -> ParamStore {
        let mut s = ParamStore::new();
        add_transformer_block_params(&mut s, 3, "blk", 8, 16);
        s
    }

    #[test]
    fn attention_output_shape_matches_query_rows() {
        let store = toy_store();
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_fn(5, 8, |r, c| ((r * 8 + c) as f64).sin()));
        let y = transformer_block(&mut g, &store, "blk", x, 2, None, &mut None);
        assert_eq!(g.value(y).shape(), (5, 8));
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let store = toy_store();
        let base = Matrix::from_fn(4, 8, |r, c| ((r * 3 + c) as f64 * 0.37).cos());
        let mask = causal_mask(4);

        let run = |input: &Matrix| -> Matrix {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let y = transformer_block(&mut g, &store, "blk", x, 2, Some(&mask), &mut None);
            g.value(y).clone()
        };

        let out_a = run(&base);
        // Perturb the last row only; earlier outputs must be untouched.
        let mut perturbed = base.clone();
        perturbed.set(3, 0, 9.0);
        let out_b = run(&perturbed);
        for r in 0..3 {
            for c in 0..8 {
                assert_eq!(out_a.get(r, c), out_b.get(r, c));
            }
        }
        assert!(out_a.slice_rows(3, 4).max_abs_diff(&out_b.slice_rows(3, 4)) > 0.0);
    }

    #[test]
    fn dropout_mask_is_inverted_and_seeded() {
        let mut d1 = DropoutCtx::new(5, 0.5);
        let mut d2 = DropoutCtx::new(5, 0.5);
        let m1 = d1.mask(10, 10);
        let m2 = d2.mask(10, 10);
        assert_eq!(m1, m2);
        for &v in m1.data() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-12);
        }
    }
}
