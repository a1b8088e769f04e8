//! Decoder-only toy language model with audio-prefix injection, masked
//! cross-entropy and optional low-rank adapters on the attention
//! projections.
//!
//! Two forward paths exist on purpose: the tape-backed graph forward used
//! for training, and [`LmSession`], an incremental evaluator with per-block
//! key/value caches used by the decoders. Tests pin them against each other.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{self, LoraCtx};
use crate::params::{init_uniform, ParamStore};
use crate::tensor::{self, Matrix};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LmCfg {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Width of an external prefix embedding that must first pass through a
    /// learned input projection (used by the caption model). `None` means
    /// prefixes already arrive at `embed_dim`.
    #[serde(default)]
    pub prefix_in: Option<usize>,
}

impl LmCfg {
    pub fn ff_hidden(&self) -> usize {
        4 * self.embed_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub fn suffix(self) -> &'static str {
        match self {
            LoraTarget::Query => "q",
            LoraTarget::Key => "k",
            LoraTarget::Value => "v",
            LoraTarget::Output => "o",
        }
    }
}

fn default_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Query, LoraTarget::Value]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_targets")]
    pub targets: Vec<LoraTarget>,
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, adapted_dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank > adapted_dim {
            return Err(Error::Contract(format!(
                "LoRA rank {} must be in 1..={adapted_dim}",
                self.rank
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Contract("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract("LoRA dropout must be in [0,1)".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Contract("LoRA targets must be non-empty".into()));
        }
        Ok(())
    }
}

pub fn add_lm_params(store: &mut ParamStore, seed: u64, cfg: &LmCfg) {
    let e = cfg.embed_dim;
    store.insert(
        "lm.embed",
        init_uniform(seed, "lm.embed", cfg.vocab_size, e, e),
    );
    if let Some(p_in) = cfg.prefix_in {
        nn::add_linear_params(store, seed, "lm.prefix_proj", e, p_in);
    }
    for i in 0..cfg.blocks {
        nn::add_transformer_block_params(store, seed, &format!("lm.block{i}"), e, cfg.ff_hidden());
    }
    nn::add_layer_norm_params(store, "lm.ln_out", e);
    nn::add_linear_params(store, seed, "lm.head", cfg.vocab_size, e);
}

/// Attaches zero-initialized adapters to the configured attention
/// projections of every block. B starts at zero so outputs are unchanged.
pub fn attach_lora(store: &mut ParamStore, seed: u64, cfg: &LmCfg, lora: &LoraConfig) -> Result<()> {
    lora.validate(cfg.embed_dim)?;
    let e = cfg.embed_dim;
    for i in 0..cfg.blocks {
        for t in &lora.targets {
            let base = format!("lm.block{i}.attn.{}", t.suffix());
            let an = format!("lora.{base}.a");
            if store.contains(&an) {
                return Err(Error::DoubleAttach(base));
            }
            store.insert(an.clone(), init_uniform(seed, &an, lora.rank, e, e));
            store.insert(format!("lora.{base}.b"), Matrix::zeros(e, lora.rank));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeOutcome {
    Merged { adapters: usize },
    /// Nothing to merge; callers treat this as a warning, not an error.
    NoAdapters,
}

/// Folds every adapter into its base weight (W += scale·B·A) and removes
/// the adapter parameters.
pub fn merge_lora(store: &mut ParamStore, lora: &LoraConfig) -> MergeOutcome {
    let names = store.names_with_prefix("lora.");
    let a_names: Vec<String> = names.iter().filter(|n| n.ends_with(".a")).cloned().collect();
    if a_names.is_empty() {
        return MergeOutcome::NoAdapters;
    }
    let scale = lora.scale();
    for an in &a_names {
        let base = an
            .strip_prefix("lora.")
            .and_then(|s| s.strip_suffix(".a"))
            .expect("lora param naming");
        let bn = format!("lora.{base}.b");
        let a = store.get(an).clone();
        let b = store.get(&bn).clone();
        let delta = b.matmul(&a).scale(scale);
        store.get_mut(&format!("{base}.w")).add_assign(&delta);
        store.remove(an);
        store.remove(&bn);
    }
    MergeOutcome::Merged {
        adapters: a_names.len(),
    }
}

/// Graph forward over `[prefix ∥ embed(tokens)]` with a causal mask.
/// Returns the logits node, shape (P+len(tokens))×V.
pub fn lm_forward_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LmCfg,
    prefix: Option<NodeId>,
    tokens: &[usize],
    lora: &mut Option<LoraCtx>,
) -> NodeId {
    let embed_name = "lm.embed";
    let table = g.param(embed_name, store.get(embed_name), store.is_trainable(embed_name));
    let tok_emb = g.embed_gather(table, tokens);
    let x = match prefix {
        Some(p) => {
            let p = if cfg.prefix_in.is_some() {
                nn::linear(g, store, "lm.prefix_proj", p)
            } else {
                p
            };
            if tokens.is_empty() {
                p
            } else {
                g.concat_rows(&[p, tok_emb])
            }
        }
        None => tok_emb,
    };
    let total = g.value(x).rows();
    let pos = g.constant(tensor::sinusoid_positions(total, cfg.embed_dim));
    let mut h = g.add(x, pos);
    let mask = nn::causal_mask(total);
    for i in 0..cfg.blocks {
        h = nn::transformer_block(
            g,
            store,
            &format!("lm.block{i}"),
            h,
            cfg.heads,
            Some(&mask),
            lora,
        );
    }
    let h = nn::layer_norm(g, store, "lm.ln_out", h);
    nn::linear_lora(g, store, "lm.head", h, &mut None)
}

/// Teacher-forced loss over `[prefix ∥ prompt ∥ BOS target]`. Only the
/// positions that predict a target token or the final EOS are scored.
#[allow(clippy::too_many_arguments)]
pub fn lm_loss_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &LmCfg,
    prefix: Option<NodeId>,
    prompt: &[usize],
    target: &[usize],
    special: (usize, usize), // (bos, eos)
    lora: &mut Option<LoraCtx>,
) -> Result<(NodeId, usize)> {
    if target.is_empty() {
        return Err(Error::Contract("empty target at training time".into()));
    }
    let (bos, eos) = special;
    let p = prefix.map(|n| g.value(n).rows()).unwrap_or(0);
    let m = prompt.len();
    let l = target.len();
    let mut tokens = Vec::with_capacity(m + 1 + l);
    tokens.extend_from_slice(prompt);
    tokens.push(bos);
    tokens.extend_from_slice(target);

    let logits = lm_forward_graph(g, store, cfg, prefix, &tokens, lora);
    let total = p + m + 1 + l;
    let mut targets: Vec<Option<usize>> = vec![None; total];
    for (j, &t) in target.iter().enumerate() {
        targets[p + m + j] = Some(t);
    }
    targets[p + m + l] = Some(eos);
    let loss = g.masked_cross_entropy(logits, &targets);
    Ok((loss, l + 1))
}

// ---------------------------------------------------------------------------
// Incremental evaluation with key/value caches.
// ---------------------------------------------------------------------------

fn linear_row(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(&format!("{name}.w"));
    let b = store.get(&format!("{name}.b"));
    let mut out = Vec::with_capacity(w.rows());
    for r in 0..w.rows() {
        out.push(tensor::dot(w.row(r), x) + b.data()[r]);
    }
    out
}

fn linear_row_lora(store: &ParamStore, name: &str, x: &[f64], scale: f64) -> Vec<f64> {
    let mut out = linear_row(store, name, x);
    let an = format!("lora.{name}.a");
    if let Some(a) = store.try_get(&an) {
        let b = store.get(&format!("lora.{name}.b"));
        let low: Vec<f64> = (0..a.rows()).map(|r| tensor::dot(a.row(r), x)).collect();
        for (o, r) in out.iter_mut().zip(0..b.rows()) {
            *o += scale * tensor::dot(b.row(r), &low);
        }
    }
    out
}

fn layer_norm_row(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let gamma = store.get(&format!("{name}.g"));
    let beta = store.get(&format!("{name}.b"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + nn::LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(c, &v)| (v - mean) * inv * gamma.data()[c] + beta.data()[c])
        .collect()
}

#[derive(Clone)]
struct BlockCache {
    k: Matrix,
    v: Matrix,
}

/// Stateful single-sequence evaluator. Feed embeddings position by
/// position; each call returns the logits row for the next token.
/// Cloning forks the cache state, which is how beams branch.
#[derive(Clone)]
pub struct LmSession<'a> {
    store: &'a ParamStore,
    cfg: &'a LmCfg,
    lora_scale: f64,
    caches: Vec<BlockCache>,
    pos: usize,
}

impl<'a> LmSession<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a LmCfg, lora: Option<&LoraConfig>) -> Self {
        let e = cfg.embed_dim;
        let caches = (0..cfg.blocks)
            .map(|_| BlockCache {
                k: Matrix::zeros(0, e),
                v: Matrix::zeros(0, e),
            })
            .collect();
        LmSession {
            store,
            cfg,
            lora_scale: lora.map(|l| l.scale()).unwrap_or(0.0),
            caches,
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Runs the prefix projection if this model has one.
    pub fn project_prefix_row(&self, raw: &[f64]) -> Vec<f64> {
        if self.cfg.prefix_in.is_some() {
            linear_row(self.store, "lm.prefix_proj", raw)
        } else {
            raw.to_vec()
        }
    }

    pub fn embed_token(&self, id: usize) -> Vec<f64> {
        self.store.get("lm.embed").row(id).to_vec()
    }

    /// Feeds one embedding row (already at `embed_dim`); returns logits.
    pub fn feed_embed(&mut self, embed: &[f64]) -> Vec<f64> {
        assert_eq!(embed.len(), self.cfg.embed_dim, "embed width");
        let e = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = e / heads;
        let pos_row = tensor::sinusoid_positions(self.pos + 1, e);
        let mut x: Vec<f64> = embed
            .iter()
            .zip(pos_row.row(self.pos).iter())
            .map(|(a, b)| a + b)
            .collect();

        for i in 0..self.cfg.blocks {
            let name = format!("lm.block{i}");
            let h = layer_norm_row(self.store, &format!("{name}.ln1"), &x);
            let q = linear_row_lora(self.store, &format!("{name}.attn.q"), &h, self.lora_scale);
            let k = linear_row_lora(self.store, &format!("{name}.attn.k"), &h, self.lora_scale);
            let v = linear_row_lora(self.store, &format!("{name}.attn.v"), &h, self.lora_scale);
            let cache = &mut self.caches[i];
            cache.k.push_row(&k);
            cache.v.push_row(&v);
            let t = cache.k.rows();

            let mut attn_out = vec![0.0; e];
            let scale = 1.0 / (dh as f64).sqrt();
            for hd in 0..heads {
                let (c0, c1) = (hd * dh, (hd + 1) * dh);
                let mut scores = Vec::with_capacity(t);
                for r in 0..t {
                    scores.push(tensor::dot(&q[c0..c1], &cache.k.row(r)[c0..c1]) * scale);
                }
                tensor::softmax_in_place(&mut scores);
                for (r, &w) in scores.iter().enumerate() {
                    let vr = &cache.v.row(r)[c0..c1];
                    for (o, &val) in attn_out[c0..c1].iter_mut().zip(vr.iter()) {
                        *o += w * val;
                    }
                }
            }
            let o = linear_row_lora(self.store, &format!("{name}.attn.o"), &attn_out, self.lora_scale);
            for (xv, ov) in x.iter_mut().zip(o.iter()) {
                *xv += ov;
            }

            let h = layer_norm_row(self.store, &format!("{name}.ln2"), &x);
            let h = linear_row(self.store, &format!("{name}.ff.l1"), &h);
            let h: Vec<f64> = h.iter().map(|v| v.max(0.0)).collect();
            let h = linear_row(self.store, &format!("{name}.ff.l2"), &h);
            for (xv, hv) in x.iter_mut().zip(h.iter()) {
                *xv += hv;
            }
        }
        self.pos += 1;
        let h = layer_norm_row(self.store, "lm.ln_out", &x);
        linear_row(self.store, "lm.head", &h)
    }

    pub fn feed_token(&mut self, id: usize) -> Vec<f64> {
        let e = self.embed_token(id);
        self.feed_embed(&e)
    }

    /// Feeds a prefix matrix (raw width) followed by token ids; returns the
    /// logits row after the last element.
    pub fn prefill(&mut self, prefix: Option<&Matrix>, tokens: &[usize]) -> Vec<f64> {
        let mut last = Vec::new();
        if let Some(p) = prefix {
            for r in 0..p.rows() {
                let row = self.project_prefix_row(p.row(r));
                last = self.feed_embed(&row);
            }
        }
        for &t in tokens {
            last = self.feed_token(t);
        }
        last
    }
}
