//! Contrastive audio–text dual encoder, the in-memory caption datastore
//! with exact retrieval, and projection of audio embeddings onto the text
//! embedding support.
//!
//! The audio branch is a sequence encoder over log-mel frames; the text
//! branch embeds characters, runs bidirectional blocks, mean-pools and
//! projects. Both emit unit vectors; a learnable temperature scales the
//! similarity logits for the symmetric InfoNCE objective.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assets::{AssetBundle, AssetEntry};
use crate::autograd::{Graph, NodeId};
use crate::encoders::{self, FrameEncoderCfg, SequenceEncoderCfg};
use crate::error::{Error, Result};
use crate::features::FeatureSeq;
use crate::nn;
use crate::params::{init_uniform, rng_for, ParamStore};
use crate::synth_corpus::{log_mel, Waveform, DEFAULT_HOP, DEFAULT_N_MELS, DEFAULT_WIN};
use crate::tensor::{self, Matrix};
use crate::vocab::Tokenizer;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AlignerCfg {
    pub embed_dim: usize,
    pub audio: SequenceEncoderCfg,
    pub text_hidden: usize,
    pub text_blocks: usize,
    pub text_heads: usize,
}

impl Default for AlignerCfg {
    fn default() -> Self {
        AlignerCfg {
            embed_dim: 32,
            audio: SequenceEncoderCfg {
                frame: FrameEncoderCfg {
                    in_dim: DEFAULT_N_MELS,
                    hidden: 48,
                    blocks: 1,
                    heads: 4,
                },
                out_dim: 32,
            },
            text_hidden: 48,
            text_blocks: 1,
            text_heads: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cfg: AlignerCfg,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
}

impl DualEncoder {
    pub fn new(cfg: AlignerCfg, seed: u64) -> Self {
        let tokenizer = Tokenizer::tone_char_v1();
        let mut store = ParamStore::new();
        encoders::add_sequence_encoder_params(&mut store, seed, "audio", &cfg.audio);
        store.insert(
            "text.embed",
            init_uniform(seed, "text.embed", tokenizer.vocab_size(), cfg.text_hidden, cfg.text_hidden),
        );
        for i in 0..cfg.text_blocks {
            nn::add_transformer_block_params(
                &mut store,
                seed,
                &format!("text.block{i}"),
                cfg.text_hidden,
                4 * cfg.text_hidden,
            );
        }
        nn::add_layer_norm_params(&mut store, "text.ln_out", cfg.text_hidden);
        nn::add_linear_params(&mut store, seed, "text.out_proj", cfg.embed_dim, cfg.text_hidden);
        // Learnable temperature, stored as a log scale.
        store.insert("temp", Matrix::scalar((1.0f64 / 0.07).ln()));
        DualEncoder {
            cfg,
            store,
            tokenizer,
        }
    }

    pub fn config_digest(&self) -> String {
        let canon = serde_json::to_string(&serde_json::to_value(&self.cfg).unwrap()).unwrap();
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn audio_graph(&self, g: &mut Graph, feats: &FeatureSeq) -> Result<NodeId> {
        let x = g.constant(feats.frames.clone());
        let e = encoders::encode_sequence_graph(g, &self.store, "audio", &self.cfg.audio, x)?;
        Ok(g.l2_normalize_rows(e))
    }

    fn text_graph(&self, g: &mut Graph, text: &str) -> Result<NodeId> {
        let ids = self.tokenizer.tokenize(text)?;
        if ids.is_empty() {
            return Err(Error::Vocab("empty text".into()));
        }
        let table = g.param(
            "text.embed",
            self.store.get("text.embed"),
            self.store.is_trainable("text.embed"),
        );
        let emb = g.embed_gather(table, &ids);
        let pos = g.constant(tensor::sinusoid_positions(ids.len(), self.cfg.text_hidden));
        let mut h = g.add(emb, pos);
        for i in 0..self.cfg.text_blocks {
            h = nn::transformer_block(
                g,
                &self.store,
                &format!("text.block{i}"),
                h,
                self.cfg.text_heads,
                None,
                &mut None,
            );
        }
        let h = nn::layer_norm(g, &self.store, "text.ln_out", h);
        let pooled = g.mean_pool_rows(h);
        let e = nn::linear(g, &self.store, "text.out_proj", pooled);
        Ok(g.l2_normalize_rows(e))
    }

    pub fn embed_audio_feats(&self, feats: &FeatureSeq) -> Result<Matrix> {
        let mut g = Graph::new();
        let e = self.audio_graph(&mut g, feats)?;
        Ok(g.value(e).clone())
    }

    pub fn embed_audio(&self, w: &Waveform) -> Result<Matrix> {
        let feats = log_mel(w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN)?;
        self.embed_audio_feats(&feats)
    }

    pub fn embed_text(&self, text: &str) -> Result<Matrix> {
        let mut g = Graph::new();
        let e = self.text_graph(&mut g, text)?;
        Ok(g.value(e).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self
            .store
            .iter()
            .map(|(name, m)| AssetEntry {
                name: name.to_string(),
                shape: m.shape(),
                values: m.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let bundle = AssetBundle {
            manifest_digest: self.config_digest(),
            seed: 0,
            vocab: self.tokenizer.table(),
            entries,
        };
        bundle.write(path)
    }

    pub fn load(cfg: AlignerCfg, path: &Path) -> Result<Self> {
        let bundle = AssetBundle::read(path)?;
        let mut de = DualEncoder::new(cfg, 0);
        if bundle.manifest_digest != de.config_digest() {
            return Err(Error::DigestMismatch {
                model: de.config_digest(),
                bundle: bundle.manifest_digest,
            });
        }
        for name in de.store.names().map(str::to_string).collect::<Vec<_>>() {
            let e = bundle
                .entry(&name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            let values: Vec<f64> = e.values.iter().map(|&v| v as f64).collect();
            de.store
                .set(&name, Matrix::from_vec(e.shape.0, e.shape.1, values));
        }
        Ok(de)
    }
}

/// Cosine similarity of two unit vectors.
pub fn similarity(u: &Matrix, v: &Matrix) -> f64 {
    assert_eq!(u.shape(), v.shape(), "similarity shape");
    tensor::dot(u.row(0), v.row(0))
}

/// Symmetric InfoNCE over in-batch negatives. Needs at least two pairs.
pub fn train_aligner(
    pairs: &[(Waveform, String)],
    steps: usize,
    seed: u64,
    batch_size: usize,
    lr: f64,
) -> Result<DualEncoder> {
    train_aligner_with(DualEncoder::new(AlignerCfg::default(), seed), pairs, steps, seed, batch_size, lr)
}

pub fn train_aligner_with(
    mut de: DualEncoder,
    pairs: &[(Waveform, String)],
    steps: usize,
    seed: u64,
    batch_size: usize,
    lr: f64,
) -> Result<DualEncoder> {
    if pairs.len() < 2 {
        return Err(Error::Contract(
            "contrastive training needs at least two pairs".into(),
        ));
    }
    let batch_size = batch_size.max(2).min(pairs.len());
    de.store.mark_trainable_all();

    let feats: Vec<FeatureSeq> = pairs
        .iter()
        .map(|(w, _)| log_mel(w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = crate::trainer::Adam::new(lr);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = rng_for(seed, "aligner-shuffle");
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    for _step in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut g = Graph::new();
        let mut audio_rows = Vec::with_capacity(batch.len());
        let mut text_rows = Vec::with_capacity(batch.len());
        for &i in &batch {
            audio_rows.push(de.audio_graph(&mut g, &feats[i])?);
            text_rows.push(de.text_graph(&mut g, &pairs[i].1)?);
        }
        let a = g.concat_rows(&audio_rows);
        let t = g.concat_rows(&text_rows);
        let sims = g.matmul_nt(a, t);
        let temp = g.param("temp", de.store.get("temp"), de.store.is_trainable("temp"));
        let scale = g.exp(temp);
        let logits = g.mul_scalar(sims, scale);
        let targets: Vec<Option<usize>> = (0..batch.len()).map(Some).collect();
        let l_a2t = g.masked_cross_entropy(logits, &targets);
        let logits_t = g.transpose(logits);
        let l_t2a = g.masked_cross_entropy(logits_t, &targets);
        let sum = g.add(l_a2t, l_t2a);
        let loss = g.scale(sum, 0.5);
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFiniteLoss { step: _step });
        }
        let grads = g.backward(loss);
        adam.step(&mut de.store, &grads);
    }
    Ok(de)
}

// --- datastore ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Datastore {
    pub captions: Vec<String>,
    /// One unit-norm text embedding row per caption.
    pub embeddings: Matrix,
}

pub fn build_datastore(de: &DualEncoder, captions: &[String]) -> Result<Datastore> {
    let mut embeddings = Matrix::zeros(0, de.cfg.embed_dim);
    for c in captions {
        let e = de.embed_text(c)?;
        embeddings.push_row(e.row(0));
    }
    Ok(Datastore {
        captions: captions.to_vec(),
        embeddings,
    })
}

impl Datastore {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let captions_json = serde_json::to_string_pretty(&self.captions)
            .expect("captions serialize");
        let jpath = dir.join("datastore.json");
        std::fs::write(&jpath, &captions_json)
            .map_err(|e| Error::io(jpath.display().to_string(), e))?;
        let mut h = Sha256::new();
        h.update(captions_json.as_bytes());
        let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let bundle = AssetBundle {
            manifest_digest: digest,
            seed: 0,
            vocab: Vec::new(),
            entries: vec![AssetEntry {
                name: "datastore.embeddings".into(),
                shape: self.embeddings.shape(),
                values: self.embeddings.data().iter().map(|&v| v as f32).collect(),
            }],
        };
        bundle.write(&dir.join("datastore.slma"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let jpath = dir.join("datastore.json");
        let captions_json = std::fs::read_to_string(&jpath)
            .map_err(|e| Error::io(jpath.display().to_string(), e))?;
        let captions: Vec<String> = serde_json::from_str(&captions_json)
            .map_err(|e| Error::BadAssetFile(format!("datastore.json: {e}")))?;
        let bundle = AssetBundle::read(&dir.join("datastore.slma"))?;
        let mut h = Sha256::new();
        h.update(captions_json.as_bytes());
        let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        if bundle.manifest_digest != digest {
            return Err(Error::DigestMismatch {
                model: digest,
                bundle: bundle.manifest_digest,
            });
        }
        let e = bundle
            .entry("datastore.embeddings")
            .ok_or_else(|| Error::MissingParameter("datastore.embeddings".into()))?;
        if e.shape.0 != captions.len() {
            return Err(Error::BadAssetFile(
                "datastore embedding rows do not match caption count".into(),
            ));
        }
        Ok(Datastore {
            captions,
            embeddings: Matrix::from_vec(
                e.shape.0,
                e.shape.1,
                e.values.iter().map(|&v| v as f64).collect(),
            ),
        })
    }
}

/// Top-k captions by cosine, ties broken by insertion order.
pub fn retrieve<'a>(ds: &'a Datastore, query: &Matrix, k: usize) -> Result<Vec<(usize, &'a str, f64)>> {
    if k > ds.len() {
        return Err(Error::RetrievalBounds { k, size: ds.len() });
    }
    let mut scored: Vec<(usize, f64)> = (0..ds.len())
        .map(|i| (i, tensor::dot(ds.embeddings.row(i), query.row(0))))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(i, s)| (i, ds.captions[i].as_str(), s))
        .collect())
}

/// Softmax-weighted combination of the datastore embeddings:
/// w_i = softmax(sim(query, t_i)/τ), output = normalize(Σ w_i t_i).
pub fn project_to_text_space(query: &Matrix, ds: &Datastore, tau: f64) -> Result<Matrix> {
    if ds.is_empty() {
        return Err(Error::Contract("projection needs a non-empty datastore".into()));
    }
    assert!(tau > 0.0, "temperature must be positive");
    let mut weights: Vec<f64> = (0..ds.len())
        .map(|i| tensor::dot(ds.embeddings.row(i), query.row(0)) / tau)
        .collect();
    tensor::softmax_in_place(&mut weights);
    let mut out = Matrix::zeros(1, ds.embeddings.cols());
    for (i, &w) in weights.iter().enumerate() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(ds.embeddings.row(i).iter()) {
            *o += w * v;
        }
    }
    let norm = tensor::l2_norm(out.row(0));
    for v in out.data_mut() {
        *v /= norm;
    }
    Ok(out)
}
