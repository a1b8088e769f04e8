//! Autoregressive decoding: greedy, beam search with EOS set-aside and
//! length-normalized ranking, multi-width candidate pooling with
//! audio-aligned reranking, two-stage transcript/translation parsing, and
//! the zero-shot captioning path (projection decoding plus retrieval).

use serde::{Deserialize, Serialize};

use crate::aligner::{project_to_text_space, retrieve, similarity, Datastore, DualEncoder};
use crate::assembly::AssembledModel;
use crate::captioner::CaptionModel;
use crate::error::{Error, Result};
use crate::features::FeatureSeq;
use crate::lm::{LmCfg, LmSession, LoraConfig};
use crate::params::ParamStore;
use crate::recipes::{PromptFields, PromptTemplates};
use crate::synth_corpus::{log_mel, Waveform, DEFAULT_HOP, DEFAULT_N_MELS, DEFAULT_WIN};
use crate::tensor::Matrix;
use crate::trainer::compute_prefix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of generated-token log-probabilities; always ≤ 0.
    pub logp: f64,
    pub beam_width: usize,
}

impl Hypothesis {
    pub fn score(&self, length_norm: f64) -> f64 {
        let len = self.tokens.len().max(1) as f64;
        self.logp / len.powf(length_norm)
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = crate::tensor::log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    let _ = row[best];
    best
}

/// Greedy decoding over a bare LM: argmax token per step until EOS or the
/// length cap.
#[allow(clippy::too_many_arguments)]
pub fn greedy_lm(
    store: &ParamStore,
    cfg: &LmCfg,
    lora: Option<&LoraConfig>,
    prefix: Option<&Matrix>,
    prompt: &[usize],
    bos: usize,
    eos: usize,
    max_len: usize,
) -> Hypothesis {
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut sess = LmSession::new(store, cfg, lora);
    let mut tokens_in: Vec<usize> = prompt.to_vec();
    tokens_in.push(bos);
    let mut logits = sess.prefill(prefix, &tokens_in);
    let mut tokens = Vec::new();
    let mut logp = 0.0;
    for _ in 0..max_len {
        let lp = log_softmax(&logits);
        let t = argmax(&lp);
        tokens.push(t);
        logp += lp[t];
        if t == eos {
            break;
        }
        logits = sess.feed_token(t);
    }
    Hypothesis {
        tokens,
        logp,
        beam_width: 1,
    }
}

struct Beam<'a> {
    tokens: Vec<usize>,
    logp: f64,
    logits: Vec<f64>,
    session: LmSession<'a>,
}

/// Standard beam search. Completed (EOS) hypotheses are set aside; at the
/// cap the survivors are kept as-is. Results are ranked by
/// logp / len^length_norm with lexicographic token tie-breaks, and at most
/// `width` hypotheses are returned.
#[allow(clippy::too_many_arguments)]
pub fn beam_search_lm(
    store: &ParamStore,
    cfg: &LmCfg,
    lora: Option<&LoraConfig>,
    prefix: Option<&Matrix>,
    prompt: &[usize],
    bos: usize,
    eos: usize,
    width: usize,
    max_len: usize,
    length_norm: f64,
) -> Vec<Hypothesis> {
    assert!(width >= 1, "beam width must be at least 1");
    assert!(max_len >= 1, "max_len must be at least 1");
    let mut root = LmSession::new(store, cfg, lora);
    let mut tokens_in: Vec<usize> = prompt.to_vec();
    tokens_in.push(bos);
    let logits = root.prefill(prefix, &tokens_in);
    let mut alive = vec![Beam {
        tokens: Vec::new(),
        logp: 0.0,
        logits,
        session: root,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        // (beam index, token, total logp, resulting token sequence)
        let mut candidates: Vec<(usize, usize, f64, Vec<usize>)> = Vec::new();
        for (bi, b) in alive.iter().enumerate() {
            let lp = log_softmax(&b.logits);
            for (v, &l) in lp.iter().enumerate() {
                let mut seq = b.tokens.clone();
                seq.push(v);
                candidates.push((bi, v, b.logp + l, seq));
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then_with(|| a.3.cmp(&b.3)));
        candidates.truncate(width);

        let mut next_alive = Vec::new();
        for (bi, v, logp, seq) in candidates {
            if v == eos || step + 1 == max_len {
                finished.push(Hypothesis {
                    tokens: seq,
                    logp,
                    beam_width: width,
                });
            } else {
                let mut session = alive[bi].session.clone();
                let logits = session.feed_token(v);
                next_alive.push(Beam {
                    tokens: seq,
                    logp,
                    logits,
                    session,
                });
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
    }

    finished.sort_by(|a, b| {
        b.score(length_norm)
            .partial_cmp(&a.score(length_norm))
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(width);
    finished
}

pub fn greedy(
    model: &AssembledModel,
    prefix: Option<&Matrix>,
    prompt: &[usize],
    max_len: usize,
) -> Hypothesis {
    greedy_lm(
        &model.store,
        &model.manifest.lm,
        model.lora(),
        prefix,
        prompt,
        model.tokenizer.bos(),
        model.tokenizer.eos(),
        max_len,
    )
}

pub fn beam_search(
    model: &AssembledModel,
    prefix: Option<&Matrix>,
    prompt: &[usize],
    width: usize,
    max_len: usize,
    length_norm: f64,
) -> Vec<Hypothesis> {
    beam_search_lm(
        &model.store,
        &model.manifest.lm,
        model.lora(),
        prefix,
        prompt,
        model.tokenizer.bos(),
        model.tokenizer.eos(),
        width,
        max_len,
        length_norm,
    )
}

pub const DEFAULT_REFINE_WIDTHS: [usize; 4] = [2, 3, 4, 5];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub text: String,
    pub logp: f64,
    pub width: usize,
    pub align_score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RefineResult {
    pub text: String,
    pub candidates: Vec<ScoredCandidate>,
}

/// Beam-per-width candidate pooling with audio-aligned selection: decode
/// the top hypothesis at every width, deduplicate by text, embed the audio
/// once and every candidate text, and return the candidate with the
/// highest similarity (ties go to the larger beam width).
pub fn clap_refine(
    model: &AssembledModel,
    wave: &Waveform,
    prompt: &[usize],
    widths: &[usize],
    aligner: &DualEncoder,
    max_len: usize,
) -> Result<RefineResult> {
    if widths.is_empty() {
        return Err(Error::Contract("clap_refine needs at least one width".into()));
    }
    let feats = log_mel(wave, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN)?;
    let prefix = compute_prefix(model, &feats)?;

    // Pool the top hypothesis per width; keep the larger width on text ties.
    let mut pool: Vec<(String, Hypothesis)> = Vec::new();
    for &w in widths {
        let hyps = beam_search(model, Some(&prefix), prompt, w, max_len, 1.0);
        if let Some(top) = hyps.into_iter().next() {
            let text = model.tokenizer.detokenize(&top.tokens);
            match pool.iter_mut().find(|(t, _)| *t == text) {
                Some((_, existing)) => {
                    if top.beam_width > existing.beam_width {
                        *existing = top;
                    }
                }
                None => pool.push((text, top)),
            }
        }
    }

    let audio_emb = aligner.embed_audio(wave)?;
    let mut candidates = Vec::with_capacity(pool.len());
    for (text, hyp) in &pool {
        let align_score = match aligner.embed_text(text) {
            Ok(e) => similarity(&audio_emb, &e),
            Err(_) => -1.0, // unembeddable (empty) candidates rank last
        };
        candidates.push(ScoredCandidate {
            text: text.clone(),
            logp: hyp.logp,
            width: hyp.beam_width,
            align_score,
        });
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        let b = &candidates[best];
        if c.align_score > b.align_score
            || (c.align_score == b.align_score && c.width > b.width)
        {
            best = i;
        }
    }
    Ok(RefineResult {
        text: candidates[best].text.clone(),
        candidates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrtOutput {
    pub transcript: String,
    pub translation: String,
    pub raw: String,
}

/// Decodes with the target tag as the prompt and splits the emission at
/// the first occurrence of that tag into transcript and translation.
pub fn generate_srt(
    model: &AssembledModel,
    feats: &FeatureSeq,
    target_tag: &str,
    max_len: usize,
) -> Result<SrtOutput> {
    let tag_id = model.tokenizer.tag_id(target_tag)?;
    let prefix = compute_prefix(model, feats)?;
    let hyp = greedy(model, Some(&prefix), &[tag_id], max_len);
    let raw = model.tokenizer.detokenize(&hyp.tokens);
    parse_srt(&raw, target_tag)
}

/// Splits `raw` at the first occurrence of the tag.
pub fn parse_srt(raw: &str, target_tag: &str) -> Result<SrtOutput> {
    match raw.find(target_tag) {
        None => Err(Error::SrtFormat { raw: raw.into() }),
        Some(pos) => Ok(SrtOutput {
            transcript: raw[..pos].trim().to_string(),
            translation: raw[pos + target_tag.len()..].trim().to_string(),
            raw: raw.to_string(),
        }),
    }
}

/// Zero-shot captioning: embed the audio with the aligner's audio branch,
/// project it onto the datastore's text-embedding support, retrieve k
/// similar captions as the prompt, and decode the text-only caption model
/// conditioned on the projected embedding.
pub fn zero_shot_caption(
    wave: &Waveform,
    aligner: &DualEncoder,
    ds: &Datastore,
    caption_lm: &CaptionModel,
    k: usize,
    tau: f64,
) -> Result<String> {
    zero_shot_caption_with(wave, aligner, ds, caption_lm, k, tau, true)
}

/// Same path with projection decoding optionally disabled (ablation).
pub fn zero_shot_caption_with(
    wave: &Waveform,
    aligner: &DualEncoder,
    ds: &Datastore,
    caption_lm: &CaptionModel,
    k: usize,
    tau: f64,
    use_projection: bool,
) -> Result<String> {
    if ds.is_empty() {
        return Err(Error::Contract("zero-shot captioning needs a datastore".into()));
    }
    let e = aligner.embed_audio(wave)?;
    let e_hat = if use_projection {
        project_to_text_space(&e, ds, tau)?
    } else {
        e
    };
    let retrieved = retrieve(ds, &e_hat, k)?;
    let captions: Vec<String> = retrieved.iter().map(|(_, c, _)| c.to_string()).collect();
    let prompt_text = PromptTemplates::builtin().render(
        "caption",
        &PromptFields {
            rag_captions: Some(captions),
            ..Default::default()
        },
    )?;
    let prompt = caption_lm.tokenizer.tokenize(&prompt_text)?;
    Ok(caption_lm.decode_greedy(&e_hat, &prompt, 64))
}
