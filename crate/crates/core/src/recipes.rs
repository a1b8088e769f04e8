//! Task recipes: prompt templates with placeholder rendering, biasing-list
//! construction from a frequency-ranked vocabulary, and edit-distance
//! filtering of hotword lists against a first-pass draft transcript.
//!
//! Templates are plain strings keyed by task id and can be overridden from
//! a directory of text files, so recipes are editable without code changes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::rng_for;

pub const DEFAULT_EDIT_RATIO: f64 = 0.34;
pub const DEFAULT_COMMON_TOP_K: usize = 50;
pub const DEFAULT_RAG_K: usize = 3;

const BUILTIN_ASR: &str = "{tag}";
const BUILTIN_SRT: &str = "{target_tag}";
const BUILTIN_CASR: &str = "keywords {keywords}{tag}";
// The 27-symbol vocabulary has no ':' or newline, so retrieved captions are
// marked with a prefix word instead of the usual "similar:" lines.
const BUILTIN_CAPTION: &str = "{rag_captions}describe";

#[derive(Clone, Debug)]
pub struct PromptTemplates {
    map: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default)]
pub struct PromptFields {
    pub tag: Option<String>,
    pub target_tag: Option<String>,
    pub keywords: Option<Vec<String>>,
    pub rag_captions: Option<Vec<String>>,
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        let mut map = BTreeMap::new();
        map.insert("asr".to_string(), BUILTIN_ASR.to_string());
        map.insert("srt".to_string(), BUILTIN_SRT.to_string());
        map.insert("casr".to_string(), BUILTIN_CASR.to_string());
        map.insert("caption".to_string(), BUILTIN_CAPTION.to_string());
        PromptTemplates { map }
    }

    /// Builtin templates overridden by any `<task>.txt` files in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = Self::builtin();
        for task in ["asr", "srt", "casr", "caption"] {
            let path = dir.join(format!("{task}.txt"));
            if path.exists() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| Error::io(path.display().to_string(), e))?;
                t.map.insert(task.to_string(), text.trim_end().to_string());
            }
        }
        Ok(t)
    }

    pub fn render(&self, task: &str, fields: &PromptFields) -> Result<String> {
        let template = self.map.get(task).ok_or_else(|| Error::UnknownComponent {
            field: "task".into(),
            id: task.into(),
            known: self.map.keys().cloned().collect(),
        })?;
        let mut out = template.clone();
        let missing = |field: &str| Error::TemplateField {
            task: task.to_string(),
            field: field.to_string(),
        };
        if out.contains("{tag}") {
            let tag = fields.tag.as_ref().ok_or_else(|| missing("tag"))?;
            out = out.replace("{tag}", tag);
        }
        if out.contains("{target_tag}") {
            let tag = fields
                .target_tag
                .as_ref()
                .ok_or_else(|| missing("target_tag"))?;
            out = out.replace("{target_tag}", tag);
        }
        if out.contains("{keywords}") {
            let kw = fields.keywords.as_ref().ok_or_else(|| missing("keywords"))?;
            // Empty list renders an empty hotword slot (the no-bias prompt).
            let joined = if kw.is_empty() {
                String::new()
            } else {
                format!("{} ", kw.join(" "))
            };
            out = out.replace("{keywords}", &joined);
        }
        if out.contains("{rag_captions}") {
            let caps = fields
                .rag_captions
                .as_ref()
                .ok_or_else(|| missing("rag_captions"))?;
            let mut rendered = String::new();
            for c in caps {
                rendered.push_str("similar ");
                rendered.push_str(c);
                rendered.push(' ');
            }
            out = out.replace("{rag_captions}", &rendered);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BiasingList {
    /// The full shuffled list handed to the prompt.
    pub words: Vec<String>,
    pub n_target: usize,
    /// The reference's rare words (always contained in `words`).
    pub ref_words: Vec<String>,
    pub distractors: Vec<String>,
}

/// Splits the vocabulary into common (top `common_top_k` by corpus
/// frequency) and rare, then assembles `n` hotwords: the reference's rare
/// words plus seeded distractors sampled from the rare vocabulary.
pub fn build_biasing_list(
    ref_text: &str,
    vocab_freqs: &BTreeMap<String, u64>,
    n: usize,
    common_top_k: usize,
    seed: u64,
) -> Result<BiasingList> {
    let mut ranked: Vec<(&String, &u64)> = vocab_freqs.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let common: std::collections::BTreeSet<&str> = ranked
        .iter()
        .take(common_top_k)
        .map(|(w, _)| w.as_str())
        .collect();

    let mut ref_words: Vec<String> = Vec::new();
    for w in ref_text.split_whitespace() {
        if !common.contains(w) && !ref_words.iter().any(|r| r == w) {
            ref_words.push(w.to_string());
        }
    }
    if n < ref_words.len() {
        return Err(Error::Contract(format!(
            "list size {n} is smaller than the {} rare reference words",
            ref_words.len()
        )));
    }

    let needed = n - ref_words.len();
    let mut pool: Vec<&String> = ranked
        .iter()
        .skip(common_top_k)
        .map(|(w, _)| *w)
        .filter(|w| !ref_words.iter().any(|r| r == *w))
        .collect();
    if pool.len() < needed {
        return Err(Error::BiasingListSize {
            needed,
            available: pool.len(),
        });
    }
    let mut rng = rng_for(seed, "biasing-distractors");
    pool.shuffle(&mut rng);
    let distractors: Vec<String> = pool.into_iter().take(needed).cloned().collect();

    let mut words: Vec<String> = ref_words.iter().chain(distractors.iter()).cloned().collect();
    words.shuffle(&mut rng);
    Ok(BiasingList {
        words,
        n_target: n,
        ref_words,
        distractors,
    })
}

fn char_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let cost = usize::from(ca != cb);
            curr[j + 1] = (prev[j] + cost).min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Keeps a hotword iff some draft word is within the normalized edit
/// distance budget: dist(w, d) / max(|w|, |d|) ≤ max_edit_ratio.
pub fn filter_biasing_list(
    draft_transcript: &str,
    list: &BiasingList,
    max_edit_ratio: f64,
) -> Vec<String> {
    let draft: Vec<&str> = draft_transcript.split_whitespace().collect();
    list.words
        .iter()
        .filter(|w| {
            draft.iter().any(|d| {
                let denom = w.chars().count().max(d.chars().count()).max(1);
                char_levenshtein(w, d) as f64 / denom as f64 <= max_edit_ratio
            })
        })
        .cloned()
        .collect()
}
