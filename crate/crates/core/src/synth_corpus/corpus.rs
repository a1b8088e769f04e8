//! Corpus generation: a fixed word lexicon with a Zipf-weighted common
//! pool plus a large rare pool, per-task record construction (planted
//! keywords for contextual ASR, word-level translations for the two-stage
//! translation recipe) and JSON Lines manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::rng_for;

use super::tone::{synth_utterance, ToneSpec};
use super::wav::write_wav;

const VOWELS: &str = "aeiou";
const CONSONANTS: &str = "bcdfghjklmnpqrstvwxyz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Asr,
    Casr,
    Srt,
    Caption,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::Casr => "casr",
            Task::Srt => "srt",
            Task::Caption => "caption",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(Task::Asr),
            "casr" => Ok(Task::Casr),
            "srt" => Ok(Task::Srt),
            "caption" => Ok(Task::Caption),
            other => Err(Error::UnknownComponent {
                field: "task".into(),
                id: other.into(),
                known: vec!["asr".into(), "casr".into(), "srt".into(), "caption".into()],
            }),
        }
    }
}

/// The closed word inventory: 50 two-letter common words and a few
/// thousand four-letter rare words, disjoint by construction.
#[derive(Clone, Debug)]
pub struct ToneLexicon {
    pub common: Vec<String>,
    pub rare: Vec<String>,
}

impl ToneLexicon {
    pub fn standard() -> Self {
        let mut common = Vec::with_capacity(50);
        'outer: for c in CONSONANTS.chars() {
            for v in VOWELS.chars() {
                common.push(format!("{c}{v}"));
                if common.len() == 50 {
                    break 'outer;
                }
            }
        }
        let mut rare = Vec::with_capacity(2500);
        'outer2: for c1 in CONSONANTS.chars() {
            for v1 in VOWELS.chars() {
                for c2 in CONSONANTS.chars() {
                    for v2 in VOWELS.chars() {
                        rare.push(format!("{c1}{v1}{c2}{v2}"));
                        if rare.len() == 2500 {
                            break 'outer2;
                        }
                    }
                }
            }
        }
        ToneLexicon { common, rare }
    }

    /// The fixed bilingual lexicon: every word translates to its reversal.
    pub fn translate_word(word: &str) -> String {
        word.chars().rev().collect()
    }

    pub fn translate_text(text: &str) -> String {
        text.split_whitespace()
            .map(Self::translate_word)
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Word-level translation through an explicit map; words missing from the
/// map pass through unchanged.
pub fn translate_with(text: &str, lexicon: &BTreeMap<String, String>) -> String {
    text.split_whitespace()
        .map(|w| lexicon.get(w).cloned().unwrap_or_else(|| w.to_string()))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub audio: String,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub keywords: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lang_tag: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub split: String,
    /// Directory audio paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn path_for(dir: &Path, split: &str) -> PathBuf {
        dir.join(format!("{split}.jsonl"))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = Self::path_for(dir, &self.split);
        let mut out = Vec::new();
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record is serializable");
            writeln!(out, "{line}").unwrap();
        }
        fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }

    /// Loads a JSONL manifest; verifies every referenced audio file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let split = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "train".into());
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| {
                Error::ConfigParse(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            let audio = root.join(&rec.audio);
            if !audio.exists() {
                return Err(Error::Contract(format!(
                    "manifest references missing audio {}",
                    audio.display()
                )));
            }
            records.push(rec);
        }
        Ok(DatasetManifest {
            records,
            split,
            root,
        })
    }

    pub fn audio_path(&self, idx: usize) -> PathBuf {
        self.root.join(&self.records[idx].audio)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub task: Task,
    pub n_utts: usize,
    /// Inclusive range of words per utterance.
    pub len_range: (usize, usize),
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub split: String,
    /// Rare words planted per contextual-ASR utterance.
    pub planted_per_utt: usize,
    /// Size of the rare sub-pool texts draw their planted words from.
    pub plant_pool: usize,
    /// Zipf exponent of the common-word draw; smaller is flatter.
    pub zipf_s: f64,
}

impl CorpusSpec {
    pub fn new(task: Task, n_utts: usize, seed: u64) -> Self {
        CorpusSpec {
            task,
            n_utts,
            len_range: (3, 8),
            snr_db: Some(30.0),
            seed,
            split: "train".into(),
            planted_per_utt: 1,
            plant_pool: 40,
            zipf_s: 1.2,
        }
    }
}

fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|i| 1.0 / (i as f64 + 1.0).powf(s)).collect()
}

/// Generates waveforms and the manifest. Deterministic: identical spec and
/// seed give byte-identical WAVs and manifest.
pub fn make_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    assert!(spec.n_utts >= 1, "n_utts must be at least 1");
    assert!(
        spec.len_range.0 >= 1 && spec.len_range.0 <= spec.len_range.1,
        "bad length range"
    );
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let lex = ToneLexicon::standard();
    let weights = WeightedIndex::new(zipf_weights(lex.common.len(), spec.zipf_s)).unwrap();
    let tone = ToneSpec {
        snr_db: spec.snr_db,
    };

    let mut records = Vec::with_capacity(spec.n_utts);
    for i in 0..spec.n_utts {
        let mut rng = rng_for(spec.seed, &format!("{}:utt{}", spec.split, i));
        let n_words = rng.gen_range(spec.len_range.0..=spec.len_range.1);
        let mut words: Vec<String> = Vec::with_capacity(n_words);
        let mut keywords = Vec::new();

        match spec.task {
            Task::Casr => {
                let planted = spec.planted_per_utt.min(n_words);
                for _ in 0..n_words - planted {
                    words.push(lex.common[weights.sample(&mut rng)].clone());
                }
                for _ in 0..planted {
                    let w = lex.rare[rng.gen_range(0..spec.plant_pool)].clone();
                    words.push(w);
                }
                words.shuffle(&mut rng);
                for w in &words {
                    if w.len() > 2 && !keywords.contains(w) {
                        keywords.push(w.clone());
                    }
                }
            }
            _ => {
                for _ in 0..n_words {
                    words.push(lex.common[weights.sample(&mut rng)].clone());
                }
            }
        }

        let text = words.join(" ");
        let wav_seed = rng.gen::<u64>();
        let wave = synth_utterance(&text, &tone, wav_seed)?;
        let file = format!("{}_{i:05}.wav", spec.split);
        write_wav(&out_dir.join(&file), &wave)?;

        let (translation, lang_tag) = match spec.task {
            Task::Srt => (
                Some(ToneLexicon::translate_text(&text)),
                Some("<|de|>".to_string()),
            ),
            _ => (None, None),
        };
        records.push(ManifestRecord {
            audio: file,
            text,
            keywords: if spec.task == Task::Casr {
                Some(keywords)
            } else {
                None
            },
            translation,
            lang_tag,
        });
    }

    let manifest = DatasetManifest {
        records,
        split: spec.split.clone(),
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Word frequencies over the manifest texts, extended with zero counts for
/// every lexicon word so rare-word pools cover the whole inventory.
pub fn corpus_word_freqs(manifest: &DatasetManifest, lex: &ToneLexicon) -> BTreeMap<String, u64> {
    let mut freqs: BTreeMap<String, u64> = BTreeMap::new();
    for w in lex.common.iter().chain(lex.rare.iter()) {
        freqs.insert(w.clone(), 0);
    }
    for r in &manifest.records {
        for w in r.text.split_whitespace() {
            *freqs.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    freqs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_pools_are_disjoint_and_sized() {
        let lex = ToneLexicon::standard();
        assert_eq!(lex.common.len(), 50);
        assert_eq!(lex.rare.len(), 2500);
        for c in &lex.common {
            assert!(!lex.rare.contains(c));
        }
    }

    #[test]
    fn corpus_generation_is_byte_deterministic() {
        let spec = CorpusSpec {
            n_utts: 4,
            ..CorpusSpec::new(Task::Asr, 4, 1)
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_corpus(&spec, d1.path()).unwrap();
        make_corpus(&spec, d2.path()).unwrap();
        let m1 = fs::read(d1.path().join("train.jsonl")).unwrap();
        let m2 = fs::read(d2.path().join("train.jsonl")).unwrap();
        assert_eq!(m1, m2);
        let w1 = fs::read(d1.path().join("train_00000.wav")).unwrap();
        let w2 = fs::read(d2.path().join("train_00000.wav")).unwrap();
        assert_eq!(w1, w2);
    }

    #[test]
    fn casr_keywords_are_a_subset_of_the_text() {
        let spec = CorpusSpec::new(Task::Casr, 12, 3);
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(&spec, dir.path()).unwrap();
        for r in &m.records {
            let words: Vec<&str> = r.text.split_whitespace().collect();
            let kws = r.keywords.as_ref().unwrap();
            assert!(!kws.is_empty());
            for k in kws {
                assert!(words.contains(&k.as_str()), "{k} not in {:?}", r.text);
            }
        }
    }

    #[test]
    fn srt_translation_follows_the_lexicon() {
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), "A".to_string());
        map.insert("b".to_string(), "B".to_string());
        assert_eq!(translate_with("a b", &map), "A B");
        assert_eq!(ToneLexicon::translate_text("ba ci"), "ab ic");

        let spec = CorpusSpec::new(Task::Srt, 3, 9);
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(&spec, dir.path()).unwrap();
        for r in &m.records {
            assert_eq!(
                r.translation.as_deref().unwrap(),
                ToneLexicon::translate_text(&r.text)
            );
            assert_eq!(r.lang_tag.as_deref(), Some("<|de|>"));
        }
    }

    #[test]
    fn manifest_load_round_trips_and_checks_audio() {
        let spec = CorpusSpec::new(Task::Asr, 3, 5);
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(&spec, dir.path()).unwrap();
        let loaded = DatasetManifest::load(&dir.path().join("train.jsonl")).unwrap();
        assert_eq!(loaded.records, m.records);
        // Remove one wav: load must fail.
        fs::remove_file(dir.path().join("train_00001.wav")).unwrap();
        assert!(DatasetManifest::load(&dir.path().join("train.jsonl")).is_err());
    }

    #[test]
    fn word_freqs_cover_the_whole_lexicon() {
        let spec = CorpusSpec::new(Task::Asr, 4, 7);
        let dir = tempfile::tempdir().unwrap();
        let m = make_corpus(&spec, dir.path()).unwrap();
        let lex = ToneLexicon::standard();
        let freqs = corpus_word_freqs(&m, &lex);
        assert!(freqs.len() >= 2550);
        let seen: u64 = freqs.values().sum();
        assert!(seen > 0);
    }
}
