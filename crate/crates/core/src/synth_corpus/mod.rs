//! Deterministic synthetic audio-text corpus ("tone-code audio") plus the
//! 50 Hz log-mel frontend. Each character of the 27-symbol alphabet maps to
//! a 100 ms pure tone; utterances are concatenations of those tones with
//! seeded Gaussian noise at a configurable SNR.

mod corpus;
mod mel;
mod tone;
mod wav;

pub use corpus::{
    corpus_word_freqs, make_corpus, CorpusSpec, DatasetManifest, ManifestRecord, Task,
    ToneLexicon,
};
pub use mel::{log_mel, MelBank, DEFAULT_HOP, DEFAULT_N_MELS, DEFAULT_WIN};
pub use tone::{matched_filter_decode, synth_utterance, ToneSpec, Waveform, TONE_SAMPLE_RATE};
pub use wav::{read_wav, write_wav};
