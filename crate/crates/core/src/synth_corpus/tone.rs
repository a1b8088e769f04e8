//! Tone-code synthesis and the matched-filter reference decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::rng_for;
use crate::vocab::ALPHABET;

pub const TONE_SAMPLE_RATE: u32 = 16_000;
pub const TONE_CHAR_MS: usize = 100;
pub const TONE_BASE_HZ: f64 = 400.0;
pub const TONE_STEP_HZ: f64 = 25.0;
pub const TONE_AMPLITUDE: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Synthesis parameters. `snr_db = None` means noise-free.
#[derive(Clone, Copy, Debug)]
pub struct ToneSpec {
    pub snr_db: Option<f64>,
}

impl ToneSpec {
    pub fn clean() -> Self {
        ToneSpec { snr_db: None }
    }

    pub fn with_snr(snr_db: f64) -> Self {
        ToneSpec {
            snr_db: Some(snr_db),
        }
    }
}

pub fn char_frequency(c: char) -> Result<f64> {
    ALPHABET
        .find(c)
        .map(|i| TONE_BASE_HZ + TONE_STEP_HZ * i as f64)
        .ok_or_else(|| Error::Vocab(c.to_string()))
}

fn samples_per_char() -> usize {
    TONE_SAMPLE_RATE as usize * TONE_CHAR_MS / 1000
}

/// One 100 ms tone per character at 400 + 25·index(c) Hz, amplitude 0.5,
/// plus seeded Gaussian noise at the configured SNR. Deterministic in
/// (text, spec, seed).
pub fn synth_utterance(text: &str, spec: &ToneSpec, seed: u64) -> Result<Waveform> {
    let spc = samples_per_char();
    let mut samples = Vec::with_capacity(text.chars().count() * spc);
    for c in text.chars() {
        let f = char_frequency(c)?;
        let w = 2.0 * std::f64::consts::PI * f / TONE_SAMPLE_RATE as f64;
        for n in 0..spc {
            samples.push(TONE_AMPLITUDE * (w * n as f64).sin());
        }
    }
    if let Some(snr_db) = spec.snr_db {
        if !samples.is_empty() {
            let signal_power =
                samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
            let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
            let normal = Normal::new(0.0, noise_power.sqrt()).expect("valid std");
            let mut rng = rng_for(seed, &format!("tone-noise:{text}"));
            for s in samples.iter_mut() {
                *s = (*s + normal.sample(&mut rng)).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(Waveform {
        samples,
        sample_rate_hz: TONE_SAMPLE_RATE,
    })
}

/// Reference decoder: per 100 ms window, the tone with the highest matched
/// energy (sin/cos correlation) wins. Works straight off the waveform and
/// shares nothing with the mel/encoder path.
pub fn matched_filter_decode(w: &Waveform) -> String {
    let spc = samples_per_char();
    let n_windows = w.samples.len() / spc;
    let mut out = String::with_capacity(n_windows);
    for t in 0..n_windows {
        let window = &w.samples[t * spc..(t + 1) * spc];
        let mut best = (f64::NEG_INFINITY, ' ');
        for (i, c) in ALPHABET.chars().enumerate() {
            let f = TONE_BASE_HZ + TONE_STEP_HZ * i as f64;
            let wstep = 2.0 * std::f64::consts::PI * f / w.sample_rate_hz as f64;
            let mut s_corr = 0.0;
            let mut c_corr = 0.0;
            for (n, &x) in window.iter().enumerate() {
                let a = wstep * n as f64;
                s_corr += x * a.sin();
                c_corr += x * a.cos();
            }
            let energy = s_corr * s_corr + c_corr * c_corr;
            if energy > best.0 {
                best = (energy, c);
            }
        }
        out.push(best.1);
    }
    out
}

/// Random text over the lexicon-free alphabet, for decoder stress tests.
pub fn random_text(rng: &mut impl Rng, len: usize) -> String {
    let chars: Vec<char> = ALPHABET.chars().collect();
    (0..len).map(|_| chars[rng.gen_range(0..chars.len())]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ab_is_two_pure_tone_segments() {
        let w = synth_utterance("ab", &ToneSpec::clean(), 0).unwrap();
        assert_eq!(w.samples.len(), 3200);
        // First segment oscillates at 400 Hz, second at 425 Hz: check by
        // matched correlation rather than eyeballing samples.
        let decoded = matched_filter_decode(&w);
        assert_eq!(decoded, "ab");
        // Spot-check the very first samples of each segment.
        let w400 = 2.0 * std::f64::consts::PI * 400.0 / 16000.0;
        assert!((w.samples[1] - 0.5 * w400.sin()).abs() < 1e-12);
        let w425 = 2.0 * std::f64::consts::PI * 425.0 / 16000.0;
        assert!((w.samples[1600 + 1] - 0.5 * w425.sin()).abs() < 1e-12);
    }

    #[test]
    fn empty_text_gives_zero_length_waveform() {
        let w = synth_utterance("", &ToneSpec::clean(), 0).unwrap();
        assert!(w.samples.is_empty());
    }

    #[test]
    fn out_of_alphabet_character_is_a_vocab_error() {
        let err = synth_utterance("aZb", &ToneSpec::clean(), 0).unwrap_err();
        assert!(err.to_string().contains('Z'));
    }

    #[test]
    fn synthesis_is_deterministic_in_text_spec_seed() {
        let a = synth_utterance("cat dog", &ToneSpec::with_snr(20.0), 5).unwrap();
        let b = synth_utterance("cat dog", &ToneSpec::with_snr(20.0), 5).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = synth_utterance("cat dog", &ToneSpec::with_snr(20.0), 6).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn samples_stay_within_unit_range() {
        let w = synth_utterance("zz aa", &ToneSpec::with_snr(0.0), 3).unwrap();
        assert!(w.samples.iter().all(|s| s.abs() <= 1.0));
    }

    /// The learnability oracle: matched filtering recovers every character
    /// exactly at SNR ≥ 20 dB. (The full 1000-utterance sweep runs in the
    /// acceptance suite; this is a quick slice.)
    #[test]
    fn matched_filter_recovers_text_at_20db() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..50 {
            let len = rng.gen_range(1..30);
            let text = random_text(&mut rng, len);
            let w = synth_utterance(&text, &ToneSpec::with_snr(20.0), i).unwrap();
            assert_eq!(matched_filter_decode(&w), text, "utterance {i}");
        }
    }
}
