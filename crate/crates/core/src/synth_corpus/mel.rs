//! Log-mel feature extraction: Hann window, 640-point FFT, 40 triangular
//! HTK-spaced filters over 0–8 kHz, natural log of (mel power + 1e-6).
//! 16 kHz audio with hop 320 gives the 50 Hz frame-rate contract.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::features::FeatureSeq;
use crate::tensor::Matrix;

use super::tone::Waveform;

pub const DEFAULT_N_MELS: usize = 40;
pub const DEFAULT_HOP: usize = 320;
pub const DEFAULT_WIN: usize = 640;
const LOG_EPS: f64 = 1e-6;

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters as sparse (bin, weight) lists.
pub struct MelBank {
    filters: Vec<Vec<(usize, f64)>>,
    n_bins: usize,
}

impl MelBank {
    pub fn new(n_mels: usize, win: usize, sample_rate: f64, f_max: f64) -> Self {
        let n_bins = win / 2 + 1;
        let bin_hz = sample_rate / win as f64;
        let mel_max = hz_to_mel(f_max);
        let centers: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
            let mut taps = Vec::new();
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                let w = if f > lo && f < mid {
                    (f - lo) / (mid - lo)
                } else if (f - mid).abs() < 1e-12 {
                    1.0
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((b, w));
                }
            }
            filters.push(taps);
        }
        MelBank { filters, n_bins }
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        assert_eq!(power.len(), self.n_bins);
        self.filters
            .iter()
            .map(|taps| taps.iter().map(|&(b, w)| w * power[b]).sum())
            .collect()
    }
}

/// floor(len/hop) frames of log-mel power. Frames past the tail are
/// zero-padded. Errors if the waveform is shorter than one window.
pub fn log_mel(w: &Waveform, n_mels: usize, hop: usize, win: usize) -> Result<FeatureSeq> {
    let sr = w.sample_rate_hz as f64;
    assert_eq!(
        w.sample_rate_hz as usize % hop,
        0,
        "hop must divide the sample rate for an integral frame rate"
    );
    if w.samples.len() < win {
        return Err(Error::EmptyFeature(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            w.samples.len()
        )));
    }
    let frame_rate = sr / hop as f64;
    let t_out = w.samples.len() / hop;
    let bank = MelBank::new(n_mels, win, sr, sr / 2.0);
    let hann: Vec<f64> = (0..win)
        .map(|n| {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(win);
    let mut frames = Matrix::zeros(t_out, n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    for t in 0..t_out {
        let start = t * hop;
        for n in 0..win {
            let s = w.samples.get(start + n).copied().unwrap_or(0.0);
            buf[n] = Complex::new(s * hann[n], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..win / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let mel = bank.apply(&power);
        for (c, e) in mel.iter().enumerate() {
            frames.set(t, c, (e + LOG_EPS).ln());
        }
    }
    Ok(FeatureSeq::new(frames, frame_rate))
}

#[cfg(test)]
mod tests {
    use super::super::tone::{synth_utterance, ToneSpec, Waveform, TONE_SAMPLE_RATE};
    use super::*;

    #[test]
    fn one_second_gives_fifty_frames_at_fifty_hz() {
        let w = synth_utterance("abcdefghij", &ToneSpec::clean(), 0).unwrap();
        assert_eq!(w.samples.len(), 16000);
        let f = log_mel(&w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).unwrap();
        assert_eq!(f.len(), 50);
        assert_eq!(f.dim(), 40);
        assert_eq!(f.frame_rate_hz, 50.0);
    }

    #[test]
    fn ten_seconds_gives_five_hundred_frames() {
        let text: String = std::iter::repeat('a').take(100).collect();
        let w = synth_utterance(&text, &ToneSpec::clean(), 0).unwrap();
        let f = log_mel(&w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).unwrap();
        assert_eq!(f.len(), 500);
    }

    #[test]
    fn silence_gives_constant_log_eps_frames() {
        let w = Waveform {
            samples: vec![0.0; 16000],
            sample_rate_hz: TONE_SAMPLE_RATE,
        };
        let f = log_mel(&w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).unwrap();
        let expect = (1e-6f64).ln();
        for r in 0..f.len() {
            for &v in f.frames.row(r) {
                assert!((v - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_short_waveform_is_an_error() {
        let w = Waveform {
            samples: vec![0.0; 639],
            sample_rate_hz: TONE_SAMPLE_RATE,
        };
        assert!(log_mel(&w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).is_err());
    }

    #[test]
    fn adjacent_tones_produce_distinct_feature_rows() {
        // 'a' (400 Hz) vs 'b' (425 Hz) must be separable in mel space.
        let wa = synth_utterance("aaaa", &ToneSpec::clean(), 0).unwrap();
        let wb = synth_utterance("bbbb", &ToneSpec::clean(), 0).unwrap();
        let fa = log_mel(&wa, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).unwrap();
        let fb = log_mel(&wb, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).unwrap();
        let diff = fa.frames.slice_rows(1, 2).max_abs_diff(&fb.frames.slice_rows(1, 2));
        assert!(diff > 0.5, "mel rows too similar: {diff}");
    }

    #[test]
    fn frame_rate_times_duration_tracks_frame_count() {
        for text in ["abc", "hello world", "a"] {
            let w = synth_utterance(text, &ToneSpec::clean(), 0).unwrap();
            if w.samples.len() < DEFAULT_WIN {
                continue;
            }
            let f = log_mel(&w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).unwrap();
            let expect = f.frame_rate_hz * w.duration_s();
            assert!((f.len() as f64 - expect).abs() <= 1.0);
        }
    }
}
