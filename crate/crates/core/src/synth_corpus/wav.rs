//! Minimal 16-bit PCM mono WAV reader/writer. We only ever touch files we
//! wrote ourselves, so the reader accepts exactly that shape.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::tone::Waveform;

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_bytes = (n * 2) as u32;
    let mut buf = Vec::with_capacity(44 + n * 2);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&w.sample_rate_hz.to_le_bytes());
    buf.extend_from_slice(&(w.sample_rate_hz * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |msg: &str| Error::BadAssetFile(format!("{}: {msg}", path.display()));
    if buf.len() < 44 || &buf[0..4] != b"RIFF" || &buf[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE file"));
    }
    if &buf[12..16] != b"fmt " {
        return Err(bad("missing fmt chunk"));
    }
    let format = u16::from_le_bytes([buf[20], buf[21]]);
    let channels = u16::from_le_bytes([buf[22], buf[23]]);
    let bits = u16::from_le_bytes([buf[34], buf[35]]);
    if format != 1 || channels != 1 || bits != 16 {
        return Err(bad("expected 16-bit PCM mono"));
    }
    let sample_rate_hz = u32::from_le_bytes([buf[24], buf[25], buf[26], buf[27]]);
    if &buf[36..40] != b"data" {
        return Err(bad("missing data chunk"));
    }
    let data_len = u32::from_le_bytes([buf[40], buf[41], buf[42], buf[43]]) as usize;
    let data = &buf[44..];
    if data.len() < data_len {
        return Err(bad("truncated data chunk"));
    }
    let samples = data[..data_len]
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32767.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tone::{synth_utterance, ToneSpec};
    use super::*;

    #[test]
    fn wav_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = synth_utterance("hi there", &ToneSpec::with_snr(30.0), 1).unwrap();
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate_hz, 16000);
        assert_eq!(r.samples.len(), w.samples.len());
        let max_err = w
            .samples
            .iter()
            .zip(r.samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1.0 / 32767.0 + 1e-9);
    }

    #[test]
    fn write_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let w = synth_utterance("abc", &ToneSpec::with_snr(25.0), 9).unwrap();
        let p1 = dir.path().join("a.wav");
        let p2 = dir.path().join("b.wav");
        write_wav(&p1, &w).unwrap();
        write_wav(&p2, &w).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
