//! Asset bundles: the saved trainable deltas plus provenance.
//!
//! File layout (bit-exact across platforms):
//!   magic "SLMA" · version u16 LE (=1) · header length u32 LE ·
//!   UTF-8 JSON header · concatenated little-endian f32 payloads.
//! The header carries the producing manifest digest, the build seed, the
//! vocabulary table and an entry list of {name, shape, byte_offset}.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::AssembledModel;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const ASSET_MAGIC: &[u8; 4] = b"SLMA";
pub const ASSET_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: (usize, usize),
    byte_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    manifest_digest: String,
    seed: u64,
    vocab: Vec<String>,
    entries: Vec<HeaderEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssetEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssetBundle {
    pub manifest_digest: String,
    pub seed: u64,
    pub vocab: Vec<String>,
    pub entries: Vec<AssetEntry>,
}

impl AssetBundle {
    pub fn entry(&self, name: &str) -> Option<&AssetEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0usize;
        let entries: Vec<HeaderEntry> = self
            .entries
            .iter()
            .map(|e| {
                let h = HeaderEntry {
                    name: e.name.clone(),
                    shape: e.shape,
                    byte_offset: offset,
                };
                offset += e.values.len() * 4;
                h
            })
            .collect();
        let header = Header {
            manifest_digest: self.manifest_digest.clone(),
            seed: self.seed,
            vocab: self.vocab.clone(),
            entries,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::with_capacity(4 + 2 + 4 + header_json.len() + offset);
        buf.extend_from_slice(ASSET_MAGIC);
        buf.extend_from_slice(&ASSET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header_json);
        for e in &self.entries {
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::BadAssetFile(msg.to_string());
        if buf.len() < 10 || &buf[0..4] != ASSET_MAGIC {
            return Err(bad("missing SLMA magic"));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != ASSET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes([buf[6], buf[7], buf[8], buf[9]]) as usize;
        if buf.len() < 10 + header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&buf[10..10 + header_len])
            .map_err(|e| bad(&format!("header json: {e}")))?;
        let payload = &buf[10 + header_len..];
        let mut entries = Vec::with_capacity(header.entries.len());
        for h in &header.entries {
            let n = h.shape.0 * h.shape.1;
            let start = h.byte_offset;
            let end = start + n * 4;
            if payload.len() < end {
                return Err(bad(&format!("payload truncated for {}", h.name)));
            }
            let values = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push(AssetEntry {
                name: h.name.clone(),
                shape: h.shape,
                values,
            });
        }
        Ok(AssetBundle {
            manifest_digest: header.manifest_digest,
            seed: header.seed,
            vocab: header.vocab,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&buf)
    }
}

/// Collects the trainable parameters into a bundle and writes it. The
/// returned bundle equals the file contents.
pub fn save_assets(model: &AssembledModel, path: &Path) -> Result<AssetBundle> {
    let names = model.store.trainable_names();
    if names.is_empty() {
        return Err(Error::EmptyTrainableSet);
    }
    let entries = names
        .iter()
        .map(|n| {
            let m = model.store.get(n);
            AssetEntry {
                name: n.clone(),
                shape: m.shape(),
                values: m.data().iter().map(|&v| v as f32).collect(),
            }
        })
        .collect();
    let bundle = AssetBundle {
        manifest_digest: model.digest.clone(),
        seed: model.seed,
        vocab: model.tokenizer.table(),
        entries,
    };
    bundle.write(path)?;
    Ok(bundle)
}

/// Overwrites the model's parameters with the bundle entries. Refuses on
/// digest or seed mismatch; every currently-trainable parameter must be
/// present and shape-compatible.
pub fn load_assets(model: &mut AssembledModel, bundle: &AssetBundle) -> Result<()> {
    if bundle.manifest_digest != model.digest {
        return Err(Error::DigestMismatch {
            model: model.digest.clone(),
            bundle: bundle.manifest_digest.clone(),
        });
    }
    if bundle.seed != model.seed {
        return Err(Error::Contract(format!(
            "bundle was produced with seed {}, model was built with seed {}",
            bundle.seed, model.seed
        )));
    }
    for name in model.store.trainable_names() {
        if bundle.entry(&name).is_none() {
            return Err(Error::MissingParameter(name));
        }
    }
    for e in &bundle.entries {
        let current = model
            .store
            .try_get(&e.name)
            .ok_or_else(|| Error::MissingParameter(e.name.clone()))?;
        if current.shape() != e.shape {
            return Err(Error::ShapeMismatch {
                name: e.name.clone(),
                expected: current.shape(),
                found: e.shape,
            });
        }
        let values: Vec<f64> = e.values.iter().map(|&v| v as f64).collect();
        model
            .store
            .set(&e.name, Matrix::from_vec(e.shape.0, e.shape.1, values));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{build_model, parse_config};

    const DOC: &str = "
encoder: {kind: tone_frame, hidden_dim: 16, blocks: 1, heads: 2}
projector: {kind: linear, downsample_factor: 2, hidden_dim: 8}
lm: {embed_dim: 16, blocks: 1, heads: 2}
train: {trainable: [projector]}
";

    #[test]
    fn save_load_round_trip_restores_exact_values() {
        let manifest = parse_config(DOC).unwrap();
        let mut model = build_model(&manifest, 5).unwrap();
        // Snap to the f32 grid as the trainer does before saving.
        let names = model.store.trainable_names();
        model.store.quantize_to_f32(&names);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("assets.slma");
        let bundle = save_assets(&model, &path).unwrap();
        assert!(bundle.entries.iter().all(|e| e.name.starts_with("projector.")));

        // Bytes on disk parse back to an identical bundle.
        let reread = AssetBundle::read(&path).unwrap();
        assert_eq!(reread, bundle);
        assert_eq!(reread.to_bytes(), bundle.to_bytes());

        // A fresh build gets exactly the saved values back.
        let mut fresh = build_model(&manifest, 5).unwrap();
        load_assets(&mut fresh, &reread).unwrap();
        for name in model.store.trainable_names() {
            assert_eq!(fresh.store.get(&name), model.store.get(&name), "{name}");
        }
    }

    #[test]
    fn digest_mismatch_is_refused_with_both_digests() {
        let manifest = parse_config(DOC).unwrap();
        let model = build_model(&manifest, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bundle = save_assets(&model, &dir.path().join("a.slma")).unwrap();

        let other_doc = DOC.replace("hidden_dim: 8", "hidden_dim: 12");
        let other = parse_config(&other_doc).unwrap();
        let mut other_model = build_model(&other, 5).unwrap();
        let err = load_assets(&mut other_model, &bundle).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&model.digest) && msg.contains(&other_model.digest));
    }

    #[test]
    fn missing_entry_is_reported_by_name() {
        let manifest = parse_config(DOC).unwrap();
        let model = build_model(&manifest, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = save_assets(&model, &dir.path().join("a.slma")).unwrap();
        let removed = bundle.entries.remove(0);
        let mut fresh = build_model(&manifest, 5).unwrap();
        let err = load_assets(&mut fresh, &bundle).unwrap_err();
        assert!(err.to_string().contains(&removed.name), "{err}");
    }

    #[test]
    fn shape_mismatch_is_reported_by_name() {
        let manifest = parse_config(DOC).unwrap();
        let model = build_model(&manifest, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = save_assets(&model, &dir.path().join("a.slma")).unwrap();
        let (r, c) = bundle.entries[0].shape;
        bundle.entries[0].shape = (c, r); // transposed dims
        if r == c {
            return; // square entry can't exhibit the mismatch
        }
        let mut fresh = build_model(&manifest, 5).unwrap();
        let err = load_assets(&mut fresh, &bundle).unwrap_err();
        assert!(err.to_string().contains(&bundle.entries[0].name));
    }

    #[test]
    fn lora_bundle_contains_both_factors_per_projection() {
        let doc = format!("{DOC}peft: {{rank: 2, alpha: 4.0}}\n");
        let mut manifest = parse_config(&doc).unwrap();
        manifest.train_policy.trainable.insert(crate::assembly::Component::Lora);
        let model = build_model(&manifest, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bundle = save_assets(&model, &dir.path().join("a.slma")).unwrap();
        let lora_entries: Vec<&str> = bundle
            .entries
            .iter()
            .map(|e| e.name.as_str())
            .filter(|n| n.starts_with("lora."))
            .collect();
        // 1 block × {query, value} × {a, b}
        assert_eq!(lora_entries.len(), 4);
        assert!(lora_entries.iter().any(|n| n.ends_with(".a")));
        assert!(lora_entries.iter().any(|n| n.ends_with(".b")));
    }

    #[test]
    fn seed_mismatch_is_refused() {
        let manifest = parse_config(DOC).unwrap();
        let model = build_model(&manifest, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bundle = save_assets(&model, &dir.path().join("a.slma")).unwrap();
        let mut fresh = build_model(&manifest, 6).unwrap();
        assert!(load_assets(&mut fresh, &bundle).is_err());
    }
}
