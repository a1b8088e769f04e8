//! Config-driven model assembly: parse a YAML document into an
//! [`AssemblyManifest`], resolve component identifiers against the
//! registry, build the composite model with seeded deterministic
//! initialization, and apply freeze policies.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{FrameEncoderCfg, SequenceEncoderCfg};
use crate::error::{Error, Result};
use crate::lm::{self, LmCfg, LoraConfig};
use crate::params::ParamStore;
use crate::projectors::{LinearProjectorCfg, QFormerCfg};
use crate::synth_corpus::Task;
use crate::vocab::{Tokenizer, VOCAB_SPEC_CHAR27};

pub const ENCODER_KINDS: [&str; 2] = ["tone_frame", "tone_sequence"];
pub const PROJECTOR_KINDS: [&str; 2] = ["linear", "qformer"];
pub const LM_PRESETS: [&str; 1] = ["tiny"];
pub const VOCAB_SPECS: [&str; 1] = [VOCAB_SPEC_CHAR27];

// --- raw YAML schema -------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    encoder: Option<RawEncoder>,
    projector: Option<RawProjector>,
    lm: Option<RawLm>,
    peft: Option<RawPeft>,
    train: Option<RawTrain>,
    task: Option<String>,
    data: Option<RawData>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEncoder {
    kind: String,
    n_mels: Option<usize>,
    hidden_dim: Option<usize>,
    blocks: Option<usize>,
    heads: Option<usize>,
    out_dim: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProjector {
    kind: Option<String>,
    downsample_factor: Option<usize>,
    hidden_dim: Option<usize>,
    query_count: Option<usize>,
    blocks: Option<usize>,
    heads: Option<usize>,
    out_dim: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLm {
    preset: Option<String>,
    embed_dim: Option<usize>,
    blocks: Option<usize>,
    heads: Option<usize>,
    vocab: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPeft {
    rank: usize,
    alpha: f64,
    #[serde(default)]
    dropout: f64,
    targets: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    trainable: Option<Vec<String>>,
    stages: Option<Vec<RawStage>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    name: String,
    trainable: Option<Vec<String>>,
    steps: usize,
    lr: Option<f64>,
    batch_size: Option<usize>,
    mode: Option<String>,
    data: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    manifest: Option<String>,
    eval_manifest: Option<String>,
}

// --- resolved manifest -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Encoder,
    Projector,
    Lm,
    Lora,
}

impl Component {
    pub fn prefix(self) -> &'static str {
        match self {
            Component::Encoder => "encoder.",
            Component::Projector => "projector.",
            Component::Lm => "lm.",
            Component::Lora => "lora.",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Component::Encoder),
            "projector" => Ok(Component::Projector),
            "lm" => Ok(Component::Lm),
            "lora" => Ok(Component::Lora),
            other => Err(Error::PolicyUnknownComponent(other.to_string())),
        }
    }
}

/// What a stage feeds the LM. `Paired` is the normal audio→text batch;
/// `TextOnly` drops the prefix entirely (plain LM batches); `CopyWarmup`
/// uses the target's own token embeddings as the prefix, which teaches a
/// not-yet-multimodal LM to read its prefix region before any audio
/// arrives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Paired,
    TextOnly,
    CopyWarmup,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StageSpec {
    pub name: String,
    pub trainable: BTreeSet<Component>,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: StageMode,
    /// Optional per-stage dataset manifest path; the run's main manifest
    /// is used when absent.
    pub data: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainPolicy {
    pub trainable: BTreeSet<Component>,
    pub stages: Vec<StageSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EncoderSpec {
    #[serde(rename = "tone_frame")]
    ToneFrame(FrameEncoderCfg),
    #[serde(rename = "tone_sequence")]
    ToneSequence(SequenceEncoderCfg),
}

impl EncoderSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            EncoderSpec::ToneFrame(_) => "tone_frame",
            EncoderSpec::ToneSequence(_) => "tone_sequence",
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderSpec::ToneFrame(c) => c.hidden,
            EncoderSpec::ToneSequence(c) => c.out_dim,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProjectorSpec {
    Linear(LinearProjectorCfg),
    QFormer(QFormerCfg),
}

impl ProjectorSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ProjectorSpec::Linear(_) => "linear",
            ProjectorSpec::QFormer(_) => "qformer",
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            ProjectorSpec::Linear(c) => c.out_dim,
            ProjectorSpec::QFormer(c) => c.out_dim,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataSpec {
    pub manifest: Option<String>,
    pub eval_manifest: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AssemblyManifest {
    pub encoder: EncoderSpec,
    pub projector: ProjectorSpec,
    pub lm: LmCfg,
    pub vocab_spec: String,
    pub peft: Option<LoraConfig>,
    pub train_policy: TrainPolicy,
    pub task: Task,
    pub data: DataSpec,
}

impl AssemblyManifest {
    /// SHA-256 of the canonical (sorted-key JSON) serialization.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let canon = serde_json::to_string(&value).expect("canonical json");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unknown(field: &str, id: &str, known: &[&str]) -> Error {
    Error::UnknownComponent {
        field: field.into(),
        id: id.into(),
        known: known.iter().map(|s| s.to_string()).collect(),
    }
}

fn parse_components(names: &[String]) -> Result<BTreeSet<Component>> {
    names.iter().map(|n| Component::parse(n)).collect()
}

pub const DEFAULT_DOWNSAMPLE: usize = 5;
pub const DEFAULT_PROJ_HIDDEN: usize = 64;
pub const DEFAULT_QUERY_COUNT: usize = 16;
pub const DEFAULT_QFORMER_BLOCKS: usize = 2;
pub const DEFAULT_STAGE_STEPS: usize = 500;
pub const DEFAULT_STAGE_LR: f64 = 3e-3;
pub const DEFAULT_STAGE_BATCH: usize = 8;

/// Parses a YAML configuration document. Unknown keys are errors; every
/// optional key has the documented default.
pub fn parse_config(doc: &str) -> Result<AssemblyManifest> {
    let raw: RawConfig =
        serde_yaml::from_str(doc).map_err(|e| Error::ConfigParse(e.to_string()))?;

    let enc = raw
        .encoder
        .ok_or_else(|| Error::ConfigParse("missing required section `encoder`".into()))?;
    let frame_cfg = FrameEncoderCfg {
        in_dim: enc.n_mels.unwrap_or(40),
        hidden: enc.hidden_dim.unwrap_or(64),
        blocks: enc.blocks.unwrap_or(2),
        heads: enc.heads.unwrap_or(4),
    };
    let encoder = match enc.kind.as_str() {
        "tone_frame" => EncoderSpec::ToneFrame(frame_cfg),
        "tone_sequence" => EncoderSpec::ToneSequence(SequenceEncoderCfg {
            frame: frame_cfg,
            out_dim: enc.out_dim.unwrap_or(32),
        }),
        other => return Err(unknown("encoder.kind", other, &ENCODER_KINDS)),
    };

    let lm_raw = raw.lm.unwrap_or(RawLm {
        preset: Some("tiny".into()),
        embed_dim: None,
        blocks: None,
        heads: None,
        vocab: None,
    });
    if let Some(p) = &lm_raw.preset {
        if p != "tiny" {
            return Err(unknown("lm.preset", p, &LM_PRESETS));
        }
    }
    let vocab_spec = lm_raw.vocab.unwrap_or_else(|| VOCAB_SPEC_CHAR27.into());
    if vocab_spec != VOCAB_SPEC_CHAR27 {
        return Err(unknown("lm.vocab", &vocab_spec, &VOCAB_SPECS));
    }
    let tokenizer = Tokenizer::tone_char_v1();
    let lm_cfg = LmCfg {
        vocab_size: tokenizer.vocab_size(),
        embed_dim: lm_raw.embed_dim.unwrap_or(64),
        blocks: lm_raw.blocks.unwrap_or(3),
        heads: lm_raw.heads.unwrap_or(4),
        prefix_in: None,
    };

    let proj = raw.projector.unwrap_or(RawProjector {
        kind: None,
        downsample_factor: None,
        hidden_dim: None,
        query_count: None,
        blocks: None,
        heads: None,
        out_dim: None,
    });
    let proj_kind = proj.kind.clone().unwrap_or_else(|| "linear".into());
    let proj_out = proj.out_dim.unwrap_or(lm_cfg.embed_dim);
    let projector = match proj_kind.as_str() {
        "linear" => {
            let k = proj.downsample_factor.unwrap_or(DEFAULT_DOWNSAMPLE);
            if k < 1 {
                return Err(Error::ConfigParse(
                    "projector.downsample_factor must be ≥ 1".into(),
                ));
            }
            ProjectorSpec::Linear(LinearProjectorCfg {
                downsample_factor: k,
                in_dim: encoder.output_dim(),
                hidden_dim: proj.hidden_dim.unwrap_or(DEFAULT_PROJ_HIDDEN),
                out_dim: proj_out,
            })
        }
        "qformer" => {
            let q = proj.query_count.ok_or_else(|| {
                Error::ConfigParse("projector.query_count required for kind qformer".into())
            })?;
            ProjectorSpec::QFormer(QFormerCfg {
                query_count: q,
                kv_dim: encoder.output_dim(),
                out_dim: proj_out,
                blocks: proj.blocks.unwrap_or(DEFAULT_QFORMER_BLOCKS),
                heads: proj.heads.unwrap_or(4),
            })
        }
        other => return Err(unknown("projector.kind", other, &PROJECTOR_KINDS)),
    };

    let peft = match raw.peft {
        None => None,
        Some(p) => {
            let targets = match p.targets {
                None => vec![lm::LoraTarget::Query, lm::LoraTarget::Value],
                Some(names) => names
                    .iter()
                    .map(|n| match n.as_str() {
                        "query" => Ok(lm::LoraTarget::Query),
                        "key" => Ok(lm::LoraTarget::Key),
                        "value" => Ok(lm::LoraTarget::Value),
                        "output" => Ok(lm::LoraTarget::Output),
                        other => Err(unknown(
                            "peft.targets",
                            other,
                            &["query", "key", "value", "output"],
                        )),
                    })
                    .collect::<Result<Vec<_>>>()?,
            };
            Some(LoraConfig {
                rank: p.rank,
                alpha: p.alpha,
                dropout: p.dropout,
                targets,
            })
        }
    };

    let train_raw = raw.train.unwrap_or(RawTrain {
        trainable: None,
        stages: None,
    });
    let trainable = match &train_raw.trainable {
        None => BTreeSet::from([Component::Projector]),
        Some(names) => parse_components(names)?,
    };
    let stages = match train_raw.stages {
        None => vec![StageSpec {
            name: "main".into(),
            trainable: trainable.clone(),
            steps: DEFAULT_STAGE_STEPS,
            lr: DEFAULT_STAGE_LR,
            batch_size: DEFAULT_STAGE_BATCH,
            mode: StageMode::Paired,
            data: None,
        }],
        Some(raw_stages) => {
            if raw_stages.is_empty() {
                return Err(Error::ConfigParse("train.stages must be non-empty".into()));
            }
            raw_stages
                .into_iter()
                .map(|s| {
                    if s.steps == 0 {
                        return Err(Error::ConfigParse(format!(
                            "stage {:?} needs steps ≥ 1",
                            s.name
                        )));
                    }
                    Ok(StageSpec {
                        trainable: match &s.trainable {
                            None => trainable.clone(),
                            Some(names) => parse_components(names)?,
                        },
                        name: s.name,
                        steps: s.steps,
                        lr: s.lr.unwrap_or(DEFAULT_STAGE_LR),
                        batch_size: s.batch_size.unwrap_or(DEFAULT_STAGE_BATCH),
                        mode: match s.mode.as_deref() {
                            None | Some("paired") => StageMode::Paired,
                            Some("text_only") => StageMode::TextOnly,
                            Some("copy_warmup") => StageMode::CopyWarmup,
                            Some(other) => {
                                return Err(unknown(
                                    "train.stages.mode",
                                    other,
                                    &["paired", "text_only", "copy_warmup"],
                                ))
                            }
                        },
                        data: s.data,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let task: Task = raw.task.as_deref().unwrap_or("asr").parse()?;
    let data = match raw.data {
        None => DataSpec {
            manifest: None,
            eval_manifest: None,
        },
        Some(d) => DataSpec {
            manifest: d.manifest,
            eval_manifest: d.eval_manifest,
        },
    };

    Ok(AssemblyManifest {
        encoder,
        projector,
        lm: lm_cfg,
        vocab_spec,
        peft,
        train_policy: TrainPolicy { trainable, stages },
        task,
        data,
    })
}

// --- assembled model -------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AssembledModel {
    pub manifest: AssemblyManifest,
    pub digest: String,
    pub seed: u64,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
}

impl AssembledModel {
    pub fn lora(&self) -> Option<&LoraConfig> {
        self.manifest.peft.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }
}

/// Builds the composite model: encoder, projector, LM, adapters. Parameter
/// values are a pure function of (manifest, seed).
pub fn build_model(manifest: &AssemblyManifest, seed: u64) -> Result<AssembledModel> {
    let proj_out = manifest.projector.out_dim();
    let lm_width = manifest.lm.embed_dim;
    if proj_out != lm_width {
        return Err(Error::DimensionMismatch {
            context: "projector output vs LM embedding width".into(),
            left: proj_out,
            right: lm_width,
        });
    }
    match (&manifest.encoder, &manifest.projector) {
        (EncoderSpec::ToneFrame(e), ProjectorSpec::Linear(p)) if e.hidden != p.in_dim => {
            return Err(Error::DimensionMismatch {
                context: "encoder output vs projector input".into(),
                left: e.hidden,
                right: p.in_dim,
            })
        }
        (EncoderSpec::ToneFrame(e), ProjectorSpec::QFormer(p)) if e.hidden != p.kv_dim => {
            return Err(Error::DimensionMismatch {
                context: "encoder output vs qformer key/value width".into(),
                left: e.hidden,
                right: p.kv_dim,
            })
        }
        _ => {}
    }

    let mut store = ParamStore::new();
    match &manifest.encoder {
        EncoderSpec::ToneFrame(cfg) => {
            crate::encoders::add_frame_encoder_params(&mut store, seed, "encoder", cfg)
        }
        EncoderSpec::ToneSequence(cfg) => {
            crate::encoders::add_sequence_encoder_params(&mut store, seed, "encoder", cfg)
        }
    }
    match &manifest.projector {
        ProjectorSpec::Linear(cfg) => {
            crate::projectors::add_linear_projector_params(&mut store, seed, "projector", cfg)
        }
        ProjectorSpec::QFormer(cfg) => {
            crate::projectors::add_qformer_params(&mut store, seed, "projector", cfg)
        }
    }
    lm::add_lm_params(&mut store, seed, &manifest.lm);
    if let Some(p) = &manifest.peft {
        lm::attach_lora(&mut store, seed, &manifest.lm, p)?;
    }

    let mut model = AssembledModel {
        digest: manifest.digest(),
        manifest: manifest.clone(),
        seed,
        store,
        tokenizer: Tokenizer::tone_char_v1(),
    };
    let trainable = model.manifest.train_policy.trainable.clone();
    apply_train_policy(&mut model, &trainable)?;
    Ok(model)
}

/// Marks exactly the named components trainable; everything else freezes.
pub fn apply_train_policy(model: &mut AssembledModel, trainable: &BTreeSet<Component>) -> Result<()> {
    if trainable.contains(&Component::Lora) && model.manifest.peft.is_none() {
        return Err(Error::PolicyUnknownComponent(
            "lora (no peft section in the manifest)".into(),
        ));
    }
    model.store.freeze_all();
    for c in trainable {
        model.store.mark_trainable_prefix(c.prefix());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "
encoder:
  kind: tone_frame
lm:
  preset: tiny
";

    #[test]
    fn minimal_doc_fills_documented_defaults() {
        let m = parse_config(MINIMAL).unwrap();
        match &m.projector {
            ProjectorSpec::Linear(p) => {
                assert_eq!(p.downsample_factor, 5);
                assert_eq!(p.out_dim, 64);
            }
            _ => panic!("default projector must be linear"),
        }
        assert_eq!(m.task, Task::Asr);
        assert_eq!(m.train_policy.stages.len(), 1);
        assert_eq!(
            m.train_policy.trainable,
            BTreeSet::from([Component::Projector])
        );
    }

    #[test]
    fn qformer_without_query_count_is_an_error() {
        let doc = "
encoder: {kind: tone_frame}
projector: {kind: qformer}
";
        let err = parse_config(doc).unwrap_err();
        assert!(err.to_string().contains("query_count required"), "{err}");
    }

    #[test]
    fn figure_shaped_doc_trains_projector_and_lora() {
        let doc = "
encoder:
  kind: tone_frame
  hidden_dim: 48
projector:
  kind: linear
  downsample_factor: 5
lm:
  preset: tiny
  embed_dim: 48
peft:
  rank: 8
  alpha: 16.0
train:
  trainable: [projector, lora]
data:
  manifest: data/train.jsonl
task: asr
";
        let m = parse_config(doc).unwrap();
        assert_eq!(
            m.train_policy.trainable,
            BTreeSet::from([Component::Projector, Component::Lora])
        );
        assert!(m.peft.is_some());
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let doc = "
encoder: {kind: tone_frame}
optimizer: {lr: 1.0}
";
        let err = parse_config(doc).unwrap_err();
        assert!(err.to_string().contains("optimizer"), "{err}");
    }

    #[test]
    fn unregistered_encoder_kind_names_the_identifier() {
        let doc = "encoder: {kind: whisper_large}";
        let err = parse_config(doc).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("whisper_large") && msg.contains("tone_frame"), "{msg}");
    }

    #[test]
    fn build_is_deterministic_and_policy_freezes_rest() {
        let m = parse_config(MINIMAL).unwrap();
        let a = build_model(&m, 7).unwrap();
        let b = build_model(&m, 7).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        for (name, value) in a.store.iter() {
            assert_eq!(value, b.store.get(name), "{name}");
        }
        // Only projector trainable by default.
        assert!(a.store.is_trainable("projector.l1.w"));
        assert!(!a.store.is_trainable("lm.embed"));
        assert!(!a.store.is_trainable("encoder.in_proj.w"));

        let c = build_model(&m, 8).unwrap();
        assert_ne!(a.store.get("lm.embed"), c.store.get("lm.embed"));
    }

    #[test]
    fn projector_lm_width_mismatch_reports_both() {
        let doc = "
encoder: {kind: tone_frame}
projector: {kind: linear, out_dim: 32}
lm: {embed_dim: 64}
";
        let m = parse_config(doc).unwrap();
        let err = build_model(&m, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("32") && msg.contains("64"), "{msg}");
    }

    #[test]
    fn lora_shapes_follow_rank() {
        let doc = "
encoder: {kind: tone_frame}
lm: {embed_dim: 32}
projector: {kind: linear}
peft: {rank: 4, alpha: 8.0}
";
        let m = parse_config(doc).unwrap();
        let model = build_model(&m, 3).unwrap();
        let a = model.store.get("lora.lm.block0.attn.q.a");
        let b = model.store.get("lora.lm.block0.attn.q.b");
        assert_eq!(a.shape(), (4, 32));
        assert_eq!(b.shape(), (32, 4));
        // query+value on every block
        assert_eq!(
            model.store.names_with_prefix("lora.").len(),
            m.lm.blocks * 2 * 2
        );
    }

    #[test]
    fn policy_with_lora_but_no_peft_errors() {
        let m = parse_config(MINIMAL).unwrap();
        let mut model = build_model(&m, 1).unwrap();
        let err =
            apply_train_policy(&mut model, &BTreeSet::from([Component::Lora])).unwrap_err();
        assert!(err.to_string().contains("lora"), "{err}");
    }

    #[test]
    fn empty_policy_freezes_everything() {
        let m = parse_config(MINIMAL).unwrap();
        let mut model = build_model(&m, 1).unwrap();
        apply_train_policy(&mut model, &BTreeSet::new()).unwrap();
        assert_eq!(model.store.trainable_names().len(), 0);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = parse_config(MINIMAL).unwrap();
        let b = parse_config(MINIMAL).unwrap();
        assert_eq!(a.digest(), b.digest());
        let doc2 = "
encoder: {kind: tone_frame, hidden_dim: 32}
lm: {preset: tiny}
";
        let c = parse_config(doc2).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn paper_reference_lora_config_round_trips() {
        let doc = "
encoder: {kind: tone_frame}
lm: {embed_dim: 64}
peft: {rank: 32, alpha: 32.0, dropout: 0.05}
";
        let m = parse_config(doc).unwrap();
        let p = m.peft.as_ref().unwrap();
        assert_eq!(p.rank, 32);
        assert_eq!(p.alpha, 32.0);
        assert_eq!(p.dropout, 0.05);
        assert_eq!(
            p.targets,
            vec![lm::LoraTarget::Query, lm::LoraTarget::Value]
        );
        // And it survives a build.
        build_model(&m, 1).unwrap();
    }
}
