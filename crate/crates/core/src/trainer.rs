//! Staged training loop over assembled models.
//!
//! Each stage re-applies its freeze policy, runs Adam (β1=0.9, β2=0.999,
//! ε=1e-8) with global-norm gradient clipping at 1.0, and draws batches in
//! a seeded shuffled order, so runs are bit-reproducible for a fixed seed.
//! Frozen encoder/projector outputs are computed once per stage and reused.
//! At the end the tuned parameters are snapped to the f32 grid and saved as
//! an asset bundle, keeping the live model and the bundle bit-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{
    apply_train_policy, AssembledModel, Component, EncoderSpec, ProjectorSpec, StageMode,
    StageSpec,
};
use crate::assets::{save_assets, AssetBundle};
use crate::autograd::{Graph, NodeId};
use crate::encoders;
use crate::error::{Error, Result};
use crate::features::FeatureSeq;
use crate::lm;
use crate::nn::{DropoutCtx, LoraCtx};
use crate::params::{rng_for, ParamStore};
use crate::projectors;
use crate::tensor::Matrix;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 1.0;

/// One teacher-forced training item: features plus token ids.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub feats: FeatureSeq,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub update_counts: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    pub final_loss: f64,
    /// Wall-clock time; excluded from serialization so reports stay
    /// byte-identical across reruns (timestamps belong in the sidecar log).
    #[serde(skip)]
    pub wall_seconds: f64,
}

fn lora_ctx(model: &AssembledModel, dropout: Option<DropoutCtx>) -> Option<LoraCtx> {
    model.lora().map(|cfg| LoraCtx {
        scale: cfg.scale(),
        dropout,
    })
}

/// Encoder forward as a graph node. Sequence encoders yield one row.
fn encoder_graph(
    g: &mut Graph,
    store: &ParamStore,
    spec: &EncoderSpec,
    feats: &FeatureSeq,
) -> Result<NodeId> {
    let x = g.constant(feats.frames.clone());
    match spec {
        EncoderSpec::ToneFrame(cfg) => encoders::encode_frames_graph(g, store, "encoder", cfg, x),
        EncoderSpec::ToneSequence(cfg) => {
            encoders::encode_sequence_graph(g, store, "encoder", cfg, x)
        }
    }
}

fn projector_graph(
    g: &mut Graph,
    store: &ParamStore,
    spec: &ProjectorSpec,
    enc: NodeId,
) -> Result<NodeId> {
    match spec {
        ProjectorSpec::Linear(cfg) => {
            projectors::project_linear_graph(g, store, "projector", cfg, enc)
        }
        ProjectorSpec::QFormer(cfg) => {
            projectors::project_qformer_graph(g, store, "projector", cfg, enc)
        }
    }
}

/// Builds the full encoder→projector→LM loss for one example. Used by the
/// gradient checker and by training steps whenever the encoder is live.
pub fn pipeline_loss_graph(
    g: &mut Graph,
    model: &AssembledModel,
    example: &TrainExample,
    mode: StageMode,
    lora_dropout: Option<DropoutCtx>,
) -> Result<(NodeId, usize)> {
    let prefix = match mode {
        StageMode::TextOnly => None,
        StageMode::CopyWarmup => Some(copy_prefix(g, model, &example.target)),
        StageMode::Paired => {
            let enc = encoder_graph(g, &model.store, &model.manifest.encoder, &example.feats)?;
            Some(projector_graph(g, &model.store, &model.manifest.projector, enc)?)
        }
    };
    let mut ctx = lora_ctx(model, lora_dropout);
    let (loss, count) = lm::lm_loss_graph(
        g,
        &model.store,
        &model.manifest.lm,
        prefix,
        &example.prompt,
        &example.target,
        (model.tokenizer.bos(), model.tokenizer.eos()),
        &mut ctx,
    )?;
    Ok((loss, count))
}

/// Prefix for the copy-warmup mode: the target's own token embeddings,
/// gathered through the live embedding table so both uses co-adapt.
fn copy_prefix(g: &mut Graph, model: &AssembledModel, target: &[usize]) -> NodeId {
    let table = g.param(
        "lm.embed",
        model.store.get("lm.embed"),
        model.store.is_trainable("lm.embed"),
    );
    g.embed_gather(table, target)
}

/// Runs the frozen encoder→projector path for one utterance, yielding the
/// LM prefix embeddings. Used by decoding and inference.
pub fn compute_prefix(model: &AssembledModel, feats: &FeatureSeq) -> Result<Matrix> {
    let mut g = Graph::new();
    let enc = encoder_graph(&mut g, &model.store, &model.manifest.encoder, feats)?;
    let proj = projector_graph(&mut g, &model.store, &model.manifest.projector, enc)?;
    Ok(g.value(proj).clone())
}

enum CachedInput {
    /// Encoder is live; keep raw features.
    Raw,
    /// Encoder frozen: cached encoder output, projector live.
    Encoded(Matrix),
    /// Encoder and projector frozen: cached prefix embeddings.
    Projected(Matrix),
}

struct StageData {
    inputs: Vec<CachedInput>,
}

fn precompute_stage_inputs(
    model: &AssembledModel,
    examples: &[TrainExample],
    stage: &StageSpec,
) -> Result<StageData> {
    let enc_live = stage.trainable.contains(&Component::Encoder);
    let proj_live = stage.trainable.contains(&Component::Projector);
    let inputs = examples
        .par_iter()
        .map(|ex| -> Result<CachedInput> {
            if stage.mode != StageMode::Paired || enc_live {
                return Ok(CachedInput::Raw);
            }
            let mut g = Graph::new();
            let enc = encoder_graph(&mut g, &model.store, &model.manifest.encoder, &ex.feats)?;
            if proj_live {
                return Ok(CachedInput::Encoded(g.value(enc).clone()));
            }
            let proj = projector_graph(&mut g, &model.store, &model.manifest.projector, enc)?;
            Ok(CachedInput::Projected(g.value(proj).clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StageData { inputs })
}

fn item_loss(
    model: &AssembledModel,
    example: &TrainExample,
    input: &CachedInput,
    mode: StageMode,
    lora_dropout: Option<DropoutCtx>,
) -> Result<(f64, usize, BTreeMap<String, Matrix>)> {
    let mut g = Graph::new();
    let (loss, count) = if mode != StageMode::Paired {
        pipeline_loss_graph(&mut g, model, example, mode, lora_dropout)?
    } else {
        match input {
            CachedInput::Raw => {
                pipeline_loss_graph(&mut g, model, example, StageMode::Paired, lora_dropout)?
            }
            CachedInput::Encoded(enc) => {
                let enc = g.constant(enc.clone());
                let prefix = projector_graph(&mut g, &model.store, &model.manifest.projector, enc)?;
                let mut ctx = lora_ctx(model, lora_dropout);
                lm::lm_loss_graph(
                    &mut g,
                    &model.store,
                    &model.manifest.lm,
                    Some(prefix),
                    &example.prompt,
                    &example.target,
                    (model.tokenizer.bos(), model.tokenizer.eos()),
                    &mut ctx,
                )?
            }
            CachedInput::Projected(prefix) => {
                let prefix = g.constant(prefix.clone());
                let mut ctx = lora_ctx(model, lora_dropout);
                lm::lm_loss_graph(
                    &mut g,
                    &model.store,
                    &model.manifest.lm,
                    Some(prefix),
                    &example.prompt,
                    &example.target,
                    (model.tokenizer.bos(), model.tokenizer.eos()),
                    &mut ctx,
                )?
            }
        }
    };
    let loss_value = g.value(loss).item();
    let grads = g.backward(loss);
    Ok((loss_value, count, grads))
}

pub(crate) struct Adam {
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    t: u64,
    lr: f64,
}

impl Adam {
    pub(crate) fn new(lr: f64) -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            lr,
        }
    }

    pub(crate) fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let p = store.get_mut(name);
            for ((pv, (mv, vv)), gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(g.data().iter())
            {
                *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
    }
}

fn clip_global_norm(grads: &mut BTreeMap<String, Matrix>) {
    let norm_sq: f64 = grads.values().map(|g| g.frobenius_sq()).sum();
    let norm = norm_sq.sqrt();
    if norm > CLIP_NORM {
        let s = CLIP_NORM / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Executes the stages in order and saves the tuned parameters. Returns
/// the report and the bundle (also written to `assets_path` when given).
/// Every stage draws from the shared example set.
pub fn train(
    model: &mut AssembledModel,
    examples: &[TrainExample],
    schedule: &[StageSpec],
    seed: u64,
    assets_path: Option<&Path>,
) -> Result<(TrainReport, AssetBundle)> {
    let datasets: Vec<&[TrainExample]> = schedule.iter().map(|_| examples).collect();
    train_staged(model, &datasets, schedule, seed, assets_path)
}

/// `train` with one dataset per stage (curriculum schedules).
pub fn train_staged(
    model: &mut AssembledModel,
    datasets: &[&[TrainExample]],
    schedule: &[StageSpec],
    seed: u64,
    assets_path: Option<&Path>,
) -> Result<(TrainReport, AssetBundle)> {
    if schedule.is_empty() {
        return Err(Error::Contract("stage schedule is empty".into()));
    }
    assert_eq!(datasets.len(), schedule.len(), "one dataset per stage");
    if datasets.iter().any(|d| d.is_empty()) {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    let started = Instant::now();
    let mut stage_reports = Vec::with_capacity(schedule.len());
    let mut global_step = 0usize;

    for (stage_idx, stage) in schedule.iter().enumerate() {
        let examples = datasets[stage_idx];
        apply_train_policy(model, &stage.trainable)?;
        if model.store.trainable_names().is_empty() {
            return Err(Error::EmptyTrainableSet);
        }
        let data = precompute_stage_inputs(model, examples, stage)?;
        let mut adam = Adam::new(stage.lr);
        let mut losses = Vec::with_capacity(stage.steps);

        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut epoch_rng = rng_for(seed, &format!("shuffle:{stage_idx}"));
        order.shuffle(&mut epoch_rng);
        let mut cursor = 0usize;

        for step in 0..stage.steps {
            // Assemble the batch, reshuffling at epoch boundaries.
            let mut batch = Vec::with_capacity(stage.batch_size);
            for _ in 0..stage.batch_size.max(1) {
                if cursor == order.len() {
                    order.shuffle(&mut epoch_rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }

            let dropout_p = model.lora().map(|l| l.dropout).unwrap_or(0.0);
            let results: Vec<Result<(f64, usize, BTreeMap<String, Matrix>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(bi, &idx)| {
                    let dropout = if dropout_p > 0.0 {
                        let mut r = rng_for(seed, &format!("drop:{stage_idx}:{step}:{bi}"));
                        Some(DropoutCtx::new(r.gen(), dropout_p))
                    } else {
                        None
                    };
                    item_loss(model, &examples[idx], &data.inputs[idx], stage.mode, dropout)
                })
                .collect();

            let mut total_loss = 0.0;
            let mut total_count = 0usize;
            let mut grads: BTreeMap<String, Matrix> = BTreeMap::new();
            for r in results {
                let (loss, count, item_grads) = r?;
                total_loss += loss * count as f64;
                total_count += count;
                for (name, g) in item_grads {
                    let scaled = g.scale(count as f64);
                    match grads.get_mut(&name) {
                        Some(acc) => acc.add_assign(&scaled),
                        None => {
                            grads.insert(name, scaled);
                        }
                    }
                }
            }
            let batch_loss = total_loss / total_count as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: global_step });
            }
            for g in grads.values_mut() {
                for v in g.data_mut() {
                    *v /= total_count as f64;
                }
            }
            clip_global_norm(&mut grads);
            adam.step(&mut model.store, &grads);
            losses.push(batch_loss);
            global_step += 1;
        }

        let mut update_counts = BTreeMap::new();
        for c in [
            Component::Encoder,
            Component::Projector,
            Component::Lm,
            Component::Lora,
        ] {
            let name = c.prefix().trim_end_matches('.').to_string();
            let count = if stage.trainable.contains(&c) {
                stage.steps as u64
            } else {
                0
            };
            update_counts.insert(name, count);
        }
        stage_reports.push(StageReport {
            name: stage.name.clone(),
            steps: stage.steps,
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            losses,
            update_counts,
        });
    }

    // The union of everything any stage tuned is what the bundle must hold.
    let mut tuned: std::collections::BTreeSet<Component> = std::collections::BTreeSet::new();
    for s in schedule {
        tuned.extend(s.trainable.iter().copied());
    }
    apply_train_policy(model, &tuned)?;
    let tuned_names = model.store.trainable_names();
    model.store.quantize_to_f32(&tuned_names);

    let report = TrainReport {
        final_loss: stage_reports
            .last()
            .map(|s| s.final_loss)
            .unwrap_or(f64::NAN),
        stages: stage_reports,
        wall_seconds: started.elapsed().as_secs_f64(),
    };

    let bundle = match assets_path {
        Some(path) => save_assets(model, path)?,
        None => {
            // Build the bundle in memory without touching disk.
            let dir = std::env::temp_dir().join(format!("slam-micro-{seed}-{}", std::process::id()));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let tmp = dir.join("assets.slma");
            let b = save_assets(model, &tmp)?;
            let _ = std::fs::remove_file(&tmp);
            b
        }
    };
    Ok((report, bundle))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdReport {
    /// None when the model has no trainable parameters (not applicable).
    pub max_rel_err: Option<f64>,
    pub checked: usize,
}

/// Central-difference gradient check (step 1e-5) on a seeded sample of
/// trainable scalars against the analytic backward pass.
pub fn finite_difference_check(
    model: &AssembledModel,
    example: &TrainExample,
    sample_size: usize,
    seed: u64,
) -> Result<FdReport> {
    let mut coords: Vec<(String, usize)> = Vec::new();
    for name in model.store.trainable_names() {
        for idx in 0..model.store.get(&name).len() {
            coords.push((name.clone(), idx));
        }
    }
    if coords.is_empty() {
        return Ok(FdReport {
            max_rel_err: None,
            checked: 0,
        });
    }
    let mut rng = rng_for(seed, "fd-check");
    let mut sample = Vec::with_capacity(sample_size.min(coords.len()));
    for _ in 0..sample_size.min(coords.len()) {
        sample.push(coords[rng.gen_range(0..coords.len())].clone());
    }

    let loss_at = |m: &AssembledModel| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = pipeline_loss_graph(&mut g, m, example, StageMode::Paired, None)?;
        Ok(g.value(loss).item())
    };

    let mut g = Graph::new();
    let (loss, _) = pipeline_loss_graph(&mut g, model, example, StageMode::Paired, None)?;
    let grads = g.backward(loss);

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for (name, idx) in &sample {
        let analytic = grads.get(name).map(|m| m.data()[*idx]).unwrap_or(0.0);
        let mut plus = model.clone();
        plus.store.get_mut(name).data_mut()[*idx] += h;
        let mut minus = model.clone();
        minus.store.get_mut(name).data_mut()[*idx] -= h;
        let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-10 {
            continue;
        }
        max_rel = max_rel.max((analytic - numeric).abs() / denom.max(1e-6));
    }
    Ok(FdReport {
        max_rel_err: Some(max_rel),
        checked: sample.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{build_model, parse_config};
    use crate::synth_corpus::{log_mel, synth_utterance, ToneSpec, DEFAULT_HOP, DEFAULT_N_MELS, DEFAULT_WIN};

    const DOC: &str = "
encoder: {kind: tone_frame, n_mels: 40, hidden_dim: 16, blocks: 1, heads: 2}
projector: {kind: linear, downsample_factor: 5, hidden_dim: 12}
lm: {embed_dim: 16, blocks: 1, heads: 2}
train: {trainable: [projector]}
";

    fn example(model: &AssembledModel, text: &str, seed: u64) -> TrainExample {
        let w = synth_utterance(text, &ToneSpec::with_snr(30.0), seed).unwrap();
        let feats = log_mel(&w, DEFAULT_N_MELS, DEFAULT_HOP, DEFAULT_WIN).unwrap();
        TrainExample {
            feats,
            prompt: vec![model.tokenizer.tag_id("<|en|>").unwrap()],
            target: model.tokenizer.tokenize(text).unwrap(),
        }
    }

    fn stage(trainable: &[Component], steps: usize) -> StageSpec {
        StageSpec {
            name: "s".into(),
            trainable: trainable.iter().copied().collect(),
            steps,
            lr: 3e-3,
            batch_size: 2,
            mode: StageMode::Paired,
            data: None,
        }
    }

    #[test]
    fn frozen_components_never_move() {
        let manifest = parse_config(DOC).unwrap();
        let mut model = build_model(&manifest, 11).unwrap();
        let before = model.store.clone();
        let exs = vec![example(&model, "ab cd", 1), example(&model, "ef gh", 2)];
        let (_report, _bundle) =
            train(&mut model, &exs, &[stage(&[Component::Projector], 20)], 3, None).unwrap();
        assert_eq!(model.store.linf_diff_prefix(&before, "encoder."), 0.0);
        assert_eq!(model.store.linf_diff_prefix(&before, "lm."), 0.0);
        assert!(model.store.linf_diff_prefix(&before, "projector.") > 0.0);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_runs() {
        let manifest = parse_config(DOC).unwrap();
        let exs_of = |model: &AssembledModel| {
            vec![example(model, "ab cd", 1), example(model, "ef gh", 2)]
        };
        let mut m1 = build_model(&manifest, 11).unwrap();
        let e1 = exs_of(&m1);
        let (r1, b1) = train(&mut m1, &e1, &[stage(&[Component::Projector], 15)], 3, None).unwrap();
        let mut m2 = build_model(&manifest, 11).unwrap();
        let e2 = exs_of(&m2);
        let (r2, b2) = train(&mut m2, &e2, &[stage(&[Component::Projector], 15)], 3, None).unwrap();
        assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
        assert_eq!(r1.stages[0].losses, r2.stages[0].losses);
        assert_eq!(b1.to_bytes(), b2.to_bytes());
    }

    #[test]
    fn stage_boundaries_and_update_counts_are_reported() {
        let doc = format!("{DOC}peft: {{rank: 2, alpha: 4.0}}\n");
        let manifest = parse_config(&doc).unwrap();
        let mut model = build_model(&manifest, 7).unwrap();
        let exs = vec![example(&model, "ab", 1), example(&model, "cd", 2)];
        let schedule = vec![
            stage(&[Component::Projector], 4),
            stage(&[Component::Projector, Component::Lora], 3),
            stage(&[Component::Projector, Component::Lora, Component::Encoder], 2),
        ];
        let (report, bundle) = train(&mut model, &exs, &schedule, 5, None).unwrap();
        assert_eq!(report.stages.len(), 3);
        assert_eq!(report.stages[0].update_counts["projector"], 4);
        assert_eq!(report.stages[0].update_counts["lora"], 0);
        assert_eq!(report.stages[1].update_counts["lora"], 3);
        assert_eq!(report.stages[2].update_counts["encoder"], 2);
        // Bundle covers the union of tuned components.
        assert!(bundle.entries.iter().any(|e| e.name.starts_with("projector.")));
        assert!(bundle.entries.iter().any(|e| e.name.starts_with("lora.")));
        assert!(bundle.entries.iter().any(|e| e.name.starts_with("encoder.")));
        assert!(!bundle.entries.iter().any(|e| e.name.starts_with("lm.")));
    }

    #[test]
    fn empty_trainable_set_is_refused() {
        let manifest = parse_config(DOC).unwrap();
        let mut model = build_model(&manifest, 7).unwrap();
        let exs = vec![example(&model, "ab", 1)];
        let err = train(&mut model, &exs, &[stage(&[], 1)], 5, None).unwrap_err();
        assert!(matches!(err, Error::EmptyTrainableSet));
    }

    #[test]
    fn empty_dataset_is_refused() {
        let manifest = parse_config(DOC).unwrap();
        let mut model = build_model(&manifest, 7).unwrap();
        let err = train(&mut model, &[], &[stage(&[Component::Projector], 1)], 5, None)
            .unwrap_err();
        assert!(err.to_string().contains("empty"));
    }

    #[test]
    fn memorized_batch_loss_trends_down() {
        let manifest = parse_config(DOC).unwrap();
        let mut model = build_model(&manifest, 2).unwrap();
        let exs = vec![example(&model, "ab cd", 9)];
        let mut st = stage(&[Component::Projector], 120);
        st.batch_size = 1;
        let (report, _) = train(&mut model, &exs, &[st], 4, None).unwrap();
        let losses = &report.stages[0].losses;
        // After burn-in, allow 5% transient increases but demand progress.
        let mut max_violation = 0.0f64;
        let mut best = losses[50];
        for &l in &losses[50..] {
            if l > best * 1.05 {
                max_violation = max_violation.max(l / best - 1.0);
            }
            best = best.min(l);
        }
        assert_eq!(max_violation, 0.0, "loss rose >5% after burn-in");
        assert!(losses[losses.len() - 1] < losses[0]);
    }

    #[test]
    fn fd_check_passes_for_projector_only_and_lora_only() {
        let doc = format!("{DOC}peft: {{rank: 2, alpha: 4.0}}\n");
        let manifest = parse_config(&doc).unwrap();
        let mut model = build_model(&manifest, 6).unwrap();
        let ex = example(&model, "ab cd", 3);

        let report = finite_difference_check(&model, &ex, 24, 1).unwrap();
        assert!(report.max_rel_err.unwrap() <= 1e-3, "{report:?}");

        // LoRA-only sampling domain.
        apply_train_policy(&mut model, &std::collections::BTreeSet::from([Component::Lora]))
            .unwrap();
        // Zero-init B means d(loss)/dB of the A-path is the only signal;
        // give the factors some mass first so the check is non-trivial.
        for name in model.store.names_with_prefix("lora.") {
            let m = model.store.get_mut(&name);
            let mut r = rng_for(3, &name);
            for v in m.data_mut() {
                *v = r.gen_range(-0.1..0.1);
            }
        }
        let report = finite_difference_check(&model, &ex, 16, 2).unwrap();
        assert!(report.max_rel_err.unwrap() <= 1e-3, "{report:?}");
        for name in grads_domain(&model) {
            assert!(name.starts_with("lora."));
        }
    }

    fn grads_domain(model: &AssembledModel) -> Vec<String> {
        model.store.trainable_names()
    }

    #[test]
    fn all_frozen_model_reports_not_applicable() {
        let manifest = parse_config(DOC).unwrap();
        let mut model = build_model(&manifest, 6).unwrap();
        apply_train_policy(&mut model, &std::collections::BTreeSet::new()).unwrap();
        let ex = example(&model, "ab", 3);
        let report = finite_difference_check(&model, &ex, 8, 1).unwrap();
        assert_eq!(report.max_rel_err, None);
        assert_eq!(report.checked, 0);
    }
}
