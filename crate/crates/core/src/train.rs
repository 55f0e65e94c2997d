//! The three optimisation phases and recognizer training.

use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};
use vidpriv_tensor::{Binder, Graph, ParamStore, RngState, Tensor};

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::{ExperimentConfig, PhasePlan};
use crate::data::{epoch_batches, Batch, Dataset, MARKER_NAMES};
use crate::error::{Error, Result};
use crate::losses::{action_loss, adversarial_objective, init_objective};
use crate::metrics::{cmap, extract_views, f1, top1_accuracy, ClassAp, ClassMetric, MetricsReport};
use crate::model::{DecisionMode, PrivacyTransformer};
use crate::nn::{init_linear, linear};
use crate::optim::{cosine_lr, AdamW};
use crate::recognizer::{build_recognizer, Recognizer, RecognizerKind, RecognizerSpec};
use crate::sparsifier::sparsification_loss;
use crate::tokenizer::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Adversarial,
    Eval,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Adversarial => "adversarial",
            Phase::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Phase::Init),
            "adversarial" => Ok(Phase::Adversarial),
            "eval" => Ok(Phase::Eval),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

/// Per-step trace of a phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseLog {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub optimizer_steps: u64,
}

impl PhaseLog {
    fn record(&mut self, loss: f64, lr: f64, steps: u64) {
        self.losses.push(loss);
        self.learning_rates.push(lr);
        self.optimizer_steps = steps;
    }
}

/// Checksums taken around the two halves of one adversarial step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsolationCheck {
    /// Transformer checksum before and after the recognizer update.
    pub model_during_recognizers: (u64, u64),
    /// Recognizer checksums before and after the transformer update.
    pub recognizers_during_model: (u64, u64),
}

impl IsolationCheck {
    pub fn holds(&self) -> bool {
        self.model_during_recognizers.0 == self.model_during_recognizers.1
            && self.recognizers_during_model.0 == self.recognizers_during_model.1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversarialLog {
    pub model: PhaseLog,
    pub action_losses: Vec<f64>,
    pub privacy_losses: Vec<f64>,
    pub isolation: Vec<IsolationCheck>,
}

/// Where and how a phase persists its state.
#[derive(Clone, Copy, Debug)]
pub struct PhaseContext<'a> {
    pub config: &'a ExperimentConfig,
    /// Directory for per-epoch checkpoints; `None` disables them.
    pub checkpoint_dir: Option<&'a Path>,
}

/// The transformer together with its optimiser and the phase-1 action head.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: PrivacyTransformer,
    pub optimizer: AdamW,
    /// Linear action head on pooled tokens, used only during initialisation.
    pub init_head: ParamStore,
    pub head_optimizer: AdamW,
}

impl TrainState {
    pub fn new(model: PrivacyTransformer, config: &ExperimentConfig, rng: &mut RngState) -> Self {
        let mut init_head = ParamStore::new();
        init_linear(&mut init_head, "init", model.shape.config.dim, config.data.classes, rng);
        TrainState {
            model,
            optimizer: AdamW::from_config(&config.training),
            init_head,
            head_optimizer: AdamW::from_config(&config.training),
        }
    }

    pub fn to_checkpoint(&self, ctx: &PhaseContext<'_>, phase: Phase, epoch: usize, rng: &RngState) -> Result<Checkpoint> {
        let mut tensors = ParamStore::new();
        tensors.extend_prefixed("model.", &self.model.params);
        tensors.extend_prefixed("head.", &self.init_head);
        tensors.extend_prefixed("opt.", &self.optimizer.state());
        tensors.extend_prefixed("head-opt.", &self.head_optimizer.state());
        Ok(Checkpoint {
            meta: CheckpointMeta {
                phase: phase.name().into(),
                epoch,
                optimizer_steps: self.optimizer.steps(),
                record_count: tensors.len(),
                rng: Some(rng.snapshot()),
                config: serde_json::to_value(ctx.config)?,
            },
            tensors,
        })
    }

    /// Restores parameters and optimiser moments written by [`Self::to_checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let model = ck.tensors.with_prefix("model.");
        for name in self.model.params.names() {
            let t = model.get(name).ok_or_else(|| Error::Data(format!("checkpoint lacks model.{name}")))?;
            if t.shape() != self.model.params.get(name).expect("listed").shape() {
                return Err(Error::Data(format!("checkpoint shape mismatch for model.{name}")));
            }
        }
        self.model.params = model;
        let head = ck.tensors.with_prefix("head.");
        if !head.is_empty() {
            self.init_head = head;
        }
        self.optimizer
            .restore_state(&ck.tensors.with_prefix("opt."), ck.meta.optimizer_steps);
        let head_state = ck.tensors.with_prefix("head-opt.");
        let head_steps = if head_state.is_empty() { 0 } else { ck.meta.optimizer_steps };
        self.head_optimizer.restore_state(&head_state, head_steps);
        Ok(())
    }

    fn save(&self, ctx: &PhaseContext<'_>, phase: Phase, epoch: usize, rng: &RngState) -> Result<()> {
        if let Some(dir) = ctx.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let ck = self.to_checkpoint(ctx, phase, epoch, rng)?;
            save_checkpoint(&ck, &dir.join(format!("{}.ckpt", phase.name())))?;
        }
        Ok(())
    }
}

fn batch_of(data: &[VideoClip], idx: &[usize]) -> Result<Batch> {
    let clips: Vec<&VideoClip> = idx.iter().map(|&i| &data[i]).collect();
    Batch::from_clips(&clips)
}

fn check_plan(plan: &PhasePlan) -> Result<()> {
    if plan.epochs == 0 || plan.batch_size == 0 {
        return Err(Error::Config("phase plan needs epochs > 0 and batch size > 0".into()));
    }
    Ok(())
}

fn split_grads(
    grads: std::collections::BTreeMap<String, Tensor>,
    store: &ParamStore,
) -> (std::collections::BTreeMap<String, Tensor>, std::collections::BTreeMap<String, Tensor>) {
    grads.into_iter().partition(|(k, _)| store.contains(k))
}

/// Phase 1: keep-ratio penalty plus the transformer's own action loss,
/// with the anonymizer warmed up on pixel reconstruction of kept tubelets.
pub fn run_phase_init(
    state: &mut TrainState,
    data: &[VideoClip],
    ctx: &PhaseContext<'_>,
    rng: &mut RngState,
) -> Result<PhaseLog> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let t = &ctx.config.training;
    let plan = &t.init;
    check_plan(plan)?;
    let shape = state.model.shape.clone();
    let alpha = shape.config.sparsity.alpha;
    let base = t.base_lr(plan.batch_size);
    let total = plan.epochs * data.len().div_ceil(plan.batch_size);
    let mut log = PhaseLog::default();
    for epoch in 0..plan.epochs {
        for idx in epoch_batches(data.len(), plan.batch_size, rng) {
            let batch = batch_of(data, &idx)?;
            let b = batch.len();
            let g = Graph::new();
            let p = Binder::trainable(&g, &state.model.params);
            let h = Binder::trainable(&g, &state.init_head);
            let raw = g.input(batch.pixels.clone());
            let pass = shape.forward_masked(&p, raw, DecisionMode::Sample(rng))?;
            let last = *pass.decisions.last().expect("at least one block");
            let spars = sparsification_loss(&pass.decisions, alpha)?;
            let mask = last.reshape(&[b, shape.layout.tokens()])?;
            let pooled = pass.tokens.masked_mean(mask, 1)?;
            let action = action_loss(linear(&h, "init", pooled)?, &batch.actions)?;
            let mut loss = init_objective(spars, action)?;
            if t.reconstruction > 0.0 {
                let keep = shape.layout.expand_decision(g.constant(last.value().as_ref().clone()))?;
                let keep = keep.value().as_ref().clone();
                let target = Tensor::from_fn(keep.shape(), |i| keep.data()[i] * batch.pixels.data()[i]);
                let diff = pass.anonymized.mul(g.constant(keep))?.sub(g.constant(target))?;
                loss = loss.add(diff.mul(diff)?.mean_all()?.scale(t.reconstruction)?)?;
            }
            let value = loss.item() as f64;
            let (model_grads, head_grads) = split_grads(g.backward(loss)?.into_named(), &state.model.params);
            let lr = cosine_lr(log.learning_rates.len(), total, base);
            state.optimizer.step(&mut state.model.params, &model_grads, lr)?;
            state.head_optimizer.step(&mut state.init_head, &head_grads, lr)?;
            log.record(value, lr, log.optimizer_steps + 1);
        }
        info!("init epoch {epoch}: last loss {:.4}", log.losses.last().copied().unwrap_or(f64::NAN));
        state.save(ctx, Phase::Init, epoch, rng)?;
    }
    Ok(log)
}

/// The two auxiliary recognizers of the adversarial phase.
#[derive(Clone, Debug)]
pub struct Adversaries {
    pub action: Recognizer,
    pub privacy: Recognizer,
    pub action_optimizer: AdamW,
    pub privacy_optimizer: AdamW,
}

impl Adversaries {
    pub fn new(config: &ExperimentConfig, rng: &mut RngState) -> Result<Self> {
        let spec = |k| RecognizerSpec::new(k, &config.data, &config.recognizer);
        Ok(Adversaries {
            action: build_recognizer(spec(RecognizerKind::Action), &mut rng.derive(1))?,
            privacy: build_recognizer(spec(RecognizerKind::VideoPrivacy), &mut rng.derive(2))?,
            action_optimizer: AdamW::from_config(&config.training),
            privacy_optimizer: AdamW::from_config(&config.training),
        })
    }

    pub fn checksum(&self) -> u64 {
        self.action.params.checksum() ^ self.privacy.params.checksum().rotate_left(1)
    }
}

/// One gradient step of a recognizer on fixed input pixels. Returns the loss.
pub fn recognizer_step(rec: &mut Recognizer, opt: &mut AdamW, pixels: &Tensor, batch: &Batch, lr: f64) -> Result<f64> {
    let g = Graph::new();
    let p = Binder::trainable(&g, &rec.params);
    let loss = rec.loss(&p, g.input(pixels.clone()), batch)?;
    let value = loss.item() as f64;
    let grads = g.backward(loss)?.into_named();
    opt.step(&mut rec.params, &grads, lr)?;
    Ok(value)
}

/// Phase 2: per batch, (a) update both recognizers on the transformed video
/// with the transformer untouched, then (b) update the transformer against
/// the frozen, just-updated recognizers.
pub fn run_phase_adversarial(
    state: &mut TrainState,
    adversaries: &mut Adversaries,
    data: &[VideoClip],
    ctx: &PhaseContext<'_>,
    rng: &mut RngState,
) -> Result<AdversarialLog> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let t = &ctx.config.training;
    let plan = &t.adversarial;
    check_plan(plan)?;
    let shape = state.model.shape.clone();
    let alpha = shape.config.sparsity.alpha;
    let base = t.base_lr(plan.batch_size);
    let total = plan.epochs * data.len().div_ceil(plan.batch_size);
    let mut log = AdversarialLog::default();
    for epoch in 0..plan.epochs {
        for idx in epoch_batches(data.len(), plan.batch_size, rng) {
            let batch = batch_of(data, &idx)?;
            let lr = cosine_lr(log.model.learning_rates.len(), total, base);
            let g = Graph::new();
            let p = Binder::trainable(&g, &state.model.params);
            let pass = shape.forward_masked(&p, g.input(batch.pixels.clone()), DecisionMode::Sample(rng))?;
            let transformed = pass.video.value().as_ref().clone();

            let model_before = state.model.params.checksum();
            let a = &mut *adversaries;
            let la = recognizer_step(&mut a.action, &mut a.action_optimizer, &transformed, &batch, lr)?;
            let lp = recognizer_step(&mut a.privacy, &mut a.privacy_optimizer, &transformed, &batch, lr)?;
            let model_after = state.model.params.checksum();

            let rec_before = adversaries.checksum();
            let fa = Binder::frozen(&g, &adversaries.action.params);
            let fp = Binder::frozen(&g, &adversaries.privacy.params);
            let spars = sparsification_loss(&pass.decisions, alpha)?;
            let action = adversaries.action.loss(&fa, pass.video, &batch)?;
            let privacy = adversaries.privacy.loss(&fp, pass.video, &batch)?;
            let loss = adversarial_objective(spars, action, privacy, t.weights)?;
            let value = loss.item() as f64;
            let grads = g.backward(loss)?.into_named();
            if grads.keys().any(|k| !state.model.params.contains(k)) {
                return Err(Error::Config("adversarial step produced a recognizer gradient".into()));
            }
            state.optimizer.step(&mut state.model.params, &grads, lr)?;
            let rec_after = adversaries.checksum();

            log.model.record(value, lr, log.model.optimizer_steps + 1);
            log.action_losses.push(la);
            log.privacy_losses.push(lp);
            log.isolation.push(IsolationCheck {
                model_during_recognizers: (model_before, model_after),
                recognizers_during_model: (rec_before, rec_after),
            });
        }
        info!(
            "adversarial epoch {epoch}: objective {:.4}, privacy loss {:.4}",
            log.model.losses.last().copied().unwrap_or(f64::NAN),
            log.privacy_losses.last().copied().unwrap_or(f64::NAN)
        );
        state.save(ctx, Phase::Adversarial, epoch, rng)?;
    }
    Ok(log)
}

/// What phase 3 applies to every video before the fresh recognizers see it.
#[derive(Clone, Copy, Debug)]
pub enum Transform<'a> {
    /// Raw videos; the control arm.
    Identity,
    Model(&'a PrivacyTransformer),
}

impl Transform<'_> {
    /// The transformed clip and its retained token count (`None` for identity).
    pub fn apply(&self, pixels: &Tensor) -> Result<(Tensor, Option<usize>)> {
        match self {
            Transform::Identity => Ok((pixels.clone(), None)),
            Transform::Model(m) => {
                let pass = m.transform_clip(pixels)?;
                Ok((pass.video, Some(pass.retained.len())))
            }
        }
    }
}

/// Trains `rec` from its current weights on `clips`; returns the mean loss of each epoch.
pub fn train_recognizer(
    rec: &mut Recognizer,
    clips: &[VideoClip],
    plan: &PhasePlan,
    config: &ExperimentConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    if clips.is_empty() {
        return Err(Error::EmptyData);
    }
    check_plan(plan)?;
    let mut opt = AdamW::from_config(&config.training);
    let base = config.training.base_lr(plan.batch_size);
    let total = plan.epochs * clips.len().div_ceil(plan.batch_size);
    let mut step = 0;
    let mut epochs = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let mut sum = 0.0;
        let batches = epoch_batches(clips.len(), plan.batch_size, rng);
        let count = batches.len();
        for idx in batches {
            let batch = batch_of(clips, &idx)?;
            sum += recognizer_step(rec, &mut opt, &batch.pixels, &batch, cosine_lr(step, total, base))?;
            step += 1;
        }
        epochs.push(sum / count as f64);
        debug!("{:?} recognizer epoch {epoch}: loss {:.4}", rec.spec.kind, sum / count as f64);
    }
    Ok(epochs)
}

/// Scores of every view of every video, views of one video adjacent.
fn view_scores(rec: &Recognizer, views: &[Tensor]) -> Result<Tensor> {
    const CHUNK: usize = 16;
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in views.chunks(CHUNK) {
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].shape());
        let data = chunk.iter().flat_map(|v| v.data().iter().copied()).collect();
        let out = rec.recognize(&Tensor::from_vec(&shape, data)?)?;
        width = out.shape()[1];
        rows.extend_from_slice(out.data());
    }
    Ok(Tensor::from_vec(&[views.len(), width], rows)?)
}

fn average_views(scores: &Tensor, views: usize) -> Result<Tensor> {
    let &[rows, width] = scores.shape() else { unreachable!("scores are 2-d") };
    let videos = rows / views;
    let data = (0..videos * width)
        .map(|i| {
            let (v, j) = (i / width, i % width);
            (0..views).map(|k| scores.data()[(v * views + k) * width + j]).sum::<f32>() / views as f32
        })
        .collect();
    Ok(Tensor::from_vec(&[videos, width], data)?)
}

/// Privacy metrics of a per-frame attacker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub cmap: f64,
    pub f1: f64,
    pub per_class_ap: Vec<ClassMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub frame: Option<FrameReport>,
    /// Mean retained tokens per transformed test clip; `None` for identity.
    pub mean_retained: Option<f64>,
    /// Last-epoch training loss of the video privacy recognizer.
    pub privacy_train_loss: f64,
    pub action_train_loss: f64,
}

struct Transformed {
    train: Vec<VideoClip>,
    test_views: Vec<Tensor>,
    retained: Vec<usize>,
}

fn transform_dataset(transform: Transform<'_>, dataset: &Dataset, config: &ExperimentConfig) -> Result<Transformed> {
    let d = &config.data;
    let clip = [d.frames, d.height, d.width];
    let (clips, crops) = (config.eval.clips, config.eval.crops);
    let mut train = Vec::with_capacity(dataset.train.len());
    for c in &dataset.train {
        let view = extract_views(&c.pixels, clip, 1, 1)?.remove(0);
        train.push(VideoClip {
            pixels: transform.apply(&view)?.0,
            action: c.action,
            privacy: c.privacy.clone(),
        });
    }
    let mut test_views = Vec::with_capacity(dataset.test.len() * clips * crops);
    let mut retained = Vec::new();
    for c in &dataset.test {
        for view in extract_views(&c.pixels, clip, clips, crops)? {
            let (v, k) = transform.apply(&view)?;
            test_views.push(v);
            retained.extend(k);
        }
    }
    Ok(Transformed {
        train,
        test_views,
        retained,
    })
}

/// Privacy cMAP and mean retained tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub ap: ClassAp,
    pub mean_retained: Option<f64>,
}

/// The privacy half of phase 3 alone: a fresh video privacy recognizer
/// trained and scored on transformed data. Draws the same recognizer
/// streams as [`run_phase_eval`], so both see identically seeded attackers.
pub fn run_privacy_attack(
    transform: Transform<'_>,
    dataset: &Dataset,
    config: &ExperimentConfig,
    rng: &mut RngState,
) -> Result<AttackOutcome> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::EmptyData);
    }
    let views = config.eval.clips * config.eval.crops;
    let data = transform_dataset(transform, dataset, config)?;
    let spec = RecognizerSpec::new(RecognizerKind::VideoPrivacy, &config.data, &config.recognizer);
    let mut privacy = build_recognizer(spec, &mut rng.derive(21))?;
    train_recognizer(&mut privacy, &data.train, &config.training.eval, config, &mut rng.derive(22))?;
    let scores = average_views(&view_scores(&privacy, &data.test_views)?, views)?;
    let flags: Vec<Vec<bool>> = dataset.test.iter().map(|c| c.privacy.clone()).collect();
    Ok(AttackOutcome {
        ap: cmap(&scores, &flags)?,
        mean_retained: mean_of(&data.retained),
    })
}

fn mean_of(counts: &[usize]) -> Option<f64> {
    (!counts.is_empty()).then(|| counts.iter().sum::<usize>() as f64 / counts.len() as f64)
}

/// Phase 3: transform every video, train fresh recognizers on the
/// transformed training split and score them on the transformed test split.
pub fn run_phase_eval(
    transform: Transform<'_>,
    dataset: &Dataset,
    config: &ExperimentConfig,
    seed: u64,
    rng: &mut RngState,
) -> Result<EvalOutcome> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::EmptyData);
    }
    let plan = &config.training.eval;
    let views = config.eval.clips * config.eval.crops;
    let data = transform_dataset(transform, dataset, config)?;
    let spec = |k| RecognizerSpec::new(k, &config.data, &config.recognizer);

    let mut action = build_recognizer(spec(RecognizerKind::Action), &mut rng.derive(11))?;
    let action_losses = train_recognizer(&mut action, &data.train, plan, config, &mut rng.derive(12))?;
    let labels: Vec<usize> = dataset.test.iter().map(|c| c.action).collect();
    let top1 = top1_accuracy(&view_scores(&action, &data.test_views)?, &labels, views)?;

    let flags: Vec<Vec<bool>> = dataset.test.iter().map(|c| c.privacy.clone()).collect();
    let mut privacy = build_recognizer(spec(RecognizerKind::VideoPrivacy), &mut rng.derive(21))?;
    let privacy_losses = train_recognizer(&mut privacy, &data.train, plan, config, &mut rng.derive(22))?;
    let scores = average_views(&view_scores(&privacy, &data.test_views)?, views)?;
    let ap = cmap(&scores, &flags)?;
    let f = f1(&scores, &flags, config.eval.f1_threshold)?;
    let report = MetricsReport::new(seed, top1, &ap, &f, &MARKER_NAMES, serde_json::to_value(config)?);

    let frame = if config.eval.frame_privacy {
        let mut rec = build_recognizer(spec(RecognizerKind::FramePrivacy), &mut rng.derive(31))?;
        train_recognizer(&mut rec, &data.train, plan, config, &mut rng.derive(32))?;
        let scores = average_views(&view_scores(&rec, &data.test_views)?, views)?;
        let ap = cmap(&scores, &flags)?;
        let fr = MetricsReport::new(seed, 0.0, &ap, &f1(&scores, &flags, config.eval.f1_threshold)?, &MARKER_NAMES, serde_json::Value::Null);
        Some(FrameReport {
            cmap: fr.cmap,
            f1: fr.f1,
            per_class_ap: fr.per_class_ap,
        })
    } else {
        None
    };
    let mean_retained = mean_of(&data.retained);
    Ok(EvalOutcome {
        report,
        frame,
        mean_retained,
        privacy_train_loss: privacy_losses.last().copied().unwrap_or(f64::NAN),
        action_train_loss: action_losses.last().copied().unwrap_or(f64::NAN),
    })
}
