//! End-to-end orchestration of one seeded experiment: data, the three
//! phases, and the raw-video control.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use vidpriv_tensor::RngState;

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::model::{ModelShape, PrivacyTransformer};
use crate::tokenizer::TubeletLayout;
use crate::train::{
    run_phase_adversarial, run_phase_eval, run_phase_init, run_privacy_attack, Adversaries, AdversarialLog, AttackOutcome,
    EvalOutcome, PhaseContext, PhaseLog, TrainState, Transform,
};

/// Rng streams of one seeded run, one per consumer.
pub mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const INIT_HEAD: u64 = 2;
    pub const PHASE_INIT: u64 = 3;
    pub const ADVERSARIES: u64 = 4;
    pub const PHASE_ADVERSARIAL: u64 = 5;
    pub const PHASE_EVAL: u64 = 6;
}

pub fn model_shape(config: &ExperimentConfig) -> Result<ModelShape> {
    let d = &config.data;
    let layout = TubeletLayout::new(d.frames, d.height, d.width, config.model.tubelet)?;
    ModelShape::new(config.model.clone(), layout)
}

/// Fresh transformer and training state for `seed`.
pub fn fresh_state(config: &ExperimentConfig, seed: u64) -> Result<TrainState> {
    let root = RngState::new(seed);
    let model = PrivacyTransformer::new(model_shape(config)?, &mut root.derive(stream::MODEL_INIT));
    Ok(TrainState::new(model, config, &mut root.derive(stream::INIT_HEAD)))
}

/// Phases 1 and 2 on the training split.
pub fn train_transformer(
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(TrainState, PhaseLog, AdversarialLog)> {
    config.validate()?;
    let root = RngState::new(seed);
    let ctx = PhaseContext { config, checkpoint_dir };
    let mut state = fresh_state(config, seed)?;
    let init = run_phase_init(&mut state, &dataset.train, &ctx, &mut root.derive(stream::PHASE_INIT))?;
    let mut adversaries = Adversaries::new(config, &mut root.derive(stream::ADVERSARIES))?;
    let adversarial = run_phase_adversarial(
        &mut state,
        &mut adversaries,
        &dataset.train,
        &ctx,
        &mut root.derive(stream::PHASE_ADVERSARIAL),
    )?;
    Ok((state, init, adversarial))
}

/// Phase 3 with the same recognizer seeds for every transform, so arms are paired.
pub fn evaluate(transform: Transform<'_>, config: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<EvalOutcome> {
    let root = RngState::new(seed);
    run_phase_eval(transform, dataset, config, seed, &mut root.derive(stream::PHASE_EVAL))
}

/// Privacy-only evaluation, paired with [`evaluate`] for the same seed.
pub fn privacy_attack(
    transform: Transform<'_>,
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<AttackOutcome> {
    let root = RngState::new(seed);
    run_privacy_attack(transform, dataset, config, &mut root.derive(stream::PHASE_EVAL))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub raw: EvalOutcome,
    pub transformed: EvalOutcome,
    pub init: PhaseLog,
    pub adversarial: AdversarialLog,
    /// Checksum of the trained transformer parameters.
    pub model_checksum: u64,
}

/// The whole protocol for one seed. With `out`, checkpoints and reports are
/// written below `out/seed-{seed}`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<(SeedRun, TrainState)> {
    let dataset = Dataset::generate(&config.data, seed)?;
    let dir = out.map(|o| o.join(format!("seed-{seed}")));
    let (state, init, adversarial) = train_transformer(config, &dataset, seed, dir.as_deref())?;
    info!("seed {seed}: transformer trained, evaluating");
    let transformed = evaluate(Transform::Model(&state.model), config, &dataset, seed)?;
    let raw = evaluate(Transform::Identity, config, &dataset, seed)?;
    if let Some(dir) = &dir {
        transformed.report.write(dir, "transformed")?;
        raw.report.write(dir, "raw")?;
    }
    let run = SeedRun {
        seed,
        raw,
        transformed,
        init,
        adversarial,
        model_checksum: state.model.params.checksum(),
    };
    Ok((run, state))
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
