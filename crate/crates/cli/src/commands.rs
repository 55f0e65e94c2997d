use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use log::info;
use serde::Serialize;
use vidpriv::checkpoint::load_checkpoint;
use vidpriv::data::Dataset;
use vidpriv::frames::dump_frames;
use vidpriv::pipeline::{evaluate, fresh_state, run_seed, stream};
use vidpriv::train::{run_phase_adversarial, run_phase_init, Adversaries, EvalOutcome, PhaseContext, TrainState, Transform};
use vidpriv::ExperimentConfig;
use vidpriv_tensor::RngState;

use crate::{Cli, Command, PhaseArg, SweepArg};

struct Run {
    config: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn dataset(&self, dir: Option<&Path>) -> Result<Dataset> {
        match dir {
            Some(dir) => {
                let ds = Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))?;
                ensure!(
                    ds.config == self.config.data,
                    "dataset in {} was generated with a different data config",
                    dir.display()
                );
                Ok(ds)
            }
            None => Ok(Dataset::generate(&self.config.data, self.seed)?),
        }
    }

    fn state_from(&self, path: &Path) -> Result<TrainState> {
        let ck = load_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        ensure!(
            ck.meta.config == serde_json::to_value(&self.config)?,
            "checkpoint {} was written with a different config",
            path.display()
        );
        let mut state = fresh_state(&self.config, self.seed)?;
        state.restore(&ck)?;
        Ok(state)
    }

    fn ctx(&self) -> PhaseContext<'_> {
        PhaseContext {
            config: &self.config,
            checkpoint_dir: Some(&self.out),
        }
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::desk(),
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => *config.seeds.first().context("config lists no seeds")?,
    };
    let run = Run { config, seed, out: cli.out };
    match cli.command {
        Command::GenData => gen_data(&run),
        Command::Train { phase, data, from } => train(&run, phase, data.as_deref(), from),
        Command::Transform { checkpoint, data, index } => transform(&run, &checkpoint, data.as_deref(), index),
        Command::Eval { checkpoint, data } => eval(&run, checkpoint.as_deref(), data.as_deref()),
        Command::Ablate { sweep, values } => ablate(&run, sweep, values),
        Command::GradCheck { instances } => crate::gradcheck::run(instances),
    }
}

fn gen_data(run: &Run) -> Result<ExitCode> {
    let manifest = Dataset::write(&run.config.data, run.seed, &run.out)?;
    println!(
        "wrote {} clips (seed {}) to {}",
        manifest.samples.len(),
        run.seed,
        run.out.join("manifest.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(run: &Run, phase: PhaseArg, data: Option<&Path>, from: Option<PathBuf>) -> Result<ExitCode> {
    let dataset = run.dataset(data)?;
    let root = RngState::new(run.seed);
    match phase {
        PhaseArg::Init => {
            let mut state = fresh_state(&run.config, run.seed)?;
            let log = run_phase_init(&mut state, &dataset.train, &run.ctx(), &mut root.derive(stream::PHASE_INIT))?;
            println!(
                "init: {} steps, final loss {:.4}, checkpoint {}",
                log.optimizer_steps,
                log.losses.last().copied().unwrap_or(f64::NAN),
                run.out.join("init.ckpt").display()
            );
        }
        PhaseArg::Adversarial => {
            let from = from.unwrap_or_else(|| run.out.join("init.ckpt"));
            let mut state = run.state_from(&from)?;
            let mut adversaries = Adversaries::new(&run.config, &mut root.derive(stream::ADVERSARIES))?;
            let log = run_phase_adversarial(
                &mut state,
                &mut adversaries,
                &dataset.train,
                &run.ctx(),
                &mut root.derive(stream::PHASE_ADVERSARIAL),
            )?;
            let broken = log.isolation.iter().filter(|c| !c.holds()).count();
            ensure!(broken == 0, "{broken} adversarial steps updated the wrong party");
            println!(
                "adversarial: {} steps, final objective {:.4}, privacy loss {:.4}, checkpoint {}",
                log.model.optimizer_steps,
                log.model.losses.last().copied().unwrap_or(f64::NAN),
                log.privacy_losses.last().copied().unwrap_or(f64::NAN),
                run.out.join("adversarial.ckpt").display()
            );
        }
        PhaseArg::Eval => {
            let from = from.unwrap_or_else(|| run.out.join("adversarial.ckpt"));
            let state = run.state_from(&from)?;
            let transformed = evaluate(Transform::Model(&state.model), &run.config, &dataset, run.seed)?;
            let raw = evaluate(Transform::Identity, &run.config, &dataset, run.seed)?;
            transformed.report.write(&run.out, "transformed")?;
            raw.report.write(&run.out, "raw")?;
            print_rows(&[("raw", &raw), ("transformed", &transformed)])?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ArmRow<'a> {
    arm: &'a str,
    top1: f64,
    cmap: f64,
    f1: f64,
    frame_cmap: Option<f64>,
    retained: Option<f64>,
}

fn print_rows(arms: &[(&str, &EvalOutcome)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for (arm, o) in arms {
        w.serialize(ArmRow {
            arm,
            top1: o.report.top1,
            cmap: o.report.cmap,
            f1: o.report.f1,
            frame_cmap: o.frame.as_ref().map(|f| f.cmap),
            retained: o.mean_retained,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn transform(run: &Run, checkpoint: &Path, data: Option<&Path>, index: usize) -> Result<ExitCode> {
    let dataset = run.dataset(data)?;
    let clip = dataset
        .test
        .get(index)
        .with_context(|| format!("test split has {} clips, no index {index}", dataset.test.len()))?;
    let state = run.state_from(checkpoint)?;
    let pass = state.model.transform_clip(&clip.pixels)?;
    let last = pass.decisions.last().context("model has no sparsification block")?;
    let frames = run.out.join("frames");
    let layout = &state.model.shape.layout;
    dump_frames(&clip.pixels, None, &frames.join("raw"))?;
    dump_frames(&clip.pixels, Some((last, layout)), &frames.join("sparsified"))?;
    let written = dump_frames(&pass.video, None, &frames.join("transformed"))?;
    println!(
        "clip {index}: kept {} of {} tubelets, {} frames per view under {}",
        pass.retained.len(),
        layout.tokens(),
        written.len(),
        frames.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct Headline {
    top1: f64,
    cmap: f64,
    f1: f64,
}

fn eval(run: &Run, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<ExitCode> {
    let dataset = run.dataset(data)?;
    let state = checkpoint.map(|c| run.state_from(c)).transpose()?;
    let (transform, stem) = match &state {
        Some(s) => (Transform::Model(&s.model), "eval-transformed"),
        None => (Transform::Identity, "eval-raw"),
    };
    let outcome = evaluate(transform, &run.config, &dataset, run.seed)?;
    outcome.report.write(&run.out, stem)?;
    info!("report written to {}", run.out.join(format!("{stem}.json")).display());
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.serialize(Headline {
        top1: outcome.report.top1,
        cmap: outcome.report.cmap,
        f1: outcome.report.f1,
    })?;
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct SweepRow {
    setting: String,
    top1: f64,
    cmap: f64,
    f1: f64,
}

fn apply_setting(config: &mut ExperimentConfig, sweep: SweepArg, v: f64) -> Result<String> {
    match sweep {
        SweepArg::Alpha => {
            config.model.sparsity.alpha = v;
            Ok(format!("alpha={v}"))
        }
        SweepArg::Dt => {
            ensure!(v >= 1.0 && v.fract() == 0.0, "tubelet length {v} is not a positive integer");
            config.model.tubelet.dt = v as usize;
            Ok(format!("dt={v}"))
        }
        SweepArg::Lambda => {
            config.training.weights.action = v;
            config.training.weights.privacy = v;
            Ok(format!("lambda={v}"))
        }
    }
}

fn ablate(run: &Run, sweep: SweepArg, values: Option<Vec<f64>>) -> Result<ExitCode> {
    let values = values.unwrap_or_else(|| match sweep {
        SweepArg::Alpha => vec![0.5, 0.7, 0.9],
        SweepArg::Dt => vec![1.0, 2.0, 4.0],
        SweepArg::Lambda => vec![0.25, 0.5, 1.0],
    });
    if values.is_empty() {
        bail!("nothing to sweep");
    }
    std::fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    let path = run.out.join(format!("ablate-{}.csv", format!("{sweep:?}").to_lowercase()));
    let mut file = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut stdout = csv::Writer::from_writer(std::io::stdout());
    for v in values {
        let mut config = run.config.clone();
        let setting = apply_setting(&mut config, sweep, v)?;
        config.validate().with_context(|| format!("setting {setting}"))?;
        info!("ablation {setting}: running seed {}", run.seed);
        let (result, _) = run_seed(&config, run.seed, None)?;
        let r = &result.transformed.report;
        let row = SweepRow {
            setting,
            top1: r.top1,
            cmap: r.cmap,
            f1: r.f1,
        };
        file.serialize(&row)?;
        file.flush()?;
        stdout.serialize(&row)?;
        stdout.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}
