//! Experiment configuration, serialised as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of one tubelet in frames and pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tubelet {
    pub dt: usize,
    pub dh: usize,
    pub dw: usize,
}

impl Tubelet {
    pub const fn new(dt: usize, dh: usize, dw: usize) -> Self {
        Tubelet { dt, dh, dw }
    }
}

/// Shape of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub attributes: usize,
    pub train_count: usize,
    pub test_count: usize,
}

/// How the inference-time top-k selection is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Keep `round(alpha * retained)` tokens after every block.
    Cascaded,
    /// Keep all tokens until the last block, then `round(alpha^M * LN)`.
    OneShot,
    /// Cascaded, but counted separately within every temporal slice.
    PerFrame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsConfig {
    /// Keep proportion per sparsification block.
    pub alpha: f64,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub tau: f64,
    pub selection: Selection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tubelet: Tubelet,
    pub dim: usize,
    pub heads: usize,
    pub sparsity: SparsConfig,
    pub anonymizer_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecognizerConfig {
    pub tubelet: Tubelet,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePlan {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub action: f64,
    pub privacy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            action: 0.5,
            privacy: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub init: PhasePlan,
    pub adversarial: PhasePlan,
    pub eval: PhasePlan,
    /// Learning rate at batch size 512; the actual base rate is
    /// `lr_reference * batch_size / 512`.
    pub lr_reference: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    /// Weight of the pixel reconstruction term that warms up the anonymizer
    /// during initialization. Zero disables it.
    pub reconstruction: f64,
}

impl TrainingConfig {
    pub fn base_lr(&self, batch_size: usize) -> f64 {
        self.lr_reference * batch_size as f64 / 512.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Temporal clips per video for view averaging.
    pub clips: usize,
    /// Spatial crops per clip for view averaging.
    pub crops: usize,
    pub f1_threshold: f64,
    /// Also train and report a per-frame privacy recognizer.
    pub frame_privacy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub recognizer: RecognizerConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 8x32x32 clips, width 48, 20/10/20 epochs.
    pub fn desk() -> Self {
        ExperimentConfig {
            data: DataConfig {
                frames: 8,
                height: 32,
                width: 32,
                classes: 4,
                attributes: 3,
                train_count: 200,
                test_count: 80,
            },
            model: ModelConfig {
                tubelet: Tubelet::new(2, 8, 8),
                dim: 48,
                heads: 4,
                sparsity: SparsConfig {
                    alpha: 0.7,
                    blocks: 3,
                    layers_per_block: 3,
                    tau: 1.0,
                    selection: Selection::Cascaded,
                },
                anonymizer_layers: 3,
            },
            recognizer: RecognizerConfig {
                tubelet: Tubelet::new(2, 8, 8),
                dim: 48,
                heads: 4,
                depth: 4,
            },
            training: TrainingConfig {
                init: PhasePlan { epochs: 20, batch_size: 8 },
                adversarial: PhasePlan { epochs: 10, batch_size: 8 },
                eval: PhasePlan { epochs: 20, batch_size: 8 },
                lr_reference: 0.064,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weights: LossWeights::default(),
                reconstruction: 1.0,
            },
            eval: EvalConfig {
                clips: 1,
                crops: 1,
                f1_threshold: 0.5,
                frame_privacy: true,
            },
            seeds: vec![0, 1, 2],
        }
    }

    /// Full-scale configuration: ViT-S width, 16x112x112 clips,
    /// 80/40/80 epochs. Far too slow for a CPU; kept for shape runs.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.data = DataConfig {
            frames: 16,
            height: 112,
            width: 112,
            classes: 51,
            attributes: 5,
            train_count: 3570,
            test_count: 1530,
        };
        c.model.tubelet = Tubelet::new(2, 16, 16);
        c.model.dim = 384;
        c.model.heads = 6;
        c.recognizer = RecognizerConfig {
            tubelet: Tubelet::new(2, 16, 16),
            dim: 384,
            heads: 6,
            depth: 12,
        };
        c.training.init = PhasePlan { epochs: 80, batch_size: 64 };
        c.training.adversarial = PhasePlan { epochs: 40, batch_size: 64 };
        c.training.eval = PhasePlan { epochs: 80, batch_size: 64 };
        c.training.lr_reference = 0.001;
        c.eval.clips = 5;
        c.eval.crops = 3;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.data;
        for (name, tb) in [("model", self.model.tubelet), ("recognizer", self.recognizer.tubelet)] {
            if tb.dt == 0 || tb.dh == 0 || tb.dw == 0 {
                return bad(format!("{name} tubelet has a zero extent"));
            }
            if d.frames % tb.dt != 0 || d.height % tb.dh != 0 || d.width % tb.dw != 0 {
                return bad(format!("{name} tubelet {tb:?} does not tile {}x{}x{}", d.frames, d.height, d.width));
            }
        }
        if d.classes < 2 || d.attributes < 1 {
            return bad("need at least 2 classes and 1 attribute".into());
        }
        let m = &self.model;
        if m.dim % 3 != 0 || m.dim % 4 != 0 {
            return bad(format!("model dim {} must be divisible by 3 and 4", m.dim));
        }
        if m.heads == 0 || m.dim % m.heads != 0 {
            return bad(format!("{} heads do not divide dim {}", m.heads, m.dim));
        }
        if self.recognizer.heads == 0 || self.recognizer.dim % self.recognizer.heads != 0 {
            return bad("recognizer heads must divide recognizer dim".into());
        }
        let s = &m.sparsity;
        if !(s.alpha > 0.0 && s.alpha <= 1.0) {
            return bad(format!("alpha {} outside (0, 1]", s.alpha));
        }
        if s.blocks == 0 {
            return bad("need at least one sparsification block".into());
        }
        if s.tau <= 0.0 {
            return bad(format!("temperature {} must be positive", s.tau));
        }
        let t = &self.training;
        for (name, p) in [("init", t.init), ("adversarial", t.adversarial), ("eval", t.eval)] {
            if p.epochs == 0 || p.batch_size == 0 {
                return bad(format!("{name} plan needs positive epochs and batch size"));
            }
        }
        if t.weights.action < 0.0 || t.weights.privacy < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.eval.clips == 0 || self.eval.crops == 0 {
            return bad("need at least one clip and crop".into());
        }
        if !(self.eval.f1_threshold > 0.0 && self.eval.f1_threshold < 1.0) {
            return bad("F1 threshold must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
