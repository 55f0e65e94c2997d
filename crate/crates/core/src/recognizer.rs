//! The auxiliary recognizers: plain ViT classifiers over the transformed
//! video, one for the action and one for the privacy attributes, plus a
//! per-frame privacy variant.

use serde::{Deserialize, Serialize};
use vidpriv_tensor::{Binder, Element, Graph, ParamStore, RngState, Tensor, Var};

use crate::attention::{init_vit, vit_classify, VitShape};
use crate::config::{DataConfig, RecognizerConfig, Tubelet};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{action_loss, privacy_loss, privacy_targets};
use crate::tokenizer::TubeletLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecognizerKind {
    Action,
    VideoPrivacy,
    FramePrivacy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecognizerSpec {
    pub kind: RecognizerKind,
    /// `C` for the action kind, `P` for the privacy kinds.
    pub outputs: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tubelet: Tubelet,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl RecognizerSpec {
    pub fn new(kind: RecognizerKind, data: &DataConfig, arch: &RecognizerConfig) -> Self {
        let outputs = match kind {
            RecognizerKind::Action => data.classes,
            _ => data.attributes,
        };
        let tubelet = match kind {
            RecognizerKind::FramePrivacy => Tubelet::new(1, arch.tubelet.dh, arch.tubelet.dw),
            _ => arch.tubelet,
        };
        RecognizerSpec {
            kind,
            outputs,
            frames: data.frames,
            height: data.height,
            width: data.width,
            tubelet,
            dim: arch.dim,
            heads: arch.heads,
            depth: arch.depth,
        }
    }

    /// Shape of the underlying classifier. The frame kind classifies single
    /// frames.
    pub fn vit_shape(&self) -> Result<VitShape> {
        let frames = match self.kind {
            RecognizerKind::FramePrivacy => 1,
            _ => self.frames,
        };
        if self.outputs == 0 || self.depth == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("invalid recognizer spec {self:?}")));
        }
        if self.kind == RecognizerKind::Action && self.outputs < 2 {
            return Err(Error::Config("action recognizer needs at least two classes".into()));
        }
        if self.kind == RecognizerKind::FramePrivacy && self.tubelet.dt != 1 {
            return Err(Error::Config("frame privacy recognizer needs single-frame tubelets".into()));
        }
        Ok(VitShape {
            layout: TubeletLayout::new(frames, self.height, self.width, self.tubelet)?,
            dim: self.dim,
            heads: self.heads,
            depth: self.depth,
            outputs: self.outputs,
        })
    }
}

/// A recognizer's architecture and weights.
#[derive(Clone, Debug)]
pub struct Recognizer {
    pub spec: RecognizerSpec,
    pub shape: VitShape,
    pub params: ParamStore,
}

/// Fresh recognizer; initialisation depends only on `spec` and `rng`.
pub fn build_recognizer(spec: RecognizerSpec, rng: &mut RngState) -> Result<Recognizer> {
    let shape = spec.vit_shape()?;
    let mut params = ParamStore::new();
    init_vit(&mut params, &shape, rng);
    Ok(Recognizer { spec, shape, params })
}

impl Recognizer {
    /// Raw logits: `[B, K]`, or `[B, T, P]` for the frame kind.
    pub fn logits<'g, T: Element>(&self, p: &Binder<'_, 'g, T>, video: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = video.shape();
        if s.len() != 5 || s[1..] != [self.spec.frames, self.spec.height, self.spec.width, 3] {
            return Err(Error::Layout(format!("recognizer input {s:?} does not match its spec")));
        }
        match self.spec.kind {
            RecognizerKind::FramePrivacy => {
                let (b, t) = (s[0], s[1]);
                let frames = video.reshape(&[b * t, 1, s[2], s[3], 3])?;
                Ok(vit_classify(p, frames, &self.shape)?.reshape(&[b, t, self.spec.outputs])?)
            }
            _ => vit_classify(p, video, &self.shape),
        }
    }

    /// Training loss of this recognizer's kind on `video` with `batch` labels.
    pub fn loss<'g, T: Element>(&self, p: &Binder<'_, 'g, T>, video: Var<'g, T>, batch: &Batch) -> Result<Var<'g, T>> {
        let logits = self.logits(p, video)?;
        match self.spec.kind {
            RecognizerKind::Action => action_loss(logits, &batch.actions),
            RecognizerKind::VideoPrivacy => privacy_loss(logits, &privacy_targets(&batch.privacy)?),
            RecognizerKind::FramePrivacy => {
                let y: Tensor<T> = privacy_targets(&batch.privacy)?;
                let (b, t, pn) = (batch.len(), self.spec.frames, self.spec.outputs);
                let per_frame = Tensor::from_fn(&[b, t, pn], |i| y.data()[(i / (t * pn)) * pn + i % pn]);
                privacy_loss(logits, &per_frame)
            }
        }
    }

    /// Per-video scores: action logits, or attribute probabilities for the
    /// privacy kinds (the frame kind averages per-frame probabilities).
    pub fn recognize(&self, pixels: &Tensor<f32>) -> Result<Tensor<f32>> {
        let g = Graph::new();
        let p = Binder::frozen(&g, &self.params);
        let logits = self.logits(&p, g.constant(pixels.clone()))?;
        Ok(match self.spec.kind {
            RecognizerKind::Action => logits.value().as_ref().clone(),
            RecognizerKind::VideoPrivacy => logits.sigmoid()?.value().as_ref().clone(),
            RecognizerKind::FramePrivacy => logits.sigmoid()?.mean_axis(1)?.value().as_ref().clone(),
        })
    }
}
