//! Tubelet tokenization and the inverse mapping back to pixels.
//!
//! Token order is temporal-major, then row-major over the spatial grid.
//! Inside a tubelet the pixels are flattened in `(t, h, w, c)` order.

use vidpriv_tensor::{permute_data, Element, Tensor, Var};

use crate::config::Tubelet;
use crate::error::{Error, Result};

/// Axis order taking `[B, L, dt, Hn, dh, Wn, dw, 3]` to
/// `[B, L, Hn, Wn, dt, dh, dw, 3]`.
const TO_TOKENS: [usize; 8] = [0, 1, 3, 5, 2, 4, 6, 7];
const TO_PIXELS: [usize; 8] = [0, 1, 4, 2, 5, 3, 6, 7];

/// A tiling of a `T x H x W x 3` video by non-overlapping tubelets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TubeletLayout {
    frames: usize,
    height: usize,
    width: usize,
    tubelet: Tubelet,
}

impl TubeletLayout {
    pub fn new(frames: usize, height: usize, width: usize, tubelet: Tubelet) -> Result<Self> {
        let Tubelet { dt, dh, dw } = tubelet;
        if dt == 0 || dh == 0 || dw == 0 || frames % dt != 0 || height % dh != 0 || width % dw != 0 {
            return Err(Error::Layout(format!(
                "tubelet {dt}x{dh}x{dw} does not tile a {frames}x{height}x{width} video"
            )));
        }
        Ok(TubeletLayout {
            frames,
            height,
            width,
            tubelet,
        })
    }

    pub fn tubelet(&self) -> Tubelet {
        self.tubelet
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }

    /// `L`, the number of temporal slices.
    pub fn temporal(&self) -> usize {
        self.frames / self.tubelet.dt
    }

    fn grid(&self) -> (usize, usize) {
        (self.height / self.tubelet.dh, self.width / self.tubelet.dw)
    }

    /// `N`, tubelets per temporal slice.
    pub fn spatial(&self) -> usize {
        let (hn, wn) = self.grid();
        hn * wn
    }

    /// `L * N`.
    pub fn tokens(&self) -> usize {
        self.temporal() * self.spatial()
    }

    pub fn patch_len(&self) -> usize {
        3 * self.tubelet.dt * self.tubelet.dh * self.tubelet.dw
    }

    /// Row and column of pixel `(t, h, w, c)` in the patch matrix.
    pub fn locate(&self, t: usize, h: usize, w: usize, c: usize) -> (usize, usize) {
        let Tubelet { dt, dh, dw } = self.tubelet;
        let (_, wn) = self.grid();
        let row = (t / dt) * self.spatial() + (h / dh) * wn + w / dw;
        let col = (((t % dt) * dh + h % dh) * dw + w % dw) * 3 + c;
        (row, col)
    }

    fn split_shape(&self, batch: usize) -> [usize; 8] {
        let Tubelet { dt, dh, dw } = self.tubelet;
        let (hn, wn) = self.grid();
        [batch, self.temporal(), dt, hn, dh, wn, dw, 3]
    }

    fn grouped_shape(&self, batch: usize) -> [usize; 8] {
        let Tubelet { dt, dh, dw } = self.tubelet;
        let (hn, wn) = self.grid();
        [batch, self.temporal(), hn, wn, dt, dh, dw, 3]
    }

    fn check_video(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 5 || shape[1..] != self.video_shape() {
            return Err(Error::Layout(format!(
                "expected [B, {}, {}, {}, 3] video, got {shape:?}",
                self.frames, self.height, self.width
            )));
        }
        Ok(shape[0])
    }

    /// `[B, T, H, W, 3]` pixels to a `[B, LN, 3 dt dh dw]` patch matrix.
    pub fn extract<'g, T: Element>(&self, video: Var<'g, T>) -> Result<Var<'g, T>> {
        let b = self.check_video(&video.shape())?;
        Ok(video
            .reshape(&self.split_shape(b))?
            .permute(&TO_TOKENS)?
            .reshape(&[b, self.tokens(), self.patch_len()])?)
    }

    /// Inverse of [`TubeletLayout::extract`].
    pub fn assemble<'g, T: Element>(&self, patches: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = patches.shape();
        if s.len() != 3 || s[1] != self.tokens() || s[2] != self.patch_len() {
            return Err(Error::Layout(format!(
                "expected [B, {}, {}] patches, got {s:?}",
                self.tokens(),
                self.patch_len()
            )));
        }
        let b = s[0];
        let [t, h, w, c] = self.video_shape();
        Ok(patches
            .reshape(&self.grouped_shape(b))?
            .permute(&TO_PIXELS)?
            .reshape(&[b, t, h, w, c])?)
    }

    /// Patch matrix of a single `[T, H, W, 3]` clip, outside any graph.
    pub fn extract_clip<T: Element>(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_video(&[&[1], pixels.shape()].concat())?;
        let data = permute_data(pixels.data(), &self.split_shape(1), &TO_TOKENS);
        Ok(Tensor::from_vec(&[self.tokens(), self.patch_len()], data)?)
    }

    /// Inverse of [`TubeletLayout::extract_clip`].
    pub fn assemble_clip<T: Element>(&self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        if patches.shape() != [self.tokens(), self.patch_len()] {
            return Err(Error::Layout(format!("unexpected patch matrix {:?}", patches.shape())));
        }
        let data = permute_data(patches.data(), &self.grouped_shape(1), &TO_PIXELS);
        Ok(Tensor::from_vec(&self.video_shape(), data)?)
    }

    /// Broadcasts a `[B, L, N]` decision to a `[B, T, H, W, 3]` pixel mask.
    pub fn expand_decision<'g, T: Element>(&self, decision: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = decision.shape();
        if s.len() != 3 || s[1] != self.temporal() || s[2] != self.spatial() {
            return Err(Error::Layout(format!("decision shape {s:?} does not match layout")));
        }
        let b = s[0];
        let per_patch = decision
            .reshape(&[b, self.tokens(), 1])?
            .broadcast_to(&[b, self.tokens(), self.patch_len()])?;
        self.assemble(per_patch)
    }
}

/// A clip with its action and privacy annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// `[T, H, W, 3]` in `[0, 1]`.
    pub pixels: Tensor<f32>,
    pub action: usize,
    pub privacy: Vec<bool>,
}

/// Binary retain (1) / abandon (0) state of each tubelet, `L x N`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DecisionMatrix {
    temporal: usize,
    spatial: usize,
    keep: Vec<bool>,
}

impl DecisionMatrix {
    pub fn ones(temporal: usize, spatial: usize) -> Self {
        DecisionMatrix {
            temporal,
            spatial,
            keep: vec![true; temporal * spatial],
        }
    }

    pub fn zeros(temporal: usize, spatial: usize) -> Self {
        DecisionMatrix {
            temporal,
            spatial,
            keep: vec![false; temporal * spatial],
        }
    }

    pub fn from_bits(temporal: usize, spatial: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != temporal * spatial {
            return Err(Error::Layout(format!("{} bits for a {temporal}x{spatial} decision", keep.len())));
        }
        Ok(DecisionMatrix {
            temporal,
            spatial,
            keep,
        })
    }

    /// Reads an `[L, N]` tensor whose entries must be exactly 0 or 1.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        let &[l, n] = t.shape() else {
            return Err(Error::Layout(format!("decision tensor must be 2-D, got {:?}", t.shape())));
        };
        let mut keep = Vec::with_capacity(l * n);
        for &v in t.data() {
            if v == T::one() {
                keep.push(true);
            } else if v == T::zero() {
                keep.push(false);
            } else {
                return Err(Error::Layout(format!("decision entry {v} is not binary")));
            }
        }
        Self::from_bits(l, n, keep)
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.temporal, self.spatial], |i| if self.keep[i] { T::one() } else { T::zero() })
    }

    pub fn temporal(&self) -> usize {
        self.temporal
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn get(&self, l: usize, n: usize) -> bool {
        self.keep[l * self.spatial + n]
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Flattened indices of retained tokens, ascending.
    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.keep.len()).filter(|&i| self.keep[i]).collect()
    }

    /// Retained tokens in each temporal slice.
    pub fn slice_counts(&self) -> Vec<usize> {
        self.keep.chunks(self.spatial).map(|s| s.iter().filter(|&&k| k).count()).collect()
    }

    /// Hadamard update: a token survives only if both matrices keep it.
    pub fn update(&self, new: &DecisionMatrix) -> Result<Self> {
        if (self.temporal, self.spatial) != (new.temporal, new.spatial) {
            return Err(Error::Layout(format!(
                "cannot combine {}x{} and {}x{} decisions",
                self.temporal, self.spatial, new.temporal, new.spatial
            )));
        }
        Ok(DecisionMatrix {
            temporal: self.temporal,
            spatial: self.spatial,
            keep: self.keep.iter().zip(&new.keep).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// True when every token kept here is also kept by `other`.
    pub fn is_within(&self, other: &DecisionMatrix) -> bool {
        self.keep.len() == other.keep.len() && self.keep.iter().zip(&other.keep).all(|(&a, &b)| !a || b)
    }
}

/// Patch embedding: `token = patch @ w + b` with `w: [P, D]`.
///
/// A 3D convolution whose stride equals its kernel is exactly this map.
/// Pixels in `[0, 1]` are mapped to `[-1, 1]` before embedding.
pub const PIXEL_CENTER: f64 = 0.5;
pub const PIXEL_SCALE: f64 = 2.0;

/// Linear tubelet embedding of `[B, LN, P]` patch rows on centred pixels.
/// Without centring every token shares a large common component and
/// attention starts out degenerate.
pub fn embed_tokens<'g, T: Element>(patches: Var<'g, T>, w: Var<'g, T>, b: Var<'g, T>) -> Result<Var<'g, T>> {
    let centred = patches.add_scalar(-PIXEL_CENTER)?.scale(PIXEL_SCALE)?;
    Ok(centred.matmul(w)?.add(b)?)
}

/// Adds an `[L, N, D]` table to `[B, LN, D]` tokens.
pub fn add_positional<'g, T: Element>(tokens: Var<'g, T>, table: Var<'g, T>) -> Result<Var<'g, T>> {
    let t = table.shape();
    let s = tokens.shape();
    if t.len() != 3 || s.len() != 3 || t[0] * t[1] != s[1] || t[2] != s[2] {
        return Err(Error::Layout(format!("positional table {t:?} does not fit tokens {s:?}")));
    }
    Ok(tokens.add(table.reshape(&[t[0] * t[1], t[2]])?)?)
}

/// Keeps pixels of retained tubelets and blacks out the rest. Implemented as
/// a product with the expanded decision so gradients reach the decision.
pub fn compose_video<'g, T: Element>(
    anonymized: Var<'g, T>,
    decision: Var<'g, T>,
    layout: &TubeletLayout,
) -> Result<Var<'g, T>> {
    Ok(anonymized.mul(layout.expand_decision(decision)?)?)
}

/// [`compose_video`] on a single clip outside any graph.
pub fn compose_clip(pixels: &Tensor<f32>, decision: &DecisionMatrix, layout: &TubeletLayout) -> Result<Tensor<f32>> {
    if decision.temporal() != layout.temporal() || decision.spatial() != layout.spatial() {
        return Err(Error::Layout("decision does not match layout".into()));
    }
    let mut patches = layout.extract_clip(pixels)?;
    let p = layout.patch_len();
    for (row, keep) in patches.data_mut().chunks_mut(p).zip(decision.bits()) {
        if !keep {
            row.fill(0.0);
        }
    }
    layout.assemble_clip(&patches)
}
