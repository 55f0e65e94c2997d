//! The privacy transformer: tubelet embedding, a stack of sparsification
//! blocks and the anonymization block, runnable in masked (training) or
//! physically pruned (inference) form.

use vidpriv_tensor::{sample_gumbel, Binder, Element, ParamStore, RngState, Tensor, Var};

use crate::anonymizer::{anonymize_patches, init_anonymizer};
use crate::attention::transformer_layer;
use crate::config::{ModelConfig, Selection};
use crate::error::{Error, Result};
use crate::nn::{init_linear, small_uniform};
use crate::sparsifier::{
    aggregate_retained, gumbel_decide, init_block, keep_count, keep_logits, multi_level_aggregate, topk_select,
    topk_select_per_frame, KEEP,
};
use crate::tokenizer::{add_positional, embed_tokens, DecisionMatrix, TubeletLayout};

/// How each block turns keep probabilities into decisions.
pub enum DecisionMode<'a> {
    /// Gumbel-Softmax sampling with straight-through gradients.
    Sample(&'a mut RngState),
    /// Deterministic top-k on the keep probabilities.
    TopK,
    /// Externally fixed cumulative decisions, indexed `[sample][block]`.
    Forced(&'a [Vec<DecisionMatrix>]),
}

/// Static architecture: configuration plus tubelet layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelShape {
    pub config: ModelConfig,
    pub layout: TubeletLayout,
}

/// Outputs of the masked forward pass.
pub struct MaskedPass<'g, T: Element> {
    /// `[B, LN, D]` tokens leaving the last sparsification block.
    pub tokens: Var<'g, T>,
    /// Cumulative `[B, L, N]` decision after each block.
    pub decisions: Vec<Var<'g, T>>,
    /// `[B, L, N, 2]` keep probabilities of each block.
    pub keep_probs: Vec<Var<'g, T>>,
    /// `[B, LN, P]` anonymized pixel rows for every token.
    pub patches: Var<'g, T>,
    /// `[B, T, H, W, 3]` anonymized video before blanking.
    pub anonymized: Var<'g, T>,
    /// `[B, T, H, W, 3]` transformed video with abandoned tubelets blacked out.
    pub video: Var<'g, T>,
}

impl<T: Element> MaskedPass<'_, T> {
    /// Hard decisions, indexed `[sample][block]`.
    pub fn hard_decisions(&self) -> Result<Vec<Vec<DecisionMatrix>>> {
        let mut out: Vec<Vec<DecisionMatrix>> = Vec::new();
        for d in &self.decisions {
            let v = d.value();
            let &[b, l, n] = v.shape() else { unreachable!("decisions are [B, L, N]") };
            out.resize(b, Vec::new());
            for (i, chunk) in v.data().chunks(l * n).enumerate() {
                out[i].push(DecisionMatrix::from_tensor(&Tensor::from_vec(&[l, n], chunk.to_vec())?)?);
            }
        }
        Ok(out)
    }
}

/// Outputs of the pruned forward pass over one clip.
pub struct PrunedPass<T: Element> {
    /// Cumulative decision after each block.
    pub decisions: Vec<DecisionMatrix>,
    /// Flattened indices of the finally retained tokens, ascending.
    pub retained: Vec<usize>,
    /// `[K, D]` retained tokens leaving the last sparsification block.
    pub tokens: Tensor<T>,
    /// `[K, P]` anonymized pixel rows of the retained tokens.
    pub patches: Tensor<T>,
    /// `[T, H, W, 3]` transformed video.
    pub video: Tensor<T>,
}

impl ModelShape {
    pub fn new(config: ModelConfig, layout: TubeletLayout) -> Result<Self> {
        if config.dim % 12 != 0 {
            return Err(Error::Config(format!("model dim {} must be divisible by 12", config.dim)));
        }
        if config.heads == 0 || config.dim % config.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide {}", config.heads, config.dim)));
        }
        Ok(ModelShape { config, layout })
    }

    pub fn init_params(&self, rng: &mut RngState) -> ParamStore {
        let c = &self.config;
        let l = &self.layout;
        let mut store = ParamStore::new();
        init_linear(&mut store, "tok", l.patch_len(), c.dim, rng);
        store.insert("tok.pos", small_uniform(&[l.temporal(), l.spatial(), c.dim], 0.02, rng));
        for m in 0..c.sparsity.blocks {
            init_block(&mut store, &format!("psb.{m}"), c.dim, c.sparsity.layers_per_block, rng);
        }
        init_anonymizer(&mut store, "pab", c.dim, c.anonymizer_layers, l.patch_len(), rng);
        store
    }

    /// `[B, T, H, W, 3]` pixels to `[B, LN, D]` tokens with positions.
    pub fn embed<'g, T: Element>(&self, p: &Binder<'_, 'g, T>, video: Var<'g, T>) -> Result<Var<'g, T>> {
        let patches = self.layout.extract(video)?;
        let tokens = embed_tokens(patches, p.get("tok.w")?, p.get("tok.b")?)?;
        add_positional(tokens, p.get("tok.pos")?)
    }

    /// One block's selection on the keep probabilities of a single clip.
    pub fn select(&self, keep_prob: &[f64], current: &DecisionMatrix, block: usize) -> Result<DecisionMatrix> {
        let s = &self.config.sparsity;
        match s.selection {
            Selection::Cascaded => topk_select(keep_prob, current, keep_count(current.retained(), s.alpha)),
            Selection::PerFrame => topk_select_per_frame(keep_prob, current, s.alpha),
            Selection::OneShot => {
                if block + 1 < s.blocks {
                    Ok(current.clone())
                } else {
                    let total = current.bits().len();
                    let target = keep_count(total, s.alpha.powi(s.blocks as i32)).min(current.retained());
                    topk_select(keep_prob, current, target)
                }
            }
        }
    }

    /// Masked forward pass over a `[B, T, H, W, 3]` batch. Abandoned tokens
    /// stay in place and are excluded through the attention and pooling masks.
    pub fn forward_masked<'g, T: Element>(
        &self,
        p: &Binder<'_, 'g, T>,
        video: Var<'g, T>,
        mut mode: DecisionMode<'_>,
    ) -> Result<MaskedPass<'g, T>> {
        let c = &self.config;
        let (l, n, d) = (self.layout.temporal(), self.layout.spatial(), c.dim);
        let g = p.graph();
        let mut x = self.embed(p, video)?;
        let b = x.shape()[0];
        if let DecisionMode::Forced(f) = &mode {
            if f.len() != b || f.iter().any(|s| s.len() != c.sparsity.blocks) {
                return Err(Error::Layout("forced decisions must cover every sample and block".into()));
            }
        }
        let mut current = g.constant(Tensor::ones(&[b, l, n]));
        let mut decisions = Vec::with_capacity(c.sparsity.blocks);
        let mut keep_probs = Vec::with_capacity(c.sparsity.blocks);
        for m in 0..c.sparsity.blocks {
            let bp = p.scope(&format!("psb.{m}"));
            let mask = current.reshape(&[b, l * n])?;
            for i in 0..c.sparsity.layers_per_block {
                x = transformer_layer(&bp.scope(&format!("layer.{i}")), x, Some(mask), c.heads)?;
            }
            let evidence = multi_level_aggregate(&bp, x.reshape(&[b, l, n, d])?, current)?;
            let logits = keep_logits(&bp, evidence)?;
            let z = logits.softmax()?;
            current = match &mut mode {
                DecisionMode::Sample(rng) => {
                    let noise = sample_gumbel::<T>(&logits.shape(), rng);
                    current.mul(gumbel_decide(logits, &noise, c.sparsity.tau)?)?
                }
                DecisionMode::TopK => {
                    let zv = z.value();
                    let cur = current.value();
                    let mut next = Vec::with_capacity(b * l * n);
                    for s in 0..b {
                        let keep: Vec<f64> =
                            (0..l * n).map(|t| zv.data()[(s * l * n + t) * 2 + KEEP].as_f64()).collect();
                        let now = DecisionMatrix::from_tensor(&Tensor::from_vec(
                            &[l, n],
                            cur.data()[s * l * n..(s + 1) * l * n].to_vec(),
                        )?)?;
                        next.extend(self.select(&keep, &now, m)?.to_tensor::<T>().into_data());
                    }
                    g.constant(Tensor::from_vec(&[b, l, n], next)?)
                }
                DecisionMode::Forced(f) => {
                    let mut next = Vec::with_capacity(b * l * n);
                    for (s, per) in f.iter().enumerate() {
                        let dm = &per[m];
                        if (dm.temporal(), dm.spatial()) != (l, n) {
                            return Err(Error::Layout("forced decision does not match layout".into()));
                        }
                        if m > 0 && !dm.is_within(&per[m - 1]) {
                            return Err(Error::Layout(format!("forced decision of sample {s} grows at block {m}")));
                        }
                        next.extend(dm.to_tensor::<T>().into_data());
                    }
                    g.constant(Tensor::from_vec(&[b, l, n], next)?)
                }
            };
            decisions.push(current);
            keep_probs.push(z);
        }
        let final_mask = current.reshape(&[b, l * n])?;
        let patches = anonymize_patches(&p.scope("pab"), x, Some(final_mask), c.anonymizer_layers, c.heads)?;
        let anonymized = self.layout.assemble(patches)?;
        let video = anonymized.mul(self.layout.expand_decision(current)?)?;
        Ok(MaskedPass {
            tokens: x,
            decisions,
            keep_probs,
            patches,
            anonymized,
            video,
        })
    }

    /// Inference pass over one `[1, T, H, W, 3]` clip in which abandoned
    /// tokens are physically removed after every block. `forced` replaces
    /// the top-k selection with fixed cumulative decisions.
    pub fn forward_pruned<'g, T: Element>(
        &self,
        p: &Binder<'_, 'g, T>,
        video: Var<'g, T>,
        forced: Option<&[DecisionMatrix]>,
    ) -> Result<PrunedPass<T>> {
        let c = &self.config;
        let (l, n, d) = (self.layout.temporal(), self.layout.spatial(), c.dim);
        if video.shape().first() != Some(&1) {
            return Err(Error::Layout("pruned pass runs one clip at a time".into()));
        }
        if let Some(f) = forced {
            if f.len() != c.sparsity.blocks {
                return Err(Error::Layout("forced decisions must cover every block".into()));
            }
        }
        let mut x = self.embed(p, video)?.reshape(&[l * n, d])?;
        let mut current = DecisionMatrix::ones(l, n);
        let mut retained: Vec<usize> = (0..l * n).collect();
        let mut decisions = Vec::with_capacity(c.sparsity.blocks);
        for m in 0..c.sparsity.blocks {
            let bp = p.scope(&format!("psb.{m}"));
            let k = retained.len();
            let mut h = x.reshape(&[1, k, d])?;
            for i in 0..c.sparsity.layers_per_block {
                h = transformer_layer(&bp.scope(&format!("layer.{i}")), h, None, c.heads)?;
            }
            x = h.reshape(&[k, d])?;
            let next = match forced {
                Some(f) => {
                    if !f[m].is_within(&current) {
                        return Err(Error::Layout(format!("forced decision grows at block {m}")));
                    }
                    f[m].clone()
                }
                None => {
                    let slice_of: Vec<usize> = retained.iter().map(|&t| t / n).collect();
                    let evidence = aggregate_retained(&bp, x, &slice_of, l)?;
                    let z = keep_logits(&bp, evidence)?.softmax()?.value();
                    let mut keep = vec![f64::NEG_INFINITY; l * n];
                    for (r, &t) in retained.iter().enumerate() {
                        keep[t] = z.data()[2 * r + KEEP].as_f64();
                    }
                    self.select(&keep, &current, m)?
                }
            };
            let rows: Vec<usize> = (0..k).filter(|&r| next.bits()[retained[r]]).collect();
            retained = rows.iter().map(|&r| retained[r]).collect();
            if retained.is_empty() {
                return Err(Error::EmptyInput("every token was abandoned"));
            }
            x = x.gather_rows(&rows)?;
            current = next;
            decisions.push(current.clone());
        }
        let k = retained.len();
        let tokens = x.value().as_ref().clone();
        let patches = anonymize_patches(&p.scope("pab"), x.reshape(&[1, k, d])?, None, c.anonymizer_layers, c.heads)?
            .reshape(&[k, self.layout.patch_len()])?
            .value()
            .as_ref()
            .clone();
        let pl = self.layout.patch_len();
        let mut full = Tensor::zeros(&[l * n, pl]);
        for (r, &t) in retained.iter().enumerate() {
            full.data_mut()[t * pl..(t + 1) * pl].copy_from_slice(&patches.data()[r * pl..(r + 1) * pl]);
        }
        let video = self.layout.assemble_clip(&full)?;
        Ok(PrunedPass {
            decisions,
            retained,
            tokens,
            patches,
            video,
        })
    }
}

/// A trained (or freshly initialised) privacy transformer.
#[derive(Clone, Debug)]
pub struct PrivacyTransformer {
    pub shape: ModelShape,
    pub params: ParamStore,
}

impl PrivacyTransformer {
    pub fn new(shape: ModelShape, rng: &mut RngState) -> Self {
        let params = shape.init_params(rng);
        PrivacyTransformer { shape, params }
    }

    /// Eval-mode transform of one `[T, H, W, 3]` clip with top-k pruning.
    pub fn transform_clip(&self, pixels: &Tensor<f32>) -> Result<PrunedPass<f32>> {
        let g = vidpriv_tensor::Graph::new();
        let p = Binder::frozen(&g, &self.params);
        let mut shape = vec![1];
        shape.extend_from_slice(pixels.shape());
        let video = g.constant(pixels.clone().reshaped(&shape)?);
        self.shape.forward_pruned(&p, video, None)
    }
}
