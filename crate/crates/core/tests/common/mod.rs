#![allow(dead_code)]

use vidpriv::config::{ExperimentConfig, ModelConfig, PhasePlan, Selection, SparsConfig, Tubelet};
use vidpriv::{ModelShape, TubeletLayout};
use vidpriv_tensor::{Element, Graph, RngState, Tensor, Var};

pub fn rand_tensor<T: Element>(shape: &[usize], rng: &mut RngState, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(lo, hi)))
}

/// Scalar `sum(w * v)` with fixed pseudo-random weights, so every output
/// coordinate contributes a distinct amount to the gradient.
pub fn weighted_sum<'g, T: Element>(g: &'g Graph<T>, v: Var<'g, T>, seed: u64) -> vidpriv::Result<Var<'g, T>> {
    let mut rng = RngState::new(seed ^ 0x5eed);
    let w = rand_tensor::<T>(&v.shape(), &mut rng, -1.0, 1.0);
    Ok(v.mul(g.constant(w))?.sum_all()?)
}

/// `max |a - b| / max(max |b|, 1e-12)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn random_decision(l: usize, n: usize, keep: f64, rng: &mut RngState) -> vidpriv::DecisionMatrix {
    let mut bits: Vec<bool> = (0..l * n).map(|_| rng.uniform() < keep).collect();
    if !bits.iter().any(|&b| b) {
        bits[rng.below(l * n)] = true;
    }
    vidpriv::DecisionMatrix::from_bits(l, n, bits).unwrap()
}

/// A small model: 4x8x8 clips, 2x4x4 tubelets (L = 2, N = 4), width 12.
pub fn tiny_model(alpha: f64, blocks: usize, layers: usize) -> ModelShape {
    let config = ModelConfig {
        tubelet: Tubelet::new(2, 4, 4),
        dim: 12,
        heads: 2,
        sparsity: SparsConfig {
            alpha,
            blocks,
            layers_per_block: layers,
            tau: 1.0,
            selection: Selection::Cascaded,
        },
        anonymizer_layers: layers,
    };
    let layout = TubeletLayout::new(4, 8, 8, config.tubelet).unwrap();
    ModelShape::new(config, layout).unwrap()
}

/// A quick experiment: 16x16 clips, a handful of samples, one epoch each.
pub fn quick_config(train: usize, test: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.data.height = 16;
    c.data.width = 16;
    c.data.frames = 4;
    c.data.train_count = train;
    c.data.test_count = test;
    c.model.dim = 12;
    c.model.heads = 2;
    c.model.sparsity.layers_per_block = 1;
    c.model.anonymizer_layers = 1;
    c.recognizer.dim = 12;
    c.recognizer.heads = 2;
    c.recognizer.depth = 1;
    let one = PhasePlan { epochs: 1, batch_size: 4 };
    c.training.init = one;
    c.training.adversarial = one;
    c.training.eval = one;
    c.seeds = vec![0];
    c
}

/// Reference multi-head attention for one `[S, D]` sequence, written with
/// plain loops: masked off-diagonal scores are set to `-inf` before a
/// standard softmax. Returns the `[H, S, S]` weights and the projected
/// `[S, D]` output. `p` holds the layer's `qkv` and `proj` weights.
pub fn dense_attention_oracle(
    x: &[f64],
    s: usize,
    d: usize,
    heads: usize,
    p: &vidpriv_tensor::ParamStore<f64>,
    keep: &[bool],
) -> (Vec<f64>, Vec<f64>) {
    let lin = |name: &str, input: &[f64], fan_in: usize| -> Vec<f64> {
        let w = p.get(&format!("{name}.w")).unwrap();
        let b = p.get(&format!("{name}.b")).unwrap();
        let out = w.shape()[1];
        let mut y = vec![0.0; input.len() / fan_in * out];
        for r in 0..input.len() / fan_in {
            for o in 0..out {
                let mut acc = b.data()[o];
                for i in 0..fan_in {
                    acc += input[r * fan_in + i] * w.data()[i * out + o];
                }
                y[r * out + o] = acc;
            }
        }
        y
    };
    let qkv = lin("qkv", x, d);
    let dh = d / heads;
    let at = |r: usize, part: usize, h: usize, j: usize| qkv[r * 3 * d + part * d + h * dh + j];
    let mut attn = vec![0.0; heads * s * s];
    let mut mixed = vec![0.0; s * d];
    for h in 0..heads {
        for i in 0..s {
            let mut scores = vec![f64::NEG_INFINITY; s];
            for (j, sc) in scores.iter_mut().enumerate() {
                if i == j || keep[j] {
                    *sc = (0..dh).map(|c| at(i, 0, h, c) * at(j, 1, h, c)).sum::<f64>() / (dh as f64).sqrt();
                }
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..s {
                let a = e[j] / z;
                attn[(h * s + i) * s + j] = a;
                for c in 0..dh {
                    mixed[i * d + h * dh + c] += a * at(j, 2, h, c);
                }
            }
        }
    }
    (attn, lin("proj", &mixed, d))
}
