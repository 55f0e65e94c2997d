use std::process::ExitCode;

use anyhow::Result;
use vidpriv::config::{ModelConfig, Selection, SparsConfig, Tubelet};
use vidpriv::model::DecisionMode;
use vidpriv::{DecisionMatrix, ModelShape, TubeletLayout};
use vidpriv_tensor::{grad_check_at, Binder, Element, GradCheckReport, Graph, ParamStore, RngState, Tensor, Var};

const PARAMS: [&str; 4] = ["tok.w", "psb.0.layer.0.qkv.w", "psb.2.layer.0.fc2.w", "pab.layer.0.fc1.w"];
const COORDS: usize = 16;

fn small_shape() -> Result<ModelShape> {
    let config = ModelConfig {
        tubelet: Tubelet::new(2, 4, 4),
        dim: 12,
        heads: 2,
        sparsity: SparsConfig {
            alpha: 0.7,
            blocks: 3,
            layers_per_block: 1,
            tau: 1.0,
            selection: Selection::Cascaded,
        },
        anonymizer_layers: 1,
    };
    Ok(ModelShape::new(config, TubeletLayout::new(4, 8, 8, Tubelet::new(2, 4, 4))?)?)
}

/// Nested decisions for one clip; every block keeps at least one token.
fn decisions(shape: &ModelShape, rng: &mut RngState) -> Vec<DecisionMatrix> {
    let (l, n) = (shape.layout.temporal(), shape.layout.spatial());
    let mut cur = DecisionMatrix::ones(l, n);
    let mut out = Vec::new();
    for _ in 0..shape.config.sparsity.blocks {
        let mut bits: Vec<bool> = cur.bits().iter().map(|&b| b && rng.uniform() < 0.75).collect();
        if !bits.iter().any(|&b| b) {
            bits = cur.bits().to_vec();
        }
        cur = DecisionMatrix::from_bits(l, n, bits).expect("same size");
        out.push(cur.clone());
    }
    out
}

fn uniform<T: Element>(shape: &[usize], rng: &mut RngState, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_range(lo, hi)))
}

fn loss<'g, T: Element>(
    shape: &ModelShape,
    p: &Binder<'_, 'g, T>,
    video: Var<'g, T>,
    forced: &[Vec<DecisionMatrix>],
    weights: &Tensor<T>,
) -> vidpriv::Result<Var<'g, T>> {
    let pass = shape.forward_masked(p, video, DecisionMode::Forced(forced))?;
    Ok(pass.video.mul(p.graph().constant(weights.clone()))?.sum_all()?)
}

fn check<T: Element>(shape: &ModelShape, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = RngState::new(seed);
    let mut store = shape.init_params(&mut rng.derive(1));
    // Keeps the anonymized pixels off the output clamp, where differences
    // with a finite step are not valid.
    store.get_mut("pab.out.w").expect("registered").scale_in_place(0.1);
    let params: ParamStore<T> = store.cast();
    let forced = vec![decisions(shape, &mut rng)];
    let video = uniform::<T>(&[1, 4, 8, 8, 3], &mut rng, 0.0, 1.0);
    let weights = uniform::<T>(&[1, 4, 8, 8, 3], &mut rng, -1.0, 1.0);
    let name = PARAMS[seed as usize % PARAMS.len()];
    let point = params.get(name).expect("registered").clone();
    let mut coords: Vec<usize> = (0..point.numel()).collect();
    rng.shuffle(&mut coords);
    coords.truncate(COORDS);
    Ok(grad_check_at(
        |g: &Graph<T>, w| {
            let p = Binder::frozen(g, &params).with_override(name, w);
            loss(shape, &p, g.constant(video.clone()), &forced, &weights)
        },
        &point,
        &coords,
        eps,
        tol,
    )?)
}

pub fn run(instances: u64) -> Result<ExitCode> {
    let shape = small_shape()?;
    let mut ok = true;
    for seed in 0..instances {
        let name = PARAMS[seed as usize % PARAMS.len()];
        for (dtype, report) in [
            ("f32", check::<f32>(&shape, seed, 0.1, 1e-3)?),
            ("f64", check::<f64>(&shape, seed, 1e-5, 1e-6)?),
        ] {
            ok &= report.passed;
            println!(
                "instance {seed} {name} {dtype}: max rel err {:.2e} (tol {:.0e}) {}",
                report.max_rel_error,
                report.tol,
                if report.passed { "ok" } else { "FAILED" }
            );
        }
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
