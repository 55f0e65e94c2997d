mod common;

use common::{rand_tensor, weighted_sum};
use proptest::prelude::*;
use vidpriv::config::Tubelet;
use vidpriv::tokenizer::{add_positional, compose_clip, compose_video, embed_tokens, PIXEL_CENTER, PIXEL_SCALE};
use vidpriv::{DecisionMatrix, TubeletLayout};
use vidpriv_tensor::{grad_check, Graph, RngState, Tensor};

fn layout(t: usize, h: usize, w: usize, dt: usize, dh: usize, dw: usize) -> TubeletLayout {
    TubeletLayout::new(t, h, w, Tubelet::new(dt, dh, dw)).unwrap()
}

fn batch1(pixels: &Tensor) -> Tensor {
    let mut s = vec![1];
    s.extend_from_slice(pixels.shape());
    pixels.clone().reshaped(&s).unwrap()
}

#[test]
fn full_scale_video_gives_392_rows_of_1536() {
    let l = layout(16, 112, 112, 2, 16, 16);
    let video = Tensor::<f32>::zeros(&[16, 112, 112, 3]);
    let p = l.extract_clip(&video).unwrap();
    assert_eq!(p.shape(), &[392, 1536]);
}

#[test]
fn full_extent_tubelet_is_the_flattened_video() {
    let l = layout(2, 4, 6, 2, 4, 6);
    let mut rng = RngState::new(1);
    let v: Tensor = rand_tensor(&[2, 4, 6, 3], &mut rng, 0.0, 1.0);
    let p = l.extract_clip(&v).unwrap();
    assert_eq!(p.shape(), &[1, 144]);
    assert_eq!(p.data(), v.data());
}

#[test]
fn extraction_matches_nested_loop_copy() {
    let l = layout(4, 8, 8, 2, 4, 4);
    let mut rng = RngState::new(2);
    let v: Tensor = rand_tensor(&[4, 8, 8, 3], &mut rng, 0.0, 1.0);
    let p = l.extract_clip(&v).unwrap();
    // Oracle: walk tubelets in (lt, gh, gw) order and copy (t, h, w, c).
    let mut oracle = Vec::new();
    for lt in 0..2 {
        for gh in 0..2 {
            for gw in 0..2 {
                for t in 0..2 {
                    for h in 0..4 {
                        for w in 0..4 {
                            for c in 0..3 {
                                oracle.push(v.at(&[lt * 2 + t, gh * 4 + h, gw * 4 + w, c]));
                            }
                        }
                    }
                }
            }
        }
    }
    assert_eq!(p.data(), oracle.as_slice());
    let ss = |x: &[f32]| x.iter().map(|a| (*a as f64).powi(2)).sum::<f64>();
    assert_eq!(ss(p.data()), ss(v.data()));
    for t in 0..4 {
        for h in 0..8 {
            for w in 0..8 {
                for c in 0..3 {
                    let (r, col) = l.locate(t, h, w, c);
                    assert_eq!(p.at(&[r, col]), v.at(&[t, h, w, c]));
                }
            }
        }
    }
}

#[test]
fn graph_and_plain_extraction_agree() {
    let l = layout(4, 8, 8, 2, 4, 4);
    let mut rng = RngState::new(3);
    let v: Tensor = rand_tensor(&[4, 8, 8, 3], &mut rng, 0.0, 1.0);
    let g = Graph::new();
    let p = l.extract(g.constant(batch1(&v))).unwrap();
    assert_eq!(p.value().data(), l.extract_clip(&v).unwrap().data());
    let back = l.assemble(p).unwrap();
    assert!(back.value().bit_eq(&batch1(&v)));
}

#[test]
fn mid_gray_video_embeds_to_the_bias() {
    let l = layout(4, 8, 8, 2, 4, 4);
    let mut rng = RngState::new(4);
    let w: Tensor = rand_tensor(&[96, 6], &mut rng, -1.0, 1.0);
    let b: Tensor = rand_tensor(&[6], &mut rng, -1.0, 1.0);
    let g = Graph::new();
    let video = g.constant(Tensor::full(&[1, 4, 8, 8, 3], PIXEL_CENTER as f32));
    let tokens = embed_tokens(l.extract(video).unwrap(), g.constant(w), g.constant(b.clone())).unwrap();
    let t = tokens.value();
    assert_eq!(t.shape(), &[1, 8, 6]);
    for row in t.data().chunks(6) {
        assert_eq!(row, b.data());
    }
}

#[test]
fn full_width_embedding_gives_392_by_384() {
    let l = layout(16, 112, 112, 2, 16, 16);
    let g = Graph::<f32>::new();
    let video = g.constant(Tensor::zeros(&[1, 16, 112, 112, 3]));
    let tokens = embed_tokens(
        l.extract(video).unwrap(),
        g.constant(Tensor::zeros(&[1536, 384])),
        g.constant(Tensor::zeros(&[384])),
    )
    .unwrap();
    assert_eq!(tokens.shape(), vec![1, 392, 384]);
}

#[test]
fn embedding_matches_strided_convolution() {
    // A 3D convolution with kernel = stride = tubelet, written as loops over
    // output positions and kernel taps, on centred pixels.
    let l = layout(4, 8, 8, 2, 4, 4);
    let d = 5;
    let mut rng = RngState::new(5);
    let v: Tensor<f64> = rand_tensor(&[4, 8, 8, 3], &mut rng, 0.0, 1.0);
    let w: Tensor<f64> = rand_tensor(&[96, d], &mut rng, -1.0, 1.0);
    let b: Tensor<f64> = rand_tensor(&[d], &mut rng, -1.0, 1.0);
    let g = Graph::new();
    let mut s = vec![1];
    s.extend_from_slice(v.shape());
    let tokens = embed_tokens(
        l.extract(g.constant(v.clone().reshaped(&s).unwrap())).unwrap(),
        g.constant(w.clone()),
        g.constant(b.clone()),
    )
    .unwrap()
    .value();
    let mut oracle = Vec::new();
    for ot in 0..2 {
        for oh in 0..2 {
            for ow in 0..2 {
                for o in 0..d {
                    let mut acc = b.at(&[o]);
                    for kt in 0..2 {
                        for kh in 0..4 {
                            for kw in 0..4 {
                                for c in 0..3 {
                                    let x = v.at(&[ot * 2 + kt, oh * 4 + kh, ow * 4 + kw, c]);
                                    let tap = ((kt * 4 + kh) * 4 + kw) * 3 + c;
                                    acc += (x - PIXEL_CENTER) * PIXEL_SCALE * w.at(&[tap, o]);
                                }
                            }
                        }
                    }
                    oracle.push(acc);
                }
            }
        }
    }
    assert!(common::rel_err(tokens.data(), &oracle) <= 1e-5);
}

#[test]
fn positional_table_adds_elementwise() {
    let mut rng = RngState::new(6);
    let tokens: Tensor = rand_tensor(&[1, 8, 4], &mut rng, -1.0, 1.0);
    let table: Tensor = rand_tensor(&[2, 4, 4], &mut rng, -1.0, 1.0);
    let g = Graph::new();
    let same = add_positional(g.constant(tokens.clone()), g.constant(Tensor::zeros(&[2, 4, 4]))).unwrap();
    assert!(same.value().bit_eq(&tokens));
    let only = add_positional(g.constant(Tensor::zeros(&[1, 8, 4])), g.constant(table.clone())).unwrap();
    assert_eq!(only.value().data(), table.data());
    assert!(add_positional(g.constant(tokens), g.constant(Tensor::zeros(&[3, 4, 4]))).is_err());
}

#[test]
fn positional_table_gradient_passes_check() {
    let mut rng = RngState::new(7);
    let tokens: Tensor = rand_tensor(&[2, 8, 4], &mut rng, -1.0, 1.0);
    let table: Tensor = rand_tensor(&[2, 4, 4], &mut rng, -1.0, 1.0);
    let report = grad_check(
        |g, t| {
            let y = add_positional(g.constant(tokens.clone()), t)?;
            weighted_sum(g, y.gelu()?, 1)
        },
        &table,
        0.1,
        1e-3,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn composing_with_all_zero_or_all_one_decisions() {
    let l = layout(4, 8, 8, 2, 4, 4);
    let mut rng = RngState::new(8);
    let v: Tensor = rand_tensor(&[4, 8, 8, 3], &mut rng, 0.0, 1.0);
    let black = compose_clip(&v, &DecisionMatrix::zeros(2, 4), &l).unwrap();
    assert!(black.data().iter().all(|&x| x == 0.0));
    let same = compose_clip(&v, &DecisionMatrix::ones(2, 4), &l).unwrap();
    assert!(same.bit_eq(&v));
}

#[test]
fn composing_zeroes_exactly_the_abandoned_tubelets() {
    let l = layout(4, 8, 8, 2, 4, 4);
    let mut rng = RngState::new(9);
    let v: Tensor = rand_tensor(&[4, 8, 8, 3], &mut rng, 0.1, 1.0);
    let d = DecisionMatrix::from_bits(2, 4, vec![true, false, false, true, false, true, true, false]).unwrap();
    let out = compose_clip(&v, &d, &l).unwrap();
    for t in 0..4 {
        for h in 0..8 {
            for w in 0..8 {
                for c in 0..3 {
                    let token = (t / 2) * 4 + (h / 4) * 2 + w / 4;
                    let expect = if d.bits()[token] { v.at(&[t, h, w, c]) } else { 0.0 };
                    assert_eq!(out.at(&[t, h, w, c]), expect);
                }
            }
        }
    }
    // The graph version multiplies by the expanded decision and agrees.
    let g = Graph::new();
    let dv = g.constant(d.to_tensor::<f32>().reshaped(&[1, 2, 4]).unwrap());
    let gv = compose_video(g.constant(batch1(&v)), dv, &l).unwrap();
    assert_eq!(gv.value().data(), out.data());
    let twice = compose_clip(&out, &d, &l).unwrap();
    assert!(twice.bit_eq(&out));
}

#[test]
fn decision_updates_are_hadamard_products() {
    let a = DecisionMatrix::from_bits(1, 3, vec![true, true, false]).unwrap();
    let b = DecisionMatrix::from_bits(1, 3, vec![true, false, true]).unwrap();
    assert_eq!(a.update(&b).unwrap().bits(), &[true, false, false]);
    assert_eq!(DecisionMatrix::ones(1, 3).update(&b).unwrap(), b);
    assert!(a.update(&DecisionMatrix::ones(1, 4)).is_err());
    assert!(DecisionMatrix::from_tensor(&Tensor::<f32>::from_f64(&[1, 2], &[1.0, 0.5]).unwrap()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn extract_then_assemble_is_the_identity(
        lt in 1usize..4, gh in 1usize..4, gw in 1usize..4,
        dt in 1usize..3, dh in 1usize..4, dw in 1usize..4, seed in any::<u64>(),
    ) {
        let l = layout(lt * dt, gh * dh, gw * dw, dt, dh, dw);
        prop_assert_eq!(l.tokens(), lt * gh * gw);
        let mut rng = RngState::new(seed);
        let v: Tensor = rand_tensor(&l.video_shape(), &mut rng, 0.0, 1.0);
        let p = l.extract_clip(&v).unwrap();
        prop_assert_eq!(p.shape(), &[l.tokens(), l.patch_len()]);
        prop_assert!(l.assemble_clip(&p).unwrap().bit_eq(&v));
    }

    #[test]
    fn decision_streams_never_grow(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let mut cur = DecisionMatrix::ones(3, 5);
        for _ in 0..3 {
            let next = cur.update(&common::random_decision(3, 5, 0.7, &mut rng)).unwrap();
            prop_assert!(next.is_within(&cur));
            cur = next;
        }
    }
}
