use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saft::attention::{sincos_positional_encoding_2d, AttentionConfig, Segment, TokenSequence};
use saft::neck::{
    fpn_build, ha_finalize, ha_iterate, hfm_fuse_corresponding, hfm_fuse_one_to_all, kernel_correlate,
    prototype_reweight, va_top, vfm_build, FeaturePyramid, FpnParams, HfmParams, VfmParams,
};
use saft::tensor::{Graph, ParamBuilder, ParamStore, Tensor, Var};

const D: usize = 8;

fn attn() -> AttentionConfig {
    AttentionConfig {
        dim: D,
        heads: 2,
        ffn_hidden: 16,
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random contiguous pyramid: `(levels with channels and extents, image side)`.
fn random_layout(rng: &mut ChaCha8Rng) -> (Vec<(u32, usize, usize, usize)>, usize) {
    let n_levels = rng.gen_range(1..=3);
    let first = rng.gen_range(2..=4u32);
    let image: usize = rng.gen_range(1..=6) * (1 << (first + n_levels as u32 - 1)) + rng.gen_range(0..3) * (1 << first);
    let layout = (0..n_levels as u32)
        .map(|i| {
            let j = first + i;
            let ext = image.div_ceil(1 << j);
            (j, rng.gen_range(2..6), ext, ext)
        })
        .collect();
    (layout, image)
}

fn pyramid(g: &mut Graph<'_, f64>, rng: &mut ChaCha8Rng, layout: &[(u32, usize, usize, usize)], image: usize) -> FeaturePyramid {
    FeaturePyramid {
        levels: layout
            .iter()
            .map(|&(j, c, h, w)| (j, g.constant(random(rng, &[c, h, w]))))
            .collect(),
        image_h: image,
        image_w: image,
    }
}

#[test]
fn fpn_and_vfm_emit_identical_shapes_on_fifty_pyramids() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for case in 0..50 {
        let (layout, image) = random_layout(&mut rng);
        let channels: Vec<(u32, usize)> = layout.iter().map(|&(j, c, _, _)| (j, c)).collect();
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(case);
        let mut pb = ParamBuilder::new(&mut store, &mut prng);
        let fpn = FpnParams::new(&mut pb.sub("fpn"), &channels, D).unwrap();
        let vfm = VfmParams::new(&mut pb.sub("vfm"), &channels, &attn()).unwrap();
        let mut g = Graph::inference(&store);
        let pyr = pyramid(&mut g, &mut rng, &layout, image);
        let a = fpn_build(&mut g, &pyr, &fpn).unwrap();
        let b = vfm_build(&mut g, &pyr, &vfm).unwrap();
        let (sa, sb) = (a.shapes(&g), b.shapes(&g));
        assert_eq!(sa, sb, "case {case}: layout {layout:?}");
        for ((j, s), &(lj, _, h, w)) in sa.iter().zip(&layout) {
            assert_eq!((*j, s.as_slice()), (lj, &[D, h, w][..]));
        }
    }
}

#[test]
fn single_level_vfm_is_va_top() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vfm = VfmParams::new(&mut ParamBuilder::new(&mut store, &mut rng), &[(5, 3)], &attn()).unwrap();
    let mut g = Graph::inference(&store);
    let x = g.constant(random(&mut rng, &[3, 4, 4]));
    let pyr = FeaturePyramid {
        levels: vec![(5, x)],
        image_h: 128,
        image_w: 128,
    };
    let out = vfm_build(&mut g, &pyr, &vfm).unwrap();
    let top = va_top(&mut g, x, 5, &vfm.levels[0].1).unwrap();
    assert_eq!(g.value(out.levels[0].1).data(), g.value(top).data());
}

#[test]
fn fpn_with_identity_lateral_delta_output_and_silent_top_is_identity() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fpn = FpnParams::new(&mut ParamBuilder::new(&mut store, &mut rng), &[(4, D), (5, D)], D).unwrap();
    for (j, lp) in &fpn.levels {
        let lat = store.get_mut(lp.lateral.w).data_mut();
        lat.fill(0.0);
        if *j == 4 {
            for c in 0..D {
                lat[c * D + c] = 1.0;
            }
        }
        let out = store.get_mut(lp.output.w).data_mut();
        out.fill(0.0);
        for c in 0..D {
            out[(c * D + c) * 9 + 4] = 1.0;
        }
    }
    let mut g = Graph::inference(&store);
    let f4 = random(&mut rng, &[D, 6, 6]);
    let pyr = FeaturePyramid {
        levels: vec![(4, g.constant(f4.clone())), (5, g.constant(random(&mut rng, &[D, 3, 3])))],
        image_h: 96,
        image_w: 96,
    };
    let out = fpn_build(&mut g, &pyr, &fpn).unwrap();
    assert!(g.value(out.levels[0].1).max_abs_diff(&f4) < 1e-12);
    assert!(g.value(out.levels[1].1).data().iter().all(|&v| v == 0.0));
}

#[test]
fn vfm_is_deterministic() {
    let run = || {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vfm = VfmParams::new(&mut ParamBuilder::new(&mut store, &mut rng), &[(4, 4), (5, 4)], &attn()).unwrap();
        let mut g = Graph::inference(&store);
        let pyr = pyramid(&mut g, &mut rng, &[(4, 4, 4, 4), (5, 4, 2, 2)], 64);
        let out = vfm_build(&mut g, &pyr, &vfm).unwrap();
        out.levels.iter().map(|&(_, v)| g.value(v).clone()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn hfm_params(seed: u64, blocks: usize, levels: &[u32]) -> (HfmParams, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = HfmParams::new(&mut ParamBuilder::new(&mut store, &mut rng), &attn(), blocks, levels).unwrap();
    (p, store)
}

fn fused_values(g: &Graph<'_, f64>, p: &FeaturePyramid) -> Vec<(u32, Tensor<f64>)> {
    p.levels.iter().map(|&(j, v)| (j, g.value(v).clone())).collect()
}

#[test]
fn hfm_preserves_query_shapes_for_both_strategies() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (p, store) = hfm_params(5, 2, &[4, 5, 6]);
    let mut g = Graph::inference(&store);
    let layout = [(4, D, 8, 8), (5, D, 4, 4), (6, D, 2, 2)];
    let q = pyramid(&mut g, &mut rng, &layout, 128);
    let s = pyramid(&mut g, &mut rng, &[(4, D, 4, 4), (5, D, 2, 2), (6, D, 1, 1)], 64);
    let one = hfm_fuse_one_to_all(&mut g, &q, s.get(5).unwrap(), &p).unwrap();
    let corr = hfm_fuse_corresponding(&mut g, &q, &s, &p).unwrap();
    assert_eq!(one.shapes(&g), q.shapes(&g));
    assert_eq!(corr.shapes(&g), q.shapes(&g));
}

#[test]
fn corresponding_levels_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (p, store) = hfm_params(7, 1, &[4, 5]);
    let mut g = Graph::inference(&store);
    let q = pyramid(&mut g, &mut rng, &[(4, D, 4, 4), (5, D, 2, 2)], 64);
    let s = pyramid(&mut g, &mut rng, &[(4, D, 2, 2), (5, D, 1, 1)], 32);
    let mut s2 = s.clone();
    s2.levels[1].1 = g.constant(random(&mut rng, &[D, 1, 1]));
    let a = hfm_fuse_corresponding(&mut g, &q, &s, &p).unwrap();
    let b = hfm_fuse_corresponding(&mut g, &q, &s2, &p).unwrap();
    let (a, b) = (fused_values(&g, &a), fused_values(&g, &b));
    assert_eq!(a[0], b[0]);
    assert!(a[1].1.max_abs_diff(&b[1].1) > 1e-9);
}

#[test]
fn single_common_level_corresponding_equals_one_to_all() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (p, store) = hfm_params(9, 2, &[5]);
    let mut g = Graph::inference(&store);
    let q = pyramid(&mut g, &mut rng, &[(5, D, 3, 3)], 96);
    let s = pyramid(&mut g, &mut rng, &[(5, D, 2, 2)], 64);
    let a = hfm_fuse_corresponding(&mut g, &q, &s, &p).unwrap();
    let b = hfm_fuse_one_to_all(&mut g, &q, s.levels[0].1, &p).unwrap();
    let (a, b) = (fused_values(&g, &a), fused_values(&g, &b));
    assert_eq!(a, b);
}

#[test]
fn one_to_all_attends_over_the_whole_pyramid() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (p, store) = hfm_params(11, 1, &[4, 5, 6]);
    let mut g = Graph::inference(&store);
    let q = pyramid(&mut g, &mut rng, &[(4, D, 8, 8), (5, D, 4, 4), (6, D, 2, 2)], 128);
    let s = g.constant(random(&mut rng, &[D, 2, 2]));
    g.enable_attention_trace();
    hfm_fuse_one_to_all(&mut g, &q, s, &p).unwrap();
    let trace = g.take_attention_trace();
    let shape_of = |label: &str| {
        let r = trace.iter().find(|r| r.label.starts_with(label)).unwrap_or_else(|| panic!("no {label}"));
        r.heads[0].shape().to_vec()
    };
    let n_q = 64 + 16 + 4;
    assert_eq!(shape_of("block0.sa_q"), vec![n_q, n_q]);
    assert_eq!(shape_of("block0.caf_q"), vec![n_q, 4]);
    assert_eq!(shape_of("block0.caf_s"), vec![4, n_q]);
    assert_eq!(shape_of("finalize.caf"), vec![n_q, 4]);
}

fn seq(g: &mut Graph<'_, f64>, rng: &mut ChaCha8Rng, h: usize, w: usize) -> TokenSequence {
    let t = g.constant(random(rng, &[h * w, D]));
    let pos = g.constant(sincos_positional_encoding_2d(h, w, D).unwrap());
    TokenSequence::new(g, t, pos, vec![Segment { level: 5, h, w }]).unwrap()
}

#[test]
fn ha_iterate_with_no_blocks_is_identity_and_counts_are_kept() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (p, store) = hfm_params(13, 3, &[5]);
    let mut g = Graph::inference(&store);
    let q = seq(&mut g, &mut rng, 3, 3);
    let s = seq(&mut g, &mut rng, 2, 1);
    let (q0, s0) = ha_iterate(&mut g, &q, &s, &[]).unwrap();
    assert_eq!((q0.tokens, s0.tokens), (q.tokens, s.tokens));
    let (q3, s3) = ha_iterate(&mut g, &q, &s, &p.blocks).unwrap();
    assert_eq!(g.shape(q3.tokens), &[9, D]);
    assert_eq!(g.shape(s3.tokens), &[2, D]);
    let f = ha_finalize(&mut g, &q3, &s3, &p.finalize).unwrap();
    assert_eq!(g.shape(f.tokens), &[9, D]);
    assert_eq!(f.origin, q.origin);
}

#[test]
fn swapping_sides_and_parameters_swaps_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (p, store) = hfm_params(15, 2, &[5]);
    let swapped: Vec<_> = p.blocks.iter().map(|b| b.swapped()).collect();
    let mut g = Graph::inference(&store);
    let q = seq(&mut g, &mut rng, 2, 3);
    let s = seq(&mut g, &mut rng, 2, 2);
    let (a_q, a_s) = ha_iterate(&mut g, &q, &s, &p.blocks).unwrap();
    let (b_s, b_q) = ha_iterate(&mut g, &s, &q, &swapped).unwrap();
    assert_eq!(g.value(a_q.tokens).data(), g.value(b_q.tokens).data());
    assert_eq!(g.value(a_s.tokens).data(), g.value(b_s.tokens).data());
}

fn naive_correlation(q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = q.chw().unwrap();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -2..=2i64 {
                    for dx in -2..=2i64 {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                            continue;
                        }
                        let kv = k.data()[ch * 25 + ((dy + 2) * 5 + dx + 2) as usize];
                        acc += kv * q.data()[ch * h * w + (sy as usize) * w + sx as usize];
                    }
                }
                out[ch * h * w + y as usize * w + x as usize] = acc;
            }
        }
    }
    Tensor::new([c, h, w], out).unwrap()
}

#[test]
fn correlation_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..10 {
        let q = random(&mut rng, &[3, 7, 6]);
        let k = random(&mut rng, &[3, 5, 5]);
        let mut g = Graph::<f64>::standalone();
        let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
        let out = kernel_correlate(&mut g, qv, kv).unwrap();
        assert!(g.value(out).max_abs_diff(&naive_correlation(&q, &k)) < 1e-5);
    }
}

#[test]
fn averaging_kernel_keeps_constant_interior() {
    let mut g = Graph::<f64>::standalone();
    let q = g.constant(Tensor::full([2, 7, 7], 3.0));
    let k = g.constant(Tensor::full([2, 5, 5], 1.0 / 25.0));
    let out = kernel_correlate(&mut g, q, k).unwrap();
    let v = g.value(out);
    for c in 0..2 {
        for y in 2..5 {
            for x in 2..5 {
                assert!((v.data()[c * 49 + y * 7 + x] - 3.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constant_kernel_correlation_is_scaled_reweighting_in_the_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let q = random(&mut rng, &[3, 7, 7]);
    let means = [0.3, -1.2, 2.0];
    let support: Vec<f64> = means.iter().flat_map(|&m| std::iter::repeat_n(m, 25)).collect();
    let support = Tensor::new([3, 5, 5], support).unwrap();
    let mut g = Graph::<f64>::standalone();
    let (qv, sv): (Var, Var) = (g.constant(q.clone()), g.constant(support));
    let rew = prototype_reweight(&mut g, qv, sv).unwrap();
    let cor = kernel_correlate(&mut g, qv, sv).unwrap();
    let constant_q = g.constant(Tensor::ones([3, 7, 7]));
    let box_sum = kernel_correlate(&mut g, constant_q, sv).unwrap();
    // a constant kernel turns correlation into a box filter; compare against
    // reweighting of the box-averaged query
    for c in 0..3 {
        for y in 2..5 {
            for x in 2..5 {
                let i = c * 49 + y * 7 + x;
                let mut window = 0.0;
                for dy in 0..5 {
                    for dx in 0..5 {
                        window += q.data()[c * 49 + (y + dy - 2) * 7 + (x + dx - 2)];
                    }
                }
                let want = window / 25.0 * means[c] * 25.0;
                assert!((g.value(cor).data()[i] - want).abs() < 1e-9);
                assert!((g.value(box_sum).data()[i] - 25.0 * means[c]).abs() < 1e-9);
                assert!((g.value(rew).data()[i] - q.data()[i] * means[c]).abs() < 1e-12);
            }
        }
    }
}
