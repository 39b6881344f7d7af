//! Registered finite-difference checks for every differentiable primitive,
//! the attention blocks, each neck kind and the full detector.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::marker::PhantomData;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    caf, dense_attention, multi_head_attention, pma, AttentionConfig, CafParams, DaParams, MhaParams, Segment,
    TokenSequence,
};
use crate::boxes::BoxXYXY;
use crate::data::{generate_scene_with, render_support, Episode, SceneConfig};
use crate::error::Result;
use crate::head::LevelRanges;
use crate::loss::LossConfig;
use crate::model::{Model, ModelConfig};
use crate::neck::{FeaturePyramid, NeckConfig, NeckKind, NeckParams, ScaleStrategy};
use crate::tensor::{grad_check, grad_check_params, GradCheckReport, Graph, ParamBuilder, ParamStore, Scalar, Tensor, Var};

pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Step for single primitives.
pub const FD_STEP: f64 = 1e-5;
/// Smaller step for composite blocks, whose many ReLUs make a kink crossing
/// likely at `FD_STEP`.
pub const COMPOSITE_FD_STEP: f64 = 3e-6;

type CheckFn = Box<dyn Fn(u64) -> Result<GradCheckReport>>;

/// A named check run once per seed, in precision `T`.
pub struct GradCase<T> {
    pub name: &'static str,
    pub seeds: usize,
    check: CheckFn,
    precision: PhantomData<fn() -> T>,
}

impl<T: Scalar> GradCase<T> {
    pub fn new(name: &'static str, seeds: usize, check: impl Fn(u64) -> Result<GradCheckReport> + 'static) -> Self {
        Self {
            name,
            seeds,
            check: Box::new(check),
            precision: PhantomData,
        }
    }

    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.check)(seed)
    }
}

#[derive(Clone, Debug)]
pub struct GradRow {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub seeds: usize,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < GRAD_TOLERANCE && self.report.checked > 0
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.gen_range(lo..hi))).collect()).expect("positive shape")
}

/// Values in `±[0.1, 1]`, away from the ReLU kink.
fn off_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            T::of(if rng.gen_bool(0.5) { m } else { -m })
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Reduces any output to a scalar with fixed pseudo-random weights.
fn project<T: Scalar>(g: &mut Graph<'_, T>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.shape(v), -1.0, 1.0);
    g.weighted_sum(v, &w)
}

fn project_pyramid<T: Scalar>(g: &mut Graph<'_, T>, p: &FeaturePyramid, seed: u64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (i, &(_, v)) in p.levels.iter().enumerate() {
        let s = project(g, v, seed.wrapping_add(i as u64))?;
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(total.expect("nonempty pyramid"))
}

/// Input-gradient check of `f` over inputs of the given shapes.
fn primitive<T, F>(name: &'static str, shapes: Vec<Vec<usize>>, positive: bool, f: F) -> GradCase<T>
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var> + Clone + 'static,
{
    GradCase::new(name, 10, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<T>> = shapes
            .iter()
            .map(|s| {
                if positive {
                    uniform(&mut rng, s, 0.5, 2.0)
                } else {
                    off_zero(&mut rng, s)
                }
            })
            .collect();
        let f = f.clone();
        grad_check(
            move |g, xs| {
                let out = f(g, xs)?;
                if g.value(out).numel() == 1 {
                    Ok(out)
                } else {
                    project(g, out, seed)
                }
            },
            &inputs,
            FD_STEP,
        )
    })
}

fn primitive_cases<T: Scalar>() -> Vec<GradCase<T>> {
    let v = |s: &[usize]| s.to_vec();
    vec![
        primitive("add", vec![v(&[3, 4]), v(&[3, 4])], false, |g, x| g.add(x[0], x[1])),
        primitive("sub", vec![v(&[3, 4]), v(&[3, 4])], false, |g, x| g.sub(x[0], x[1])),
        primitive("mul", vec![v(&[3, 4]), v(&[3, 4])], false, |g, x| g.mul(x[0], x[1])),
        primitive("add_row", vec![v(&[3, 4]), v(&[4])], false, |g, x| g.add_row(x[0], x[1])),
        primitive("add_channel", vec![v(&[2, 3, 3]), v(&[2])], false, |g, x| g.add_channel(x[0], x[1])),
        primitive("mul_channel", vec![v(&[2, 3, 3]), v(&[2])], false, |g, x| g.mul_channel(x[0], x[1])),
        primitive("add_scalar", vec![v(&[2, 3]), v(&[1])], false, |g, x| g.add_scalar(x[0], x[1])),
        primitive("scale", vec![v(&[2, 3])], false, |g, x| Ok(g.scale(x[0], -1.7))),
        primitive("relu", vec![v(&[4, 5])], false, |g, x| Ok(g.relu(x[0]))),
        primitive("exp", vec![v(&[4, 5])], false, |g, x| Ok(g.exp(x[0]))),
        primitive("matmul", vec![v(&[3, 4]), v(&[4, 2])], false, |g, x| g.matmul(x[0], x[1])),
        primitive("affine", vec![v(&[3, 4]), v(&[4, 5]), v(&[5])], false, |g, x| {
            g.affine(x[0], x[1], x[2])
        }),
        primitive("transpose", vec![v(&[3, 4])], false, |g, x| g.transpose(x[0])),
        primitive("reshape", vec![v(&[2, 6])], false, |g, x| g.reshape(x[0], &[3, 4])),
        primitive("softmax", vec![v(&[3, 5])], false, |g, x| g.softmax(x[0])),
        primitive("layer_norm", vec![v(&[3, 8]), v(&[8]), v(&[8])], false, |g, x| {
            g.layer_norm(x[0], x[1], x[2])
        }),
        primitive("conv2d_1x1", vec![v(&[2, 4, 4]), v(&[3, 2, 1, 1]), v(&[3])], false, |g, x| {
            g.conv2d(x[0], x[1], Some(x[2]), 1, 0)
        }),
        primitive("conv2d_3x3", vec![v(&[2, 4, 4]), v(&[3, 2, 3, 3]), v(&[3])], false, |g, x| {
            g.conv2d(x[0], x[1], Some(x[2]), 1, 1)
        }),
        primitive("conv2d_3x3_stride2", vec![v(&[2, 6, 6]), v(&[3, 2, 3, 3]), v(&[3])], false, |g, x| {
            g.conv2d(x[0], x[1], Some(x[2]), 2, 1)
        }),
        primitive("depthwise_conv2d_5x5", vec![v(&[2, 6, 6]), v(&[2, 5, 5])], false, |g, x| {
            g.depthwise_conv2d(x[0], x[1], 2)
        }),
        primitive("upsample_nearest_2x", vec![v(&[2, 3, 3])], false, |g, x| g.upsample_nearest_2x(x[0])),
        primitive("upsample_crop", vec![v(&[2, 3, 3])], false, |g, x| g.upsample_nearest_2x_to(x[0], 5, 5)),
        primitive("adaptive_avg_pool_down", vec![v(&[2, 6, 5])], false, |g, x| {
            g.adaptive_avg_pool(x[0], 3, 2)
        }),
        primitive("adaptive_avg_pool_up", vec![v(&[2, 2, 3])], false, |g, x| {
            g.adaptive_avg_pool(x[0], 5, 5)
        }),
        primitive("concat_rows", vec![v(&[2, 3]), v(&[4, 3])], false, |g, x| g.concat_rows(&[x[0], x[1]])),
        primitive("slice_rows", vec![v(&[5, 3])], false, |g, x| g.slice_rows(x[0], 1, 3)),
        primitive("concat_cols", vec![v(&[3, 2]), v(&[3, 4])], false, |g, x| g.concat_cols(&[x[0], x[1]])),
        primitive("slice_cols", vec![v(&[3, 5])], false, |g, x| g.slice_cols(x[0], 2, 2)),
        primitive("gather_rows", vec![v(&[4, 3])], false, |g, x| g.gather_rows(x[0], &[2, 0, 2])),
        primitive("sum", vec![v(&[3, 4])], false, |g, x| Ok(g.sum(x[0]))),
        primitive("focal_loss", vec![v(&[6, 1])], false, |g, x| {
            g.focal_loss_sum(x[0], &[true, false, false, true, false, false], 0.25, 2.0)
        }),
        primitive("bce_with_logits", vec![v(&[4, 1])], false, |g, x| {
            g.bce_with_logits_sum(x[0], &[0.2, 0.9, 0.5, 0.0], &[0.2, 0.9, 0.5, 1.0])
        }),
        primitive("box_regression", vec![v(&[3, 4])], true, |g, x| {
            let targets = [[1.0, 0.7, 1.3, 0.9], [0.6, 1.8, 1.1, 0.8], [2.5, 0.4, 0.3, 1.6]];
            g.box_regression_sum(x[0], &targets, 4.0)
        }),
    ]
}

fn tiny_attention() -> AttentionConfig {
    AttentionConfig {
        dim: 8,
        heads: 2,
        ffn_hidden: 16,
    }
}

/// Parameters from `build` plus named inputs, all checked through the store.
fn store_case<T, P, B, F>(name: &'static str, seeds: usize, build: B, objective: F) -> GradCase<T>
where
    T: Scalar,
    P: 'static,
    B: Fn(&mut ParamBuilder<'_, T>, &mut ChaCha8Rng) -> Result<(P, BTreeMap<String, Tensor<T>>)> + 'static,
    F: Fn(&mut Graph<'_, T>, &ParamStore<T>, &P, u64) -> Result<Var> + 'static,
{
    GradCase::new(name, seeds, move |seed| {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
        let (params, inputs) = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            build(&mut pb, &mut data_rng)?
        };
        for (k, t) in inputs {
            store.insert(format!("input.{k}"), t)?;
        }
        perturb_constants(&mut store, &mut data_rng);
        let snapshot = store.clone();
        grad_check_params(
            &store,
            |g| objective(g, &snapshot, &params, seed),
            COMPOSITE_FD_STEP,
            Some(6),
        )
    })
}

/// Moves freshly initialised constants (zero biases, unit gains) off their
/// special values so every code path carries gradient.
fn perturb_constants<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).starts_with("input.") {
            continue;
        }
        for v in store.get_mut(id).data_mut() {
            *v += T::of(rng.gen_range(-0.2..0.2));
        }
    }
}

fn input<T: Scalar>(g: &mut Graph<'_, T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
    let id = store
        .id(&format!("input.{name}"))
        .ok_or_else(|| crate::Error::Invalid(format!("missing fixture input {name}")))?;
    Ok(g.param(id))
}

fn sequence<T: Scalar>(g: &mut Graph<'_, T>, store: &ParamStore<T>, name: &str, n: usize) -> Result<TokenSequence> {
    let tokens = input(g, store, name)?;
    let pos = input(g, store, &format!("{name}_pos"))?;
    TokenSequence::new(g, tokens, pos, vec![Segment { level: 0, h: n, w: 1 }])
}

fn attention_cases<T: Scalar>() -> Vec<GradCase<T>> {
    let cfg = tiny_attention();
    let tokens = move |rng: &mut ChaCha8Rng| -> BTreeMap<String, Tensor<T>> {
        BTreeMap::from([
            ("q".to_string(), uniform(rng, &[5, 8], -1.0, 1.0)),
            ("q_pos".to_string(), uniform(rng, &[5, 8], -1.0, 1.0)),
            ("k".to_string(), uniform(rng, &[3, 8], -1.0, 1.0)),
            ("k_pos".to_string(), uniform(rng, &[3, 8], -1.0, 1.0)),
        ])
    };
    vec![
        store_case(
            "multi_head_attention",
            3,
            move |pb, rng| Ok((MhaParams::new(pb, "mha", &cfg)?, tokens(rng))),
            |g, store, p, seed| {
                let (q, k) = (input(g, store, "q")?, input(g, store, "k")?);
                let out = multi_head_attention(g, q, k, k, p)?;
                project(g, out, seed)
            },
        ),
        store_case(
            "pma",
            3,
            move |pb, rng| Ok((MhaParams::new(pb, "mha", &cfg)?, tokens(rng))),
            |g, store, p, seed| {
                let (q, k) = (input(g, store, "q")?, input(g, store, "k")?);
                let (qp, kp) = (input(g, store, "q_pos")?, input(g, store, "k_pos")?);
                let out = pma(g, q, k, k, qp, kp, p)?;
                project(g, out, seed)
            },
        ),
        store_case(
            "dense_attention",
            3,
            move |pb, rng| Ok((DaParams::new(pb, "da", &cfg)?, tokens(rng))),
            |g, store, p, seed| {
                let q = sequence(g, store, "q", 5)?;
                let k = sequence(g, store, "k", 3)?;
                let out = dense_attention(g, &q, &k, p)?;
                project(g, out.tokens, seed)
            },
        ),
        store_case(
            "caf",
            3,
            move |pb, rng| Ok((CafParams::new(pb, "caf", &cfg)?, tokens(rng))),
            |g, store, p, seed| {
                let q = sequence(g, store, "q", 5)?;
                let k = sequence(g, store, "k", 3)?;
                let out = caf(g, &q, &k, p)?;
                project(g, out.tokens, seed)
            },
        ),
    ]
}

/// Two-level pyramids: query 6×6 and 3×3, support 4×4 and 2×2, 4 channels.
fn pyramid_inputs<T: Scalar>(rng: &mut ChaCha8Rng) -> BTreeMap<String, Tensor<T>> {
    BTreeMap::from([
        ("q4".to_string(), uniform(rng, &[4, 6, 6], -1.0, 1.0)),
        ("q5".to_string(), uniform(rng, &[4, 3, 3], -1.0, 1.0)),
        ("s4".to_string(), uniform(rng, &[4, 4, 4], -1.0, 1.0)),
        ("s5".to_string(), uniform(rng, &[4, 2, 2], -1.0, 1.0)),
    ])
}

fn pyramid_of<T: Scalar>(g: &mut Graph<'_, T>, store: &ParamStore<T>, side: &str, extent: usize) -> Result<FeaturePyramid> {
    Ok(FeaturePyramid {
        levels: vec![
            (4, input(g, store, &format!("{side}4"))?),
            (5, input(g, store, &format!("{side}5"))?),
        ],
        image_h: extent,
        image_w: extent,
    })
}

fn neck_config(kind: &str, scale: ScaleStrategy) -> NeckConfig {
    NeckConfig {
        kind: kind.parse::<NeckKind>().expect("valid kind"),
        scale,
        blocks: 1,
        query_levels: vec![4, 5],
        support_levels: match scale {
            ScaleStrategy::OneToAll => vec![5],
            ScaleStrategy::Corresponding => vec![4, 5],
        },
        joint_levels: true,
        attention: tiny_attention(),
    }
}

fn neck_case<T: Scalar>(name: &'static str, kind: &'static str, scale: ScaleStrategy, cross_scale_only: bool) -> GradCase<T> {
    let cfg = neck_config(kind, scale);
    let channels = BTreeMap::from([(4u32, 4usize), (5, 4)]);
    store_case(
        name,
        2,
        move |pb, rng| Ok((NeckParams::new(&mut pb.sub("neck"), &cfg, &channels)?, pyramid_inputs(rng))),
        move |g, store, p, seed| {
            let q = pyramid_of(g, store, "q", 96)?;
            let s = pyramid_of(g, store, "s", 64)?;
            let out = if cross_scale_only {
                p.cross_scale_forward(g, &q)?
            } else {
                p.forward(g, &q, &s)?
            };
            project_pyramid(g, &out, seed)
        },
    )
}

fn neck_cases<T: Scalar>() -> Vec<GradCase<T>> {
    use ScaleStrategy::*;
    vec![
        neck_case("neck_reweighting", "reweighting", OneToAll, false),
        neck_case("neck_correlation", "correlation", OneToAll, false),
        neck_case("neck_fpn", "fpn+reweighting", OneToAll, true),
        neck_case("neck_vfm", "vfm+reweighting", OneToAll, true),
        neck_case("neck_hfm", "hfm", OneToAll, false),
        neck_case("neck_hfm_corresponding", "hfm", Corresponding, false),
        neck_case("neck_fpn_hfm", "fpn+hfm", OneToAll, false),
        neck_case("neck_vfm_hfm", "vfm+hfm", OneToAll, false),
    ]
}

/// 128×128 query so the top level has more than one cell.
fn toy_episode(seed: u64) -> Result<Episode> {
    let scene = SceneConfig {
        min_objects: 2,
        max_objects: 3,
        ..SceneConfig::default()
    };
    let query = generate_scene_with(seed, &[0, 4], Some(0), &scene)?;
    let support = render_support(0, seed.wrapping_add(7), &scene)?;
    let gts: Vec<BoxXYXY> = query.boxes_of(0);
    Ok(Episode {
        query,
        support,
        class_id: 0,
        gts,
    })
}

fn model_case<T: Scalar>() -> GradCase<T> {
    GradCase::new("model_loss", 1, |seed| {
        let cfg = ModelConfig {
            backbone_widths: vec![4, 4, 4, 8, 8, 8],
            neck: NeckConfig {
                blocks: 1,
                attention: tiny_attention(),
                ..NeckConfig::default()
            },
        };
        let (model, mut store) = Model::new::<T>(&cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        perturb_constants(&mut store, &mut rng);
        // an even prior keeps classification gradients well above rounding noise
        if let Some(id) = store.id("head.cls.b") {
            store.get_mut(id).data_mut().fill(T::zero());
        }
        let ep = toy_episode(seed)?;
        let ranges = LevelRanges::default();
        let loss = LossConfig::default();
        grad_check_params(
            &store,
            |g| Ok(model.episode_loss(g, &ep, &ranges, &loss)?.0),
            COMPOSITE_FD_STEP,
            Some(3),
        )
    })
}

/// Every registered check, in report order.
pub fn registered_cases<T: Scalar>() -> Vec<GradCase<T>> {
    let mut cases = primitive_cases();
    cases.extend(attention_cases());
    cases.extend(neck_cases());
    cases.push(model_case());
    cases
}

/// A product whose second factor is detached, so its analytic gradient
/// misses half of the true derivative. Must fail.
pub fn corrupted_case<T: Scalar>() -> GradCase<T> {
    primitive("corrupted_product", vec![vec![3, 3]], false, |g, x| {
        let copy = g.constant(g.value(x[0]).clone());
        g.mul(x[0], copy)
    })
}

pub fn run_cases<T: Scalar>(cases: &[GradCase<T>], mut progress: impl FnMut(&GradRow)) -> Result<Vec<GradRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let mut report = GradCheckReport::default();
        for s in 0..case.seeds {
            report.merge(case.run(s as u64)?);
        }
        let row = GradRow {
            name: case.name,
            report,
            seeds: case.seeds,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_row(row: &GradRow) -> String {
    format!(
        "{:<26} {:>12.3e} {:>8} {:>6}  {}",
        row.name,
        row.report.max_rel_err,
        row.report.checked,
        if row.passed() { "pass" } else { "FAIL" },
        row.report.worst
    )
}

pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = format!("{:<26} {:>12} {:>8} {:>6}  worst\n", "op", "max rel err", "checked", "");
    for r in rows {
        writeln!(s, "{}", format_row(r)).unwrap();
    }
    s
}
