//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 6 to 8 train and evaluate full models (15 runs of 2000
//! iterations plus a repeat), which takes over an hour on one core. Their
//! outcome depends on optimisation, so a FAIL there is printed but does not
//! fail the run; every other criterion does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saft::attention::{
    caf, dense_attention, multi_head_attention, pma, self_attention, sincos_positional_encoding_2d, AttentionConfig,
    CafParams, DaParams, MhaParams, Segment, TokenSequence,
};
use saft::boxes::{BoxXYXY, Detection};
use saft::config::RunConfig;
use saft::data::{build_eval_set, Episode, SceneConfig, Split};
use saft::gradcheck::{registered_cases, run_cases, GRAD_TOLERANCE};
use saft::head::{centerness_target, nms, FlatHead, TrainTargets};
use saft::loss::{combined_loss, focal_loss, giou, LossConfig};
use saft::metrics::{average_precision, evaluate, iou, match_detections};
use saft::neck::{
    fpn_build, hfm_fuse_corresponding, hfm_fuse_one_to_all, vfm_build, FeaturePyramid, FpnParams, HfmParams, VfmParams,
};
use saft::run;
use saft::tensor::{Graph, ParamBuilder, ParamStore, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn attn(dim: usize, heads: usize) -> AttentionConfig {
    AttentionConfig {
        dim,
        heads,
        ffn_hidden: 2 * dim,
    }
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let rows = run_cases(&registered_cases::<f64>(), |_| {}).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = rows.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    ensure(failed.is_empty(), || format!("above {GRAD_TOLERANCE}: {failed:?}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!("{} cases, worst rel err {worst:.2e}, {:.1}s", rows.len(), elapsed.as_secs_f64()))
}

fn permuted_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let cols = t.shape()[1];
    let data = perm.iter().flat_map(|&r| t.data()[r * cols..(r + 1) * cols].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

fn attention_invariants() -> Check {
    const SEEDS: u64 = 25;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = attn(8, 2);
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let mut pb = ParamBuilder::new(&mut store, &mut prng);
        let mha = MhaParams::new(&mut pb, "mha", &c).unwrap();
        let da = DaParams::new(&mut pb, "da", &c).unwrap();
        let cp = CafParams::new(&mut pb, "caf", &c).unwrap();
        let mut g = Graph::inference(&store);

        let (rows, cols) = (rng.gen_range(1..8), rng.gen_range(1..12));
        let x = g.constant(random(&mut rng, &[rows, cols], 20.0));
        let sm = g.softmax(x).unwrap();
        for r in g.value(sm).data().chunks(cols) {
            let sum: f64 = r.iter().sum();
            ensure((sum - 1.0).abs() <= 1e-6 && r.iter().all(|&v| v >= 0.0), || {
                format!("seed {seed}: softmax row sums to {sum}")
            })?;
        }

        let (nq, nk) = (rng.gen_range(1..6), rng.gen_range(2..9));
        let (k, v) = (random(&mut rng, &[nk, 8], 1.0), random(&mut rng, &[nk, 8], 1.0));
        let mut perm: Vec<usize> = (0..nk).collect();
        perm.shuffle(&mut rng);
        let q = g.constant(random(&mut rng, &[nq, 8], 1.0));
        let (kv, vv) = (g.constant(k.clone()), g.constant(v.clone()));
        let (kp, vp) = (g.constant(permuted_rows(&k, &perm)), g.constant(permuted_rows(&v, &perm)));
        let a = multi_head_attention(&mut g, q, kv, vv, &mha).unwrap();
        let b = multi_head_attention(&mut g, q, kp, vp, &mha).unwrap();
        let diff = g.value(a).max_abs_diff(g.value(b));
        ensure(diff <= 1e-6, || format!("seed {seed}: permuted keys moved output by {diff:e}"))?;

        let pq = g.constant(random(&mut rng, &[nq, 8], 1.0));
        let pk = g.constant(random(&mut rng, &[nk, 8], 1.0));
        let out = pma(&mut g, q, kv, vv, pq, pk, &mha).unwrap();
        let qe = g.add(q, pq).unwrap();
        let ke = g.add(kv, pk).unwrap();
        let manual = multi_head_attention(&mut g, qe, ke, vv, &mha).unwrap();
        ensure(g.value(out).data() == g.value(manual).data(), || {
            format!("seed {seed}: encodings reached the value path")
        })?;

        let (h, w, hk) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let mut seq = |g: &mut Graph<'_, f64>, h: usize, w: usize| {
            let t = g.constant(random(&mut rng, &[h * w, 8], 1.0));
            let p = g.constant(sincos_positional_encoding_2d(h, w, 8).unwrap());
            TokenSequence::new(g, t, p, vec![Segment { level: 4, h, w }]).unwrap()
        };
        let fq = seq(&mut g, h, w);
        let fk = seq(&mut g, hk, 2);
        let outs = [
            dense_attention(&mut g, &fq, &fk, &da).unwrap(),
            self_attention(&mut g, &fq, &da).unwrap(),
            caf(&mut g, &fq, &fk, &cp).unwrap(),
        ];
        for o in &outs {
            ensure(g.shape(o.tokens) == g.shape(fq.tokens), || format!("seed {seed}: shape changed"))?;
        }
    }
    Ok(format!("{SEEDS} seeds"))
}

fn random_pyramid(g: &mut Graph<'_, f64>, rng: &mut ChaCha8Rng, layout: &[(u32, usize, usize)], image: usize) -> FeaturePyramid {
    FeaturePyramid {
        levels: layout.iter().map(|&(j, c, e)| (j, g.constant(random(rng, &[c, e, e], 1.0)))).collect(),
        image_h: image,
        image_w: image,
    }
}

fn structural_parity() -> Check {
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50u64 {
        let n_levels = rng.gen_range(1..=3u32);
        let first = rng.gen_range(2..=4u32);
        let image: usize = rng.gen_range(1..=6) * (1 << (first + n_levels - 1)) + rng.gen_range(0..3) * (1 << first);
        let layout: Vec<(u32, usize, usize)> =
            (first..first + n_levels).map(|j| (j, rng.gen_range(2..6), image.div_ceil(1 << j))).collect();
        let channels: Vec<(u32, usize)> = layout.iter().map(|&(j, c, _)| (j, c)).collect();
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(case);
        let mut pb = ParamBuilder::new(&mut store, &mut prng);
        let fpn = FpnParams::new(&mut pb.sub("fpn"), &channels, d).unwrap();
        let vfm = VfmParams::new(&mut pb.sub("vfm"), &channels, &attn(d, 2)).unwrap();
        let mut g = Graph::inference(&store);
        let pyr = random_pyramid(&mut g, &mut rng, &layout, image);
        let a = fpn_build(&mut g, &pyr, &fpn).unwrap();
        let b = vfm_build(&mut g, &pyr, &vfm).unwrap();
        ensure(a.shapes(&g) == b.shapes(&g), || format!("case {case}: {:?} vs {:?}", a.shapes(&g), b.shapes(&g)))?;
    }
    for seed in 0..10u64 {
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(seed);
        let p = HfmParams::new(&mut ParamBuilder::new(&mut store, &mut prng), &attn(d, 2), 2, &[4, 5, 6]).unwrap();
        let mut g = Graph::inference(&store);
        let q = random_pyramid(&mut g, &mut rng, &[(4, d, 8), (5, d, 4), (6, d, 2)], 128);
        let s = random_pyramid(&mut g, &mut rng, &[(4, d, 4), (5, d, 2), (6, d, 1)], 64);
        let one = hfm_fuse_one_to_all(&mut g, &q, s.levels[1].1, &p).unwrap();
        let corr = hfm_fuse_corresponding(&mut g, &q, &s, &p).unwrap();
        ensure(one.shapes(&g) == q.shapes(&g) && corr.shapes(&g) == q.shapes(&g), || {
            format!("seed {seed}: fused shapes differ from the query")
        })?;
    }
    Ok("50 FPN/VFM pyramids, 10 HFM pyramids x 2 strategies".into())
}

fn loss_fixtures() -> Check {
    let labels = vec![true, false, false];
    let distances = vec![[2.0; 4], [0.0; 4], [0.0; 4]];
    let targets = TrainTargets {
        centerness: vec![centerness_target([2.0; 4]), 0.0, 0.0],
        labels,
        distances,
        locations: vec![(64.0, 64.0); 3],
        levels: vec![4; 3],
        assigned: vec![None; 3],
        norm: 16.0,
    };
    let mut g = Graph::<f64>::standalone();
    let head = FlatHead {
        cls: g.constant(Tensor::zeros([3, 1])),
        reg: g.constant(Tensor::new([3, 4], [[4.0; 4], [1.0; 4], [1.0; 4]].concat()).unwrap()),
        ctn: g.constant(Tensor::zeros([3, 1])),
    };
    let cfg = LossConfig::default();
    ensure((cfg.weights.cls, cfg.weights.reg, cfg.weights.ctn) == (20.0, 2.0, 0.5), || "loss weights".into())?;
    let got = combined_loss(&mut g, &head, &targets, &cfg).map_err(|e| e.to_string())?.1;
    let ln2 = std::f64::consts::LN_2;
    let cls = (0.25 * 0.25 * ln2 + 2.0 * 0.75 * 0.25 * ln2) / 3.0;
    let want = 20.0 * cls + 2.0 * (2.0 / 16.0 + 0.75) + 0.5 * ln2;
    ensure((got.total - want).abs() <= 1e-5, || format!("combined {} vs {want}", got.total))?;

    let mut worst = 0.0f64;
    for i in 0..=400 {
        let x = -20.0 + 0.1 * i as f64;
        let p = 1.0 / (1.0 + (-x).exp());
        for (y, bce) in [(true, -p.ln()), (false, -(1.0 - p).ln())] {
            worst = worst.max((focal_loss(x, y, 0.5, 0.0) - 0.5 * bce).abs());
        }
    }
    ensure(worst <= 1e-7, || format!("focal vs half BCE off by {worst:e}"))?;

    let unit = |x: f64| BoxXYXY::new(x, 0.0, x + 1.0, 1.0).unwrap();
    for (other, want) in [(0.0, 1.0), (1.0, 0.0), (2.0, -1.0 / 3.0)] {
        let v = giou(&unit(0.0), &unit(other)).unwrap();
        ensure((v - want).abs() <= 1e-6, || format!("GIoU {v} vs {want}"))?;
    }
    Ok(format!("combined {:.6}, focal max dev {worst:.1e}", got.total))
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxXYXY {
    let (x, y) = (rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0));
    BoxXYXY::new(x, y, x + rng.gen_range(4.0..20.0), y + rng.gen_range(4.0..20.0)).unwrap()
}

fn nms_oracle(boxes: &[BoxXYXY], scores: &[f64], thresh: f64) -> Vec<usize> {
    let n = boxes.len();
    let before = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mask = (0u32..1 << n)
        .find(|&m| {
            (0..n).all(|i| {
                let blocked = (0..n).any(|k| m & (1 << k) != 0 && before(k, i) && iou(&boxes[k], &boxes[i]).unwrap() > thresh);
                (m & (1 << i) != 0) != blocked
            })
        })
        .unwrap();
    let mut kept: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    kept
}

fn match_oracle(dets: &[BoxXYXY], gts: &[BoxXYXY], thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let o = iou(d, g).unwrap();
                if !taken[j] && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= thresh => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

fn detection_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let n = rng.gen_range(1..=10);
        let boxes: Vec<BoxXYXY> = (0..n).map(|_| random_box(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let thresh = [0.3, 0.5, 0.7][case % 3];
        ensure(nms(&boxes, &scores, thresh) == nms_oracle(&boxes, &scores, thresh), || format!("NMS case {case}"))?;
    }
    for case in 0..200 {
        let gts: Vec<BoxXYXY> = (0..rng.gen_range(0..5)).map(|_| random_box(&mut rng)).collect();
        let mut dets: Vec<BoxXYXY> = (0..rng.gen_range(0..8)).map(|_| random_box(&mut rng)).collect();
        dets.extend(gts.iter().filter(|_| rng.gen_bool(0.5)));
        dets.shuffle(&mut rng);
        ensure(match_detections(&dets, &gts, 0.5) == match_oracle(&dets, &gts, 0.5), || format!("matching case {case}"))?;
    }
    let ap = average_precision(&[true, false, true], 2).unwrap();
    ensure((ap - 5.0 / 6.0).abs() <= 1e-12, || format!("fixture AP {ap}"))?;
    let episodes = build_eval_set(Split::Novel, 50, 5, 3, &SceneConfig::default()).unwrap();
    let mut oracle = |ep: &Episode| {
        Ok(ep.gts.iter().map(|&bbox| Detection { class_id: ep.class_id, score: 1.0, bbox }).collect())
    };
    let perfect = evaluate(&mut oracle, &episodes).map_err(|e| e.to_string())?.mean_ap50();
    ensure(perfect == 1.0, || format!("oracle AP50 {perfect}"))?;
    Ok("200 NMS + 200 matching instances, fixture AP 5/6, oracle AP50 1.0".into())
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct Experiment {
    root: PathBuf,
    /// Per-variant novel AP50 in percent, one entry per seed.
    novel: BTreeMap<&'static str, Vec<f64>>,
    budget_ok: bool,
    slowest: Duration,
}

fn run_once(sets: &[String], out: &Path) -> Result<(f64, Duration), String> {
    let cfg = RunConfig::load(None, sets).map_err(|e| e.to_string())?;
    let _ = fs::remove_dir_all(out);
    let start = Instant::now();
    run::train(&cfg, out, |_| {}).map_err(|e| e.to_string())?;
    let report = run::eval(&cfg, out).map_err(|e| e.to_string())?;
    Ok((100.0 * report.mean_ap50(), start.elapsed()))
}

fn variant_sets(variant: &str, seed: u64) -> Vec<String> {
    let mut sets: Vec<String> = match variant {
        "N=2" => vec!["neck=vfm+hfm".into(), "blocks=2".into()],
        neck => vec![format!("neck={neck}")],
    };
    sets.push(format!("seed={seed}"));
    sets
}

fn ablation() -> Result<Experiment, String> {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut exp = Experiment {
        root: root.clone(),
        novel: BTreeMap::new(),
        budget_ok: true,
        slowest: Duration::ZERO,
    };
    for variant in ["vfm+hfm", "fpn+hfm", "vfm+correlation", "vfm+reweighting", "N=2"] {
        for seed in SEEDS {
            let out = root.join(format!("{}-s{seed}", variant.replace(['+', '='], "_")));
            let (ap, took) = run_once(&variant_sets(variant, seed), &out)?;
            println!("    {variant:<16} seed {seed}: novel AP50 {ap:5.1}  ({:.0}s)", took.as_secs_f64());
            exp.novel.entry(variant).or_default().push(ap);
            exp.budget_ok &= took < Duration::from_secs(2 * 3600);
            exp.slowest = exp.slowest.max(took);
        }
    }
    Ok(exp)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn directional_ablation(exp: &Experiment) -> Check {
    let m = |k: &str| mean(&exp.novel[k]);
    let (full, fpn, corr, rew) = (m("vfm+hfm"), m("fpn+hfm"), m("vfm+correlation"), m("vfm+reweighting"));
    let detail = format!(
        "seed-mean novel AP50: VFM+HFM {full:.1}, FPN+HFM {fpn:.1}, VFM+corr {corr:.1}, VFM+rew {rew:.1}; slowest run {:.0}s",
        exp.slowest.as_secs_f64()
    );
    let mut violations = Vec::new();
    if !(full > fpn) {
        violations.push(format!("VFM+HFM {full:.1} <= FPN+HFM {fpn:.1}"));
    }
    for (name, v) in [("VFM+corr", corr), ("VFM+rew", rew)] {
        if fpn < v {
            violations.push(format!("FPN+HFM {fpn:.1} < {name} {v:.1}"));
        }
    }
    if full - rew < 5.0 {
        violations.push(format!("VFM+HFM leads VFM+rew by {:.1} < 5", full - rew));
    }
    if !exp.budget_ok {
        violations.push("a run exceeded 2 h".into());
    }
    ensure(violations.is_empty(), || format!("{}; {detail}", violations.join(", ")))?;
    Ok(detail)
}

fn depth_trend(exp: &Experiment) -> Check {
    let (six, two) = (mean(&exp.novel["vfm+hfm"]), mean(&exp.novel["N=2"]));
    ensure(six >= two, || format!("N=6 {six:.1} < N=2 {two:.1}"))?;
    Ok(format!("N=6 {six:.1} >= N=2 {two:.1}"))
}

fn reproducibility(exp: &Experiment) -> Check {
    let first = exp.root.join("vfm_hfm-s0");
    let second = exp.root.join("vfm_hfm-s0-repeat");
    run_once(&variant_sets("vfm+hfm", 0), &second)?;
    for name in ["loss.csv", "report.csv"] {
        let (a, b) = (fs::read(first.join(name)), fs::read(second.join(name)));
        let (a, b) = (a.map_err(|e| e.to_string())?, b.map_err(|e| e.to_string())?);
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok("loss.csv and report.csv byte-identical".into())
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, gating: bool, result: Check| {
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += usize::from(gating);
                ("FAIL", d)
            }
        };
        let note = if gating { "" } else { " (empirical, reported only)" };
        println!("[{tag}] {id}. {name}{note}: {detail}");
    };
    report(1, "gradient suite", true, gradient_suite());
    report(2, "attention invariants", true, attention_invariants());
    report(3, "structural parity", true, structural_parity());
    report(4, "loss fixtures", true, loss_fixtures());
    report(5, "detection oracles", true, detection_oracles());
    match ablation() {
        Ok(exp) => {
            report(6, "directional ablation", false, directional_ablation(&exp));
            report(7, "fusion depth", false, depth_trend(&exp));
            report(8, "reproducibility", true, reproducibility(&exp));
        }
        Err(e) => {
            report(6, "directional ablation", false, Err(e.clone()));
            report(7, "fusion depth", false, Err(e.clone()));
            report(8, "reproducibility", true, Err(e));
        }
    }
    if failures > 0 {
        println!("{failures} gating criteria failed");
        std::process::exit(1);
    }
}
