//! Anchor-free detection head: per-location classification, `(l, t, r, b)`
//! distance regression and centerness, plus target assignment, decoding and NMS.

use std::collections::BTreeMap;

use crate::boxes::{BoxXYXY, Detection};
use crate::error::{invalid, Result};
use crate::loss::sigmoid;
use crate::neck::FeaturePyramid;
use crate::tensor::{Graph, ParamBuilder, ParamId, Scalar, Var};

/// Pixel centres `(x, y)` of a level's feature cells, row-major.
pub fn compute_locations(level: u32, height: usize, width: usize) -> Vec<(f64, f64)> {
    let s = (1u64 << level) as f64;
    let mut out = Vec::with_capacity(height * width);
    for k in 0..height {
        for i in 0..width {
            out.push((s / 2.0 + i as f64 * s, s / 2.0 + k as f64 * s));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    tower: Vec<(ParamId, ParamId)>,
    cls: (ParamId, ParamId),
    reg: (ParamId, ParamId),
    ctn: (ParamId, ParamId),
    log_scales: BTreeMap<u32, ParamId>,
}

/// Prior probability used to initialise the classification bias.
const CLS_PRIOR: f64 = 0.01;

impl HeadParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, levels: &[u32]) -> Result<Self> {
        let mut tower = Vec::new();
        for i in 0..2 {
            let mut sub = pb.sub(&format!("tower{i}"));
            tower.push((sub.conv_weight("w", dim, dim, 3)?, sub.constant("b", &[dim], 0.0)?));
        }
        let mut out = |name: &str, c: usize, bias: f64| -> Result<(ParamId, ParamId)> {
            let mut sub = pb.sub(name);
            let w = sub.uniform("w", &[c, dim, 3, 3], 0.01)?;
            Ok((w, sub.constant("b", &[c], bias)?))
        };
        let cls = out("cls", 1, -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln())?;
        let reg = out("reg", 4, 0.0)?;
        let ctn = out("ctn", 1, 0.0)?;
        let mut log_scales = BTreeMap::new();
        for &j in levels {
            // distances start near one stride
            let id = pb.constant(&format!("log_scale{j}"), &[1], (j as f64) * std::f64::consts::LN_2)?;
            log_scales.insert(j, id);
        }
        Ok(Self {
            tower,
            cls,
            reg,
            ctn,
            log_scales,
        })
    }
}

/// Head outputs of one level, as graph variables.
#[derive(Clone, Copy, Debug)]
pub struct HeadLevel {
    pub level: u32,
    /// `[1, H, W]` logits.
    pub cls: Var,
    /// `[4, H, W]` positive pixel distances `(l, t, r, b)`.
    pub reg: Var,
    /// `[1, H, W]` logits.
    pub ctn: Var,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub levels: Vec<HeadLevel>,
    pub image_h: usize,
    pub image_w: usize,
}

/// All levels concatenated location-wise: `cls [N,1]`, `reg [N,4]`, `ctn [N,1]`.
#[derive(Clone, Copy, Debug)]
pub struct FlatHead {
    pub cls: Var,
    pub reg: Var,
    pub ctn: Var,
}

fn conv<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (g.param(p.0), g.param(p.1));
    g.conv2d(x, w, Some(b), 1, 1)
}

/// Applies the shared tower and output convolutions to every level.
pub fn head_forward<T: Scalar>(g: &mut Graph<'_, T>, fused: &FeaturePyramid, params: &HeadParams) -> Result<HeadOutputs> {
    let mut levels = Vec::with_capacity(fused.levels.len());
    for &(j, map) in &fused.levels {
        let Some(&scale) = params.log_scales.get(&j) else {
            return invalid(format!("head has no scale for level {j}"));
        };
        let mut x = map;
        for &p in &params.tower {
            x = conv(g, x, p)?;
            x = g.relu(x);
        }
        let cls = conv(g, x, params.cls)?;
        let raw = conv(g, x, params.reg)?;
        let s = g.param(scale);
        let shifted = g.add_scalar(raw, s)?;
        let reg = g.exp(shifted);
        let ctn = conv(g, x, params.ctn)?;
        levels.push(HeadLevel { level: j, cls, reg, ctn });
    }
    Ok(HeadOutputs {
        levels,
        image_h: fused.image_h,
        image_w: fused.image_w,
    })
}

impl HeadOutputs {
    pub fn flatten<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<FlatHead> {
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        let mut ctn = Vec::new();
        for l in &self.levels {
            let (_, h, w) = g.value(l.cls).chw()?;
            cls.push(g.reshape(l.cls, &[h * w, 1])?);
            ctn.push(g.reshape(l.ctn, &[h * w, 1])?);
            let r = g.reshape(l.reg, &[4, h * w])?;
            reg.push(g.transpose(r)?);
        }
        Ok(FlatHead {
            cls: g.concat_rows(&cls)?,
            reg: g.concat_rows(&reg)?,
            ctn: g.concat_rows(&ctn)?,
        })
    }

    /// `(level, H, W)` per level, in output order.
    pub fn grid<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<(u32, usize, usize)> {
        self.levels
            .iter()
            .map(|l| {
                let s = g.shape(l.cls);
                (l.level, s[1], s[2])
            })
            .collect()
    }

    pub fn values<T: Scalar>(&self, g: &Graph<'_, T>) -> HeadValues {
        let levels = self
            .levels
            .iter()
            .map(|l| {
                let s = g.shape(l.cls);
                let (h, w) = (s[1], s[2]);
                let reg = g.value(l.reg).data();
                LevelValues {
                    level: l.level,
                    h,
                    w,
                    cls: g.value(l.cls).to_f64_vec(),
                    ctn: g.value(l.ctn).to_f64_vec(),
                    reg: (0..h * w)
                        .map(|i| std::array::from_fn(|c| reg[c * h * w + i].f64()))
                        .collect(),
                }
            })
            .collect();
        HeadValues {
            levels,
            image_h: self.image_h,
            image_w: self.image_w,
        }
    }
}

/// Numeric head outputs of one level.
#[derive(Clone, Debug)]
pub struct LevelValues {
    pub level: u32,
    pub h: usize,
    pub w: usize,
    pub cls: Vec<f64>,
    pub reg: Vec<[f64; 4]>,
    pub ctn: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HeadValues {
    pub levels: Vec<LevelValues>,
    pub image_h: usize,
    pub image_w: usize,
}

/// Allowed `max(l*, t*, r*, b*)` per level, as half-open `(min, max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRanges(pub BTreeMap<u32, (f64, f64)>);

impl LevelRanges {
    pub fn get(&self, level: u32) -> Option<(f64, f64)> {
        self.0.get(&level).copied()
    }
}

impl Default for LevelRanges {
    fn default() -> Self {
        Self(BTreeMap::from([(4, (0.0, 32.0)), (5, (12.0, 64.0)), (6, (24.0, f64::INFINITY))]))
    }
}

/// Per-location training targets across all levels (flattened like [`FlatHead`]).
#[derive(Clone, Debug, Default)]
pub struct TrainTargets {
    pub labels: Vec<bool>,
    pub distances: Vec<[f64; 4]>,
    pub centerness: Vec<f64>,
    pub locations: Vec<(f64, f64)>,
    pub levels: Vec<u32>,
    /// Index of the assigned ground-truth box.
    pub assigned: Vec<Option<usize>>,
    /// Extent used to normalise L1 distances.
    pub norm: f64,
}

impl TrainTargets {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i)
    }
}

/// `√((min(l,r)/max(l,r)) · (min(t,b)/max(t,b)))`.
pub fn centerness_target(d: [f64; 4]) -> f64 {
    let [l, t, r, b] = d;
    let lr = l.min(r) / l.max(r);
    let tb = t.min(b) / t.max(b);
    let v = (lr * tb).sqrt();
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

/// Assigns each location to the smallest-area box that strictly contains it
/// and whose `max(l*, t*, r*, b*)` falls in the location's level range.
pub fn assign_targets(
    grid: &[(u32, usize, usize)],
    gt_boxes: &[BoxXYXY],
    ranges: &LevelRanges,
    norm: f64,
) -> Result<TrainTargets> {
    let mut out = TrainTargets {
        norm,
        ..Default::default()
    };
    for &(level, h, w) in grid {
        let Some((lo, hi)) = ranges.get(level) else {
            return invalid(format!("no regression range for level {level}"));
        };
        for (x, y) in compute_locations(level, h, w) {
            let mut best: Option<(usize, f64, [f64; 4])> = None;
            for (bi, b) in gt_boxes.iter().enumerate() {
                if !b.contains_strictly(x, y) {
                    continue;
                }
                let d = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y];
                let m = d.iter().copied().fold(0.0, f64::max);
                if m <= lo || m > hi {
                    continue;
                }
                if best.is_none_or(|(_, area, _)| b.area() < area) {
                    best = Some((bi, b.area(), d));
                }
            }
            out.locations.push((x, y));
            out.levels.push(level);
            match best {
                Some((bi, _, d)) => {
                    out.labels.push(true);
                    out.distances.push(d);
                    out.centerness.push(centerness_target(d));
                    out.assigned.push(Some(bi));
                }
                None => {
                    out.labels.push(false);
                    out.distances.push([0.0; 4]);
                    out.centerness.push(0.0);
                    out.assigned.push(None);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// `√(σ(cls) · σ(ctn))`
    Geometric,
    /// `σ(cls) · σ(ctn)`
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub score_mode: ScoreMode,
    pub max_detections: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.2,
            nms_iou: 0.5,
            score_mode: ScoreMode::Geometric,
            max_detections: 100,
        }
    }
}

pub fn location_score(cls_logit: f64, ctn_logit: f64, mode: ScoreMode) -> f64 {
    let p = sigmoid(cls_logit) * sigmoid(ctn_logit);
    match mode {
        ScoreMode::Geometric => p.sqrt(),
        ScoreMode::Product => p,
    }
}

/// Thresholds location scores, decodes boxes (clipped to the image) and applies NMS.
pub fn decode_detections(values: &HeadValues, cfg: &DecodeConfig, class_id: usize) -> Vec<Detection> {
    let (iw, ih) = (values.image_w as f64, values.image_h as f64);
    let mut cands = Vec::new();
    for lv in &values.levels {
        let locs = compute_locations(lv.level, lv.h, lv.w);
        for (i, &(x, y)) in locs.iter().enumerate() {
            let score = location_score(lv.cls[i], lv.ctn[i], cfg.score_mode);
            if score < cfg.score_thresh {
                continue;
            }
            let bbox = BoxXYXY::from_distances(x, y, lv.reg[i]).clipped(iw, ih);
            if bbox.validate().is_err() {
                continue;
            }
            cands.push(Detection { class_id, score, bbox });
        }
    }
    let boxes: Vec<BoxXYXY> = cands.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = cands.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, cfg.nms_iou)
        .into_iter()
        .take(cfg.max_detections)
        .map(|i| cands[i])
        .collect()
}

/// Greedy non-maximum suppression; returns kept indices in descending score
/// order (equal scores keep the lower index first).
pub fn nms(boxes: &[BoxXYXY], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| crate::metrics::iou_unchecked(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}
