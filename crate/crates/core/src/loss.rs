//! Detection losses: sigmoid focal classification, L1 + GIoU box regression
//! and centerness-weighted binary cross entropy.

use crate::boxes::BoxXYXY;
use crate::error::{invalid, Result};
use crate::head::{FlatHead, TrainTargets};
use crate::tensor::{Graph, Scalar, Var};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub(crate) fn focal_terms(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    // Positive and negative cases are mirror images under x -> -x.
    let (z, weight, sign) = if positive {
        (x, alpha, 1.0)
    } else {
        (-x, 1.0 - alpha, -1.0)
    };
    let p = sigmoid(z);
    let q = 1.0 - p;
    let log_p = log_sigmoid(z);
    let mod_factor = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
    let loss = -weight * mod_factor * log_p;
    let dz = weight * mod_factor * (gamma * p * log_p - q);
    (loss, sign * dz)
}

/// `−α(1−p)^γ log p` for a positive, `−(1−α) p^γ log(1−p)` for a negative,
/// with `p = σ(logit)`.
pub fn focal_loss(logit: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    focal_terms(logit, positive, alpha, gamma).0
}

/// Generalised IoU in `[−1, 1]`.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let enclosing = a.enclosing(b).area();
    Ok(inter / union - (enclosing - union) / enclosing)
}

/// Regression loss at one positive location: mean absolute error of the
/// normalised distances plus `1 − GIoU` of the decoded boxes.
pub fn regression_loss(pred: [f64; 4], target: [f64; 4], location: (f64, f64), norm: f64) -> Result<f64> {
    if pred.iter().chain(&target).any(|&d| d <= 0.0) {
        return invalid("regression distances must be positive");
    }
    let l1 = pred
        .iter()
        .zip(&target)
        .map(|(p, t)| (p - t).abs() / norm)
        .sum::<f64>()
        / 4.0;
    let pb = BoxXYXY::from_distances(location.0, location.1, pred);
    let tb = BoxXYXY::from_distances(location.0, location.1, target);
    Ok(l1 + 1.0 - giou(&pb, &tb)?)
}

/// Same quantity as [`regression_loss`] computed directly from distances
/// (both boxes contain the location), with its gradient wrt `pred`.
pub(crate) fn distance_loss_and_grad(p: &[f64; 4], t: &[f64; 4], norm: f64) -> (f64, [f64; 4]) {
    let [l, tp, r, b] = *p;
    let [lt, tt, rt, bt] = *t;
    let area_p = (l + r) * (tp + b);
    let area_t = (lt + rt) * (tt + bt);
    let iw = l.min(lt) + r.min(rt);
    let ih = tp.min(tt) + b.min(bt);
    let inter = iw * ih;
    let union = area_p + area_t - inter;
    let ew = l.max(lt) + r.max(rt);
    let eh = tp.max(tt) + b.max(bt);
    let enc = ew * eh;
    let giou = inter / union - 1.0 + union / enc;

    // giou = I/U + U/E − 1 with U = Ap + At − I
    let c_inter = 1.0 / union + inter / (union * union) - 1.0 / enc;
    let c_area = -inter / (union * union) + 1.0 / enc;
    let c_enc = -union / (enc * enc);
    let horizontal = |d: f64, dt: f64| {
        let di = if d <= dt { ih } else { 0.0 };
        let de = if d >= dt { eh } else { 0.0 };
        c_inter * di + c_area * (tp + b) + c_enc * de
    };
    let vertical = |d: f64, dt: f64| {
        let di = if d <= dt { iw } else { 0.0 };
        let de = if d >= dt { ew } else { 0.0 };
        c_inter * di + c_area * (l + r) + c_enc * de
    };
    let dgiou = [horizontal(l, lt), vertical(tp, tt), horizontal(r, rt), vertical(b, bt)];

    let mut l1 = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let diff = p[i] - t[i];
        l1 += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[i] = sign / (4.0 * norm) - dgiou[i];
    }
    (l1 / (4.0 * norm) + 1.0 - giou, grad)
}

/// Balance weights of the three loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub ctn: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 20.0,
            reg: 2.0,
            ctn: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Normalised loss terms of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub ctn: f64,
    pub total: f64,
    pub n: usize,
    pub n_pos: usize,
}

impl LossBreakdown {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("cls", self.cls), ("reg", self.reg), ("ctn", self.ctn), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let k = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.cls += b.cls / k;
            out.reg += b.reg / k;
            out.ctn += b.ctn / k;
            out.total += b.total / k;
            out.n += b.n;
            out.n_pos += b.n_pos;
        }
        out
    }
}

/// `λ_cls/N Σ focal + λ_reg/N_pos Σ_pos reg + λ_ctn/N_pos Σ_pos t*·BCE(t, t*)`.
///
/// Returns the total as a graph scalar plus the numeric breakdown, where
/// `cls`, `reg` and `ctn` are the normalised but unweighted terms.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    head: &FlatHead,
    targets: &TrainTargets,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let n = targets.len();
    if g.shape(head.cls) != [n, 1] || g.shape(head.reg) != [n, 4] || g.shape(head.ctn) != [n, 1] {
        return crate::error::shape_err("combined_loss", g.shape(head.reg), &[n, 4]);
    }
    let w = cfg.weights;
    let cls_sum = g.focal_loss_sum(head.cls, &targets.labels, cfg.focal_alpha, cfg.focal_gamma)?;
    let cls_term = g.scale(cls_sum, 1.0 / n as f64);
    let mut breakdown = LossBreakdown {
        cls: g.value(cls_term).data()[0].f64(),
        n,
        n_pos: targets.positives().count(),
        ..Default::default()
    };
    let mut total = g.scale(cls_term, w.cls);

    let pos: Vec<usize> = targets.positives().collect();
    if !pos.is_empty() {
        let inv_pos = 1.0 / pos.len() as f64;
        let reg_pred = g.gather_rows(head.reg, &pos)?;
        let reg_tgt: Vec<[f64; 4]> = pos.iter().map(|&i| targets.distances[i]).collect();
        let reg_sum = g.box_regression_sum(reg_pred, &reg_tgt, targets.norm)?;
        let reg_term = g.scale(reg_sum, inv_pos);

        let ctn_pred = g.gather_rows(head.ctn, &pos)?;
        let ctn_tgt: Vec<f64> = pos.iter().map(|&i| targets.centerness[i]).collect();
        let ctn_sum = g.bce_with_logits_sum(ctn_pred, &ctn_tgt, &ctn_tgt)?;
        let ctn_term = g.scale(ctn_sum, inv_pos);

        breakdown.reg = g.value(reg_term).data()[0].f64();
        breakdown.ctn = g.value(ctn_term).data()[0].f64();
        let reg_w = g.scale(reg_term, w.reg);
        let ctn_w = g.scale(ctn_term, w.ctn);
        total = g.add(total, reg_w)?;
        total = g.add(total, ctn_w)?;
    }
    breakdown.total = g.value(total).data()[0].f64();
    Ok((total, breakdown))
}
