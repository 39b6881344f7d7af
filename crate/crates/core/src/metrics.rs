//! IoU, greedy detection matching, all-points AP50 and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::boxes::{BoxXYXY, Detection};
use crate::data::Episode;
use crate::error::Result;

/// Intersection over union of two valid boxes.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy VOC matching. `dets` must already be sorted by descending score.
/// Each detection takes its highest-IoU still-unmatched ground truth and is a
/// true positive if that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[BoxXYXY], gts: &[BoxXYXY], iou_thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou_unchecked(d, gt);
                if best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= iou_thresh => {
                    taken[j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Area under the precision envelope of a ranked list of TP/FP flags.
/// Returns `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Anything that maps an episode to scored boxes for its target class.
pub trait Detector {
    fn detect(&mut self, episode: &Episode) -> Result<Vec<Detection>>;
}

impl<F: FnMut(&Episode) -> Result<Vec<Detection>>> Detector for F {
    fn detect(&mut self, episode: &Episode) -> Result<Vec<Detection>> {
        self(episode)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class_id: usize,
    /// `None` when the class has no ground truth in the set.
    pub ap50: Option<f64>,
    pub n_gt: usize,
    pub n_detections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub episodes: usize,
}

impl EvalReport {
    /// Arithmetic mean AP50 over classes that have ground truth.
    pub fn mean_ap50(&self) -> f64 {
        let aps: Vec<f64> = self.classes.iter().filter_map(|c| c.ap50).collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }

    pub fn detections(&self) -> usize {
        self.classes.iter().map(|c| c.n_detections).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,AP50\n");
        for c in &self.classes {
            match c.ap50 {
                Some(ap) => writeln!(s, "{},{:.6}", c.class_id, ap).unwrap(),
                None => writeln!(s, "{},absent", c.class_id).unwrap(),
            }
        }
        writeln!(s, "mean,{:.6}", self.mean_ap50()).unwrap();
        s
    }

    pub fn summary(&self, split: &str) -> String {
        let mut s = String::new();
        writeln!(s, "split: {split}").unwrap();
        writeln!(s, "episodes: {}", self.episodes).unwrap();
        writeln!(s, "detections: {}", self.detections()).unwrap();
        for c in &self.classes {
            let ap = c.ap50.map_or("absent".to_string(), |a| format!("{:.2}%", 100.0 * a));
            writeln!(
                s,
                "class {:>2}: AP50 {ap} ({} gt, {} det)",
                c.class_id, c.n_gt, c.n_detections
            )
            .unwrap();
        }
        writeln!(s, "mean AP50: {:.2}%", 100.0 * self.mean_ap50()).unwrap();
        s
    }
}

#[derive(Default)]
struct ClassPool {
    scored: Vec<(f64, usize, bool)>,
    n_gt: usize,
}

/// Runs `detector` over every episode and pools matches per class. Episodes
/// are visited in order and ties in score keep that order, so the report is
/// deterministic.
pub fn evaluate<D: Detector + ?Sized>(detector: &mut D, episodes: &[Episode]) -> Result<EvalReport> {
    let mut pools: BTreeMap<usize, ClassPool> = BTreeMap::new();
    let mut serial = 0usize;
    for ep in episodes {
        let mut dets = detector.detect(ep)?;
        dets.retain(|d| d.class_id == ep.class_id);
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let boxes: Vec<BoxXYXY> = dets.iter().map(|d| d.bbox).collect();
        let flags = match_detections(&boxes, &ep.gts, 0.5);
        let pool = pools.entry(ep.class_id).or_default();
        pool.n_gt += ep.gts.len();
        for (d, f) in dets.iter().zip(flags) {
            pool.scored.push((d.score, serial, f));
            serial += 1;
        }
    }
    let classes = pools
        .into_iter()
        .map(|(class_id, mut pool)| {
            pool.scored
                .sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let flags: Vec<bool> = pool.scored.iter().map(|s| s.2).collect();
            ClassReport {
                class_id,
                ap50: average_precision(&flags, pool.n_gt),
                n_gt: pool.n_gt,
                n_detections: flags.len(),
            }
        })
        .collect();
    Ok(EvalReport {
        classes,
        episodes: episodes.len(),
    })
}
