//! Siamese strided convolutional feature extractor.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::neck::{ConvParams, FeaturePyramid};
use crate::tensor::{Graph, ParamBuilder, Scalar, Var};

pub const DEFAULT_WIDTHS: [usize; 6] = [16, 32, 32, 64, 64, 64];

/// Stage `i` (1-based) is a stride-2 3×3 convolution followed by ReLU, so its
/// output has stride `2^i`.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub stages: Vec<ConvParams>,
    pub widths: Vec<usize>,
    pub taps: Vec<u32>,
}

impl BackboneParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, in_channels: usize, widths: &[usize], taps: &[u32]) -> Result<Self> {
        if widths.is_empty() {
            return invalid("backbone needs at least one stage");
        }
        if taps.is_empty() || taps.iter().any(|&t| t == 0 || t as usize > widths.len()) {
            return invalid(format!("taps {taps:?} must name stages 1..={}", widths.len()));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut c = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(ConvParams::new(pb, &format!("stage{}", i + 1), w, c, 3)?);
            c = w;
        }
        Ok(Self {
            stages,
            widths: widths.to_vec(),
            taps: taps.to_vec(),
        })
    }

    /// Channel count of each tapped level.
    pub fn tap_channels(&self) -> BTreeMap<u32, usize> {
        self.taps.iter().map(|&t| (t, self.widths[t as usize - 1])).collect()
    }

    /// Required divisor of input extents.
    pub fn granularity(&self) -> usize {
        1 << self.stages.len()
    }
}

/// Runs the stages on a `[3, H, W]` image and returns the tapped levels.
pub fn extract_pyramid<T: Scalar>(g: &mut Graph<'_, T>, image: Var, params: &BackboneParams) -> Result<FeaturePyramid> {
    let (_, h, w) = g.value(image).chw()?;
    let m = params.granularity();
    if h % m != 0 || w % m != 0 {
        return invalid(format!("image extents {h}×{w} are not divisible by {m}"));
    }
    let mut x = image;
    let mut levels = Vec::with_capacity(params.taps.len());
    for (i, stage) in params.stages.iter().enumerate() {
        let y = stage.forward_strided(g, x, 2)?;
        x = g.relu(y);
        let level = i as u32 + 1;
        if params.taps.contains(&level) {
            levels.push((level, x));
        }
        if params.taps.iter().all(|&t| t <= level) {
            break;
        }
    }
    Ok(FeaturePyramid {
        levels,
        image_h: h,
        image_w: w,
    })
}
