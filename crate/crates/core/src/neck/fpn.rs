use super::{ConvParams, FeaturePyramid};
use crate::error::{invalid, Result};
use crate::tensor::{Graph, ParamBuilder, Scalar, Var};

#[derive(Clone, Copy, Debug)]
pub struct FpnLevelParams {
    pub lateral: ConvParams,
    pub output: ConvParams,
}

/// Per-level 1×1 lateral and 3×3 output convolutions, width `d`.
#[derive(Clone, Debug)]
pub struct FpnParams {
    pub levels: Vec<(u32, FpnLevelParams)>,
}

impl FpnParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: &[(u32, usize)], d: usize) -> Result<Self> {
        let mut levels = Vec::with_capacity(channels.len());
        for &(j, c) in channels {
            let mut sub = pb.sub(&format!("l{j}"));
            levels.push((
                j,
                FpnLevelParams {
                    lateral: ConvParams::new(&mut sub, "lateral", d, c, 1)?,
                    output: ConvParams::new(&mut sub, "output", d, d, 3)?,
                },
            ));
        }
        Ok(Self { levels })
    }

    pub(crate) fn level(&self, j: u32) -> Result<&FpnLevelParams> {
        match self.levels.iter().find(|(l, _)| *l == j) {
            Some((_, p)) => Ok(p),
            None => invalid(format!("no FPN parameters for level {j}")),
        }
    }
}

/// Upsamples the fused upper level to `x`'s extents.
pub(crate) fn upsample_like<T: Scalar>(g: &mut Graph<'_, T>, above: Var, x: Var) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    g.upsample_nearest_2x_to(above, h, w)
}

/// Top-down fusion `F̃_j = Conv3×3(Conv1×1(F_j) + Up2×(F̃_{j+1}))`, the top
/// level without the upsampled term.
pub fn fpn_build<T: Scalar>(g: &mut Graph<'_, T>, pyr: &FeaturePyramid, params: &FpnParams) -> Result<FeaturePyramid> {
    pyr.check_contiguous()?;
    let mut fused: Vec<(u32, Var)> = Vec::with_capacity(pyr.levels.len());
    let mut above: Option<Var> = None;
    for &(j, x) in pyr.levels.iter().rev() {
        let p = params.level(j)?;
        let mut lat = p.lateral.forward(g, x)?;
        if let Some(up) = above {
            let up = upsample_like(g, up, lat)?;
            lat = g.add(lat, up)?;
        }
        let out = p.output.forward(g, lat)?;
        fused.push((j, out));
        above = Some(out);
    }
    fused.reverse();
    Ok(FeaturePyramid {
        levels: fused,
        image_h: pyr.image_h,
        image_w: pyr.image_w,
    })
}
