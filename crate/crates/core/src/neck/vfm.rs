use super::fpn::upsample_like;
use super::{ConvParams, FeaturePyramid};
use crate::attention::{
    dense_attention, map_to_tokens, self_attention, sincos_positional_encoding_2d, tokens_to_map, AttentionConfig,
    DaParams, Segment, TokenSequence,
};
use crate::error::{invalid, Result};
use crate::tensor::{Graph, ParamBuilder, Scalar, Var};

/// One vertical attention level: lateral conv, self-attention, cross-attention
/// against the level above (absent at the top) and output conv.
#[derive(Clone, Debug)]
pub struct VaParams {
    pub lateral: ConvParams,
    pub sa: DaParams,
    pub ca: Option<DaParams>,
    pub output: ConvParams,
}

#[derive(Clone, Debug)]
pub struct VfmParams {
    pub levels: Vec<(u32, VaParams)>,
}

impl VfmParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, channels: &[(u32, usize)], cfg: &AttentionConfig) -> Result<Self> {
        let d = cfg.dim;
        let top = channels.iter().map(|&(j, _)| j).max();
        let mut levels = Vec::with_capacity(channels.len());
        for &(j, c) in channels {
            let mut sub = pb.sub(&format!("l{j}"));
            let lateral = ConvParams::new(&mut sub, "lateral", d, c, 1)?;
            let sa = DaParams::new(&mut sub, "sa", cfg)?;
            let ca = if Some(j) == top {
                None
            } else {
                Some(DaParams::new(&mut sub, "ca", cfg)?)
            };
            let output = ConvParams::new(&mut sub, "output", d, d, 3)?;
            levels.push((
                j,
                VaParams {
                    lateral,
                    sa,
                    ca,
                    output,
                },
            ));
        }
        Ok(Self { levels })
    }

    fn level(&self, j: u32) -> Result<&VaParams> {
        match self.levels.iter().find(|(l, _)| *l == j) {
            Some((_, p)) => Ok(p),
            None => invalid(format!("no VFM parameters for level {j}")),
        }
    }
}

/// Tokens of a `[d, H, W]` map with its grid encoding.
fn map_sequence<T: Scalar>(g: &mut Graph<'_, T>, map: Var, level: u32) -> Result<TokenSequence> {
    let (d, h, w) = g.value(map).chw()?;
    let tokens = map_to_tokens(g, map)?;
    let pos = g.constant(sincos_positional_encoding_2d(h, w, d)?);
    TokenSequence::new(g, tokens, pos, vec![Segment { level, h, w }])
}

fn lateral_sa<T: Scalar>(g: &mut Graph<'_, T>, f: Var, level: u32, p: &VaParams) -> Result<(TokenSequence, usize, usize)> {
    let lat = p.lateral.forward(g, f)?;
    let (_, h, w) = g.value(lat).chw()?;
    let seq = map_sequence(g, lat, level)?;
    Ok((self_attention(g, &seq, &p.sa)?, h, w))
}

/// `Conv3×3(SA(Conv1×1(F_M)))`.
pub fn va_top<T: Scalar>(g: &mut Graph<'_, T>, f_top: Var, level: u32, p: &VaParams) -> Result<Var> {
    let (seq, h, w) = lateral_sa(g, f_top, level, p)?;
    let map = tokens_to_map(g, seq.tokens, h, w)?;
    p.output.forward(g, map)
}

/// `Conv3×3(CA(SA(Conv1×1(F_j)), Up2×(F̃_{j+1})))`; upsampled tokens are keys and values.
pub fn va_block<T: Scalar>(g: &mut Graph<'_, T>, f: Var, fused_above: Var, level: u32, p: &VaParams) -> Result<Var> {
    let Some(ca) = &p.ca else {
        return invalid(format!("level {level} has no cross-attention parameters"));
    };
    let (seq, h, w) = lateral_sa(g, f, level, p)?;
    let lat_map = tokens_to_map(g, seq.tokens, h, w)?;
    let up = upsample_like(g, fused_above, lat_map)?;
    let above = map_sequence(g, up, level)?;
    let x = dense_attention(g, &seq, &above, ca)?;
    let map = tokens_to_map(g, x.tokens, h, w)?;
    p.output.forward(g, map)
}

/// `va_top` at the highest level, then `va_block` down the pyramid.
pub fn vfm_build<T: Scalar>(g: &mut Graph<'_, T>, pyr: &FeaturePyramid, params: &VfmParams) -> Result<FeaturePyramid> {
    pyr.check_contiguous()?;
    let mut fused: Vec<(u32, Var)> = Vec::with_capacity(pyr.levels.len());
    let mut above: Option<Var> = None;
    for &(j, x) in pyr.levels.iter().rev() {
        let p = params.level(j)?;
        let out = match above {
            None => va_top(g, x, j, p)?,
            Some(up) => va_block(g, x, up, j, p)?,
        };
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
