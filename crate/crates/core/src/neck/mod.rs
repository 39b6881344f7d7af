//! Query/support fusion necks.
//!
//! A neck is a cross-scale stage (none, FPN or VFM) applied with shared
//! weights to both pyramids, followed by a cross-sample stage (prototype
//! reweighting, kernel correlation or HFM) that injects the support into
//! every query level.

mod baselines;
mod fpn;
mod hfm;
mod vfm;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::AttentionConfig;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Graph, ParamBuilder, ParamId, Scalar, Var};

pub use baselines::{kernel_correlate, prototype_reweight};
pub use fpn::{fpn_build, FpnLevelParams, FpnParams};
pub use hfm::{
    ha_finalize, ha_iterate, hfm_fuse_corresponding, hfm_fuse_one_to_all, pyramid_tokens, FinalizeParams,
    HaBlockParams, HfmParams,
};
pub use vfm::{va_block, va_top, vfm_build, VaParams, VfmParams};

/// Feature maps `[C, H_j, W_j]` keyed by level `j` (stride `2^j`), ascending.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<(u32, Var)>,
    pub image_h: usize,
    pub image_w: usize,
}

impl FeaturePyramid {
    pub fn get(&self, level: u32) -> Option<Var> {
        self.levels.iter().find(|(j, _)| *j == level).map(|&(_, v)| v)
    }

    pub fn level_ids(&self) -> Vec<u32> {
        self.levels.iter().map(|&(j, _)| j).collect()
    }

    /// Levels must be nonempty, ascending and gap-free.
    pub fn check_contiguous(&self) -> Result<()> {
        check_contiguous(&self.level_ids())
    }

    pub fn shapes<T: Scalar>(&self, g: &Graph<'_, T>) -> Vec<(u32, Vec<usize>)> {
        self.levels.iter().map(|&(j, v)| (j, g.shape(v).to_vec())).collect()
    }

    /// Sub-pyramid with the listed levels, in the listed order.
    pub fn select(&self, levels: &[u32]) -> Result<Self> {
        let mut out = Vec::with_capacity(levels.len());
        for &j in levels {
            match self.get(j) {
                Some(v) => out.push((j, v)),
                None => return invalid(format!("pyramid has no level {j}")),
            }
        }
        Ok(Self {
            levels: out,
            image_h: self.image_h,
            image_w: self.image_w,
        })
    }
}

pub(crate) fn check_contiguous(levels: &[u32]) -> Result<()> {
    if levels.is_empty() {
        return invalid("empty pyramid");
    }
    if levels.windows(2).any(|w| w[1] != w[0] + 1) {
        return invalid(format!("pyramid levels {levels:?} are not contiguous"));
    }
    Ok(())
}

/// Convolution weight `[out, in, k, k]` and bias.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

impl ConvParams {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
    ) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            w: sub.conv_weight("w", c_out, c_in, k)?,
            b: sub.constant("b", &[c_out], 0.0)?,
            k,
        })
    }

    /// Same-size convolution (stride 1).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.forward_strided(g, x, 1)
    }

    pub fn forward_strided<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, stride: usize) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), stride, self.k / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossScale {
    /// Per-level 1×1 projection only.
    None,
    Fpn,
    Vfm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossSample {
    Reweighting,
    Correlation,
    Hfm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleStrategy {
    Corresponding,
    OneToAll,
}

impl fmt::Display for ScaleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Corresponding => "corresponding",
            Self::OneToAll => "one-to-all",
        })
    }
}

impl FromStr for ScaleStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corresponding" => Ok(Self::Corresponding),
            "one-to-all" => Ok(Self::OneToAll),
            _ => Err(Error::Config(format!("unknown scale strategy {s:?}"))),
        }
    }
}

/// Cross-scale stage plus cross-sample stage, written `fpn+hfm`, `vfm+correlation`,
/// or just `reweighting` when there is no cross-scale stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeckKind {
    pub cross_scale: CrossScale,
    pub cross_sample: CrossSample,
}

impl fmt::Display for NeckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.cross_scale {
            CrossScale::None => {}
            CrossScale::Fpn => f.write_str("fpn+")?,
            CrossScale::Vfm => f.write_str("vfm+")?,
        }
        f.write_str(match self.cross_sample {
            CrossSample::Reweighting => "reweighting",
            CrossSample::Correlation => "correlation",
            CrossSample::Hfm => "hfm",
        })
    }
}

impl FromStr for NeckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (scale, sample) = match s.split_once('+') {
            Some((a, b)) => (Some(a), b),
            None => (None, s),
        };
        let cross_scale = match scale {
            None => CrossScale::None,
            Some("fpn") => CrossScale::Fpn,
            Some("vfm") => CrossScale::Vfm,
            Some(other) => return Err(Error::Config(format!("unknown cross-scale stage {other:?}"))),
        };
        let cross_sample = match sample {
            "reweighting" => CrossSample::Reweighting,
            "correlation" => CrossSample::Correlation,
            "hfm" => CrossSample::Hfm,
            other => return Err(Error::Config(format!("unknown fusion {other:?}"))),
        };
        Ok(Self {
            cross_scale,
            cross_sample,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeckConfig {
    pub kind: NeckKind,
    pub scale: ScaleStrategy,
    /// Number of two-way HA blocks.
    pub blocks: usize,
    pub query_levels: Vec<u32>,
    pub support_levels: Vec<u32>,
    /// One-to-all HFM: attend over all query levels jointly (true) or run each
    /// query level separately against the support with shared weights.
    pub joint_levels: bool,
    pub attention: AttentionConfig,
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            kind: NeckKind {
                cross_scale: CrossScale::Vfm,
                cross_sample: CrossSample::Hfm,
            },
            scale: ScaleStrategy::OneToAll,
            blocks: 6,
            query_levels: vec![4, 5, 6],
            support_levels: vec![5],
            joint_levels: true,
            attention: AttentionConfig::default(),
        }
    }
}

impl NeckConfig {
    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        check_contiguous(&self.query_levels)?;
        if self.support_levels.is_empty() {
            return invalid("no support level");
        }
        match self.scale {
            ScaleStrategy::OneToAll if self.support_levels.len() != 1 => invalid(format!(
                "one-to-all fusion takes exactly one support level, got {:?}",
                self.support_levels
            )),
            ScaleStrategy::Corresponding if self.support_levels != self.query_levels => invalid(format!(
                "corresponding fusion needs equal level sets, got {:?} and {:?}",
                self.query_levels, self.support_levels
            )),
            _ => Ok(()),
        }
    }

    /// Contiguous span of levels the cross-scale stage has to build.
    pub fn pyramid_levels(&self) -> Vec<u32> {
        let all = self.query_levels.iter().chain(&self.support_levels);
        let lo = *all.clone().min().unwrap_or(&4);
        let hi = *all.max().unwrap_or(&6);
        (lo..=hi).collect()
    }
}

#[derive(Clone, Debug)]
pub enum CrossScaleParams {
    Lateral(BTreeMap<u32, ConvParams>),
    Fpn(FpnParams),
    Vfm(VfmParams),
}

#[derive(Clone, Debug)]
pub struct NeckParams {
    pub cross_scale: CrossScaleParams,
    pub hfm: Option<HfmParams>,
    pub cfg: NeckConfig,
}

impl NeckParams {
    /// `in_channels` gives the backbone width at each level of `cfg.pyramid_levels()`.
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &NeckConfig,
        in_channels: &BTreeMap<u32, usize>,
    ) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.pyramid_levels();
        let mut channels = Vec::with_capacity(levels.len());
        for j in &levels {
            match in_channels.get(j) {
                Some(&c) => channels.push((*j, c)),
                None => return invalid(format!("no backbone features at level {j}")),
            }
        }
        let d = cfg.attention.dim;
        let cross_scale = match cfg.kind.cross_scale {
            CrossScale::None => {
                let mut sub = pb.sub("lateral");
                let mut map = BTreeMap::new();
                for &(j, c) in &channels {
                    map.insert(j, ConvParams::new(&mut sub, &format!("l{j}"), d, c, 1)?);
                }
                CrossScaleParams::Lateral(map)
            }
            CrossScale::Fpn => CrossScaleParams::Fpn(FpnParams::new(&mut pb.sub("fpn"), &channels, d)?),
            CrossScale::Vfm => {
                CrossScaleParams::Vfm(VfmParams::new(&mut pb.sub("vfm"), &channels, &cfg.attention)?)
            }
        };
        let hfm = match cfg.kind.cross_sample {
            CrossSample::Hfm => Some(HfmParams::new(
                &mut pb.sub("hfm"),
                &cfg.attention,
                cfg.blocks,
                &cfg.query_levels,
            )?),
            _ => None,
        };
        Ok(Self {
            cross_scale,
            hfm,
            cfg: cfg.clone(),
        })
    }

    pub fn cross_scale_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let pyr = pyr.select(&self.cfg.pyramid_levels())?;
        match &self.cross_scale {
            CrossScaleParams::Lateral(map) => {
                let mut levels = Vec::with_capacity(pyr.levels.len());
                for &(j, x) in &pyr.levels {
                    let p = map
                        .get(&j)
                        .ok_or_else(|| Error::Invalid(format!("no lateral projection for level {j}")))?;
                    levels.push((j, p.forward(g, x)?));
                }
                Ok(FeaturePyramid { levels, ..pyr })
            }
            CrossScaleParams::Fpn(p) => fpn_build(g, &pyr, p),
            CrossScaleParams::Vfm(p) => vfm_build(g, &pyr, p),
        }
    }

    /// Fused query pyramid over `cfg.query_levels`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: &FeaturePyramid,
        support: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        let q = self.cross_scale_forward(g, query)?.select(&self.cfg.query_levels)?;
        let s = self.cross_scale_forward(g, support)?.select(&self.cfg.support_levels)?;
        self.cross_sample_forward(g, &q, &s)
    }

    pub fn cross_sample_forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        q: &FeaturePyramid,
        s: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        let cfg = &self.cfg;
        let support_for = |j: u32| -> Result<Var> {
            let level = match cfg.scale {
                ScaleStrategy::OneToAll => cfg.support_levels[0],
                ScaleStrategy::Corresponding => j,
            };
            s.get(level)
                .ok_or_else(|| Error::Invalid(format!("support pyramid has no level {level}")))
        };
        match cfg.kind.cross_sample {
            CrossSample::Reweighting | CrossSample::Correlation => {
                let mut levels = Vec::with_capacity(q.levels.len());
                for &(j, fq) in &q.levels {
                    let fs = support_for(j)?;
                    let out = if cfg.kind.cross_sample == CrossSample::Reweighting {
                        prototype_reweight(g, fq, fs)?
                    } else {
                        let k = baselines::CORRELATION_KERNEL;
                        let raw = kernel_correlate(g, fq, fs)?;
                        g.scale(raw, 1.0 / (k * k) as f64)
                    };
                    levels.push((j, out));
                }
                Ok(FeaturePyramid {
                    levels,
                    image_h: q.image_h,
                    image_w: q.image_w,
                })
            }
            CrossSample::Hfm => {
                let p = self.hfm.as_ref().ok_or_else(|| Error::Invalid("missing HFM parameters".into()))?;
                match cfg.scale {
                    ScaleStrategy::OneToAll if cfg.joint_levels => {
                        hfm_fuse_one_to_all(g, q, support_for(q.levels[0].0)?, p)
                    }
                    ScaleStrategy::OneToAll => {
                        let fs = support_for(q.levels[0].0)?;
                        let mut levels = Vec::with_capacity(q.levels.len());
                        for &(j, fq) in &q.levels {
                            let single = FeaturePyramid {
                                levels: vec![(j, fq)],
                                image_h: q.image_h,
                                image_w: q.image_w,
                            };
                            levels.extend(hfm_fuse_one_to_all(g, &single, fs, p)?.levels);
                        }
                        Ok(FeaturePyramid { levels, ..q.clone() })
                    }
                    ScaleStrategy::Corresponding => hfm_fuse_corresponding(g, q, s, p),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neck_kind_round_trip() {
        for s in [
            "reweighting",
            "correlation",
            "hfm",
            "fpn+hfm",
            "vfm+hfm",
            "vfm+correlation",
            "fpn+reweighting",
        ] {
            assert_eq!(s.parse::<NeckKind>().unwrap().to_string(), s);
        }
        assert!("vfm+fpn".parse::<NeckKind>().is_err());
        assert!("tfm+hfm".parse::<NeckKind>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = NeckConfig::default();
        cfg.validate().unwrap();
        cfg.support_levels = vec![4, 5];
        assert!(cfg.validate().is_err());
        cfg.scale = ScaleStrategy::Corresponding;
        assert!(cfg.validate().is_err());
        cfg.support_levels = vec![4, 5, 6];
        cfg.validate().unwrap();
        cfg.query_levels = vec![4, 6];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pyramid_span_covers_support_level() {
        let cfg = NeckConfig {
            query_levels: vec![5, 6],
            support_levels: vec![4],
            ..NeckConfig::default()
        };
        assert_eq!(cfg.pyramid_levels(), vec![4, 5, 6]);
    }
}
