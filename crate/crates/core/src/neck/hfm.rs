use std::collections::BTreeMap;

use super::FeaturePyramid;
use crate::attention::{
    caf, map_to_tokens, self_attention, sincos_positional_encoding_2d, tokens_to_map, AttentionConfig, CafParams,
    DaParams, Segment, TokenSequence,
};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Graph, ParamBuilder, ParamId, Scalar, Var};

/// One two-way horizontal attention block with separate query and support sides.
#[derive(Clone, Debug)]
pub struct HaBlockParams {
    pub sa_q: DaParams,
    pub sa_s: DaParams,
    /// Query attends to support.
    pub caf_q: CafParams,
    /// Support attends to query.
    pub caf_s: CafParams,
}

impl HaBlockParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            sa_q: DaParams::new(&mut sub, "sa_q", cfg)?,
            sa_s: DaParams::new(&mut sub, "sa_s", cfg)?,
            caf_q: CafParams::new(&mut sub, "caf_q", cfg)?,
            caf_s: CafParams::new(&mut sub, "caf_s", cfg)?,
        })
    }

    /// The same block with the query and support roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            sa_q: self.sa_s.clone(),
            sa_s: self.sa_q.clone(),
            caf_q: self.caf_s.clone(),
            caf_s: self.caf_q.clone(),
        }
    }
}

/// One-way aggregation closing the HA chain.
#[derive(Clone, Debug)]
pub struct FinalizeParams {
    pub sa_q: DaParams,
    pub sa_s: DaParams,
    pub caf: CafParams,
}

impl FinalizeParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            sa_q: DaParams::new(&mut sub, "sa_q", cfg)?,
            sa_s: DaParams::new(&mut sub, "sa_s", cfg)?,
            caf: CafParams::new(&mut sub, "caf", cfg)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct HfmParams {
    pub blocks: Vec<HaBlockParams>,
    pub finalize: FinalizeParams,
    /// Learned offset added to the grid encoding of each query level.
    pub level_embedding: BTreeMap<u32, ParamId>,
    pub support_embedding: ParamId,
}

impl HfmParams {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &AttentionConfig,
        n_blocks: usize,
        query_levels: &[u32],
    ) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| HaBlockParams::new(pb, &format!("block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let finalize = FinalizeParams::new(pb, "finalize", cfg)?;
        let mut level_embedding = BTreeMap::new();
        for &j in query_levels {
            level_embedding.insert(j, pb.uniform(&format!("level_embedding{j}"), &[cfg.dim], 0.5)?);
        }
        let support_embedding = pb.uniform("support_embedding", &[cfg.dim], 0.5)?;
        Ok(Self {
            blocks,
            finalize,
            level_embedding,
            support_embedding,
        })
    }

    fn level_embedding(&self, j: u32) -> Result<ParamId> {
        match self.level_embedding.get(&j) {
            Some(&id) => Ok(id),
            None => invalid(format!("no level embedding for level {j}")),
        }
    }
}

/// Concatenates maps into one sequence; each level's grid encoding is offset
/// by its embedding.
pub fn pyramid_tokens<T: Scalar>(
    g: &mut Graph<'_, T>,
    maps: &[(u32, Var)],
    embeddings: &[ParamId],
) -> Result<TokenSequence> {
    if maps.len() != embeddings.len() || maps.is_empty() {
        return invalid("pyramid_tokens needs one embedding per map");
    }
    let mut tokens = Vec::with_capacity(maps.len());
    let mut pos = Vec::with_capacity(maps.len());
    let mut origin = Vec::with_capacity(maps.len());
    for (&(level, map), &emb) in maps.iter().zip(embeddings) {
        let (d, h, w) = g.value(map).chw()?;
        tokens.push(map_to_tokens(g, map)?);
        let grid = g.constant(sincos_positional_encoding_2d(h, w, d)?);
        let e = g.param(emb);
        pos.push(g.add_row(grid, e)?);
        origin.push(Segment { level, h, w });
    }
    let tokens = g.concat_rows(&tokens)?;
    let pos = g.concat_rows(&pos)?;
    TokenSequence::new(g, tokens, pos, origin)
}

fn unflatten<T: Scalar>(g: &mut Graph<'_, T>, seq: &TokenSequence) -> Result<Vec<(u32, Var)>> {
    let mut out = Vec::with_capacity(seq.origin.len());
    let mut start = 0;
    for seg in &seq.origin {
        let n = seg.h * seg.w;
        let part = g.slice_rows(seq.tokens, start, n)?;
        out.push((seg.level, tokens_to_map(g, part, seg.h, seg.w)?));
        start += n;
    }
    Ok(out)
}

/// `N` two-way blocks: both sides self-attend, then each cross-attends to the
/// other's self-attended tokens.
pub fn ha_iterate<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: &TokenSequence,
    s: &TokenSequence,
    blocks: &[HaBlockParams],
) -> Result<(TokenSequence, TokenSequence)> {
    if q.dim(g) != s.dim(g) {
        return shape_err("ha_iterate", g.shape(q.tokens), g.shape(s.tokens));
    }
    let (mut q, mut s) = (q.clone(), s.clone());
    for b in blocks {
        let qb = self_attention(g, &q, &b.sa_q)?;
        let sb = self_attention(g, &s, &b.sa_s)?;
        q = caf(g, &qb, &sb, &b.caf_q)?;
        s = caf(g, &sb, &qb, &b.caf_s)?;
    }
    Ok((q, s))
}

/// `CAF(SA(q), SA(s))`.
pub fn ha_finalize<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: &TokenSequence,
    s: &TokenSequence,
    p: &FinalizeParams,
) -> Result<TokenSequence> {
    if q.dim(g) != s.dim(g) {
        return shape_err("ha_finalize", g.shape(q.tokens), g.shape(s.tokens));
    }
    let qb = self_attention(g, q, &p.sa_q)?;
    let sb = self_attention(g, s, &p.sa_s)?;
    caf(g, &qb, &sb, &p.caf)
}

fn fuse<T: Scalar>(g: &mut Graph<'_, T>, q: &TokenSequence, s: &TokenSequence, p: &HfmParams) -> Result<Vec<(u32, Var)>> {
    let (qn, sn) = ha_iterate(g, q, s, &p.blocks)?;
    let fused = ha_finalize(g, &qn, &sn, &p.finalize)?;
    unflatten(g, &fused)
}

fn support_sequence<T: Scalar>(g: &mut Graph<'_, T>, level: u32, fs: Var, p: &HfmParams) -> Result<TokenSequence> {
    pyramid_tokens(g, &[(level, fs)], &[p.support_embedding])
}

/// All query levels form one sequence that interacts with the single support map.
pub fn hfm_fuse_one_to_all<T: Scalar>(
    g: &mut Graph<'_, T>,
    query: &FeaturePyramid,
    support: Var,
    p: &HfmParams,
) -> Result<FeaturePyramid> {
    let embeddings = query
        .levels
        .iter()
        .map(|&(j, _)| p.level_embedding(j))
        .collect::<Result<Vec<_>>>()?;
    let q = pyramid_tokens(g, &query.levels, &embeddings)?;
    let s = support_sequence(g, 0, support, p)?;
    Ok(FeaturePyramid {
        levels: fuse(g, &q, &s, p)?,
        image_h: query.image_h,
        image_w: query.image_w,
    })
}

/// Query level `j` interacts only with support level `j`; weights are shared
/// across levels.
pub fn hfm_fuse_corresponding<T: Scalar>(
    g: &mut Graph<'_, T>,
    query: &FeaturePyramid,
    support: &FeaturePyramid,
    p: &HfmParams,
) -> Result<FeaturePyramid> {
    if query.level_ids() != support.level_ids() {
        return invalid(format!(
            "corresponding fusion needs equal level sets, got {:?} and {:?}",
            query.level_ids(),
            support.level_ids()
        ));
    }
    let mut levels = Vec::with_capacity(query.levels.len());
    for (&(j, fq), &(_, fs)) in query.levels.iter().zip(&support.levels) {
        let q = pyramid_tokens(g, &[(j, fq)], &[p.level_embedding(j)?])?;
        let s = support_sequence(g, j, fs, p)?;
        levels.extend(fuse(g, &q, &s, p)?);
    }
    Ok(FeaturePyramid {
        levels,
        image_h: query.image_h,
        image_w: query.image_w,
    })
}
