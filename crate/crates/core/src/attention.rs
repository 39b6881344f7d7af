//! Position-encoded multi-head attention and the dense-attention family built
//! on it: `DA(Q, K) = LN(Q + PMA(Q, K, K))`, `SA(F) = DA(F, F)` and
//! `CAF(Q, K) = LN(X + FFN(X))` with `X = DA(Q, K)`.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{AttentionRecord, Graph, ParamBuilder, ParamId, Scalar, Tensor, Var};

/// Where a run of tokens came from: `h × w` cells of pyramid level `level`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub level: u32,
    pub h: usize,
    pub w: usize,
}

/// Flattened feature points `[n, d]` with aligned positional encodings.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub pos: Var,
    pub origin: Vec<Segment>,
}

impl TokenSequence {
    pub fn new<T: Scalar>(g: &Graph<'_, T>, tokens: Var, pos: Var, origin: Vec<Segment>) -> Result<Self> {
        if g.shape(tokens) != g.shape(pos) {
            return shape_err("token sequence", g.shape(tokens), g.shape(pos));
        }
        let n: usize = origin.iter().map(|s| s.h * s.w).sum();
        if n != g.shape(tokens)[0] {
            return invalid(format!(
                "origin segments cover {n} tokens but the sequence has {}",
                g.shape(tokens)[0]
            ));
        }
        Ok(Self { tokens, pos, origin })
    }

    pub fn len<T: Scalar>(&self, g: &Graph<'_, T>) -> usize {
        g.shape(self.tokens)[0]
    }

    pub fn dim<T: Scalar>(&self, g: &Graph<'_, T>) -> usize {
        g.shape(self.tokens)[1]
    }
}

/// 2-D sinusoidal encoding `[h·w, d]`: the first `d/2` channels encode the
/// row, the rest the column, each as interleaved `sin, cos` pairs over
/// geometric frequencies with base 10000.
pub fn sincos_positional_encoding_2d<T: Scalar>(h: usize, w: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 4 != 0 {
        return invalid(format!("positional encoding width {d} must be a positive multiple of 4"));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * d);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f64, x as f64] {
                for &f in &freqs {
                    data.push(T::of((pos * f).sin()));
                    data.push(T::of((pos * f).cos()));
                }
            }
        }
    }
    Tensor::new([h * w, d], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            ffn_hidden: 64,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return invalid(format!("width {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return invalid(format!("width {} must be a multiple of 4", self.dim));
        }
        Ok(())
    }
}

/// Affine map `x · W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            w: sub.linear_weight("w", d_in, d_out)?,
            b: Some(sub.constant("b", &[d_out], 0.0)?),
        })
    }

    /// Glorot bound multiplied by `gain`.
    pub fn scaled<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize, gain: f64) -> Result<Self> {
        let mut sub = pb.sub(name);
        let bound = gain * (6.0 / (d_in + d_out) as f64).sqrt();
        Ok(Self {
            w: sub.uniform("w", &[d_in, d_out], bound)?,
            b: Some(sub.constant("b", &[d_out], 0.0)?),
        })
    }

    pub fn unbiased<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: pb.sub(name).linear_weight("w", d_in, d_out)?,
            b: None,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.affine(x, w, b)
            }
            None => g.matmul(x, w),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            gain: sub.constant("gain", &[d], 1.0)?,
            bias: sub.constant("bias", &[d], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias)
    }
}

/// Initial scale of projections that feed a residual sum, so that a stack of
/// blocks starts close to the identity.
pub const RESIDUAL_INIT_GAIN: f64 = 0.1;

/// Query/key/value/output projections of a multi-head attention layer.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
    pub label: String,
}

impl MhaParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let mut sub = pb.sub(name);
        let d = cfg.dim;
        Ok(Self {
            q: Linear::new(&mut sub, "q", d, d)?,
            // a key bias shifts every logit of a row equally and cancels in the softmax
            k: Linear::unbiased(&mut sub, "k", d, d)?,
            v: Linear::new(&mut sub, "v", d, d)?,
            out: Linear::scaled(&mut sub, "out", d, d, RESIDUAL_INIT_GAIN)?,
            heads: cfg.heads,
            dim: d,
            label: sub.prefix().to_string(),
        })
    }

    /// Parameters of the value path (value and output projections).
    pub fn value_path(&self) -> Vec<ParamId> {
        [self.v, self.out].iter().flat_map(|l| [Some(l.w), l.b]).flatten().collect()
    }
}

/// Scaled dot-product attention over `H` heads of width `d/H`; heads are
/// concatenated and output-projected.
pub fn multi_head_attention<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, p: &MhaParams) -> Result<Var> {
    if g.shape(k)[0] != g.shape(v)[0] {
        return shape_err("multi_head_attention keys/values", g.shape(k), g.shape(v));
    }
    for x in [q, k, v] {
        if g.shape(x).len() != 2 || g.shape(x)[1] != p.dim {
            return shape_err("multi_head_attention width", g.shape(x), &[p.dim]);
        }
    }
    let qp = p.q.forward(g, q)?;
    let kp = p.k.forward(g, k)?;
    let vp = p.v.forward(g, v)?;
    let dh = p.dim / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::new();
    for h in 0..p.heads {
        let qh = g.slice_cols(qp, h * dh, dh)?;
        let kh = g.slice_cols(kp, h * dh, dh)?;
        let vh = g.slice_cols(vp, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let attn = g.softmax(logits)?;
        if g.tracing_attention() {
            weights.push(g.value(attn).clone());
        }
        heads.push(g.matmul(attn, vh)?);
    }
    if g.tracing_attention() {
        g.record_attention(AttentionRecord {
            label: p.label.clone(),
            heads: weights,
        });
    }
    let cat = g.concat_cols(&heads)?;
    p.out.forward(g, cat)
}

/// `MHA(Q + P(Q), K + P(K), V)`: encodings enter queries and keys, never values.
#[allow(clippy::too_many_arguments)]
pub fn pma<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    pos_q: Var,
    pos_k: Var,
    p: &MhaParams,
) -> Result<Var> {
    let qe = g.add(q, pos_q)?;
    let ke = g.add(k, pos_k)?;
    multi_head_attention(g, qe, ke, v, p)
}

/// Attention plus residual add-and-norm.
#[derive(Clone, Debug)]
pub struct DaParams {
    pub mha: MhaParams,
    pub norm: LayerNormParams,
}

impl DaParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            mha: MhaParams::new(&mut sub, "mha", cfg)?,
            norm: LayerNormParams::new(&mut sub, "norm", cfg.dim)?,
        })
    }
}

/// `LN(F^Q + PMA(F^Q, F^K, F^K))`; keeps the query's encoding and origin.
pub fn dense_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    fq: &TokenSequence,
    fk: &TokenSequence,
    p: &DaParams,
) -> Result<TokenSequence> {
    if fq.dim(g) != fk.dim(g) {
        return shape_err("dense_attention", g.shape(fq.tokens), g.shape(fk.tokens));
    }
    let att = pma(g, fq.tokens, fk.tokens, fk.tokens, fq.pos, fk.pos, &p.mha)?;
    let res = g.add(fq.tokens, att)?;
    let tokens = p.norm.forward(g, res)?;
    Ok(TokenSequence {
        tokens,
        pos: fq.pos,
        origin: fq.origin.clone(),
    })
}

pub fn self_attention<T: Scalar>(g: &mut Graph<'_, T>, f: &TokenSequence, p: &DaParams) -> Result<TokenSequence> {
    dense_attention(g, f, f, p)
}

/// Cross-attention followed by a token-wise feed-forward block.
#[derive(Clone, Debug)]
pub struct CafParams {
    pub da: DaParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm: LayerNormParams,
}

impl CafParams {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, cfg: &AttentionConfig) -> Result<Self> {
        let mut sub = pb.sub(name);
        Ok(Self {
            da: DaParams::new(&mut sub, "ca", cfg)?,
            ffn_in: Linear::new(&mut sub, "ffn_in", cfg.dim, cfg.ffn_hidden)?,
            ffn_out: Linear::scaled(&mut sub, "ffn_out", cfg.ffn_hidden, cfg.dim, RESIDUAL_INIT_GAIN)?,
            norm: LayerNormParams::new(&mut sub, "norm", cfg.dim)?,
        })
    }

    pub fn ffn_params(&self) -> Vec<ParamId> {
        [self.ffn_in, self.ffn_out].iter().flat_map(|l| [Some(l.w), l.b]).flatten().collect()
    }
}

/// `LN(X + FFN(X))` with `X = DA(F^Q, F^K)`.
pub fn caf<T: Scalar>(
    g: &mut Graph<'_, T>,
    fq: &TokenSequence,
    fk: &TokenSequence,
    p: &CafParams,
) -> Result<TokenSequence> {
    let x = dense_attention(g, fq, fk, &p.da)?;
    let h = p.ffn_in.forward(g, x.tokens)?;
    let h = g.relu(h);
    let h = p.ffn_out.forward(g, h)?;
    let res = g.add(x.tokens, h)?;
    let tokens = p.norm.forward(g, res)?;
    Ok(TokenSequence { tokens, ..x })
}

/// `[C, H, W]` map to `[H·W, C]` tokens.
pub fn map_to_tokens<T: Scalar>(g: &mut Graph<'_, T>, map: Var) -> Result<Var> {
    let (c, h, w) = g.value(map).chw()?;
    let flat = g.reshape(map, &[c, h * w])?;
    g.transpose(flat)
}

/// `[H·W, C]` tokens back to a `[C, H, W]` map.
pub fn tokens_to_map<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(tokens)?;
    let c = g.shape(t)[0];
    g.reshape(t, &[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_encoding_is_sin_zero_cos_one() {
        let pe = sincos_positional_encoding_2d::<f64>(3, 3, 16).unwrap();
        let row0 = &pe.data()[..16];
        for (i, &v) in row0.iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn encoding_values_in_unit_range_and_distinct() {
        let pe = sincos_positional_encoding_2d::<f64>(8, 8, 32).unwrap();
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let rows: Vec<&[f64]> = pe.data().chunks(32).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let diff = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff > 1e-6, "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn encoding_rejects_widths_not_divisible_by_four() {
        assert!(sincos_positional_encoding_2d::<f32>(2, 2, 6).is_err());
    }
}
