use crate::error::{shape_err, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Side of the pooled support kernel used for correlation.
pub const CORRELATION_KERNEL: usize = 5;

fn check_channels<T: Scalar>(g: &Graph<'_, T>, op: &'static str, fq: Var, fs: Var) -> Result<(usize, usize)> {
    let (cq, _, _) = g.value(fq).chw()?;
    let (cs, _, _) = g.value(fs).chw()?;
    if cq != cs {
        return shape_err(op, g.shape(fq), g.shape(fs));
    }
    Ok((cq, cs))
}

/// `FQ ⊙ GAP(FS)`: every query channel scaled by the support's channel mean.
pub fn prototype_reweight<T: Scalar>(g: &mut Graph<'_, T>, fq: Var, fs: Var) -> Result<Var> {
    let (c, _) = check_channels(g, "prototype_reweight", fq, fs)?;
    let pooled = g.adaptive_avg_pool(fs, 1, 1)?;
    let z = g.reshape(pooled, &[c])?;
    g.mul_channel(fq, z)
}

/// Depthwise convolution of `FQ` with the support pooled to a 5×5 kernel per channel.
pub fn kernel_correlate<T: Scalar>(g: &mut Graph<'_, T>, fq: Var, fs: Var) -> Result<Var> {
    check_channels(g, "kernel_correlate", fq, fs)?;
    let k = CORRELATION_KERNEL;
    let kernel = g.adaptive_avg_pool(fs, k, k)?;
    g.depthwise_conv2d(fq, kernel, k / 2)
}
