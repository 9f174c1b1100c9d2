use rand::Rng as _;

use super::{invalid, ForwardCtx, Mode};
use crate::numerics::{Element, Result, Var};

/// Mean over windows of `pool_length` along the temporal axis of
/// `[batch, channels, length]`. Trailing elements that do not fill a window
/// are dropped.
pub fn local_avg_pool<T: Element>(
    ctx: &mut ForwardCtx<'_, T>,
    x: Var,
    pool_length: usize,
    stride: usize,
) -> Result<Var> {
    ctx.tape.avg_pool1d(x, pool_length, stride)
}

/// Temporal mean: `[batch, channels, length] -> [batch, channels]`.
pub fn global_avg_pool<T: Element>(ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x);
    if shape.len() != 3 {
        return Err(invalid("global_avg_pool", format!("expected rank 3, got {shape:?}")));
    }
    ctx.tape.mean_axis(x, 2)
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Eval mode and
/// `rate == 0` return `x` itself.
pub fn dropout<T: Element>(ctx: &mut ForwardCtx<'_, T>, x: Var, rate: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let n = ctx.tape.value(x).len();
    let mask = (0..n)
        .map(|_| if ctx.rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    ctx.tape.mul_const(x, mask)
}
