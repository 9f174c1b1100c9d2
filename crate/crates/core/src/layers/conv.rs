use super::{check_positive, invalid, uniform, ForwardCtx, ParamId, ParamStore};
use crate::numerics::{Element, Padding, Result, Var};
use crate::seed::Rng;

/// 1-D cross-correlation over `[batch, channels, length]` inputs.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_length: usize,
    pub stride: usize,
    pub padding: Padding,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1dLayer {
    /// Registers `{name}.weight` `[out, in, kernel]` and `{name}.bias` `[out]`,
    /// both uniform in `±1/sqrt(in * kernel)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_length: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_positive(
            "conv1d",
            &[
                ("in_channels", in_channels),
                ("out_channels", out_channels),
                ("kernel_length", kernel_length),
                ("stride", stride),
            ],
        )?;
        let bound = 1.0 / ((in_channels * kernel_length) as f64).sqrt();
        let weight = store.param(
            format!("{name}.weight"),
            uniform(rng, vec![out_channels, in_channels, kernel_length], bound),
        );
        let bias = store.param(format!("{name}.bias"), uniform(rng, vec![out_channels], bound));
        Ok(Conv1dLayer {
            in_channels,
            out_channels,
            kernel_length,
            stride,
            padding,
            weight,
            bias,
        })
    }

    pub fn output_length(&self, len: usize) -> Option<usize> {
        self.padding
            .geometry(len, self.kernel_length, self.stride)
            .map(|(out, _)| out)
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 3 || shape[1] != self.in_channels {
            return Err(invalid(
                "conv1d",
                format!("expected [batch, {}, length], got {shape:?}", self.in_channels),
            ));
        }
        let w = ctx.bind(self.weight);
        let b = ctx.bind(self.bias);
        ctx.tape.conv1d(x, w, Some(b), self.padding, self.stride)
    }
}
