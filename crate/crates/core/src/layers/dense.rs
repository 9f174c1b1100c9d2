use super::{check_positive, invalid, uniform, ForwardCtx, ParamId, ParamStore};
use crate::numerics::{Element, Result, Var};
use crate::seed::Rng;

/// Affine map `[batch, in] -> [batch, out]` with weights stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_positive("dense", &[("in_features", in_features), ("out_features", out_features)])?;
        let bound = 1.0 / (in_features as f64).sqrt();
        Ok(DenseLayer {
            in_features,
            out_features,
            weight: store.param(format!("{name}.weight"), uniform(rng, vec![in_features, out_features], bound)),
            bias: store.param(format!("{name}.bias"), uniform(rng, vec![out_features], bound)),
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(invalid(
                "dense",
                format!("expected [batch, {}], got {shape:?}", self.in_features),
            ));
        }
        let w = ctx.bind(self.weight);
        let b = ctx.bind(self.bias);
        let xw = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(xw, b)
    }
}
