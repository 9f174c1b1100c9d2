use super::{check_positive, invalid, ForwardCtx, Mode, ParamId, ParamStore};
use crate::numerics::{Element, Result, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `[batch, channels(, length)]`.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates (`running = (1 - momentum) * running + momentum * batch`,
/// unbiased variance). Eval mode uses the running estimates unchanged.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        check_positive("batch_norm", &[("channels", channels)])?;
        Ok(BatchNormLayer {
            channels,
            gamma: store.param(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())),
            beta: store.param(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one())),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(invalid(
                "batch_norm",
                format!("expected {} channels, got {shape:?}", self.channels),
            ));
        }
        let gamma = ctx.bind(self.gamma);
        let beta = ctx.bind(self.beta);
        let eps = T::of(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, eps)?;
                let m = T::of(self.momentum);
                let keep = T::one() - m;
                let correction = if stats.count > 1 {
                    T::of(stats.count as f64 / (stats.count - 1) as f64)
                } else {
                    T::one()
                };
                let rm = ctx.store.get_mut(self.running_mean).data_mut();
                for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * b;
                }
                let rv = ctx.store.get_mut(self.running_var).data_mut();
                for (r, &b) in rv.iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * b * correction;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).data().to_vec();
                let var = ctx.store.get(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}
