use super::{check_positive, invalid, uniform, ForwardCtx, ParamId, ParamStore};
use crate::numerics::{Element, Result, Tape, Tensor, Var};
use crate::seed::Rng;

/// Long short-term memory layer over `[batch, steps, features]`.
///
/// Gate pre-activations are packed `[input | forget | candidate | output]`
/// along the last axis of `x W_x + h W_h + b`. Gates use the logistic
/// sigmoid, candidate and cell squashing use tanh. States start at zero.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input_size: usize,
    pub units: usize,
    pub return_sequences: bool,
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

/// Hidden and cell state, both `[batch, units]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmLayer {
    /// Weights uniform in `±1/sqrt(units)`; biases zero except the forget
    /// gate, which starts at 1.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        input_size: usize,
        units: usize,
        return_sequences: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_positive("lstm", &[("input_size", input_size), ("units", units)])?;
        let bound = 1.0 / (units as f64).sqrt();
        let w_input = store.param(format!("{name}.w_input"), uniform(rng, vec![input_size, 4 * units], bound));
        let w_hidden = store.param(format!("{name}.w_hidden"), uniform(rng, vec![units, 4 * units], bound));
        let mut b = Tensor::zeros(vec![4 * units]);
        b.data_mut()[units..2 * units].fill(T::one());
        let bias = store.param(format!("{name}.bias"), b);
        Ok(LstmLayer {
            input_size,
            units,
            return_sequences,
            w_input,
            w_hidden,
            bias,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input_size {
            return Err(invalid(
                "lstm",
                format!("expected [batch, steps, {}], got {shape:?}", self.input_size),
            ));
        }
        let (batch, steps) = (shape[0], shape[1]);
        if steps == 0 {
            return Err(invalid("lstm", "zero-length sequence"));
        }
        let wx = ctx.bind(self.w_input);
        let wh = ctx.bind(self.w_hidden);
        let b = ctx.bind(self.bias);
        let tape = &mut *ctx.tape;
        let flat = tape.reshape(x, vec![batch * steps, self.input_size])?;
        let proj = tape.matmul(flat, wx)?;
        let proj = tape.add_bias(proj, b)?;
        let proj = tape.reshape(proj, vec![batch, steps, 4 * self.units])?;
        let mut state = None;
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let z = tape.select_step(proj, t)?;
            let next = self.cell(tape, z, state, wh)?;
            outputs.push(next.hidden);
            state = Some(next);
        }
        if self.return_sequences {
            tape.stack_steps(&outputs)
        } else {
            Ok(state.expect("at least one step").hidden)
        }
    }

    /// One recurrence step on `x_t[batch, features]`; `state == None` means
    /// zero hidden and cell state.
    pub fn step<T: Element>(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        x_t: Var,
        state: Option<LstmState>,
    ) -> Result<LstmState> {
        let shape = ctx.tape.shape(x_t);
        if shape.len() != 2 || shape[1] != self.input_size {
            return Err(invalid("lstm", format!("step input {shape:?}")));
        }
        let wx = ctx.bind(self.w_input);
        let wh = ctx.bind(self.w_hidden);
        let b = ctx.bind(self.bias);
        let z = ctx.tape.matmul(x_t, wx)?;
        let z = ctx.tape.add_bias(z, b)?;
        self.cell(ctx.tape, z, state, wh)
    }

    fn cell<T: Element>(
        &self,
        tape: &mut Tape<T>,
        z_input: Var,
        state: Option<LstmState>,
        wh: Var,
    ) -> Result<LstmState> {
        let u = self.units;
        let z = match state {
            Some(s) => {
                let rec = tape.matmul(s.hidden, wh)?;
                tape.add(z_input, rec)?
            }
            None => z_input,
        };
        let i = tape.slice_last(z, 0, u)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_last(z, u, u)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_last(z, 2 * u, u)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_last(z, 3 * u, u)?;
        let o = tape.sigmoid(o)?;
        let ig = tape.mul(i, g)?;
        let cell = match state {
            Some(s) => {
                let kept = tape.mul(f, s.cell)?;
                tape.add(kept, ig)?
            }
            None => ig,
        };
        let squashed = tape.tanh(cell)?;
        let hidden = tape.mul(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }
}
