use crate::layers::{
    dropout, global_avg_pool, local_avg_pool, BatchNormLayer, Conv1dLayer, DenseLayer, ForwardCtx, LstmLayer, Padding,
    ParamStore,
};
use crate::numerics::{Element, Result, Var};
use crate::seed::Rng;

use super::{Architecture, ModelError, ModelSpec};

type Trace = Vec<(String, Vec<usize>)>;

#[derive(Debug, Clone)]
pub(super) struct ConvBn {
    conv: Conv1dLayer,
    bn: BatchNormLayer,
}

impl ConvBn {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv1dLayer::new(store, &format!("{name}.conv"), cin, cout, kernel, 1, Padding::SameZero, rng)?,
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

#[derive(Debug, Clone)]
pub(super) struct ResBlock {
    stages: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
pub(super) enum Network {
    Fcn {
        blocks: Vec<ConvBn>,
        dense: DenseLayer,
    },
    Resnet {
        blocks: Vec<ResBlock>,
        dense: DenseLayer,
    },
    Tcnn {
        convs: Vec<Conv1dLayer>,
        pool: usize,
        pool_stride: usize,
        dense: DenseLayer,
    },
    Lstm {
        convs: Vec<Conv1dLayer>,
        pool: usize,
        pool_stride: usize,
        dropout: f64,
        recurrent: Vec<LstmLayer>,
        dense: DenseLayer,
    },
}

fn record<T: Element>(trace: &mut Trace, ctx: &ForwardCtx<'_, T>, name: &str, v: Var) {
    trace.push((name.to_string(), ctx.tape.shape(v).to_vec()));
}

impl Network {
    pub(super) fn build<T: Element>(
        spec: &ModelSpec,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self, ModelError> {
        let cin = spec.input_channels;
        let classes = spec.num_classes;
        let net = match &spec.architecture {
            Architecture::Fcn { filters, kernels } => {
                let mut blocks = Vec::new();
                let mut ch = cin;
                for (i, (&f, &k)) in filters.iter().zip(kernels).enumerate() {
                    blocks.push(ConvBn::new(store, &format!("block{}", i + 1), ch, f, k, rng)?);
                    ch = f;
                }
                Network::Fcn {
                    blocks,
                    dense: DenseLayer::new(store, "dense", ch, classes, rng)?,
                }
            }
            Architecture::Resnet { blocks: n, filters, kernels } => {
                let mut blocks = Vec::new();
                let mut ch = cin;
                for b in 1..=*n {
                    let mut stages = Vec::new();
                    let mut sc = ch;
                    for (i, &k) in kernels.iter().enumerate() {
                        stages.push(ConvBn::new(store, &format!("res{b}.stage{}", i + 1), sc, *filters, k, rng)?);
                        sc = *filters;
                    }
                    let shortcut = if ch != *filters {
                        Some(ConvBn::new(store, &format!("res{b}.shortcut"), ch, *filters, 1, rng)?)
                    } else {
                        None
                    };
                    blocks.push(ResBlock { stages, shortcut });
                    ch = *filters;
                }
                Network::Resnet {
                    blocks,
                    dense: DenseLayer::new(store, "dense", ch, classes, rng)?,
                }
            }
            Architecture::Tcnn { filters, kernel, pool, pool_stride } => {
                let c1 = Conv1dLayer::new(store, "conv1", cin, filters[0], *kernel, 1, Padding::None, rng)?;
                let c2 = Conv1dLayer::new(store, "conv2", filters[0], filters[1], *kernel, 1, Padding::None, rng)?;
                let pooled = super::temporal_lengths(spec).last().map(|(_, l)| *l).unwrap_or(0);
                Network::Tcnn {
                    convs: vec![c1, c2],
                    pool: *pool,
                    pool_stride: *pool_stride,
                    dense: DenseLayer::new(store, "dense", filters[1] * pooled, classes, rng)?,
                }
            }
            Architecture::Lstm { conv_filters, conv_kernel, pool, pool_stride, dropout, units, lstm_layers } => {
                let c1 = Conv1dLayer::new(store, "conv1", cin, *conv_filters, *conv_kernel, 1, Padding::None, rng)?;
                let c2 =
                    Conv1dLayer::new(store, "conv2", *conv_filters, *conv_filters, *conv_kernel, 1, Padding::None, rng)?;
                let mut recurrent = Vec::new();
                let mut input = *conv_filters;
                for i in 1..=*lstm_layers {
                    let return_sequences = i < *lstm_layers;
                    recurrent.push(LstmLayer::new(store, &format!("lstm{i}"), input, *units, return_sequences, rng)?);
                    input = *units;
                }
                Network::Lstm {
                    convs: vec![c1, c2],
                    pool: *pool,
                    pool_stride: *pool_stride,
                    dropout: *dropout,
                    recurrent,
                    dense: DenseLayer::new(store, "dense", *units, classes, rng)?,
                }
            }
        };
        Ok(net)
    }

    pub(super) fn logits<T: Element>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, trace: &mut Trace) -> Result<Var> {
        match self {
            Network::Fcn { blocks, dense } => {
                let mut h = x;
                for (i, block) in blocks.iter().enumerate() {
                    h = block.forward(ctx, h)?;
                    h = ctx.tape.relu(h)?;
                    record(trace, ctx, &format!("block{}", i + 1), h);
                }
                let pooled = global_avg_pool(ctx, h)?;
                record(trace, ctx, "gap", pooled);
                dense.forward(ctx, pooled)
            }
            Network::Resnet { blocks, dense } => {
                let mut h = x;
                for (b, block) in blocks.iter().enumerate() {
                    let input = h;
                    let last = block.stages.len() - 1;
                    for (i, stage) in block.stages.iter().enumerate() {
                        h = stage.forward(ctx, h)?;
                        if i < last {
                            h = ctx.tape.relu(h)?;
                        }
                    }
                    let skip = match &block.shortcut {
                        Some(proj) => proj.forward(ctx, input)?,
                        None => input,
                    };
                    h = ctx.tape.add(h, skip)?;
                    h = ctx.tape.relu(h)?;
                    record(trace, ctx, &format!("res{}", b + 1), h);
                }
                let pooled = global_avg_pool(ctx, h)?;
                record(trace, ctx, "gap", pooled);
                dense.forward(ctx, pooled)
            }
            Network::Tcnn { convs, pool, pool_stride, dense } => {
                let mut h = x;
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(ctx, h)?;
                    h = ctx.tape.sigmoid(h)?;
                    record(trace, ctx, &format!("conv{}", i + 1), h);
                }
                h = local_avg_pool(ctx, h, *pool, *pool_stride)?;
                record(trace, ctx, "pool", h);
                let s = ctx.tape.shape(h).to_vec();
                let flat = ctx.tape.reshape(h, vec![s[0], s[1] * s[2]])?;
                record(trace, ctx, "flatten", flat);
                dense.forward(ctx, flat)
            }
            Network::Lstm { convs, pool, pool_stride, dropout: rate, recurrent, dense } => {
                let mut h = x;
                for (i, conv) in convs.iter().enumerate() {
                    h = local_avg_pool(ctx, h, *pool, *pool_stride)?;
                    record(trace, ctx, &format!("pool{}", i + 1), h);
                    h = dropout(ctx, h, *rate)?;
                    h = conv.forward(ctx, h)?;
                    h = ctx.tape.relu(h)?;
                    record(trace, ctx, &format!("conv{}", i + 1), h);
                }
                let mut seq = ctx.tape.permute_021(h)?;
                for (i, layer) in recurrent.iter().enumerate() {
                    seq = layer.forward(ctx, seq)?;
                    record(trace, ctx, &format!("lstm{}", i + 1), seq);
                }
                dense.forward(ctx, seq)
            }
        }
    }
}
