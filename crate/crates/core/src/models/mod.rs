//! The four classifier families over `[batch, 4, 40]` feature windows,
//! parameter bookkeeping and checkpoint files.

mod checkpoint;
mod networks;
mod spec;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, peek_checkpoint, save_checkpoint, CheckpointInfo};
pub use spec::{Architecture, ModelKind, ModelSpec, FEATURE_CHANNELS, NUM_CLASSES, SEQUENCE_LENGTH};

use std::collections::BTreeMap;

use thiserror::Error;

use crate::layers::{ForwardCtx, Mode, ParamStore};
use crate::numerics::{Element, NumericsError, Precision, Tape, Tensor, Var};
use crate::seed::{self, Rng};
use networks::Network;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("expected a {expected} spec, got {found}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input shape {found:?} is neither [n, {channels}, {length}] nor [n, {length}, {channels}]")]
    InputShape { found: Vec<usize>, channels: usize, length: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint does not match the requested spec: {0}")]
    SpecMismatch(String),
    #[error("checkpoint stores {stored} values but {requested} was requested")]
    Precision { stored: Precision, requested: Precision },
}

/// Output nonlinearity of a model and the loss paired with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Softmax scores, categorical cross-entropy.
    Softmax,
    /// Independent sigmoid per class, binary cross-entropy on one-hot targets.
    Sigmoid,
}

/// Temporal length after each length-changing stage, computed from the spec
/// alone. A zero length means the input is too short for the architecture.
pub fn temporal_lengths(spec: &ModelSpec) -> Vec<(String, usize)> {
    let conv = |len: usize, k: usize, same: bool| if same { len } else { (len + 1).saturating_sub(k) };
    let pool = |len: usize, p: usize, s: usize| if len < p || s == 0 { 0 } else { (len - p) / s + 1 };
    let l = spec.sequence_length;
    let mut out = Vec::new();
    match &spec.architecture {
        Architecture::Fcn { kernels, .. } => {
            for (i, &k) in kernels.iter().enumerate() {
                out.push((format!("block{}.conv", i + 1), conv(l, k, true)));
            }
        }
        Architecture::Resnet { blocks, kernels, .. } => {
            for b in 0..*blocks {
                for (i, &k) in kernels.iter().enumerate() {
                    out.push((format!("res{}.conv{}", b + 1, i + 1), conv(l, k, true)));
                }
            }
        }
        Architecture::Tcnn { kernel, pool: p, pool_stride, .. } => {
            let c1 = conv(l, *kernel, false);
            let c2 = conv(c1, *kernel, false);
            out.push(("conv1".into(), c1));
            out.push(("conv2".into(), c2));
            out.push(("pool".into(), pool(c2, *p, *pool_stride)));
        }
        Architecture::Lstm { conv_kernel, pool: p, pool_stride, .. } => {
            let mut len = l;
            for i in 1..=2 {
                len = pool(len, *p, *pool_stride);
                out.push((format!("pool{i}"), len));
                len = conv(len, *conv_kernel, false);
                out.push((format!("conv{i}"), len));
            }
        }
    }
    out
}

/// An instantiated classifier: architecture, parameters and mode flag.
#[derive(Debug, Clone)]
pub struct Model<T: Element = f64> {
    spec: ModelSpec,
    store: ParamStore<T>,
    net: Network,
    mode: Mode,
    trace: Vec<(String, Vec<usize>)>,
}

fn expect_kind(spec: &ModelSpec, kind: ModelKind) -> Result<(), ModelError> {
    if spec.kind() != kind {
        return Err(ModelError::KindMismatch {
            expected: kind,
            found: spec.kind(),
        });
    }
    Ok(())
}

pub fn build_fcn<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    expect_kind(spec, ModelKind::Fcn)?;
    Model::build(spec, seed)
}

pub fn build_resnet<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    expect_kind(spec, ModelKind::Resnet)?;
    Model::build(spec, seed)
}

pub fn build_tcnn<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    expect_kind(spec, ModelKind::Tcnn)?;
    Model::build(spec, seed)
}

pub fn build_lstm<T: Element>(spec: &ModelSpec, seed: u64) -> Result<Model<T>, ModelError> {
    expect_kind(spec, ModelKind::Lstm)?;
    Model::build(spec, seed)
}

impl<T: Element> Model<T> {
    /// Builds any architecture; weights are drawn from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seed::rng(seed);
        let net = Network::build(spec, &mut store, &mut rng)?;
        Ok(Model {
            spec: spec.clone(),
            store,
            net,
            mode: Mode::Train,
            trace: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind()
    }

    pub fn head(&self) -> Head {
        match self.kind() {
            ModelKind::Lstm => Head::Sigmoid,
            _ => Head::Softmax,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Shapes after each traced stage of the most recent forward pass.
    pub fn last_trace(&self) -> &[(String, Vec<usize>)] {
        &self.trace
    }

    /// Channel-major view of `x`: accepts `[n, channels, length]` or
    /// `[n, length, channels]`.
    fn channel_major(&self, tape: &mut Tape<T>, x: Var) -> Result<Var, ModelError> {
        let s = tape.shape(x).to_vec();
        let (c, l) = (self.spec.input_channels, self.spec.sequence_length);
        if s.len() == 3 && s[1] == c && s[2] == l {
            Ok(x)
        } else if s.len() == 3 && s[1] == l && s[2] == c {
            Ok(tape.permute_021(x)?)
        } else {
            Err(ModelError::InputShape { found: s, channels: c, length: l })
        }
    }

    /// Pre-head class logits `[n, 2]`, recorded on `tape`.
    pub fn logits(&mut self, tape: &mut Tape<T>, x: Var, rng: &mut Rng) -> Result<Var, ModelError> {
        let x = self.channel_major(tape, x)?;
        self.trace.clear();
        let mut ctx = ForwardCtx {
            tape,
            store: &mut self.store,
            mode: self.mode,
            rng,
        };
        Ok(self.net.logits(&mut ctx, x, &mut self.trace)?)
    }

    /// Applies the output head to logits.
    pub fn scores(&self, tape: &mut Tape<T>, logits: Var) -> Result<Var, ModelError> {
        Ok(match self.head() {
            Head::Softmax => tape.softmax(logits)?,
            Head::Sigmoid => tape.sigmoid(logits)?,
        })
    }

    /// Mean training loss of `logits` against class labels (0 normal, 1 broken).
    pub fn loss(&self, tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var, ModelError> {
        Ok(match self.head() {
            Head::Softmax => tape.softmax_cross_entropy(logits, labels)?,
            Head::Sigmoid => {
                let k = self.spec.num_classes;
                let mut targets = vec![T::zero(); labels.len() * k];
                for (i, &y) in labels.iter().enumerate() {
                    if y >= k {
                        return Err(NumericsError::InvalidArgument {
                            op: "sigmoid_bce",
                            detail: format!("label {y} out of {k}"),
                        }
                        .into());
                    }
                    targets[i * k + y] = T::one();
                }
                tape.sigmoid_bce(logits, &targets)?
            }
        })
    }

    /// Class scores `[n, 2]` for a batch, respecting the current mode.
    /// Dropout (train mode only) draws from `rng`.
    pub fn forward_with(&mut self, batch: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let logits = self.logits(&mut tape, x, rng)?;
        let scores = self.scores(&mut tape, logits)?;
        Ok(tape.to_tensor(scores))
    }

    /// [`Model::forward_with`] with a fixed dropout stream.
    pub fn forward(&mut self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut rng = seed::rng(0);
        self.forward_with(batch, &mut rng)
    }

    /// Named copies of every tensor, for snapshots.
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.store.tensors().iter().map(|t| {
            let mut c = t.clone();
            c.clear_grad();
            c
        }).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.store.len(), "snapshot from another model");
        for (dst, src) in self.store.tensors_mut().iter_mut().zip(snapshot) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }

    pub fn named_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }
}
