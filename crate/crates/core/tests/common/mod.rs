#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use coiltsc::dataio::{CoilSequence, FeatureRecord, Label};
use coiltsc::layers::{
    dropout, global_avg_pool, local_avg_pool, BatchNormLayer, Conv1dLayer, DenseLayer, ForwardCtx, LstmLayer, Mode,
    Padding, ParamStore,
};
use coiltsc::models::{Model, ModelKind, ModelSpec};
use coiltsc::numerics::{Tape, Tensor, Var};
use coiltsc::seed;
use rand::seq::index::sample;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const LAYER_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
pub const GRAD_SEEDS: u64 = 20;
/// Gradients this small count as zero when forming the relative error.
const NORM_FLOOR: f64 = 1e-6;
/// One-sided slopes differing by more than this fraction mark a kink.
pub const KINK_RATIO: f64 = 1e-3;
/// Largest share of sampled coordinates a model check may skip as kinks.
pub const MAX_KINK_SHARE: f64 = 0.05;

pub fn random_tensor(shape: Vec<usize>, rng: &mut seed::Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// `sum(out * r)` for a fixed random `r`, so every output element matters.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let r = random_tensor(shape.clone(), &mut seed::derived_rng(seed, "projection", 0));
    let c = tape.constant(shape, r.data().to_vec()).unwrap();
    let p = tape.mul(out, c).unwrap();
    tape.sum(p).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn relative(a: &[f64], n: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / (norm(a) + norm(n)).max(NORM_FLOOR)
}

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradStats {
    /// Largest norm-based relative error over the checked groups.
    pub max_error: f64,
    pub checked: usize,
    /// Coordinates dropped because a ReLU kink lies within one step.
    pub kinks: usize,
}

/// Compares backprop against central differences over up to `per_tensor`
/// sampled coordinates of the input and of every trainable tensor; the
/// error of each group is `|a - n| / (|a| + |n|)` in the 2-norm. `loss` must
/// be deterministic: any randomness it uses has to be reseeded per call.
///
/// With `kink_guard`, a coordinate whose forward and backward one-sided
/// slopes disagree by more than `KINK_RATIO` of their size is treated as
/// straddling a non-differentiable point and skipped.
pub fn grad_error<S: Clone>(
    state: &S,
    tensors: fn(&mut S) -> &mut [Tensor<f64>],
    x: &Tensor<f64>,
    per_tensor: usize,
    sample_seed: u64,
    kink_guard: bool,
    loss: impl Fn(&mut S, &mut Tape<f64>, Var) -> Var,
) -> GradStats {
    let mut s = state.clone();
    tensors(&mut s).iter_mut().for_each(Tensor::zero_grad);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad());
    let l = loss(&mut s, &mut tape, xv);
    let f0 = tape.value(l)[0];
    let grads = tape.backward(l).unwrap();
    grads.accumulate_into(tensors(&mut s)).unwrap();
    let gx = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let value = |st: &S, input: &Tensor<f64>| {
        let mut st = st.clone();
        let mut tape = Tape::new();
        let v = tape.leaf(input);
        let l = loss(&mut st, &mut tape, v);
        tape.value(l)[0]
    };
    let mut stats = GradStats::default();
    let group = |analytic: &[f64], ups: &[f64], downs: &[f64], stats: &mut GradStats| {
        let mut a = Vec::new();
        let mut n = Vec::new();
        for i in 0..analytic.len() {
            let fwd = (ups[i] - f0) / H;
            let bwd = (f0 - downs[i]) / H;
            if kink_guard && (fwd - bwd).abs() > KINK_RATIO * (fwd.abs() + bwd.abs()) + NORM_FLOOR {
                stats.kinks += 1;
                continue;
            }
            a.push(analytic[i]);
            n.push((ups[i] - downs[i]) / (2.0 * H));
        }
        stats.checked += a.len();
        stats.max_error = stats.max_error.max(relative(&a, &n));
    };
    let mut rng = seed::derived_rng(sample_seed, "coordinates", 0);

    let idx = sample(&mut rng, x.len(), per_tensor.min(x.len())).into_vec();
    let mut probe = x.clone();
    let (mut ups, mut downs) = (Vec::new(), Vec::new());
    for &i in &idx {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        ups.push(value(state, &probe));
        probe.data_mut()[i] = orig - H;
        downs.push(value(state, &probe));
        probe.data_mut()[i] = orig;
    }
    let analytic: Vec<f64> = idx.iter().map(|&i| gx[i]).collect();
    group(&analytic, &ups, &downs, &mut stats);

    let mut base = state.clone();
    let count = tensors(&mut base).len();
    for t in 0..count {
        if !tensors(&mut base)[t].requires_grad() {
            continue;
        }
        let len = tensors(&mut base)[t].len();
        let idx = sample(&mut rng, len, per_tensor.min(len)).into_vec();
        let g = tensors(&mut s)[t].grad().expect("trainable tensor has a gradient").to_vec();
        let (mut ups, mut downs) = (Vec::new(), Vec::new());
        for &i in &idx {
            let orig = tensors(&mut base)[t].data()[i];
            tensors(&mut base)[t].data_mut()[i] = orig + H;
            ups.push(value(&base, x));
            tensors(&mut base)[t].data_mut()[i] = orig - H;
            downs.push(value(&base, x));
            tensors(&mut base)[t].data_mut()[i] = orig;
        }
        let analytic: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        group(&analytic, &ups, &downs, &mut stats);
    }
    stats
}

fn store_tensors(s: &mut ParamStore<f64>) -> &mut [Tensor<f64>] {
    s.tensors_mut()
}

fn model_tensors(m: &mut Model<f64>) -> &mut [Tensor<f64>] {
    m.store_mut().tensors_mut()
}

/// Runs `forward` inside a layer context with a dropout stream reset per call.
fn with_ctx(
    store: &mut ParamStore<f64>,
    tape: &mut Tape<f64>,
    mode: Mode,
    seed: u64,
    forward: impl FnOnce(&mut ForwardCtx<'_, f64>) -> Var,
) -> Var {
    let mut rng = seed::derived_rng(seed, "dropout", 0);
    let mut ctx = ForwardCtx {
        tape,
        store,
        mode,
        rng: &mut rng,
    };
    forward(&mut ctx)
}

/// Input with every entry at least 0.05 away from zero, so ReLU kinks are
/// never straddled by a finite-difference step.
fn off_zero(shape: Vec<usize>, rng: &mut seed::Rng) -> Tensor<f64> {
    let mut t = random_tensor(shape, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

pub type LayerCase = (&'static str, fn(u64) -> f64);


/// One entry per layer, activation and loss; each maps a seed to the
/// largest relative gradient error observed.
pub fn layer_cases() -> Vec<LayerCase> {
    vec![
        ("conv1d valid", |s| conv_case(s, 3, 1, Padding::None)),
        ("conv1d same, even kernel", |s| conv_case(s, 4, 1, Padding::SameZero)),
        ("conv1d strided", |s| conv_case(s, 3, 2, Padding::None)),
        ("dense", dense_case),
        ("batch norm train, rank 3", |s| bn_case(s, Mode::Train, vec![4, 3, 6])),
        ("batch norm train, rank 2", |s| bn_case(s, Mode::Train, vec![5, 3])),
        ("batch norm eval", |s| bn_case(s, Mode::Eval, vec![4, 3, 6])),
        ("local average pool", |s| pool_case(s, 2, 2)),
        ("local average pool, overlapping", |s| pool_case(s, 3, 1)),
        ("global average pool", gap_case),
        ("dropout", dropout_case),
        ("lstm sequences", |s| lstm_case(s, true)),
        ("lstm last step", |s| lstm_case(s, false)),
        ("relu", |s| activation_case(s, 0)),
        ("sigmoid", |s| activation_case(s, 1)),
        ("tanh", |s| activation_case(s, 2)),
        ("softmax", |s| activation_case(s, 3)),
        ("softmax cross-entropy", |s| loss_case(s, false)),
        ("sigmoid binary cross-entropy", |s| loss_case(s, true)),
    ]
}

fn conv_case(seed: u64, kernel: usize, stride: usize, padding: Padding) -> f64 {
    let mut rng = seed::rng(seed);
    let mut store = ParamStore::new();
    let layer = Conv1dLayer::new(&mut store, "conv", 3, 4, kernel, stride, padding, &mut rng).unwrap();
    let x = random_tensor(vec![2, 3, 10], &mut rng);
    grad_error(&store, store_tensors, &x, 12, seed, false, |st, tape, v| {
        let out = with_ctx(st, tape, Mode::Train, seed, |ctx| layer.forward(ctx, v).unwrap());
        project(tape, out, seed)
    })
    .max_error
}

fn dense_case(seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let mut store = ParamStore::new();
    let layer = DenseLayer::new(&mut store, "dense", 5, 4, &mut rng).unwrap();
    let x = random_tensor(vec![3, 5], &mut rng);
    grad_error(&store, store_tensors, &x, 12, seed, false, |st, tape, v| {
        let out = with_ctx(st, tape, Mode::Train, seed, |ctx| layer.forward(ctx, v).unwrap());
        project(tape, out, seed)
    })
    .max_error
}

fn bn_case(seed: u64, mode: Mode, shape: Vec<usize>) -> f64 {
    let mut rng = seed::rng(seed);
    let mut store = ParamStore::new();
    let layer = BatchNormLayer::new(&mut store, "bn", 3).unwrap();
    for id in [layer.gamma, layer.beta, layer.running_mean] {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    for v in store.get_mut(layer.running_var).data_mut() {
        *v = rng.gen_range(0.5..2.0);
    }
    let x = random_tensor(shape, &mut rng);
    grad_error(&store, store_tensors, &x, 12, seed, false, |st, tape, v| {
        let out = with_ctx(st, tape, mode, seed, |ctx| layer.forward(ctx, v).unwrap());
        project(tape, out, seed)
    })
    .max_error
}

fn pool_case(seed: u64, pool: usize, stride: usize) -> f64 {
    let mut rng = seed::rng(seed);
    let store = ParamStore::new();
    let x = random_tensor(vec![2, 3, 9], &mut rng);
    grad_error(&store, store_tensors, &x, 12, seed, false, |st, tape, v| {
        let out = with_ctx(st, tape, Mode::Train, seed, |ctx| local_avg_pool(ctx, v, pool, stride).unwrap());
        project(tape, out, seed)
    })
    .max_error
}

fn gap_case(seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let store = ParamStore::new();
    let x = random_tensor(vec![2, 3, 7], &mut rng);
    grad_error(&store, store_tensors, &x, 12, seed, false, |st, tape, v| {
        let out = with_ctx(st, tape, Mode::Train, seed, |ctx| global_avg_pool(ctx, v).unwrap());
        project(tape, out, seed)
    })
    .max_error
}

fn dropout_case(seed: u64) -> f64 {
    let mut rng = seed::rng(seed);
    let store = ParamStore::new();
    let x = random_tensor(vec![2, 3, 7], &mut rng);
    grad_error(&store, store_tensors, &x, 12, seed, false, |st, tape, v| {
        let out = with_ctx(st, tape, Mode::Train, seed, |ctx| dropout(ctx, v, 0.3).unwrap());
        project(tape, out, seed)
    })
    .max_error
}

fn lstm_case(seed: u64, return_sequences: bool) -> f64 {
    let mut rng = seed::rng(seed);
    let mut store = ParamStore::new();
    let layer = LstmLayer::new(&mut store, "lstm", 3, 4, return_sequences, &mut rng).unwrap();
    let x = random_tensor(vec![2, 5, 3], &mut rng);
    grad_error(&store, store_tensors, &x, 12, seed, false, |st, tape, v| {
        let out = with_ctx(st, tape, Mode::Train, seed, |ctx| layer.forward(ctx, v).unwrap());
        project(tape, out, seed)
    })
    .max_error
}

fn activation_case(seed: u64, which: usize) -> f64 {
    let mut rng = seed::rng(seed);
    let store = ParamStore::new();
    let x = if which == 0 { off_zero(vec![3, 5], &mut rng) } else { random_tensor(vec![3, 5], &mut rng) };
    grad_error(&store, store_tensors, &x, 15, seed, false, |_, tape, v| {
        let out = match which {
            0 => tape.relu(v),
            1 => tape.sigmoid(v),
            2 => tape.tanh(v),
            _ => tape.softmax(v),
        }
        .unwrap();
        project(tape, out, seed)
    })
    .max_error
}

fn loss_case(seed: u64, sigmoid: bool) -> f64 {
    let mut rng = seed::rng(seed);
    let store = ParamStore::new();
    let x = random_tensor(vec![4, 3], &mut rng).data().iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let x = Tensor::new(vec![4, 3], x).unwrap();
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
    let targets: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
    grad_error(&store, store_tensors, &x, 12, seed, false, |_, tape, v| {
        if sigmoid {
            tape.sigmoid_bce(v, &targets).unwrap()
        } else {
            tape.softmax_cross_entropy(v, &labels).unwrap()
        }
    })
    .max_error
}

/// Full network in train mode (dropout reseeded per evaluation) under its
/// own training loss.
pub fn model_error(kind: ModelKind, seed: u64) -> GradStats {
    let mut model = Model::<f64>::build(&ModelSpec::new(kind), seed).unwrap();
    model.set_mode(Mode::Train);
    let mut rng = seed::derived_rng(seed, "input", 0);
    let x = random_tensor(vec![3, 4, 40], &mut rng);
    let labels: Vec<usize> = (0..3).map(|i| (i + seed as usize) % 2).collect();
    grad_error(&model, model_tensors, &x, 3, seed, true, |m, tape, v| {
        let mut drop = seed::derived_rng(seed, "dropout", 0);
        let logits = m.logits(tape, v, &mut drop).unwrap();
        m.loss(tape, logits, &labels).unwrap()
    })
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coiltsc"))
        .args(args)
        .env_remove("COILTSC_DATA")
        .output()
        .expect("binary runs")
}

pub fn cli_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coiltsc"))
        .args(args)
        .current_dir(dir)
        .env_remove("COILTSC_DATA")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Coils whose broken members carry a large constant offset on every
/// feature, so the classes are separable from any single window.
pub fn separable_coils(normal: usize, broken: usize, windows_per_coil: usize, seed: u64) -> Vec<CoilSequence> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::new();
    for i in 0..normal + broken {
        let label = if i < normal { Label::Normal } else { Label::Broken };
        let offset = if label == Label::Broken { 3.0 } else { 0.0 };
        let records = (0..40 * windows_per_coil)
            .map(|t| FeatureRecord {
                timestamp: 1_000_000 + 60 * t as i64,
                values: [
                    offset + rng.gen_range(-0.5..0.5),
                    10.0 + offset + rng.gen_range(-0.5..0.5),
                    1.0 + offset + rng.gen_range(-0.5..0.5),
                    5.0 + offset + rng.gen_range(-0.5..0.5),
                ],
            })
            .collect();
        out.push(CoilSequence {
            coil_id: format!("coil-{i:03}"),
            label,
            records,
        });
    }
    out
}
