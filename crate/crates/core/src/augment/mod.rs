//! Sigmoid-fade synthesis of breaking-coil windows and the synthetic
//! telemetry corpus generator.

mod corpus;

pub use corpus::{generate_corpus, generate_sequences, CorpusConfig, CorpusManifest, FeatureBaseline};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, Label, Window};
use crate::seed::Rng;

pub const SIGMA_RANGE: (f64, f64) = (0.2, 1.0);
pub const MU_RANGE: (f64, f64) = (-13.3, 13.3);

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("window shapes differ: {0}")]
    Mismatch(String),
    #[error("cannot reach target {target}: {reason}")]
    Unreachable { target: f64, reason: String },
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Translation `mu` and scale `sigma` of one logistic fade curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadeParams {
    pub mu: f64,
    pub sigma: f64,
}

/// Draws `sigma` and `mu` uniformly from their closed ranges.
pub fn sample_fade_params(rng: &mut Rng) -> FadeParams {
    let sigma = rng.gen_range(SIGMA_RANGE.0..=SIGMA_RANGE.1);
    let mu = rng.gen_range(MU_RANGE.0..=MU_RANGE.1);
    FadeParams { mu, sigma }
}

/// Fade weight at timestep `j`: `1 / (1 + exp(-(j - mu) / sigma))`.
pub fn sigmoid_fade(j: f64, params: FadeParams) -> f64 {
    let z = (j - params.mu) / params.sigma;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Blends `normal` into `broken` with one fade curve shared by all features:
/// `x[j] = (1 - p[j]) normal[j] + p[j] broken[j]`.
pub fn synthesize_broken(normal: &Window, broken: &Window, params: FadeParams) -> Result<Window, AugmentError> {
    if normal.length != broken.length || normal.data.len() != broken.data.len() {
        return Err(AugmentError::Mismatch(format!(
            "lengths {} and {}",
            normal.length, broken.length
        )));
    }
    if normal.normalized != broken.normalized {
        return Err(AugmentError::Mismatch("one source is normalized, the other is not".into()));
    }
    let len = normal.length;
    let p: Vec<f64> = (0..len).map(|j| sigmoid_fade(j as f64, params)).collect();
    let channels = normal.data.len() / len;
    let mut data = vec![0.0; normal.data.len()];
    for f in 0..channels {
        for j in 0..len {
            let i = f * len + j;
            data[i] = (1.0 - p[j]) * normal.data[i] + p[j] * broken.data[i];
        }
    }
    Ok(Window {
        coil_id: format!("synthetic:{}+{}", normal.coil_id, broken.coil_id),
        label: Label::Broken,
        length: len,
        data,
        normalized: normal.normalized,
        synthetic: true,
    })
}

/// Smallest `s` with `(broken + s) / (total + s) >= target`.
pub fn required_synthetic(total: usize, broken: usize, target: f64) -> usize {
    if total == 0 || target <= broken as f64 / total as f64 {
        return 0;
    }
    let estimate = (target * total as f64 - broken as f64) / (1.0 - target);
    let mut s = estimate.ceil().max(0.0) as usize;
    // Settle rounding of the closed form against the integer condition.
    let reaches = |s: usize| (broken + s) as f64 >= target * (total + s) as f64 - 1e-9;
    while s > 0 && reaches(s - 1) {
        s -= 1;
    }
    while !reaches(s) {
        s += 1;
    }
    s
}

/// Result of [`augment_dataset`].
#[derive(Debug, Clone)]
pub struct Augmented {
    /// Originals first, unchanged and in order, then synthetic windows.
    pub windows: Vec<Window>,
    pub added: usize,
    pub params: Vec<FadeParams>,
}

impl Augmented {
    pub fn broken_count(&self) -> usize {
        self.windows.iter().filter(|w| w.label == Label::Broken).count()
    }
}

/// Appends fade-synthesized broken windows until the broken fraction
/// reaches `target`. A target at or below the current fraction is a no-op.
pub fn augment_dataset(train: &[Window], target: f64, rng: &mut Rng) -> Result<Augmented, AugmentError> {
    if !(0.0..1.0).contains(&target) {
        return Err(AugmentError::Unreachable {
            target,
            reason: "target fraction must lie in [0, 1)".into(),
        });
    }
    let broken: Vec<&Window> = train.iter().filter(|w| w.label == Label::Broken).collect();
    let normal: Vec<&Window> = train.iter().filter(|w| w.label == Label::Normal).collect();
    let added = required_synthetic(train.len(), broken.len(), target);
    let mut windows = train.to_vec();
    let mut params = Vec::with_capacity(added);
    if added > 0 {
        if broken.is_empty() || normal.is_empty() {
            return Err(AugmentError::Unreachable {
                target,
                reason: "training data needs windows of both classes as fade sources".into(),
            });
        }
        for _ in 0..added {
            let n = normal.choose(rng).expect("nonempty");
            let b = broken.choose(rng).expect("nonempty");
            let p = sample_fade_params(rng);
            windows.push(synthesize_broken(n, b, p)?);
            params.push(p);
        }
    }
    Ok(Augmented { windows, added, params })
}
