use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AugmentError;
use crate::dataio::{save_sequences, CoilSequence, FeatureRecord, Format, Label, FEATURES};
use crate::seed;

/// Healthy-coil behaviour of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureBaseline {
    /// Fleet mean of the per-coil level.
    pub mean: f64,
    /// Spread of per-coil levels around `mean`.
    pub coil_std: f64,
    /// Stationary standard deviation of the within-coil AR(1) noise.
    pub noise_std: f64,
    /// AR(1) coefficient in [0, 1).
    pub autocorrelation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub coils: usize,
    pub days: usize,
    pub records_per_day: usize,
    /// Fraction of coils that break; the count is `round(fraction · coils)`.
    pub broken_fraction: f64,
    /// In `cnl, csp, ssr, csi` order.
    pub baselines: [FeatureBaseline; 4],
    /// Defective level above baseline, in units of the feature's total
    /// (coil plus noise) standard deviation.
    pub shift_sigmas: f64,
    /// Degradation onset is uniform in this range of days.
    pub onset_days: [f64; 2],
    /// Logistic time scale of the rise, in records.
    pub rise_records: f64,
    pub start_epoch: i64,
    /// Uniform timestamp jitter bound in seconds.
    pub jitter_seconds: i64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let b = |mean, coil_std, noise_std| FeatureBaseline {
            mean,
            coil_std,
            noise_std,
            autocorrelation: 0.6,
        };
        CorpusConfig {
            coils: 1000,
            days: 3,
            records_per_day: 40,
            broken_fraction: 0.022,
            baselines: [b(2.0, 0.1, 0.1), b(60.0, 3.0, 3.0), b(1.0, 0.05, 0.05), b(80.0, 4.0, 4.0)],
            shift_sigmas: 5.0,
            onset_days: [0.1, 0.4],
            rise_records: 2.0,
            start_epoch: 1_556_668_800,
            jitter_seconds: 300,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn broken_count(&self) -> usize {
        (self.broken_fraction * self.coils as f64).round() as usize
    }

    pub fn spacing_seconds(&self) -> i64 {
        86_400 / self.records_per_day.max(1) as i64
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.to_string()));
        if self.coils == 0 || self.days == 0 || self.records_per_day == 0 {
            return bad("coil, day and per-day record counts must be positive");
        }
        if !(self.broken_fraction > 0.0 && self.broken_fraction < 1.0) {
            return bad("broken fraction must lie in (0, 1)");
        }
        for (b, name) in self.baselines.iter().zip(FEATURES) {
            let ok = b.mean.is_finite()
                && b.coil_std >= 0.0
                && b.noise_std > 0.0
                && b.noise_std.is_finite()
                && b.coil_std.is_finite()
                && (0.0..1.0).contains(&b.autocorrelation);
            if !ok {
                return bad(&format!("baseline of {name}: stds must be finite with noise > 0, autocorrelation in [0, 1)"));
            }
        }
        if !(self.shift_sigmas.is_finite() && self.shift_sigmas >= 0.0) {
            return bad("shift must be finite and non-negative");
        }
        let [lo, hi] = self.onset_days;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad("onset range must be ordered");
        }
        if !(self.rise_records > 0.0 && self.rise_records.is_finite()) {
            return bad("rise time scale must be positive");
        }
        if self.jitter_seconds < 0 || 2 * self.jitter_seconds >= self.spacing_seconds() {
            return bad("jitter must be non-negative and below half the record spacing");
        }
        Ok(())
    }

    /// Absolute defective shift per feature.
    pub fn shifts(&self) -> [f64; 4] {
        let mut s = [0.0; 4];
        for (f, b) in self.baselines.iter().enumerate() {
            s[f] = self.shift_sigmas * (b.coil_std * b.coil_std + b.noise_std * b.noise_std).sqrt();
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoilEntry {
    pub coil_id: String,
    pub label: Label,
    pub seed: u64,
    /// Record index (fractional) at the midpoint of the rise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub onset_record: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub affected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    pub coils: usize,
    pub broken: usize,
    pub normal: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub command: String,
    pub config: CorpusConfig,
    pub format: String,
    pub data_file: String,
    pub data_sha256: String,
    pub counts: CorpusCounts,
    pub coils: Vec<CoilEntry>,
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Builds the coil sequences in memory. Coil `i` draws everything from a
/// seed derived from the master seed, so coils are independent of each other.
pub fn generate_sequences(config: &CorpusConfig) -> Result<(Vec<CoilSequence>, Vec<CoilEntry>), AugmentError> {
    config.validate()?;
    let n_broken = config.broken_count();
    let mut order: Vec<usize> = (0..config.coils).collect();
    order.shuffle(&mut seed::derived_rng(config.seed, "broken-coils", 0));
    let mut is_broken = vec![false; config.coils];
    for &i in &order[..n_broken] {
        is_broken[i] = true;
    }
    let shifts = config.shifts();
    let n_records = config.days * config.records_per_day;
    let spacing = config.spacing_seconds();
    let mut sequences = Vec::with_capacity(config.coils);
    let mut entries = Vec::with_capacity(config.coils);
    for (i, &broken) in is_broken.iter().enumerate() {
        let coil_seed = seed::derive(config.seed, "coil", i as u64);
        let mut rng = seed::rng(coil_seed);
        let mut level = [0.0; 4];
        let mut noise = [0.0; 4];
        for f in 0..4 {
            let b = &config.baselines[f];
            let z: f64 = StandardNormal.sample(&mut rng);
            level[f] = b.mean + b.coil_std * z;
            let z: f64 = StandardNormal.sample(&mut rng);
            noise[f] = b.noise_std * z;
        }
        let (onset, affected) = if broken {
            let [lo, hi] = config.onset_days;
            let day = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let mask: u8 = rng.gen_range(1..16);
            (Some(day * config.records_per_day as f64), (0..4).map(|f| mask & (1 << f) != 0).collect())
        } else {
            (None, vec![false; 4])
        };
        let mut records = Vec::with_capacity(n_records);
        for t in 0..n_records {
            let mut values = [0.0; 4];
            for f in 0..4 {
                let b = &config.baselines[f];
                if t > 0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let a = b.autocorrelation;
                    noise[f] = a * noise[f] + (1.0 - a * a).sqrt() * b.noise_std * z;
                }
                values[f] = level[f] + noise[f];
                if let (Some(on), true) = (onset, affected[f]) {
                    values[f] += shifts[f] * logistic((t as f64 - on) / config.rise_records);
                }
            }
            let jitter = if config.jitter_seconds > 0 {
                rng.gen_range(-config.jitter_seconds..=config.jitter_seconds)
            } else {
                0
            };
            records.push(FeatureRecord {
                timestamp: config.start_epoch + t as i64 * spacing + jitter,
                values,
            });
        }
        let coil_id = format!("coil-{:05}", i + 1);
        let label = if broken { Label::Broken } else { Label::Normal };
        entries.push(CoilEntry {
            coil_id: coil_id.clone(),
            label,
            seed: coil_seed,
            onset_record: onset,
            affected: (0..4).filter(|&f| affected[f]).map(|f| FEATURES[f].to_string()).collect(),
        });
        sequences.push(CoilSequence { coil_id, label, records });
    }
    Ok((sequences, entries))
}

/// Writes `coils.<ext>` and `manifest.json` into `out_dir`.
pub fn generate_corpus(config: &CorpusConfig, format: Format, out_dir: &Path) -> Result<CorpusManifest, AugmentError> {
    let (sequences, coils) = generate_sequences(config)?;
    let data_file = format!("coils.{}", format.extension());
    let data_path = out_dir.join(&data_file);
    save_sequences(&data_path, format, &sequences)?;
    let io = |source| AugmentError::Io {
        path: out_dir.display().to_string(),
        source,
    };
    let bytes = fs::read(&data_path).map_err(io)?;
    let broken = coils.iter().filter(|c| c.label == Label::Broken).count();
    let manifest = CorpusManifest {
        command: "generate".into(),
        config: config.clone(),
        format: format.extension().into(),
        data_file,
        data_sha256: hex::encode(Sha256::digest(&bytes)),
        counts: CorpusCounts {
            coils: coils.len(),
            broken,
            normal: coils.len() - broken,
            records: sequences.iter().map(|s| s.records.len()).sum(),
        },
        coils,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(out_dir.join("manifest.json"), text).map_err(io)?;
    Ok(manifest)
}
