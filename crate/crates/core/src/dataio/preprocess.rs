use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{CoilSequence, DataError, Result, Window, FEATURES};

/// Per-feature z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 4],
    pub std: [f64; 4],
    /// Coil ids the statistics were computed from, sorted.
    pub fitted_on: Vec<String>,
}

impl Normalizer {
    /// Fits on every record of `train`. Any coil listed in `test_coils` is a
    /// leakage error.
    pub fn fit(train: &[CoilSequence], test_coils: &BTreeSet<String>) -> Result<Self> {
        if let Some(seq) = train.iter().find(|s| test_coils.contains(&s.coil_id)) {
            return Err(DataError::Leakage {
                coil: seq.coil_id.clone(),
            });
        }
        let n: usize = train.iter().map(|s| s.records.len()).sum();
        if n == 0 {
            return Err(DataError::Invalid("cannot fit a normalizer on zero records".into()));
        }
        let records = || train.iter().flat_map(|s| s.records.iter());
        let mut mean = [0.0; 4];
        for r in records() {
            for f in 0..4 {
                mean[f] += r.values[f];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = [0.0; 4];
        for r in records() {
            for f in 0..4 {
                let d = r.values[f] - mean[f];
                var[f] += d * d;
            }
        }
        let mut std = [0.0; 4];
        for f in 0..4 {
            std[f] = (var[f] / n as f64).sqrt();
            if !(std[f] > 1e-12 * mean[f].abs().max(1.0)) {
                return Err(DataError::ZeroVariance { feature: FEATURES[f] });
            }
        }
        let mut fitted_on: Vec<String> = train.iter().map(|s| s.coil_id.clone()).collect();
        fitted_on.sort();
        fitted_on.dedup();
        Ok(Normalizer { mean, std, fitted_on })
    }

    pub fn transform_value(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    /// Returns transformed copies of raw sequences.
    pub fn apply_sequences(&self, sequences: &[CoilSequence]) -> Vec<CoilSequence> {
        sequences
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for r in &mut s.records {
                    for f in 0..4 {
                        r.values[f] = self.transform_value(f, r.values[f]);
                    }
                }
                s
            })
            .collect()
    }

    /// Normalizes windows in place; a window may only be normalized once.
    pub fn apply_windows(&self, windows: &mut [Window]) -> Result<()> {
        if let Some(w) = windows.iter().find(|w| w.normalized) {
            return Err(DataError::AlreadyNormalized {
                coil: w.coil_id.clone(),
            });
        }
        for w in windows {
            for f in 0..4 {
                for t in 0..w.length {
                    let v = &mut w.data[f * w.length + t];
                    *v = self.transform_value(f, *v);
                }
            }
            w.normalized = true;
        }
        Ok(())
    }
}

/// Per-coil windowing outcome.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub windows: usize,
    pub dropped_records: usize,
    /// Coils too short to yield a single window.
    pub empty_coils: Vec<String>,
}

/// Cuts each coil into windows of `length` records every `stride` records;
/// a trailing remainder is dropped and counted.
pub fn window_sequences(
    sequences: &[CoilSequence],
    length: usize,
    stride: usize,
) -> Result<(Vec<Window>, WindowReport)> {
    if length == 0 || stride == 0 {
        return Err(DataError::Invalid("window length and stride must be positive".into()));
    }
    let mut out = Vec::new();
    let mut report = WindowReport::default();
    for seq in sequences {
        let n = seq.records.len();
        let mut start = 0;
        let mut covered = 0;
        while start + length <= n {
            let mut data = vec![0.0; 4 * length];
            for (t, r) in seq.records[start..start + length].iter().enumerate() {
                for f in 0..4 {
                    data[f * length + t] = r.values[f];
                }
            }
            out.push(Window {
                coil_id: seq.coil_id.clone(),
                label: seq.label,
                length,
                data,
                normalized: false,
                synthetic: false,
            });
            covered = start + length;
            start += stride;
        }
        if covered == 0 {
            report.empty_coils.push(seq.coil_id.clone());
        }
        report.dropped_records += n - covered;
    }
    report.windows = out.len();
    if !report.empty_coils.is_empty() {
        log::info!("{} coils shorter than {length} records yield no windows", report.empty_coils.len());
    }
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{FeatureRecord, Label};

    fn seq(id: &str, n: usize, f: impl Fn(usize) -> [f64; 4]) -> CoilSequence {
        CoilSequence {
            coil_id: id.into(),
            label: Label::Normal,
            records: (0..n).map(|i| FeatureRecord { timestamp: i as i64, values: f(i) }).collect(),
        }
    }

    #[test]
    fn hand_z_score() {
        let train = vec![seq("a", 3, |i| [i as f64 + 1.0, 2.0 * i as f64, -(i as f64), i as f64 * 0.5])];
        let n = Normalizer::fit(&train, &BTreeSet::new()).unwrap();
        assert_eq!(n.mean[0], 2.0);
        let out = n.apply_sequences(&train);
        let z: Vec<f64> = out[0].records.iter().map(|r| r.values[0]).collect();
        let expected = 1.5f64.sqrt();
        for (a, b) in z.iter().zip([-expected, 0.0, expected]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((expected - 1.2247).abs() < 1e-4);
    }

    #[test]
    fn transformed_training_data_is_standard() {
        let train = vec![
            seq("a", 50, |i| [(i as f64).sin() * 3.0 + 7.0, i as f64, (i * i) as f64, 1e3 + (i % 7) as f64]),
            seq("b", 23, |i| [(i as f64).cos(), -(i as f64), 0.5 * i as f64, 1e3 - (i % 5) as f64]),
        ];
        let n = Normalizer::fit(&train, &BTreeSet::new()).unwrap();
        let out = n.apply_sequences(&train);
        let vals: Vec<[f64; 4]> = out.iter().flat_map(|s| s.records.iter().map(|r| r.values)).collect();
        for f in 0..4 {
            let m = vals.iter().map(|v| v[f]).sum::<f64>() / vals.len() as f64;
            let s = (vals.iter().map(|v| (v[f] - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9, "feature {f}: {m} {s}");
        }
    }

    #[test]
    fn guards() {
        let constant = vec![seq("a", 5, |i| [1.0, i as f64, i as f64, i as f64])];
        assert!(matches!(
            Normalizer::fit(&constant, &BTreeSet::new()),
            Err(DataError::ZeroVariance { feature: "cnl" })
        ));
        let train = vec![seq("a", 5, |i| [i as f64; 4])];
        let test: BTreeSet<String> = ["a".to_string()].into();
        assert!(matches!(Normalizer::fit(&train, &test), Err(DataError::Leakage { .. })));

        let n = Normalizer::fit(&train, &BTreeSet::new()).unwrap();
        let (mut windows, _) = window_sequences(&train, 5, 5).unwrap();
        n.apply_windows(&mut windows).unwrap();
        assert!(matches!(n.apply_windows(&mut windows), Err(DataError::AlreadyNormalized { .. })));
    }

    #[test]
    fn window_counts_and_conservation() {
        for (n, windows, dropped) in [(80, 2, 0), (39, 0, 39), (100, 2, 20), (40, 1, 0)] {
            let s = seq("c", n, |i| [i as f64; 4]);
            let (w, report) = window_sequences(&[s], 40, 40).unwrap();
            assert_eq!(w.len(), windows);
            assert_eq!(report.dropped_records, dropped);
            assert_eq!(40 * w.len() + report.dropped_records, n);
            assert_eq!(report.empty_coils.len(), usize::from(windows == 0));
        }
        let s = seq("c", 80, |i| [i as f64, 0.0, 0.0, -(i as f64)]);
        let (w, _) = window_sequences(&[s], 40, 40).unwrap();
        assert_eq!(w[1].value(0, 0), 40.0);
        assert_eq!(w[1].value(3, 39), -79.0);
    }
}
