use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, RunManifest};

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Disjoint train/test partition of manifest indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub test_fraction: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Per-class seeded shuffle followed by a per-class cut.
///
/// Each class contributes `round(fraction · n_c)` test samples, clamped so
/// that both sides keep at least one. Index lists are sorted.
pub fn split_stratified(
    manifest: &RunManifest,
    seed: u64,
    test_fraction: f64,
) -> Result<SplitAssignment, DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::Contract(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.num_classes()];
    for (i, s) in manifest.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.len() < 2 {
            return Err(DataError::Contract(format!(
                "class `{}` has {} sample(s); stratified splitting needs at least 2",
                manifest.class_names[class],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment {
        seed,
        test_fraction,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use std::path::PathBuf;

    fn manifest(per_class: &[usize]) -> RunManifest {
        let mut samples = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    path: PathBuf::from(format!("c{c}/{i}.png")),
                    label: c,
                });
            }
        }
        RunManifest {
            class_names: (0..per_class.len()).map(|c| format!("c{c}")).collect(),
            samples,
            root: PathBuf::from("."),
        }
    }

    #[test]
    fn ten_per_class_gives_two_test_each() {
        let m = manifest(&[10; 7]);
        let s = split_stratified(&m, 5, 0.2).unwrap();
        assert_eq!(s.test.len(), 14);
        assert_eq!(s.train.len(), 56);
        let mut per_class = [0; 7];
        for &i in &s.test {
            per_class[m.samples[i].label] += 1;
        }
        assert_eq!(per_class, [2; 7]);
    }

    #[test]
    fn deterministic_under_seed() {
        let m = manifest(&[13, 9, 21]);
        let a = split_stratified(&m, 77, 0.2).unwrap();
        let b = split_stratified(&m, 77, 0.2).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = split_stratified(&m, 78, 0.2).unwrap();
        assert_ne!(a.test, c.test);
    }

    #[test]
    fn singleton_class_rejected_by_name() {
        let m = manifest(&[5, 1]);
        let err = split_stratified(&m, 0, 0.2).unwrap_err();
        assert!(matches!(err, DataError::Contract(ref msg) if msg.contains("`c1`")));
    }

    #[test]
    fn json_round_trip() {
        let m = manifest(&[4, 4]);
        let s = split_stratified(&m, 1, 0.25).unwrap();
        assert_eq!(SplitAssignment::from_json(&s.to_json()).unwrap(), s);
    }
}
