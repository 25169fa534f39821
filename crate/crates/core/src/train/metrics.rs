use serde::{Deserialize, Serialize};

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub model: String,
    pub variant: Option<String>,
    pub loss: f64,
    pub accuracy: f64,
}

/// Classification summary over one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Per class; 0 for a class that was never predicted.
    pub precision: Vec<f64>,
    /// Per class; 0 for a class with no samples.
    pub recall: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>, mean_loss: f64) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let recall = (0..k)
            .map(|i| ratio(confusion[i][i], confusion[i].iter().sum()))
            .collect();
        let precision = (0..k)
            .map(|j| ratio(confusion[j][j], confusion.iter().map(|row| row[j]).sum()))
            .collect();
        EvalReport {
            samples: total as usize,
            accuracy: ratio(diag, total),
            mean_loss,
            precision,
            recall,
            confusion,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_from_confusion() {
        let r = EvalReport::from_confusion(vec![vec![3, 1], vec![0, 4]], 0.5);
        assert_eq!(r.samples, 8);
        assert!((r.accuracy - 7.0 / 8.0).abs() < 1e-15);
        assert_eq!(r.recall, vec![0.75, 1.0]);
        assert_eq!(r.precision, vec![1.0, 0.8]);
    }

    #[test]
    fn unpredicted_class_has_zero_precision() {
        let r = EvalReport::from_confusion(vec![vec![2, 0], vec![1, 0]], 0.0);
        assert_eq!(r.precision[1], 0.0);
        assert_eq!(r.recall[1], 0.0);
    }
}
