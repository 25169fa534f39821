//! Cross-entropy loss, momentum SGD, the training loop and evaluation.

mod gradcheck;
mod metrics;

pub use gradcheck::{
    find_kink_free_point, grad_check, GradCheckOptions, GradCheckReport, KinkFreePoint,
    TensorCheck,
};
pub use metrics::{EpochRecord, EvalReport};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{argmax, GcfModel, ModelError, ModelParams};
use crate::parallel::{self, Parallelism};
use crate::real::{Precision, Real};
use crate::tensor::{Tape, Tensor, TensorError};

/// Added inside the log of the cross-entropy.
pub const CE_EPSILON: f64 = 1e-12;

const SHUFFLE_STREAM: u64 = 7;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}{detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("{0}")]
    Contract(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub precision: Precision,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 42,
            precision: Precision::F32,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Contract(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Contract("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Contract(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// `-ln(probs[label] + ε)`.
pub fn cross_entropy<T: Real>(probs: &[T], label: usize) -> Result<T, TrainError> {
    let p = probs.get(label).ok_or_else(|| {
        TrainError::Contract(format!(
            "label {label} out of range for {} classes",
            probs.len()
        ))
    })?;
    Ok(-(*p + T::lit(CE_EPSILON)).ln())
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate: T::lit(learning_rate),
            momentum: T::lit(momentum),
            velocity: Vec::new(),
        }
    }

    /// Applies the accumulated gradients, then zeroes them. Parameters
    /// without a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ModelParams<T>) -> Result<(), TrainError> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(TrainError::Contract(format!(
                "optimizer tracks {} tensors, model has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for ((name, t), v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            if v.len() != t.numel() {
                return Err(TrainError::Contract(format!(
                    "velocity for `{name}` has {} entries, tensor has {}",
                    v.len(),
                    t.numel()
                )));
            }
            let grad = t.take_grad();
            match &grad {
                Some(g) => {
                    for (vi, gi) in v.iter_mut().zip(g) {
                        *vi = self.momentum * *vi + *gi;
                    }
                }
                None => v.iter_mut().for_each(|vi| *vi *= self.momentum),
            }
            for (p, vi) in t.data_mut().iter_mut().zip(v.iter()) {
                *p -= self.learning_rate * *vi;
            }
            if let Some(mut g) = grad {
                g.iter_mut().for_each(|x| *x = T::zero());
                t.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }
}

/// Loss, prediction and parameter gradients for one sample.
#[derive(Debug, Clone)]
pub struct SampleGradient<T> {
    pub loss: T,
    pub predicted: usize,
    /// Aligned with [`ModelParams::iter`].
    pub grads: Vec<Vec<T>>,
}

pub fn sample_gradient<T: Real>(
    model: &GcfModel,
    params: &ModelParams<T>,
    image: &Tensor<T>,
    label: usize,
) -> Result<SampleGradient<T>, TrainError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.input(image);
    let out = model.forward(&mut tape, &bound, x)?;
    let loss = tape.cross_entropy(out.probs, label, T::lit(CE_EPSILON))?;
    let mut grads = tape.backward(loss)?;
    let predicted = argmax(tape.value(out.probs)?);
    let loss_value = tape.value(loss)?[0];
    let per_param = bound
        .vars()
        .map(|(_, v)| grads.take(v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SampleGradient {
        loss: loss_value,
        predicted,
        grads: per_param,
    })
}

/// Mean gradient over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradient<T> {
    pub losses: Vec<T>,
    pub correct: usize,
    pub grads: Vec<Vec<T>>,
}

/// Per-sample gradients computed in parallel, then summed in sample order so
/// the result does not depend on thread scheduling.
pub fn batch_gradient<T: Real>(
    model: &GcfModel,
    params: &ModelParams<T>,
    data: &Dataset<T>,
    indices: &[usize],
    mode: Parallelism,
) -> Result<BatchGradient<T>, TrainError> {
    if indices.is_empty() {
        return Err(TrainError::EmptySplit("batch"));
    }
    let per_sample = parallel::map(mode, indices, |&i| {
        sample_gradient(model, params, &data.images[i], data.labels[i])
    });
    let scale = T::one() / T::lit(indices.len() as f64);
    let mut losses = Vec::with_capacity(indices.len());
    let mut correct = 0;
    let mut total: Option<Vec<Vec<T>>> = None;
    for (sample, &i) in per_sample.into_iter().zip(indices) {
        let sample = sample?;
        losses.push(sample.loss);
        if sample.predicted == data.labels[i] {
            correct += 1;
        }
        match total.as_mut() {
            None => total = Some(sample.grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&sample.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let mut grads = total.unwrap_or_default();
    grads
        .iter_mut()
        .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    Ok(BatchGradient {
        losses,
        correct,
        grads,
    })
}

/// Argmax evaluation with a confusion matrix (rows: true class, columns: predicted).
pub fn evaluate<T: Real>(
    model: &GcfModel,
    params: &ModelParams<T>,
    data: &Dataset<T>,
    mode: Parallelism,
) -> Result<EvalReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let k = model.config().num_classes;
    let indices: Vec<usize> = (0..data.len()).collect();
    let outcomes = parallel::map(mode, &indices, |&i| -> Result<(usize, f64), TrainError> {
        let probs = model.predict(params, &data.images[i])?;
        let loss = cross_entropy(&probs, data.labels[i])?;
        Ok((argmax(&probs), loss.to_f64_lossy()))
    });
    let mut confusion = vec![vec![0u64; k]; k];
    let mut loss_sum = 0.0;
    for (outcome, &label) in outcomes.into_iter().zip(&data.labels) {
        let (pred, loss) = outcome?;
        if label >= k {
            return Err(TrainError::Contract(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        confusion[label][pred] += 1;
        loss_sum += loss;
    }
    Ok(EvalReport::from_confusion(confusion, loss_sum / data.len() as f64))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the best test accuracy (earliest on ties).
    pub best_params: ModelParams<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Test-split report of `best_params` rounded to 32-bit, i.e. exactly what
    /// evaluating the saved checkpoint reproduces.
    pub report: EvalReport,
}

/// Mini-batch training with per-epoch evaluation on `test`.
///
/// Every epoch emits one `train` and one `test` [`EpochRecord`] through
/// `on_epoch`. Deterministic for a given seed, config and data.
pub fn train<T: Real>(
    model: &GcfModel,
    mut params: ModelParams<T>,
    train_data: &Dataset<T>,
    test_data: &Dataset<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if test_data.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let model_name = model_label(model);
    let variant = model
        .topology()
        .map(|t| t.variant().to_string());
    let mut sgd = Sgd::<T>::new(config.learning_rate, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs * 2);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let bg = batch_gradient(model, &params, train_data, batch, config.parallelism)?;
            let batch_loss: f64 = bg.losses.iter().map(|l| l.to_f64_lossy()).sum();
            let grads_finite = bg.grads.iter().flatten().all(|g| g.is_finite());
            if !batch_loss.is_finite() || !grads_finite {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_no + 1,
                    detail: if batch_loss.is_finite() {
                        " (gradient overflow)".into()
                    } else {
                        String::new()
                    },
                });
            }
            loss_sum += batch_loss;
            correct += bg.correct;
            params.accumulate_grads(&bg.grads)?;
            sgd.step(&mut params)?;
        }
        let n = train_data.len() as f64;
        let train_record = EpochRecord {
            epoch,
            split: "train".into(),
            model: model_name.clone(),
            variant: variant.clone(),
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        };
        on_epoch(&train_record);
        history.push(train_record);

        let report = evaluate(model, &params, test_data, config.parallelism)?;
        let test_record = EpochRecord {
            epoch,
            split: "test".into(),
            model: model_name.clone(),
            variant: variant.clone(),
            loss: report.mean_loss,
            accuracy: report.accuracy,
        };
        on_epoch(&test_record);
        history.push(test_record);
        log::info!(
            "{model_name} epoch {epoch}: train loss {:.4}, test accuracy {:.4}",
            loss_sum / n,
            report.accuracy
        );
        if best.as_ref().is_none_or(|(acc, _, _)| report.accuracy > *acc) {
            best = Some((report.accuracy, epoch, params.clone()));
        }
    }
    let (best_params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, epoch),
        None => (params, 0),
    };
    let report = evaluate(
        model,
        &best_params.rounded_to_f32(),
        test_data,
        config.parallelism,
    )?;
    Ok(TrainOutcome {
        best_params,
        best_epoch,
        history,
        report,
    })
}

/// Row label used in metrics and ablation tables.
pub fn model_label(model: &GcfModel) -> String {
    match model.topology() {
        Some(t) => format!("GCF-{}", t.variant()),
        None => "CNN-only".to_string(),
    }
}
