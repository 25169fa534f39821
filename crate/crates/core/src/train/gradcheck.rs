//! Central-difference verification of the analytic parameter gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{TrainError, CE_EPSILON};
use crate::model::{GcfModel, ModelParams};
use crate::tensor::{BackwardFault, Tape, Tensor};

/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged by absolute difference.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Entries drawn per tensor; smaller tensors are checked in full.
    pub samples_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Corrupts the backward rule of one op (negative control).
    pub fault: Option<BackwardFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples_per_tensor: 20,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Distance of the evaluation point from the nearest ReLU or max-pool kink.
    pub kink_margin: Option<f64>,
    pub passed: bool,
}

fn loss_at(
    model: &GcfModel,
    params: &ModelParams<f64>,
    image: &Tensor<f64>,
    label: usize,
) -> Result<f64, TrainError> {
    let probs = model.predict(params, image)?;
    super::cross_entropy(&probs, label)
}

pub fn grad_check(
    model: &GcfModel,
    params: &ModelParams<f64>,
    image: &Tensor<f64>,
    label: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    if !(opts.step > 0.0) {
        return Err(TrainError::Contract("finite-difference step must be positive".into()));
    }
    let (analytic, kink_margin) = {
        let mut tape = Tape::new();
        if let Some(fault) = opts.fault {
            tape.inject_fault(fault);
        }
        let bound = params.bind(&mut tape);
        let x = tape.input(image);
        let out = model.forward(&mut tape, &bound, x)?;
        let loss = tape.cross_entropy(out.probs, label, CE_EPSILON)?;
        let grads = tape.backward(loss)?;
        let analytic = bound
            .vars()
            .map(|(_, v)| grads.wrt(v))
            .collect::<Result<Vec<_>, _>>()?;
        (analytic, tape.kink_margin())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (name, grad) in names.iter().zip(&analytic) {
        let n = grad.len();
        let picks: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for &i in &picks {
            let original = params.get(name).expect("name from params").data()[i];
            let mut eval = |value: f64| -> Result<f64, TrainError> {
                work.get_mut(name).expect("name from params").data_mut()[i] = value;
                loss_at(model, &work, image, label)
            };
            let plus = eval(original + opts.step)?;
            let minus = eval(original - opts.step)?;
            eval(original)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let abs = (grad[i] - numeric).abs();
            let rel = abs / grad[i].abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
        }
        tensors.push(TensorCheck {
            name: name.clone(),
            checked: picks.len(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
        tolerance: opts.tolerance,
        kink_margin,
        passed: max_rel_error < opts.tolerance,
    })
}

/// Parameters, input and label at which every ReLU input and max-pool
/// winner is at least `min_margin` away from a kink.
#[derive(Debug, Clone)]
pub struct KinkFreePoint {
    pub params: ModelParams<f64>,
    pub image: Tensor<f64>,
    pub label: usize,
    pub margin: f64,
    pub attempts: usize,
}

/// Draws initial parameters (with small random biases), a uniform random
/// image and a label, retrying until the point clears `min_margin`.
pub fn find_kink_free_point(
    model: &GcfModel,
    seed: u64,
    min_margin: f64,
    max_attempts: usize,
) -> Result<KinkFreePoint, TrainError> {
    let shape = model.config().backbone.input_shape();
    let k = model.config().num_classes;
    let mut best_margin = f64::NEG_INFINITY;
    for attempt in 0..max_attempts {
        let point_seed = seed.wrapping_add(attempt as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(point_seed);
        rng.set_stream(11);
        let mut params = model.init_params::<f64>(point_seed);
        for spec in model.config().param_specs() {
            if spec.fan_in.is_none() {
                let t = params.get_mut(&spec.name).expect("spec name");
                t.data_mut()
                    .iter_mut()
                    .for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        let numel: usize = shape.iter().product();
        let pixels = (0..numel).map(|_| rng.random_range(0.0..1.0)).collect();
        let image = Tensor::new(shape.to_vec(), pixels)?;
        let label = rng.random_range(0..k);
        let margin = {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.input(&image);
            model.forward(&mut tape, &bound, x)?;
            tape.kink_margin().unwrap_or(f64::INFINITY)
        };
        if margin >= min_margin {
            return Ok(KinkFreePoint {
                params,
                image,
                label,
                margin,
                attempts: attempt + 1,
            });
        }
        best_margin = best_margin.max(margin);
    }
    Err(TrainError::Contract(format!(
        "no point with kink margin >= {min_margin} in {max_attempts} attempts (best {best_margin:.3e})"
    )))
}
