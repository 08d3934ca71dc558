//! Local mini-batch SGD and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{LocalDataset, Split};
use crate::metrics::TrainingMetrics;
use crate::model::{argmax, sample_loss, Loss, ModelError, ModelSpec, Network};
use crate::params::Parameters;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<T: Scalar> {
    pub weights: Parameters<T>,
    /// Mean loss and running accuracy over the final epoch.
    pub metrics: TrainingMetrics,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub metrics: TrainingMetrics,
    pub samples: u64,
}

fn check_inputs<T: Scalar>(
    network: &Network,
    model: &Parameters<T>,
    spec: &ModelSpec,
    data: &LocalDataset<T>,
) -> Result<(), ModelError> {
    if **model.layout() != spec.layout()? {
        return Err(ModelError::LayoutMismatch);
    }
    if data.n_features() != network.input_len() && !data.is_empty() {
        return Err(ModelError::InputMismatch {
            expected: network.input_len(),
            actual: data.n_features(),
        });
    }
    if data.num_classes() > network.num_classes() {
        return Err(ModelError::LabelOutOfRange {
            label: data.num_classes() - 1,
            num_classes: network.num_classes(),
        });
    }
    Ok(())
}

/// Mean loss and mean gradient over the given rows.
pub fn batch_loss_and_grad<T: Scalar>(
    network: &Network,
    params: &[T],
    data: &LocalDataset<T>,
    rows: &[usize],
    loss: Loss,
) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); params.len()];
    let mut total = T::zero();
    for &i in rows {
        let (l, _) = network.accumulate_grad(params, data.row(i), data.label(i), loss, &mut grad);
        total = total + l;
    }
    let n = T::of(rows.len().max(1) as f64);
    grad.iter_mut().for_each(|g| *g = *g / n);
    (total / n, grad)
}

/// Agreement between analytic and central finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_abs_diff: f64,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖ + ‖g_numeric‖, 1e-12)`.
    pub relative_error: f64,
}

/// Compares the backward pass against `(L(θ+h) − L(θ−h)) / 2h` for every
/// coordinate, using the mean loss over `rows`.
pub fn gradient_check(
    network: &Network,
    params: &[f64],
    data: &LocalDataset<f64>,
    rows: &[usize],
    loss: Loss,
    h: f64,
) -> GradientCheck {
    let (_, analytic) = batch_loss_and_grad(network, params, data, rows, loss);
    let mut probe = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = batch_loss_and_grad(network, &probe, data, rows, loss).0;
        probe[i] = orig - h;
        let minus = batch_loss_and_grad(network, &probe, data, rows, loss).0;
        probe[i] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    GradientCheck {
        max_abs_diff: analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max),
        relative_error: diff / scale.max(1e-12),
    }
}

/// Mini-batch SGD for `epochs` passes over the train split. Batch order is
/// drawn from `seed`, so identical inputs give bit-identical outputs.
pub fn local_train<T: Scalar>(
    model: &Parameters<T>,
    spec: &ModelSpec,
    data: &LocalDataset<T>,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>, ModelError> {
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(ModelError::InvalidOptions(
            "epochs and batch_size must be at least 1".into(),
        ));
    }
    if !(opts.lr.is_finite() && opts.lr >= 0.0) {
        return Err(ModelError::InvalidOptions(
            "learning rate must be finite and non-negative".into(),
        ));
    }
    let network = spec.network()?;
    check_inputs(&network, model, spec, data)?;
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(ModelError::EmptySplit("train"));
    }

    let started = Instant::now();
    let lr = T::of(opts.lr);
    let mut weights = model.clone();
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut grad = vec![T::zero(); weights.len()];
    let (mut epoch_loss, mut epoch_correct) = (0.0, 0usize);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        epoch_loss = 0.0;
        epoch_correct = 0;
        for (batch_no, batch) in order.chunks(opts.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = T::zero());
            let mut batch_loss = T::zero();
            for &i in batch {
                let label = data.label(i);
                let (l, predicted) = network.accumulate_grad(
                    weights.values(),
                    data.row(i),
                    label,
                    opts.loss,
                    &mut grad,
                );
                batch_loss = batch_loss + l;
                epoch_correct += usize::from(predicted == label);
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            epoch_loss += batch_loss.widen();
            let step = lr / T::of(batch.len() as f64);
            for (w, g) in weights.values_mut().iter_mut().zip(&grad) {
                *w = *w - step * *g;
            }
        }
        if weights.values().iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(opts.batch_size),
            });
        }
    }
    let n = train.len();
    Ok(TrainOutcome {
        weights,
        metrics: TrainingMetrics {
            loss: epoch_loss / n as f64,
            accuracy: epoch_correct as f64 / n as f64,
            train_seconds: started.elapsed().as_secs_f64(),
        },
        samples: n as u64,
    })
}

/// Loss and accuracy of `model` on one split, without mutating anything.
pub fn evaluate<T: Scalar>(
    model: &Parameters<T>,
    spec: &ModelSpec,
    data: &LocalDataset<T>,
    split: Split,
    loss: Loss,
) -> Result<Evaluation, ModelError> {
    let network = spec.network()?;
    check_inputs(&network, model, spec, data)?;
    let rows = data.indices(split);
    if rows.is_empty() {
        return Err(ModelError::EmptySplit(split.name()));
    }
    let started = Instant::now();
    let (mut total, mut correct) = (0.0, 0usize);
    for &i in rows {
        let logits = network.logits(model.values(), data.row(i));
        total += sample_loss(&logits, data.label(i), loss).widen();
        correct += usize::from(argmax(&logits) == data.label(i));
    }
    let n = rows.len();
    Ok(Evaluation {
        metrics: TrainingMetrics {
            loss: total / n as f64,
            accuracy: correct as f64 / n as f64,
            train_seconds: started.elapsed().as_secs_f64(),
        },
        samples: n as u64,
    })
}
