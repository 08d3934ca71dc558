//! The fixed model zoo: multinomial logistic regression, a ReLU MLP, and a
//! two-convolution CNN. Models are stateless descriptions; weights live in a
//! [`Parameters`] vector whose layout the [`ModelSpec`] determines.

mod cnn2;
mod dense;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ModelLayout, Parameters};
use crate::scalar::Scalar;

pub use cnn2::Cnn2Shape;
pub use dense::DenseStack;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("parameters do not match the model layout")]
    LayoutMismatch,
    #[error("input has {actual} features, model expects {expected}")]
    InputMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("loss became non-finite in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LogisticRegression,
    Mlp,
    Cnn2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    CrossEntropy,
    /// `½ Σ_c (z_c − onehot_c)²` on the raw outputs.
    Mse,
}

fn default_kernel() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// `[features]` for dense models, `[channels, height, width]` (or
    /// `[height, width]`) for `cnn2`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Hidden layer widths for `mlp`; the first entry is the dense hidden
    /// width for `cnn2`.
    #[serde(default)]
    pub hidden_sizes: Vec<usize>,
    /// Output channels of the two convolutions (`cnn2` only).
    #[serde(default)]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub init_seed: u64,
}

/// A validated, ready-to-run architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Dense(DenseStack),
    Cnn2(Cnn2Shape),
}

impl ModelSpec {
    pub fn logistic(features: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            input_shape: vec![features],
            num_classes,
            hidden_sizes: Vec::new(),
            channels: Vec::new(),
            kernel_size: default_kernel(),
            init_seed: 0,
        }
    }

    pub fn mlp(features: usize, hidden: &[usize], num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            hidden_sizes: hidden.to_vec(),
            ..Self::logistic(features, num_classes)
        }
    }

    pub fn cnn2(
        input: [usize; 3],
        channels: [usize; 2],
        kernel: usize,
        hidden: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            kind: ModelKind::Cnn2,
            input_shape: input.to_vec(),
            num_classes,
            hidden_sizes: vec![hidden],
            channels: channels.to_vec(),
            kernel_size: kernel,
            init_seed: 0,
        }
    }

    pub fn with_seed(self, init_seed: u64) -> Self {
        Self { init_seed, ..self }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn network(&self) -> Result<Network, ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(
                "num_classes must be at least 2".into(),
            ));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "input_shape must be non-empty with positive dimensions".into(),
            ));
        }
        match self.kind {
            ModelKind::LogisticRegression => {
                if !self.hidden_sizes.is_empty() {
                    return Err(ModelError::InvalidSpec(
                        "logistic_regression takes no hidden_sizes".into(),
                    ));
                }
                Ok(Network::Dense(DenseStack::new(
                    "linear",
                    self.input_len(),
                    &[],
                    self.num_classes,
                )?))
            }
            ModelKind::Mlp => {
                if self.hidden_sizes.is_empty() {
                    return Err(ModelError::InvalidSpec(
                        "mlp needs at least one hidden size".into(),
                    ));
                }
                Ok(Network::Dense(DenseStack::new(
                    "dense",
                    self.input_len(),
                    &self.hidden_sizes,
                    self.num_classes,
                )?))
            }
            ModelKind::Cnn2 => Ok(Network::Cnn2(Cnn2Shape::from_spec(self)?)),
        }
    }

    /// Deterministic layout; identical specs always produce equal layouts.
    pub fn layout(&self) -> Result<ModelLayout, ModelError> {
        self.network().map(|n| n.layout())
    }

    /// Glorot-uniform weights and zero biases drawn from `init_seed`.
    pub fn init<T: Scalar>(&self) -> Result<Parameters<T>, ModelError> {
        let network = self.network()?;
        let layout = Arc::new(network.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut values = Vec::with_capacity(layout.total_len());
        for (entry, (fan_in, fan_out)) in layout.entries().iter().zip(network.fans()) {
            let n = entry.len();
            if entry.name.ends_with(".bias") {
                values.extend(std::iter::repeat_n(T::zero(), n));
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                values.extend((0..n).map(|_| T::of(rng.random_range(-limit..limit))));
            }
        }
        Parameters::new(layout, values).map_err(|_| ModelError::LayoutMismatch)
    }
}

impl Network {
    pub fn layout(&self) -> ModelLayout {
        match self {
            Network::Dense(d) => d.layout(),
            Network::Cnn2(c) => c.layout(),
        }
    }

    /// `(fan_in, fan_out)` per layout entry, used for initialization.
    fn fans(&self) -> Vec<(usize, usize)> {
        match self {
            Network::Dense(d) => d.fans(),
            Network::Cnn2(c) => c.fans(),
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Network::Dense(d) => d.input_len(),
            Network::Cnn2(c) => c.input_len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Network::Dense(d) => d.num_classes(),
            Network::Cnn2(c) => c.num_classes,
        }
    }

    /// Raw class scores for one sample.
    pub fn logits<T: Scalar>(&self, params: &[T], x: &[T]) -> Vec<T> {
        match self {
            Network::Dense(d) => d.logits(params, x),
            Network::Cnn2(c) => c.logits(params, x),
        }
    }

    /// Loss of one sample; accumulates its gradient into `grad` and returns
    /// `(loss, predicted class)`.
    pub fn accumulate_grad<T: Scalar>(
        &self,
        params: &[T],
        x: &[T],
        label: usize,
        loss: Loss,
        grad: &mut [T],
    ) -> (T, usize) {
        match self {
            Network::Dense(d) => d.accumulate_grad(params, x, label, loss, grad),
            Network::Cnn2(c) => c.accumulate_grad(params, x, label, loss, grad),
        }
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax<T: Scalar>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Loss value and its gradient with respect to the logits.
pub(crate) fn loss_and_dlogits<T: Scalar>(logits: &[T], label: usize, loss: Loss) -> (T, Vec<T>) {
    match loss {
        Loss::CrossEntropy => {
            let max = logits.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
            let sum: T = exps.iter().copied().sum();
            let value = sum.ln() + max - logits[label];
            let mut d: Vec<T> = exps.into_iter().map(|e| e / sum).collect();
            d[label] = d[label] - T::one();
            (value, d)
        }
        Loss::Mse => {
            let half = T::of(0.5);
            let mut value = T::zero();
            let d: Vec<T> = logits
                .iter()
                .enumerate()
                .map(|(c, &z)| {
                    let target = if c == label { T::one() } else { T::zero() };
                    let r = z - target;
                    value = value + half * r * r;
                    r
                })
                .collect();
            (value, d)
        }
    }
}

/// Loss of one sample without gradients.
pub fn sample_loss<T: Scalar>(logits: &[T], label: usize, loss: Loss) -> T {
    loss_and_dlogits(logits, label, loss).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_are_deterministic_and_sized() {
        let spec = ModelSpec::mlp(784, &[64], 10);
        let layout = spec.layout().unwrap();
        assert_eq!(layout, spec.layout().unwrap());
        assert_eq!(layout.total_len(), 784 * 64 + 64 + 64 * 10 + 10);

        let lr = ModelSpec::logistic(4, 3).layout().unwrap();
        assert_eq!(lr.total_len(), 15);

        let cnn = ModelSpec::cnn2([1, 28, 28], [8, 16], 5, 64, 10);
        let layout = cnn.layout().unwrap();
        let names: Vec<_> = layout.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "conv1.weight",
                "conv1.bias",
                "conv2.weight",
                "conv2.bias",
                "fc1.weight",
                "fc1.bias",
                "fc2.weight",
                "fc2.bias"
            ]
        );
        // 28 -> 24 -> 12 -> 8 -> 4
        assert_eq!(layout.entries()[4].shape, vec![64, 16 * 4 * 4]);
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::mlp(10, &[5], 3).with_seed(4);
        let a: Parameters<f64> = spec.init().unwrap();
        let b: Parameters<f64> = spec.init().unwrap();
        let c: Parameters<f64> = spec.clone().with_seed(5).init().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.tensor("dense0.bias").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_specs() {
        assert!(ModelSpec::mlp(10, &[], 3).network().is_err());
        assert!(ModelSpec::logistic(10, 1).network().is_err());
        assert!(ModelSpec::cnn2([1, 6, 6], [2, 2], 5, 4, 3).network().is_err());
        let mut spec = ModelSpec::cnn2([1, 12, 12], [2, 2], 3, 4, 3);
        spec.channels = vec![2];
        assert!(spec.network().is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let z = [1.0f64, 2.0, 0.5];
        let (l, d) = loss_and_dlogits(&z, 1, Loss::CrossEntropy);
        let sum: f64 = z.iter().map(|v| v.exp()).sum();
        assert!((l - (sum.ln() - 2.0)).abs() < 1e-14);
        assert!((d.iter().sum::<f64>()).abs() < 1e-14);
        assert_eq!(argmax(&z), 1);
    }
}
