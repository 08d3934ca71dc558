use serde::{Deserialize, Serialize};

/// Loss/accuracy summary reported by a client for one task.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub loss: f64,
    /// Fraction in `[0, 1]`.
    pub accuracy: f64,
    pub train_seconds: f64,
}
