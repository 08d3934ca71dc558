//! Output perturbation of client updates.
//!
//! With the Laplace mechanism the update delta is first clipped to L2 norm
//! `clip_norm`, then every coordinate receives independent `Laplace(0, b)`
//! noise with `b = clip_norm / epsilon`. `epsilon` is spent once per round;
//! an `R`-round experiment reports `R · epsilon` under basic composition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::Parameters;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy config: {0}")]
    InvalidPrivacyConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    None,
    Laplace,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacyConfig {
    #[serde(default)]
    pub mechanism: Mechanism,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

impl PrivacyConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn laplace(epsilon: f64, clip_norm: f64) -> Self {
        Self {
            mechanism: Mechanism::Laplace,
            epsilon: Some(epsilon),
            clip_norm: Some(clip_norm),
            noise_seed: None,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self {
            noise_seed: Some(seed),
            ..self
        }
    }

    /// `(epsilon, clip_norm)` for the Laplace mechanism, `None` otherwise.
    pub fn validate(&self) -> Result<Option<(f64, f64)>, PrivacyError> {
        match self.mechanism {
            Mechanism::None => Ok(None),
            Mechanism::Laplace => {
                let eps = self.epsilon.ok_or_else(|| {
                    PrivacyError::InvalidPrivacyConfig("laplace requires epsilon".into())
                })?;
                let clip = self.clip_norm.ok_or_else(|| {
                    PrivacyError::InvalidPrivacyConfig("laplace requires clip_norm".into())
                })?;
                if !(eps.is_finite() && eps > 0.0) {
                    return Err(PrivacyError::InvalidPrivacyConfig(
                        "epsilon must be a positive finite number".into(),
                    ));
                }
                if !(clip.is_finite() && clip > 0.0) {
                    return Err(PrivacyError::InvalidPrivacyConfig(
                        "clip_norm must be a positive finite number".into(),
                    ));
                }
                Ok(Some((eps, clip)))
            }
        }
    }

    /// Laplace scale `b = C / ε`.
    pub fn noise_scale(&self) -> Option<f64> {
        self.validate().ok().flatten().map(|(eps, clip)| clip / eps)
    }

    /// Combines the experiment's setting with a stricter local floor: the
    /// result never adds less noise or clips less than either input.
    pub fn strictest(self, local: Option<PrivacyConfig>) -> PrivacyConfig {
        let Some(local) = local.filter(|l| l.mechanism == Mechanism::Laplace) else {
            return self;
        };
        if self.mechanism == Mechanism::None {
            return PrivacyConfig {
                noise_seed: self.noise_seed.or(local.noise_seed),
                ..local
            };
        }
        let min = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        PrivacyConfig {
            mechanism: Mechanism::Laplace,
            epsilon: min(self.epsilon, local.epsilon),
            clip_norm: min(self.clip_norm, local.clip_norm),
            noise_seed: self.noise_seed.or(local.noise_seed),
        }
    }
}

/// Result of perturbing one delta.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbed<T: Scalar> {
    pub delta: Parameters<T>,
    /// Norm of the delta after clipping, before noise.
    pub clipped_norm: f64,
    /// Whether the clip actually rescaled the delta.
    pub was_clipped: bool,
}

/// Scales `delta` down so its L2 norm is at most `clip_norm`.
pub fn clip_to_norm<T: Scalar>(delta: &Parameters<T>, clip_norm: f64) -> (Parameters<T>, bool) {
    let norm = delta.l2_norm().widen();
    if norm > clip_norm {
        (delta.scale(T::of(clip_norm / norm)), true)
    } else {
        (delta.clone(), false)
    }
}

/// One draw from `Laplace(0, scale)` by inverse transform sampling.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    // u is uniform on (-1/2, 1/2); exclude the endpoint that maps to ln(0).
    let u: f64 = loop {
        let u = rng.random::<f64>() - 0.5;
        if u != -0.5 {
            break u;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Applies the configured mechanism to an update delta.
pub fn apply_dp<T: Scalar>(
    delta: &Parameters<T>,
    privacy: &PrivacyConfig,
) -> Result<Perturbed<T>, PrivacyError> {
    let Some((eps, clip)) = privacy.validate()? else {
        return Ok(Perturbed {
            delta: delta.clone(),
            clipped_norm: delta.l2_norm().widen(),
            was_clipped: false,
        });
    };
    let (clipped, was_clipped) = clip_to_norm(delta, clip);
    let clipped_norm = clipped.l2_norm().widen();
    let scale = clip / eps;
    let mut rng = match privacy.noise_seed {
        Some(seed) => ChaCha20Rng::seed_from_u64(seed),
        None => ChaCha20Rng::from_os_rng(),
    };
    let noisy = clipped.map(|v| v + T::of(sample_laplace(&mut rng, scale)));
    Ok(Perturbed {
        delta: noisy,
        clipped_norm,
        was_clipped,
    })
}
