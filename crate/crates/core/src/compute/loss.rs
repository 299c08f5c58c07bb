use serde::{Deserialize, Serialize};

use super::graph::focal_term;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalLossConfig {
    pub gamma: f64,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        FocalLossConfig {
            gamma: 2.0,
            class_weights: None,
        }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "focusing parameter must be finite and >= 0"));
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::config("class_weights", "weights must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Focal loss of one probability vector against a class index.
pub fn focal_loss(probs: &[f64], target: usize, cfg: &FocalLossConfig) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::Domain(format!(
            "target class {target} outside 0..{}",
            probs.len()
        )));
    }
    let w = match &cfg.class_weights {
        Some(w) if w.len() != probs.len() => {
            return Err(Error::dim(format!(
                "{} class weights for {} classes",
                w.len(),
                probs.len()
            )))
        }
        Some(w) => w[target],
        None => 1.0,
    };
    Ok(w * focal_term(probs[target], cfg.gamma))
}

/// Mean focal loss over a batch.
pub fn focal_loss_batch(probs: &[Vec<f64>], targets: &[usize], cfg: &FocalLossConfig) -> Result<f64> {
    if probs.len() != targets.len() || probs.is_empty() {
        return Err(Error::dim("focal_loss_batch: batch sizes differ or are empty"));
    }
    let mut total = 0.0;
    for (p, &t) in probs.iter().zip(targets) {
        total += focal_loss(p, t, cfg)?;
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let cfg = FocalLossConfig::default();
        let half = [0.5, 0.25, 0.25];
        assert!((focal_loss(&half, 0, &cfg).unwrap() - 0.25 * 2f64.ln()).abs() < 1e-15);
        let ce = FocalLossConfig {
            gamma: 0.0,
            class_weights: None,
        };
        assert!((focal_loss(&half, 0, &ce).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(focal_loss(&[1.0, 0.0, 0.0], 0, &cfg).unwrap() < 1e-12);
    }

    #[test]
    fn gamma_zero_is_cross_entropy() {
        let ce = FocalLossConfig {
            gamma: 0.0,
            class_weights: None,
        };
        for p in [0.01, 0.2, 0.5, 0.77, 0.999] {
            let probs = [p, (1.0 - p) / 2.0, (1.0 - p) / 2.0];
            assert!((focal_loss(&probs, 0, &ce).unwrap() + p.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_target() {
        let cfg = FocalLossConfig::default();
        assert!(matches!(
            focal_loss(&[0.3, 0.3, 0.4], 3, &cfg),
            Err(Error::Domain(_))
        ));
    }
}
