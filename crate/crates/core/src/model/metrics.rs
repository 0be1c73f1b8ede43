use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression quality of a model on a test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Pearson correlation between predictions and targets; 0 when either
    /// side has zero variance.
    pub corr: f64,
}

impl Metrics {
    pub fn compute(predictions: &[f64], targets: &[f64]) -> Result<Metrics> {
        if predictions.is_empty() {
            return Err(Error::invalid("cannot evaluate on an empty test set"));
        }
        if predictions.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} predictions for {} targets",
                predictions.len(),
                targets.len()
            )));
        }
        let n = predictions.len() as f64;
        let (mut sq, mut abs) = (0.0, 0.0);
        for (p, t) in predictions.iter().zip(targets) {
            let r = p - t;
            sq += r * r;
            abs += r.abs();
        }
        let mse = sq / n;
        Ok(Metrics {
            mse,
            rmse: mse.sqrt(),
            mae: abs / n,
            corr: pearson(predictions, targets),
        })
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return 0.0;
    }
    (cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0)
}
