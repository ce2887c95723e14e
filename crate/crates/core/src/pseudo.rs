//! Pseudo-labels and confidence weights for the target set.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::centers::nearest_center;
use crate::error::{Error, Result};
use crate::losses::{sample_weight, scale_weights_per_class};
use crate::network::Mlp;
use crate::ndcore::{Matrix, Rng};

/// One label and one weight in `[0, 1]` per target sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoState {
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub last_refresh_iteration: Option<usize>,
}

impl PseudoState {
    /// Random labels and weights. Never consumed: the first refresh happens
    /// at iteration 0, before the target loss is switched on.
    pub fn random(len: usize, class_count: usize, rng: &mut Rng) -> Self {
        Self {
            labels: (0..len).map(|_| rng.below(class_count)).collect(),
            weights: (0..len).map(|_| rng.uniform(0.0, 1.0)).collect(),
            last_refresh_iteration: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> (Vec<usize>, Vec<f64>) {
        (
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.weights[i]).collect(),
        )
    }

    /// Appends `iteration,sample_id,label,weight` rows.
    pub fn write_snapshot(&self, iteration: usize, out: &mut impl Write) -> std::io::Result<()> {
        for (i, (y, w)) in self.labels.iter().zip(&self.weights).enumerate() {
            writeln!(out, "{iteration},{i},{y},{w:?}")?;
        }
        Ok(())
    }
}

pub const SNAPSHOT_HEADER: &str = "iteration,sample_id,label,weight";

/// True on iterations where the pseudo-state is recomputed.
pub fn should_refresh(iteration: usize, period: usize) -> bool {
    assert!(period >= 1, "refresh period must be at least 1");
    iteration.is_multiple_of(period)
}

/// Nearest-center labels and per-class scaled confidence weights for
/// already-embedded target features.
pub fn refresh_from_features(features: &Matrix, centers: &Matrix, iteration: usize) -> Result<PseudoState> {
    let c = centers.rows();
    let mut labels = Vec::with_capacity(features.rows());
    let mut raw = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let f = features.row(i);
        let (y, _) = nearest_center(f, centers);
        let w = sample_weight(f, centers, y)?;
        if w < 0.0 {
            return Err(Error::Numeric(format!(
                "sample {i} assigned to center {y} has negative raw weight {w}"
            )));
        }
        labels.push(y);
        raw.push(w);
    }
    let weights = scale_weights_per_class(&raw, &labels, c)?;
    Ok(PseudoState {
        labels,
        weights,
        last_refresh_iteration: Some(iteration),
    })
}

/// Embeds the whole target set with the generator and assigns each sample
/// to its nearest center.
pub fn refresh(generator: &Mlp, centers: &Matrix, target: &Matrix, iteration: usize) -> Result<PseudoState> {
    let features = generator.infer(target)?;
    refresh_from_features(&features, centers, iteration)
}

/// Softmax-head variant: argmax labels, weights from the top class
/// probability scaled per class.
pub fn refresh_from_logits(logits: &Matrix, iteration: usize) -> Result<PseudoState> {
    let c = logits.cols();
    let mut labels = Vec::with_capacity(logits.rows());
    let mut raw = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        let z = logits.row(i);
        let (y, &zmax) = z
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, (j, v)| if *v > *best.1 { (j, v) } else { best });
        let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        labels.push(y);
        raw.push(1.0 / denom);
    }
    let weights = scale_weights_per_class(&raw, &labels, c)?;
    Ok(PseudoState {
        labels,
        weights,
        last_refresh_iteration: Some(iteration),
    })
}
