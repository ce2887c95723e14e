//! Class centers in feature space.
//!
//! The center set is both the classifier (a sample gets the label of its
//! nearest center) and the bridge between domains: when the set is shared,
//! source and target samples of one class are pulled toward the same point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamTensors;
use crate::ndcore::{squared_euclidean, Matrix, Rng};

/// Standard deviation of the Gaussian used to initialize centers.
pub const CENTER_INIT_SD: f64 = 0.1;

/// `C × dim` class centers. A shared set stores one matrix used for both
/// domains; an unshared set keeps separate target centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSet {
    source: Matrix,
    target: Option<Matrix>,
}

/// Shared centers with entries drawn from `Normal(0, 0.1²)`.
pub fn init_centers(class_count: usize, dim: usize, rng: &mut Rng) -> Result<CenterSet> {
    if class_count < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {class_count}")));
    }
    if dim == 0 {
        return Err(Error::config("center dimension must be positive"));
    }
    let data = (0..class_count * dim)
        .map(|_| rng.normal(0.0, CENTER_INIT_SD))
        .collect();
    Ok(CenterSet {
        source: Matrix::from_vec(class_count, dim, data)?,
        target: None,
    })
}

impl CenterSet {
    pub fn shared(centers: Matrix) -> Result<Self> {
        if centers.rows() < 2 || centers.cols() == 0 {
            return Err(Error::config(format!(
                "center matrix must be at least 2 x 1, got {:?}",
                centers.shape()
            )));
        }
        Ok(Self {
            source: centers,
            target: None,
        })
    }

    /// Separate per-domain centers; both start as copies of `centers`.
    pub fn per_domain(centers: Matrix) -> Result<Self> {
        let mut cs = Self::shared(centers)?;
        cs.target = Some(cs.source.clone());
        Ok(cs)
    }

    pub fn is_shared(&self) -> bool {
        self.target.is_none()
    }

    pub fn class_count(&self) -> usize {
        self.source.rows()
    }

    pub fn dim(&self) -> usize {
        self.source.cols()
    }

    pub fn source(&self) -> &Matrix {
        &self.source
    }

    /// Target-domain centers; the shared matrix when the set is shared.
    pub fn target(&self) -> &Matrix {
        self.target.as_ref().unwrap_or(&self.source)
    }

    pub fn source_mut(&mut self) -> &mut Matrix {
        &mut self.source
    }

    pub fn target_mut(&mut self) -> &mut Matrix {
        self.target.as_mut().unwrap_or(&mut self.source)
    }

    /// Overwrites unshared target centers with the source centers.
    pub fn sync_target_to_source(&mut self) {
        if let Some(t) = self.target.as_mut() {
            t.clone_from(&self.source);
        }
    }

    pub fn zeros_like(&self) -> CenterSet {
        let (c, d) = self.source.shape();
        CenterSet {
            source: Matrix::zeros(c, d),
            target: self.target.as_ref().map(|_| Matrix::zeros(c, d)),
        }
    }
}

impl ParamTensors for CenterSet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = vec![self.source.as_slice()];
        if let Some(t) = &self.target {
            v.push(t.as_slice());
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![self.source.as_mut_slice()];
        if let Some(t) = &mut self.target {
            v.push(t.as_mut_slice());
        }
        v
    }
}

/// Index and squared distance of the closest center. Ties go to the lowest index.
pub fn nearest_center(feature: &[f64], centers: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.rows() {
        let d = squared_euclidean(feature, centers.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Closest center other than `label`. Ties go to the lowest index.
pub fn nearest_negative_center(feature: &[f64], centers: &Matrix, label: usize) -> Result<(usize, f64)> {
    let c = centers.rows();
    if c < 2 {
        return Err(Error::config("a nearest negative center needs at least 2 classes"));
    }
    if label >= c {
        return Err(Error::config(format!("label {label} out of range for {c} classes")));
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for j in (0..c).filter(|&j| j != label) {
        let d = squared_euclidean(feature, centers.row(j));
        if d < best.1 || best.0 == usize::MAX {
            best = (j, d);
        }
    }
    Ok(best)
}
