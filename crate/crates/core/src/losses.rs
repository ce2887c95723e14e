//! Objectives and their analytic gradients.
//!
//! Center-loss terms are sums over the batch (no `1/n`). Every gradient is
//! hand-derived and checked against central finite differences in the
//! tests and in the `gradcheck` suite.

use serde::{Deserialize, Serialize};

use crate::centers::{nearest_center, nearest_negative_center};
use crate::error::{Error, Result};
use crate::ndcore::{squared_euclidean, Matrix};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Assigned-center distances are floored here when computing sample weights.
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Intra-class margin `alpha` and inter-class margin `beta` on squared distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 1.2,
        }
    }
}

impl Margins {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let m = Self { alpha, beta };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < self.beta && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "margins need 0 <= alpha < beta, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Ramp parameters for the adversarial and pseudo-label weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// `lambda_t = target_multiplier * lambda_d` once pseudo-labels are in use.
    pub target_multiplier: f64,
    /// Iteration at which pseudo-labels start to count.
    pub pseudo_start: usize,
    /// Total iterations; progress is `iteration / total`.
    pub total: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_multiplier > 0.0) {
            return Err(Error::config("target multiplier K must be > 0"));
        }
        if self.pseudo_start >= self.total {
            return Err(Error::config(format!(
                "pseudo-label start {} must be below the iteration count {}",
                self.pseudo_start, self.total
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub domain: f64,
    pub target: f64,
}

/// `lambda_d = 2 / (1 + e^{-10p}) - 1` with `p = iteration / total`, and
/// `lambda_t = K * lambda_d` from `pseudo_start` on (zero before).
pub fn lambda_schedule(iteration: usize, sched: &Schedule) -> Lambdas {
    let p = (iteration as f64 / sched.total as f64).min(1.0);
    let domain = 2.0 / (1.0 + (-10.0 * p).exp()) - 1.0;
    let target = if iteration < sched.pseudo_start {
        0.0
    } else {
        sched.target_multiplier * domain
    };
    Lambdas { domain, target }
}

/// A scalar objective with its gradient with respect to the batch features
/// (or logits) and, for center losses, the center matrix it was evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub feature_grads: Matrix,
    pub center_grads: Option<Matrix>,
}

/// Which hinge terms of the discriminative center loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HingeTerms {
    pub pull: bool,
    pub push: bool,
}

impl HingeTerms {
    pub const BOTH: HingeTerms = HingeTerms {
        pull: true,
        push: true,
    };
    pub const PULL_ONLY: HingeTerms = HingeTerms {
        pull: true,
        push: false,
    };
}

/// `Σ_i w_i ([d(f_i, c_{y_i}) - alpha]_+ + [beta - d(f_i, c_{ỹ_i})]_+)` where `ỹ_i`
/// is the nearest center other than `y_i`. The negative index is held fixed
/// while differentiating.
pub fn discriminative_center_loss(
    features: &Matrix,
    labels: &[usize],
    weights: Option<&[f64]>,
    centers: &Matrix,
    margins: &Margins,
    terms: HingeTerms,
) -> Result<LossValue> {
    let (n, dim) = features.shape();
    let c = centers.rows();
    if c < 2 {
        return Err(Error::config("the center loss needs at least 2 classes"));
    }
    if centers.cols() != dim {
        return Err(Error::config(format!(
            "features have {dim} columns but centers have {}",
            centers.cols()
        )));
    }
    if labels.len() != n {
        return Err(Error::config(format!("{} labels for {n} samples", labels.len())));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::config(format!("{} weights for {n} samples", w.len())));
        }
    }
    let mut value = 0.0;
    let mut feature_grads = Matrix::zeros(n, dim);
    let mut center_grads = Matrix::zeros(c, dim);
    for i in 0..n {
        let y = labels[i];
        if y >= c {
            return Err(Error::config(format!("label {y} at row {i} out of range for {c} classes")));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let f = features.row(i);
        if terms.pull {
            let d_pos = squared_euclidean(f, centers.row(y));
            let h = d_pos - margins.alpha;
            if h > 0.0 {
                value += w * h;
                accumulate_distance_grad(&mut feature_grads, &mut center_grads, f, centers, i, y, w);
            }
        }
        if terms.push {
            let (neg, d_neg) = nearest_negative_center(f, centers, y)?;
            let h = margins.beta - d_neg;
            if h > 0.0 {
                value += w * h;
                accumulate_distance_grad(&mut feature_grads, &mut center_grads, f, centers, i, neg, -w);
            }
        }
    }
    Ok(LossValue {
        value,
        feature_grads,
        center_grads: Some(center_grads),
    })
}

/// Adds `scale * ∂d(f_i, c_j)` to both gradient buffers.
fn accumulate_distance_grad(
    feature_grads: &mut Matrix,
    center_grads: &mut Matrix,
    f: &[f64],
    centers: &Matrix,
    i: usize,
    j: usize,
    scale: f64,
) {
    let cj = centers.row(j);
    let gf = feature_grads.row_mut(i);
    for m in 0..f.len() {
        gf[m] += scale * 2.0 * (f[m] - cj[m]);
    }
    let gc = center_grads.row_mut(j);
    for m in 0..f.len() {
        gc[m] -= scale * 2.0 * (f[m] - cj[m]);
    }
}

/// Source discriminative center loss on labeled features.
pub fn source_dcl(features: &Matrix, labels: &[usize], centers: &Matrix, margins: &Margins) -> Result<LossValue> {
    discriminative_center_loss(features, labels, None, centers, margins, HingeTerms::BOTH)
}

/// Confidence-weighted center loss on pseudo-labeled target features.
pub fn target_dcl(
    features: &Matrix,
    pseudo_labels: &[usize],
    weights: &[f64],
    centers: &Matrix,
    margins: &Margins,
) -> Result<LossValue> {
    check_unit_weights(weights)?;
    discriminative_center_loss(features, pseudo_labels, Some(weights), centers, margins, HingeTerms::BOTH)
}

fn check_unit_weights(weights: &[f64]) -> Result<()> {
    if let Some(bad) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::config(format!("sample weight {bad} outside [0, 1]")));
    }
    Ok(())
}

/// Raw confidence `d(f, c_ỹ) / d(f, c_ŷ) - 1` for a sample assigned to `pseudo`.
///
/// The assigned-center distance is floored at [`DISTANCE_FLOOR`], so a
/// feature sitting exactly on its center gets a very large, finite weight.
pub fn sample_weight(feature: &[f64], centers: &Matrix, pseudo: usize) -> Result<f64> {
    let (_, d_neg) = nearest_negative_center(feature, centers, pseudo)?;
    let d_assigned = squared_euclidean(feature, centers.row(pseudo)).max(DISTANCE_FLOOR);
    Ok(d_neg / d_assigned - 1.0)
}

/// Min-max rescales raw weights to `[0, 1]` within each pseudo-class. A class
/// whose weights are all equal (including a single-sample class) gets 1.
pub fn scale_weights_per_class(raw: &[f64], labels: &[usize], class_count: usize) -> Result<Vec<f64>> {
    if raw.len() != labels.len() {
        return Err(Error::config(format!(
            "{} weights for {} labels",
            raw.len(),
            labels.len()
        )));
    }
    let mut lo = vec![f64::INFINITY; class_count];
    let mut hi = vec![f64::NEG_INFINITY; class_count];
    for (&w, &y) in raw.iter().zip(labels) {
        if y >= class_count {
            return Err(Error::config(format!("label {y} out of range for {class_count} classes")));
        }
        lo[y] = lo[y].min(w);
        hi[y] = hi[y].max(w);
    }
    Ok(raw
        .iter()
        .zip(labels)
        .map(|(&w, &y)| {
            let range = hi[y] - lo[y];
            if range > 0.0 {
                ((w - lo[y]) / range).clamp(0.0, 1.0)
            } else {
                1.0
            }
        })
        .collect())
}

/// `Σ_j ‖c_j^s - c_j^t‖₂` with its gradients for both center sets.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentLoss {
    pub value: f64,
    pub source_grads: Matrix,
    pub target_grads: Matrix,
}

pub fn center_alignment(source: &Matrix, target: &Matrix) -> Result<AlignmentLoss> {
    if source.shape() != target.shape() {
        return Err(Error::config(format!(
            "center sets differ in shape: {:?} vs {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let (c, dim) = source.shape();
    let mut value = 0.0;
    let mut source_grads = Matrix::zeros(c, dim);
    let mut target_grads = Matrix::zeros(c, dim);
    for j in 0..c {
        let norm = squared_euclidean(source.row(j), target.row(j)).sqrt();
        value += norm;
        if norm > 0.0 {
            let (s, t) = (source.row(j), target.row(j));
            let unit: Vec<f64> = s.iter().zip(t).map(|(a, b)| (a - b) / norm).collect();
            source_grads.row_mut(j).copy_from_slice(&unit);
            for (g, u) in target_grads.row_mut(j).iter_mut().zip(&unit) {
                *g = -u;
            }
        }
    }
    Ok(AlignmentLoss {
        value,
        source_grads,
        target_grads,
    })
}

/// Center alignment between per-batch class means of source features (by
/// label) and target features (by pseudo-label). Classes missing from either
/// batch are skipped. Gradients are with respect to the two feature batches.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanAlignmentLoss {
    pub value: f64,
    pub source_feature_grads: Matrix,
    pub target_feature_grads: Matrix,
}

pub fn class_mean_alignment(
    source: &Matrix,
    source_labels: &[usize],
    target: &Matrix,
    target_labels: &[usize],
    class_count: usize,
) -> Result<MeanAlignmentLoss> {
    if source.cols() != target.cols() {
        return Err(Error::config("source and target features differ in width"));
    }
    let dim = source.cols();
    let means = |x: &Matrix, labels: &[usize]| -> Result<(Matrix, Vec<usize>)> {
        if labels.len() != x.rows() {
            return Err(Error::config(format!("{} labels for {} rows", labels.len(), x.rows())));
        }
        let mut sums = Matrix::zeros(class_count, dim);
        let mut counts = vec![0usize; class_count];
        for (i, &y) in labels.iter().enumerate() {
            if y >= class_count {
                return Err(Error::config(format!("label {y} out of range for {class_count} classes")));
            }
            counts[y] += 1;
            for (s, v) in sums.row_mut(y).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            if n > 0 {
                for s in sums.row_mut(j) {
                    *s /= n as f64;
                }
            }
        }
        Ok((sums, counts))
    };
    let (mut ms, ns) = means(source, source_labels)?;
    let (mut mt, nt) = means(target, target_labels)?;
    // Classes absent from either side contribute nothing: make them coincide.
    for j in 0..class_count {
        if ns[j] == 0 || nt[j] == 0 {
            ms.row_mut(j).fill(0.0);
            mt.row_mut(j).fill(0.0);
        }
    }
    let align = center_alignment(&ms, &mt)?;
    let spread = |grads: &Matrix, labels: &[usize], counts: &[usize], rows: usize| {
        let mut g = Matrix::zeros(rows, dim);
        for (i, &y) in labels.iter().enumerate() {
            let inv = 1.0 / counts[y] as f64;
            for (gi, &gm) in g.row_mut(i).iter_mut().zip(grads.row(y)) {
                *gi = gm * inv;
            }
        }
        g
    };
    Ok(MeanAlignmentLoss {
        value: align.value,
        source_feature_grads: spread(&align.source_grads, source_labels, &ns, source.rows()),
        target_feature_grads: spread(&align.target_grads, target_labels, &nt, target.rows()),
    })
}

/// Binary cross-entropy of the domain discriminator with source as class 1
/// and target as class 0, plus its gradient with respect to each output.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub source_grads: Vec<f64>,
    pub target_grads: Vec<f64>,
}

/// `-Σ log D(source) - Σ log(1 - D(target))`, with outputs clamped to
/// `[1e-7, 1 - 1e-7]`. Clamped outputs get a zero gradient.
pub fn discriminator_loss(d_source: &[f64], d_target: &[f64]) -> DiscriminatorLoss {
    let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let inside = |p: f64| p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
    let mut value = 0.0;
    let source_grads = d_source
        .iter()
        .map(|&p| {
            value -= clamp(p).ln();
            if inside(p) {
                -1.0 / p
            } else {
                0.0
            }
        })
        .collect();
    let target_grads = d_target
        .iter()
        .map(|&p| {
            value -= (1.0 - clamp(p)).ln();
            if inside(p) {
                1.0 / (1.0 - p)
            } else {
                0.0
            }
        })
        .collect();
    DiscriminatorLoss {
        value,
        source_grads,
        target_grads,
    }
}

/// The generator maximizes the discriminator loss, so its feature gradient
/// is the negated discriminator-loss gradient.
pub fn generator_domain_grad(disc_feature_grads: &Matrix) -> Matrix {
    disc_feature_grads.scale(-1.0)
}

/// Mean negative log-softmax of the true class, with gradient wrt the logits.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<LossValue> {
    weighted_softmax_xent(logits, labels, None)
}

/// `(1/n) Σ_i w_i · (-log softmax(z_i)[y_i])`.
pub fn weighted_softmax_xent(logits: &Matrix, labels: &[usize], weights: Option<&[f64]>) -> Result<LossValue> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::config(format!("{} labels for {n} rows of logits", labels.len())));
    }
    if n == 0 {
        return Ok(LossValue {
            value: 0.0,
            feature_grads: Matrix::zeros(0, c),
            center_grads: None,
        });
    }
    let mut value = 0.0;
    let mut grads = Matrix::zeros(n, c);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i];
        if y >= c {
            return Err(Error::config(format!("label {y} out of range for {c} logits")));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        let z = logits.row(i);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum_exp.ln();
        value += w * (log_norm - z[y]) * inv_n;
        let g = grads.row_mut(i);
        for k in 0..c {
            let p = (z[k] - log_norm).exp();
            g[k] = w * inv_n * (p - if k == y { 1.0 } else { 0.0 });
        }
    }
    Ok(LossValue {
        value,
        feature_grads: grads,
        center_grads: None,
    })
}

/// The adversarial part of the generator objective: the discriminator loss
/// and its gradient with respect to the source and target features.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainPart {
    pub disc_loss: f64,
    pub source_feature_grads: Matrix,
    pub target_feature_grads: Matrix,
}

/// Center-alignment part, with gradients routed to whatever it was computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPart {
    pub value: f64,
    pub source_feature_grads: Option<Matrix>,
    pub target_feature_grads: Option<Matrix>,
    pub source_center_grads: Option<Matrix>,
    pub target_center_grads: Option<Matrix>,
}

/// Loss components feeding the generator objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParts {
    /// Source term, gradient wrt source features (and source centers).
    pub source: LossValue,
    /// Target term, gradient wrt target features (and target centers).
    pub target: Option<LossValue>,
    pub alignment: Option<AlignmentPart>,
    pub domain: Option<DomainPart>,
}

/// Which optional terms a method requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub target: bool,
    pub alignment: bool,
    pub domain: bool,
}

/// Weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorWeights {
    pub target: f64,
    pub alignment: f64,
    pub domain: f64,
}

/// `L_G = L_s + λ_t L_t + λ_c L_c + λ_d (-L_d)`, accumulated linearly.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub source_feature_grads: Matrix,
    pub target_feature_grads: Matrix,
    pub source_center_grads: Option<Matrix>,
    pub target_center_grads: Option<Matrix>,
}

pub fn combined_generator_loss(
    parts: &GeneratorParts,
    weights: &GeneratorWeights,
    required: &LossTerms,
    target_rows: usize,
) -> Result<CombinedLoss> {
    let missing = [
        (required.target && parts.target.is_none(), "target"),
        (required.alignment && parts.alignment.is_none(), "alignment"),
        (required.domain && parts.domain.is_none(), "domain"),
    ];
    if let Some((_, name)) = missing.iter().find(|(m, _)| *m) {
        return Err(Error::config(format!("the {name} loss term is required but missing")));
    }

    let src = &parts.source;
    let dim = src.feature_grads.cols();
    let mut out = CombinedLoss {
        value: src.value,
        source_feature_grads: src.feature_grads.clone(),
        target_feature_grads: Matrix::zeros(target_rows, dim),
        source_center_grads: src.center_grads.clone(),
        target_center_grads: None,
    };

    if let (true, Some(t)) = (required.target, &parts.target) {
        out.value += weights.target * t.value;
        out.target_feature_grads.add_scaled(&t.feature_grads, weights.target)?;
        add_option(&mut out.target_center_grads, t.center_grads.as_ref(), weights.target)?;
    }
    if let (true, Some(a)) = (required.alignment, &parts.alignment) {
        let w = weights.alignment;
        out.value += w * a.value;
        if let Some(g) = &a.source_feature_grads {
            out.source_feature_grads.add_scaled(g, w)?;
        }
        if let Some(g) = &a.target_feature_grads {
            out.target_feature_grads.add_scaled(g, w)?;
        }
        add_option(&mut out.source_center_grads, a.source_center_grads.as_ref(), w)?;
        add_option(&mut out.target_center_grads, a.target_center_grads.as_ref(), w)?;
    }
    if let (true, Some(d)) = (required.domain, &parts.domain) {
        let w = weights.domain;
        out.value -= w * d.disc_loss;
        out.source_feature_grads
            .add_scaled(&generator_domain_grad(&d.source_feature_grads), w)?;
        out.target_feature_grads
            .add_scaled(&generator_domain_grad(&d.target_feature_grads), w)?;
    }
    Ok(out)
}

fn add_option(acc: &mut Option<Matrix>, g: Option<&Matrix>, w: f64) -> Result<()> {
    if let Some(g) = g {
        match acc {
            Some(a) => a.add_scaled(g, w)?,
            None => *acc = Some(g.scale(w)),
        }
    }
    Ok(())
}

/// Nearest-center labels for each row.
pub fn nearest_center_labels(features: &Matrix, centers: &Matrix) -> Vec<usize> {
    (0..features.rows())
        .map(|i| nearest_center(features.row(i), centers).0)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::{finite_diff_grad, Rng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut Rng, r: usize, c: usize, sd: f64) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal(0.0, sd)).collect()).unwrap()
    }

    /// Max entrywise relative error with a small absolute floor.
    fn rel_err(a: &Matrix, n: &Matrix) -> f64 {
        a.as_slice()
            .iter()
            .zip(n.as_slice())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// True when no hinge argument or negative-center gap is close to a kink.
    fn away_from_kinks(f: &Matrix, labels: &[usize], c: &Matrix, m: &Margins) -> bool {
        (0..f.rows()).all(|i| {
            let row = f.row(i);
            let d_pos = squared_euclidean(row, c.row(labels[i]));
            let mut negs: Vec<f64> = (0..c.rows())
                .filter(|&j| j != labels[i])
                .map(|j| squared_euclidean(row, c.row(j)))
                .collect();
            negs.sort_by(f64::total_cmp);
            (d_pos - m.alpha).abs() > 1e-3
                && (m.beta - negs[0]).abs() > 1e-3
                && (negs.len() < 2 || negs[1] - negs[0] > 1e-3)
        })
    }

    #[test]
    fn dcl_zero_when_both_hinges_inactive() {
        let c = mat(&[&[0.0, 0.0], &[2.0f64.sqrt(), 0.0]]);
        let f = mat(&[&[0.0, 0.0]]);
        let l = source_dcl(&f, &[0], &c, &Margins::default()).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.feature_grads, Matrix::zeros(1, 2));
    }

    #[test]
    fn dcl_spot_value() {
        // d_pos = 0.5, d_neg = 0.4: (0.5 - 0.2) + (1.2 - 0.4) = 1.1
        let c = mat(&[&[0.5f64.sqrt(), 0.0], &[0.0, 0.4f64.sqrt()]]);
        let f = mat(&[&[0.0, 0.0]]);
        let l = source_dcl(&f, &[0], &c, &Margins::default()).unwrap();
        assert_abs_diff_eq!(l.value, 1.1, epsilon = 1e-12);
    }

    #[test]
    fn dcl_rejects_single_class_and_bad_labels() {
        let f = mat(&[&[0.0, 0.0]]);
        assert!(source_dcl(&f, &[0], &mat(&[&[1.0, 1.0]]), &Margins::default()).is_err());
        let c = mat(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert!(source_dcl(&f, &[2], &c, &Margins::default()).is_err());
        assert!(source_dcl(&f, &[0, 1], &c, &Margins::default()).is_err());
    }

    #[test]
    fn dcl_gradients_match_finite_differences() {
        let m = Margins::default();
        let mut checked = 0;
        let mut seed = 0;
        while checked < 10 {
            seed += 1;
            let mut rng = Rng::new(seed);
            let f = random(&mut rng, 6, 3, 0.6);
            let c = random(&mut rng, 4, 3, 0.6);
            let labels: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
            let w: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
            if !away_from_kinks(&f, &labels, &c, &m) {
                continue;
            }
            let l = target_dcl(&f, &labels, &w, &c, &m).unwrap();
            let nf = finite_diff_grad(|x| target_dcl(x, &labels, &w, &c, &m).unwrap().value, &f, 1e-6).unwrap();
            let nc = finite_diff_grad(|x| target_dcl(&f, &labels, &w, x, &m).unwrap().value, &c, 1e-6).unwrap();
            assert!(rel_err(&l.feature_grads, &nf) < 1e-4);
            assert!(rel_err(l.center_grads.as_ref().unwrap(), &nc) < 1e-4);
            checked += 1;
        }
    }

    #[test]
    fn target_dcl_reductions() {
        let mut rng = Rng::new(3);
        let f = random(&mut rng, 5, 2, 1.0);
        let c = random(&mut rng, 3, 2, 1.0);
        let labels = [0, 1, 2, 0, 1];
        let m = Margins::default();
        let zero = target_dcl(&f, &labels, &[0.0; 5], &c, &m).unwrap();
        assert_eq!(zero.value, 0.0);
        assert_eq!(zero.feature_grads, Matrix::zeros(5, 2));
        let ones = target_dcl(&f, &labels, &[1.0; 5], &c, &m).unwrap();
        assert_eq!(ones, source_dcl(&f, &labels, &c, &m).unwrap());
        assert!(target_dcl(&f, &labels, &[1.5, 0.0, 0.0, 0.0, 0.0], &c, &m).is_err());
    }

    #[test]
    fn pull_only_drops_the_push_term() {
        let c = mat(&[&[0.5f64.sqrt(), 0.0], &[0.0, 0.4f64.sqrt()]]);
        let f = mat(&[&[0.0, 0.0]]);
        let l = discriminative_center_loss(&f, &[0], None, &c, &Margins::default(), HingeTerms::PULL_ONLY).unwrap();
        assert_abs_diff_eq!(l.value, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn sample_weight_values() {
        let c = mat(&[&[0.0, 0.0], &[2.0, 0.0]]);
        assert_abs_diff_eq!(sample_weight(&[1.0, 0.0], &c, 0).unwrap(), 0.0, epsilon = 1e-15);
        // d_assigned = 1, d_neg = 3
        let c = mat(&[&[1.0, 0.0], &[0.0, 3.0f64.sqrt()]]);
        assert_abs_diff_eq!(sample_weight(&[0.0, 0.0], &c, 0).unwrap(), 2.0, epsilon = 1e-12);
        let w = sample_weight(&[1.0, 0.0], &c, 0).unwrap();
        assert!(w.is_finite() && w > 1e11);
    }

    #[test]
    fn weight_scaling_cases() {
        assert_eq!(scale_weights_per_class(&[0.0, 2.0], &[1, 1], 2).unwrap(), vec![0.0, 1.0]);
        assert_eq!(scale_weights_per_class(&[0.7], &[0], 3).unwrap(), vec![1.0]);
        assert_eq!(
            scale_weights_per_class(&[1.0, 3.0, 5.0, 4.0], &[0, 0, 1, 1], 2).unwrap(),
            vec![0.0, 1.0, 1.0, 0.0]
        );
        assert!(scale_weights_per_class(&[1.0], &[0, 1], 2).is_err());
    }

    #[test]
    fn alignment_values_and_gradients() {
        let a = mat(&[&[0.0, 0.0]]);
        let b = mat(&[&[3.0, 4.0]]);
        let l = center_alignment(&a, &b).unwrap();
        assert_eq!(l.value, 5.0);
        assert_eq!(center_alignment(&b, &a).unwrap().value, 5.0);
        assert_eq!(l.source_grads, mat(&[&[-0.6, -0.8]]));
        let same = center_alignment(&b, &b).unwrap();
        assert_eq!(same.value, 0.0);
        assert_eq!(same.source_grads, Matrix::zeros(1, 2));

        let mut rng = Rng::new(8);
        let s = random(&mut rng, 4, 3, 1.0);
        let t = random(&mut rng, 4, 3, 1.0);
        let l = center_alignment(&s, &t).unwrap();
        let ns = finite_diff_grad(|x| center_alignment(x, &t).unwrap().value, &s, 1e-6).unwrap();
        let nt = finite_diff_grad(|x| center_alignment(&s, x).unwrap().value, &t, 1e-6).unwrap();
        assert!(rel_err(&l.source_grads, &ns) < 1e-4);
        assert!(rel_err(&l.target_grads, &nt) < 1e-4);
    }

    #[test]
    fn class_mean_alignment_gradients() {
        let mut rng = Rng::new(12);
        let s = random(&mut rng, 8, 3, 1.0);
        let t = random(&mut rng, 7, 3, 1.0);
        let ys: Vec<usize> = (0..8).map(|i| i % 3).collect();
        // class 3 only in target, class 2 only in source: both skipped
        let yt = vec![0, 1, 3, 0, 1, 3, 0];
        let l = class_mean_alignment(&s, &ys, &t, &yt, 4).unwrap();
        let ns = finite_diff_grad(|x| class_mean_alignment(x, &ys, &t, &yt, 4).unwrap().value, &s, 1e-6).unwrap();
        let nt = finite_diff_grad(|x| class_mean_alignment(&s, &ys, x, &yt, 4).unwrap().value, &t, 1e-6).unwrap();
        assert!(rel_err(&l.source_feature_grads, &ns) < 1e-4);
        assert!(rel_err(&l.target_feature_grads, &nt) < 1e-4);
        assert!(l.source_feature_grads.row(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn discriminator_loss_values() {
        let l = discriminator_loss(&[0.5], &[0.5]);
        assert_abs_diff_eq!(l.value, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
        let perfect = discriminator_loss(&[1.0 - 1e-12], &[1e-12]);
        assert!(perfect.value < 1e-6);
        let saturated = discriminator_loss(&[0.0], &[1.0]);
        assert!(saturated.value.is_finite());
        assert_eq!(saturated.source_grads, vec![0.0]);

        let p = Matrix::from_vec(1, 4, vec![0.3, 0.8, 0.1, 0.6]).unwrap();
        let l = discriminator_loss(&p.as_slice()[..2], &p.as_slice()[2..]);
        let n = finite_diff_grad(
            |q| discriminator_loss(&q.as_slice()[..2], &q.as_slice()[2..]).value,
            &p,
            1e-7,
        )
        .unwrap();
        let a: Vec<f64> = l.source_grads.iter().chain(&l.target_grads).cloned().collect();
        assert!(rel_err(&Matrix::from_vec(1, 4, a).unwrap(), &n) < 1e-5);
    }

    #[test]
    fn reversal_flips_signs() {
        assert_eq!(generator_domain_grad(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2).scale(-1.0));
        let g = mat(&[&[1.0, -2.0]]);
        assert_eq!(generator_domain_grad(&g), mat(&[&[-1.0, 2.0]]));
    }

    #[test]
    fn schedule_spot_values() {
        let s = Schedule {
            target_multiplier: 5.0,
            pseudo_start: 200,
            total: 3000,
        };
        assert_eq!(lambda_schedule(0, &s), Lambdas { domain: 0.0, target: 0.0 });
        let half = lambda_schedule(1500, &s);
        // 2 / (1 + e^-5) - 1
        assert_abs_diff_eq!(half.domain, 0.986_614_298_151_430_3, epsilon = 1e-12);
        let end = lambda_schedule(3000, &s);
        // 5 * (2 / (1 + e^-10) - 1)
        assert_abs_diff_eq!(end.target, 4.999_546_021_312_976, epsilon = 1e-9);
        assert_eq!(lambda_schedule(199, &s).target, 0.0);
        assert!(lambda_schedule(200, &s).target > 0.0);
    }

    #[test]
    fn schedule_validation() {
        let bad = Schedule {
            target_multiplier: 5.0,
            pseudo_start: 10,
            total: 10,
        };
        assert!(bad.validate().is_err());
        assert!(Margins::new(1.3, 1.2).is_err());
        assert!(Margins::new(0.2, 1.2).is_ok());
    }

    #[test]
    fn softmax_values_and_gradient() {
        let l = softmax_xent(&Matrix::zeros(1, 4), &[2]).unwrap();
        assert_abs_diff_eq!(l.value, 4.0f64.ln(), epsilon = 1e-12);
        let sharp = softmax_xent(&mat(&[&[0.0, 50.0, 0.0]]), &[1]).unwrap();
        assert!(sharp.value < 1e-20);

        let mut rng = Rng::new(4);
        let z = random(&mut rng, 5, 3, 2.0);
        let y = [0, 2, 1, 1, 0];
        let l = softmax_xent(&z, &y).unwrap();
        let n = finite_diff_grad(|x| softmax_xent(x, &y).unwrap().value, &z, 1e-6).unwrap();
        assert!(rel_err(&l.feature_grads, &n) < 1e-4);
    }

    fn sample_parts() -> GeneratorParts {
        let mut rng = Rng::new(21);
        let fs = random(&mut rng, 4, 2, 1.0);
        let ft = random(&mut rng, 3, 2, 1.0);
        let c = random(&mut rng, 3, 2, 1.0);
        let m = Margins::default();
        GeneratorParts {
            source: source_dcl(&fs, &[0, 1, 2, 0], &c, &m).unwrap(),
            target: Some(target_dcl(&ft, &[1, 1, 2], &[1.0, 0.5, 0.2], &c, &m).unwrap()),
            alignment: None,
            domain: Some(DomainPart {
                disc_loss: 2.5,
                source_feature_grads: random(&mut rng, 4, 2, 1.0),
                target_feature_grads: random(&mut rng, 3, 2, 1.0),
            }),
        }
    }

    const SHARED: LossTerms = LossTerms {
        target: true,
        alignment: false,
        domain: true,
    };

    #[test]
    fn combined_reduces_to_source_when_weights_vanish() {
        let parts = sample_parts();
        let w = GeneratorWeights {
            target: 0.0,
            alignment: 0.0,
            domain: 0.0,
        };
        let out = combined_generator_loss(&parts, &w, &SHARED, 3).unwrap();
        assert_eq!(out.value, parts.source.value);
        assert_eq!(out.source_feature_grads, parts.source.feature_grads);
    }

    #[test]
    fn combined_shared_centers_formula() {
        let parts = sample_parts();
        let w = GeneratorWeights {
            target: 1.7,
            alignment: 0.0,
            domain: 0.4,
        };
        let out = combined_generator_loss(&parts, &w, &SHARED, 3).unwrap();
        let t = parts.target.as_ref().unwrap();
        let d = parts.domain.as_ref().unwrap();
        assert_abs_diff_eq!(
            out.value,
            parts.source.value + 1.7 * t.value - 0.4 * d.disc_loss,
            epsilon = 1e-12
        );
        let mut expect = t.feature_grads.scale(1.7);
        expect.add_scaled(&d.target_feature_grads, -0.4).unwrap();
        assert!(rel_err(&out.target_feature_grads, &expect) < 1e-12);
    }

    #[test]
    fn combined_is_linear_in_target_weight() {
        let parts = sample_parts();
        let base = GeneratorWeights {
            target: 0.0,
            alignment: 0.0,
            domain: 0.3,
        };
        let one = combined_generator_loss(&parts, &GeneratorWeights { target: 1.0, ..base }, &SHARED, 3).unwrap();
        let two = combined_generator_loss(&parts, &GeneratorWeights { target: 2.0, ..base }, &SHARED, 3).unwrap();
        let zero = combined_generator_loss(&parts, &base, &SHARED, 3).unwrap();
        assert_abs_diff_eq!(two.value - zero.value, 2.0 * (one.value - zero.value), epsilon = 1e-9);
        let d1 = one.target_feature_grads.sub(&zero.target_feature_grads).unwrap();
        let d2 = two.target_feature_grads.sub(&zero.target_feature_grads).unwrap();
        assert!(rel_err(&d2, &d1.scale(2.0)) < 1e-9);
    }

    #[test]
    fn combined_requires_active_parts() {
        let mut parts = sample_parts();
        parts.domain = None;
        let w = GeneratorWeights {
            target: 1.0,
            alignment: 0.0,
            domain: 1.0,
        };
        assert!(matches!(
            combined_generator_loss(&parts, &w, &SHARED, 3),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn dcl_zero_iff_margins_satisfied(
            d_pos in 0.0f64..2.0,
            d_neg in 0.0f64..3.0,
        ) {
            // a feature at the origin with centers placed at the given squared distances
            let c = Matrix::from_vec(2, 2, vec![d_pos.sqrt(), 0.0, 0.0, d_neg.sqrt()]).unwrap();
            let f = Matrix::zeros(1, 2);
            let m = Margins::default();
            let l = source_dcl(&f, &[0], &c, &m).unwrap();
            prop_assert!(l.value >= 0.0);
            let satisfied = squared_euclidean(&[0.0, 0.0], c.row(0)) <= m.alpha
                && squared_euclidean(&[0.0, 0.0], c.row(1)) >= m.beta;
            prop_assert_eq!(l.value == 0.0, satisfied);
        }

        #[test]
        fn scaled_weights_in_unit_interval_and_shift_invariant(
            raw in proptest::collection::vec(-5.0f64..5.0, 1..30),
            shift in -3.0f64..3.0,
            scale in 0.1f64..4.0,
        ) {
            let labels: Vec<usize> = (0..raw.len()).map(|i| (i * 7) % 3).collect();
            let w = scale_weights_per_class(&raw, &labels, 3).unwrap();
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
            let moved: Vec<f64> = raw.iter().map(|r| scale * r + shift).collect();
            let w2 = scale_weights_per_class(&moved, &labels, 3).unwrap();
            for (a, b) in w.iter().zip(&w2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn nearest_assignment_gives_nonnegative_weight(
            pts in proptest::collection::vec(-3.0f64..3.0, 8),
            x in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let c = Matrix::from_vec(4, 2, pts).unwrap();
            let (j, _) = nearest_center(&x, &c);
            prop_assert!(sample_weight(&x, &c, j).unwrap() >= 0.0);
            for k in 0..4 {
                prop_assert!(sample_weight(&x, &c, k).unwrap() >= -1.0);
            }
        }

        #[test]
        fn schedule_is_monotone(a in 0usize..3000, b in 0usize..3000) {
            let s = Schedule { target_multiplier: 5.0, pseudo_start: 200, total: 3000 };
            let (lo, hi) = (a.min(b), a.max(b));
            let (l1, l2) = (lambda_schedule(lo, &s), lambda_schedule(hi, &s));
            prop_assert!(l1.domain <= l2.domain);
            prop_assert!(l1.target <= l2.target);
        }
    }
}
