//! Accuracy, pseudo-label quality and proxy A-distance.

use serde::{Deserialize, Serialize};

use crate::data::{streams, DomainDataset};
use crate::error::{Error, Result};
use crate::ndcore::{sigmoid, Matrix, Rng};
use crate::network::{adam_step, AdamState};
use crate::pseudo::PseudoState;
use crate::trainer::{LogEval, Model, Observer, RefreshRecord};

/// Fraction of positions where `pred` and `truth` agree.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::input("accuracy of an empty prediction"));
    }
    if pred.len() != truth.len() {
        return Err(Error::input(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

pub fn pseudo_accuracy(pseudo: &PseudoState, truth: &[usize]) -> Result<f64> {
    accuracy(&pseudo.labels, truth)
}

pub const PROBE_STEPS: usize = 500;
pub const PROBE_LR: f64 = 0.05;
pub const MIN_PER_DOMAIN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ADistanceReport {
    /// Held-out error of the domain probe, folded into `[0, 0.5]`.
    pub epsilon: f64,
    pub dist_a: f64,
    pub split_seed: u64,
}

/// `2 (1 - 2 ε)`.
pub fn dist_a(epsilon: f64) -> f64 {
    2.0 * (1.0 - 2.0 * epsilon)
}

/// Trains a logistic source-vs-target probe on a stratified half of each
/// domain and measures its error on the other half.
pub fn proxy_a_distance(source: &Matrix, target: &Matrix, rng: &mut Rng) -> Result<ADistanceReport> {
    if source.cols() != target.cols() {
        return Err(Error::input("source and target features differ in width"));
    }
    if source.rows() < MIN_PER_DOMAIN || target.rows() < MIN_PER_DOMAIN {
        return Err(Error::input(format!(
            "proxy A-distance needs at least {MIN_PER_DOMAIN} samples per domain, got {} and {}",
            source.rows(),
            target.rows()
        )));
    }
    let split_seed = rng.seed();
    let halves = |n: usize, rng: &mut Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let test = idx.split_off(n / 2);
        (idx, test)
    };
    let (s_train, s_test) = halves(source.rows(), rng);
    let (t_train, t_test) = halves(target.rows(), rng);
    let x_train = source.select_rows(&s_train).vstack(&target.select_rows(&t_train))?;
    let y_train: Vec<f64> = std::iter::repeat_n(1.0, s_train.len())
        .chain(std::iter::repeat_n(0.0, t_train.len()))
        .collect();
    let x_test = source.select_rows(&s_test).vstack(&target.select_rows(&t_test))?;
    let y_test: Vec<f64> = std::iter::repeat_n(1.0, s_test.len())
        .chain(std::iter::repeat_n(0.0, t_test.len()))
        .collect();

    let (mu, sd) = column_stats(&x_train);
    let x_train = standardize(&x_train, &mu, &sd);
    let x_test = standardize(&x_test, &mu, &sd);

    let d = x_train.cols();
    // weights followed by the bias
    let mut w = Matrix::zeros(1, d + 1);
    let mut state = AdamState::new(&w);
    let n = x_train.rows() as f64;
    for _ in 0..PROBE_STEPS {
        let mut g = Matrix::zeros(1, d + 1);
        for i in 0..x_train.rows() {
            let x = x_train.row(i);
            let p = sigmoid(logit(w.as_slice(), x));
            let r = (p - y_train[i]) / n;
            let gs = g.as_mut_slice();
            for (gj, xj) in gs.iter_mut().zip(x) {
                *gj += r * xj;
            }
            gs[d] += r;
        }
        adam_step(&mut w, &g, &mut state, PROBE_LR)?;
    }
    let errors = (0..x_test.rows())
        .filter(|&i| {
            let p = sigmoid(logit(w.as_slice(), x_test.row(i)));
            (p >= 0.5) != (y_test[i] > 0.5)
        })
        .count();
    let raw = errors as f64 / x_test.rows() as f64;
    let epsilon = raw.min(1.0 - raw);
    Ok(ADistanceReport {
        epsilon,
        dist_a: dist_a(epsilon),
        split_seed,
    })
}

fn logit(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mu) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    let sd = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mu, sd)
}

fn standardize(x: &Matrix, mu: &[f64], sd: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        for ((v, m), s) in out.row_mut(i).iter_mut().zip(mu).zip(sd) {
            *v = (*v - m) / s;
        }
    }
    out
}

/// Holds the hidden target labels and reports accuracy to the trainer's
/// log. It never hands anything back that training could consume.
#[derive(Debug, Clone)]
pub struct EvalProbe<'a> {
    target: &'a DomainDataset,
}

impl<'a> EvalProbe<'a> {
    pub fn new(target: &'a DomainDataset) -> Self {
        Self { target }
    }
}

impl Observer for EvalProbe<'_> {
    fn on_log(&mut self, _iteration: usize, model: &Model, pseudo: &PseudoState) -> Result<LogEval> {
        let Some(truth) = self.target.labels() else {
            return Ok(LogEval::default());
        };
        Ok(LogEval {
            target_accuracy: Some(accuracy(&model.predict(self.target.features())?, truth)?),
            pseudo_accuracy: Some(pseudo_accuracy(pseudo, truth)?),
        })
    }

    fn on_refresh(&mut self, _iteration: usize, pseudo: &PseudoState) -> Result<Option<f64>> {
        match self.target.labels() {
            Some(truth) => Ok(Some(pseudo_accuracy(pseudo, truth)?)),
            None => Ok(None),
        }
    }
}

/// End-of-run numbers for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub target_accuracy: Option<f64>,
    /// Nearest-center (or head) accuracy on the labeled source set.
    pub source_accuracy: f64,
    pub a_distance: ADistanceReport,
}

pub fn final_eval(model: &Model, source: &DomainDataset, target: &DomainDataset, seed: u64) -> Result<FinalEval> {
    let src_truth = source
        .labels()
        .ok_or_else(|| Error::input("the source dataset must be labeled"))?;
    let src_pred = match model.head {
        Some(_) => model.predict(source.features())?,
        None => crate::trainer::predict(&model.generator, model.centers.source(), source.features())?,
    };
    let target_accuracy = match target.labels() {
        Some(t) => Some(accuracy(&model.predict(target.features())?, t)?),
        None => None,
    };
    let a_distance = proxy_a_distance(
        &model.embed(source.features())?,
        &model.embed(target.features())?,
        &mut Rng::new(seed).derive(streams::A_DISTANCE),
    )?;
    Ok(FinalEval {
        target_accuracy,
        source_accuracy: accuracy(&src_pred, src_truth)?,
        a_distance,
    })
}

/// Pseudo-label accuracy at the first refresh at or after `pseudo_start`
/// and at the last refresh, when both were measured.
pub fn pseudo_trend(refreshes: &[RefreshRecord], pseudo_start: usize) -> Option<(f64, f64)> {
    let first = refreshes.iter().find(|r| r.iteration >= pseudo_start)?.pseudo_accuracy?;
    let last = refreshes.last()?.pseudo_accuracy?;
    Some((first, last))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn gaussian(rng: &mut Rng, n: usize, d: usize, shift: f64) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.normal(shift, 1.0)).collect()).unwrap()
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 0, 0]).unwrap(), 0.5);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Input(_))));
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn dist_a_values() {
        assert_abs_diff_eq!(dist_a(0.05), 1.8, epsilon = 1e-15);
        assert_eq!(dist_a(0.0), 2.0);
        assert_eq!(dist_a(0.5), 0.0);
    }

    #[test]
    fn identical_samples_are_indistinguishable() {
        let mut rng = Rng::new(1);
        let x = gaussian(&mut rng, 100, 3, 0.0);
        let r = proxy_a_distance(&x, &x, &mut Rng::new(2)).unwrap();
        assert!(r.dist_a < 0.5, "{r:?}");
        assert_abs_diff_eq!(r.dist_a, dist_a(r.epsilon), epsilon = 1e-15);
        assert!((0.0..=0.5).contains(&r.epsilon));
    }

    #[test]
    fn far_apart_domains_are_separable() {
        let mut rng = Rng::new(3);
        let a = gaussian(&mut rng, 100, 3, 0.0);
        let b = gaussian(&mut rng, 100, 3, 20.0);
        let r = proxy_a_distance(&a, &b, &mut Rng::new(4)).unwrap();
        assert_eq!(r.dist_a, 2.0);
        assert_eq!(r.split_seed, 4);
    }

    #[test]
    fn too_few_samples() {
        let mut rng = Rng::new(0);
        let a = gaussian(&mut rng, 19, 2, 0.0);
        let b = gaussian(&mut rng, 50, 2, 0.0);
        assert!(matches!(proxy_a_distance(&a, &b, &mut Rng::new(0)), Err(Error::Input(_))));
    }

    #[test]
    fn trend_picks_first_after_start() {
        let r = |iteration, acc| RefreshRecord {
            iteration,
            mean_weight: 0.5,
            pseudo_accuracy: Some(acc),
        };
        let recs = vec![r(0, 0.1), r(195, 0.2), r(210, 0.3), r(225, 0.4), r(2985, 0.9)];
        assert_eq!(pseudo_trend(&recs, 200), Some((0.3, 0.9)));
        assert_eq!(pseudo_trend(&recs[..2], 200), None);
    }
}
