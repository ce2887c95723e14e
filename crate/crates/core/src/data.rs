//! Synthetic domain-shift datasets, CSV ingestion and mini-batch sampling.
//!
//! Target labels travel with the dataset so evaluation can score
//! predictions, but the training entry point only ever receives an
//! [`UnlabeledView`], which has no way to reach them.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    features: Matrix,
    labels: Option<Vec<usize>>,
    domain: DomainTag,
    class_count: usize,
}

/// Features of a dataset without its labels.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    features: &'a Matrix,
    class_count: usize,
}

impl<'a> UnlabeledView<'a> {
    pub fn features(&self) -> &'a Matrix {
        self.features
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }
}

impl DomainDataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        domain: DomainTag,
        class_count: usize,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::input("a dataset needs at least one sample"));
        }
        if class_count < 2 {
            return Err(Error::input(format!("need at least 2 classes, got {class_count}")));
        }
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(Error::input(format!(
                    "{} labels for {} samples",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some((i, y)) = l.iter().enumerate().find(|(_, &y)| y >= class_count) {
                return Err(Error::input(format!(
                    "label {y} at row {} is not below the class count {class_count}",
                    i + 1
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            domain,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
            class_count: self.class_count,
        }
    }

    pub fn with_domain(mut self, domain: DomainTag) -> Self {
        self.domain = domain;
        self
    }

    /// Same features and domain, different labels. Used to check that
    /// training never looks at target labels.
    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        self.labels = labels;
        Self::new(self.features, self.labels, self.domain, self.class_count)
    }
}

/// Gaussian blobs: class means on a circle of radius `4 * spread` in the
/// first two coordinates, isotropic noise with standard deviation `spread`
/// on every coordinate. Samples are grouped by class.
pub fn gen_blobs(
    class_count: usize,
    n_per_class: usize,
    input_dim: usize,
    spread: f64,
    rng: &mut Rng,
) -> Result<DomainDataset> {
    if class_count < 2 || input_dim < 2 || n_per_class == 0 {
        return Err(Error::config(format!(
            "blobs need >= 2 classes, >= 2 dims, >= 1 sample per class \
             (got {class_count}, {input_dim}, {n_per_class})"
        )));
    }
    if !(spread >= 0.0) {
        return Err(Error::config(format!("blob spread must be >= 0, got {spread}")));
    }
    let radius = 4.0 * spread;
    let mut data = Vec::with_capacity(class_count * n_per_class * input_dim);
    let mut labels = Vec::with_capacity(class_count * n_per_class);
    for j in 0..class_count {
        let angle = 2.0 * PI * j as f64 / class_count as f64;
        let mean = [radius * angle.cos(), radius * angle.sin()];
        for _ in 0..n_per_class {
            for m in 0..input_dim {
                let mu = if m < 2 { mean[m] } else { 0.0 };
                data.push(rng.normal(mu, spread));
            }
            labels.push(j);
        }
    }
    DomainDataset::new(
        Matrix::from_vec(labels.len(), input_dim, data)?,
        Some(labels),
        DomainTag::Source,
        class_count,
    )
}

/// Two interleaved unit half-circles with Gaussian noise, 2 classes in 2-D.
pub fn gen_moons(n_per_class: usize, noise_sigma: f64, rng: &mut Rng) -> Result<DomainDataset> {
    if n_per_class == 0 {
        return Err(Error::config("moons need at least one sample per class"));
    }
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    let step = if n_per_class > 1 {
        PI / (n_per_class - 1) as f64
    } else {
        0.0
    };
    for class in 0..2 {
        for i in 0..n_per_class {
            let t = step * i as f64;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            data.push(x + rng.normal(0.0, noise_sigma));
            data.push(y + rng.normal(0.0, noise_sigma));
            labels.push(class);
        }
    }
    DomainDataset::new(
        Matrix::from_vec(2 * n_per_class, 2, data)?,
        Some(labels),
        DomainTag::Source,
        2,
    )
}

/// Covariate shift applied to create a target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Radians, acting on the first two coordinates.
    pub rotation: f64,
    /// Added after rotation and scaling; missing trailing entries are zero.
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl ShiftSpec {
    /// 50° rotation, translation (2, -1), scale 1.2.
    pub fn desk_default() -> Self {
        Self {
            rotation: 50f64.to_radians(),
            translation: vec![2.0, -1.0],
            scale: 1.2,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::config(format!("shift scale must be > 0, got {}", self.scale)));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("shift noise must be >= 0"));
        }
        Ok(())
    }
}

/// `x ↦ scale · R(rotation) · x + translation + N(0, noise²)`, labels kept,
/// tagged as target.
pub fn apply_shift(ds: &DomainDataset, spec: &ShiftSpec, rng: &mut Rng) -> Result<DomainDataset> {
    spec.validate()?;
    let d = ds.input_dim();
    if d < 2 {
        return Err(Error::config("a shift needs at least 2 input dimensions"));
    }
    if spec.translation.len() > d {
        return Err(Error::config(format!(
            "translation has {} entries for {d} dimensions",
            spec.translation.len()
        )));
    }
    let (sin, cos) = spec.rotation.sin_cos();
    let mut out = ds.features.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let (x, y) = (row[0], row[1]);
        row[0] = cos * x - sin * y;
        row[1] = sin * x + cos * y;
        for (m, v) in row.iter_mut().enumerate() {
            *v = spec.scale * *v + spec.translation.get(m).copied().unwrap_or(0.0);
            if spec.noise_sigma > 0.0 {
                *v += rng.normal(0.0, spec.noise_sigma);
            }
        }
    }
    DomainDataset::new(out, ds.labels.clone(), DomainTag::Target, ds.class_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CsvOptions {
    pub has_labels: bool,
    pub header: bool,
    /// Fixes the class count instead of inferring `max label + 1`.
    pub class_count: Option<usize>,
}

/// Reads comma-separated numeric rows; with labels, the last column is an
/// integer class index.
pub fn load_csv(path: &Path, opts: CsvOptions, domain: DomainTag) -> Result<DomainDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    let skip = usize::from(opts.header);
    for (line_no, line) in text.lines().enumerate().skip(skip) {
        let row_no = line_no + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if *width.get_or_insert(cells.len()) != cells.len() {
            return Err(Error::input(format!(
                "{}: row {row_no} has {} cells, expected {}",
                path.display(),
                cells.len(),
                width.unwrap_or(0)
            )));
        }
        let n_feat = if opts.has_labels { cells.len() - 1 } else { cells.len() };
        if n_feat == 0 {
            return Err(Error::input(format!("{}: row {row_no} has no feature columns", path.display())));
        }
        let feats = cells[..n_feat]
            .iter()
            .map(|c| {
                c.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::input(format!("{}: row {row_no}: '{c}' is not a finite number", path.display()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if opts.has_labels {
            let cell = cells[n_feat];
            let y = cell.parse::<usize>().map_err(|_| {
                Error::input(format!("{}: row {row_no}: label '{cell}' is not a class index", path.display()))
            })?;
            if let Some(c) = opts.class_count {
                if y >= c {
                    return Err(Error::input(format!(
                        "{}: row {row_no}: label {y} is not below the class count {c}",
                        path.display()
                    )));
                }
            }
            labels.push(y);
        }
        rows.push(feats);
    }
    if rows.is_empty() {
        return Err(Error::input(format!("{}: no data rows", path.display())));
    }
    let class_count = match (opts.class_count, labels.iter().max()) {
        (Some(c), _) => c,
        (None, Some(&m)) => m + 1,
        (None, None) => {
            return Err(Error::input(format!(
                "{}: class count cannot be inferred without labels",
                path.display()
            )))
        }
    };
    DomainDataset::new(
        Matrix::from_rows(&rows)?,
        opts.has_labels.then_some(labels),
        domain,
        class_count,
    )
}

/// Writes the dataset in the format [`load_csv`] reads, labels last when present.
pub fn write_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.len() {
        let cells: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        if let Some(l) = &ds.labels {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Epoch-based sampling without replacement; each epoch is a fresh shuffle.
/// A batch that crosses an epoch boundary finishes the old permutation and
/// continues in the new one.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(len: usize, rng: Rng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn next_indices(&mut self, batch_size: usize) -> Result<Vec<usize>> {
        if batch_size == 0 || batch_size > self.order.len() {
            return Err(Error::config(format!(
                "batch size {batch_size} must be in 1..={}",
                self.order.len()
            )));
        }
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            let take = (batch_size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        Ok(out)
    }
}

/// One mini-batch drawn from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

pub fn next_batch(ds: &DomainDataset, sampler: &mut BatchSampler, batch_size: usize) -> Result<Batch> {
    let indices = sampler.next_indices(batch_size)?;
    Ok(Batch {
        features: ds.features.select_rows(&indices),
        labels: ds.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        indices,
    })
}

/// Like [`next_batch`] but from an unlabeled view, so no labels can leak.
pub fn next_unlabeled_batch(view: &UnlabeledView<'_>, sampler: &mut BatchSampler, batch_size: usize) -> Result<Batch> {
    let indices = sampler.next_indices(batch_size)?;
    Ok(Batch {
        features: view.features.select_rows(&indices),
        labels: None,
        indices,
    })
}

/// Parameters of the synthetic blobs task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsSpec {
    pub class_count: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            class_count: 5,
            n_per_class: 200,
            input_dim: 10,
            spread: 1.0,
        }
    }
}

/// Stream ids derived from a run seed.
pub mod streams {
    pub const SOURCE_DATA: u64 = 1;
    pub const TARGET_DATA: u64 = 2;
    pub const SHIFT_NOISE: u64 = 3;
    pub const INIT: u64 = 10;
    pub const SOURCE_BATCHES: u64 = 11;
    pub const TARGET_BATCHES: u64 = 12;
    pub const PSEUDO_INIT: u64 = 13;
    pub const A_DISTANCE: u64 = 20;
}

/// Source blobs plus a shifted, independently sampled target set of the same size.
pub fn blobs_task(spec: &BlobsSpec, shift: &ShiftSpec, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let root = Rng::new(seed);
    let source = gen_blobs(
        spec.class_count,
        spec.n_per_class,
        spec.input_dim,
        spec.spread,
        &mut root.derive(streams::SOURCE_DATA),
    )?;
    let raw_target = gen_blobs(
        spec.class_count,
        spec.n_per_class,
        spec.input_dim,
        spec.spread,
        &mut root.derive(streams::TARGET_DATA),
    )?;
    let target = apply_shift(&raw_target, shift, &mut root.derive(streams::SHIFT_NOISE))?;
    Ok((source, target))
}

/// Two-moons source plus a shifted target.
pub fn moons_task(n_per_class: usize, noise: f64, shift: &ShiftSpec, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    let root = Rng::new(seed);
    let source = gen_moons(n_per_class, noise, &mut root.derive(streams::SOURCE_DATA))?;
    let raw_target = gen_moons(n_per_class, noise, &mut root.derive(streams::TARGET_DATA))?;
    let target = apply_shift(&raw_target, shift, &mut root.derive(streams::SHIFT_NOISE))?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn counts(labels: &[usize], c: usize) -> Vec<usize> {
        let mut n = vec![0; c];
        for &y in labels {
            n[y] += 1;
        }
        n
    }

    #[test]
    fn blobs_balanced_and_seeded() {
        let a = gen_blobs(3, 50, 4, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(a.len(), 150);
        assert_eq!(counts(a.labels().unwrap(), 3), vec![50, 50, 50]);
        assert_eq!(a, gen_blobs(3, 50, 4, 1.0, &mut Rng::new(1)).unwrap());
        assert!(a.features().is_finite());
    }

    #[test]
    fn blobs_collapse_without_spread() {
        let a = gen_blobs(4, 5, 3, 0.0, &mut Rng::new(1)).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.features().row(i), &[0.0, 0.0, 0.0]);
        }
        let b = gen_blobs(4, 5, 3, 1e-12, &mut Rng::new(1)).unwrap();
        let y = b.labels().unwrap();
        for i in 0..b.len() {
            let angle = 2.0 * PI * y[i] as f64 / 4.0;
            assert_abs_diff_eq!(b.features().get(i, 0), 4e-12 * angle.cos(), epsilon = 1e-10);
        }
    }

    #[test]
    fn moons_on_unit_circles_without_noise() {
        let m = gen_moons(20, 0.0, &mut Rng::new(0)).unwrap();
        assert_eq!(counts(m.labels().unwrap(), 2), vec![20, 20]);
        for i in 0..m.len() {
            let (x, y) = (m.features().get(i, 0), m.features().get(i, 1));
            let r = if m.labels().unwrap()[i] == 0 {
                (x * x + y * y).sqrt()
            } else {
                ((x - 1.0).powi(2) + (y - 0.5).powi(2)).sqrt()
            };
            assert_abs_diff_eq!(r, 1.0, epsilon = 1e-12);
        }
        let a = gen_moons(10, 0.1, &mut Rng::new(4)).unwrap();
        assert_eq!(a, gen_moons(10, 0.1, &mut Rng::new(4)).unwrap());
    }

    #[test]
    fn identity_shift_only_retags() {
        let ds = gen_blobs(3, 10, 3, 1.0, &mut Rng::new(2)).unwrap();
        let t = apply_shift(&ds, &ShiftSpec::default(), &mut Rng::new(0)).unwrap();
        assert_eq!(t.features(), ds.features());
        assert_eq!(t.labels(), ds.labels());
        assert_eq!(t.domain(), DomainTag::Target);
    }

    #[test]
    fn half_turn_is_an_involution() {
        let ds = gen_blobs(3, 10, 3, 1.0, &mut Rng::new(2)).unwrap();
        let spec = ShiftSpec {
            rotation: PI,
            ..ShiftSpec::default()
        };
        let twice = apply_shift(&apply_shift(&ds, &spec, &mut Rng::new(0)).unwrap(), &spec, &mut Rng::new(0)).unwrap();
        for (a, b) in twice.features().as_slice().iter().zip(ds.features().as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn translation_moves_first_coordinate() {
        let ds = gen_blobs(3, 10, 3, 1.0, &mut Rng::new(2)).unwrap();
        let spec = ShiftSpec {
            translation: vec![10.0, 0.0],
            ..ShiftSpec::default()
        };
        let t = apply_shift(&ds, &spec, &mut Rng::new(0)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(t.features().get(i, 0), ds.features().get(i, 0) + 10.0);
        }
        let bad = ShiftSpec {
            scale: 0.0,
            ..ShiftSpec::default()
        };
        assert!(apply_shift(&ds, &bad, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "1.5,2,0\n-3,4e-1,2\n0,0,1\n").unwrap();
        let opts = CsvOptions {
            has_labels: true,
            ..CsvOptions::default()
        };
        let ds = load_csv(&path, opts, DomainTag::Source).unwrap();
        assert_eq!(ds.features().shape(), (3, 2));
        assert_eq!(ds.labels().unwrap(), &[0, 2, 1]);
        assert_eq!(ds.class_count(), 3);

        let again = dir.path().join("e.csv");
        write_csv(&ds, &again).unwrap();
        assert_eq!(load_csv(&again, opts, DomainTag::Source).unwrap(), ds);

        let missing = load_csv(&dir.path().join("nope.csv"), opts, DomainTag::Source).unwrap_err();
        assert!(missing.to_string().contains("nope.csv"));

        fs::write(&path, "1,2,0\n1,0\n").unwrap();
        assert!(load_csv(&path, opts, DomainTag::Source).unwrap_err().to_string().contains("row 2"));
        fs::write(&path, "1,x,0\n").unwrap();
        assert!(load_csv(&path, opts, DomainTag::Source).unwrap_err().to_string().contains("row 1"));
        fs::write(&path, "1,2,5\n").unwrap();
        let fixed = CsvOptions {
            class_count: Some(3),
            ..opts
        };
        assert!(matches!(load_csv(&path, fixed, DomainTag::Source), Err(Error::Input(_))));

        fs::write(&path, "a,b,label\n1,2,1\n").unwrap();
        let header = CsvOptions { header: true, ..opts };
        assert_eq!(load_csv(&path, header, DomainTag::Target).unwrap().len(), 1);
    }

    #[test]
    fn full_batch_is_a_permutation() {
        let mut s = BatchSampler::new(10, Rng::new(3));
        let mut idx = s.next_indices(10).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());
        assert!(s.next_indices(11).is_err());
        assert!(s.next_indices(0).is_err());
    }

    #[test]
    fn two_epochs_cover_each_index_twice() {
        let mut s = BatchSampler::new(12, Rng::new(5));
        let mut seen = [0; 12];
        for _ in 0..5 {
            for i in s.next_indices(5).unwrap().into_iter().take(5) {
                seen[i] += 1;
            }
        }
        // 25 draws: two full epochs plus one index of a third
        assert_eq!(seen.iter().sum::<usize>(), 25);
        assert!(seen.iter().all(|&c| c == 2 || c == 3));

        let mut s = BatchSampler::new(12, Rng::new(5));
        let mut seen = [0; 12];
        for _ in 0..6 {
            for i in s.next_indices(4).unwrap() {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 2));
    }

    #[test]
    fn sampler_is_seeded() {
        let draw = |seed| {
            let mut s = BatchSampler::new(30, Rng::new(seed));
            (0..5).map(|_| s.next_indices(7).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(1), draw(1));
        assert_ne!(draw(1), draw(2));
    }

    #[test]
    fn unlabeled_batches_carry_no_labels() {
        let ds = gen_blobs(2, 5, 2, 1.0, &mut Rng::new(0)).unwrap();
        let mut s = BatchSampler::new(ds.len(), Rng::new(1));
        let b = next_unlabeled_batch(&ds.unlabeled(), &mut s, 4).unwrap();
        assert!(b.labels.is_none());
        assert_eq!(b.features.rows(), 4);
        let mut s = BatchSampler::new(ds.len(), Rng::new(1));
        let b = next_batch(&ds, &mut s, 4).unwrap();
        assert_eq!(b.labels.unwrap().len(), 4);
    }

    #[test]
    fn default_task_shape() {
        let (s, t) = blobs_task(&BlobsSpec::default(), &ShiftSpec::desk_default(), 0).unwrap();
        assert_eq!(s.features().shape(), (1000, 10));
        assert_eq!(t.features().shape(), (1000, 10));
        assert_eq!(s.labels().map(|l| counts(l, 5)), Some(vec![200; 5]));
        assert_eq!(t.domain(), DomainTag::Target);
        assert!(t.features().is_finite());
    }
}
