//! The alternating training loop.
//!
//! Each iteration: optional pseudo-label refresh, one Adam step on the
//! discriminator, then one Adam step on the generator, the centers and (for
//! softmax modes) the head. The loop only sees target features through an
//! [`UnlabeledView`]; anything that needs the truth lives behind an
//! [`Observer`].

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centers::{init_centers, nearest_center, CenterSet};
use crate::data::{next_batch, next_unlabeled_batch, streams, BatchSampler, DomainDataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::losses::{
    center_alignment, combined_generator_loss, discriminator_loss, lambda_schedule, DomainPart, Lambdas, Margins,
    Schedule,
};
use crate::methods::{method_by_name, CenterLayout, Classifier, Method, StepInput};
use crate::ndcore::{Matrix, Rng};
use crate::network::{accumulate, adam_step, init_mlp, AdamState, Mlp, OutputActivation, ParamTensors};
use crate::pseudo::{self, should_refresh, PseudoState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: String,
    pub iterations: usize,
    pub refresh_period: usize,
    pub margins: Margins,
    pub target_multiplier: f64,
    pub pseudo_start: usize,
    pub lr_net: f64,
    pub lr_centers: f64,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Alignment weight; only meaningful for modes with an alignment term.
    pub lambda_c: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: "sda_tcl".into(),
            iterations: 3000,
            refresh_period: 15,
            margins: Margins::default(),
            target_multiplier: 5.0,
            pseudo_start: 200,
            lr_net: 1e-4,
            lr_centers: 1e-2,
            batch_size: 32,
            embedding_dim: 32,
            hidden_dim: 64,
            lambda_c: None,
            seed: 0,
            log_every: 10,
        }
    }
}

pub const DEFAULT_LAMBDA_C: f64 = 1.0;

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            target_multiplier: self.target_multiplier,
            pseudo_start: self.pseudo_start,
            total: self.iterations,
        }
    }

    pub fn method(&self) -> Result<Arc<dyn Method>> {
        Ok(Arc::from(method_by_name(&self.mode)?))
    }

    /// Alignment weight actually used by the mode.
    pub fn effective_lambda_c(&self) -> f64 {
        self.lambda_c.unwrap_or(DEFAULT_LAMBDA_C)
    }

    pub fn validate(&self) -> Result<()> {
        let method = self.method()?;
        self.margins.validate()?;
        self.schedule().validate()?;
        let positive = [
            ("iterations", self.iterations),
            ("refresh_period", self.refresh_period),
            ("batch_size", self.batch_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_dim", self.hidden_dim),
            ("log_every", self.log_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        for (name, v) in [("lr_net", self.lr_net), ("lr_centers", self.lr_centers)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(c) = self.lambda_c {
            if !method.terms().alignment {
                return Err(Error::config(format!(
                    "lambda_c is set but mode '{}' has no center-alignment term",
                    self.mode
                )));
            }
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config(format!("lambda_c must be >= 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// Everything that is trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub centers: CenterSet,
    pub head: Option<Mlp>,
    pub classifier: Classifier,
}

impl Model {
    pub fn init(config: &TrainConfig, method: &dyn Method, input_dim: usize, class_count: usize) -> Result<Self> {
        let mut rng = Rng::new(config.seed).derive(streams::INIT);
        let (h, e) = (config.hidden_dim, config.embedding_dim);
        let generator = init_mlp(&[input_dim, h, h, e], OutputActivation::Identity, &mut rng)?;
        let discriminator = init_mlp(&[e, h, h, 1], OutputActivation::Sigmoid, &mut rng)?;
        let shared = init_centers(class_count, e, &mut rng)?;
        let centers = match method.center_layout() {
            CenterLayout::Shared => shared,
            CenterLayout::PerDomain => CenterSet::per_domain(shared.source().clone())?,
        };
        let head = match method.classifier() {
            Classifier::SoftmaxHead => Some(init_mlp(&[e, class_count], OutputActivation::Identity, &mut rng)?),
            Classifier::Centers => None,
        };
        Ok(Self {
            generator,
            discriminator,
            centers,
            head,
            classifier: method.classifier(),
        })
    }

    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.generator.infer(x)
    }

    /// Target-domain class predictions.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        match (&self.classifier, &self.head) {
            (Classifier::SoftmaxHead, Some(head)) => Ok(argmax_rows(&head.infer(&self.embed(x)?)?)),
            (Classifier::SoftmaxHead, None) => Err(Error::config("softmax classifier without a head")),
            (Classifier::Centers, _) => predict(&self.generator, self.centers.target(), x),
        }
    }

    /// Pseudo-state for the whole target set under the current parameters.
    pub fn pseudo_labels(&self, target: &Matrix, iteration: usize) -> Result<PseudoState> {
        match (&self.classifier, &self.head) {
            (Classifier::SoftmaxHead, Some(head)) => {
                pseudo::refresh_from_logits(&head.infer(&self.embed(target)?)?, iteration)
            }
            (Classifier::SoftmaxHead, None) => Err(Error::config("softmax classifier without a head")),
            (Classifier::Centers, _) => pseudo::refresh(&self.generator, self.centers.target(), target, iteration),
        }
    }

    /// Value of the center-alignment objective between the source and
    /// target center sets. Identically zero when the set is shared.
    pub fn center_gap(&self) -> f64 {
        center_alignment(self.centers.source(), self.centers.target())
            .map(|a| a.value)
            .unwrap_or(f64::NAN)
    }
}

/// Nearest-center class of each embedded row.
pub fn predict(generator: &Mlp, centers: &Matrix, features: &Matrix) -> Result<Vec<usize>> {
    let f = generator.infer(features)?;
    if f.cols() != centers.cols() {
        return Err(Error::config(format!(
            "embedding width {} does not match center width {}",
            f.cols(),
            centers.cols()
        )));
    }
    Ok((0..f.rows()).map(|i| nearest_center(f.row(i), centers).0).collect())
}

fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            m.row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Evaluation values attached to a log row by an [`Observer`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LogEval {
    pub target_accuracy: Option<f64>,
    pub pseudo_accuracy: Option<f64>,
}

/// Side channel for evaluation and artifacts. Nothing returned here feeds
/// back into training.
pub trait Observer {
    fn on_log(&mut self, _iteration: usize, _model: &Model, _pseudo: &PseudoState) -> Result<LogEval> {
        Ok(LogEval::default())
    }

    /// Returns the pseudo-label accuracy of the fresh state when known.
    fn on_refresh(&mut self, _iteration: usize, _pseudo: &PseudoState) -> Result<Option<f64>> {
        Ok(None)
    }

    fn after_step(&mut self, _iteration: usize, _model: &Model) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Silent;

impl Observer for Silent {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss_source: f64,
    pub loss_target: f64,
    pub loss_disc: f64,
    pub loss_gen: f64,
    pub lambda_d: f64,
    pub lambda_t: f64,
    pub center_gap: f64,
    pub mean_weight: f64,
    pub target_accuracy: Option<f64>,
    pub pseudo_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshRecord {
    pub iteration: usize,
    pub mean_weight: f64,
    pub pseudo_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: String,
    pub seed: u64,
    pub rows: Vec<LogRow>,
    pub refreshes: Vec<RefreshRecord>,
    /// SHA-256 over every training-path loss value, every pseudo-state and
    /// the final parameters.
    pub trajectory_hash: String,
    pub wall_clock_secs: f64,
}

/// Scalars produced by one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub iteration: usize,
    pub source_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    pub loss_source: f64,
    pub loss_target: f64,
    pub loss_disc: f64,
    pub loss_gen: f64,
    pub lambdas: Lambdas,
    pub refreshed: bool,
}

/// Mini-batches of one iteration, embedded by the current generator.
struct Embedded {
    source_indices: Vec<usize>,
    source_labels: Vec<usize>,
    target_indices: Vec<usize>,
    source_cache: crate::network::ForwardCache,
    target_cache: crate::network::ForwardCache,
}

impl Embedded {
    fn source_features(&self) -> &Matrix {
        self.source_cache.output()
    }

    fn target_features(&self) -> &Matrix {
        self.target_cache.output()
    }
}

/// Training state that can be advanced one iteration at a time.
#[derive(Clone)]
pub struct Trainer<'a> {
    config: TrainConfig,
    method: Arc<dyn Method>,
    source: &'a DomainDataset,
    target: UnlabeledView<'a>,
    model: Model,
    adam_generator: AdamState,
    adam_discriminator: AdamState,
    adam_centers: AdamState,
    adam_head: Option<AdamState>,
    source_sampler: BatchSampler,
    target_sampler: BatchSampler,
    pseudo: PseudoState,
    iteration: usize,
    hasher: Sha256,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, source: &'a DomainDataset, target: UnlabeledView<'a>) -> Result<Self> {
        config.validate()?;
        let method = config.method()?;
        let labels = source
            .labels()
            .ok_or_else(|| Error::input("the source dataset must be labeled"))?;
        if labels.len() != source.len() {
            return Err(Error::input("source labels do not match source rows"));
        }
        if source.input_dim() != target.features().cols() {
            return Err(Error::input(format!(
                "source has {} features, target has {}",
                source.input_dim(),
                target.features().cols()
            )));
        }
        if source.class_count() != target.class_count() {
            return Err(Error::input(format!(
                "source has {} classes, target has {}",
                source.class_count(),
                target.class_count()
            )));
        }
        if config.batch_size > source.len().min(target.len()) {
            return Err(Error::config(format!(
                "batch size {} exceeds a domain size ({} source, {} target)",
                config.batch_size,
                source.len(),
                target.len()
            )));
        }
        let model = Model::init(&config, method.as_ref(), source.input_dim(), source.class_count())?;
        let root = Rng::new(config.seed);
        Ok(Self {
            adam_generator: AdamState::new(&model.generator),
            adam_discriminator: AdamState::new(&model.discriminator),
            adam_centers: AdamState::new(&model.centers),
            adam_head: model.head.as_ref().map(AdamState::new),
            source_sampler: BatchSampler::new(source.len(), root.derive(streams::SOURCE_BATCHES)),
            target_sampler: BatchSampler::new(target.len(), root.derive(streams::TARGET_BATCHES)),
            pseudo: PseudoState::random(target.len(), target.class_count(), &mut root.derive(streams::PSEUDO_INIT)),
            iteration: 0,
            hasher: Sha256::new(),
            config,
            method,
            source,
            target,
            model,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn pseudo(&self) -> &PseudoState {
        &self.pseudo
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Source center loss (or summed cross-entropy for softmax modes) of the
    /// given source rows under the current parameters.
    pub fn source_loss(&self, indices: &[usize]) -> Result<f64> {
        let x = self.source.features().select_rows(indices);
        let labels = self.source.labels().unwrap_or_default();
        let y: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
        let f = self.model.embed(&x)?;
        match &self.model.head {
            Some(head) => {
                let mean = crate::losses::softmax_xent(&head.infer(&f)?, &y)?;
                Ok(mean.value * y.len() as f64)
            }
            None => Ok(crate::losses::source_dcl(&f, &y, self.model.centers.source(), &self.config.margins)?.value),
        }
    }

    fn refresh(&mut self) -> Result<()> {
        self.pseudo = self.model.pseudo_labels(self.target.features(), self.iteration)?;
        for &y in &self.pseudo.labels {
            self.hasher.update((y as u64).to_le_bytes());
        }
        for w in &self.pseudo.weights {
            self.hasher.update(w.to_bits().to_le_bytes());
        }
        Ok(())
    }

    fn embed_batches(&mut self) -> Result<Embedded> {
        let b = self.config.batch_size;
        let sb = next_batch(self.source, &mut self.source_sampler, b)?;
        let tb = next_unlabeled_batch(&self.target, &mut self.target_sampler, b)?;
        let (_, source_cache) = self.model.generator.forward(&sb.features)?;
        let (_, target_cache) = self.model.generator.forward(&tb.features)?;
        Ok(Embedded {
            source_indices: sb.indices,
            source_labels: sb.labels.unwrap_or_default(),
            target_indices: tb.indices,
            source_cache,
            target_cache,
        })
    }

    /// Discriminator loss and its gradients (parameters, source features,
    /// target features) under the current discriminator.
    fn discriminator_pass(&self, fs: &Matrix, ft: &Matrix) -> Result<(f64, Mlp, Matrix, Matrix)> {
        let d = &self.model.discriminator;
        let (ps, cs) = d.forward(fs)?;
        let (pt, ct) = d.forward(ft)?;
        let loss = discriminator_loss(ps.as_slice(), pt.as_slice());
        let (mut g, gfs) = d.backward(&cs, &Matrix::from_vec(fs.rows(), 1, loss.source_grads)?)?;
        let (gt, gft) = d.backward(&ct, &Matrix::from_vec(ft.rows(), 1, loss.target_grads)?)?;
        accumulate(&mut g, &gt, 1.0)?;
        Ok((loss.value, g, gfs, gft))
    }

    /// One Adam step on the discriminator; generator and centers untouched.
    fn discriminator_step(&mut self, batch: &Embedded) -> Result<f64> {
        let (value, grads, _, _) = self.discriminator_pass(batch.source_features(), batch.target_features())?;
        adam_step(
            &mut self.model.discriminator,
            &grads,
            &mut self.adam_discriminator,
            self.config.lr_net,
        )?;
        Ok(value)
    }

    /// One Adam step on generator, centers and head; discriminator untouched.
    fn generator_step(&mut self, batch: &Embedded, lambdas: Lambdas) -> Result<(f64, f64, f64)> {
        let (ps, pw) = self.pseudo.select(&batch.target_indices);
        let input = StepInput {
            iteration: self.iteration,
            pseudo_start: self.config.pseudo_start,
            lambdas,
            lambda_c: self.config.effective_lambda_c(),
            margins: self.config.margins,
            source_features: batch.source_features(),
            source_labels: &batch.source_labels,
            target_features: batch.target_features(),
            pseudo_labels: &ps,
            pseudo_weights: &pw,
            centers: &self.model.centers,
            head: self.model.head.as_ref(),
        };
        let mut out = self.method.generator_objective(&input)?;
        if self.method.terms().domain {
            let (value, _, gfs, gft) = self.discriminator_pass(batch.source_features(), batch.target_features())?;
            out.parts.domain = Some(DomainPart {
                disc_loss: value,
                source_feature_grads: gfs,
                target_feature_grads: gft,
            });
        }
        let loss_source = out.parts.source.value;
        let loss_target = out.parts.target.as_ref().map_or(0.0, |t| t.value);
        let combined = combined_generator_loss(
            &out.parts,
            &out.weights,
            &self.method.terms(),
            batch.target_features().rows(),
        )?;

        let g = &self.model.generator;
        let (mut g_grads, _) = g.backward(&batch.source_cache, &combined.source_feature_grads)?;
        if combined.target_feature_grads.max_abs() > 0.0 {
            let (gt, _) = g.backward(&batch.target_cache, &combined.target_feature_grads)?;
            accumulate(&mut g_grads, &gt, 1.0)?;
        }
        let mut c_grads = self.model.centers.zeros_like();
        if let Some(s) = &combined.source_center_grads {
            c_grads.source_mut().add_scaled(s, 1.0)?;
        }
        if let Some(t) = &combined.target_center_grads {
            c_grads.target_mut().add_scaled(t, 1.0)?;
        }

        let lr = self.config.lr_net;
        adam_step(&mut self.model.generator, &g_grads, &mut self.adam_generator, lr)?;
        adam_step(
            &mut self.model.centers,
            &c_grads,
            &mut self.adam_centers,
            self.config.lr_centers,
        )?;
        if let (Some(head), Some(state), Some(grads)) =
            (self.model.head.as_mut(), self.adam_head.as_mut(), out.head_grads.as_ref())
        {
            adam_step(head, grads, state, lr)?;
        }
        Ok((loss_source, loss_target, combined.value))
    }

    /// Runs iteration `self.iteration` and advances.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::config("training already finished"));
        }
        let m = self.iteration;
        self.method
            .before_step(&mut self.model.centers, m, self.config.pseudo_start);
        let refreshed = should_refresh(m, self.config.refresh_period);
        if refreshed {
            self.refresh()?;
        }
        let lambdas = lambda_schedule(m, &self.config.schedule());
        let batch = self.embed_batches()?;
        let loss_disc = if self.method.uses_discriminator() {
            self.discriminator_step(&batch)?
        } else {
            0.0
        };
        let (loss_source, loss_target, loss_gen) = self.generator_step(&batch, lambdas)?;
        for v in [loss_source, loss_target, loss_disc, loss_gen] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {v} at iteration {m}")));
            }
            self.hasher.update(v.to_bits().to_le_bytes());
        }
        self.iteration += 1;
        Ok(StepRecord {
            iteration: m,
            source_indices: batch.source_indices,
            target_indices: batch.target_indices,
            loss_source,
            loss_target,
            loss_disc,
            loss_gen,
            lambdas,
            refreshed,
        })
    }

    /// Hash of the training path so far, including the current parameters.
    pub fn trajectory_hash(&self) -> String {
        let mut h = self.hasher.clone();
        let m = &self.model;
        for t in [m.generator.to_flat(), m.discriminator.to_flat(), m.centers.to_flat()] {
            for v in t {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        if let Some(head) = &m.head {
            for v in head.to_flat() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn into_model(self) -> Model {
        self.model
    }
}

/// Trained model, final pseudo-state and metrics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub pseudo: PseudoState,
    pub metrics: RunMetrics,
}

/// Full run. Target labels are out of reach: only the unlabeled view is
/// taken, and the observer cannot influence the trajectory.
pub fn train(
    config: &TrainConfig,
    source: &DomainDataset,
    target: UnlabeledView<'_>,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut trainer = Trainer::new(config.clone(), source, target)?;
    let mut rows = Vec::new();
    let mut refreshes = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.step()?;
        let m = rec.iteration;
        let mean_weight = mean(&trainer.pseudo.weights);
        if rec.refreshed {
            let pseudo_accuracy = observer.on_refresh(m, &trainer.pseudo)?;
            refreshes.push(RefreshRecord {
                iteration: m,
                mean_weight,
                pseudo_accuracy,
            });
        }
        observer.after_step(m, &trainer.model)?;
        if m % config.log_every == 0 {
            let eval = observer.on_log(m, &trainer.model, &trainer.pseudo)?;
            rows.push(LogRow {
                iteration: m,
                loss_source: rec.loss_source,
                loss_target: rec.loss_target,
                loss_disc: rec.loss_disc,
                loss_gen: rec.loss_gen,
                lambda_d: rec.lambdas.domain,
                lambda_t: rec.lambdas.target,
                center_gap: trainer.model.center_gap(),
                mean_weight,
                target_accuracy: eval.target_accuracy,
                pseudo_accuracy: eval.pseudo_accuracy,
            });
        }
    }
    let trajectory_hash = trainer.trajectory_hash();
    let pseudo = trainer.pseudo.clone();
    Ok(TrainOutcome {
        model: trainer.into_model(),
        pseudo,
        metrics: RunMetrics {
            mode: config.mode.clone(),
            seed: config.seed,
            rows,
            refreshes,
            trajectory_hash,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
