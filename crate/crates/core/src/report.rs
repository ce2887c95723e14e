//! On-disk artifacts of a run: metrics CSV, refresh CSV, JSON summary and
//! the JSON checkpoint.
//!
//! Numbers are written with Rust's shortest round-trip formatting, which is
//! locale-free and parses back to the identical `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::centers::CenterSet;
use crate::error::{Error, Result};
use crate::evaluate::FinalEval;
use crate::methods::Classifier;
use crate::ndcore::Matrix;
use crate::network::{Layer, Mlp, OutputActivation, ParamTensors};
use crate::trainer::{LogRow, Model, RefreshRecord, RunMetrics, TrainConfig};

pub const METRICS_HEADER: &str = "iteration,loss_source,loss_target,loss_disc,loss_gen,lambda_d,lambda_t,center_gap,mean_weight,target_accuracy,pseudo_accuracy";
pub const REFRESH_HEADER: &str = "iteration,mean_weight,pseudo_accuracy";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn metrics_row(r: &LogRow) -> String {
    [
        r.iteration.to_string(),
        num(r.loss_source),
        num(r.loss_target),
        num(r.loss_disc),
        num(r.loss_gen),
        num(r.lambda_d),
        num(r.lambda_t),
        num(r.center_gap),
        num(r.mean_weight),
        opt(r.target_accuracy),
        opt(r.pseudo_accuracy),
    ]
    .join(",")
}

pub fn write_metrics_csv(rows: &[LogRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", metrics_row(r))?;
    }
    Ok(())
}

pub fn write_refresh_csv(refreshes: &[RefreshRecord], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{REFRESH_HEADER}")?;
    for r in refreshes {
        writeln!(out, "{},{},{}", r.iteration, num(r.mean_weight), opt(r.pseudo_accuracy))?;
    }
    Ok(())
}

/// Writes `contents` produced by `f` to `path`, mapping failures to IO errors.
pub fn write_file(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoTrend {
    pub first_after_start: f64,
    pub last: f64,
    pub improved: bool,
}

/// Per-seed JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub iterations: usize,
    pub final_target_accuracy: Option<f64>,
    pub final_source_accuracy: f64,
    pub a_distance: f64,
    pub a_distance_epsilon: f64,
    pub a_distance_split_seed: u64,
    pub final_pseudo_accuracy: Option<f64>,
    pub pseudo_trend: Option<PseudoTrend>,
    pub trajectory_hash: String,
    pub wall_clock_secs: f64,
    pub config: TrainConfig,
    /// Free-form description of where the data came from.
    pub dataset: serde_json::Value,
}

impl Summary {
    pub fn new(config: &TrainConfig, metrics: &RunMetrics, eval: &FinalEval, dataset: serde_json::Value) -> Self {
        let pseudo_trend =
            crate::evaluate::pseudo_trend(&metrics.refreshes, config.pseudo_start).map(|(first, last)| PseudoTrend {
                first_after_start: first,
                last,
                improved: last > first,
            });
        Self {
            mode: config.mode.clone(),
            seed: config.seed,
            iterations: config.iterations,
            final_target_accuracy: eval.target_accuracy,
            final_source_accuracy: eval.source_accuracy,
            a_distance: eval.a_distance.dist_a,
            a_distance_epsilon: eval.a_distance.epsilon,
            a_distance_split_seed: eval.a_distance.split_seed,
            final_pseudo_accuracy: metrics.refreshes.last().and_then(|r| r.pseudo_accuracy),
            pseudo_trend,
            trajectory_hash: metrics.trajectory_hash.clone(),
            wall_clock_secs: metrics.wall_clock_secs,
            config: config.clone(),
            dataset,
        }
    }
}

/// A network as layer widths plus one flat parameter array, weights
/// row-major (`out × in`) followed by the bias, layer by layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkDump {
    pub dims: Vec<usize>,
    pub output_activation: OutputActivation,
    pub params: Vec<f64>,
}

impl NetworkDump {
    pub fn from_mlp(m: &Mlp) -> Self {
        Self {
            dims: m.dims(),
            output_activation: m.output_activation(),
            params: m.to_flat(),
        }
    }

    pub fn to_mlp(&self) -> Result<Mlp> {
        if self.dims.len() < 2 {
            return Err(Error::input("a network needs at least two layer widths"));
        }
        let layers = self
            .dims
            .windows(2)
            .map(|w| Layer {
                weight: Matrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        let mut m = Mlp::from_layers(layers, self.output_activation)?;
        m.set_flat(&self.params)
            .map_err(|_| Error::input(format!("{} parameters do not fit dims {:?}", self.params.len(), self.dims)))?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentersDump {
    pub class_count: usize,
    pub dim: usize,
    pub shared: bool,
    pub source: Vec<f64>,
    /// Present only for per-domain centers.
    pub target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub iteration: usize,
    pub classifier: Classifier,
    pub generator: NetworkDump,
    pub discriminator: NetworkDump,
    pub head: Option<NetworkDump>,
    pub centers: CentersDump,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn new(model: &Model, config: &TrainConfig, iteration: usize) -> Self {
        let c = &model.centers;
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            iteration,
            classifier: model.classifier,
            generator: NetworkDump::from_mlp(&model.generator),
            discriminator: NetworkDump::from_mlp(&model.discriminator),
            head: model.head.as_ref().map(NetworkDump::from_mlp),
            centers: CentersDump {
                class_count: c.class_count(),
                dim: c.dim(),
                shared: c.is_shared(),
                source: c.source().as_slice().to_vec(),
                target: (!c.is_shared()).then(|| c.target().as_slice().to_vec()),
            },
            config: config.clone(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::input(format!(
                "checkpoint schema version {} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let cd = &self.centers;
        let matrix = |v: &[f64]| Matrix::from_vec(cd.class_count, cd.dim, v.to_vec());
        let centers = match (&cd.target, cd.shared) {
            (None, true) => CenterSet::shared(matrix(&cd.source)?)?,
            (Some(t), false) => {
                let mut cs = CenterSet::per_domain(matrix(&cd.source)?)?;
                *cs.target_mut() = matrix(t)?;
                cs
            }
            _ => return Err(Error::input("center layout and target centers disagree")),
        };
        Ok(Model {
            generator: self.generator.to_mlp()?,
            discriminator: self.discriminator.to_mlp()?,
            centers,
            head: self.head.as_ref().map(NetworkDump::to_mlp).transpose()?,
            classifier: self.classifier,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
