//! Training strategies, one per ablation mode, selected by name at runtime.
//!
//! Each strategy declares which loss terms it needs, how its centers are
//! laid out and how it classifies, and builds the generator-side objective
//! for one iteration from already-embedded batches. The trainer owns the
//! networks, the discriminator step and the optimizers.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::centers::CenterSet;
use crate::error::{Error, Result};
use crate::losses::{
    source_dcl, weighted_softmax_xent, GeneratorParts, GeneratorWeights, Lambdas, LossTerms, LossValue, Margins,
};
use crate::ndcore::Matrix;
use crate::network::{accumulate, Mlp};

mod origin;
mod revgrad;
mod sda_ours;
mod sda_tcl;
mod source_only;
mod tcl_ours;

pub use origin::{LinearCombination, SdaOrigin, TclOrigin};
pub use revgrad::RevGrad;
pub use sda_ours::SdaOurs;
pub use sda_tcl::SdaTcl;
pub use source_only::SourceOnly;
pub use tcl_ours::TclOurs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterLayout {
    Shared,
    PerDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    /// Nearest class center in feature space.
    Centers,
    /// Linear softmax head on top of the features.
    SoftmaxHead,
}

/// What a mode trains, for reporting and for validating configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModeDescriptor {
    pub name: &'static str,
    pub terms: LossTerms,
    pub center_layout: CenterLayout,
    pub classifier: Classifier,
    pub uses_discriminator: bool,
}

/// Everything a strategy may look at when building its objective.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    pub iteration: usize,
    pub pseudo_start: usize,
    pub lambdas: Lambdas,
    /// Alignment weight for modes that have an alignment term.
    pub lambda_c: f64,
    pub margins: Margins,
    pub source_features: &'a Matrix,
    pub source_labels: &'a [usize],
    pub target_features: &'a Matrix,
    pub pseudo_labels: &'a [usize],
    pub pseudo_weights: &'a [f64],
    pub centers: &'a CenterSet,
    pub head: Option<&'a Mlp>,
}

/// Generator-side loss parts (without the adversarial part, which the
/// trainer fills in), their weights, and head gradients already weighted.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub parts: GeneratorParts,
    pub weights: GeneratorWeights,
    pub head_grads: Option<Mlp>,
}

pub trait Method: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn terms(&self) -> LossTerms;

    fn center_layout(&self) -> CenterLayout {
        CenterLayout::Shared
    }

    fn classifier(&self) -> Classifier {
        Classifier::Centers
    }

    fn uses_discriminator(&self) -> bool {
        self.terms().domain
    }

    fn descriptor(&self) -> ModeDescriptor {
        ModeDescriptor {
            name: self.name(),
            terms: self.terms(),
            center_layout: self.center_layout(),
            classifier: self.classifier(),
            uses_discriminator: self.uses_discriminator(),
        }
    }

    /// Hook run at the start of every iteration, before any refresh.
    fn before_step(&self, _centers: &mut CenterSet, _iteration: usize, _pseudo_start: usize) {}

    fn generator_objective(&self, input: &StepInput<'_>) -> Result<StepOutput>;
}

pub type Factory = fn() -> Box<dyn Method>;

/// Name → constructor table.
#[derive(Clone)]
pub struct Registry {
    entries: Vec<(&'static str, Factory)>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// The eight built-in modes.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        let all: [(&'static str, Factory); 8] = [
            ("source_only", || Box::new(SourceOnly)),
            ("revgrad", || Box::new(RevGrad)),
            ("sda_ours", || Box::new(SdaOurs)),
            ("tcl_ours", || Box::new(TclOurs)),
            ("sda_tcl", || Box::new(SdaTcl)),
            ("tcl_origin", || Box::new(TclOrigin)),
            ("sda_origin", || Box::new(SdaOrigin)),
            ("linear_combination", || Box::new(LinearCombination)),
        ];
        for (name, f) in all {
            r.register(name, f).expect("built-in names are unique");
        }
        r
    }

    pub fn register(&mut self, name: &'static str, factory: Factory) -> Result<()> {
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::config(format!("mode '{name}' is already registered")));
        }
        self.entries.push((name, factory));
        Ok(())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn Method>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown mode '{name}' (known: {})",
                    self.names().join(", ")
                ))
            })
    }
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Built-in mode by name.
pub fn method_by_name(name: &str) -> Result<Box<dyn Method>> {
    Registry::builtin().create(name)
}

/// Active-loss descriptor of a built-in mode.
pub fn mode_losses(name: &str) -> Result<ModeDescriptor> {
    Ok(method_by_name(name)?.descriptor())
}

pub fn mode_names() -> Vec<&'static str> {
    Registry::builtin().names()
}

fn weights(input: &StepInput<'_>, target: f64, alignment: f64) -> GeneratorWeights {
    GeneratorWeights {
        target,
        alignment,
        domain: input.lambdas.domain,
    }
}

fn source_center_term(input: &StepInput<'_>) -> Result<LossValue> {
    source_dcl(
        input.source_features,
        input.source_labels,
        input.centers.source(),
        &input.margins,
    )
}

/// Softmax cross-entropy through the head, summed over the batch so it is on
/// the same scale as the center losses. Returns the loss (gradient wrt the
/// features) and the head gradients.
fn head_xent(head: &Mlp, features: &Matrix, labels: &[usize], weights: Option<&[f64]>) -> Result<(LossValue, Mlp)> {
    let n = features.rows() as f64;
    let (logits, cache) = head.forward(features)?;
    let mean = weighted_softmax_xent(&logits, labels, weights)?;
    let (head_grads, feature_grads) = head.backward(&cache, &mean.feature_grads.scale(n))?;
    Ok((
        LossValue {
            value: mean.value * n,
            feature_grads,
            center_grads: None,
        },
        head_grads,
    ))
}

fn require_head<'a>(input: &StepInput<'a>, mode: &str) -> Result<&'a Mlp> {
    input
        .head
        .ok_or_else(|| Error::config(format!("mode '{mode}' needs a softmax head")))
}

/// `acc + s * g`, starting from `g * s` when empty.
fn add_head_grads(acc: &mut Option<Mlp>, g: &Mlp, s: f64) -> Result<()> {
    match acc {
        Some(a) => accumulate(a, g, s),
        None => {
            let mut a = g.zeros_like();
            accumulate(&mut a, g, s)?;
            *acc = Some(a);
            Ok(())
        }
    }
}
