//! Softmax-classifier baselines: pseudo-label cross-entropy on the target,
//! alignment of per-domain class means, and their sum.

use super::{add_head_grads, head_xent, require_head, weights, Classifier, Method, StepInput, StepOutput};
use crate::error::Result;
use crate::losses::{class_mean_alignment, AlignmentPart, GeneratorParts, LossTerms, LossValue};
use crate::network::Mlp;

#[derive(Debug, Clone, Copy, Default)]
pub struct TclOrigin;

#[derive(Debug, Clone, Copy, Default)]
pub struct SdaOrigin;

#[derive(Debug, Clone, Copy, Default)]
pub struct LinearCombination;

struct Pieces {
    source: LossValue,
    target: Option<LossValue>,
    alignment: Option<AlignmentPart>,
    head_grads: Option<Mlp>,
    alignment_weight: f64,
}

fn build(mode: &str, input: &StepInput<'_>, with_target: bool, with_alignment: bool) -> Result<Pieces> {
    let head = require_head(input, mode)?;
    let (source, gs) = head_xent(head, input.source_features, input.source_labels, None)?;
    let mut head_grads = None;
    add_head_grads(&mut head_grads, &gs, 1.0)?;

    let target = if with_target {
        let (t, gt) = head_xent(
            head,
            input.target_features,
            input.pseudo_labels,
            Some(input.pseudo_weights),
        )?;
        add_head_grads(&mut head_grads, &gt, input.lambdas.target)?;
        Some(t)
    } else {
        None
    };

    let alignment = if with_alignment {
        let m = class_mean_alignment(
            input.source_features,
            input.source_labels,
            input.target_features,
            input.pseudo_labels,
            input.centers.class_count(),
        )?;
        Some(AlignmentPart {
            value: m.value,
            source_feature_grads: Some(m.source_feature_grads),
            target_feature_grads: Some(m.target_feature_grads),
            source_center_grads: None,
            target_center_grads: None,
        })
    } else {
        None
    };
    // Class means of the target rely on pseudo-labels, so alignment waits
    // for them like the target loss does.
    let gate = if input.iteration >= input.pseudo_start {
        input.lambdas.domain
    } else {
        0.0
    };
    Ok(Pieces {
        source,
        target,
        alignment,
        head_grads,
        alignment_weight: input.lambda_c * gate,
    })
}

fn finish(input: &StepInput<'_>, p: Pieces) -> StepOutput {
    StepOutput {
        weights: weights(input, input.lambdas.target, p.alignment_weight),
        parts: GeneratorParts {
            source: p.source,
            target: p.target,
            alignment: p.alignment,
            domain: None,
        },
        head_grads: p.head_grads,
    }
}

impl Method for TclOrigin {
    fn name(&self) -> &'static str {
        "tcl_origin"
    }

    fn terms(&self) -> LossTerms {
        LossTerms {
            target: true,
            alignment: false,
            domain: true,
        }
    }

    fn classifier(&self) -> Classifier {
        Classifier::SoftmaxHead
    }

    fn generator_objective(&self, input: &StepInput<'_>) -> Result<StepOutput> {
        Ok(finish(input, build(self.name(), input, true, false)?))
    }
}

impl Method for SdaOrigin {
    fn name(&self) -> &'static str {
        "sda_origin"
    }

    fn terms(&self) -> LossTerms {
        LossTerms {
            target: false,
            alignment: true,
            domain: true,
        }
    }

    fn classifier(&self) -> Classifier {
        Classifier::SoftmaxHead
    }

    fn generator_objective(&self, input: &StepInput<'_>) -> Result<StepOutput> {
        Ok(finish(input, build(self.name(), input, false, true)?))
    }
}

impl Method for LinearCombination {
    fn name(&self) -> &'static str {
        "linear_combination"
    }

    fn terms(&self) -> LossTerms {
        LossTerms {
            target: true,
            alignment: true,
            domain: true,
        }
    }

    fn classifier(&self) -> Classifier {
        Classifier::SoftmaxHead
    }

    fn generator_objective(&self, input: &StepInput<'_>) -> Result<StepOutput> {
        Ok(finish(input, build(self.name(), input, true, true)?))
    }
}
