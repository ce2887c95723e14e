use super::{source_center_term, weights, CenterLayout, Method, StepInput, StepOutput};
use crate::centers::CenterSet;
use crate::error::Result;
use crate::losses::{target_dcl, GeneratorParts, LossTerms};

/// Weighted target center loss without semantic alignment: the target
/// domain keeps its own center set. Until pseudo-labels switch on, the
/// target centers mirror the source centers; afterwards they are trained by
/// the target loss alone and nothing ties the two sets together.
#[derive(Debug, Clone, Copy, Default)]
pub struct TclOurs;

impl Method for TclOurs {
    fn name(&self) -> &'static str {
        "tcl_ours"
    }

    fn terms(&self) -> LossTerms {
        LossTerms {
            target: true,
            alignment: false,
            domain: true,
        }
    }

    fn center_layout(&self) -> CenterLayout {
        CenterLayout::PerDomain
    }

    fn before_step(&self, centers: &mut CenterSet, iteration: usize, pseudo_start: usize) {
        if iteration < pseudo_start {
            centers.sync_target_to_source();
        }
    }

    fn generator_objective(&self, input: &StepInput<'_>) -> Result<StepOutput> {
        let target = target_dcl(
            input.target_features,
            input.pseudo_labels,
            input.pseudo_weights,
            input.centers.target(),
            &input.margins,
        )?;
        Ok(StepOutput {
            parts: GeneratorParts {
                source: source_center_term(input)?,
                target: Some(target),
                alignment: None,
                domain: None,
            },
            weights: weights(input, input.lambdas.target, 0.0),
            head_grads: None,
        })
    }
}
