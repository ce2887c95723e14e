use super::{source_center_term, weights, Method, StepInput, StepOutput};
use crate::error::Result;
use crate::losses::{target_dcl, GeneratorParts, LossTerms};

/// Shared centers, weighted target center loss on pseudo-labels and
/// adversarial alignment. Sharing makes the center-alignment term vanish.
#[derive(Debug, Clone, Copy, Default)]
pub struct SdaTcl;

impl Method for SdaTcl {
    fn name(&self) -> &'static str {
        "sda_tcl"
    }

    fn terms(&self) -> LossTerms {
        LossTerms {
            target: true,
            alignment: false,
            domain: true,
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
