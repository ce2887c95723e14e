use super::{source_center_term, weights, Method, StepInput, StepOutput};
use crate::error::Result;
use crate::losses::{GeneratorParts, LossTerms};

/// Shared centers and adversarial alignment without target classifier
/// learning: no target center loss, so target samples affect the shared
/// centers only through the features the generator produces for them.
/// The active loss set coincides with [`super::RevGrad`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SdaOurs;

impl Method for SdaOurs {
    fn name(&self) -> &'static str {
        "sda_ours"
    }

    fn terms(&self) -> LossTerms {
        LossTerms {
            target: false,
            alignment: false,
            domain: true,
        }
    }

    fn generator_objective(&self, input: &StepInput<'_>) -> Result<StepOutput> {
        Ok(StepOutput {
            parts: GeneratorParts {
                source: source_center_term(input)?,
                target: None,
                alignment: None,
                domain: None,
            },
            weights: weights(input, 0.0, 0.0),
            head_grads: None,
        })
    }
}
