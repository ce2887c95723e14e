use super::{source_center_term, weights, Method, StepInput, StepOutput};
use crate::error::Result;
use crate::losses::{GeneratorParts, LossTerms};

/// Source center loss plus adversarial feature alignment.
#[derive(Debug, Clone, Copy, Default)]
pub struct RevGrad;

impl Method for RevGrad {
    fn name(&self) -> &'static str {
        "revgrad"
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
