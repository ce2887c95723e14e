use super::{source_center_term, weights, Method, StepInput, StepOutput};
use crate::error::Result;
use crate::losses::{GeneratorParts, LossTerms};

/// Source center loss only. Target data never reaches a gradient.
#[derive(Debug, Clone, Copy, Default)]
pub struct SourceOnly;

impl Method for SourceOnly {
    fn name(&self) -> &'static str {
        "source_only"
    }

    fn terms(&self) -> LossTerms {
        LossTerms {
            target: false,
            alignment: false,
            domain: false,
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
