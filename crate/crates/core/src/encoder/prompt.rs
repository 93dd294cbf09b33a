use thiserror::Error;

use crate::data::Stage;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("item name must be non-empty")]
pub struct PromptError;

const ABSOLUTE_TEMPLATE: (&str, &str) = ("What is the weight of the ", " in this image?");
const DIFFERENCE_TEMPLATE: (&str, &str) = ("What is the difference in weight of the ", " in these images?");

/// Fills the per-stage question template with the item name verbatim.
pub fn build_prompt(item_name: &str, stage: Stage) -> Result<String, PromptError> {
    if item_name.trim().is_empty() {
        return Err(PromptError);
    }
    let (head, tail) = match stage {
        Stage::Absolute => ABSOLUTE_TEMPLATE,
        Stage::Difference => DIFFERENCE_TEMPLATE,
    };
    Ok(format!("{head}{item_name}{tail}"))
}
