//! Prompt text for the VLM baselines.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::VlmError;

/// Structured-output block appended to every estimation prompt.
pub const RULES: &str = "RULES:\n\
1. Output ONLY a valid JSON object.\n\
2. Keys must be the exact ingredient names listed.\n\
3. Provide a best-guess estimate in grams.\n\
4. Example: {\"Rice\": 150.0, \"Chicken\": 85.0}";

const SINGLE: &str =
    "You are a nutrition expert analyzing this meal image. Estimate the weight in grams for these ingredients:\n{ing_list}";

const PREDICTED_DIFFERENCE: &str = "You are a nutrition expert. Analyze these two images. \
Image 1 is the meal Before eating. Image 2 is the meal After eating.\n\
Identify the following ingredients: {ing_list}.\n\
Estimate the CONSUMED weight (mass eaten) in grams for each ingredient based on the difference between the images.\n\
Example: {\"Apple\": 50.5, \"Bread\": 20.0}";

const BEFORE: &str = "You are a nutrition expert. Analyze this image of a meal.\n\
Estimate the total weight (in grams) PRESENT in the image for these ingredients: {ing_list}.";

const AFTER: &str = "You are a nutrition expert. Analyze this image of leftovers/after meal.\n\
Estimate the remaining weight (in grams) PRESENT in the image for these ingredients: {ing_list}.\n\
If an ingredient is completely gone, the weight is 0.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSlot {
    Before,
    After,
}

/// What a prompt asks for, which fixes how its answer is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptRole {
    Single,
    ConsumedPair,
    Before,
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One before image, absolute weights.
    Single,
    /// One prompt over both images asking for consumed weight.
    PredictedDifference,
    /// Two absolute prompts, subtracted per ingredient.
    DifferenceOfPredictions,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Strategy::Single),
            "predicted_difference" => Ok(Strategy::PredictedDifference),
            "difference_of_predictions" => Ok(Strategy::DifferenceOfPredictions),
            _ => Err(format!("unknown strategy `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VlmPrompt {
    pub text: String,
    pub images: Vec<ImageSlot>,
    pub expected_keys: Vec<String>,
    pub role: PromptRole,
}

impl VlmPrompt {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.text.as_bytes());
        for s in &self.images {
            h.update([*s as u8]);
        }
        hex::encode(h.finalize())
    }
}

pub fn render_ing_list(ingredients: &[String]) -> String {
    ingredients.iter().map(|n| format!("- {n}")).collect::<Vec<_>>().join("\n")
}

fn build(template: &str, ingredients: &[String], images: Vec<ImageSlot>, role: PromptRole) -> Result<VlmPrompt, VlmError> {
    if ingredients.is_empty() {
        return Err(VlmError::NoIngredients);
    }
    let body = template.replace("{ing_list}", &render_ing_list(ingredients));
    Ok(VlmPrompt { text: format!("{body}\n\n{RULES}"), images, expected_keys: ingredients.to_vec(), role })
}

pub fn build_single_prompt(ingredients: &[String]) -> Result<VlmPrompt, VlmError> {
    build(SINGLE, ingredients, vec![ImageSlot::Before], PromptRole::Single)
}

pub fn build_pair_prompts(ingredients: &[String], strategy: Strategy) -> Result<Vec<VlmPrompt>, VlmError> {
    match strategy {
        Strategy::Single => Ok(vec![build_single_prompt(ingredients)?]),
        Strategy::PredictedDifference => Ok(vec![build(
            PREDICTED_DIFFERENCE,
            ingredients,
            vec![ImageSlot::Before, ImageSlot::After],
            PromptRole::ConsumedPair,
        )?]),
        Strategy::DifferenceOfPredictions => Ok(vec![
            build(BEFORE, ingredients, vec![ImageSlot::Before], PromptRole::Before)?,
            build(AFTER, ingredients, vec![ImageSlot::After], PromptRole::After)?,
        ]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_contains_listing_sentences() {
        let p = build_single_prompt(&names(&["Rice", "Chicken"])).unwrap();
        assert!(p.text.starts_with("You are a nutrition expert analyzing this meal image."));
        assert!(p.text.contains("ingredients:\n- Rice\n- Chicken\n\nRULES:\n"));
        assert!(p.text.contains("1. Output ONLY a valid JSON object."));
        assert!(p.text.ends_with("4. Example: {\"Rice\": 150.0, \"Chicken\": 85.0}"));
        assert_eq!(p.images, vec![ImageSlot::Before]);
        assert!(build_single_prompt(&[]).is_err());
    }

    #[test]
    fn pair_prompts() {
        let p = build_pair_prompts(&names(&["Apple"]), Strategy::PredictedDifference).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p[0].text.contains("based on the difference between the images"));
        assert_eq!(p[0].images, vec![ImageSlot::Before, ImageSlot::After]);
        let p = build_pair_prompts(&names(&["Apple"]), Strategy::DifferenceOfPredictions).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p[1].text.contains("If an ingredient is completely gone, the weight is 0."));
        assert_eq!(p[0].role, PromptRole::Before);
        assert_ne!(p[0].digest(), p[1].digest());
    }
}
