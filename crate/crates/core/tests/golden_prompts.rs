use intake_core::vlm::{build_pair_prompts, build_single_prompt, Strategy, RULES};

const SINGLE: &str = include_str!("golden/single_rice_chicken.txt");
const PREDICTED_DIFFERENCE: &str = include_str!("golden/predicted_difference_rice_chicken.txt");
const BEFORE: &str = include_str!("golden/before_rice_chicken.txt");
const AFTER: &str = include_str!("golden/after_rice_chicken.txt");
const RULES_FILE: &str = include_str!("golden/rules.txt");

/// Golden files end with one newline, the prompts do not.
fn golden(text: &str) -> &str {
    text.strip_suffix('\n').expect("golden file ends with a newline")
}

fn rice_chicken() -> Vec<String> {
    vec!["Rice".into(), "Chicken".into()]
}

#[test]
fn rules_block_matches_golden() {
    assert_eq!(RULES, golden(RULES_FILE));
}

#[test]
fn single_prompt_matches_golden() {
    let p = build_single_prompt(&rice_chicken()).unwrap();
    assert_eq!(p.text.as_bytes(), golden(SINGLE).as_bytes());
}

#[test]
fn predicted_difference_matches_golden() {
    let p = build_pair_prompts(&rice_chicken(), Strategy::PredictedDifference).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p[0].text.as_bytes(), golden(PREDICTED_DIFFERENCE).as_bytes());
}

#[test]
fn difference_of_predictions_matches_golden() {
    let p = build_pair_prompts(&rice_chicken(), Strategy::DifferenceOfPredictions).unwrap();
    assert_eq!(p.len(), 2);
    assert_eq!(p[0].text.as_bytes(), golden(BEFORE).as_bytes());
    assert_eq!(p[1].text.as_bytes(), golden(AFTER).as_bytes());
}

#[test]
fn builders_are_byte_stable() {
    for s in [Strategy::Single, Strategy::PredictedDifference, Strategy::DifferenceOfPredictions] {
        let a = build_pair_prompts(&rice_chicken(), s).unwrap();
        let b = build_pair_prompts(&rice_chicken(), s).unwrap();
        assert_eq!(a, b);
    }
}
