//! Text-guided food-item weight regression.
//!
//! A frozen vision-language encoder produces patch and text features; a small
//! trainable network attends over before/after patches with the text query
//! and regresses either the absolute item weight or the consumed weight.

pub mod data;
pub mod dataset;
pub mod encoder;
pub mod fusion;
pub mod features;
pub mod objectives;
pub mod training;
pub mod evaluation;
pub mod viz;
pub mod vlm;
