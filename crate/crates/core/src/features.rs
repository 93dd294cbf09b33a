//! Turns item queries into encoder features, encoding each image and prompt once.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{ItemQuery, Stage};
use crate::encoder::{build_prompt, Encoder, EncoderError, ImageSource, PromptError};
use crate::fusion::{FusionInput, InputDims};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("sample {sample}: cannot read image: {message}")]
    Image { sample: String, message: String },
    #[error("sample {0}: difference query without an after image")]
    MissingAfter(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

pub fn input_dims(encoder: &dyn Encoder) -> InputDims {
    let info = encoder.info();
    InputDims { image_dim: info.image_dim, text_dim: info.text_dim, num_patches: info.num_patches }
}

type ImagePair = (Arc<Array2<f64>>, Option<Arc<Array2<f64>>>);

/// Features for every query, in query order.
pub fn encode_queries(queries: &[ItemQuery], encoder: &dyn Encoder) -> Result<Vec<FusionInput>, FeatureError> {
    let mut samples = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut prompts: Vec<(String, Stage)> = Vec::new();
    let mut prompt_seen: HashMap<(String, Stage), usize> = HashMap::new();
    for q in queries {
        let s = q.sample();
        let need_after = q.stage() == Stage::Difference;
        match seen.get(s.sample_id()) {
            Some(&i) => {
                let entry: &mut (_, bool) = &mut samples[i];
                entry.1 |= need_after;
            }
            None => {
                seen.insert(s.sample_id(), samples.len());
                samples.push((Arc::clone(s), need_after));
            }
        }
        let key = (q.item().name().to_string(), q.stage());
        if !prompt_seen.contains_key(&key) {
            prompt_seen.insert(key.clone(), prompts.len());
            prompts.push(key);
        }
    }

    let images: Vec<ImagePair> = samples
        .par_iter()
        .map(|(s, need_after)| {
            let load = |r: &crate::data::ImageRef| {
                r.load().map_err(|e| FeatureError::Image { sample: s.sample_id().to_string(), message: e.to_string() })
            };
            let before = encoder.encode_image(&*load(s.before_image())?, ImageSource::Before)?.matrix;
            let after = if *need_after {
                let r = s.after_image().ok_or_else(|| FeatureError::MissingAfter(s.sample_id().to_string()))?;
                Some(Arc::new(encoder.encode_image(&*load(r)?, ImageSource::After)?.matrix))
            } else {
                None
            };
            Ok((Arc::new(before), after))
        })
        .collect::<Result<_, FeatureError>>()?;

    let texts: Vec<Arc<Array1<f64>>> = prompts
        .par_iter()
        .map(|(name, stage)| Ok(Arc::new(encoder.encode_text(&build_prompt(name, *stage)?)?.vector)))
        .collect::<Result<_, FeatureError>>()?;

    Ok(queries
        .iter()
        .map(|q| {
            let (before, after) = &images[seen[q.sample().sample_id()]];
            let text = Arc::clone(&texts[prompt_seen[&(q.item().name().to_string(), q.stage())]]);
            match (q.stage(), after) {
                (Stage::Difference, Some(a)) => FusionInput::new(Arc::clone(before), Arc::clone(a), text),
                _ => FusionInput::single(Arc::clone(before), text),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_item_queries, FoodItem, ImageRef, Sample, StructureTag};
    use crate::encoder::{StubConfig, StubEncoder};
    use image::RgbImage;

    fn sample(id: &str, shade: u8) -> Arc<Sample> {
        let before = ImageRef::Memory(Arc::new(RgbImage::from_pixel(336, 336, image::Rgb([shade, 0, 0]))));
        let after = ImageRef::Memory(Arc::new(RgbImage::from_pixel(336, 336, image::Rgb([0, shade, 0]))));
        let items = vec![
            FoodItem::new("rice", 150.0, Some(50.0), StructureTag::Solid).unwrap(),
            FoodItem::new("chicken", 85.0, Some(85.0), StructureTag::Unknown).unwrap(),
        ];
        Arc::new(Sample::new(id, before, Some(after), items, "t").unwrap())
    }

    #[test]
    fn stage1_shares_one_feature_matrix() {
        let enc = StubEncoder::new(StubConfig::default()).unwrap();
        let s = sample("a", 200);
        let qs = make_item_queries(&s, Stage::Absolute).unwrap();
        let inputs = encode_queries(&qs, &enc).unwrap();
        assert_eq!(inputs.len(), 2);
        assert!(Arc::ptr_eq(&inputs[0].before, &inputs[0].after));
        assert!(Arc::ptr_eq(&inputs[0].before, &inputs[1].before));
        assert_ne!(inputs[0].text, inputs[1].text);
    }

    #[test]
    fn stage2_uses_after_image() {
        let enc = StubEncoder::new(StubConfig::default()).unwrap();
        let s = sample("a", 200);
        let qs = make_item_queries(&s, Stage::Difference).unwrap();
        let inputs = encode_queries(&qs, &enc).unwrap();
        assert!(!inputs[0].duplicated());
        let direct = enc.encode_image(&s.after_image().unwrap().load().unwrap(), ImageSource::After).unwrap();
        assert_eq!(*inputs[1].after, direct.matrix);
        let t = enc.encode_text("What is the difference in weight of the rice in these images?").unwrap();
        assert_eq!(*inputs[0].text, t.vector);
    }
}
