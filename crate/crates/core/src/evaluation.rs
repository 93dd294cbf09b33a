//! MAE / PMAE, item-to-dish aggregation, structure strata and the
//! mean-predictor baseline.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ItemQuery, Stage, StructureTag};
use crate::encoder::Encoder;
use crate::features::{encode_queries, FeatureError};
use crate::fusion::{FusionError, FusionInput, FusionModel, FusionOutput};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("length mismatch: {0} predictions, {1} targets")]
    LengthMismatch(usize, usize),
    #[error("prediction for unknown sample `{0}`")]
    OrphanItem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Item,
    Dish,
}

/// A structure stratum, or the pooled population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    Solid,
    AmorphousMixed,
    Unknown,
}

impl From<StructureTag> for Stratum {
    fn from(t: StructureTag) -> Self {
        match t {
            StructureTag::Solid => Stratum::Solid,
            StructureTag::AmorphousMixed => Stratum::AmorphousMixed,
            StructureTag::Unknown => Stratum::Unknown,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stratum::All => "all",
            Stratum::Solid => "solid",
            Stratum::AmorphousMixed => "amorphous_mixed",
            Stratum::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    /// Percent; `None` when the mean target is zero.
    pub pmae: Option<f64>,
    pub n: usize,
    pub level: Level,
    pub stage: Stage,
    pub stratum: Stratum,
    pub mean_gt: f64,
}

/// One scored item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPrediction {
    pub sample_id: String,
    pub item: String,
    pub structure: StructureTag,
    pub prediction: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishPrediction {
    pub sample_id: String,
    pub prediction: f64,
    pub target: f64,
    pub items: usize,
}

pub fn mae_pmae(
    predictions: &[f64],
    targets: &[f64],
    level: Level,
    stage: Stage,
    stratum: Stratum,
) -> Result<MetricReport, EvalError> {
    if predictions.len() != targets.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), targets.len()));
    }
    if targets.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = targets.len();
    let mae = predictions.iter().zip(targets).map(|(p, t)| (t - p).abs()).sum::<f64>() / n as f64;
    let mean_gt = targets.iter().sum::<f64>() / n as f64;
    let pmae = (mean_gt != 0.0).then(|| 100.0 * mae / mean_gt);
    Ok(MetricReport { mae, pmae, n, level, stage, stratum, mean_gt })
}

/// Sums item predictions and targets per sample, in the order of `samples`.
/// Samples without any item prediction are skipped.
pub fn aggregate_to_dish(items: &[ItemPrediction], samples: &[&str]) -> Result<Vec<DishPrediction>, EvalError> {
    let index: HashMap<&str, usize> = samples.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let mut sums: Vec<Option<DishPrediction>> = vec![None; samples.len()];
    for it in items {
        let &i = index.get(it.sample_id.as_str()).ok_or_else(|| EvalError::OrphanItem(it.sample_id.clone()))?;
        let d = sums[i].get_or_insert_with(|| DishPrediction {
            sample_id: it.sample_id.clone(),
            prediction: 0.0,
            target: 0.0,
            items: 0,
        });
        d.prediction += it.prediction;
        d.target += it.target;
        d.items += 1;
    }
    Ok(sums.into_iter().flatten().collect())
}

/// Pooled report first, then one per structure stratum present.
pub fn stratify(items: &[ItemPrediction], stage: Stage) -> Result<Vec<MetricReport>, EvalError> {
    let split = |f: &dyn Fn(&ItemPrediction) -> bool| -> (Vec<f64>, Vec<f64>) {
        items.iter().filter(|i| f(i)).map(|i| (i.prediction, i.target)).unzip()
    };
    let (p, t) = split(&|_| true);
    let mut out = vec![mae_pmae(&p, &t, Level::Item, stage, Stratum::All)?];
    for tag in StructureTag::ALL {
        let (p, t) = split(&|i| i.structure == tag);
        if !p.is_empty() {
            out.push(mae_pmae(&p, &t, Level::Item, stage, tag.into())?);
        }
    }
    Ok(out)
}

pub fn mean_predictor_baseline(
    train_targets: &[f64],
    test_targets: &[f64],
    level: Level,
    stage: Stage,
) -> Result<MetricReport, EvalError> {
    if train_targets.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = train_targets.iter().sum::<f64>() / train_targets.len() as f64;
    mae_pmae(&vec![mean; test_targets.len()], test_targets, level, stage, Stratum::All)
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

pub fn predict_inputs(model: &FusionModel, inputs: &[FusionInput]) -> Result<Vec<FusionOutput>, FusionError> {
    inputs.par_iter().map(|i| model.forward(i)).collect()
}

/// Runs the model over queries and pairs each output with its ground truth.
pub fn predict_queries(
    model: &FusionModel,
    queries: &[ItemQuery],
    encoder: &dyn Encoder,
) -> Result<(Vec<ItemPrediction>, Vec<FusionOutput>), PredictError> {
    let inputs = encode_queries(queries, encoder)?;
    let outs = predict_inputs(model, &inputs)?;
    let preds = queries
        .iter()
        .zip(&outs)
        .map(|(q, o)| ItemPrediction {
            sample_id: q.sample().sample_id().to_string(),
            item: q.item().name().to_string(),
            structure: q.item().structure(),
            prediction: o.prediction,
            target: q.target(),
        })
        .collect();
    Ok((preds, outs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub checkpoint_digest: String,
    pub dataset_tag: String,
    pub seed: u64,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: RunMetadata,
    pub reports: Vec<MetricReport>,
    pub baseline: Option<MetricReport>,
    pub items: Vec<ItemPrediction>,
}

impl EvalReport {
    /// Item-level strata followed by the pooled dish-level report.
    pub fn build(
        metadata: RunMetadata,
        items: Vec<ItemPrediction>,
        samples: &[&str],
        train_targets: Option<&[f64]>,
    ) -> Result<Self, EvalError> {
        let stage = metadata.stage;
        let mut reports = stratify(&items, stage)?;
        let dishes = aggregate_to_dish(&items, samples)?;
        let (p, t): (Vec<f64>, Vec<f64>) = dishes.iter().map(|d| (d.prediction, d.target)).unzip();
        reports.push(mae_pmae(&p, &t, Level::Dish, stage, Stratum::All)?);
        let test: Vec<f64> = items.iter().map(|i| i.target).collect();
        let baseline = train_targets.map(|tr| mean_predictor_baseline(tr, &test, Level::Item, stage)).transpose()?;
        Ok(Self { metadata, reports, baseline, items })
    }

    pub fn pooled(&self, level: Level) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.level == level && r.stratum == Stratum::All)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(sample: &str, tag: StructureTag, p: f64, t: f64) -> ItemPrediction {
        ItemPrediction { sample_id: sample.into(), item: "x".into(), structure: tag, prediction: p, target: t }
    }

    #[test]
    fn metric_examples() {
        let r = mae_pmae(&[10.0, 20.0], &[12.0, 18.0], Level::Item, Stage::Absolute, Stratum::All).unwrap();
        assert_eq!(r.mae, 2.0);
        assert_eq!(r.mean_gt, 15.0);
        assert!((r.pmae.unwrap() - 13.333_333_333_333).abs() < 1e-9);
        let r = mae_pmae(&[5.0, 7.0], &[5.0, 7.0], Level::Item, Stage::Absolute, Stratum::All).unwrap();
        assert_eq!((r.mae, r.pmae), (0.0, Some(0.0)));
        let z = mae_pmae(&[1.0, -1.0], &[2.0, -2.0], Level::Item, Stage::Difference, Stratum::All).unwrap();
        assert_eq!(z.mae, 1.0);
        assert_eq!(z.pmae, None);
        assert_eq!(mae_pmae(&[], &[], Level::Item, Stage::Absolute, Stratum::All), Err(EvalError::Empty));
    }

    #[test]
    fn dish_sums() {
        let items = [
            item("a", StructureTag::Solid, 50.0, 40.0),
            item("a", StructureTag::Solid, 100.0, 90.0),
            item("a", StructureTag::Solid, 30.0, 60.0),
            item("b", StructureTag::Unknown, 5.0, 6.0),
        ];
        let d = aggregate_to_dish(&items, &["b", "a", "c"]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].sample_id, "b");
        assert_eq!(d[1].prediction, 180.0);
        assert_eq!(d[1].target, 190.0);
        assert_eq!(aggregate_to_dish(&items, &["a"]), Err(EvalError::OrphanItem("b".into())));
    }

    #[test]
    fn strata_conserve_counts() {
        let mut items = vec![item("a", StructureTag::Solid, 1.0, 2.0); 3];
        items.extend(vec![item("b", StructureTag::Unknown, 4.0, 1.0); 7]);
        let r = stratify(&items, Stage::Absolute).unwrap();
        assert_eq!(r.len(), 3);
        assert_eq!(r[0].n, 10);
        assert_eq!(r[1].stratum, Stratum::Solid);
        assert_eq!(r[2].stratum, Stratum::Unknown);
        assert!((r[0].mae - (3.0 * r[1].mae + 7.0 * r[2].mae) / 10.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_examples() {
        let b = mean_predictor_baseline(&[100.0, 100.0], &[50.0, 150.0], Level::Item, Stage::Difference).unwrap();
        assert_eq!(b.mae, 50.0);
        assert_eq!(b.pmae, Some(50.0));
        let b = mean_predictor_baseline(&[90.0, 110.0], &[100.0; 3], Level::Item, Stage::Absolute).unwrap();
        assert_eq!(b.mae, 0.0);
        let b = mean_predictor_baseline(&[100.0], &[130.0], Level::Item, Stage::Absolute).unwrap();
        assert_eq!(b.mae, 30.0);
    }
}
