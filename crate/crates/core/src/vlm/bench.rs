use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use super::{
    build_pair_prompts, parse_structured, AuditRecord, ClientConfig, ImageSlot, MissingPolicy, PromptRole,
    ProviderError, Repair, Strategy, VlmClient, VlmError, VlmPrompt, VlmRequest, VlmResponse,
};
use crate::data::{Sample, Stage};
use crate::evaluation::{aggregate_to_dish, mae_pmae, ItemPrediction, Level, MetricReport, Stratum};

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    pub missing_policy: MissingPolicy,
    pub audit_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSample {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutcome {
    pub strategy: Strategy,
    pub report: MetricReport,
    pub items: Vec<ItemPrediction>,
    pub missing: Vec<MissingSample>,
    pub responses: Vec<(String, VlmResponse)>,
    pub audit: Vec<AuditRecord>,
}

async fn call_with_retry(
    client: &dyn VlmClient,
    request: &VlmRequest,
    retries: u32,
    backoff: Duration,
) -> Result<String, ProviderError> {
    let mut attempt = 0;
    loop {
        match client.complete(request).await {
            Err(ProviderError::Transient(msg)) if attempt < retries => {
                tracing::debug!(sample = request.sample_id.as_str(), attempt, "retrying: {msg}");
                tokio::time::sleep(backoff * 2u32.pow(attempt)).await;
                attempt += 1;
            }
            other => return other,
        }
    }
}

fn stage_of(strategy: Strategy) -> Stage {
    match strategy {
        Strategy::Single => Stage::Absolute,
        _ => Stage::Difference,
    }
}

/// Prompts every sample, parses the answers and scores at dish level.
pub async fn run_benchmark(
    samples: &[Arc<Sample>],
    strategy: Strategy,
    client: Arc<dyn VlmClient>,
    config: &ClientConfig,
    options: &BenchOptions,
) -> Result<BenchOutcome, VlmError> {
    config.validate()?;
    let mut jobs: Vec<(usize, usize, VlmPrompt)> = Vec::new();
    for (si, s) in samples.iter().enumerate() {
        if strategy != Strategy::Single && !s.has_difference_data() {
            return Err(VlmError::Data(format!("sample {} has no after state", s.sample_id())));
        }
        let names: Vec<String> = s.items().iter().map(|i| i.name().to_string()).collect();
        for (pi, p) in build_pair_prompts(&names, strategy)?.into_iter().enumerate() {
            jobs.push((si, pi, p));
        }
    }

    let load_images = !client.offline();
    let backoff = Duration::from_millis(config.backoff_ms);
    let results: Vec<(usize, usize, VlmPrompt, Result<String, ProviderError>)> = stream::iter(jobs)
        .map(|(si, pi, prompt)| {
            let client = Arc::clone(&client);
            let sample = Arc::clone(&samples[si]);
            async move {
                let mut images = Vec::new();
                if load_images {
                    for slot in &prompt.images {
                        let r = match slot {
                            ImageSlot::Before => Some(sample.before_image()),
                            ImageSlot::After => sample.after_image(),
                        };
                        match r.map(|r| r.load()) {
                            Some(Ok(img)) => images.push(img),
                            _ => {
                                let e = ProviderError::Fatal(format!("cannot load {slot:?} image"));
                                return (si, pi, prompt, Err(e));
                            }
                        }
                    }
                }
                let request = VlmRequest {
                    sample_id: sample.sample_id().to_string(),
                    prompt_digest: prompt.digest(),
                    role: prompt.role,
                    text: prompt.text.clone(),
                    expected_keys: prompt.expected_keys.clone(),
                    images,
                };
                let out = call_with_retry(client.as_ref(), &request, config.retries, backoff).await;
                (si, pi, prompt, out)
            }
        })
        .buffer_unordered(config.max_in_flight)
        .collect()
        .await;

    // Order-independent reduction: group by sample id, prompts in build order.
    let mut grouped: BTreeMap<String, Vec<(usize, usize, VlmPrompt, Result<String, ProviderError>)>> = BTreeMap::new();
    for r in results {
        grouped.entry(samples[r.0].sample_id().to_string()).or_default().push(r);
    }
    let now = chrono::Utc::now().to_rfc3339();
    let mut audit = Vec::new();
    let mut responses = Vec::new();
    let mut missing = Vec::new();
    let mut items = Vec::new();
    for (sid, mut rs) in grouped {
        rs.sort_by_key(|r| r.1);
        let sample = &samples[rs[0].0];
        let mut parsed: Vec<(PromptRole, VlmResponse)> = Vec::new();
        let mut failure = None;
        for (_, _, prompt, out) in &rs {
            match out {
                Ok(raw) => {
                    audit.push(AuditRecord {
                        sample_id: sid.clone(),
                        prompt_digest: prompt.digest(),
                        raw: raw.clone(),
                        timestamp: now.clone(),
                    });
                    let resp = parse_structured(raw, &prompt.expected_keys, options.missing_policy);
                    if resp.repair_applied == Repair::Failed {
                        failure.get_or_insert_with(|| "unparseable response".to_string());
                    }
                    responses.push((sid.clone(), resp.clone()));
                    parsed.push((prompt.role, resp));
                }
                Err(e) => {
                    tracing::warn!(sample = sid.as_str(), "provider error: {e}");
                    failure.get_or_insert_with(|| e.to_string());
                }
            }
        }
        if let Some(reason) = failure {
            missing.push(MissingSample { sample_id: sid, reason });
            continue;
        }
        let lookup = |role: PromptRole, name: &str| {
            parsed.iter().find(|(r, _)| *r == role).and_then(|(_, p)| p.parsed.get(name).copied())
        };
        let mut dish = Vec::new();
        for it in sample.items() {
            let pred = match strategy {
                Strategy::Single => lookup(PromptRole::Single, it.name()),
                Strategy::PredictedDifference => lookup(PromptRole::ConsumedPair, it.name()),
                Strategy::DifferenceOfPredictions => {
                    lookup(PromptRole::Before, it.name()).zip(lookup(PromptRole::After, it.name())).map(|(b, a)| b - a)
                }
            };
            let target = match strategy {
                Strategy::Single => it.weight_before(),
                _ => it.consumed().unwrap_or(0.0),
            };
            match pred {
                Some(p) => dish.push(ItemPrediction {
                    sample_id: sid.clone(),
                    item: it.name().to_string(),
                    structure: it.structure(),
                    prediction: p,
                    target,
                }),
                None => {
                    dish.clear();
                    missing.push(MissingSample { sample_id: sid.clone(), reason: format!("no estimate for {}", it.name()) });
                    break;
                }
            }
        }
        items.extend(dish);
    }

    if let Some(path) = &options.audit_path {
        let io = |e: std::io::Error| VlmError::Io(format!("{}: {e}", path.display()));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        for r in &audit {
            writeln!(f, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
        }
        f.flush().map_err(io)?;
    }

    if items.is_empty() {
        let first = missing.first().map_or_else(|| "no samples".to_string(), |m| format!("{}: {}", m.sample_id, m.reason));
        return Err(VlmError::AllSamplesFailed(first));
    }
    let mut ids: Vec<&str> = items.iter().map(|i| i.sample_id.as_str()).collect();
    ids.dedup();
    let dishes = aggregate_to_dish(&items, &ids)?;
    let (p, t): (Vec<f64>, Vec<f64>) = dishes.iter().map(|d| (d.prediction, d.target)).unzip();
    let report = mae_pmae(&p, &t, Level::Dish, stage_of(strategy), Stratum::All)?;
    Ok(BenchOutcome { strategy, report, items, missing, responses, audit })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FoodItem, ImageRef, StructureTag};
    use crate::vlm::{MockEcho, MockEmpty, ReplayClient};
    use futures::future::BoxFuture;
    use image::RgbImage;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn samples() -> Vec<Arc<Sample>> {
        let img = || ImageRef::Memory(Arc::new(RgbImage::new(4, 4)));
        let mk = |id: &str, items: Vec<(&str, f64, f64)>| {
            let items = items
                .into_iter()
                .map(|(n, b, a)| FoodItem::new(n, b, Some(a), StructureTag::Unknown).unwrap())
                .collect();
            Arc::new(Sample::new(id, img(), Some(img()), items, "t").unwrap())
        };
        vec![
            mk("s2", vec![("Rice", 150.0, 50.0), ("Chicken", 85.0, 85.0)]),
            mk("s1", vec![("Apple", 80.0, 20.0)]),
            mk("s3", vec![("Soup", 300.0, 0.0)]),
        ]
    }

    fn fast() -> ClientConfig {
        ClientConfig { backoff_ms: 1, max_in_flight: 2, ..Default::default() }
    }

    #[tokio::test]
    async fn echo_scores_zero() {
        let s = samples();
        for strategy in [Strategy::Single, Strategy::PredictedDifference, Strategy::DifferenceOfPredictions] {
            let out = run_benchmark(&s, strategy, Arc::new(MockEcho::new(&s)), &fast(), &BenchOptions::default()).await.unwrap();
            assert_eq!(out.report.mae, 0.0, "{strategy:?}");
            assert_eq!(out.report.n, 3);
            assert_eq!(out.report.level, Level::Dish);
        }
    }

    #[tokio::test]
    async fn empty_answers_impute_zero() {
        let s = samples();
        let out =
            run_benchmark(&s, Strategy::PredictedDifference, Arc::new(MockEmpty), &fast(), &BenchOptions::default())
                .await
                .unwrap();
        // dish consumed totals: 100, 60, 300
        assert!((out.report.mae - (100.0 + 60.0 + 300.0) / 3.0).abs() < 1e-12);
        assert!(out.responses.iter().all(|(_, r)| r.imputed.len() == r.parsed.len()));
    }

    #[tokio::test]
    async fn replay_is_deterministic() {
        let s = samples();
        let dir = tempfile::tempdir().unwrap();
        let audit = dir.path().join("audit.jsonl");
        let opts = BenchOptions { audit_path: Some(audit.clone()), ..Default::default() };
        let live = run_benchmark(&s, Strategy::DifferenceOfPredictions, Arc::new(MockEcho::new(&s)), &fast(), &opts)
            .await
            .unwrap();
        assert_eq!(live.audit.len(), 6);
        let replay = Arc::new(ReplayClient::load(&audit).unwrap());
        let a = run_benchmark(&s, Strategy::DifferenceOfPredictions, replay.clone(), &fast(), &BenchOptions::default())
            .await
            .unwrap();
        let b = run_benchmark(&s, Strategy::DifferenceOfPredictions, replay, &fast(), &BenchOptions::default())
            .await
            .unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report, live.report);
        // a strategy that was never recorded cannot be served
        let replay = Arc::new(ReplayClient::load(&audit).unwrap());
        let err = run_benchmark(&s, Strategy::Single, replay, &fast(), &BenchOptions::default()).await.unwrap_err();
        assert!(matches!(err, VlmError::AllSamplesFailed(_)));
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl VlmClient for Flaky {
        fn complete<'a>(&'a self, _: &'a VlmRequest) -> BoxFuture<'a, Result<String, ProviderError>> {
            Box::pin(async move {
                let n = self.calls.fetch_add(1, Ordering::SeqCst);
                if n < self.fail_first {
                    Err(ProviderError::Transient("busy".into()))
                } else {
                    Ok("```json\n{\"Apple\": 60, \"Rice\": 100, \"Chicken\": 0, \"Soup\": 300}\n```".into())
                }
            })
        }

        fn offline(&self) -> bool {
            true
        }
    }

    #[tokio::test]
    async fn transient_errors_are_retried_then_marked_missing() {
        let s = samples();
        let cfg = ClientConfig { max_in_flight: 1, ..fast() };
        let c = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 3 });
        let out = run_benchmark(&s[1..2], Strategy::PredictedDifference, c.clone(), &cfg, &BenchOptions::default())
            .await
            .unwrap();
        assert_eq!(c.calls.load(Ordering::SeqCst), 4);
        assert_eq!(out.report.mae, 0.0);
        let c = Arc::new(Flaky { calls: AtomicUsize::new(0), fail_first: 4 });
        let out = run_benchmark(&s[..2], Strategy::PredictedDifference, c, &cfg, &BenchOptions::default()).await.unwrap();
        assert_eq!(out.missing.len(), 1);
        assert_eq!(out.report.n, 1);
    }
}
