//! Benchmark fan-out: one experiment per application binary, bounded
//! concurrency, geometric-mean aggregation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;

use crate::client::{Client, ClientError, WaitOutcome};
use crate::experiment::{ExperimentId, ExperimentState};
use crate::manager::{CreateRequest, RunRequest};
use crate::sysdef::{ParamKind, Phase, SysDef, SystemRef};

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("no metrics to aggregate")]
    EmptyMetrics,
    #[error("metric #{0} is not a positive number")]
    NonPositiveMetric(usize),
}

/// Geometric mean, computed as `exp(mean(ln x))`.
pub fn aggregate_score(metrics: &[f64]) -> Result<f64, ScoreError> {
    if metrics.is_empty() {
        return Err(ScoreError::EmptyMetrics);
    }
    let mut sum = 0.0;
    for (i, &m) in metrics.iter().enumerate() {
        if !(m > 0.0 && m.is_finite()) {
            return Err(ScoreError::NonPositiveMetric(i));
        }
        sum += m.ln();
    }
    Ok((sum / metrics.len() as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub app: String,
    pub experiment: ExperimentId,
    pub metric: f64,
    /// API paths of the fetched result files.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchFailure {
    pub app: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<ExperimentId>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub system: SystemRef,
    pub results: Vec<BenchResult>,
    /// Geometric mean over successful results; absent when none succeeded.
    pub score: Option<f64>,
    pub failures: Vec<BenchFailure>,
    pub succeeded: usize,
    pub failed: usize,
}

impl BenchReport {
    pub fn table(&self) -> String {
        let width = self.results.iter().map(|r| r.app.len()).chain(self.failures.iter().map(|f| f.app.len())).max().unwrap_or(3).max(3);
        let mut out = format!("{:<width$}  {:<36}  {}\n", "app", "experiment", "metric");
        for r in &self.results {
            out += &format!("{:<width$}  {:<36}  {:.6}\n", r.app, r.experiment.to_string(), r.metric);
        }
        for f in &self.failures {
            let exp = f.experiment.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
            out += &format!("{:<width$}  {:<36}  FAILED: {}\n", f.app, exp, f.reason);
        }
        match self.score {
            Some(s) => out += &format!("score {s:.6} over {} of {} apps\n", self.succeeded, self.succeeded + self.failed),
            None => out += &format!("no score: 0 of {} apps succeeded\n", self.failed),
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub system: SystemRef,
    pub apps_dir: PathBuf,
    /// File parameter that receives each app binary.
    pub param: String,
    pub metric_result: String,
    /// JSON pointer into the metric result, e.g. `/speed`.
    pub pointer: String,
    pub parallel: usize,
    pub timeout_s: Option<f64>,
    pub overrides: BTreeMap<String, Value>,
    pub poll: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Splits `result:/json/pointer`.
pub fn parse_metric_spec(spec: &str) -> Result<(String, String), String> {
    let (name, pointer) = spec.split_once(':').ok_or_else(|| format!("metric `{spec}` must look like RESULT:/pointer"))?;
    if name.is_empty() || !(pointer.is_empty() || pointer.starts_with('/')) {
        return Err(format!("metric `{spec}` must look like RESULT:/pointer"));
    }
    Ok((name.to_string(), pointer.to_string()))
}

pub fn list_apps(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut apps: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    apps.sort();
    Ok(apps)
}

pub fn extract_metric(doc: &[u8], pointer: &str) -> Result<f64, String> {
    let value: Value = serde_json::from_slice(doc).map_err(|e| format!("metric result is not JSON: {e}"))?;
    let found = value.pointer(pointer).ok_or_else(|| format!("pointer `{pointer}` matches nothing"))?;
    let metric = found.as_f64().ok_or_else(|| format!("value at `{pointer}` is not a number: {found}"))?;
    if metric > 0.0 && metric.is_finite() {
        Ok(metric)
    } else {
        Err(format!("metric {metric} is not positive"))
    }
}

struct AppFailure {
    experiment: Option<ExperimentId>,
    reason: String,
}

fn fail(experiment: Option<ExperimentId>, reason: impl Into<String>) -> AppFailure {
    AppFailure { experiment, reason: reason.into() }
}

async fn settle(client: &Client, id: ExperimentId, poll: Duration) -> Result<(ExperimentState, Option<String>), AppFailure> {
    match client.wait(id, poll, None).await {
        Ok(WaitOutcome::Settled(st)) | Ok(WaitOutcome::TimedOut(st)) => Ok((st.status, st.message)),
        Err(e) => Err(fail(Some(id), e.to_string())),
    }
}

async fn run_app(client: &Client, opts: &BenchOptions, def: &SysDef, app: &Path) -> Result<BenchResult, AppFailure> {
    let app_name = app.file_name().and_then(|n| n.to_str()).unwrap_or("app").to_string();
    let mut run_overrides = BTreeMap::new();
    let mut create = CreateRequest { system: opts.system.clone(), description: Some(format!("bench {app_name}")), ..Default::default() };
    for (k, v) in &opts.overrides {
        match def.param(k).map(|p| p.phase) {
            Some(Phase::Build) => {
                create.build_parameters.insert(k.clone(), v.clone());
            }
            _ => {
                run_overrides.insert(k.clone(), v.clone());
            }
        }
    }
    let id = client.create(&create).await.map_err(|e| fail(None, e.to_string()))?;
    let err = |e: ClientError| fail(Some(id), e.to_string());

    // A build-phase file must be in place before the build; a run-phase
    // upload after the build keeps it valid.
    let build_input = def.param(&opts.param).is_some_and(|p| p.phase == Phase::Build);
    if build_input {
        client.upload(id, &opts.param, app).await.map_err(err)?;
    }
    if client.build(id, opts.timeout_s).await.map_err(err)? == ExperimentState::Building {
        let (state, message) = settle(client, id, opts.poll).await?;
        if state != ExperimentState::Built {
            return Err(fail(Some(id), format!("build ended {state}: {}", message.unwrap_or_default())));
        }
    }
    if !build_input {
        client.upload(id, &opts.param, app).await.map_err(err)?;
    }
    let req = RunRequest { timeout_s: opts.timeout_s, run_parameters: run_overrides };
    client.run(id, &req).await.map_err(err)?;
    let (state, message) = settle(client, id, opts.poll).await?;
    if state != ExperimentState::Completed {
        return Err(fail(Some(id), format!("run ended {state}: {}", message.unwrap_or_default())));
    }
    let doc = client.result(id, &opts.metric_result).await.map_err(err)?;
    let metric = extract_metric(&doc, &opts.pointer).map_err(|r| fail(Some(id), r))?;
    Ok(BenchResult {
        app: app_name,
        experiment: id,
        metric,
        artifacts: vec![format!("/v1/session/{id}/result/{}", opts.metric_result)],
    })
}

/// Runs the fan-out. At most `opts.parallel` app pipelines are in flight.
pub async fn run_bench(client: &Client, opts: &BenchOptions) -> Result<BenchReport, BenchError> {
    if opts.parallel == 0 {
        return Err(BenchError::Usage("--parallel must be at least 1".into()));
    }
    let apps = list_apps(&opts.apps_dir)
        .map_err(|e| BenchError::Usage(format!("cannot read {}: {e}", opts.apps_dir.display())))?;
    if apps.is_empty() {
        return Err(BenchError::Usage(format!("{} contains no app files", opts.apps_dir.display())));
    }
    let def = Arc::new(client.system(&opts.system).await?);
    if def.result(&opts.metric_result).is_none() {
        return Err(BenchError::Usage(format!("system does not declare a result `{}`", opts.metric_result)));
    }
    match def.param(&opts.param) {
        Some(p) if p.default.kind() == ParamKind::File => {}
        _ => return Err(BenchError::Usage(format!("`{}` is not a file parameter of the system", opts.param))),
    }

    let gate = Arc::new(Semaphore::new(opts.parallel));
    let mut tasks = tokio::task::JoinSet::new();
    for (index, app) in apps.iter().cloned().enumerate() {
        let client = client.clone();
        let opts = opts.clone();
        let gate = gate.clone();
        let def = def.clone();
        tasks.spawn(async move {
            let _permit = gate.acquire_owned().await.expect("semaphore never closed");
            (index, app.clone(), run_app(&client, &opts, &def, &app).await)
        });
    }
    let mut outcomes = Vec::with_capacity(apps.len());
    while let Some(joined) = tasks.join_next().await {
        outcomes.push(joined.map_err(|e| BenchError::Usage(format!("bench task failed: {e}")))?);
    }
    outcomes.sort_by_key(|(i, _, _)| *i);

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (_, app, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(f) => failures.push(BenchFailure {
                app: app.file_name().and_then(|n| n.to_str()).unwrap_or("app").to_string(),
                experiment: f.experiment,
                reason: f.reason,
            }),
        }
    }
    let metrics: Vec<f64> = results.iter().map(|r| r.metric).collect();
    let score = aggregate_score(&metrics).ok();
    Ok(BenchReport {
        system: opts.system.clone(),
        succeeded: results.len(),
        failed: failures.len(),
        results,
        score,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn score_examples() {
        assert_eq!(aggregate_score(&[1.0, 1.0, 1.0]), Ok(1.0));
        assert_eq!(aggregate_score(&[2.0, 8.0]), Ok(4.0));
        assert_eq!(aggregate_score(&[1.0]), Ok(1.0));
        assert_eq!(aggregate_score(&[]), Err(ScoreError::EmptyMetrics));
        assert_eq!(aggregate_score(&[1.0, 0.0]), Err(ScoreError::NonPositiveMetric(1)));
        assert_eq!(aggregate_score(&[-2.0]), Err(ScoreError::NonPositiveMetric(0)));
        assert_eq!(aggregate_score(&[f64::NAN]), Err(ScoreError::NonPositiveMetric(0)));
    }

    #[test]
    fn score_survives_overflowing_products() {
        let big = vec![1e300; 10];
        let s = aggregate_score(&big).unwrap();
        assert!((s - 1e300).abs() / 1e300 < 1e-12);
    }

    proptest! {
        #[test]
        fn score_matches_product_root(xs in prop::collection::vec(0.1f64..10.0, 1..20)) {
            let oracle = xs.iter().product::<f64>().powf(1.0 / xs.len() as f64);
            let got = aggregate_score(&xs).unwrap();
            prop_assert!(((got - oracle) / oracle).abs() <= 1e-12);
        }

        #[test]
        fn score_is_permutation_invariant(mut xs in prop::collection::vec(0.1f64..10.0, 1..20), seed in any::<u64>()) {
            let a = aggregate_score(&xs).unwrap();
            let n = xs.len();
            xs.rotate_left((seed as usize) % n);
            xs.reverse();
            let b = aggregate_score(&xs).unwrap();
            prop_assert!(((a - b) / a).abs() <= 1e-12);
        }
    }

    #[test]
    fn metric_spec_and_extraction() {
        assert_eq!(parse_metric_spec("metrics:/speed").unwrap(), ("metrics".into(), "/speed".into()));
        assert_eq!(parse_metric_spec("metrics:").unwrap(), ("metrics".into(), "".into()));
        assert!(parse_metric_spec("metrics").is_err());
        assert!(parse_metric_spec("metrics:speed").is_err());
        assert_eq!(extract_metric(br#"{"a":{"b":2.5}}"#, "/a/b"), Ok(2.5));
        assert_eq!(extract_metric(b"3", ""), Ok(3.0));
        assert!(extract_metric(br#"{"a":0}"#, "/a").is_err());
        assert!(extract_metric(br#"{"a":"x"}"#, "/a").is_err());
        assert!(extract_metric(b"nope", "/a").is_err());
    }

    #[test]
    fn report_table() {
        let id = ExperimentId::new();
        let r = BenchReport {
            system: SystemRef { name: "s".into(), version: "1".into() },
            results: vec![BenchResult { app: "crc32".into(), experiment: id, metric: 2.0, artifacts: vec![] }],
            score: Some(2.0),
            failures: vec![BenchFailure { app: "nettle".into(), experiment: None, reason: "boom".into() }],
            succeeded: 1,
            failed: 1,
        };
        let t = r.table();
        assert!(t.contains("crc32") && t.contains("FAILED: boom") && t.contains("score 2.000000 over 1 of 2 apps"));
    }
}
