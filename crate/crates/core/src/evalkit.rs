//! Metrics, synthetic corpora, latency measurement and ablation sweeps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::process::Command;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{self, JudgeError, JudgeModel, TrainConfig};
use crate::labeler::{self, LabelError, LabelManifest, LabeledDataset, PartitionConfig, Provenance};
use crate::stateio::{PoolingMode, StateFileHeader, StateLabel, StateRecord, Triplet};
use crate::textsim;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to evaluate")]
    Empty,
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("value {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("baseline command failed: {0}")]
    Baseline(String),
    #[error("sweep value {0:?} has no input data")]
    MissingInput(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub provenance: Provenance,
    pub p: Option<f64>,
    pub tau: f32,
}

/// Confusion counts and metrics with leak (label 1) as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub positive_class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_latency_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigEcho>,
}

impl EvalReport {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
            precision,
            recall,
            f1,
            positive_class: "leak".into(),
            mean_latency_seconds: None,
            config: None,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "              predicted leak  predicted non-leak");
        let _ = writeln!(s, "actual leak   {:>14}  {:>18}", self.tp, self.fn_);
        let _ = writeln!(s, "actual non    {:>14}  {:>18}", self.fp, self.tn);
        let _ = writeln!(s);
        let _ = writeln!(s, "accuracy   {:.4}", self.accuracy);
        let _ = writeln!(s, "precision  {:.4}", self.precision);
        let _ = writeln!(s, "recall     {:.4}", self.recall);
        let _ = writeln!(s, "f1         {:.4}", self.f1);
        if let Some(l) = self.mean_latency_seconds {
            let _ = writeln!(s, "latency    {l:.6} s/datapoint");
        }
        s
    }
}

pub fn evaluate(decisions: &[u8], labels: &[u8]) -> Result<EvalReport> {
    if decisions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: decisions.len(),
            labels: labels.len(),
        });
    }
    if decisions.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = [[0usize; 2]; 2];
    for (index, (&d, &l)) in decisions.iter().zip(labels).enumerate() {
        for value in [d, l] {
            if value > 1 {
                return Err(EvalError::NotBinary { index, value });
            }
        }
        counts[l as usize][d as usize] += 1;
    }
    Ok(EvalReport::from_counts(counts[1][1], counts[0][1], counts[1][0], counts[0][0]))
}

/// Runs the judge over every row of `dataset` and scores its decisions.
pub fn evaluate_model(model: &JudgeModel, dataset: &LabeledDataset, measure_latency: bool) -> Result<EvalReport> {
    let mut decisions = Vec::with_capacity(dataset.len());
    let mut latency = 0.0;
    for row in dataset.rows() {
        let p = model.predict_features(row)?;
        latency += p.latency_seconds;
        decisions.push(p.decision);
    }
    let mut report = evaluate(&decisions, &dataset.labels)?;
    if measure_latency {
        report.mean_latency_seconds = Some(latency / dataset.len() as f64);
    }
    report.config = Some(ConfigEcho {
        provenance: model.provenance.clone(),
        p: None,
        tau: model.tau,
    });
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    /// Two classes at ±u for a random unit direction u.
    SeparableGaussians,
    /// Label is the sign of ⟨state, reference⟩, so states alone carry no signal.
    RagDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub mode: SyntheticMode,
    pub dim: usize,
    pub count: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// State-only features.
    pub dataset: LabeledDataset,
    /// One reference embedding per row (empty for `SeparableGaussians`).
    pub references: Vec<Vec<f32>>,
}

impl SyntheticData {
    /// Features with each row's reference embedding appended.
    pub fn with_references(&self) -> LabeledDataset {
        let ref_dim = self.references.first().map_or(0, Vec::len);
        let mut prov = self.dataset.provenance.clone();
        prov.with_reference = true;
        let mut out = LabeledDataset::new(self.dataset.feature_dim + ref_dim, prov);
        let mut row = Vec::new();
        for (i, r) in self.references.iter().enumerate() {
            row.clear();
            row.extend_from_slice(self.dataset.row(i));
            row.extend_from_slice(r);
            out.push(self.dataset.ids[i].clone(), &row, self.dataset.labels[i]);
        }
        out
    }
}

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn synthetic_provenance(dim: usize) -> Provenance {
    Provenance::from_header(&StateFileHeader::new("synthetic", -1, PoolingMode::MeanAllTokens, dim))
}

/// Point `shift·u + σ·noise`.
fn noisy_point(u: &[f64], shift: f64, sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
    u.iter()
        .map(|&ui| {
            let n: f64 = StandardNormal.sample(rng);
            (shift * ui + sigma * n) as f32
        })
        .collect()
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = random_unit(spec.dim, &mut rng);
    let mut dataset = LabeledDataset::new(spec.dim, synthetic_provenance(spec.dim));
    let mut references = Vec::new();
    match spec.mode {
        SyntheticMode::SeparableGaussians => {
            for i in 0..spec.count {
                let label = (i % 2) as u8;
                let shift = if label == 1 { 1.0 } else { -1.0 };
                let x = noisy_point(&u, shift, spec.sigma, &mut rng);
                dataset.push(format!("syn{i}"), &x, label);
            }
        }
        SyntheticMode::RagDependent => {
            let mut i = 0;
            while dataset.len() < spec.count {
                let a = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let b = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let s = noisy_point(&u, a, spec.sigma, &mut rng);
                let r = noisy_point(&u, b, spec.sigma, &mut rng);
                let ip: f64 = s.iter().zip(&r).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
                i += 1;
                if ip == 0.0 {
                    continue;
                }
                dataset.push(format!("syn{}", i - 1), &s, u8::from(ip > 0.0));
                references.push(r);
            }
        }
    }
    SyntheticData { dataset, references }
}

/// A corpus of text triplets whose Rouge-L scores drive the feature margin:
/// each continuation copies the first `m` of `words` reference words, so its
/// Rouge-L F is `m / words`, and its state vector is `(2·score − 1)·u + σ·noise`.
#[derive(Debug, Clone)]
pub struct ScoredCorpus {
    pub header: StateFileHeader,
    pub states: Vec<StateRecord>,
    pub triplets: Vec<Triplet>,
    /// Embeddings of inputs and references, keyed by record id.
    pub input_embeddings: HashMap<String, Vec<f32>>,
    pub reference_embeddings: HashMap<String, Vec<f32>>,
}

pub fn gen_scored_corpus(dim: usize, count: usize, sigma: f64, seed: u64) -> ScoredCorpus {
    const WORDS: usize = 40;
    const EMBED_DIM: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_unit(dim, &mut rng);
    let mut states = Vec::with_capacity(count);
    let mut triplets = Vec::with_capacity(count);
    let mut input_embeddings = HashMap::new();
    let mut reference_embeddings = HashMap::new();
    for i in 0..count {
        let id = format!("doc{i:05}");
        let input: Vec<String> = (0..20).map(|_| format!("w{}", rng.random_range(0..500))).collect();
        let reference: Vec<String> = (0..WORDS).map(|_| format!("w{}", rng.random_range(0..500))).collect();
        let copied = rng.random_range(0..=WORDS);
        let mut output: Vec<String> = reference[..copied].to_vec();
        output.extend((copied..WORDS).map(|_| format!("f{}", rng.random_range(0..500))));
        let (output, reference) = (output.join(" "), reference.join(" "));
        let score = textsim::score_texts(&output, &reference).0.f_measure;
        let vector = noisy_point(&u, 2.0 * score - 1.0, sigma, &mut rng);
        states.push(StateRecord::new(id.clone(), StateLabel::Unlabeled, vector));
        let to_f32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
        input_embeddings.insert(id.clone(), to_f32(random_unit(EMBED_DIM, &mut rng)));
        reference_embeddings.insert(id.clone(), to_f32(random_unit(EMBED_DIM, &mut rng)));
        triplets.push(Triplet {
            record_id: id,
            input_x: input.join(" "),
            output_y: output,
            reference_t: reference,
            rouge_l_f: Some(score),
            rouge_1_f: None,
            aux: Default::default(),
        });
    }
    let header = StateFileHeader {
        count: count as u64,
        ..StateFileHeader::new("synthetic", -1, PoolingMode::MeanAllTokens, dim)
    };
    ScoredCorpus {
        header,
        states,
        triplets,
        input_embeddings,
        reference_embeddings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub samples: usize,
    pub is_mean_seconds: f64,
    pub is_p95_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_mean_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_p95_seconds: Option<f64>,
    /// Baseline mean divided by judge mean.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
}

fn mean_p95(mut xs: Vec<f64>) -> (f64, f64) {
    xs.sort_by(f64::total_cmp);
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let idx = ((0.95 * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1;
    (mean, xs[idx])
}

/// Runs `cmd` through the shell and collects the `latency_seconds` field of
/// every JSON line it prints.
pub fn run_baseline(cmd: &str) -> Result<Vec<f64>> {
    let out = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .output()
        .map_err(|e| EvalError::Baseline(e.to_string()))?;
    if !out.status.success() {
        return Err(EvalError::Baseline(format!(
            "exit status {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let mut latencies = Vec::new();
    for line in String::from_utf8_lossy(&out.stdout).lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| EvalError::Baseline(format!("bad output line {line:?}: {e}")))?;
        let l = v
            .get("latency_seconds")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| EvalError::Baseline(format!("line without latency_seconds: {line}")))?;
        latencies.push(l);
    }
    if latencies.is_empty() {
        return Err(EvalError::Baseline("no latency lines on stdout".into()));
    }
    Ok(latencies)
}

/// Wall-clock latency of `predict` per datapoint, optionally against an
/// external generate-then-compare baseline.
pub fn latency_bench(model: &JudgeModel, inputs: &[Vec<f32>], baseline_cmd: Option<&str>) -> Result<LatencyReport> {
    if inputs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut times = Vec::with_capacity(inputs.len());
    for x in inputs {
        let start = Instant::now();
        let p = model.predict_features(x)?;
        std::hint::black_box(p);
        times.push(start.elapsed().as_secs_f64());
    }
    let (is_mean, is_p95) = mean_p95(times);
    let mut report = LatencyReport {
        samples: inputs.len(),
        is_mean_seconds: is_mean,
        is_p95_seconds: is_p95,
        baseline_mean_seconds: None,
        baseline_p95_seconds: None,
        speedup: None,
    };
    if let Some(cmd) = baseline_cmd.filter(|c| !c.trim().is_empty()) {
        let (mean, p95) = mean_p95(run_baseline(cmd)?);
        report.baseline_mean_seconds = Some(mean);
        report.baseline_p95_seconds = Some(p95);
        report.speedup = Some(mean / is_mean.max(f64::MIN_POSITIVE));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    DivisionP,
    Layer,
    Pooling,
    RagOnOff,
}

/// Inputs for one sweep point.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub value: String,
    pub header: StateFileHeader,
    pub states: Vec<StateRecord>,
    pub triplets: Vec<Triplet>,
    pub references: Option<HashMap<String, Vec<f32>>>,
    pub p: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub score_field: String,
    pub partition_seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub train: TrainConfig,
    pub measure_latency: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            score_field: "rouge_l_f".into(),
            partition_seed: 0,
            train_fraction: 0.8,
            split_seed: 0,
            train: TrainConfig::default(),
            measure_latency: false,
        }
    }
}

pub struct PipelineOutcome {
    pub model: JudgeModel,
    pub manifest: LabelManifest,
    pub report: EvalReport,
}

/// label → split → train → evaluate on the held-out part.
pub fn run_pipeline(run: &SweepRun, config: &PipelineConfig) -> Result<PipelineOutcome> {
    let assembled = labeler::assemble(
        &run.header,
        &run.states,
        &run.triplets,
        &config.score_field,
        &PartitionConfig::new(run.p, config.partition_seed),
        run.references.as_ref(),
    )?;
    let (train, test) = labeler::split(&assembled.dataset, config.train_fraction, config.split_seed)?;
    let (model, _) = judge::train(&train, &config.train)?;
    let mut report = evaluate_model(&model, &test, config.measure_latency)?;
    if let Some(c) = report.config.as_mut() {
        c.p = Some(run.p);
    }
    Ok(PipelineOutcome {
        model,
        manifest: assembled.manifest,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub method: String,
    pub division: f64,
    pub accuracy: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable table")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:<10} {:>8} {:>8} {:>8} {:>10}", "value", "method", "division", "ACC", "F1", "time");
        for r in &self.rows {
            let time = r.time.map_or_else(|| "-".to_string(), |t| format!("{t:.6}"));
            let _ = writeln!(
                s,
                "{:<12} {:<10} {:>7.0}% {:>8.2} {:>8.2} {:>10}",
                r.value,
                r.method,
                r.division * 100.0,
                r.accuracy * 100.0,
                r.f1 * 100.0,
                time
            );
        }
        s
    }
}

/// One full pipeline per sweep value; runs are independent and evaluated in parallel.
pub fn sweep(axis: SweepAxis, runs: &[SweepRun], config: &PipelineConfig) -> Result<SweepTable> {
    let rows = runs
        .par_iter()
        .map(|run| {
            if run.states.is_empty() {
                return Err(EvalError::MissingInput(run.value.clone()));
            }
            let outcome = run_pipeline(run, config)?;
            let method = if run.references.is_some() { "IS-w/RAG" } else { "IS-w/oRAG" };
            Ok(SweepRow {
                value: run.value.clone(),
                method: method.into(),
                division: run.p,
                accuracy: outcome.report.accuracy,
                f1: outcome.report.f1,
                time: outcome.report.mean_latency_seconds,
                report: outcome.report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { axis, rows })
}

/// Shuffles rows (used to check order independence of metrics).
pub fn shuffled_pairs(decisions: &[u8], labels: &[u8], seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut idx: Vec<usize> = (0..decisions.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (idx.iter().map(|&i| decisions[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> (Vec<u8>, Vec<u8>) {
        let mut d = Vec::new();
        let mut l = Vec::new();
        for (n, dv, lv) in [(tp, 1, 1), (fp, 1, 0), (fn_, 0, 1), (tn, 0, 0)] {
            d.extend(std::iter::repeat_n(dv, n));
            l.extend(std::iter::repeat_n(lv, n));
        }
        (d, l)
    }

    #[test]
    fn fixed_confusion_case() {
        let (d, l) = from_counts(40, 10, 20, 30);
        let r = evaluate(&d, &l).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (40, 10, 20, 30));
        assert!((r.accuracy - 0.70).abs() < 1e-12);
        assert!((r.precision - 0.8).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 8.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_all_negative() {
        let (d, l) = from_counts(5, 0, 0, 7);
        let r = evaluate(&d, &l).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));
        let (d, l) = from_counts(0, 0, 4, 6);
        let r = evaluate(&d, &l).unwrap();
        assert_eq!((r.recall, r.f1, r.precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn evaluate_errors() {
        assert!(matches!(evaluate(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(evaluate(&[1], &[1, 0]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(evaluate(&[2], &[1]), Err(EvalError::NotBinary { index: 0, value: 2 })));
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d: Vec<u8> = (0..500).map(|_| rng.random_range(0..2)).collect();
        let l: Vec<u8> = (0..500).map(|_| rng.random_range(0..2)).collect();
        let (d2, l2) = shuffled_pairs(&d, &l, 9);
        assert_eq!(evaluate(&d, &l).unwrap(), evaluate(&d2, &l2).unwrap());
    }

    #[test]
    fn report_serializes_fn_field() {
        let r = EvalReport::from_counts(1, 2, 3, 4);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["fn"], 3);
        assert_eq!(v["positive_class"], "leak");
        assert!(r.to_table().contains("accuracy   0.5000"));
    }

    #[test]
    fn zero_noise_gaussians_are_nearest_mean_separable() {
        let data = gen_synthetic(&SyntheticSpec {
            mode: SyntheticMode::SeparableGaussians,
            dim: 8,
            count: 100,
            sigma: 1e-9,
            seed: 3,
        });
        let ds = &data.dataset;
        let mut means = [vec![0f64; 8], vec![0f64; 8]];
        let counts = ds.class_counts();
        for (x, &y) in ds.rows().zip(&ds.labels) {
            for (m, v) in means[y as usize].iter_mut().zip(x) {
                *m += f64::from(*v) / counts[y as usize] as f64;
            }
        }
        let dist = |x: &[f32], m: &[f64]| x.iter().zip(m).map(|(a, b)| (f64::from(*a) - b).powi(2)).sum::<f64>();
        for (x, &y) in ds.rows().zip(&ds.labels) {
            let pred = u8::from(dist(x, &means[1]) < dist(x, &means[0]));
            assert_eq!(pred, y);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            mode: SyntheticMode::RagDependent,
            dim: 6,
            count: 50,
            sigma: 0.3,
            seed: 12,
        };
        assert_eq!(gen_synthetic(&spec), gen_synthetic(&spec));
        let data = gen_synthetic(&spec);
        assert_eq!(data.references.len(), 50);
        let both = data.with_references();
        assert_eq!(both.feature_dim, 12);
        for (i, (row, &y)) in both.rows().zip(&both.labels).enumerate() {
            let ip: f64 = row[..6].iter().zip(&row[6..]).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
            assert_eq!(u8::from(ip > 0.0), y, "row {i}");
        }
    }

    #[test]
    fn constant_reference_classifiers_are_chance_on_rag_task() {
        let spec = SyntheticSpec {
            mode: SyntheticMode::RagDependent,
            dim: 32,
            count: 1000,
            sigma: 0.3,
            seed: 5,
        };
        let data = gen_synthetic(&spec);
        let ds = &data.dataset;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        // candidate constant references: the class direction (estimated from the
        // references themselves), its negation and random directions
        let mut mean_ref = vec![0f64; 32];
        for r in &data.references {
            let sign = if r.iter().map(|&x| f64::from(x)).sum::<f64>() >= 0.0 { 1.0 } else { -1.0 };
            for (m, x) in mean_ref.iter_mut().zip(r) {
                *m += sign * f64::from(*x);
            }
        }
        let mut candidates = vec![mean_ref.clone(), mean_ref.iter().map(|x| -x).collect()];
        candidates.extend((0..8).map(|_| random_unit(32, &mut rng)));
        for c in candidates {
            let correct = ds
                .rows()
                .zip(&ds.labels)
                .filter(|(x, &y)| {
                    let ip: f64 = x.iter().zip(&c).map(|(a, b)| f64::from(*a) * b).sum();
                    u8::from(ip > 0.0) == y
                })
                .count();
            let acc = correct as f64 / ds.len() as f64;
            assert!((0.45..=0.55).contains(&acc), "constant-reference accuracy {acc}");
        }
    }

    #[test]
    fn scored_corpus_scores_match_text() {
        let c = gen_scored_corpus(4, 30, 0.1, 2);
        for t in &c.triplets {
            let (rl, _) = textsim::score_texts(&t.output_y, &t.reference_t);
            assert_eq!(Some(rl.f_measure), t.rouge_l_f);
        }
        assert_eq!(c.header.count, 30);
    }

    #[test]
    fn latency_bench_with_and_without_baseline() {
        let model = JudgeModel {
            net: crate::judge::GatedMlp::zeros(4, 8),
            tau: 0.5,
            provenance: synthetic_provenance(4),
        };
        let inputs = vec![vec![0.5f32; 4]; 100];
        let r = latency_bench(&model, &inputs, None).unwrap();
        assert_eq!(r.samples, 100);
        assert!(r.baseline_mean_seconds.is_none() && r.speedup.is_none());
        let r = latency_bench(&model, &inputs, Some("")).unwrap();
        assert!(r.baseline_mean_seconds.is_none());

        let cmd = r#"for i in 1 2 3; do echo '{"latency_seconds": 0.25}'; done"#;
        let r = latency_bench(&model, &inputs, Some(cmd)).unwrap();
        assert_eq!(r.baseline_mean_seconds, Some(0.25));
        assert!(r.is_mean_seconds < 0.25);
        assert!(r.speedup.unwrap() > 1.0);

        assert!(matches!(latency_bench(&model, &inputs, Some("exit 3")), Err(EvalError::Baseline(_))));
        assert!(matches!(latency_bench(&model, &inputs, Some("echo nope")), Err(EvalError::Baseline(_))));
    }

    #[test]
    fn pooling_sweep_is_plumbing() {
        let small = TrainConfig {
            epochs: 3,
            hidden: 8,
            ..Default::default()
        };
        let mk = |pooling: PoolingMode, seed: u64| {
            let mut c = gen_scored_corpus(4, 60, 0.2, seed);
            c.header.pooling = pooling;
            SweepRun {
                value: pooling.to_string(),
                header: c.header,
                states: c.states,
                triplets: c.triplets,
                references: None,
                p: 0.3,
            }
        };
        let runs = vec![mk(PoolingMode::MeanAllTokens, 1), mk(PoolingMode::LastToken, 2)];
        let cfg = PipelineConfig {
            train: small,
            ..Default::default()
        };
        let table = sweep(SweepAxis::Pooling, &runs, &cfg).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].value, "mean");
        assert_eq!(table.rows[1].value, "last");
        assert_eq!(
            table.rows[1].report.config.as_ref().unwrap().provenance.pooling,
            PoolingMode::LastToken
        );
        let again = sweep(SweepAxis::Pooling, &runs, &cfg).unwrap();
        assert_eq!(table.to_json(), again.to_json());
        assert!(table.to_text().contains("IS-w/oRAG"));

        let mut missing = runs.clone();
        missing[0].states.clear();
        assert!(matches!(sweep(SweepAxis::Layer, &missing, &cfg), Err(EvalError::MissingInput(_))));
    }
}
