//! `isacl` command-line entry point.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::evalkit::{self, PipelineConfig, SweepAxis, SweepRun};
use crate::gate::{self, Gate};
use crate::judge::{self, JudgeModel, Precision, TrainConfig};
use crate::labeler::{self, LabeledDataset, PartitionConfig, Provenance};
use crate::refdb::{BuildConfig, RefDb, RefInput};
use crate::stateio::{self, PoolingMode, StateFileHeader, StateLabel, StateRecord};
use crate::textsim;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

/// Marks an error as a usage problem (exit code 1) rather than a data problem.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "isacl", version, about = "Pre-decoding leakage-risk judge over LLM internal states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fill rouge_l_f (and rouge_1_f) into a triplet file.
    Score(ScoreArgs),
    /// Partition scored triplets into leak / non-disclosure and write a labeled state file.
    Label(LabelArgs),
    /// Build the IVF reference database.
    BuildDb(BuildDbArgs),
    /// Look up the nearest reference for one embedding.
    QueryDb(QueryDbArgs),
    /// Train the judge on a labeled state file.
    Train(TrainArgs),
    /// Run the judge over a state file and write JSONL predictions.
    Predict(PredictArgs),
    /// Evaluate a model on a labeled state file.
    Eval(EvalArgs),
    /// Ablation sweep: one label→train→evaluate run per axis value.
    Sweep(SweepArgs),
    /// Serve allow/block decisions over newline-delimited JSON on TCP.
    Serve(ServeArgs),
    /// Write a synthetic corpus (triplets, states, pairs, embeddings) to a directory.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Triplet JSONL input.
    #[arg(long)]
    input: PathBuf,
    /// Scored triplet JSONL output.
    #[arg(long)]
    output: PathBuf,
    /// Skip the Rouge-1 column.
    #[arg(long)]
    no_rouge_1: bool,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    states: PathBuf,
    /// State file of reference embeddings keyed by record id.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Append reference embeddings to each state vector (requires --refs).
    #[arg(long)]
    with_reference: bool,
    /// Division fraction: top p labeled leak, bottom p non-disclosure.
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Score column used for ranking: rouge_l_f, rouge_1_f or an aux key.
    #[arg(long, default_value = "rouge_l_f")]
    score_field: String,
    #[arg(long)]
    output: PathBuf,
    /// Run manifest path (default: <output>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BuildDbArgs {
    /// Pair JSONL with id, input, reference.
    #[arg(long)]
    pairs: PathBuf,
    /// State file of reference-text embeddings keyed by pair id.
    #[arg(long)]
    embeddings: PathBuf,
    /// State file of input-text embeddings used as search keys (default: reference embeddings).
    #[arg(long)]
    keys: Option<PathBuf>,
    /// Number of clusters (default ⌈√N⌉).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1)]
    nprobe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "refdb.bin")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct QueryDbArgs {
    #[arg(long)]
    db: PathBuf,
    /// Query embedding as comma-separated floats.
    #[arg(long, conflicts_with = "from_states")]
    vector: Option<String>,
    /// Take the query from this state file (with --id).
    #[arg(long, requires = "id")]
    from_states: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    /// Lists to probe (default: the database's configured value).
    #[arg(long)]
    nprobe: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = judge::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    train_seed: u64,
    /// Decision threshold stored in the model.
    #[arg(long, default_value_t = judge::DEFAULT_TAU)]
    tau: f32,
    /// Train in 64-bit floats.
    #[arg(long)]
    f64: bool,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            hidden: self.hidden,
            seed: self.train_seed,
            tau: self.tau,
            precision: if self.f64 { Precision::F64 } else { Precision::F32 },
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Labeled state file from `label`.
    #[arg(long)]
    data: PathBuf,
    /// Label manifest (default: <data>.manifest.json when present).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Hold out a stratified test split and write it here.
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    states: PathBuf,
    /// Reference embeddings keyed by record id (reference-augmented models).
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Retrieve references from this database instead of --refs.
    #[arg(long, requires = "queries")]
    refdb: Option<PathBuf>,
    /// Query embeddings keyed by record id, used with --refdb.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// JSONL output (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled state file (e.g. the holdout written by `train`).
    #[arg(long)]
    data: PathBuf,
    /// External generate-then-compare command printing JSON lines with latency_seconds.
    #[arg(long)]
    baseline_cmd: Option<String>,
    /// JSON report output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum AxisArg {
    DivisionP,
    Layer,
    Pooling,
    RagOnOff,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Axis values, comma-separated (division-p: fractions; rag-on-off: on,off).
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    #[arg(long)]
    triplets: PathBuf,
    /// State file for division-p and rag-on-off sweeps.
    #[arg(long)]
    states: Option<PathBuf>,
    /// Per-value state files for layer and pooling sweeps, as VALUE=PATH.
    #[arg(long = "input", value_name = "VALUE=PATH")]
    inputs: Vec<String>,
    /// Reference embeddings (needed for rag-on-off, optional otherwise).
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Division fraction for axes other than division-p.
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "rouge_l_f")]
    score_field: String,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[command(flatten)]
    train: TrainFlags,
    /// Record per-datapoint latency (makes output non-reproducible).
    #[arg(long)]
    timing: bool,
    /// JSON table output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, env = "ISACL_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "ISACL_REFDB")]
    refdb: Option<PathBuf>,
    #[arg(long, env = "ISACL_BIND")]
    bind: Option<String>,
    #[arg(long, env = "ISACL_TAU_OVERRIDE")]
    tau_override: Option<f32>,
    /// TOML file with model, refdb, bind, tau_override keys (lowest precedence).
    #[arg(long, env = "ISACL_CONFIG")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 400)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Score(a) => score(a),
        Command::Label(a) => label(a),
        Command::BuildDb(a) => build_db(a),
        Command::QueryDb(a) => query_db(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let mut triplets = stateio::read_triplets(&a.input)?;
    triplets.par_iter_mut().for_each(|t| {
        let (rl, r1) = textsim::score_texts(&t.output_y, &t.reference_t);
        t.rouge_l_f = Some(rl.f_measure);
        if !a.no_rouge_1 {
            t.rouge_1_f = Some(r1.f_measure);
        }
    });
    stateio::write_jsonl(&a.output, &triplets)?;
    eprintln!("scored {} triplets -> {}", triplets.len(), a.output.display());
    Ok(())
}

fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn vectors_by_id(path: &Path) -> Result<(StateFileHeader, HashMap<String, Vec<f32>>)> {
    let (header, records) =
        stateio::read_state_file(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((header, records.into_iter().map(|r| (r.record_id, r.vector)).collect()))
}

fn label(a: LabelArgs) -> Result<()> {
    if a.with_reference && a.refs.is_none() {
        return Err(usage("--with-reference requires --refs"));
    }
    let triplets = stateio::read_triplets(&a.triplets)?;
    let (header, states) = stateio::read_state_file(&a.states)?;
    let refs = match (&a.refs, a.with_reference) {
        (Some(p), true) => Some(vectors_by_id(p)?.1),
        _ => None,
    };
    let assembled = labeler::assemble(
        &header,
        &states,
        &triplets,
        &a.score_field,
        &PartitionConfig::new(a.p, a.seed),
        refs.as_ref(),
    )?;
    let ds = &assembled.dataset;
    stateio::write_state_file(&ds.to_header(), &ds.to_records(), &a.output)?;
    let manifest_out = a.manifest.unwrap_or_else(|| manifest_path(&a.output));
    fs::write(&manifest_out, serde_json::to_string_pretty(&assembled.manifest)?)?;
    let m = &assembled.manifest;
    eprintln!(
        "labeled {} of {} records ({} leak, {} non-disclosure); thresholds lower={:?} upper={:?}",
        ds.len(),
        m.total,
        m.leak,
        m.non_disclosure,
        m.lower_threshold,
        m.upper_threshold
    );
    Ok(())
}

fn build_db(a: BuildDbArgs) -> Result<()> {
    let pairs = stateio::read_pairs(&a.pairs)?;
    let (_, refs) = vectors_by_id(&a.embeddings)?;
    let keys = a.keys.as_deref().map(vectors_by_id).transpose()?.map(|(_, k)| k);
    let rows = pairs
        .into_iter()
        .map(|p| {
            let reference_embedding = refs
                .get(&p.id)
                .cloned()
                .with_context(|| format!("no reference embedding for pair {:?}", p.id))?;
            let key = match &keys {
                Some(k) => Some(k.get(&p.id).cloned().with_context(|| format!("no key embedding for pair {:?}", p.id))?),
                None => None,
            };
            Ok(RefInput {
                id: p.id,
                input: p.input,
                reference: p.reference,
                key,
                reference_embedding,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let config = BuildConfig {
        k: a.k,
        nprobe: a.nprobe,
        seed: a.seed,
        ..Default::default()
    };
    let db = RefDb::build(rows, &config)?;
    db.store(&a.output)?;
    eprintln!(
        "built database: {} entries, {} clusters, largest list {} -> {}",
        db.len(),
        db.index.k(),
        db.index.max_list_len(),
        a.output.display()
    );
    Ok(())
}

fn parse_vector(s: &str) -> Result<Vec<f32>> {
    s.split(',')
        .map(|x| x.trim().parse::<f32>().map_err(|e| usage(format!("bad float {x:?}: {e}"))))
        .collect()
}

fn query_db(a: QueryDbArgs) -> Result<()> {
    let db = RefDb::load(&a.db)?;
    let query = match (&a.vector, &a.from_states, &a.id) {
        (Some(v), _, _) => parse_vector(v)?,
        (None, Some(p), Some(id)) => vectors_by_id(p)?
            .1
            .remove(id)
            .with_context(|| format!("id {id:?} not in {}", p.display()))?,
        _ => return Err(usage("give --vector or --from-states with --id")),
    };
    let result = db.ivf_search(&query, a.nprobe.unwrap_or(db.nprobe))?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

/// Any manifest carrying the provenance of a labeled state file.
#[derive(Deserialize)]
struct ManifestProvenance {
    provenance: Provenance,
}

fn load_labeled(data: &Path, manifest: Option<&Path>) -> Result<LabeledDataset> {
    let (header, records) = stateio::read_state_file(data)?;
    let manifest_file = manifest.map(Path::to_path_buf).unwrap_or_else(|| manifest_path(data));
    let provenance = if manifest_file.exists() {
        let m: ManifestProvenance = serde_json::from_str(&fs::read_to_string(&manifest_file)?)
            .with_context(|| format!("parsing {}", manifest_file.display()))?;
        Some(m.provenance)
    } else if manifest.is_some() {
        bail!("manifest {} not found", manifest_file.display());
    } else {
        None
    };
    let ds = LabeledDataset::from_records(&header, &records, provenance);
    if ds.is_empty() {
        bail!("{} contains no labeled records", data.display());
    }
    Ok(ds)
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load_labeled(&a.data, a.manifest.as_deref())?;
    let train_set = match &a.holdout {
        Some(path) => {
            let (train_set, test_set) = labeler::split(&ds, a.train_fraction, a.split_seed)?;
            stateio::write_state_file(&test_set.to_header(), &test_set.to_records(), path)?;
            let [neg, pos] = test_set.class_counts();
            let manifest = serde_json::json!({
                "holdout_of": a.data,
                "train_fraction": a.train_fraction,
                "split_seed": a.split_seed,
                "total": test_set.len(),
                "leak": pos,
                "non_disclosure": neg,
                "provenance": test_set.provenance,
            });
            fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
            train_set
        }
        None => ds,
    };
    let (model, report) = judge::train(&train_set, &a.train.config())?;
    model.save(&a.output)?;
    eprintln!(
        "trained on {} rows in {:.2}s ({} steps, final epoch loss {:.5}) -> {}",
        train_set.len(),
        report.seconds,
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        a.output.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    #[serde(flatten)]
    prediction: judge::Prediction,
    #[serde(skip_serializing_if = "Option::is_none")]
    retrieved_entry_id: Option<String>,
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = JudgeModel::load(&a.model)?;
    let (_, states) = stateio::read_state_file(&a.states)?;
    let refs = a.refs.as_deref().map(vectors_by_id).transpose()?.map(|(_, r)| r);
    let retrieval = match (&a.refdb, &a.queries) {
        (Some(db), Some(q)) => Some((RefDb::load(db)?, vectors_by_id(q)?.1)),
        _ => None,
    };
    if model.provenance.with_reference && refs.is_none() && retrieval.is_none() {
        return Err(usage("this model needs reference embeddings: pass --refs or --refdb with --queries"));
    }
    let mut lines = Vec::with_capacity(states.len());
    for s in &states {
        let mut retrieved_entry_id = None;
        let reference: Option<Vec<f32>> = if !model.provenance.with_reference {
            None
        } else if let Some(r) = &refs {
            Some(r.get(&s.record_id).cloned().with_context(|| format!("no reference for {:?}", s.record_id))?)
        } else {
            let (db, queries) = retrieval.as_ref().expect("checked above");
            let q = queries
                .get(&s.record_id)
                .with_context(|| format!("no query embedding for {:?}", s.record_id))?;
            let hit = db.retrieve(q)?;
            retrieved_entry_id = Some(hit.entry_id);
            Some(hit.embedding)
        };
        let prediction = model
            .predict(&s.vector, reference.as_deref())
            .with_context(|| format!("record {:?}", s.record_id))?;
        lines.push(PredictionLine {
            id: s.record_id.clone(),
            prediction,
            retrieved_entry_id,
        });
    }
    match &a.output {
        Some(p) => stateio::write_jsonl(p, &lines)?,
        None => {
            for l in &lines {
                println!("{}", serde_json::to_string(l)?);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    report: evalkit::EvalReport,
    latency: evalkit::LatencyReport,
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = JudgeModel::load(&a.model)?;
    let ds = load_labeled(&a.data, None)?;
    if ds.feature_dim != model.d_in() {
        bail!("data has {} features, model expects {}", ds.feature_dim, model.d_in());
    }
    let report = evalkit::evaluate_model(&model, &ds, true)?;
    let inputs: Vec<Vec<f32>> = ds.rows().map(<[f32]>::to_vec).collect();
    let latency = evalkit::latency_bench(&model, &inputs, a.baseline_cmd.as_deref())?;
    print!("{}", report.to_table());
    println!("judge latency mean {:.6}s p95 {:.6}s", latency.is_mean_seconds, latency.is_p95_seconds);
    if let (Some(b), Some(s)) = (latency.baseline_mean_seconds, latency.speedup) {
        println!("baseline latency mean {b:.6}s ({s:.1}x slower)");
    }
    if let Some(out) = &a.output {
        fs::write(out, serde_json::to_string_pretty(&EvalOutput { report, latency })?)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let triplets = stateio::read_triplets(&a.triplets)?;
    let refs = a.refs.as_deref().map(vectors_by_id).transpose()?.map(|(_, r)| r);
    let base_states = a.states.as_deref().map(stateio::read_state_file).transpose()?;
    let (axis, runs) = match a.axis {
        AxisArg::DivisionP | AxisArg::RagOnOff => {
            let (header, states) = base_states.ok_or_else(|| usage("--states is required for this axis"))?;
            if a.values.is_empty() {
                return Err(usage("--values is required"));
            }
            let mut runs = Vec::new();
            for v in &a.values {
                let (p, references) = if let AxisArg::DivisionP = a.axis {
                    let p: f64 = v.parse().map_err(|_| usage(format!("bad division value {v:?}")))?;
                    (p, refs.clone())
                } else {
                    match v.as_str() {
                        "on" => (a.p, Some(refs.clone().ok_or_else(|| usage("rag-on-off needs --refs"))?)),
                        "off" => (a.p, None),
                        _ => return Err(usage(format!("rag-on-off values are on/off, got {v:?}"))),
                    }
                };
                runs.push(SweepRun {
                    value: v.clone(),
                    header: header.clone(),
                    states: states.clone(),
                    triplets: triplets.clone(),
                    references,
                    p,
                });
            }
            let axis = if let AxisArg::DivisionP = a.axis { SweepAxis::DivisionP } else { SweepAxis::RagOnOff };
            (axis, runs)
        }
        AxisArg::Layer | AxisArg::Pooling => {
            let mut files = HashMap::new();
            for spec in &a.inputs {
                let (k, v) = spec
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--input expects VALUE=PATH, got {spec:?}")))?;
                files.insert(k.to_string(), PathBuf::from(v));
            }
            let values: Vec<String> = if a.values.is_empty() {
                let mut v: Vec<String> = files.keys().cloned().collect();
                v.sort();
                v
            } else {
                a.values.clone()
            };
            let mut runs = Vec::new();
            for v in values {
                let path = files
                    .get(&v)
                    .with_context(|| format!("missing state file for {v:?}; pass --input {v}=PATH"))?;
                let (header, states) = stateio::read_state_file(path)?;
                runs.push(SweepRun {
                    value: v,
                    header,
                    states,
                    triplets: triplets.clone(),
                    references: refs.clone(),
                    p: a.p,
                });
            }
            let axis = if let AxisArg::Layer = a.axis { SweepAxis::Layer } else { SweepAxis::Pooling };
            (axis, runs)
        }
    };
    let config = PipelineConfig {
        score_field: a.score_field,
        partition_seed: a.seed,
        train_fraction: a.train_fraction,
        split_seed: a.seed,
        train: a.train.config(),
        measure_latency: a.timing,
    };
    let table = evalkit::sweep(axis, &runs, &config)?;
    print!("{}", table.to_text());
    if let Some(out) = &a.output {
        fs::write(out, table.to_json())?;
    }
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServeFileConfig {
    model: Option<PathBuf>,
    refdb: Option<PathBuf>,
    bind: Option<String>,
    tau_override: Option<f32>,
}

fn serve(a: ServeArgs) -> Result<()> {
    let file: ServeFileConfig = match &a.config {
        Some(p) => toml::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => ServeFileConfig::default(),
    };
    let model_path = a
        .model
        .or(file.model)
        .ok_or_else(|| usage("no model: pass --model, set ISACL_MODEL or add `model` to the config file"))?;
    let refdb_path = a.refdb.or(file.refdb);
    let bind = a.bind.or(file.bind).unwrap_or_else(|| "127.0.0.1:7878".to_string());
    let tau = a.tau_override.or(file.tau_override);

    let model = JudgeModel::load(&model_path)?;
    let refdb = refdb_path.as_deref().map(RefDb::load).transpose()?;
    let gate = Arc::new(Gate::new(model, refdb, tau).map_err(anyhow::Error::msg)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        eprintln!("serving on {}", listener.local_addr()?);
        gate::serve(listener, gate, gate::shutdown_signal(), Duration::from_secs(5)).await;
        eprintln!("shut down");
        Ok(())
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.count < 4 || a.dim == 0 {
        return Err(usage("--count must be at least 4 and --dim at least 1"));
    }
    fs::create_dir_all(&a.out_dir)?;
    let corpus = evalkit::gen_scored_corpus(a.dim, a.count, a.sigma, a.seed);
    let unscored: Vec<_> = corpus
        .triplets
        .iter()
        .cloned()
        .map(|mut t| {
            t.rouge_l_f = None;
            t
        })
        .collect();
    let dir = &a.out_dir;
    stateio::write_jsonl(&dir.join("triplets.jsonl"), &unscored)?;
    stateio::write_state_file(&corpus.header, &corpus.states, &dir.join("states.isst"))?;
    let pairs: Vec<stateio::RefPair> = corpus
        .triplets
        .iter()
        .map(|t| stateio::RefPair {
            id: t.record_id.clone(),
            input: t.input_x.clone(),
            reference: t.reference_t.clone(),
        })
        .collect();
    stateio::write_jsonl(&dir.join("pairs.jsonl"), &pairs)?;
    for (name, map, model_id) in [
        ("input_emb.isst", &corpus.input_embeddings, "synthetic-encoder"),
        ("ref_emb.isst", &corpus.reference_embeddings, "synthetic-encoder"),
    ] {
        let records: Vec<StateRecord> = corpus
            .triplets
            .iter()
            .map(|t| StateRecord::new(t.record_id.clone(), StateLabel::Unlabeled, map[&t.record_id].clone()))
            .collect();
        let header = StateFileHeader {
            count: records.len() as u64,
            ..StateFileHeader::new(model_id, -1, PoolingMode::MeanAllTokens, records[0].vector.len())
        };
        stateio::write_state_file(&header, &records, &dir.join(name))?;
    }
    eprintln!("wrote synthetic corpus of {} records to {}", a.count, dir.display());
    Ok(())
}
