//! Quantile partition of similarity scores into leak / non-disclosure sets and
//! assembly of the labeled feature matrix.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stateio::{PoolingMode, StateFileHeader, StateLabel, StateRecord, Triplet};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("no scores to partition")]
    Empty,
    #[error("division fraction p = {0} must lie in (0, 0.5]")]
    InvalidFraction(f64),
    #[error("score {value} at index {index} is outside [0, 1]")]
    ScoreOutOfRange { index: usize, value: f64 },
    #[error("state record {0:?} has no matching triplet")]
    MissingTriplet(String),
    #[error("triplet {id:?} has no value for score field {field:?}")]
    MissingScore { id: String, field: String },
    #[error("state record {0:?} has no reference embedding")]
    MissingReference(String),
    #[error("reference embedding for {id:?} has dim {found}, expected {expected}")]
    ReferenceDim { id: String, expected: usize, found: usize },
    #[error("train fraction {0} must lie in (0, 1)")]
    InvalidTrainFraction(f64),
    #[error("class {class} has {count} members; at least 2 are needed to split")]
    ClassTooSmall { class: u8, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiePolicy {
    /// Ties are ordered by a seeded shuffle, then by input order.
    StrictRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub p: f64,
    pub tie_policy: TiePolicy,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn new(p: f64, seed: u64) -> Self {
        Self {
            p,
            tie_policy: TiePolicy::StrictRank,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Leak,
    NonDisclosure,
    Discard,
}

/// Outcome of a partition, including the realized quantile thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub assignments: Vec<Partition>,
    /// Highest score in the non-disclosure set (`None` when no record is labeled).
    pub lower_threshold: Option<f64>,
    /// Lowest score in the leak set.
    pub upper_threshold: Option<f64>,
    pub per_class: usize,
}

impl PartitionResult {
    pub fn count(&self, which: Partition) -> usize {
        self.assignments.iter().filter(|&&a| a == which).count()
    }
}

/// Labels the top ⌊pN⌋ scores as leak and the bottom ⌊pN⌋ as non-disclosure.
pub fn partition(scores: &[f64], config: &PartitionConfig) -> Result<PartitionResult, LabelError> {
    if scores.is_empty() {
        return Err(LabelError::Empty);
    }
    if !(config.p > 0.0 && config.p <= 0.5) {
        return Err(LabelError::InvalidFraction(config.p));
    }
    if let Some((index, &value)) = scores
        .iter()
        .enumerate()
        .find(|(_, s)| !(0.0..=1.0).contains(*s))
    {
        return Err(LabelError::ScoreOutOfRange { index, value });
    }
    let n = scores.len();
    let k = (config.p * n as f64).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    // Stable sort keeps the shuffled order within tied groups.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut assignments = vec![Partition::Discard; n];
    for &i in &order[..k] {
        assignments[i] = Partition::Leak;
    }
    for &i in &order[n - k..] {
        assignments[i] = Partition::NonDisclosure;
    }
    let (lower_threshold, upper_threshold) = if k > 0 {
        (Some(scores[order[n - k]]), Some(scores[order[k - 1]]))
    } else {
        (None, None)
    };
    Ok(PartitionResult {
        assignments,
        lower_threshold,
        upper_threshold,
        per_class: k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub layer_index: i32,
    pub pooling: PoolingMode,
    pub with_reference: bool,
    /// Width of the state part of each feature row.
    pub state_dim: usize,
}

impl Provenance {
    pub fn from_header(header: &StateFileHeader) -> Self {
        Self {
            model_id: header.model_id.clone(),
            layer_index: header.layer_index,
            pooling: header.pooling,
            with_reference: false,
            state_dim: header.dim as usize,
        }
    }
}

/// Row-major feature matrix with leak-positive labels (1 = leak).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Vec<f32>,
    pub feature_dim: usize,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
    pub provenance: Provenance,
}

impl LabeledDataset {
    pub fn new(feature_dim: usize, provenance: Provenance) -> Self {
        Self {
            features: Vec::new(),
            feature_dim,
            labels: Vec::new(),
            ids: Vec::new(),
            provenance,
        }
    }

    pub fn push(&mut self, id: impl Into<String>, row: &[f32], label: u8) {
        assert_eq!(row.len(), self.feature_dim, "feature row width");
        self.features.extend_from_slice(row);
        self.labels.push(label);
        self.ids.push(id.into());
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.features.chunks_exact(self.feature_dim.max(1))
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - pos, pos]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::new(self.feature_dim, self.provenance.clone());
        for &i in indices {
            out.push(self.ids[i].clone(), self.row(i), self.labels[i]);
        }
        out
    }

    /// Converts to state records carrying the on-disk label encoding.
    pub fn to_records(&self) -> Vec<StateRecord> {
        (0..self.len())
            .map(|i| StateRecord::new(self.ids[i].clone(), StateLabel::from_class(self.labels[i]), self.row(i).to_vec()))
            .collect()
    }

    pub fn to_header(&self) -> StateFileHeader {
        StateFileHeader {
            count: self.len() as u64,
            ..StateFileHeader::new(
                self.provenance.model_id.clone(),
                self.provenance.layer_index,
                self.provenance.pooling,
                self.feature_dim,
            )
        }
    }

    /// Builds a dataset from labeled state records; unlabeled records are skipped.
    pub fn from_records(header: &StateFileHeader, records: &[StateRecord], provenance: Option<Provenance>) -> Self {
        let provenance = provenance.unwrap_or_else(|| Provenance::from_header(header));
        let mut out = Self::new(header.dim as usize, provenance);
        for r in records {
            if let Some(class) = r.label.class() {
                out.push(r.record_id.clone(), &r.vector, class);
            }
        }
        out
    }
}

/// Summary written next to a labeled state file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub p: f64,
    pub seed: u64,
    pub score_field: String,
    /// Realized lower threshold (top of the non-disclosure set).
    pub lower_threshold: Option<f64>,
    /// Realized upper threshold (bottom of the leak set).
    pub upper_threshold: Option<f64>,
    pub total: usize,
    pub leak: usize,
    pub non_disclosure: usize,
    pub discarded: usize,
    pub provenance: Provenance,
}

pub struct Assembled {
    pub dataset: LabeledDataset,
    pub manifest: LabelManifest,
}

/// Partitions the triplet scores matching `states` and builds the feature matrix,
/// appending the reference embedding to each state vector when `refs` is given.
pub fn assemble(
    header: &StateFileHeader,
    states: &[StateRecord],
    triplets: &[Triplet],
    score_field: &str,
    config: &PartitionConfig,
    refs: Option<&HashMap<String, Vec<f32>>>,
) -> Result<Assembled, LabelError> {
    let by_id: HashMap<&str, &Triplet> = triplets.iter().map(|t| (t.record_id.as_str(), t)).collect();
    let scores = states
        .iter()
        .map(|s| {
            let t = by_id
                .get(s.record_id.as_str())
                .ok_or_else(|| LabelError::MissingTriplet(s.record_id.clone()))?;
            t.score(score_field).ok_or_else(|| LabelError::MissingScore {
                id: s.record_id.clone(),
                field: score_field.to_string(),
            })
        })
        .collect::<Result<Vec<f64>, _>>()?;

    let ref_dim = match refs {
        Some(map) => {
            let mut dim = None;
            for s in states {
                let v = map
                    .get(&s.record_id)
                    .ok_or_else(|| LabelError::MissingReference(s.record_id.clone()))?;
                match dim {
                    None => dim = Some(v.len()),
                    Some(d) if d != v.len() => {
                        return Err(LabelError::ReferenceDim {
                            id: s.record_id.clone(),
                            expected: d,
                            found: v.len(),
                        })
                    }
                    _ => {}
                }
            }
            dim.unwrap_or(0)
        }
        None => 0,
    };

    let part = partition(&scores, config)?;
    let mut provenance = Provenance::from_header(header);
    provenance.with_reference = refs.is_some();
    let mut dataset = LabeledDataset::new(header.dim as usize + ref_dim, provenance.clone());
    let mut row = Vec::with_capacity(dataset.feature_dim);
    for (s, a) in states.iter().zip(&part.assignments) {
        let label = match a {
            Partition::Leak => 1,
            Partition::NonDisclosure => 0,
            Partition::Discard => continue,
        };
        row.clear();
        row.extend_from_slice(&s.vector);
        if let Some(map) = refs {
            row.extend_from_slice(&map[&s.record_id]);
        }
        dataset.push(s.record_id.clone(), &row, label);
    }
    let leak = part.count(Partition::Leak);
    let non_disclosure = part.count(Partition::NonDisclosure);
    let manifest = LabelManifest {
        p: config.p,
        seed: config.seed,
        score_field: score_field.to_string(),
        lower_threshold: part.lower_threshold,
        upper_threshold: part.upper_threshold,
        total: states.len(),
        leak,
        non_disclosure,
        discarded: states.len() - leak - non_disclosure,
        provenance,
    };
    Ok(Assembled { dataset, manifest })
}

/// Stratified, seeded train/test split. Each class keeps ⌊fraction·n⌋ rows for
/// training, clamped so both sides get at least one row.
pub fn split(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), LabelError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(LabelError::InvalidTrainFraction(train_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if members.len() < 2 {
            return Err(LabelError::ClassTooSmall {
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_train = ((train_fraction * members.len() as f64).floor() as usize).clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..n_train]);
        test_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((dataset.subset(&train_idx), dataset.subset(&test_idx)))
}
