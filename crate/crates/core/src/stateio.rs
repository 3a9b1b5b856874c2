//! Binary internal-state files (`ISST`) and line-delimited triplet files.
//!
//! State file layout, all integers little-endian:
//!
//! ```text
//! "ISST" | u32 version | u16 model_id_len | model_id | i32 layer_index
//!        | u8 pooling (0=mean,1=last) | u32 dim | u64 count
//! count x ( u16 id_len | id | u8 label | dim x f32 )
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_MAGIC: &[u8; 4] = b"ISST";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StateIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected \"ISST\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported state file version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {context}")]
    Truncated { context: String },
    #[error("record {index} ({id}): vector length {found} does not match header dim {expected}")]
    DimensionMismatch {
        index: usize,
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("record {index} ({id}): non-finite value at position {position}")]
    NonFinite {
        index: usize,
        id: String,
        position: usize,
    },
    #[error("header count {header} does not match {actual} records")]
    CountMismatch { header: u64, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("record {index}: invalid label byte {byte}")]
    InvalidLabel { index: usize, byte: u8 },
    #[error("record {index}: id is not valid UTF-8")]
    InvalidId { index: usize },
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: duplicate id {id:?} on lines {first} and {second}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first: usize,
        second: usize,
    },
}

pub type Result<T> = std::result::Result<T, StateIoError>;

/// How per-token hidden states were pooled into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    MeanAllTokens,
    LastToken,
}

impl PoolingMode {
    pub fn to_byte(self) -> u8 {
        match self {
            PoolingMode::MeanAllTokens => 0,
            PoolingMode::LastToken => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(PoolingMode::MeanAllTokens),
            1 => Some(PoolingMode::LastToken),
            _ => None,
        }
    }
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingMode::MeanAllTokens => "mean",
            PoolingMode::LastToken => "last",
        })
    }
}

/// Label byte as stored on disk: 0 = leak, 1 = non-disclosure, 255 = unlabeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateLabel {
    Leak,
    NonDisclosure,
    Unlabeled,
}

impl StateLabel {
    pub fn to_byte(self) -> u8 {
        match self {
            StateLabel::Leak => 0,
            StateLabel::NonDisclosure => 1,
            StateLabel::Unlabeled => 255,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(StateLabel::Leak),
            1 => Some(StateLabel::NonDisclosure),
            255 => Some(StateLabel::Unlabeled),
            _ => None,
        }
    }

    /// Internal class index, leak-positive. `None` for unlabeled records.
    pub fn class(self) -> Option<u8> {
        match self {
            StateLabel::Leak => Some(1),
            StateLabel::NonDisclosure => Some(0),
            StateLabel::Unlabeled => None,
        }
    }

    pub fn from_class(class: u8) -> Self {
        if class == 1 {
            StateLabel::Leak
        } else {
            StateLabel::NonDisclosure
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateFileHeader {
    pub version: u32,
    pub model_id: String,
    /// -1 means the last layer.
    pub layer_index: i32,
    pub pooling: PoolingMode,
    pub dim: u32,
    pub count: u64,
}

impl StateFileHeader {
    pub fn new(model_id: impl Into<String>, layer_index: i32, pooling: PoolingMode, dim: usize) -> Self {
        Self {
            version: STATE_VERSION,
            model_id: model_id.into(),
            layer_index,
            pooling,
            dim: dim as u32,
            count: 0,
        }
    }

    /// Size in bytes of the encoded header.
    pub fn encoded_len(&self) -> usize {
        4 + 4 + 2 + self.model_id.len() + 4 + 1 + 4 + 8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub record_id: String,
    pub label: StateLabel,
    pub vector: Vec<f32>,
}

impl StateRecord {
    pub fn new(record_id: impl Into<String>, label: StateLabel, vector: Vec<f32>) -> Self {
        Self {
            record_id: record_id.into(),
            label,
            vector,
        }
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.record_id.len() + 1 + 4 * self.vector.len()
    }
}

/// Exact on-disk size of a state file with the given header and records.
pub fn state_file_len(header: &StateFileHeader, records: &[StateRecord]) -> usize {
    header.encoded_len() + records.iter().map(StateRecord::encoded_len).sum::<usize>()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StateIoError + '_ {
    move |source| StateIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn validate_record(index: usize, dim: usize, rec: &StateRecord) -> Result<()> {
    if rec.vector.len() != dim {
        return Err(StateIoError::DimensionMismatch {
            index,
            id: rec.record_id.clone(),
            expected: dim,
            found: rec.vector.len(),
        });
    }
    if let Some(position) = rec.vector.iter().position(|v| !v.is_finite()) {
        return Err(StateIoError::NonFinite {
            index,
            id: rec.record_id.clone(),
            position,
        });
    }
    Ok(())
}

fn validate_header(header: &StateFileHeader) -> Result<()> {
    if header.version != STATE_VERSION {
        return Err(StateIoError::UnsupportedVersion(header.version));
    }
    if header.dim == 0 {
        return Err(StateIoError::InvalidHeader("dim must be at least 1".into()));
    }
    if header.model_id.len() > u16::MAX as usize {
        return Err(StateIoError::InvalidHeader("model_id longer than 65535 bytes".into()));
    }
    Ok(())
}

/// Encodes a state file into memory. `header.count` must equal `records.len()`.
pub fn encode_state_file(header: &StateFileHeader, records: &[StateRecord]) -> Result<Vec<u8>> {
    validate_header(header)?;
    if header.count != records.len() as u64 {
        return Err(StateIoError::CountMismatch {
            header: header.count,
            actual: records.len(),
        });
    }
    let dim = header.dim as usize;
    let mut buf = Vec::with_capacity(state_file_len(header, records));
    buf.extend_from_slice(STATE_MAGIC);
    buf.extend_from_slice(&header.version.to_le_bytes());
    buf.extend_from_slice(&(header.model_id.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.model_id.as_bytes());
    buf.extend_from_slice(&header.layer_index.to_le_bytes());
    buf.push(header.pooling.to_byte());
    buf.extend_from_slice(&header.dim.to_le_bytes());
    buf.extend_from_slice(&header.count.to_le_bytes());
    for (index, rec) in records.iter().enumerate() {
        validate_record(index, dim, rec)?;
        if rec.record_id.len() > u16::MAX as usize {
            return Err(StateIoError::InvalidHeader(format!(
                "record {index}: id longer than 65535 bytes"
            )));
        }
        buf.extend_from_slice(&(rec.record_id.len() as u16).to_le_bytes());
        buf.extend_from_slice(rec.record_id.as_bytes());
        buf.push(rec.label.to_byte());
        for v in &rec.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_state_file(header: &StateFileHeader, records: &[StateRecord], path: &Path) -> Result<()> {
    let bytes = encode_state_file(header, records)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(StateIoError::Truncated { context: context() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, context: impl FnOnce() -> String) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N, context)?);
        Ok(out)
    }
}

/// Decodes an in-memory state file, validating every record.
pub fn decode_state_file(bytes: &[u8]) -> Result<(StateFileHeader, Vec<StateRecord>)> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let hdr = || "header".to_string();
    let magic: [u8; 4] = c.array(hdr)?;
    if &magic != STATE_MAGIC {
        return Err(StateIoError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(c.array(hdr)?);
    if version != STATE_VERSION {
        return Err(StateIoError::UnsupportedVersion(version));
    }
    let id_len = u16::from_le_bytes(c.array(hdr)?) as usize;
    let model_id = String::from_utf8(c.take(id_len, hdr)?.to_vec())
        .map_err(|_| StateIoError::InvalidHeader("model_id is not valid UTF-8".into()))?;
    let layer_index = i32::from_le_bytes(c.array(hdr)?);
    let pooling_byte = c.array::<1>(hdr)?[0];
    let pooling = PoolingMode::from_byte(pooling_byte)
        .ok_or_else(|| StateIoError::InvalidHeader(format!("unknown pooling mode {pooling_byte}")))?;
    let dim = u32::from_le_bytes(c.array(hdr)?);
    let count = u64::from_le_bytes(c.array(hdr)?);
    let header = StateFileHeader {
        version,
        model_id,
        layer_index,
        pooling,
        dim,
        count,
    };
    validate_header(&header)?;

    let d = dim as usize;
    // Cap the preallocation so a corrupt count cannot exhaust memory.
    let mut records = Vec::with_capacity((count as usize).min(bytes.len() / (3 + 4 * d) + 1));
    for index in 0..count as usize {
        let ctx = || format!("record {index} of {count}");
        let id_len = u16::from_le_bytes(c.array(ctx)?) as usize;
        let record_id = String::from_utf8(c.take(id_len, ctx)?.to_vec())
            .map_err(|_| StateIoError::InvalidId { index })?;
        let label_byte = c.array::<1>(ctx)?[0];
        let label = StateLabel::from_byte(label_byte).ok_or(StateIoError::InvalidLabel {
            index,
            byte: label_byte,
        })?;
        let payload = c.take(4 * d, ctx)?;
        let vector: Vec<f32> = payload
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]))
            .collect();
        let rec = StateRecord {
            record_id,
            label,
            vector,
        };
        validate_record(index, d, &rec)?;
        records.push(rec);
    }
    if c.pos != bytes.len() {
        return Err(StateIoError::InvalidHeader(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - c.pos
        )));
    }
    Ok((header, records))
}

pub fn read_state_file(path: &Path) -> Result<(StateFileHeader, Vec<StateRecord>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_state_file(&bytes)
}

/// One (input, continuation, reference) labeling unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "id")]
    pub record_id: String,
    #[serde(rename = "input")]
    pub input_x: String,
    #[serde(rename = "output")]
    pub output_y: String,
    #[serde(rename = "reference")]
    pub reference_t: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_1_f: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, f64>,
}

impl Triplet {
    /// Looks up a score column by name: `rouge_l_f`, `rouge_1_f`, or an `aux` key
    /// (optionally written as `aux.<name>`).
    pub fn score(&self, field: &str) -> Option<f64> {
        match field {
            "rouge_l_f" => self.rouge_l_f,
            "rouge_1_f" => self.rouge_1_f,
            other => self
                .aux
                .get(other.strip_prefix("aux.").unwrap_or(other))
                .copied(),
        }
    }
}

/// An (input, reference) pair used to build the reference database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefPair {
    pub id: String,
    pub input: String,
    pub reference: String,
}

/// Reads a JSONL file of records keyed by `id`, rejecting malformed lines and
/// duplicate ids. Blank lines are skipped.
pub fn read_jsonl<T, F>(path: &Path, id_of: F) -> Result<Vec<T>>
where
    T: serde::de::DeserializeOwned,
    F: Fn(&T) -> &str,
{
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: T = serde_json::from_str(&line).map_err(|e| StateIoError::MalformedLine {
            path: path.to_path_buf(),
            line: lineno,
            reason: e.to_string(),
        })?;
        let id = id_of(&item).to_string();
        if let Some(&first) = seen.get(&id) {
            return Err(StateIoError::DuplicateId {
                path: path.to_path_buf(),
                id,
                first,
                second: lineno,
            });
        }
        seen.insert(id, lineno);
        out.push(item);
    }
    Ok(out)
}

pub fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let triplets = read_jsonl(path, |t: &Triplet| &t.record_id)?;
    for (i, t) in triplets.iter().enumerate() {
        for (name, v) in [("rouge_l_f", t.rouge_l_f), ("rouge_1_f", t.rouge_1_f)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(StateIoError::MalformedLine {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: format!("{name} = {v} outside [0, 1]"),
                    });
                }
            }
        }
    }
    Ok(triplets)
}

pub fn read_pairs(path: &Path) -> Result<Vec<RefPair>> {
    read_jsonl(path, |p: &RefPair| &p.id)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable record");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
