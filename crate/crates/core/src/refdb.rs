//! Reference database: (input, reference, embedding) rows indexed by an
//! inverted-file (IVF) structure over k-means clusters.
//!
//! Every key embedding is L2-normalized on ingestion, so nearest-by-L2 and
//! most-similar-by-cosine pick the same entry (‖a−b‖² = 2 − 2⟨a,b⟩).

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REFDB_MAGIC: &[u8; 4] = b"ISRD";
pub const REFDB_VERSION: u32 = 1;
pub const DEFAULT_MAX_ITERS: usize = 25;

#[derive(Debug, Error)]
pub enum RefDbError {
    #[error("cannot build {k} clusters from {n} vectors")]
    TooManyClusters { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("vector {index} has zero norm and cannot be normalized")]
    ZeroVector { index: usize },
    #[error("vector {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error("the database is empty")]
    Empty,
    #[error("nprobe {nprobe} must lie in 1..={k}")]
    InvalidNprobe { nprobe: usize, k: usize },
    #[error("entry {0:?} has empty input or reference text")]
    EmptyText(String),
    #[error("no embedding supplied for entry {0:?}")]
    MissingEmbedding(String),
    #[error("corrupt database file: {0}")]
    Corrupt(String),
    #[error("unsupported database version {0}")]
    Version(u32),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, RefDbError>;

pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns a unit-norm copy of `v`, or `None` for a zero or non-finite vector.
pub fn normalized(v: &[f32]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (f64::from(*x) / norm) as f32).collect())
}

/// Index of the nearest row in `centroids` (ties go to the lower index).
fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> (u32, f32) {
    let mut best = (0u32, f32::INFINITY);
    for (c, row) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_l2(row, v);
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
    /// Inertia (sum of squared distances) after each assignment step.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

fn check_vectors(vectors: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(RefDbError::Dimension {
            expected: dim,
            found: vectors.len(),
        });
    }
    if let Some(pos) = vectors.iter().position(|x| !x.is_finite()) {
        return Err(RefDbError::NonFinite { index: pos / dim });
    }
    Ok(vectors.len() / dim)
}

fn kmeans_plus_plus(vectors: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = vectors.len() / dim;
    let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut best: Vec<f64> = (0..n).map(|i| f64::from(squared_l2(row(i), &centroids[..dim]))).collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in best.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let newest = &centroids[start..];
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(f64::from(squared_l2(row(i), newest)));
        }
    }
    centroids
}

fn assign_all(vectors: &[f32], dim: usize, centroids: &[f32]) -> (Vec<u32>, Vec<f32>) {
    vectors
        .par_chunks_exact(dim)
        .map(|v| nearest(centroids, dim, v))
        .unzip()
}

/// Lloyd's algorithm from k-means++ seeding. Stops when assignments repeat or
/// after `max_iters` assignment steps. Empty clusters are re-seeded with the
/// point farthest from its current centroid.
pub fn kmeans(vectors: &[f32], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = check_vectors(vectors, dim)?;
    if k == 0 {
        return Err(RefDbError::ZeroClusters);
    }
    if k > n {
        return Err(RefDbError::TooManyClusters { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(vectors, dim, k, &mut rng);
    let mut assignments: Vec<u32> = Vec::new();
    let mut inertia_history = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters.max(1) {
        let (new_assign, dists) = assign_all(vectors, dim, &centroids);
        inertia_history.push(dists.iter().map(|&d| f64::from(d)).sum());
        if new_assign == assignments {
            converged = true;
            break;
        }
        assignments = new_assign;

        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, v) in vectors.chunks_exact(dim).enumerate() {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
                *s += f64::from(*x);
            }
        }
        let mut point_dist = dists;
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Take the farthest point from whichever cluster still has more than one member.
            let far = (0..n)
                .filter(|&i| counts[assignments[i] as usize] > 1)
                .max_by(|&a, &b| point_dist[a].total_cmp(&point_dist[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a donor cluster");
            let old = assignments[far] as usize;
            let v = &vectors[far * dim..(far + 1) * dim];
            for (s, x) in sums[old * dim..(old + 1) * dim].iter_mut().zip(v) {
                *s -= f64::from(*x);
            }
            counts[old] -= 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(v)
                .for_each(|(s, x)| *s = f64::from(*x));
            counts[c] = 1;
            assignments[far] = c as u32;
            point_dist[far] = 0.0;
        }
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *dst = (s * inv) as f32;
            }
        }
    }
    if !converged {
        assignments = assign_all(vectors, dim, &centroids).0;
    }
    Ok(KMeans {
        dim,
        centroids,
        assignments,
        inertia_history,
        converged,
    })
}

/// Inverted lists over k-means centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub index: usize,
    pub distance: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Best hits, ascending by (distance, index).
    pub hits: Vec<Hit>,
    pub distance_computations: usize,
}

impl IvfIndex {
    pub fn from_kmeans(km: &KMeans) -> Self {
        let mut lists = vec![Vec::new(); km.k()];
        for (i, &c) in km.assignments.iter().enumerate() {
            lists[c as usize].push(i as u32);
        }
        Self {
            dim: km.dim,
            centroids: km.centroids.clone(),
            lists,
        }
    }

    pub fn k(&self) -> usize {
        self.lists.len()
    }

    pub fn len(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_list_len(&self) -> usize {
        self.lists.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Probes the `nprobe` nearest lists and returns the `m` nearest vectors found.
    pub fn search(&self, vectors: &[f32], query: &[f32], nprobe: usize, m: usize) -> Result<SearchOutcome> {
        if self.is_empty() {
            return Err(RefDbError::Empty);
        }
        if query.len() != self.dim {
            return Err(RefDbError::Dimension {
                expected: self.dim,
                found: query.len(),
            });
        }
        if nprobe == 0 || nprobe > self.k() {
            return Err(RefDbError::InvalidNprobe { nprobe, k: self.k() });
        }
        let mut probes: Vec<(f32, usize)> = self
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(c, row)| (squared_l2(row, query), c))
            .collect();
        let mut computations = probes.len();
        probes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut hits: Vec<Hit> = Vec::new();
        for &(_, c) in &probes[..nprobe] {
            for &i in &self.lists[c] {
                let i = i as usize;
                let v = &vectors[i * self.dim..(i + 1) * self.dim];
                computations += 1;
                hits.push(Hit {
                    index: i,
                    distance: squared_l2(v, query),
                });
            }
        }
        hits.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
        hits.truncate(m.max(1));
        Ok(SearchOutcome {
            hits,
            distance_computations: computations,
        })
    }
}

/// Exhaustive nearest neighbour over row-major `vectors`; ties go to the lower index.
pub fn brute_force_nearest(vectors: &[f32], dim: usize, query: &[f32]) -> Option<Hit> {
    let (index, distance) = nearest(vectors, dim, query);
    (distance.is_finite()).then_some(Hit {
        index: index as usize,
        distance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefEntry {
    pub entry_id: String,
    pub input_x: String,
    pub reference_t: String,
    /// Unit-norm reference embedding handed to the judge.
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    pub entry_id: String,
    pub reference_t: String,
    pub embedding: Vec<f32>,
    /// Cosine similarity between the query and the matched key.
    pub similarity: f32,
    pub distance_computations: usize,
}

/// Source row for [`RefDb::build`].
#[derive(Debug, Clone)]
pub struct RefInput {
    pub id: String,
    pub input: String,
    pub reference: String,
    /// Embedding searched against; when `None` the reference embedding is used.
    pub key: Option<Vec<f32>>,
    pub reference_embedding: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub k: Option<usize>,
    pub nprobe: usize,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            k: None,
            nprobe: 1,
            seed: 0,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// ⌈√N⌉ clamped to [1, 4096] and to N.
pub fn default_k(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(1, 4096).min(n.max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefDb {
    pub entries: Vec<RefEntry>,
    /// Unit-norm search keys, row-major, one per entry.
    pub keys: Vec<f32>,
    pub key_dim: usize,
    pub ref_dim: usize,
    pub index: IvfIndex,
    pub nprobe: usize,
}

impl RefDb {
    pub fn build(rows: Vec<RefInput>, config: &BuildConfig) -> Result<Self> {
        let first = rows.first().ok_or(RefDbError::Empty)?;
        let key_dim = first.key.as_ref().unwrap_or(&first.reference_embedding).len();
        let ref_dim = first.reference_embedding.len();
        let mut keys = Vec::with_capacity(rows.len() * key_dim);
        let mut entries = Vec::with_capacity(rows.len());
        for (index, row) in rows.into_iter().enumerate() {
            if row.input.is_empty() || row.reference.is_empty() {
                return Err(RefDbError::EmptyText(row.id));
            }
            if row.reference_embedding.len() != ref_dim {
                return Err(RefDbError::Dimension {
                    expected: ref_dim,
                    found: row.reference_embedding.len(),
                });
            }
            let embedding = normalized(&row.reference_embedding).ok_or(RefDbError::ZeroVector { index })?;
            let key = match &row.key {
                Some(k) => normalized(k).ok_or(RefDbError::ZeroVector { index })?,
                None => embedding.clone(),
            };
            if key.len() != key_dim {
                return Err(RefDbError::Dimension {
                    expected: key_dim,
                    found: key.len(),
                });
            }
            keys.extend_from_slice(&key);
            entries.push(RefEntry {
                entry_id: row.id,
                input_x: row.input,
                reference_t: row.reference,
                embedding,
            });
        }
        let k = config.k.unwrap_or_else(|| default_k(entries.len()));
        let km = kmeans(&keys, key_dim, k, config.seed, config.max_iters)?;
        let index = IvfIndex::from_kmeans(&km);
        if config.nprobe == 0 || config.nprobe > index.k() {
            return Err(RefDbError::InvalidNprobe {
                nprobe: config.nprobe,
                k: index.k(),
            });
        }
        Ok(Self {
            entries,
            keys,
            key_dim,
            ref_dim,
            index,
            nprobe: config.nprobe,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.key_dim..(i + 1) * self.key_dim]
    }

    /// Nearest entry to `query` (normalized first), probing `nprobe` lists.
    pub fn ivf_search(&self, query: &[f32], nprobe: usize) -> Result<QueryResult> {
        Ok(self.search_top(query, nprobe, 1)?.remove(0))
    }

    /// Up to `m` nearest entries, best first.
    pub fn search_top(&self, query: &[f32], nprobe: usize, m: usize) -> Result<Vec<QueryResult>> {
        if self.is_empty() {
            return Err(RefDbError::Empty);
        }
        if query.len() != self.key_dim {
            return Err(RefDbError::Dimension {
                expected: self.key_dim,
                found: query.len(),
            });
        }
        let q = normalized(query).ok_or(RefDbError::ZeroVector { index: 0 })?;
        let out = self.index.search(&self.keys, &q, nprobe, m)?;
        Ok(out
            .hits
            .into_iter()
            .map(|h| {
                let e = &self.entries[h.index];
                QueryResult {
                    entry_id: e.entry_id.clone(),
                    reference_t: e.reference_t.clone(),
                    embedding: e.embedding.clone(),
                    similarity: dot(&q, self.key(h.index)).clamp(-1.0, 1.0),
                    distance_computations: out.distance_computations,
                }
            })
            .collect())
    }

    /// Retrieves with the database's configured `nprobe`.
    pub fn retrieve(&self, query: &[f32]) -> Result<QueryResult> {
        self.ivf_search(query, self.nprobe)
    }

    /// Retrieves `m` references and averages their embeddings element-wise.
    pub fn retrieve_mean(&self, query: &[f32], m: usize) -> Result<(Vec<QueryResult>, Vec<f32>)> {
        let hits = self.search_top(query, self.nprobe, m)?;
        let mut mean = vec![0f32; self.ref_dim];
        for h in &hits {
            for (a, x) in mean.iter_mut().zip(&h.embedding) {
                *a += x;
            }
        }
        let inv = 1.0 / hits.len() as f32;
        mean.iter_mut().for_each(|a| *a *= inv);
        Ok((hits, mean))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(REFDB_MAGIC);
        for v in [
            REFDB_VERSION,
            self.key_dim as u32,
            self.ref_dim as u32,
            self.index.k() as u32,
            self.nprobe as u32,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (i, e) in self.entries.iter().enumerate() {
            b.extend_from_slice(&(e.entry_id.len() as u16).to_le_bytes());
            b.extend_from_slice(e.entry_id.as_bytes());
            for s in [&e.input_x, &e.reference_t] {
                b.extend_from_slice(&(s.len() as u32).to_le_bytes());
                b.extend_from_slice(s.as_bytes());
            }
            for x in self.key(i).iter().chain(&e.embedding) {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        for x in &self.index.centroids {
            b.extend_from_slice(&x.to_le_bytes());
        }
        for list in &self.index.lists {
            b.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for i in list {
                b.extend_from_slice(&i.to_le_bytes());
            }
        }
        let sum = fnv1a(&b);
        b.extend_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 8 {
            return Err(RefDbError::Corrupt("file too short".into()));
        }
        if &bytes[..4] != REFDB_MAGIC {
            return Err(RefDbError::Corrupt("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != REFDB_VERSION {
            return Err(RefDbError::Version(version));
        }
        if fnv1a(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(RefDbError::Corrupt("checksum mismatch".into()));
        }
        let key_dim = r.u32()? as usize;
        let ref_dim = r.u32()? as usize;
        let k = r.u32()? as usize;
        let nprobe = r.u32()? as usize;
        let n = r.u64()? as usize;
        if key_dim == 0 || k == 0 || nprobe == 0 || nprobe > k {
            return Err(RefDbError::Corrupt("invalid header".into()));
        }
        let mut entries = Vec::new();
        let mut keys = Vec::new();
        for _ in 0..n {
            let id_len = r.u16()? as usize;
            let entry_id = r.string(id_len)?;
            let in_len = r.u32()? as usize;
            let input_x = r.string(in_len)?;
            let ref_len = r.u32()? as usize;
            let reference_t = r.string(ref_len)?;
            keys.extend(r.f32s(key_dim)?);
            let embedding = r.f32s(ref_dim)?;
            entries.push(RefEntry {
                entry_id,
                input_x,
                reference_t,
                embedding,
            });
        }
        let centroids = r.f32s(k * key_dim)?;
        let mut lists = Vec::with_capacity(k);
        let mut seen = vec![false; n];
        for _ in 0..k {
            let len = r.u32()? as usize;
            let mut list = Vec::with_capacity(len.min(n));
            for _ in 0..len {
                let i = r.u32()?;
                let slot = seen
                    .get_mut(i as usize)
                    .ok_or_else(|| RefDbError::Corrupt(format!("list entry {i} out of range")))?;
                if *slot {
                    return Err(RefDbError::Corrupt(format!("entry {i} listed twice")));
                }
                *slot = true;
                list.push(i);
            }
            lists.push(list);
        }
        if r.pos != body.len() || seen.iter().any(|s| !s) {
            return Err(RefDbError::Corrupt("inverted lists do not cover the entries".into()));
        }
        Ok(Self {
            entries,
            keys,
            key_dim,
            ref_dim,
            index: IvfIndex {
                dim: key_dim,
                centroids,
                lists,
            },
            nprobe,
        })
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let io = |source| RefDbError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| RefDbError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(RefDbError::Corrupt(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| RefDbError::Corrupt("invalid UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| RefDbError::Corrupt("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn random_unit(n: usize, dim: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            let v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            out.extend(normalized(&v).unwrap());
        }
        out
    }

    fn db_from(keys: &[f32], dim: usize, k: Option<usize>) -> RefDb {
        let rows = keys
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, v)| RefInput {
                id: format!("e{i}"),
                input: format!("input {i}"),
                reference: format!("reference {i}"),
                key: Some(v.to_vec()),
                reference_embedding: v.iter().rev().copied().collect(),
            })
            .collect();
        RefDb::build(rows, &BuildConfig { k, ..Default::default() }).unwrap()
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let v = vec![1.0, 2.0, 3.0, 4.0, -2.0, 0.0];
        let km = kmeans(&v, 2, 1, 0, 25).unwrap();
        assert!(km.converged);
        assert_eq!(km.centroids, vec![(1.0 + 3.0 - 2.0) / 3.0, 2.0]);
    }

    #[test]
    fn two_clouds_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 8;
        let mut v = Vec::new();
        for i in 0..400 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            for j in 0..dim {
                let noise: f32 = StandardNormal.sample(&mut rng);
                v.push(if j == 0 { sign } else { 0.0 } + 0.05 * noise);
            }
        }
        let km = kmeans(&v, dim, 2, 11, 25).unwrap();
        let mut found = [false; 2];
        for c in 0..2 {
            let cen = km.centroid(c);
            for (s, slot) in [1.0f32, -1.0].iter().zip(found.iter_mut()) {
                let mut target = vec![0.0; dim];
                target[0] = *s;
                if squared_l2(cen, &target).sqrt() < 0.1 {
                    *slot = true;
                }
            }
        }
        assert_eq!(found, [true, true]);
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let v = random_unit(12, 4, 3);
        let km = kmeans(&v, 4, 12, 0, 25).unwrap();
        assert_eq!(km.inertia(), 0.0);
        let mut a = km.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn kmeans_errors() {
        let v = random_unit(3, 2, 0);
        assert!(matches!(kmeans(&v, 2, 4, 0, 25), Err(RefDbError::TooManyClusters { k: 4, n: 3 })));
        assert!(matches!(kmeans(&v, 2, 0, 0, 25), Err(RefDbError::ZeroClusters)));
        assert!(matches!(kmeans(&[0.0, f32::NAN], 2, 1, 0, 25), Err(RefDbError::NonFinite { index: 0 })));
    }

    #[test]
    fn empty_clusters_are_reseeded() {
        // Many duplicates force k-means++ to fall back to random (possibly repeated) picks.
        let mut v = [1.0f32, 0.0].repeat(10);
        v.extend([0.0, 1.0]);
        let km = kmeans(&v, 2, 3, 5, 25).unwrap();
        let mut counts = [0; 3];
        km.assignments.iter().for_each(|&c| counts[c as usize] += 1);
        assert_eq!(counts.iter().sum::<i32>(), 11);
    }

    #[test]
    fn converged_centroids_are_cluster_means() {
        let v = random_unit(600, 6, 21);
        let km = kmeans(&v, 6, 8, 2, 200).unwrap();
        assert!(km.converged);
        for c in 0..km.k() {
            let members: Vec<usize> = (0..600).filter(|&i| km.assignments[i] as usize == c).collect();
            assert!(!members.is_empty());
            for j in 0..6 {
                let mean: f64 = members.iter().map(|&i| f64::from(v[i * 6 + j])).sum::<f64>() / members.len() as f64;
                assert!((mean - f64::from(km.centroid(c)[j])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn inertia_non_increasing() {
        for seed in 0..5 {
            let v = random_unit(500, 5, seed);
            let km = kmeans(&v, 5, 10, seed, 50).unwrap();
            for w in km.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-6), "{:?}", km.inertia_history);
            }
        }
    }

    #[test]
    fn stored_key_found_with_single_probe() {
        let dim = 16;
        let keys = random_unit(500, dim, 8);
        let db = db_from(&keys, dim, None);
        for i in (0..500).step_by(7) {
            let r = db.ivf_search(db.key(i), 1).unwrap();
            assert_eq!(r.entry_id, format!("e{i}"));
            assert!((r.similarity - 1.0).abs() < 1e-5);
            let bf = brute_force_nearest(&db.keys, dim, db.key(i)).unwrap();
            assert_eq!(bf.index, i);
        }
        let r = db.ivf_search(db.key(3), db.index.k()).unwrap();
        assert_eq!(r.entry_id, "e3");
    }

    #[test]
    fn single_entry_database() {
        let db = db_from(&[0.0, 1.0], 2, None);
        let r = db.retrieve(&[1.0, 0.2]).unwrap();
        assert_eq!(r.entry_id, "e0");
        assert_eq!(r.reference_t, "reference 0");
        assert_eq!(r.distance_computations, 2);
    }

    #[test]
    fn midpoint_query_picks_higher_cosine() {
        let dim = 8;
        let keys = random_unit(50, dim, 77);
        let db = db_from(&keys, dim, Some(5));
        for (a, b) in [(0, 1), (2, 9), (10, 30)] {
            let mid: Vec<f32> = db.key(a).iter().zip(db.key(b)).map(|(x, y)| 0.5 * (x + y)).collect();
            let q = normalized(&mid).unwrap();
            let best = (0..50).map(|i| dot(&q, db.key(i))).fold(f32::MIN, f32::max);
            let r = db.ivf_search(&mid, db.index.k()).unwrap();
            // the midpoint is equidistant from both endpoints, so compare similarity, not ids
            assert!((r.similarity - best).abs() < 1e-6, "{} vs {best}", r.similarity);
        }
    }

    #[test]
    fn search_errors() {
        let db = db_from(&random_unit(10, 3, 1), 3, Some(2));
        assert!(matches!(db.ivf_search(&[1.0, 0.0], 1), Err(RefDbError::Dimension { .. })));
        assert!(matches!(db.ivf_search(&[1.0, 0.0, 0.0], 3), Err(RefDbError::InvalidNprobe { .. })));
        assert!(matches!(db.ivf_search(&[0.0; 3], 1), Err(RefDbError::ZeroVector { .. })));
        assert!(matches!(RefDb::build(vec![], &BuildConfig::default()), Err(RefDbError::Empty)));
        let zero = RefInput {
            id: "z".into(),
            input: "x".into(),
            reference: "t".into(),
            key: None,
            reference_embedding: vec![0.0; 3],
        };
        assert!(matches!(RefDb::build(vec![zero], &BuildConfig::default()), Err(RefDbError::ZeroVector { index: 0 })));
    }

    #[test]
    fn retrieve_mean_averages_embeddings() {
        let db = db_from(&random_unit(20, 4, 5), 4, Some(1));
        let (hits, mean) = db.retrieve_mean(db.key(0), 3).unwrap();
        assert_eq!(hits.len(), 3);
        for (j, m) in mean.iter().enumerate() {
            let expect = hits.iter().map(|h| h.embedding[j]).sum::<f32>() / 3.0;
            assert!((m - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn persistence_round_trip_and_corruption() {
        let db = db_from(&random_unit(200, 8, 13), 8, None);
        let bytes = db.to_bytes();
        assert_eq!(RefDb::from_bytes(&bytes).unwrap(), db);
        assert!(matches!(RefDb::from_bytes(&bytes[..bytes.len() - 20]), Err(RefDbError::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 0x40;
        assert!(matches!(RefDb::from_bytes(&flipped), Err(RefDbError::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(RefDb::from_bytes(&v2), Err(RefDbError::Version(2))));
    }

    #[test]
    fn default_k_heuristic() {
        assert_eq!(default_k(1), 1);
        assert_eq!(default_k(10), 4);
        assert_eq!(default_k(10_000), 100);
        assert_eq!(default_k(100_000_000), 4096);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn full_probe_equals_brute_force(n in 1usize..2000, seed: u64) {
            let dim = 6;
            let keys = random_unit(n, dim, seed);
            let db = db_from(&keys, dim, None);
            let queries = random_unit(10, dim, seed ^ 0xabcdef);
            for q in queries.chunks_exact(dim) {
                let r = db.ivf_search(q, db.index.k()).unwrap();
                let bf = brute_force_nearest(&db.keys, dim, q).unwrap();
                prop_assert_eq!(r.entry_id.clone(), format!("e{}", bf.index));
            }
        }

        #[test]
        fn lists_partition_entries(n in 1usize..500, seed: u64) {
            let db = db_from(&random_unit(n, 3, seed), 3, None);
            let mut all: Vec<u32> = db.index.lists.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
        }

        #[test]
        fn l2_and_cosine_rankings_agree(seed: u64) {
            let dim = 5;
            let keys = random_unit(40, dim, seed);
            let q = random_unit(1, dim, seed.wrapping_add(1));
            let mut by_l2: Vec<usize> = (0..40).collect();
            by_l2.sort_by(|&a, &b| f64::from(squared_l2(&keys[a*dim..(a+1)*dim], &q)).total_cmp(&f64::from(squared_l2(&keys[b*dim..(b+1)*dim], &q))));
            let mut by_cos: Vec<usize> = (0..40).collect();
            by_cos.sort_by(|&a, &b| dot(&keys[b*dim..(b+1)*dim], &q).total_cmp(&dot(&keys[a*dim..(a+1)*dim], &q)));
            // rankings agree wherever scores are not within float noise of each other
            prop_assert_eq!(by_l2[0], by_cos[0]);
        }
    }
}
