//! Persistent descriptor database with exact KD-tree nearest-neighbor
//! queries.
//!
//! The lifecycle is append-then-build: insert descriptors, build the index
//! once, then query concurrently (the built database is immutable). Queries
//! are exact — identical to a linear scan, including the tie rule (equal
//! distances rank by insertion order). Descriptors are stored as f32, the
//! same precision the on-disk format uses, and distances are computed in f64
//! from the widened values.
//!
//! DB file layout, all little-endian: magic `DSCDB1`, version u16, count u64,
//! dim u32, then per entry sequence_id u32, frame_id u64, dim x f32.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::network::Descriptor;

pub const DB_MAGIC: &[u8; 6] = b"DSCDB1";
pub const DB_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DbError {
    #[error("duplicate key (sequence {sequence_id}, frame {frame_id})")]
    DuplicateKey { sequence_id: u32, frame_id: u64 },
    #[error("cannot insert after the index is built")]
    AlreadyBuilt,
    #[error("cannot build an index over an empty database")]
    Empty,
    #[error("the index has not been built yet")]
    NotBuilt,
    #[error("top_k must lie in 1..={size}, got {top_k}")]
    BadTopK { top_k: usize, size: usize },
    #[error("descriptor dim {got} does not match database dim {expected}")]
    DimMismatch { got: usize, expected: usize },
    #[error("failed to {action} {path}: {source}")]
    Io { action: &'static str, path: PathBuf, source: std::io::Error },
    #[error("{path}: not a descriptor database (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u16 },
    #[error("{path}: entry count does not match payload (truncated?)")]
    Truncated { path: PathBuf },
    #[error("{path}: non-finite descriptor value")]
    NonFinite { path: PathBuf },
    #[error(transparent)]
    Descriptor(#[from] crate::network::NetworkError),
}

/// One stored descriptor with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct DbEntry {
    pub sequence_id: u32,
    pub frame_id: u64,
    values: Vec<f32>,
}

impl DbEntry {
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn descriptor(&self) -> Result<Descriptor, DbError> {
        Ok(Descriptor::from_f32_slice(&self.values)?)
    }
}

/// A ranked query result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryHit {
    pub sequence_id: u32,
    pub frame_id: u64,
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct DescriptorDb {
    dim: usize,
    entries: Vec<DbEntry>,
    keys: BTreeSet<(u32, u64)>,
    index: Option<KdTree>,
}

impl DescriptorDb {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new(), keys: BTreeSet::new(), index: None }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_built(&self) -> bool {
        self.index.is_some()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    /// Appends a descriptor. Keys must be unique and the index must not be
    /// built yet.
    pub fn insert(
        &mut self,
        sequence_id: u32,
        frame_id: u64,
        descriptor: &Descriptor,
    ) -> Result<(), DbError> {
        if self.index.is_some() {
            return Err(DbError::AlreadyBuilt);
        }
        if descriptor.dim() != self.dim {
            return Err(DbError::DimMismatch { got: descriptor.dim(), expected: self.dim });
        }
        if !self.keys.insert((sequence_id, frame_id)) {
            return Err(DbError::DuplicateKey { sequence_id, frame_id });
        }
        self.entries.push(DbEntry {
            sequence_id,
            frame_id,
            values: descriptor.as_slice().iter().map(|&v| v as f32).collect(),
        });
        Ok(())
    }

    /// Builds the spatial index. Idempotent; the database becomes read-only.
    pub fn build_index(&mut self) -> Result<(), DbError> {
        if self.index.is_some() {
            return Ok(());
        }
        if self.entries.is_empty() {
            return Err(DbError::Empty);
        }
        self.index = Some(KdTree::build(&self.entries, self.dim));
        Ok(())
    }

    /// Exact top-k by Euclidean distance, ascending; ties resolve by
    /// insertion order.
    pub fn query(&self, descriptor: &Descriptor, top_k: usize) -> Result<Vec<QueryHit>, DbError> {
        let index = self.index.as_ref().ok_or(DbError::NotBuilt)?;
        if descriptor.dim() != self.dim {
            return Err(DbError::DimMismatch { got: descriptor.dim(), expected: self.dim });
        }
        if top_k < 1 || top_k > self.entries.len() {
            return Err(DbError::BadTopK { top_k, size: self.entries.len() });
        }
        let hits = index.nearest(descriptor.as_slice(), top_k, &self.entries, self.dim);
        Ok(hits
            .into_iter()
            .map(|(d2, i)| QueryHit {
                sequence_id: self.entries[i].sequence_id,
                frame_id: self.entries[i].frame_id,
                distance: d2.sqrt(),
            })
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DbError> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|source| DbError::Io {
            action: "write",
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads a database and rebuilds its index (left unbuilt when empty).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DbError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| DbError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })?;
        let mut db = Self::decode(&bytes, path)?;
        if !db.is_empty() {
            db.build_index()?;
        }
        Ok(db)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + self.entries.len() * (12 + 4 * self.dim));
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.sequence_id.to_le_bytes());
            out.extend_from_slice(&e.frame_id.to_le_bytes());
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self, DbError> {
        let fail_truncated = || DbError::Truncated { path: path.to_path_buf() };
        let header = 6 + 2 + 8 + 4;
        if bytes.len() < 6 || &bytes[..6] != DB_MAGIC {
            return Err(DbError::BadMagic { path: path.to_path_buf() });
        }
        if bytes.len() < header {
            return Err(fail_truncated());
        }
        let version = u16::from_le_bytes(bytes[6..8].try_into().unwrap());
        if version != DB_VERSION {
            return Err(DbError::BadVersion { path: path.to_path_buf(), version });
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let entry_size = 4 + 8 + 4 * dim;
        if bytes.len() != header + count.checked_mul(entry_size).ok_or_else(fail_truncated)? {
            return Err(fail_truncated());
        }
        let mut db = Self::new(dim);
        let mut pos = header;
        for _ in 0..count {
            let sequence_id = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            let frame_id = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
            pos += 12;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(DbError::NonFinite { path: path.to_path_buf() });
                }
                values.push(v);
                pos += 4;
            }
            if !db.keys.insert((sequence_id, frame_id)) {
                return Err(DbError::DuplicateKey { sequence_id, frame_id });
            }
            db.entries.push(DbEntry { sequence_id, frame_id, values });
        }
        Ok(db)
    }
}

/// Distance from `query` to entry `i`, accumulated in f64 in component
/// order. Both the tree search and the linear-scan oracle in the tests go
/// through this exact function, so their results are comparable bit-for-bit.
pub fn entry_distance_sq(query: &[f64], entry: &DbEntry) -> f64 {
    let mut acc = 0.0;
    for (q, v) in query.iter().zip(&entry.values) {
        let d = q - *v as f64;
        acc += d * d;
    }
    acc
}

const LEAF_SIZE: usize = 16;

/// Static KD-tree over the database entries. Splits choose the axis with the
/// widest spread in the node's subset and the median point as pivot; leaves
/// hold small buckets that are scanned directly.
#[derive(Clone, Debug)]
struct KdTree {
    nodes: Vec<Node>,
    root: u32,
}

#[derive(Clone, Debug)]
enum Node {
    Split { axis: u32, value: f32, left: u32, right: u32 },
    Leaf { members: Vec<u32> },
}

/// Max-heap key: worst candidate first, where "worse" is larger distance or,
/// on exact ties, later insertion.
#[derive(PartialEq)]
struct HeapItem {
    d2: f64,
    order: u32,
}

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .partial_cmp(&other.d2)
            .expect("distances are finite")
            .then(self.order.cmp(&other.order))
    }
}

impl KdTree {
    fn build(entries: &[DbEntry], dim: usize) -> Self {
        let mut ids: Vec<u32> = (0..entries.len() as u32).collect();
        let mut nodes = Vec::new();
        let root = Self::build_rec(&mut ids, entries, dim, &mut nodes);
        Self { nodes, root }
    }

    fn build_rec(ids: &mut [u32], entries: &[DbEntry], dim: usize, nodes: &mut Vec<Node>) -> u32 {
        if ids.len() <= LEAF_SIZE {
            nodes.push(Node::Leaf { members: ids.to_vec() });
            return (nodes.len() - 1) as u32;
        }
        // the axis with the widest min..max spread in this subset
        let mut best_axis = 0;
        let mut best_spread = -1.0f32;
        for axis in 0..dim {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &i in ids.iter() {
                let v = entries[i as usize].values[axis];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let spread = hi - lo;
            if spread > best_spread {
                best_spread = spread;
                best_axis = axis;
            }
        }
        if best_spread <= 0.0 {
            // all points identical on every axis with spread; a leaf keeps
            // the search exact regardless of duplicates
            nodes.push(Node::Leaf { members: ids.to_vec() });
            return (nodes.len() - 1) as u32;
        }
        let mid = ids.len() / 2;
        ids.select_nth_unstable_by(mid, |&a, &b| {
            entries[a as usize].values[best_axis]
                .partial_cmp(&entries[b as usize].values[best_axis])
                .unwrap()
        });
        let value = entries[ids[mid] as usize].values[best_axis];
        let (left_ids, right_ids) = ids.split_at_mut(mid);
        let left = Self::build_rec(left_ids, entries, dim, nodes);
        let right = Self::build_rec(right_ids, entries, dim, nodes);
        nodes.push(Node::Split { axis: best_axis as u32, value, left, right });
        (nodes.len() - 1) as u32
    }

    /// Exact top-k search; returns (squared distance, entry index) ascending
    /// with ties by insertion order.
    fn nearest(
        &self,
        query: &[f64],
        top_k: usize,
        entries: &[DbEntry],
        _dim: usize,
    ) -> Vec<(f64, usize)> {
        let mut heap: std::collections::BinaryHeap<HeapItem> =
            std::collections::BinaryHeap::with_capacity(top_k + 1);
        self.search(self.root, query, top_k, entries, &mut heap);
        let mut out: Vec<(f64, usize)> =
            heap.into_iter().map(|h| (h.d2, h.order as usize)).collect();
        out.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out
    }

    fn search(
        &self,
        node: u32,
        query: &[f64],
        top_k: usize,
        entries: &[DbEntry],
        heap: &mut std::collections::BinaryHeap<HeapItem>,
    ) {
        match &self.nodes[node as usize] {
            Node::Leaf { members } => {
                for &i in members {
                    let d2 = entry_distance_sq(query, &entries[i as usize]);
                    let item = HeapItem { d2, order: i };
                    if heap.len() < top_k {
                        heap.push(item);
                    } else if item < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(item);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = query[*axis as usize] - *value as f64;
                let (near, far) = if delta < 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, query, top_k, entries, heap);
                // descend the far side unless the splitting plane alone is
                // strictly worse than the current worst candidate (on equal
                // distance a far point could still win its tie by order)
                let visit_far = heap.len() < top_k || {
                    let worst = heap.peek().unwrap();
                    delta * delta <= worst.d2
                };
                if visit_far {
                    self.search(far, query, top_k, entries, heap);
                }
            }
        }
    }
}
