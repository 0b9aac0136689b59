//! Feature vectors, object identities and the MCFT file format.
//!
//! MCFT layout (all integers little-endian):
//!
//! ```text
//! "MCFT" | version: u32 = 1 | count: u64 | dim: u32
//! count × ( id_len: u16 | id: UTF-8 bytes | dim × f32 )
//! ```
//!
//! Dataset roles and prior labels live in a separate CSV sidecar with the
//! header `object_id,role,label`.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCFT";
pub const FORMAT_VERSION: u32 = 1;
/// Size of the fixed MCFT header in bytes.
pub const HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Which part of the collection an object came from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    /// Part of the unlabeled pool.
    #[default]
    Unlabeled,
    /// Labeled hold-back used to measure agreement.
    Validation,
    /// Labeled set used to train the feature extractor.
    Training,
    /// Class withheld from feature training, used to test novelty detection.
    Indicator,
}

impl DatasetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRole::Unlabeled => "unlabeled",
            DatasetRole::Validation => "validation",
            DatasetRole::Training => "training",
            DatasetRole::Indicator => "indicator",
        }
    }
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "" | "unlabeled" | "U" => Ok(DatasetRole::Unlabeled),
            "validation" | "Lv" => Ok(DatasetRole::Validation),
            "training" | "Lt" => Ok(DatasetRole::Training),
            "indicator" | "Ci" => Ok(DatasetRole::Indicator),
            other => Err(Error::Value(format!("unknown dataset role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    pub object_id: String,
    pub features: Vec<f32>,
    pub prior_label: Option<String>,
    pub dataset_role: DatasetRole,
}

impl ObjectRecord {
    pub fn new(object_id: impl Into<String>, features: Vec<f32>) -> Self {
        ObjectRecord {
            object_id: object_id.into(),
            features,
            prior_label: None,
            dataset_role: DatasetRole::Unlabeled,
        }
    }
}

/// Immutable-after-load collection of feature vectors, addressed either by
/// object id or by dense index (`0..len()`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    labels: Vec<Option<String>>,
    roles: Vec<DatasetRole>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::Value(format!("dimensionality must be in 1..=u32::MAX, got {dim}")));
        }
        Ok(FeatureStore {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            labels: Vec::new(),
            roles: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn from_records<I>(dim: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = ObjectRecord>,
    {
        let mut store = FeatureStore::new(dim)?;
        for record in records {
            store.push(record)?;
        }
        Ok(store)
    }

    /// Appends a record and returns its index.
    pub fn push(&mut self, record: ObjectRecord) -> Result<usize> {
        if record.features.len() != self.dim {
            return Err(Error::Value(format!(
                "object `{}` has {} features, store dimensionality is {}",
                record.object_id,
                record.features.len(),
                self.dim
            )));
        }
        if record.object_id.len() > u16::MAX as usize {
            return Err(Error::Value(format!(
                "object id of {} bytes exceeds the 65535 byte limit",
                record.object_id.len()
            )));
        }
        if let Some(pos) = record.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "object `{}` has non-finite feature at position {pos}",
                record.object_id
            )));
        }
        if self.index.contains_key(&record.object_id) {
            return Err(Error::DuplicateId(record.object_id));
        }
        let idx = self.ids.len();
        self.index.insert(record.object_id.clone(), idx);
        self.ids.push(record.object_id);
        self.data.extend_from_slice(&record.features);
        self.labels.push(record.prior_label);
        self.roles.push(record.dataset_role);
        Ok(idx)
    }

    pub fn dimensionality(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn object_id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn object_ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, object_id: &str) -> Option<usize> {
        self.index.get(object_id).copied()
    }

    /// Like [`index_of`](Self::index_of) but with a `NotFound` error.
    pub fn require_index(&self, object_id: &str) -> Result<usize> {
        self.index_of(object_id).ok_or_else(|| Error::not_found("object", object_id))
    }

    pub fn prior_label(&self, idx: usize) -> Option<&str> {
        self.labels[idx].as_deref()
    }

    pub fn role(&self, idx: usize) -> DatasetRole {
        self.roles[idx]
    }

    pub fn record(&self, idx: usize) -> ObjectRecord {
        ObjectRecord {
            object_id: self.ids[idx].clone(),
            features: self.vector(idx).to_vec(),
            prior_label: self.labels[idx].clone(),
            dataset_role: self.roles[idx],
        }
    }

    pub fn records(&self) -> impl Iterator<Item = ObjectRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    pub fn set_annotation(&mut self, idx: usize, role: DatasetRole, label: Option<String>) {
        self.roles[idx] = role;
        self.labels[idx] = label;
    }

    /// Squared Euclidean distance between two stored objects.
    #[inline]
    pub fn squared_distance(&self, a: usize, b: usize) -> f64 {
        squared_euclidean(self.vector(a), self.vector(b))
    }

    #[inline]
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.squared_distance(a, b).sqrt()
    }

    /// Arithmetic mean of the given objects' vectors. Empty input yields the
    /// zero vector.
    pub fn centroid(&self, members: &[usize]) -> Vec<f64> {
        let mut sum = vec![0.0f64; self.dim];
        for &m in members {
            for (s, &v) in sum.iter_mut().zip(self.vector(m)) {
                *s += f64::from(v);
            }
        }
        if !members.is_empty() {
            let n = members.len() as f64;
            sum.iter_mut().for_each(|s| *s /= n);
        }
        sum
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut r = BufReader::new(reader);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes, expected MCFT".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r, "version")?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = u64::from_le_bytes(read_array(&mut r, "count")?);
        let dim = u32::from_le_bytes(read_array(&mut r, "dim")?) as usize;
        if dim == 0 {
            return Err(Error::Format("dimensionality is zero".into()));
        }
        let mut store = FeatureStore::new(dim)?;
        let reserve = count.min(1 << 20) as usize;
        store.ids.reserve(reserve);
        store.data.reserve(reserve * dim);

        let mut row = vec![0u8; dim * 4];
        let mut features = Vec::with_capacity(dim);
        for n in 0..count {
            let id_len = u16::from_le_bytes(read_array(&mut r, "id length")?) as usize;
            let mut id = vec![0u8; id_len];
            read_exact(&mut r, &mut id, "object id")?;
            let id = String::from_utf8(id)
                .map_err(|_| Error::Format(format!("record {n}: object id is not UTF-8")))?;
            read_exact(&mut r, &mut row, "feature row")?;
            features.clear();
            features.extend(row.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
            store.push(ObjectRecord::new(id, features.clone()))?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Ok(store)
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for idx in 0..self.len() {
            let id = self.ids[idx].as_bytes();
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id)?;
            for v in self.vector(idx) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Applies a `object_id,role,label` sidecar. Every id must exist in the
    /// store; an empty label clears the prior label.
    pub fn apply_labels<R: Read>(&mut self, reader: R) -> Result<usize> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["object_id", "role", "label"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Format(format!(
                "labels header must be `object_id,role,label`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut applied = 0;
        for row in rdr.records() {
            let row = row?;
            let idx = self
                .index_of(&row[0])
                .ok_or_else(|| Error::Value(format!("labels refer to unknown object `{}`", &row[0])))?;
            let role: DatasetRole = row[1].parse()?;
            let label = (!row[2].is_empty()).then(|| row[2].to_string());
            self.set_annotation(idx, role, label);
            applied += 1;
        }
        Ok(applied)
    }

    pub fn write_labels<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
        w.write_record(["object_id", "role", "label"])?;
        for idx in 0..self.len() {
            w.write_record([self.object_id(idx), self.roles[idx].as_str(), self.prior_label(idx).unwrap_or("")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_labels(&mut self, path: impl AsRef<Path>) -> Result<usize> {
        self.apply_labels(File::open(path)?)
    }

    pub fn save_labels(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_labels(File::create(path)?)
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureStore> {
    FeatureStore::read_from(File::open(path)?)
}

pub fn save_features(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    store.write_to(File::create(path)?)
}

/// Euclidean distance with 64-bit accumulation.
pub fn euclidean_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Value(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(squared_euclidean(a, b).sqrt())
}

/// Squared distance accumulated in eight independent f64 lanes. The lane
/// split is fixed, so results are bit-reproducible.
#[inline]
pub fn squared_euclidean(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = f64::from(x[l]) - f64::from(y[l]);
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        let d = f64::from(*x) - f64::from(*y);
        tail += d * d;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Squared distance between a stored vector and a 64-bit point such as a
/// centroid.
#[inline]
pub fn squared_distance_to_point(a: &[f32], point: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), point.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cp = point.chunks_exact(4);
    let (ra, rp) = (ca.remainder(), cp.remainder());
    for (x, y) in ca.zip(cp) {
        for l in 0..4 {
            let d = f64::from(x[l]) - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rp) {
        let d = f64::from(*x) - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Euclidean distance between two 64-bit points.
pub fn point_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_array<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}
