//! Datasets: IDX ingestion, synthetic 2-D blobs, heterogeneous user
//! partitioning and seeded batching.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::Batch;
use crate::seeding;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("idx parse error at byte {offset}: {reason}")]
    Idx { offset: usize, reason: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DataError>;

fn idx_err(offset: usize, reason: impl Into<String>) -> DataError {
    DataError::Idx { offset, reason: reason.into() }
}

/// Labeled samples, row-major features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset has no samples".into()));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(DataError::Invalid("need at least two classes".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(DataError::Invalid(format!("label {y} >= num_classes {num_classes}")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self { features, labels, dim, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `indices` in the given order. Panics on out-of-range indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(features, labels, self.dim, self.num_classes)
    }

    /// The whole dataset as a single batch.
    pub fn as_batch(&self) -> Batch {
        Batch::new(self.features.clone(), self.labels.clone(), self.dim)
            .expect("dataset invariants imply a valid batch")
    }

    fn gather(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(features, labels, self.dim).expect("indices are non-empty and in range")
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

/// An unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn magic(&self) -> u32 {
        0x0000_0800 | self.dims.len() as u32
    }

    /// Big-endian header followed by the row-major payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(offset, format!("header truncated: need 4 bytes, have {}", bytes.len().saturating_sub(offset))))
}

/// Parses an IDX label vector (`0x00000801`) or image tensor (`0x00000803`).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let magic = read_be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_LABELS_MAGIC => 1,
        IDX_IMAGES_MAGIC => 3,
        other => return Err(idx_err(0, format!("unsupported magic 0x{other:08x}"))),
    };
    let mut dims = Vec::with_capacity(ndims);
    let mut total: usize = 1;
    for k in 0..ndims {
        let offset = 4 + 4 * k;
        let d = read_be_u32(bytes, offset)? as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| idx_err(offset, "dimension product overflows"))?;
        dims.push(d);
    }
    let start = 4 + 4 * ndims;
    let payload = &bytes[start..];
    if payload.len() < total {
        return Err(idx_err(
            bytes.len(),
            format!("payload truncated: expected {total} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > total {
        return Err(idx_err(start + total, format!("{} trailing bytes", payload.len() - total)));
    }
    Ok(IdxTensor { dims, data: payload.to_vec() })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    Ok(bytes)
}

/// Loads an image/label IDX pair, scaling pixels to `[0, 1]`. At most
/// `limit` leading samples are kept when given.
pub fn load_idx_dataset(
    images: &Path,
    labels: &Path,
    num_classes: usize,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images = parse_idx(&read_file(images)?)?;
    let labels = parse_idx(&read_file(labels)?)?;
    if images.dims.len() != 3 || labels.dims.len() != 1 {
        return Err(DataError::Invalid("expected a 3-D image tensor and a 1-D label vector".into()));
    }
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(DataError::Invalid(format!("{n} images but {} labels", labels.dims[0])));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let dim = images.dims[1] * images.dims[2];
    let features = images.data[..keep * dim].iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = labels.data[..keep].iter().map(|&y| usize::from(y)).collect();
    Dataset::new(features, labels, dim, num_classes)
}

// ---------------------------------------------------------------------------
// Synthetic blobs
// ---------------------------------------------------------------------------

/// Where the synthetic blob means sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlobLayout {
    /// All means on a circle of radius 3, class `k` at angle `2πk/C`.
    #[default]
    Ring,
    /// Classes `0..C-1` evenly on the radius-3 circle, the last class at the
    /// origin. Training on the ring classes alone pushes the centre class's
    /// logit down, so it is only learned from the users that hold it.
    RingWithCenter,
}

impl BlobLayout {
    pub fn mean(self, class: usize, num_classes: usize) -> (f64, f64) {
        let on_ring = match self {
            BlobLayout::Ring => num_classes,
            BlobLayout::RingWithCenter if class + 1 == num_classes => return (0.0, 0.0),
            BlobLayout::RingWithCenter => num_classes - 1,
        };
        let angle = std::f64::consts::TAU * class as f64 / on_ring as f64;
        (3.0 * angle.cos(), 3.0 * angle.sin())
    }
}

/// `num_classes` isotropic Gaussian blobs of standard deviation `spread`
/// with means on a radius-3 circle. Samples are grouped by class.
pub fn gen_synthetic_2d(num_classes: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    gen_synthetic_2d_with(BlobLayout::Ring, num_classes, per_class, spread, seed)
}

pub fn gen_synthetic_2d_with(
    layout: BlobLayout,
    num_classes: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class == 0 {
        return Err(DataError::Invalid("need at least two classes and one sample per class".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::Invalid(format!("spread must be finite and non-negative, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(num_classes * per_class * 2);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for k in 0..num_classes {
        let (mx, my) = layout.mean(k, num_classes);
        for _ in 0..per_class {
            let zx: f64 = StandardNormal.sample(&mut rng);
            let zy: f64 = StandardNormal.sample(&mut rng);
            features.push(mx + spread * zx);
            features.push(my + spread * zy);
            labels.push(k);
        }
    }
    Dataset::new(features, labels, 2, num_classes)
}

/// Writes `x1,..,xd,label` rows.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (1..=data.dim).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut record: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        record.push(data.labels[i].to_string());
        w.write_record(&record)?;
    }
    w.flush().map_err(|source| DataError::Io { path: "<csv>".into(), source })?;
    Ok(())
}

/// Reads the format produced by [`write_csv`]. The class count defaults to
/// one more than the largest label seen.
pub fn read_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().next_back() != Some("label") || headers.len() < 2 {
        return Err(DataError::Invalid("csv header must be x1,..,xd,label".into()));
    }
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let bad = |what: &str| DataError::Invalid(format!("row {}: bad {what}", line + 1));
        for field in record.iter().take(dim) {
            features.push(field.trim().parse::<f64>().map_err(|_| bad("feature"))?);
        }
        labels.push(record[dim].trim().parse::<usize>().map_err(|_| bad("label"))?);
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1).max(2));
    Dataset::new(features, labels, dim, classes)
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

/// `frequent_fraction` percent of the users (the lowest ids) hold
/// `frequent_pattern_fraction` percent of the classes (the lowest class ids);
/// the remaining users hold the remaining classes exclusively.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub num_users: usize,
    pub frequent_fraction: f64,
    pub frequent_pattern_fraction: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn frequent_users(&self) -> usize {
        (self.num_users as f64 * self.frequent_fraction / 100.0).round() as usize
    }

    pub fn frequent_classes(&self, num_classes: usize) -> usize {
        (num_classes as f64 * self.frequent_pattern_fraction / 100.0).round() as usize
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let pct = |v: f64| v > 0.0 && v < 100.0;
        if self.num_users < 2 {
            return Err(DataError::Partition("need at least two users".into()));
        }
        if !pct(self.frequent_fraction) || !pct(self.frequent_pattern_fraction) {
            return Err(DataError::Partition("percentages must lie strictly between 0 and 100".into()));
        }
        let fu = self.frequent_users();
        if fu == 0 || fu >= self.num_users {
            return Err(DataError::Partition(format!(
                "{fu} frequent users out of {} leaves a group empty",
                self.num_users
            )));
        }
        let fc = self.frequent_classes(num_classes);
        if fc == 0 || fc >= num_classes {
            return Err(DataError::Partition(format!(
                "{fc} frequent classes out of {num_classes} leaves a group empty"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Partition {
    pub shards: Vec<Dataset>,
    /// Source row indices of every shard, in shard order.
    pub indices: Vec<Vec<usize>>,
    pub frequent_users: usize,
    pub frequent_classes: Vec<usize>,
    pub rare_classes: Vec<usize>,
}

/// Splits `data` into `spec.num_users` shards. Within each group the
/// samples are shuffled and dealt round-robin, so shard sizes in a group
/// differ by at most one.
pub fn partition_heterogeneous(data: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    let c = data.num_classes();
    spec.validate(c)?;
    let counts = data.class_counts();
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(DataError::Partition(format!("class {missing} has no samples")));
    }
    let fc = spec.frequent_classes(c);
    let fu = spec.frequent_users();
    let frequent_classes: Vec<usize> = (0..fc).collect();
    let rare_classes: Vec<usize> = (fc..c).collect();

    let (mut frequent, mut rare): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| data.labels[i] < fc);
    let groups = [(&mut frequent, 0..fu, "frequent"), (&mut rare, fu..spec.num_users, "rare")];

    let mut indices = vec![Vec::new(); spec.num_users];
    for (g, (samples, users, name)) in groups.into_iter().enumerate() {
        if samples.len() < users.len() {
            return Err(DataError::Partition(format!(
                "{} {name} samples cannot cover {} {name} users",
                samples.len(),
                users.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(spec.seed, &[g as u64]));
        samples.shuffle(&mut rng);
        let width = users.len();
        for (k, &i) in samples.iter().enumerate() {
            indices[users.start + k % width].push(i);
        }
    }
    let shards = indices.iter().map(|idx| data.subset(idx)).collect::<Result<Vec<_>>>()?;
    Ok(Partition { shards, indices, frequent_users: fu, frequent_classes, rare_classes })
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Row indices of each batch for one epoch: a permutation keyed by
/// `(seed, epoch)` cut into chunks of `batch_size` (the last may be short).
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1 && n >= 1, "batching needs n >= 1 and batch_size >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, &[epoch]));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    batch_indices(data.len(), batch_size.min(data.len()), seed, epoch)
        .iter()
        .map(|idx| data.gather(idx))
        .collect()
}
