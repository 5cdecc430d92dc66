//! Datasets, IDX loading, synthetic blobs and client partitioning.

use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;

pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if inputs.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} input values for {} samples of dimension {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            dim,
            num_classes,
        })
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

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, index: usize) -> &[f64] {
        &self.inputs[index * self.dim..(index + 1) * self.dim]
    }

    /// Gathers the given samples into a mini-batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels, self.dim).expect("gathered batch is well formed")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let batch = self.batch(indices);
        Dataset {
            inputs: batch.inputs().to_vec(),
            labels: batch.labels().to_vec(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all of them when `n` exceeds the size).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| idx_error(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_error(path, "truncated header"))
}

/// Parses IDX image bytes into `(count, rows·cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_error(
            path,
            format!("bad magic {magic:#010x} for images"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    let needed = count
        .checked_mul(dim)
        .ok_or_else(|| idx_error(path, "header sizes overflow"))?;
    if body.len() < needed {
        return Err(idx_error(
            path,
            format!(
                "truncated: expected {} pixel bytes, found {}",
                count * dim,
                body.len()
            ),
        ));
    }
    Ok((count, dim, body[..count * dim].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(idx_error(
            path,
            format!("bad magic {magic:#010x} for labels"),
        ));
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(idx_error(
            path,
            format!("truncated: expected {count} labels, found {}", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

/// Loads an IDX image/label pair (plain or gzip). Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, dim, pixels) = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    if labels.len() != count {
        return Err(idx_error(
            labels_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(inputs, labels, dim, num_classes)
}

/// Encodes a dataset with features in `[0,1]` as IDX image and label bytes.
pub fn to_idx_bytes(data: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != data.dim() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} images for dimension {}",
            data.dim()
        )));
    }
    let mut images = Vec::with_capacity(16 + data.inputs.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [data.len(), rows, cols] {
        images.extend_from_slice(&(v as u32).to_be_bytes());
    }
    images.extend(
        data.inputs
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + data.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(data.len() as u32).to_be_bytes());
    labels.extend(data.labels.iter().map(|&y| y as u8));
    Ok((images, labels))
}

/// Gaussian blobs: class `c` centred at `3·e_c` with isotropic noise.
pub fn synth_blobs(
    num_classes: usize,
    samples_per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if dim < num_classes {
        return Err(Error::Config(format!(
            "blob dimension {dim} is smaller than the class count {num_classes}"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!(
            "blob spread {spread} must be non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = num_classes * samples_per_class;
    let mut inputs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..num_classes {
        for _ in 0..samples_per_class {
            for j in 0..dim {
                let centre = if j == c { 3.0 } else { 0.0 };
                inputs.push(centre + spread * noise.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, dim, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    LabelSkew,
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "iid" => Ok(Self::Iid),
            "label_skew" | "non_iid" | "noniid" => Ok(Self::LabelSkew),
            other => Err(Error::Config(format!("unknown partition mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub seed: u64,
}

/// Splits sample indices among clients.
///
/// IID shuffles and deals equal (±1) contiguous shards. Label skew cuts
/// every class into single-label shards, `num_clients × classes_per_client`
/// in total with counts apportioned by class size, shuffles the shards and
/// deals `classes_per_client` of them to each client.
pub fn partition(
    labels: &[usize],
    num_classes: usize,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>> {
    if spec.num_clients == 0 {
        return Err(Error::Partition("no clients".into()));
    }
    if labels.len() < spec.num_clients {
        return Err(Error::Partition(format!(
            "{} samples for {} clients",
            labels.len(),
            spec.num_clients
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(&mut rng);
            Ok(split_even(&order, spec.num_clients))
        }
        PartitionMode::LabelSkew => label_skew(labels, num_classes, spec, &mut rng),
    }
}

fn split_even(items: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for k in 0..parts {
        let len = base + usize::from(k < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

fn label_skew(
    labels: &[usize],
    num_classes: usize,
    spec: &PartitionSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let cpc = spec.classes_per_client;
    if cpc == 0 || cpc > num_classes {
        return Err(Error::Partition(format!(
            "classes_per_client {cpc} must lie in 1..={num_classes}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let total_shards = spec.num_clients * cpc;
    let present: Vec<usize> = (0..num_classes)
        .filter(|&c| !by_class[c].is_empty())
        .collect();
    if present.len() > total_shards {
        return Err(Error::Partition(format!(
            "{} non-empty classes cannot fit in {total_shards} single-label shards",
            present.len()
        )));
    }

    // Largest-remainder apportionment with at least one shard per class.
    let n = labels.len() as f64;
    let quota: Vec<f64> = (0..num_classes)
        .map(|c| by_class[c].len() as f64 * total_shards as f64 / n)
        .collect();
    let mut shards: Vec<usize> = (0..num_classes)
        .map(|c| {
            if by_class[c].is_empty() {
                0
            } else {
                (quota[c].floor() as usize).max(1)
            }
        })
        .collect();
    while shards.iter().sum::<usize>() > total_shards {
        let c = (0..num_classes)
            .filter(|&c| shards[c] > 1)
            .max_by(|&a, &b| {
                (shards[a] as f64 - quota[a])
                    .total_cmp(&(shards[b] as f64 - quota[b]))
                    .then(b.cmp(&a))
            })
            .expect("some class holds more than one shard");
        shards[c] -= 1;
    }
    while shards.iter().sum::<usize>() < total_shards {
        let c = present
            .iter()
            .copied()
            .filter(|&c| shards[c] < by_class[c].len())
            .max_by(|&a, &b| {
                (quota[a] - shards[a] as f64)
                    .total_cmp(&(quota[b] - shards[b] as f64))
                    .then(b.cmp(&a))
            })
            .ok_or_else(|| Error::Partition("too few samples for the requested shards".into()))?;
        shards[c] += 1;
    }
    let mut pieces: Vec<Vec<usize>> = Vec::with_capacity(total_shards);
    for c in 0..num_classes {
        if shards[c] == 0 {
            continue;
        }
        if shards[c] > by_class[c].len() {
            return Err(Error::Partition(format!(
                "class {c} has {} samples for {} shards",
                by_class[c].len(),
                shards[c]
            )));
        }
        let mut members = by_class[c].clone();
        members.shuffle(rng);
        pieces.extend(split_even(&members, shards[c]));
    }
    pieces.shuffle(rng);
    let clients = pieces
        .chunks(cpc)
        .map(|group| {
            let mut shard: Vec<usize> = group.iter().flatten().copied().collect();
            shard.sort_unstable();
            shard
        })
        .collect();
    Ok(clients)
}

/// Per-client slices of a held-out set that follow each client's labels.
///
/// The test samples of every class are split evenly, in client order, among
/// the clients whose training shard contains that class. Under IID shards
/// every client holds every class, which gives a stratified split.
pub fn test_portions(
    train_labels: &[usize],
    train_shards: &[Vec<usize>],
    test_labels: &[usize],
    num_classes: usize,
) -> Vec<Vec<usize>> {
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (client, shard) in train_shards.iter().enumerate() {
        let mut has = vec![false; num_classes];
        for &i in shard {
            has[train_labels[i]] = true;
        }
        for (c, _) in has.iter().enumerate().filter(|(_, &h)| h) {
            holders[c].push(client);
        }
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in test_labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut portions = vec![Vec::new(); train_shards.len()];
    for (c, members) in by_class.iter().enumerate() {
        if holders[c].is_empty() {
            continue;
        }
        for (piece, &client) in split_even(members, holders[c].len())
            .into_iter()
            .zip(&holders[c])
        {
            portions[client].extend(piece);
        }
    }
    for p in &mut portions {
        p.sort_unstable();
    }
    portions
}
