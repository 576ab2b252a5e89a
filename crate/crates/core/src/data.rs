//! Datasets: IDX (MNIST-format) loading, synthetic Gaussian blobs, and
//! partitioning into client shards.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::model::LabeledBatch;
use crate::rng::{self, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major samples with features in [0, 1] and labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: usize,
    pub classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: usize, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        LabeledBatch::new(&inputs, &labels, features)?;
        if classes < 2 {
            return contract(format!("dataset needs at least 2 classes, got {classes}"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return contract(format!("label {y} out of range for {classes} classes"));
        }
        Ok(Self { features, classes, inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self) -> LabeledBatch<'_> {
        LabeledBatch { inputs: &self.inputs, labels: &self.labels, features: self.features }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    /// Copy of the given sample indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.features);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features: self.features, classes: self.classes, inputs, labels }
    }

    /// Concatenation of several datasets with the same shape.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let Some(first) = parts.first() else {
            return contract("concat of zero datasets");
        };
        let mut out = Dataset { features: first.features, classes: first.classes, inputs: Vec::new(), labels: Vec::new() };
        for p in parts {
            if p.features != out.features || p.classes != out.classes {
                return contract("concat of datasets with different shapes");
            }
            out.inputs.extend_from_slice(&p.inputs);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    /// Number of distinct labels present.
    pub fn distinct_labels(&self) -> usize {
        let mut seen = vec![false; self.classes];
        self.labels.iter().for_each(|&y| seen[y] = true);
        seen.into_iter().filter(|&s| s).count()
    }
}

/// Raw IDX image tensor (`count × rows × cols` unsigned bytes).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.len().checked_div(self.rows * self.cols).unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len());
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.count() as u32).to_be_bytes());
        out.extend_from_slice(&(self.rows as u32).to_be_bytes());
        out.extend_from_slice(&(self.cols as u32).to_be_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }
}

pub fn labels_to_idx_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let Some(b) = self.bytes.get(self.pos..self.pos + 4) else {
            return Err(Error::Parse { offset: self.pos as u64, message: format!("truncated file while reading {what}") });
        };
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n);
        match end.and_then(|e| self.bytes.get(self.pos..e)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.bytes.len() as u64,
                message: format!("truncated {what}: need {n} bytes from offset {}, file has {}", self.pos, self.bytes.len()),
            }),
        }
    }
}

fn expect_magic(cur: &mut Cursor<'_>, want: u32) -> Result<()> {
    let magic = cur.u32("magic number")?;
    if magic != want {
        return Err(Error::Parse { offset: 0, message: format!("bad magic number {magic:#010x}, expected {want:#010x}") });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut cur = Cursor { bytes, pos: 0 };
    expect_magic(&mut cur, IDX_IMAGES_MAGIC)?;
    let count = cur.u32("image count")? as usize;
    let rows = cur.u32("row count")? as usize;
    let cols = cur.u32("column count")? as usize;
    let pixels = cur.take(count * rows * cols, "image payload")?.to_vec();
    if cur.pos != bytes.len() {
        return Err(Error::Parse { offset: cur.pos as u64, message: format!("{} trailing bytes after image payload", bytes.len() - cur.pos) });
    }
    Ok(IdxImages { rows, cols, pixels })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor { bytes, pos: 0 };
    expect_magic(&mut cur, IDX_LABELS_MAGIC)?;
    let count = cur.u32("label count")? as usize;
    let labels = cur.take(count, "label payload")?.to_vec();
    if cur.pos != bytes.len() {
        return Err(Error::Parse { offset: cur.pos as u64, message: format!("{} trailing bytes after label payload", bytes.len() - cur.pos) });
    }
    Ok(labels)
}

/// Read a file, gunzipping transparently when the name ends in `.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let f = BufReader::new(File::open(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(f).read_to_end(&mut buf)?;
    } else {
        let mut f = f;
        f.read_to_end(&mut buf)?;
    }
    Ok(buf)
}

/// Combine parsed images and labels into a dataset with pixels scaled by 1/255.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count() != labels.len() {
        return Err(Error::Parse {
            offset: 4,
            message: format!("count mismatch: {} images but {} labels", images.count(), labels.len()),
        });
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0).max(2);
    Dataset::new(
        images.rows * images.cols,
        classes,
        images.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
    )
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path.as_ref())?)?;
    dataset_from_idx(&images, &labels)
}

/// Write a dataset back as IDX (features must form `rows × cols` images).
pub fn write_idx(ds: &Dataset, rows: usize, cols: usize, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    if rows * cols != ds.features {
        return contract(format!("{rows}×{cols} does not match {} features", ds.features));
    }
    let pixels = ds.inputs.iter().map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let labels: Vec<u8> = ds.labels.iter().map(|&y| y as u8).collect();
    File::create(images_path)?.write_all(&IdxImages { rows, cols, pixels }.to_bytes())?;
    File::create(labels_path)?.write_all(&labels_to_idx_bytes(&labels))?;
    Ok(())
}

/// Class-c center: a scaled simplex vertex when classes fit the feature count,
/// otherwise a fixed pseudo-random point in [0.2, 0.8]^dim.
fn blob_center(c: usize, classes: usize, dim: usize) -> Vec<f64> {
    if classes <= dim {
        (0..dim).map(|j| if j == c { 0.8 } else { 0.2 }).collect()
    } else {
        let mut r = rng::stream(0x5eed, Stream::Synth, &[classes as u64, dim as u64, c as u64]);
        (0..dim).map(|_| r.random_range(0.2..0.8)).collect()
    }
}

/// Isotropic Gaussian blobs clamped to [0, 1], split 80/20 per class.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return contract(format!("synth_blobs needs at least 2 classes, got {classes}"));
    }
    if dim == 0 || per_class == 0 {
        return contract("synth_blobs needs positive dim and per_class");
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return contract(format!("spread must be a finite nonnegative number, got {spread}"));
    }
    let mut rng = rng::stream(seed, Stream::Synth, &[]);
    let n_train = per_class * 4 / 5;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for c in 0..classes {
        let center = blob_center(c, classes, dim);
        for k in 0..per_class {
            let dst = if k < n_train { &mut train } else { &mut test };
            for &mu in &center {
                let noise = if spread > 0.0 { Normal::new(0.0, spread).unwrap().sample(&mut rng) } else { 0.0 };
                dst.0.push((mu + noise).clamp(0.0, 1.0));
            }
            dst.1.push(c);
        }
    }
    let shuffle = |(x, y): (Vec<f64>, Vec<usize>), rng: &mut rand_chacha::ChaCha8Rng| -> Result<Dataset> {
        let ds = Dataset::new(dim, classes, x, y)?;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(rng);
        Ok(ds.subset(&order))
    };
    let train = shuffle(train, &mut rng)?;
    let test = shuffle(test, &mut rng)?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    Bias,
}

/// How training samples are distributed over clients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
    /// Non-IID degree q ∈ [1/L, 1]; ignored for IID.
    pub bias: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(clients: usize, seed: u64) -> Self {
        Self { mode: PartitionMode::Iid, clients, bias: 0.0, seed }
    }

    pub fn bias(clients: usize, q: f64, seed: u64) -> Self {
        Self { mode: PartitionMode::Bias, clients, bias: q, seed }
    }
}

/// Split `ds` into `spec.clients` disjoint shards covering every sample.
///
/// IID deals a random permutation round-robin. Bias mode assigns client `j`
/// to group `j mod L`; a sample of label `l` goes to group `l` with probability
/// `q` and to each other group with probability `(1 − q)/(L − 1)`, then to a
/// uniformly chosen client of that group.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    let n = spec.clients;
    if n == 0 {
        return contract("partition into zero clients");
    }
    if n > ds.len() {
        return contract(format!("{n} clients but only {} samples", ds.len()));
    }
    let assign = match spec.mode {
        PartitionMode::Iid => {
            let mut rng = rng::stream(spec.seed, Stream::Partition, &[0]);
            let mut order: Vec<usize> = (0..ds.len()).collect();
            order.shuffle(&mut rng);
            let mut shards = vec![Vec::new(); n];
            for (k, i) in order.into_iter().enumerate() {
                shards[k % n].push(i);
            }
            shards
        }
        PartitionMode::Bias => bias_assign(ds, spec)?,
    };
    Ok(assign.iter().map(|idx| ds.subset(idx)).collect())
}

fn bias_assign(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let l = ds.classes;
    let n = spec.clients;
    let q = spec.bias;
    let lo = 1.0 / l as f64;
    if !(q >= lo - 1e-12 && q <= 1.0) {
        return config(format!("bias degree q={q} outside [1/L, 1] = [{lo}, 1]"));
    }
    if n < l {
        return config(format!("bias partition needs at least one client per label group ({l} groups, {n} clients)"));
    }
    let groups: Vec<Vec<usize>> = (0..l).map(|g| (0..n).filter(|j| j % l == g).collect()).collect();
    let other = (1.0 - q) / (l - 1) as f64;
    for attempt in 0..64u64 {
        let mut rng = rng::stream(spec.seed, Stream::Partition, &[1, attempt]);
        let mut shards = vec![Vec::new(); n];
        for (i, &y) in ds.labels.iter().enumerate() {
            let u: f64 = rng.random();
            let g = if u < q {
                y
            } else {
                // one of the other L−1 groups, uniformly
                let k = (((u - q) / other) as usize).min(l - 2);
                if k >= y { k + 1 } else { k }
            };
            let members = &groups[g];
            let client = members[rng.random_range(0..members.len())];
            shards[client].push(i);
        }
        if shards.iter().all(|s| !s.is_empty()) {
            return Ok(shards);
        }
    }
    config("bias partition left a client empty after 64 reseeds; use fewer clients or more data")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, classes: usize) -> Dataset {
        Dataset::new(1, classes, (0..n).map(|i| i as f64 / n as f64).collect(), (0..n).map(|i| i % classes).collect()).unwrap()
    }

    #[test]
    fn synth_split_sizes_and_determinism() {
        let (tr, te) = synth_blobs(4, 10, 6, 0.1, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (32, 8));
        assert_eq!(synth_blobs(4, 10, 6, 0.1, 3).unwrap(), (tr.clone(), te));
        assert!(tr.inputs.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let (tr62, _) = synth_blobs(62, 5, 16, 0.05, 1).unwrap();
        assert_eq!(tr62.distinct_labels(), 62);
    }

    #[test]
    fn iid_partition_sizes() {
        let ds = toy(100, 4);
        let parts = partition(&ds, &PartitionSpec::iid(4, 9)).unwrap();
        assert!(parts.iter().all(|p| p.len() == 25));
        assert!(partition(&ds, &PartitionSpec::iid(101, 9)).is_err());
    }

    #[test]
    fn full_bias_gives_one_label_per_client() {
        let ds = toy(400, 4);
        let parts = partition(&ds, &PartitionSpec::bias(4, 1.0, 2)).unwrap();
        for (j, p) in parts.iter().enumerate() {
            assert!(p.labels.iter().all(|&y| y == j));
        }
    }

    #[test]
    fn bias_rejects_out_of_range_degree() {
        let ds = toy(400, 4);
        assert!(partition(&ds, &PartitionSpec::bias(4, 0.1, 2)).is_err());
        assert!(partition(&ds, &PartitionSpec::bias(4, 1.1, 2)).is_err());
        assert!(partition(&ds, &PartitionSpec::bias(3, 0.5, 2)).is_err());
    }

    #[test]
    fn idx_errors() {
        let imgs = IdxImages { rows: 2, cols: 2, pixels: vec![0, 255, 128, 7, 1, 2, 3, 4] };
        let mut bytes = imgs.to_bytes();
        assert_eq!(parse_idx_images(&bytes).unwrap(), imgs);
        bytes[3] = 0x01;
        match parse_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        let truncated = &imgs.to_bytes()[..18];
        assert!(matches!(parse_idx_images(truncated), Err(Error::Parse { .. })));
        let labels = parse_idx_labels(&labels_to_idx_bytes(&[3])).unwrap();
        assert!(matches!(dataset_from_idx(&imgs, &labels), Err(Error::Parse { .. })));
    }
}
