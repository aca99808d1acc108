//! Dataset loading, synthetic data, client partitioning and mini-batches.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IdxErrorKind, Result};
use crate::model::Dataset;
use crate::rng::{KeyedRng, NormalStream, Seed64};

const DOMAIN_PARTITION: u64 = 0x7061_7274;
const DOMAIN_BATCH: u64 = 0x6261_7463;
const DOMAIN_SYNTHETIC: u64 = 0x7379_6e74;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// How many times a Dirichlet partition is redrawn before giving up on
/// giving every client at least one sample.
pub const MAX_PARTITION_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub kind: PartitionKind,
    pub seed: Seed64,
}

fn shuffle(items: &mut [usize], rng: &mut KeyedRng) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

fn by_label(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups
}

/// Splits sample indices among `n` clients.
///
/// IID: each label's samples are shuffled and dealt round-robin, with the
/// dealer position carried over from one label to the next, so both the
/// per-label and the total counts differ by at most one across clients.
///
/// Dirichlet: for each label a client distribution `q ~ Dir(α·1_n)` is drawn
/// and every sample of the label is assigned to a client drawn from `q`.
/// Draws leaving a client empty are rejected and the whole partition redrawn.
///
/// Every list is sorted ascending.
pub fn partition(labels: &[usize], n: usize, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("labels"));
    }
    if n == 0 {
        return Err(invalid("n", "need at least one client"));
    }
    if labels.len() < n {
        return Err(Error::Partition(format!(
            "{} samples cannot give each of {n} clients one sample",
            labels.len()
        )));
    }
    let groups = by_label(labels);
    let mut parts = match spec.kind {
        PartitionKind::Iid => {
            let mut rng = spec.seed.derive(DOMAIN_PARTITION, &[0]).rng();
            let mut parts = vec![Vec::new(); n];
            let mut dealer = 0usize;
            for group in &groups {
                let mut g = group.clone();
                shuffle(&mut g, &mut rng);
                for i in g {
                    parts[dealer % n].push(i);
                    dealer += 1;
                }
            }
            parts
        }
        PartitionKind::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(invalid("alpha", format!("must be positive and finite, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| invalid("alpha", e.to_string()))?;
            let mut attempt = 0;
            loop {
                let mut rng = spec.seed.derive(DOMAIN_PARTITION, &[1, attempt as u64]).rng();
                let parts = dirichlet_draw(&groups, n, &gamma, &mut rng);
                if parts.iter().all(|p| !p.is_empty()) {
                    break parts;
                }
                attempt += 1;
                if attempt == MAX_PARTITION_RETRIES {
                    return Err(Error::Partition(format!(
                        "no Dirichlet(alpha = {alpha}) draw gave all {n} clients a sample \
                         in {MAX_PARTITION_RETRIES} attempts"
                    )));
                }
            }
        }
    };
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

fn dirichlet_draw(groups: &[Vec<usize>], n: usize, gamma: &Gamma<f64>, rng: &mut KeyedRng) -> Vec<Vec<usize>> {
    let mut parts = vec![Vec::new(); n];
    let mut cdf = vec![0.0; n];
    for group in groups {
        let mut total = 0.0;
        for slot in cdf.iter_mut() {
            total += gamma.sample(rng);
            *slot = total;
        }
        if !(total > 0.0) {
            // Every gamma draw underflowed: fall back to a point mass.
            let c = rng.below(n as u64) as usize;
            for (k, slot) in cdf.iter_mut().enumerate() {
                *slot = if k >= c { 1.0 } else { 0.0 };
            }
            total = 1.0;
        }
        for &i in group {
            let u = rng.random::<f64>() * total;
            let c = cdf.partition_point(|&x| x <= u).min(n - 1);
            parts[c].push(i);
        }
    }
    parts
}

/// Draws `min(batch_size, |client|)` distinct entries of `client`,
/// uniformly, as a pure function of `(seed, t, l, client_id)`.
pub fn minibatch(client: &[usize], batch_size: usize, seed: Seed64, t: u64, l: u64, client_id: u64) -> Vec<usize> {
    if batch_size >= client.len() {
        return client.to_vec();
    }
    let mut rng = seed.derive(DOMAIN_BATCH, &[t, l, client_id]).rng();
    let mut pool = client.to_vec();
    for i in 0..batch_size {
        let j = i + rng.below((pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(batch_size);
    pool
}

/// Parameters of the synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise: f64,
    pub seed: Seed64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 2000,
            dim: 20,
            classes: 10,
            separation: 4.0,
            noise: 1.0,
            seed: Seed64(7),
        }
    }
}

/// Gaussian class-conditional clusters. Sample `i` has label `i mod C`, so
/// class counts differ by at most one.
pub fn synthetic_classification(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(invalid("classes", "need at least 2 classes"));
    }
    if spec.dim == 0 {
        return Err(Error::InvalidDimension(0));
    }
    if spec.samples == 0 {
        return Err(Error::EmptyInput("samples"));
    }
    if !(spec.noise >= 0.0 && spec.separation.is_finite() && spec.noise.is_finite()) {
        return Err(invalid("noise", "must be finite and non-negative"));
    }
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let raw: Vec<f64> = NormalStream::new(spec.seed.derive(DOMAIN_SYNTHETIC, &[0, c as u64]))
                .take(spec.dim)
                .collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            raw.into_iter().map(|x| spec.separation * x / norm).collect()
        })
        .collect();
    let mut noise = NormalStream::new(spec.seed.derive(DOMAIN_SYNTHETIC, &[1]));
    let mut features = Vec::with_capacity(spec.samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let c = i % spec.classes;
        for m in &means[c] {
            features.push(m + spec.noise * noise.next().expect("infinite stream"));
        }
        labels.push(c);
    }
    Dataset::new(features, labels, spec.dim, spec.classes)
}

fn idx_error(path: &Path, kind: IdxErrorKind) -> Error {
    Error::IdxParse {
        path: path.to_path_buf(),
        kind,
    }
}

/// Validates an IDX header and returns the dimension sizes and payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32, ndims: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(idx_error(
            path,
            IdxErrorKind::Truncated {
                expected_bytes: header,
                found_bytes: bytes.len(),
            },
        ));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(idx_error(path, IdxErrorKind::BadMagic { expected: magic, found }));
    }
    if bytes.len() < header {
        return Err(idx_error(
            path,
            IdxErrorKind::Truncated {
                expected_bytes: header,
                found_bytes: bytes.len(),
            },
        ));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let payload = dims.iter().product::<usize>();
    if bytes.len() < header + payload {
        return Err(idx_error(
            path,
            IdxErrorKind::Truncated {
                expected_bytes: header + payload,
                found_bytes: bytes.len(),
            },
        ));
    }
    Ok((dims, &bytes[header..header + payload]))
}

/// Reads an IDX image file and its label file. Pixels are scaled to `[0, 1]`;
/// labels must be digits.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images)?;
    let label_bytes = std::fs::read(labels)?;
    let (dims, pixels) = parse_idx(images, &image_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, raw_labels) = parse_idx(labels, &label_bytes, IDX_LABELS_MAGIC, 1)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    if rows * cols == 0 {
        return Err(idx_error(
            images,
            IdxErrorKind::BadShape(format!("image size {rows}x{cols}")),
        ));
    }
    if count != ldims[0] {
        return Err(Error::CountMismatch {
            images: count,
            labels: ldims[0],
        });
    }
    if let Some(&bad) = raw_labels.iter().find(|&&l| l > 9) {
        return Err(idx_error(labels, IdxErrorKind::BadShape(format!("label {bad} is not a digit"))));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = raw_labels.iter().map(|&l| usize::from(l)).collect();
    Dataset::new(features, labels, rows * cols, 10)
}

/// The four standard file names inside an MNIST directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.is_file())
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            load_mnist_idx(&self.train_images, &self.train_labels)?,
            load_mnist_idx(&self.test_images, &self.test_labels)?,
        ))
    }
}

/// Affine feature transform applied after loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    /// Leave features as loaded.
    #[default]
    None,
    /// Subtract the training mean and divide by the training standard
    /// deviation, both pooled over all feature values.
    Standardize,
}

/// Applies `scaling` to both sets using statistics of `train`.
pub fn scale_features(scaling: FeatureScaling, train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    match scaling {
        FeatureScaling::None => Ok((train, test)),
        FeatureScaling::Standardize => {
            let (mean, std) = train.feature_moments();
            let std = if std > 0.0 { std } else { 1.0 };
            let (a, b) = (1.0 / std, -mean / std);
            Ok((train.affine_map(a, b)?, test.affine_map(a, b)?))
        }
    }
}
