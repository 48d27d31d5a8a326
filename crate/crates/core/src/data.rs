//! Synthetic datasets, label-skew partitioning and two-view augmentation.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("could not place {classes} centers {min_sep} apart in {dim} dimensions")]
    CenterPlacement { classes: usize, dim: usize, min_sep: f64 },
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} samples but {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} >= {num_classes} classes")));
        }
        let counts = label_histogram(&labels, num_classes);
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(DataError::Invalid(format!("class {c} is empty")));
        }
        Ok(Self { samples, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Rows at `indices`, keeping the class count. Classes may be absent.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Flat binary format: `u32` N, d, C (little endian), then N rows of
    /// `d` little-endian `f64`, then N label bytes.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        if self.num_classes > 256 {
            return Err(DataError::Format("labels must fit in one byte".into()));
        }
        for v in [self.len(), self.dim(), self.num_classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in self.samples.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        w.write_all(&labels)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 12 {
            return Err(DataError::Format("truncated header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (n, d, c) = (word(0), word(1), word(2));
        let expected = 12 + n * d * 8 + n;
        if buf.len() != expected {
            return Err(DataError::Format(format!("expected {expected} bytes, found {}", buf.len())));
        }
        let floats: Vec<f64> = buf[12..12 + n * d * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let labels = buf[12 + n * d * 8..].iter().map(|&b| b as usize).collect();
        let samples = Array2::from_shape_vec((n, d), floats).map_err(|e| DataError::Format(e.to_string()))?;
        Dataset::new(samples, labels, c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

pub fn label_histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Gaussian-blob dataset description. Centers are standard-normal draws,
/// rejected until every pair is at least `4 * spread` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { classes: 10, per_class: 100, test_per_class: 50, dim: 32, spread: 1.0 }
    }
}

const CENTER_RETRIES: usize = 1000;

impl BlobSpec {
    fn centers(&self, rng: &mut rng::StreamRng) -> Result<Vec<Array1<f64>>> {
        if self.classes < 2 || self.per_class < 2 || self.dim == 0 {
            return Err(DataError::Invalid("need at least 2 classes, 2 samples per class, dim >= 1".into()));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(DataError::Invalid(format!("spread {}", self.spread)));
        }
        let min_sep = 4.0 * self.spread;
        let mut centers: Vec<Array1<f64>> = Vec::with_capacity(self.classes);
        for _ in 0..self.classes {
            let mut placed = false;
            for _ in 0..CENTER_RETRIES {
                let c: Array1<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
                if centers.iter().all(|o| {
                    let d = o - &c;
                    d.dot(&d).sqrt() >= min_sep
                }) {
                    centers.push(c);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(DataError::CenterPlacement { classes: self.classes, dim: self.dim, min_sep });
            }
        }
        Ok(centers)
    }

    fn sample(&self, centers: &[Array1<f64>], per_class: usize, rng: &mut rng::StreamRng) -> Dataset {
        let n = centers.len() * per_class;
        let mut samples = Array2::zeros((n, self.dim));
        let mut labels = Vec::with_capacity(n);
        for (c, center) in centers.iter().enumerate() {
            for i in 0..per_class {
                let mut row = samples.row_mut(c * per_class + i);
                for (j, v) in row.iter_mut().enumerate() {
                    let noise: f64 = StandardNormal.sample(rng);
                    *v = center[j] + self.spread * noise;
                }
                labels.push(c);
            }
        }
        Dataset { samples, labels, num_classes: centers.len() }
    }

    /// Train and held-out test sets drawn around the same centers.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut center_rng = rng::stream(seed, Stream::Data, 0);
        let centers = self.centers(&mut center_rng)?;
        let train = self.sample(&centers, self.per_class, &mut rng::stream(seed, Stream::Data, 1));
        let test = if self.test_per_class > 0 {
            self.sample(&centers, self.test_per_class, &mut rng::stream(seed, Stream::Data, 2))
        } else {
            Dataset { samples: Array2::zeros((0, self.dim)), labels: vec![], num_classes: self.classes }
        };
        Ok((train, test))
    }
}

/// `classes` Gaussian blobs of `per_class` samples each, class-major order.
pub fn make_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    let spec = BlobSpec { classes, per_class, test_per_class: 0, dim, spread };
    spec.generate(seed).map(|(train, _)| train)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub classes_per_client: usize,
    pub seed: u64,
}

/// Label-skew split: every class is cut into `K * l / C` equal shuffled
/// sets, and each client receives `l` sets of `l` distinct classes.
///
/// Sets are laid out class-major over a seeded class permutation and dealt
/// round-robin starting at a seeded client offset. Since a class owns at
/// most `K` consecutive sets, no client can receive the same class twice;
/// the final check only guards against that invariant breaking.
pub fn partition_non_iid(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    let (k, l, c) = (spec.clients, spec.classes_per_client, ds.num_classes);
    if k == 0 || l == 0 {
        return Err(DataError::InfeasiblePartition("clients and classes per client must be positive".into()));
    }
    if l > c {
        return Err(DataError::InfeasiblePartition(format!("{l} classes per client but only {c} classes")));
    }
    if (k * l) % c != 0 {
        return Err(DataError::InfeasiblePartition(format!(
            "{k} clients x {l} classes is not a multiple of {c} classes"
        )));
    }
    let sets_per_class = k * l / c;
    let mut rng = rng::stream(spec.seed, Stream::Partition, 0);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &lab) in ds.labels.iter().enumerate() {
        by_class[lab].push(i);
    }
    let mut class_sets: Vec<Vec<Vec<usize>>> = Vec::with_capacity(c);
    for idx in by_class.iter_mut() {
        idx.shuffle(&mut rng);
        let size = idx.len() / sets_per_class;
        if size == 0 {
            return Err(DataError::InfeasiblePartition("a class has fewer samples than sets".into()));
        }
        class_sets.push((0..sets_per_class).map(|s| idx[s * size..(s + 1) * size].to_vec()).collect());
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng);
    let offset = rng.random_range(0..k);

    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut client_classes: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut pos = 0;
    for &class in &order {
        for set in &class_sets[class] {
            let client = (pos + offset) % k;
            if client_classes[client].contains(&class) {
                return Err(DataError::InfeasiblePartition(format!(
                    "client {client} would receive class {class} twice"
                )));
            }
            client_classes[client].push(class);
            clients[client].extend_from_slice(set);
            pos += 1;
        }
    }
    for idx in clients.iter_mut() {
        idx.sort_unstable();
    }
    Ok(clients)
}

/// Sidecar listing: one line per client, `client_id: i0 i1 ...`.
pub fn write_partition<W: Write>(mut w: W, parts: &[Vec<usize>]) -> std::io::Result<()> {
    for (k, idx) in parts.iter().enumerate() {
        write!(w, "{k}:")?;
        for i in idx {
            write!(w, " {i}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Vector augmentations: additive Gaussian noise, coordinate dropout and a
/// random global scale, applied in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugSpec {
    pub noise_std: f64,
    pub mask_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugSpec {
    fn default() -> Self {
        Self { noise_std: 2.0, mask_prob: 0.5, scale_min: 0.8, scale_max: 1.2 }
    }
}

impl AugSpec {
    pub fn identity() -> Self {
        Self { noise_std: 0.0, mask_prob: 0.0, scale_min: 1.0, scale_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.mask_prob) || !(self.scale_min <= self.scale_max) {
            return Err(DataError::Invalid(format!("augmentation {self:?}")));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, sample: &ArrayView1<f64>, rng: &mut R) -> Array1<f64> {
        let mut out = sample.to_owned();
        if self.noise_std > 0.0 {
            for v in out.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *v += self.noise_std * n;
            }
        }
        if self.mask_prob > 0.0 {
            for v in out.iter_mut() {
                if rng.random_bool(self.mask_prob) {
                    *v = 0.0;
                }
            }
        }
        if self.scale_min < self.scale_max {
            out *= rng.random_range(self.scale_min..self.scale_max);
        } else if self.scale_min != 1.0 {
            out *= self.scale_min;
        }
        out
    }
}

/// Two independent augmentations of one sample.
pub fn two_views<R: Rng + ?Sized>(sample: &ArrayView1<f64>, aug: &AugSpec, rng: &mut R) -> (Array1<f64>, Array1<f64>) {
    let a = aug.apply(sample, rng);
    let b = aug.apply(sample, rng);
    (a, b)
}

/// Row-wise [`two_views`] over a batch.
pub fn two_view_batch<R: Rng + ?Sized>(batch: &ArrayView2<f64>, aug: &AugSpec, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let mut v1 = Array2::zeros(batch.raw_dim());
    let mut v2 = Array2::zeros(batch.raw_dim());
    for (i, row) in batch.rows().into_iter().enumerate() {
        let (a, b) = two_views(&row, aug, rng);
        v1.row_mut(i).assign(&a);
        v2.row_mut(i).assign(&b);
    }
    (v1, v2)
}
