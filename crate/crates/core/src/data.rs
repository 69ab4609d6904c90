//! Dataset ingestion and preprocessing.
//!
//! Supported sources: the UCI SGEMM GPU-kernel performance CSV, MNIST in IDX
//! format, and a seeded synthetic regression task. Every transform applied
//! is recorded in [`DatasetMeta`] so that reported numbers are auditable.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of kernel-parameter columns in the SGEMM CSV.
pub const SGEMM_FEATURES: usize = 14;
/// Number of run-time columns in the SGEMM CSV.
pub const SGEMM_RUNS: usize = 4;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Targets {
    Regression { values: Tensor },
    Labels { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression { values } => values.rows(),
            Targets::Labels { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Train/test partition as index lists into the dataset rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_fraction: f64,
    pub seed: Option<u64>,
}

/// Per-column affine standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetMeta {
    pub source: String,
    pub rows: usize,
    /// Human-readable list of every transform applied, in order.
    pub preprocessing: Vec<String>,
    /// SHA-256 of the source file(s), hex.
    pub checksum: Option<String>,
    pub feature_standardizer: Option<Standardizer>,
    pub target_standardizer: Option<Standardizer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub targets: Targets,
    pub split: Split,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.targets, Targets::Labels { .. })
    }

    /// Feature rows for `indices`.
    pub fn batch_features(&self, indices: &[usize]) -> Result<Tensor> {
        self.features.gather_rows(indices)
    }

    /// Regression targets for `indices` as a column tensor.
    pub fn batch_targets(&self, indices: &[usize]) -> Result<Tensor> {
        match &self.targets {
            Targets::Regression { values } => values.gather_rows(indices),
            Targets::Labels { .. } => Err(Error::Usage("dataset has labels, not regression targets".into())),
        }
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Result<Vec<usize>> {
        match &self.targets {
            Targets::Labels { labels, .. } => Ok(indices.iter().map(|&i| labels[i]).collect()),
            Targets::Regression { .. } => Err(Error::Usage("dataset has regression targets, not labels".into())),
        }
    }

    /// Writes the preprocessed dataset to a versioned binary cache file.
    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let payload = serde_json::to_vec(&CachePayload {
            meta: &self.meta,
            split: &self.split,
            targets_kind: match &self.targets {
                Targets::Regression { .. } => None,
                Targets::Labels { classes, .. } => Some(*classes),
            },
        })?;
        let mut body = Vec::new();
        put_u64(&mut body, payload.len() as u64);
        body.extend_from_slice(&payload);
        put_tensor(&mut body, &self.features);
        match &self.targets {
            Targets::Regression { values } => put_tensor(&mut body, values),
            Targets::Labels { labels, .. } => {
                put_u64(&mut body, labels.len() as u64);
                for &l in labels {
                    put_u64(&mut body, l as u64);
                }
            }
        }
        let digest = Sha256::digest(&body);
        let mut f = File::create(path)?;
        f.write_all(CACHE_MAGIC)?;
        f.write_all(&CACHE_VERSION.to_le_bytes())?;
        f.write_all(&body)?;
        f.write_all(&digest)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 8 + 32 || &bytes[..4] != CACHE_MAGIC {
            return Err(Error::Format(format!("{} is not a dataset cache", path.display())));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset cache version {version} (expected {CACHE_VERSION})"
            )));
        }
        let (body, digest) = bytes[8..].split_at(bytes.len() - 8 - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format(format!("checksum mismatch in {}", path.display())));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        let n = cur.u64()? as usize;
        let payload: CachePayloadOwned = serde_json::from_slice(cur.take(n)?)?;
        let features = cur.tensor()?;
        let targets = match payload.targets_kind {
            None => Targets::Regression { values: cur.tensor()? },
            Some(classes) => {
                let n = cur.u64()? as usize;
                let labels = (0..n).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<_>>()?;
                Targets::Labels { labels, classes }
            }
        };
        Ok(Self {
            features,
            targets,
            split: payload.split,
            meta: payload.meta,
        })
    }
}

const CACHE_MAGIC: &[u8; 4] = b"GNDS";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize)]
struct CachePayload<'a> {
    meta: &'a DatasetMeta,
    split: &'a Split,
    targets_kind: Option<usize>,
}

#[derive(Deserialize)]
struct CachePayloadOwned {
    meta: DatasetMeta,
    split: Split,
    targets_kind: Option<usize>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    put_u64(buf, t.shape().len() as u64);
    for &d in t.shape() {
        put_u64(buf, d as u64);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated dataset cache".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u64()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Tensor::new(shape, data)
    }
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = BufReader::new(File::open(path)?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Fails with a config error unless `path` hashes to `expected` (hex SHA-256).
pub fn verify_checksum(path: &Path, expected: &str) -> Result<()> {
    let actual = file_sha256(path)?;
    if !actual.eq_ignore_ascii_case(expected.trim()) {
        return Err(Error::Config(format!(
            "checksum mismatch for {}: expected {expected}, got {actual}",
            path.display()
        )));
    }
    Ok(())
}

/// Seeded uniform shuffle into disjoint train/test index lists.
///
/// The test split gets `round(n · test_fraction)` rows.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} leaves an empty partition for {n} rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n - n_test);
    Ok(Split {
        train: idx,
        test,
        test_fraction,
        seed: Some(seed),
    })
}

/// Re-partitions `dataset` with a fresh seeded split.
pub fn split(mut dataset: Dataset, test_fraction: f64, seed: u64) -> Result<Dataset> {
    dataset.split = split_indices(dataset.len(), test_fraction, seed)?;
    dataset
        .meta
        .preprocessing
        .push(format!("split: test_fraction={test_fraction}, seed={seed}"));
    Ok(dataset)
}

impl Standardizer {
    /// Column means and population standard deviations over `rows` of `x`.
    /// Constant columns get a unit scale.
    pub fn fit(x: &Tensor, rows: &[usize]) -> Self {
        let cols = x.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; cols];
        for &r in rows {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for &r in rows {
            for (c, v) in x.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &mut Tensor) {
        let cols = x.cols();
        for row in x.data_mut().chunks_mut(cols) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Loads the SGEMM CSV with the default 80/20 split (seed 0).
pub fn load_sgemm(path: &Path) -> Result<Dataset> {
    load_sgemm_with(path, 0.2, 0)
}

/// Loads the SGEMM CSV: 14 kernel parameters standardized on the train split;
/// target `log10(mean of the 4 runs)` standardized on the train split.
pub fn load_sgemm_with(path: &Path, test_fraction: f64, seed: u64) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let expected = SGEMM_FEATURES + SGEMM_RUNS;
    let header_len = rdr.headers()?.len();
    if header_len != expected {
        return Err(Error::Format(format!(
            "SGEMM CSV must have {expected} columns, header has {header_len}"
        )));
    }
    let mut feats = Vec::new();
    let mut targets = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // data rows are numbered from 2 (line 1 is the header)
        let row_no = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {row_no}: {e}")))?;
        if rec.len() != expected {
            return Err(Error::Format(format!(
                "row {row_no}: expected {expected} columns, got {}",
                rec.len()
            )));
        }
        let mut vals = [0.0; SGEMM_FEATURES + SGEMM_RUNS];
        for (j, field) in rec.iter().enumerate() {
            vals[j] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Data(format!("row {row_no}, column {}: cannot parse '{field}'", j + 1)))?;
        }
        let runs = &vals[SGEMM_FEATURES..];
        let mean_run = runs.iter().sum::<f64>() / SGEMM_RUNS as f64;
        if !(mean_run > 0.0) {
            return Err(Error::Data(format!("row {row_no}: non-positive mean run time {mean_run}")));
        }
        feats.extend_from_slice(&vals[..SGEMM_FEATURES]);
        targets.push(mean_run.log10());
    }
    let n = targets.len();
    if n < 2 {
        return Err(Error::Data(format!("SGEMM CSV has only {n} data rows")));
    }
    let mut features = Tensor::new(vec![n, SGEMM_FEATURES], feats)?;
    let mut values = Tensor::new(vec![n, 1], targets)?;
    let split = split_indices(n, test_fraction, seed)?;
    let fs = Standardizer::fit(&features, &split.train);
    fs.apply(&mut features);
    let ts = Standardizer::fit(&values, &split.train);
    ts.apply(&mut values);

    Ok(Dataset {
        features,
        targets: Targets::Regression { values },
        meta: DatasetMeta {
            source: format!("sgemm:{}", path.display()),
            rows: n,
            preprocessing: vec![
                format!("split: test_fraction={test_fraction}, seed={seed}"),
                "features: 14 kernel parameters, standardized with train-split mean/std".into(),
                "target: log10(mean(Run1..Run4)), standardized with train-split mean/std".into(),
            ],
            checksum: Some(file_sha256(path)?),
            feature_standardizer: Some(fs),
            target_standardizer: Some(ts),
        },
        split,
    })
}

fn read_be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Reads an IDX image file into `(count, rows·cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let buf = std::fs::read(path)?;
    let magic = read_be_u32(&buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad IDX image magic 0x{magic:08x} (expected 0x{IDX_IMAGES_MAGIC:08x})",
            path.display()
        )));
    }
    let count = read_be_u32(&buf, 4)? as usize;
    let rows = read_be_u32(&buf, 8)? as usize;
    let cols = read_be_u32(&buf, 12)? as usize;
    let need = count * rows * cols;
    let pixels = buf.get(16..16 + need).ok_or_else(|| {
        Error::Format(format!(
            "{}: header declares {need} pixel bytes, file has {}",
            path.display(),
            buf.len().saturating_sub(16)
        ))
    })?;
    Ok((count, rows * cols, pixels.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let buf = std::fs::read(path)?;
    let magic = read_be_u32(&buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad IDX label magic 0x{magic:08x} (expected 0x{IDX_LABELS_MAGIC:08x})",
            path.display()
        )));
    }
    let count = read_be_u32(&buf, 4)? as usize;
    let labels = buf.get(8..8 + count).ok_or_else(|| {
        Error::Format(format!("{}: header declares {count} labels, file is shorter", path.display()))
    })?;
    Ok(labels.to_vec())
}

/// Paths of the four MNIST IDX files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MnistFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl MnistFiles {
    /// The canonical file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }
}

/// Loads MNIST: pixels scaled to `[0, 1]`, canonical train/test partition.
pub fn load_mnist(files: &MnistFiles) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    let mut counts = [0usize; 2];
    let mut dim = None;
    let mut hasher = Sha256::new();
    for (k, (img, lbl)) in [
        (&files.train_images, &files.train_labels),
        (&files.test_images, &files.test_labels),
    ]
    .into_iter()
    .enumerate()
    {
        let (n, d, px) = read_idx_images(img)?;
        let ls = read_idx_labels(lbl)?;
        if ls.len() != n {
            return Err(Error::Data(format!(
                "{} has {n} images but {} has {} labels",
                img.display(),
                lbl.display(),
                ls.len()
            )));
        }
        if *dim.get_or_insert(d) != d {
            return Err(Error::Data("train and test images differ in size".into()));
        }
        if let Some(bad) = ls.iter().find(|&&l| l > 9) {
            return Err(Error::Data(format!("{}: label {bad} outside 0..=9", lbl.display())));
        }
        hasher.update(file_sha256(img)?.as_bytes());
        hasher.update(file_sha256(lbl)?.as_bytes());
        pixels.extend(px.iter().map(|&p| p as f64 / 255.0));
        labels.extend(ls.iter().map(|&l| l as usize));
        counts[k] = n;
    }
    let d = dim.unwrap_or(0);
    let n = counts[0] + counts[1];
    if counts[0] == 0 || counts[1] == 0 || d == 0 {
        return Err(Error::Data("MNIST files contain no images".into()));
    }
    Ok(Dataset {
        features: Tensor::new(vec![n, d], pixels)?,
        targets: Targets::Labels { labels, classes: 10 },
        split: Split {
            train: (0..counts[0]).collect(),
            test: (counts[0]..n).collect(),
            test_fraction: counts[1] as f64 / n as f64,
            seed: None,
        },
        meta: DatasetMeta {
            source: format!("mnist:{}", files.train_images.parent().unwrap_or(Path::new(".")).display()),
            rows: n,
            preprocessing: vec![
                "features: flattened pixels / 255".into(),
                "split: canonical train/test files".into(),
            ],
            checksum: Some(hex::encode(hasher.finalize())),
            feature_standardizer: None,
            target_standardizer: None,
        },
    })
}

/// Parameters of the synthetic regression task.
///
/// Draw order from `ChaCha8Rng::seed_from_u64(seed)`, all standard normal:
/// `w` (d values), `u` (d values), the features `x` (n·d values, row-major),
/// then the noise `ε` (n values). Targets are
/// `y = x·w/√d + amplitude·sin(x·u/√d) + noise_std·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub noise_std: f64,
    pub amplitude: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 4096,
            d: 14,
            noise_std: 0.05,
            amplitude: 1.0,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

pub fn synthetic_regression(spec: &SyntheticSpec) -> Result<Dataset> {
    let (n, d) = (spec.n, spec.d);
    if n < 2 || d == 0 {
        return Err(Error::Config(format!("synthetic dataset needs n >= 2 and d >= 1, got n={n}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let w: Vec<f64> = (0..d).map(|_| normal()).collect();
    let u: Vec<f64> = (0..d).map(|_| normal()).collect();
    let x: Vec<f64> = (0..n * d).map(|_| normal()).collect();
    let noise: Vec<f64> = (0..n).map(|_| normal()).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            let lin: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * scale;
            let arg: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() * scale;
            lin + spec.amplitude * arg.sin() + spec.noise_std * noise[i]
        })
        .collect();
    let split = split_indices(n, spec.test_fraction, spec.seed)?;
    Ok(Dataset {
        features: Tensor::new(vec![n, d], x)?,
        targets: Targets::Regression {
            values: Tensor::new(vec![n, 1], y)?,
        },
        split,
        meta: DatasetMeta {
            source: "synthetic".into(),
            rows: n,
            preprocessing: vec![format!(
                "y = x.w/sqrt(d) + {}*sin(x.u/sqrt(d)) + {}*eps; seed={}",
                spec.amplitude, spec.noise_std, spec.seed
            )],
            checksum: None,
            feature_standardizer: None,
            target_standardizer: None,
        },
    })
}
