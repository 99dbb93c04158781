//! MNIST ingestion from IDX files, seeded subsetting and minibatching, and a
//! small synthetic dataset for fast tests.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use std::path::Path;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Environment variable consulted when no data directory is given.
pub const DATA_DIR_ENV: &str = "BNN_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One row per example, pixels in `[0, 1]`.
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} >= {num_classes} classes")));
        }
        if images.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::arg("pixel outside [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.images.cols()
    }

    /// Rows in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, format!("truncated while reading {what}")))
}

/// Parses an IDX3 image file body into an `N × rows·cols` matrix scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * dim {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated image data: expected {} bytes after header", n * dim),
        ));
    }
    let data = body[..n * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
    Matrix::new(n, dim, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated label data: expected {n} bytes after header"),
        ));
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path.as_ref())?)?;
    if images.rows() != labels.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.rows(), labels.len()),
        ));
    }
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(8 + pos as u64, format!("label {} out of range", labels[pos])));
    }
    let name = images_path
        .as_ref()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(images, labels, 10, name)
}

/// Loads `(train, test)` from a directory holding the four canonical files.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train = load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
    let mut test = load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
    train.name = "mnist-train".into();
    test.name = "mnist-test".into();
    Ok((train, test))
}

/// `n` rows drawn without replacement.
pub fn subset(d: &Dataset, n: usize, rng: &mut Rng) -> Result<Dataset> {
    if n > d.len() {
        return Err(Error::arg(format!("subset of {n} from {} rows", d.len())));
    }
    let mut idx = rng.permutation(d.len());
    idx.truncate(n);
    Ok(d.select(&idx))
}

/// Per-class standard deviation used by [`synthetic_blobs`].
pub const BLOB_STD: f64 = 0.05;

/// Gaussian clusters, one centroid per class, clamped into `[0, 1]`.
pub fn synthetic_blobs(classes: usize, per_class: usize, dim: usize, rng: &mut Rng) -> Result<Dataset> {
    synthetic_blobs_with_std(classes, per_class, dim, BLOB_STD, rng)
}

pub fn synthetic_blobs_with_std(
    classes: usize,
    per_class: usize,
    dim: usize,
    std: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if dim == 0 || classes == 0 {
        return Err(Error::arg("blobs need dim >= 1 and classes >= 1"));
    }
    // Centroids are kept apart so that small-variance clusters separate.
    let min_gap = 0.3;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut tries = 0;
    while centroids.len() < classes {
        let c: Vec<f64> = (0..dim).map(|_| 0.15 + 0.7 * rng.uniform()).collect();
        tries += 1;
        let far = centroids
            .iter()
            .all(|o| crate::numerics::squared_distance(o, &c).sqrt() >= min_gap);
        if far || tries > 10_000 {
            centroids.push(c);
        }
    }
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (class, c) in centroids.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(c.iter().map(|&m| (m + std * rng.normal()).clamp(0.0, 1.0)));
            labels.push(class);
        }
    }
    let images = Matrix::new(classes * per_class, dim, data)?;
    Dataset::new(images, labels, classes, "blobs")
}

/// Index partition of one epoch: a seeded shuffle cut into `batch_size` chunks.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let order = rng.permutation(n);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One epoch of minibatches.
pub fn batches<'a>(
    d: &'a Dataset,
    batch_size: usize,
    rng: &mut Rng,
) -> impl Iterator<Item = (Matrix, Vec<usize>)> + 'a {
    batch_indices(d.len(), batch_size, rng).into_iter().map(move |idx| {
        let x = d.images.select_rows(&idx);
        let y = idx.iter().map(|&i| d.labels[i]).collect();
        (x, y)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, body: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGES_MAGIC, n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parse_small_idx() {
        let m = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!(m.shape(), (2, 2));
        assert_eq!(m.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 9])).unwrap(), vec![3, 9]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = idx_images(1, 2, 2, &[0; 4]);
        bytes[..4].copy_from_slice(&0u32.to_be_bytes());
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format { offset: 0, .. })));

        let bytes = idx_images(2, 2, 2, &[0; 5]);
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format { .. })));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        std::fs::write(&ip, idx_images(2, 1, 1, &[0, 0])).unwrap();
        std::fs::write(&lp, idx_labels(&[1, 2, 3])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
        std::fs::write(&lp, idx_labels(&[1, 2])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn subset_semantics() {
        let mut rng = Rng::new(1);
        let d = synthetic_blobs(3, 4, 2, &mut rng).unwrap();
        let all = subset(&d, d.len(), &mut Rng::new(2)).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..all.len()).map(|i| all.images.row(i).to_vec()).collect();
        let mut orig: Vec<Vec<f64>> = (0..d.len()).map(|i| d.images.row(i).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, orig);

        assert!(subset(&d, 0, &mut rng).unwrap().is_empty());
        assert!(subset(&d, d.len() + 1, &mut rng).is_err());
        assert_eq!(
            subset(&d, 5, &mut Rng::new(9)).unwrap(),
            subset(&d, 5, &mut Rng::new(9)).unwrap()
        );
    }

    #[test]
    fn blobs_construction() {
        let d = synthetic_blobs(10, 20, 5, &mut Rng::new(4)).unwrap();
        assert_eq!(d.len(), 200);
        for c in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 20);
        }
        assert!(d.images.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(d, synthetic_blobs(10, 20, 5, &mut Rng::new(4)).unwrap());
        assert!(synthetic_blobs(2, 2, 0, &mut Rng::new(4)).is_err());
    }

    #[test]
    fn batch_partition() {
        let b = batch_indices(10, 3, &mut Rng::new(0));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        assert_eq!(batch_indices(10, 50, &mut Rng::new(0)).len(), 1);

        let e1 = batch_indices(10, 4, &mut Rng::new(1)).concat();
        let e2 = batch_indices(10, 4, &mut Rng::new(2)).concat();
        assert_ne!(e1, e2);
        let (mut s1, mut s2) = (e1.clone(), e2.clone());
        s1.sort_unstable();
        s2.sort_unstable();
        assert_eq!(s1, s2);
    }

    #[test]
    fn blobs_separable_by_one_hidden_unit() {
        let d = synthetic_blobs(2, 50, 2, &mut Rng::new(3)).unwrap();
        let cfg = crate::model::ModelConfig::with_hidden(1);
        let t = crate::inference::TrainConfig::new(200, 1e-2, 16);
        let w = crate::inference::train_map(&d, &cfg, &t, 0).unwrap();
        assert!(crate::model::accuracy(&w, &d).unwrap() > 0.95);
    }
}
