//! Synthetic datasets and stratified splits.
//!
//! Gaussian blobs stand in for image corpora so the full pipeline runs in
//! seconds: one isotropic cluster per class with centers on a deterministic
//! axis arrangement. Generation and splitting are pure functions of their
//! arguments and seed.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{scope, stream};

/// Feature matrix (rows = samples) with dense integer class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Train / validation / test assignment for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A dataset plus one split tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedDataset {
    pub data: Dataset,
    pub tags: Vec<Split>,
}

impl TaggedDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == split)
            .map(|(i, _)| i)
            .collect()
    }
}

fn class_center(class: usize, dim: usize) -> Array1<f64> {
    // Scaled axis-aligned placement; classes beyond `dim` reuse axes at a
    // larger radius. Separation stays well above the default spread.
    let mut c = Array1::zeros(dim);
    c[class % dim] = 3.0 * (1.0 + (class / dim) as f64);
    c
}

/// Isotropic Gaussian clusters, one per class, labels assigned round-robin so
/// per-class counts differ by at most one. Deterministic under `seed`.
pub fn make_blobs(
    n_samples: usize,
    n_classes: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 {
        return Err(Error::Data("make_blobs: zero classes".into()));
    }
    if n_samples < n_classes {
        return Err(Error::Data(format!(
            "make_blobs: {n_samples} samples cannot cover {n_classes} classes"
        )));
    }
    if dim < 2 {
        return Err(Error::Data("make_blobs: dim must be at least 2".into()));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::Data(format!("make_blobs: bad spread {spread}")));
    }

    let centers: Vec<Array1<f64>> = (0..n_classes).map(|c| class_center(c, dim)).collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = stream(seed, &[scope::DATA]);

    let mut features = Array2::zeros((n_samples, dim));
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        labels.push(class);
        for d in 0..dim {
            features[[i, d]] = centers[class][d] + spread * noise.sample(&mut rng);
        }
    }

    Ok(Dataset {
        features,
        labels,
        n_classes,
    })
}

/// Largest-remainder apportionment of `total` into parts proportional to
/// `quotas`, respecting per-part capacities. Ties go to the lowest index.
fn apportion(quotas: &[f64], total: usize, caps: &[usize]) -> Vec<usize> {
    let n = quotas.len();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(caps)
        .map(|(&q, &cap)| (q.floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = alloc.iter().sum();
    let mut cursor = 0;
    while assigned < total {
        let idx = order[cursor % n];
        if alloc[idx] < caps[idx] {
            alloc[idx] += 1;
            assigned += 1;
        }
        cursor += 1;
        if cursor > n * (total + 1) {
            break; // caps exhausted; caller validates totals
        }
    }
    alloc
}

/// Stratified 75/15/10 split. Global split sizes are exact under
/// largest-remainder rounding and every class is represented in train.
/// Deterministic under `seed`.
pub fn split_train_val_test(data: Dataset, seed: u64) -> Result<TaggedDataset> {
    let n = data.len();
    if n < 20 {
        return Err(Error::Data(format!(
            "split_train_val_test: need at least 20 samples, got {n}"
        )));
    }
    if n < data.n_classes {
        return Err(Error::Data(
            "split_train_val_test: fewer samples than classes".into(),
        ));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if by_class.iter().any(|c| c.is_empty()) {
        return Err(Error::Data(
            "split_train_val_test: a class has no samples".into(),
        ));
    }

    let nf = n as f64;
    let global = apportion(&[0.75 * nf, 0.15 * nf, 0.10 * nf], n, &[n, n, n]);
    let (g_train, g_val) = (global[0], global[1]);

    let class_sizes: Vec<usize> = by_class.iter().map(|c| c.len()).collect();
    let train_quota: Vec<f64> = class_sizes.iter().map(|&c| 0.75 * c as f64).collect();
    let train_alloc = apportion(&train_quota, g_train, &class_sizes);

    let val_caps: Vec<usize> = class_sizes
        .iter()
        .zip(&train_alloc)
        .map(|(&c, &t)| c - t)
        .collect();
    let val_quota: Vec<f64> = class_sizes.iter().map(|&c| 0.15 * c as f64).collect();
    let val_alloc = apportion(&val_quota, g_val, &val_caps);

    let mut tags = vec![Split::Test; n];
    for (class, indices) in by_class.iter().enumerate() {
        let mut shuffled = indices.clone();
        let mut rng = stream(seed, &[scope::SPLIT_TAGS, class as u64]);
        for i in (1..shuffled.len()).rev() {
            let j = rng.gen_range(0..=i);
            shuffled.swap(i, j);
        }
        for (pos, &sample) in shuffled.iter().enumerate() {
            tags[sample] = if pos < train_alloc[class] {
                Split::Train
            } else if pos < train_alloc[class] + val_alloc[class] {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    Ok(TaggedDataset { data, tags })
}
