//! Datasets and preprocessing: a synthetic chest-image proxy (bright
//! ellipse, optional blob opacities), balanced subsampling and epoch
//! batching. Images are always (N, 1, H, W) tensors in [-1, 1].

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::math;
use crate::seeds::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Directory,
    Synthetic,
}

/// Immutable labeled image collection.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::BadDataset {
                reason: format!(
                    "images must be (N,C,H,W) with N == |labels|; got {:?} and {} labels",
                    shape,
                    labels.len()
                ),
            });
        }
        if class_names.is_empty() {
            return Err(Error::BadDataset {
                reason: "no classes".to_string(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes: class_names.len(),
            });
        }
        if images.data().iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(Error::BadDataset {
                reason: "pixel values must lie in [-1, 1]".to_string(),
            });
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    fn sample_numel(&self) -> usize {
        self.images.numel() / self.len()
    }

    /// Contiguous batch [start, end).
    pub fn slice_batch(&self, start: usize, end: usize) -> LabeledBatch {
        let stride = self.sample_numel();
        let mut shape = self.images.shape().to_vec();
        shape[0] = end - start;
        let data = self.images.data()[start * stride..end * stride].to_vec();
        LabeledBatch {
            images: Tensor::new(shape, data).unwrap(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Batch gathered at arbitrary indices.
    pub fn gather_batch(&self, indices: &[usize]) -> LabeledBatch {
        let stride = self.sample_numel();
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        LabeledBatch {
            images: Tensor::new(shape, data).unwrap(),
            labels,
        }
    }
}

/// Minibatch of real images with labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Batch of generated images (no labels).
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub images: Tensor,
}

/// Parameters of the synthetic two-class set. Class 0 is a dark background
/// with a centered bright ellipse; class 1 adds 3..=6 bright blobs inside
/// the ellipse. Both classes carry the same pixel noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub n_per_class: usize,
    pub seed: u64,
    pub blob_count_range: (usize, usize),
    pub noise_std: f64,
}

impl SyntheticSpec {
    pub fn new(image_size: usize, n_per_class: usize, seed: u64) -> Self {
        SyntheticSpec {
            image_size,
            n_per_class,
            seed,
            blob_count_range: (3, 6),
            noise_std: 0.05,
        }
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.image_size == 0 || spec.n_per_class == 0 {
        return Err(Error::BadDataset {
            reason: "image_size and n_per_class must be positive".to_string(),
        });
    }
    let s = spec.image_size;
    let n = 2 * spec.n_per_class;
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(spec.seed, Stream::Synthetic));
    let axis = Uniform::new(0.30 * s as f64, 0.45 * s as f64);
    let blob_count = Uniform::new_inclusive(spec.blob_count_range.0, spec.blob_count_range.1);
    let blob_sigma = Uniform::new(0.05 * s as f64, 0.10 * s as f64);
    let blob_amp = Uniform::new(0.25, 0.40);
    let unit = Uniform::new(-1.0f64, 1.0);
    let noise = Normal::new(0.0, spec.noise_std).unwrap();

    let mut data = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    let center = (s as f64 - 1.0) / 2.0;
    for class in 0..2usize {
        for _ in 0..spec.n_per_class {
            let (a, b) = (axis.sample(&mut rng), axis.sample(&mut rng));
            let mut field = vec![0.05f64; s * s];
            for (idx, f) in field.iter_mut().enumerate() {
                let y = (idx / s) as f64 - center;
                let x = (idx % s) as f64 - center;
                let r = math::sqrt((x / a) * (x / a) + (y / b) * (y / b));
                *f += 0.55 * math::sigmoid((1.0 - r) / 0.04);
            }
            if class == 1 {
                let blobs = blob_count.sample(&mut rng);
                for _ in 0..blobs {
                    // Rejection-sample a center well inside the ellipse.
                    let (bx, by) = loop {
                        let u = unit.sample(&mut rng);
                        let v = unit.sample(&mut rng);
                        if u * u + v * v < 0.7 {
                            break (center + u * a, center + v * b);
                        }
                    };
                    let sigma = blob_sigma.sample(&mut rng);
                    let amp = blob_amp.sample(&mut rng);
                    let inv = 1.0 / (2.0 * sigma * sigma);
                    for (idx, f) in field.iter_mut().enumerate() {
                        let y = (idx / s) as f64;
                        let x = (idx % s) as f64;
                        let d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
                        *f += amp * math::exp(-d2 * inv);
                    }
                }
            }
            for f in field {
                let px = 2.0 * f.clamp(0.0, 1.0) - 1.0 + noise.sample(&mut rng);
                data.push(px.clamp(-1.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, 1, s, s], data)?,
        labels,
        vec!["clear".to_string(), "opacity".to_string()],
        Provenance::Synthetic,
    )
}

/// Uniform class-balanced subsample without replacement; exact n_total / C
/// per class, deterministic per seed.
pub fn subsample_balanced(ds: &Dataset, n_total: usize, seed: u64) -> Result<Dataset> {
    let c = ds.num_classes();
    if n_total == 0 || n_total % c != 0 {
        return Err(Error::BadDataset {
            reason: format!("n_total {n_total} not divisible by {c} classes"),
        });
    }
    let per_class = n_total / c;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::BadDataset {
                reason: format!(
                    "class {class} has {} samples, need {per_class}",
                    members.len()
                ),
            });
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut picked = Vec::with_capacity(n_total);
    for members in &by_class {
        let chosen = rand::seq::index::sample(&mut rng, members.len(), per_class);
        for k in chosen.iter() {
            picked.push(members[k]);
        }
    }
    let batch = ds.gather_batch(&picked);
    Dataset::new(
        batch.images,
        batch.labels,
        ds.class_names.clone(),
        ds.provenance,
    )
}

/// Epoch-deterministic minibatch stream: shuffle keyed by (seed, epoch),
/// final short batch dropped.
pub fn batch_iter(ds: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::BadDataset {
            reason: "batch_size must be >= 1".to_string(),
        });
    }
    if batch_size > ds.len() {
        return Err(Error::BadDataset {
            reason: format!(
                "batch_size {batch_size} exceeds dataset size {}",
                ds.len()
            ),
        });
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = seeds::rng_indexed(seed, Stream::Shuffle, epoch);
    order.shuffle(&mut rng);
    order.truncate((ds.len() / batch_size) * batch_size);
    Ok(BatchIter {
        ds,
        order,
        batch_size,
        cursor: 0,
    })
}

pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let idx = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        Some(self.ds.gather_batch(idx))
    }
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

/// Align-corners bilinear resize of a single-channel image. Identity when
/// source and destination sizes match.
pub fn resize_bilinear(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    assert_eq!(src.len(), sw * sh);
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(dw * dh);
    let fx = if dw > 1 { (sw - 1) as f64 / (dw - 1) as f64 } else { 0.0 };
    let fy = if dh > 1 { (sh - 1) as f64 / (dh - 1) as f64 } else { 0.0 };
    for j in 0..dh {
        let sy = j as f64 * fy;
        let y0 = (sy as usize).min(sh - 1);
        let y1 = (y0 + 1).min(sh - 1);
        let ty = sy - y0 as f64;
        for i in 0..dw {
            let sx = i as f64 * fx;
            let x0 = (sx as usize).min(sw - 1);
            let x1 = (x0 + 1).min(sw - 1);
            let tx = sx - x0 as f64;
            // Lerp form keeps constant regions bit-exact.
            let p00 = src[y0 * sw + x0];
            let p01 = src[y0 * sw + x1];
            let p10 = src[y1 * sw + x0];
            let p11 = src[y1 * sw + x1];
            let top = p00 + tx * (p01 - p00);
            let bot = p10 + tx * (p11 - p10);
            out.push(top + ty * (bot - top));
        }
    }
    out
}

/// Map an 8-bit luminance value into [-1, 1].
pub fn normalize_u8(v: f64) -> f64 {
    v / 127.5 - 1.0
}
