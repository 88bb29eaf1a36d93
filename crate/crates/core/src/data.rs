//! Procedural image datasets, label-skewed sharding and batch sampling.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{Purpose, RngStream, StreamId};
use crate::tensor::Tensor;

/// Pattern families of the synthetic generator; the family is the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Gradient,
    Checkerboard,
    Blobs,
    Stripes,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Gradient,
        Pattern::Checkerboard,
        Pattern::Blobs,
        Pattern::Stripes,
    ];

    /// Renders one `[3, size, size]` image with pixels in `[0, 1]`.
    pub fn render(self, size: usize, rng: &mut RngStream) -> Tensor {
        let mut color = || [rng.uniform(), rng.uniform(), rng.uniform()];
        let (a, b) = (color(), color());
        let n = size as f64;
        let mut data = alloc::vec![0.0; 3 * size * size];
        let put = |y: usize, x: usize, t: f64, data: &mut [f64]| {
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                data[(c * size + y) * size + x] = a[c] * (1.0 - t) + b[c] * t;
            }
        };
        match self {
            Pattern::Gradient => {
                let angle = rng.uniform_range(0.0, 2.0 * core::f64::consts::PI);
                let (dx, dy) = (math::cos(angle), math::sin(angle));
                for y in 0..size {
                    for x in 0..size {
                        let px = (x as f64 + 0.5) / n - 0.5;
                        let py = (y as f64 + 0.5) / n - 0.5;
                        put(y, x, 0.5 + (px * dx + py * dy), &mut data);
                    }
                }
            }
            Pattern::Checkerboard => {
                let cell = 2 + rng.index(3);
                let (ox, oy) = (rng.index(cell), rng.index(cell));
                for y in 0..size {
                    for x in 0..size {
                        let parity = ((x + ox) / cell + (y + oy) / cell) % 2;
                        put(y, x, parity as f64, &mut data);
                    }
                }
            }
            Pattern::Blobs => {
                let count = 1 + rng.index(3);
                let blobs: Vec<(f64, f64, f64)> = (0..count)
                    .map(|_| {
                        (
                            rng.uniform_range(0.15, 0.85) * n,
                            rng.uniform_range(0.15, 0.85) * n,
                            rng.uniform_range(0.08, 0.25) * n,
                        )
                    })
                    .collect();
                for y in 0..size {
                    for x in 0..size {
                        let t: f64 = blobs
                            .iter()
                            .map(|&(cx, cy, r)| {
                                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                                let d2 = dx * dx + dy * dy;
                                math::exp(-d2 / (2.0 * r * r))
                            })
                            .sum();
                        put(y, x, t, &mut data);
                    }
                }
            }
            Pattern::Stripes => {
                let angle = rng.uniform_range(0.0, core::f64::consts::PI);
                let freq = rng.uniform_range(1.5, 4.0);
                let phase = rng.uniform_range(0.0, 2.0 * core::f64::consts::PI);
                let (dx, dy) = (math::cos(angle), math::sin(angle));
                for y in 0..size {
                    for x in 0..size {
                        let s = (x as f64 * dx + y as f64 * dy) / n;
                        let t =
                            0.5 + 0.5 * math::sin(2.0 * core::f64::consts::PI * freq * s + phase);
                        put(y, x, t, &mut data);
                    }
                }
            }
        }
        Tensor::new(&[3, size, size], data).expect("image shape")
    }
}

/// Images with optional class labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetShard {
    pub images: Vec<Tensor>,
    pub labels: Option<Vec<usize>>,
}

impl DatasetShard {
    pub fn new(images: Vec<Tensor>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != images.len() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.len()
                )));
            }
        }
        if let Some(first) = images.first() {
            if first.shape().len() != 3 {
                return Err(Error::shape(
                    "dataset",
                    format!("images must be [C, H, W], got {:?}", first.shape()),
                ));
            }
            if let Some(bad) = images.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "mixed image shapes {:?} and {:?}",
                        first.shape(),
                        bad.shape()
                    ),
                ));
            }
        }
        if images
            .iter()
            .any(|t| t.data().iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::config("dataset", "pixels must lie in [0, 1]"));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Subset by indices, keeping labels aligned.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Per-class counts, when labelled.
    pub fn class_counts(&self, classes: usize) -> Option<Vec<usize>> {
        let labels = self.labels.as_ref()?;
        let mut counts = alloc::vec![0; classes];
        for &l in labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        Some(counts)
    }
}

/// Balanced synthetic dataset: image `i` has class `i % classes`.
pub fn synthesize(count: usize, size: usize, classes: usize, seed: u64) -> Result<DatasetShard> {
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    if classes == 0 || classes > Pattern::ALL.len() {
        return Err(Error::config(
            "dataset.classes",
            format!("must be in 1..={}", Pattern::ALL.len()),
        ));
    }
    if size < 2 {
        return Err(Error::config("dataset.size", "must be at least 2"));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let mut rng = RngStream::new(seed, StreamId::new(u32::MAX, 0, i as u32), Purpose::Data);
        images.push(Pattern::ALL[class].render(size, &mut rng));
        labels.push(class);
    }
    Ok(DatasetShard {
        images,
        labels: Some(labels),
    })
}

/// Label skew of the client split: `None` is the `alpha -> inf` limit.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sharding {
    pub alpha: Option<f64>,
    pub min_shard: usize,
}

const MAX_SHARD_ATTEMPTS: usize = 1000;

/// Index sets of a Dirichlet(alpha) label-skewed split over `clients`.
///
/// Every class is divided among the clients by fresh Dirichlet proportions.
/// Draws that leave any shard below `min_shard` are resampled.
pub fn dirichlet_split(
    labels: &[usize],
    clients: usize,
    sharding: Sharding,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::config("clients", "must be positive"));
    }
    if labels.len() < clients * sharding.min_shard.max(1) {
        return Err(Error::config(
            "dataset.count",
            format!("{} images cannot fill {} shards", labels.len(), clients),
        ));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = alloc::vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let Some(alpha) = sharding.alpha else {
        // Round-robin per class, continuing where the previous class stopped.
        let mut shards = alloc::vec![Vec::new(); clients];
        let mut next = 0;
        for members in &by_class {
            for &i in members {
                shards[next % clients].push(i);
                next += 1;
            }
        }
        return Ok(shards);
    };
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(
            "sharding.alpha",
            "must be positive and finite",
        ));
    }
    let gamma =
        Gamma::new(alpha, 1.0).map_err(|e| Error::config("sharding.alpha", format!("{e}")))?;
    for _ in 0..MAX_SHARD_ATTEMPTS {
        let mut shards: Vec<Vec<usize>> = alloc::vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            rng.shuffle(&mut members);
            let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            if total <= 0.0 {
                // Every gamma draw underflowed; the class goes to one client.
                let c = rng.index(clients);
                shards[c].extend_from_slice(&members);
                continue;
            }
            let mut cut = 0usize;
            let mut acc = 0.0;
            for (c, d) in draws.iter().enumerate() {
                acc += d;
                let end = if c + 1 == clients {
                    members.len()
                } else {
                    ((acc / total * members.len() as f64) as usize).clamp(cut, members.len())
                };
                shards[c].extend_from_slice(&members[cut..end]);
                cut = end;
            }
        }
        if shards.iter().all(|s| s.len() >= sharding.min_shard.max(1)) {
            for s in &mut shards {
                s.sort_unstable();
            }
            return Ok(shards);
        }
    }
    Err(Error::config(
        "sharding",
        format!(
            "no Dirichlet({alpha}) draw gave every client {} images",
            sharding.min_shard
        ),
    ))
}

/// Splits a dataset into per-client shards.
pub fn shard(
    dataset: &DatasetShard,
    clients: usize,
    sharding: Sharding,
    rng: &mut RngStream,
) -> Result<Vec<DatasetShard>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let unlabelled;
    let labels = match &dataset.labels {
        Some(l) => l.as_slice(),
        None => {
            unlabelled = alloc::vec![0; dataset.len()];
            &unlabelled
        }
    };
    let parts = dirichlet_split(labels, clients, sharding, rng)?;
    Ok(parts.iter().map(|idx| dataset.select(idx)).collect())
}

/// Moves the last `fraction` of a shard (after a seeded shuffle) into a
/// held-out set; both halves keep at least one image.
pub fn train_test_split(
    dataset: &DatasetShard,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<(DatasetShard, DatasetShard)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config("test_fraction", "must be in [0, 1)"));
    }
    if dataset.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    rng.shuffle(&mut idx);
    let test = ((dataset.len() as f64 * fraction) as usize).clamp(1, dataset.len() - 1);
    let (train, held) = idx.split_at(dataset.len() - test);
    let mut train = train.to_vec();
    let mut held = held.to_vec();
    train.sort_unstable();
    held.sort_unstable();
    Ok((dataset.select(&train), dataset.select(&held)))
}

/// Random `patch x patch` window of a `[C, H, W]` image.
pub fn random_crop(image: &Tensor, patch: usize, rng: &mut RngStream) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] < patch || s[2] < patch || patch == 0 {
        return Err(Error::shape(
            "random_crop",
            format!("cannot crop {patch}x{patch} from {s:?}"),
        ));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let oy = rng.index(h - patch + 1);
    let ox = rng.index(w - patch + 1);
    let mut out = Vec::with_capacity(c * patch * patch);
    for ch in 0..c {
        for y in 0..patch {
            let row = (ch * h + oy + y) * w + ox;
            out.extend_from_slice(&image.data()[row..row + patch]);
        }
    }
    Tensor::new(&[c, patch, patch], out)
}

/// `batch` distinct indices (with replacement once the shard is exhausted).
pub fn sample_indices(len: usize, batch: usize, rng: &mut RngStream) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if batch <= len {
        rng.shuffle(&mut idx);
        idx.truncate(batch);
        idx
    } else {
        (0..batch).map(|_| rng.index(len)).collect()
    }
}

/// Stacks `[C, H, W]` images into `[B, C, H, W]`, cropping to `patch` when
/// the images are larger.
pub fn make_batch(
    dataset: &DatasetShard,
    indices: &[usize],
    patch: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let crops = indices
        .iter()
        .map(|&i| {
            let img = &dataset.images[i];
            if img.shape()[1] == patch && img.shape()[2] == patch {
                Ok(img.clone())
            } else {
                random_crop(img, patch, rng)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = crops.iter().collect();
    Tensor::stack(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(step: u32) -> RngStream {
        RngStream::new(11, StreamId::new(0, 0, step), Purpose::Test)
    }

    #[test]
    fn synthetic_images_are_valid() {
        let d = synthesize(40, 16, 4, 1).unwrap();
        assert_eq!(d.len(), 40);
        assert_eq!(d.class_counts(4).unwrap(), vec![10; 4]);
        for img in &d.images {
            assert_eq!(img.shape(), &[3, 16, 16]);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(d, synthesize(40, 16, 4, 1).unwrap());
        assert_ne!(d, synthesize(40, 16, 4, 2).unwrap());
        assert!(synthesize(0, 16, 4, 1).is_err());
        assert!(synthesize(4, 16, 9, 1).is_err());
    }

    #[test]
    fn uniform_limit_gives_equal_balanced_shards() {
        let d = synthesize(64, 16, 4, 1).unwrap();
        let shards = shard(
            &d,
            4,
            Sharding {
                alpha: None,
                min_shard: 1,
            },
            &mut rng(0),
        )
        .unwrap();
        assert_eq!(shards.len(), 4);
        for s in &shards {
            assert_eq!(s.len(), 16);
            assert_eq!(s.class_counts(4).unwrap(), vec![4; 4]);
        }
    }

    #[test]
    fn small_alpha_concentrates_classes() {
        let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
        for trial in 0..20 {
            let parts = dirichlet_split(
                &labels,
                4,
                Sharding {
                    alpha: Some(0.1),
                    min_shard: 1,
                },
                &mut rng(trial),
            )
            .unwrap();
            let dominant = parts.iter().any(|p| {
                let mut counts = [0usize; 4];
                for &i in p {
                    counts[labels[i]] += 1;
                }
                *counts.iter().max().unwrap() as f64 > 0.6 * p.len() as f64
            });
            assert!(dominant, "trial {trial}: {parts:?}");
        }
    }

    #[test]
    fn shards_are_disjoint_and_cover_everything() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let parts = dirichlet_split(
            &labels,
            5,
            Sharding {
                alpha: Some(0.5),
                min_shard: 2,
            },
            &mut rng(1),
        )
        .unwrap();
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(parts.iter().all(|p| p.len() >= 2));
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let img = Pattern::Blobs.render(8, &mut rng(2));
        assert_eq!(random_crop(&img, 8, &mut rng(3)).unwrap(), img);
        let c = random_crop(&img, 4, &mut rng(3)).unwrap();
        assert_eq!(c.shape(), &[3, 4, 4]);
        assert!(random_crop(&img, 9, &mut rng(3)).is_err());
    }

    #[test]
    fn split_and_batch() {
        let d = synthesize(20, 8, 2, 3).unwrap();
        let (train, test) = train_test_split(&d, 0.2, &mut rng(4)).unwrap();
        assert_eq!((train.len(), test.len()), (16, 4));
        let idx = sample_indices(train.len(), 5, &mut rng(5));
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        let b = make_batch(&train, &idx, 8, &mut rng(6)).unwrap();
        assert_eq!(b.shape(), &[5, 3, 8, 8]);
        assert_eq!(sample_indices(3, 7, &mut rng(7)).len(), 7);
    }

    #[test]
    fn shard_validation() {
        let img = Tensor::full(&[3, 2, 2], 0.5);
        assert!(DatasetShard::new(vec![img.clone()], Some(vec![0, 1])).is_err());
        assert!(DatasetShard::new(vec![img.clone(), Tensor::full(&[3, 4, 4], 0.5)], None).is_err());
        assert!(DatasetShard::new(vec![Tensor::full(&[3, 2, 2], 1.5)], None).is_err());
        assert!(DatasetShard::new(vec![img], None).is_ok());
    }
}
