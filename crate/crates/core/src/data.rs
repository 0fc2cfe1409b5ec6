//! Dataset ingestion: CIFAR-10 binary batches and clustered synthetic
//! descriptors with paired views.

use std::fs;
use std::path::Path;

use crate::augment::Image;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

const CIFAR_SIDE: usize = 32;
const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
const MAX_CENTER_ATTEMPTS: usize = 10_000;

/// Images with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Image>,
    pub labels: Vec<u32>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.images.truncate(n);
        self.labels.truncate(n);
    }

    pub fn to_tensor(&self) -> Result<Tensor<f64>> {
        Image::batch_to_tensor(&self.images)
    }
}

/// Parses CIFAR-10 binary records: a label byte then 3072 channel-major
/// pixel bytes (R, G, B planes, each 32x32 row-major).
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<LabeledImages> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 binary size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format(format!("CIFAR-10 label {label} out of range")));
        }
        let px = &rec[1..];
        let mut hwc = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                hwc.push(px[c * plane + i] as f64 / 255.0);
            }
        }
        images.push(Image::new(CIFAR_SIDE, CIFAR_SIDE, hwc)?);
        labels.push(label as u32);
    }
    Ok(LabeledImages { images, labels })
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<LabeledImages> {
    parse_cifar10_binary(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Cluster centers from which any number of splits can be drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSource {
    spec: SyntheticSpec,
    centers: Vec<Vec<f64>>,
}

/// One split: items, their labels and two independent noisy views per item.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub items: Tensor<f64>,
    pub labels: Vec<u32>,
    pub view_a: Tensor<f64>,
    pub view_b: Tensor<f64>,
}

impl SyntheticSource {
    /// Draws centers uniformly in `[-1, 1]^D`, rejecting any closer than
    /// `4 * noise` to an accepted one.
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        if spec.clusters < 2 {
            return Err(Error::Parameter("need at least 2 clusters".into()));
        }
        if spec.dim == 0 {
            return Err(Error::Parameter("dimension must be positive".into()));
        }
        if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
            return Err(Error::Parameter(format!("noise must be >= 0, got {}", spec.noise)));
        }
        let mut rng = Rng::derive(spec.seed, &[0xC3A7]);
        let min_dist2 = (4.0 * spec.noise).powi(2);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.clusters);
        let mut attempts = 0;
        while centers.len() < spec.clusters {
            attempts += 1;
            if attempts > MAX_CENTER_ATTEMPTS {
                return Err(Error::Parameter(format!(
                    "could not place {} centers {}-apart in [-1,1]^{}; noise too large",
                    spec.clusters,
                    4.0 * spec.noise,
                    spec.dim
                )));
            }
            let c: Vec<f64> = (0..spec.dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let ok = centers
                .iter()
                .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= min_dist2);
            if ok {
                centers.push(c);
            }
        }
        Ok(Self { spec, centers })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// `per_cluster` items per cluster, cluster-major; `split` selects an
    /// independent random stream (train/query/gallery).
    pub fn sample(&self, per_cluster: usize, split: u64) -> Result<SyntheticSplit> {
        let (c, d, s) = (self.spec.clusters, self.spec.dim, self.spec.noise);
        let n = c * per_cluster;
        let mut rng = Rng::derive(self.spec.seed, &[0x5A11, split]);
        let mut items = Vec::with_capacity(n * d);
        let mut view_a = Vec::with_capacity(n * d);
        let mut view_b = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (ci, center) in self.centers.iter().enumerate() {
            for _ in 0..per_cluster {
                let item: Vec<f64> = center.iter().map(|&m| m + rng.normal(0.0, s)).collect();
                view_a.extend(item.iter().map(|&v| v + rng.normal(0.0, s)));
                view_b.extend(item.iter().map(|&v| v + rng.normal(0.0, s)));
                items.extend_from_slice(&item);
                labels.push(ci as u32);
            }
        }
        Ok(SyntheticSplit {
            items: Tensor::new(vec![n, d], items)?,
            labels,
            view_a: Tensor::new(vec![n, d], view_a)?,
            view_b: Tensor::new(vec![n, d], view_b)?,
        })
    }
}

/// Single-split convenience wrapper.
pub fn gen_synthetic(clusters: usize, dim: usize, per_cluster: usize, noise: f64, seed: u64) -> Result<SyntheticSplit> {
    SyntheticSource::new(SyntheticSpec {
        clusters,
        dim,
        noise,
        seed,
    })?
    .sample(per_cluster, 0)
}

/// Class ids as a rank-1 tensor (exact in f64).
pub fn labels_to_tensor(labels: &[u32]) -> Tensor<f64> {
    Tensor::new_unchecked_values(vec![labels.len()], labels.iter().map(|&l| l as f64).collect())
        .expect("rank-1")
}

/// Label bitmasks from a label tensor: rank 1 holds class ids, rank 2 a
/// multi-hot `[N, L]` matrix (`L <= 64`).
pub fn label_masks_from_tensor(t: &Tensor<f64>) -> Result<Vec<u64>> {
    match t.shape() {
        [_] => t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() != 0.0 || !(0.0..64.0).contains(&v) {
                    Err(Error::Format(format!("label {v} is not a class id in 0..64")))
                } else {
                    Ok(1u64 << v as u32)
                }
            })
            .collect(),
        [_, l] if *l <= 64 => Ok(t
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .fold(0u64, |m, (i, _)| m | (1 << i))
            })
            .collect()),
        s => Err(Error::Format(format!("unsupported label tensor shape {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        for c in 0..3 {
            for i in 0..1024 {
                r.push(fill(c, i));
            }
        }
        r
    }

    #[test]
    fn cifar_label_and_scaling() {
        let bytes = [record(7, |_, _| 255), record(0, |_, _| 0)].concat();
        let ds = parse_cifar10_binary(&bytes).unwrap();
        assert_eq!(ds.labels, vec![7, 0]);
        assert!(ds.images[0].pixels().iter().all(|&p| p == 1.0));
        assert!(ds.images[1].pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn cifar_channel_major_to_hwc() {
        // R plane = row index, G plane = column index, B plane = 100.
        let bytes = record(3, |c, i| match c {
            0 => (i / 32) as u8,
            1 => (i % 32) as u8,
            _ => 100,
        });
        let ds = parse_cifar10_binary(&bytes).unwrap();
        let p = ds.images[0].pixel(5, 9);
        assert_eq!(p, [5.0 / 255.0, 9.0 / 255.0, 100.0 / 255.0]);
    }

    #[test]
    fn cifar_bad_size() {
        assert!(matches!(parse_cifar10_binary(&[0u8; 3072]), Err(Error::Format(_))));
        assert!(matches!(parse_cifar10_binary(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn zero_noise_views_equal_items() {
        let s = gen_synthetic(3, 5, 4, 0.0, 1).unwrap();
        assert_eq!(s.view_a, s.items);
        assert_eq!(s.view_b, s.items);
    }

    #[test]
    fn far_centers_classify_perfectly() {
        let src = SyntheticSource::new(SyntheticSpec { clusters: 2, dim: 16, noise: 0.05, seed: 3 }).unwrap();
        let split = src.sample(50, 0).unwrap();
        for (row, &label) in split.items.iter_rows().zip(&split.labels) {
            let d: Vec<f64> = src
                .centers()
                .iter()
                .map(|c| c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let nearest = if d[0] <= d[1] { 0 } else { 1 };
            assert_eq!(nearest, label);
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(4, 8, 10, 0.1, 42).unwrap();
        let b = gen_synthetic(4, 8, 10, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(4, 8, 10, 0.1, 43).unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn oversized_noise_rejected() {
        let err = SyntheticSource::new(SyntheticSpec { clusters: 8, dim: 1, noise: 1.0, seed: 0 });
        assert!(matches!(err, Err(Error::Parameter(_))));
        assert!(SyntheticSource::new(SyntheticSpec { clusters: 1, dim: 4, noise: 0.1, seed: 0 }).is_err());
    }

    #[test]
    fn label_masks() {
        let ids = Tensor::new(vec![3], vec![0.0, 5.0, 63.0]).unwrap();
        assert_eq!(label_masks_from_tensor(&ids).unwrap(), vec![1, 32, 1 << 63]);
        let hot = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(label_masks_from_tensor(&hot).unwrap(), vec![0b101, 0b010]);
        let bad = Tensor::new(vec![1], vec![1.5]).unwrap();
        assert!(label_masks_from_tensor(&bad).is_err());
    }
}
