//! Training-data ingestion for the kinds a run configuration can name.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use spq_core::config::{DataConfig, DatasetKind};
use spq_core::data::{load_cifar10_binary, LabeledImages, SyntheticSource, SyntheticSpec};
use spq_core::numerics::read_tensor;
use spq_core::{Error, Image, Tensor};

/// Training items as loaded from disk or generated.
pub enum Loaded {
    Images(Vec<Image>),
    Views(Tensor<f64>, Tensor<f64>),
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str, kind: DatasetKind) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("dataset {kind} needs `{key}`")).into())
}

/// CIFAR-10 records from one batch file, or every `data_batch_*.bin` in a
/// directory (sorted by name).
pub fn load_cifar(path: &Path) -> Result<LabeledImages> {
    if !path.is_dir() {
        return load_cifar10_binary(path).with_context(|| format!("reading {}", path.display()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no data_batch_*.bin files in {}", path.display())).into());
    }
    let mut all = LabeledImages {
        images: Vec::new(),
        labels: Vec::new(),
    };
    for f in files {
        let part = load_cifar10_binary(&f).with_context(|| format!("reading {}", f.display()))?;
        all.images.extend(part.images);
        all.labels.extend(part.labels);
    }
    Ok(all)
}

fn limit_rows(t: Tensor<f64>, limit: usize) -> Tensor<f64> {
    if limit == 0 || limit >= t.rows() {
        t
    } else {
        t.select_rows(&(0..limit).collect::<Vec<_>>())
    }
}

pub fn load_training(data: &DataConfig, seed: u64) -> Result<Loaded> {
    let kind = data.dataset;
    match kind {
        DatasetKind::Synthetic => {
            let src = SyntheticSource::new(SyntheticSpec {
                clusters: data.synth_clusters,
                dim: data.synth_dim,
                noise: data.synth_noise,
                seed,
            })?;
            let split = src.sample(data.synth_per_cluster, 0)?;
            Ok(Loaded::Views(
                limit_rows(split.view_a, data.limit),
                limit_rows(split.view_b, data.limit),
            ))
        }
        DatasetKind::DescriptorViews => {
            let a = required(&data.views_a, "views_a", kind)?;
            let b = required(&data.views_b, "views_b", kind)?;
            let ta = read_tensor::<f64>(a).with_context(|| format!("reading {}", a.display()))?;
            let tb = read_tensor::<f64>(b).with_context(|| format!("reading {}", b.display()))?;
            if ta.shape() != tb.shape() || ta.rank() != 2 {
                return Err(Error::Input(format!(
                    "view tensors must share an [N, D] shape, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                ))
                .into());
            }
            Ok(Loaded::Views(limit_rows(ta, data.limit), limit_rows(tb, data.limit)))
        }
        DatasetKind::RawTensorImages => {
            let p = required(&data.data_path, "data_path", kind)?;
            let t = read_tensor::<f64>(p).with_context(|| format!("reading {}", p.display()))?;
            let mut images = Image::batch_from_tensor(&limit_rows(t, data.limit))?;
            images.shrink_to_fit();
            Ok(Loaded::Images(images))
        }
        DatasetKind::Cifar10Binary => {
            let p = required(&data.data_path, "data_path", kind)?;
            let mut set = load_cifar(p)?;
            if data.limit > 0 {
                set.truncate(data.limit);
            }
            Ok(Loaded::Images(set.images))
        }
    }
}
