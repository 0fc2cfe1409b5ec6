//! Flat `key=value` run configuration covering training, augmentation, data
//! and output paths. Unknown keys are rejected, and [`RunConfig::to_text`]
//! echoes every resolved value so a run can be repeated from its echo.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// CIFAR-10 binary batch files (a file, or a directory of `data_batch_*.bin`).
    Cifar10Binary,
    /// SPQT `[N, H, W, 3]` images in `[0, 1]`.
    RawTensorImages,
    /// Two SPQT `[N, D]` descriptor tensors holding paired views.
    DescriptorViews,
    /// Generated cluster data.
    Synthetic,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Cifar10Binary => "cifar10-binary",
            DatasetKind::RawTensorImages => "raw-tensor-images",
            DatasetKind::DescriptorViews => "descriptor-views",
            DatasetKind::Synthetic => "synthetic",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-binary" => Ok(DatasetKind::Cifar10Binary),
            "raw-tensor-images" => Ok(DatasetKind::RawTensorImages),
            "descriptor-views" => Ok(DatasetKind::DescriptorViews),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::Config(format!(
                "unknown dataset `{s}` (cifar10-binary|raw-tensor-images|descriptor-views|synthetic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub views_a: Option<PathBuf>,
    pub views_b: Option<PathBuf>,
    /// Use only the first `limit` items; 0 keeps everything.
    pub limit: usize,
    pub synth_clusters: usize,
    pub synth_dim: usize,
    pub synth_per_cluster: usize,
    pub synth_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synthetic,
            data_path: None,
            views_a: None,
            views_b: None,
            limit: 0,
            synth_clusters: 8,
            synth_dim: 64,
            synth_per_cluster: 250,
            synth_noise: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputConfig {
    pub checkpoint: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", no + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(p: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(p)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        let a = &mut self.augment;
        let d = &mut self.data;
        match key {
            "crop_scale_low" => a.crop_scale_range[0] = parse(key, value)?,
            "crop_scale_high" => a.crop_scale_range[1] = parse(key, value)?,
            "crop_ratio_low" => a.crop_ratio_range[0] = parse(key, value)?,
            "crop_ratio_high" => a.crop_ratio_range[1] = parse(key, value)?,
            "flip_prob" => a.flip_prob = parse(key, value)?,
            "jitter_strength" => a.jitter_strength = parse(key, value)?,
            "jitter_prob" => a.jitter_prob = parse(key, value)?,
            "grayscale_prob" => a.grayscale_prob = parse(key, value)?,
            "blur_prob" => a.blur_prob = parse(key, value)?,
            "blur_sigma_low" => a.blur_sigma_range[0] = parse(key, value)?,
            "blur_sigma_high" => a.blur_sigma_range[1] = parse(key, value)?,
            "output_height" => a.output_size.0 = parse(key, value)?,
            "output_width" => a.output_size.1 = parse(key, value)?,
            "dataset" => d.dataset = value.parse()?,
            "data_path" => d.data_path = path(value),
            "views_a" => d.views_a = path(value),
            "views_b" => d.views_b = path(value),
            "limit" => d.limit = parse(key, value)?,
            "synth_clusters" => d.synth_clusters = parse(key, value)?,
            "synth_dim" => d.synth_dim = parse(key, value)?,
            "synth_per_cluster" => d.synth_per_cluster = parse(key, value)?,
            "synth_noise" => d.synth_noise = parse(key, value)?,
            "checkpoint" => self.output.checkpoint = path(value),
            "loss_log" => self.output.loss_log = path(value),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()
    }

    /// Every key with its resolved value, defaults included.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        let d = &self.data;
        let mut out = self.train.entries();
        out.extend([
            ("crop_scale_low", a.crop_scale_range[0].to_string()),
            ("crop_scale_high", a.crop_scale_range[1].to_string()),
            ("crop_ratio_low", a.crop_ratio_range[0].to_string()),
            ("crop_ratio_high", a.crop_ratio_range[1].to_string()),
            ("flip_prob", a.flip_prob.to_string()),
            ("jitter_strength", a.jitter_strength.to_string()),
            ("jitter_prob", a.jitter_prob.to_string()),
            ("grayscale_prob", a.grayscale_prob.to_string()),
            ("blur_prob", a.blur_prob.to_string()),
            ("blur_sigma_low", a.blur_sigma_range[0].to_string()),
            ("blur_sigma_high", a.blur_sigma_range[1].to_string()),
            ("output_height", a.output_size.0.to_string()),
            ("output_width", a.output_size.1.to_string()),
            ("dataset", d.dataset.to_string()),
            ("data_path", show(&d.data_path)),
            ("views_a", show(&d.views_a)),
            ("views_b", show(&d.views_b)),
            ("limit", d.limit.to_string()),
            ("synth_clusters", d.synth_clusters.to_string()),
            ("synth_dim", d.synth_dim.to_string()),
            ("synth_per_cluster", d.synth_per_cluster.to_string()),
            ("synth_noise", d.synth_noise.to_string()),
            ("checkpoint", show(&self.output.checkpoint)),
            ("loss_log", show(&self.output.loss_log)),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{Ablation, Mode};

    #[test]
    fn parses_comments_and_whitespace() {
        let cfg = RunConfig::parse(
            "# header\n\n m = 4 \nmode=head-only # trailing\nablation=spq_h\ndataset=descriptor-views\nviews_a=a.spqt\n",
        )
        .unwrap();
        assert_eq!(cfg.train.m, 4);
        assert_eq!(cfg.train.mode, Mode::HeadOnly);
        assert_eq!(cfg.train.ablation, Ablation::SpqH);
        assert_eq!(cfg.data.dataset, DatasetKind::DescriptorViews);
        assert_eq!(cfg.data.views_a, Some(PathBuf::from("a.spqt")));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("warmup=5"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("m=four"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just text"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("dataset=imagenet"), Err(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("base_lr", "0.0030000000000000001").unwrap();
        cfg.set("tau_cqc", "0.1").unwrap();
        cfg.set("flip_prob", "0.25").unwrap();
        cfg.set("checkpoint", "out/model.spqm").unwrap();
        cfg.set("synth_noise", "0.05").unwrap();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("tau_q=0.2\n"));
        assert!(text.contains("k=16\n"));
        assert!(text.contains("loss_log=\n"));
    }

    #[test]
    fn defaults_match_documented_values() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.train.tau_q, 0.2);
        assert_eq!(cfg.train.cqc.tau_cqc, 0.5);
        assert!(!cfg.train.cqc.include_positive_in_denominator);
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert_eq!(cfg.train.d / cfg.train.m, 16);
        assert_eq!(cfg.augment.jitter_strength, 0.5);
        cfg.validate().unwrap();
    }
}
