//! Run configuration: built-in defaults, then a flat `key = value` file,
//! then command-line flags.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use mdn_core::eval::{ExperimentConfig, DEFAULT_RADIUS_PX};
use mdn_core::network::NetworkConfig;
use mdn_core::pipeline::{DetectConfig, PeakThreshold};
use mdn_core::synth::{DilationConfig, SceneConfig};

/// Bad flags, unknown keys or out-of-domain values. Exits with code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub images: usize,
    pub scene: SceneConfig,
    pub network: NetworkConfig,
    pub train_stride: usize,
    pub dilation: DilationConfig,
    pub detect: DetectConfig,
    pub radius_px: f64,
    pub drop_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let network = NetworkConfig::default();
        Self {
            seed: 0,
            images: 100,
            scene: SceneConfig::default(),
            train_stride: network.patch_size,
            network,
            dilation: DilationConfig::default(),
            detect: DetectConfig::default(),
            radius_px: DEFAULT_RADIUS_PX,
            drop_fraction: 0.3,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> anyhow::Result<T> {
    value
        .parse()
        .map_err(|_| usage(format!("invalid value {value:?} for {key}")))
}

fn parse_range<T: FromStr>(key: &str, value: &str) -> anyhow::Result<(T, T)> {
    let (lo, hi) = value
        .split_once("..")
        .ok_or_else(|| usage(format!("{key} expects lo..hi, got {value:?}")))?;
    Ok((parse(key, lo.trim())?, parse(key, hi.trim())?))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "images" => self.images = parse(key, v)?,
            "image_size" => self.scene.image_size = parse(key, v)?,
            "blob_count" => self.scene.blob_count = parse_range(key, v)?,
            "blob_radius" => self.scene.blob_radius = parse_range(key, v)?,
            "blob_intensity" => self.scene.blob_intensity = parse_range(key, v)?,
            "background_intensity" => self.scene.background_intensity = parse_range(key, v)?,
            "touching_fraction" => self.scene.touching_fraction = parse(key, v)?,
            "noise_level" => self.scene.noise_level = parse(key, v)?,
            "texture_amplitude" => self.scene.texture_amplitude = parse(key, v)?,
            "k" => self.network.k = parse(key, v)?,
            "patch_size" => self.network.patch_size = parse(key, v)?,
            "fc_hidden" => self.network.fc_hidden = parse(key, v)?,
            "learning_rate" => self.network.adam.learning_rate = parse(key, v)?,
            "batch_size" => self.network.batch_size = parse(key, v)?,
            "epochs" => self.network.epochs = parse(key, v)?,
            "grad_clip" => {
                self.network.grad_clip = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "augment" => self.network.augment = parse(key, v)?,
            "cosine_decay" => self.network.cosine_decay = parse(key, v)?,
            "train_stride" => self.train_stride = parse(key, v)?,
            "dilation_samples" => self.dilation.n_samples = parse(key, v)?,
            "dilation_radius" => self.dilation.radius_px = parse(key, v)?,
            "include_center" => self.dilation.include_center = parse(key, v)?,
            "stride" => self.detect.stride = parse(key, v)?,
            "e_thresh" => self.detect.e_thresh = parse(key, v)?,
            "alpha_thresh" => self.detect.alpha_thresh = parse(key, v)?,
            "min_distance" => self.detect.min_distance_px = parse(key, v)?,
            "peak_fraction" => self.detect.peak_threshold = PeakThreshold::Relative(parse(key, v)?),
            "peak_threshold" => {
                self.detect.peak_threshold = PeakThreshold::Absolute(parse(key, v)?)
            }
            "workers" => self.detect.workers = parse(key, v)?,
            "radius" => self.radius_px = parse(key, v)?,
            "drop" => self.drop_fraction = parse(key, v)?,
            other => return Err(usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected key = value", i + 1)))?;
            self.set(key, value)
                .map_err(|e| usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = fs::read_to_string(path).map_err(|e| mdn_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Pushes the shared seed into every stage and checks value domains.
    pub fn finish(mut self) -> anyhow::Result<Self> {
        self.scene.seed = self.seed;
        self.network.seed = self.seed;
        self.network.validate().map_err(|e| usage(e.to_string()))?;
        self.scene
            .validate(self.network.patch_size)
            .map_err(|e| usage(e.to_string()))?;
        self.detect.validate().map_err(|e| usage(e.to_string()))?;
        if self.train_stride == 0 || self.train_stride > self.network.patch_size {
            return Err(usage("train_stride must lie in 1..=patch_size"));
        }
        if self.detect.stride == 0 || self.detect.stride > self.network.patch_size {
            return Err(usage("stride must lie in 1..=patch_size"));
        }
        if self.detect.workers == 0 {
            return Err(usage("workers must be at least 1"));
        }
        if !(self.radius_px >= 0.0 && self.radius_px.is_finite()) {
            return Err(usage("radius must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(usage(format!(
                "drop fraction {} must lie in [0, 1)",
                self.drop_fraction
            )));
        }
        Ok(self)
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            network: self.network.clone(),
            train_stride: self.train_stride,
            dilation: self.dilation,
            detect: self.detect,
            radius_px: self.radius_px,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults() {
        let mut c = RunConfig::default();
        c.apply_text(
            "# comment\nk = 5\nblob_count = 3..7\ngrad_clip=none\n\n",
            "test",
        )
        .unwrap();
        assert_eq!(c.network.k, 5);
        assert_eq!(c.scene.blob_count, (3, 7));
        assert_eq!(c.network.grad_clip, None);
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let err = RunConfig::default()
            .apply_text("bogus = 1", "test")
            .unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn drop_of_one_is_rejected() {
        let mut c = RunConfig::default();
        c.set("drop", "1.0").unwrap();
        assert!(c.finish().is_err());
    }

    #[test]
    fn seed_reaches_every_stage() {
        let mut c = RunConfig::default();
        c.set("seed", "9").unwrap();
        let c = c.finish().unwrap();
        assert_eq!((c.scene.seed, c.network.seed), (9, 9));
    }
}
