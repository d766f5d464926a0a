//! Flat `key = value` run configuration, one entry per line, `#` comments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::patch::PatchSpec;
use crate::synthetic::{NoiseMode, SyntheticSpec};

/// Every knob of the pipeline. Defaults are the desk-scale regime: 96x96
/// images, radius 1-2 px blobs (ROI area ratio around 1e-3), patches a third
/// of the image side, five instances per bag, c = 10.
#[derive(Clone, Debug)]
pub struct Config {
    pub image_size: usize,
    pub instances_per_bag: usize,
    pub patch_size: usize,
    pub suppression_window: usize,
    pub conv_channels: [usize; 3],
    pub kernel_size: usize,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub two_wam_c: f64,
    pub seed: u64,
    /// Initialize the Instance Model from the Bag checkpoint instead of
    /// fresh weights.
    pub fine_tune: bool,
    pub decision_threshold: f64,
    pub bbox_threshold_fraction: f64,
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
    // synthetic generation
    pub train_count: usize,
    pub validation_count: usize,
    pub test_count: usize,
    pub positive_fraction: f64,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub blob_radius_min: f64,
    pub blob_radius_max: f64,
    pub blob_contrast: f64,
    pub noise_mode: NoiseMode,
    pub noise_probability: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 96,
            instances_per_bag: 5,
            patch_size: 32,
            suppression_window: 32,
            conv_channels: [8, 16, 16],
            kernel_size: 3,
            dropout_rate: 0.0,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 16,
            two_wam_c: 10.0,
            seed: 0,
            fine_tune: false,
            decision_threshold: 0.5,
            bbox_threshold_fraction: 0.5,
            data_dir: None,
            out_dir: None,
            train_count: 2000,
            validation_count: 0,
            test_count: 500,
            positive_fraction: 0.5,
            blobs_min: 1,
            blobs_max: 3,
            blob_radius_min: 1.0,
            blob_radius_max: 2.0,
            blob_contrast: 0.35,
            noise_mode: NoiseMode::None,
            noise_probability: 0.3,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::validation(format!("config line {}: expected key = value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::validation(format!("config line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::validation(format!("bad value {value:?} for {key}")))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "instances_per_bag" => self.instances_per_bag = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "suppression_window" => self.suppression_window = num(key, value)?,
            "conv_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| num("conv_channels", p.trim()))
                    .collect::<Result<_>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(Error::validation(format!(
                        "conv_channels needs three values, got {value:?}"
                    )));
                };
                self.conv_channels = [a, b, c];
            }
            "kernel_size" => self.kernel_size = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "two_wam_c" => self.two_wam_c = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "fine_tune" => self.fine_tune = num(key, value)?,
            "decision_threshold" => self.decision_threshold = num(key, value)?,
            "bbox_threshold_fraction" => self.bbox_threshold_fraction = num(key, value)?,
            "data_dir" => self.data_dir = Some(value.to_string()),
            "out_dir" => self.out_dir = Some(value.to_string()),
            "train_count" => self.train_count = num(key, value)?,
            "validation_count" => self.validation_count = num(key, value)?,
            "test_count" => self.test_count = num(key, value)?,
            "positive_fraction" => self.positive_fraction = num(key, value)?,
            "blobs_min" => self.blobs_min = num(key, value)?,
            "blobs_max" => self.blobs_max = num(key, value)?,
            "blob_radius_min" => self.blob_radius_min = num(key, value)?,
            "blob_radius_max" => self.blob_radius_max = num(key, value)?,
            "blob_contrast" => self.blob_contrast = num(key, value)?,
            "noise_mode" => self.noise_mode = NoiseMode::parse(value)?,
            "noise_probability" => self.noise_probability = num(key, value)?,
            other => return Err(Error::validation(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.instances_per_bag == 0
            || self.patch_size == 0
            || self.suppression_window == 0
            || self.kernel_size == 0
            || self.epochs == 0
            || self.batch_size == 0
        {
            return Err(Error::validation("all size and count settings must be positive"));
        }
        if self.patch_size > self.image_size {
            return Err(Error::validation(format!(
                "patch_size {} exceeds image_size {}",
                self.patch_size, self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation("dropout_rate must be in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.two_wam_c > 0.0) {
            return Err(Error::validation("two_wam_c must be positive"));
        }
        if !(0.0 < self.decision_threshold && self.decision_threshold < 1.0) {
            return Err(Error::validation("decision_threshold must be in (0, 1)"));
        }
        if !(0.0 < self.bbox_threshold_fraction && self.bbox_threshold_fraction < 1.0) {
            return Err(Error::validation("bbox_threshold_fraction must be in (0, 1)"));
        }
        self.model_spec().validate()?;
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            in_channels: 1,
            conv_channels: self.conv_channels,
            kernel_size: self.kernel_size,
            two_wam_c: self.two_wam_c,
            dropout_rate: self.dropout_rate,
        }
    }

    pub fn patch_spec(&self) -> Result<PatchSpec> {
        PatchSpec::new(
            self.instances_per_bag,
            self.patch_size,
            self.suppression_window,
        )
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            train: self.train_count,
            validation: self.validation_count,
            test: self.test_count,
            positive_fraction: self.positive_fraction,
            blobs_min: self.blobs_min,
            blobs_max: self.blobs_max,
            radius_min: self.blob_radius_min,
            radius_max: self.blob_radius_max,
            contrast: self.blob_contrast,
            noise_mode: self.noise_mode,
            noise_probability: self.noise_probability,
            image_size: self.image_size,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn parses_keys_and_comments() {
        let cfg = Config::parse(
            "# run settings\nimage_size = 64\nseed = 9\nconv_channels = 4, 8, 8\nnoise_mode = blur\nfine_tune = true\n",
        )
        .unwrap();
        assert_eq!(cfg.image_size, 64);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.conv_channels, [4, 8, 8]);
        assert_eq!(cfg.noise_mode, NoiseMode::Blur);
        assert!(cfg.fine_tune);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(Config::parse("not_a_key = 3\n").is_err());
        assert!(Config::parse("image_size = soon\n").is_err());
        assert!(Config::parse("image_size\n").is_err());
    }

    #[test]
    fn rejects_invalid_combinations() {
        assert!(Config::parse("patch_size = 128\nimage_size = 96\n").is_err());
        assert!(Config::parse("dropout_rate = 1.0\n").is_err());
        assert!(Config::parse("two_wam_c = 0\n").is_err());
    }
}
