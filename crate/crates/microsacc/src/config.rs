//! Pipeline configuration: one TOML-loadable document covering scene,
//! simulator, dataset, binning, flow, model, and training settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::dvs::SimulatorConfig;
use crate::error::{Error, Result};
use crate::flow::FarnebackParams;
use crate::scene::{class_table, validate_class_table, ClassSpec, EyeScene};
use crate::snn::{LifParams, Preset, TrainSettings};

/// Event-stream binning parameters shared by training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinningConfig {
    /// Time bins per window (T).
    pub t_bins: usize,
    /// Window length in nanoseconds (3 ms).
    pub window_ns: u64,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            t_bins: 10,
            window_ns: 3_000_000,
        }
    }
}

/// Model section: preset plus neuron constants and the flow-loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub preset: Preset,
    pub lif: LifParams,
    pub lambda: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            preset: Preset::Vgg16sFlow,
            lif: LifParams::default(),
            lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub scene: EyeScene,
    pub classes: Vec<ClassSpec>,
    pub sim: SimulatorConfig,
    pub dataset: DatasetConfig,
    pub binning: BinningConfig,
    pub flow: FarnebackParams,
    pub model: ModelSettings,
    pub train: TrainSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Desk-scale preset: 200x150 sensor, 110x75 ROI, 700 samples per eye.
    pub fn desk() -> Self {
        PipelineConfig {
            scene: EyeScene::desk(),
            classes: class_table(),
            sim: SimulatorConfig::default(),
            dataset: DatasetConfig::default(),
            binning: BinningConfig::default(),
            flow: FarnebackParams::default(),
            model: ModelSettings::default(),
            train: TrainSettings::default(),
        }
    }

    /// Full-scale preset: 800x600 sensor, 440x300 ROI, 175,000 sequences.
    pub fn full_scale() -> Self {
        PipelineConfig {
            scene: EyeScene::full_scale(),
            dataset: DatasetConfig::full_scale(),
            train: TrainSettings {
                batch_size: 64,
                ..TrainSettings::default()
            },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        validate_class_table(&self.classes)?;
        self.sim.validate()?;
        self.flow.validate()?;
        self.model.lif.validate()?;
        if self.binning.t_bins == 0 || self.binning.window_ns == 0 {
            return Err(Error::Config("binning needs t_bins >= 1 and a window".into()));
        }
        if self.model.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Model configuration for this pipeline's ROI and binning.
    pub fn model_config(&self) -> crate::snn::ModelConfig {
        let (_, _, w, h) = crate::dataset::roi_rect(&self.scene, &self.dataset);
        crate::snn::ModelConfig {
            preset: self.model.preset,
            t_bins: self.binning.t_bins,
            in_channels: 2,
            height: h,
            width: w,
            class_count: crate::scene::CLASS_COUNT,
            lif: self.model.lif,
            lambda: self.model.lambda,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_roundtrip_toml() {
        let cfg = PipelineConfig::desk();
        cfg.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        cfg.save(&path).unwrap();
        let back = PipelineConfig::load(&path).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn full_scale_matches_published_shape() {
        let cfg = PipelineConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!((cfg.scene.width, cfg.scene.height), (800, 600));
        assert_eq!(cfg.dataset.samples_per_class(), 12_500);
        // 12,500 per class per eye x 7 x 2 = 175,000 sequences
        assert_eq!(cfg.dataset.samples_per_class() * 7 * 2, 175_000);
        let mc = cfg.model_config();
        assert_eq!((mc.width, mc.height), (440, 300));
    }

    #[test]
    fn desk_roi_and_counts() {
        let cfg = PipelineConfig::desk();
        let mc = cfg.model_config();
        assert_eq!((mc.width, mc.height), (110, 75));
        assert_eq!(cfg.dataset.samples_per_class() * 7, 700);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let text = "[model]\npreset = \"vgg11s\"\nlambda = 0.0\n[model.lif]\ntau = 2.0\nv_threshold = 1.0\nv_reset = 0.0\nsurrogate_alpha = 2.0\n";
        let cfg: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.model.preset, Preset::Vgg11s);
        assert_eq!(cfg.scene, EyeScene::desk());
    }
}
