use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimConfig;
use super::scene::{RoomConfig, CLASSES};
use crate::crf::CrfConfig;
use crate::error::{Error, Result};
use crate::kpnet::GeometryConfig;
use crate::mprm::{parse_paths, Fusion, MprmConfig, PathId};

/// Which weak labels the classifier trains on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelLevel {
    #[default]
    Subcloud,
    Scene,
}

impl std::str::FromStr for LabelLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subcloud" => Ok(LabelLevel::Subcloud),
            "scene" => Ok(LabelLevel::Scene),
            other => Err(Error::Config(format!("unknown label level '{other}' (subcloud, scene)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Subcloud radius (m).
    pub radius: f64,
    pub level: LabelLevel,
    /// Random subclouds drawn per scene and epoch in scene-level mode;
    /// 0 uses the scene's seed-grid count.
    pub scene_subclouds: usize,
    /// Set the fourth input channel only for black points instead of always.
    pub black_indicator: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            radius: 2.0,
            level: LabelLevel::Subcloud,
            scene_subclouds: 0,
            black_indicator: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_points: usize,
    #[serde(flatten)]
    pub optim: OptimConfig,
}

impl StageConfig {
    fn with_epochs(epochs: usize) -> Self {
        StageConfig {
            epochs,
            batch_points: 6000,
            optim: OptimConfig::default(),
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.batch_points == 0 {
            return Err(Error::Config(format!("{name}.batch_points must be positive")));
        }
        self.optim.validate()
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::with_epochs(100)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub widths: [usize; 5],
    #[serde(flatten)]
    pub stage: StageConfig,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            widths: [32, 64, 128, 256, 512],
            stage: StageConfig::with_epochs(50),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PcamConfig {
    /// `all` or a comma-separated subset of plain, spatial, channel, pointwise.
    pub paths: String,
    pub fusion: Fusion,
    pub crf: bool,
}

impl Default for PcamConfig {
    fn default() -> Self {
        PcamConfig {
            paths: "all".into(),
            fusion: Fusion::Max,
            crf: false,
        }
    }
}

impl PcamConfig {
    pub fn path_list(&self) -> Result<Vec<PathId>> {
        parse_paths(&self.paths)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenesConfig {
    pub count: usize,
    #[serde(flatten)]
    pub room: RoomConfig,
}

impl Default for ScenesConfig {
    fn default() -> Self {
        ScenesConfig {
            count: 20,
            room: RoomConfig::default(),
        }
    }
}

/// Everything a pipeline run depends on, read from a TOML file whose
/// missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub scenes: ScenesConfig,
    pub data: DataConfig,
    pub geometry: GeometryConfig,
    pub mprm: MprmConfig,
    pub classifier: StageConfig,
    pub segmenter: SegmenterConfig,
    pub pcam: PcamConfig,
    pub crf: CrfConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            num_classes: CLASSES.len(),
            scenes: ScenesConfig::default(),
            data: DataConfig::default(),
            geometry: GeometryConfig::default(),
            mprm: MprmConfig::default(),
            classifier: StageConfig::default(),
            segmenter: SegmenterConfig::default(),
            pcam: PcamConfig::default(),
            crf: CrfConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(self.data.radius > 0.0) {
            return Err(Error::Config("data.radius must be positive".into()));
        }
        self.geometry.disposition().map_err(|e| Error::Config(e.to_string()))?;
        self.classifier.validate("classifier")?;
        self.segmenter.stage.validate("segmenter")?;
        self.pcam.path_list()?;
        self.crf.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn round_trip_through_toml() {
        let mut c = PipelineConfig::default();
        c.seed = 99;
        c.pcam.fusion = Fusion::Sum;
        c.data.level = LabelLevel::Scene;
        c.classifier.optim.initial_lr = 0.05;
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = PipelineConfig::from_toml("[classifier]\nepochs = 3\nmomentum = 0.5\n[pcam]\npaths = \"plain,channel\"\n").unwrap();
        assert_eq!(c.classifier.epochs, 3);
        assert_eq!(c.classifier.optim.momentum, 0.5);
        assert_eq!(c.classifier.optim.initial_lr, 0.01);
        assert_eq!(c.pcam.path_list().unwrap(), vec![PathId::Plain, PathId::Channel]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in ["seed = \"x\"", "[pcam]\npaths = \"bogus\"", "[classifier]\nmomentum = 1.5", "[data]\nradius = 0.0"] {
            assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
