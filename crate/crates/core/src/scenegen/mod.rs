//! Procedural training corpus: primitive objects with exact attributes,
//! an analytic ray caster, the viewpoint distribution and template captions.

pub mod analytic;
pub mod caption;
pub mod dataset;
pub mod scene;
pub mod vocab;

use serde::{Deserialize, Serialize};

pub use analytic::render_scene_analytic;
pub use caption::{make_caption, parse_caption, Attributes};
pub use dataset::{build_dataset, ImageRecord, Manifest};
pub use scene::{sample_scene, CameraConfig, SceneSpec};
pub use vocab::{AttributeVocab, Shape, Size};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Rays per pixel side for the box filter.
    pub supersample: usize,
    /// Probability of dropping each optional caption item.
    pub caption_drop_rate: f64,
    pub vocab: AttributeVocab,
    pub camera: CameraConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            supersample: 2,
            caption_drop_rate: 0.0,
            vocab: AttributeVocab::default(),
            camera: CameraConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.supersample == 0 {
            return Err(Error::Config("image_size and supersample must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.caption_drop_rate) {
            return Err(Error::Config("caption_drop_rate must lie in [0, 1]".into()));
        }
        self.vocab.validate()
    }

    /// Camera for sample `seed` at the corpus resolution.
    pub fn sample_camera(&self, seed: u64) -> crate::renderer::Camera {
        self.camera.sample(seed, self.image_size)
    }
}
