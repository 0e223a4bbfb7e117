use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::perception::ClassifierConfig;
use crate::scenegen::SceneConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Images in the stage-one training corpus.
    pub n_images: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_images: 20_000,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Triplanes sampled from the trained generator for stage two.
    pub n_triplanes: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { n_triplanes: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_prompts: usize,
    /// Generator samples for the stage-one fidelity score.
    pub n_gan_samples: usize,
    /// Corpus images forming the reference feature distribution.
    pub n_reference: usize,
    /// Diffusion samples; sample i uses prompt i mod n_prompts.
    pub n_diffusion_samples: usize,
    /// Exported triplanes re-captioned from a second view.
    pub n_consistency: usize,
    pub guidance: f64,
    pub steps: usize,
    /// Samples written by `all` for inspection and the determinism check.
    pub n_showcase: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_prompts: 200,
            n_gan_samples: 2000,
            n_reference: 2000,
            n_diffusion_samples: 200,
            n_consistency: 200,
            guidance: 7.5,
            steps: 50,
            n_showcase: 8,
        }
    }
}

/// Every knob of a run. Serialized as TOML; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub gan: GanConfig,
    pub export: ExportConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: CONFIG_VERSION,
            seed: 0,
            data: DataConfig::default(),
            classifier: ClassifierConfig::default(),
            gan: GanConfig::default(),
            export: ExportConfig::default(),
            diffusion: DiffusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hash of the canonical JSON form, stamped into every artifact.
    pub fn hash(&self) -> Result<String> {
        artifact::content_hash(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config format_version {} is not supported (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        self.data.scene.validate()?;
        self.gan.validate()?;
        self.diffusion.validate()?;
        if self.data.scene.image_size != self.gan.image_res() {
            return Err(Error::Config(format!(
                "data.scene.image_size {} must equal twice gan.render_res ({})",
                self.data.scene.image_size,
                self.gan.image_res()
            )));
        }
        if self.data.scene.camera != self.gan.camera {
            return Err(Error::Config("gan.camera must equal data.scene.camera".into()));
        }
        if self.data.n_images == 0 || self.export.n_triplanes == 0 {
            return Err(Error::Config("data.n_images and export.n_triplanes must be positive".into()));
        }
        if self.diffusion.holdout >= self.export.n_triplanes {
            return Err(Error::Config("diffusion.holdout must be below export.n_triplanes".into()));
        }
        let e = &self.eval;
        if e.n_prompts == 0 || e.steps == 0 {
            return Err(Error::Config("eval.n_prompts and eval.steps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut c = RunConfig::default();
        c.data.scene.image_size = c.gan.image_res();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("seed = 1\n[gan]\nstpes = 3\n").unwrap_err();
        assert!(err.to_string().contains("stpes"), "{err}");
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.diffusion.guidance = 3.0;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
