use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::vocab::{color_rgb, AttributeVocab, Shape, Size};
use crate::renderer::Camera;
use crate::seed;

/// Ground-truth attributes of one synthetic object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: String,
    pub size: Size,
    /// Rotation about the vertical axis, radians.
    pub azimuth: f64,
    /// Color of the top third of the object.
    pub accent: String,
}

impl SceneSpec {
    pub fn albedo(&self) -> [f64; 3] {
        color_rgb(&self.color).expect("vocabulary colors come from the table")
    }

    pub fn accent_albedo(&self) -> [f64; 3] {
        color_rgb(&self.accent).expect("vocabulary colors come from the table")
    }

    pub fn radius(&self) -> f64 {
        self.size.radius()
    }
}

/// Uniform independent draw of every attribute.
pub fn sample_scene(seed: u64, vocab: &AttributeVocab) -> SceneSpec {
    let mut rng = seed::rng(seed, "scene", 0);
    let shape = vocab.shapes[rng.random_range(0..vocab.shapes.len())];
    let color = vocab.colors[rng.random_range(0..vocab.colors.len())].clone();
    let size = vocab.sizes[rng.random_range(0..vocab.sizes.len())];
    let azimuth = rng.random_range(0.0..2.0 * PI);
    let accent = vocab.colors[rng.random_range(0..vocab.colors.len())].clone();
    SceneSpec {
        shape,
        color,
        size,
        azimuth,
        accent,
    }
}

/// Viewpoint distribution: fixed distance and elevation, uniform azimuth,
/// looking at the origin with +y up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub radius: f64,
    pub elevation_deg: f64,
    pub fov_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            radius: 2.34,
            elevation_deg: 40.0,
            fov_deg: 45.0,
            near: 1.1,
            far: 3.6,
        }
    }
}

impl CameraConfig {
    pub fn at_azimuth(&self, azimuth: f64, resolution: usize) -> Camera {
        let el = self.elevation_deg.to_radians();
        let position = [
            self.radius * el.cos() * azimuth.sin(),
            self.radius * el.sin(),
            self.radius * el.cos() * azimuth.cos(),
        ];
        Camera {
            position,
            target: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_y: self.fov_deg.to_radians(),
            width: resolution,
            height: resolution,
            near: self.near,
            far: self.far,
        }
    }

    /// Azimuth uniform in [0, 2π).
    pub fn sample_azimuth(&self, seed: u64) -> f64 {
        let mut rng = seed::rng(seed, "camera", 0);
        rng.random_range(0.0..2.0 * PI)
    }

    pub fn sample(&self, seed: u64, resolution: usize) -> Camera {
        self.at_azimuth(self.sample_azimuth(seed), resolution)
    }
}

/// Azimuth of a camera position about +y, in [0, 2π).
pub fn camera_azimuth(cam: &Camera) -> f64 {
    let a = cam.position[0].atan2(cam.position[2]);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

pub fn camera_elevation(cam: &Camera) -> f64 {
    let p = cam.position;
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    (p[1] / r).asin()
}
