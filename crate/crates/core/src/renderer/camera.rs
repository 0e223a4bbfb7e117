use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Pinhole camera looking from `position` at `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidArgument(format!(
                "camera needs 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidArgument(format!("fov {} outside (0, pi)", self.fov_y)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        self.basis().map(|_| ())
    }

    /// (right, up, forward) orthonormal basis.
    pub fn basis(&self) -> Result<[Vec3; 3]> {
        let fwd = sub(self.target, self.position);
        if norm(fwd) < 1e-12 {
            return Err(Error::InvalidArgument("camera position equals target".into()));
        }
        let fwd = normalize(fwd);
        let right = cross(fwd, self.up);
        if norm(right) < 1e-9 * norm(self.up).max(1.0) {
            return Err(Error::InvalidArgument("up vector parallel to view direction".into()));
        }
        let right = normalize(right);
        let up = cross(right, fwd);
        Ok([right, up, fwd])
    }

    /// One unit-length ray per pixel through the pixel centre, row-major from
    /// the top-left pixel.
    pub fn generate_rays(&self) -> Result<Vec<Ray>> {
        self.validate()?;
        let [right, up, fwd] = self.basis()?;
        let tan = (0.5 * self.fov_y).tan();
        let aspect = self.width as f64 / self.height as f64;
        let mut rays = Vec::with_capacity(self.width * self.height);
        for i in 0..self.height {
            let v = (1.0 - 2.0 * (i as f64 + 0.5) / self.height as f64) * tan;
            for j in 0..self.width {
                let u = (2.0 * (j as f64 + 0.5) / self.width as f64 - 1.0) * tan * aspect;
                let d = add(fwd, add(scale(right, u), scale(up, v)));
                rays.push(Ray {
                    origin: self.position,
                    dir: normalize(d),
                });
            }
        }
        Ok(rays)
    }

    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }
}
