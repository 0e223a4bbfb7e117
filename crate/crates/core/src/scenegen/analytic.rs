//! Exact ray casting of the procedural primitives with flat albedo and a
//! fixed Lambert term, over a white background.

use super::scene::SceneSpec;
use super::vocab::Shape;
use crate::error::Result;
use crate::image::Image;
use crate::renderer::camera::{dot, normalize, Ray, Vec3};
use crate::renderer::Camera;

pub const LIGHT_DIR: Vec3 = [0.3713906763541037, 0.7427813527082074, 0.5570860145311556];
pub const AMBIENT: f64 = 0.4;
pub const DIFFUSE: f64 = 0.6;
pub const BACKGROUND: f64 = 1.0;

/// Rotation about +y by `a`.
fn rot_y(v: Vec3, a: f64) -> Vec3 {
    let (s, c) = a.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// Nearest positive hit as (t, object-frame point, object-frame normal).
fn intersect(spec: &SceneSpec, ray: &Ray) -> Option<(f64, Vec3, Vec3)> {
    let r = spec.radius();
    // object frame: undo the azimuthal rotation
    let o = rot_y(ray.origin, -spec.azimuth);
    let d = rot_y(ray.dir, -spec.azimuth);
    let at = |t: f64| [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
    match spec.shape {
        Shape::Sphere => {
            let b = dot(o, d);
            let c = dot(o, o) - r * r;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 0.0 {
                return None;
            }
            let p = at(t);
            Some((t, p, normalize(p)))
        }
        Shape::Cube => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis = 0;
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if o[k].abs() > r {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = ((-r - o[k]) / d[k], (r - o[k]) / d[k]);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    axis = k;
                }
                t1 = t1.min(b);
            }
            if t0 > t1 || t0 <= 0.0 {
                return None;
            }
            let p = at(t0);
            let mut n = [0.0; 3];
            n[axis] = p[axis].signum();
            Some((t0, p, n))
        }
        Shape::Cylinder => {
            // side: x² + z² = r², |y| <= r; caps: y = ±r
            let mut best: Option<(f64, Vec3, Vec3)> = None;
            let a = d[0] * d[0] + d[2] * d[2];
            if a > 1e-15 {
                let b = o[0] * d[0] + o[2] * d[2];
                let c = o[0] * o[0] + o[2] * o[2] - r * r;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    let p = at(t);
                    if t > 0.0 && p[1].abs() <= r {
                        best = Some((t, p, normalize([p[0], 0.0, p[2]])));
                    }
                }
            }
            if d[1].abs() > 1e-15 {
                for cap in [r, -r] {
                    let t = (cap - o[1]) / d[1];
                    let p = at(t);
                    if t > 0.0 && p[0] * p[0] + p[2] * p[2] <= r * r && best.is_none_or(|b| t < b.0) {
                        best = Some((t, p, [0.0, cap.signum(), 0.0]));
                    }
                }
            }
            best
        }
    }
}

/// Shaded color along `ray`, or `None` on a miss.
pub fn shade(spec: &SceneSpec, ray: &Ray) -> Option<[f64; 3]> {
    let (_, p, n) = intersect(spec, ray)?;
    let r = spec.radius();
    // top third of the vertical extent [-r, r]
    let albedo = if p[1] > r / 3.0 {
        spec.accent_albedo()
    } else {
        spec.albedo()
    };
    let n_world = rot_y(n, spec.azimuth);
    let lambert = AMBIENT + DIFFUSE * dot(n_world, LIGHT_DIR).max(0.0);
    Some([albedo[0] * lambert, albedo[1] * lambert, albedo[2] * lambert])
}

/// Renders `spec` with `supersample²` rays per pixel, box filtered.
pub fn render_scene_analytic(spec: &SceneSpec, cam: &Camera, supersample: usize) -> Result<Image> {
    let ss = supersample.max(1);
    let fine = cam.with_resolution(cam.width * ss, cam.height * ss);
    let rays = fine.generate_rays()?;
    let mut img = Image::filled(3, cam.height, cam.width, 0.0);
    let norm = 1.0 / (ss * ss) as f64;
    for (i, ray) in rays.iter().enumerate() {
        let (fy, fx) = (i / fine.width, i % fine.width);
        let c = shade(spec, ray).unwrap_or([BACKGROUND; 3]);
        for k in 0..3 {
            let (y, x) = (fy / ss, fx / ss);
            let v = img.get(k, y, x) + (c[k] * norm) as f32;
            img.set(k, y, x, v);
        }
    }
    Ok(img)
}

/// Fraction of rays hitting the object; used for coverage checks.
pub fn hit_mask(spec: &SceneSpec, cam: &Camera) -> Result<Vec<bool>> {
    Ok(cam.generate_rays()?.iter().map(|r| intersect(spec, r).is_some()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::scene::CameraConfig;
    use crate::scenegen::vocab::Size;

    fn spec(shape: Shape, size: Size) -> SceneSpec {
        SceneSpec {
            shape,
            color: "red".into(),
            size,
            azimuth: 0.3,
            accent: "blue".into(),
        }
    }

    #[test]
    fn light_is_unit() {
        assert!((dot(LIGHT_DIR, LIGHT_DIR) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn looking_away_is_white() {
        let mut cam = CameraConfig::default().at_azimuth(0.0, 8);
        cam.target = [cam.position[0] * 2.0, cam.position[1] * 2.0, cam.position[2] * 2.0];
        let img = render_scene_analytic(&spec(Shape::Sphere, Size::Large), &cam, 2).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn red_sphere_centre_is_red() {
        let cam = CameraConfig::default().at_azimuth(1.0, 9);
        let mut s = spec(Shape::Sphere, Size::Large);
        s.accent = "red".into();
        let img = render_scene_analytic(&s, &cam, 1).unwrap();
        let (r, g, b) = (img.get(0, 4, 4), img.get(1, 4, 4), img.get(2, 4, 4));
        assert!(r > g && r > b, "{r} {g} {b}");
    }

    #[test]
    fn every_shape_is_hit_at_centre() {
        let cam = CameraConfig::default().at_azimuth(2.0, 1);
        for shape in Shape::ALL {
            for size in Size::ALL {
                assert!(hit_mask(&spec(shape, size), &cam).unwrap()[0], "{shape:?} {size:?}");
            }
        }
    }

    #[test]
    fn accent_visible_from_above() {
        let cam = CameraConfig::default().at_azimuth(0.0, 32);
        let img = render_scene_analytic(&spec(Shape::Cylinder, Size::Large), &cam, 1).unwrap();
        let blue_dominant = (0..32 * 32)
            .filter(|&i| {
                let (y, x) = (i / 32, i % 32);
                img.get(2, y, x) > img.get(0, y, x) + 0.2
            })
            .count();
        assert!(blue_dominant > 20, "{blue_dominant}");
    }
}
