use std::f64::consts::PI;

use trigen_core::scenegen::analytic::hit_mask;
use trigen_core::scenegen::{make_caption, parse_caption, sample_scene, AttributeVocab, CameraConfig, SceneSpec, Shape, Size};
use trigen_core::scenegen::scene::camera_azimuth;

#[test]
fn shape_frequencies_are_binomial() {
    let v = AttributeVocab::default();
    let n = 10_000;
    let mut counts = [0usize; 3];
    for s in 0..n {
        let spec = sample_scene(s as u64, &v);
        counts[Shape::ALL.iter().position(|&x| x == spec.shape).unwrap()] += 1;
    }
    let p = 1.0 / 3.0;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
    }
}

/// Asymptotic Kolmogorov survival function Q(λ) = 2 Σ (-1)^{k-1} exp(-2k²λ²).
fn kolmogorov_q(lambda: f64) -> f64 {
    let mut s = 0.0;
    for k in 1..100 {
        let k = k as f64;
        s += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    s.clamp(0.0, 1.0)
}

#[test]
fn azimuth_is_uniform_by_ks() {
    let cfg = CameraConfig::default();
    let n = 10_000;
    let mut az: Vec<f64> = (0..n).map(|s| camera_azimuth(&cfg.sample(s as u64, 4))).collect();
    az.sort_by(f64::total_cmp);
    let d = az
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f = a / (2.0 * PI);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    let sn = (n as f64).sqrt();
    let p = kolmogorov_q((sn + 0.12 + 0.11 / sn) * d);
    assert!(p > 0.01, "D {d} p {p}");
    assert!(az.iter().all(|&a| (0.0..2.0 * PI).contains(&a)));
}

#[test]
fn caption_items_drop_at_configured_rate() {
    let v = AttributeVocab::default();
    let rate = 0.3;
    let n = 10_000;
    let mut dropped = [0usize; 3];
    for s in 0..n {
        let spec = sample_scene(s as u64, &v);
        let a = parse_caption(&make_caption(&spec, s as u64, rate), &v).unwrap();
        dropped[0] += a.size.is_none() as usize;
        dropped[1] += a.color.is_none() as usize;
        dropped[2] += a.accent.is_none() as usize;
        assert_eq!(a.shape, Some(spec.shape));
    }
    let sd = (n as f64 * rate * (1.0 - rate)).sqrt();
    for d in dropped {
        assert!((d as f64 - n as f64 * rate).abs() < 3.0 * sd, "{dropped:?}");
    }
}

#[test]
fn sphere_silhouette_matches_cone_angle() {
    // A sphere of radius r seen from distance D subtends a cone of
    // half-angle asin(r/D); on the image plane that is a disc of radius
    // tan(asin(r/D)) / tan(fov/2) half-heights.
    let cfg = CameraConfig::default();
    let res = 64;
    for size in Size::ALL {
        let spec = SceneSpec {
            shape: Shape::Sphere,
            color: "red".into(),
            size,
            azimuth: 1.0,
            accent: "red".into(),
        };
        let cam = cfg.at_azimuth(0.4, res);
        let hits = hit_mask(&spec, &cam).unwrap().iter().filter(|&&h| h).count() as f64;
        let alpha = (size.radius() / cfg.radius).asin();
        let disc = alpha.tan() / (cfg.fov_deg.to_radians() / 2.0).tan() * res as f64 / 2.0;
        let expected = PI * disc * disc;
        assert!((hits - expected).abs() / expected < 0.05, "{size:?}: {hits} vs {expected}");
    }
}
