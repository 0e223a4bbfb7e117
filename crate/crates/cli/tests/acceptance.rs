//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned
//! below. Runs as a plain binary so the lines always reach the output.
//!
//! The end-to-end experiment reads the summary of a finished desk-scale
//! run, `reports/desk/summary.json` unless `TRIGEN_DESK_SUMMARY` names
//! another file.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng as _;
use trigen_core::diffusion::{
    add_noise, ddim_step, drop_caption, predict_eps, sample, NoiseSchedule, Predictor, SampleOptions,
};
use trigen_core::nn::{self, ParamStore};
use trigen_core::perception::EvalReport;
use trigen_core::pipeline::Summary;
use trigen_core::renderer::{composite, weights_tensor, Outputs, RenderConfig, Renderer};
use trigen_core::scenegen::scene::{camera_azimuth, camera_elevation};
use trigen_core::scenegen::{CameraConfig, SceneConfig};
use trigen_core::seed;
use trigen_core::triplane::{DecoderConfig, FieldDecoder, TriplaneField, TriplaneStats, NORM_CLAMP, NORM_SCALE};

const REL_EQ: f64 = 1e-6;
const TRAJECTORY_TOL: f64 = 1e-5;
const MIDPOINT_TOL: f64 = 1e-9;
const GRAD_REL: f64 = 1e-2;
const DROPOUT_RATE: f64 = 0.2;
const DROPOUT_DRAWS: u64 = 10_000;
const CAMERA_RADIUS: f64 = 2.34;
const CAMERA_ELEVATION_DEG: f64 = 40.0;
const KS_P_MIN: f64 = 0.01;
const VARIANCE_TOL: f64 = 0.02;
const FID_RATIO_MAX: f64 = 0.25;
const CHANCE_BAND: f64 = 0.05;
const ADHERENCE_MIN: f64 = 0.80;
const CFG_GAP_MIN: f64 = 0.3;
const CONSISTENCY_MIN: f64 = 0.9;
const DISTILLED_FID_RATIO: f64 = 1.5;

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn vals(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---- exact math ----

/// Front-to-back accumulation written out term by term.
fn composite_script(colors: &[[f64; 3]], d: &[f64], delta: &[f64]) -> ([f64; 3], Vec<f64>) {
    let mut rgb = [0.0; 3];
    let mut w = Vec::new();
    for i in 0..d.len() {
        let a = |k: usize| 1.0 - (-(1.0 / (1.0 + (-d[k]).exp())) * delta[k]).exp();
        let mut trans = 1.0;
        for j in 0..i {
            trans *= 1.0 - a(j);
        }
        let wi = a(i) * trans;
        for c in 0..3 {
            rgb[c] += colors[i][c] * wi;
        }
        w.push(wi);
    }
    (rgb, w)
}

fn composite_oracle() -> Outcome {
    let mut rng = seed::rng(1, "acceptance-composite", 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let colors: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.5)).collect();
        let (rgb, w) = composite_script(&colors, &d, &delta);
        let got = composite(&colors, &d, &delta).map_err(|e| e.to_string())?;
        for c in 0..3 {
            worst = worst.max(rel_err(got.rgb[c], rgb[c]));
        }
        // the batched path the renderer actually uses
        let t = |v: &[f64]| Tensor::from_slice(v, (1, n), &Device::Cpu).unwrap();
        let wt = vals(&weights_tensor(&t(&d), &t(&delta), &t(&vec![1.0; n])).unwrap());
        for (a, b) in wt.iter().zip(&w) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    check(worst <= REL_EQ, format!("100 sample lists, worst relative error {worst:.2e} (tol {REL_EQ:.0e})"))
}

fn update_oracles() -> Outcome {
    let mut rng = seed::rng(2, "acceptance-ddim", 0);
    let n = 16;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ab = rng.random_range(0.001..0.99);
        let ab_prev = rng.random_range(ab + 1e-3..1.0);
        let t0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = |v: &[f64]| Tensor::from_slice(v, n, &Device::Cpu).unwrap();
        let noisy = vals(&add_noise(&t(&t0), &t(&eps), ab).unwrap());
        let eps_hat = vals(&predict_eps(&t(&noisy), &t(&pred), ab).unwrap());
        let next = vals(&ddim_step(&t(&noisy), &t(&pred), ab, ab_prev).unwrap());
        for i in 0..n {
            let want_noisy = ab.sqrt() * t0[i] + (1.0 - ab).sqrt() * eps[i];
            let want_eps = (noisy[i] - ab.sqrt() * pred[i]) / (1.0 - ab).sqrt();
            let want_next = ab_prev.sqrt() * pred[i] + (1.0 - ab_prev).sqrt() * want_eps;
            worst = worst.max(rel_err(noisy[i], want_noisy));
            worst = worst.max(rel_err(eps_hat[i], want_eps));
            worst = worst.max(rel_err(next[i], want_next));
        }
    }
    check(worst <= REL_EQ, format!("100 tuples, worst relative error {worst:.2e} (tol {REL_EQ:.0e})"))
}

struct Perfect(Tensor);

impl Predictor for Perfect {
    fn predict(&self, x: &Tensor, _t: &[f64], _c: &[&str], _n: &[bool]) -> trigen_core::error::Result<Tensor> {
        let b = x.dim(0)?;
        let (c, h, w) = self.0.dims3()?;
        Ok(self.0.unsqueeze(0)?.broadcast_as((b, c, h, w))?.contiguous()?)
    }
}

fn trajectory_oracle() -> Outcome {
    let sched = NoiseSchedule::default();
    let mut rng = seed::rng(3, "acceptance-trajectory", 0);
    let t0 = nn::randn(&mut rng, &[6, 4, 4], DType::F64).unwrap();
    let want = vals(&t0);
    let mut errs = Vec::new();
    for k in [2usize, 10, 50] {
        let opts = SampleOptions {
            steps: k,
            guidance: 7.5,
            clip_prediction: false,
        };
        let out = sample(&Perfect(t0.clone()), &sched, (6, 4, 4), "a red sphere", opts, 9, DType::F64).map_err(|e| e.to_string())?;
        let err = vals(&out).iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        errs.push((k, err));
    }
    let ok = errs.iter().all(|&(_, e)| e <= TRAJECTORY_TOL);
    check(ok, format!("max |T - T0| by K: {errs:?} (tol {TRAJECTORY_TOL:.0e})"))
}

fn schedule_oracle() -> Outcome {
    let s = NoiseSchedule::default();
    let a = |t: f64| s.alpha(t).unwrap();
    let grid: Vec<f64> = (0..=1000).map(|i| a(i as f64 / 1000.0)).collect();
    let monotone = grid.windows(2).all(|w| w[1] < w[0]);
    let mid = (a(0.5) - 0.5).abs();
    check(
        a(0.0) == 1.0 && a(1.0) == 0.0 && monotone && mid <= MIDPOINT_TOL,
        format!("alpha(0) = {}, alpha(1) = {}, strictly decreasing on 1e-3 grid: {monotone}, |alpha(0.5) - 0.5| = {mid:.1e}", a(0.0), a(1.0)),
    )
}

fn normalization_oracle() -> Outcome {
    // dyadic data and statistics make the linear region exactly invertible
    let stats = TriplaneStats {
        mean: vec![0.5; 3],
        std: vec![2.0; 3],
        scale: NORM_SCALE,
        clamp: NORM_CLAMP,
    };
    let z: [f64; 8] = [-16.0, -15.5, -1.0, 0.0, 0.25, 8.0, 15.75, 16.0];
    let data: Vec<f32> = z.iter().cycle().take(12).map(|z| (0.5 + 2.0 * z) as f32).collect();
    let t = TriplaneField::from_vec(1, 2, data.clone()).unwrap();
    let n = stats.normalize(&t).unwrap();
    let back = stats.denormalize(&n).unwrap();
    let exact = back.data() == data.as_slice();
    let scaled = n.data().iter().zip(z.iter().cycle()).all(|(&v, &z)| v as f64 == z / 16.0);
    // beyond 16 standard deviations the value saturates at the clamp
    let over: [f64; 4] = [-40.0, -16.0625, 16.0625, 40.0];
    let data: Vec<f32> = over.iter().cycle().take(12).map(|z| (0.5 + 2.0 * z) as f32).collect();
    let n = stats.normalize(&TriplaneField::from_vec(1, 2, data).unwrap()).unwrap();
    let clamped = n.data().iter().zip(over.iter().cycle()).all(|(&v, &z)| v as f64 == z.signum());
    check(
        exact && scaled && clamped,
        format!("round trip exact on |z| <= 16: {exact}, value z/16: {scaled}, clamp at |z| > 16: {clamped}"),
    )
}

// ---- gradients ----

fn finite_difference_gradients() -> Outcome {
    let n_feat = 4;
    let res = 8;
    let mut ps = ParamStore::new(DType::F64, 21, "dec");
    let dec = FieldDecoder::new(&mut ps, n_feat, DecoderConfig::default()).map_err(|e| e.to_string())?;
    let r = Renderer::new(&dec, RenderConfig { n_coarse: 12, n_fine: 12, ..RenderConfig::default() });
    let mut rng = seed::rng(22, "acceptance-grad", 0);
    let planes = (nn::randn(&mut rng, &[1, 3 * n_feat, res, res], DType::F64).unwrap() * 0.5).unwrap();
    let target = Tensor::full(0.3f64, (1, 3, res, res), &Device::Cpu).unwrap();
    let var = Var::from_tensor(&planes).unwrap();
    let cam = CameraConfig::default().at_azimuth(0.7, res);
    // sample positions are frozen; the loss is smooth in planes and weights
    let plan = r.plan(var.as_tensor(), &[cam], 5).unwrap();
    let loss = |p: &Tensor| -> f64 {
        let rgb = r.render_planned(p, &plan, Outputs::default()).unwrap().rgb;
        vals(&(rgb - &target).unwrap().sqr().unwrap().mean_all().unwrap())[0]
    };
    let l = r.render_planned(var.as_tensor(), &plan, Outputs::default()).unwrap().rgb;
    let l = (l - &target).unwrap().sqr().unwrap().mean_all().unwrap();
    let grads = l.backward().unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;

    let g = vals(grads.get(var.as_tensor()).unwrap());
    let base = vals(&planes);
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    for &i in idx.iter().take(12) {
        let shifted = |d: f64| {
            let mut v = base.clone();
            v[i] += d;
            Tensor::from_vec(v, planes.dims(), &Device::Cpu).unwrap()
        };
        let fd = (loss(&shifted(h)) - loss(&shifted(-h))) / (2.0 * h);
        worst = worst.max(rel_err(g[i], fd));
        checked += 1;
    }

    for (_, p) in ps.vars() {
        let g = match grads.get(p.as_tensor()) {
            Some(g) => vals(g),
            None => return Err("a decoder parameter received no gradient".into()),
        };
        let base = vals(p.as_tensor());
        let shape = p.as_tensor().dims().to_vec();
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &i in idx.iter().take(3) {
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                p.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                loss(var.as_tensor())
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            p.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            worst = worst.max(rel_err(g[i], fd));
            checked += 1;
        }
    }
    check(
        worst <= GRAD_REL,
        format!("{checked} entries (triplane and decoder), worst relative error {worst:.2e} (tol {GRAD_REL:.0e})"),
    )
}

// ---- statistics ----

fn dropout_rate() -> Outcome {
    let hits = (0..DROPOUT_DRAWS)
        .filter(|&i| drop_caption(seed::split(17, "dropout", i), DROPOUT_RATE))
        .count() as f64;
    let n = DROPOUT_DRAWS as f64;
    let sigma = (n * DROPOUT_RATE * (1.0 - DROPOUT_RATE)).sqrt();
    let z = (hits - n * DROPOUT_RATE) / sigma;
    check(z.abs() <= 3.0, format!("{hits} of {n} dropped, {z:+.2} sigma"))
}

fn camera_geometry() -> Outcome {
    let scene = SceneConfig::default();
    let mut worst_r = 0.0f64;
    let mut worst_el = 0.0f64;
    for i in 0..1000 {
        let cam = scene.sample_camera(seed::split(5, "acceptance-camera", i));
        let p = cam.position;
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        worst_r = worst_r.max((r - CAMERA_RADIUS).abs());
        worst_el = worst_el.max((camera_elevation(&cam).to_degrees() - CAMERA_ELEVATION_DEG).abs());
    }
    check(
        worst_r <= 1e-12 && worst_el <= 1e-9,
        format!("1000 cameras, max radius error {worst_r:.1e}, max elevation error {worst_el:.1e} deg"),
    )
}

/// Asymptotic Kolmogorov tail with the Stephens small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

fn azimuth_uniformity() -> Outcome {
    let scene = SceneConfig::default();
    let n = 10_000;
    let mut u: Vec<f64> = (0..n)
        .map(|i| camera_azimuth(&scene.sample_camera(seed::split(6, "acceptance-azimuth", i as u64))) / (2.0 * PI))
        .collect();
    u.sort_by(f64::total_cmp);
    let d = u
        .iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).max(x - i as f64 / n as f64))
        .fold(0.0, f64::max);
    let p = ks_p_value(d, n);
    check(p > KS_P_MIN, format!("KS D = {d:.4} over {n} azimuths, p = {p:.3}"))
}

fn variance_preservation() -> Outcome {
    let sched = NoiseSchedule::default();
    let n = 100_000;
    let x0 = nn::randn(&mut seed::rng(7, "x0", 0), &[n], DType::F64).unwrap();
    let eps = nn::randn(&mut seed::rng(7, "eps", 0), &[n], DType::F64).unwrap();
    let mut worst = 0.0f64;
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let v = vals(&sched.add_noise(&x0, &eps, t).unwrap());
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        worst = worst.max((var - 1.0).abs());
    }
    check(worst <= VARIANCE_TOL, format!("unit-variance inputs, worst variance deviation {worst:.4} (tol {VARIANCE_TOL})"))
}

// ---- determinism ----

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                out.insert(p.strip_prefix(base).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn tiny_run(root: &Path, workers: usize) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let cfg = crate::root().join("configs/tiny.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_trigen"))
        .arg("--root")
        .arg(root)
        .args(["--workers", &workers.to_string(), "all", "--seed", "7", "--config"])
        .arg(&cfg)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("tiny run with {workers} workers failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(tree(root))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = tiny_run(&dir.path().join("one"), 1)?;
    let b = tiny_run(&dir.path().join("two"), 2)?;
    let samples = a.keys().filter(|p| p.starts_with("samples")).count();
    if samples == 0 {
        return Err("the tiny run wrote no samples".into());
    }
    let differing: Vec<_> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    check(
        differing.is_empty(),
        format!(
            "{} files from 1 and 2 workers, {} differ{}",
            a.len(),
            differing.len(),
            differing.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

// ---- end-to-end experiment ----

fn desk_summary() -> Result<Summary, String> {
    let path = std::env::var_os("TRIGEN_DESK_SUMMARY")
        .map(PathBuf::from)
        .unwrap_or_else(|| root().join("reports/desk/summary.json"));
    let s = fs::read_to_string(&path).map_err(|e| format!("no desk summary at {}: {e}", path.display()))?;
    serde_json::from_str(&s).map_err(|e| format!("{}: {e}", path.display()))
}

fn with_summary(f: impl Fn(&Summary) -> Outcome) -> impl Fn() -> Outcome {
    move || f(&desk_summary()?)
}

fn gan_fidelity(s: &Summary) -> Outcome {
    let ratio = s.gan.fid_low / s.gan_untrained.fid_low;
    check(
        ratio <= FID_RATIO_MAX,
        format!("FID-proxy (low) {:.2} trained vs {:.2} untrained, ratio {ratio:.3} (max {FID_RATIO_MAX})", s.gan.fid_low, s.gan_untrained.fid_low),
    )
}

fn gan_is_unconditional(s: &Summary) -> Outcome {
    let g: &EvalReport = &s.gan;
    let gap = (g.adherence_high - g.chance_high).abs();
    check(
        gap <= CHANCE_BAND,
        format!("GAN adherence {:.3} vs chance {:.3}, |gap| {gap:.3} (max {CHANCE_BAND})", g.adherence_high, g.chance_high),
    )
}

fn diffusion_adherence(s: &Summary) -> Outcome {
    let d = &s.diffusion;
    check(
        d.adherence_high >= ADHERENCE_MIN,
        format!(
            "adherence {:.3} at guidance {:?}, {:?} steps, {} prompts (min {ADHERENCE_MIN}; low-res {:.3})",
            d.adherence_high, d.guidance, d.steps, d.n, d.adherence_low
        ),
    )
}

fn guidance_gap(s: &Summary) -> Outcome {
    let gap = s.diffusion.adherence_high - s.diffusion_unguided.adherence_high;
    check(
        gap >= CFG_GAP_MIN,
        format!(
            "adherence {:.3} guided vs {:.3} unguided, gap {gap:.3} (min {CFG_GAP_MIN})",
            s.diffusion.adherence_high, s.diffusion_unguided.adherence_high
        ),
    )
}

fn view_consistency(s: &Summary) -> Outcome {
    check(
        s.view_consistency >= CONSISTENCY_MIN,
        format!("attribute agreement across views {:.3} (min {CONSISTENCY_MIN})", s.view_consistency),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters come through as arguments
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1a composite matches scalar accumulation", Box::new(composite_oracle)),
        ("1b forward, noise and DDIM updates match scalar scripts", Box::new(update_oracles)),
        ("1c perfect-denoiser DDIM recovers T0", Box::new(trajectory_oracle)),
        ("1d schedule endpoints, monotonicity, midpoint", Box::new(schedule_oracle)),
        ("1e normalization round trip and clamp at 16", Box::new(normalization_oracle)),
        ("2  render-loss gradients match finite differences", Box::new(finite_difference_gradients)),
        ("3a caption dropout rate 0.2", Box::new(dropout_rate)),
        ("3b camera radius 2.34 and elevation 40 degrees", Box::new(camera_geometry)),
        ("3c azimuth uniform (KS)", Box::new(azimuth_uniformity)),
        ("3d forward process preserves variance", Box::new(variance_preservation)),
        ("4  tiny run byte-identical across worker counts", Box::new(determinism)),
        ("5a GAN FID-proxy at most 25% of untrained", Box::new(with_summary(gan_fidelity))),
        ("5b unconditional GAN adherence at chance", Box::new(with_summary(gan_is_unconditional))),
        ("5c diffusion adherence at least 0.80", Box::new(with_summary(diffusion_adherence))),
        ("5d guidance raises adherence by at least 0.3", Box::new(with_summary(guidance_gap))),
        ("5e captions agree across views", Box::new(with_summary(view_consistency))),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    // reported, not gated
    match desk_summary() {
        Ok(s) => println!(
            "INFO  distilled FID-proxy (low) {:.2} vs GAN {:.2}, ratio {:.2} (within {DISTILLED_FID_RATIO}x: {})",
            s.diffusion.fid_low,
            s.gan.fid_low,
            s.diffusion.fid_low / s.gan.fid_low,
            s.diffusion.fid_low <= DISTILLED_FID_RATIO * s.gan.fid_low
        ),
        Err(e) => println!("INFO  distilled FID-proxy not reported: {e}"),
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
