use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use trigen_core::gan::train::{GanTrainer, TrainOptions};
use trigen_core::gan::{
    discriminator_loss, export_triplane_dataset, generator_loss, r1_penalty, train_gan, Discriminator, GanConfig,
    GanMeta, GanModels,
};
use trigen_core::nn::{self, Adam, ParamStore};
use trigen_core::renderer::RenderConfig;
use trigen_core::scenegen::{build_dataset, SceneConfig};
use trigen_core::seed;
use trigen_core::triplane::DecoderConfig;
use trigen_core::Error;

fn micro() -> GanConfig {
    GanConfig {
        z_dim: 8,
        w_dim: 16,
        mapping_layers: 1,
        n_feat: 4,
        triplane_res: 8,
        gen_channels: 8,
        decoder: DecoderConfig { hidden: 16, hidden_layers: 1 },
        render_res: 8,
        render: RenderConfig { n_coarse: 8, n_fine: 8, ..RenderConfig::default() },
        up_channels: 8,
        disc_channels: 8,
        batch: 4,
        steps: 2,
        checkpoint_every: 0,
        milepost_every: 1,
        log_every: 1,
        export_batch: 3,
        ..GanConfig::default()
    }
}

fn corpus(dir: &Path, n: usize) -> trigen_core::scenegen::Manifest {
    let cfg = SceneConfig { image_size: 16, supersample: 1, ..SceneConfig::default() };
    build_dataset(n, 3, dir, &cfg).unwrap()
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn generator_is_deterministic_with_default_shape() {
    let cfg = GanConfig::default();
    let m = GanModels::new(&cfg, 1).unwrap();
    let z = m.latents(&mut seed::rng(1, "z", 0), 2).unwrap();
    let (a, w) = m.gen.forward(&z).unwrap();
    let (b, _) = m.gen.forward(&z).unwrap();
    assert_eq!(a.dims(), &[2, 48, 64, 64]);
    assert_eq!(w.dims(), &[2, 128]);
    assert_eq!(to_vec(&a), to_vec(&b));
    // distinct latents give distinct triplanes
    let d = (a.get(0).unwrap() - a.get(1).unwrap()).unwrap().sqr().unwrap().sum_all().unwrap();
    assert!(nn::scalar(&d).unwrap() > 0.0);
}

#[test]
fn upsampler_contract() {
    let cfg = GanConfig::default();
    let m = GanModels::new(&cfg, 2).unwrap();
    let mut rng = seed::rng(2, "x", 0);
    let rgb = nn::sigmoid(&nn::randn(&mut rng, &[2, 3, 32, 32], DType::F32).unwrap()).unwrap();
    let feat = nn::randn(&mut rng, &[2, 48, 32, 32], DType::F32).unwrap();
    let w = nn::randn(&mut rng, &[2, 128], DType::F32).unwrap();
    let a = m.up.forward(&rgb, &feat, &w).unwrap();
    assert_eq!(a.dims(), &[2, 3, 64, 64]);
    assert_eq!(to_vec(&a), to_vec(&m.up.forward(&rgb, &feat, &w).unwrap()));
    // all-ones style, as used when rendering diffusion samples
    let ones = Tensor::ones((2, 128), DType::F32, &Device::Cpu).unwrap();
    let b = to_vec(&m.up.forward(&rgb, &feat, &ones).unwrap());
    assert!(b.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    // resolution mismatch
    let small = feat.narrow(2, 0, 16).unwrap();
    assert!(m.up.forward(&rgb, &small, &w).is_err());
}

#[test]
fn upsampler_starts_as_plain_upsampling() {
    let m = GanModels::new(&micro(), 4).unwrap();
    let mut rng = seed::rng(4, "x", 0);
    let rgb = nn::sigmoid(&nn::randn(&mut rng, &[1, 3, 8, 8], DType::F32).unwrap()).unwrap();
    let feat = nn::randn(&mut rng, &[1, 12, 8, 8], DType::F32).unwrap();
    let w = nn::randn(&mut rng, &[1, 16], DType::F32).unwrap();
    let a = to_vec(&m.up.forward(&rgb, &feat, &w).unwrap());
    let b = to_vec(&nn::upsample2x(&rgb).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-4));
}

#[test]
fn zero_learning_rate_leaves_state_unchanged() {
    let cfg = GanConfig { lr_g: 0.0, lr_d: 0.0, ..micro() };
    let mut t = GanTrainer::new(&cfg, 5).unwrap();
    let before: Vec<Vec<f64>> = [&t.models.ps_gen, &t.models.ps_dec, &t.models.ps_up, &t.models.ps_disc]
        .iter()
        .map(|p| p.snapshot().unwrap())
        .collect();
    let real = Tensor::ones((4, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
    let s = t.train_step(&real, 9).unwrap();
    assert!(s.r1.is_some());
    let after: Vec<Vec<f64>> = [&t.models.ps_gen, &t.models.ps_dec, &t.models.ps_up, &t.models.ps_disc]
        .iter()
        .map(|p| p.snapshot().unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn discriminator_separates_easy_batches() {
    let mut ps = ParamStore::new(DType::F32, 3, "d");
    let d = Discriminator::new(&mut ps, 3, 8, 8, 4).unwrap();
    let mut opt = Adam::new(&[&ps], 2e-3, 0.0, 0.99).unwrap();
    let batch = |k: u64, level: f64| -> Tensor {
        let n = nn::randn(&mut seed::rng(k, "noise", 0), &[8, 3, 8, 8], DType::F32).unwrap();
        ((n * 0.05).unwrap() + level).unwrap()
    };
    let accuracy = |k: u64| -> f64 {
        let r = to_vec(&d.forward(&batch(k, 0.8)).unwrap());
        let f = to_vec(&d.forward(&batch(k + 1, 0.2)).unwrap());
        (r.iter().filter(|&&v| v > 0.0).count() + f.iter().filter(|&&v| v < 0.0).count()) as f64 / 16.0
    };
    let mut acc = accuracy(10_000);
    let mut step = 0;
    while acc < 1.0 && step < 200 {
        let loss = discriminator_loss(&d.forward(&batch(2 * step, 0.8)).unwrap(), &d.forward(&batch(2 * step + 1, 0.2)).unwrap()).unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        step += 1;
        acc = accuracy(10_000);
    }
    assert_eq!(acc, 1.0, "accuracy {acc} after {step} steps");
}

#[test]
fn r1_of_constant_discriminator_is_zero() {
    let mut ps = ParamStore::new(DType::F32, 3, "d");
    let d = Discriminator::new(&mut ps, 3, 8, 8, 4).unwrap();
    for (_, v) in ps.vars() {
        v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
    }
    ps.get("disc.out.bias").unwrap().set(&Tensor::new(&[0.7f32], &Device::Cpu).unwrap()).unwrap();
    let real = nn::randn(&mut seed::rng(1, "x", 0), &[4, 3, 8, 8], DType::F32).unwrap();
    let pen = nn::with_second_order(|| nn::scalar(&r1_penalty(&d, &real).unwrap()).unwrap());
    assert_eq!(pen, 0.0);
}

#[test]
fn r1_gradient_matches_finite_differences() {
    let mut ps = ParamStore::new(DType::F64, 8, "d");
    let d = Discriminator::new(&mut ps, 3, 8, 4, 2).unwrap();
    let real = nn::randn(&mut seed::rng(1, "x", 0), &[2, 3, 8, 8], DType::F64).unwrap();
    let var = ps.get("disc.b8.conv0.weight").unwrap().clone();
    let analytic = nn::with_second_order(|| {
        let pen = r1_penalty(&d, &real).unwrap();
        to_vec(pen.backward().unwrap().get(var.as_tensor()).unwrap())
    });
    let base = to_vec(var.as_tensor());
    let shape = var.dims().to_vec();
    let eval = |vals: Vec<f64>| -> f64 {
        var.set(&Tensor::from_vec(vals, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        nn::with_second_order(|| nn::scalar(&r1_penalty(&d, &real).unwrap()).unwrap())
    };
    let mut idx: Vec<usize> = (0..base.len()).collect();
    idx.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
    let h = 1e-5;
    for &i in idx.iter().take(5) {
        let mut p = base.clone();
        p[i] += h;
        let mut m = base.clone();
        m[i] -= h;
        let fd = (eval(p) - eval(m)) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / analytic[i].abs();
        assert!(rel < 1e-3, "entry {i}: {} vs {fd}", analytic[i]);
    }
}

#[test]
fn generator_loss_gradient_matches_finite_differences() {
    // 8² render, n_feat 4; a fixed sample plan keeps the loss smooth in θ
    let cfg = GanConfig {
        render: RenderConfig { n_coarse: 12, n_fine: 0, density_scale: 3.0, jitter: false, ..RenderConfig::default() },
        ..micro()
    };
    let m = GanModels::with_dtype(&cfg, 6, DType::F64).unwrap();
    let z = m.latents(&mut seed::rng(6, "z", 0), 2).unwrap();
    let cams = m.sample_cameras(&mut seed::rng(6, "c", 0), 2);
    let loss = || -> Tensor {
        let f = m.fake(&z, &cams, 0, false).unwrap();
        generator_loss(&m.disc.forward(&m.disc_input_fake(&f).unwrap()).unwrap()).unwrap()
    };
    let grads = loss().backward().unwrap();
    let h = 1e-5;
    let mut checked = 0;
    for name in ["synthesis.to_planes.conv.weight", "synthesis.b8.conv1.conv.weight", "mapping.fc0.weight", "synthesis.const"] {
        let var: Var = m.ps_gen.get(name).unwrap().clone();
        let g = to_vec(grads.get(var.as_tensor()).unwrap());
        let base = to_vec(var.as_tensor());
        let shape = var.dims().to_vec();
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &i in idx.iter().take(3) {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                nn::scalar(&loss()).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-12);
            assert!(rel < 5e-2, "{name}[{i}]: analytic {} fd {fd}", g[i]);
            checked += 1;
        }
    }
    assert_eq!(checked, 12);
}

#[test]
fn non_finite_loss_reports_step() {
    let mut t = GanTrainer::new(&micro(), 5).unwrap();
    let v = t.models.ps_gen.get("synthesis.const").unwrap();
    v.set(&(v.as_tensor() * f64::NAN).unwrap()).unwrap();
    let real = Tensor::ones((4, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
    match t.train_step(&real, 1) {
        Err(Error::NonFinite { step, which }) => {
            assert_eq!(step, 0);
            assert_eq!(which, "loss_D");
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoint_resumes_identically() {
    let data = tempfile::tempdir().unwrap();
    let man = corpus(data.path(), 12);
    let cfg = micro();
    let straight = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let meta = train_gan(&man, &cfg, 4, straight.path(), &TrainOptions::default()).unwrap();
    assert_eq!(meta.step, 2);
    let first = train_gan(&man, &cfg, 4, split.path(), &TrainOptions { stop_at: Some(1), ..Default::default() }).unwrap();
    assert_eq!(first.step, 1);
    let resumed = train_gan(&man, &cfg, 4, split.path(), &TrainOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(resumed.step, 2);
    let (a, _) = GanTrainer::load(straight.path()).unwrap();
    let (b, _) = GanTrainer::load(split.path()).unwrap();
    for (x, y) in [
        (&a.models.ps_gen, &b.models.ps_gen),
        (&a.models.ps_dec, &b.models.ps_dec),
        (&a.models.ps_up, &b.models.ps_up),
        (&a.models.ps_disc, &b.models.ps_disc),
    ] {
        assert_eq!(x.snapshot().unwrap(), y.snapshot().unwrap());
    }
    assert_eq!(a.curve, b.curve);
    let meta = GanMeta::read(straight.path()).unwrap();
    assert_eq!(meta.mileposts, vec![0, 1, 2]);
    assert!(GanMeta::milepost_dir(straight.path(), 0).join("generator.safetensors").exists());
    assert!(!straight.path().join("meta.json.tmp").exists());
}

#[test]
fn missing_corpus_file_is_reported() {
    let data = tempfile::tempdir().unwrap();
    let man = corpus(data.path(), 4);
    fs::remove_file(man.image_path(2)).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = train_gan(&man, &micro(), 1, out.path(), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Item { index: 2, .. }), "{err}");
}

#[test]
fn export_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    let man = corpus(data.path(), 8);
    let ckpt = tempfile::tempdir().unwrap();
    let cfg = GanConfig { steps: 1, ..micro() };
    train_gan(&man, &cfg, 2, ckpt.path(), &TrainOptions::default()).unwrap();

    let empty = tempfile::tempdir().unwrap();
    let m = export_triplane_dataset(ckpt.path(), 0, 1, empty.path(), "").unwrap();
    assert!(m.records.is_empty());
    assert_eq!(fs::read(&m.path).unwrap(), b"");

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = export_triplane_dataset(ckpt.path(), 7, 11, a.path(), "h").unwrap();
    export_triplane_dataset(ckpt.path(), 7, 11, b.path(), "h").unwrap();
    assert_eq!(ma.records.len(), 7);
    for r in &ma.records {
        assert_eq!(fs::read(a.path().join(&r.triplane_path)).unwrap(), fs::read(b.path().join(&r.triplane_path)).unwrap());
        assert!(a.path().join(&r.render_path).exists());
        let t = trigen_core::triplane::TriplaneField::read(&a.path().join(&r.triplane_path)).unwrap();
        assert_eq!(t.shape(), (12, 8, 8));
    }
    assert_eq!(fs::read(a.path().join("triplanes.jsonl")).unwrap(), fs::read(b.path().join("triplanes.jsonl")).unwrap());
    assert!(a.path().join("stats.json").exists());
}
