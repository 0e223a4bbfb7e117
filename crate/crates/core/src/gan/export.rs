use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::train::{GanMeta, META_FILE};
use super::GanModels;
use crate::artifact;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::Camera;
use crate::seed;
use crate::triplane::{TriplaneField, TriplaneStats};

pub const MANIFEST_NAME: &str = "triplanes.jsonl";
pub const STATS_NAME: &str = "stats.json";
pub const EXPORT_META: &str = "export.json";

/// One exported generator sample. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriplaneRecord {
    pub triplane_path: String,
    pub render_path: String,
    pub camera: Camera,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportMeta {
    pub kind: String,
    pub format_version: u32,
    pub n: usize,
    pub seed: u64,
    pub n_feat: usize,
    pub res: usize,
    /// Source checkpoint metadata, relative to the export directory.
    pub checkpoint: String,
    pub run_hash: String,
    pub stats: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TriplaneManifest {
    pub path: PathBuf,
    pub records: Vec<TriplaneRecord>,
}

impl TriplaneManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            records: artifact::read_jsonl(path)?,
        })
    }

    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn triplane(&self, i: usize) -> Result<TriplaneField> {
        TriplaneField::read(&self.dir().join(&self.records[i].triplane_path))
    }
}

/// Samples `n` triplanes from the generator in `ckpt`, renders each from a
/// corpus-distributed viewpoint, and writes files, manifest and the
/// per-channel statistics sidecar to `out_dir`.
pub fn export_triplane_dataset(ckpt: &Path, n: usize, seed: u64, out_dir: &Path, run_hash: &str) -> Result<TriplaneManifest> {
    let meta = GanMeta::read(ckpt)?;
    let models = GanModels::new(&meta.config, meta.seed)?;
    models.load_inference(ckpt)?;
    export_from_models(&models, n, seed, out_dir, &artifact::link(out_dir, &ckpt.join(META_FILE))?, run_hash)
}

pub fn item_seed(seed: u64, i: usize) -> u64 {
    seed::split(seed, "export", i as u64)
}

pub fn export_from_models(
    models: &GanModels,
    n: usize,
    seed: u64,
    out_dir: &Path,
    checkpoint: &str,
    run_hash: &str,
) -> Result<TriplaneManifest> {
    let cfg = &models.cfg;
    artifact::create_dir(&out_dir.join("triplanes"))?;
    artifact::create_dir(&out_dir.join("renders"))?;
    let mut records = Vec::with_capacity(n);
    let mut fields = Vec::with_capacity(n);
    for start in (0..n).step_by(cfg.export_batch) {
        let idx: Vec<usize> = (start..(start + cfg.export_batch).min(n)).collect();
        let seeds: Vec<u64> = idx.iter().map(|&i| item_seed(seed, i)).collect();
        let z = Tensor::cat(
            &seeds
                .iter()
                .map(|&s| models.latents(&mut seed::rng(s, "z", 0), 1))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let cams: Vec<Camera> = seeds.iter().map(|&s| cfg.camera.sample(s, cfg.render_res)).collect();
        let (planes, w) = models.gen.forward(&z)?;
        let (_, _, high) = models.render(&planes, &w, &cams, seed::split(seed, "export-render", start as u64), false)?;
        for (k, &i) in idx.iter().enumerate() {
            let rec = TriplaneRecord {
                triplane_path: format!("triplanes/{i:06}.tri"),
                render_path: format!("renders/{i:06}.png"),
                camera: cams[k],
                seed: seeds[k],
            };
            let field = TriplaneField::from_tensor(&planes.get(k)?).map_err(|e| Error::Item { index: i, source: Box::new(e) })?;
            let write = field
                .write(&out_dir.join(&rec.triplane_path))
                .and_then(|_| Image::from_tensor(&high.get(k)?)?.write_png(&out_dir.join(&rec.render_path)));
            write.map_err(|e| Error::Item { index: i, source: Box::new(e) })?;
            fields.push(field);
            records.push(rec);
        }
        log::debug!("exported {} / {n} triplanes", records.len());
    }
    let stats = if fields.is_empty() {
        None
    } else {
        let s = TriplaneStats::compute(fields.iter())?;
        s.write(&out_dir.join(STATS_NAME))?;
        Some(STATS_NAME.to_string())
    };
    let path = out_dir.join(MANIFEST_NAME);
    artifact::write_jsonl(&path, &records)?;
    artifact::write_json(
        &out_dir.join(EXPORT_META),
        &ExportMeta {
            kind: "triplane-export".into(),
            format_version: 1,
            n,
            seed,
            n_feat: cfg.n_feat,
            res: cfg.triplane_res,
            checkpoint: checkpoint.to_string(),
            run_hash: run_hash.to_string(),
            stats,
        },
    )?;
    Ok(TriplaneManifest { path, records })
}
