use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::analytic::render_scene_analytic;
use super::caption::make_caption;
use super::scene::sample_scene;
use super::SceneConfig;
use crate::artifact;
use crate::error::{Error, Result};
use crate::renderer::Camera;
use crate::seed;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// One line of the image manifest. `image_path` is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_path: String,
    pub caption: String,
    pub spec: super::SceneSpec,
    pub camera: Camera,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.dir().join(&self.records[i].image_path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
        })
    }
}

/// Everything about item `index` is a function of (master seed, index).
pub fn make_record(index: usize, master_seed: u64, cfg: &SceneConfig) -> (ImageRecord, super::SceneSpec) {
    let item_seed = seed::split(master_seed, "item", index as u64);
    let spec = sample_scene(item_seed, &cfg.vocab);
    let camera = cfg.camera.sample(item_seed, cfg.image_size);
    let caption = make_caption(&spec, item_seed, cfg.caption_drop_rate);
    let rec = ImageRecord {
        image_path: format!("images/{index:06}.png"),
        caption,
        spec: spec.clone(),
        camera,
        seed: item_seed,
    };
    (rec, spec)
}

/// Writes `n_images` renders plus a JSONL manifest into `out_dir`.
pub fn build_dataset(n_images: usize, master_seed: u64, out_dir: &Path, cfg: &SceneConfig) -> Result<Manifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let records = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let (rec, spec) = make_record(i, master_seed, cfg);
            let img = render_scene_analytic(&spec, &rec.camera, cfg.supersample)
                .and_then(|img| img.write_png(&out_dir.join(&rec.image_path)).map(|_| ()));
            img.map(|_| rec).map_err(|e| Error::Item {
                index: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = out_dir.join(MANIFEST_NAME);
    artifact::write_jsonl(&path, &records)?;
    Ok(Manifest { path, records })
}
