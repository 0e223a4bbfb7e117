use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stages::{self, CaptionRecord, Layout, RunRecord, SampleRecord, StageStamp};
use crate::artifact;
use crate::diffusion::{train as dtrain, DiffusionMeta};
use crate::gan::{self, export, GanMeta};
use crate::perception::{classifier as clf, EvalReport};
use crate::scenegen::{dataset, Manifest};
use crate::triplane::{TriplaneField, TriplaneStats};

const PNG_MAGIC: [u8; 8] = [0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checked_files: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn fail(&mut self, path: &Path, reason: impl Into<String>) {
        self.violations.push(Violation {
            path: path.to_path_buf(),
            reason: reason.into(),
        });
    }

    /// Records the error of `r`, if any; returns the value otherwise.
    fn check<T>(&mut self, path: &Path, r: crate::Result<T>) -> Option<T> {
        self.checked_files += 1;
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.fail(path, e.to_string());
                None
            }
        }
    }

    fn png(&mut self, path: &Path) {
        self.checked_files += 1;
        match fs::read(path) {
            Ok(b) if b.len() > 8 && b[..8] == PNG_MAGIC => {}
            Ok(_) => self.fail(path, "not a PNG file"),
            Err(e) => self.fail(path, format!("unreadable: {e}")),
        }
    }

    fn triplane(&mut self, path: &Path) {
        self.check(path, TriplaneField::read(path));
    }

    fn safetensors(&mut self, path: &Path) {
        self.checked_files += 1;
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) => return self.fail(path, format!("unreadable: {e}")),
        };
        let ok = bytes.len() >= 8 && {
            let n = u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes")) as usize;
            bytes.len() >= 8 + n && bytes.get(8) == Some(&b'{')
        };
        if !ok {
            self.fail(path, "truncated or malformed safetensors header");
        }
    }
}

/// Checks file magics, manifest links, config-hash consistency across
/// stages and the presence of the statistics sidecar under `root`.
/// Stages that have not run are skipped; stages that ran are checked fully.
pub fn validate_artifacts(root: &Path) -> ValidationReport {
    let mut r = ValidationReport::default();
    let l = Layout::new(root);
    let run_path = root.join(stages::RUN_FILE);
    let hash = match r.check(&run_path, artifact::read_json::<RunRecord>(&run_path)) {
        Some(run) => {
            match run.config.hash() {
                Ok(h) if h == run.config_hash => {}
                _ => r.fail(&run_path, "recorded hash does not match the recorded config"),
            }
            Some(run.config_hash)
        }
        None => None,
    };
    // captions, samples and reports can also come from config-free
    // subcommands, which leave no stamp; every other stage must have one
    let stamp_optional = |dir: &Path| [l.captions(), l.samples(), l.eval()].iter().any(|d| d == dir);
    let stage = |r: &mut ValidationReport, dir: &Path| -> bool {
        if !dir.exists() {
            return false;
        }
        let p = dir.join(stages::STAGE_FILE);
        if stamp_optional(dir) && !p.exists() {
            return true;
        }
        if let Some(s) = r.check(&p, StageStamp::read(dir)) {
            if hash.as_ref().is_some_and(|h| *h != s.config_hash) {
                r.fail(&p, "config hash differs from the run's");
            }
            for input in &s.inputs {
                let d = root.join(input);
                if !d.join(stages::STAGE_FILE).exists() && !(stamp_optional(&d) && d.exists()) {
                    r.fail(&p, format!("input stage {input:?} is missing or incomplete"));
                }
            }
        }
        true
    };

    for dir in [l.data(), l.classifier_data()] {
        if stage(&mut r, &dir) {
            let mp = dir.join(dataset::MANIFEST_NAME);
            if let Some(m) = r.check(&mp, Manifest::read(&mp)) {
                for i in 0..m.records.len() {
                    r.png(&m.image_path(i));
                }
            }
        }
    }

    if stage(&mut r, &l.classifier()) {
        let d = l.classifier();
        r.check(&d.join(clf::META_FILE), artifact::read_json::<clf::ClassifierMeta>(&d.join(clf::META_FILE)));
        r.safetensors(&d.join(clf::MODEL_FILE));
    }

    if stage(&mut r, &l.gan()) {
        let d = l.gan();
        if let Some(meta) = r.check(&d.join(gan::train::META_FILE), GanMeta::read(&d)) {
            if hash.as_ref().is_some_and(|h| *h != meta.run_hash) {
                r.fail(&d.join(gan::train::META_FILE), "run hash differs from the run's config hash");
            }
            if !stages::resolve(&d, &meta.corpus).exists() {
                r.fail(&d.join(gan::train::META_FILE), "linked corpus manifest does not exist");
            }
            for f in [gan::GEN_FILE, gan::DEC_FILE, gan::UP_FILE, gan::DISC_FILE] {
                r.safetensors(&d.join(f));
            }
            for &s in &meta.mileposts {
                let mp = GanMeta::milepost_dir(&d, s);
                for f in [gan::GEN_FILE, gan::DEC_FILE, gan::UP_FILE] {
                    r.safetensors(&mp.join(f));
                }
            }
        }
    }

    if stage(&mut r, &l.triplanes()) {
        let d = l.triplanes();
        let mp = d.join(export::MANIFEST_NAME);
        if let Some(m) = r.check(&mp, export::TriplaneManifest::read(&mp)) {
            for rec in &m.records {
                r.triplane(&d.join(&rec.triplane_path));
                r.png(&d.join(&rec.render_path));
            }
        }
        let sp = d.join(export::STATS_NAME);
        if sp.exists() {
            r.check(&sp, TriplaneStats::read(&sp));
        } else {
            r.fail(&sp, "statistics sidecar is missing");
        }
        let ep = d.join(export::EXPORT_META);
        if let Some(meta) = r.check(&ep, artifact::read_json::<export::ExportMeta>(&ep)) {
            if hash.as_ref().is_some_and(|h| *h != meta.run_hash) {
                r.fail(&ep, "run hash differs from the run's config hash");
            }
            if !stages::resolve(&d, &meta.checkpoint).exists() {
                r.fail(&ep, "linked source checkpoint does not exist");
            }
        }
    }

    if stage(&mut r, &l.captions()) {
        let cp = l.captions().join(stages::CAPTIONS_NAME);
        let manifest = export::TriplaneManifest::read(&l.triplanes().join(export::MANIFEST_NAME)).ok();
        if let Some(recs) = r.check(&cp, artifact::read_jsonl::<CaptionRecord>(&cp)) {
            let linked = |c: &CaptionRecord| {
                manifest
                    .as_ref()
                    .and_then(|m| m.records.get(c.index))
                    .is_some_and(|t| t.triplane_path == c.triplane_path)
            };
            if let Some(bad) = recs.iter().find(|c| !linked(c)) {
                r.fail(&cp, format!("caption {} does not link to an exported triplane", bad.index));
            }
        }
    }

    if stage(&mut r, &l.diffusion()) {
        let d = l.diffusion();
        let meta_path = d.join(dtrain::META_FILE);
        if let Some(meta) = r.check(&meta_path, DiffusionMeta::read(&d)) {
            if hash.as_ref().is_some_and(|h| *h != meta.run_hash) {
                r.fail(&meta_path, "run hash differs from the run's config hash");
            }
            r.safetensors(&d.join(dtrain::MODEL_FILE));
            let sp = stages::resolve(&d, &meta.stats);
            if !sp.exists() {
                r.fail(&meta_path, format!("statistics sidecar {} does not exist", sp.display()));
            } else if let Some(s) = r.check(&sp, TriplaneStats::read(&sp)) {
                if artifact::content_hash(&s).ok().as_deref() != Some(meta.stats_hash.as_str()) {
                    r.fail(&sp, "statistics hash differs from the one recorded by the checkpoint");
                }
            }
            if !stages::resolve(&d, &meta.gan_checkpoint).join(gan::train::META_FILE).exists() {
                r.fail(&meta_path, "linked stage-one checkpoint does not exist");
            }
        }
    }

    if stage(&mut r, &l.samples()) {
        let d = l.samples();
        let sp = d.join(stages::SAMPLES_NAME);
        if let Some(recs) = r.check(&sp, artifact::read_jsonl::<SampleRecord>(&sp)) {
            for rec in &recs {
                r.triplane(&d.join(&rec.triplane_path));
                r.png(&d.join(&rec.render_path));
            }
        }
    }

    if stage(&mut r, &l.eval()) {
        let sp = l.eval().join(stages::SUMMARY_NAME);
        if l.eval().join(stages::STAGE_FILE).exists() || sp.exists() {
            r.check(&sp, artifact::read_json::<stages::Summary>(&sp));
        }
        for e in fs::read_dir(l.eval()).into_iter().flatten().flatten() {
            let p = e.path();
            let is_report = p.extension().is_some_and(|x| x == "json") && p != sp && !p.ends_with(stages::STAGE_FILE);
            if is_report {
                r.check(&p, EvalReport::read(&p));
            }
        }
    }
    r
}
