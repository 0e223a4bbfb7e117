use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use trigen_core::artifact;
use trigen_core::perception::PromptRecord;
use trigen_core::pipeline::{self, stages, Layout, RunConfig};

/// Triplane GAN to text-conditioned triplane diffusion, at desk scale.
///
/// Every stage reads and writes under an artifact root (--root, or the
/// TRIGEN_ARTIFACTS environment variable, or ./artifacts). Stage paths
/// default to fixed subdirectories of the root and can be overridden.
#[derive(Parser, Debug)]
#[command(name = "trigen", version, about, long_about = None)]
struct Cli {
    /// Artifact root directory.
    #[arg(long, global = true, env = pipeline::ARTIFACTS_ENV, default_value = "artifacts")]
    root: PathBuf,
    /// Worker threads for data-parallel work (default: all cores). Results
    /// do not depend on this value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Run configuration (TOML); omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the labeled synthetic image corpus.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory [default: <root>/data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the attribute classifier on its own labeled corpus.
    TrainClassifier {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory [default: <root>/classifier].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the triplane GAN on the image corpus.
    TrainGan {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Corpus directory [default: <root>/data].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory [default: <root>/gan].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in --out if present.
        #[arg(long)]
        resume: bool,
    },
    /// Sample triplanes from a trained generator, with statistics sidecar.
    ExportTriplanes {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// GAN checkpoint [default: <root>/gan].
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Output directory [default: <root>/triplanes].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Caption exported triplanes with the attribute classifier.
    Caption {
        /// GAN checkpoint whose decoder renders the triplanes.
        #[arg(long)]
        ckpt: PathBuf,
        /// Exported triplane directory.
        #[arg(long)]
        triplanes: PathBuf,
        /// Output captions file (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Classifier directory [default: <root>/classifier].
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the text-conditioned triplane diffusion model.
    TrainDiffusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Exported triplane directory [default: <root>/triplanes].
        #[arg(long)]
        triplanes: Option<PathBuf>,
        /// Captions file [default: <root>/captions/captions.jsonl].
        #[arg(long)]
        captions: Option<PathBuf>,
        /// Stage-one checkpoint used for decoding [default: <root>/gan].
        #[arg(long)]
        gan: Option<PathBuf>,
        /// Checkpoint directory [default: <root>/diffusion].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Sample triplanes for text prompts and render them.
    Sample {
        /// Diffusion checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt in the caption template; repeatable.
        #[arg(long = "prompt", required = true)]
        prompts: Vec<String>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampling steps [default: the checkpoint's].
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance scale [default: the checkpoint's].
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Render a stored triplane with a stage-one decoder and upsampler.
    Render {
        /// GAN checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Triplane file.
        #[arg(long)]
        triplane: PathBuf,
        /// Camera azimuth in degrees.
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a GAN or diffusion checkpoint: fidelity and prompt adherence.
    Eval {
        /// GAN or diffusion checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Prompt set (JSONL of prompt records).
        #[arg(long)]
        prompts: PathBuf,
        /// Output report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Classifier directory [default: <root>/classifier].
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Reference corpus [default: <root>/data].
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Milepost directory holding the weights to evaluate instead.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 2000)]
        n_reference: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 7.5)]
        guidance: f64,
    },
    /// Write a held-out prompt set for evaluation.
    Prompts {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage end to end, skipping stages already complete.
    All {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check the artifacts under the root for integrity.
    Validate,
}

fn or_default(p: &Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.clone().unwrap_or(default)
}

fn run(cli: Cli) -> Result<()> {
    let l = Layout::new(&cli.root);
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            stages::write_run(&l, &cfg)?;
            let m = stages::gen_data(&cfg, &or_default(&out, l.data()))?;
            println!("{}", m.path.display());
        }
        Command::TrainClassifier { cfg, out } => {
            let cfg = cfg.load()?;
            stages::write_run(&l, &cfg)?;
            stages::train_classifier(&cfg, &l.classifier_data(), &or_default(&out, l.classifier()))?;
        }
        Command::TrainGan { cfg, data, out, resume } => {
            let cfg = cfg.load()?;
            stages::write_run(&l, &cfg)?;
            let m = stages::train_gan(&cfg, &or_default(&data, l.data()), &or_default(&out, l.gan()), resume)?;
            println!("trained to step {}", m.step);
        }
        Command::ExportTriplanes { cfg, ckpt, out } => {
            let cfg = cfg.load()?;
            let m = stages::export_triplanes(&cfg, &or_default(&ckpt, l.gan()), &or_default(&out, l.triplanes()))?;
            println!("{}", m.path.display());
        }
        Command::Caption {
            ckpt,
            triplanes,
            out,
            classifier,
            seed,
        } => {
            let recs = stages::caption(&ckpt, &or_default(&classifier, l.classifier()), &triplanes, &out, seed)?;
            println!("{} captions", recs.len());
        }
        Command::TrainDiffusion {
            cfg,
            triplanes,
            captions,
            gan,
            out,
            resume,
        } => {
            let cfg = cfg.load()?;
            let m = stages::train_diffusion(
                &cfg,
                &or_default(&triplanes, l.triplanes()),
                &or_default(&captions, l.captions().join(stages::CAPTIONS_NAME)),
                &or_default(&gan, l.gan()),
                &or_default(&out, l.diffusion()),
                resume,
            )?;
            println!("trained to step {}", m.step);
        }
        Command::Sample {
            ckpt,
            prompts,
            out,
            seed,
            steps,
            guidance,
        } => {
            let meta = trigen_core::diffusion::DiffusionMeta::read(&ckpt)?;
            let steps = steps.unwrap_or(meta.config.sample_steps);
            let guidance = guidance.unwrap_or(meta.config.guidance);
            let recs = stages::sample(&ckpt, &prompts, seed, steps, guidance, &out)?;
            for r in recs {
                println!("{}\t{}", r.render_path, r.prompt);
            }
        }
        Command::Render {
            ckpt,
            triplane,
            azimuth,
            out,
        } => stages::render(&ckpt, &triplane, azimuth, &out)?,
        Command::Eval {
            ckpt,
            prompts,
            out,
            classifier,
            corpus,
            models,
            n,
            n_reference,
            seed,
            steps,
            guidance,
        } => {
            let inputs = stages::EvalInputs::load(
                &or_default(&classifier, l.classifier()),
                &or_default(&corpus, l.data()),
                n_reference,
                &prompts,
            )?;
            let report = stages::evaluate(&inputs, &ckpt, models.as_deref(), n, seed, steps, guidance)?;
            report.write(&out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Prompts { cfg, n, out } => {
            let cfg = cfg.load()?;
            let recs: Vec<PromptRecord> = trigen_core::perception::make_prompts(
                n.unwrap_or(cfg.eval.n_prompts),
                stages::stage_seed(&cfg, "prompts"),
                &cfg.data.scene.vocab,
            );
            artifact::write_jsonl(&out, &recs)?;
        }
        Command::All { cfg } => {
            let cfg = cfg.load()?;
            let s = pipeline::run_all(&cfg, &l)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Validate => {
            if !cli.root.exists() {
                bail!("artifact root {} does not exist", cli.root.display());
            }
            let r = pipeline::validate_artifacts(&cli.root);
            for v in &r.violations {
                println!("{}\t{}", v.path.display(), v.reason);
            }
            if !r.is_clean() {
                bail!("{} violation(s) in {} checked files", r.violations.len(), r.checked_files);
            }
            println!("ok: {} files checked", r.checked_files);
        }
    }
    Ok(())
}

fn subcommand_name(c: &Command) -> String {
    let debug = format!("{c:?}");
    let name = debug.split([' ', '{']).next().unwrap_or_default();
    let mut out = String::new();
    for (i, ch) in name.chars().enumerate() {
        if ch.is_uppercase() && i > 0 {
            out.push('-');
        }
        out.push(ch.to_ascii_lowercase());
    }
    out
}

fn one_line(e: &anyhow::Error) -> String {
    format!("{e:#}").replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if w == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(2);
        }
        // read by both the rayon pool and candle's matrix kernels
        std::env::set_var("RAYON_NUM_THREADS", w.to_string());
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cmd = subcommand_name(&cli.command);
    match run(cli).with_context(|| cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
