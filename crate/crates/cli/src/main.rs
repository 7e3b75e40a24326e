//! `parttex` command-line entry point.
//!
//! Every command writes a line-delimited JSON report to `--out` (when it
//! produces one) and a short human summary to standard output. Validation
//! failures exit with status 1, a non-finite training loss with status 2.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use parttex::data::{generate_synthetic, DatasetManifest, SynthSpec};
use parttex::formats::{Config, FeatureFile};
use parttex::gradsuite::{run_suite, SUITE_TOLERANCE};
use parttex::metrics::evaluate_multilabel;
use parttex::model::Model;
use parttex::retrieval::{
    extract_part_features, recommend_by_parts, recommendation_precision, topk_accuracy, GalleryIndex,
    ImageFeatures, RetrievalMode,
};
use parttex::train::{load_samples, train};

#[derive(Parser)]
#[command(name = "parttex", version, about = "Part-aware texture attention: training, evaluation and retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report file or output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Mode {
    #[default]
    Whole,
    Parts,
}

impl From<Mode> for RetrievalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Whole => RetrievalMode::Whole,
            Mode::Parts => RetrievalMode::Parts,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every operator and of a toy model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Writes a seeded synthetic texture dataset to --out.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 256)]
        count: usize,
    },
    /// Trains a model; checkpoints and the step log go to --out.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Multi-label metrics of a checkpoint on a manifest.
    EvalClassify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Extracts per-step and whole-image features into a feature file.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Builds and validates a gallery index from a feature file.
    Index {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
        /// Gallery manifest providing item ids and labels.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Nearest gallery images for every query.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t)]
        mode: Mode,
        /// Keep a query's own image among its neighbors.
        #[arg(long)]
        allow_self: bool,
    },
    /// Part-grouped recommendations for every query.
    Recommend {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Gallery manifest: vocabulary and labels.
        #[arg(long)]
        manifest: PathBuf,
        /// Query manifest; enables the precision summary.
        #[arg(long)]
        query_manifest: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        allow_self: bool,
    },
    /// Top-k retrieval accuracy for k = 1..50.
    EvalRetrieval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        query: PathBuf,
        /// Gallery manifest with item ids.
        #[arg(long)]
        manifest: PathBuf,
        /// Query manifest; defaults to the gallery manifest.
        #[arg(long)]
        query_manifest: Option<PathBuf>,
        /// Cutoff highlighted in the summary.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t)]
        mode: Mode,
        #[arg(long)]
        allow_self: bool,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut c = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        c.run.seed = s;
    }
    Ok(c)
}

fn require<'a>(flag: Option<&'a PathBuf>, fallback: Option<&'a PathBuf>, what: &str) -> Result<&'a Path> {
    flag.or(fallback)
        .map(PathBuf::as_path)
        .ok_or_else(|| anyhow!(parttex::Error::Config(format!("{what} is required"))))
}

/// Writes JSON lines to `path`.
fn write_report(path: Option<&Path>, lines: &[serde_json::Value]) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for l in lines {
        writeln!(f, "{l}").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn load_features(path: &Path) -> Result<FeatureFile> {
    Ok(FeatureFile::load(path)?)
}

fn gallery_index(features: FeatureFile, manifest: Option<&DatasetManifest>) -> Result<GalleryIndex> {
    let mut items = HashMap::new();
    let mut labels = HashMap::new();
    if let Some(m) = manifest {
        for r in &m.records {
            items.insert(r.image_id.clone(), r.item().to_string());
            labels.insert(r.image_id.clone(), m.label_indices(r));
        }
    }
    Ok(GalleryIndex::build(features.records, items, labels)?)
}

fn load_model(config: &Config, checkpoint: Option<&PathBuf>) -> Result<Model> {
    let path = require(checkpoint, config.checkpoint.as_ref(), "--checkpoint")?;
    Ok(Model::from_checkpoint(config.run.model, path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gradcheck { common } => {
            let seed = load_config(&common)?.run.seed;
            let entries = run_suite(seed)?;
            let mut lines = Vec::new();
            for e in &entries {
                println!(
                    "{:<20} max rel err {:.3e}  checked {:>5}  skipped {:>4}  {}",
                    e.name,
                    e.max_relative_error,
                    e.checked,
                    e.skipped,
                    if e.passes() { "ok" } else { "FAIL" }
                );
                lines.push(json!({"operator": e.name, "max_relative_error": e.max_relative_error,
                    "checked": e.checked, "skipped": e.skipped, "pass": e.passes()}));
            }
            write_report(common.out.as_deref(), &lines)?;
            if !entries.iter().all(|e| e.passes()) {
                bail!(parttex::Error::Invalid(format!(
                    "gradient check exceeded tolerance {SUITE_TOLERANCE:e}"
                )));
            }
        }
        Command::SynthData { common, count } => {
            let c = load_config(&common)?;
            let out = require(common.out.as_ref(), None, "--out")?;
            let spec = SynthSpec {
                height: c.run.model.backbone.input_height,
                width: c.run.model.backbone.input_width,
                seed: c.run.seed,
                ..Default::default()
            };
            let data = generate_synthetic(&spec, count)?;
            let m = data.write(out)?;
            println!(
                "wrote {} images ({}x{}) and manifest.jsonl to {}",
                m.len(),
                spec.width,
                spec.height,
                out.display()
            );
        }
        Command::Train { common, manifest } => {
            let c = load_config(&common)?;
            let mpath = require(manifest.as_ref(), c.train_manifest.as_ref(), "--manifest")?;
            let out = require(common.out.as_ref(), c.output_dir.as_ref(), "--out")?;
            let m = DatasetManifest::load(mpath)?;
            let samples = load_samples(&m, &c.run.model)?;
            let result = train(c.run, &samples, Some(out))?;
            let last = result.epoch_losses.last().copied().unwrap_or_default();
            println!(
                "trained {} epochs ({} steps); final epoch loss {:.6} (cls {:.6}, loc {:.6}, div {:.6}); checkpoints in {}",
                result.epoch_losses.len(),
                result.steps,
                last.total,
                last.cls,
                last.loc,
                last.div,
                out.display()
            );
        }
        Command::EvalClassify {
            common,
            manifest,
            checkpoint,
        } => {
            let c = load_config(&common)?;
            let model = load_model(&c, checkpoint.as_ref())?;
            let mpath = require(manifest.as_ref(), c.test_manifest.as_ref(), "--manifest")?;
            let m = DatasetManifest::load(mpath)?;
            let ev = evaluate_multilabel(&model, &m)?;
            let r = &ev.report;
            println!(
                "images {}  AP_all {:.4}  mAP {:.4}  top-6 precision {:.4}  recall {:.4}{}  exact-set {:.4}",
                r.images,
                r.ap_all,
                r.map,
                r.top6_precision,
                r.top6_recall,
                if r.top6_flagged { " (fewer than 6 classes)" } else { "" },
                r.exact_set_match
            );
            let mut line = serde_json::to_value(r)?;
            if let Some(l) = &ev.localization {
                println!("mask mass in part boxes {:.4} vs baseline {:.4} (ratio {:.2})", l.mass, l.baseline, l.ratio);
                line["localization"] = serde_json::to_value(l)?;
            }
            write_report(common.out.as_deref(), &[line])?;
        }
        Command::Extract {
            common,
            manifest,
            checkpoint,
        } => {
            let c = load_config(&common)?;
            let model = load_model(&c, checkpoint.as_ref())?;
            let mpath = require(manifest.as_ref(), c.test_manifest.as_ref(), "--manifest")?;
            let out = require(common.out.as_ref(), None, "--out")?;
            let m = DatasetManifest::load(mpath)?;
            let b = c.run.model.backbone;
            let records = m
                .records
                .iter()
                .map(|r| {
                    let img = m.load_tensor(r, b.input_height, b.input_width)?;
                    extract_part_features(&model, &r.image_id, &img)
                })
                .collect::<parttex::Result<Vec<ImageFeatures>>>()?;
            let cfg = c.run.model;
            let f = FeatureFile::new(cfg.attention.steps, cfg.classes, cfg.feature_dim(), records)?;
            f.save(out)?;
            println!("extracted features of {} images to {}", f.records.len(), out.display());
        }
        Command::Index {
            common,
            features,
            manifest,
        } => {
            let f = load_features(&features)?;
            let (steps, classes, dim) = (f.steps, f.classes, f.feature_dim);
            let m = manifest.as_deref().map(DatasetManifest::load).transpose()?;
            let idx = gallery_index(f, m.as_ref())?;
            println!("gallery index: {} images, {} parts, feature dim {}", idx.len(), idx.len() * steps, dim);
            write_report(
                common.out.as_deref(),
                &[json!({"images": idx.len(), "steps": steps, "classes": classes, "feature_dim": dim})],
            )?;
        }
        Command::Retrieve {
            common,
            gallery,
            query,
            k,
            mode,
            allow_self,
        } => {
            let c = load_config(&common)?;
            let k = k.unwrap_or(c.k);
            let idx = gallery_index(load_features(&gallery)?, None)?;
            let queries = load_features(&query)?;
            let mut lines = Vec::new();
            for q in &queries.records {
                let nn = idx.query(q, mode.into(), k, !allow_self)?;
                lines.push(json!({"query_id": q.image_id, "k": k, "truncated": nn.truncated, "hits": nn.hits}));
            }
            write_report(common.out.as_deref(), &lines)?;
            println!("retrieved {k} neighbors for {} queries", lines.len());
        }
        Command::Recommend {
            common,
            gallery,
            query,
            manifest,
            query_manifest,
            k,
            tau,
            allow_self,
        } => {
            let c = load_config(&common)?;
            let (k, tau) = (k.unwrap_or(c.k), tau.unwrap_or(c.tau));
            let gm = DatasetManifest::load(&manifest)?;
            let idx = gallery_index(load_features(&gallery)?, Some(&gm))?;
            let queries = load_features(&query)?;
            let qm = query_manifest.as_deref().map(DatasetManifest::load).transpose()?;
            let truth: HashMap<&str, Vec<usize>> = qm
                .iter()
                .flat_map(|m| m.records.iter().map(|r| (r.image_id.as_str(), m.label_indices(r))))
                .collect();
            let mut lines = Vec::new();
            let mut scored = Vec::new();
            for q in &queries.records {
                let rec = recommend_by_parts(&idx, q, &gm.vocabulary, k, tau, !allow_self)?;
                lines.push(serde_json::to_value(&rec)?);
                if let Some(t) = truth.get(q.image_id.as_str()) {
                    scored.push((rec, t.clone()));
                }
            }
            if qm.is_some() {
                let s = recommendation_precision(&idx, &scored);
                println!("recommendation precision {:.4} over {} groups", s.precision, s.groups);
                lines.push(json!({"summary": s}));
            }
            write_report(common.out.as_deref(), &lines)?;
            println!("recommended for {} queries", queries.records.len());
        }
        Command::EvalRetrieval {
            common,
            gallery,
            query,
            manifest,
            query_manifest,
            k,
            mode,
            allow_self,
        } => {
            let c = load_config(&common)?;
            let k = k.unwrap_or(c.k);
            let gm = DatasetManifest::load(&manifest)?;
            let qm = match &query_manifest {
                Some(p) => DatasetManifest::load(p)?,
                None => gm.clone(),
            };
            let idx = gallery_index(load_features(&gallery)?, Some(&gm))?;
            let items: HashMap<&str, &str> = qm.records.iter().map(|r| (r.image_id.as_str(), r.item())).collect();
            let queries: Vec<(ImageFeatures, String)> = load_features(&query)?
                .records
                .into_iter()
                .map(|q| {
                    let item = items.get(q.image_id.as_str()).copied().unwrap_or(&q.image_id).to_string();
                    (q, item)
                })
                .collect();
            let ks: Vec<usize> = (1..=50).collect();
            let r = topk_accuracy(&idx, &queries, &ks, mode.into(), !allow_self)?;
            let mut lines: Vec<serde_json::Value> = r
                .ks
                .iter()
                .zip(&r.accuracy)
                .map(|(k, a)| json!({"k": k, "accuracy": a}))
                .collect();
            lines.push(json!({"summary": {"evaluated": r.evaluated, "uncovered": r.uncovered}}));
            write_report(common.out.as_deref(), &lines)?;
            let at = r.accuracy.get(k.clamp(1, 50) - 1).copied().unwrap_or(0.0);
            println!(
                "top-{k} accuracy {at:.4} over {} queries ({} without a gallery match)",
                r.evaluated, r.uncovered
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match e.downcast_ref::<parttex::Error>() {
                Some(pe @ parttex::Error::NonFiniteLoss { .. }) => (pe.kind(), 2),
                Some(pe) => (pe.kind(), 1),
                None => ("error", 1),
            };
            eprintln!("{}", json!({"error": kind, "message": format!("{e:#}")}));
            ExitCode::from(code)
        }
    }
}
