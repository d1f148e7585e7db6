//! Orchestration behind the command-line subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::config::Config;
use crate::dataset::{self, ImageSample, Label, TileManifest, TileSpec};
use crate::error::{Error, Result};
use crate::infer::{self, AnomalyScoreMap};
use crate::metrics::{self, MetricsReport};
use crate::synth::TextureBank;
use crate::train::{self, AblationTable, Trainer};

/// Flags shared by every subcommand that reads a configuration.
#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub categories: Vec<String>,
    pub desk_scale: bool,
    /// `section.key=value` overrides, applied last.
    pub overrides: Vec<String>,
}

/// File config (or the desk / full preset), then flags, then overrides.
pub fn resolve_config(args: &ConfigArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None if args.desk_scale => Config::desk(),
        None => Config::default(),
    };
    if args.desk_scale {
        cfg.train.desk_scale = true;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if !args.categories.is_empty() {
        cfg.dataset.categories = args.categories.clone();
    }
    let cfg = cfg.with_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn categories(cfg: &Config) -> Result<&[String]> {
    if cfg.dataset.categories.is_empty() {
        return Err(Error::Config("no category given (dataset.categories or --category)".into()));
    }
    Ok(&cfg.dataset.categories)
}

pub fn run_dir(cfg: &Config, category: &str) -> PathBuf {
    cfg.train.output_dir.join(category)
}

/// Final checkpoint of a finished run.
pub fn final_checkpoint(cfg: &Config, category: &str) -> PathBuf {
    train::checkpoint_path(&run_dir(cfg, category).join("checkpoints"), cfg.train.epochs)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn run_preprocess(input: &Path, output: &Path, spec: TileSpec) -> Result<TileManifest> {
    dataset::preprocess_dir(input, output, &spec)
}

/// Trains one model per category. Returns the final checkpoint paths.
pub fn run_train(cfg: &Config, resume: Option<&Path>) -> Result<Vec<PathBuf>> {
    let cats = categories(cfg)?;
    if resume.is_some() && cats.len() != 1 {
        return Err(Error::Config("--resume needs exactly one category".into()));
    }
    // Fail on data problems before any training starts.
    let mut prepared = Vec::new();
    for cat in cats {
        let index = dataset::scan_layout(&cfg.dataset.root, cat)?;
        prepared.push((cat.clone(), train::load_split(&index.train(), cfg.dataset.resolution)?));
    }
    let textures = TextureBank::load(&cfg.synth.texture_root, cfg.dataset.resolution)?;
    let mut out = Vec::new();
    for (cat, data) in prepared {
        let dir = run_dir(cfg, &cat);
        write_file(&dir.join("config.toml"), cfg.to_toml()?)?;
        let mut trainer = match resume {
            Some(ckpt) => Trainer::resume(cfg.clone(), data, textures.clone(), ckpt)?,
            None => Trainer::new(cfg.clone(), data, textures.clone())?,
        };
        trainer.log_to(&dir.join("train_log.jsonl"))?;
        log::info!(
            "training {cat}: {} trainable parameters, epochs {}..{}",
            trainer.model().num_trainable_params(),
            trainer.next_epoch(),
            cfg.train.epochs
        );
        trainer.train(Some(&dir.join("checkpoints")))?;
        out.push(final_checkpoint(cfg, &cat));
    }
    Ok(out)
}

/// Relative output stem of a test sample: `<defect>/<stem>`.
fn sample_stem(root: &Path, category: &str, image: &Path) -> String {
    let base = root.join(category).join("test");
    let rel = image.strip_prefix(&base).unwrap_or(image);
    rel.with_extension("").to_string_lossy().replace('\\', "/")
}

/// Writes the heatmap, raw map and score row for one prediction.
fn write_prediction(dir: &Path, stem: &str, pred: &AnomalyScoreMap) -> Result<()> {
    let raw = dir.join(format!("{stem}.f32"));
    if let Some(d) = raw.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    infer::write_raw_map(&raw, pred)?;
    infer::write_heatmap_png16(&dir.join(format!("{stem}.png")), &pred.pixel_scores)?;
    infer::append_score_csv(&dir.join("scores.csv"), stem, pred.image_score)
}

/// Runs a checkpoint over a category's test split, or over arbitrary images
/// when `images` is given. Returns the number of images written.
pub fn run_infer(cfg: &Config, checkpoint: &Path, force: bool, images: Option<&Path>, output: &Path) -> Result<usize> {
    let (ckpt_cfg, model) = train::load_checkpoint(checkpoint, Some(cfg), force)?;
    let mut run_cfg = ckpt_cfg;
    run_cfg.infer = cfg.infer;
    run_cfg.train.batch_size = cfg.train.batch_size;
    let _ = fs::remove_file(output.join("scores.csv"));
    let mut jobs: Vec<(PathBuf, String, ImageSample)> = Vec::new();
    match images {
        Some(input) => {
            let mut paths = Vec::new();
            if input.is_dir() {
                for p in dataset::sorted_children(input)? {
                    if dataset::is_image(&p) {
                        paths.push(p);
                    }
                }
            } else {
                paths.push(input.to_path_buf());
            }
            for p in paths {
                let entry = dataset::SampleEntry {
                    image: p.clone(),
                    mask: None,
                    split: dataset::Split::Test,
                    defect_type: String::new(),
                    label: Label::Normal,
                    source_id: p.to_string_lossy().into_owned(),
                };
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                jobs.push((output.to_path_buf(), stem, dataset::load_sample(&entry, run_cfg.dataset.resolution)?));
            }
        }
        None => {
            for cat in categories(cfg)? {
                let index = dataset::scan_layout(&cfg.dataset.root, cat)?;
                let test = index.test();
                let samples = train::load_split(&test, run_cfg.dataset.resolution)?;
                let _ = fs::remove_file(output.join(cat).join("scores.csv"));
                for (e, s) in test.iter().zip(samples) {
                    jobs.push((output.join(cat), sample_stem(&cfg.dataset.root, cat, &e.image), s));
                }
            }
        }
    }
    let samples: Vec<ImageSample> = jobs.iter().map(|(_, _, s)| s.clone()).collect();
    let preds = train::predict_samples(&model, &samples, &run_cfg)?;
    for ((dir, stem, _), pred) in jobs.iter().zip(&preds) {
        write_prediction(dir, stem, pred)?;
    }
    Ok(preds.len())
}

/// Per-category reports plus the mean row, written as JSON and CSV into
/// `output`. Predictions come from `predictions/<category>/` dumps when
/// given, otherwise from each category's final (or the given) checkpoint.
pub fn run_eval(cfg: &Config, checkpoint: Option<&Path>, predictions: Option<&Path>, force: bool, output: &Path) -> Result<Vec<MetricsReport>> {
    let cats = categories(cfg)?;
    if checkpoint.is_some() && cats.len() != 1 {
        return Err(Error::Config("--checkpoint needs exactly one category".into()));
    }
    let mut reports = Vec::new();
    for cat in cats {
        let index = dataset::scan_layout(&cfg.dataset.root, cat)?;
        let test = index.test();
        let report = match predictions {
            Some(dir) => {
                let mut preds = Vec::new();
                let mut masks: Vec<Array2<u8>> = Vec::new();
                for e in &test {
                    let stem = sample_stem(&cfg.dataset.root, cat, &e.image);
                    let pred = infer::read_raw_map(&dir.join(cat).join(format!("{stem}.f32")))?;
                    let (h, w) = pred.pixel_scores.dim();
                    let mask = match &e.mask {
                        Some(p) => dataset::resize_mask_nearest(&dataset::load_mask(p)?, h, w),
                        None => Array2::zeros((h, w)),
                    };
                    preds.push(pred);
                    masks.push(mask);
                }
                metrics::evaluate_category(cat, &preds, &masks, &cfg.metrics)?
            }
            None => {
                let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| final_checkpoint(cfg, cat));
                let (ckpt_cfg, model) = train::load_checkpoint(&ckpt, Some(cfg), force)?;
                let mut run_cfg = ckpt_cfg;
                run_cfg.infer = cfg.infer;
                run_cfg.metrics = cfg.metrics;
                let samples = train::load_split(&test, run_cfg.dataset.resolution)?;
                train::evaluate_samples(&model, &samples, &run_cfg, cat)?
            }
        };
        log::info!("{cat}: {:?}", report.metrics());
        reports.push(report);
    }
    reports.push(metrics::mean_row(&reports)?);
    write_file(&output.join("metrics.json"), serde_json::to_vec_pretty(&reports)?)?;
    let mut csv = String::from(MetricsReport::CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(&output.join("metrics.csv"), csv)?;
    Ok(reports)
}

/// Ablation table for the first configured category over `seeds`.
pub fn run_ablate(cfg: &Config, seeds: &[u64], output: &Path) -> Result<AblationTable> {
    let cat = categories(cfg)?[0].clone();
    let index = dataset::scan_layout(&cfg.dataset.root, &cat)?;
    let tr = train::load_split(&index.train(), cfg.dataset.resolution)?;
    let te = train::load_split(&index.test(), cfg.dataset.resolution)?;
    let tex = TextureBank::load(&cfg.synth.texture_root, cfg.dataset.resolution)?;
    let table = train::ablation_matrix(cfg, &cat, seeds, &tr, &te, &tex)?;
    write_file(&output.join("ablation.json"), serde_json::to_vec_pretty(&table)?)?;
    write_file(&output.join("ablation.md"), table.to_markdown())?;
    Ok(table)
}
