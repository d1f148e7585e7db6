//! Training loop, checkpoints, evaluation and the ablation matrix.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainMode};
use crate::dataset::{self, DatasetIndex, ImageSample, Label, Normalization};
use crate::error::{Error, Result};
use crate::infer::AnomalyScoreMap;
use crate::metrics::{self, MetricsReport};
use crate::model::{Ablation, CfrgModel};
use crate::nn::AdamW;
use crate::seghead::{self, LossWeights};
use crate::synth::{self, TextureBank};

pub const DTYPE: DType = DType::F32;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, epoch, index)`; the same sample gets the
/// same corruption no matter which worker draws it.
pub fn sample_rng(seed: u64, epoch: usize, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix((epoch as u64) << 32 ^ index)))
}

/// Stacks HWC images into a normalized `[B, 3, H, W]` tensor.
pub fn image_batch(images: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let (h, w, _) = images[0].dim();
    let mut flat = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape(format!("batch mixes {:?} and {:?}", img.dim(), (h, w, 3))));
        }
        flat.extend(Normalization::IMAGENET.to_chw(img));
    }
    Ok(Tensor::from_vec(flat, (images.len(), 3, h, w), device)?.to_dtype(DTYPE)?)
}

/// Stacks binary masks into a `[B, H, W]` float tensor.
pub fn mask_batch(masks: &[&Array2<u8>], device: &Device) -> Result<Tensor> {
    let (h, w) = masks[0].dim();
    let flat: Vec<f32> = masks.iter().flat_map(|m| m.iter().map(|&v| f32::from(v))).collect();
    Ok(Tensor::from_vec(flat, (masks.len(), h, w), device)?.to_dtype(DTYPE)?)
}

/// One optimizer step as written to the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub dis: Option<f64>,
    pub rec: Option<f64>,
    pub bce: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub steps: usize,
    pub corrupted_fraction: f64,
}

/// Metadata stored next to checkpoint weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    /// All randomness after `epoch` derives from these two values.
    pub rng_state: RngState,
    pub optimizer_steps: u64,
    pub config: Config,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

fn meta_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn tensor_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Builds the model described by `cfg` on the CPU.
pub fn build_model(cfg: &Config, device: &Device) -> Result<CfrgModel> {
    CfrgModel::new(&cfg.effective_model(), cfg.distill, cfg.ablation, device, DTYPE, cfg.train.seed)
}

pub struct Trainer {
    cfg: Config,
    model: CfrgModel,
    opt: AdamW,
    data: Vec<ImageSample>,
    textures: TextureBank,
    device: Device,
    next_epoch: usize,
    teacher_digest: String,
    history: Vec<StepLog>,
    log_file: Option<File>,
}

impl Trainer {
    /// Trainer over preloaded normal samples.
    pub fn new(cfg: Config, data: Vec<ImageSample>, textures: TextureBank) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if data.iter().any(|s| s.label != Label::Normal) {
            return Err(Error::Config("training samples must all be normal".into()));
        }
        if textures.is_empty() {
            return Err(Error::Config("texture bank is empty".into()));
        }
        let device = Device::Cpu;
        let model = build_model(&cfg, &device)?;
        let opt = AdamW::new(model.trainable_vars(), cfg.train.optimizer)?;
        let teacher_digest = model.teacher.digest()?;
        Ok(Self {
            cfg,
            model,
            opt,
            data,
            textures,
            device,
            next_epoch: 0,
            teacher_digest,
            history: Vec::new(),
            log_file: None,
        })
    }

    /// Loads the training split of `category` and the texture bank named by
    /// the config. Data errors surface before any training happens.
    pub fn from_dataset(cfg: Config, category: &str) -> Result<Self> {
        let index = dataset::scan_layout(&cfg.dataset.root, category)?;
        let data = load_split(&index.train(), cfg.dataset.resolution)?;
        let textures = TextureBank::load(&cfg.synth.texture_root, cfg.dataset.resolution)?;
        Self::new(cfg, data, textures)
    }

    /// Appends every step to a JSON-lines file.
    pub fn log_to(&mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        self.log_file = Some(f);
        Ok(())
    }

    pub fn model(&self) -> &CfrgModel {
        &self.model
    }

    pub fn into_model(self) -> CfrgModel {
        self.model
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.cfg.train.epochs
    }

    fn phase_weights(&mut self, epoch: usize) -> LossWeights {
        let w = self.cfg.loss;
        match self.cfg.train.mode {
            TrainMode::Joint => w,
            TrainMode::Sequential { seg_start_epoch } => {
                let seg_phase = epoch >= seg_start_epoch;
                self.model.set_detach_hints(seg_phase || self.cfg.model.detach_hints);
                if seg_phase {
                    LossWeights {
                        lambda_dis: 0.0,
                        lambda_rec: 0.0,
                        ..w
                    }
                } else {
                    LossWeights { lambda_bce: 0.0, ..w }
                }
            }
        }
    }

    /// Trains one epoch over a seeded shuffle of the training set.
    pub fn run_epoch(&mut self) -> Result<EpochSummary> {
        let epoch = self.next_epoch;
        let seed = self.cfg.train.seed;
        let lr = self.cfg.train.lr_at(epoch);
        self.opt.set_learning_rate(lr);
        let weights = self.phase_weights(epoch);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut sample_rng(seed, epoch, u64::MAX));
        let (mut total, mut steps, mut corrupted) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.cfg.train.batch_size) {
            let synth_cfg = &self.cfg.synth;
            let views = chunk
                .par_iter()
                .map(|&i| synth::synthesize(&self.data[i], synth_cfg, &self.textures, &mut sample_rng(seed, epoch, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            corrupted += views.iter().filter(|v| v.was_corrupted).count();
            let xa = image_batch(&views.iter().map(|v| &v.image_a).collect::<Vec<_>>(), &self.device)?;
            let xn = image_batch(&chunk.iter().map(|&i| &self.data[i].image).collect::<Vec<_>>(), &self.device)?;
            let mask = mask_batch(&views.iter().map(|v| &v.mask).collect::<Vec<_>>(), &self.device)?;
            let ids: Vec<String> = chunk.iter().map(|&i| self.data[i].source_id.clone()).collect();
            let terms = self.model.losses(&xa, &xn, &mask, &ids)?;
            let loss = seghead::total_loss(&terms, &weights)?;
            let value = tensor_value(&loss)?;
            if !value.is_finite() {
                // Parameters are untouched; the last checkpoint stays valid.
                return Err(Error::Numeric(format!("loss became {value} at epoch {epoch} step {}", self.opt.step_count() + 1)));
            }
            let grads = loss.backward()?;
            self.opt.step(&grads)?;
            let opt_v = |t: &Option<Tensor>| t.as_ref().map(tensor_value).transpose();
            let log = StepLog {
                epoch,
                step: self.opt.step_count(),
                lr,
                dis: opt_v(&terms.dis)?,
                rec: opt_v(&terms.rec)?,
                bce: opt_v(&terms.bce)?,
                total: value,
            };
            if let Some(f) = &mut self.log_file {
                writeln!(f, "{}", serde_json::to_string(&log)?).map_err(|e| Error::io("train log", e))?;
            }
            self.history.push(log);
            total += value;
            steps += 1;
        }
        self.next_epoch += 1;
        Ok(EpochSummary {
            epoch,
            lr,
            mean_total: total / steps as f64,
            steps,
            corrupted_fraction: corrupted as f64 / self.data.len() as f64,
        })
    }

    /// Trains the remaining epochs, checkpointing after each one into
    /// `checkpoint_dir` when given. Verifies the teacher is unchanged.
    pub fn train(&mut self, checkpoint_dir: Option<&Path>) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            let s = self.run_epoch()?;
            log::info!("epoch {} lr {:.2e} mean loss {:.5}", s.epoch, s.lr, s.mean_total);
            if let Some(dir) = checkpoint_dir {
                self.save_checkpoint(&checkpoint_path(dir, self.next_epoch))?;
            }
            out.push(s);
        }
        self.verify_teacher()?;
        Ok(out)
    }

    /// Errors if the frozen teacher's parameters changed since construction.
    pub fn verify_teacher(&self) -> Result<()> {
        let now = self.model.teacher.digest()?;
        if now != self.teacher_digest {
            return Err(Error::Numeric(format!(
                "teacher parameters changed during training ({} -> {now})",
                self.teacher_digest
            )));
        }
        Ok(())
    }

    pub fn teacher_digest(&self) -> &str {
        &self.teacher_digest
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tensors: HashMap<String, Tensor> = self
            .model
            .trainable_vars()
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v.as_tensor().clone()))
            .collect();
        let (state, steps) = self.opt.state();
        tensors.extend(state.into_iter().map(|(k, v)| (format!("opt.{k}"), v)));
        candle_core::safetensors::save(&tensors, path)?;
        let meta = CheckpointMeta {
            epoch: self.next_epoch,
            config_hash: self.cfg.hash(),
            rng_state: RngState {
                seed: self.cfg.train.seed,
                next_epoch: self.next_epoch,
            },
            optimizer_steps: steps,
            config: self.cfg.clone(),
        };
        let mp = meta_path(path);
        fs::write(&mp, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&mp, e))
    }

    /// Continues training from a checkpoint written by `save_checkpoint`.
    /// The configuration must hash identically.
    pub fn resume(cfg: Config, data: Vec<ImageSample>, textures: TextureBank, checkpoint: &Path) -> Result<Self> {
        let meta = read_meta(checkpoint)?;
        if meta.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint {} was written under a different configuration",
                checkpoint.display()
            )));
        }
        let mut t = Self::new(cfg, data, textures)?;
        let tensors = candle_core::safetensors::load(checkpoint, &t.device)?;
        load_model_weights(&t.model, &tensors)?;
        let opt_state: HashMap<String, Tensor> = tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("opt.").map(|s| (s.to_string(), v.clone())))
            .collect();
        t.opt.load_state(&opt_state, meta.optimizer_steps)?;
        t.next_epoch = meta.rng_state.next_epoch;
        Ok(t)
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.safetensors"))
}

pub fn read_meta(checkpoint: &Path) -> Result<CheckpointMeta> {
    let mp = meta_path(checkpoint);
    let bytes = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", mp.display())))
}

fn load_model_weights(model: &CfrgModel, tensors: &HashMap<String, Tensor>) -> Result<()> {
    model.student.store().load_vars(tensors, "model.student.")?;
    if let Some(r) = &model.recovery {
        r.store().load_vars(tensors, "model.recovery.")?;
    }
    if let Some(s) = &model.seg {
        s.store().load_vars(tensors, "model.seg.")?;
    }
    Ok(())
}

/// Rebuilds a trained model. The stored configuration defines the
/// architecture; when `expected` is given its hash must match unless
/// `force` is set, in which case a mismatch is only logged.
pub fn load_checkpoint(checkpoint: &Path, expected: Option<&Config>, force: bool) -> Result<(Config, CfrgModel)> {
    let meta = read_meta(checkpoint)?;
    if let Some(cfg) = expected {
        if cfg.hash() != meta.config_hash {
            if force {
                log::warn!("checkpoint {} config hash differs; proceeding", checkpoint.display());
            } else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint {} config hash {} differs from {}; pass --force to proceed",
                    checkpoint.display(),
                    meta.config_hash,
                    cfg.hash()
                )));
            }
        }
    }
    let device = Device::Cpu;
    let model = build_model(&meta.config, &device)?;
    let tensors = candle_core::safetensors::load(checkpoint, &device)?;
    load_model_weights(&model, &tensors)?;
    Ok((meta.config, model))
}

/// Decodes entries in parallel, keeping their order.
pub fn load_split(entries: &[dataset::SampleEntry], resolution: usize) -> Result<Vec<ImageSample>> {
    entries.par_iter().map(|e| dataset::load_sample(e, resolution)).collect()
}

/// Smoothed anomaly maps for `samples`, in order.
pub fn predict_samples(model: &CfrgModel, samples: &[ImageSample], cfg: &Config) -> Result<Vec<AnomalyScoreMap>> {
    let device = Device::Cpu;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.train.batch_size.max(1)) {
        let x = image_batch(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), &device)?;
        out.extend(model.predict(&x, &cfg.infer)?);
    }
    Ok(out)
}

pub fn evaluate_samples(model: &CfrgModel, samples: &[ImageSample], cfg: &Config, category: &str) -> Result<MetricsReport> {
    let preds = predict_samples(model, samples, cfg)?;
    let masks: Vec<Array2<u8>> = samples.iter().map(|s| s.mask_or_zeros()).collect();
    metrics::evaluate_category(category, &preds, &masks, &cfg.metrics)
}

/// Test split of a category at the configured resolution.
pub fn load_test_set(cfg: &Config, category: &str) -> Result<Vec<ImageSample>> {
    let index: DatasetIndex = dataset::scan_layout(&cfg.dataset.root, category)?;
    load_split(&index.test(), cfg.dataset.resolution)
}

/// One variant of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: Ablation,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Markdown table with one row per variant and the four metrics in
    /// percent.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| variant | P-AUROC | I-AUROC | P-PRO | AP |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.mean;
            s.push_str(&format!(
                "| {} | {:.1} | {:.1} | {:.1} | {:.1} |\n",
                r.variant,
                100.0 * m.p_auroc,
                100.0 * m.i_auroc,
                100.0 * m.p_pro,
                100.0 * m.ap
            ));
        }
        s
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains and evaluates the six ablation variants for every seed on
/// preloaded data.
pub fn ablation_matrix(
    base: &Config,
    category: &str,
    seeds: &[u64],
    train: &[ImageSample],
    test: &[ImageSample],
    textures: &TextureBank,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (name, ablation) in Ablation::table_rows() {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.ablation = ablation;
            cfg.train.seed = seed;
            let mut t = Trainer::new(cfg.clone(), train.to_vec(), textures.clone())?;
            t.train(None)?;
            let report = evaluate_samples(t.model(), test, &cfg, category)?;
            log::info!("ablation {name} seed {seed}: {:?}", report.metrics());
            per_seed.push(report);
        }
        let mut mean = metrics::mean_row(&per_seed)?;
        mean.category = category.to_string();
        rows.push(AblationRow {
            variant: name.to_string(),
            ablation,
            per_seed,
            mean,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
