//! Walks one batch through the coarse stage and the guidance path: teacher
//! and student pyramids, cosine distances, the push-pull distillation loss,
//! feature recovery, and the guided segmentation input.
//!
//! ```text
//! cargo run --example feature_distillation
//! ```

use candle_core::{DType, Device};
use cfrg::config::Config;
use cfrg::dataset::scan_layout;
use cfrg::distill::{self, DistillConfig};
use cfrg::features::{PyramidSource, Student, Teacher};
use cfrg::recovery::{self, RecoveryNet};
use cfrg::seghead::{self, SegHead};
use cfrg::synth::{synthesize, TextureBank};
use cfrg::toy::{generate, ToySpec};
use cfrg::train::{image_batch, load_split, mask_batch, sample_rng};

fn mean(t: &candle_core::Tensor) -> cfrg::Result<f32> {
    Ok(t.mean_all()?.to_scalar::<f32>()?)
}

fn main() -> cfrg::Result<()> {
    let cfg = Config::desk();
    let res = cfg.dataset.resolution;
    let data = std::env::temp_dir().join("cfrg_distill_toy");
    let spec = ToySpec::default();
    generate(&data, &spec)?;
    let samples = load_split(&scan_layout(&data, &spec.category)?.train()[..4], res)?;
    let textures = TextureBank::load(&data.join("textures"), res)?;
    let mut synth_cfg = cfg.synth.clone();
    synth_cfg.synth_probability = 1.0;
    let views = samples
        .iter()
        .enumerate()
        .map(|(i, s)| synthesize(s, &synth_cfg, &textures, &mut sample_rng(0, 0, i as u64)))
        .collect::<cfrg::Result<Vec<_>>>()?;

    let dev = Device::Cpu;
    let xa = image_batch(&views.iter().map(|v| &v.image_a).collect::<Vec<_>>(), &dev)?;
    let xn = image_batch(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), &dev)?;
    let mask = mask_batch(&views.iter().map(|v| &v.mask).collect::<Vec<_>>(), &dev)?;

    let backbone = &cfg.effective_model().backbone;
    let teacher = Teacher::new(backbone, &dev, DType::F32)?;
    let student = Student::new(backbone, &dev, DType::F32, 0)?;
    let ft_a = teacher.forward(&xa, PyramidSource::TeacherOnAnomalous)?;
    let ft_n = teacher.forward(&xn, PyramidSource::TeacherOnNormal)?;
    let fs_a = student.forward(&xa)?;
    println!("teacher levels {:?}", ft_a.shapes());
    println!("student levels {:?} ({} parameters)", fs_a.shapes(), student.num_params());

    let dist = distill::cosine_distance(&ft_a, &fs_a)?;
    println!("mean cosine distance per level {:?}", distill::level_means(&dist)?);
    for (name, push_enabled) in [("push-pull", true), ("pull only", false)] {
        let c = DistillConfig { push_enabled, ..DistillConfig::default() };
        println!("distillation loss ({name}) {:.4}", mean(&distill::distill_loss(&dist, &mask, &c)?)?);
    }

    let net = RecoveryNet::new(teacher.channels(), &dev, DType::F32, 1)?;
    let recovered = net.recover(&ft_a)?;
    println!("recovery loss against clean features {:.4}", mean(&recovery::recovery_loss(&recovered, &ft_n)?)?);

    let w_d = distill::distill_weight(&dist)?;
    let w_r = recovery::recovery_weight(&ft_a, &recovered)?;
    let guided = seghead::guide(&ft_a, &w_d, Some(&w_r))?;
    let head = SegHead::new(teacher.channels(), cfg.model.seg_width, &dev, DType::F32, 2)?;
    let out = head.segment(&guided, res, res)?;
    println!("segmentation probabilities {:?}, bce {:.4}", out.probs.dims(), mean(&seghead::bce_loss(&out.probs, &mask)?)?);
    Ok(())
}
