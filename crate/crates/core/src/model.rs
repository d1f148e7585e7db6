//! The assembled detector: frozen teacher, student, recovery branch and
//! segmentation head, with the ablation switches that remove each part.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillConfig};
use crate::error::{Error, Result};
use crate::features::{BackboneSpec, FeaturePyramid, PyramidSource, Student, Teacher};
use crate::infer::{self, AnomalyScoreMap, InferConfig};
use crate::recovery::{self, RecoveryNet};
use crate::seghead::{self, LossTerms, SegHead};

/// Ablation switches; each removes one component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Without the recovery branch (no `L_rec`, no recovery hint, no
    /// recovery-similarity map at inference).
    pub wrc: bool,
    /// Without the segmentation branch (no `L_bce`; inference uses the
    /// recovery-similarity map only).
    pub ws: bool,
    /// Without the push term of the distillation loss.
    pub wp: bool,
    /// Without the recovery hint on the segmentation input.
    pub wc: bool,
    /// Homogeneous student (same architecture as the teacher).
    pub wh: bool,
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        if self.wrc && self.ws {
            return Err(Error::Config(
                "ablation.wrc and ablation.ws together leave no anomaly score source".into(),
            ));
        }
        Ok(())
    }

    /// The six rows of the ablation table, full model first.
    pub fn table_rows() -> [(&'static str, Ablation); 6] {
        let d = Ablation::default();
        [
            ("full", d),
            ("WRC", Ablation { wrc: true, ..d }),
            ("WS", Ablation { ws: true, ..d }),
            ("WP", Ablation { wp: true, ..d }),
            ("WC", Ablation { wc: true, ..d }),
            ("WH", Ablation { wh: true, ..d }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    /// Channel width of every segmentation decoder stage.
    pub seg_width: usize,
    /// Stop gradients of `L_bce` at the hint weights.
    pub detach_hints: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            seg_width: 128,
            detach_hints: false,
        }
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            backbone: BackboneSpec::desk(),
            seg_width: 32,
            detach_hints: false,
        }
    }
}

/// Score sources for one batch, each `[B, H, W]` on the host.
#[derive(Debug, Clone)]
pub struct ScoreSources {
    pub rec_maps: Option<Vec<Array2<f32>>>,
    pub seg_probs: Option<Vec<Array2<f32>>>,
}

pub struct CfrgModel {
    pub teacher: Teacher,
    pub student: Student,
    pub recovery: Option<RecoveryNet>,
    pub seg: Option<SegHead>,
    ablation: Ablation,
    distill: DistillConfig,
    detach_hints: bool,
}

impl CfrgModel {
    /// Builds every enabled component. `seed` drives all trainable
    /// initializations; the teacher depends only on the backbone spec.
    pub fn new(cfg: &ModelConfig, distill: DistillConfig, ablation: Ablation, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        ablation.validate()?;
        let mut backbone = cfg.backbone.clone();
        backbone.homogeneous_mode |= ablation.wh;
        let teacher = Teacher::new(&backbone, device, dtype)?;
        let student = Student::new(&backbone, device, dtype, seed)?;
        let ch = teacher.channels();
        let recovery = if ablation.wrc {
            None
        } else {
            Some(RecoveryNet::new(ch, device, dtype, seed.wrapping_add(1))?)
        };
        let seg = if ablation.ws {
            None
        } else {
            Some(SegHead::new(ch, cfg.seg_width, device, dtype, seed.wrapping_add(2))?)
        };
        let distill = DistillConfig {
            push_enabled: distill.push_enabled && !ablation.wp,
            ..distill
        };
        Ok(Self {
            teacher,
            student,
            recovery,
            seg,
            ablation,
            distill,
            detach_hints: cfg.detach_hints,
        })
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn set_detach_hints(&mut self, detach: bool) {
        self.detach_hints = detach;
    }

    pub fn detach_hints(&self) -> bool {
        self.detach_hints
    }

    /// Every trainable variable, keyed `student.*`, `recovery.*`, `seg.*`.
    pub fn trainable_vars(&self) -> BTreeMap<String, Var> {
        let mut out = BTreeMap::new();
        let mut add = |prefix: &str, vars: &BTreeMap<String, Var>| {
            for (k, v) in vars {
                out.insert(format!("{prefix}.{k}"), v.clone());
            }
        };
        add("student", self.student.store().vars());
        if let Some(r) = &self.recovery {
            add("recovery", r.store().vars());
        }
        if let Some(s) = &self.seg {
            add("seg", s.store().vars());
        }
        out
    }

    pub fn num_trainable_params(&self) -> usize {
        self.trainable_vars().values().map(|v| v.elem_count()).sum()
    }

    /// Loss components for a batch of corrupted images `x_a`, their clean
    /// sources `x_n` and masks `[B, H, W]`. `ids` pairs recovery targets with
    /// their sources.
    pub fn losses(&self, x_a: &Tensor, x_n: &Tensor, mask: &Tensor, ids: &[String]) -> Result<LossTerms> {
        let (_, _, h, w) = x_a.dims4()?;
        let ft_a = self.teacher.forward(x_a, PyramidSource::TeacherOnAnomalous)?.with_ids(ids.to_vec());
        let fs_a = self.student.forward(x_a)?;
        let dist = distill::cosine_distance(&ft_a, &fs_a)?;
        let dis = distill::distill_loss(&dist, mask, &self.distill)?;

        let (rec, recovered) = match &self.recovery {
            Some(net) => {
                let ft_n = self.teacher.forward(x_n, PyramidSource::TeacherOnNormal)?.with_ids(ids.to_vec());
                let fr = net.recover(&ft_a)?;
                (Some(recovery::recovery_loss(&fr, &ft_n)?), Some(fr))
            }
            None => (None, None),
        };

        let bce = match &self.seg {
            Some(head) => {
                let out = self.segment(head, &ft_a, &dist, recovered.as_ref(), h, w)?;
                Some(seghead::bce_loss(&out.probs, mask)?)
            }
            None => None,
        };
        Ok(LossTerms {
            dis: Some(dis),
            rec,
            bce,
        })
    }

    fn segment(&self, head: &SegHead, ft: &FeaturePyramid, dist: &distill::CosineDistanceMap, recovered: Option<&FeaturePyramid>, h: usize, w: usize) -> Result<seghead::SegOutput> {
        let mut w_d = distill::distill_weight(dist)?;
        let mut w_r = match recovered {
            Some(fr) if !self.ablation.wc => Some(recovery::recovery_weight(ft, fr)?),
            _ => None,
        };
        if self.detach_hints {
            w_d = w_d.detach();
            w_r = w_r.map(|w| w.detach());
        }
        let guided = seghead::guide(ft, &w_d, w_r.as_ref())?;
        head.segment(&guided, h, w)
    }

    /// Recovery-similarity maps and segmentation probabilities at input
    /// resolution for a normalized batch.
    pub fn score_sources(&self, x: &Tensor) -> Result<ScoreSources> {
        let (_, _, h, w) = x.dims4()?;
        let ft = self.teacher.forward(x, PyramidSource::TeacherOnAnomalous)?;
        let recovered = match &self.recovery {
            Some(net) => Some(net.recover(&ft)?.detach()),
            None => None,
        };
        let rec_maps = match &recovered {
            Some(fr) => Some(infer::tensor_to_maps(&infer::recovery_similarity_map(&ft, fr, h, w)?)?),
            None => None,
        };
        let seg_probs = match &self.seg {
            Some(head) => {
                let fs = self.student.forward(x)?.detach();
                let dist = distill::cosine_distance(&ft, &fs)?;
                let out = self.segment(head, &ft, &dist, recovered.as_ref(), h, w)?;
                Some(infer::tensor_to_maps(&out.probs)?)
            }
            None => None,
        };
        Ok(ScoreSources { rec_maps, seg_probs })
    }

    /// Final smoothed anomaly maps for a normalized batch.
    pub fn predict(&self, x: &Tensor, cfg: &InferConfig) -> Result<Vec<AnomalyScoreMap>> {
        let src = self.score_sources(x)?;
        let (b, _, _, _) = x.dims4()?;
        (0..b)
            .map(|i| {
                infer::fuse_and_smooth(
                    src.rec_maps.as_ref().map(|m| &m[i]),
                    src.seg_probs.as_ref().map(|m| &m[i]),
                    cfg,
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(dtype: DType) -> (Tensor, Tensor, Tensor) {
        let dev = Device::Cpu;
        let x_n = (Tensor::arange(0u32, 2 * 3 * 64 * 64, &dev).unwrap().to_dtype(dtype).unwrap() * 0.001)
            .unwrap()
            .sin()
            .unwrap()
            .reshape((2, 3, 64, 64))
            .unwrap();
        let mut m = vec![0f32; 2 * 64 * 64];
        for y in 20..36 {
            for x in 10..30 {
                m[y * 64 + x] = 1.0;
            }
        }
        let mask = Tensor::from_vec(m, (2, 64, 64), &dev).unwrap().to_dtype(dtype).unwrap();
        let x_a = (&x_n + mask.unsqueeze(1).unwrap().broadcast_as((2, 3, 64, 64)).unwrap() * 2.0).unwrap();
        (x_a, x_n, mask)
    }

    #[test]
    fn every_branch_produces_its_loss() -> Result<()> {
        let m = CfrgModel::new(&ModelConfig::desk(), DistillConfig::default(), Ablation::default(), &Device::Cpu, DType::F32, 1)?;
        let (xa, xn, g) = batch(DType::F32);
        let ids = vec!["a".to_string(), "b".to_string()];
        let t = m.losses(&xa, &xn, &g, &ids)?;
        assert!(t.dis.is_some() && t.rec.is_some() && t.bce.is_some());
        let p = m.predict(&xa, &InferConfig::default())?;
        assert_eq!(p.len(), 2);
        assert_eq!(p[0].pixel_scores.dim(), (64, 64));
        Ok(())
    }

    #[test]
    fn ablations_remove_components() -> Result<()> {
        let (xa, xn, g) = batch(DType::F32);
        let ids = vec!["a".to_string(), "b".to_string()];
        for (name, ab) in Ablation::table_rows() {
            let m = CfrgModel::new(&ModelConfig::desk(), DistillConfig::default(), ab, &Device::Cpu, DType::F32, 1)?;
            let t = m.losses(&xa, &xn, &g, &ids)?;
            assert_eq!(t.rec.is_none(), ab.wrc, "{name}");
            assert_eq!(t.bce.is_none(), ab.ws, "{name}");
            assert!(m.trainable_vars().keys().any(|k| k.starts_with("recovery.")) != ab.wrc);
            assert!(m.trainable_vars().keys().any(|k| k.starts_with("seg.")) != ab.ws);
        }
        let both = Ablation {
            wrc: true,
            ws: true,
            ..Default::default()
        };
        assert!(CfrgModel::new(&ModelConfig::desk(), DistillConfig::default(), both, &Device::Cpu, DType::F32, 1).is_err());
        Ok(())
    }

    #[test]
    fn bce_reaches_student_unless_detached() -> Result<()> {
        let (xa, xn, g) = batch(DType::F32);
        let ids = vec!["a".to_string(), "b".to_string()];
        for detach in [false, true] {
            let cfg = ModelConfig {
                detach_hints: detach,
                ..ModelConfig::desk()
            };
            let m = CfrgModel::new(&cfg, DistillConfig::default(), Ablation::default(), &Device::Cpu, DType::F32, 1)?;
            let bce = m.losses(&xa, &xn, &g, &ids)?.bce.unwrap();
            let grads = bce.backward()?;
            let student_hit = m.student.store().vars().values().any(|v| grads.get(v.as_tensor()).is_some());
            assert_eq!(student_hit, !detach);
            let seg_hit = m.seg.as_ref().unwrap().store().vars().values().all(|v| grads.get(v.as_tensor()).is_some());
            assert!(seg_hit);
        }
        Ok(())
    }
}
