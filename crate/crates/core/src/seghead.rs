//! Hint-weighted teacher features, the skip-connected segmentation network,
//! and the segmentation / total losses.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::distill::AnomalyWeight;
use crate::error::{Error, Result};
use crate::features::{FeaturePyramid, LEVELS};
use crate::nn::{self, Conv2d, ConvSpec, Init, ParamStore};

pub const BCE_EPS: f64 = 1e-7;

/// Segmentation input: `in_t` weighted by the distillation hint, `in_s`
/// additionally by the recovery hint.
#[derive(Debug, Clone)]
pub struct GuidedFeatures {
    pub in_t: Vec<Tensor>,
    pub in_s: Vec<Tensor>,
}

fn weight_level(features: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = features.dims4()?;
    if weight.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "hint {:?} does not match features {:?}",
            weight.dims(),
            features.dims()
        )));
    }
    let hint = (1.0 - weight)?.unsqueeze(1)?;
    Ok(features.broadcast_mul(&hint)?)
}

/// Multiplies each teacher level by `1 - w_d` and then by `1 - w_r`. With no
/// recovery weight (hint disabled) `in_s` equals `in_t`.
pub fn guide(teacher: &FeaturePyramid, w_d: &AnomalyWeight, w_r: Option<&AnomalyWeight>) -> Result<GuidedFeatures> {
    if w_d.levels.len() != LEVELS || w_r.is_some_and(|w| w.levels.len() != LEVELS) {
        return Err(Error::Shape("hint weights need one map per level".into()));
    }
    let in_t = teacher
        .levels
        .iter()
        .zip(&w_d.levels)
        .map(|(f, w)| weight_level(f, w))
        .collect::<Result<Vec<_>>>()?;
    let in_s = match w_r {
        Some(w_r) => in_t
            .iter()
            .zip(&w_r.levels)
            .map(|(f, w)| weight_level(f, w))
            .collect::<Result<Vec<_>>>()?,
        None => in_t.clone(),
    };
    Ok(GuidedFeatures { in_t, in_s })
}

/// Segmentation output at input resolution, `[B, H, W]`.
#[derive(Debug, Clone)]
pub struct SegOutput {
    pub logits: Tensor,
    pub probs: Tensor,
}

/// U-shaped decoder over the three guided levels.
pub struct SegHead {
    deep: Conv2d,
    mid: Conv2d,
    fine: Conv2d,
    head: Conv2d,
    store: ParamStore,
}

impl SegHead {
    pub fn new(channels: [usize; LEVELS], width: usize, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new(device, dtype, true, seed);
        let [c1, c2, c3] = channels;
        let deep = Conv2d::new(&mut ps, "deep", c3, width, ConvSpec::k(3), None)?;
        let mid = Conv2d::new(&mut ps, "mid", width + c2, width, ConvSpec::k(3), None)?;
        let fine = Conv2d::new(&mut ps, "fine", width + c1, width, ConvSpec::k(3), None)?;
        let head = Conv2d::new(&mut ps, "head", width, 1, ConvSpec::k(1), Some(Init::linear(width)))?;
        Ok(Self {
            deep,
            mid,
            fine,
            head,
            store: ps,
        })
    }

    /// Logits and probabilities at `out_h x out_w`.
    pub fn segment(&self, guided: &GuidedFeatures, out_h: usize, out_w: usize) -> Result<SegOutput> {
        let l = &guided.in_s;
        let mut h = self.deep.forward(&l[2])?.relu()?;
        for (conv, skip) in [(&self.mid, &l[1]), (&self.fine, &l[0])] {
            let (_, _, sh, sw) = skip.dims4()?;
            let up = nn::resize_bilinear(&h, sh, sw)?;
            h = conv.forward(&Tensor::cat(&[&up, skip], 1)?)?.relu()?;
        }
        // 1x1 conv and bilinear resize commute; the head runs at the finest
        // level and the logit map is upsampled to the input size.
        let logits = nn::resize_bilinear(&self.head.forward(&h)?, out_h, out_w)?.squeeze(1)?;
        let probs = nn::sigmoid(&logits)?;
        Ok(SegOutput { logits, probs })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Mean binary cross-entropy of probabilities against a binary mask, with
/// probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(probs: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if probs.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "bce: probabilities {:?} vs mask {:?}",
            probs.dims(),
            mask.dims()
        )));
    }
    let g = mask.to_dtype(probs.dtype())?;
    let p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (&g * p.log()?)?;
    let neg = ((1.0 - &g)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.mean_all()?.neg()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_dis: f64,
    pub lambda_rec: f64,
    pub lambda_bce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_dis: 1.0,
            lambda_rec: 1.0,
            lambda_bce: 1.0,
        }
    }
}

/// The three loss components of one step; absent components are disabled
/// branches.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub dis: Option<Tensor>,
    pub rec: Option<Tensor>,
    pub bce: Option<Tensor>,
}

fn value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Weighted sum of the loss components. Zero-weighted components are left
/// out of the graph entirely. A non-finite component aborts.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<Tensor> {
    let parts = [
        ("dis", &terms.dis, weights.lambda_dis),
        ("rec", &terms.rec, weights.lambda_rec),
        ("bce", &terms.bce, weights.lambda_bce),
    ];
    let mut total: Option<Tensor> = None;
    for (name, term, weight) in parts {
        let Some(t) = term else { continue };
        let v = value(t)?;
        if !v.is_finite() {
            let diag: Vec<String> = parts
                .iter()
                .filter_map(|(n, t, _)| t.as_ref().map(|t| format!("{n}={:?}", value(t).ok())))
                .collect();
            return Err(Error::Numeric(format!(
                "loss component {name} is {v}; components: {}",
                diag.join(", ")
            )));
        }
        if weight == 0.0 {
            continue;
        }
        let scaled = (t * weight)?;
        total = Some(match total {
            Some(acc) => (acc + scaled)?,
            None => scaled,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(Error::Config("every loss component is disabled or zero-weighted".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::AnomalyWeight;
    use crate::features::PyramidSource;

    fn scalar(t: &Tensor) -> f64 {
        value(t).unwrap()
    }

    fn pyr(v: f64) -> FeaturePyramid {
        let levels = [(2usize, 8usize), (3, 4), (4, 2)]
            .iter()
            .map(|&(c, s)| Tensor::full(v, (1, c, s, s), &Device::Cpu).unwrap())
            .collect();
        FeaturePyramid::new(levels, PyramidSource::TeacherOnAnomalous).unwrap()
    }

    fn weights(v: f64) -> AnomalyWeight {
        AnomalyWeight {
            levels: [8usize, 4, 2]
                .iter()
                .map(|&s| Tensor::full(v, (1, s, s), &Device::Cpu).unwrap())
                .collect(),
        }
    }

    #[test]
    fn guide_fixtures() -> Result<()> {
        let f = pyr(4.0);
        let g = guide(&f, &weights(1.0), Some(&weights(1.0)))?;
        assert!(g.in_s.iter().all(|t| scalar(&t.abs().unwrap().max_all().unwrap()) == 0.0));
        let g = guide(&f, &weights(0.0), Some(&weights(0.0)))?;
        assert!(g.in_s.iter().all(|t| scalar(&t.min_all().unwrap()) == 4.0));
        let g = guide(&f, &weights(0.5), Some(&weights(0.5)))?;
        assert!(g.in_s.iter().all(|t| (scalar(&t.max_all().unwrap()) - 1.0).abs() < 1e-12));
        // Hint disabled.
        let g = guide(&f, &weights(0.5), None)?;
        assert!(g.in_s.iter().all(|t| (scalar(&t.max_all().unwrap()) - 2.0).abs() < 1e-12));
        Ok(())
    }

    #[test]
    fn guide_is_linear_in_features() -> Result<()> {
        let g1 = guide(&pyr(1.5), &weights(0.3), None)?;
        let g2 = guide(&pyr(3.0), &weights(0.3), None)?;
        for (a, b) in g1.in_t.iter().zip(&g2.in_t) {
            assert!(scalar(&((a * 2.0)? - b)?.abs()?.max_all()?) < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn guide_shape_mismatch() {
        let bad = AnomalyWeight {
            levels: [8usize, 4, 3]
                .iter()
                .map(|&s| Tensor::full(0.0f64, (1, s, s), &Device::Cpu).unwrap())
                .collect(),
        };
        assert!(guide(&pyr(1.0), &bad, None).is_err());
    }

    #[test]
    fn segment_output_size_and_constant_response() -> Result<()> {
        let head = SegHead::new([2, 3, 4], 8, &Device::Cpu, DType::F64, 0)?;
        let g = guide(&pyr(0.0), &weights(0.0), None)?;
        let out = head.segment(&g, 32, 32)?;
        assert_eq!(out.logits.dims(), &[1, 32, 32]);
        let v: Vec<Vec<f64>> = out.logits.squeeze(0)?.to_vec2()?;
        // Zero input: every conv sees only its bias, so the map is constant.
        let c = v[16][16];
        for row in &v[4..28] {
            for x in &row[4..28] {
                assert!((x - c).abs() < 1e-12);
            }
        }
        Ok(())
    }

    #[test]
    fn bce_fixtures() -> Result<()> {
        let half = Tensor::full(0.5f64, (1, 4, 4), &Device::Cpu)?;
        let g = Tensor::zeros((1, 4, 4), DType::F64, &Device::Cpu)?;
        assert!((scalar(&bce_loss(&half, &g)?) - std::f64::consts::LN_2).abs() < 1e-12);
        let m = Tensor::new(&[[[1.0f64, 0.0], [1.0, 0.0]]], &Device::Cpu)?;
        assert!(scalar(&bce_loss(&m, &m)?) < 1e-6);
        let s = Tensor::new(&[[[0.9f64, 0.1], [0.8, 0.2]]], &Device::Cpu)?;
        let expected = -(0.9f64.ln() * 2.0 + 0.8f64.ln() * 2.0) / 4.0;
        assert!((scalar(&bce_loss(&s, &m)?) - expected).abs() < 1e-12);
        assert!((expected - 0.1643).abs() < 1e-4);
        Ok(())
    }

    #[test]
    fn total_loss_weights() -> Result<()> {
        let t = |v: f64| Some(Tensor::new(v, &Device::Cpu).unwrap());
        let terms = LossTerms {
            dis: t(0.5),
            rec: t(0.3),
            bce: t(0.2),
        };
        assert!((scalar(&total_loss(&terms, &LossWeights::default())?) - 1.0).abs() < 1e-12);
        let w = LossWeights {
            lambda_dis: 1.0,
            lambda_rec: 0.1,
            lambda_bce: 1.0,
        };
        assert!((scalar(&total_loss(&terms, &w)?) - 0.73).abs() < 1e-12);
        let nan = LossTerms {
            dis: t(f64::NAN),
            ..terms
        };
        assert!(matches!(total_loss(&nan, &LossWeights::default()), Err(Error::Numeric(_))));
        Ok(())
    }

    #[test]
    fn zero_weight_removes_gradient() -> Result<()> {
        let a = candle_core::Var::new(2.0f64, &Device::Cpu)?;
        let b = candle_core::Var::new(3.0f64, &Device::Cpu)?;
        let terms = LossTerms {
            dis: Some(a.as_tensor().sqr()?),
            rec: Some(b.as_tensor().sqr()?),
            bce: None,
        };
        let w = LossWeights {
            lambda_rec: 0.0,
            ..Default::default()
        };
        let grads = total_loss(&terms, &w)?.backward()?;
        assert!(grads.get(a.as_tensor()).is_some());
        assert!(grads.get(b.as_tensor()).is_none());
        Ok(())
    }
}
