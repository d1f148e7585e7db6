//! Feature recovery branch: fuse the teacher pyramid of a corrupted image into
//! a bottleneck embedding and decode normal-looking features from it.

use candle_core::{DType, Device, Tensor};

use crate::distill::{cosine_distance_level, AnomalyWeight};
use crate::error::{Error, Result};
use crate::features::{FeaturePyramid, PyramidSource, LEVELS};
use crate::nn::{Conv2d, ConvSpec, ParamStore, Upconv2x};

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(ps, &format!("{name}.a"), c, c, ConvSpec::k(3), None)?,
            b: Conv2d::new(ps, &format!("{name}.b"), c, c, ConvSpec::k(3), None)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(x)?.relu()?;
        Ok((x + self.b.forward(&h)?)?)
    }
}

/// Bottleneck fusion followed by a residual decoder.
///
/// Levels 1 and 2 are brought down to level-3 resolution by strided
/// convolutions, concatenated with level 3 and fused by a 1x1 conv. A further
/// strided conv yields the bottleneck at stride 32. Each decoder stage then
/// upsamples 2x with a transposed convolution and refines with a residual
/// block, emitting levels 3, 2, 1 in turn.
pub struct RecoveryNet {
    down1: [Conv2d; 2],
    down2: Conv2d,
    fuse: Conv2d,
    bottleneck: Conv2d,
    ups: Vec<Upconv2x>,
    blocks: Vec<ResBlock>,
    store: ParamStore,
}

impl RecoveryNet {
    pub fn new(channels: [usize; LEVELS], device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new(device, dtype, true, seed);
        let [c1, c2, c3] = channels;
        let s2 = ConvSpec::k(3).stride(2);
        let down1 = [
            Conv2d::new(&mut ps, "bn.down1.0", c1, c3, s2, None)?,
            Conv2d::new(&mut ps, "bn.down1.1", c3, c3, s2, None)?,
        ];
        let down2 = Conv2d::new(&mut ps, "bn.down2", c2, c3, s2, None)?;
        let fuse = Conv2d::new(&mut ps, "bn.fuse", 3 * c3, c3, ConvSpec::k(1), None)?;
        let bottleneck = Conv2d::new(&mut ps, "bn.out", c3, 2 * c3, s2, None)?;
        let widths = [2 * c3, c3, c2, c1];
        let mut ups = Vec::new();
        let mut blocks = Vec::new();
        for i in 0..LEVELS {
            ups.push(Upconv2x::new(&mut ps, &format!("dec.{i}.up"), widths[i], widths[i + 1])?);
            blocks.push(ResBlock::new(&mut ps, &format!("dec.{i}.res"), widths[i + 1])?);
        }
        Ok(Self {
            down1,
            down2,
            fuse,
            bottleneck,
            ups,
            blocks,
            store: ps,
        })
    }

    /// Recovered pyramid for a teacher pyramid. The input is not modified.
    pub fn recover(&self, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let l = &pyr.levels;
        let d1 = self.down1[1].forward(&self.down1[0].forward(&l[0])?.relu()?)?.relu()?;
        let d2 = self.down2.forward(&l[1])?.relu()?;
        let cat = Tensor::cat(&[&d1, &d2, &l[2]], 1)?;
        let fused = self.fuse.forward(&cat)?.relu()?;
        let mut h = self.bottleneck.forward(&fused)?.relu()?;
        let mut out = Vec::with_capacity(LEVELS);
        for (up, block) in self.ups.iter().zip(&self.blocks) {
            h = block.forward(&up.forward(&h)?.relu()?)?;
            out.push(h.clone());
            h = h.relu()?;
        }
        out.reverse();
        let rec = FeaturePyramid::new(out, PyramidSource::Recovery)?.with_ids(pyr.sample_ids.clone());
        assert_eq!(
            rec.shapes(),
            pyr.shapes(),
            "recovery decoder broke the level shape contract"
        );
        Ok(rec)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }
}

/// Sum over levels of the mean `1 - cos` between recovered features and the
/// teacher features of the clean image.
pub fn recovery_loss(recovered: &FeaturePyramid, clean: &FeaturePyramid) -> Result<Tensor> {
    if !recovered.sample_ids.is_empty()
        && !clean.sample_ids.is_empty()
        && recovered.sample_ids != clean.sample_ids
    {
        return Err(Error::Pairing {
            target: clean.sample_ids.join(","),
            source_id: recovered.sample_ids.join(","),
        });
    }
    recovered.check_aligned(clean)?;
    let mut total: Option<Tensor> = None;
    for (r, t) in recovered.levels.iter().zip(&clean.levels) {
        let term = cosine_distance_level(r, t)?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Shape("empty pyramid".into()))
}

/// Hint weight `1 - clamp(1 - cos(input, recovered), 0, 1)` per level.
pub fn recovery_weight(input: &FeaturePyramid, recovered: &FeaturePyramid) -> Result<AnomalyWeight> {
    input.check_aligned(recovered)?;
    let levels = input
        .levels
        .iter()
        .zip(&recovered.levels)
        .map(|(a, b)| Ok((1.0 - cosine_distance_level(a, b)?.clamp(0.0, 1.0)?)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnomalyWeight { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn teacher_like(dtype: DType) -> FeaturePyramid {
        let levels = [(8usize, 16usize), (12, 8), (16, 4)]
            .iter()
            .enumerate()
            .map(|(i, &(c, s))| {
                Tensor::arange(0u32, (2 * c * s * s) as u32, &Device::Cpu)
                    .unwrap()
                    .to_dtype(dtype)
                    .unwrap()
                    .affine(0.01 * (i + 1) as f64, 0.1)
                    .unwrap()
                    .sin()
                    .unwrap()
                    .reshape((2, c, s, s))
                    .unwrap()
            })
            .collect();
        FeaturePyramid::new(levels, PyramidSource::TeacherOnAnomalous).unwrap()
    }

    #[test]
    fn shapes_match_and_deterministic() -> Result<()> {
        let net = RecoveryNet::new([8, 12, 16], &Device::Cpu, DType::F32, 3)?;
        let input = teacher_like(DType::F32);
        let before: Vec<Vec<f32>> = input.levels.iter().map(|t| t.flatten_all().unwrap().to_vec1().unwrap()).collect();
        let a = net.recover(&input)?;
        let b = net.recover(&input)?;
        assert_eq!(a.shapes(), input.shapes());
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert_eq!(x.flatten_all()?.to_vec1::<f32>()?, y.flatten_all()?.to_vec1::<f32>()?);
        }
        let after: Vec<Vec<f32>> = input.levels.iter().map(|t| t.flatten_all().unwrap().to_vec1().unwrap()).collect();
        assert_eq!(before, after);
        Ok(())
    }

    #[test]
    fn gradients_reach_decoder_not_teacher() -> Result<()> {
        use crate::features::{BackboneSpec, Teacher};
        let teacher = Teacher::new(&BackboneSpec::desk(), &Device::Cpu, DType::F32)?;
        let x = Tensor::arange(0u32, 2 * 3 * 64 * 64, &Device::Cpu)?
            .to_dtype(DType::F32)?
            .affine(0.003, 0.0)?
            .sin()?
            .reshape((2, 3, 64, 64))?;
        let input = teacher.forward(&x, PyramidSource::TeacherOnAnomalous)?;
        let net = RecoveryNet::new(teacher.channels(), &Device::Cpu, DType::F32, 3)?;
        let rec = net.recover(&input)?;
        let grads = recovery_loss(&rec, &input)?.backward()?;
        for (name, var) in net.store().vars() {
            assert!(grads.get(var.as_tensor()).is_some(), "no gradient for {name}");
        }
        for (name, t) in teacher.store().tensors() {
            assert!(grads.get(&t).is_none(), "teacher parameter {name} received a gradient");
        }
        Ok(())
    }

    #[test]
    fn loss_fixtures() -> Result<()> {
        let a = teacher_like(DType::F64);
        assert!(scalar(&recovery_loss(&a, &a)?).abs() < 1e-12);
        // Orthogonal channel vectors at every pixel of every level.
        let mk = |first: bool| {
            let levels = [4usize, 2, 1]
                .iter()
                .map(|&s| {
                    let (x, y) = if first { (1.0, 0.0) } else { (0.0, 3.0) };
                    Tensor::cat(
                        &[
                            Tensor::full(x, (1, 1, s, s), &Device::Cpu).unwrap(),
                            Tensor::full(y, (1, 1, s, s), &Device::Cpu).unwrap(),
                        ],
                        1,
                    )
                    .unwrap()
                })
                .collect();
            FeaturePyramid::new(levels, PyramidSource::Recovery).unwrap()
        };
        assert!((scalar(&recovery_loss(&mk(true), &mk(false))?) - 3.0).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn pairing_mismatch_errors() {
        let a = teacher_like(DType::F64).with_ids(vec!["a".into(), "b".into()]);
        let b = teacher_like(DType::F64).with_ids(vec!["a".into(), "c".into()]);
        assert!(matches!(recovery_loss(&a, &b), Err(Error::Pairing { .. })));
    }

    #[test]
    fn hint_values() -> Result<()> {
        let a = teacher_like(DType::F64);
        let w = recovery_weight(&a, &a)?;
        for l in &w.levels {
            assert!((scalar(&l.min_all()?) - 1.0).abs() < 1e-12);
        }
        let neg = FeaturePyramid::new(a.levels.iter().map(|t| t.neg().unwrap()).collect(), PyramidSource::Recovery)?;
        let w = recovery_weight(&a, &neg)?;
        for l in &w.levels {
            assert!(scalar(&l.max_all()?).abs() < 1e-12);
        }
        // 60 degrees apart: hint = 1 - w = 0.5.
        let u = Tensor::new(&[1.0f64, 0.0], &Device::Cpu)?.reshape((1, 2, 1, 1))?;
        let v = Tensor::new(&[0.5f64, 3f64.sqrt() / 2.0], &Device::Cpu)?.reshape((1, 2, 1, 1))?;
        let pu = FeaturePyramid::new(vec![u.clone(), u.clone(), u], PyramidSource::TeacherOnNormal)?;
        let pv = FeaturePyramid::new(vec![v.clone(), v.clone(), v], PyramidSource::Recovery)?;
        let w = recovery_weight(&pu, &pv)?;
        assert!((1.0 - scalar(&w.levels[0].sum_all()?) - 0.5).abs() < 1e-12);
        Ok(())
    }
}
