//! Teacher and student feature extractors.
//!
//! Both networks emit a three-level pyramid at strides 4, 8 and 16. The
//! teacher is frozen; the student carries a learned 1x1 projection per level
//! that maps its channels onto the teacher's.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvSpec, FrozenBatchNorm, Init, ParamStore};
use crate::nn;

pub const LEVELS: usize = 3;
pub const LEVEL_STRIDES: [usize; LEVELS] = [4, 8, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PyramidSource {
    TeacherOnAnomalous,
    TeacherOnNormal,
    StudentOnAnomalous,
    Recovery,
}

/// Three `[B, C_i, H_i, W_i]` feature maps, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub source: PyramidSource,
    /// Identifiers of the batch items, when known.
    pub sample_ids: Vec<String>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Tensor>, source: PyramidSource) -> Result<Self> {
        if levels.len() != LEVELS {
            return Err(Error::Shape(format!(
                "a pyramid has {LEVELS} levels, got {}",
                levels.len()
            )));
        }
        Ok(Self {
            levels,
            source,
            sample_ids: Vec::new(),
        })
    }

    pub fn with_ids(mut self, ids: Vec<String>) -> Self {
        self.sample_ids = ids;
        self
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.dims().to_vec()).collect()
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|t| t.detach()).collect(),
            source: self.source,
            sample_ids: self.sample_ids.clone(),
        }
    }

    /// Errors unless every level has the same shape as `other`'s.
    pub fn check_aligned(&self, other: &FeaturePyramid) -> Result<()> {
        if self.shapes() != other.shapes() {
            return Err(Error::Shape(format!(
                "pyramid shapes differ: {:?} vs {:?}",
                self.shapes(),
                other.shapes()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    WideResnet50,
    EfficientnetB0,
    /// Small random conv stack with the teacher's stride contract.
    DeskTeacher,
    /// Small SiLU conv stack, architecturally distinct from `DeskTeacher`.
    DeskStudent,
}

impl Arch {
    pub fn weight_file(&self) -> Option<&'static str> {
        match self {
            Arch::WideResnet50 => Some("wide_resnet50_2.safetensors"),
            Arch::EfficientnetB0 => Some("efficientnet_b0.safetensors"),
            Arch::DeskTeacher | Arch::DeskStudent => None,
        }
    }

    pub fn channels(&self) -> [usize; LEVELS] {
        match self {
            Arch::WideResnet50 => [256, 512, 1024],
            Arch::EfficientnetB0 => [24, 40, 112],
            Arch::DeskTeacher => [32, 64, 128],
            Arch::DeskStudent => [16, 24, 48],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub teacher_arch: Arch,
    pub student_arch: Arch,
    /// Student is a fresh copy of the teacher architecture.
    pub homogeneous_mode: bool,
    /// Initialize the student trunk from pretrained weights when available.
    pub student_pretrained: bool,
    pub weights_dir: PathBuf,
    /// Seed of the random teacher used at desk scale.
    pub teacher_seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            teacher_arch: Arch::WideResnet50,
            student_arch: Arch::EfficientnetB0,
            homogeneous_mode: false,
            student_pretrained: true,
            weights_dir: PathBuf::from("weights"),
            teacher_seed: 20240,
        }
    }
}

impl BackboneSpec {
    pub fn desk() -> Self {
        Self {
            teacher_arch: Arch::DeskTeacher,
            student_arch: Arch::DeskStudent,
            homogeneous_mode: false,
            student_pretrained: false,
            weights_dir: PathBuf::from("weights"),
            teacher_seed: 20240,
        }
    }

    pub fn effective_student(&self) -> Arch {
        if self.homogeneous_mode {
            self.teacher_arch
        } else {
            self.student_arch
        }
    }
}

fn load_weights(dir: &Path, arch: Arch, device: &Device) -> Result<HashMap<String, Tensor>> {
    let Some(file) = arch.weight_file() else {
        return Ok(HashMap::new());
    };
    let path = dir.join(file);
    if !path.is_file() {
        return Err(Error::MissingWeights(path));
    }
    Ok(candle_core::safetensors::load(&path, device)?)
}

/// Convolution trunk emitting the three pyramid levels.
enum Trunk {
    Desk(DeskTeacherNet),
    DeskStudent(DeskStudentNet),
    Wrn(WideResNet),
    Eff(EfficientNet),
}

impl Trunk {
    fn build(arch: Arch, ps: &mut ParamStore) -> Result<Self> {
        Ok(match arch {
            Arch::DeskTeacher => Trunk::Desk(DeskTeacherNet::new(ps)?),
            Arch::DeskStudent => Trunk::DeskStudent(DeskStudentNet::new(ps)?),
            Arch::WideResnet50 => Trunk::Wrn(WideResNet::new(ps)?),
            Arch::EfficientnetB0 => Trunk::Eff(EfficientNet::new(ps)?),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self {
            Trunk::Desk(n) => n.forward(x),
            Trunk::DeskStudent(n) => n.forward(x),
            Trunk::Wrn(n) => n.forward(x),
            Trunk::Eff(n) => n.forward(x),
        }
    }
}

fn check_input(x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    if c != 3 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Shape(format!(
            "backbone input must be [B,3,H,W] with H,W divisible by 32, got {:?}",
            x.dims()
        )));
    }
    Ok(())
}

/// Frozen pretrained teacher.
pub struct Teacher {
    arch: Arch,
    trunk: Trunk,
    store: ParamStore,
}

impl Teacher {
    pub fn new(spec: &BackboneSpec, device: &Device, dtype: DType) -> Result<Self> {
        let weights = load_weights(&spec.weights_dir, spec.teacher_arch, device)?;
        let mut store = ParamStore::new(device, dtype, false, spec.teacher_seed).with_pretrained(weights);
        let trunk = Trunk::build(spec.teacher_arch, &mut store)?;
        Ok(Self {
            arch: spec.teacher_arch,
            trunk,
            store,
        })
    }

    pub fn channels(&self) -> [usize; LEVELS] {
        self.arch.channels()
    }

    /// Features of a normalized `[B,3,H,W]` batch. Outputs are detached.
    pub fn forward(&self, x: &Tensor, source: PyramidSource) -> Result<FeaturePyramid> {
        check_input(x)?;
        let levels = self.trunk.forward(&x.detach())?;
        FeaturePyramid::new(levels.into_iter().map(|t| t.detach()).collect(), source)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn digest(&self) -> Result<String> {
        self.store.digest()
    }
}

/// Learnable student with per-level channel projections.
pub struct Student {
    trunk: Trunk,
    proj: Vec<Conv2d>,
    store: ParamStore,
}

impl Student {
    pub fn new(spec: &BackboneSpec, device: &Device, dtype: DType, seed: u64) -> Result<Self> {
        let arch = spec.effective_student();
        let weights = if spec.student_pretrained {
            load_weights(&spec.weights_dir, arch, device)?
        } else {
            HashMap::new()
        };
        let mut store = ParamStore::new(device, dtype, true, seed).with_pretrained(weights);
        let trunk = Trunk::build(arch, &mut store)?;
        let src = arch.channels();
        let dst = spec.teacher_arch.channels();
        let proj = (0..LEVELS)
            .map(|i| {
                Conv2d::new(
                    &mut store,
                    &format!("proj.{i}"),
                    src[i],
                    dst[i],
                    ConvSpec::k(1),
                    Some(Init::linear(src[i])),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { trunk, proj, store })
    }

    pub fn forward(&self, x: &Tensor) -> Result<FeaturePyramid> {
        check_input(x)?;
        let raw = self.trunk.forward(x)?;
        let levels = raw
            .iter()
            .zip(&self.proj)
            .map(|(f, p)| p.forward(f))
            .collect::<Result<Vec<_>>>()?;
        FeaturePyramid::new(levels, PyramidSource::StudentOnAnomalous)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }
}

struct DeskTeacherNet {
    convs: Vec<Conv2d>,
}

impl DeskTeacherNet {
    // (c_in, c_out, stride); levels are tapped after indices 2, 4 and 6.
    const LAYERS: [(usize, usize, usize); 7] = [
        (3, 16, 2),
        (16, 32, 2),
        (32, 32, 1),
        (32, 64, 2),
        (64, 64, 1),
        (64, 128, 2),
        (128, 128, 1),
    ];

    fn new(ps: &mut ParamStore) -> Result<Self> {
        let convs = Self::LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| Conv2d::new(ps, &format!("conv{i}"), ci, co, ConvSpec::k(3).stride(s), None))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(LEVELS);
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?.relu()?;
            if matches!(i, 2 | 4 | 6) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }
}

struct DeskStudentNet {
    convs: Vec<Conv2d>,
}

impl DeskStudentNet {
    // (c_in, c_out, kernel, stride); levels tapped after indices 1, 3 and 4.
    const LAYERS: [(usize, usize, usize, usize); 5] = [
        (3, 12, 3, 2),
        (12, 16, 3, 2),
        (16, 24, 3, 2),
        (24, 24, 1, 1),
        (24, 48, 3, 2),
    ];

    fn new(ps: &mut ParamStore) -> Result<Self> {
        let convs = Self::LAYERS
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k, s))| Conv2d::new(ps, &format!("conv{i}"), ci, co, ConvSpec::k(k).stride(s), None))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(LEVELS);
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?.silu()?;
            if matches!(i, 1 | 3 | 4) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }
}

/// Conv + frozen-statistics batch norm, no bias (torchvision layout).
struct ConvBn {
    conv: Conv2d,
    bn: FrozenBatchNorm,
}

impl ConvBn {
    fn new(ps: &mut ParamStore, conv: &str, bn: &str, ci: usize, co: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ps, conv, ci, co, spec.no_bias(), None)?,
            bn: FrozenBatchNorm::new(ps, bn, co)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?)
    }
}

struct Bottleneck {
    c1: ConvBn,
    c2: ConvBn,
    c3: ConvBn,
    down: Option<ConvBn>,
}

impl Bottleneck {
    fn new(ps: &mut ParamStore, p: &str, inplanes: usize, width: usize, out: usize, stride: usize) -> Result<Self> {
        let c1 = ConvBn::new(ps, &format!("{p}.conv1"), &format!("{p}.bn1"), inplanes, width, ConvSpec::k(1))?;
        let c2 = ConvBn::new(
            ps,
            &format!("{p}.conv2"),
            &format!("{p}.bn2"),
            width,
            width,
            ConvSpec::k(3).stride(stride),
        )?;
        let c3 = ConvBn::new(ps, &format!("{p}.conv3"), &format!("{p}.bn3"), width, out, ConvSpec::k(1))?;
        let down = if stride != 1 || inplanes != out {
            Some(ConvBn::new(
                ps,
                &format!("{p}.downsample.0"),
                &format!("{p}.downsample.1"),
                inplanes,
                out,
                ConvSpec::k(1).stride(stride),
            )?)
        } else {
            None
        };
        Ok(Self { c1, c2, c3, down })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(x)?.relu()?;
        let h = self.c2.forward(&h)?.relu()?;
        let h = self.c3.forward(&h)?;
        let skip = match &self.down {
            Some(d) => d.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// WideResNet-50-2 through `layer3`, with torchvision parameter names.
struct WideResNet {
    stem: ConvBn,
    layers: Vec<Vec<Bottleneck>>,
}

impl WideResNet {
    fn new(ps: &mut ParamStore) -> Result<Self> {
        let stem = ConvBn::new(
            ps,
            "conv1",
            "bn1",
            3,
            64,
            ConvSpec {
                kernel: 7,
                stride: 2,
                padding: 3,
                groups: 1,
                bias: false,
            },
        )?;
        let mut inplanes = 64;
        let mut layers = Vec::new();
        for (li, (planes, blocks, stride)) in [(64usize, 3usize, 1usize), (128, 4, 2), (256, 6, 2)]
            .into_iter()
            .enumerate()
        {
            let width = planes * 2;
            let out = planes * 4;
            let mut layer = Vec::new();
            for b in 0..blocks {
                let s = if b == 0 { stride } else { 1 };
                layer.push(Bottleneck::new(ps, &format!("layer{}.{b}", li + 1), inplanes, width, out, s)?);
                inplanes = out;
            }
            layers.push(layer);
        }
        Ok(Self { stem, layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let h = self.stem.forward(x)?.relu()?;
        // Zero padding is exact for max pooling after a ReLU.
        let h = h.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut h = h.max_pool2d_with_stride(3, 2)?;
        let mut out = Vec::with_capacity(LEVELS);
        for layer in &self.layers {
            for block in layer {
                h = block.forward(&h)?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }
}

struct MbConv {
    expand: Option<ConvBn>,
    depthwise: ConvBn,
    se_reduce: Conv2d,
    se_expand: Conv2d,
    project: ConvBn,
    residual: bool,
}

impl MbConv {
    fn new(
        ps: &mut ParamStore,
        p: &str,
        expand_ratio: usize,
        kernel: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let exp = c_in * expand_ratio;
        let mut idx = 0;
        let expand = if expand_ratio != 1 {
            idx = 1;
            Some(ConvBn::new(
                ps,
                &format!("{p}.block.0.0"),
                &format!("{p}.block.0.1"),
                c_in,
                exp,
                ConvSpec::k(1),
            )?)
        } else {
            None
        };
        let depthwise = ConvBn::new(
            ps,
            &format!("{p}.block.{idx}.0"),
            &format!("{p}.block.{idx}.1"),
            exp,
            exp,
            ConvSpec::k(kernel).stride(stride).groups(exp),
        )?;
        let squeeze = (c_in / 4).max(1);
        let se_reduce = Conv2d::new(ps, &format!("{p}.block.{}.fc1", idx + 1), exp, squeeze, ConvSpec::k(1), None)?;
        let se_expand = Conv2d::new(ps, &format!("{p}.block.{}.fc2", idx + 1), squeeze, exp, ConvSpec::k(1), None)?;
        let project = ConvBn::new(
            ps,
            &format!("{p}.block.{}.0", idx + 2),
            &format!("{p}.block.{}.1", idx + 2),
            exp,
            c_out,
            ConvSpec::k(1),
        )?;
        Ok(Self {
            expand,
            depthwise,
            se_reduce,
            se_expand,
            project,
            residual: stride == 1 && c_in == c_out,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        if let Some(e) = &self.expand {
            h = e.forward(&h)?.silu()?;
        }
        h = self.depthwise.forward(&h)?.silu()?;
        let s = h.mean_keepdim(2)?.mean_keepdim(3)?;
        let s = self.se_reduce.forward(&s)?.silu()?;
        let s = nn::sigmoid(&self.se_expand.forward(&s)?)?;
        h = h.broadcast_mul(&s)?;
        h = self.project.forward(&h)?;
        if self.residual {
            h = (h + x)?;
        }
        Ok(h)
    }
}

/// EfficientNet-b0 through `features.5`, torchvision parameter names.
struct EfficientNet {
    stem: ConvBn,
    stages: Vec<Vec<MbConv>>,
}

impl EfficientNet {
    // (expand, kernel, stride, c_in, c_out, repeats) for features.1..=5
    const STAGES: [(usize, usize, usize, usize, usize, usize); 5] = [
        (1, 3, 1, 32, 16, 1),
        (6, 3, 2, 16, 24, 2),
        (6, 5, 2, 24, 40, 2),
        (6, 3, 2, 40, 80, 3),
        (6, 5, 1, 80, 112, 3),
    ];

    fn new(ps: &mut ParamStore) -> Result<Self> {
        let stem = ConvBn::new(ps, "features.0.0", "features.0.1", 3, 32, ConvSpec::k(3).stride(2))?;
        let mut stages = Vec::new();
        for (si, &(e, k, s, ci, co, n)) in Self::STAGES.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let (stride, c_in) = if b == 0 { (s, ci) } else { (1, co) };
                blocks.push(MbConv::new(ps, &format!("features.{}.{b}", si + 1), e, k, stride, c_in, co)?);
            }
            stages.push(blocks);
        }
        Ok(Self { stem, stages })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.stem.forward(x)?.silu()?;
        let mut out = Vec::with_capacity(LEVELS);
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                h = block.forward(&h)?;
            }
            // features.2, features.3 and features.5 sit at strides 4, 8, 16.
            if matches!(si + 1, 2 | 3 | 5) {
                out.push(h.clone());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(h: usize, v: f32) -> Tensor {
        Tensor::full(v, (1, 3, h, h), &Device::Cpu).unwrap()
    }

    #[test]
    fn desk_level_shapes_and_alignment() -> Result<()> {
        let spec = BackboneSpec::desk();
        let t = Teacher::new(&spec, &Device::Cpu, DType::F32)?;
        let s = Student::new(&spec, &Device::Cpu, DType::F32, 1)?;
        for res in [64, 96, 128] {
            let x = input(res, 0.3);
            let ft = t.forward(&x, PyramidSource::TeacherOnAnomalous)?;
            let fs = s.forward(&x)?;
            for (i, l) in ft.levels.iter().enumerate() {
                let side = res / LEVEL_STRIDES[i];
                assert_eq!(l.dims(), &[1, t.channels()[i], side, side]);
            }
            fs.check_aligned(&ft)?;
        }
        Ok(())
    }

    #[test]
    fn teacher_is_deterministic_and_finite_on_zeros() -> Result<()> {
        let t = Teacher::new(&BackboneSpec::desk(), &Device::Cpu, DType::F32)?;
        let x = input(64, 0.0);
        let a = t.forward(&x, PyramidSource::TeacherOnNormal)?;
        let b = t.forward(&x, PyramidSource::TeacherOnNormal)?;
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            let va: Vec<f32> = la.flatten_all()?.to_vec1()?;
            let vb: Vec<f32> = lb.flatten_all()?.to_vec1()?;
            assert_eq!(va, vb);
            assert!(va.iter().all(|v| v.is_finite()));
        }
        assert!(t.store().vars().is_empty());
        Ok(())
    }

    #[test]
    fn rejects_bad_resolution() {
        let t = Teacher::new(&BackboneSpec::desk(), &Device::Cpu, DType::F32).unwrap();
        assert!(t.forward(&input(48, 0.0), PyramidSource::TeacherOnNormal).is_err());
    }

    #[test]
    fn missing_pretrained_weights_name_the_file() {
        let spec = BackboneSpec {
            weights_dir: PathBuf::from("/nonexistent/cache"),
            ..BackboneSpec::default()
        };
        match Teacher::new(&spec, &Device::Cpu, DType::F32) {
            Err(Error::MissingWeights(p)) => assert!(p.ends_with("wide_resnet50_2.safetensors")),
            other => panic!("expected missing weights, got {:?}", other.err()),
        }
    }

    #[test]
    fn desk_heterogeneous_student_is_smaller() -> Result<()> {
        let hetero = Student::new(&BackboneSpec::desk(), &Device::Cpu, DType::F32, 0)?;
        let homo = Student::new(
            &BackboneSpec {
                homogeneous_mode: true,
                ..BackboneSpec::desk()
            },
            &Device::Cpu,
            DType::F32,
            0,
        )?;
        assert!(hetero.num_params() < homo.num_params());
        Ok(())
    }

    #[test]
    fn full_backbones_shapes_and_param_counts() -> Result<()> {
        // Random weights; only the architecture contract is checked here.
        let dev = Device::Cpu;
        let mut ps_t = ParamStore::new(&dev, DType::F32, false, 0);
        let wrn = WideResNet::new(&mut ps_t)?;
        let mut ps_s = ParamStore::new(&dev, DType::F32, false, 0);
        let eff = EfficientNet::new(&mut ps_s)?;
        assert!(ps_s.num_params() < ps_t.num_params());
        let x = input(64, 0.1);
        let ft = wrn.forward(&x)?;
        let fs = eff.forward(&x)?;
        for i in 0..LEVELS {
            let side = 64 / LEVEL_STRIDES[i];
            assert_eq!(ft[i].dims(), &[1, Arch::WideResnet50.channels()[i], side, side]);
            assert_eq!(fs[i].dims(), &[1, Arch::EfficientnetB0.channels()[i], side, side]);
        }
        Ok(())
    }
}
