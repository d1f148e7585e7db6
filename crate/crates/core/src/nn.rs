//! Small neural-network toolkit on top of candle tensors: seeded parameter
//! storage, convolution layers, differentiable bilinear resizing and an
//! AdamW optimizer whose state can be checkpointed.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±gain * sqrt(3 / fan_in)`.
    KaimingUniform { fan_in: usize, gain: f64 },
}

impl Init {
    pub fn relu(fan_in: usize) -> Self {
        Init::KaimingUniform {
            fan_in,
            gain: std::f64::consts::SQRT_2,
        }
    }

    pub fn linear(fan_in: usize) -> Self {
        Init::KaimingUniform { fan_in, gain: 1.0 }
    }
}

/// Named parameters of one network.
///
/// Trainable stores hand out tensors backed by [`Var`]s; frozen stores hand
/// out plain tensors that never take part in gradient computation.
/// Parameters are drawn from a seeded ChaCha stream in creation order, or
/// taken from `pretrained` when a tensor of that name is supplied.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    trainable: bool,
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
    frozen: BTreeMap<String, Tensor>,
    pretrained: HashMap<String, Tensor>,
}

impl ParamStore {
    pub fn new(device: &Device, dtype: DType, trainable: bool, seed: u64) -> Self {
        Self {
            device: device.clone(),
            dtype,
            trainable,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vars: BTreeMap::new(),
            frozen: BTreeMap::new(),
            pretrained: HashMap::new(),
        }
    }

    pub fn with_pretrained(mut self, tensors: HashMap<String, Tensor>) -> Self {
        self.pretrained = tensors;
        self
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Creates (or loads) a parameter. `frozen_override` forces a plain
    /// tensor even in a trainable store, e.g. batch-norm running statistics.
    fn create(&mut self, name: &str, shape: &[usize], init: Init, frozen_override: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        // Always consume the random stream so pretrained and random stores
        // stay aligned for the parameters that are not supplied.
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::KaimingUniform { fan_in, gain } => {
                let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| self.rng.random_range(-bound..=bound)).collect()
            }
        };
        let tensor = match self.pretrained.get(name) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(Error::Shape(format!(
                        "pretrained tensor {name} has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            None => Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?,
        };
        if self.trainable && !frozen_override {
            let var = Var::from_tensor(&tensor)?;
            let t = var.as_tensor().clone();
            self.vars.insert(name.to_string(), var);
            Ok(t)
        } else {
            self.frozen.insert(name.to_string(), tensor.clone());
            Ok(tensor)
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, shape, init, false)
    }

    pub fn get_frozen(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.create(name, shape, init, true)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Number of scalar parameters, trainable or not.
    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum::<usize>()
            + self.frozen.values().map(|t| t.elem_count()).sum::<usize>()
    }

    /// Every parameter tensor by name, frozen ones included.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self.frozen.clone();
        for (k, v) in &self.vars {
            out.insert(k.clone(), v.as_tensor().clone());
        }
        out
    }

    /// Overwrites trainable parameters from `tensors` (keys must match).
    pub fn load_vars(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over all parameter bytes in name order.
    pub fn digest(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            for v in flat {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// 2D convolution with square kernels.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn k(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        init: Option<Init>,
    ) -> Result<Self> {
        let fan_in = c_in / spec.groups * spec.kernel * spec.kernel;
        let weight = ps.get(
            &format!("{name}.weight"),
            &[c_out, c_in / spec.groups, spec.kernel, spec.kernel],
            init.unwrap_or(Init::relu(fan_in)),
        )?;
        let bias = if spec.bias {
            Some(ps.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }
}

/// Transposed convolution with kernel = stride = 2: exact 2x upsampling.
#[derive(Debug, Clone)]
pub struct Upconv2x {
    weight: Tensor,
    bias: Tensor,
}

impl Upconv2x {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = ps.get(&format!("{name}.weight"), &[c_in, c_out, 2, 2], Init::relu(c_in))?;
        let bias = ps.get(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, 0, 0, 2, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)?)
    }
}

/// Batch norm with fixed running statistics (inference form). The affine
/// parameters follow the store's trainability; statistics never train.
#[derive(Debug, Clone)]
pub struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    inv_std: Tensor,
    mean: Tensor,
}

impl FrozenBatchNorm {
    pub fn new(ps: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let weight = ps.get(&format!("{name}.weight"), &[c], Init::Ones)?;
        let bias = ps.get(&format!("{name}.bias"), &[c], Init::Zeros)?;
        let mean = ps.get_frozen(&format!("{name}.running_mean"), &[c], Init::Zeros)?;
        let var = ps.get_frozen(&format!("{name}.running_var"), &[c], Init::Ones)?;
        let inv_std = (var + 1e-5)?.sqrt()?.recip()?;
        Ok(Self {
            weight: weight.reshape((1, c, 1, 1))?,
            bias: bias.reshape((1, c, 1, 1))?,
            inv_std: inv_std.reshape((1, c, 1, 1))?,
            mean: mean.reshape((1, c, 1, 1))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scale = self.weight.mul(&self.inv_std)?;
        Ok(x
            .broadcast_sub(&self.mean)?
            .broadcast_mul(&scale)?
            .broadcast_add(&self.bias)?)
    }
}

/// Row-stochastic bilinear interpolation matrix (`out x inp`) with
/// half-pixel centers, matching `align_corners = false`.
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let f = src - i0 as f64;
        m[o * inp + i0] += 1.0 - f;
        m[o * inp + i1] += f;
    }
    m
}

/// Differentiable bilinear resize of a `[B, C, H, W]` tensor, expressed as
/// two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let awt = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    // [B*C*H, W] x [W, out_w]
    let rows = x.reshape((b * c * h, w))?.matmul(&awt)?;
    // [B*C, H, out_w] -> per-slice left product with ah.
    let cols = rows.reshape((b * c, h, out_w))?;
    let ah = ah.unsqueeze(0)?.broadcast_as((b * c, out_h, h))?.contiguous()?;
    let y = ah.matmul(&cols)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Decoupled-weight-decay Adam over a named set of variables.
pub struct AdamW {
    params: AdamWParams,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: BTreeMap<String, Var>, params: AdamWParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(k, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok((k, Slot { var, m, v }))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            slots,
            step: 0,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let p = self.params;
        let t = self.step as i32;
        let bc1 = 1.0 - p.beta1.powi(t);
        let bc2 = 1.0 - p.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Gradients carry op history; keeping it in the moments would
            // retain every step's graph.
            let g = g.detach();
            let g = &g;
            let theta = slot.var.as_tensor().detach();
            let m = ((&slot.m * p.beta1)? + (g * (1.0 - p.beta1))?)?;
            let v = ((&slot.v * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let decayed = (&theta * (1.0 - p.lr * p.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + p.eps)?)?;
            let next = (decayed - (update * p.lr)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>`, plus the step counter.
    pub fn state(&self) -> (HashMap<String, Tensor>, u64) {
        let mut out = HashMap::new();
        for (k, s) in &self.slots {
            out.insert(format!("m.{k}"), s.m.clone());
            out.insert(format!("v.{k}"), s.v.clone());
        }
        (out, self.step)
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: u64) -> Result<()> {
        for (k, s) in self.slots.iter_mut() {
            let get = |key: String| {
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing {key}")))
            };
            let dev = s.var.device().clone();
            let dt = s.var.dtype();
            s.m = get(format!("m.{k}"))?.to_dtype(dt)?.to_device(&dev)?;
            s.v = get(format!("v.{k}"))?.to_dtype(dt)?.to_device(&dev)?;
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(8, 4), (4, 8), (7, 3), (64, 16)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_bilinear_of_constant_is_constant() -> Result<()> {
        let x = Tensor::full(3.5f32, (2, 3, 4, 4), &Device::Cpu)?;
        let y = resize_bilinear(&x, 16, 16)?;
        assert_eq!(y.dims(), &[2, 3, 16, 16]);
        let v: Vec<f32> = y.flatten_all()?.to_vec1()?;
        assert!(v.iter().all(|a| (a - 3.5).abs() < 1e-5));
        Ok(())
    }

    #[test]
    fn resize_bilinear_has_gradients() -> Result<()> {
        let var = Var::new(&[[1f64, 2.0], [3.0, 4.0]], &Device::Cpu)?;
        let x = var.as_tensor().reshape((1, 1, 2, 2))?;
        let y = resize_bilinear(&x, 4, 4)?;
        let grads = y.sum_all()?.backward()?;
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all()?.to_vec1()?;
        // Each input pixel distributes total weight 4 over the 16 outputs.
        for v in g {
            assert!((v - 4.0).abs() < 1e-9);
        }
        Ok(())
    }

    #[test]
    fn adamw_minimizes_quadratic() -> Result<()> {
        let mut ps = ParamStore::new(&Device::Cpu, DType::F64, true, 0);
        let w = ps.get("w", &[3], Init::linear(1))?;
        let mut opt = AdamW::new(
            ps.vars().clone(),
            AdamWParams {
                lr: 0.05,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let target = Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu)?;
        for _ in 0..500 {
            let loss = (&w - &target)?.sqr()?.sum_all()?;
            opt.step(&loss.backward()?)?;
        }
        let got: Vec<f64> = w.to_vec1()?;
        for (a, b) in got.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-2, "{got:?}");
        }
        Ok(())
    }

    #[test]
    fn frozen_store_has_no_vars() -> Result<()> {
        let mut ps = ParamStore::new(&Device::Cpu, DType::F32, false, 0);
        let conv = Conv2d::new(&mut ps, "c", 3, 4, ConvSpec::k(3), None)?;
        assert!(ps.vars().is_empty());
        assert_eq!(ps.num_params(), 4 * 3 * 9 + 4);
        let x = Tensor::zeros((1, 3, 8, 8), DType::F32, &Device::Cpu)?;
        assert_eq!(conv.forward(&x)?.dims(), &[1, 4, 8, 8]);
        Ok(())
    }

    #[test]
    fn upconv_doubles_resolution() -> Result<()> {
        let mut ps = ParamStore::new(&Device::Cpu, DType::F32, true, 0);
        let up = Upconv2x::new(&mut ps, "u", 4, 2)?;
        let x = Tensor::ones((1, 4, 5, 5), DType::F32, &Device::Cpu)?;
        assert_eq!(up.forward(&x)?.dims(), &[1, 2, 10, 10]);
        Ok(())
    }
}
