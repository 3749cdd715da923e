//! Named parameter storage and the layers built on it.

use std::cell::Cell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::absn;
use crate::error::{Error, Result};

/// Half-width of the uniform weight distribution; gives standard deviation 0.2.
pub const WEIGHT_HALF_WIDTH: f64 = 2.0 * 1.732_050_807_568_877_2 / 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamKind {
    Weight,
    Bias { fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Ordered map of named trainable tensors. Ordering is lexicographic by name so
/// that iteration, checkpointing and optimizer state are deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

fn sample_weight<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-WEIGHT_HALF_WIDTH, WEIGHT_HALF_WIDTH).expect("valid range");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Xavier-uniform bound for a bias whose layer has the given fans.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn sample_bias<R: Rng>(n: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<f64> {
    let a = xavier_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self { params: BTreeMap::new(), dtype, device }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], kind: ParamKind) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidState(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), Param { var: var.clone(), kind });
        Ok(var)
    }

    /// Registers a weight initialized from the uniform weight distribution.
    pub fn weight<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> Result<Var> {
        let n = shape.iter().product();
        let values = sample_weight(n, rng);
        self.insert(name, values, shape, ParamKind::Weight)
    }

    /// Registers a bias initialized from the Xavier-uniform distribution of
    /// its layer.
    pub fn bias<R: Rng>(&mut self, name: &str, len: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Var> {
        let values = sample_bias(len, fan_in, fan_out, rng);
        self.insert(name, values, &[len], ParamKind::Bias { fan_in, fan_out })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).map(|p| &p.var)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().map(|p| p.var.clone()).collect()
    }

    /// Re-samples every parameter in name order from the given RNG.
    pub fn reinitialize<R: Rng>(&self, rng: &mut R) -> Result<()> {
        for p in self.params.values() {
            let n = p.var.elem_count();
            let values = match p.kind {
                ParamKind::Weight => sample_weight(n, rng),
                ParamKind::Bias { fan_in, fan_out } => sample_bias(n, fan_in, fan_out, rng),
            };
            let t = Tensor::from_vec(values, p.var.shape(), &self.device)?.to_dtype(self.dtype)?;
            p.var.set(&t)?;
        }
        Ok(())
    }

    /// Copies of all parameter values keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites parameter values from a name-keyed map. Every parameter must
    /// be present with a matching shape.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

/// Zero-padded 2-D cross-correlation computed as an unfold followed by a
/// matmul. Same result as `Tensor::conv2d`, but the CPU backward pass is
/// several times faster.
pub fn conv2d_unfold(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (o, _, k, _) = w.dims4()?;
    if h + 2 * padding < k || wd + 2 * padding < k {
        return Err(Error::invalid_arg(format!("input {h}x{wd} is smaller than the {k}x{k} kernel")));
    }
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (wd + 2 * padding - k) / stride + 1;
    if k == 1 && padding == 0 && stride == 1 {
        let y = w.reshape((1, o, c))?.broadcast_matmul(&x.reshape((b, c, h * wd))?)?;
        return Ok(y.reshape((b, o, h, wd))?);
    }
    // extra stride - 1 rows/cols at the end so every strided window exists
    let extra = stride - 1;
    let xp = x.pad_with_zeros(2, padding, padding + extra)?.pad_with_zeros(3, padding, padding + extra)?;
    let mut cols = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let mut s = xp.narrow(2, i, stride * ho)?.narrow(3, j, stride * wo)?;
            if stride > 1 {
                s = s
                    .reshape((b, c, ho, stride, wo, stride))?
                    .narrow(3, 0, 1)?
                    .narrow(5, 0, 1)?
                    .reshape((b, c, ho, wo))?;
            }
            cols.push(s);
        }
    }
    let cols = Tensor::stack(&cols, 2)?.reshape((b, c * k * k, ho * wo))?;
    let y = w.reshape((1, o, c * k * k))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((b, o, ho, wo))?)
}

/// 2-D convolution whose weight is optionally routed through ABSN on every
/// forward pass.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
    pub spectral: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.weight(&format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], rng)?;
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let bias = store.bias(&format!("{name}.bias"), out_channels, fan_in, fan_out, rng)?;
        Ok(Self { name: name.to_string(), weight, bias, stride, padding, spectral })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// The weight actually used in the convolution.
    pub fn effective_weight(&self) -> Result<Tensor> {
        let w = param_tensor(&self.weight);
        if self.spectral {
            absn::absn_apply_named(&w, &self.name)
        } else {
            Ok(w)
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims().get(1).copied().unwrap_or(0);
        if x.rank() != 4 || c != self.in_channels() {
            return Err(Error::invalid_arg(format!(
                "{}: expected (B, {}, H, W) input, got {:?}",
                self.name,
                self.in_channels(),
                x.dims()
            )));
        }
        let w = self.effective_weight()?;
        let y = conv2d_unfold(x, &w, self.padding, self.stride)?;
        let b = param_tensor(&self.bias).reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with parameters detached, so forward passes record no graph and
/// intermediates are freed as soon as they are consumed.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|g| g.replace(true)));
    f()
}

fn param_tensor(v: &Var) -> Tensor {
    if NO_GRAD.with(Cell::get) {
        v.as_tensor().detach()
    } else {
        v.as_tensor().clone()
    }
}

/// Anything that owns convolutions; used to audit which layers bypass ABSN.
pub trait VisitConvs {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d));

    fn conv_layers(&self) -> Vec<Conv2d> {
        let mut out = Vec::new();
        self.visit_convs(&mut |c| out.push(c.clone()));
        out
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(((x.relu()? * (1.0 - slope))? + (x * slope)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}
