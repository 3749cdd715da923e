//! Generator building blocks: the convolutional block, spatial-channel
//! attention, the fixed Lanczos2 upsampler and parameter initialization.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{leaky_relu, sigmoid, Conv2d, ParamStore, VisitConvs};

pub const LEAKY_SLOPE: f64 = 0.2;
const RMS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl AttentionConfig {
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }
}

/// Two pointwise layers mapping pooled mean/RMS statistics to sigmoid gates.
#[derive(Debug, Clone)]
struct Gate {
    squeeze: Conv2d,
    excite: Conv2d,
}

impl Gate {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            squeeze: Conv2d::new(store, &format!("{name}.squeeze"), 2 * c, cfg.hidden(), 1, 1, 0, true, rng)?,
            excite: Conv2d::new(store, &format!("{name}.excite"), cfg.hidden(), c, 1, 1, 0, true, rng)?,
        })
    }

    /// `stats` holds mean and RMS statistics concatenated along channels.
    fn forward(&self, stats: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.squeeze.forward(stats)?, LEAKY_SLOPE)?;
        sigmoid(&self.excite.forward(&h)?)
    }
}

fn mean_rms(x: &Tensor, dims: &[usize]) -> Result<(Tensor, Tensor)> {
    let mut mean = x.clone();
    let mut sq = x.sqr()?;
    for &d in dims {
        mean = mean.mean_keepdim(d)?;
        sq = sq.mean_keepdim(d)?;
    }
    let rms = (sq + RMS_EPS)?.sqrt()?;
    Ok((mean, rms))
}

/// Channel, height, width and channel attention followed by a spatial
/// attention stage over mean- and RMS-pooled channel statistics.
#[derive(Debug, Clone)]
pub struct SpatialChannelAttention {
    pub cfg: AttentionConfig,
    channel_in: Gate,
    height: Gate,
    width: Gate,
    channel_out: Gate,
    /// Final layer of the module; exempt from ABSN.
    pub spatial: Conv2d,
}

/// Output of an attention pass together with every gate it applied.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub output: Tensor,
    pub channel_in: Tensor,
    pub height: Tensor,
    pub width: Tensor,
    pub channel_out: Tensor,
    pub spatial: Tensor,
}

impl SpatialChannelAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels == 0 || cfg.reduction == 0 {
            return Err(Error::InvalidConfiguration("attention channels and reduction must be positive".into()));
        }
        Ok(Self {
            cfg,
            channel_in: Gate::new(store, &format!("{name}.channel_in"), cfg, rng)?,
            height: Gate::new(store, &format!("{name}.height"), cfg, rng)?,
            width: Gate::new(store, &format!("{name}.width"), cfg, rng)?,
            channel_out: Gate::new(store, &format!("{name}.channel_out"), cfg, rng)?,
            spatial: Conv2d::new(store, &format!("{name}.spatial"), 2, 1, 7, 1, 3, false, rng)?,
        })
    }

    fn axis_gate(gate: &Gate, x: &Tensor, pool_dims: &[usize]) -> Result<Tensor> {
        let (m, r) = mean_rms(x, pool_dims)?;
        gate.forward(&Tensor::cat(&[&m, &r], 1)?)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<AttentionTrace> {
        // channel -> height -> width -> channel
        let g_c1 = Self::axis_gate(&self.channel_in, x, &[2, 3])?;
        let x = x.broadcast_mul(&g_c1)?;
        let g_h = Self::axis_gate(&self.height, &x, &[3])?;
        let x = x.broadcast_mul(&g_h)?;
        let g_w = Self::axis_gate(&self.width, &x, &[2])?;
        let x = x.broadcast_mul(&g_w)?;
        let g_c2 = Self::axis_gate(&self.channel_out, &x, &[2, 3])?;
        let x = x.broadcast_mul(&g_c2)?;
        let (m, r) = mean_rms(&x, &[1])?;
        let g_s = sigmoid(&self.spatial.forward(&Tensor::cat(&[&m, &r], 1)?)?)?;
        let output = x.broadcast_mul(&g_s)?;
        Ok(AttentionTrace { output, channel_in: g_c1, height: g_h, width: g_w, channel_out: g_c2, spatial: g_s })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(x)?.output)
    }
}

impl VisitConvs for SpatialChannelAttention {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        for g in [&self.channel_in, &self.height, &self.width, &self.channel_out] {
            f(&g.squeeze);
            f(&g.excite);
        }
        f(&self.spatial);
    }
}

pub fn esca_spatial_attention(x: &Tensor, module: &SpatialChannelAttention) -> Result<Tensor> {
    module.forward(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub inner_convs: usize,
    pub use_residual: bool,
    pub use_attention: bool,
    /// Channel count of the skip connection concatenated onto the input, if any.
    pub skip_channels: Option<usize>,
    pub attention_reduction: usize,
}

impl ConvBlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            inner_convs: 2,
            use_residual: false,
            use_attention: false,
            skip_channels: None,
            attention_reduction: 8,
        }
    }

    pub fn residual(mut self, on: bool) -> Self {
        self.use_residual = on;
        self
    }

    pub fn attention(mut self, on: bool) -> Self {
        self.use_attention = on;
        self
    }

    pub fn skip(mut self, channels: usize) -> Self {
        self.skip_channels = Some(channels);
        self
    }
}

/// Channel-adapting 3×3 convolution (receiving the skip connection), a stack
/// of channel-preserving 3×3 convolutions, optional attention and optional
/// residual connection from the channel-adapted feature.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub cfg: ConvBlockConfig,
    pub adapt: Conv2d,
    pub inner: Vec<Conv2d>,
    pub attention: Option<SpatialChannelAttention>,
}

impl ConvBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: ConvBlockConfig, rng: &mut R) -> Result<Self> {
        if cfg.inner_convs == 0 || cfg.in_channels == 0 || cfg.out_channels == 0 {
            return Err(Error::InvalidConfiguration(format!("{name}: block dimensions must be positive")));
        }
        let first_in = cfg.in_channels + cfg.skip_channels.unwrap_or(0);
        let adapt = Conv2d::new(store, &format!("{name}.adapt"), first_in, cfg.out_channels, 3, 1, 1, true, rng)?;
        let inner = (0..cfg.inner_convs)
            .map(|i| Conv2d::new(store, &format!("{name}.conv{i}"), cfg.out_channels, cfg.out_channels, 3, 1, 1, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let attention = if cfg.use_attention {
            let acfg = AttentionConfig { channels: cfg.out_channels, reduction: cfg.attention_reduction };
            Some(SpatialChannelAttention::new(store, &format!("{name}.attention"), acfg, rng)?)
        } else {
            None
        };
        Ok(Self { cfg, adapt, inner, attention })
    }

    pub fn forward(&self, x: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4().map_err(|_| Error::invalid_arg(format!("block input must be rank 4, got {:?}", x.dims())))?;
        if c != self.cfg.in_channels {
            return Err(Error::invalid_arg(format!("block expects {} channels, got {c}", self.cfg.in_channels)));
        }
        let input = match (skip, self.cfg.skip_channels) {
            (Some(s), Some(sc)) => {
                let (_, c2, h2, w2) = s.dims4()?;
                if c2 != sc || h2 != h || w2 != w {
                    return Err(Error::invalid_arg(format!(
                        "skip connection {:?} does not match block input {:?} / {sc} channels",
                        s.dims(),
                        x.dims()
                    )));
                }
                Tensor::cat(&[x, s], 1)?
            }
            (None, None) => x.clone(),
            (Some(_), None) => return Err(Error::invalid_arg("block does not accept a skip connection")),
            (None, Some(_)) => return Err(Error::invalid_arg("block requires a skip connection")),
        };
        let adapted = leaky_relu(&self.adapt.forward(&input)?, LEAKY_SLOPE)?;
        let mut h = adapted.clone();
        for conv in &self.inner {
            h = leaky_relu(&conv.forward(&h)?, LEAKY_SLOPE)?;
        }
        if let Some(att) = &self.attention {
            h = att.forward(&h)?;
        }
        if self.cfg.use_residual {
            h = (h + adapted)?;
        }
        Ok(h)
    }
}

impl VisitConvs for ConvBlock {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        f(&self.adapt);
        self.inner.iter().for_each(|c| f(c));
        if let Some(a) = &self.attention {
            a.visit_convs(f);
        }
    }
}

/// Block-level entry point matching the module contract.
pub fn conv_block_forward(block: &ConvBlock, x: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
    block.forward(x, skip)
}

fn sinc(t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        let a = std::f64::consts::PI * t;
        a.sin() / a
    }
}

/// Lanczos kernel with two lobes, `sinc(t)·sinc(t/2)` on `|t| < 2`.
pub fn lanczos2(t: f64) -> f64 {
    if t.abs() >= 2.0 {
        0.0
    } else {
        sinc(t) * sinc(t / 2.0)
    }
}

/// Normalized 2× upsampling taps. Output `2m` sits at input coordinate
/// `m − 1/4` and reads inputs `m−2..=m+1`; output `2m+1` sits at `m + 1/4` and
/// reads inputs `m−1..=m+2`.
pub fn lanczos2_taps() -> [[f64; 4]; 2] {
    let mut taps = [[0.0; 4]; 2];
    for (phase, row) in taps.iter_mut().enumerate() {
        let (center, first) = if phase == 0 { (-0.25, -2.0) } else { (0.25, -1.0) };
        for (k, tap) in row.iter_mut().enumerate() {
            *tap = lanczos2(center - (first + k as f64));
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|t| *t /= s);
    }
    taps
}

/// Dense `(2n, n)` matrix of the 1-D upsampler with zero extension.
pub fn lanczos2_matrix(n: usize) -> Vec<f64> {
    let taps = lanczos2_taps();
    let mut m = vec![0.0; 2 * n * n];
    for o in 0..2 * n {
        let (base, first) = (o / 2, if o % 2 == 0 { -2i64 } else { -1 });
        for (k, &tap) in taps[o % 2].iter().enumerate() {
            let j = base as i64 + first + k as i64;
            if j >= 0 && (j as usize) < n {
                m[o * n + j as usize] = tap;
            }
        }
    }
    m
}

/// Applies row operator `rows` (shape `(h', h)`) and column operator `cols`
/// (shape `(w', w)`) to every plane of a `(B, C, h, w)` map.
pub(crate) fn separable(x: &Tensor, rows: &[f64], rows_shape: (usize, usize), cols: &[f64], cols_shape: (usize, usize)) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let dev = x.device();
    let dt = x.dtype();
    let r = Tensor::from_slice(rows, rows_shape, dev)?.to_dtype(dt)?;
    let ct = Tensor::from_slice(cols, cols_shape, dev)?.to_dtype(dt)?.t()?.contiguous()?;
    let planes = x.reshape((b * c * h, w))?.matmul(&ct)?; // (b*c*h, w')
    let w2 = cols_shape.0;
    let planes = planes.reshape((b * c, h, w2))?;
    let r = r.unsqueeze(0)?.broadcast_as((b * c, rows_shape.0, h))?.contiguous()?;
    let out = r.matmul(&planes)?;
    Ok(out.reshape((b, c, rows_shape.0, w2))?)
}

/// Doubles height and width with the fixed Lanczos2 kernel; channels are
/// unchanged. Equivalent to a stride-2 transposed convolution with the
/// interleaved separable kernel.
pub fn lanczos2_upsample(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4().map_err(|_| Error::invalid_arg("upsample input must be rank 4"))?;
    separable(x, &lanczos2_matrix(h), (2 * h, h), &lanczos2_matrix(w), (2 * w, w))
}

/// Median of a sample of target-domain pixels, per channel.
pub fn channel_medians(images: &[Tensor]) -> Result<Vec<f64>> {
    let first = images.first().ok_or_else(|| Error::invalid_arg("no images for median"))?;
    let c = first.dim(first.rank() - 3)?;
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); c];
    for img in images {
        let img = img.to_dtype(DType::F64)?;
        let img = if img.rank() == 4 { img.squeeze(0)? } else { img };
        for (ch, acc) in per.iter_mut().enumerate() {
            acc.extend(img.get(ch)?.flatten_all()?.to_vec1::<f64>()?);
        }
    }
    Ok(per
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| a.total_cmp(b));
            let n = v.len();
            if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
        })
        .collect())
}

/// Bias that makes `tanh(bias)` equal the target median.
pub fn median_bias(median: f64) -> f64 {
    median.clamp(-1.0 + 1e-4, 1.0 - 1e-4).atanh()
}

/// Re-samples every parameter (weights uniform with std 0.2, biases
/// Xavier-uniform) and sets each output layer's bias so that its tanh output
/// equals the target-domain median. A missing median leaves bias 0.
pub fn init_parameters(stores: &[&ParamStore], output_layers: &[(&Conv2d, Option<&[f64]>)], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in stores {
        s.reinitialize(&mut rng)?;
    }
    for (layer, medians) in output_layers {
        let c = layer.out_channels();
        let values: Vec<f64> = match medians {
            Some(m) if !m.is_empty() => (0..c).map(|i| median_bias(m[i.min(m.len() - 1)])).collect(),
            _ => {
                log::warn!("{}: target-domain median unavailable, output bias set to 0", layer.name);
                vec![0.0; c]
            }
        };
        let t = Tensor::from_vec(values, c, layer.bias.device())?.to_dtype(layer.bias.dtype())?;
        layer.bias.set(&t)?;
    }
    Ok(())
}
