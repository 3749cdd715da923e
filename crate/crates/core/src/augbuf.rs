//! Differentiable scale augmentation and replay buffers.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::separable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleAugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub enabled: bool,
}

impl Default for ScaleAugmentConfig {
    fn default() -> Self {
        Self { scale_min: 0.75, scale_max: 1.5, enabled: true }
    }
}

impl ScaleAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(Error::InvalidConfiguration(format!(
                "scale range [{}, {}] is invalid",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

/// Interpolation matrix `(m, n)` resampling a length-`n` signal to length `m`
/// with half-pixel centers.
pub fn bilinear_matrix(n: usize, m: usize) -> Vec<f64> {
    let mut a = vec![0.0; m * n];
    let ratio = n as f64 / m as f64;
    for i in 0..m {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let f = src - i0 as f64;
        a[i * n + i0] += 1.0 - f;
        a[i * n + i1] += f;
    }
    a
}

/// Mirror index into `0..m` without repeating the edge sample.
pub fn reflect_index(i: i64, m: usize) -> usize {
    if m == 1 {
        return 0;
    }
    let period = 2 * (m as i64 - 1);
    let k = i.rem_euclid(period);
    (if k < m as i64 { k } else { period - k }) as usize
}

fn matmul_dense(a: &[f64], (r, k): (usize, usize), b: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for t in 0..k {
            let av = a[i * k + t];
            if av != 0.0 {
                for j in 0..c {
                    out[i * c + j] += av * b[t * c + j];
                }
            }
        }
    }
    out
}

/// One sampled rescaling: zoom factor plus, for zoom-in, the crop origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTransform {
    pub scale: f64,
    /// Crop origin (row, col) into the upscaled image; ignored for `scale ≤ 1`.
    pub offset: (usize, usize),
}

impl ScaleTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, offset: (0, 0) }
    }

    /// Draws a scale from the configured range and a uniform crop origin for
    /// an `h × w` image.
    pub fn sample<R: Rng>(cfg: &ScaleAugmentConfig, h: usize, w: usize, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
        let (sh, sw) = (scaled(h, scale), scaled(w, scale));
        let oy = if sh > h { rng.random_range(0..=sh - h) } else { 0 };
        let ox = if sw > w { rng.random_range(0..=sw - w) } else { 0 };
        Self { scale, offset: (oy, ox) }
    }

    /// `(n, n)` operator for one axis: resample then pad or crop back to `n`.
    fn axis_operator(&self, n: usize, offset: usize) -> Vec<f64> {
        let m = scaled(n, self.scale);
        let resample = bilinear_matrix(n, m);
        let mut select = vec![0.0; n * m];
        if m <= n {
            let before = (n - m) / 2;
            for o in 0..n {
                select[o * m + reflect_index(o as i64 - before as i64, m)] = 1.0;
            }
        } else {
            let off = offset.min(m - n);
            for o in 0..n {
                select[o * m + off + o] = 1.0;
            }
        }
        matmul_dense(&select, (n, m), &resample, n)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid_arg(format!("scale must be positive, got {}", self.scale)));
        }
        if self.scale == 1.0 {
            return Ok(x.clone());
        }
        let (_, _, h, w) = x.dims4().map_err(|_| Error::invalid_arg("augmentation input must be rank 4"))?;
        let rows = self.axis_operator(h, self.offset.0);
        let cols = self.axis_operator(w, self.offset.1);
        separable(x, &rows, (h, h), &cols, (w, w))
    }
}

fn scaled(n: usize, s: f64) -> usize {
    ((n as f64 * s).round() as usize).max(1)
}

/// Rescales `x` by `s` and restores its spatial size: reflection padding when
/// zooming out, a random crop when zooming in. Differentiable in `x`.
pub fn scale_augment<R: Rng>(x: &Tensor, s: f64, rng: &mut R) -> Result<Tensor> {
    if !(s > 0.0) {
        return Err(Error::invalid_arg(format!("scale must be positive, got {s}")));
    }
    let (_, _, h, w) = x.dims4().map_err(|_| Error::invalid_arg("augmentation input must be rank 4"))?;
    let (sh, sw) = (scaled(h, s), scaled(w, s));
    let oy = if sh > h { rng.random_range(0..=sh - h) } else { 0 };
    let ox = if sw > w { rng.random_range(0..=sw - w) } else { 0 };
    ScaleTransform { scale: s, offset: (oy, ox) }.apply(x)
}

/// Bounded pool of past generator outputs. Stored tensors are detached copies.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Tensor>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Vec::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Tensor] {
        &self.items
    }

    /// Restores contents from a checkpoint.
    pub fn set_items(&mut self, items: Vec<Tensor>) {
        self.items = items;
        self.items.truncate(self.capacity);
    }

    /// Inserts a detached copy of `current`, evicting a uniformly chosen entry
    /// when full, then returns a uniformly drawn stored entry. If the buffer
    /// was empty, the draw is a copy of `current`.
    pub fn push_sample<R: Rng>(&mut self, current: &Tensor, rng: &mut R) -> Result<Tensor> {
        let stored = current.detach().copy()?;
        if self.items.is_empty() {
            self.items.push(stored.clone());
            return Ok(stored);
        }
        if self.items.len() < self.capacity {
            self.items.push(stored);
        } else {
            let k = rng.random_range(0..self.items.len());
            self.items[k] = stored;
        }
        let k = rng.random_range(0..self.items.len());
        Ok(self.items[k].clone())
    }
}

pub fn buffer_push_sample<R: Rng>(buf: &mut ReplayBuffer, current: &Tensor, rng: &mut R) -> Result<Tensor> {
    buf.push_sample(current, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        let v: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn unit_scale_is_bitwise_identity() {
        let x = ramp(9, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = scale_augment(&x, 1.0, &mut rng).unwrap();
        assert_eq!(x.flatten_all().unwrap().to_vec1::<f64>().unwrap(), y.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn shape_preserved_across_range() {
        let x = ramp(32, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [0.75, 0.8, 0.99, 1.01, 1.2, 1.5] {
            assert_eq!(scale_augment(&x, s, &mut rng).unwrap().dims(), x.dims());
        }
        assert!(matches!(scale_augment(&x, 0.0, &mut rng), Err(Error::InvalidArgument(_))));
        assert!(matches!(scale_augment(&x, -1.0, &mut rng), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zoom_out_places_downscaled_image_in_center_with_mirrored_border() {
        let n = 256;
        let x = ramp(n, n);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = scale_augment(&x, 0.75, &mut rng).unwrap();
        // direct downscale of the same image
        let r = bilinear_matrix(n, 192);
        let down = separable(&x, &r, (192, n), &r, (192, n)).unwrap();
        let yc = y.narrow(2, 32, 192).unwrap().narrow(3, 32, 192).unwrap();
        let d = (yc - &down).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d < 1e-12);
        let yv: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let dv: Vec<f64> = down.flatten_all().unwrap().to_vec1().unwrap();
        // row 31 mirrors row 33 (downscaled row 1); column 40 stays inside
        assert_eq!(yv[31 * n + 40], dv[192 + 8]);
        assert_eq!(yv[(32 + 192) * n + 40], dv[190 * 192 + 8]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x0 = ramp(6, 5);
        for t in [ScaleTransform { scale: 0.75, offset: (0, 0) }, ScaleTransform { scale: 1.4, offset: (1, 2) }] {
            let x = Var::from_tensor(&x0).unwrap();
            let weights = ramp(6, 5).sqr().unwrap();
            let f = |x: &Tensor| t.apply(x).unwrap().mul(&weights).unwrap().mean_all().unwrap();
            let g = f(x.as_tensor()).backward().unwrap();
            let grad: Vec<f64> = g.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
            let h = 1e-4;
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                let mut m = base.clone();
                m[i] -= h;
                let fp = f(&Tensor::from_vec(p, (1, 1, 6, 5), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
                let fm = f(&Tensor::from_vec(m, (1, 1, 6, 5), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-3 * fd.abs().max(1e-6), "{fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn buffer_capacity_and_empty_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut buf = ReplayBuffer::new(50);
        let t = Tensor::full(7.0f32, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let s = buf.push_sample(&t, &mut rng).unwrap();
        assert_eq!(s.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![7.0; 4]);
        for i in 1..50 {
            buf.push_sample(&Tensor::full(i as f32, (1, 1, 2, 2), &Device::Cpu).unwrap(), &mut rng).unwrap();
        }
        assert_eq!(buf.len(), 50);
        buf.push_sample(&t, &mut rng).unwrap();
        assert_eq!(buf.len(), 50);
    }

    #[test]
    fn buffer_stores_detached_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut buf = ReplayBuffer::new(4);
        let v = Var::from_tensor(&Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap()).unwrap();
        let y = (v.as_tensor() * 3.0).unwrap();
        let s = buf.push_sample(&y, &mut rng).unwrap();
        assert!(!s.is_variable());
        assert!(s.sum_all().unwrap().backward().unwrap().get(&v).is_none());
        assert!(buf.items().iter().all(|t| t.sum_all().unwrap().backward().unwrap().get(&v).is_none()));
    }

    #[test]
    fn full_buffer_draws_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cap = 50;
        let mut buf = ReplayBuffer::new(cap);
        let items: Vec<Tensor> = (0..cap).map(|i| Tensor::new(&[i as f32], &Device::Cpu).unwrap()).collect();
        buf.set_items(items);
        let fresh = Tensor::new(&[999f32], &Device::Cpu).unwrap();
        // count which slot each draw came from, starting from the same full buffer
        let draws = 10_000;
        let mut counts = vec![0usize; cap];
        for _ in 0..draws {
            let mut b = buf.clone();
            let s = b.push_sample(&fresh, &mut rng).unwrap().to_vec1::<f32>().unwrap()[0];
            let slot = b.items().iter().position(|t| t.to_vec1::<f32>().unwrap()[0] == s).unwrap();
            counts[slot] += 1;
        }
        let p = 1.0 / cap as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 5.0 * sd, "count {c} vs {mean}");
        }
    }
}
