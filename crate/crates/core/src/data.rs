//! Image ingestion, patch sampling, padding and synthetic unmixing data.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma, LumaA, Rgb, Rgba};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augbuf::reflect_index;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn max_value(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Decoded image with values scaled to `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub depth: BitDepth,
    pub data: Vec<f32>,
}

fn planar<T: Copy + Into<f32>>(raw: &[T], channels: usize, h: usize, w: usize, scale: f32) -> Vec<f32> {
    let mut out = vec![0.0; channels * h * w];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * h * w + i] = v.into() / scale;
        }
    }
    out
}

fn interleave<T>(data: &[f32], channels: usize, hw: usize, f: impl Fn(f32) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for i in 0..hw {
        for c in 0..channels {
            out.push(f(data[c * hw + i]));
        }
    }
    out
}

impl StoredImage {
    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, depth, data) = match img {
            DynamicImage::ImageLuma8(b) => (1, BitDepth::Eight, planar(b.as_raw(), 1, h, w, 255.0)),
            DynamicImage::ImageLumaA8(b) => (2, BitDepth::Eight, planar(b.as_raw(), 2, h, w, 255.0)),
            DynamicImage::ImageRgb8(b) => (3, BitDepth::Eight, planar(b.as_raw(), 3, h, w, 255.0)),
            DynamicImage::ImageRgba8(b) => (4, BitDepth::Eight, planar(b.as_raw(), 4, h, w, 255.0)),
            DynamicImage::ImageLuma16(b) => (1, BitDepth::Sixteen, planar(b.as_raw(), 1, h, w, 65535.0)),
            DynamicImage::ImageLumaA16(b) => (2, BitDepth::Sixteen, planar(b.as_raw(), 2, h, w, 65535.0)),
            DynamicImage::ImageRgb16(b) => (3, BitDepth::Sixteen, planar(b.as_raw(), 3, h, w, 65535.0)),
            DynamicImage::ImageRgba16(b) => (4, BitDepth::Sixteen, planar(b.as_raw(), 4, h, w, 65535.0)),
            other => return Err(Error::invalid_arg(format!("unsupported pixel format {:?}", other.color()))),
        };
        Ok(Self { channels, height: h, width: w, depth, data })
    }

    pub fn to_dynamic(&self) -> Result<DynamicImage> {
        let (w, h) = (self.width as u32, self.height as u32);
        let hw = self.height * self.width;
        let q8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let q16 = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        let bad = || Error::invalid_arg("image buffer size mismatch");
        let d = &self.data;
        let c = self.channels;
        Ok(match (c, self.depth) {
            (1, BitDepth::Eight) => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, interleave(d, c, hw, q8)).ok_or_else(bad)?.into(),
            (2, BitDepth::Eight) => ImageBuffer::<LumaA<u8>, _>::from_raw(w, h, interleave(d, c, hw, q8)).ok_or_else(bad)?.into(),
            (3, BitDepth::Eight) => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, interleave(d, c, hw, q8)).ok_or_else(bad)?.into(),
            (4, BitDepth::Eight) => ImageBuffer::<Rgba<u8>, _>::from_raw(w, h, interleave(d, c, hw, q8)).ok_or_else(bad)?.into(),
            (1, BitDepth::Sixteen) => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, interleave(d, c, hw, q16)).ok_or_else(bad)?.into(),
            (2, BitDepth::Sixteen) => ImageBuffer::<LumaA<u16>, _>::from_raw(w, h, interleave(d, c, hw, q16)).ok_or_else(bad)?.into(),
            (3, BitDepth::Sixteen) => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, interleave(d, c, hw, q16)).ok_or_else(bad)?.into(),
            (4, BitDepth::Sixteen) => ImageBuffer::<Rgba<u16>, _>::from_raw(w, h, interleave(d, c, hw, q16)).ok_or_else(bad)?.into(),
            (c, _) => return Err(Error::invalid_arg(format!("cannot store a {c}-channel image"))),
        })
    }

    /// `(1, C, H, W)` tensor in `[-1, 1]`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.affine(2.0, -1.0)?)
    }

    /// Inverse of [`StoredImage::to_tensor`] for a `(C, H, W)` or `(1, C, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, depth: BitDepth) -> Result<Self> {
        let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
        let (channels, height, width) = t.dims3()?;
        let data: Vec<f32> = t
            .to_dtype(candle_core::DType::F32)?
            .affine(0.5, 0.5)?
            .clamp(0.0f32, 1.0f32)?
            .flatten_all()?
            .to_vec1()?;
        Ok(Self { channels, height, width, depth, data })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "tif" | "tiff")
    )
}

pub fn load_image(path: &Path) -> Result<StoredImage> {
    StoredImage::from_dynamic(&image::open(path)?)
}

pub fn save_image(path: &Path, img: &StoredImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    img.to_dynamic()?.save(path)?;
    Ok(())
}

/// Sorted list of PNG/TIFF files in `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_supported(p))
        .collect();
    files.sort();
    Ok(files)
}

/// First supported image in `dir` whose file stem is `stem`.
pub fn find_by_stem(dir: &Path, stem: &str) -> Result<Option<PathBuf>> {
    Ok(list_images(dir)?.into_iter().find(|p| p.file_stem().and_then(|s| s.to_str()) == Some(stem)))
}

/// Ground truth for the prediction named `stem`: either an image of that stem
/// directly in `dir`, or the channels `ch1/`, `ch2/`, ... stacked in order
/// (the `test_pairs/` layout).
pub fn load_ground_truth(dir: &Path, stem: &str) -> Result<StoredImage> {
    if let Some(p) = find_by_stem(dir, stem)? {
        return load_image(&p);
    }
    let mut planes: Vec<StoredImage> = Vec::new();
    for c in 1.. {
        let sub = dir.join(format!("ch{c}"));
        if !sub.is_dir() {
            break;
        }
        let p = find_by_stem(&sub, stem)?
            .ok_or_else(|| Error::invalid_arg(format!("no ground truth for `{stem}` in {}", sub.display())))?;
        planes.push(load_image(&p)?);
    }
    let first = planes
        .first()
        .ok_or_else(|| Error::invalid_arg(format!("no ground truth for `{stem}` in {}", dir.display())))?;
    let (h, w, depth) = (first.height, first.width, first.depth);
    let mut data = Vec::new();
    for p in &planes {
        if (p.height, p.width) != (h, w) {
            return Err(Error::invalid_arg(format!("ground-truth channels for `{stem}` differ in size")));
        }
        data.extend_from_slice(&p.data);
    }
    let channels = planes.iter().map(|p| p.channels).sum();
    Ok(StoredImage { channels, height: h, width: w, depth, data })
}

/// Bilinear resize to a square side length.
pub fn resize_image(img: &StoredImage, side: usize) -> Result<StoredImage> {
    if img.height == side && img.width == side {
        return Ok(img.clone());
    }
    // go through 16-bit storage so that 8-bit sources do not lose precision twice
    let mut hi = img.clone();
    hi.depth = BitDepth::Sixteen;
    let resized = hi.to_dynamic()?.resize_exact(side as u32, side as u32, image::imageops::FilterType::Triangle);
    let mut out = StoredImage::from_dynamic(&resized)?;
    out.depth = img.depth;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchOptions {
    pub patch_size: usize,
    /// Resize every source image to this square side before cropping.
    pub resize_to: Option<usize>,
    pub flips: bool,
}

impl Default for PatchOptions {
    fn default() -> Self {
        Self { patch_size: 256, resize_to: None, flips: true }
    }
}

/// In-memory set of source images that yields random patches.
///
/// The patch at stream position `k` depends only on `(seed, k)`: positions are
/// grouped into epochs, each visiting every image once in a seeded shuffled
/// order, with a seeded crop offset and flips per position.
#[derive(Debug, Clone)]
pub struct PatchDataset {
    pub images: Vec<StoredImage>,
    pub files: Vec<PathBuf>,
    pub channels: usize,
    pub options: PatchOptions,
    pub seed: u64,
}

impl PatchDataset {
    pub fn from_images(images: Vec<StoredImage>, options: PatchOptions, seed: u64) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid_arg("dataset has no images"))?;
        let channels = first.channels;
        if options.patch_size == 0 {
            return Err(Error::invalid_arg("patch size must be positive"));
        }
        for img in &images {
            if img.channels != channels {
                return Err(Error::invalid_arg(format!("mixed channel counts {channels} and {}", img.channels)));
            }
            if img.height < options.patch_size || img.width < options.patch_size {
                return Err(Error::invalid_arg(format!(
                    "image {}×{} is smaller than the patch size {}",
                    img.height, img.width, options.patch_size
                )));
            }
        }
        let files = vec![PathBuf::new(); images.len()];
        Ok(Self { images, files, channels, options, seed })
    }

    /// Loads every readable image in `dir`. Unreadable or too-small files are
    /// skipped with a warning.
    pub fn load(dir: &Path, options: PatchOptions, seed: u64) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::invalid_arg(format!("{} is not a directory", dir.display())));
        }
        let mut images = Vec::new();
        let mut files = Vec::new();
        for path in list_images(dir)? {
            let img = match load_image(&path) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let img = match options.resize_to {
                Some(side) => resize_image(&img, side)?,
                None => img,
            };
            if img.height < options.patch_size || img.width < options.patch_size {
                log::warn!("skipping {}: smaller than patch size {}", path.display(), options.patch_size);
                continue;
            }
            if let Some(first) = images.first().map(|i: &StoredImage| i.channels) {
                if first != img.channels {
                    log::warn!("skipping {}: {} channels, expected {first}", path.display(), img.channels);
                    continue;
                }
            }
            images.push(img);
            files.push(path);
        }
        if images.is_empty() {
            return Err(Error::invalid_arg(format!("no readable images in {}", dir.display())));
        }
        let mut ds = Self::from_images(images, options, seed)?;
        ds.files = files;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Index of the source image used at stream position `k`.
    pub fn source_index(&self, k: u64) -> usize {
        let n = self.len() as u64;
        self.epoch_order(k / n)[(k % n) as usize]
    }

    /// Patch at stream position `k` as a `(1, C, P, P)` tensor in `[-1, 1]`.
    pub fn patch(&self, k: u64, device: &Device) -> Result<Tensor> {
        let img = &self.images[self.source_index(k)];
        let p = self.options.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(2 * k + 1);
        let top = rng.random_range(0..=img.height - p);
        let left = rng.random_range(0..=img.width - p);
        let (flip_v, flip_h) = if self.options.flips { (rng.random::<bool>(), rng.random::<bool>()) } else { (false, false) };
        let mut data = Vec::with_capacity(img.channels * p * p);
        for c in 0..img.channels {
            let plane = img.channel(c);
            for i in 0..p {
                let r = top + if flip_v { p - 1 - i } else { i };
                for j in 0..p {
                    let col = left + if flip_h { p - 1 - j } else { j };
                    data.push(plane[r * img.width + col] * 2.0 - 1.0);
                }
            }
        }
        Ok(Tensor::from_vec(data, (1, img.channels, p, p), device)?)
    }

    pub fn stream(&self, device: &Device) -> PatchStream<'_> {
        PatchStream { dataset: self, position: 0, device: device.clone() }
    }
}

/// Endless iterator over [`PatchDataset::patch`] positions.
pub struct PatchStream<'a> {
    dataset: &'a PatchDataset,
    pub position: u64,
    device: Device,
}

impl Iterator for PatchStream<'_> {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Self::Item> {
        let item = self.dataset.patch(self.position, &self.device);
        self.position += 1;
        Some(item)
    }
}

pub fn load_patches(dir: &Path, options: PatchOptions, seed: u64) -> Result<PatchDataset> {
    PatchDataset::load(dir, options, seed)
}

/// Undo information for [`pad_to_divisible`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
}

impl CropRecord {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        Ok(x.narrow(r - 2, 0, self.height)?.narrow(r - 1, 0, self.width)?)
    }
}

fn reflect_pad_axis(x: &Tensor, axis: usize, target: usize) -> Result<Tensor> {
    let n = x.dim(axis)?;
    if n == target {
        return Ok(x.clone());
    }
    let idx: Vec<u32> = (0..target).map(|i| reflect_index(i as i64, n) as u32).collect();
    let idx = Tensor::from_vec(idx, target, x.device())?;
    Ok(x.index_select(&idx, axis)?)
}

/// Reflection-pads the two trailing axes at the bottom/right up to the next
/// multiple of `factor`.
pub fn pad_to_divisible(x: &Tensor, factor: usize) -> Result<(Tensor, CropRecord)> {
    let r = x.rank();
    if r < 2 || factor == 0 {
        return Err(Error::invalid_arg("padding needs a spatial tensor and a positive factor"));
    }
    let (h, w) = (x.dim(r - 2)?, x.dim(r - 1)?);
    let up = |n: usize| n.div_ceil(factor) * factor;
    let y = reflect_pad_axis(&reflect_pad_axis(x, r - 2, up(h))?, r - 1, up(w))?;
    Ok((y, CropRecord { height: h, width: w }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticUnmixSpec {
    pub canvas: usize,
    pub disks: (usize, usize),
    pub disk_radius: (f64, f64),
    pub rings: (usize, usize),
    pub ring_radius: (f64, f64),
    pub ring_width: f64,
    /// Range of per-disk peak intensity in `[0, 1]`.
    pub disk_intensity: (f64, f64),
    /// Range of per-ring peak intensity. Kept apart from the disk range so the
    /// two channels occupy separate bands of the mixture.
    pub ring_intensity: (f64, f64),
    /// Uniform per-channel background level; objects span the remaining
    /// `1 - background` of the range.
    pub background: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticUnmixSpec {
    fn default() -> Self {
        Self {
            canvas: 64,
            disks: (3, 8),
            disk_radius: (3.0, 7.0),
            rings: (2, 5),
            ring_radius: (6.0, 12.0),
            ring_width: 2.0,
            disk_intensity: (0.45, 0.58),
            ring_intensity: (0.2, 0.3),
            background: 0.1,
            noise_sigma: 0.02,
        }
    }
}

/// One synthetic sample: nuclear-like channel, membrane-like channel and
/// their noisy clipped mixture.
#[derive(Debug, Clone)]
pub struct UnmixSample {
    pub ch1: Vec<f32>,
    pub ch2: Vec<f32>,
    pub mixed: Vec<f32>,
}

impl SyntheticUnmixSpec {
    fn range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
        if hi > lo { rng.random_range(lo..=hi) } else { lo }
    }

    fn count<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
        if hi > lo { rng.random_range(lo..=hi) } else { lo }
    }

    /// Draws one sample; shapes get a one-pixel antialiased edge.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> UnmixSample {
        let n = self.canvas;
        let mut ch1 = vec![0.0f64; n * n];
        let mut ch2 = vec![0.0f64; n * n];
        let centre = |rng: &mut R| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        for _ in 0..Self::count(rng, self.disks) {
            let (cy, cx) = centre(rng);
            let r = Self::range(rng, self.disk_radius);
            let a = Self::range(rng, self.disk_intensity);
            paint(&mut ch1, n, |d| a * (r + 0.5 - d).clamp(0.0, 1.0), cy, cx);
        }
        for _ in 0..Self::count(rng, self.rings) {
            let (cy, cx) = centre(rng);
            let r = Self::range(rng, self.ring_radius);
            let a = Self::range(rng, self.ring_intensity);
            let half = self.ring_width / 2.0;
            paint(&mut ch2, n, |d| a * (half + 0.5 - (d - r).abs()).clamp(0.0, 1.0), cy, cx);
        }
        let bg = self.background.clamp(0.0, 1.0);
        for v in ch1.iter_mut().chain(ch2.iter_mut()) {
            *v = bg + (1.0 - bg) * *v;
        }
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        let mixed = ch1
            .iter()
            .zip(&ch2)
            .map(|(a, b)| (a + b + noise.sample(rng)).clamp(0.0, 1.0) as f32)
            .collect();
        UnmixSample {
            ch1: ch1.into_iter().map(|v| v as f32).collect(),
            ch2: ch2.into_iter().map(|v| v as f32).collect(),
            mixed,
        }
    }
}

/// Overlays `profile(distance)` with a max rule, so overlapping objects of one
/// channel do not saturate.
fn paint(plane: &mut [f64], n: usize, profile: impl Fn(f64) -> f64, cy: f64, cx: f64) {
    for i in 0..n {
        for j in 0..n {
            let d = ((i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2)).sqrt();
            let v = profile(d);
            if v > plane[i * n + j] {
                plane[i * n + j] = v;
            }
        }
    }
}

/// Split sizes used by `synth` when none are given.
pub const DEFAULT_TRAIN_MIXED: usize = 200;
pub const DEFAULT_TRAIN_UNMIXED: usize = 200;
pub const DEFAULT_TEST_PAIRS: usize = 32;

/// RNG stream ids for the three splits; each split owns its own stream.
pub const STREAM_MIXED: u64 = 1;
pub const STREAM_UNMIXED: u64 = 2;
pub const STREAM_TEST: u64 = 3;

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub spec: SyntheticUnmixSpec,
    pub n_train_mixed: usize,
    pub n_train_unmixed: usize,
    pub n_test_pairs: usize,
    pub seed: u64,
}

/// Writes `domainA/` (two-channel clean), `domainB/` (mixed) and
/// `test_pairs/{mixed,ch1,ch2}/` as 16-bit PNG files under `out`.
pub fn generate_unmix_dataset(
    spec: &SyntheticUnmixSpec,
    n_train_mixed: usize,
    n_train_unmixed: usize,
    n_test_pairs: usize,
    seed: u64,
    out: &Path,
) -> Result<SynthSummary> {
    let n = spec.canvas;
    let plane = |data: &[f32]| StoredImage { channels: 1, height: n, width: n, depth: BitDepth::Sixteen, data: data.to_vec() };
    let mut rng = split_rng(seed, STREAM_MIXED);
    for k in 0..n_train_mixed {
        let s = spec.sample(&mut rng);
        save_image(&out.join("domainB").join(format!("mixed_{k:05}.png")), &plane(&s.mixed))?;
    }
    let mut rng = split_rng(seed, STREAM_UNMIXED);
    for k in 0..n_train_unmixed {
        let s = spec.sample(&mut rng);
        let mut data = s.ch1;
        data.extend(s.ch2);
        let img = StoredImage { channels: 2, height: n, width: n, depth: BitDepth::Sixteen, data };
        save_image(&out.join("domainA").join(format!("unmixed_{k:05}.png")), &img)?;
    }
    let mut rng = split_rng(seed, STREAM_TEST);
    for k in 0..n_test_pairs {
        let s = spec.sample(&mut rng);
        let name = format!("pair_{k:05}.png");
        let dir = out.join("test_pairs");
        save_image(&dir.join("mixed").join(&name), &plane(&s.mixed))?;
        save_image(&dir.join("ch1").join(&name), &plane(&s.ch1))?;
        save_image(&dir.join("ch2").join(&name), &plane(&s.ch2))?;
    }
    Ok(SynthSummary { spec: spec.clone(), n_train_mixed, n_train_unmixed, n_test_pairs, seed })
}
