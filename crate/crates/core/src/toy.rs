//! Context dependence of instance normalization versus parameter
//! normalization on four hand-built two-channel scenes.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::absn::absn_apply;
use crate::error::{Error, Result};
use crate::params::sigmoid;

pub const SIZE: usize = 100;
pub const SQUARE: usize = 20;
pub const MARGIN: usize = 10;
pub const SMALL: usize = 10;
pub const CORNER_VALUE: f64 = 0.25;
pub const CENTRE_CH2: f64 = 0.00875;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Top-left corner of the central square.
pub const CENTRE: usize = (SIZE - SQUARE) / 2;
/// Top-left corner of the extra 10×10 square in scenes 3 and 4.
pub const EXTRA: (usize, usize) = (45, 15);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    InstanceNorm,
    ParamNorm,
}

/// Two-channel `100 × 100` map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub data: Vec<f64>,
}

impl ToyScene {
    fn empty() -> Self {
        Self { data: vec![0.0; 2 * SIZE * SIZE] }
    }

    fn fill(&mut self, top: usize, left: usize, side: usize, ch1: f64, ch2: f64) {
        for i in top..top + side {
            for j in left..left + side {
                self.data[i * SIZE + j] = ch1;
                self.data[SIZE * SIZE + i * SIZE + j] = ch2;
            }
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * SIZE * SIZE..(c + 1) * SIZE * SIZE]
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 2, SIZE, SIZE), &Device::Cpu)?)
    }
}

pub fn build_toy_scenes() -> [ToyScene; 4] {
    let far = SIZE - MARGIN - SQUARE;
    let with_centre = |s: &mut ToyScene| s.fill(CENTRE, CENTRE, SQUARE, CORNER_VALUE, CENTRE_CH2);
    let with_corners = |s: &mut ToyScene| {
        for (t, l) in [(MARGIN, MARGIN), (MARGIN, far), (far, MARGIN), (far, far)] {
            s.fill(t, l, SQUARE, CORNER_VALUE, 0.0);
        }
    };
    let mut x1 = ToyScene::empty();
    with_corners(&mut x1);
    with_centre(&mut x1);
    let mut x2 = ToyScene::empty();
    with_centre(&mut x2);
    let mut x3 = x1.clone();
    x3.fill(EXTRA.0, EXTRA.1, SMALL, 0.0, 1.0);
    let mut x4 = x2.clone();
    x4.fill(EXTRA.0, EXTRA.1, SMALL, 1.0, 0.0);
    [x1, x2, x3, x4]
}

/// Projection weight `(1, -1) / √2` as a `1×1` convolution kernel.
pub fn toy_weight() -> Result<Tensor> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Ok(Tensor::from_vec(vec![s, -s], (1, 2, 1, 1), &Device::Cpu)?)
}

fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(centred.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?)
}

/// Single-channel `100 × 100` response map, row-major.
pub fn toy_pipeline(x: &ToyScene, mode: NormMode) -> Result<Vec<f64>> {
    let t = x.to_tensor()?;
    let (features, w) = match mode {
        NormMode::InstanceNorm => (instance_norm(&t)?, toy_weight()?),
        NormMode::ParamNorm => (t, absn_apply(&toy_weight()?)?),
    };
    let y = sigmoid(&features.conv2d(&w, 0, 1, 1, 1)?)?;
    Ok(y.flatten_all()?.to_vec1()?)
}

pub fn centre_mean(response: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in CENTRE..CENTRE + SQUARE {
        for j in CENTRE..CENTRE + SQUARE {
            s += response[i * SIZE + j];
        }
    }
    s / (SQUARE * SQUARE) as f64
}

pub fn spread(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub instance_norm_centre_means: Vec<f64>,
    pub param_norm_centre_means: Vec<f64>,
    pub instance_norm_spread: f64,
    pub param_norm_spread: f64,
    pub panels: Vec<String>,
}

pub fn run_toy() -> Result<(Vec<ToyScene>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let scenes = build_toy_scenes().to_vec();
    let inorm = scenes.iter().map(|s| toy_pipeline(s, NormMode::InstanceNorm)).collect::<Result<Vec<_>>>()?;
    let pnorm = scenes.iter().map(|s| toy_pipeline(s, NormMode::ParamNorm)).collect::<Result<Vec<_>>>()?;
    Ok((scenes, inorm, pnorm))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the four inputs as RGB (blue zero) and the four responses as
/// min-max scaled grayscale; each response file name carries its min and max.
/// Returns the written file names in panel order.
pub fn render_toy_figure(scenes: &[ToyScene], responses: &[Vec<f64>], dir: &Path) -> Result<Vec<PathBuf>> {
    if scenes.len() != responses.len() {
        return Err(Error::invalid_arg("one response per scene is required"));
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (k, s) in scenes.iter().enumerate() {
        let (c1, c2) = (s.channel(0), s.channel(1));
        let img = RgbImage::from_fn(SIZE as u32, SIZE as u32, |x, y| {
            let i = y as usize * SIZE + x as usize;
            image::Rgb([to_u8(c1[i]), to_u8(c2[i]), 0])
        });
        let path = dir.join(format!("input_{}.png", k + 1));
        img.save(&path).map_err(Error::from)?;
        written.push(path);
    }
    for (k, r) in responses.iter().enumerate() {
        let min = r.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = if max > min { max - min } else { 1.0 };
        let img = GrayImage::from_fn(SIZE as u32, SIZE as u32, |x, y| {
            image::Luma([to_u8((r[y as usize * SIZE + x as usize] - min) / range)])
        });
        let path = dir.join(format!("response_{}_min{min:.6}_max{max:.6}.png", k + 1));
        img.save(&path).map_err(Error::from)?;
        written.push(path);
    }
    Ok(written)
}

/// Runs both pipelines, renders the instance-norm figure into `dir` and
/// writes `toy.json` next to the panels.
pub fn toy_report(dir: &Path) -> Result<ToyReport> {
    let (scenes, inorm, pnorm) = run_toy()?;
    let panels = render_toy_figure(&scenes, &inorm, dir)?;
    let im: Vec<f64> = inorm.iter().map(|r| centre_mean(r)).collect();
    let pm: Vec<f64> = pnorm.iter().map(|r| centre_mean(r)).collect();
    let report = ToyReport {
        instance_norm_spread: spread(&im),
        param_norm_spread: spread(&pm),
        instance_norm_centre_means: im,
        param_norm_centre_means: pm,
        panels: panels.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect(),
    };
    fs::write(dir.join("toy.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
