//! Instance-segmentation matching scores and paired image-quality metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Label map: 0 is background, any other value is an instance id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceLabeling {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl InstanceLabeling {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::invalid_arg(format!("{} labels for a {height}×{width} map", labels.len())));
        }
        Ok(Self { height, width, labels })
    }

    /// Reads a single-channel label image; ids are the stored integer values.
    pub fn from_image(img: &crate::data::StoredImage) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::invalid_arg(format!("label images must have one channel, got {}", img.channels)));
        }
        let max = img.depth.max_value();
        let labels = img.data.iter().map(|&v| (v * max).round() as u32).collect();
        Self::new(img.height, img.width, labels)
    }

    /// Sorted instance ids present in the map.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedPair {
    pub pred: u32,
    pub gt: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MatchResult {
    pub matched: Vec<MatchedPair>,
    pub unmatched_pred: Vec<u32>,
    pub unmatched_gt: Vec<u32>,
}

pub const MATCH_THRESHOLD: f64 = 0.5;

/// IoU between every predicted and every ground-truth instance, rows in
/// `pred_ids` order and columns in `gt_ids` order.
pub fn iou_matrix(pred: &InstanceLabeling, gt: &InstanceLabeling) -> Result<(Vec<u32>, Vec<u32>, Vec<Vec<f64>>)> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::invalid_arg(format!(
            "label maps differ in shape: {}×{} vs {}×{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let pred_ids = pred.ids();
    let gt_ids = gt.ids();
    let pi: BTreeMap<u32, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let gi: BTreeMap<u32, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut inter = vec![vec![0usize; gt_ids.len()]; pred_ids.len()];
    let mut pa = vec![0usize; pred_ids.len()];
    let mut ga = vec![0usize; gt_ids.len()];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p != 0 {
            pa[pi[&p]] += 1;
        }
        if g != 0 {
            ga[gi[&g]] += 1;
        }
        if p != 0 && g != 0 {
            inter[pi[&p]][gi[&g]] += 1;
        }
    }
    let iou = inter
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, &n)| if n == 0 { 0.0 } else { n as f64 / (pa[i] + ga[j] - n) as f64 })
                .collect()
        })
        .collect();
    Ok((pred_ids, gt_ids, iou))
}

/// Maximum-weight assignment on a rectangular profit matrix (rows ≤ cols not
/// required). Returns, per row, the assigned column if any.
fn max_weight_assignment(profit: &[Vec<f64>], cols: usize) -> Vec<Option<usize>> {
    let rows = profit.len();
    let n = rows.max(cols);
    if n == 0 {
        return vec![];
    }
    // square cost matrix for the min-cost Hungarian method, 1-indexed
    let cost = |i: usize, j: usize| -> f64 {
        if i <= rows && j <= cols {
            -profit[i - 1][j - 1]
        } else {
            0.0
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        if p[j] >= 1 && p[j] <= rows && j <= cols {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Optimal one-to-one matching on an IoU matrix, restricted to pairs whose
/// IoU exceeds `threshold`.
pub fn match_iou_matrix(pred_ids: &[u32], gt_ids: &[u32], iou: &[Vec<f64>], threshold: f64) -> MatchResult {
    let profit: Vec<Vec<f64>> = iou
        .iter()
        .map(|row| row.iter().map(|&v| if v > threshold { v } else { 0.0 }).collect())
        .collect();
    let assignment = max_weight_assignment(&profit, gt_ids.len());
    let mut matched = Vec::new();
    let mut gt_used = vec![false; gt_ids.len()];
    let mut unmatched_pred = Vec::new();
    for (i, a) in assignment.iter().enumerate() {
        match a {
            Some(j) if iou[i][*j] > threshold => {
                gt_used[*j] = true;
                matched.push(MatchedPair { pred: pred_ids[i], gt: gt_ids[*j], iou: iou[i][*j] });
            }
            _ => unmatched_pred.push(pred_ids[i]),
        }
    }
    let unmatched_gt = gt_ids.iter().zip(&gt_used).filter(|(_, &u)| !u).map(|(&g, _)| g).collect();
    MatchResult { matched, unmatched_pred, unmatched_gt }
}

pub fn match_instances_with_threshold(pred: &InstanceLabeling, gt: &InstanceLabeling, threshold: f64) -> Result<MatchResult> {
    let (pred_ids, gt_ids, iou) = iou_matrix(pred, gt)?;
    Ok(match_iou_matrix(&pred_ids, &gt_ids, &iou, threshold))
}

pub fn match_instances(pred: &InstanceLabeling, gt: &InstanceLabeling) -> Result<MatchResult> {
    match_instances_with_threshold(pred, gt, MATCH_THRESHOLD)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegmentationScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub seg_quality: f64,
    pub panoptic_quality: f64,
}

pub fn segmentation_scores(m: &MatchResult) -> SegmentationScores {
    let tp = m.matched.len() as f64;
    let fp = m.unmatched_pred.len() as f64;
    let fn_ = m.unmatched_gt.len() as f64;
    if tp + fp == 0.0 && tp + fn_ == 0.0 {
        return SegmentationScores { precision: 1.0, recall: 1.0, f1: 1.0, seg_quality: 1.0, panoptic_quality: 1.0 };
    }
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    let seg_quality = ratio(m.matched.iter().map(|p| p.iou).sum(), tp);
    SegmentationScores { precision, recall, f1, seg_quality, panoptic_quality: f1 * seg_quality }
}

fn check_same(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid_arg(format!("images have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Reported in place of `+∞` for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of one `h × w` plane over all valid 11×11 Gaussian windows.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, data_range: f64) -> Result<f64> {
    check_same(a, b)?;
    if a.len() != h * w || h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid_arg(format!("SSIM needs planes of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let g = gaussian_window();
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM averaged over the channels of two channel-major `c × h × w` images.
pub fn ssim(a: &[f64], b: &[f64], channels: usize, h: usize, w: usize, data_range: f64) -> Result<f64> {
    check_same(a, b)?;
    if a.len() != channels * h * w {
        return Err(Error::invalid_arg("image size does not match the given shape"));
    }
    let hw = h * w;
    let mut s = 0.0;
    for c in 0..channels {
        s += ssim_plane(&a[c * hw..(c + 1) * hw], &b[c * hw..(c + 1) * hw], h, w, data_range)?;
    }
    Ok(s / channels as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-channel PSNR (peak 1) and SSIM of two images stored in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScores {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl PairScores {
    pub fn mean_psnr(&self) -> f64 {
        mean_std(&self.psnr).0
    }

    pub fn mean_ssim(&self) -> f64 {
        mean_std(&self.ssim).0
    }
}

pub fn pair_scores(pred: &crate::data::StoredImage, gt: &crate::data::StoredImage) -> Result<PairScores> {
    if (pred.channels, pred.height, pred.width) != (gt.channels, gt.height, gt.width) {
        return Err(Error::invalid_arg(format!(
            "shape mismatch: {}x{}x{} vs {}x{}x{}",
            pred.channels, pred.height, pred.width, gt.channels, gt.height, gt.width
        )));
    }
    let mut out = PairScores { psnr: Vec::new(), ssim: Vec::new() };
    for c in 0..pred.channels {
        let a: Vec<f64> = pred.channel(c).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = gt.channel(c).iter().map(|&v| v as f64).collect();
        out.psnr.push(psnr(&a, &b, 1.0)?);
        out.ssim.push(ssim_plane(&a, &b, pred.height, pred.width, 1.0)?);
    }
    Ok(out)
}
