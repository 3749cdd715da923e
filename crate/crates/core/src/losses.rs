//! Training objectives: least-squares adversarial losses with 2-D class
//! targets, cycle and identity L1 losses, and the pixelwise cross-domain
//! N-pair contrastive loss on projected bottleneck features.

use candle_core::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ClassMode;
use crate::params::{Conv2d, ParamStore, VisitConvs};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Least-squares targets. The domain discriminator regresses 2-D coordinates
/// for real / fake / identity; the content discriminator regresses a scalar
/// (`a` for domain A, `b` for domain B).
pub struct ClassTargets;

impl ClassTargets {
    pub const REAL: [f64; 2] = [SQRT3 / 2.0, 0.0];
    pub const FAKE: [f64; 2] = [-SQRT3 / 6.0, 0.5];
    pub const IDENTITY: [f64; 2] = [-SQRT3 / 6.0, -0.5];
    pub const A: f64 = 1.0;
    pub const B: f64 = 0.0;
    /// Two-class scalar targets.
    pub const REAL_SCALAR: f64 = 1.0;
    pub const FAKE_SCALAR: f64 = 0.0;

    pub fn real(mode: ClassMode) -> &'static [f64] {
        match mode {
            ClassMode::ThreeClass => &Self::REAL,
            ClassMode::TwoClass => &[Self::REAL_SCALAR],
        }
    }

    pub fn fake(mode: ClassMode) -> &'static [f64] {
        match mode {
            ClassMode::ThreeClass => &Self::FAKE,
            ClassMode::TwoClass => &[Self::FAKE_SCALAR],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cyc: f64,
    pub id: f64,
    pub cl: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl LossWeights {
    /// Weights used for stain translation between domains with equal channels.
    pub fn segmentation() -> Self {
        Self { cyc: 10.0, id: 1.0, cl: 0.1, tau: 0.07 }
    }

    /// Weights used for single- to two-channel unmixing; identity disabled.
    pub fn unmixing() -> Self {
        Self { cyc: 5.0, id: 0.0, cl: 0.1, tau: 0.07 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cyc < 0.0 || self.id < 0.0 || self.cl < 0.0 {
            return Err(Error::InvalidConfiguration("loss weights must be non-negative".into()));
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::InvalidConfiguration("contrastive temperature must be positive".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::segmentation()
    }
}

/// Mean over batch and patches of the squared Euclidean distance between the
/// per-patch prediction vector (channel axis) and `target`.
pub fn mean_sq_distance(pred: &Tensor, target: &[f64]) -> Result<Tensor> {
    let (_, c, _, _) = pred.dims4().map_err(|_| Error::invalid_arg(format!("expected a patch map, got {:?}", pred.dims())))?;
    if c != target.len() {
        return Err(Error::invalid_arg(format!("prediction has {c} channels, target has {}", target.len())));
    }
    let t = Tensor::from_slice(target, (1, c, 1, 1), pred.device())?.to_dtype(pred.dtype())?;
    Ok(pred.broadcast_sub(&t)?.sqr()?.sum(1)?.mean_all()?)
}

/// Domain-discriminator outputs on the stacked pairs of one step.
#[derive(Debug, Clone)]
pub struct DomainDiscOutputs {
    /// `D_d([x|y])`
    pub real: Tensor,
    /// `D_d([x'|y'])`
    pub fake: Tensor,
    /// `D_d([x|x̂])`, `D_d([y|ŷ])`
    pub identity: Option<(Tensor, Tensor)>,
}

pub fn adv_loss_domain_disc(out: &DomainDiscOutputs, mode: ClassMode) -> Result<Tensor> {
    let mut loss = (mean_sq_distance(&out.real, ClassTargets::real(mode))?
        + mean_sq_distance(&out.fake, ClassTargets::fake(mode))?)?;
    if mode == ClassMode::ThreeClass {
        let (ix, iy) = out
            .identity
            .as_ref()
            .ok_or_else(|| Error::invalid_arg("three-class discriminator loss needs identity pairs"))?;
        loss = (loss + mean_sq_distance(ix, &ClassTargets::IDENTITY)?)?;
        loss = (loss + mean_sq_distance(iy, &ClassTargets::IDENTITY)?)?;
    }
    Ok(loss)
}

/// `mean |D_c(z(x)) − a|² + mean |D_c(z(y)) − b|²`
pub fn adv_loss_content_disc(score_x: &Tensor, score_y: &Tensor) -> Result<Tensor> {
    Ok((mean_sq_distance(score_x, &[ClassTargets::A])? + mean_sq_distance(score_y, &[ClassTargets::B])?)?)
}

/// Generator side of the adversarial game: fake and identity pairs pushed to
/// the real target, bottleneck scores pushed to `(a + b) / 2`.
pub fn adv_loss_generators(
    fake: &Tensor,
    identity: Option<(&Tensor, &Tensor)>,
    content: Option<(&Tensor, &Tensor)>,
    mode: ClassMode,
) -> Result<Tensor> {
    let real = ClassTargets::real(mode);
    let mut loss = mean_sq_distance(fake, real)?;
    if let Some((ix, iy)) = identity {
        loss = (loss + mean_sq_distance(ix, real)?)?;
        loss = (loss + mean_sq_distance(iy, real)?)?;
    }
    if let Some((sx, sy)) = content {
        let mid = [(ClassTargets::A + ClassTargets::B) / 2.0];
        loss = (loss + mean_sq_distance(sx, &mid)?)?;
        loss = (loss + mean_sq_distance(sy, &mid)?)?;
    }
    Ok(loss)
}

fn mean_abs_diff(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::invalid_arg(format!("{what}: shape {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn cycle_loss(x: &Tensor, y: &Tensor, x_cyc: &Tensor, y_cyc: &Tensor) -> Result<Tensor> {
    Ok((mean_abs_diff(x, x_cyc, "cycle A")? + mean_abs_diff(y, y_cyc, "cycle B")?)?)
}

pub fn identity_loss(x: &Tensor, x_id: &Tensor, y: &Tensor, y_id: &Tensor) -> Result<Tensor> {
    if x.dims() != x_id.dims() || y.dims() != y_id.dims() || x.dim(1)? != y.dim(1)? {
        return Err(Error::InvalidConfiguration(
            "identity loss needs both domains to have the same channel count; disable it instead".into(),
        ));
    }
    Ok((mean_abs_diff(x, x_id, "identity A")? + mean_abs_diff(y, y_id, "identity B")?)?)
}

/// Per-pixel MLP (two 1×1 layers with ReLU between) followed by per-pixel
/// L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub first: Conv2d,
    pub second: Conv2d,
}

pub const PROJECTION_NORM_EPS: f64 = 1e-12;

impl ProjectionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_channels: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            first: Conv2d::new(store, &format!("{name}.fc1"), in_channels, width, 1, 1, 0, true, rng)?,
            second: Conv2d::new(store, &format!("{name}.fc2"), width, width, 1, 1, 0, true, rng)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.second.forward(&self.first.forward(z)?.relu()?)?;
        let norm = (h.sqr()?.sum_keepdim(1)? + PROJECTION_NORM_EPS * PROJECTION_NORM_EPS)?.sqrt()?;
        Ok(h.broadcast_div(&norm)?)
    }
}

impl VisitConvs for ProjectionHead {
    fn visit_convs(&self, f: &mut dyn FnMut(&Conv2d)) {
        f(&self.first);
        f(&self.second);
    }
}

pub fn contrastive_projection(head: &ProjectionHead, z: &Tensor) -> Result<Tensor> {
    head.forward(z)
}

/// Caps the number of negative vectors each anchor pixel is compared with.
pub struct NegativeCap<'a, R: Rng> {
    pub max: usize,
    pub rng: &'a mut R,
}

fn pixels(t: &Tensor, b: usize) -> Result<Tensor> {
    // (D, h, w) -> (h*w, D)
    let s = t.get(b)?;
    let d = s.dim(0)?;
    Ok(s.reshape((d, ()))?.t()?.contiguous()?)
}

/// Pixelwise N-pair loss for one anchor configuration. Each anchor pixel is
/// contrasted against the aligned pixel of `positive` and every pixel of every
/// negative map. Inputs are unit-normalized projections of equal shape.
pub fn contrastive_loss<R: Rng>(
    anchor: &Tensor,
    positive: &Tensor,
    negatives: &[&Tensor],
    tau: f64,
    mut cap: Option<NegativeCap<'_, R>>,
) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid_arg(format!("temperature must be positive, got {tau}")));
    }
    if anchor.dims() != positive.dims() || negatives.iter().any(|n| n.dims() != anchor.dims()) {
        return Err(Error::invalid_arg("contrastive inputs must share one shape"));
    }
    let (b, _, _, _) = anchor.dims4()?;
    let mut per_batch = Vec::with_capacity(b);
    for i in 0..b {
        let a = pixels(anchor, i)?; // (P, D)
        let p = pixels(positive, i)?;
        let negs = negatives.iter().map(|n| pixels(n, i)).collect::<Result<Vec<_>>>()?;
        let mut neg = Tensor::cat(&negs, 0)?; // (N, D)
        if let Some(c) = cap.as_mut() {
            let n = neg.dim(0)?;
            if n > c.max {
                let mut idx: Vec<u32> = sample(c.rng, n, c.max).into_iter().map(|v| v as u32).collect();
                idx.sort_unstable();
                let idx = Tensor::from_vec(idx, c.max, neg.device())?;
                neg = neg.index_select(&idx, 0)?;
            }
        }
        let s_pos = ((&a * &p)?.sum_keepdim(1)? / tau)?; // (P, 1)
        let s_neg = (a.matmul(&neg.t()?)? / tau)?; // (P, N)
        let logits = Tensor::cat(&[&s_pos, &s_neg], 1)?;
        let m = logits.max_keepdim(1)?.detach();
        let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + m)?;
        per_batch.push((lse - s_pos)?.mean_all()?);
    }
    Ok(Tensor::stack(&per_batch, 0)?.mean_all()?)
}

/// One anchor configuration of the cross-domain contrastive loss.
pub struct ContrastiveConfig<'a> {
    pub anchor: &'a Tensor,
    pub positive: &'a Tensor,
    pub negatives: Vec<&'a Tensor>,
}

/// Average of [`contrastive_loss`] over the given anchor configurations.
pub fn cross_domain_contrastive<R: Rng>(
    configs: &[ContrastiveConfig<'_>],
    tau: f64,
    max_negatives: Option<usize>,
    rng: &mut R,
) -> Result<Tensor> {
    if configs.is_empty() {
        return Err(Error::invalid_arg("no contrastive configurations"));
    }
    let mut terms = Vec::with_capacity(configs.len());
    for c in configs {
        let cap = max_negatives.map(|max| NegativeCap { max, rng: &mut *rng });
        terms.push(contrastive_loss(c.anchor, c.positive, &c.negatives, tau, cap)?);
    }
    Ok(Tensor::stack(&terms, 0)?.mean_all()?)
}

/// Components of the generator objective.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub adv: Tensor,
    pub cyc: Tensor,
    pub id: Option<Tensor>,
    pub cl: Tensor,
}

/// `L_adv + λ_cyc·L_cyc + λ_id·L_id + λ_cl·L_cl`
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<Tensor> {
    let mut l = (&parts.adv + (&parts.cyc * w.cyc)?)?;
    if let Some(id) = &parts.id {
        if w.id != 0.0 {
            l = (l + (id * w.id)?)?;
        }
    }
    l = (l + (&parts.cl * w.cl)?)?;
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn filled(coord: &[f64], b: usize, h: usize, w: usize) -> Tensor {
        let c = coord.len();
        let mut v = Vec::new();
        for _ in 0..b {
            for &x in coord {
                v.extend(std::iter::repeat(x).take(h * w));
            }
        }
        Tensor::from_vec(v, (b, c, h, w), &Device::Cpu).unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn unit(shape: &[usize], seed: u64) -> Tensor {
        let t = randn(shape, seed);
        let n = t.sqr().unwrap().sum_keepdim(1).unwrap().sqrt().unwrap();
        t.broadcast_div(&n).unwrap()
    }

    #[test]
    fn target_geometry() {
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((d(ClassTargets::FAKE, ClassTargets::IDENTITY) - 1.0).abs() < 1e-15);
        // not equilateral with these coordinates
        assert!((d(ClassTargets::REAL, ClassTargets::FAKE) - 1.258).abs() < 1e-3);
    }

    #[test]
    fn domain_loss_zero_at_targets() {
        let out = DomainDiscOutputs {
            real: filled(&ClassTargets::REAL, 2, 3, 3),
            fake: filled(&ClassTargets::FAKE, 2, 3, 3),
            identity: Some((filled(&ClassTargets::IDENTITY, 2, 3, 3), filled(&ClassTargets::IDENTITY, 2, 3, 3))),
        };
        assert!(s(&adv_loss_domain_disc(&out, ClassMode::ThreeClass).unwrap()).abs() < 1e-15);
        let two = DomainDiscOutputs { real: filled(&[1.0], 1, 2, 2), fake: filled(&[0.0], 1, 2, 2), identity: None };
        assert_eq!(s(&adv_loss_domain_disc(&two, ClassMode::TwoClass).unwrap()), 0.0);
    }

    #[test]
    fn domain_loss_at_origin() {
        let zero = filled(&[0.0, 0.0], 1, 4, 4);
        let out = DomainDiscOutputs {
            real: zero.clone(),
            fake: filled(&ClassTargets::FAKE, 1, 4, 4),
            identity: Some((filled(&ClassTargets::IDENTITY, 1, 4, 4), filled(&ClassTargets::IDENTITY, 1, 4, 4))),
        };
        assert!((s(&adv_loss_domain_disc(&out, ClassMode::ThreeClass).unwrap()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn domain_loss_requires_identity_in_three_class() {
        let out = DomainDiscOutputs { real: filled(&[0.0, 0.0], 1, 2, 2), fake: filled(&[0.0, 0.0], 1, 2, 2), identity: None };
        assert!(matches!(adv_loss_domain_disc(&out, ClassMode::ThreeClass), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn domain_loss_patch_permutation_invariant() {
        let p = randn(&[1, 2, 3, 3], 4);
        let v: Vec<f64> = p.flatten_all().unwrap().to_vec1().unwrap();
        // reverse the patch order within each channel
        let mut r: Vec<f64> = Vec::new();
        for ch in v.chunks(9) {
            r.extend(ch.iter().rev());
        }
        let q = Tensor::from_vec(r, (1, 2, 3, 3), &Device::Cpu).unwrap();
        let mk = |t: &Tensor| DomainDiscOutputs { real: t.clone(), fake: t.clone(), identity: Some((t.clone(), t.clone())) };
        let a = s(&adv_loss_domain_disc(&mk(&p), ClassMode::ThreeClass).unwrap());
        let b = s(&adv_loss_domain_disc(&mk(&q), ClassMode::ThreeClass).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn content_loss_cases() {
        assert_eq!(s(&adv_loss_content_disc(&filled(&[1.0], 1, 2, 2), &filled(&[0.0], 1, 2, 2)).unwrap()), 0.0);
        assert!((s(&adv_loss_content_disc(&filled(&[0.5], 1, 2, 2), &filled(&[0.5], 1, 2, 2)).unwrap()) - 0.5).abs() < 1e-15);
        // swapping roles score_x <-> 1 - score_y
        let sx = randn(&[1, 1, 3, 3], 1);
        let sy = randn(&[1, 1, 3, 3], 2);
        let a = s(&adv_loss_content_disc(&sx, &sy).unwrap());
        let b = s(&adv_loss_content_disc(&(sy.neg().unwrap() + 1.0).unwrap(), &(sx.neg().unwrap() + 1.0).unwrap()).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_cases() {
        let r = filled(&ClassTargets::REAL, 1, 2, 2);
        let half = filled(&[0.5], 1, 2, 2);
        let l = adv_loss_generators(&r, Some((&r, &r)), Some((&half, &half)), ClassMode::ThreeClass).unwrap();
        assert!(s(&l).abs() < 1e-15);
        let l = adv_loss_generators(&r, Some((&r, &r)), Some((&filled(&[1.0], 1, 2, 2), &filled(&[0.0], 1, 2, 2))), ClassMode::ThreeClass).unwrap();
        assert!((s(&l) - 0.5).abs() < 1e-15);
        // two-class: no identity terms, fake pushed to 1
        let l = adv_loss_generators(&filled(&[0.0], 1, 2, 2), None, Some((&half, &half)), ClassMode::TwoClass).unwrap();
        assert!((s(&l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generator_fake_gradient_points_to_real_target() {
        let pred = Var::from_tensor(&randn(&[1, 2, 2, 2], 5)).unwrap();
        let l = adv_loss_generators(pred.as_tensor(), None, None, ClassMode::ThreeClass).unwrap();
        let g = l.backward().unwrap();
        let grad: Vec<f64> = g.get(&pred).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let p: Vec<f64> = pred.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        for ch in 0..2 {
            for k in 0..4 {
                let i = ch * 4 + k;
                let toward = ClassTargets::REAL[ch] - p[i];
                // descent direction is parallel to (r - pred)
                assert!((-grad[i] - toward * 2.0 / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cycle_and_identity_cases() {
        let x = randn(&[1, 3, 4, 4], 1);
        let y = randn(&[1, 3, 4, 4], 2);
        assert_eq!(s(&cycle_loss(&x, &y, &x, &y).unwrap()), 0.0);
        let l = s(&cycle_loss(&x, &y, &(&x + 0.1).unwrap(), &y).unwrap());
        assert!((l - 0.1).abs() < 1e-12);
        assert_eq!(s(&identity_loss(&x, &x, &y, &y).unwrap()), 0.0);
        let l = s(&identity_loss(&x, &(&x + 0.2).unwrap(), &y, &(&y - 0.2).unwrap()).unwrap());
        assert!((l - 0.4).abs() < 1e-12);
        assert!(matches!(cycle_loss(&x, &y, &randn(&[1, 3, 4, 5], 3), &y), Err(Error::InvalidArgument(_))));
        let y1 = randn(&[1, 1, 4, 4], 2);
        assert!(matches!(identity_loss(&x, &x, &y1, &y1), Err(Error::InvalidConfiguration(_))));
    }

    #[test]
    fn projection_outputs_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let head = ProjectionHead::new(&mut store, "p", 16, 8, &mut rng).unwrap();
        let z = head.forward(&randn(&[2, 16, 3, 3], 1)).unwrap();
        assert_eq!(z.dims(), &[2, 8, 3, 3]);
        let n: Vec<f64> = z.sqr().unwrap().sum(1).unwrap().sqrt().unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(n.iter().all(|v| (v - 1.0).abs() < 1e-6));
        // zero input stays finite
        let zero = Tensor::zeros((1, 8, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let n = (zero.sqr().unwrap().sum_keepdim(1).unwrap() + 1e-24).unwrap().sqrt().unwrap();
        assert!(zero.broadcast_div(&n).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn contrastive_uniform_similarity() {
        let a = filled(&[1.0, 0.0], 1, 1, 1);
        let negs: Vec<Tensor> = (0..4).map(|_| filled(&[1.0, 0.0], 1, 1, 1)).collect();
        let refs: Vec<&Tensor> = negs.iter().collect();
        let l = contrastive_loss::<ChaCha8Rng>(&a, &a, &refs, 0.07, None).unwrap();
        assert!((s(&l) - 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_saturates() {
        let a = filled(&[1.0, 0.0], 1, 2, 2);
        let n = filled(&[-1.0, 0.0], 1, 2, 2);
        let l = contrastive_loss::<ChaCha8Rng>(&a, &a, &[&n, &n], 0.01, None).unwrap();
        assert!(s(&l) < 1e-60);
    }

    #[test]
    fn contrastive_rejects_bad_temperature() {
        let a = filled(&[1.0, 0.0], 1, 1, 1);
        assert!(matches!(contrastive_loss::<ChaCha8Rng>(&a, &a, &[&a], 0.0, None), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn contrastive_cap_limits_negatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = unit(&[1, 4, 4, 4], 1);
        let negs: Vec<Tensor> = (0..4).map(|i| unit(&[1, 4, 4, 4], 10 + i)).collect();
        let refs: Vec<&Tensor> = negs.iter().collect();
        let capped = contrastive_loss(&a, &a, &refs, 0.5, Some(NegativeCap { max: 8, rng: &mut rng })).unwrap();
        let full = contrastive_loss::<ChaCha8Rng>(&a, &a, &refs, 0.5, None).unwrap();
        assert!(s(&capped) < s(&full));
    }

    #[test]
    fn total_loss_combination() {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let parts = LossParts { adv: t(1.0), cyc: t(2.0), id: Some(t(3.0)), cl: t(4.0) };
        let w = LossWeights::segmentation();
        assert!((s(&total_loss(&parts, &w).unwrap()) - (1.0 + 20.0 + 3.0 + 0.4)).abs() < 1e-12);
        let zero = LossParts { adv: t(0.0), cyc: t(0.0), id: None, cl: t(0.0) };
        assert_eq!(s(&total_loss(&zero, &LossWeights::unmixing()).unwrap()), 0.0);
        assert_eq!(LossWeights::unmixing().cyc, 5.0);
        assert_eq!(LossWeights::unmixing().id, 0.0);
        assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
    }
}
