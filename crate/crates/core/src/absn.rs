//! Approximate bidirectional spectral normalization (ABSN).
//!
//! A convolution weight `w` of shape `(C_out, C_in, kH, kW)` has two matrix
//! views: the forward reshape `(C_out, C_in·kH·kW)`, which governs the flow of
//! activations, and the backward reshape `(C_in, C_out·kH·kW)`, which governs
//! the flow of gradients. Each view's spectral norm is estimated with a
//! differentiable lower bound seeded by the matrix row sums, and the weight is
//! divided by the root-mean-square of the two estimates.
//!
//! All functions here are built from tensor ops, so gradients flow through the
//! normalizer when it is applied inside a forward pass.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Guard for vanishing row sums and denominators.
pub const EPSILON: f64 = 1e-12;

/// Forward and backward matrix views of one convolution weight.
#[derive(Debug, Clone)]
pub struct ReshapePair {
    pub forward: Tensor,
    pub backward: Tensor,
}

impl ReshapePair {
    pub fn new(w: &Tensor) -> Result<Self> {
        Ok(Self {
            forward: reshape_forward(w)?,
            backward: reshape_backward(w)?,
        })
    }
}

/// Estimate of a spectral norm together with whether the row-sum seed was
/// degenerate and the power-method fallback was used instead.
#[derive(Debug, Clone)]
pub struct SpectralBound {
    pub value: Tensor,
    pub fallback: bool,
}

fn conv_dims(w: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let dims = w.dims();
    if dims.len() != 4 {
        return Err(Error::invalid_arg(format!(
            "expected a rank-4 weight tensor, got shape {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid_arg(format!(
            "weight tensor has a zero dimension: {dims:?}"
        )));
    }
    Ok((dims[0], dims[1], dims[2], dims[3]))
}

/// `(C_out, C_in, kH, kW) -> (C_out, C_in·kH·kW)`; row `i` holds every entry
/// feeding output channel `i`.
pub fn reshape_forward(w: &Tensor) -> Result<Tensor> {
    let (co, ci, kh, kw) = conv_dims(w)?;
    Ok(w.reshape((co, ci * kh * kw))?)
}

/// `(C_out, C_in, kH, kW) -> (C_in, C_out·kH·kW)`.
pub fn reshape_backward(w: &Tensor) -> Result<Tensor> {
    let (co, ci, kh, kw) = conv_dims(w)?;
    Ok(w.transpose(0, 1)?.contiguous()?.reshape((ci, co * kh * kw))?)
}

/// Inverse of [`reshape_forward`].
pub fn unreshape_forward(m: &Tensor, shape: (usize, usize, usize, usize)) -> Result<Tensor> {
    Ok(m.reshape(shape)?)
}

/// Inverse of [`reshape_backward`].
pub fn unreshape_backward(m: &Tensor, shape: (usize, usize, usize, usize)) -> Result<Tensor> {
    let (co, ci, kh, kw) = shape;
    Ok(m.reshape((ci, co, kh, kw))?.transpose(0, 1)?.contiguous()?)
}

fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn l2(t: &Tensor) -> Result<Tensor> {
    Ok(t.sqr()?.sum_all()?.sqrt()?)
}

/// Deterministic 64-bit FNV-1a hash of a layer name, used to seed the fallback
/// start vector.
pub fn name_seed(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn fallback_start(m: usize, seed: u64, like: &Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(EPSILON);
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(Tensor::from_vec(v, (m, 1), like.device())?.to_dtype(like.dtype())?)
}

/// `‖W Wᵀ u‖ / ‖Wᵀ u‖` for a column vector `u`; returns the value and the
/// denominator as read back to the host.
fn rayleigh_like(w: &Tensor, u: &Tensor) -> Result<(Tensor, f64)> {
    let t = w.t()?.matmul(u)?;
    let den = l2(&t)?;
    let num = l2(&w.matmul(&t)?)?;
    let den_host = scalar_f64(&den)?;
    Ok((num.div(&den)?, den_host))
}

/// Row-sum lower bound on the spectral norm of a matrix, with the fallback
/// start vector derived from `seed`.
pub fn spectral_lower_bound_seeded(w: &Tensor, seed: u64) -> Result<SpectralBound> {
    let (m, _n) = w.dims2().map_err(|_| {
        Error::invalid_arg(format!("expected a matrix, got shape {:?}", w.dims()))
    })?;
    let r = w.sum_keepdim(1)?;
    let r_norm = scalar_f64(&l2(&r)?)?;
    if r_norm >= EPSILON {
        let (value, den) = rayleigh_like(w, &r)?;
        if den >= EPSILON {
            return Ok(SpectralBound { value, fallback: false });
        }
    }
    // Row sums vanish: one power-method step from a fixed pseudo-random vector.
    let u0 = fallback_start(m, seed, w)?;
    let (value, den) = rayleigh_like(w, &u0)?;
    if den < EPSILON {
        return Err(Error::InvalidState(
            "spectral bound of an all-zero matrix is undefined".into(),
        ));
    }
    Ok(SpectralBound { value, fallback: true })
}

/// Row-sum lower bound `‖(Σ_j w_j w_jᵀ) r‖ / ‖(w_1ᵀr, …, w_nᵀr)‖`, where `w_j`
/// are the columns of `w` and `r` its row-sum vector.
pub fn spectral_lower_bound(w: &Tensor) -> Result<SpectralBound> {
    spectral_lower_bound_seeded(w, 0)
}

/// The two directional bounds and their root-mean-square.
#[derive(Debug, Clone)]
pub struct SigmaRms {
    pub forward: SpectralBound,
    pub backward: SpectralBound,
    pub rms: Tensor,
}

pub fn sigma_rms_detailed(w: &Tensor, name: &str) -> Result<SigmaRms> {
    let pair = ReshapePair::new(w)?;
    let seed = name_seed(name);
    let forward = spectral_lower_bound_seeded(&pair.forward, seed)?;
    let backward = spectral_lower_bound_seeded(&pair.backward, seed ^ 0x9e37_79b9_7f4a_7c15)
        .map_err(|e| match e {
            Error::InvalidState(_) => {
                Error::InvalidState(format!("cannot normalize all-zero weight `{name}`"))
            }
            other => other,
        })?;
    let rms = ((forward.value.sqr()? + backward.value.sqr()?)? * 0.5)?.sqrt()?;
    Ok(SigmaRms { forward, backward, rms })
}

/// `√((σ(W_fw)² + σ(W_bw)²) / 2)` as a scalar tensor.
pub fn sigma_rms(w: &Tensor) -> Result<Tensor> {
    Ok(sigma_rms_detailed(w, "")?.rms)
}

/// Divides `w` by its bidirectional RMS spectral estimate. `name` seeds the
/// degenerate-row-sum fallback.
pub fn absn_apply_named(w: &Tensor, name: &str) -> Result<Tensor> {
    let sigma = sigma_rms_detailed(w, name)?.rms;
    Ok(w.broadcast_div(&sigma)?)
}

pub fn absn_apply(w: &Tensor) -> Result<Tensor> {
    absn_apply_named(w, "")
}

/// Exact largest singular value by full SVD. Test and diagnostic use only.
pub fn spectral_norm_oracle(w: &Tensor) -> Result<f64> {
    let (m, n) = w.dims2()?;
    let data: Vec<f64> = w.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mat = nalgebra::DMatrix::from_row_slice(m, n, &data);
    let sv = mat.singular_values();
    Ok(sv.iter().cloned().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t4(v: Vec<f64>, s: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, s, &Device::Cpu).unwrap()
    }

    fn mat(v: Vec<f64>, m: usize, n: usize) -> Tensor {
        Tensor::from_vec(v, (m, n), &Device::Cpu).unwrap()
    }

    fn val(t: &Tensor) -> f64 {
        scalar_f64(t).unwrap()
    }

    #[test]
    fn reshape_shapes() {
        let w = Tensor::zeros((8, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(reshape_forward(&w).unwrap().dims(), &[8, 36]);
        assert_eq!(reshape_backward(&w).unwrap().dims(), &[4, 72]);
    }

    #[test]
    fn reshape_single_entry() {
        let w = t4(vec![2.0], (1, 1, 1, 1));
        let f: Vec<Vec<f64>> = reshape_forward(&w).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f64>> = reshape_backward(&w).unwrap().to_vec2().unwrap();
        assert_eq!(f, vec![vec![2.0]]);
        assert_eq!(b, vec![vec![2.0]]);
    }

    #[test]
    fn forward_reshape_of_dense_weight_is_the_matrix() {
        let v: Vec<f64> = (0..15).map(|i| i as f64 * 0.5 - 3.0).collect();
        let w = t4(v.clone(), (3, 5, 1, 1));
        let f: Vec<Vec<f64>> = reshape_forward(&w).unwrap().to_vec2().unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(f[i][j], v[i * 5 + j]);
            }
        }
        let b: Vec<Vec<f64>> = reshape_backward(&w).unwrap().to_vec2().unwrap();
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(b[j][i], v[i * 5 + j]);
            }
        }
    }

    #[test]
    fn backward_reshape_enumerates_output_channels_then_space() {
        let (co, ci, kh, kw) = (2, 3, 2, 2);
        let v: Vec<f64> = (0..co * ci * kh * kw).map(|i| i as f64).collect();
        let w = t4(v.clone(), (co, ci, kh, kw));
        let b: Vec<Vec<f64>> = reshape_backward(&w).unwrap().to_vec2().unwrap();
        for o in 0..co {
            for i in 0..ci {
                for y in 0..kh {
                    for x in 0..kw {
                        let src = ((o * ci + i) * kh + y) * kw + x;
                        assert_eq!(b[i][(o * kh + y) * kw + x], v[src]);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        let w = Tensor::zeros((0, 4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(reshape_forward(&w), Err(Error::InvalidArgument(_))));
        let w = Tensor::zeros((4, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(reshape_backward(&w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bound_of_identity_is_one() {
        let b = spectral_lower_bound(&mat(vec![1.0, 0.0, 0.0, 1.0], 2, 2)).unwrap();
        assert!(!b.fallback);
        assert_eq!(val(&b.value), 1.0);
    }

    #[test]
    fn bound_is_exact_on_rank_one() {
        // u vᵀ with u = v = (1, 2)
        let w = mat(vec![1.0, 2.0, 2.0, 4.0], 2, 2);
        let b = val(&spectral_lower_bound(&w).unwrap().value);
        assert!((b - 5.0).abs() < 1e-12);
        assert!((spectral_norm_oracle(&w).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_row_sums_use_fallback() {
        // rows sum to zero
        let w = mat(vec![1.0, -1.0, 2.0, -2.0], 2, 2);
        let b = spectral_lower_bound_seeded(&w, 7).unwrap();
        assert!(b.fallback);
        let oracle = spectral_norm_oracle(&w).unwrap();
        let v = val(&b.value);
        assert!(v > 0.0 && v <= oracle + 1e-9);
        // rank one, so a single power step is exact
        assert!((v - oracle).abs() < 1e-9);
    }

    #[test]
    fn fallback_is_deterministic_per_name() {
        let w = mat(vec![1.0, -1.0, 0.5, 3.0, -2.0, -1.0], 3, 2);
        let a = val(&spectral_lower_bound_seeded(&w, name_seed("enc.0")).unwrap().value);
        let b = val(&spectral_lower_bound_seeded(&w, name_seed("enc.0")).unwrap().value);
        assert_eq!(a, b);
    }

    #[test]
    fn all_zero_weight_is_invalid_state() {
        let w = Tensor::zeros((2, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(sigma_rms(&w), Err(Error::InvalidState(_))));
        assert!(matches!(absn_apply(&w), Err(Error::InvalidState(_))));
    }

    #[test]
    fn single_entry_normalizes_to_one() {
        let w = t4(vec![2.0], (1, 1, 1, 1));
        assert_eq!(val(&sigma_rms(&w).unwrap()), 2.0);
        let n: Vec<f64> = absn_apply(&w).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(n, vec![1.0]);
    }

    #[test]
    fn oracle_simple_cases() {
        assert!((spectral_norm_oracle(&mat(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], 3, 3)).unwrap() - 1.0).abs() < 1e-12);
        assert!((spectral_norm_oracle(&mat(vec![3., 0., 0., 1.], 2, 2)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unreshape_round_trip() {
        let s = (3, 2, 3, 2);
        let v: Vec<f64> = (0..36).map(|i| (i as f64).sin()).collect();
        let w = t4(v.clone(), s);
        let f = unreshape_forward(&reshape_forward(&w).unwrap(), s).unwrap();
        let b = unreshape_backward(&reshape_backward(&w).unwrap(), s).unwrap();
        assert_eq!(f.flatten_all().unwrap().to_vec1::<f64>().unwrap(), v);
        assert_eq!(b.flatten_all().unwrap().to_vec1::<f64>().unwrap(), v);
    }
}
