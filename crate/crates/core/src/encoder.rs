//! Frozen linear dual encoder with additive low-rank adapters.
//!
//! Each branch is one frozen projection `W₀` (feature × latent). An adapter
//! adds `scale · B·A`, with `A` (rank × latent) and `B` (feature × rank).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::ClassId;
use crate::numerics::{gram_schmidt, RealMatrix, RealVector};
use crate::rng::{gaussian_matrix, Rng};
use crate::scalar::Scalar;

/// Pre-normalization norms at or below this are degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder<T> {
    pub w_img0: RealMatrix<T>,
    pub w_txt0: RealMatrix<T>,
    pub feature_dim: usize,
}

impl<T: Scalar> FrozenEncoder<T> {
    /// Both branches share a random isometry `Q`; the image branch is
    /// additionally perturbed, `W_img₀ = Q·(I + distortion·G/√latent)`.
    pub fn random(latent_dim: usize, feature_dim: usize, distortion: f64, seed: u64) -> Result<Self> {
        if latent_dim == 0 || feature_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let mut rng = Rng::from_seed_u64(seed);
        let q = if feature_dim >= latent_dim {
            gram_schmidt(&gaussian_matrix::<T>(&mut rng, feature_dim, latent_dim, 1.0), T::of(1e-8))
        } else {
            gram_schmidt(&gaussian_matrix::<T>(&mut rng, latent_dim, feature_dim, 1.0), T::of(1e-8)).transpose()
        };
        if q.shape() != (feature_dim, latent_dim) {
            return Err(Error::Numerical { msg: "encoder basis lost rank".into(), iterations: 0 });
        }
        let g = gaussian_matrix::<T>(&mut rng, latent_dim, latent_dim, distortion / (latent_dim as f64).sqrt());
        let w_img0 = q.matmul(&RealMatrix::identity(latent_dim).add(&g));
        Ok(Self { w_img0, w_txt0: q, feature_dim })
    }

    /// Identity-like encoder (feature_dim = latent_dim, `W₀ = I`).
    pub fn identity(dim: usize) -> Self {
        Self { w_img0: RealMatrix::identity(dim), w_txt0: RealMatrix::identity(dim), feature_dim: dim }
    }

    pub fn latent_dim(&self) -> usize {
        self.w_img0.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankAdapter<T> {
    pub a: RealMatrix<T>,
    pub b: RealMatrix<T>,
    pub rank: usize,
    pub scale: T,
}

impl<T: Scalar> LowRankAdapter<T> {
    /// `scale · B·A`
    pub fn delta(&self) -> RealMatrix<T> {
        self.b.matmul(&self.a).scale(self.scale)
    }

    /// Number of trainable entries in `A` and `B`.
    pub fn num_params(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }

    /// `W₀·x + scale·B·(A·x)`, unnormalized.
    pub fn apply(&self, w0: &RealMatrix<T>, x: &RealVector<T>) -> RealVector<T> {
        let mut out = w0.matvec(x);
        let ax = self.a.matvec(x);
        out.axpy(self.scale, &self.b.matvec(&ax));
        out
    }
}

/// Fresh adapter: `A ~ N(0, 1/latent_dim)` from `seed`, `B = 0`,
/// `scale = 1/rank`, hence a zero delta.
pub fn new_adapter<T: Scalar>(rank: usize, latent_dim: usize, feature_dim: usize, seed: u64) -> LowRankAdapter<T> {
    assert!(rank >= 1 && latent_dim >= 1 && feature_dim >= 1, "adapter dims must be positive");
    let mut rng = Rng::from_seed_u64(seed);
    LowRankAdapter {
        a: gaussian_matrix(&mut rng, rank, latent_dim, 1.0 / (latent_dim as f64).sqrt()),
        b: RealMatrix::zeros(feature_dim, rank),
        rank,
        scale: T::one() / T::of_usize(rank),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrompt<T> {
    pub class_id: ClassId,
    pub prompt_latent: RealVector<T>,
}

/// Unit-normalizes a raw feature, failing on collapse.
pub fn unit<T: Scalar>(raw: RealVector<T>) -> Result<(RealVector<T>, T)> {
    let n = raw.norm();
    if !(n > T::of(DEGENERATE_NORM)) {
        return Err(Error::DegenerateFeature { norm: n.to_f64_lossy() });
    }
    Ok((raw.scale(T::one() / n), n))
}

fn check_dim<T: Scalar>(x: &RealVector<T>, enc: &FrozenEncoder<T>) -> Result<()> {
    if x.dim() != enc.latent_dim() {
        return Err(Error::Input(format!("latent of dim {} for encoder of dim {}", x.dim(), enc.latent_dim())));
    }
    Ok(())
}

/// Unit visual feature `normalize((W_img₀ + scale·B·A)·x)`.
pub fn encode_image<T: Scalar>(
    x: &RealVector<T>,
    enc: &FrozenEncoder<T>,
    adapter: &LowRankAdapter<T>,
) -> Result<RealVector<T>> {
    check_dim(x, enc)?;
    Ok(unit(adapter.apply(&enc.w_img0, x))?.0)
}

/// Unit text feature of a class prompt through the shared text adapter.
pub fn encode_text<T: Scalar>(
    prompt: &ClassPrompt<T>,
    enc: &FrozenEncoder<T>,
    shared_adapter: &LowRankAdapter<T>,
) -> Result<RealVector<T>> {
    check_dim(&prompt.prompt_latent, enc)?;
    Ok(unit(shared_adapter.apply(&enc.w_txt0, &prompt.prompt_latent))?.0)
}

/// Frozen-encoder image feature (no adapter).
pub fn encode_image_frozen<T: Scalar>(x: &RealVector<T>, enc: &FrozenEncoder<T>) -> Result<RealVector<T>> {
    check_dim(x, enc)?;
    Ok(unit(enc.w_img0.matvec(x))?.0)
}

/// Frozen-encoder text feature (no adapter).
pub fn encode_text_frozen<T: Scalar>(prompt: &ClassPrompt<T>, enc: &FrozenEncoder<T>) -> Result<RealVector<T>> {
    check_dim(&prompt.prompt_latent, enc)?;
    Ok(unit(enc.w_txt0.matvec(&prompt.prompt_latent))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian_vector;

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let ad = new_adapter::<f64>(2, 8, 6, 1);
        let d = ad.delta();
        assert_eq!(d.shape(), (6, 8));
        assert_eq!(d.frobenius(), 0.0);
        assert_eq!(ad.num_params(), 28);
        assert_eq!(new_adapter::<f64>(2, 8, 6, 1).a, ad.a);
        assert_ne!(new_adapter::<f64>(2, 8, 6, 2).a, ad.a);
    }

    #[test]
    fn fresh_adapter_matches_frozen_bitwise() {
        let enc = FrozenEncoder::<f64>::random(8, 10, 0.5, 3).unwrap();
        let ad = new_adapter(3, 8, 10, 4);
        let mut rng = Rng::from_seed_u64(5);
        for _ in 0..20 {
            let x = gaussian_vector(&mut rng, 8, 1.0);
            let v = encode_image(&x, &enc, &ad).unwrap();
            assert_eq!(v, encode_image_frozen(&x, &enc).unwrap());
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_encoder_passes_basis_vectors() {
        let enc = FrozenEncoder::<f64>::identity(4);
        let ad = new_adapter(1, 4, 4, 0);
        assert_eq!(encode_image(&RealVector::basis(4, 0), &enc, &ad).unwrap(), RealVector::basis(4, 0));
    }

    #[test]
    fn random_adapter_matches_direct_arithmetic() {
        let mut rng = Rng::from_seed_u64(9);
        let enc = FrozenEncoder::<f64>::random(6, 5, 0.3, 1).unwrap();
        let mut ad = new_adapter::<f64>(2, 6, 5, 2);
        ad.b = gaussian_matrix(&mut rng, 5, 2, 1.0);
        let x = gaussian_vector(&mut rng, 6, 1.0);
        // Oracle: form W + ΔW entrywise, multiply, normalize.
        let w = RealMatrix::from_fn(5, 6, |i, j| {
            enc.w_img0[(i, j)] + ad.scale * (0..2).map(|k| ad.b[(i, k)] * ad.a[(k, j)]).sum::<f64>()
        });
        let raw: Vec<f64> = (0..5).map(|i| (0..6).map(|j| w[(i, j)] * x.0[j]).sum()).collect();
        let n = raw.iter().map(|r| r * r).sum::<f64>().sqrt();
        let got = encode_image(&x, &enc, &ad).unwrap();
        for i in 0..5 {
            assert!((got.0[i] - raw[i] / n).abs() < 1e-13);
        }
        let p = ClassPrompt { class_id: ClassId(0), prompt_latent: x.clone() };
        let t = encode_text(&p, &enc, &ad).unwrap();
        let raw_t = ad.apply(&enc.w_txt0, &x);
        assert!(t.sub(&raw_t.scale(1.0 / raw_t.norm())).norm() < 1e-13);
    }

    #[test]
    fn orthogonal_prompts_stay_orthogonal_under_identity() {
        let enc = FrozenEncoder::<f64>::identity(3);
        let ad = new_adapter(1, 3, 3, 0);
        let p0 = ClassPrompt { class_id: ClassId(0), prompt_latent: RealVector::basis(3, 0) };
        let p1 = ClassPrompt { class_id: ClassId(1), prompt_latent: RealVector::basis(3, 1).scale(2.0) };
        let t0 = encode_text(&p0, &enc, &ad).unwrap();
        let t1 = encode_text(&p1, &enc, &ad).unwrap();
        assert_eq!(t0.dot(&t1), 0.0);
        assert_eq!(t0, encode_text_frozen(&p0, &enc).unwrap());
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let enc = FrozenEncoder::<f64>::identity(3);
        let ad = new_adapter(1, 3, 3, 0);
        assert!(matches!(encode_image(&RealVector::zeros(3), &enc, &ad), Err(Error::DegenerateFeature { .. })));
        assert!(matches!(encode_image(&RealVector::zeros(2), &enc, &ad), Err(Error::Input(_))));
    }

    #[test]
    fn random_encoder_text_branch_is_isometry() {
        let enc = FrozenEncoder::<f64>::random(5, 7, 0.0, 8).unwrap();
        let g = enc.w_txt0.transpose().matmul(&enc.w_txt0);
        assert!(g.sub(&RealMatrix::identity(5)).max_abs() < 1e-12);
        assert_eq!(enc.w_img0, enc.w_txt0);
    }
}
