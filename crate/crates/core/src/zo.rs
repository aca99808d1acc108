//! Two-point zero-order gradient estimates.
//!
//! For a direction `z` and smoothing radius `μ > 0` the scalar estimate is
//! `s · (F(w + μz) − F(w − μz)) / (2μ)`, where `s = d` for sphere directions
//! and `s = 1` for Gaussian ones. With `μ = 0` the exact directional
//! derivative `s · <∇F(w), z>` is used instead.

use crate::error::{invalid, Error, Result};
use crate::model::{Batch, LossSpec, PreparedLoss};
use crate::rng::{norm_from_squared_sum, sample_direction, DirectionKind, NormalStream, Seed64};
use crate::vector::{DenseVector, Model};

/// The `K` scalars a client uploads for one local epoch, already divided by
/// `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZoEstimate {
    pub projections: DenseVector,
    pub mu: f64,
    pub kind: DirectionKind,
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(invalid("mu", format!("smoothing radius must be >= 0, got {mu}")));
    }
    Ok(())
}

/// Scaled directional difference quotient along `z`.
pub fn two_point_scalar(
    spec: &LossSpec,
    w: &Model,
    z: &DenseVector,
    mu: f64,
    batch: &Batch<'_>,
    kind: DirectionKind,
) -> Result<f64> {
    check_mu(mu)?;
    w.check_dim(z)?;
    if mu == 0.0 {
        let g = spec.grad(w, batch)?;
        return Ok(kind.estimator_scale(w.dim()) * g.dot(z)?);
    }
    let prepared = spec.prepare(w, batch)?;
    scalar_from_prepared(&prepared, z, mu, kind)
}

#[inline]
fn scalar_from_prepared(prepared: &PreparedLoss<'_>, z: &DenseVector, mu: f64, kind: DirectionKind) -> Result<f64> {
    let (f_plus, f_minus) = prepared.pair(z, mu)?;
    Ok(kind.estimator_scale(z.dim()) * (f_plus - f_minus) / (2.0 * mu))
}

/// `K`-direction estimate with the directions regenerated from their seeds.
pub fn multi_point_estimate(
    spec: &LossSpec,
    w: &Model,
    seeds: &[Seed64],
    mu: f64,
    batch: &Batch<'_>,
    kind: DirectionKind,
) -> Result<ZoEstimate> {
    let directions = seeds
        .iter()
        .map(|&s| sample_direction(s, w.dim(), kind))
        .collect::<Result<Vec<_>>>()?;
    estimate_along(spec, w, &directions, mu, batch, kind)
}

/// `K`-direction estimate along already materialized directions.
pub fn estimate_along(
    spec: &LossSpec,
    w: &Model,
    directions: &[DenseVector],
    mu: f64,
    batch: &Batch<'_>,
    kind: DirectionKind,
) -> Result<ZoEstimate> {
    check_mu(mu)?;
    if directions.is_empty() {
        return Err(invalid("K", "at least one direction is required"));
    }
    let inv_k = 1.0 / directions.len() as f64;
    let projections = if mu == 0.0 {
        let g = spec.grad(w, batch)?;
        let scale = kind.estimator_scale(w.dim());
        directions
            .iter()
            .map(|z| Ok(inv_k * (scale * g.dot(z)?)))
            .collect::<Result<Vec<_>>>()?
    } else {
        let prepared = spec.prepare(w, batch)?;
        directions
            .iter()
            .map(|z| Ok(inv_k * scalar_from_prepared(&prepared, z, mu, kind)?))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(ZoEstimate {
        projections: DenseVector::from_vec(projections),
        mu,
        kind,
    })
}

/// `Σ_r coeffs[r] · directions[r]`, accumulated in `r` order.
pub fn reconstruct(directions: &[DenseVector], coeffs: &[f64]) -> Result<DenseVector> {
    let Some(first) = directions.first() else {
        return Err(Error::EmptyInput("directions"));
    };
    if coeffs.len() != directions.len() {
        return Err(Error::DimensionMismatch {
            expected: directions.len(),
            actual: coeffs.len(),
        });
    }
    let mut out = DenseVector::zeros(first.dim());
    for (z, &c) in directions.iter().zip(coeffs) {
        out.axpy(c, z)?;
    }
    Ok(out)
}

/// Adds `scale · z` to `w`, regenerating `z` from `seed` one coordinate at a
/// time. Gaussian directions are never materialized; sphere directions need
/// one extra pass over the stream for the normalizing constant.
///
/// Floating-point addition is not invertible, so undoing a perturbation with
/// the opposite scale restores `w` only up to rounding (a few ulps of the
/// larger of `|w[p]|` and `|scale · z[p]|`). A zero scale is a bit-exact
/// no-op.
pub fn perturb_in_place(w: &mut Model, seed: Seed64, scale: f64, kind: DirectionKind) {
    let factor = match kind {
        DirectionKind::GaussianIid => scale,
        DirectionKind::SphereUniform => {
            let sq: f64 = NormalStream::new(seed).take(w.dim()).map(|z| z * z).sum();
            scale / norm_from_squared_sum(sq)
        }
    };
    if factor == 0.0 {
        return;
    }
    for (wp, z) in w.as_mut_slice().iter_mut().zip(NormalStream::new(seed)) {
        *wp += factor * z;
    }
}

/// Two-point estimate computed by perturbing the model in place:
/// `+μ`, evaluate, `−2μ`, evaluate, `+μ` to reset.
pub fn zo_estimate_in_place(
    spec: &LossSpec,
    w: &mut Model,
    seed: Seed64,
    mu: f64,
    batch: &Batch<'_>,
    kind: DirectionKind,
) -> Result<f64> {
    check_mu(mu)?;
    if mu == 0.0 {
        return Err(invalid("mu", "in-place estimation needs mu > 0"));
    }
    perturb_in_place(w, seed, mu, kind);
    let f1 = spec.loss(w, batch);
    perturb_in_place(w, seed, -2.0 * mu, kind);
    let f2 = spec.loss(w, batch);
    perturb_in_place(w, seed, mu, kind);
    Ok(kind.estimator_scale(w.dim()) * (f1? - f2?) / (2.0 * mu))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dataset;
    use crate::rng::derive_seed;

    fn tiny_data() -> Dataset {
        let feats: Vec<f64> = NormalStream::new(Seed64(5)).take(10 * 4).collect();
        Dataset::new(feats, (0..10).map(|i| i % 3).collect(), 4, 3).unwrap()
    }

    fn vec_from(seed: u64, dim: usize, scale: f64) -> DenseVector {
        DenseVector::from_vec(NormalStream::new(Seed64(seed)).take(dim).map(|x| scale * x).collect())
    }

    #[test]
    fn linear_loss_is_exact() {
        let data = tiny_data();
        let batch = Batch::all(&data);
        let c = DenseVector::from_vec(vec![0.5, -1.0, 2.0]);
        let spec = LossSpec::Linear(c.clone());
        let w = DenseVector::from_vec(vec![1.0, 2.0, 3.0]);
        let z = sample_direction(Seed64(3), 3, DirectionKind::SphereUniform).unwrap();
        let g = two_point_scalar(&spec, &w, &z, 0.25, &batch, DirectionKind::SphereUniform).unwrap();
        let want = 3.0 * c.dot(&z).unwrap();
        assert!((g - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn quadratic_odd_terms_cancel() {
        let data = tiny_data();
        let batch = Batch::all(&data);
        let spec = LossSpec::Quadratic(DenseVector::zeros(5));
        let w = vec_from(1, 5, 1.0);
        let z = sample_direction(Seed64(2), 5, DirectionKind::SphereUniform).unwrap();
        let g = two_point_scalar(&spec, &w, &z, 1e-2, &batch, DirectionKind::SphereUniform).unwrap();
        let want = 5.0 * w.dot(&z).unwrap();
        assert!((g - want).abs() <= 1e-10);
    }

    #[test]
    fn logistic_smoothing_converges_to_directional_derivative() {
        let data = tiny_data();
        let batch = Batch::all(&data);
        let spec = LossSpec::MulticlassLogistic { bias: false };
        let w = vec_from(7, 12, 0.5);
        let z = sample_direction(Seed64(8), 12, DirectionKind::SphereUniform).unwrap();
        let kind = DirectionKind::SphereUniform;
        let smooth = two_point_scalar(&spec, &w, &z, 1e-3, &batch, kind).unwrap();
        let exact = two_point_scalar(&spec, &w, &z, 0.0, &batch, kind).unwrap();
        let gnorm = spec.grad(&w, &batch).unwrap().l2_norm();
        assert!((smooth - exact).abs() <= 1e-4 * 12.0 * gnorm);
    }

    #[test]
    fn negative_mu_is_rejected() {
        let data = tiny_data();
        let spec = LossSpec::Quadratic(DenseVector::zeros(2));
        let w = DenseVector::zeros(2);
        let z = DenseVector::from_vec(vec![1.0, 0.0]);
        let kind = DirectionKind::SphereUniform;
        assert!(two_point_scalar(&spec, &w, &z, -1.0, &Batch::all(&data), kind).is_err());
        let z3 = DenseVector::zeros(3);
        assert!(two_point_scalar(&spec, &w, &z3, 1.0, &Batch::all(&data), kind).is_err());
    }

    #[test]
    fn multi_point_scales_by_k_and_reconstructs() {
        let data = tiny_data();
        let batch = Batch::all(&data);
        let c = vec_from(11, 6, 1.0);
        let spec = LossSpec::Linear(c.clone());
        let w = DenseVector::zeros(6);
        let kind = DirectionKind::SphereUniform;
        let seeds: Vec<Seed64> = (1..=4).map(|r| derive_seed(Seed64(9), 1, 1, r)).collect();
        let est = multi_point_estimate(&spec, &w, &seeds, 1e-3, &batch, kind).unwrap();
        assert_eq!(est.projections.dim(), 4);
        let dirs: Vec<DenseVector> = seeds.iter().map(|&s| sample_direction(s, 6, kind).unwrap()).collect();
        for (r, z) in dirs.iter().enumerate() {
            let single = two_point_scalar(&spec, &w, z, 1e-3, &batch, kind).unwrap();
            assert_eq!(est.projections.as_slice()[r], single / 4.0);
        }
        let rec = reconstruct(&dirs, est.projections.as_slice()).unwrap();
        let mut manual = DenseVector::zeros(6);
        for z in &dirs {
            let g = two_point_scalar(&spec, &w, z, 1e-3, &batch, kind).unwrap();
            manual.axpy(g / 4.0, z).unwrap();
        }
        for (a, b) in rec.as_slice().iter().zip(manual.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = multi_point_estimate(&spec, &w, &seeds, 1e-3, &batch, kind).unwrap();
        assert_eq!(est, again);
    }

    #[test]
    fn single_direction_has_unit_factor() {
        let data = tiny_data();
        let batch = Batch::all(&data);
        let spec = LossSpec::Quadratic(DenseVector::zeros(3));
        let w = vec_from(4, 3, 1.0);
        let kind = DirectionKind::GaussianIid;
        let seed = Seed64(77);
        let est = multi_point_estimate(&spec, &w, &[seed], 1e-3, &batch, kind).unwrap();
        let z = sample_direction(seed, 3, kind).unwrap();
        let g = two_point_scalar(&spec, &w, &z, 1e-3, &batch, kind).unwrap();
        assert_eq!(est.projections.as_slice(), &[g]);
    }

    #[test]
    fn zero_scale_perturbation_is_noop() {
        let mut w = vec_from(1, 50, 1.0);
        let orig = w.clone();
        perturb_in_place(&mut w, Seed64(2), 0.0, DirectionKind::GaussianIid);
        assert_eq!(w, orig);
    }

    fn assert_restored(w: &DenseVector, orig: &DenseVector, amplitude: f64) {
        for (a, b) in w.as_slice().iter().zip(orig.as_slice()) {
            let ulp_scale = b.abs().max(amplitude) * f64::EPSILON;
            assert!((a - b).abs() <= 4.0 * ulp_scale, "{a} vs {b}");
        }
    }

    #[test]
    fn perturbation_round_trips_up_to_rounding() {
        for kind in [DirectionKind::GaussianIid, DirectionKind::SphereUniform] {
            let mut w = vec_from(3, 200, 1.0);
            let orig = w.clone();
            perturb_in_place(&mut w, Seed64(4), 1e-3, kind);
            assert_ne!(w, orig);
            perturb_in_place(&mut w, Seed64(4), -1e-3, kind);
            assert_restored(&w, &orig, 1e-3 * 6.0);

            let mut w = orig.clone();
            perturb_in_place(&mut w, Seed64(4), 1e-3, kind);
            perturb_in_place(&mut w, Seed64(4), -2e-3, kind);
            perturb_in_place(&mut w, Seed64(4), 1e-3, kind);
            assert_restored(&w, &orig, 2e-3 * 6.0);
        }
    }

    #[test]
    fn perturbation_of_zero_model_restores_bit_exactly() {
        // From w = 0 every intermediate value is exactly ±a or ±2a.
        for kind in [DirectionKind::GaussianIid, DirectionKind::SphereUniform] {
            let zero = DenseVector::zeros(100);
            let mut w = zero.clone();
            perturb_in_place(&mut w, Seed64(10), 1e-3, kind);
            perturb_in_place(&mut w, Seed64(10), -1e-3, kind);
            assert!(w.as_slice().iter().all(|x| *x == 0.0));
            let mut w = zero.clone();
            perturb_in_place(&mut w, Seed64(10), 1e-3, kind);
            perturb_in_place(&mut w, Seed64(10), -2e-3, kind);
            perturb_in_place(&mut w, Seed64(10), 1e-3, kind);
            assert!(w.as_slice().iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn in_place_matches_explicit_gaussian_estimate() {
        let data = tiny_data();
        let batch = Batch::all(&data);
        let kind = DirectionKind::GaussianIid;
        for spec in [
            LossSpec::Quadratic(DenseVector::zeros(12)),
            LossSpec::MulticlassLogistic { bias: false },
        ] {
            let mut w = vec_from(21, 12, 0.3);
            let orig = w.clone();
            let seed = Seed64(22);
            let got = zo_estimate_in_place(&spec, &mut w, seed, 1e-3, &batch, kind).unwrap();
            let z = sample_direction(seed, 12, kind).unwrap();
            let want = two_point_scalar(&spec, &orig, &z, 1e-3, &batch, kind).unwrap();
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
            assert_restored(&w, &orig, 2e-3 * 6.0);
        }
        let c = vec_from(30, 12, 1.0);
        let spec = LossSpec::Linear(c.clone());
        let mut w = DenseVector::zeros(12);
        let got = zo_estimate_in_place(&spec, &mut w, Seed64(31), 1e-3, &batch, kind).unwrap();
        let z = sample_direction(Seed64(31), 12, kind).unwrap();
        assert!((got - c.dot(&z).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn in_place_requires_positive_mu() {
        let data = tiny_data();
        let spec = LossSpec::Quadratic(DenseVector::zeros(2));
        let mut w = DenseVector::zeros(2);
        let r = zo_estimate_in_place(&spec, &mut w, Seed64(1), 0.0, &Batch::all(&data), DirectionKind::GaussianIid);
        assert!(r.is_err());
    }
}
