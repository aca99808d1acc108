//! Statistical and brute-force property suites, runnable from the CLI.
//!
//! Each suite returns one [`Check`] per property with the measured value and
//! the bound it was held to.

use rayon::prelude::*;

use crate::aggregation::{cwtm, krum, nnm, probe_robustness, AggregationRule, BaseRule};
use crate::data::{synthetic_classification, SyntheticSpec};
use crate::error::{invalid, Result};
use crate::model::{Batch, Dataset, LossSpec};
use crate::rng::{sample_direction, DirectionKind, NormalStream, Seed64};
use crate::vector::{dot, sq_dist, DenseVector};
use crate::zo::two_point_scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, measured: f64, bound: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            measured,
            bound,
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: measured {:.6e}, bound {:.6e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

pub const SUITES: &[&str] = &[
    "zo-unbiasedness",
    "zo-second-moment",
    "zo-projection-moment",
    "jl",
    "agg-oracles",
    "robustness-probe",
];

/// Runs a suite by name; `all` runs every suite.
pub fn run_suite(name: &str, seed: Seed64) -> Result<Vec<Check>> {
    match name {
        "zo-unbiasedness" => zo_unbiasedness(100_000, seed),
        "zo-second-moment" => zo_second_moment(200, 500, seed),
        "zo-projection-moment" => zo_projection_moment(1_000_000, seed),
        "jl" => jl(0.5, 0.01, 2048, 10_000, seed),
        "agg-oracles" => agg_oracles(100, seed),
        "robustness-probe" => robustness_probe(1000, seed),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
        other => Err(invalid(
            "suite",
            format!("unknown suite `{other}`; expected one of {} or all", SUITES.join(", ")),
        )),
    }
}

fn gaussian_vector(seed: Seed64, dim: usize) -> DenseVector {
    DenseVector::from_vec(NormalStream::new(seed).take(dim).collect())
}

fn dummy_data() -> Dataset {
    Dataset::new(vec![0.0], vec![0], 1, 1).expect("valid")
}

fn sample_seed(seed: Seed64, tag: u64, i: u64) -> Seed64 {
    seed.derive(tag, &[i])
}

/// Monte Carlo mean of `z·g` on a quadratic against the true gradient, per
/// coordinate, at three standard errors.
pub fn zo_unbiasedness(draws: usize, seed: Seed64) -> Result<Vec<Check>> {
    let d = 10;
    let center = gaussian_vector(seed.derive(1, &[0]), d);
    let spec = LossSpec::Quadratic(center.clone());
    let w = gaussian_vector(seed.derive(1, &[1]), d);
    let data = dummy_data();
    let batch = Batch::all(&data);
    let grad = w.sub(&center)?;
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for i in 0..draws {
        let z = sample_direction(sample_seed(seed, 2, i as u64), d, DirectionKind::SphereUniform)?;
        let g = two_point_scalar(&spec, &w, &z, 1e-3, &batch, DirectionKind::SphereUniform)?;
        for j in 0..d {
            let v = z.as_slice()[j] * g;
            sum[j] += v;
            sum_sq[j] += v * v;
        }
    }
    let n = draws as f64;
    let mut worst = 0.0f64;
    for j in 0..d {
        let mean = sum[j] / n;
        let var = (sum_sq[j] / n - mean * mean).max(0.0);
        let se = (var / n).sqrt();
        worst = worst.max((mean - grad.as_slice()[j]).abs() / se);
    }
    Ok(vec![Check::new(
        "zo-unbiasedness",
        worst <= 3.0,
        worst,
        3.0,
        format!("largest coordinate error in standard errors, {draws} draws, d = {d}"),
    )])
}

/// Largest ratio `‖∇F(a) − ∇F(b)‖ / ‖a − b‖` over random nearby pairs.
fn lipschitz_probe(spec: &LossSpec, w: &DenseVector, batch: &Batch<'_>, seed: Seed64) -> Result<f64> {
    let mut best = 0.0f64;
    for i in 0..50 {
        let step = gaussian_vector(seed.derive(3, &[i]), w.dim()).scale(0.1);
        let a = w.add(&step)?;
        let b = w.sub(&step)?;
        let ga = spec.grad(&a, batch)?;
        let gb = spec.grad(&b, batch)?;
        best = best.max(ga.sub(&gb)?.l2_norm() / a.sub(&b)?.l2_norm());
    }
    Ok(best)
}

/// Trials of the bound `E‖zg‖² ≤ 2d‖∇F‖² + L²μ²d²/2`, each estimating the
/// expectation from `draws` samples; at least 99% of trials must satisfy it.
pub fn zo_second_moment(trials: usize, draws: usize, seed: Seed64) -> Result<Vec<Check>> {
    let data = synthetic_classification(&SyntheticSpec {
        samples: 64,
        dim: 8,
        classes: 3,
        ..SyntheticSpec::default()
    })?;
    let batch = Batch::all(&data);
    let mu = 1e-3;
    let mut out = Vec::new();
    let logistic = LossSpec::MulticlassLogistic { bias: false };
    let cases: [(&str, LossSpec, DenseVector); 2] = [
        (
            "zo-second-moment/quadratic",
            LossSpec::Quadratic(gaussian_vector(seed.derive(4, &[0]), 12)),
            gaussian_vector(seed.derive(4, &[1]), 12),
        ),
        (
            "zo-second-moment/logistic",
            logistic.clone(),
            gaussian_vector(seed.derive(4, &[2]), logistic.model_dim(&data)).scale(0.3),
        ),
    ];
    for (name, spec, w) in cases {
        let d = w.dim() as f64;
        let grad = spec.grad(&w, &batch)?;
        let lip = lipschitz_probe(&spec, &w, &batch, seed)?;
        let bound = 2.0 * d * grad.l2_norm().powi(2) + lip * lip * mu * mu * d * d / 2.0;
        let moments = (0..trials)
            .into_par_iter()
            .map(|trial| {
                let mut acc = 0.0;
                for i in 0..draws {
                    let s = seed.derive(5, &[trial as u64, i as u64]);
                    let z = sample_direction(s, w.dim(), DirectionKind::SphereUniform)?;
                    let g = two_point_scalar(&spec, &w, &z, mu, &batch, DirectionKind::SphereUniform)?;
                    // ‖z g‖² = g² for a unit direction.
                    acc += g * g * dot(z.as_slice(), z.as_slice());
                }
                Ok(acc / draws as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        let ok = moments.iter().filter(|&&m| m <= bound).count() as f64 / trials as f64;
        let worst = moments.iter().copied().fold(0.0, f64::max);
        out.push(Check::new(
            name,
            ok >= 0.99,
            ok,
            0.99,
            format!("fraction of {trials} trials within bound {bound:.4e}; largest moment {worst:.4e}"),
        ));
    }
    Ok(out)
}

/// With `μ = 0` and sphere directions, `E‖zg‖² = d‖∇F‖²`; checked to 2%.
pub fn zo_projection_moment(draws: usize, seed: Seed64) -> Result<Vec<Check>> {
    let d = 16;
    let center = gaussian_vector(seed.derive(6, &[0]), d);
    let spec = LossSpec::Quadratic(center.clone());
    let w = gaussian_vector(seed.derive(6, &[1]), d);
    let grad = w.sub(&center)?;
    let data = dummy_data();
    let sum: f64 = (0..draws)
        .into_par_iter()
        .map(|i| {
            let z = sample_direction(sample_seed(seed, 7, i as u64), d, DirectionKind::SphereUniform)
                .expect("positive dimension");
            let g = two_point_scalar(&spec, &w, &z, 0.0, &Batch::all(&data), DirectionKind::SphereUniform)
                .expect("valid inputs");
            g * g
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let moment = sum / draws as f64;
    let expected = d as f64 * grad.l2_norm().powi(2);
    let rel = (moment - expected).abs() / expected;
    Ok(vec![Check::new(
        "zo-projection-moment",
        rel <= 0.02,
        rel,
        0.02,
        format!("relative error of E|zg|^2 = {moment:.6} vs d|grad|^2 = {expected:.6}, {draws} draws"),
    )])
}

/// Number of rows the distance-preservation lemma asks for.
pub fn jl_rows(eps: f64, delta: f64) -> usize {
    (64.0 / (eps * eps) * (2.0 / delta).ln()).ceil() as usize
}

/// Failure rate of `‖√(d/K)·P x‖² ∈ [(1−ε), (1+ε)]‖x‖²` over random `x` for
/// one fixed matrix `P` with `K = jl_rows(ε, δ)` unit-sphere rows.
pub fn jl(eps: f64, delta: f64, dim: usize, vectors: usize, seed: Seed64) -> Result<Vec<Check>> {
    let k = jl_rows(eps, delta);
    let rows = (0..k)
        .into_par_iter()
        .map(|r| sample_direction(seed.derive(8, &[r as u64]), dim, DirectionKind::SphereUniform))
        .collect::<Result<Vec<_>>>()?;
    let scale = dim as f64 / k as f64;
    let failures: usize = (0..vectors)
        .into_par_iter()
        .map(|i| {
            let x = gaussian_vector(seed.derive(9, &[i as u64]), dim);
            let norm2 = dot(x.as_slice(), x.as_slice());
            let proj2: f64 = rows.iter().map(|z| dot(z.as_slice(), x.as_slice()).powi(2)).sum();
            let ratio = scale * proj2 / norm2;
            usize::from(!(1.0 - eps..=1.0 + eps).contains(&ratio))
        })
        .sum();
    let rate = failures as f64 / vectors as f64;
    Ok(vec![Check::new(
        "jl",
        rate <= delta,
        rate,
        delta,
        format!("failure rate, K = {k}, d = {dim}, {vectors} vectors, eps = {eps}"),
    )])
}

/// Trimmed mean by repeatedly removing one smallest and one largest value.
pub fn brute_cwtm(updates: &[DenseVector], beta: f64) -> DenseVector {
    let n = updates.len();
    let k = (beta * n as f64 + 1e-12).floor() as usize;
    let dim = updates[0].dim();
    let out = (0..dim)
        .map(|j| {
            let mut vals: Vec<f64> = updates.iter().map(|u| u.as_slice()[j]).collect();
            for _ in 0..k {
                let lo = (0..vals.len()).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("non-empty");
                vals.remove(lo);
                let hi = (0..vals.len()).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).expect("non-empty");
                vals.remove(hi);
            }
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    DenseVector::from_vec(out)
}

/// All `m`-element subsets of `items`.
fn subsets(items: &[usize], m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    if items.len() < m {
        return Vec::new();
    }
    let mut with: Vec<Vec<usize>> = subsets(&items[1..], m - 1)
        .into_iter()
        .map(|mut s| {
            s.insert(0, items[0]);
            s
        })
        .collect();
    with.extend(subsets(&items[1..], m));
    with
}

/// Krum scores by exhaustive search over neighbor subsets.
pub fn brute_krum_scores(updates: &[DenseVector], f: usize) -> Vec<f64> {
    let n = updates.len();
    let m = n - f - 2;
    let dist = |a: usize, b: usize| sq_dist(updates[a].as_slice(), updates[b].as_slice()).sqrt();
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            subsets(&others, m)
                .iter()
                .map(|s| s.iter().map(|&j| dist(i, j)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Indices whose brute-force Krum score is minimal. Scores within rounding of
/// the minimum count as tied: in one dimension distance sums are linear in
/// the inputs, so exact ties are common and only summation order separates
/// them.
pub fn brute_krum_winners(updates: &[DenseVector], f: usize) -> Vec<usize> {
    let scores = brute_krum_scores(updates, f);
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    (0..scores.len())
        .filter(|&i| scores[i] - best <= 1e-12 * best.max(1.0))
        .collect()
}

/// NNM by exhaustive search for the closest `n − f` subset of each point.
pub fn brute_nnm(updates: &[DenseVector], f: usize) -> Vec<DenseVector> {
    let n = updates.len();
    let all: Vec<usize> = (0..n).collect();
    let dim = updates[0].dim();
    (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, Vec::new());
            for s in subsets(&all, n - f) {
                let total: f64 = s
                    .iter()
                    .map(|&j| sq_dist(updates[i].as_slice(), updates[j].as_slice()))
                    .sum();
                if total < best.0 {
                    best = (total, s);
                }
            }
            let mut mean = vec![0.0; dim];
            for &j in &best.1 {
                for (m, x) in mean.iter_mut().zip(updates[j].as_slice()) {
                    *m += x;
                }
            }
            DenseVector::from_vec(mean.into_iter().map(|m| m / (n - f) as f64).collect())
        })
        .collect()
}

fn max_abs_diff(a: &DenseVector, b: &DenseVector) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Library rules against the brute-force references on random instances.
pub fn agg_oracles(instances: usize, seed: Seed64) -> Result<Vec<Check>> {
    let tol = 1e-12;
    let mut worst = [0.0f64; 3];
    for inst in 0..instances {
        let mut rng = seed.derive(10, &[inst as u64]).rng();
        let n = 3 + rng.below(6) as usize;
        let dim = 1 + rng.below(4) as usize;
        let updates: Vec<DenseVector> = (0..n)
            .map(|i| gaussian_vector(seed.derive(11, &[inst as u64, i as u64]), dim))
            .collect();
        let beta = [0.0, 0.1, 0.2, 0.25, 1.0 / 3.0, 0.4][rng.below(6) as usize];
        worst[0] = worst[0].max(max_abs_diff(&cwtm(&updates, beta)?, &brute_cwtm(&updates, beta)));
        let f_nnm = rng.below(n as u64) as usize;
        for (a, b) in nnm(&updates, f_nnm)?.iter().zip(brute_nnm(&updates, f_nnm)) {
            worst[2] = worst[2].max(max_abs_diff(a, &b));
        }
        let f_krum = rng.below((n - 2) as u64) as usize;
        let chosen = krum(&updates, f_krum)?;
        let gap = brute_krum_winners(&updates, f_krum)
            .into_iter()
            .map(|i| max_abs_diff(&chosen, &updates[i]))
            .fold(f64::INFINITY, f64::min);
        worst[1] = worst[1].max(gap);
    }
    let example = [vec![2.0, 2.0, 0.0], vec![0.0, -1.0, -1.0], vec![4.0, 0.0, -4.0]]
        .map(DenseVector::from_vec);
    let worked = max_abs_diff(&cwtm(&example, 1.0 / 3.0)?, &DenseVector::from_vec(vec![2.0, 0.0, -1.0]));
    let mut out: Vec<Check> = ["cwtm", "krum", "nnm"]
        .iter()
        .zip(worst)
        .map(|(name, w)| {
            Check::new(
                &format!("agg-oracles/{name}"),
                w <= tol,
                w,
                tol,
                format!("max abs difference over {instances} random instances"),
            )
        })
        .collect();
    out.push(Check::new(
        "agg-oracles/cwtm-worked-example",
        worked <= tol,
        worked,
        tol,
        "three-vector example at beta = 1/3",
    ));
    Ok(out)
}

/// Randomized adversarial search against CWTM(1/4) with n = 8, f = 2,
/// compared with the plain mean under the same draws.
pub fn robustness_probe(draws: usize, seed: Seed64) -> Result<Vec<Check>> {
    let honest: Vec<DenseVector> = (0..6).map(|i| gaussian_vector(seed.derive(12, &[i]), 4)).collect();
    let rule = AggregationRule::new(BaseRule::Cwtm { beta: 0.25 });
    let probe = probe_robustness(&rule, &honest, 2, draws, seed.derive(13, &[]))?;
    let mut checks = vec![Check::new(
        "robustness-probe/cwtm",
        probe.rule_kappa.is_finite() && probe.rule_kappa < probe.mean_kappa,
        probe.rule_kappa,
        probe.mean_kappa,
        format!("worst ratio over {draws} draws; bound is the mean rule's worst ratio"),
    )];
    // Sanity: with no adversaries the mean is exact.
    let all: Vec<usize> = (0..honest.len()).collect();
    let k = crate::aggregation::empirical_robustness(&AggregationRule::mean(), &honest, &all)?;
    checks.push(Check::new(
        "robustness-probe/mean-without-adversaries",
        k <= 1e-20,
        k,
        1e-20,
        "",
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jl_row_count() {
        assert_eq!(jl_rows(0.5, 0.01), 1357);
    }

    #[test]
    fn subsets_enumerates_combinations() {
        assert_eq!(subsets(&[0, 1, 2, 3], 2).len(), 6);
        assert_eq!(subsets(&[0, 1], 0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("nope", Seed64(0)).is_err());
    }

    #[test]
    fn aggregation_suite_passes_small() {
        for c in agg_oracles(20, Seed64(1)).unwrap() {
            assert!(c.passed, "{c}");
        }
    }
}
