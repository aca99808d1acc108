//! Robust aggregation rules.
//!
//! The rules are dimension-agnostic: the protocol engine applies them to
//! `K`-dimensional projection vectors, the gradient baseline to full
//! `d`-dimensional updates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{NormalStream, Seed64};
use crate::vector::{sq_dist, DenseVector};

/// Base rule of an aggregation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseRule {
    Mean,
    /// Coordinate-wise trimmed mean dropping `⌊βn⌋` values at each end.
    Cwtm { beta: f64 },
    /// Krum with Byzantine budget `f`.
    Krum { f: usize },
}

/// A base rule, optionally preceded by nearest-neighbor mixing with budget `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationRule {
    pub base: BaseRule,
    pub nnm: Option<usize>,
}

impl AggregationRule {
    pub fn mean() -> Self {
        Self {
            base: BaseRule::Mean,
            nnm: None,
        }
    }

    pub fn new(base: BaseRule) -> Self {
        Self { base, nnm: None }
    }

    pub fn with_nnm(self, f: usize) -> Self {
        Self {
            nnm: Some(f),
            ..self
        }
    }

    /// The same rule without its NNM stage.
    pub fn without_nnm(self) -> Self {
        Self { nnm: None, ..self }
    }

    /// Checks the rule's preconditions for `n` inputs.
    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::EmptyInput("updates"));
        }
        if let Some(f) = self.nnm {
            check_nnm(n, f)?;
        }
        match self.base {
            BaseRule::Mean => Ok(()),
            BaseRule::Cwtm { beta } => trim_count(n, beta).map(|_| ()),
            BaseRule::Krum { f } => krum_neighbors(n, f).map(|_| ()),
        }
    }

    pub fn label(&self) -> String {
        let base = match self.base {
            BaseRule::Mean => "mean".to_string(),
            BaseRule::Cwtm { beta } => format!("cwtm({beta})"),
            BaseRule::Krum { f } => format!("krum({f})"),
        };
        match self.nnm {
            Some(f) => format!("nnm({f})+{base}"),
            None => base,
        }
    }
}

fn check_shapes(updates: &[DenseVector]) -> Result<usize> {
    let Some(first) = updates.first() else {
        return Err(Error::EmptyInput("updates"));
    };
    for u in &updates[1..] {
        first.check_dim(u)?;
    }
    Ok(first.dim())
}

/// Mean of a sequence of equal-length rows, computed as
/// `x₀ + Σ(xᵢ − x₀)/m` so that identical rows average to themselves exactly.
fn shifted_mean<'a>(mut rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let Some(first) = rows.next() else {
        return vec![0.0; dim];
    };
    let mut acc = vec![0.0; dim];
    let mut count = 1usize;
    for row in rows {
        for ((a, x), s) in acc.iter_mut().zip(row).zip(first) {
            *a += x - s;
        }
        count += 1;
    }
    let m = count as f64;
    first.iter().zip(&acc).map(|(s, a)| s + a / m).collect()
}

fn shifted_mean_scalar(values: &[f64]) -> f64 {
    let first = values[0];
    let acc: f64 = values[1..].iter().map(|x| x - first).sum();
    first + acc / values.len() as f64
}

/// Coordinate-wise arithmetic mean.
pub fn mean(updates: &[DenseVector]) -> Result<DenseVector> {
    let dim = check_shapes(updates)?;
    Ok(DenseVector::from_vec(shifted_mean(
        updates.iter().map(|u| u.as_slice()),
        dim,
    )))
}

fn trim_count(n: usize, beta: f64) -> Result<usize> {
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::AggregationPrecondition(format!(
            "CWTM beta must lie in [0, 1/2), got {beta}"
        )));
    }
    let k = (beta * n as f64 + 1e-12).floor() as usize;
    if n < 2 * k + 1 {
        return Err(Error::AggregationPrecondition(format!(
            "CWTM trims all values: n = {n}, floor(beta n) = {k}"
        )));
    }
    Ok(k)
}

/// Coordinate-wise trimmed mean.
pub fn cwtm(updates: &[DenseVector], beta: f64) -> Result<DenseVector> {
    let dim = check_shapes(updates)?;
    let n = updates.len();
    let k = trim_count(n, beta)?;
    let mut column = vec![0.0; n];
    let out = (0..dim)
        .map(|j| {
            for (slot, u) in column.iter_mut().zip(updates) {
                *slot = u.as_slice()[j];
            }
            column.sort_by(f64::total_cmp);
            shifted_mean_scalar(&column[k..n - k])
        })
        .collect();
    Ok(DenseVector::from_vec(out))
}

fn krum_neighbors(n: usize, f: usize) -> Result<usize> {
    if n < f + 3 {
        return Err(Error::AggregationPrecondition(format!(
            "Krum needs n - f - 2 >= 1, got n = {n}, f = {f}"
        )));
    }
    Ok(n - f - 2)
}

fn pairwise_sq_dists(updates: &[DenseVector]) -> Vec<f64> {
    let n = updates.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(updates[i].as_slice(), updates[j].as_slice());
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn by_distance_then_index(dists: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b))
}

/// Krum score of every input: the sum of Euclidean distances to its
/// `n − f − 2` nearest other inputs.
pub fn krum_scores(updates: &[DenseVector], f: usize) -> Result<Vec<f64>> {
    check_shapes(updates)?;
    let n = updates.len();
    let m = krum_neighbors(n, f)?;
    let sq = pairwise_sq_dists(updates);
    Ok((0..n)
        .map(|i| {
            let row = &sq[i * n..(i + 1) * n];
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(by_distance_then_index(row));
            others[..m].iter().map(|&j| row[j].sqrt()).sum()
        })
        .collect())
}

/// Krum: the input with the smallest score; ties go to the lowest index.
pub fn krum(updates: &[DenseVector], f: usize) -> Result<DenseVector> {
    let scores = krum_scores(updates, f)?;
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    Ok(updates[best].clone())
}

fn check_nnm(n: usize, f: usize) -> Result<()> {
    if n < f + 1 {
        return Err(Error::AggregationPrecondition(format!(
            "NNM needs n - f >= 1, got n = {n}, f = {f}"
        )));
    }
    Ok(())
}

/// Nearest-neighbor mixing: each input is replaced by the mean of its
/// `n − f` nearest inputs, itself included.
pub fn nnm(updates: &[DenseVector], f: usize) -> Result<Vec<DenseVector>> {
    let dim = check_shapes(updates)?;
    let n = updates.len();
    check_nnm(n, f)?;
    let keep = n - f;
    let sq = pairwise_sq_dists(updates);
    Ok((0..n)
        .map(|i| {
            let row = &sq[i * n..(i + 1) * n];
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(by_distance_then_index(row));
            let mut chosen = order[..keep].to_vec();
            // Averaging in index order makes f = 0 give the same bits for
            // every client.
            chosen.sort_unstable();
            DenseVector::from_vec(shifted_mean(
                chosen.iter().map(|&j| updates[j].as_slice()),
                dim,
            ))
        })
        .collect())
}

fn apply_base(base: BaseRule, updates: &[DenseVector]) -> Result<DenseVector> {
    match base {
        BaseRule::Mean => mean(updates),
        BaseRule::Cwtm { beta } => cwtm(updates, beta),
        BaseRule::Krum { f } => krum(updates, f),
    }
}

/// Runs the configured pipeline: NNM (if any), then the base rule.
pub fn aggregate(rule: &AggregationRule, updates: &[DenseVector]) -> Result<DenseVector> {
    check_shapes(updates)?;
    match rule.nnm {
        Some(f) => apply_base(rule.base, &nnm(updates, f)?),
        None => apply_base(rule.base, updates),
    }
}

/// Empirical robustness ratio
/// `‖Agg − v̄_H‖² / ((1/|H|) Σ_{i∈H} ‖v_i − v̄_H‖²)`.
///
/// Returns 0 when numerator and denominator both vanish and `+∞` when only
/// the denominator does.
pub fn empirical_robustness(rule: &AggregationRule, updates: &[DenseVector], honest: &[usize]) -> Result<f64> {
    let dim = check_shapes(updates)?;
    if honest.is_empty() {
        return Err(Error::EmptyInput("honest set"));
    }
    if let Some(&bad) = honest.iter().find(|&&i| i >= updates.len()) {
        return Err(crate::error::invalid(
            "honest",
            format!("index {bad} out of range"),
        ));
    }
    let agg = aggregate(rule, updates)?;
    let honest_mean = shifted_mean(honest.iter().map(|&i| updates[i].as_slice()), dim);
    let num = sq_dist(agg.as_slice(), &honest_mean);
    let den = honest
        .iter()
        .map(|&i| sq_dist(updates[i].as_slice(), &honest_mean))
        .sum::<f64>()
        / honest.len() as f64;
    Ok(if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    })
}

/// Outcome of a randomized adversarial search against a rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessProbe {
    /// Largest ratio reached against the rule under test.
    pub rule_kappa: f64,
    /// Largest ratio reached against the plain mean under the same draws.
    pub mean_kappa: f64,
}

/// Appends `f` colluding adversarial vectors to the honest ones, `draws`
/// times, and records the worst robustness ratio for `rule` and for the mean.
///
/// Each draw places the adversaries at the honest mean plus a random
/// direction scaled by a random multiple (up to 100x) of the honest spread.
pub fn probe_robustness(
    rule: &AggregationRule,
    honest: &[DenseVector],
    f: usize,
    draws: usize,
    seed: Seed64,
) -> Result<RobustnessProbe> {
    let dim = check_shapes(honest)?;
    let h = honest.len();
    let center = shifted_mean(honest.iter().map(|u| u.as_slice()), dim);
    let spread = (honest
        .iter()
        .map(|u| sq_dist(u.as_slice(), &center))
        .sum::<f64>()
        / h as f64)
        .sqrt()
        .max(1e-12);
    let honest_idx: Vec<usize> = (0..h).collect();
    let mut worst = RobustnessProbe {
        rule_kappa: 0.0,
        mean_kappa: 0.0,
    };
    for draw in 0..draws {
        let s = seed.derive(0x726f62, &[draw as u64]);
        let mut rng = s.rng();
        let magnitude = 100.0 * rng.next_f64() * spread;
        let identical = rng.below(2) == 0;
        let mut all = honest.to_vec();
        for b in 0..f {
            let dir_seed = if identical { s } else { s.derive(1, &[b as u64]) };
            let noise: Vec<f64> = NormalStream::new(dir_seed).take(dim).collect();
            let nrm = noise.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            let v = center
                .iter()
                .zip(&noise)
                .map(|(c, z)| c + magnitude * z / nrm)
                .collect();
            all.push(DenseVector::from_vec(v));
        }
        let k_rule = empirical_robustness(rule, &all, &honest_idx)?;
        let k_mean = empirical_robustness(&AggregationRule::mean(), &all, &honest_idx)?;
        worst.rule_kappa = worst.rule_kappa.max(k_rule);
        worst.mean_kappa = worst.mean_kappa.max(k_mean);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vecs<R: AsRef<[f64]>>(rows: &[R]) -> Vec<DenseVector> {
        rows.iter().map(|r| DenseVector::from_vec(r.as_ref().to_vec())).collect()
    }

    fn random_vecs(seed: u64, n: usize, dim: usize) -> Vec<DenseVector> {
        let mut s = NormalStream::new(Seed64(seed));
        (0..n)
            .map(|_| DenseVector::from_vec((0..dim).map(|_| s.next().unwrap()).collect()))
            .collect()
    }

    #[test]
    fn mean_small_cases() {
        assert_eq!(mean(&vecs(&[&[1.0, 1.0], &[3.0, 3.0]])).unwrap().as_slice(), &[2.0, 2.0]);
        let one = vecs(&[&[0.1, -7.3]]);
        assert_eq!(mean(&one).unwrap(), one[0]);
        assert!(matches!(mean(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mean_matches_naive_sum() {
        let v = random_vecs(1, 7, 5);
        let m = mean(&v).unwrap();
        for j in 0..5 {
            let naive = v.iter().map(|u| u.as_slice()[j]).sum::<f64>() / 7.0;
            assert!((m.as_slice()[j] - naive).abs() <= 1e-12);
        }
    }

    #[test]
    fn cwtm_worked_example() {
        let v = vecs(&[&[2.0, 2.0, 0.0], &[0.0, -1.0, -1.0], &[4.0, 0.0, -4.0]]);
        assert_eq!(cwtm(&v, 1.0 / 3.0).unwrap().as_slice(), &[2.0, 0.0, -1.0]);
    }

    #[test]
    fn cwtm_trims_outlier() {
        let v = vecs(&[&[1.0], &[2.0], &[3.0], &[4.0], &[100.0]]);
        assert_eq!(cwtm(&v, 0.2).unwrap().as_slice(), &[3.0]);
    }

    #[test]
    fn cwtm_rejects_full_trim() {
        let v = vecs(&[&[1.0], &[2.0]]);
        assert!(matches!(cwtm(&v, 0.5), Err(Error::AggregationPrecondition(_))));
        assert!(matches!(cwtm(&v, 0.49), Ok(_)));
        assert!(cwtm(&v, -0.1).is_err());
        let v = vecs(&[&[1.0], &[2.0], &[3.0], &[40.0]]);
        assert_eq!(cwtm(&v, 0.49).unwrap().as_slice(), &[2.5]);
    }

    #[test]
    fn krum_identical_inputs() {
        let v = vecs(&[&[1.5, 2.0]; 5]);
        assert_eq!(krum(&v, 1).unwrap().as_slice(), &[1.5, 2.0]);
    }

    #[test]
    fn krum_tie_goes_to_lowest_index() {
        // 0, 0.1 and 0.2 all sit exactly 0.1 from their nearest neighbor.
        let v = vecs(&[&[0.0], &[0.1], &[0.2], &[10.0]]);
        let scores = krum_scores(&v, 1).unwrap();
        assert_eq!(scores[0], scores[1]);
        assert_eq!(scores[1], scores[2]);
        assert_eq!(krum(&v, 1).unwrap().as_slice(), &[0.0]);
    }

    #[test]
    fn krum_never_picks_far_outlier() {
        for seed in 0..20 {
            let mut v = random_vecs(seed, 4, 3);
            v.push(DenseVector::from_vec(vec![1e3, -1e3, 1e3]));
            let out = krum(&v, 1).unwrap();
            assert_ne!(out, v[4]);
        }
    }

    #[test]
    fn krum_precondition() {
        let v = random_vecs(3, 3, 2);
        assert!(matches!(krum(&v, 1), Err(Error::AggregationPrecondition(_))));
    }

    #[test]
    fn nnm_small_cases() {
        let v = vecs(&[&[0.0], &[1.0], &[2.0], &[10.0]]);
        let out: Vec<f64> = nnm(&v, 2).unwrap().iter().map(|u| u.as_slice()[0]).collect();
        assert_eq!(out, vec![0.5, 0.5, 1.5, 6.0]);
        let same = vecs(&[&[0.3, -2.0]; 4]);
        for o in nnm(&same, 1).unwrap() {
            assert_eq!(o, same[0]);
        }
        assert!(nnm(&v, 4).is_err());
    }

    #[test]
    fn nnm_without_budget_is_global_mean() {
        let v = random_vecs(8, 6, 3);
        let m = mean(&v).unwrap();
        for o in nnm(&v, 0).unwrap() {
            assert_eq!(o, m);
        }
    }

    #[test]
    fn aggregate_pipeline() {
        let v = vecs(&[&[1.0], &[3.0]]);
        assert_eq!(aggregate(&AggregationRule::mean(), &v).unwrap().as_slice(), &[2.0]);
        let v = random_vecs(9, 8, 4);
        let m = mean(&v).unwrap();
        for base in [BaseRule::Mean, BaseRule::Cwtm { beta: 0.25 }, BaseRule::Krum { f: 2 }] {
            let out = aggregate(&AggregationRule::new(base).with_nnm(0), &v).unwrap();
            assert_eq!(out, m, "{base:?}");
        }
    }

    #[test]
    fn robustness_ratio_edge_cases() {
        let v = random_vecs(10, 5, 3);
        let all: Vec<usize> = (0..5).collect();
        let k = empirical_robustness(&AggregationRule::mean(), &v, &all).unwrap();
        assert!(k.abs() < 1e-25);
        let same = vecs(&[&[1.0, 1.0]; 4]);
        assert_eq!(empirical_robustness(&AggregationRule::mean(), &same, &[0, 1, 2, 3]).unwrap(), 0.0);
        let mut skew = same.clone();
        skew.push(DenseVector::from_vec(vec![9.0, 9.0]));
        let k = empirical_robustness(&AggregationRule::mean(), &skew, &[0, 1, 2, 3]).unwrap();
        assert!(k.is_infinite());
    }

    #[test]
    fn trimmed_mean_is_more_robust_than_mean_under_search() {
        let honest = random_vecs(11, 6, 4);
        let rule = AggregationRule::new(BaseRule::Cwtm { beta: 0.25 });
        let probe = probe_robustness(&rule, &honest, 2, 1000, Seed64(12)).unwrap();
        assert!(probe.rule_kappa.is_finite());
        assert!(probe.rule_kappa < probe.mean_kappa);
    }

    proptest! {
        #[test]
        fn cwtm_is_permutation_invariant(seed in 0u64..1000, shift in 1usize..8) {
            let v = random_vecs(seed, 8, 3);
            let mut p = v.clone();
            p.rotate_left(shift);
            p.swap(0, 7);
            prop_assert_eq!(cwtm(&v, 0.25).unwrap(), cwtm(&p, 0.25).unwrap());
        }

        #[test]
        fn cwtm_without_trim_is_mean(seed in 0u64..1000, n in 1usize..9) {
            let v = random_vecs(seed, n, 4);
            let a = cwtm(&v, 0.0).unwrap();
            let b = mean(&v).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn krum_selects_an_input(seed in 0u64..1000, n in 4usize..9) {
            let v = random_vecs(seed, n, 3);
            let out = krum(&v, 1).unwrap();
            prop_assert!(v.contains(&out));
        }

        #[test]
        fn nnm_preserves_count(seed in 0u64..1000, n in 1usize..9, f in 0usize..4) {
            prop_assume!(f < n);
            let v = random_vecs(seed, n, 2);
            prop_assert_eq!(nnm(&v, f).unwrap().len(), n);
        }
    }
}
