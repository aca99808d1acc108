//! Byzantine behaviors.
//!
//! Attackers see every honest update of the current round and collude: all
//! Byzantine clients submit the same vector. In a zero-order run the vectors
//! are `K`-dimensional projections; in the gradient baseline they are full
//! model updates.

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationRule, BaseRule};
use crate::error::{invalid, Error, Result};
use crate::model::Dataset;
use crate::vector::{sq_dist, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    /// A little is enough: `ḡ + ω·σ`.
    Alie,
    /// Fall of empires: `(1 − ω)·ḡ`.
    Foe,
    /// Sign flip: `−ḡ`.
    Sf,
    /// Label flip: honest protocol on data with labels `ℓ ↦ C − 1 − ℓ`.
    Lf,
    /// Order-statistic attack on the trimmed mean.
    Tma,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Alie => "alie",
            AttackKind::Foe => "foe",
            AttackKind::Sf => "sf",
            AttackKind::Lf => "lf",
            AttackKind::Tma => "tma",
        }
    }

    /// Whether Byzantine clients skip local training and emit crafted vectors.
    pub fn crafts_vectors(self) -> bool {
        matches!(self, AttackKind::Alie | AttackKind::Foe | AttackKind::Sf | AttackKind::Tma)
    }
}

/// `{0, 0.1, …, 5.0}`.
pub fn default_omega_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Candidate scales for ALIE and FOE.
    pub omega_grid: Vec<f64>,
    /// Tune ω against the full pipeline including NNM rather than against
    /// the base rule alone.
    pub target_nnm: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        Self::new(AttackKind::None)
    }
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            omega_grid: default_omega_grid(),
            target_nnm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, AttackKind::Alie | AttackKind::Foe) && self.omega_grid.is_empty() {
            return Err(invalid("omega_grid", "must be non-empty for ALIE and FOE"));
        }
        if let Some(w) = self.omega_grid.iter().find(|w| !w.is_finite()) {
            return Err(invalid("omega_grid", format!("non-finite value {w}")));
        }
        Ok(())
    }

    /// The rule the attacker optimizes against.
    pub fn target_rule(&self, rule: &AggregationRule) -> AggregationRule {
        if self.target_nnm {
            *rule
        } else {
            rule.without_nnm()
        }
    }

    /// The vector every Byzantine client submits this round, or `None` when
    /// the attack does not craft vectors.
    ///
    /// `rule` is the aggregation in use and `n` the total client count.
    pub fn byzantine_vector(
        &self,
        honest: &[DenseVector],
        rule: &AggregationRule,
        f: usize,
        n: usize,
    ) -> Result<Option<DenseVector>> {
        if f == 0 {
            return Ok(None);
        }
        Ok(match self.kind {
            AttackKind::None | AttackKind::Lf => None,
            AttackKind::Sf => Some(craft(AttackKind::Sf, honest, 0.0)?),
            AttackKind::Alie | AttackKind::Foe => {
                let target = self.target_rule(rule);
                Some(optimize_omega(self.kind, honest, &target, f, &self.omega_grid)?.1)
            }
            AttackKind::Tma => {
                // Against a trimmed mean the attacker uses its trim level;
                // otherwise it assumes the rule trims exactly f values.
                let beta = match rule.base {
                    BaseRule::Cwtm { beta } => beta,
                    _ => f as f64 / n as f64,
                };
                Some(tma(honest, beta, n)?)
            }
        })
    }
}

fn check_honest(honest: &[DenseVector]) -> Result<usize> {
    let Some(first) = honest.first() else {
        return Err(Error::EmptyInput("honest updates"));
    };
    for u in &honest[1..] {
        first.check_dim(u)?;
    }
    Ok(first.dim())
}

fn honest_mean(honest: &[DenseVector]) -> Result<DenseVector> {
    let dim = check_honest(honest)?;
    let mut acc = vec![0.0; dim];
    for u in honest {
        for (a, x) in acc.iter_mut().zip(u.as_slice()) {
            *a += x;
        }
    }
    let h = honest.len() as f64;
    Ok(DenseVector::from_vec(acc.into_iter().map(|a| a / h).collect()))
}

/// Coordinate-wise mean and population standard deviation of the honest
/// updates.
pub fn honest_mean_and_std(honest: &[DenseVector]) -> Result<(DenseVector, DenseVector)> {
    if honest.len() < 2 {
        return Err(invalid(
            "honest updates",
            format!("standard deviation needs at least 2 updates, got {}", honest.len()),
        ));
    }
    let mean = honest_mean(honest)?;
    let h = honest.len() as f64;
    let mut var = vec![0.0; mean.dim()];
    for u in honest {
        for ((v, x), m) in var.iter_mut().zip(u.as_slice()).zip(mean.as_slice()) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|v| (v / h).sqrt()).collect();
    Ok((mean, DenseVector::from_vec(std)))
}

/// The crafted vector of a parametric attack at scale `omega`.
pub fn craft(kind: AttackKind, honest: &[DenseVector], omega: f64) -> Result<DenseVector> {
    match kind {
        AttackKind::Alie => {
            let (mean, std) = honest_mean_and_std(honest)?;
            let mut out = mean;
            out.axpy(omega, &std)?;
            Ok(out)
        }
        AttackKind::Foe => Ok(honest_mean(honest)?.scale(1.0 - omega)),
        AttackKind::Sf => Ok(honest_mean(honest)?.scale(-1.0)),
        other => Err(Error::UnsupportedAttack(format!(
            "{} does not craft a vector from a scale",
            other.name()
        ))),
    }
}

/// Grid search for the scale that pushes the aggregate furthest from the
/// honest mean when `f` copies of the crafted vector join the honest ones.
/// Ties go to the earliest grid value.
pub fn optimize_omega(
    kind: AttackKind,
    honest: &[DenseVector],
    rule: &AggregationRule,
    f: usize,
    grid: &[f64],
) -> Result<(f64, DenseVector)> {
    if grid.is_empty() {
        return Err(invalid("omega_grid", "must be non-empty"));
    }
    let mean = honest_mean(honest)?;
    let mut best: Option<(f64, f64, DenseVector)> = None;
    let mut inputs: Vec<DenseVector> = honest.to_vec();
    for &omega in grid {
        let byz = craft(kind, honest, omega)?;
        inputs.truncate(honest.len());
        inputs.extend(std::iter::repeat_n(byz.clone(), f));
        let agg = aggregate(rule, &inputs)?;
        let dist = sq_dist(agg.as_slice(), mean.as_slice());
        if best.as_ref().is_none_or(|(_, d, _)| dist > *d) {
            best = Some((omega, dist, byz));
        }
    }
    let (omega, _, byz) = best.expect("grid is non-empty");
    Ok((omega, byz))
}

/// Relabels every sample `ℓ ↦ C − 1 − ℓ`; features are untouched.
pub fn label_flip(data: &Dataset) -> Result<Dataset> {
    let top = data.num_classes() - 1;
    data.map_labels(|l| top - l)
}

/// Per coordinate: if the honest mean is positive, the `⌊βn⌋`-th smallest
/// honest value, otherwise the `⌊βn⌋`-th largest.
pub fn tma(honest: &[DenseVector], beta: f64, n: usize) -> Result<DenseVector> {
    let dim = check_honest(honest)?;
    let h = honest.len();
    let k = (beta * n as f64 + 1e-12).floor() as usize;
    if k == 0 || k > h {
        return Err(invalid(
            "beta",
            format!("trimmed-mean attack needs 1 <= floor(beta n) <= |H|, got {k} with |H| = {h}"),
        ));
    }
    let mut column = vec![0.0; h];
    let out = (0..dim)
        .map(|j| {
            for (slot, u) in column.iter_mut().zip(honest) {
                *slot = u.as_slice()[j];
            }
            let probe = column.iter().sum::<f64>() / h as f64;
            column.sort_by(f64::total_cmp);
            if probe > 0.0 {
                column[k - 1]
            } else {
                column[h - k]
            }
        })
        .collect();
    Ok(DenseVector::from_vec(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{NormalStream, Seed64};
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
    fn mean_and_std_small() {
        let (m, s) = honest_mean_and_std(&vecs(&[&[0.0], &[2.0]])).unwrap();
        assert_eq!(m.as_slice(), &[1.0]);
        assert_eq!(s.as_slice(), &[1.0]);
        let (_, s) = honest_mean_and_std(&vecs(&[&[3.0, 1.0]; 4])).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0]);
        assert!(honest_mean_and_std(&vecs(&[&[1.0]])).is_err());
    }

    #[test]
    fn mean_and_std_two_pass_oracle() {
        let v = random_vecs(4, 6, 3);
        let (m, s) = honest_mean_and_std(&v).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = v.iter().map(|u| u.as_slice()[j]).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
            assert!((m.as_slice()[j] - mean).abs() <= 1e-12);
            assert!((s.as_slice()[j] - var.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn craft_formulas() {
        let h = vecs(&[&[1.0, -2.0]]);
        assert_eq!(craft(AttackKind::Sf, &h, 7.0).unwrap().as_slice(), &[-1.0, 2.0]);
        assert_eq!(craft(AttackKind::Foe, &h, 1.0).unwrap().as_slice(), &[0.0, -0.0]);
        assert_eq!(craft(AttackKind::Foe, &h, 0.0).unwrap(), h[0]);
        // mean 1, std 2
        let h = vecs(&[&[-1.0], &[3.0]]);
        assert_eq!(craft(AttackKind::Alie, &h, 1.5).unwrap().as_slice(), &[4.0]);
        assert!(matches!(craft(AttackKind::Lf, &h, 0.0), Err(Error::UnsupportedAttack(_))));
        assert!(craft(AttackKind::Tma, &h, 0.0).is_err());
    }

    #[test]
    fn sign_flip_is_an_involution() {
        let h = random_vecs(5, 4, 3);
        let flipped = craft(AttackKind::Sf, &h, 0.0).unwrap();
        let back = craft(AttackKind::Sf, &[flipped], 0.0).unwrap();
        let mean = honest_mean(&h).unwrap();
        assert_eq!(back, mean);
    }

    #[test]
    fn omega_search_against_mean_picks_largest() {
        let h = vecs(&[&[1.0, 2.0], &[3.0, 0.0], &[2.0, 1.0]]);
        let (omega, byz) =
            optimize_omega(AttackKind::Foe, &h, &AggregationRule::mean(), 2, &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(omega, 2.0);
        assert_eq!(byz, craft(AttackKind::Foe, &h, 2.0).unwrap());
    }

    #[test]
    fn omega_search_ties_and_singletons() {
        let zeros = vecs(&[&[0.0, 0.0]; 3]);
        let (omega, _) =
            optimize_omega(AttackKind::Foe, &zeros, &AggregationRule::mean(), 1, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(omega, 0.5);
        let h = random_vecs(2, 3, 2);
        let (omega, _) = optimize_omega(AttackKind::Alie, &h, &AggregationRule::mean(), 1, &[3.3]).unwrap();
        assert_eq!(omega, 3.3);
        assert!(optimize_omega(AttackKind::Alie, &h, &AggregationRule::mean(), 1, &[]).is_err());
    }

    #[test]
    fn omega_search_is_grid_argmax() {
        let h = random_vecs(6, 6, 4);
        let rule = AggregationRule::new(BaseRule::Cwtm { beta: 0.25 });
        let grid = default_omega_grid();
        let (omega, _) = optimize_omega(AttackKind::Alie, &h, &rule, 2, &grid).unwrap();
        let mean = honest_mean(&h).unwrap();
        let dist = |w: f64| {
            let mut all = h.clone();
            let b = craft(AttackKind::Alie, &h, w).unwrap();
            all.extend([b.clone(), b]);
            sq_dist(aggregate(&rule, &all).unwrap().as_slice(), mean.as_slice())
        };
        let chosen = dist(omega);
        for &w in &grid {
            assert!(dist(w) <= chosen);
        }
    }

    #[test]
    fn label_flip_endpoints_and_involution() {
        let data = Dataset::new(vec![0.5, 1.0, 0.0], vec![0, 9, 4], 1, 10).unwrap();
        let flipped = label_flip(&data).unwrap();
        assert_eq!(flipped.labels(), &[9, 0, 5]);
        assert_eq!(flipped.features(1), data.features(1));
        assert_eq!(label_flip(&flipped).unwrap(), data);
    }

    #[test]
    fn tma_order_statistics() {
        let h = vecs(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        assert_eq!(tma(&h, 0.25, 8).unwrap().as_slice(), &[2.0]);
        let neg: Vec<DenseVector> = h.iter().map(|v| v.scale(-1.0)).collect();
        assert_eq!(tma(&neg, 0.25, 8).unwrap().as_slice(), &[-2.0]);
        let same = vecs(&[&[0.7]; 5]);
        assert_eq!(tma(&same, 0.25, 8).unwrap().as_slice(), &[0.7]);
        assert!(tma(&h, 0.1, 8).is_err());
    }

    #[test]
    fn byzantine_vector_dispatch() {
        let h = random_vecs(3, 5, 2);
        let rule = AggregationRule::new(BaseRule::Cwtm { beta: 0.25 });
        assert_eq!(AttackSpec::new(AttackKind::None).byzantine_vector(&h, &rule, 2, 7).unwrap(), None);
        assert_eq!(AttackSpec::new(AttackKind::Lf).byzantine_vector(&h, &rule, 2, 7).unwrap(), None);
        assert_eq!(AttackSpec::new(AttackKind::Sf).byzantine_vector(&h, &rule, 0, 5).unwrap(), None);
        let sf = AttackSpec::new(AttackKind::Sf).byzantine_vector(&h, &rule, 2, 7).unwrap();
        assert_eq!(sf, Some(craft(AttackKind::Sf, &h, 0.0).unwrap()));
        assert!(AttackSpec::new(AttackKind::Tma).byzantine_vector(&h, &rule, 2, 8).unwrap().is_some());
    }

    #[test]
    fn nnm_targeting_changes_the_optimized_rule() {
        let rule = AggregationRule::new(BaseRule::Cwtm { beta: 0.25 }).with_nnm(2);
        let mut spec = AttackSpec::new(AttackKind::Alie);
        assert_eq!(spec.target_rule(&rule).nnm, None);
        spec.target_nnm = true;
        assert_eq!(spec.target_rule(&rule).nnm, Some(2));
    }

    proptest! {
        #[test]
        fn tma_is_sign_symmetric(seed in 0u64..500) {
            let h = random_vecs(seed, 6, 3);
            let neg: Vec<DenseVector> = h.iter().map(|v| v.scale(-1.0)).collect();
            let a = tma(&h, 0.25, 8).unwrap();
            let b = tma(&neg, 0.25, 8).unwrap();
            prop_assert_eq!(a.scale(-1.0), b);
        }

        #[test]
        fn foe_against_mean_matches_closed_form(seed in 0u64..500, omega in 0.0f64..5.0) {
            let h = random_vecs(seed, 5, 3);
            let f = 2;
            let b = craft(AttackKind::Foe, &h, omega).unwrap();
            let mut all = h.clone();
            all.extend(std::iter::repeat_n(b, f));
            let agg = aggregate(&AggregationRule::mean(), &all).unwrap();
            let mean = honest_mean(&h).unwrap();
            let dist = sq_dist(agg.as_slice(), mean.as_slice()).sqrt();
            let expected = f as f64 / 7.0 * omega * mean.l2_norm();
            prop_assert!((dist - expected).abs() <= 1e-9 * (1.0 + expected));
        }
    }
}
