//! Per-cell observation models.
//!
//! Beta-Bernoulli and Dirichlet-categorical cells are collapsed: only counts
//! are kept and the cell parameter is integrated out. The nonconjugate
//! Bernoulli keeps an explicit `theta` under a uniform prior and is moved by
//! Metropolis-Hastings.

use rand::distr::Open01;
use rand::Rng;
use thiserror::Error;

use crate::math::ln_rising;
use crate::schema::LikelihoodKind;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LikelihoodError {
    #[error("cannot remove value {0}: count is zero")]
    Underflow(u32),
    #[error("value {0} outside the codomain")]
    BadValue(u32),
    #[error("operation requires a conjugate likelihood")]
    NotConjugate,
    #[error("theta must lie strictly inside (0, 1)")]
    ThetaOutOfRange,
    #[error("statistics and hyperparameters belong to different families")]
    FamilyMismatch,
}

/// Likelihood hyperparameters of one relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hyper {
    Bernoulli { alpha: f64, beta: f64 },
    Categorical { delta: f64 },
    NonConjugate { sigma: f64 },
}

impl Hyper {
    /// Default hyperparameters for a likelihood family.
    pub fn default_for(kind: LikelihoodKind) -> Self {
        match kind {
            LikelihoodKind::Bernoulli => Hyper::Bernoulli { alpha: 1.0, beta: 1.0 },
            LikelihoodKind::Categorical(_) => Hyper::Categorical { delta: 1.0 },
            LikelihoodKind::BernoulliNonconjugate => Hyper::NonConjugate { sigma: 0.1 },
        }
    }

    pub fn is_conjugate(&self) -> bool {
        !matches!(self, Hyper::NonConjugate { .. })
    }

    /// Draws a cell parameter from the uniform prior of the nonconjugate family.
    pub fn sample_theta<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        rng.sample(Open01)
    }
}

/// Sufficient statistics of one cluster cell.
#[derive(Debug, Clone, PartialEq)]
pub enum SuffStats {
    Bernoulli { n0: u32, n1: u32 },
    Categorical { counts: Vec<u32> },
    NonConjugate { n0: u32, n1: u32, theta: f64 },
}

/// `log θ` for value 1, `log(1-θ)` for value 0.
pub fn logp_given_theta(value: u32, theta: f64) -> Result<f64, LikelihoodError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(LikelihoodError::ThetaOutOfRange);
    }
    match value {
        0 => Ok((-theta).ln_1p()),
        1 => Ok(theta.ln()),
        v => Err(LikelihoodError::BadValue(v)),
    }
}

impl SuffStats {
    /// Empty statistics for a conjugate family.
    ///
    /// For the nonconjugate family `theta` starts at 0.5; callers that need a
    /// prior draw use [`SuffStats::nonconjugate`].
    pub fn empty(kind: LikelihoodKind) -> Self {
        match kind {
            LikelihoodKind::Bernoulli => SuffStats::Bernoulli { n0: 0, n1: 0 },
            LikelihoodKind::Categorical(k) => SuffStats::Categorical { counts: vec![0; k] },
            LikelihoodKind::BernoulliNonconjugate => SuffStats::nonconjugate(0.5),
        }
    }

    pub fn nonconjugate(theta: f64) -> Self {
        SuffStats::NonConjugate { n0: 0, n1: 0, theta }
    }

    /// Empty statistics for `kind`, drawing a fresh parameter when needed.
    pub fn fresh<R: Rng + ?Sized>(kind: LikelihoodKind, rng: &mut R) -> Self {
        match kind {
            LikelihoodKind::BernoulliNonconjugate => SuffStats::nonconjugate(Hyper::sample_theta(rng)),
            _ => SuffStats::empty(kind),
        }
    }

    pub fn count(&self) -> u32 {
        match self {
            SuffStats::Bernoulli { n0, n1 } | SuffStats::NonConjugate { n0, n1, .. } => n0 + n1,
            SuffStats::Categorical { counts } => counts.iter().sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn theta(&self) -> Option<f64> {
        match self {
            SuffStats::NonConjugate { theta, .. } => Some(*theta),
            _ => None,
        }
    }

    pub fn set_theta(&mut self, value: f64) -> Result<(), LikelihoodError> {
        if !(value > 0.0 && value < 1.0) {
            return Err(LikelihoodError::ThetaOutOfRange);
        }
        match self {
            SuffStats::NonConjugate { theta, .. } => {
                *theta = value;
                Ok(())
            }
            _ => Err(LikelihoodError::FamilyMismatch),
        }
    }

    fn slot(&mut self, value: u32) -> Result<&mut u32, LikelihoodError> {
        match self {
            SuffStats::Bernoulli { n0, n1 } | SuffStats::NonConjugate { n0, n1, .. } => match value {
                0 => Ok(n0),
                1 => Ok(n1),
                v => Err(LikelihoodError::BadValue(v)),
            },
            SuffStats::Categorical { counts } => {
                counts.get_mut(value as usize).ok_or(LikelihoodError::BadValue(value))
            }
        }
    }

    pub fn incorporate(&mut self, value: u32) -> Result<(), LikelihoodError> {
        *self.slot(value)? += 1;
        Ok(())
    }

    pub fn unincorporate(&mut self, value: u32) -> Result<(), LikelihoodError> {
        let slot = self.slot(value)?;
        if *slot == 0 {
            return Err(LikelihoodError::Underflow(value));
        }
        *slot -= 1;
        Ok(())
    }

    /// Adds every count of `other` (same family) into `self`.
    pub fn merge(&mut self, other: &SuffStats) -> Result<(), LikelihoodError> {
        match (self, other) {
            (SuffStats::Bernoulli { n0, n1 }, SuffStats::Bernoulli { n0: m0, n1: m1 })
            | (SuffStats::NonConjugate { n0, n1, .. }, SuffStats::NonConjugate { n0: m0, n1: m1, .. }) => {
                *n0 += m0;
                *n1 += m1;
                Ok(())
            }
            (SuffStats::Categorical { counts }, SuffStats::Categorical { counts: other })
                if counts.len() == other.len() =>
            {
                counts.iter_mut().zip(other).for_each(|(a, b)| *a += b);
                Ok(())
            }
            _ => Err(LikelihoodError::FamilyMismatch),
        }
    }

    /// Collapsed posterior predictive of `value`.
    pub fn logp_predictive(&self, hyper: &Hyper, value: u32) -> Result<f64, LikelihoodError> {
        match (self, hyper) {
            (SuffStats::Bernoulli { n0, n1 }, Hyper::Bernoulli { alpha, beta }) => {
                let total = alpha + beta + (n0 + n1) as f64;
                match value {
                    0 => Ok(((beta + *n0 as f64) / total).ln()),
                    1 => Ok(((alpha + *n1 as f64) / total).ln()),
                    v => Err(LikelihoodError::BadValue(v)),
                }
            }
            (SuffStats::Categorical { counts }, Hyper::Categorical { delta }) => {
                let n = *counts.get(value as usize).ok_or(LikelihoodError::BadValue(value))?;
                let total: u32 = counts.iter().sum();
                Ok(((delta + n as f64) / (counts.len() as f64 * delta + total as f64)).ln())
            }
            (SuffStats::NonConjugate { .. }, _) | (_, Hyper::NonConjugate { .. }) => {
                Err(LikelihoodError::NotConjugate)
            }
            _ => Err(LikelihoodError::FamilyMismatch),
        }
    }

    /// Collapsed log marginal likelihood of all data in the cell.
    pub fn logp_marginal(&self, hyper: &Hyper) -> Result<f64, LikelihoodError> {
        match (self, hyper) {
            (SuffStats::Bernoulli { n0, n1 }, Hyper::Bernoulli { alpha, beta }) => {
                Ok(ln_rising(*alpha, *n1) + ln_rising(*beta, *n0) - ln_rising(alpha + beta, n0 + n1))
            }
            (SuffStats::Categorical { counts }, Hyper::Categorical { delta }) => {
                let k = counts.len() as f64;
                let total: u32 = counts.iter().sum();
                let num: f64 = counts.iter().map(|&n| ln_rising(*delta, n)).sum();
                Ok(num - ln_rising(k * delta, total))
            }
            (SuffStats::NonConjugate { .. }, _) | (_, Hyper::NonConjugate { .. }) => {
                Err(LikelihoodError::NotConjugate)
            }
            _ => Err(LikelihoodError::FamilyMismatch),
        }
    }

    /// `Σ log L(value; θ)` over the cell's data, for the nonconjugate family.
    pub fn logp_data_given_theta(&self, theta: f64) -> f64 {
        match self {
            SuffStats::NonConjugate { n0, n1, .. } | SuffStats::Bernoulli { n0, n1 } => {
                let mut out = 0.0;
                if *n1 > 0 {
                    out += *n1 as f64 * theta.ln();
                }
                if *n0 > 0 {
                    out += *n0 as f64 * (-theta).ln_1p();
                }
                out
            }
            SuffStats::Categorical { .. } => f64::NAN,
        }
    }

    /// Contribution of the cell to the joint score: the collapsed marginal for
    /// conjugate cells, log prior density plus data likelihood otherwise. The
    /// uniform prior has log density 0.
    pub fn logp_score(&self, hyper: &Hyper) -> f64 {
        match self {
            SuffStats::NonConjugate { theta, .. } => self.logp_data_given_theta(*theta),
            _ => self.logp_marginal(hyper).expect("statistics match their hyperparameters"),
        }
    }

    /// Change in [`SuffStats::logp_score`] from adding the counts in `extra`.
    /// Nonconjugate cells score the extra data under their current `theta`.
    pub fn logp_added(&self, hyper: &Hyper, extra: &SuffStats) -> f64 {
        match (self, hyper, extra) {
            (
                SuffStats::Bernoulli { n0, n1 },
                Hyper::Bernoulli { alpha, beta },
                SuffStats::Bernoulli { n0: m0, n1: m1 },
            ) => {
                ln_rising(alpha + *n1 as f64, *m1) + ln_rising(beta + *n0 as f64, *m0)
                    - ln_rising(alpha + beta + (n0 + n1) as f64, m0 + m1)
            }
            (SuffStats::Categorical { counts }, Hyper::Categorical { delta }, SuffStats::Categorical { counts: add }) => {
                let k = counts.len() as f64;
                let total: u32 = counts.iter().sum();
                let added: u32 = add.iter().sum();
                let num: f64 =
                    counts.iter().zip(add).map(|(&n, &m)| ln_rising(delta + n as f64, m)).sum();
                num - ln_rising(k * delta + total as f64, added)
            }
            (SuffStats::NonConjugate { theta, .. }, _, SuffStats::NonConjugate { .. }) => {
                extra.logp_data_given_theta(*theta)
            }
            _ => panic!("statistics and hyperparameters belong to different families"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const UNIFORM: Hyper = Hyper::Bernoulli { alpha: 1.0, beta: 1.0 };

    #[test]
    fn incorporate_examples() {
        let mut s = SuffStats::empty(LikelihoodKind::Bernoulli);
        s.incorporate(1).unwrap();
        assert_eq!(s, SuffStats::Bernoulli { n0: 0, n1: 1 });
        let mut c = SuffStats::Categorical { counts: vec![2, 0, 1] };
        c.unincorporate(0).unwrap();
        assert_eq!(c, SuffStats::Categorical { counts: vec![1, 0, 1] });
        assert_eq!(c.unincorporate(1), Err(LikelihoodError::Underflow(1)));
        assert_eq!(c.incorporate(3), Err(LikelihoodError::BadValue(3)));
        let before = c.clone();
        c.incorporate(2).unwrap();
        c.unincorporate(2).unwrap();
        assert_eq!(c, before);
    }

    #[test]
    fn predictive_examples() {
        let s = SuffStats::empty(LikelihoodKind::Bernoulli);
        assert!((s.logp_predictive(&UNIFORM, 1).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let s = SuffStats::Bernoulli { n0: 1, n1: 2 };
        assert!((s.logp_predictive(&UNIFORM, 1).unwrap() - 0.6f64.ln()).abs() < 1e-15);
        let c = SuffStats::empty(LikelihoodKind::Categorical(4));
        let h = Hyper::Categorical { delta: 1.0 };
        for v in 0..4 {
            assert!((c.logp_predictive(&h, v).unwrap() - 0.25f64.ln()).abs() < 1e-15);
        }
        let nc = SuffStats::nonconjugate(0.3);
        assert_eq!(nc.logp_predictive(&Hyper::NonConjugate { sigma: 0.1 }, 1), Err(LikelihoodError::NotConjugate));
        assert_eq!(nc.logp_marginal(&Hyper::NonConjugate { sigma: 0.1 }), Err(LikelihoodError::NotConjugate));
    }

    #[test]
    fn marginal_examples() {
        let s = SuffStats::Bernoulli { n0: 1, n1: 2 };
        assert!((s.logp_marginal(&UNIFORM).unwrap() - (1.0f64 / 12.0).ln()).abs() < 1e-14);
        assert_eq!(SuffStats::empty(LikelihoodKind::Bernoulli).logp_marginal(&UNIFORM).unwrap(), 0.0);
        let c = SuffStats::Categorical { counts: vec![1, 2] };
        let a = c.logp_marginal(&Hyper::Categorical { delta: 1.0 }).unwrap();
        assert!((a - s.logp_marginal(&UNIFORM).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn theta_likelihood() {
        assert!((logp_given_theta(1, 0.5).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((logp_given_theta(0, 0.9).unwrap() - 0.1f64.ln()).abs() < 1e-15);
        for theta in [1e-6, 0.2, 0.77, 1.0 - 1e-9] {
            let total: f64 = (0..2).map(|v| logp_given_theta(v, theta).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-14);
        }
        assert_eq!(logp_given_theta(1, 0.0), Err(LikelihoodError::ThetaOutOfRange));
        assert_eq!(logp_given_theta(1, 1.0), Err(LikelihoodError::ThetaOutOfRange));
    }

    #[test]
    fn uniform_prior_monte_carlo_matches_beta_bernoulli() {
        // data: three ones, two zeros
        let data = SuffStats::Bernoulli { n0: 2, n1: 3 };
        let exact = data.logp_marginal(&UNIFORM).unwrap().exp();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = 100_000;
        let draws: Vec<f64> =
            (0..s).map(|_| data.logp_data_given_theta(Hyper::sample_theta(&mut rng)).exp()).collect();
        let mean = draws.iter().sum::<f64>() / s as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (s - 1) as f64;
        let se = (var / s as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn logp_added_matches_marginal_difference() {
        let base = SuffStats::Bernoulli { n0: 3, n1: 1 };
        let extra = SuffStats::Bernoulli { n0: 2, n1: 5 };
        let h = Hyper::Bernoulli { alpha: 0.7, beta: 2.5 };
        let mut merged = base.clone();
        merged.merge(&extra).unwrap();
        let want = merged.logp_marginal(&h).unwrap() - base.logp_marginal(&h).unwrap();
        assert!((base.logp_added(&h, &extra) - want).abs() < 1e-12);
    }

    fn marginal_by_chain(kind: LikelihoodKind, hyper: &Hyper, values: &[u32]) -> (f64, SuffStats) {
        let mut s = SuffStats::empty(kind);
        let mut total = 0.0;
        for &v in values {
            total += s.logp_predictive(hyper, v).unwrap();
            s.incorporate(v).unwrap();
        }
        (total, s)
    }

    proptest! {
        #[test]
        fn chain_rule_and_permutation(
            values in proptest::collection::vec(0u32..3, 0..40),
            delta in 0.05f64..10.0,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let kind = LikelihoodKind::Categorical(3);
            let hyper = Hyper::Categorical { delta };
            let (chained, stats) = marginal_by_chain(kind, &hyper, &values);
            prop_assert!((chained - stats.logp_marginal(&hyper).unwrap()).abs() < 1e-10);
            let mut shuffled = values.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (other, _) = marginal_by_chain(kind, &hyper, &shuffled);
            prop_assert!((chained - other).abs() < 1e-10);
        }

        #[test]
        fn unincorporate_inverts_incorporate(values in proptest::collection::vec(0u32..2, 0..20), v in 0u32..2) {
            let mut s = SuffStats::empty(LikelihoodKind::Bernoulli);
            for &x in &values { s.incorporate(x).unwrap(); }
            let before = s.clone();
            s.incorporate(v).unwrap();
            s.unincorporate(v).unwrap();
            prop_assert_eq!(s, before);
        }
    }
}
