//! Gridded Gibbs moves for concentrations and likelihood hyperparameters,
//! each under an Exponential(1) hyperprior.

use rand::Rng;

use super::HirmState;
use crate::likelihood::Hyper;
use crate::math::{log_grid, sample_log_weights};
use crate::partition::CrpPartition;

pub(crate) const GRID_POINTS: usize = 30;

/// Grid spanning `[1/G, G]` with `G = max(count, 2) * 10`.
pub(crate) fn grid_for(count: usize) -> Vec<f64> {
    let g = count.max(2) as f64 * 10.0;
    log_grid(1.0 / g, g, GRID_POINTS)
}

/// Samples a grid point with weight `-x + score(x)`.
pub(crate) fn gridded_draw<R: Rng + ?Sized>(grid: &[f64], score: impl Fn(f64) -> f64, rng: &mut R) -> f64 {
    let weights: Vec<f64> = grid.iter().map(|&x| -x + score(x)).collect();
    grid[sample_log_weights(&weights, rng)]
}

/// Resamples a partition's concentration from its gridded conditional.
pub fn resample_concentration<R: Rng + ?Sized>(partition: &mut CrpPartition, rng: &mut R) {
    let grid = grid_for(partition.num_items());
    let gamma = gridded_draw(&grid, |g| partition.log_prob_with(g), rng);
    partition.set_concentration(gamma);
}

pub(super) fn transition_all(state: &mut HirmState) {
    let learns = state.config.mode.learns_structure();
    let (ds, relation_partition, subsystems, hypers, rng) = state.parts_mut();
    if learns {
        resample_concentration(relation_partition, rng);
    }
    for sub in subsystems.values_mut() {
        let domains: Vec<_> = sub.domains().collect();
        for d in domains {
            resample_concentration(sub.partition_mut(d).unwrap(), rng);
        }
    }
    for k in 0..ds.system.num_relations() {
        let block = relation_partition.table_of(k).expect("every relation is seated");
        let Some(cells) = subsystems[&block].cells(k) else { continue };
        let grid = grid_for(ds.store.observations(k).len());
        let score = |h: &Hyper| cells.values().map(|c| c.logp_marginal(h).expect("conjugate cell")).sum::<f64>();
        match hypers[k] {
            Hyper::Bernoulli { beta, .. } => {
                let alpha = gridded_draw(&grid, |a| score(&Hyper::Bernoulli { alpha: a, beta }), rng);
                let beta = gridded_draw(&grid, |b| score(&Hyper::Bernoulli { alpha, beta: b }), rng);
                hypers[k] = Hyper::Bernoulli { alpha, beta };
            }
            Hyper::Categorical { .. } => {
                let delta = gridded_draw(&grid, |x| score(&Hyper::Categorical { delta: x }), rng);
                hypers[k] = Hyper::Categorical { delta };
            }
            Hyper::NonConjugate { .. } => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::normalize_log_weights;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_item_posterior_is_prior() {
        let mut p = CrpPartition::new(1.0);
        p.seat(0, 0).unwrap();
        let grid = grid_for(1);
        let data: Vec<f64> = grid.iter().map(|&g| p.log_prob_with(g)).collect();
        assert!(data.iter().all(|&x| x.abs() < 1e-12), "{data:?}");
    }

    #[test]
    fn one_big_table_pushes_concentration_low() {
        let mut p = CrpPartition::new(1.0);
        for i in 0..50 {
            p.seat(i, 0).unwrap();
        }
        let grid = grid_for(50);
        // Closed-form conditional on the grid: one table of n items has
        // probability Γ(γ+1)Γ(n)/Γ(γ+n) · ... = γ Γ(γ) Γ(n) / Γ(γ+n).
        let exact: Vec<f64> = grid
            .iter()
            .map(|&g| -g + g.ln() + libm::lgamma(g) + libm::lgamma(50.0) - libm::lgamma(g + 50.0))
            .collect();
        let probs = normalize_log_weights(&exact);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut draws: Vec<f64> = (0..1000)
            .map(|_| {
                resample_concentration(&mut p, &mut rng);
                p.concentration()
            })
            .collect();
        draws.sort_by(f64::total_cmp);
        assert!(draws[500] < 1.0, "median {}", draws[500]);
        let mut cdf = 0.0;
        let median_exact = grid
            .iter()
            .zip(&probs)
            .find(|(_, &q)| {
                cdf += q;
                cdf >= 0.5
            })
            .unwrap()
            .0;
        assert!(*median_exact < 1.0);
    }
}
