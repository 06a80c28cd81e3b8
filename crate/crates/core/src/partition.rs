//! Chinese restaurant process partitions.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

use crate::math::{ln_gamma, sample_log_weights};

pub type TableId = usize;

const UNSEATED: usize = usize::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("item {0} is already seated")]
    AlreadySeated(usize),
    #[error("item {0} is not seated")]
    NotSeated(usize),
}

/// Exchangeable partition of a set of integer items, with the CRP
/// concentration that scores it.
///
/// Empty tables are deleted as soon as their last item leaves. The fresh
/// table id is always one past the largest live id, so `unseat` exactly
/// undoes `seat`.
#[derive(Debug, Clone)]
pub struct CrpPartition {
    assignment: Vec<usize>,
    tables: BTreeMap<TableId, usize>,
    num_items: usize,
    concentration: f64,
}

impl PartialEq for CrpPartition {
    fn eq(&self, other: &Self) -> bool {
        self.tables == other.tables
            && self.num_items == other.num_items
            && self.concentration.to_bits() == other.concentration.to_bits()
            && self.items().eq(other.items())
    }
}

impl CrpPartition {
    pub fn new(concentration: f64) -> Self {
        assert!(concentration > 0.0, "CRP concentration must be positive");
        Self { assignment: Vec::new(), tables: BTreeMap::new(), num_items: 0, concentration }
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn set_concentration(&mut self, concentration: f64) {
        assert!(concentration > 0.0, "CRP concentration must be positive");
        self.concentration = concentration;
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_items == 0
    }

    pub fn table_of(&self, item: usize) -> Option<TableId> {
        match self.assignment.get(item) {
            Some(&t) if t != UNSEATED => Some(t),
            _ => None,
        }
    }

    pub fn contains(&self, item: usize) -> bool {
        self.table_of(item).is_some()
    }

    pub fn count(&self, table: TableId) -> usize {
        self.tables.get(&table).copied().unwrap_or(0)
    }

    /// Live tables with their counts, ascending by id.
    pub fn tables(&self) -> impl Iterator<Item = (TableId, usize)> + '_ {
        self.tables.iter().map(|(&t, &n)| (t, n))
    }

    pub fn table_ids(&self) -> Vec<TableId> {
        self.tables.keys().copied().collect()
    }

    /// Seated items with their tables, ascending by item.
    pub fn items(&self) -> impl Iterator<Item = (usize, TableId)> + '_ {
        self.assignment.iter().enumerate().filter(|(_, &t)| t != UNSEATED).map(|(i, &t)| (i, t))
    }

    /// Id a new table would receive.
    pub fn fresh_table(&self) -> TableId {
        self.tables.keys().next_back().map_or(0, |t| t + 1)
    }

    /// Seats an unseated item at `table`, opening the table if it is not live.
    pub fn seat(&mut self, item: usize, table: TableId) -> Result<(), PartitionError> {
        if self.contains(item) {
            return Err(PartitionError::AlreadySeated(item));
        }
        if self.assignment.len() <= item {
            self.assignment.resize(item + 1, UNSEATED);
        }
        self.assignment[item] = table;
        *self.tables.entry(table).or_insert(0) += 1;
        self.num_items += 1;
        Ok(())
    }

    /// Removes an item, deleting its table if it empties. Returns the table.
    pub fn unseat(&mut self, item: usize) -> Result<TableId, PartitionError> {
        let table = self.table_of(item).ok_or(PartitionError::NotSeated(item))?;
        self.assignment[item] = UNSEATED;
        let n = self.tables.get_mut(&table).expect("seated item has a live table");
        *n -= 1;
        if *n == 0 {
            self.tables.remove(&table);
        }
        self.num_items -= 1;
        Ok(table)
    }

    /// Unnormalized CRP log weights for a new item: every live table, then
    /// the fresh table last.
    pub fn predictive_log_weights(&self) -> Vec<(TableId, f64)> {
        let mut out: Vec<(TableId, f64)> =
            self.tables.iter().map(|(&t, &n)| (t, (n as f64).ln())).collect();
        out.push((self.fresh_table(), self.concentration.ln()));
        out
    }

    /// Log probability of a new item joining `table` (live or fresh).
    pub fn predictive_logp(&self, table: TableId) -> f64 {
        let n = self.count(table);
        let num = if n == 0 { self.concentration } else { n as f64 };
        num.ln() - (self.num_items as f64 + self.concentration).ln()
    }

    /// Seats `item` by sampling the CRP predictive. Returns its table.
    pub fn seat_from_prior<R: Rng + ?Sized>(&mut self, item: usize, rng: &mut R) -> TableId {
        let weights = self.predictive_log_weights();
        let logs: Vec<f64> = weights.iter().map(|w| w.1).collect();
        let table = weights[sample_log_weights(&logs, rng)].0;
        self.seat(item, table).expect("sampled item is unseated");
        table
    }

    pub fn log_prob(&self) -> f64 {
        self.log_prob_with(self.concentration)
    }

    /// Log CRP probability of the current partition under concentration `gamma`.
    pub fn log_prob_with(&self, gamma: f64) -> f64 {
        if self.num_items == 0 {
            return 0.0;
        }
        let k = self.tables.len() as f64;
        let sizes: f64 = self.tables.values().map(|&n| ln_gamma(n as f64)).sum();
        k * gamma.ln() + sizes + ln_gamma(gamma) - ln_gamma(gamma + self.num_items as f64)
    }

    /// Draws a partition of items `0..n` by sequential seating.
    pub fn sample<R: Rng + ?Sized>(n: usize, concentration: f64, rng: &mut R) -> Self {
        let mut p = Self::new(concentration);
        for item in 0..n {
            p.seat_from_prior(item, rng);
        }
        p
    }

    /// Blocks ordered by their smallest item, items ascending.
    pub fn blocks(&self) -> Vec<Vec<usize>> {
        let mut order: BTreeMap<TableId, usize> = BTreeMap::new();
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for (item, t) in self.items() {
            let b = *order.entry(t).or_insert_with(|| {
                blocks.push(Vec::new());
                blocks.len() - 1
            });
            blocks[b].push(item);
        }
        blocks
    }

    /// Relabels tables `0..K` in order of their smallest item. Returns the map
    /// from old to new table ids.
    pub fn canonicalize(&mut self) -> BTreeMap<TableId, TableId> {
        let mut map: BTreeMap<TableId, TableId> = BTreeMap::new();
        for &t in self.assignment.iter().filter(|&&t| t != UNSEATED) {
            let next = map.len();
            map.entry(t).or_insert(next);
        }
        for t in self.assignment.iter_mut().filter(|t| **t != UNSEATED) {
            *t = map[t];
        }
        self.tables = self.tables.iter().map(|(t, &n)| (map[t], n)).collect();
        self.assignment.truncate(self.assignment.iter().rposition(|&t| t != UNSEATED).map_or(0, |i| i + 1));
        map
    }

    /// Restricted-growth labels of `items` (first item gets 0).
    pub fn canonical_labels(&self, items: &[usize]) -> Vec<Option<usize>> {
        let mut map: BTreeMap<TableId, usize> = BTreeMap::new();
        items
            .iter()
            .map(|&i| {
                self.table_of(i).map(|t| {
                    let next = map.len();
                    *map.entry(t).or_insert(next)
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn from_blocks(blocks: &[&[usize]], gamma: f64) -> CrpPartition {
        let mut p = CrpPartition::new(gamma);
        for (t, b) in blocks.iter().enumerate() {
            for &i in *b {
                p.seat(i, t).unwrap();
            }
        }
        p
    }

    #[test]
    fn seat_examples() {
        let mut p = CrpPartition::new(1.0);
        let f = p.fresh_table();
        p.seat(0, f).unwrap();
        assert_eq!(p.blocks(), vec![vec![0]]);
        p.seat(1, f).unwrap();
        p.seat(2, f).unwrap();
        assert_eq!(p.blocks(), vec![vec![0, 1, 2]]);
        let mut q = from_blocks(&[&[0]], 1.0);
        let f = q.fresh_table();
        q.seat(1, f).unwrap();
        assert_eq!(q.num_tables(), 2);
        assert_eq!(q.seat(1, 0), Err(PartitionError::AlreadySeated(1)));
    }

    #[test]
    fn unseat_examples() {
        let mut p = from_blocks(&[&[0, 1]], 1.0);
        p.unseat(1).unwrap();
        assert_eq!(p.blocks(), vec![vec![0]]);
        p.unseat(0).unwrap();
        assert!(p.is_empty() && p.num_tables() == 0);
        assert_eq!(p.unseat(0), Err(PartitionError::NotSeated(0)));
    }

    #[test]
    fn seat_then_unseat_is_identity() {
        let original = from_blocks(&[&[0, 3], &[1]], 1.5);
        let mut p = original.clone();
        let f = p.fresh_table();
        p.seat(7, f).unwrap();
        p.unseat(7).unwrap();
        assert_eq!(p, original);
        assert_eq!(p.fresh_table(), original.fresh_table());
    }

    fn normalized(p: &CrpPartition) -> Vec<f64> {
        let w: Vec<f64> = p.predictive_log_weights().iter().map(|x| x.1).collect();
        crate::math::normalize_log_weights(&w)
    }

    #[test]
    fn predictive_examples() {
        assert_eq!(normalized(&CrpPartition::new(1.0)), vec![1.0]);
        let p = from_blocks(&[&[0, 1], &[2]], 1.0);
        let w = normalized(&p);
        for (a, b) in w.iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = from_blocks(&[&[0, 1, 2]], 2.0);
        let w = normalized(&p);
        assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn log_prob_examples() {
        assert_eq!(from_blocks(&[&[0]], 1.0).log_prob(), 0.0);
        assert_eq!(CrpPartition::new(1.0).log_prob(), 0.0);
        let p = from_blocks(&[&[0, 1], &[2]], 1.0);
        assert!((p.log_prob() - (1.0f64 / 6.0).ln()).abs() < 1e-12);
        let p = from_blocks(&[&[0], &[1], &[2]], 2.0);
        assert!((p.log_prob() - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn sample_single_item_has_one_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(CrpPartition::sample(1, 3.0, &mut rng).num_tables(), 1);
        }
    }

    #[test]
    fn sample_pair_same_table_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let same = (0..n).filter(|_| CrpPartition::sample(2, 1.0, &mut rng).num_tables() == 1).count();
        assert!((same as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn sample_is_seed_deterministic() {
        let a = CrpPartition::sample(50, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = CrpPartition::sample(50, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_concentration_gives_one_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let split = (0..10_000).filter(|_| CrpPartition::sample(20, 1e-9, &mut rng).num_tables() > 1).count();
        // Analytic probability of any split is about 3.6e-9 per draw.
        assert_eq!(split, 0);
    }

    #[test]
    fn canonicalize_relabels_by_smallest_item() {
        let mut p = CrpPartition::new(1.0);
        p.seat(2, 9).unwrap();
        p.seat(0, 4).unwrap();
        p.seat(1, 9).unwrap();
        let map = p.canonicalize();
        assert_eq!(map[&4], 0);
        assert_eq!(map[&9], 1);
        assert_eq!(p.table_of(1), Some(1));
        assert_eq!(p.blocks(), vec![vec![0], vec![1, 2]]);
    }

    proptest! {
        #[test]
        fn sequential_conditionals_match_log_prob(
            labels in proptest::collection::vec(0usize..4, 1..30),
            gamma in 0.05f64..20.0,
            seed in any::<u64>(),
        ) {
            let mut order: Vec<usize> = (0..labels.len()).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut p = CrpPartition::new(gamma);
            let mut total = 0.0;
            for &i in &order {
                total += p.predictive_logp(labels[i]);
                p.seat(i, labels[i]).unwrap();
            }
            prop_assert!((total - p.log_prob()).abs() < 1e-12 * (1.0 + total.abs()));
        }

        #[test]
        fn log_prob_is_exchangeable(
            labels in proptest::collection::vec(0usize..5, 1..25),
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut relabel: Vec<usize> = (0..5).map(|t| t + 10).collect();
            let mut items: Vec<usize> = (0..labels.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            relabel.shuffle(&mut rng);
            items.shuffle(&mut rng);
            let mut a = CrpPartition::new(0.7);
            let mut b = CrpPartition::new(0.7);
            for (i, &l) in labels.iter().enumerate() {
                a.seat(i, l).unwrap();
                b.seat(items[i], relabel[l]).unwrap();
            }
            prop_assert!((a.log_prob() - b.log_prob()).abs() < 1e-12);
        }
    }
}
