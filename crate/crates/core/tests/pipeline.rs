use std::collections::BTreeMap;
use std::sync::Arc;

use hirm::hirm::{deserialize, serialize};
use hirm::oracle::{enumerate_posterior, exact_fresh_row_logp};
use hirm::query::{ensemble_logp, parse_queries, predictive_logp, Ensemble, QueryRow};
use hirm::{Dataset, HirmState, Mode, ModelConfig, RelationId};

/// Four-entity reduction of the three-relation planted-independence system:
/// R1: D1xD1 and R3: D3xD1 follow halves of D1, R2: D1xD2 follows parity.
fn reduction() -> Dataset {
    let mut obs = String::new();
    for i in 0..4 {
        for j in 0..4 {
            obs.push_str(&format!("R1,{},x{i},x{j}\n", u8::from((i < 2) == (j < 2))));
            obs.push_str(&format!("R2,{},x{i},y{j}\n", u8::from(i % 2 == 0)));
            obs.push_str(&format!("R3,{},z{j},x{i}\n", u8::from((i < 2) == (j < 2))));
        }
    }
    Dataset::parse("bernoulli R1 D1 D1\nbernoulli R2 D1 D2\nbernoulli R3 D3 D1\n", &obs).unwrap()
}

fn sorted(blocks: Vec<Vec<RelationId>>) -> Vec<Vec<RelationId>> {
    let mut b: Vec<Vec<RelationId>> = blocks
        .into_iter()
        .map(|mut x| {
            x.sort();
            x
        })
        .collect();
    b.sort();
    b
}

#[test]
fn reduced_planted_system_matches_enumeration() {
    let ds = Arc::new(reduction());
    let config = ModelConfig::new(&ds.system, Mode::Hirm).with_hyper_kernel(false);
    let report = enumerate_posterior(&ds, &config).unwrap();
    let exact = report.probability_of(&[vec![0, 2], vec![1]]);
    assert!(exact > 0.5, "planted structure should be the mode, got {exact}");

    let mut state = HirmState::init_from_prior(Arc::clone(&ds), config, 3).unwrap();
    let scans = 50_000;
    for _ in 0..500 {
        state.gibbs_scan();
    }
    let mut freq: BTreeMap<Vec<Vec<RelationId>>, f64> = BTreeMap::new();
    for _ in 0..scans {
        state.gibbs_scan();
        *freq.entry(sorted(state.relation_blocks())).or_default() += 1.0 / scans as f64;
    }
    let tv: f64 = 0.5
        * report
            .relation_partitions
            .iter()
            .map(|(b, p)| (p - freq.get(&sorted(b.clone())).copied().unwrap_or(0.0)).abs())
            .sum::<f64>();
    assert!(tv < 0.03, "TV {tv}");
}

#[test]
fn posterior_mean_predictive_matches_exact_predictive() {
    let obs = "R1,1,a,b\nR1,1,b,a\nR1,0,a,c\nR1,0,c,c\nR2,1,a\nR2,0,c\nR2,1,b\n";
    let ds = Arc::new(Dataset::parse("bernoulli R1 D D\nbernoulli R2 D\n", obs).unwrap());
    let config = ModelConfig::new(&ds.system, Mode::Hirm).with_hyper_kernel(false);
    let rows = parse_queries(&ds, "R2,1,~n\nR1,1,~n,a\nR1,0,c,b\n").unwrap();
    assert_eq!(rows.len(), 2);
    let exact: Vec<f64> = rows.iter().map(|r| exact_fresh_row_logp(&ds, &config, r).unwrap().exp()).collect();

    let mut state = HirmState::init_from_prior(Arc::clone(&ds), config, 9).unwrap();
    for _ in 0..500 {
        state.gibbs_scan();
    }
    let scans = 40_000;
    let mut mean = vec![0.0; rows.len()];
    for _ in 0..scans {
        state.gibbs_scan();
        for (m, r) in mean.iter_mut().zip(&rows) {
            *m += predictive_logp(&state, r).unwrap().exp() / scans as f64;
        }
    }
    for (m, e) in mean.iter().zip(&exact) {
        assert!((m - e).abs() < 0.01 * e.max(0.05), "sampled {m} exact {e}");
    }
}

#[test]
fn states_survive_serialization_for_queries() {
    let ds = Arc::new(reduction());
    let config = ModelConfig::new(&ds.system, Mode::Hirm);
    let mut states = Vec::new();
    let mut restored = Vec::new();
    for seed in 0..3 {
        let mut s = HirmState::init_from_prior(Arc::clone(&ds), config.clone(), seed).unwrap();
        for _ in 0..20 {
            s.gibbs_scan();
        }
        let text = serialize(&s);
        let back = deserialize(Arc::clone(&ds), &text).unwrap();
        assert_eq!(serialize(&back), text);
        assert_eq!(back.latent(), s.latent());
        states.push(s);
        restored.push(back);
    }
    let mut row = QueryRow::new();
    row.push(&ds, "R1", 1, &["~u", "x0"]).unwrap();
    row.push(&ds, "R2", 0, &["~u", "y1"]).unwrap();
    let a = ensemble_logp(&Ensemble::new(states).unwrap(), &row).unwrap();
    let b = ensemble_logp(&Ensemble::new(restored).unwrap(), &row).unwrap();
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
}
