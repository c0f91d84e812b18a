//! Shared generators for integration tests: random models satisfying the
//! structural assumptions the identification pipeline needs.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use ctpeer::model::{
    compositions, ChoiceRule, LogitRule, ModelSpec, PeerAverage, SelectionKernel, TabularRule,
};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn random_network(
    rng: &mut ChaCha12Rng,
    num_agents: usize,
    sizes: &[usize],
) -> Vec<BTreeSet<usize>> {
    sizes
        .iter()
        .enumerate()
        .map(|(a, &size)| {
            let mut others: Vec<usize> = (0..num_agents).filter(|&b| b != a).collect();
            others.shuffle(rng);
            others.into_iter().take(size).collect()
        })
        .collect()
}

fn random_kernel(rng: &mut ChaCha12Rng, num_types: usize, alts: usize) -> SelectionKernel {
    let tables = (0..num_types)
        .map(|_| {
            (0..alts)
                .map(|_| (0..alts).map(|_| rng.gen_range(0.25..0.75)).collect())
                .collect()
        })
        .collect();
    SelectionKernel::new(tables, alts).unwrap()
}

fn random_logit(rng: &mut ChaCha12Rng, num_types: usize, alts: usize) -> LogitRule {
    let mut alpha = vec![vec![vec![0.0; alts]; alts]; num_types];
    let mut beta = vec![vec![vec![0.0; alts]; alts]; num_types];
    for t in 0..num_types {
        for own in 0..alts {
            for v in 1..alts {
                alpha[t][own][v] = rng.gen_range(-0.8..0.8);
            }
            for v in 0..alts {
                // Keep the peer effect away from zero so every contrast the
                // pipeline uses is well separated from the noise floor.
                let magnitude = rng.gen_range(0.4..1.5);
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                beta[t][own][v] = sign * magnitude;
            }
        }
    }
    LogitRule::new(alpha, beta).unwrap()
}

fn random_tabular(
    rng: &mut ChaCha12Rng,
    num_types: usize,
    alts: usize,
    max_size: usize,
) -> TabularRule {
    let mut table = TabularRule::new();
    for t in 0..num_types {
        for own in 0..alts {
            for size in 0..=max_size {
                for counts in compositions(size, alts) {
                    let avg = PeerAverage::from_counts(counts);
                    if table.get(t, own, &avg).is_some() {
                        continue; // same grid point in lowest terms
                    }
                    // Interior random probability vector.
                    let raw: Vec<f64> = (0..alts).map(|_| rng.gen_range(0.1..1.0)).collect();
                    let z: f64 = raw.iter().sum();
                    table.insert(t, own, &avg, raw.into_iter().map(|x| x / z).collect());
                }
            }
        }
    }
    table
}

/// Random model satisfying Assumptions 1-5: interior selection kernel, peer
/// counts covering {2,3,4} per type, and a peer-sensitive rule. `A <= 10`,
/// 2-3 alternatives, 1-2 types.
pub fn random_identifiable_model(rng: &mut ChaCha12Rng) -> ModelSpec {
    let num_types = rng.gen_range(1..=2);
    let alts = rng.gen_range(2..=3);

    // Three agents per type pinned at sizes 2, 3, 4; a few extras at random
    // sizes <= 4 so coverage never breaks.
    let mut sizes = Vec::new();
    let mut types = Vec::new();
    for t in 0..num_types {
        for s in [2usize, 3, 4] {
            sizes.push(s);
            types.push(t);
        }
    }
    // At least 5 agents so a 4-peer reference group actually exists.
    let min_extras = 5usize.saturating_sub(sizes.len());
    let max_extras = (10 - sizes.len()).min(3).max(min_extras);
    let extras = rng.gen_range(min_extras..=max_extras);
    for _ in 0..extras {
        sizes.push(rng.gen_range(0..=4));
        types.push(rng.gen_range(0..num_types));
    }
    let num_agents = sizes.len();

    let network = random_network(rng, num_agents, &sizes);
    let kernel = random_kernel(rng, num_types, alts);
    let rule = if rng.gen::<bool>() {
        ChoiceRule::Logit(random_logit(rng, num_types, alts))
    } else {
        ChoiceRule::Tabular(random_tabular(rng, num_types, alts, 4))
    };
    let rates = (0..num_agents).map(|_| rng.gen_range(0.5..2.0)).collect();

    ModelSpec::new(num_agents, alts, types, network, kernel, rule, rates).unwrap()
}

/// Random small model for generator/embedding tests: `(Y+1)^A <= 256`,
/// arbitrary network, logit rule, interior kernel.
pub fn random_small_model(rng: &mut ChaCha12Rng) -> ModelSpec {
    let (num_agents, alts) = *[(3usize, 2usize), (4, 2), (5, 2), (3, 3), (4, 3), (8, 2)]
        .choose(rng)
        .unwrap();
    let sizes: Vec<usize> = (0..num_agents)
        .map(|_| rng.gen_range(0..num_agents.min(4)))
        .collect();
    let network = random_network(rng, num_agents, &sizes);
    let kernel = random_kernel(rng, 1, alts);
    let rule = ChoiceRule::Logit(random_logit(rng, 1, alts));
    let rates = (0..num_agents).map(|_| rng.gen_range(0.5..2.0)).collect();
    ModelSpec::new(num_agents, alts, vec![0; num_agents], network, kernel, rule, rates).unwrap()
}
