//! Exact event-driven simulation of the choice process and the two
//! observation schemes it emits, plus the count-based estimators.
//!
//! The chain is simulated wake by wake: the next wake time is exponential in
//! the total clock rate, the waking agent is drawn proportional to her rate,
//! the active set by independent coin flips per peer, and the choice from the
//! rule. Every wake is recorded, including revisions that keep the current
//! choice; a changes-only filter exists for sensitivity runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Exp;

use crate::config::ChoiceConfiguration;
use crate::error::{Error, Result};
use crate::model::{peer_average, CcpCell, CcpProvenance, CcpTable, ModelSpec};

/// One wake of an agent, with the latent active set kept as a ground-truth
/// debug field until `emit_dataset1` strips it.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub agent: usize,
    /// Configuration index immediately before the wake.
    pub config_before: usize,
    /// Drawn active set (latent; not part of Dataset 1).
    pub active_set: BTreeSet<usize>,
    pub choice: usize,
}

/// Dataset 1: event-level observations with the latent field removed.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedEvent {
    pub time: f64,
    pub agent: usize,
    pub config_before: usize,
    pub choice: usize,
}

/// Dataset 2: the configuration sampled at fixed intervals `0, delta, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSeries {
    pub delta: f64,
    pub configs: Vec<usize>,
}

/// Simulate the chain exactly over `[0, horizon]` from `initial`. Identical
/// seeds produce bit-identical logs; `stream` separates replications.
pub fn simulate(
    model: &ModelSpec,
    horizon: f64,
    initial: &ChoiceConfiguration,
    seed: u64,
    stream: u64,
) -> Result<Vec<EventRecord>> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidModel(format!("horizon {horizon} must be positive")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);

    let total_rate = model.total_rate();
    let wake_gap = Exp::new(total_rate).expect("positive total rate");
    let who = WeightedIndex::new(model.rates()).expect("positive rates");

    let mut config = initial.clone();
    let mut t = 0.0;
    let mut events = Vec::new();
    loop {
        t += wake_gap.sample(&mut rng);
        if t > horizon {
            break;
        }
        let agent = who.sample(&mut rng);
        let mut active = BTreeSet::new();
        for &peer in model.peers(agent) {
            if rng.gen::<f64>() < model.selection_prob(agent, peer, &config) {
                active.insert(peer);
            }
        }
        let avg = peer_average(&config, &active);
        let probs = model
            .rule()
            .evaluate(model.agent_type(agent), config.choice_of(agent), &avg)?;
        let choice = WeightedIndex::new(&probs)
            .map_err(|e| Error::InvalidModel(format!("degenerate choice rule: {e}")))?
            .sample(&mut rng);
        events.push(EventRecord {
            time: t,
            agent,
            config_before: config.index(),
            active_set: active,
            choice,
        });
        config.set_choice(agent, choice);
    }
    Ok(events)
}

/// Strip the latent active sets so estimators cannot cheat. With
/// `changes_only`, wakes that repeat the current choice are dropped as well;
/// the shape `(num_agents, num_alternatives)` decodes the stored indices.
pub fn emit_dataset1(
    events: &[EventRecord],
    changes_only: bool,
    shape: (usize, usize),
) -> Vec<ObservedEvent> {
    let (num_agents, num_alternatives) = shape;
    events
        .iter()
        .filter(|e| {
            if !changes_only {
                return true;
            }
            let before =
                ChoiceConfiguration::from_index(e.config_before, num_agents, num_alternatives);
            before.choice_of(e.agent) != e.choice
        })
        .map(|e| ObservedEvent {
            time: e.time,
            agent: e.agent,
            config_before: e.config_before,
            choice: e.choice,
        })
        .collect()
}

/// Sample the piecewise-constant trajectory at `k * delta` for `k*delta <=
/// horizon`, including the time-zero snapshot.
pub fn emit_dataset2(
    events: &[EventRecord],
    delta: f64,
    initial: &ChoiceConfiguration,
    horizon: f64,
) -> Result<SnapshotSeries> {
    if !(delta > 0.0) {
        return Err(Error::InvalidModel(format!("delta {delta} must be positive")));
    }
    let mut configs = Vec::new();
    let mut current = initial.index();
    let mut next_event = 0usize;
    let mut k = 0usize;
    loop {
        let t = k as f64 * delta;
        if t > horizon {
            break;
        }
        while next_event < events.len() && events[next_event].time <= t {
            let e = &events[next_event];
            let mut cfg = ChoiceConfiguration::from_index(
                e.config_before,
                initial.num_agents(),
                initial.num_alternatives(),
            );
            cfg.set_choice(e.agent, e.choice);
            current = cfg.index();
            next_event += 1;
        }
        configs.push(current);
        k += 1;
    }
    if configs.len() < 2 {
        return Err(Error::TooFewSnapshots { horizon, delta });
    }
    Ok(SnapshotSeries { delta, configs })
}

/// CCPs and clock rates counted from Dataset 1. Cells never visited stay
/// missing. Events before `burn_in * horizon` are discarded; rates use the
/// retained window.
pub fn estimate_ccp_dataset1(
    events: &[ObservedEvent],
    model_shape: (usize, usize),
    horizon: f64,
    burn_in: f64,
) -> Result<(CcpTable, Vec<f64>)> {
    if events.is_empty() {
        return Err(Error::InvalidModel("no events to estimate from".into()));
    }
    let (num_agents, num_alternatives) = model_shape;
    let cutoff = burn_in * horizon;

    // (agent, config) -> per-alternative wake counts
    let mut counts: BTreeMap<(usize, usize), Vec<u64>> = BTreeMap::new();
    let mut wakes = vec![0u64; num_agents];
    for e in events {
        if e.time < cutoff {
            continue;
        }
        wakes[e.agent] += 1;
        counts
            .entry((e.agent, e.config_before))
            .or_insert_with(|| vec![0; num_alternatives])[e.choice] += 1;
    }

    let window = horizon - cutoff;
    let rates: Vec<f64> = wakes.iter().map(|&n| n as f64 / window).collect();

    let cells = counts
        .into_iter()
        .map(|(key, per_choice)| {
            let total: u64 = per_choice.iter().sum();
            let probs = per_choice
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect();
            (
                key,
                CcpCell {
                    probs,
                    count: Some(total),
                },
            )
        })
        .collect();

    Ok((
        CcpTable::from_cells(cells, num_agents, num_alternatives, CcpProvenance::Dataset1),
        rates,
    ))
}

/// Row-normalized transition counts between consecutive snapshots.
#[derive(Debug, Clone)]
pub struct EstimatedKernel {
    /// Row-stochastic estimate of `P(delta)`; unvisited rows are all zero.
    pub matrix: nalgebra::DMatrix<f64>,
    /// Number of observed transitions out of each state.
    pub row_counts: Vec<u64>,
    pub delta: f64,
}

impl EstimatedKernel {
    pub fn unvisited_rows(&self) -> Vec<usize> {
        self.row_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fail unless every row was observed; the matrix-log path needs all of
    /// them.
    pub fn require_complete(&self) -> Result<()> {
        let missing = self.unvisited_rows();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::UnvisitedRows { rows: missing })
        }
    }
}

/// Estimate the discrete-time transition matrix from a snapshot series over a
/// state space of `num_states` configurations.
pub fn estimate_transition_matrix(
    series: &SnapshotSeries,
    num_states: usize,
) -> Result<EstimatedKernel> {
    if series.configs.len() < 2 {
        return Err(Error::TooFewSnapshots {
            horizon: series.delta * series.configs.len() as f64,
            delta: series.delta,
        });
    }
    let mut counts = vec![vec![0u64; num_states]; num_states];
    let mut row_counts = vec![0u64; num_states];
    for pair in series.configs.windows(2) {
        counts[pair[0]][pair[1]] += 1;
        row_counts[pair[0]] += 1;
    }
    let matrix = nalgebra::DMatrix::from_fn(num_states, num_states, |i, j| {
        if row_counts[i] == 0 {
            0.0
        } else {
            counts[i][j] as f64 / row_counts[i] as f64
        }
    });
    Ok(EstimatedKernel {
        matrix,
        row_counts,
        delta: series.delta,
    })
}

/// Fraction of time spent in each configuration over `[0, horizon]`,
/// starting from `initial`.
pub fn occupation_frequencies(
    events: &[EventRecord],
    initial: &ChoiceConfiguration,
    horizon: f64,
    num_states: usize,
) -> Vec<f64> {
    let mut occ = vec![0.0; num_states];
    let mut current = initial.index();
    let mut last_t = 0.0;
    for e in events {
        occ[current] += e.time - last_t;
        last_t = e.time;
        let mut cfg = ChoiceConfiguration::from_index(
            e.config_before,
            initial.num_agents(),
            initial.num_alternatives(),
        );
        cfg.set_choice(e.agent, e.choice);
        current = cfg.index();
    }
    occ[current] += horizon - last_t;
    for x in occ.iter_mut() {
        *x /= horizon;
    }
    occ
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChoiceRule, LogitRule, PeerAverage, SelectionKernel, TabularRule};

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().cloned().collect()
    }

    fn three_agent_model() -> ModelSpec {
        let alpha = vec![vec![vec![0.0, 0.4], vec![0.0, -0.2]]];
        let beta = vec![vec![vec![0.3, 1.0], vec![-0.4, 0.7]]];
        ModelSpec::new(
            3,
            2,
            vec![0; 3],
            vec![set(&[1, 2]), set(&[0, 2]), set(&[0])],
            SelectionKernel::new(vec![vec![vec![0.35, 0.55], vec![0.6, 0.45]]], 2).unwrap(),
            ChoiceRule::Logit(LogitRule::new(alpha, beta).unwrap()),
            vec![1.0, 1.5, 0.8],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_given_seed() {
        let model = three_agent_model();
        let initial = ChoiceConfiguration::zeros(3, 2);
        let a = simulate(&model, 50.0, &initial, 42, 0).unwrap();
        let b = simulate(&model, 50.0, &initial, 42, 0).unwrap();
        assert_eq!(a, b);
        let c = simulate(&model, 50.0, &initial, 42, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn event_count_near_total_rate() {
        let model = three_agent_model();
        let initial = ChoiceConfiguration::zeros(3, 2);
        let horizon = 10_000.0;
        let events = simulate(&model, horizon, &initial, 7, 0).unwrap();
        let expected = model.total_rate() * horizon;
        let slack = 4.0 * expected.sqrt();
        assert!((events.len() as f64 - expected).abs() < slack);

        // Timestamps strictly increasing, choices and active sets in range.
        for pair in events.windows(2) {
            assert!(pair[0].time < pair[1].time);
        }
        for e in &events {
            assert!(e.choice < 2);
            assert!(e.active_set.iter().all(|p| model.peers(e.agent).contains(p)));
        }
    }

    #[test]
    fn absorbing_choice_trajectory() {
        // R(1|anything) = 1 - eps: after the first wake of each agent it
        // (almost) always plays 1. Use a tabular rule putting mass 1 on 1.
        let mut table = TabularRule::new();
        for own in 0..2 {
            table.insert(0, own, &PeerAverage::empty(2), vec![0.0, 1.0]);
            for v in 0..2 {
                table.insert(0, own, &PeerAverage::singleton(v, 2), vec![0.0, 1.0]);
            }
        }
        let model = ModelSpec::new(
            2,
            2,
            vec![0, 0],
            vec![set(&[1]), set(&[0])],
            SelectionKernel::constant(0.5, 1, 2),
            ChoiceRule::Tabular(table),
            vec![1.0, 1.0],
        )
        .unwrap();
        let initial = ChoiceConfiguration::zeros(2, 2);
        let events = simulate(&model, 30.0, &initial, 3, 0).unwrap();
        assert!(events.iter().all(|e| e.choice == 1));
    }

    #[test]
    fn dataset1_strips_active_sets_only() {
        let model = three_agent_model();
        let initial = ChoiceConfiguration::zeros(3, 2);
        let events = simulate(&model, 100.0, &initial, 11, 0).unwrap();
        let observed = emit_dataset1(&events, false, (3, 2));
        assert_eq!(observed.len(), events.len());
        for (o, e) in observed.iter().zip(&events) {
            assert_eq!(o.time, e.time);
            assert_eq!(o.agent, e.agent);
            assert_eq!(o.config_before, e.config_before);
            assert_eq!(o.choice, e.choice);
        }
    }

    #[test]
    fn dataset1_changes_only_filter() {
        let model = three_agent_model();
        let initial = ChoiceConfiguration::zeros(3, 2);
        let events = simulate(&model, 200.0, &initial, 11, 0).unwrap();
        let filtered = emit_dataset1(&events, true, (3, 2));
        let expected = events
            .iter()
            .filter(|e| {
                ChoiceConfiguration::from_index(e.config_before, 3, 2).choice_of(e.agent)
                    != e.choice
            })
            .count();
        assert_eq!(filtered.len(), expected);
        assert!(filtered.len() < events.len());
    }

    #[test]
    fn snapshots_step_function() {
        // Single event at t=1.5 with delta=1: snapshots at 0 and 1 show the
        // initial configuration, the one at 2 shows the post-event state.
        let initial = ChoiceConfiguration::zeros(2, 2);
        let events = vec![EventRecord {
            time: 1.5,
            agent: 0,
            config_before: 0,
            active_set: BTreeSet::new(),
            choice: 1,
        }];
        let series = emit_dataset2(&events, 1.0, &initial, 3.0).unwrap();
        assert_eq!(series.configs, vec![0, 0, 2, 2]);
    }

    #[test]
    fn snapshots_without_events_and_degenerate_horizon() {
        let initial = ChoiceConfiguration::zeros(2, 2);
        let series = emit_dataset2(&[], 0.5, &initial, 2.0).unwrap();
        assert!(series.configs.iter().all(|&c| c == 0));
        assert!(matches!(
            emit_dataset2(&[], 5.0, &initial, 2.0),
            Err(Error::TooFewSnapshots { .. })
        ));
    }

    #[test]
    fn ccp_counting_by_hand() {
        // Agent 0 wakes twice at the zero configuration, choosing 1 then 0.
        let events = vec![
            ObservedEvent { time: 0.5, agent: 0, config_before: 0, choice: 1 },
            ObservedEvent { time: 1.0, agent: 1, config_before: 2, choice: 0 },
            ObservedEvent { time: 1.5, agent: 0, config_before: 0, choice: 0 },
            ObservedEvent { time: 2.0, agent: 1, config_before: 0, choice: 0 },
        ];
        let (table, rates) = estimate_ccp_dataset1(&events, (2, 2), 4.0, 0.0).unwrap();
        let zero = ChoiceConfiguration::zeros(2, 2);
        let cell = table.get(0, &zero).unwrap();
        assert_eq!(cell.probs, vec![0.5, 0.5]);
        assert_eq!(cell.count, Some(2));
        assert_eq!(rates, vec![0.5, 0.5]);
        // Unvisited cell stays missing.
        let c3 = ChoiceConfiguration::from_index(3, 2, 2);
        assert!(table.get(0, &c3).is_none());
    }

    #[test]
    fn rate_estimator_converges() {
        let model = three_agent_model();
        let initial = ChoiceConfiguration::zeros(3, 2);
        let horizon = 20_000.0;
        let events = simulate(&model, horizon, &initial, 5, 0).unwrap();
        let observed = emit_dataset1(&events, false, (3, 2));
        let (_, rates) = estimate_ccp_dataset1(&observed, (3, 2), horizon, 0.0).unwrap();
        for (a, (&est, &truth)) in rates.iter().zip(model.rates()).enumerate() {
            let se = (truth / horizon).sqrt();
            assert!((est - truth).abs() < 4.0 * se, "agent {a}: {est} vs {truth}");
        }
    }

    #[test]
    fn transition_counts_by_hand() {
        // Constant series: identity row on the visited state.
        let series = SnapshotSeries { delta: 1.0, configs: vec![1, 1, 1, 1] };
        let k = estimate_transition_matrix(&series, 4).unwrap();
        assert_eq!(k.matrix[(1, 1)], 1.0);
        assert_eq!(k.row_counts[1], 3);
        assert!(k.require_complete().is_err());

        // Alternating series: off-diagonal ones.
        let series = SnapshotSeries { delta: 1.0, configs: vec![0, 1, 0, 1, 0] };
        let k = estimate_transition_matrix(&series, 2).unwrap();
        assert_eq!(k.matrix[(0, 1)], 1.0);
        assert_eq!(k.matrix[(1, 0)], 1.0);
        assert!(k.require_complete().is_ok());
    }

    #[test]
    fn active_set_frequencies_follow_product_law() {
        let model = three_agent_model();
        let initial = ChoiceConfiguration::zeros(3, 2);
        let events = simulate(&model, 40_000.0, &initial, 13, 0).unwrap();

        // Condition on (agent 0, configuration) and compare subset
        // frequencies with the Bernoulli product law.
        let mut by_config: BTreeMap<usize, Vec<&EventRecord>> = BTreeMap::new();
        for e in events.iter().filter(|e| e.agent == 0) {
            by_config.entry(e.config_before).or_default().push(e);
        }
        for (&cfg_idx, evs) in &by_config {
            if evs.len() < 500 {
                continue;
            }
            let config = ChoiceConfiguration::from_index(cfg_idx, 3, 2);
            let peers: Vec<usize> = model.peers(0).iter().cloned().collect();
            for mask in 0u32..(1 << peers.len()) {
                let subset: BTreeSet<usize> = peers
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, &p)| p)
                    .collect();
                let expected = model
                    .selection_set_probability(0, &subset, &config)
                    .unwrap();
                let hits = evs.iter().filter(|e| e.active_set == subset).count();
                let n = evs.len() as f64;
                let se = (expected * (1.0 - expected) / n).sqrt();
                assert!(
                    (hits as f64 / n - expected).abs() < 4.0 * se + 1e-9,
                    "config {cfg_idx} subset {subset:?}"
                );
            }
        }
    }
}
