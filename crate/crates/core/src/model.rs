//! Model primitives: network, peer-selection kernel, choice rules, and the
//! exact conditional choice probabilities (CCPs) they induce.
//!
//! An agent waking at configuration `y` first draws an active set of peers,
//! each peer independently with a probability read off the selection kernel,
//! then draws an alternative from the choice rule evaluated at her own current
//! choice and the active set's average-choice vector. The CCP is the mixture
//! of the rule over all active sets.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::ChoiceConfiguration;
use crate::error::{Error, Result};

/// Hard cap on peers-per-agent for exact subset enumeration.
pub const ENUMERATION_CAP: usize = 20;

/// Tolerance for exact probability-vector checks.
pub const EXACT_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Peer averages
// ---------------------------------------------------------------------------

/// Average-choice vector of an active set, kept in exact rational form as
/// per-alternative counts plus the set size. The empty set is the reserved
/// all-zero vector (size 0).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PeerAverage {
    counts: Vec<usize>,
    size: usize,
}

impl PeerAverage {
    pub fn empty(num_alternatives: usize) -> Self {
        Self {
            counts: vec![0; num_alternatives],
            size: 0,
        }
    }

    /// Build from explicit per-alternative counts.
    pub fn from_counts(counts: Vec<usize>) -> Self {
        let size = counts.iter().sum();
        Self { counts, size }
    }

    /// Singleton set whose one member chooses `v`.
    pub fn singleton(v: usize, num_alternatives: usize) -> Self {
        let mut counts = vec![0; num_alternatives];
        counts[v] = 1;
        Self { counts, size: 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Fraction of the active set choosing `v`; zero for the empty set.
    pub fn fraction(&self, v: usize) -> f64 {
        if self.size == 0 {
            0.0
        } else {
            self.counts[v] as f64 / self.size as f64
        }
    }

    pub fn fractions(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|v| self.fraction(v)).collect()
    }
}

/// Average choices of `active_set` at `config`. The caller excludes the
/// deciding agent. Empty sets map to the reserved zero vector.
pub fn peer_average(config: &ChoiceConfiguration, active_set: &BTreeSet<usize>) -> PeerAverage {
    let mut counts = vec![0; config.num_alternatives()];
    for &a in active_set {
        counts[config.choice_of(a)] += 1;
    }
    PeerAverage::from_counts(counts)
}

// ---------------------------------------------------------------------------
// Selection kernel
// ---------------------------------------------------------------------------

/// Per-type consideration probabilities `Q_t(own_choice, peer_choice)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionKernel {
    /// `tables[t][own][peer]`, each a probability.
    tables: Vec<Vec<Vec<f64>>>,
}

impl SelectionKernel {
    pub fn new(tables: Vec<Vec<Vec<f64>>>, num_alternatives: usize) -> Result<Self> {
        for (t, table) in tables.iter().enumerate() {
            if table.len() != num_alternatives
                || table.iter().any(|row| row.len() != num_alternatives)
            {
                return Err(Error::InvalidModel(format!(
                    "selection table for type {t} is not {num_alternatives}x{num_alternatives}"
                )));
            }
            for row in table {
                for &q in row {
                    if !(0.0..=1.0).contains(&q) {
                        return Err(Error::InvalidModel(format!(
                            "selection probability {q} outside [0,1] for type {t}"
                        )));
                    }
                }
            }
        }
        Ok(Self { tables })
    }

    /// Uniform kernel, same probability for every (type, own, peer) cell.
    pub fn constant(q: f64, num_types: usize, num_alternatives: usize) -> Self {
        Self {
            tables: vec![vec![vec![q; num_alternatives]; num_alternatives]; num_types],
        }
    }

    pub fn num_types(&self) -> usize {
        self.tables.len()
    }

    pub fn q(&self, agent_type: usize, own: usize, peer: usize) -> f64 {
        self.tables[agent_type][own][peer]
    }

    pub fn table(&self, agent_type: usize) -> &Vec<Vec<f64>> {
        &self.tables[agent_type]
    }

    /// Cells on the boundary {0,1}; interior Q is required for the
    /// uniqueness and identification claims.
    pub fn boundary_cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (t, table) in self.tables.iter().enumerate() {
            for (own, row) in table.iter().enumerate() {
                for (peer, &q) in row.iter().enumerate() {
                    if q <= 0.0 || q >= 1.0 {
                        out.push((t, own, peer));
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Choice rules
// ---------------------------------------------------------------------------

/// Key of a tabular rule entry: exact peer-average grid point in lowest
/// terms.
pub type CompositionKey = Vec<usize>;

/// Reduce a count vector to lowest terms: the rule depends on the active
/// set's average-choice vector, so counts (2,0) and (1,0) name the same grid
/// point. The all-zero (empty set) vector is its own point.
pub fn reduce_counts(counts: &[usize]) -> CompositionKey {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let g = counts.iter().fold(0, |g, &c| gcd(g, c));
    if g <= 1 {
        counts.to_vec()
    } else {
        counts.iter().map(|&c| c / g).collect()
    }
}

/// Choice rule stored extensionally on the exact peer-average grid.
/// Lookups off the grid are an error, never interpolated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabularRule {
    /// `(type, own_choice, reduced counts) -> probability vector`.
    entries: BTreeMap<(usize, usize, CompositionKey), Vec<f64>>,
}

impl TabularRule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, agent_type: usize, own: usize, avg: &PeerAverage, probs: Vec<f64>) {
        self.entries
            .insert((agent_type, own, reduce_counts(avg.counts())), probs);
    }

    pub fn get(&self, agent_type: usize, own: usize, avg: &PeerAverage) -> Option<&Vec<f64>> {
        self.entries
            .get(&(agent_type, own, reduce_counts(avg.counts())))
    }

    pub fn entries(&self) -> &BTreeMap<(usize, usize, CompositionKey), Vec<f64>> {
        &self.entries
    }
}

/// Linear-in-means multinomial logit rule with the location normalization
/// `alpha[t][own][0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRule {
    /// `alpha[t][own][v]`
    pub alpha: Vec<Vec<Vec<f64>>>,
    /// `beta[t][own][v]`
    pub beta: Vec<Vec<Vec<f64>>>,
}

impl LogitRule {
    pub fn new(alpha: Vec<Vec<Vec<f64>>>, beta: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if alpha.len() != beta.len() {
            return Err(Error::InvalidModel(
                "alpha and beta must cover the same types".into(),
            ));
        }
        for (t, per_own) in alpha.iter().enumerate() {
            for (own, row) in per_own.iter().enumerate() {
                if row.first().map_or(true, |&a0| a0 != 0.0) {
                    return Err(Error::InvalidModel(format!(
                        "alpha[{t}][{own}][0] must be 0 (normalization)"
                    )));
                }
            }
        }
        Ok(Self { alpha, beta })
    }

    /// Softmax of `alpha + beta * avg` over alternatives.
    pub fn evaluate(&self, agent_type: usize, own: usize, avg: &PeerAverage) -> Vec<f64> {
        let alpha = &self.alpha[agent_type][own];
        let beta = &self.beta[agent_type][own];
        let utils: Vec<f64> = (0..alpha.len())
            .map(|v| alpha[v] + beta[v] * avg.fraction(v))
            .collect();
        softmax(&utils)
    }
}

fn softmax(utils: &[f64]) -> Vec<f64> {
    let m = utils.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = utils.iter().map(|u| (u - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

/// Choice rule: either an explicit table on the peer-average grid or a
/// parametric logit form.
#[derive(Debug, Clone, PartialEq)]
pub enum ChoiceRule {
    Tabular(TabularRule),
    Logit(LogitRule),
}

impl ChoiceRule {
    /// Probability vector over alternatives for an agent of `agent_type`
    /// currently at `own` facing peer average `avg`.
    pub fn evaluate(&self, agent_type: usize, own: usize, avg: &PeerAverage) -> Result<Vec<f64>> {
        match self {
            ChoiceRule::Logit(rule) => Ok(rule.evaluate(agent_type, own, avg)),
            ChoiceRule::Tabular(rule) => rule
                .get(agent_type, own, avg)
                .cloned()
                .ok_or_else(|| Error::OffGridLookup {
                    agent_type,
                    own,
                    counts: avg.counts().to_vec(),
                }),
        }
    }
}

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

/// Complete ground-truth model. Immutable after construction; all operations
/// on it are pure functions.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    num_agents: usize,
    num_alternatives: usize,
    types: Vec<usize>,
    network: Vec<BTreeSet<usize>>,
    kernel: SelectionKernel,
    rule: ChoiceRule,
    rates: Vec<f64>,
}

impl ModelSpec {
    pub fn new(
        num_agents: usize,
        num_alternatives: usize,
        types: Vec<usize>,
        network: Vec<BTreeSet<usize>>,
        kernel: SelectionKernel,
        rule: ChoiceRule,
        rates: Vec<f64>,
    ) -> Result<Self> {
        if num_agents < 2 {
            return Err(Error::InvalidModel("need at least 2 agents".into()));
        }
        if num_alternatives < 2 {
            return Err(Error::InvalidModel("need at least 2 alternatives".into()));
        }
        if types.len() != num_agents || network.len() != num_agents || rates.len() != num_agents {
            return Err(Error::InvalidModel(
                "types, network, and rates must each have one entry per agent".into(),
            ));
        }
        let num_types = kernel.num_types();
        if let Some(&t) = types.iter().find(|&&t| t >= num_types) {
            return Err(Error::InvalidModel(format!(
                "agent type {t} has no selection table (types 0..{num_types})"
            )));
        }
        for (a, peers) in network.iter().enumerate() {
            if peers.contains(&a) {
                return Err(Error::InvalidModel(format!("agent {a} is its own peer")));
            }
            if let Some(&p) = peers.iter().find(|&&p| p >= num_agents) {
                return Err(Error::InvalidModel(format!(
                    "agent {a} lists unknown peer {p}"
                )));
            }
        }
        for (a, &lambda) in rates.iter().enumerate() {
            if !(lambda > 0.0) {
                return Err(Error::NonPositiveRate(a));
            }
        }
        Ok(Self {
            num_agents,
            num_alternatives,
            types,
            network,
            kernel,
            rule,
            rates,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    /// Y+1, the size of the menu.
    pub fn num_alternatives(&self) -> usize {
        self.num_alternatives
    }

    pub fn num_types(&self) -> usize {
        self.kernel.num_types()
    }

    pub fn agent_type(&self, agent: usize) -> usize {
        self.types[agent]
    }

    pub fn types(&self) -> &[usize] {
        &self.types
    }

    pub fn peers(&self, agent: usize) -> &BTreeSet<usize> {
        &self.network[agent]
    }

    pub fn network(&self) -> &[BTreeSet<usize>] {
        &self.network
    }

    pub fn rate(&self, agent: usize) -> f64 {
        self.rates[agent]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn kernel(&self) -> &SelectionKernel {
        &self.kernel
    }

    pub fn rule(&self) -> &ChoiceRule {
        &self.rule
    }

    /// Selection probability `Q^a(a'|y)` via the type lookup; zero for
    /// non-peers.
    pub fn selection_prob(&self, agent: usize, other: usize, config: &ChoiceConfiguration) -> f64 {
        if !self.network[agent].contains(&other) {
            return 0.0;
        }
        self.kernel.q(
            self.types[agent],
            config.choice_of(agent),
            config.choice_of(other),
        )
    }

    /// Probability that `agent` draws exactly `active_set` out of her
    /// reference group at `config`.
    pub fn selection_set_probability(
        &self,
        agent: usize,
        active_set: &BTreeSet<usize>,
        config: &ChoiceConfiguration,
    ) -> Result<f64> {
        if let Some(&bad) = active_set.iter().find(|o| !self.network[agent].contains(o)) {
            return Err(Error::NotAPeer { agent, other: bad });
        }
        let mut p = 1.0;
        for &other in &self.network[agent] {
            let q = self.selection_prob(agent, other, config);
            p *= if active_set.contains(&other) { q } else { 1.0 - q };
        }
        Ok(p)
    }

    /// Exact CCP vector `P_a(.|y)`: the mixture of the choice rule over all
    /// `2^{|N_a|}` active sets. Errors out instead of approximating when the
    /// reference group exceeds the enumeration cap.
    pub fn ccp(&self, agent: usize, config: &ChoiceConfiguration) -> Result<Vec<f64>> {
        let peers: Vec<usize> = self.network[agent].iter().cloned().collect();
        if peers.len() > ENUMERATION_CAP {
            return Err(Error::EnumerationTooLarge {
                agent,
                peers: peers.len(),
                cap: ENUMERATION_CAP,
            });
        }
        let t = self.types[agent];
        let own = config.choice_of(agent);
        let qs: Vec<f64> = peers
            .iter()
            .map(|&p| self.kernel.q(t, own, config.choice_of(p)))
            .collect();

        let mut probs = vec![0.0; self.num_alternatives];
        for mask in 0u32..(1u32 << peers.len()) {
            let mut weight = 1.0;
            let mut counts = vec![0usize; self.num_alternatives];
            for (i, &p) in peers.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    weight *= qs[i];
                    counts[config.choice_of(p)] += 1;
                } else {
                    weight *= 1.0 - qs[i];
                }
            }
            if weight == 0.0 {
                continue;
            }
            let avg = PeerAverage::from_counts(counts);
            let r = self.rule.evaluate(t, own, &avg)?;
            for (acc, rv) in probs.iter_mut().zip(&r) {
                *acc += weight * rv;
            }
        }
        Ok(probs)
    }

    /// Largest reference-group size per type.
    pub fn max_peer_count(&self, agent_type: usize) -> usize {
        (0..self.num_agents)
            .filter(|&a| self.types[a] == agent_type)
            .map(|a| self.network[a].len())
            .max()
            .unwrap_or(0)
    }

    /// Distinct reference-group sizes present for a type, ascending.
    pub fn peer_count_levels(&self, agent_type: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = (0..self.num_agents)
            .filter(|&a| self.types[a] == agent_type)
            .map(|a| self.network[a].len())
            .collect();
        set.into_iter().collect()
    }
}

/// Stand-alone logit evaluation matching `LogitRule::evaluate`.
pub fn logit_rule(rule: &LogitRule, agent_type: usize, own: usize, avg: &PeerAverage) -> Vec<f64> {
    rule.evaluate(agent_type, own, avg)
}

/// Every composition of `size` items over `parts` bins, lexicographic.
pub fn compositions(size: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(remaining: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=remaining {
            prefix.push(k);
            rec(remaining - k, slots - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(size, parts, &mut Vec::new(), &mut out);
    out
}

// ---------------------------------------------------------------------------
// CCP tables
// ---------------------------------------------------------------------------

/// Where a CCP table came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CcpProvenance {
    Exact,
    Dataset1,
    Dataset2Derived,
}

/// One observed/derived CCP vector with its supporting event count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcpCell {
    pub probs: Vec<f64>,
    /// Number of wakes behind the estimate; `None` for exact or derived cells.
    pub count: Option<u64>,
}

/// Conditional choice probabilities per (agent, configuration), either
/// computed exactly from a model on demand or backed by an estimated table
/// with missing cells left missing.
#[derive(Debug, Clone)]
pub enum CcpTable {
    Exact { model: Arc<ModelSpec> },
    Table {
        cells: BTreeMap<(usize, usize), CcpCell>,
        num_agents: usize,
        num_alternatives: usize,
        provenance: CcpProvenance,
    },
}

impl CcpTable {
    pub fn exact(model: Arc<ModelSpec>) -> Self {
        CcpTable::Exact { model }
    }

    pub fn from_cells(
        cells: BTreeMap<(usize, usize), CcpCell>,
        num_agents: usize,
        num_alternatives: usize,
        provenance: CcpProvenance,
    ) -> Self {
        CcpTable::Table {
            cells,
            num_agents,
            num_alternatives,
            provenance,
        }
    }

    pub fn provenance(&self) -> CcpProvenance {
        match self {
            CcpTable::Exact { .. } => CcpProvenance::Exact,
            CcpTable::Table { provenance, .. } => *provenance,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.provenance(), CcpProvenance::Exact)
    }

    pub fn num_agents(&self) -> usize {
        match self {
            CcpTable::Exact { model } => model.num_agents(),
            CcpTable::Table { num_agents, .. } => *num_agents,
        }
    }

    pub fn num_alternatives(&self) -> usize {
        match self {
            CcpTable::Exact { model } => model.num_alternatives(),
            CcpTable::Table {
                num_alternatives, ..
            } => *num_alternatives,
        }
    }

    /// CCP vector of `agent` at `config`, or `None` for an unvisited cell.
    pub fn get(&self, agent: usize, config: &ChoiceConfiguration) -> Option<CcpCell> {
        match self {
            CcpTable::Exact { model } => {
                let probs = model.ccp(agent, config).ok()?;
                Some(CcpCell { probs, count: None })
            }
            CcpTable::Table { cells, .. } => cells.get(&(agent, config.index())).cloned(),
        }
    }
}

// ---------------------------------------------------------------------------
// Assumption validation
// ---------------------------------------------------------------------------

/// Per-assumption diagnostics, report-only: boundary models are representable
/// but the uniqueness and identification claims need every check to pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// Selection probabilities strictly inside (0,1) on every cell.
    pub selection_interior: bool,
    pub boundary_cells: Vec<(usize, usize, usize)>,
    /// Type homogeneity is structural for this representation.
    pub type_homogeneity: bool,
    /// Nonempty-set rule differs from the empty-set rule in at least one
    /// component, on the whole grid.
    pub rule_sensitive_some_v: bool,
    /// Stricter reading: differs in every component.
    pub rule_sensitive_all_v: bool,
    pub insensitive_grid_points: Vec<(usize, usize, Vec<usize>)>,
    /// Regularity inequality holds for some alternative, per (agent, peer).
    pub regularity: bool,
    pub regularity_failures: Vec<(usize, usize)>,
    /// At least 3 distinct reference-group sizes per type.
    pub size_variation: bool,
    pub size_levels: Vec<Vec<usize>>,
    /// Sizes 2..max all present per type.
    pub size_coverage: bool,
    pub coverage_gaps: Vec<(usize, Vec<usize>)>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.selection_interior
            && self.rule_sensitive_some_v
            && self.regularity
            && self.size_variation
            && self.size_coverage
    }
}

/// Evaluate the model assumptions and return a diagnostic report.
pub fn validate_assumptions(model: &ModelSpec) -> AssumptionReport {
    let boundary = model.kernel.boundary_cells();
    let alts = model.num_alternatives();

    // Rule sensitivity: empty-set vector vs every nonempty grid point.
    let mut insensitive = Vec::new();
    let mut all_v = true;
    for t in 0..model.num_types() {
        let max_peers = model.max_peer_count(t);
        for own in 0..alts {
            let empty = model
                .rule
                .evaluate(t, own, &PeerAverage::empty(alts))
                .unwrap_or_else(|_| vec![f64::NAN; alts]);
            for j in 1..=max_peers {
                for counts in compositions(j, alts) {
                    let avg = PeerAverage::from_counts(counts.clone());
                    let Ok(probs) = model.rule.evaluate(t, own, &avg) else {
                        continue;
                    };
                    let diffs: Vec<bool> = probs
                        .iter()
                        .zip(&empty)
                        .map(|(p, e)| (p - e).abs() > EXACT_TOL)
                        .collect();
                    if !diffs.iter().any(|&d| d) {
                        insensitive.push((t, own, counts));
                    }
                    if !diffs.iter().all(|&d| d) {
                        all_v = false;
                    }
                }
            }
        }
    }
    let some_v = insensitive.is_empty();

    // Regularity, evaluated verbatim at the all-zeros configuration and its
    // one-coordinate substitutions.
    let mut reg_failures = Vec::new();
    for a in 0..model.num_agents() {
        for &other in model.peers(a) {
            if !regularity_holds(model, a, other) {
                reg_failures.push((a, other));
            }
        }
    }

    let mut levels = Vec::new();
    let mut gaps = Vec::new();
    let mut variation_ok = true;
    let mut coverage_ok = true;
    for t in 0..model.num_types() {
        let lv = model.peer_count_levels(t);
        if lv.len() < 3 {
            variation_ok = false;
        }
        let max = lv.iter().cloned().max().unwrap_or(0);
        let missing: Vec<usize> = (2..=max).filter(|s| !lv.contains(s)).collect();
        if !missing.is_empty() {
            coverage_ok = false;
            gaps.push((t, missing));
        }
        levels.push(lv);
    }

    AssumptionReport {
        selection_interior: boundary.is_empty(),
        boundary_cells: boundary,
        type_homogeneity: true,
        rule_sensitive_some_v: some_v,
        rule_sensitive_all_v: all_v,
        insensitive_grid_points: insensitive,
        regularity: reg_failures.is_empty(),
        regularity_failures: reg_failures,
        size_variation: variation_ok,
        size_levels: levels,
        size_coverage: coverage_ok,
        coverage_gaps: gaps,
    }
}

/// The tie-breaking inequality for one (agent, peer) pair: there must exist an
/// alternative v such that
/// `Q_t(0,v) / Q_t(0,0)` differs from the ratio of the rule contrasts summed
/// over active sets drawn from the remaining peers, evaluated at the all-zeros
/// configuration and at the peer's v-substitution. Compared cross-multiplied
/// so boundary kernels do not divide by zero.
fn regularity_holds(model: &ModelSpec, agent: usize, _other: usize) -> bool {
    let alts = model.num_alternatives();
    let t = model.agent_type(agent);
    let rest = model.peers(agent).len() - 1;
    let q00 = model.kernel.q(t, 0, 0);

    for v in 1..alts {
        let q0v = model.kernel.q(t, 0, v);
        let mut num = 0.0;
        let mut den = 0.0;
        for mask in 0u32..(1u32 << rest) {
            let mut weight = 1.0;
            let mut counts = vec![0usize; alts];
            for i in 0..rest {
                // All remaining peers choose 0 at both configurations.
                if mask & (1 << i) != 0 {
                    weight *= q00;
                    counts[0] += 1;
                } else {
                    weight *= 1.0 - q00;
                }
            }
            let without = PeerAverage::from_counts(counts.clone());
            let mut with_zero = counts.clone();
            with_zero[0] += 1; // other chooses 0 in the all-zeros configuration
            let with_zero = PeerAverage::from_counts(with_zero);
            let mut with_v = counts;
            with_v[v] += 1; // other chooses v after the substitution
            let with_v = PeerAverage::from_counts(with_v);

            let r_without = match model.rule.evaluate(t, 0, &without) {
                Ok(r) => r[v],
                Err(_) => return true, // off-grid: cannot falsify
            };
            let r_with_zero = match model.rule.evaluate(t, 0, &with_zero) {
                Ok(r) => r[v],
                Err(_) => return true,
            };
            let r_with_v = match model.rule.evaluate(t, 0, &with_v) {
                Ok(r) => r[v],
                Err(_) => return true,
            };
            num += weight * (r_with_zero - r_without);
            den += weight * (r_with_v - r_without);
        }
        // Q(0,v)/Q(0,0) != num/den, cross-multiplied.
        if (q0v * den - q00 * num).abs() > EXACT_TOL {
            return true;
        }
    }
    false
}
