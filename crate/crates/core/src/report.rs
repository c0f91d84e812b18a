//! End-to-end identification pipeline and its serializable report.
//!
//! The report is what the CLI writes to disk: everything the recovery
//! produced, with optional error metrics when the ground truth is available
//! (roundtrip runs).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::identify::{
    recover_logit, recover_network, recover_rule_recursive, recover_selection_and_base_rules,
    refine_mixture, GeneratorRecovery, LogitRecovery, NetworkRecovery, RatioDiagnostic,
    RecoveredRule, RecoveryOptions, SelectionRecovery,
};
use crate::model::{CcpProvenance, CcpTable, ChoiceRule, ModelSpec, PeerAverage, TabularRule};

/// Everything the CCP pipeline recovers, in native types.
#[derive(Debug, Clone)]
pub struct RecoveredModel {
    pub network: NetworkRecovery,
    pub selection: SelectionRecovery,
    pub logit: Option<LogitRecovery>,
    pub rule: Option<RecoveredRule>,
}

/// Steps of the pipeline to run after the mandatory network and selection
/// stages.
#[derive(Debug, Clone, Copy)]
pub struct PipelineSteps {
    pub fit_logit: bool,
    pub recover_full_rule: bool,
}

impl Default for PipelineSteps {
    fn default() -> Self {
        Self {
            fit_logit: true,
            recover_full_rule: true,
        }
    }
}

/// Run network -> selection/base rules -> (logit, full rule) off a CCP table.
/// `types` is the known type map; identification never infers it.
pub fn run_identification(
    ccps: &CcpTable,
    types: &[usize],
    num_types: usize,
    options: &RecoveryOptions,
    steps: PipelineSteps,
) -> Result<RecoveredModel> {
    let network = if options.pool_network_configs && !ccps.is_exact() {
        crate::identify::recover_network_pooled(ccps)?
    } else {
        recover_network(ccps, options.thresholds())?
    };
    // The constructive stages know the network, so cells differing only in
    // non-peers' choices can be pooled (CCPs are invariant to those). The
    // refinement aggregates raw cells itself and must see true counts.
    let raw_ccps = ccps;
    let ccps = &crate::identify::pool_nonpeer_cells(ccps, &network.adjacency);
    let alts = ccps.num_alternatives();
    let refining = options.refine && !ccps.is_exact();

    // Constructive stages. With refinement enabled, failures here only cost
    // the starting point: fall back to a neutral one and let the fit work.
    let mut selection =
        match recover_selection_and_base_rules(ccps, &network.adjacency, types, num_types, options)
        {
            Ok(s) => s,
            Err(_) if refining => {
                // Retry without noise-floor guards: a rough starting point
                // beats a neutral one, and the refinement does the real work.
                let lenient = RecoveryOptions {
                    thresholds: crate::identify::ThresholdPolicyOrDefault(
                        crate::identify::ThresholdPolicy {
                            se_multiplier: 0.0,
                            abs_floor: 1e-9,
                            exact_tol: 1e-9,
                        },
                    ),
                    pool_contrasts: true,
                    average_triples: options.average_triples,
                    project_feasible: true,
                    refine: true,
                    refine_logit: options.refine_logit,
                    pool_network_configs: options.pool_network_configs,
                };
                recover_selection_and_base_rules(
                    ccps,
                    &network.adjacency,
                    types,
                    num_types,
                    &lenient,
                )
                .unwrap_or_else(|_| SelectionRecovery {
                    kernel: vec![vec![vec![0.5; alts]; alts]; num_types],
                    empty_rule: vec![vec![vec![1.0 / alts as f64; alts]; alts]; num_types],
                    singleton_rule: vec![
                        vec![vec![vec![1.0 / alts as f64; alts]; alts]; alts];
                        num_types
                    ],
                    ratio_diagnostics: Vec::new(),
                })
            }
            Err(e) => return Err(e),
        };
    let mut rule = if steps.recover_full_rule || refining {
        match recover_rule_recursive(
            ccps,
            &selection.kernel,
            &selection.empty_rule,
            &selection.singleton_rule,
            &network.adjacency,
            types,
        ) {
            Ok(r) => Some(r),
            Err(_) if refining => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let mut refined_logit: Option<LogitRecovery> = None;
    if refining && options.refine_logit {
        let (init_alpha, init_beta) =
            match recover_logit(&selection.empty_rule, &selection.singleton_rule) {
                Ok(l) => (l.alpha, l.beta),
                Err(_) => {
                    let zeros = vec![vec![vec![0.0; alts]; alts]; num_types];
                    (zeros.clone(), zeros)
                }
            };
        let refined = crate::identify::refine_mixture_logit(
            raw_ccps,
            &network.adjacency,
            types,
            num_types,
            &selection.kernel,
            &init_alpha,
            &init_beta,
        )?;
        selection.kernel = refined.kernel;
        for ty in 0..num_types {
            for own in 0..alts {
                if let Some(p) = refined.rule.get(ty, own, &PeerAverage::empty(alts)) {
                    selection.empty_rule[ty][own] = p.to_vec();
                }
                for pc in 0..alts {
                    if let Some(p) = refined.rule.get(ty, own, &PeerAverage::singleton(pc, alts)) {
                        selection.singleton_rule[ty][own][pc] = p.to_vec();
                    }
                }
            }
        }
        let mut provenance = rule.map(|r| r.provenance).unwrap_or_default();
        for (key, _) in refined.rule.entries() {
            provenance.entry(key.clone()).or_insert("refined");
        }
        rule = Some(RecoveredRule {
            table: refined.rule,
            provenance,
        });
        refined_logit = Some(LogitRecovery {
            alpha: refined.alpha,
            beta: refined.beta,
        });
    } else if refining {
        let init_table = rule.as_ref().map(|r| r.table.clone()).unwrap_or_else(|| {
            let mut t = TabularRule::new();
            for ty in 0..num_types {
                for own in 0..alts {
                    t.insert(
                        ty,
                        own,
                        &PeerAverage::empty(alts),
                        selection.empty_rule[ty][own].clone(),
                    );
                    for pc in 0..alts {
                        t.insert(
                            ty,
                            own,
                            &PeerAverage::singleton(pc, alts),
                            selection.singleton_rule[ty][own][pc].clone(),
                        );
                    }
                }
            }
            t
        });
        let refined = refine_mixture(
            raw_ccps,
            &network.adjacency,
            types,
            num_types,
            &selection.kernel,
            &init_table,
        )?;
        selection.kernel = refined.kernel;
        for ty in 0..num_types {
            for own in 0..alts {
                if let Some(p) = refined.rule.get(ty, own, &PeerAverage::empty(alts)) {
                    selection.empty_rule[ty][own] = p.to_vec();
                }
                for pc in 0..alts {
                    if let Some(p) = refined.rule.get(ty, own, &PeerAverage::singleton(pc, alts)) {
                        selection.singleton_rule[ty][own][pc] = p.to_vec();
                    }
                }
            }
        }
        let mut provenance = rule.map(|r| r.provenance).unwrap_or_default();
        for (key, _) in refined.rule.entries() {
            provenance.entry(key.clone()).or_insert("refined");
        }
        rule = Some(RecoveredRule {
            table: refined.rule,
            provenance,
        });
    }

    let logit = if steps.fit_logit {
        match refined_logit {
            Some(l) => Some(l),
            None => Some(recover_logit(&selection.empty_rule, &selection.singleton_rule)?),
        }
    } else {
        None
    };
    let rule = if steps.recover_full_rule { rule } else { None };
    Ok(RecoveredModel {
        network,
        selection,
        logit,
        rule,
    })
}

// ---------------------------------------------------------------------------
// Serializable report
// ---------------------------------------------------------------------------

/// One recovered rule grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleEntry {
    pub agent_type: usize,
    pub own: usize,
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
    /// "prop3" for base entries, "prop5-recursion" for peeled ones.
    pub provenance: String,
}

/// Diagnostics of the snapshot-path generator recovery.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSection {
    pub delta: f64,
    pub generator: Vec<Vec<f64>>,
    pub forbidden_mass: f64,
    pub clamped_mass: f64,
    pub imag_residue: f64,
    /// Max absolute entry error vs the true generator, if known.
    pub max_abs_error: Option<f64>,
}

/// Max-abs errors of the recovery against a known ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub network_exact: bool,
    pub false_edges: Vec<(usize, usize)>,
    pub missed_edges: Vec<(usize, usize)>,
    pub kernel_max_abs_error: f64,
    pub empty_rule_max_abs_error: f64,
    pub singleton_rule_max_abs_error: f64,
    pub full_rule_max_abs_error: Option<f64>,
    pub alpha_max_abs_error: Option<f64>,
    pub beta_max_abs_error: Option<f64>,
    pub rates_max_rel_error: Option<f64>,
}

/// Serializable output of an identification run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub num_agents: usize,
    pub num_alternatives: usize,
    pub num_types: usize,
    pub ccp_provenance: CcpProvenance,
    /// Recovered reference groups, sorted agent lists.
    pub adjacency: Vec<Vec<usize>>,
    pub edge_contrasts: Vec<crate::identify::EdgeContrast>,
    /// `kernel[t][own][peer_choice]`
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub empty_rule: Vec<Vec<Vec<f64>>>,
    pub singleton_rule: Vec<Vec<Vec<Vec<f64>>>>,
    pub ratio_diagnostics: Vec<RatioDiagnostic>,
    pub rule_entries: Vec<RuleEntry>,
    pub alpha: Option<Vec<Vec<Vec<f64>>>>,
    pub beta: Option<Vec<Vec<Vec<f64>>>>,
    /// Estimated clock rates when the data carry them (event path).
    pub rates: Option<Vec<f64>>,
    pub generator: Option<GeneratorSection>,
    pub errors: Option<ErrorMetrics>,
}

impl IdentificationReport {
    pub fn new(recovered: &RecoveredModel, ccps: &CcpTable, num_types: usize) -> Self {
        let rule_entries = recovered
            .rule
            .as_ref()
            .map(|r| {
                r.table
                    .entries()
                    .iter()
                    .map(|((t, own, counts), probs)| RuleEntry {
                        agent_type: *t,
                        own: *own,
                        counts: counts.clone(),
                        probs: probs.clone(),
                        provenance: r
                            .provenance
                            .get(&(*t, *own, counts.clone()))
                            .copied()
                            .unwrap_or("prop3")
                            .to_string(),
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            num_agents: ccps.num_agents(),
            num_alternatives: ccps.num_alternatives(),
            num_types,
            ccp_provenance: ccps.provenance(),
            adjacency: recovered
                .network
                .adjacency
                .iter()
                .map(|s| s.iter().cloned().collect())
                .collect(),
            edge_contrasts: recovered.network.contrasts.clone(),
            kernel: recovered.selection.kernel.clone(),
            empty_rule: recovered.selection.empty_rule.clone(),
            singleton_rule: recovered.selection.singleton_rule.clone(),
            ratio_diagnostics: recovered.selection.ratio_diagnostics.clone(),
            rule_entries,
            alpha: recovered.logit.as_ref().map(|l| l.alpha.clone()),
            beta: recovered.logit.as_ref().map(|l| l.beta.clone()),
            rates: None,
            generator: None,
            errors: None,
        }
    }

    pub fn with_rates(mut self, rates: Vec<f64>) -> Self {
        self.rates = Some(rates);
        self
    }

    pub fn with_generator(
        mut self,
        recovery: &GeneratorRecovery,
        delta: f64,
        truth: Option<&nalgebra::DMatrix<f64>>,
    ) -> Self {
        let g = &recovery.generator;
        self.generator = Some(GeneratorSection {
            delta,
            generator: (0..g.nrows())
                .map(|i| (0..g.ncols()).map(|j| g[(i, j)]).collect())
                .collect(),
            forbidden_mass: recovery.forbidden_mass,
            clamped_mass: recovery.clamped_mass,
            imag_residue: recovery.imag_residue,
            max_abs_error: truth.map(|w| (g - w).amax()),
        });
        self
    }

    /// Fill in the error section by comparing against a known model.
    pub fn score_against(mut self, truth: &ModelSpec) -> Self {
        let alts = truth.num_alternatives();
        let recovered: Vec<BTreeSet<usize>> = self
            .adjacency
            .iter()
            .map(|v| v.iter().cloned().collect())
            .collect();
        let mut false_edges = Vec::new();
        let mut missed_edges = Vec::new();
        for a in 0..truth.num_agents() {
            for b in 0..truth.num_agents() {
                if a == b {
                    continue;
                }
                let got = recovered[a].contains(&b);
                let want = truth.peers(a).contains(&b);
                if got && !want {
                    false_edges.push((a, b));
                }
                if !got && want {
                    missed_edges.push((a, b));
                }
            }
        }

        let mut kernel_err: f64 = 0.0;
        let mut empty_err: f64 = 0.0;
        let mut single_err: f64 = 0.0;
        for t in 0..truth.num_types() {
            for own in 0..alts {
                for pc in 0..alts {
                    kernel_err = kernel_err
                        .max((self.kernel[t][own][pc] - truth.kernel().q(t, own, pc)).abs());
                }
                if let Ok(r) = truth.rule().evaluate(t, own, &PeerAverage::empty(alts)) {
                    for v in 0..alts {
                        empty_err = empty_err.max((self.empty_rule[t][own][v] - r[v]).abs());
                    }
                }
                for pc in 0..alts {
                    if let Ok(r) = truth
                        .rule()
                        .evaluate(t, own, &PeerAverage::singleton(pc, alts))
                    {
                        for v in 0..alts {
                            single_err =
                                single_err.max((self.singleton_rule[t][own][pc][v] - r[v]).abs());
                        }
                    }
                }
            }
        }

        let full_rule_err = if self.rule_entries.is_empty() {
            None
        } else {
            let mut err: f64 = 0.0;
            for e in &self.rule_entries {
                let avg = PeerAverage::from_counts(e.counts.clone());
                if let Ok(r) = truth.rule().evaluate(e.agent_type, e.own, &avg) {
                    for v in 0..alts {
                        err = err.max((e.probs[v] - r[v]).abs());
                    }
                }
            }
            Some(err)
        };

        let (alpha_err, beta_err) = match (truth.rule(), &self.alpha, &self.beta) {
            (ChoiceRule::Logit(l), Some(alpha), Some(beta)) => {
                let mut ae: f64 = 0.0;
                let mut be: f64 = 0.0;
                for t in 0..truth.num_types() {
                    for own in 0..alts {
                        for v in 0..alts {
                            ae = ae.max((alpha[t][own][v] - l.alpha[t][own][v]).abs());
                            be = be.max((beta[t][own][v] - l.beta[t][own][v]).abs());
                        }
                    }
                }
                (Some(ae), Some(be))
            }
            _ => (None, None),
        };

        let rates_err = self.rates.as_ref().map(|rates| {
            rates
                .iter()
                .zip(truth.rates())
                .map(|(est, tru)| ((est - tru) / tru).abs())
                .fold(0.0, f64::max)
        });

        self.errors = Some(ErrorMetrics {
            network_exact: false_edges.is_empty() && missed_edges.is_empty(),
            false_edges,
            missed_edges,
            kernel_max_abs_error: kernel_err,
            empty_rule_max_abs_error: empty_err,
            singleton_rule_max_abs_error: single_err,
            full_rule_max_abs_error: full_rule_err,
            alpha_max_abs_error: alpha_err,
            beta_max_abs_error: beta_err,
            rates_max_rel_error: rates_err,
        });
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
