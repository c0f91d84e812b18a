//! Scenario files: a JSON schema describing a complete model, convertible to
//! and from `ModelSpec`.
//!
//! File conventions follow the worked examples: agent ids and type labels are
//! 1-based in files, alternatives are 0-based with 0 the outside option. An
//! edge `[a, b]` means b belongs to a's reference group.
//!
//! ```json
//! {
//!   "name": "two-agent",
//!   "num_agents": 2,
//!   "num_alternatives": 2,
//!   "types": [1, 1],
//!   "edges": [[1, 2], [2, 1]],
//!   "lambda": [1.0, 1.0],
//!   "selection": [[[0.5, 0.5], [0.5, 0.5]]],
//!   "choice_rule": {
//!     "kind": "logit",
//!     "alpha": [[[0.0, 0.5], [0.0, -0.3]]],
//!     "beta": [[[0.4, 1.2], [-0.2, 0.8]]]
//!   }
//! }
//! ```
//!
//! `selection` lists one (Y+1)x(Y+1) matrix per type, ascending by label;
//! `alpha`/`beta` likewise, indexed `[type][own][alternative]`. Tabular rules
//! list explicit grid entries instead.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ChoiceRule, LogitRule, ModelSpec, PeerAverage, SelectionKernel, TabularRule,
};

/// One explicit grid entry of a tabular rule, file-side (1-based type label).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularEntry {
    #[serde(rename = "type")]
    pub type_label: usize,
    pub own: usize,
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
}

/// Choice-rule section of a scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChoiceRuleSpec {
    Logit {
        alpha: Vec<Vec<Vec<f64>>>,
        beta: Vec<Vec<Vec<f64>>>,
    },
    Tabular { entries: Vec<TabularEntry> },
}

/// On-disk scenario: everything needed to rebuild a `ModelSpec`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub num_agents: usize,
    pub num_alternatives: usize,
    /// 1-based type label per agent.
    pub types: Vec<usize>,
    /// Directed edges `[a, b]`, 1-based: b is in a's reference group.
    pub edges: Vec<[usize; 2]>,
    pub lambda: Vec<f64>,
    /// One (Y+1)x(Y+1) selection matrix per type, ascending by label.
    pub selection: Vec<Vec<Vec<f64>>>,
    pub choice_rule: ChoiceRuleSpec,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Stable content hash for provenance headers.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(self).unwrap_or_default();
        // FNV-1a, enough to fingerprint a config file.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Validate and convert to the internal model (0-based everywhere).
    pub fn to_model(&self) -> Result<ModelSpec> {
        let a = self.num_agents;
        if self.types.len() != a {
            return Err(Error::InvalidModel(format!(
                "scenario '{}': {} type labels for {} agents",
                self.name,
                self.types.len(),
                a
            )));
        }
        let num_types = self.selection.len();
        let mut types = Vec::with_capacity(a);
        for (i, &label) in self.types.iter().enumerate() {
            if label == 0 || label > num_types {
                return Err(Error::InvalidModel(format!(
                    "scenario '{}': agent {} has type label {label}, expected 1..={num_types}",
                    self.name,
                    i + 1
                )));
            }
            types.push(label - 1);
        }
        let mut network = vec![BTreeSet::new(); a];
        for &[from, to] in &self.edges {
            if from == 0 || from > a || to == 0 || to > a {
                return Err(Error::InvalidModel(format!(
                    "scenario '{}': edge [{from}, {to}] out of 1..={a}",
                    self.name
                )));
            }
            network[from - 1].insert(to - 1);
        }
        let kernel = SelectionKernel::new(self.selection.clone(), self.num_alternatives)?;
        let rule = match &self.choice_rule {
            ChoiceRuleSpec::Logit { alpha, beta } => {
                ChoiceRule::Logit(LogitRule::new(alpha.clone(), beta.clone())?)
            }
            ChoiceRuleSpec::Tabular { entries } => {
                let mut table = TabularRule::new();
                for e in entries {
                    if e.type_label == 0 || e.type_label > num_types {
                        return Err(Error::InvalidModel(format!(
                            "scenario '{}': tabular entry with type label {}",
                            self.name, e.type_label
                        )));
                    }
                    table.insert(
                        e.type_label - 1,
                        e.own,
                        &PeerAverage::from_counts(e.counts.clone()),
                        e.probs.clone(),
                    );
                }
                ChoiceRule::Tabular(table)
            }
        };
        ModelSpec::new(
            a,
            self.num_alternatives,
            types,
            network,
            kernel,
            rule,
            self.lambda.clone(),
        )
    }

    /// Export a model back into the file schema.
    pub fn from_model(name: &str, model: &ModelSpec) -> Self {
        let mut edges = Vec::new();
        for a in 0..model.num_agents() {
            for &b in model.peers(a) {
                edges.push([a + 1, b + 1]);
            }
        }
        let selection = (0..model.num_types())
            .map(|t| model.kernel().table(t).clone())
            .collect();
        let choice_rule = match model.rule() {
            ChoiceRule::Logit(l) => ChoiceRuleSpec::Logit {
                alpha: l.alpha.clone(),
                beta: l.beta.clone(),
            },
            ChoiceRule::Tabular(tab) => ChoiceRuleSpec::Tabular {
                entries: tab
                    .entries()
                    .iter()
                    .map(|((t, own, counts), probs)| TabularEntry {
                        type_label: t + 1,
                        own: *own,
                        counts: counts.clone(),
                        probs: probs.clone(),
                    })
                    .collect(),
            },
        };
        Self {
            name: name.to_string(),
            description: String::new(),
            num_agents: model.num_agents(),
            num_alternatives: model.num_alternatives(),
            types: model.types().iter().map(|&t| t + 1).collect(),
            edges,
            lambda: model.rates().to_vec(),
            selection,
            choice_rule,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_AGENT: &str = r#"{
        "name": "two-agent",
        "num_agents": 2,
        "num_alternatives": 2,
        "types": [1, 1],
        "edges": [[1, 2], [2, 1]],
        "lambda": [1.0, 1.0],
        "selection": [[[0.5, 0.5], [0.5, 0.5]]],
        "choice_rule": {
            "kind": "tabular",
            "entries": [
                {"type": 1, "own": 0, "counts": [0, 0], "probs": [0.5, 0.5]},
                {"type": 1, "own": 0, "counts": [1, 0], "probs": [0.7, 0.3]},
                {"type": 1, "own": 0, "counts": [0, 1], "probs": [0.2, 0.8]},
                {"type": 1, "own": 1, "counts": [0, 0], "probs": [0.4, 0.6]},
                {"type": 1, "own": 1, "counts": [1, 0], "probs": [0.8, 0.2]},
                {"type": 1, "own": 1, "counts": [0, 1], "probs": [0.1, 0.9]}
            ]
        }
    }"#;

    #[test]
    fn parses_and_builds_two_agent_model() {
        let scenario = Scenario::from_json(TWO_AGENT).unwrap();
        let model = scenario.to_model().unwrap();
        assert_eq!(model.num_agents(), 2);
        assert_eq!(model.peers(0).iter().cloned().collect::<Vec<_>>(), vec![1]);
        assert_eq!(model.agent_type(1), 0);
        let avg = PeerAverage::singleton(1, 2);
        assert_eq!(model.rule().evaluate(0, 0, &avg).unwrap(), vec![0.2, 0.8]);
    }

    #[test]
    fn model_roundtrips_through_schema() {
        let scenario = Scenario::from_json(TWO_AGENT).unwrap();
        let model = scenario.to_model().unwrap();
        let back = Scenario::from_model("two-agent", &model);
        let model2 = back.to_model().unwrap();
        assert_eq!(model.types(), model2.types());
        assert_eq!(model.network(), model2.network());
        assert_eq!(model.rates(), model2.rates());
        assert_eq!(model.rule(), model2.rule());
        assert_eq!(model.kernel(), model2.kernel());
    }

    #[test]
    fn hash_is_content_sensitive() {
        let a = Scenario::from_json(TWO_AGENT).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.lambda[0] = 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_labels_rejected() {
        let mut s = Scenario::from_json(TWO_AGENT).unwrap();
        s.types[0] = 3; // only one selection table
        assert!(matches!(s.to_model(), Err(Error::InvalidModel(_))));

        let mut s = Scenario::from_json(TWO_AGENT).unwrap();
        s.edges.push([1, 5]);
        assert!(matches!(s.to_model(), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn logit_schema_parses() {
        let text = r#"{
            "name": "logit",
            "num_agents": 3,
            "num_alternatives": 2,
            "types": [1, 1, 1],
            "edges": [[1, 2], [1, 3], [2, 3]],
            "lambda": [1.0, 2.0, 0.5],
            "selection": [[[0.3, 0.5], [0.6, 0.4]]],
            "choice_rule": {
                "kind": "logit",
                "alpha": [[[0.0, 0.5], [0.0, -0.3]]],
                "beta": [[[0.4, 1.2], [-0.2, 0.8]]]
            }
        }"#;
        let model = Scenario::from_json(text).unwrap().to_model().unwrap();
        assert_eq!(model.num_agents(), 3);
        assert!(matches!(model.rule(), ChoiceRule::Logit(_)));
    }
}
