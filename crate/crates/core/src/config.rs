//! Choice configurations and their canonical integer indexing.
//!
//! A configuration is the vector of all agents' current choices and serves
//! as the state of the continuous-time Markov chain. Configurations map to
//! integers lexicographically with agent 0 most significant, so configuration
//! `(y_0, ..., y_{A-1})` has index `sum_a y_a * (Y+1)^(A-1-a)`.

use crate::error::{Error, Result};

/// A profile of choices, one per agent, each in `0..num_alternatives`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChoiceConfiguration {
    choices: Vec<usize>,
    num_alternatives: usize,
}

impl ChoiceConfiguration {
    pub fn new(choices: Vec<usize>, num_alternatives: usize) -> Result<Self> {
        if choices.is_empty() {
            return Err(Error::InvalidModel("empty configuration".into()));
        }
        if let Some(&bad) = choices.iter().find(|&&c| c >= num_alternatives) {
            return Err(Error::InvalidModel(format!(
                "choice {bad} out of range 0..{num_alternatives}"
            )));
        }
        Ok(Self {
            choices,
            num_alternatives,
        })
    }

    /// The all-zeros configuration.
    pub fn zeros(num_agents: usize, num_alternatives: usize) -> Self {
        Self {
            choices: vec![0; num_agents],
            num_alternatives,
        }
    }

    /// Decode a canonical index back into a configuration.
    pub fn from_index(mut index: usize, num_agents: usize, num_alternatives: usize) -> Self {
        let mut choices = vec![0; num_agents];
        for slot in choices.iter_mut().rev() {
            *slot = index % num_alternatives;
            index /= num_alternatives;
        }
        debug_assert_eq!(index, 0, "index out of range for configuration space");
        Self {
            choices,
            num_alternatives,
        }
    }

    /// Canonical lexicographic index, agent 0 most significant.
    pub fn index(&self) -> usize {
        self.choices
            .iter()
            .fold(0, |acc, &c| acc * self.num_alternatives + c)
    }

    pub fn num_agents(&self) -> usize {
        self.choices.len()
    }

    pub fn num_alternatives(&self) -> usize {
        self.num_alternatives
    }

    pub fn choice_of(&self, agent: usize) -> usize {
        self.choices[agent]
    }

    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    /// The configuration with agent `agent`'s component replaced by `v`.
    pub fn with_choice(&self, agent: usize, v: usize) -> Self {
        let mut next = self.clone();
        next.choices[agent] = v;
        next
    }

    pub fn set_choice(&mut self, agent: usize, v: usize) {
        debug_assert!(v < self.num_alternatives);
        self.choices[agent] = v;
    }

    /// Digit string such as "0120", one digit per agent (alternatives <= 10)
    /// or dash-separated otherwise.
    pub fn digits(&self) -> String {
        if self.num_alternatives <= 10 {
            self.choices.iter().map(|c| c.to_string()).collect()
        } else {
            self.choices
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("-")
        }
    }

    /// Number of coordinates in which `self` and `other` differ.
    pub fn hamming(&self, other: &Self) -> usize {
        self.choices
            .iter()
            .zip(&other.choices)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Total number of configurations, `(Y+1)^A`, checked against a cap.
pub fn state_count(num_agents: usize, num_alternatives: usize, cap: usize) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..num_agents {
        n = n
            .checked_mul(num_alternatives)
            .ok_or(Error::StateCapExceeded {
                states: usize::MAX,
                cap,
            })?;
        if n > cap {
            return Err(Error::StateCapExceeded { states: n, cap });
        }
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn index_is_lexicographic_msb_first() {
        // Agent 0 most significant: (1,0) -> 2 for Y=1.
        let c = ChoiceConfiguration::new(vec![1, 0], 2).unwrap();
        assert_eq!(c.index(), 2);
        let c = ChoiceConfiguration::new(vec![0, 1], 2).unwrap();
        assert_eq!(c.index(), 1);
        let c = ChoiceConfiguration::new(vec![2, 1, 0], 3).unwrap();
        assert_eq!(c.index(), 2 * 9 + 3);
    }

    #[test]
    fn rejects_out_of_range_choice() {
        assert!(ChoiceConfiguration::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn state_count_cap() {
        assert_eq!(state_count(4, 3, 65_536).unwrap(), 81);
        assert!(matches!(
            state_count(9, 4, 65_536),
            Err(Error::StateCapExceeded { .. })
        ));
    }

    proptest! {
        #[test]
        fn index_roundtrip(agents in 1usize..8, alts in 2usize..4, seed in 0usize..10_000) {
            let n = alts.pow(agents as u32);
            let idx = seed % n;
            let c = ChoiceConfiguration::from_index(idx, agents, alts);
            prop_assert_eq!(c.index(), idx);
            prop_assert_eq!(c.num_agents(), agents);
        }
    }
}
