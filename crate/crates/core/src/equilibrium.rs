//! Markov generator construction, stationary distributions, transition
//! kernels at a sampling horizon, and the two-agent closed forms.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{state_count, ChoiceConfiguration};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Largest representable configuration space for dense generator work.
pub const STATE_CAP: usize = 65_536;

/// Row-sum tolerance for a valid generator.
pub const GENERATOR_TOL: f64 = 1e-12;

/// Residual tolerance for `mu W = 0` after the linear solve.
pub const STATIONARY_TOL: f64 = 1e-9;

/// Dense transition rate matrix over configuration indices. Row = origin,
/// column = destination; only one-coordinate moves carry positive rate and
/// each row sums to zero.
#[derive(Debug, Clone)]
pub struct RateMatrix {
    matrix: DMatrix<f64>,
    num_agents: usize,
    num_alternatives: usize,
}

impl RateMatrix {
    /// Build the generator from the model: for a move of agent `a` to `v`,
    /// the rate is `lambda_a * P_a(v|y)`; the diagonal closes each row.
    pub fn build(model: &ModelSpec) -> Result<Self> {
        let a = model.num_agents();
        let alts = model.num_alternatives();
        let n = state_count(a, alts, STATE_CAP)?;

        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|row_idx| {
                let config = ChoiceConfiguration::from_index(row_idx, a, alts);
                let mut row = vec![0.0; n];
                let mut diag = 0.0;
                for agent in 0..a {
                    let ccp = model
                        .ccp(agent, &config)
                        .expect("enumeration cap checked at model scale");
                    let own = config.choice_of(agent);
                    for (v, &p) in ccp.iter().enumerate() {
                        if v == own {
                            continue;
                        }
                        let rate = model.rate(agent) * p;
                        row[config.with_choice(agent, v).index()] = rate;
                        diag += rate;
                    }
                }
                row[row_idx] = -diag;
                row
            })
            .collect();

        let matrix = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
        Ok(Self {
            matrix,
            num_agents: a,
            num_alternatives: alts,
        })
    }

    /// Wrap an existing generator matrix (tests, recovered generators).
    pub fn from_matrix(
        matrix: DMatrix<f64>,
        num_agents: usize,
        num_alternatives: usize,
    ) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::InvalidModel("generator must be square".into()));
        }
        for i in 0..matrix.nrows() {
            let s: f64 = matrix.row(i).sum();
            if s.abs() > 1e-8 {
                return Err(Error::InvalidModel(format!(
                    "generator row {i} sums to {s}, not 0"
                )));
            }
        }
        Ok(Self {
            matrix,
            num_agents,
            num_alternatives,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn num_states(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn num_alternatives(&self) -> usize {
        self.num_alternatives
    }

    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.matrix[(from, to)]
    }

    /// Largest diagonal magnitude; the uniformization constant.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.num_states())
            .map(|i| -self.matrix[(i, i)])
            .fold(0.0, f64::max)
    }
}

/// Stationary law of the chain: nonnegative, sums to one, `mu W = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantDistribution {
    pub probs: Vec<f64>,
}

impl InvariantDistribution {
    pub fn min(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Infinity norm of `mu W`.
    pub fn residual(&self, w: &RateMatrix) -> f64 {
        let mu = DVector::from_column_slice(&self.probs);
        let r = w.matrix().transpose() * mu;
        r.amax()
    }

    /// Total-variation distance to another distribution on the same space.
    pub fn tv_distance(&self, other: &[f64]) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Solve `mu W = 0`, `sum mu = 1` by a dense factorization of the transposed
/// system with the normalization row appended. Rank diagnostics reject
/// generators whose null space is not one-dimensional.
pub fn invariant_distribution(w: &RateMatrix) -> Result<InvariantDistribution> {
    let n = w.num_states();
    for i in 0..n {
        let s: f64 = w.matrix().row(i).sum();
        if s.abs() > 1e-8 {
            return Err(Error::InvalidModel(format!(
                "generator row {i} sums to {s}"
            )));
        }
    }

    // Nullity check on W^T: a connected chain loses exactly one rank.
    let wt = w.matrix().transpose();
    let scale = w.max_exit_rate().max(1.0);
    let svd = wt.clone().svd(false, false);
    let rank_tol = scale * 1e-10 * n as f64;
    let nullity = svd
        .singular_values
        .iter()
        .filter(|&&s| s < rank_tol)
        .count();
    if nullity != 1 {
        return Err(Error::NonUniqueEquilibrium { nullity });
    }

    // Stack the normalization row under W^T and least-squares solve.
    let mut aug = DMatrix::zeros(n + 1, n);
    aug.view_mut((0, 0), (n, n)).copy_from(&wt);
    for j in 0..n {
        aug[(n, j)] = scale;
    }
    let mut b = DVector::zeros(n + 1);
    b[n] = scale;
    let solved = aug
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::InvalidModel(format!("stationary solve failed: {e}")))?;

    let mut probs: Vec<f64> = solved.iter().cloned().collect();
    // Clean tiny negative round-off and renormalize.
    for p in probs.iter_mut() {
        if *p < 0.0 && *p > -1e-12 {
            *p = 0.0;
        }
    }
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }

    let mu = InvariantDistribution { probs };
    let res = mu.residual(w);
    if res > STATIONARY_TOL * scale.max(1.0) {
        return Err(Error::InvalidModel(format!(
            "stationary residual {res} exceeds tolerance"
        )));
    }
    Ok(mu)
}

/// The two-agent, two-alternative closed form. Arguments are the CCPs
/// `P1(1|0,0)`, `P1(1|0,1)`, `P1(0|1,0)`, `P1(0|1,1)` of the symmetric model;
/// the output is over configurations `(0,0), (0,1), (1,0), (1,1)` with the
/// off-diagonal pair tied by symmetry.
pub fn two_agent_closed_form(
    p100: f64,
    p101: f64,
    p010: f64,
    p011: f64,
) -> Result<InvariantDistribution> {
    for (value, name) in [
        (p100, "P1(1|0,0)"),
        (p101, "P1(1|0,1)"),
        (p010, "P1(0|1,0)"),
        (p011, "P1(0|1,1)"),
    ] {
        if !(0.0 < value && value < 1.0) {
            return Err(Error::ProbabilityOutOfRange {
                value,
                context: name.into(),
            });
        }
    }
    let denom = p100 * p101 + p010 * p011 + 2.0 * p100 * p011;
    if denom <= 0.0 {
        return Err(Error::DegenerateClosedForm);
    }
    let mu00 = p010 * p011 / denom;
    let mu_mixed = p100 * p011 / denom;
    let mu11 = p100 * p101 / denom;
    Ok(InvariantDistribution {
        probs: vec![mu00, mu_mixed, mu_mixed, mu11],
    })
}

/// Long-run coordination probabilities of the two-agent example under the
/// three attention regimes: attend only on matching choices, attend only on
/// differing choices, and the always-attentive standard model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinationProbs {
    pub pr_same: f64,
    pub pr_diff: f64,
    pub pr_std: f64,
}

/// Evaluate the closed-form coordination probabilities from the two-agent
/// rule values `R(1|0,0)`, `R(1|0,1)`, `R(1|1,0)`.
pub fn coordination_analysis(r100: f64, r101: f64, r110: f64) -> CoordinationProbs {
    let r000 = 1.0 - r100; // R(0|0,0)
    let r001 = 1.0 - r101; // R(0|0,1)
    let r010 = 1.0 - r110; // R(0|1,0)
    let coord = |x: f64| 1.0 / (1.0 + 2.0 / x);
    CoordinationProbs {
        pr_same: coord(r100 / r001 + r000 / r110),
        pr_diff: coord(r101 / r000 + r010 / r100),
        pr_std: coord(r101 / r001 + r010 / r110),
    }
}

/// `e^{delta W}` by uniformization: Poisson-weighted powers of the
/// sub-stochastic matrix `I + W/rate`, truncated once the accumulated Poisson
/// mass exceeds `1 - 1e-14`.
pub fn transition_kernel(w: &RateMatrix, delta: f64) -> DMatrix<f64> {
    let n = w.num_states();
    let rate = w.max_exit_rate();
    if rate == 0.0 || delta == 0.0 {
        return DMatrix::identity(n, n);
    }
    let m = DMatrix::identity(n, n) + w.matrix() / rate;

    let a = rate * delta;
    let mut weight = (-a).exp(); // Poisson(a) pmf at k = 0
    let mut cumulative = weight;
    let mut term = DMatrix::identity(n, n); // M^k
    let mut out = term.clone() * weight;
    let mut k = 0usize;
    while cumulative < 1.0 - 1e-14 {
        k += 1;
        term = &term * &m;
        weight *= a / k as f64;
        cumulative += weight;
        out += &term * weight;
        if k > (a as usize + 1) * 20 + 2_000 {
            break; // defensive cap; unreachable at the tail tolerance
        }
    }
    // Distribute the truncated tail uniformly so rows sum to exactly 1.
    let tail = 1.0 - cumulative;
    if tail > 0.0 {
        out += term * tail;
    }
    out
}
