//! Two-branch Blahut-Arimoto solver over per-parameter update signs.
//!
//! Every parameter is solved independently. Its candidate updates are the
//! positive and negative accumulations of the per-domain gradients; the
//! solver returns the probability of taking the positive one. Scores for a
//! branch value `v` in domain `e` are
//!
//! ```text
//! score(v, e) = -(beta * (G_e - v)^2 + penalty_grad * v) / gamma
//! ```
//!
//! and each round reweights the marginal by `exp(score)` per domain,
//! normalizes per domain, then averages the per-domain conditionals back into
//! the marginal.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::ParamVector;
use crate::rng::Rng;

/// Which pair of values the two branches take for each parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// `g_plus` / `g_minus`: sums of the positive / negative per-domain parts.
    #[default]
    Accumulations,
    /// `+grad` / `-grad` of the empirical risk (sign flip, magnitude kept).
    SignedErm,
}

/// Scaled per-domain gradients and their sign accumulations.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainGradientSet {
    /// `G_e = grad L_e / |E|`.
    pub per_domain: Vec<ParamVector>,
    pub g_plus: ParamVector,
    pub g_minus: ParamVector,
    pub penalty_grad: ParamVector,
    pub branch_plus: ParamVector,
    pub branch_minus: ParamVector,
}

/// Scales each raw domain gradient by `1/|E|` and accumulates positive and
/// negative entries separately. Branches default to the accumulations.
pub fn build_gradient_set(
    per_domain_raw: &[ParamVector],
    penalty_grad: ParamVector,
) -> Result<DomainGradientSet> {
    let first = per_domain_raw
        .first()
        .ok_or(Error::InsufficientDomains { needed: 1, got: 0 })?;
    let len = first.len();
    check_len(len, penalty_grad.len())?;
    let scale = 1.0 / per_domain_raw.len() as f64;
    let mut g_plus = ParamVector::zeros(len);
    let mut g_minus = ParamVector::zeros(len);
    let mut per_domain = Vec::with_capacity(per_domain_raw.len());
    for raw in per_domain_raw {
        check_len(len, raw.len())?;
        let g = raw.scaled(scale);
        for p in 0..len {
            if g[p] > 0.0 {
                g_plus[p] += g[p];
            } else if g[p] < 0.0 {
                g_minus[p] += g[p];
            }
        }
        per_domain.push(g);
    }
    Ok(DomainGradientSet {
        per_domain,
        branch_plus: g_plus.clone(),
        branch_minus: g_minus.clone(),
        g_plus,
        g_minus,
        penalty_grad,
    })
}

impl DomainGradientSet {
    pub fn param_count(&self) -> usize {
        self.g_plus.len()
    }

    pub fn domain_count(&self) -> usize {
        self.per_domain.len()
    }

    /// Full empirical-risk gradient `sum_e G_e = g_plus + g_minus`.
    pub fn erm_gradient(&self) -> ParamVector {
        self.g_plus
            .iter()
            .zip(self.g_minus.iter())
            .map(|(a, b)| a + b)
            .collect::<Vec<_>>()
            .into()
    }

    /// Re-derives the branch values for `mode`.
    pub fn with_branch_mode(mut self, mode: BranchMode) -> Self {
        match mode {
            BranchMode::Accumulations => {
                self.branch_plus = self.g_plus.clone();
                self.branch_minus = self.g_minus.clone();
            }
            BranchMode::SignedErm => {
                let grad = self.erm_gradient();
                self.branch_minus = grad.scaled(-1.0);
                self.branch_plus = grad;
            }
        }
        self
    }

    /// Mean of `|beta * (G_e - v)^2 + penalty_grad * v|` over all parameters,
    /// both branches and all domains. This is the magnitude the adaptive
    /// `gamma` tracks.
    pub fn mean_score_magnitude(&self, beta: f64) -> f64 {
        let mut total = 0.0;
        for g in &self.per_domain {
            for p in 0..self.param_count() {
                for v in [self.branch_plus[p], self.branch_minus[p]] {
                    total += (beta * (g[p] - v).powi(2) + self.penalty_grad[p] * v).abs();
                }
            }
        }
        total / (2 * self.param_count() * self.domain_count()).max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaParams {
    /// Distortion multiplier.
    pub beta: f64,
    /// Information-regularization weight.
    pub gamma: f64,
    pub iterations: usize,
}

impl BaParams {
    pub const DEFAULT_ITERATIONS: usize = 25;

    pub fn new(beta: f64, gamma: f64) -> Self {
        Self {
            beta,
            gamma,
            iterations: Self::DEFAULT_ITERATIONS,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::param("gamma", format!("must be finite and > 0, got {}", self.gamma)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::param("beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        if self.iterations == 0 {
            return Err(Error::param("iterations", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-parameter probability of the positive branch, plus the per-domain
/// conditionals from the last round.
#[derive(Debug, Clone, PartialEq)]
pub struct SignDistribution {
    pub prob_plus: Vec<f64>,
    pub conditionals: Vec<Vec<f64>>,
}

impl SignDistribution {
    /// `max_{e,p} |prob_plus_e[p] - prob_plus[p]|`.
    pub fn max_disagreement(&self) -> f64 {
        self.conditionals
            .iter()
            .flat_map(|c| c.iter().zip(&self.prob_plus).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Expected update `prob_plus * plus + (1 - prob_plus) * minus`.
    pub fn expected_update(&self, set: &DomainGradientSet) -> ParamVector {
        (0..set.param_count())
            .map(|p| {
                let q = self.prob_plus[p];
                q * set.branch_plus[p] + (1.0 - q) * set.branch_minus[p]
            })
            .collect::<Vec<_>>()
            .into()
    }
}

/// Runs the solver and returns the final marginal.
pub fn ba_solve(set: &DomainGradientSet, params: BaParams) -> Result<SignDistribution> {
    ba_solve_observed(set, params, |_, _| {})
}

/// [`ba_solve`] that hands the distribution to `observe` after every round
/// (rounds are numbered from 1).
pub fn ba_solve_observed<F>(
    set: &DomainGradientSet,
    params: BaParams,
    mut observe: F,
) -> Result<SignDistribution>
where
    F: FnMut(usize, &SignDistribution),
{
    params.validate()?;
    let n = set.param_count();
    let domains = set.domain_count();
    check_len(n, set.penalty_grad.len())?;

    // Log-scores per domain and branch are fixed across rounds.
    let inv_gamma = 1.0 / params.gamma;
    let score = |g: f64, v: f64, pen: f64| -(params.beta * (g - v) * (g - v) + pen * v) * inv_gamma;
    let scores: Vec<Vec<(f64, f64)>> = set
        .per_domain
        .iter()
        .map(|g| {
            (0..n)
                .map(|p| {
                    let pen = set.penalty_grad[p];
                    (score(g[p], set.branch_plus[p], pen), score(g[p], set.branch_minus[p], pen))
                })
                .collect()
        })
        .collect();

    let mut dist = SignDistribution {
        prob_plus: vec![0.5; n],
        conditionals: vec![vec![0.5; n]; domains],
    };
    for round in 1..=params.iterations {
        for (cond, sc) in dist.conditionals.iter_mut().zip(&scores) {
            for p in 0..n {
                cond[p] = reweight(dist.prob_plus[p], sc[p].0, sc[p].1);
            }
        }
        for p in 0..n {
            let sum: f64 = dist.conditionals.iter().map(|c| c[p]).sum();
            dist.prob_plus[p] = (sum / domains as f64).clamp(0.0, 1.0);
        }
        if dist.prob_plus.iter().any(|q| !q.is_finite()) {
            return Err(Error::Numeric(format!("non-finite probability in round {round}")));
        }
        observe(round, &dist);
    }
    Ok(dist)
}

/// `q e^a / (q e^a + (1-q) e^b)` with the larger log-weight subtracted
/// before exponentiating.
fn reweight(q: f64, score_plus: f64, score_minus: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    if q >= 1.0 {
        return 1.0;
    }
    let a = q.ln() + score_plus;
    let b = (1.0 - q).ln() + score_minus;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    ea / (ea + eb)
}

/// Samples one update: parameter `p` takes `branch_plus[p]` with probability
/// `prob_plus[p]`, else `branch_minus[p]`. Draws are consumed in parameter
/// order.
pub fn sample_update(set: &DomainGradientSet, dist: &SignDistribution, rng: &mut Rng) -> Result<ParamVector> {
    check_len(set.param_count(), dist.prob_plus.len())?;
    Ok((0..set.param_count())
        .map(|p| {
            if rng.bernoulli(dist.prob_plus[p]) {
                set.branch_plus[p]
            } else {
                set.branch_minus[p]
            }
        })
        .collect::<Vec<_>>()
        .into())
}
