//! Information-regularized Blahut-Arimoto over an explicit candidate set.
//!
//! Given candidate updates `G_1..G_K` with penalties `Pen(G_k)` and per-domain
//! gradients, the solver minimizes
//!
//! ```text
//! E[Pen] + gamma * I(G; E) + beta * E[d(G, E)],   d(G, e) = |G - grad_e|_2
//! ```
//!
//! over the conditionals `p(G_k | e)` with `p(e) = 1/|E|`. Sweeping `beta`
//! traces the penalty-distortion curve.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::ParamVector;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBAInstance {
    pub candidates: Vec<ParamVector>,
    pub penalty: Vec<f64>,
    pub domain_grads: Vec<ParamVector>,
    pub beta: f64,
    pub gamma: f64,
}

impl DiscreteBAInstance {
    pub fn validate(&self) -> Result<()> {
        let k = self.candidates.len();
        if k < 2 {
            return Err(Error::param("candidates", format!("need >= 2, got {k}")));
        }
        if self.domain_grads.is_empty() {
            return Err(Error::InsufficientDomains { needed: 1, got: 0 });
        }
        check_len(k, self.penalty.len())?;
        let dim = self.candidates[0].len();
        for v in self.candidates.iter().chain(&self.domain_grads) {
            check_len(dim, v.len())?;
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::param("gamma", format!("must be finite and > 0, got {}", self.gamma)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::param("beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        if self.penalty.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("penalty", "entries must be finite"));
        }
        Ok(())
    }

    pub fn candidate_count(&self) -> usize {
        self.candidates.len()
    }

    pub fn domain_count(&self) -> usize {
        self.domain_grads.len()
    }

    /// `d[e][k] = |G_k - grad_e|_2`.
    pub fn distortions(&self) -> Vec<Vec<f64>> {
        self.domain_grads
            .iter()
            .map(|g| {
                self.candidates
                    .iter()
                    .map(|c| c.iter().zip(g.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .collect()
            })
            .collect()
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..self.clone() }
    }

    /// Random instance: candidates and domain gradients standard normal,
    /// penalties uniform in `[0, 1)`.
    pub fn random(rng: &mut Rng, candidates: usize, domains: usize, dim: usize, beta: f64, gamma: f64) -> Self {
        let vector = |rng: &mut Rng| ParamVector::from_vec((0..dim).map(|_| rng.normal()).collect());
        let cands = (0..candidates).map(|_| vector(rng)).collect();
        let grads = (0..domains).map(|_| vector(rng)).collect();
        let penalty = (0..candidates).map(|_| rng.uniform()).collect();
        Self {
            candidates: cands,
            penalty,
            domain_grads: grads,
            beta,
            gamma,
        }
    }

    /// Expected penalty, distortion, mutual information and the full
    /// Lagrangian `E[Pen] + gamma I + beta E[d]` of a set of conditionals.
    pub fn score(&self, conditionals: &[Vec<f64>]) -> Objective {
        let e = conditionals.len() as f64;
        let k = self.candidate_count();
        let marginal: Vec<f64> = (0..k).map(|j| conditionals.iter().map(|c| c[j]).sum::<f64>() / e).collect();
        let dist = self.distortions();
        let mut pen = 0.0;
        let mut distortion = 0.0;
        for (c, d) in conditionals.iter().zip(&dist) {
            for j in 0..k {
                pen += c[j] * self.penalty[j] / e;
                distortion += c[j] * d[j] / e;
            }
        }
        let mi = mutual_information(conditionals, &marginal);
        Objective {
            expected_penalty: pen,
            expected_distortion: distortion,
            mutual_information: mi,
            regularized: pen + self.gamma * mi,
            lagrangian: pen + self.gamma * mi + self.beta * distortion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub expected_penalty: f64,
    pub expected_distortion: f64,
    pub mutual_information: f64,
    /// `E[Pen] + gamma I`.
    pub regularized: f64,
    /// `E[Pen] + gamma I + beta E[d]`.
    pub lagrangian: f64,
}

/// `sum_e (1/|E|) sum_k p(k|e) ln(p(k|e) / p(k))`, with `0 ln 0 = 0`.
pub fn mutual_information(conditionals: &[Vec<f64>], marginal: &[f64]) -> f64 {
    let e = conditionals.len() as f64;
    conditionals
        .iter()
        .map(|c| {
            c.iter()
                .zip(marginal)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, q)| p * (p / q).ln())
                .sum::<f64>()
                / e
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BAResult {
    pub marginal: Vec<f64>,
    /// `conditionals[e][k] = p(G_k | E = e)`.
    pub conditionals: Vec<Vec<f64>>,
    pub expected_penalty: f64,
    pub expected_distortion: f64,
    /// Nats.
    pub mutual_information: f64,
}

/// Blahut-Arimoto iterations from uniform conditionals.
pub fn discrete_ba_solve(instance: &DiscreteBAInstance, iterations: usize) -> Result<BAResult> {
    discrete_ba_solve_observed(instance, iterations, |_, _| {})
}

/// [`discrete_ba_solve`] that reports `(marginal, conditionals)` after every
/// iteration.
pub fn discrete_ba_solve_observed<F>(instance: &DiscreteBAInstance, iterations: usize, mut observe: F) -> Result<BAResult>
where
    F: FnMut(&[f64], &[Vec<f64>]),
{
    instance.validate()?;
    if iterations == 0 {
        return Err(Error::param("iterations", "must be >= 1"));
    }
    let k = instance.candidate_count();
    let e = instance.domain_count();
    let dist = instance.distortions();
    // energy[e][k] = (Pen_k + beta d(k, e)) / gamma
    let energy: Vec<Vec<f64>> = dist
        .iter()
        .map(|d| (0..k).map(|j| (instance.penalty[j] + instance.beta * d[j]) / instance.gamma).collect())
        .collect();

    let mut marginal = vec![1.0 / k as f64; k];
    let mut conditionals = vec![vec![1.0 / k as f64; k]; e];
    for _ in 0..iterations {
        for (cond, en) in conditionals.iter_mut().zip(&energy) {
            let logw: Vec<f64> = (0..k)
                .map(|j| if marginal[j] > 0.0 { marginal[j].ln() - en[j] } else { f64::NEG_INFINITY })
                .collect();
            let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..k {
                cond[j] = w[j] / z;
            }
        }
        for j in 0..k {
            marginal[j] = conditionals.iter().map(|c| c[j]).sum::<f64>() / e as f64;
        }
        if marginal.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numeric("non-finite marginal".into()));
        }
        observe(&marginal, &conditionals);
    }
    let obj = instance.score(&conditionals);
    Ok(BAResult {
        marginal,
        conditionals,
        expected_penalty: obj.expected_penalty,
        expected_distortion: obj.expected_distortion,
        mutual_information: obj.mutual_information,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub beta: f64,
    pub expected_distortion: f64,
    pub expected_penalty: f64,
    pub mutual_information: f64,
}

/// One solve per `beta` (ascending, all `>= 0`), emitted in `beta` order.
/// The instance's own `beta` is ignored.
pub fn rd_curve(instance: &DiscreteBAInstance, betas: &[f64], iterations: usize) -> Result<Vec<RdPoint>> {
    if betas.iter().any(|b| !(*b >= 0.0)) {
        return Err(Error::param("betas", "all values must be >= 0"));
    }
    if betas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::param("betas", "must be sorted ascending"));
    }
    betas
        .iter()
        .map(|&beta| {
            let r = discrete_ba_solve(&instance.with_beta(beta), iterations)?;
            Ok(RdPoint {
                beta,
                expected_distortion: r.expected_distortion,
                expected_penalty: r.expected_penalty,
                mutual_information: r.mutual_information,
            })
        })
        .collect()
}

/// Penalty of the distortion-minimal choice: each domain takes its closest
/// candidate (lowest index on ties).
pub fn zero_distortion_penalty(instance: &DiscreteBAInstance) -> f64 {
    let dist = instance.distortions();
    let total: f64 = dist
        .iter()
        .map(|d| {
            let best = (0..d.len()).fold(0, |b, j| if d[j] < d[b] { j } else { b });
            instance.penalty[best]
        })
        .sum();
    total / dist.len() as f64
}

/// Points sorted by distortion as `(D, R)` pairs.
fn sorted_by_distortion(points: &[RdPoint]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.expected_distortion, p.expected_penalty)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts
}

/// Largest increase of penalty between consecutive points ordered by
/// distortion. Non-positive means the curve is non-increasing.
pub fn max_monotonicity_violation(points: &[RdPoint]) -> f64 {
    sorted_by_distortion(points)
        .windows(2)
        .map(|w| w[1].1 - w[0].1)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest chord gap over consecutive triples ordered by distortion: the
/// chord value above the middle point minus the middle penalty. Negative
/// values measure how far the curve bends above its chords. Triples with a
/// zero-width span are skipped.
pub fn min_convexity_gap(points: &[RdPoint]) -> f64 {
    sorted_by_distortion(points)
        .windows(3)
        .filter(|w| w[2].0 - w[0].0 > 0.0)
        .map(|w| {
            let (d0, r0) = w[0];
            let (d1, r1) = w[1];
            let (d2, r2) = w[2];
            let chord = ((d2 - d1) * r0 + (d1 - d0) * r2) / (d2 - d0);
            chord - r1
        })
        .fold(f64::INFINITY, f64::min)
}

/// Outcome of a shape check that needs a minimum number of points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveCheck {
    Pass,
    Fail,
    NotApplicable,
}

pub fn check_monotone(points: &[RdPoint], slack: f64) -> CurveCheck {
    if points.len() < 2 {
        CurveCheck::NotApplicable
    } else if max_monotonicity_violation(points) <= slack {
        CurveCheck::Pass
    } else {
        CurveCheck::Fail
    }
}

pub fn check_convex(points: &[RdPoint], slack: f64) -> CurveCheck {
    if points.len() < 3 {
        CurveCheck::NotApplicable
    } else if min_convexity_gap(points) >= -slack {
        CurveCheck::Pass
    } else {
        CurveCheck::Fail
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn symmetric_instance_is_uniform_with_zero_information() {
        // Two candidates equidistant from both domain gradients, equal penalties.
        let inst = DiscreteBAInstance {
            candidates: vec![pv(&[1.0, 0.0]), pv(&[-1.0, 0.0])],
            penalty: vec![0.3, 0.3],
            domain_grads: vec![pv(&[0.0, 1.0]), pv(&[0.0, -1.0])],
            beta: 2.0,
            gamma: 0.5,
        };
        let r = discrete_ba_solve(&inst, 50).unwrap();
        assert_eq!(r.marginal, vec![0.5, 0.5]);
        assert_eq!(r.mutual_information, 0.0);
    }

    #[test]
    fn zero_beta_concentrates_on_min_penalty() {
        let inst = DiscreteBAInstance {
            candidates: vec![pv(&[0.0]), pv(&[1.0])],
            penalty: vec![0.0, 10.0],
            domain_grads: vec![pv(&[1.0])],
            beta: 0.0,
            gamma: 0.1,
        };
        let r = discrete_ba_solve(&inst, 100).unwrap();
        assert!(r.marginal[0] > 1.0 - 1e-10);
    }

    #[test]
    fn invariants_hold_every_iteration() {
        let mut rng = Rng::new(17);
        for _ in 0..10 {
            let inst = DiscreteBAInstance::random(&mut rng, 4, 3, 2, 0.7, 0.3);
            let mut ok = true;
            discrete_ba_solve_observed(&inst, 60, |m, c| {
                ok &= (m.iter().sum::<f64>() - 1.0).abs() <= 1e-10;
                for row in c {
                    ok &= (row.iter().sum::<f64>() - 1.0).abs() <= 1e-10 && row.iter().all(|&p| p >= 0.0);
                }
                for j in 0..m.len() {
                    let mean = c.iter().map(|r| r[j]).sum::<f64>() / c.len() as f64;
                    ok &= (mean - m[j]).abs() <= 1e-10;
                }
            })
            .unwrap();
            assert!(ok);
            let r = discrete_ba_solve(&inst, 60).unwrap();
            assert!(r.mutual_information >= 0.0);
            assert!(r.mutual_information <= (3f64).ln() + 1e-10);
        }
    }

    #[test]
    fn lagrangian_decreases_monotonically() {
        let mut rng = Rng::new(4);
        for _ in 0..10 {
            let inst = DiscreteBAInstance::random(&mut rng, 3, 2, 3, 1.3, 0.4);
            let mut values = Vec::new();
            discrete_ba_solve_observed(&inst, 40, |_, c| values.push(inst.score(c).lagrangian)).unwrap();
            for w in values.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn extreme_betas() {
        let mut rng = Rng::new(99);
        let base = DiscreteBAInstance::random(&mut rng, 3, 2, 2, 0.0, 1.0);
        let dist = base.distortions();
        let min_d = dist.iter().map(|d| d.iter().copied().fold(f64::INFINITY, f64::min)).sum::<f64>() / 2.0;
        let big = rd_curve(&base, &[1e6], 200).unwrap()[0];
        assert!((big.expected_distortion - min_d).abs() < 1e-6);

        let small_gamma = DiscreteBAInstance { gamma: 1e-3, ..base.clone() };
        let zero = rd_curve(&small_gamma, &[0.0], 200).unwrap()[0];
        let min_pen = base.penalty.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((zero.expected_penalty - min_pen).abs() < 1e-6);
    }

    #[test]
    fn curve_checks() {
        let mut rng = Rng::new(5);
        let inst = DiscreteBAInstance::random(&mut rng, 4, 3, 2, 0.0, 1e-3);
        let betas = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4, 12.8];
        let pts = rd_curve(&inst, &betas, 300).unwrap();
        assert_eq!(pts.len(), 10);
        assert_eq!(check_monotone(&pts, 1e-8), CurveCheck::Pass);
        assert_eq!(check_convex(&pts, 1e-6), CurveCheck::Pass);
        assert_eq!(check_monotone(&pts[..1], 1e-8), CurveCheck::NotApplicable);
        let r0 = zero_distortion_penalty(&inst);
        assert!(pts.iter().all(|p| p.expected_penalty <= r0 + 1e-8));
    }

    #[test]
    fn shape_checks_detect_violations() {
        let p = |d, r| RdPoint {
            beta: 0.0,
            expected_distortion: d,
            expected_penalty: r,
            mutual_information: 0.0,
        };
        assert_eq!(check_monotone(&[p(0.0, 1.0), p(1.0, 2.0)], 1e-8), CurveCheck::Fail);
        assert_eq!(check_convex(&[p(0.0, 1.0), p(1.0, 0.9), p(2.0, 0.0)], 1e-6), CurveCheck::Fail);
        assert_eq!(check_convex(&[p(0.0, 1.0), p(1.0, 0.2), p(2.0, 0.0)], 1e-6), CurveCheck::Pass);
    }

    #[test]
    fn rd_curve_validates_betas() {
        let mut rng = Rng::new(1);
        let inst = DiscreteBAInstance::random(&mut rng, 2, 1, 1, 0.0, 1.0);
        assert!(rd_curve(&inst, &[1.0, 0.5], 10).is_err());
        assert!(rd_curve(&inst, &[-1.0], 10).is_err());
    }

    #[test]
    fn instance_validation() {
        let mut rng = Rng::new(1);
        let mut inst = DiscreteBAInstance::random(&mut rng, 2, 1, 2, 0.0, 1.0);
        inst.gamma = 0.0;
        assert!(discrete_ba_solve(&inst, 10).is_err());
        inst.gamma = 1.0;
        inst.candidates.pop();
        inst.penalty.pop();
        assert!(discrete_ba_solve(&inst, 10).is_err());
    }
}
