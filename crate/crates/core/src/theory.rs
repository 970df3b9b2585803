//! Empirical checks of the biased-SGD convergence bound and the
//! penalty/in-distribution tradeoff as the distortion weight varies.

use serde::{Deserialize, Serialize};

use crate::datagen::SyntheticTask;
use crate::error::{Error, Result};
use crate::optimizer::{train, TrainConfig};
use crate::rng::Rng;

/// Test functions with hand-derived constants on the ball of radius `rho`.
///
/// Iterates stay in the ball: with `eta <= 1` a step maps a point of norm
/// at most `rho` to one of norm at most `(1 - eta) rho + eta (c + s + D)`,
/// where `c` bounds the non-quadratic part of the gradient, so `rho >= c +
/// s + D` keeps it there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prop1Objective {
    /// `0.5 |theta|^2`: `mu = 1`, `L = rho`, `Delta = rho^2 / 2`.
    Quadratic,
    /// `0.5 |theta|^2 + a sum_i (1 + cos(w theta_i + phi_i))` with `a = 0.5`,
    /// `w = 2` and seeded phases: Hessian eigenvalues lie in
    /// `[1 - a w^2, 1 + a w^2]` so `mu = 1 + a w^2`; `|grad| <= rho + a w sqrt(n)`;
    /// the value lies in `[0, rho^2 / 2 + 2 a n]`.
    SinusoidQuadratic,
}

const SIN_AMPLITUDE: f64 = 0.5;
const SIN_FREQUENCY: f64 = 2.0;

impl Prop1Objective {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "" => Err(Error::Config("objective: missing objective name".into())),
            "quadratic" => Ok(Self::Quadratic),
            "sinusoid_quadratic" => Ok(Self::SinusoidQuadratic),
            other => Err(Error::Config(format!(
                "objective: no certified constants for `{other}` (known: quadratic, sinusoid_quadratic)"
            ))),
        }
    }

    /// Bound on the gradient of the non-quadratic part.
    fn extra_gradient_bound(self, dim: usize) -> f64 {
        match self {
            Self::Quadratic => 0.0,
            Self::SinusoidQuadratic => SIN_AMPLITUDE * SIN_FREQUENCY * (dim as f64).sqrt(),
        }
    }

    fn value_and_grad(self, theta: &[f64], phases: &[f64]) -> (f64, Vec<f64>) {
        let quad = 0.5 * theta.iter().map(|v| v * v).sum::<f64>();
        match self {
            Self::Quadratic => (quad, theta.to_vec()),
            Self::SinusoidQuadratic => {
                let (a, w) = (SIN_AMPLITUDE, SIN_FREQUENCY);
                let value = quad + theta.iter().zip(phases).map(|(t, p)| a * (1.0 + (w * t + p).cos())).sum::<f64>();
                let grad = theta.iter().zip(phases).map(|(t, p)| t - a * w * (w * t + p).sin()).collect();
                (value, grad)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prop1Config {
    pub objective: String,
    pub dim: usize,
    pub bias_d: f64,
    pub steps: usize,
    pub noise_scale: f64,
    pub seeds: usize,
    pub seed: u64,
    /// Ball radius; `None` uses the smallest invariant radius (at least 1).
    pub radius: Option<f64>,
}

impl Default for Prop1Config {
    fn default() -> Self {
        Self {
            objective: String::new(),
            dim: 10,
            bias_d: 0.0,
            steps: 1000,
            noise_scale: 1.0,
            seeds: 10,
            seed: 0,
            radius: None,
        }
    }
}

/// Certified constants of one configured run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub radius: f64,
    pub delta: f64,
    pub mu: f64,
    pub lipschitz: f64,
    pub second_moment: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Result {
    /// `(1/T) sum_t |grad R(theta_t)|^2`, averaged over seeds.
    pub avg_sq_grad_norm: f64,
    /// `2 (sqrt(Delta mu V) + L D) / sqrt(T)`.
    pub bound_value: f64,
    pub bound_satisfied: bool,
    pub constants: Constants,
    /// Per-seed `(1/T) sum_t |grad R|^2`.
    pub per_seed: Vec<f64>,
    /// Gradient norms along the first seed's trajectory.
    pub trajectory: Vec<f64>,
    /// Bias norms along the first seed's trajectory.
    pub bias_norms: Vec<f64>,
}

impl Prop1Config {
    pub fn validate(&self) -> Result<Prop1Objective> {
        let objective = Prop1Objective::parse(&self.objective)?;
        let bad = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if self.dim == 0 {
            return bad("dim", "must be >= 1".into());
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1".into());
        }
        if self.seeds == 0 {
            return bad("seeds", "must be >= 1".into());
        }
        if !(self.bias_d >= 0.0 && self.bias_d.is_finite()) {
            return bad("bias_d", format!("must be >= 0, got {}", self.bias_d));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale", format!("must be >= 0, got {}", self.noise_scale));
        }
        Ok(objective)
    }

    pub fn constants(&self) -> Result<Constants> {
        let objective = self.validate()?;
        let n = self.dim as f64;
        let extra = objective.extra_gradient_bound(self.dim);
        let needed = extra + self.noise_scale + self.bias_d;
        let radius = match self.radius {
            Some(r) if r < needed || !r.is_finite() => {
                return Err(Error::Config(format!("radius: must be >= {needed} for the ball to be invariant, got {r}")))
            }
            Some(r) => r,
            None => needed.max(1.0),
        };
        let (delta, mu) = match objective {
            Prop1Objective::Quadratic => (0.5 * radius * radius, 1.0),
            Prop1Objective::SinusoidQuadratic => (
                0.5 * radius * radius + 2.0 * SIN_AMPLITUDE * n,
                1.0 + SIN_AMPLITUDE * SIN_FREQUENCY * SIN_FREQUENCY,
            ),
        };
        let lipschitz = radius + extra;
        let second_moment = (lipschitz + self.bias_d).powi(2) + self.noise_scale.powi(2);
        let eta = 2.0 * (delta / (mu * self.steps as f64 * second_moment)).sqrt();
        if eta > 1.0 {
            return Err(Error::Config(format!("steps: too few for a step size <= 1 (eta = {eta})")));
        }
        Ok(Constants { radius, delta, mu, lipschitz, second_moment, eta })
    }
}

struct Trajectory {
    avg_sq: f64,
    grad_norms: Vec<f64>,
    bias_norms: Vec<f64>,
}

fn run_one(objective: Prop1Objective, config: &Prop1Config, c: &Constants, rng: &mut Rng) -> Trajectory {
    let n = config.dim;
    let phases: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.0, 2.0 * std::f64::consts::PI)).collect();
    let mut theta: Vec<f64> = rng.unit_vector(n).into_iter().map(|v| v * c.radius).collect();
    let mut grad_norms = Vec::with_capacity(config.steps);
    let mut bias_norms = Vec::with_capacity(config.steps);
    let mut total = 0.0;
    for t in 1..=config.steps {
        let (_, grad) = objective.value_and_grad(&theta, &phases);
        let sq: f64 = grad.iter().map(|g| g * g).sum();
        total += sq;
        grad_norms.push(sq.sqrt());
        let noise = rng.unit_vector(n);
        let bias_norm = config.bias_d / (t as f64).sqrt();
        let bias = rng.unit_vector(n);
        bias_norms.push(bias.iter().map(|b| (b * bias_norm).powi(2)).sum::<f64>().sqrt());
        for i in 0..n {
            let g = grad[i] + config.noise_scale * noise[i] + bias_norm * bias[i];
            theta[i] -= c.eta * g;
        }
    }
    Trajectory {
        avg_sq: total / config.steps as f64,
        grad_norms,
        bias_norms,
    }
}

/// Runs `seeds` independent biased-SGD trajectories at the step size that
/// minimizes the bound and compares the averaged squared gradient norm with
/// it. Seed `i` uses stream `i` of `config.seed`.
pub fn run_prop1(config: &Prop1Config) -> Result<Prop1Result> {
    let objective = config.validate()?;
    let c = config.constants()?;
    let root = Rng::new(config.seed);
    let runs: Vec<Trajectory> = (0..config.seeds)
        .map(|i| run_one(objective, config, &c, &mut root.derive(i as u64)))
        .collect();
    let per_seed: Vec<f64> = runs.iter().map(|r| r.avg_sq).collect();
    let avg = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    if !avg.is_finite() {
        return Err(Error::Numeric(format!("non-finite average squared gradient norm {avg}")));
    }
    let bound = 2.0 * ((c.delta * c.mu * c.second_moment).sqrt() + c.lipschitz * config.bias_d) / (config.steps as f64).sqrt();
    let first = runs.into_iter().next().expect("seeds >= 1");
    Ok(Prop1Result {
        avg_sq_grad_norm: avg,
        bound_value: bound,
        bound_satisfied: avg <= bound,
        constants: c,
        per_seed,
        trajectory: first.grad_norms,
        bias_norms: first.bias_norms,
    })
}

/// Final-epoch metrics of one sweep run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta_zero: f64,
    pub in_dist_loss: f64,
    pub in_dist_acc: f64,
    pub penalty: f64,
    pub unseen_loss: f64,
    pub unseen_acc: f64,
}

/// One full training run per `beta_zero`, all sharing `base_config.seed`.
pub fn tradeoff_sweep(task: &SyntheticTask, base_config: &TrainConfig, beta_zeros: &[f64]) -> Result<Vec<SweepRow>> {
    if beta_zeros.is_empty() {
        return Err(Error::Config("beta_zeros: must not be empty".into()));
    }
    if beta_zeros.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(Error::Config("beta_zeros: values must be finite and >= 0".into()));
    }
    if beta_zeros.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("beta_zeros: must be sorted ascending".into()));
    }
    beta_zeros
        .iter()
        .map(|&beta_zero| {
            let config = TrainConfig { beta_zero, ..base_config.clone() };
            let run = train(task, &config)?;
            let m = run.final_metrics();
            Ok(SweepRow {
                beta_zero,
                in_dist_loss: m.in_dist_loss,
                in_dist_acc: m.in_dist_acc,
                penalty: m.penalty,
                unseen_loss: m.unseen_loss,
                unseen_acc: m.unseen_acc,
            })
        })
        .collect()
}
