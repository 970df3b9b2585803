//! Training loop: the satisficing step, its schedules, the group sampler and
//! the baseline steps it is compared against.

use serde::{Deserialize, Serialize};

use crate::datagen::{generate, DomainDataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::math::ParamVector;
use crate::model::{DomainBatch, Loss, MlpModel};
use crate::penalties::{fish_penalty_grad, Penalty, PenaltyEvaluation, PenaltyKind};
use crate::rng::Rng;
use crate::sign_ba::{ba_solve, build_gradient_set, sample_update, BaParams, BranchMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Joint,
    Sdg,
    Andmask,
    FishSdg,
}

/// How the penalty gradient enters the sign solver.
///
/// The solver favors branches `v` with a small `penalty_grad * v`, while the
/// applied step is `theta - lr * v`. `Descent` passes `-grad P` so the
/// favored branch lowers the penalty; `Literal` passes `grad P` unchanged.
/// The FISH displacement is already a descent direction and is passed as is
/// under both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySign {
    #[default]
    Descent,
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub penalty_kind: PenaltyKind,
    pub penalty_weight: f64,
    pub learning_rate: f64,
    /// Number of epochs `T`.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// `B_D`.
    pub domains_per_batch: usize,
    /// `B`.
    pub samples_per_domain: usize,
    pub beta_zero: f64,
    pub ba_iterations: usize,
    pub seed: u64,
    pub hidden_layers: Vec<usize>,
    pub gamma_init: f64,
    pub gamma_decay: f64,
    pub branch_mode: BranchMode,
    pub penalty_sign: PenaltySign,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Sdg,
            penalty_kind: PenaltyKind::Coral,
            penalty_weight: 10.0,
            learning_rate: 0.1,
            epochs: 30,
            steps_per_epoch: 20,
            domains_per_batch: 4,
            samples_per_domain: 32,
            beta_zero: 1.0,
            ba_iterations: BaParams::DEFAULT_ITERATIONS,
            seed: 0,
            hidden_layers: vec![2],
            gamma_init: 1.0,
            gamma_decay: 0.99,
            branch_mode: BranchMode::Accumulations,
            penalty_sign: PenaltySign::Descent,
        }
    }
}

impl TrainConfig {
    /// Checks every invariant; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return bad("penalty_weight", format!("must be >= 0, got {}", self.penalty_weight));
        }
        if self.domains_per_batch == 0 {
            return bad("domains_per_batch", "must be >= 1".into());
        }
        if self.samples_per_domain == 0 {
            return bad("samples_per_domain", "must be >= 1".into());
        }
        if self.penalty_kind == PenaltyKind::Coral && self.samples_per_domain < 2 {
            return bad("samples_per_domain", "must be >= 2 with the coral penalty".into());
        }
        if self.penalty_kind == PenaltyKind::Vrex && self.domains_per_batch < 2 {
            return bad("domains_per_batch", "must be >= 2 with the vrex penalty".into());
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "must be >= 1".into());
        }
        if !(self.beta_zero >= 0.0 && self.beta_zero.is_finite()) {
            return bad("beta_zero", format!("must be >= 0, got {}", self.beta_zero));
        }
        if self.ba_iterations == 0 {
            return bad("ba_iterations", "must be >= 1".into());
        }
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return bad("hidden_layers", "widths must be >= 1".into());
        }
        if !(self.gamma_init > 0.0 && self.gamma_init.is_finite()) {
            return bad("gamma_init", format!("must be > 0, got {}", self.gamma_init));
        }
        if !(0.0..1.0).contains(&self.gamma_decay) {
            return bad("gamma_decay", format!("must be in [0, 1), got {}", self.gamma_decay));
        }
        Ok(())
    }

    fn penalty(&self) -> Penalty {
        Penalty::new(self.penalty_kind, self.penalty_weight)
    }
}

/// Distortion weight schedule and the adaptive information weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdgSchedule {
    pub beta_zero: f64,
    pub horizon_t: usize,
    /// Current epoch, `1..=horizon_t`.
    pub current_t: usize,
    pub gamma_ema: f64,
    pub ema_decay: f64,
}

const GAMMA_FLOOR: f64 = 1e-8;

impl SdgSchedule {
    pub fn new(beta_zero: f64, horizon_t: usize, ema_decay: f64, gamma_init: f64) -> Result<Self> {
        if horizon_t == 0 {
            return Err(Error::param("horizon_t", "must be >= 1"));
        }
        if !(gamma_init > 0.0) {
            return Err(Error::param("gamma_init", format!("must be > 0, got {gamma_init}")));
        }
        Ok(Self {
            beta_zero,
            horizon_t,
            current_t: 1,
            gamma_ema: gamma_init,
            ema_decay,
        })
    }
}

/// `beta_zero * sqrt(t / T)`.
pub fn beta_schedule(sched: &SdgSchedule) -> Result<f64> {
    let (t, horizon) = (sched.current_t, sched.horizon_t);
    if t == 0 || t > horizon {
        return Err(Error::param("current_t", format!("must be in [1, {horizon}], got {t}")));
    }
    if t == horizon {
        return Ok(sched.beta_zero);
    }
    Ok(sched.beta_zero * (t as f64 / horizon as f64).sqrt())
}

/// Folds one observation into the exponential average and returns the new
/// `gamma`. Observations below `1e-8` count as `1e-8`.
pub fn gamma_update(sched: &mut SdgSchedule, observed_mean: f64) -> f64 {
    let obs = observed_mean.max(GAMMA_FLOOR);
    sched.gamma_ema = sched.ema_decay * sched.gamma_ema + (1.0 - sched.ema_decay) * obs;
    sched.gamma_ema
}

/// Draws `domains_per_batch` distinct non-empty domains, then
/// `samples_per_domain` rows from each with replacement.
pub fn group_sample(
    domains: &[DomainDataset],
    domains_per_batch: usize,
    samples_per_domain: usize,
    rng: &mut Rng,
) -> Result<Vec<DomainBatch>> {
    let mut pool: Vec<usize> = (0..domains.len()).filter(|&i| !domains[i].is_empty()).collect();
    if domains_per_batch == 0 || domains_per_batch > pool.len() {
        return Err(Error::Sampling(format!(
            "cannot draw {domains_per_batch} domains from {} non-empty",
            pool.len()
        )));
    }
    for i in 0..domains_per_batch {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool[..domains_per_batch]
        .iter()
        .map(|&d| {
            let n = domains[d].len();
            let rows: Vec<usize> = (0..samples_per_domain).map(|_| rng.below(n)).collect();
            domains[d].batch_of(&rows)
        })
        .collect()
}

/// What one optimization step did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub domain_ids: Vec<usize>,
    /// Mean loss of each batch before the update, in batch order.
    pub domain_losses: Vec<f64>,
    /// Weighted penalty on the step's batches before the update.
    pub penalty: f64,
    /// Distortion weight used by the sign solver; absent for steps without one.
    pub beta: Option<f64>,
    /// Information weight used by the sign solver.
    pub gamma: Option<f64>,
    pub update_norm: f64,
}

struct StepInputs {
    losses: Vec<f64>,
    grads: Vec<ParamVector>,
    penalty: PenaltyEvaluation,
}

fn step_inputs(model: &MlpModel, batches: &[DomainBatch], config: &TrainConfig) -> Result<StepInputs> {
    if batches.is_empty() {
        return Err(Error::InsufficientDomains { needed: 1, got: 0 });
    }
    let (losses, grads) = batches
        .iter()
        .map(|b| model.loss_and_grad(b))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let penalty = config.penalty().evaluate(model, batches)?;
    Ok(StepInputs { losses, grads, penalty })
}

fn mean_of(grads: &[ParamVector]) -> Result<ParamVector> {
    let mut sum = ParamVector::zeros(grads[0].len());
    for g in grads {
        sum.axpy_in_place(1.0, g)?;
    }
    Ok(sum.scaled(1.0 / grads.len() as f64))
}

fn finish(
    model: &mut MlpModel,
    batches: &[DomainBatch],
    inputs: StepInputs,
    lr: f64,
    update: &ParamVector,
    schedule: Option<(f64, f64)>,
) -> Result<StepRecord> {
    if inputs.losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("non-finite domain loss {:?}", inputs.losses)));
    }
    update.ensure_finite("update")?;
    model.apply_update(lr, update)?;
    Ok(StepRecord {
        epoch: 0,
        step: 0,
        domain_ids: batches.iter().map(|b| b.domain_id).collect(),
        domain_losses: inputs.losses,
        penalty: inputs.penalty.value,
        beta: schedule.map(|s| s.0),
        gamma: schedule.map(|s| s.1),
        update_norm: lr * update.norm(),
    })
}

/// SGD on the mean of the per-domain losses.
pub fn erm_step(model: &mut MlpModel, batches: &[DomainBatch], config: &TrainConfig) -> Result<StepRecord> {
    let inputs = step_inputs(model, batches, config)?;
    let update = mean_of(&inputs.grads)?;
    finish(model, batches, inputs, config.learning_rate, &update, None)
}

/// SGD on the mean per-domain loss plus the weighted penalty.
pub fn joint_step(model: &mut MlpModel, batches: &[DomainBatch], config: &TrainConfig) -> Result<StepRecord> {
    let inputs = step_inputs(model, batches, config)?;
    let mut update = mean_of(&inputs.grads)?;
    update.axpy_in_place(1.0, &inputs.penalty.grad)?;
    finish(model, batches, inputs, config.learning_rate, &update, None)
}

/// Sign agreement mask over the per-domain gradients of loss plus penalty.
/// A parameter keeps the mean gradient when no two domains have strictly
/// opposite signs there, and is zeroed otherwise.
pub fn and_mask(per_domain: &[ParamVector]) -> ParamVector {
    let n = per_domain[0].len();
    let m = per_domain.len() as f64;
    (0..n)
        .map(|p| {
            let pos = per_domain.iter().any(|g| g[p] > 0.0);
            let neg = per_domain.iter().any(|g| g[p] < 0.0);
            if pos && neg {
                0.0
            } else {
                per_domain.iter().map(|g| g[p]).sum::<f64>() / m
            }
        })
        .collect::<Vec<_>>()
        .into()
}

pub fn andmask_step(model: &mut MlpModel, batches: &[DomainBatch], config: &TrainConfig) -> Result<StepRecord> {
    let inputs = step_inputs(model, batches, config)?;
    let mut per_domain = inputs.grads.clone();
    for g in &mut per_domain {
        g.axpy_in_place(1.0, &inputs.penalty.grad)?;
    }
    let update = and_mask(&per_domain);
    finish(model, batches, inputs, config.learning_rate, &update, None)
}

/// Satisficing step with the configured penalty's gradient.
pub fn sdg_step(
    model: &mut MlpModel,
    batches: &[DomainBatch],
    config: &TrainConfig,
    sched: &mut SdgSchedule,
    rng: &mut Rng,
) -> Result<StepRecord> {
    let inputs = step_inputs(model, batches, config)?;
    let penalty_grad = match config.penalty_sign {
        PenaltySign::Descent => inputs.penalty.grad.scaled(-1.0),
        PenaltySign::Literal => inputs.penalty.grad.clone(),
    };
    solve_and_apply(model, batches, config, sched, rng, inputs, penalty_grad)
}

/// Satisficing step whose penalty direction is the FISH displacement,
/// scaled by `penalty_weight`, with one inner pass at the outer learning rate.
pub fn fish_sdg_step(
    model: &mut MlpModel,
    batches: &[DomainBatch],
    config: &TrainConfig,
    sched: &mut SdgSchedule,
    rng: &mut Rng,
) -> Result<StepRecord> {
    let inputs = step_inputs(model, batches, config)?;
    let disp = fish_penalty_grad(model, batches, config.learning_rate, batches.len(), rng)?;
    let penalty_grad = disp.scaled(config.penalty_weight);
    solve_and_apply(model, batches, config, sched, rng, inputs, penalty_grad)
}

fn solve_and_apply(
    model: &mut MlpModel,
    batches: &[DomainBatch],
    config: &TrainConfig,
    sched: &mut SdgSchedule,
    rng: &mut Rng,
    inputs: StepInputs,
    penalty_grad: ParamVector,
) -> Result<StepRecord> {
    let set = build_gradient_set(&inputs.grads, penalty_grad)?.with_branch_mode(config.branch_mode);
    let beta = beta_schedule(sched)?;
    let gamma = sched.gamma_ema;
    let dist = ba_solve(&set, BaParams::new(beta, gamma).with_iterations(config.ba_iterations))?;
    let observed = set.mean_score_magnitude(beta);
    if !observed.is_finite() {
        return Err(Error::Numeric(format!("non-finite score magnitude {observed}")));
    }
    gamma_update(sched, observed);
    let update = sample_update(&set, &dist, rng)?;
    finish(model, batches, inputs, config.learning_rate, &update, Some((beta, gamma)))
}

/// Held-out metrics after an epoch; epoch 0 is the initial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub in_dist_loss: f64,
    pub in_dist_acc: f64,
    pub unseen_loss: f64,
    pub unseen_acc: f64,
    /// Weighted configured penalty on the in-distribution test split.
    pub penalty: f64,
    /// `unseen_loss - in_dist_loss`.
    pub gen_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochMetrics>,
    pub final_params: ParamVector,
}

impl RunResult {
    pub fn final_metrics(&self) -> &EpochMetrics {
        self.epochs.last().expect("the initial evaluation is always present")
    }
}

fn evaluate(model: &MlpModel, test: &[DomainBatch], unseen: &[DomainBatch], penalty: Penalty, epoch: usize) -> Result<EpochMetrics> {
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let loss = |bs: &[DomainBatch]| bs.iter().map(|b| model.domain_loss(b)).collect::<Result<Vec<_>>>().map(mean);
    let acc = |bs: &[DomainBatch]| bs.iter().map(|b| model.accuracy(b)).collect::<Result<Vec<_>>>().map(mean);
    let in_dist_loss = loss(test)?;
    let unseen_loss = loss(unseen)?;
    if !in_dist_loss.is_finite() || !unseen_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite evaluation loss at epoch {epoch}")));
    }
    Ok(EpochMetrics {
        epoch,
        in_dist_loss,
        in_dist_acc: acc(test)?,
        unseen_loss,
        unseen_acc: acc(unseen)?,
        penalty: penalty.evaluate(model, test)?.value,
        gen_gap: unseen_loss - in_dist_loss,
    })
}

/// Trains a classifier on `task` and evaluates it after every epoch.
///
/// The model is an MLP with ReLU hidden layers and a two-class softmax
/// head. Initialization draws from stream 0 of `config.seed`, batching and
/// branch sampling from stream 1.
pub fn train(task: &SyntheticTask, config: &TrainConfig) -> Result<RunResult> {
    config.validate()?;
    let data = generate(task)?;
    let root = Rng::new(config.seed);
    let mut init_rng = root.derive(0);
    let mut rng = root.derive(1);

    let mut dims = vec![data.input_dim()];
    dims.extend(&config.hidden_layers);
    dims.push(2);
    let mut model = MlpModel::init(&dims, Loss::SoftmaxCrossEntropy, &mut init_rng)?;

    let test: Vec<DomainBatch> = data.test.iter().map(|d| d.as_batch()).collect::<Result<_>>()?;
    let unseen: Vec<DomainBatch> = data.unseen.iter().map(|d| d.as_batch()).collect::<Result<_>>()?;
    let penalty = config.penalty();

    let mut epochs = vec![evaluate(&model, &test, &unseen, penalty, 0)?];
    let mut steps = Vec::with_capacity(config.epochs * config.steps_per_epoch);
    let mut sched = SdgSchedule::new(config.beta_zero, config.epochs.max(1), config.gamma_decay, config.gamma_init)?;
    for t in 1..=config.epochs {
        sched.current_t = t;
        for s in 0..config.steps_per_epoch {
            let batches = group_sample(&data.train, config.domains_per_batch, config.samples_per_domain, &mut rng)?;
            let mut rec = match config.method {
                Method::Erm => erm_step(&mut model, &batches, config)?,
                Method::Joint => joint_step(&mut model, &batches, config)?,
                Method::Andmask => andmask_step(&mut model, &batches, config)?,
                Method::Sdg => sdg_step(&mut model, &batches, config, &mut sched, &mut rng)?,
                Method::FishSdg => fish_sdg_step(&mut model, &batches, config, &mut sched, &mut rng)?,
            };
            rec.epoch = t;
            rec.step = (t - 1) * config.steps_per_epoch + s + 1;
            steps.push(rec);
        }
        epochs.push(evaluate(&model, &test, &unseen, penalty, t)?);
    }
    Ok(RunResult {
        steps,
        epochs,
        final_params: model.params().clone(),
    })
}
