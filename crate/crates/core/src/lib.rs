//! Satisficing domain generalization.
//!
//! Training picks, for every parameter, one of two candidate updates built
//! from per-domain gradients. The choice is a Blahut-Arimoto solution that
//! trades an invariance penalty against distortion from the plain empirical
//! risk update, with the distortion weight growing over training so the
//! final epochs are ordinary ERM.
//!
//! ```
//! use sdg::{beta_schedule, SdgSchedule};
//!
//! let mut sched = SdgSchedule::new(1.0, 100, 0.99, 1.0).unwrap();
//! sched.current_t = 25;
//! assert!((beta_schedule(&sched).unwrap() - 0.5).abs() < 1e-15);
//! ```

pub mod datagen;
pub mod discrete_ba;
pub mod error;
pub mod math;
pub mod model;
pub mod optimizer;
pub mod penalties;
pub mod rng;
pub mod sign_ba;
pub mod theory;

pub use datagen::{generate, DomainDataset, GeneratedTask, SyntheticTask, TaskKind};
pub use discrete_ba::{
    discrete_ba_solve, mutual_information, rd_curve, zero_distortion_penalty, BAResult, CurveCheck,
    DiscreteBAInstance, RdPoint,
};
pub use error::{Error, Result};
pub use math::{covariance, finite_diff_grad, Matrix, ParamVector};
pub use model::{DomainBatch, Loss, MlpModel, Targets};
pub use optimizer::{
    andmask_step, beta_schedule, erm_step, fish_sdg_step, gamma_update, group_sample, joint_step, sdg_step,
    train, EpochMetrics, Method, PenaltySign, RunResult, SdgSchedule, StepRecord, TrainConfig,
};
pub use penalties::{coral_penalty, fish_penalty_grad, vrex_penalty, Penalty, PenaltyEvaluation, PenaltyKind};
pub use rng::Rng;
pub use sign_ba::{ba_solve, build_gradient_set, sample_update, BaParams, BranchMode, DomainGradientSet, SignDistribution};
pub use theory::{run_prop1, tradeoff_sweep, Prop1Objective, Prop1Config, Prop1Result, SweepRow};
