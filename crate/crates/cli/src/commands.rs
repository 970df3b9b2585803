//! The four subcommands. Each parses and validates its config, refuses to
//! clobber outputs, runs, and writes `metrics.csv` plus `summary.json`.

use std::path::Path;

use serde::Serialize;
use serde_json::json;

use sdg::discrete_ba::{check_convex, check_monotone, max_monotonicity_violation, min_convexity_gap};
use sdg::{
    rd_curve, run_prop1, tradeoff_sweep, train, zero_distortion_penalty, CurveCheck, DiscreteBAInstance, ParamVector,
    Rng, RunResult,
};

use crate::config::{Prop1File, RdcurveFile, Source, SweepFile, TrainFile};
use crate::error::CliError;
use crate::output::{code_version, csv_bytes, num, opt, timestamp, Manifest, OutputDir, SUMMARY};

pub const METRICS: &str = "metrics.csv";
pub const TRAJECTORY: &str = "trajectory.csv";

pub const TRAIN_COLUMNS: [&str; 11] = [
    "epoch",
    "step",
    "domain_losses",
    "penalty",
    "beta",
    "gamma",
    "in_dist_loss",
    "in_dist_acc",
    "unseen_loss",
    "unseen_acc",
    "gen_gap",
];
pub const PROP1_COLUMNS: [&str; 6] = ["kind", "seed_index", "seeds", "avg_sq_grad_norm", "bound_value", "bound_satisfied"];
pub const TRAJECTORY_COLUMNS: [&str; 3] = ["step", "grad_norm", "bias_norm"];
pub const RDCURVE_COLUMNS: [&str; 4] = ["beta", "expected_distortion", "expected_penalty", "mutual_information"];
pub const SWEEP_COLUMNS: [&str; 6] = ["beta_zero", "in_dist_loss", "in_dist_acc", "penalty", "unseen_loss", "unseen_acc"];

/// Flags shared by every subcommand.
#[derive(Debug, Clone)]
pub struct RunOptions<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub overwrite: bool,
}

fn finish<C: Serialize>(
    out: &OutputDir,
    command: &'static str,
    seed: u64,
    started_at: String,
    source: &Source,
    config: C,
    outputs: &[&str],
    extra: serde_json::Value,
) -> Result<(), CliError> {
    let manifest = Manifest {
        command,
        code_version: code_version(),
        seed,
        started_at,
        finished_at: timestamp(),
        config_path: source.path.display().to_string(),
        config,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let mut summary = extra;
    summary["manifest"] = serde_json::to_value(&manifest).map_err(|e| CliError::io(e.to_string()))?;
    out.write_json(SUMMARY, &summary)
}

/// Long-format rows: one per optimization step and one per evaluation.
/// Step rows leave the evaluation columns empty and vice versa; the
/// `penalty` column holds the batch penalty on step rows and the held-out
/// penalty on evaluation rows.
pub fn train_rows(run: &RunResult) -> Vec<Vec<String>> {
    let mut rows = Vec::with_capacity(run.steps.len() + run.epochs.len());
    let eval_row = |m: &sdg::EpochMetrics| {
        vec![
            m.epoch.to_string(),
            String::new(),
            String::new(),
            num(m.penalty),
            String::new(),
            String::new(),
            num(m.in_dist_loss),
            num(m.in_dist_acc),
            num(m.unseen_loss),
            num(m.unseen_acc),
            num(m.gen_gap),
        ]
    };
    let mut steps = run.steps.iter().peekable();
    for m in &run.epochs {
        while let Some(s) = steps.next_if(|s| s.epoch <= m.epoch) {
            let losses: Vec<String> = s
                .domain_ids
                .iter()
                .zip(&s.domain_losses)
                .map(|(id, l)| format!("{id}:{}", num(*l)))
                .collect();
            rows.push(vec![
                s.epoch.to_string(),
                s.step.to_string(),
                losses.join(";"),
                num(s.penalty),
                opt(s.beta),
                opt(s.gamma),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ]);
        }
        rows.push(eval_row(m));
    }
    rows
}

pub fn cmd_train(opts: &RunOptions) -> Result<(), CliError> {
    let source = Source::read(opts.config)?;
    let mut file: TrainFile = source.parse()?;
    if let Some(seed) = opts.seed {
        file.train.seed = seed;
        file.task.seed = seed;
    }
    file.task.validate().map_err(|e| CliError::from_core(e, &source, Some("task")))?;
    file.train.validate().map_err(|e| CliError::from_core(e, &source, Some("train")))?;
    let outputs = [METRICS, SUMMARY];
    let out = OutputDir::prepare(opts.out, &outputs, opts.overwrite)?;

    let started = timestamp();
    let run = train(&file.task, &file.train).map_err(|e| CliError::from_core(e, &source, Some("train")))?;
    out.write(METRICS, &csv_bytes(&TRAIN_COLUMNS, &train_rows(&run))?)?;
    let extra = json!({ "final": run.final_metrics() });
    finish(&out, "train", file.train.seed, started, &source, &file, &outputs, extra)
}

pub fn cmd_prop1(opts: &RunOptions) -> Result<(), CliError> {
    let source = Source::read(opts.config)?;
    let mut file: Prop1File = source.parse()?;
    if let Some(seed) = opts.seed {
        file.prop1.seed = seed;
    }
    let section = Some("prop1");
    file.prop1.constants().map_err(|e| CliError::from_core(e, &source, section))?;
    let outputs = [METRICS, TRAJECTORY, SUMMARY];
    let out = OutputDir::prepare(opts.out, &outputs, opts.overwrite)?;

    let started = timestamp();
    let r = run_prop1(&file.prop1).map_err(|e| CliError::from_core(e, &source, section))?;
    let mut rows: Vec<Vec<String>> = r
        .per_seed
        .iter()
        .enumerate()
        .map(|(i, v)| {
            vec![
                "seed".into(),
                i.to_string(),
                "1".into(),
                num(*v),
                num(r.bound_value),
                (*v <= r.bound_value).to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "aggregate".into(),
        String::new(),
        r.per_seed.len().to_string(),
        num(r.avg_sq_grad_norm),
        num(r.bound_value),
        r.bound_satisfied.to_string(),
    ]);
    out.write(METRICS, &csv_bytes(&PROP1_COLUMNS, &rows)?)?;
    let trajectory: Vec<Vec<String>> = r
        .trajectory
        .iter()
        .zip(&r.bias_norms)
        .enumerate()
        .map(|(t, (g, b))| vec![(t + 1).to_string(), num(*g), num(*b)])
        .collect();
    out.write(TRAJECTORY, &csv_bytes(&TRAJECTORY_COLUMNS, &trajectory)?)?;
    let extra = json!({
        "bound_satisfied": r.bound_satisfied,
        "avg_sq_grad_norm": r.avg_sq_grad_norm,
        "bound_value": r.bound_value,
        "seeds": r.per_seed.len(),
        "constants": r.constants,
    });
    finish(&out, "prop1", file.prop1.seed, started, &source, &file, &outputs, extra)
}

fn check_value(c: CurveCheck) -> serde_json::Value {
    match c {
        CurveCheck::Pass => json!(true),
        CurveCheck::Fail => json!(false),
        CurveCheck::NotApplicable => json!("not_applicable"),
    }
}

fn rd_instance(file: &RdcurveFile) -> Result<(DiscreteBAInstance, u64), String> {
    let s = &file.rdcurve;
    let explicit = (&s.candidates, &s.penalty, &s.domain_grads);
    let pv = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| ParamVector::from_vec(r.clone())).collect::<Vec<_>>();
    match (explicit, &s.random) {
        ((Some(c), Some(p), Some(g)), None) => Ok((
            DiscreteBAInstance { candidates: pv(c), penalty: p.clone(), domain_grads: pv(g), beta: 0.0, gamma: s.gamma },
            0,
        )),
        ((None, None, None), Some(r)) => {
            let mut rng = Rng::new(r.seed);
            Ok((DiscreteBAInstance::random(&mut rng, r.candidates, r.domains, r.dim, 0.0, s.gamma), r.seed))
        }
        _ => Err("instance: give either candidates, penalty and domain_grads, or a [rdcurve.random] table".into()),
    }
}

pub fn cmd_rdcurve(opts: &RunOptions) -> Result<(), CliError> {
    let source = Source::read(opts.config)?;
    let mut file: RdcurveFile = source.parse()?;
    if let (Some(seed), Some(r)) = (opts.seed, file.rdcurve.random.as_mut()) {
        r.seed = seed;
    }
    let section = Some("rdcurve");
    let (instance, seed) = rd_instance(&file).map_err(|m| CliError::config(source.locate(section, "candidates", &m)))?;
    instance.validate().map_err(|e| match e {
        sdg::Error::Dimension { expected, got } => CliError::config(format!(
            "{}: instance: vector lengths disagree (expected {expected}, got {got})",
            source.path.display()
        )),
        other => CliError::from_core(other, &source, section),
    })?;
    let betas = &file.rdcurve.betas;
    if betas.is_empty() {
        return Err(CliError::config(source.locate(section, "betas", "betas: must not be empty")));
    }
    if file.rdcurve.iterations == 0 {
        return Err(CliError::config(source.locate(section, "iterations", "iterations: must be >= 1")));
    }
    if betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(CliError::config(source.locate(section, "betas", "betas: values must be finite and >= 0")));
    }
    if betas.windows(2).any(|w| w[1] < w[0]) {
        return Err(CliError::config(source.locate(section, "betas", "betas: must be sorted ascending")));
    }
    let outputs = [METRICS, SUMMARY];
    let out = OutputDir::prepare(opts.out, &outputs, opts.overwrite)?;

    let started = timestamp();
    let points = rd_curve(&instance, betas, file.rdcurve.iterations).map_err(|e| CliError::from_core(e, &source, section))?;
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                num(p.beta),
                num(p.expected_distortion),
                num(p.expected_penalty),
                num(p.mutual_information),
            ]
        })
        .collect();
    out.write(METRICS, &csv_bytes(&RDCURVE_COLUMNS, &rows)?)?;
    let finite = |v: f64| if v.is_finite() { json!(v) } else { json!(null) };
    let extra = json!({
        "monotone": check_value(check_monotone(&points, 1e-8)),
        "convex": check_value(check_convex(&points, 1e-6)),
        "max_monotonicity_violation": finite(max_monotonicity_violation(&points)),
        "min_convexity_gap": finite(min_convexity_gap(&points)),
        "zero_distortion_penalty": zero_distortion_penalty(&instance),
    });
    finish(&out, "rdcurve", seed, started, &source, &file, &outputs, extra)
}

pub fn cmd_sweep(opts: &RunOptions) -> Result<(), CliError> {
    let source = Source::read(opts.config)?;
    let mut file: SweepFile = source.parse()?;
    if let Some(seed) = opts.seed {
        file.train.seed = seed;
        file.task.seed = seed;
    }
    file.task.validate().map_err(|e| CliError::from_core(e, &source, Some("task")))?;
    file.train.validate().map_err(|e| CliError::from_core(e, &source, Some("train")))?;
    let betas = &file.sweep.beta_zeros;
    let bad_betas = if betas.is_empty() {
        Some("beta_zeros: must not be empty")
    } else if betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        Some("beta_zeros: values must be finite and >= 0")
    } else if betas.windows(2).any(|w| w[0] > w[1]) {
        Some("beta_zeros: must be sorted ascending")
    } else {
        None
    };
    if let Some(msg) = bad_betas {
        return Err(CliError::config(source.locate(Some("sweep"), "beta_zeros", msg)));
    }
    let outputs = [METRICS, SUMMARY];
    let out = OutputDir::prepare(opts.out, &outputs, opts.overwrite)?;

    let started = timestamp();
    let rows = tradeoff_sweep(&file.task, &file.train, betas).map_err(|e| CliError::from_core(e, &source, Some("train")))?;
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.beta_zero),
                num(r.in_dist_loss),
                num(r.in_dist_acc),
                num(r.penalty),
                num(r.unseen_loss),
                num(r.unseen_acc),
            ]
        })
        .collect();
    out.write(METRICS, &csv_bytes(&SWEEP_COLUMNS, &csv_rows)?)?;
    let extra = json!({ "rows": rows });
    finish(&out, "sweep", file.train.seed, started, &source, &file, &outputs, extra)
}
