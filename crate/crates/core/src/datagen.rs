//! Seeded synthetic multi-domain classification tasks.
//!
//! Inputs are `[x_core, x_spurious]`. The label depends on the core block
//! through a fixed rule shared by every domain; the spurious block is
//! `y * mu_e + N(0, 1)` per coordinate, with a domain-specific strength
//! `mu_e`. Training domains use `mu_e >= 0` and unseen domains `mu_e <= 0`,
//! so the spurious block helps in distribution and hurts out of it, while a
//! core-only rule is equally good everywhere.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::model::{DomainBatch, Targets};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label is the sign of a fixed linear form of the core features.
    SpuriousLinear,
    /// Two interleaved half-moons in the core plane, rotated per domain.
    RotatedMoons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub core_dim: usize,
    pub spurious_dim: usize,
    /// Spurious strength of each training domain; its length is the number
    /// of training domains.
    pub train_strengths: Vec<f64>,
    /// Spurious strength of each unseen domain.
    pub unseen_strengths: Vec<f64>,
    /// Standard deviation of the core block in each training domain. The
    /// labeling rule depends only on the sign of the core projection, so
    /// scaling leaves the core-only classifier optimal everywhere.
    pub train_core_scales: Vec<f64>,
    pub unseen_core_scales: Vec<f64>,
    pub label_noise: f64,
    pub samples_per_domain: usize,
    /// Fraction of each training domain held out as the in-distribution test split.
    pub test_fraction: f64,
    /// Rotation of each training domain (radians), `rotated_moons` only.
    pub train_angles: Vec<f64>,
    /// Rotation of each unseen domain (radians), `rotated_moons` only.
    pub unseen_angles: Vec<f64>,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::SpuriousLinear,
            core_dim: 2,
            spurious_dim: 5,
            train_strengths: vec![0.05, 0.1, 0.15, 0.2],
            unseen_strengths: vec![-0.2],
            // A 16x spread in core-feature scale makes the domains' feature
            // covariances disagree, so CORAL has something to fight ERM over.
            train_core_scales: vec![0.25, 0.63, 1.59, 4.0],
            unseen_core_scales: vec![1.0],
            label_noise: 0.05,
            samples_per_domain: 500,
            test_fraction: 0.2,
            train_angles: vec![0.0, 0.3, 0.6, 0.9],
            unseen_angles: vec![1.5],
            seed: 0,
        }
    }
}

/// All samples of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain_id: usize,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Globally unique sample indices.
    pub sample_ids: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The whole dataset as one batch.
    pub fn as_batch(&self) -> Result<DomainBatch> {
        DomainBatch::new(self.inputs.clone(), Targets::Classes(self.labels.clone()), self.domain_id)
    }

    /// Batch built from the rows at `rows`.
    pub fn batch_of(&self, rows: &[usize]) -> Result<DomainBatch> {
        let inputs = self.inputs.select(ndarray::Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        DomainBatch::new(inputs, Targets::Classes(labels), self.domain_id)
    }

    /// One CSV row per sample: `sample_id,domain_id,x0..x{d-1},label`.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        let d = self.inputs.ncols();
        if header {
            let cols: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
            writeln!(w, "sample_id,domain_id,{},label", cols.join(","))?;
        }
        for i in 0..self.len() {
            let xs: Vec<String> = self.inputs.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{},{}", self.sample_ids[i], self.domain_id, xs.join(","), self.labels[i])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTask {
    pub train: Vec<DomainDataset>,
    /// Held-out split of each training domain, same order as `train`.
    pub test: Vec<DomainDataset>,
    pub unseen: Vec<DomainDataset>,
}

impl GeneratedTask {
    pub fn input_dim(&self) -> usize {
        self.train[0].inputs.ncols()
    }
}

#[derive(Debug, Clone, Copy)]
struct DomainFactors {
    strength: f64,
    core_scale: f64,
    angle: f64,
}

impl SyntheticTask {
    pub fn domain_count(&self) -> usize {
        self.train_strengths.len()
    }

    pub fn unseen_count(&self) -> usize {
        self.unseen_strengths.len()
    }

    pub fn input_dim(&self) -> usize {
        self.core_dim + self.spurious_dim
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.domain_count() < 2 {
            return cfg(format!("train_strengths: need >= 2 training domains, got {}", self.domain_count()));
        }
        if self.unseen_count() < 1 {
            return cfg("unseen_strengths: need >= 1 unseen domain".into());
        }
        if self.core_dim == 0 {
            return cfg("core_dim: must be >= 1".into());
        }
        if self.train_core_scales.len() != self.domain_count() || self.unseen_core_scales.len() != self.unseen_count() {
            return cfg("train_core_scales: need one entry per training domain and unseen_core_scales one per unseen domain".into());
        }
        if self.train_core_scales.iter().chain(&self.unseen_core_scales).any(|s| !(*s > 0.0 && s.is_finite())) {
            return cfg("train_core_scales: scales must be finite and > 0".into());
        }
        if self.kind == TaskKind::RotatedMoons {
            if self.core_dim != 2 {
                return cfg(format!("core_dim: must be 2 for rotated_moons, got {}", self.core_dim));
            }
            if self.train_angles.len() != self.domain_count() || self.unseen_angles.len() != self.unseen_count() {
                return cfg("train_angles: need one entry per training domain and unseen_angles one per unseen domain".into());
            }
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return cfg(format!("label_noise: must be in [0, 1), got {}", self.label_noise));
        }
        if self.train_strengths.iter().any(|m| !(*m >= 0.0)) {
            return cfg("train_strengths: must be >= 0".into());
        }
        if self.unseen_strengths.iter().any(|m| !(*m <= 0.0)) {
            return cfg("unseen_strengths: must be <= 0".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return cfg(format!("test_fraction: must be in (0, 1), got {}", self.test_fraction));
        }
        let test = self.test_size();
        if test < 2 || self.samples_per_domain - test < 2 {
            return cfg(format!(
                "samples_per_domain: {} too small for test_fraction {}",
                self.samples_per_domain, self.test_fraction
            ));
        }
        Ok(())
    }

    fn test_size(&self) -> usize {
        (self.samples_per_domain as f64 * self.test_fraction).round() as usize
    }

    /// Labeling direction of the core block for `spurious_linear`.
    pub fn core_direction(&self) -> Vec<f64> {
        let w = 1.0 / (self.core_dim as f64).sqrt();
        vec![w; self.core_dim]
    }

    /// Core-only rule: the labeling direction for `spurious_linear`; the
    /// noiseless moon label for `rotated_moons` is not linear and has no
    /// closed-form rule here.
    pub fn core_rule(&self, x_core: &[f64]) -> usize {
        let s: f64 = x_core.iter().zip(self.core_direction()).map(|(a, b)| a * b).sum();
        usize::from(s > 0.0)
    }

    fn sample_domain(&self, rng: &mut Rng, factors: DomainFactors, id: usize, first_id: usize) -> DomainDataset {
        let n = self.samples_per_domain;
        let d = self.input_dim();
        let mut inputs = Matrix::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let clean = match self.kind {
                TaskKind::SpuriousLinear => {
                    for j in 0..self.core_dim {
                        inputs[[i, j]] = factors.core_scale * rng.normal();
                    }
                    self.core_rule(&inputs.row(i).as_slice().unwrap()[..self.core_dim])
                }
                TaskKind::RotatedMoons => {
                    let label = rng.below(2);
                    let t = std::f64::consts::PI * rng.uniform();
                    let (x, y) = if label == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let (x, y) = (x - 0.5 + 0.1 * rng.normal(), y - 0.25 + 0.1 * rng.normal());
                    let (s, c) = factors.angle.sin_cos();
                    inputs[[i, 0]] = factors.core_scale * (c * x - s * y);
                    inputs[[i, 1]] = factors.core_scale * (s * x + c * y);
                    label
                }
            };
            let label = if rng.bernoulli(self.label_noise) { 1 - clean } else { clean };
            let sign = if label == 1 { 1.0 } else { -1.0 };
            for j in self.core_dim..d {
                inputs[[i, j]] = sign * factors.strength + rng.normal();
            }
            labels.push(label);
        }
        DomainDataset {
            domain_id: id,
            inputs,
            labels,
            sample_ids: (first_id..first_id + n).collect(),
        }
    }
}

/// Generates training domains (split into train/test) and unseen domains.
/// Training domains get ids `0..M`, unseen domains `M..M+U`.
pub fn generate(task: &SyntheticTask) -> Result<GeneratedTask> {
    task.validate()?;
    let root = Rng::new(task.seed);
    let n = task.samples_per_domain;
    let test_n = task.test_size();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (e, &mu) in task.train_strengths.iter().enumerate() {
        let mut rng = root.derive(e as u64);
        let factors = DomainFactors {
            strength: mu,
            core_scale: task.train_core_scales[e],
            angle: task.train_angles.get(e).copied().unwrap_or(0.0),
        };
        let full = task.sample_domain(&mut rng, factors, e, e * n);
        let train_rows: Vec<usize> = (0..n - test_n).collect();
        let test_rows: Vec<usize> = (n - test_n..n).collect();
        train.push(subset(&full, &train_rows));
        test.push(subset(&full, &test_rows));
    }
    let m = task.domain_count();
    let unseen = task
        .unseen_strengths
        .iter()
        .enumerate()
        .map(|(u, &mu)| {
            let mut rng = root.derive((m + u) as u64);
            let factors = DomainFactors {
                strength: mu,
                core_scale: task.unseen_core_scales[u],
                angle: task.unseen_angles.get(u).copied().unwrap_or(0.0),
            };
            task.sample_domain(&mut rng, factors, m + u, (m + u) * n)
        })
        .collect();
    Ok(GeneratedTask { train, test, unseen })
}

fn subset(d: &DomainDataset, rows: &[usize]) -> DomainDataset {
    DomainDataset {
        domain_id: d.domain_id,
        inputs: d.inputs.select(ndarray::Axis(0), rows),
        labels: rows.iter().map(|&r| d.labels[r]).collect(),
        sample_ids: rows.iter().map(|&r| d.sample_ids[r]).collect(),
    }
}
