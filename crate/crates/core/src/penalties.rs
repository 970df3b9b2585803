//! Domain-generalization penalties: CORAL, VRex and the FISH displacement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{centered, covariance, Matrix, ParamVector};
use crate::model::{order_free_sum, DomainBatch, MlpModel};
use crate::rng::Rng;

/// Scalar penalty together with its gradient over the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyEvaluation {
    pub value: f64,
    pub grad: ParamVector,
}

impl PenaltyEvaluation {
    pub fn zero(len: usize) -> Self {
        Self {
            value: 0.0,
            grad: ParamVector::zeros(len),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Coral,
    Vrex,
    None,
}

/// A penalty with its weight folded in: `evaluate` returns `weight * P`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalty {
    pub kind: PenaltyKind,
    pub weight: f64,
}

impl Penalty {
    pub fn new(kind: PenaltyKind, weight: f64) -> Self {
        Self { kind, weight }
    }

    pub fn coral() -> Self {
        Self::new(PenaltyKind::Coral, 1.0)
    }

    pub fn vrex() -> Self {
        Self::new(PenaltyKind::Vrex, 1.0)
    }

    pub fn evaluate(&self, model: &MlpModel, batches: &[DomainBatch]) -> Result<PenaltyEvaluation> {
        match self.kind {
            PenaltyKind::Coral => coral(model, batches, self.weight),
            PenaltyKind::Vrex => vrex(model, batches, self.weight),
            PenaltyKind::None => Ok(PenaltyEvaluation::zero(model.params().len())),
        }
    }
}

/// CORAL: mean over unordered domain pairs of `|C_a - C_b|_F^2 / (4 d^2)`,
/// where `C_e` is the covariance of domain `e`'s penultimate features and `d`
/// their width. A single domain has no pairs and scores zero.
pub fn coral_penalty(model: &MlpModel, batches: &[DomainBatch]) -> Result<PenaltyEvaluation> {
    coral(model, batches, 1.0)
}

/// VRex: population variance of the per-domain mean losses.
pub fn vrex_penalty(model: &MlpModel, batches: &[DomainBatch]) -> Result<PenaltyEvaluation> {
    vrex(model, batches, 1.0)
}

fn coral(model: &MlpModel, batches: &[DomainBatch], weight: f64) -> Result<PenaltyEvaluation> {
    if batches.is_empty() {
        return Err(Error::InsufficientDomains { needed: 1, got: 0 });
    }
    if let Some(b) = batches.iter().find(|b| b.len() < 2) {
        return Err(Error::InsufficientSamples { needed: 2, got: b.len() });
    }
    let n_params = model.params().len();
    let m = batches.len();
    if m == 1 {
        return Ok(PenaltyEvaluation::zero(n_params));
    }

    let passes = batches
        .iter()
        .map(|b| model.forward_pass(&b.inputs))
        .collect::<Result<Vec<_>>>()?;
    let covs = passes
        .iter()
        .map(|p| covariance(p.features()))
        .collect::<Result<Vec<_>>>()?;

    let d = model.feature_dim() as f64;
    let pairs = (m * (m - 1) / 2) as f64;
    let scale = weight / (pairs * 4.0 * d * d);

    let mut terms = Vec::with_capacity(m * (m - 1) / 2);
    let mut d_cov: Vec<Matrix> = covs.iter().map(|c| Matrix::zeros(c.raw_dim())).collect();
    for a in 0..m {
        for b in a + 1..m {
            let diff = &covs[a] - &covs[b];
            terms.push(diff.iter().map(|v| v * v).sum::<f64>());
            d_cov[a].scaled_add(2.0 * scale, &diff);
            d_cov[b].scaled_add(-2.0 * scale, &diff);
        }
    }
    let value = scale * order_free_sum(terms);

    // dC = (dXc^T Xc + Xc^T dXc) / (B-1); with a symmetric upstream G the
    // feature gradient is 2 Xc G / (B-1). The centering term vanishes because
    // the columns of Xc sum to zero.
    let mut grad = ParamVector::zeros(n_params);
    for ((pass, g), batch) in passes.iter().zip(&d_cov).zip(batches) {
        let xc = centered(pass.features());
        let d_feat = xc.dot(g) * (2.0 / (batch.len() as f64 - 1.0));
        grad.axpy_in_place(1.0, &model.backward(pass, None, Some(&d_feat)))?;
    }
    grad.ensure_finite("coral gradient")?;
    Ok(PenaltyEvaluation { value, grad })
}

fn vrex(model: &MlpModel, batches: &[DomainBatch], weight: f64) -> Result<PenaltyEvaluation> {
    if batches.len() < 2 {
        return Err(Error::InsufficientDomains {
            needed: 2,
            got: batches.len(),
        });
    }
    let m = batches.len() as f64;
    let (losses, grads): (Vec<f64>, Vec<ParamVector>) = batches
        .iter()
        .map(|b| model.loss_and_grad(b))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let mean = order_free_sum(losses.clone()) / m;
    let value = weight * order_free_sum(losses.iter().map(|l| (l - mean).powi(2)).collect()) / m;
    let mut grad = ParamVector::zeros(model.params().len());
    for (l, g) in losses.iter().zip(&grads) {
        grad.axpy_in_place(weight * 2.0 * (l - mean) / m, g)?;
    }
    Ok(PenaltyEvaluation { value, grad })
}

/// FISH displacement `theta_tilde - theta` after `inner_steps` plain SGD steps
/// on a clone of the model. Each pass over the batches visits every domain
/// once, in an order shuffled by `rng`. The caller's model is untouched.
pub fn fish_penalty_grad(
    model: &MlpModel,
    batches: &[DomainBatch],
    inner_lr: f64,
    inner_steps: usize,
    rng: &mut Rng,
) -> Result<ParamVector> {
    if batches.is_empty() {
        return Err(Error::InsufficientDomains { needed: 1, got: 0 });
    }
    if !(inner_lr > 0.0) {
        return Err(Error::param("inner_lr", format!("must be > 0, got {inner_lr}")));
    }
    if inner_steps == 0 {
        return Err(Error::param("inner_steps", "must be >= 1"));
    }
    let mut inner = model.clone();
    let mut order: Vec<usize> = (0..batches.len()).collect();
    for step in 0..inner_steps {
        if step % batches.len() == 0 {
            rng.shuffle(&mut order);
        }
        let g = inner.domain_grad(&batches[order[step % batches.len()]])?;
        inner.apply_update(inner_lr, &g)?;
    }
    let mut disp = inner.params().clone();
    disp.axpy_in_place(-1.0, model.params())?;
    Ok(disp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_grad, max_relative_error};
    use crate::model::{Loss, Targets};
    use ndarray::{array, Axis};

    fn batch(inputs: Matrix, classes: Vec<usize>, id: usize) -> DomainBatch {
        DomainBatch::new(inputs, Targets::Classes(classes), id).unwrap()
    }

    fn random_domains(rng: &mut Rng, m: usize, b: usize, d: usize) -> Vec<DomainBatch> {
        (0..m)
            .map(|e| {
                let shift = e as f64 * 0.7;
                batch(
                    Matrix::from_shape_fn((b, d), |_| rng.normal() * (1.0 + shift) + shift),
                    (0..b).map(|_| rng.below(2)).collect(),
                    e,
                )
            })
            .collect()
    }

    /// Identity features: a linear model `[1] -> [1]` has the raw input as
    /// its penultimate activation.
    fn identity_feature_model() -> MlpModel {
        MlpModel::from_params(&[1, 1], Loss::SquaredError, ParamVector::from_vec(vec![1.0, 0.0])).unwrap()
    }

    #[test]
    fn coral_hand_value() {
        let model = identity_feature_model();
        let a = DomainBatch::new(array![[0.0], [2.0]], Targets::Values(array![[0.0], [0.0]]), 0).unwrap();
        let b = DomainBatch::new(array![[0.0], [0.0]], Targets::Values(array![[0.0], [0.0]]), 1).unwrap();
        // C_a = 2, C_b = 0, d = 1: (1/4) * 4 = 1.
        assert_eq!(coral_penalty(&model, &[a, b]).unwrap().value, 1.0);
    }

    #[test]
    fn coral_identical_domains_and_single_domain() {
        let mut rng = Rng::new(1);
        let model = MlpModel::init(&[3, 4, 2], Loss::SoftmaxCrossEntropy, &mut rng).unwrap();
        let x = Matrix::from_shape_fn((6, 3), |_| rng.normal());
        let a = batch(x.clone(), vec![0; 6], 0);
        let b = batch(x, vec![1; 6], 1);
        let eval = coral_penalty(&model, &[a.clone(), b]).unwrap();
        assert_eq!(eval.value, 0.0);
        assert!(eval.grad.iter().all(|g| g.abs() <= 1e-12));
        assert_eq!(coral_penalty(&model, &[a]).unwrap(), PenaltyEvaluation::zero(model.params().len()));
    }

    #[test]
    fn coral_needs_two_samples_per_domain() {
        let model = identity_feature_model();
        let a = DomainBatch::new(array![[0.0]], Targets::Values(array![[0.0]]), 0).unwrap();
        assert_eq!(
            coral_penalty(&model, &[a]).unwrap_err(),
            Error::InsufficientSamples { needed: 2, got: 1 }
        );
    }

    #[test]
    fn vrex_examples() {
        // Linear y = w x with w = 0; loss 0.5 y^2 per sample.
        let model = MlpModel::zeros(&[1, 1], Loss::SquaredError).unwrap();
        let dom = |y: f64, id| DomainBatch::new(array![[1.0]], Targets::Values(array![[y]]), id).unwrap();
        let equal = vrex_penalty(&model, &[dom(1.0, 0), dom(-1.0, 1)]).unwrap();
        assert_eq!(equal.value, 0.0);
        // losses 1 and 3: y^2 = 2 and 6.
        let v = vrex_penalty(&model, &[dom(2f64.sqrt(), 0), dom(6f64.sqrt(), 1)]).unwrap();
        assert!((v.value - 1.0).abs() < 1e-12);
        assert_eq!(
            vrex_penalty(&model, &[dom(1.0, 0)]).unwrap_err(),
            Error::InsufficientDomains { needed: 2, got: 1 }
        );
    }

    #[test]
    fn penalty_grads_match_finite_differences() {
        let mut rng = Rng::new(21);
        let archs: [&[usize]; 3] = [&[3, 4, 2], &[3, 5, 3, 2], &[3, 6, 2]];
        for trial in 0..24 {
            let dims = archs[trial % 3];
            let model = MlpModel::init(dims, Loss::SoftmaxCrossEntropy, &mut rng).unwrap();
            let batches = random_domains(&mut rng, 2 + trial % 3, 5, 3);
            for penalty in [Penalty::new(PenaltyKind::Coral, 3.0), Penalty::vrex()] {
                let analytic = penalty.evaluate(&model, &batches).unwrap().grad;
                let numeric = finite_diff_grad(
                    |p| {
                        let m = MlpModel::from_params(dims, Loss::SoftmaxCrossEntropy, p.clone()).unwrap();
                        penalty.evaluate(&m, &batches).unwrap().value
                    },
                    model.params(),
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(&analytic, &numeric, 1e-3);
                assert!(err <= 1e-4, "trial {trial} {:?}: {err}", penalty.kind);
            }
        }
    }

    #[test]
    fn penalties_invariant_to_sample_and_domain_order() {
        let mut rng = Rng::new(8);
        let model = MlpModel::init(&[3, 5, 2], Loss::SoftmaxCrossEntropy, &mut rng).unwrap();
        let batches = random_domains(&mut rng, 3, 7, 3);
        let shuffled: Vec<DomainBatch> = batches
            .iter()
            .map(|b| {
                let mut order: Vec<usize> = (0..b.len()).collect();
                rng.shuffle(&mut order);
                let Targets::Classes(c) = &b.targets else { unreachable!() };
                batch(
                    b.inputs.select(Axis(0), &order),
                    order.iter().map(|&i| c[i]).collect(),
                    b.domain_id,
                )
            })
            .collect();
        for p in [Penalty::coral(), Penalty::vrex()] {
            assert_eq!(
                p.evaluate(&model, &batches).unwrap().value.to_bits(),
                p.evaluate(&model, &shuffled).unwrap().value.to_bits()
            );
        }
        let mut reversed = batches.clone();
        reversed.reverse();
        assert_eq!(
            coral_penalty(&model, &batches).unwrap().value.to_bits(),
            coral_penalty(&model, &reversed).unwrap().value.to_bits()
        );
    }

    #[test]
    fn weight_scales_value_and_grad() {
        let mut rng = Rng::new(2);
        let model = MlpModel::init(&[3, 4, 2], Loss::SoftmaxCrossEntropy, &mut rng).unwrap();
        let batches = random_domains(&mut rng, 2, 6, 3);
        let one = Penalty::coral().evaluate(&model, &batches).unwrap();
        let ten = Penalty::new(PenaltyKind::Coral, 10.0).evaluate(&model, &batches).unwrap();
        assert!((ten.value - 10.0 * one.value).abs() <= 1e-12 * ten.value.abs().max(1.0));
        assert!(max_relative_error(&ten.grad, &one.grad.scaled(10.0), 1e-12) < 1e-12);
    }

    #[test]
    fn fish_zero_gradients_give_zero_displacement() {
        let model = identity_feature_model();
        let exact = DomainBatch::new(array![[1.0], [2.0]], Targets::Values(array![[1.0], [2.0]]), 0).unwrap();
        let mut rng = Rng::new(0);
        let d = fish_penalty_grad(&model, &[exact.clone(), exact], 0.3, 4, &mut rng).unwrap();
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fish_one_step_is_negative_scaled_gradient() {
        let mut rng = Rng::new(5);
        let model = MlpModel::init(&[2, 3, 2], Loss::SoftmaxCrossEntropy, &mut rng).unwrap();
        let b = random_domains(&mut rng, 1, 4, 2);
        let before = model.clone();
        let d = fish_penalty_grad(&model, &b, 0.1, 1, &mut rng).unwrap();
        let g = model.domain_grad(&b[0]).unwrap();
        assert!(max_relative_error(&d, &g.scaled(-0.1), 1e-12) < 1e-12);
        assert_eq!(model, before);
    }

    #[test]
    fn fish_two_domains_two_steps_by_hand() {
        // Scalar linear model y = w x + c, loss 0.5 (y - t)^2, one sample per
        // domain. Unrolled: p1 = p0 - lr * g_first(p0), p2 = p1 - lr * g_second(p1).
        let model = MlpModel::from_params(&[1, 1], Loss::SquaredError, ParamVector::from_vec(vec![0.5, -0.25])).unwrap();
        let doms = [
            DomainBatch::new(array![[2.0]], Targets::Values(array![[1.0]]), 0).unwrap(),
            DomainBatch::new(array![[-1.0]], Targets::Values(array![[3.0]]), 1).unwrap(),
        ];
        let samples = [(2.0, 1.0), (-1.0, 3.0)];
        let lr = 0.2;
        let step = |(w, c): (f64, f64), (x, t): (f64, f64)| {
            let r = w * x + c - t;
            (w - lr * r * x, c - lr * r)
        };
        let mut rng = Rng::new(77);
        let mut probe = rng.clone();
        let mut order = vec![0usize, 1];
        probe.shuffle(&mut order);
        let p2 = step(step((0.5, -0.25), samples[order[0]]), samples[order[1]]);
        let d = fish_penalty_grad(&model, &doms, lr, 2, &mut rng).unwrap();
        assert!((d[0] - (p2.0 - 0.5)).abs() < 1e-15);
        assert!((d[1] - (p2.1 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn fish_rejects_bad_arguments() {
        let model = identity_feature_model();
        let mut rng = Rng::new(0);
        assert!(fish_penalty_grad(&model, &[], 0.1, 1, &mut rng).is_err());
        let b = DomainBatch::new(array![[1.0]], Targets::Values(array![[1.0]]), 0).unwrap();
        assert!(fish_penalty_grad(&model, &[b.clone()], 0.0, 1, &mut rng).is_err());
        assert!(fish_penalty_grad(&model, &[b], 0.1, 0, &mut rng).is_err());
    }
}
