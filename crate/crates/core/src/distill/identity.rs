//! Executable checks of the distillation-gradient identities.
//!
//! With soft labels `s_n = (1/N) Σ_i σ(ψ_n(x_i))` and the soft-target loss
//! `f_d(x) = -Σ_k s_{n,k} log σ(ψ_n(x))_k`, the gradient is
//! `J_ψ(x)ᵀ (σ(ψ_n(x)) − s_n)`. For the linear-softmax model the Jacobian is
//! the same for every parameter vector, so the gradient also equals the
//! student's hard-label gradient minus the mean of the teachers' hard-label
//! gradients, whatever the labels `b_n` are.

use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, max_abs_error, max_relative_error};
use crate::model::{
    ce_loss_and_grad, forward_logits, logit_jacobian, soft_target_loss_and_grad, softmax, Architecture, Batch,
    ModelParams,
};
use crate::tensor::DenseMatrix;

fn check_shared_arch(x: &ModelParams, teachers: &[ModelParams]) -> Result<()> {
    if teachers.is_empty() {
        return Err(Error::config("identity check needs at least one teacher"));
    }
    if let Some(t) = teachers.iter().find(|t| t.arch() != x.arch()) {
        return Err(Error::config(format!(
            "teacher architecture {:?} differs from student {:?}",
            t.arch(),
            x.arch()
        )));
    }
    Ok(())
}

/// Row-wise mean of the teachers' softmax outputs.
fn mean_teacher_probs(teachers: &[ModelParams], inputs: &DenseMatrix) -> Result<DenseMatrix> {
    let k = teachers[0].arch().num_classes();
    let mut s = DenseMatrix::zeros(inputs.rows(), k);
    for t in teachers {
        let z = forward_logits(t, inputs)?;
        for r in 0..inputs.rows() {
            for (acc, p) in s.row_mut(r).iter_mut().zip(softmax(z.row(r))) {
                *acc += p;
            }
        }
    }
    let inv = 1.0 / teachers.len() as f64;
    s.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok(s)
}

/// Largest elementwise gap between `∇_x ℓ(σ(xᵀa_n), s_n)` (closed form
/// `a_n (σ − s_n)ᵀ`) and `∇f(x) − (1/N) Σ ∇f(x_i)` built from hard-label
/// cross-entropy gradients, over every single sample and over the batch mean.
pub fn verify_identity_linear(
    x: &ModelParams,
    teachers: &[ModelParams],
    inputs: &DenseMatrix,
    labels: &[usize],
) -> Result<f64> {
    let Architecture::LinearSoftmax { classes: k, .. } = x.arch() else {
        return Err(Error::config(format!("linear identity needs a linear-softmax student, got {:?}", x.arch())));
    };
    check_shared_arch(x, teachers)?;
    let batch = Batch::new(inputs.clone(), labels.to_vec(), k)?;
    let soft = mean_teacher_probs(teachers, inputs)?;
    let student_logits = forward_logits(x, inputs)?;

    let rhs = |b: &Batch| -> Result<Vec<f64>> {
        let (_, mut g) = ce_loss_and_grad(x, b)?;
        let inv = 1.0 / teachers.len() as f64;
        for t in teachers {
            let (_, gt) = ce_loss_and_grad(t, b)?;
            for (gi, ti) in g.iter_mut().zip(gt) {
                *gi -= inv * ti;
            }
        }
        Ok(g)
    };

    let n = inputs.rows();
    let mut worst: f64 = 0.0;
    let mut lhs_mean = vec![0.0; x.theta().len()];
    for r in 0..n {
        let a = inputs.row(r);
        let p = softmax(student_logits.row(r));
        let s = soft.row(r);
        let mut lhs = vec![0.0; x.theta().len()];
        for (i, &ai) in a.iter().enumerate() {
            for c in 0..k {
                lhs[i * k + c] = ai * (p[c] - s[c]);
            }
        }
        let single = batch.select(&[r])?;
        worst = worst.max(max_abs_error(&lhs, &rhs(&single)?));
        for (m, l) in lhs_mean.iter_mut().zip(&lhs) {
            *m += l / n as f64;
        }
    }
    worst = worst.max(max_abs_error(&lhs_mean, &rhs(&batch)?));
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenericIdentityReport {
    /// Backprop gradient of `f_d` vs explicit `Jᵀ` times the label-form
    /// residual, max absolute gap over samples and the batch mean.
    pub jacobian_error: f64,
    /// Backprop gradient of the batch-mean `f_d` vs central differences.
    pub finite_difference_error: f64,
}

/// Checks the generic-architecture identity two ways, plus a
/// finite-difference check of the soft-target loss.
///
/// The explicit route assembles `J_ψ(x)` entry by entry and multiplies it by
/// `(σ(ψ(x)) − b_n) − (1/N) Σ_i (σ(ψ(x_i)) − b_n)`.
pub fn verify_identity_generic(
    x: &ModelParams,
    teachers: &[ModelParams],
    inputs: &DenseMatrix,
    labels: &[usize],
) -> Result<GenericIdentityReport> {
    check_shared_arch(x, teachers)?;
    let k = x.arch().num_classes();
    let batch = Batch::new(inputs.clone(), labels.to_vec(), k)?;
    let soft = mean_teacher_probs(teachers, inputs)?;
    let student_logits = forward_logits(x, inputs)?;
    let teacher_logits = teachers
        .iter()
        .map(|t| forward_logits(t, inputs))
        .collect::<Result<Vec<_>>>()?;

    let n = inputs.rows();
    let p_len = x.theta().len();
    let mut jacobian_error: f64 = 0.0;
    let mut explicit_mean = vec![0.0; p_len];
    for r in 0..n {
        let onehot = |c: usize| if c == batch.labels()[r] { 1.0 } else { 0.0 };
        let student_p = softmax(student_logits.row(r));
        let mut residual: Vec<f64> = (0..k).map(|c| student_p[c] - onehot(c)).collect();
        for tl in &teacher_logits {
            let tp = softmax(tl.row(r));
            for (c, res) in residual.iter_mut().enumerate() {
                *res -= (tp[c] - onehot(c)) / teachers.len() as f64;
            }
        }
        let jac = logit_jacobian(x, inputs.row(r))?;
        let explicit: Vec<f64> = (0..p_len)
            .map(|j| (0..k).map(|c| jac.get(c, j) * residual[c]).sum())
            .collect();

        let row_inputs = inputs.select_rows(&[r])?;
        let row_soft = soft.select_rows(&[r])?;
        let (_, backprop) = soft_target_loss_and_grad(x, &row_inputs, &row_soft)?;
        jacobian_error = jacobian_error.max(max_abs_error(&explicit, &backprop));
        for (m, e) in explicit_mean.iter_mut().zip(&explicit) {
            *m += e / n as f64;
        }
    }
    let (_, backprop_mean) = soft_target_loss_and_grad(x, inputs, &soft)?;
    jacobian_error = jacobian_error.max(max_abs_error(&explicit_mean, &backprop_mean));

    let arch = x.arch();
    let fd = central_difference(x.theta(), 1e-5, |theta| {
        let probe = ModelParams::new(arch, theta.to_vec()).expect("probe stays finite");
        soft_target_loss_and_grad(&probe, inputs, &soft).expect("shapes checked").0
    });
    Ok(GenericIdentityReport {
        jacobian_error,
        finite_difference_error: max_relative_error(&backprop_mean, &fd),
    })
}
