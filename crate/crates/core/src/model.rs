//! Classifiers with closed-form losses and gradients.
//!
//! Parameters live in one flat vector. Layouts (all blocks row-major):
//!
//! * `LinearSoftmax { d, K }`: `W` (d × K).
//! * `Mlp { d, h, K }`: `W1` (d × h), `b1` (h), `W2` (h × K), `b2` (K).
//!
//! Loss gradients are computed by pulling a per-row logit gradient back
//! through the network ([`logits_vjp`]); every loss in the crate reduces to
//! "compute dL/dz per row, then pull back".

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    LinearSoftmax { inputs: usize, classes: usize },
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match *self {
            Architecture::LinearSoftmax { inputs, .. } | Architecture::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            Architecture::LinearSoftmax { classes, .. } | Architecture::Mlp { classes, .. } => {
                classes
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::LinearSoftmax { inputs, classes } => inputs * classes,
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => inputs * hidden + hidden + hidden * classes + classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Architecture::LinearSoftmax { inputs, classes } => inputs >= 1 && classes >= 2,
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => inputs >= 1 && hidden >= 1 && classes >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid architecture {self:?}")))
        }
    }
}

/// Offsets of the MLP parameter blocks inside theta.
#[derive(Debug, Clone, Copy)]
struct MlpLayout {
    d: usize,
    h: usize,
    k: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl MlpLayout {
    fn new(d: usize, h: usize, k: usize) -> Self {
        let b1 = d * h;
        let w2 = b1 + h;
        let b2 = w2 + h * k;
        Self { d, h, k, b1, w2, b2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    theta: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::dims("ModelParams::new", arch.param_count(), theta.len()));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("model parameters must be finite"));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            theta: vec![0.0; arch.param_count()],
        }
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases included.
    pub fn init(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let mut theta = Vec::with_capacity(arch.param_count());
        let mut fill = |count: usize, fan_in: usize, theta: &mut Vec<f64>| -> Result<()> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..count {
                theta.push(rng.uniform(-bound, bound)?);
            }
            Ok(())
        };
        match arch {
            Architecture::LinearSoftmax { inputs, classes } => {
                fill(inputs * classes, inputs, &mut theta)?
            }
            Architecture::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                fill(inputs * hidden + hidden, inputs, &mut theta)?;
                fill(hidden * classes + classes, hidden, &mut theta)?;
            }
        }
        Ok(Self { arch, theta })
    }

    #[inline]
    pub fn arch(&self) -> Architecture {
        self.arch
    }

    #[inline]
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    #[inline]
    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    /// `self + delta`, elementwise.
    pub fn add_delta(&self, delta: &[f64]) -> Result<ModelParams> {
        if delta.len() != self.theta.len() {
            return Err(Error::dims("ModelParams::add_delta", self.theta.len(), delta.len()));
        }
        let theta = self.theta.iter().zip(delta).map(|(x, d)| x + d).collect();
        Ok(Self {
            arch: self.arch,
            theta,
        })
    }

    fn check_input(&self, inputs: &DenseMatrix, op: &'static str) -> Result<()> {
        if inputs.cols() != self.arch.input_dim() {
            return Err(Error::dims(op, format!("{} input columns", self.arch.input_dim()), inputs.cols()));
        }
        Ok(())
    }
}

/// Labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: DenseMatrix,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::config("batch must contain at least one sample"));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::dims("Batch::new", inputs.rows(), labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn inputs(&self) -> &DenseMatrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Sub-batch of the listed rows.
    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch { inputs, labels })
    }
}

/// Raw pre-softmax model outputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(DenseMatrix);

impl Logits {
    pub fn new(values: DenseMatrix) -> Self {
        Logits(values)
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_inner(self) -> DenseMatrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(z)))`, max-subtracted.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

struct Forward {
    hidden_pre: Option<DenseMatrix>,
    hidden: Option<DenseMatrix>,
    logits: DenseMatrix,
}

fn block(theta: &[f64], start: usize, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, theta[start..start + rows * cols].to_vec())
        .expect("block size matches layout")
}

fn add_bias(m: &mut DenseMatrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn forward(m: &ModelParams, inputs: &DenseMatrix) -> Result<Forward> {
    m.check_input(inputs, "forward_logits")?;
    let theta = &m.theta;
    match m.arch {
        Architecture::LinearSoftmax { inputs: d, classes } => {
            let w = block(theta, 0, d, classes);
            Ok(Forward {
                hidden_pre: None,
                hidden: None,
                logits: inputs.matmul(&w)?,
            })
        }
        Architecture::Mlp {
            inputs: d,
            hidden,
            classes,
        } => {
            let l = MlpLayout::new(d, hidden, classes);
            let w1 = block(theta, 0, l.d, l.h);
            let w2 = block(theta, l.w2, l.h, l.k);
            let mut pre = inputs.matmul(&w1)?;
            add_bias(&mut pre, &theta[l.b1..l.b1 + l.h]);
            let mut act = pre.clone();
            act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            let mut z = act.matmul(&w2)?;
            add_bias(&mut z, &theta[l.b2..l.b2 + l.k]);
            Ok(Forward {
                hidden_pre: Some(pre),
                hidden: Some(act),
                logits: z,
            })
        }
    }
}

/// Raw logits for every input row.
pub fn forward_logits(m: &ModelParams, inputs: &DenseMatrix) -> Result<Logits> {
    forward(m, inputs).map(|f| Logits(f.logits))
}

/// Accumulates `Xᵀ · G` into `out` (d × c, row-major).
fn accumulate_outer(out: &mut [f64], x: &DenseMatrix, g: &DenseMatrix) {
    let c = g.cols();
    for n in 0..x.rows() {
        let g_row = g.row(n);
        for (i, &xi) in x.row(n).iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &gv) in out[i * c..(i + 1) * c].iter_mut().zip(g_row) {
                *o += xi * gv;
            }
        }
    }
}

fn column_sums(out: &mut [f64], g: &DenseMatrix) {
    for row in g.row_iter() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

fn pull_back(m: &ModelParams, inputs: &DenseMatrix, fwd: &Forward, dlogits: &DenseMatrix) -> Vec<f64> {
    let mut grad = vec![0.0; m.theta.len()];
    match m.arch {
        Architecture::LinearSoftmax { .. } => accumulate_outer(&mut grad, inputs, dlogits),
        Architecture::Mlp {
            inputs: d,
            hidden,
            classes,
        } => {
            let l = MlpLayout::new(d, hidden, classes);
            let pre = fwd.hidden_pre.as_ref().expect("mlp forward keeps activations");
            let act = fwd.hidden.as_ref().expect("mlp forward keeps activations");
            accumulate_outer(&mut grad[l.w2..l.b2], act, dlogits);
            column_sums(&mut grad[l.b2..], dlogits);
            // dH = dZ · W2ᵀ, masked by relu'
            let w2t = block(&m.theta, l.w2, l.h, l.k).transpose();
            let mut dpre = dlogits.matmul(&w2t).expect("shapes follow layout");
            for (g, p) in dpre.data_mut().iter_mut().zip(pre.data()) {
                if *p <= 0.0 {
                    *g = 0.0;
                }
            }
            accumulate_outer(&mut grad[..l.b1], inputs, &dpre);
            column_sums(&mut grad[l.b1..l.w2], &dpre);
        }
    }
    grad
}

/// Vector-Jacobian product: `Σ_rows J_rowᵀ · dlogits_row` for the logit map.
pub fn logits_vjp(m: &ModelParams, inputs: &DenseMatrix, dlogits: &DenseMatrix) -> Result<Vec<f64>> {
    let fwd = forward(m, inputs)?;
    if dlogits.rows() != inputs.rows() || dlogits.cols() != m.arch.num_classes() {
        return Err(Error::dims(
            "logits_vjp",
            format!("{}x{}", inputs.rows(), m.arch.num_classes()),
            format!("{}x{}", dlogits.rows(), dlogits.cols()),
        ));
    }
    Ok(pull_back(m, inputs, &fwd, dlogits))
}

/// Mean-reduced loss over rows of logits, pulled back to theta.
///
/// `row_loss(r, z, dz)` receives row `r`'s logits and must write the
/// gradient of that row's loss with respect to `z` into `dz`, returning the
/// row loss. Both the loss and the gradient are divided by the row count.
pub fn loss_and_grad_by_row<F>(m: &ModelParams, inputs: &DenseMatrix, mut row_loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(usize, &[f64], &mut [f64]) -> f64,
{
    let fwd = forward(m, inputs)?;
    let n = inputs.rows();
    if n == 0 {
        return Err(Error::config("loss over an empty batch"));
    }
    let inv_n = 1.0 / n as f64;
    let mut dz = DenseMatrix::zeros(n, m.arch.num_classes());
    let mut loss = 0.0;
    for r in 0..n {
        let dz_row = dz.row_mut(r);
        loss += row_loss(r, fwd.logits.row(r), dz_row);
        dz_row.iter_mut().for_each(|v| *v *= inv_n);
    }
    let grad = pull_back(m, inputs, &fwd, &dz);
    Ok((loss * inv_n, grad))
}

/// Row cross-entropy against a hard label; writes `σ(z) - onehot` into `dz`.
pub(crate) fn hard_label_row(z: &[f64], label: usize, dz: &mut [f64]) -> f64 {
    let p = softmax(z);
    for (k, (d, pk)) in dz.iter_mut().zip(p).enumerate() {
        *d = if k == label { pk - 1.0 } else { pk };
    }
    log_sum_exp(z) - z[label]
}

/// Mean cross-entropy against hard labels, and its gradient.
pub fn ce_loss_and_grad(m: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    let labels = batch.labels();
    loss_and_grad_by_row(m, batch.inputs(), |r, z, dz| hard_label_row(z, labels[r], dz))
}

/// Mean cross-entropy against soft targets, `-Σ_k s_k log σ(z)_k`, and its
/// gradient. Target rows must be probability vectors.
pub fn soft_target_loss_and_grad(
    m: &ModelParams,
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
) -> Result<(f64, Vec<f64>)> {
    if targets.rows() != inputs.rows() || targets.cols() != m.arch.num_classes() {
        return Err(Error::dims(
            "soft_target_loss_and_grad",
            format!("{}x{}", inputs.rows(), m.arch.num_classes()),
            format!("{}x{}", targets.rows(), targets.cols()),
        ));
    }
    loss_and_grad_by_row(m, inputs, |r, z, dz| {
        let s = targets.row(r);
        let p = softmax(z);
        for ((d, pk), sk) in dz.iter_mut().zip(p).zip(s) {
            *d = pk - sk;
        }
        -s.iter().zip(log_softmax(z)).map(|(sk, lp)| sk * lp).sum::<f64>()
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Top-1 accuracy (lowest-index tie-break) and mean cross-entropy.
pub fn evaluate(m: &ModelParams, test: &Batch) -> Result<Evaluation> {
    let logits = forward_logits(m, test.inputs())?;
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (r, &label) in test.labels().iter().enumerate() {
        let z = logits.row(r);
        if argmax(z) == label {
            correct += 1;
        }
        loss += log_sum_exp(z) - z[label];
    }
    let n = test.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}

/// Explicit Jacobian of the logits of one input with respect to theta
/// (K × P), assembled entry by entry from the layer formulas. Kept separate
/// from the backward pass so the two can check each other.
pub fn logit_jacobian(m: &ModelParams, input: &[f64]) -> Result<DenseMatrix> {
    let d = m.arch.input_dim();
    if input.len() != d {
        return Err(Error::dims("logit_jacobian", d, input.len()));
    }
    let k = m.arch.num_classes();
    let p = m.theta.len();
    let mut jac = DenseMatrix::zeros(k, p);
    match m.arch {
        Architecture::LinearSoftmax { .. } => {
            // z_c = Σ_i a_i W[i, c]
            for c in 0..k {
                for (i, &a) in input.iter().enumerate() {
                    jac.set(c, i * k + c, a);
                }
            }
        }
        Architecture::Mlp { hidden, .. } => {
            let l = MlpLayout::new(d, hidden, k);
            let theta = &m.theta;
            let mut pre = vec![0.0; hidden];
            for (j, pj) in pre.iter_mut().enumerate() {
                let mut s = theta[l.b1 + j];
                for (i, &a) in input.iter().enumerate() {
                    s += a * theta[i * hidden + j];
                }
                *pj = s;
            }
            for c in 0..k {
                for j in 0..hidden {
                    let active = pre[j] > 0.0;
                    let w2 = theta[l.w2 + j * k + c];
                    if active {
                        for (i, &a) in input.iter().enumerate() {
                            jac.set(c, i * hidden + j, w2 * a);
                        }
                        jac.set(c, l.b1 + j, w2);
                        jac.set(c, l.w2 + j * k + c, pre[j]);
                    }
                }
                jac.set(c, l.b2 + c, 1.0);
            }
        }
    }
    Ok(jac)
}
