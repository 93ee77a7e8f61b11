//! Randomized property suites behind the `verify` subcommand.

use std::fmt;
use std::str::FromStr;

use crate::distill::{
    batch_entropy, clip_gradient, distill_loss_and_grad, interpolate_alpha, verify_identity_generic,
    verify_identity_linear, DistillConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck::{central_difference, max_relative_error};
use crate::model::{ce_loss_and_grad, Architecture, Batch, Logits, ModelParams};
use crate::rng::RngStream;
use crate::tensor::{l2_norm, DenseMatrix};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;
pub const LINEAR_IDENTITY_TOLERANCE: f64 = 1e-10;
pub const JACOBIAN_TOLERANCE: f64 = 1e-8;
pub const ENTROPY_TOLERANCE: f64 = 1e-12;
pub const ONE_HOT_ENTROPY_CEILING: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyKind {
    GradFd,
    IdentityLinear,
    IdentityGeneric,
    Clip,
    Entropy,
}

impl VerifyKind {
    pub const ALL: [VerifyKind; 5] = [
        VerifyKind::GradFd,
        VerifyKind::IdentityLinear,
        VerifyKind::IdentityGeneric,
        VerifyKind::Clip,
        VerifyKind::Entropy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VerifyKind::GradFd => "grad-fd",
            VerifyKind::IdentityLinear => "identity-linear",
            VerifyKind::IdentityGeneric => "identity-generic",
            VerifyKind::Clip => "clip",
            VerifyKind::Entropy => "entropy",
        }
    }
}

impl fmt::Display for VerifyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerifyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown verify kind '{s}'")))
    }
}

/// One measured quantity and the bound it must respect.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub max_error: f64,
    pub threshold: f64,
    /// `true` means `max_error <= threshold` passes, `false` means strict `<`.
    pub inclusive: bool,
}

impl Check {
    fn below(name: &'static str, max_error: f64, threshold: f64) -> Self {
        Self { name, max_error, threshold, inclusive: false }
    }

    fn at_most(name: &'static str, max_error: f64, threshold: f64) -> Self {
        Self { name, max_error, threshold, inclusive: true }
    }

    pub fn passed(&self) -> bool {
        if self.inclusive {
            self.max_error <= self.threshold
        } else {
            self.max_error < self.threshold
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub kind: VerifyKind,
    pub trials: usize,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let op = if c.inclusive { "<=" } else { "<" };
            writeln!(
                f,
                "{} {}: max error {:.3e} (threshold {op} {:.1e}) over {} trials: {}",
                self.kind,
                c.name,
                c.max_error,
                c.threshold,
                self.trials,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn verify(kind: VerifyKind, trials: usize, seed: u64) -> Result<VerifyReport> {
    if trials == 0 {
        return Err(Error::config("verify needs at least one trial"));
    }
    let mut rng = RngStream::named(seed, kind.as_str(), 0);
    let checks = match kind {
        VerifyKind::GradFd => grad_fd(trials, &mut rng)?,
        VerifyKind::IdentityLinear => identity_linear(trials, &mut rng)?,
        VerifyKind::IdentityGeneric => identity_generic(trials, &mut rng)?,
        VerifyKind::Clip => clip(trials, &mut rng),
        VerifyKind::Entropy => entropy(trials, &mut rng)?,
    };
    Ok(VerifyReport { kind, trials, checks })
}

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| scale * rng.standard_normal()).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized to fit")
}

fn random_labels(rng: &mut RngStream, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(k)).collect()
}

/// Uniform on `lo..=hi`.
fn between(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn random_arch(rng: &mut RngStream, mlp: bool) -> Architecture {
    let inputs = between(rng, 1, 6);
    let classes = between(rng, 2, 5);
    if mlp {
        Architecture::Mlp { inputs, hidden: between(rng, 1, 6), classes }
    } else {
        Architecture::LinearSoftmax { inputs, classes }
    }
}

/// CE and the blended distillation loss at `α ∈ {0, 0.5, 1}` against
/// central differences, linear and MLP models alternating.
fn grad_fd(trials: usize, rng: &mut RngStream) -> Result<Vec<Check>> {
    let (mut ce_worst, mut fd_worst) = (0.0f64, 0.0f64);
    for trial in 0..trials {
        let arch = random_arch(rng, trial % 2 == 1);
        let m = ModelParams::init(arch, rng)?;
        let n = between(rng, 1, 6);
        let k = arch.num_classes();
        let x = random_matrix(rng, n, arch.input_dim(), 1.0);
        let batch = Batch::new(x.clone(), random_labels(rng, n, k), k)?;
        let at = |t: &[f64]| ModelParams::new(arch, t.to_vec()).expect("same layout");

        let (_, g) = ce_loss_and_grad(&m, &batch)?;
        let fd = central_difference(m.theta(), FD_STEP, |t| ce_loss_and_grad(&at(t), &batch).expect("valid").0);
        ce_worst = ce_worst.max(max_relative_error(&g, &fd));

        let teacher = Logits::new(random_matrix(rng, n, k, 2.0));
        for alpha in [0.0, 0.5, 1.0] {
            let (_, g) = distill_loss_and_grad(&m, &x, &teacher, alpha)?;
            let fd = central_difference(m.theta(), FD_STEP, |t| {
                distill_loss_and_grad(&at(t), &x, &teacher, alpha).expect("valid").0
            });
            fd_worst = fd_worst.max(max_relative_error(&g, &fd));
        }
    }
    Ok(vec![
        Check::below("cross-entropy relative error", ce_worst, FD_TOLERANCE),
        Check::below("distillation loss relative error", fd_worst, FD_TOLERANCE),
    ])
}

fn random_teachers(rng: &mut RngStream, arch: Architecture, count: usize) -> Result<Vec<ModelParams>> {
    (0..count).map(|_| ModelParams::init(arch, rng)).collect()
}

/// Linear-softmax students, `d ≤ 8`, `K ≤ 5`, up to 10 teachers.
fn identity_linear(trials: usize, rng: &mut RngStream) -> Result<Vec<Check>> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let arch = Architecture::LinearSoftmax { inputs: between(rng, 1, 8), classes: between(rng, 2, 5) };
        let x = ModelParams::init(arch, rng)?;
        let count = between(rng, 1, 10);
        let teachers = random_teachers(rng, arch, count)?;
        let n = between(rng, 1, 6);
        let inputs = random_matrix(rng, n, arch.input_dim(), 1.0);
        let labels = random_labels(rng, n, arch.num_classes());
        worst = worst.max(verify_identity_linear(&x, &teachers, &inputs, &labels)?);
    }
    Ok(vec![Check::below("gradient identity absolute error", worst, LINEAR_IDENTITY_TOLERANCE)])
}

/// One-hidden-layer students with `d, h, K ≤ 6`.
fn identity_generic(trials: usize, rng: &mut RngStream) -> Result<Vec<Check>> {
    let (mut jac, mut fd) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let arch = Architecture::Mlp {
            inputs: between(rng, 1, 6),
            hidden: between(rng, 1, 6),
            classes: between(rng, 2, 6),
        };
        let x = ModelParams::init(arch, rng)?;
        let count = between(rng, 1, 6);
        let teachers = random_teachers(rng, arch, count)?;
        let n = between(rng, 1, 6);
        let inputs = random_matrix(rng, n, arch.input_dim(), 1.0);
        let labels = random_labels(rng, n, arch.num_classes());
        let report = verify_identity_generic(&x, &teachers, &inputs, &labels)?;
        jac = jac.max(report.jacobian_error);
        fd = fd.max(report.finite_difference_error);
    }
    Ok(vec![
        Check::below("jacobian form absolute error", jac, JACOBIAN_TOLERANCE),
        Check::below("finite-difference relative error", fd, FD_TOLERANCE),
    ])
}

/// Post-clip norm minus `ν`; must never be positive.
fn clip(trials: usize, rng: &mut RngStream) -> Vec<Check> {
    let mut excess = f64::NEG_INFINITY;
    let mut unclipped_drift = 0.0f64;
    for trial in 0..trials {
        let len = between(rng, 1, 64);
        let scale = 10f64.powf(rng.next_f64() * 8.0 - 4.0);
        let g: Vec<f64> = (0..len).map(|_| scale * rng.standard_normal()).collect();
        let nu = if trial % 10 == 9 { f64::INFINITY } else { 10f64.powf(rng.next_f64() * 6.0 - 3.0) };
        let out = clip_gradient(&g, nu);
        let norm = l2_norm(&out);
        if nu.is_finite() {
            excess = excess.max(norm - nu);
        }
        if l2_norm(&g) <= nu {
            let drift = out.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            unclipped_drift = unclipped_drift.max(drift);
        }
    }
    vec![
        Check::at_most("clipped norm minus nu", excess.max(0.0), 0.0),
        Check::at_most("change to in-ball gradients", unclipped_drift, 0.0),
    ]
}

/// Normalized entropy at its extremes and the α map.
fn entropy(trials: usize, rng: &mut RngStream) -> Result<Vec<Check>> {
    let (mut uniform_err, mut one_hot, mut alpha_range, mut alpha_ends) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..trials {
        let n = between(rng, 1, 8);
        let k = between(rng, 2, 12);
        let offsets: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.standard_normal() * 10.0; k]).collect();
        let uniform = Logits::new(DenseMatrix::from_rows(&offsets)?);
        uniform_err = uniform_err.max((batch_entropy(&uniform)?.normalized - 1.0).abs());

        let peaked: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..k).map(|_| rng.standard_normal()).collect();
                row[rng.below(k)] += 40.0;
                row
            })
            .collect();
        one_hot = one_hot.max(batch_entropy(&Logits::new(DenseMatrix::from_rows(&peaked)?))?.normalized);

        let lo = rng.next_f64();
        let hi = lo + (1.0 - lo) * rng.next_f64();
        let cfg = DistillConfig { alpha_min: lo, alpha_max: hi, ..DistillConfig::default() };
        for _ in 0..16 {
            let a = interpolate_alpha(rng.next_f64(), &cfg);
            let outside = (lo - a).max(a - hi).max(0.0);
            alpha_range = alpha_range.max(outside);
        }
        let ends = (interpolate_alpha(0.0, &cfg) - lo).abs() + (interpolate_alpha(1.0, &cfg) - hi).abs();
        alpha_ends = alpha_ends.max(ends);
    }
    Ok(vec![
        Check::below("uniform teacher entropy distance from 1", uniform_err, ENTROPY_TOLERANCE),
        Check::below("near one-hot teacher entropy", one_hot, ONE_HOT_ENTROPY_CEILING),
        Check::at_most("alpha outside [alpha_min, alpha_max]", alpha_range, 0.0),
        Check::at_most("alpha endpoint mismatch", alpha_ends, 0.0),
    ])
}
