//! Synthetic classification data, Dirichlet non-IID client splits and the
//! unlabeled distillation pool.

mod format;

use serde::{Deserialize, Serialize};

pub use format::{read_dataset, write_dataset, FORMAT_MAGIC, FORMAT_VERSION};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::RngStream;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    /// Isotropic Gaussian clusters with standard-normal means.
    GaussianMixture { classes: usize, dim: usize, spread: f64 },
    /// Two interleaved 2-D spirals with Gaussian jitter.
    TwoSpirals { noise: f64 },
}

impl DatasetKind {
    pub fn classes(&self) -> usize {
        match *self {
            DatasetKind::GaussianMixture { classes, .. } => classes,
            DatasetKind::TwoSpirals { .. } => 2,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            DatasetKind::GaussianMixture { dim, .. } => dim,
            DatasetKind::TwoSpirals { .. } => 2,
        }
    }
}

/// Where the unlabeled pool comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    InDistribution,
    /// Cluster centres moved by one spread unit along a fixed random direction.
    Shifted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "default_unlabeled")]
    pub n_unlabeled: usize,
    /// Falls back to the run's root seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub pool: PoolMode,
}

fn default_unlabeled() -> usize {
    2000
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::GaussianMixture { classes, dim, spread } => {
                if classes < 2 || dim < 1 || !(spread >= 0.0) || !spread.is_finite() {
                    return Err(Error::config(format!("invalid gaussian mixture {:?}", self.kind)));
                }
            }
            DatasetKind::TwoSpirals { noise } => {
                if !(noise >= 0.0) || !noise.is_finite() {
                    return Err(Error::config(format!("invalid spiral noise {noise}")));
                }
            }
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_unlabeled == 0 {
            return Err(Error::config("dataset counts must all be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub unlabeled: DenseMatrix,
    pub classes: usize,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.unlabeled.cols()
    }
}

struct Sampler {
    kind: DatasetKind,
    means: Vec<Vec<f64>>,
    shift: Vec<f64>,
}

impl Sampler {
    fn new(kind: DatasetKind, rng: &mut RngStream) -> Self {
        let dim = kind.dim();
        let means = (0..kind.classes())
            .map(|_| (0..dim).map(|_| rng.standard_normal()).collect())
            .collect();
        let dir: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = crate::tensor::l2_norm(&dir).max(f64::MIN_POSITIVE);
        let unit = match kind {
            DatasetKind::GaussianMixture { spread, .. } => spread,
            DatasetKind::TwoSpirals { noise } => noise,
        };
        let shift = dir.iter().map(|v| unit * v / norm).collect();
        Self { kind, means, shift }
    }

    fn draw(&self, label: usize, shifted: bool, rng: &mut RngStream) -> Vec<f64> {
        let mut x = match self.kind {
            DatasetKind::GaussianMixture { spread, .. } => self.means[label]
                .iter()
                .map(|m| m + spread * rng.standard_normal())
                .collect::<Vec<_>>(),
            DatasetKind::TwoSpirals { noise } => {
                let t = rng.next_f64();
                let angle = 3.0 * std::f64::consts::PI * t + label as f64 * std::f64::consts::PI;
                let r = 0.1 + t;
                vec![
                    r * angle.cos() + noise * rng.standard_normal(),
                    r * angle.sin() + noise * rng.standard_normal(),
                ]
            }
        };
        if shifted {
            x.iter_mut().zip(&self.shift).for_each(|(v, s)| *v += s);
        }
        x
    }

    fn labeled(&self, n: usize, rng: &mut RngStream) -> Result<Batch> {
        let classes = self.kind.classes();
        let mut data = Vec::with_capacity(n * self.kind.dim());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.below(classes);
            data.extend(self.draw(label, false, rng));
            labels.push(label);
        }
        Batch::new(DenseMatrix::from_vec(n, self.kind.dim(), data)?, labels, classes)
    }
}

/// Train/test/pool from a spec. Each split draws from its own stream, so
/// changing one count never perturbs the others.
pub fn generate(spec: &DatasetSpec, root_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(root_seed);
    let sampler = Sampler::new(spec.kind, &mut RngStream::named(seed, "data-means", 0));
    let train = sampler.labeled(spec.n_train, &mut RngStream::named(seed, "data-train", 0))?;
    let test = sampler.labeled(spec.n_test, &mut RngStream::named(seed, "data-test", 0))?;

    let mut rng = RngStream::named(seed, "data-pool", 0);
    let shifted = spec.pool == PoolMode::Shifted;
    let mut pool = Vec::with_capacity(spec.n_unlabeled * spec.kind.dim());
    for _ in 0..spec.n_unlabeled {
        let label = rng.below(spec.kind.classes());
        pool.extend(sampler.draw(label, shifted, &mut rng));
    }
    Ok(Dataset {
        train,
        test,
        unlabeled: DenseMatrix::from_vec(spec.n_unlabeled, spec.kind.dim(), pool)?,
        classes: spec.kind.classes(),
    })
}

/// Disjoint, covering assignment of training indices to clients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    /// Per-client label counts.
    pub fn class_histograms(&self, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
        self.client_indices
            .iter()
            .map(|idx| {
                let mut h = vec![0; classes];
                for &i in idx {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Checks disjointness, coverage of `0..n` and non-empty clients.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (c, idx) in self.client_indices.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::config(format!("client {c} has no samples")));
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(Error::config(format!("sample {i} duplicated or out of range")));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("partition does not cover the training set"));
        }
        Ok(())
    }
}

/// Per-class Dirichlet split: for each class, proportions `p ~ Dir(α·1_N)`
/// cut that class's shuffled samples at the floored cumulative quantiles.
/// Clients left empty each take one sample from the currently largest
/// client (lowest id on ties).
pub fn dirichlet_partition(
    labels: &[usize],
    num_clients: usize,
    alpha_dir: f64,
    rng: &mut RngStream,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    if !(alpha_dir > 0.0) || !alpha_dir.is_finite() {
        return Err(Error::config(format!("dirichlet concentration must be > 0, got {alpha_dir}")));
    }
    if labels.len() < num_clients {
        return Err(Error::config(format!(
            "{} samples cannot cover {num_clients} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        rng.shuffle(&mut members);
        let mut props: Vec<f64> = (0..num_clients)
            .map(|_| rng.gamma(alpha_dir))
            .collect::<Result<_>>()?;
        let total: f64 = props.iter().sum();
        if total > 0.0 && total.is_finite() {
            props.iter_mut().for_each(|p| *p /= total);
        } else {
            // every gamma draw underflowed: the whole class goes to one client
            props.iter_mut().for_each(|p| *p = 0.0);
            props[rng.below(num_clients)] = 1.0;
        }
        let n = members.len();
        let mut cumulative = 0.0;
        let mut start = 0;
        for (c, p) in props.iter().enumerate() {
            cumulative += p;
            let end = if c + 1 == num_clients {
                n
            } else {
                ((cumulative * n as f64).floor() as usize).clamp(start, n)
            };
            clients[c].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = clients[donor].pop().expect("donor is the largest client");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition { client_indices: clients })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ce_loss_and_grad, evaluate, Architecture, ModelParams};

    fn gm(classes: usize, dim: usize, spread: f64) -> DatasetSpec {
        DatasetSpec {
            kind: DatasetKind::GaussianMixture { classes, dim, spread },
            n_train: 200,
            n_test: 100,
            n_unlabeled: 50,
            seed: None,
            pool: PoolMode::InDistribution,
        }
    }

    #[test]
    fn default_pool_size() {
        let spec: DatasetSpec = toml::from_str(
            "n_train = 10\nn_test = 5\n[kind]\nkind = \"two_spirals\"\nnoise = 0.1\n",
        )
        .unwrap();
        assert_eq!(spec.n_unlabeled, 2000);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&gm(3, 4, 0.5), 7).unwrap();
        let b = generate(&gm(3, 4, 0.5), 7).unwrap();
        assert_eq!(a, b);
        let c = generate(&gm(3, 4, 0.5), 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn zero_spread_is_learnable_to_perfection() {
        let ds = generate(&gm(4, 6, 0.0), 3).unwrap();
        let arch = Architecture::LinearSoftmax { inputs: 6, classes: 4 };
        let mut m = ModelParams::zeros(arch);
        for _ in 0..500 {
            let (_, g) = ce_loss_and_grad(&m, &ds.train).unwrap();
            m.theta_mut().iter_mut().zip(&g).for_each(|(t, gi)| *t -= 1.0 * gi);
        }
        assert_eq!(evaluate(&m, &ds.train).unwrap().accuracy, 1.0);
        assert_eq!(evaluate(&m, &ds.test).unwrap().accuracy, 1.0);
    }

    #[test]
    fn shifted_pool_moves_the_pool_only() {
        let base = generate(&gm(3, 5, 1.0), 4).unwrap();
        let shifted = generate(&DatasetSpec { pool: PoolMode::Shifted, ..gm(3, 5, 1.0) }, 4).unwrap();
        assert_eq!(base.train, shifted.train);
        assert_eq!(base.test, shifted.test);
        let diff: Vec<f64> = base
            .unlabeled
            .row(0)
            .iter()
            .zip(shifted.unlabeled.row(0))
            .map(|(a, b)| b - a)
            .collect();
        assert!((crate::tensor::l2_norm(&diff) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spirals_are_two_dimensional() {
        let spec = DatasetSpec {
            kind: DatasetKind::TwoSpirals { noise: 0.05 },
            ..gm(2, 2, 0.1)
        };
        let ds = generate(&spec, 1).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.classes, 2);
    }

    fn labels(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn single_client_owns_everything() {
        let l = labels(30, 3);
        let p = dirichlet_partition(&l, 1, 0.5, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(p.client_indices[0], (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let l = labels(3, 3);
        assert!(dirichlet_partition(&l, 4, 0.5, &mut RngStream::new(1, 0)).is_err());
        assert!(dirichlet_partition(&l, 2, 0.0, &mut RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn huge_concentration_is_near_uniform() {
        let classes = 4;
        let l = labels(4000, classes);
        let p = dirichlet_partition(&l, 5, 1e6, &mut RngStream::new(2, 0)).unwrap();
        p.validate(l.len()).unwrap();
        let global = 1.0 / classes as f64;
        for h in p.class_histograms(&l, classes) {
            let total: usize = h.iter().sum();
            for count in h {
                let frac = count as f64 / total as f64;
                assert!((frac - global).abs() / global < 0.10);
            }
        }
    }

    #[test]
    fn small_concentration_is_skewed() {
        let classes = 10;
        let l = labels(5000, classes);
        let mut medians = Vec::new();
        for seed in 0..20 {
            let p = dirichlet_partition(&l, 50, 0.1, &mut RngStream::new(seed, 0)).unwrap();
            p.validate(l.len()).unwrap();
            let mut top2: Vec<f64> = p
                .class_histograms(&l, classes)
                .into_iter()
                .map(|mut h| {
                    let total: usize = h.iter().sum();
                    h.sort_unstable_by(|a, b| b.cmp(a));
                    (h[0] + h[1]) as f64 / total as f64
                })
                .collect();
            top2.sort_by(f64::total_cmp);
            medians.push(top2[top2.len() / 2]);
        }
        medians.sort_by(f64::total_cmp);
        assert!(medians[medians.len() / 2] >= 0.8, "{medians:?}");
    }

    #[test]
    fn repair_fills_empty_clients() {
        // 12 samples over 10 clients with tiny concentration leaves gaps before repair
        let l = labels(12, 2);
        for seed in 0..10 {
            let p = dirichlet_partition(&l, 10, 0.05, &mut RngStream::new(seed, 1)).unwrap();
            p.validate(12).unwrap();
        }
    }

    #[test]
    fn partition_ignores_feature_values() {
        let a = generate(&gm(3, 4, 0.5), 1).unwrap();
        let b = generate(&gm(3, 4, 2.5), 1).unwrap();
        assert_eq!(a.train.labels(), b.train.labels());
        let pa = dirichlet_partition(a.train.labels(), 6, 0.3, &mut RngStream::new(9, 0)).unwrap();
        let pb = dirichlet_partition(b.train.labels(), 6, 0.3, &mut RngStream::new(9, 0)).unwrap();
        assert_eq!(pa, pb);
    }
}
