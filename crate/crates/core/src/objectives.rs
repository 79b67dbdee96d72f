//! Local objectives `F_i`, minibatch gradients, data partitioning and the
//! smoothness / noise / heterogeneity constants used by the convergence
//! bound.
//!
//! Three model families share one synthetic data generator: points drawn from
//! a Gaussian mixture with one component per worker.
//!
//! * quadratic: sample `a` contributes `½(x−a)ᵀQ_i(x−a) − ½(a−b_i)ᵀQ_i(a−b_i)`,
//!   so the shard mean is exactly `F_i(x) = ½(x−b_i)ᵀQ_i(x−b_i)` with `b_i`
//!   the shard mean.
//! * logistic: labels in `{0, 1}` from a random linear teacher, perturbed per
//!   mixture component so that local optima genuinely differ, loss
//!   `log(1+e^z) − yz` plus a small ridge term.
//! * mlp: one tanh hidden layer feeding the same logistic head.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::sym_eigenvalues;
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Iid,
    /// A fraction `s` of each shard comes from the worker's own mixture
    /// component; the rest is dealt at random.
    LabelSkew(f64),
}

fn default_batch() -> usize {
    8
}

/// Problem section of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Feature dimension (equals the parameter dimension except for mlp).
    pub d: usize,
    pub n_samples: usize,
    #[serde(default = "default_partition")]
    pub partition: Partition,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Hidden width for mlp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    /// Eigenvalue range of the quadratic curvatures `Q_i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature: Option<[f64; 2]>,
    /// Standard deviation of mixture component centres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spread: Option<f64>,
    /// Within-component standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    /// Size of the per-component teacher perturbation, relative to the
    /// shared teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_shift: Option<f64>,
    /// Held-out set size; defaults to `max(n_samples/4, 100)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heldout: Option<usize>,
}

fn default_partition() -> Partition {
    Partition::Iid
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind, d: usize, n_samples: usize) -> Self {
        Self {
            kind,
            d,
            n_samples,
            partition: Partition::Iid,
            batch_size: default_batch(),
            seed: None,
            hidden: None,
            curvature: None,
            spread: None,
            noise: None,
            l2: None,
            teacher_shift: None,
            n_heldout: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Shard {
    pub features: Vec<DVector<f64>>,
    pub labels: Vec<f64>,
    /// Mixture component each sample came from.
    pub components: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Quadratic {
        q: Vec<DMatrix<f64>>,
        b: Vec<DVector<f64>>,
        /// `½(a−b_i)ᵀQ_i(a−b_i)` per sample.
        offsets: Vec<Vec<f64>>,
    },
    Logistic {
        l2: f64,
    },
    Mlp {
        inputs: usize,
        hidden: usize,
        l2: f64,
    },
}

/// Minibatch of indices into one worker's shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    /// Uniform with replacement.
    pub fn sample<R: Rng + ?Sized>(shard_len: usize, size: usize, rng: &mut R) -> Self {
        Self {
            indices: (0..size).map(|_| rng.gen_range(0..shard_len)).collect(),
        }
    }

    pub fn full(shard_len: usize) -> Self {
        Self {
            indices: (0..shard_len).collect(),
        }
    }
}

/// Gradient oracle the round protocol runs against.
pub trait Objective: Sync {
    fn workers(&self) -> usize;
    fn dim(&self) -> usize;
    fn shard_len(&self, worker: usize) -> usize;
    fn batch_size(&self) -> usize;
    /// Mean loss and gradient over `batch` of `worker`'s shard.
    fn loss_and_grad(&self, worker: usize, x: &DVector<f64>, batch: &Batch) -> (f64, DVector<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    kind: ProblemKind,
    model: Model,
    shards: Vec<Shard>,
    heldout: Shard,
    batch_size: usize,
    optimum: Option<DVector<f64>>,
    f_star: Option<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn random_spd<R: Rng + ?Sized>(d: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let eig = DVector::from_fn(d, |_, _| rng.gen_range(lo..=hi));
    &q * DMatrix::from_diagonal(&eig) * q.transpose()
}

fn shard_sizes(n: usize, m: usize) -> Vec<usize> {
    (0..m).map(|i| n / m + usize::from(i < n % m)).collect()
}

impl Problem {
    /// Quadratic problem from explicit curvatures and per-worker sample
    /// points. `b_i` is the mean of worker `i`'s points.
    pub fn quadratic(q: Vec<DMatrix<f64>>, points: Vec<Vec<DVector<f64>>>, batch_size: usize) -> Result<Self> {
        if q.len() != points.len() || q.len() < 2 {
            return Err(Error::Problem("need matching curvatures and shards for m >= 2 workers".into()));
        }
        if points.iter().any(Vec::is_empty) {
            return Err(Error::Problem("empty shard".into()));
        }
        let d = q[0].nrows();
        if d < 1 {
            return Err(Error::Problem("dimension must be >= 1".into()));
        }
        let shards: Vec<Shard> = points
            .into_iter()
            .map(|features| Shard {
                labels: vec![0.0; features.len()],
                components: vec![0; features.len()],
                features,
            })
            .collect();
        let b: Vec<DVector<f64>> = shards.iter().map(|s| mean_point(&s.features)).collect();
        let offsets = shards
            .iter()
            .zip(q.iter().zip(&b))
            .map(|(s, (qi, bi))| {
                s.features
                    .iter()
                    .map(|a| {
                        let diff = a - bi;
                        0.5 * diff.dot(&(qi * &diff))
                    })
                    .collect()
            })
            .collect();

        let m = q.len();
        let qsum = q.iter().fold(DMatrix::zeros(d, d), |acc, qi| acc + qi);
        let rhs = q.iter().zip(&b).fold(DVector::zeros(d), |acc, (qi, bi)| acc + qi * bi);
        let optimum = qsum
            .cholesky()
            .ok_or_else(|| Error::Problem("sum of curvatures is not positive definite".into()))?
            .solve(&rhs);
        let f_star = q
            .iter()
            .zip(&b)
            .map(|(qi, bi)| {
                let diff = &optimum - bi;
                0.5 * diff.dot(&(qi * &diff))
            })
            .sum::<f64>()
            / m as f64;
        Ok(Self {
            kind: ProblemKind::Quadratic,
            model: Model::Quadratic { q, b, offsets },
            shards,
            heldout: Shard::default(),
            batch_size,
            optimum: Some(optimum),
            f_star: Some(f_star),
        })
    }

    pub fn kind(&self) -> ProblemKind {
        self.kind
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn heldout(&self) -> &Shard {
        &self.heldout
    }

    /// Global minimiser, known for quadratics.
    pub fn optimum(&self) -> Option<&DVector<f64>> {
        self.optimum.as_ref()
    }

    /// Minimum of `F = (1/m) Σ F_i`, known for quadratics.
    pub fn f_star(&self) -> Option<f64> {
        self.f_star
    }

    pub fn curvatures(&self) -> Option<&[DMatrix<f64>]> {
        match &self.model {
            Model::Quadratic { q, .. } => Some(q),
            _ => None,
        }
    }

    pub fn centers(&self) -> Option<&[DVector<f64>]> {
        match &self.model {
            Model::Quadratic { b, .. } => Some(b),
            _ => None,
        }
    }

    fn sample_loss_grad(&self, worker: usize, x: &DVector<f64>, shard: &Shard, idx: usize, grad: &mut DVector<f64>) -> f64 {
        let a = &shard.features[idx];
        match &self.model {
            Model::Quadratic { q, offsets, .. } => {
                let diff = x - a;
                let g = &q[worker] * &diff;
                let loss = 0.5 * diff.dot(&g) - offsets[worker][idx];
                *grad += g;
                loss
            }
            Model::Logistic { .. } => {
                let y = shard.labels[idx];
                let z = x.dot(a);
                grad.axpy(sigmoid(z) - y, a, 1.0);
                softplus(z) - y * z
            }
            Model::Mlp { inputs, hidden, .. } => {
                let (p, h) = (*inputs, *hidden);
                let y = shard.labels[idx];
                let w2_off = h * p + h;
                let mut act = vec![0.0; h];
                let mut z = x[w2_off + h];
                for (k, ak) in act.iter_mut().enumerate() {
                    let mut pre = x[h * p + k];
                    for j in 0..p {
                        pre += x[k * p + j] * a[j];
                    }
                    *ak = pre.tanh();
                    z += x[w2_off + k] * *ak;
                }
                let dz = sigmoid(z) - y;
                for (k, &ak) in act.iter().enumerate() {
                    grad[w2_off + k] += dz * ak;
                    let dpre = dz * x[w2_off + k] * (1.0 - ak * ak);
                    grad[h * p + k] += dpre;
                    for j in 0..p {
                        grad[k * p + j] += dpre * a[j];
                    }
                }
                grad[w2_off + h] += dz;
                softplus(z) - y * z
            }
        }
    }

    fn l2(&self) -> f64 {
        match &self.model {
            Model::Quadratic { .. } => 0.0,
            Model::Logistic { l2 } | Model::Mlp { l2, .. } => *l2,
        }
    }

    /// Mean loss and gradient over arbitrary samples of `shard`, scored with
    /// worker `worker`'s local model.
    fn batch_loss_grad(&self, worker: usize, x: &DVector<f64>, shard: &Shard, indices: &[usize]) -> (f64, DVector<f64>) {
        if let Model::Quadratic { q, .. } = &self.model {
            // Q(x − ā) with ā summed in index order; the full batch reproduces b_i bit for bit.
            let mut loss = 0.0;
            let mut grad = DVector::zeros(x.len());
            for &i in indices {
                loss += self.sample_loss_grad(worker, x, shard, i, &mut grad);
            }
            let n = indices.len() as f64;
            let abar = mean_point_indexed(&shard.features, indices);
            return (loss / n, &q[worker] * (x - abar));
        }
        let mut grad = DVector::zeros(x.len());
        let mut loss = 0.0;
        for &i in indices {
            loss += self.sample_loss_grad(worker, x, shard, i, &mut grad);
        }
        let n = indices.len() as f64;
        grad /= n;
        loss /= n;
        let l2 = self.l2();
        if l2 > 0.0 {
            grad.axpy(l2, x, 1.0);
            loss += 0.5 * l2 * x.norm_squared();
        }
        (loss, grad)
    }

    pub fn local_loss(&self, worker: usize, x: &DVector<f64>) -> f64 {
        self.full_loss_grad(worker, x).0
    }

    pub fn full_grad(&self, worker: usize, x: &DVector<f64>) -> DVector<f64> {
        self.full_loss_grad(worker, x).1
    }

    pub fn full_loss_grad(&self, worker: usize, x: &DVector<f64>) -> (f64, DVector<f64>) {
        if let Model::Quadratic { q, b, .. } = &self.model {
            let diff = x - &b[worker];
            let g = &q[worker] * &diff;
            return (0.5 * diff.dot(&g), g);
        }
        let shard = &self.shards[worker];
        self.batch_loss_grad(worker, x, shard, &Batch::full(shard.len()).indices)
    }

    /// `F(x) = (1/m) Σ F_i(x)`.
    pub fn global_loss(&self, x: &DVector<f64>) -> f64 {
        (0..self.workers()).map(|i| self.local_loss(i, x)).sum::<f64>() / self.workers() as f64
    }

    /// `(1/m) Σ ∇F_i(x)`.
    pub fn global_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.workers();
        (0..m).fold(DVector::zeros(x.len()), |acc, i| acc + self.full_grad(i, x)) / m as f64
    }

    /// Held-out score: squared distance to the optimum for quadratics, mean
    /// held-out data loss otherwise.
    pub fn eval_loss(&self, x: &DVector<f64>) -> f64 {
        if let Some(opt) = &self.optimum {
            return (x - opt).norm_squared();
        }
        let h = &self.heldout;
        let mut grad = DVector::zeros(x.len());
        let total: f64 = (0..h.len())
            .map(|i| self.sample_loss_grad(0, x, h, i, &mut grad))
            .sum();
        total / h.len() as f64
    }

    /// `(1/m) Σ_i ‖∇F_i(x) − ∇F(x)‖²`.
    pub fn heterogeneity(&self, x: &DVector<f64>) -> f64 {
        let m = self.workers();
        let grads: Vec<DVector<f64>> = (0..m).map(|i| self.full_grad(i, x)).collect();
        let mean = grads.iter().fold(DVector::zeros(x.len()), |acc, g| acc + g) / m as f64;
        grads.iter().map(|g| (g - &mean).norm_squared()).sum::<f64>() / m as f64
    }
}

fn mean_point(points: &[DVector<f64>]) -> DVector<f64> {
    let idx: Vec<usize> = (0..points.len()).collect();
    mean_point_indexed(points, &idx)
}

fn mean_point_indexed(points: &[DVector<f64>], indices: &[usize]) -> DVector<f64> {
    let mut acc = DVector::zeros(points[indices[0]].len());
    for &i in indices {
        acc += &points[i];
    }
    acc / indices.len() as f64
}

impl Objective for Problem {
    fn workers(&self) -> usize {
        self.shards.len()
    }

    fn dim(&self) -> usize {
        match &self.model {
            Model::Quadratic { b, .. } => b[0].len(),
            Model::Logistic { .. } => self.shards[0].features[0].len(),
            Model::Mlp { inputs, hidden, .. } => hidden * inputs + 2 * hidden + 1,
        }
    }

    fn shard_len(&self, worker: usize) -> usize {
        self.shards[worker].len()
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn loss_and_grad(&self, worker: usize, x: &DVector<f64>, batch: &Batch) -> (f64, DVector<f64>) {
        self.batch_loss_grad(worker, x, &self.shards[worker], &batch.indices)
    }
}

/// Stochastic gradient of `F_i` at `x` on `batch`.
pub fn stoch_grad(p: &Problem, worker: usize, x: &DVector<f64>, batch: &Batch) -> DVector<f64> {
    p.loss_and_grad(worker, x, batch).1
}

/// `‖(1/m) Σ_i ∇F_i(x̄)‖²` with full local data.
pub fn global_grad_norm(p: &Problem, x_bar: &DVector<f64>) -> f64 {
    p.global_grad(x_bar).norm_squared()
}

/// Deterministic synthetic problem for `m` workers. `spec.seed`, when set,
/// overrides `seed`.
pub fn make_problem(spec: &ProblemSpec, m: usize, seed: u64) -> Result<Problem> {
    if spec.d < 1 {
        return Err(Error::Problem("dimension d must be >= 1".into()));
    }
    if m < 2 {
        return Err(Error::Problem(format!("need at least 2 workers, got {m}")));
    }
    if spec.n_samples < m {
        return Err(Error::Problem(format!(
            "{} samples cannot fill {m} nonempty shards",
            spec.n_samples
        )));
    }
    if spec.batch_size < 1 {
        return Err(Error::Problem("batch_size must be >= 1".into()));
    }
    if let Partition::LabelSkew(s) = spec.partition {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Problem(format!("label_skew fraction {s} not in [0, 1]")));
        }
    }
    let seed = spec.seed.unwrap_or(seed);
    let mut rng = rng::stream(seed, rng::DATA);
    let d = spec.d;
    let spread = spec.spread.unwrap_or(2.0);
    let noise = Normal::new(0.0, spec.noise.unwrap_or(1.0))
        .map_err(|e| Error::Problem(format!("noise: {e}")))?;

    let centers: Vec<DVector<f64>> = (0..m)
        .map(|_| DVector::from_fn(d, |_, _| spread * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let scale = 2.0 / (d as f64).sqrt();
    let teacher = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal) * scale);
    let shift = spec.teacher_shift.unwrap_or(1.0);
    let teachers: Vec<DVector<f64>> = (0..m)
        .map(|_| teacher.map(|t| t + shift * scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let label_of = |a: &DVector<f64>, c: usize, rng: &mut StreamRng| -> f64 {
        if rng.gen_bool(sigmoid(teachers[c].dot(a))) {
            1.0
        } else {
            0.0
        }
    };
    let draw = |c: usize, rng: &mut StreamRng| -> DVector<f64> {
        DVector::from_fn(d, |r, _| centers[c][r] + noise.sample(rng))
    };

    // Component c holds as many samples as shard c will.
    let sizes = shard_sizes(spec.n_samples, m);
    let mut by_component: Vec<Vec<(DVector<f64>, f64)>> = sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            (0..n)
                .map(|_| {
                    let a = draw(c, &mut rng);
                    let y = label_of(&a, c, &mut rng);
                    (a, y)
                })
                .collect()
        })
        .collect();

    let own_fraction = match spec.partition {
        Partition::Iid => 0.0,
        Partition::LabelSkew(s) => s,
    };
    let mut shards: Vec<Shard> = vec![Shard::default(); m];
    let mut pool: Vec<(DVector<f64>, f64, usize)> = Vec::with_capacity(spec.n_samples);
    for (c, samples) in by_component.iter_mut().enumerate() {
        let keep = (own_fraction * sizes[c] as f64).floor() as usize;
        for (i, (a, y)) in samples.drain(..).enumerate() {
            if i < keep {
                shards[c].features.push(a);
                shards[c].labels.push(y);
                shards[c].components.push(c);
            } else {
                pool.push((a, y, c));
            }
        }
    }
    pool.shuffle(&mut rng);
    let mut pool = pool.into_iter();
    for (shard, &size) in shards.iter_mut().zip(&sizes) {
        while shard.len() < size {
            let (a, y, c) = pool.next().expect("pool covers all shards");
            shard.features.push(a);
            shard.labels.push(y);
            shard.components.push(c);
        }
    }

    let n_heldout = spec.n_heldout.unwrap_or((spec.n_samples / 4).max(100));
    let mut heldout = Shard::default();
    for _ in 0..n_heldout {
        let c = rng.gen_range(0..m);
        let a = draw(c, &mut rng);
        let y = label_of(&a, c, &mut rng);
        heldout.features.push(a);
        heldout.labels.push(y);
        heldout.components.push(c);
    }

    let l2 = spec.l2.unwrap_or(1e-3);
    let problem = match spec.kind {
        ProblemKind::Quadratic => {
            let [lo, hi] = spec.curvature.unwrap_or([0.5, 2.0]);
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::Problem(format!("curvature range [{lo}, {hi}] is not positive")));
            }
            let q = (0..m).map(|_| random_spd(d, lo, hi, &mut rng)).collect();
            let points = shards.into_iter().map(|s| s.features).collect();
            let mut p = Problem::quadratic(q, points, spec.batch_size)?;
            p.heldout = heldout;
            return Ok(p);
        }
        ProblemKind::Logistic => Problem {
            kind: ProblemKind::Logistic,
            model: Model::Logistic { l2 },
            shards,
            heldout,
            batch_size: spec.batch_size,
            optimum: None,
            f_star: None,
        },
        ProblemKind::Mlp => Problem {
            kind: ProblemKind::Mlp,
            model: Model::Mlp {
                inputs: d,
                hidden: spec.hidden.unwrap_or(8),
                l2,
            },
            shards,
            heldout,
            batch_size: spec.batch_size,
            optimum: None,
            f_star: None,
        },
    };
    Ok(problem)
}

/// Assumption constants. See [`estimate_constants`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstantEstimates {
    pub l_smooth: f64,
    pub beta_lip: f64,
    pub sigma2: f64,
    pub zeta2: f64,
    pub delta2: f64,
}

/// Iterates visited by a run, plus the largest squared leader gap seen.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub points: Vec<DVector<f64>>,
    pub delta2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantOptions {
    /// Minibatch draws per (point, worker) for the variance estimate.
    pub variance_draws: usize,
    /// Trajectory points used for the variance estimate.
    pub variance_points: usize,
    /// Random point pairs for empirical smoothness.
    pub pairs: usize,
}

impl Default for ConstantOptions {
    fn default() -> Self {
        Self {
            variance_draws: 200,
            variance_points: 4,
            pairs: 200,
        }
    }
}

fn evenly_spaced<T>(items: &[T], count: usize) -> Vec<&T> {
    if items.len() <= count {
        return items.iter().collect();
    }
    (0..count)
        .map(|i| &items[i * (items.len() - 1) / (count - 1).max(1)])
        .collect()
}

/// Empirical minibatch variance `max_{x,i} E‖g_i(x;ξ) − ∇F_i(x)‖²`.
pub fn minibatch_variance<R: Rng + ?Sized>(p: &Problem, points: &[&DVector<f64>], draws: usize, rng: &mut R) -> f64 {
    let mut sigma2: f64 = 0.0;
    for x in points {
        for i in 0..p.workers() {
            let full = p.full_grad(i, x);
            let len = p.shard_len(i);
            let total: f64 = (0..draws)
                .map(|_| {
                    let batch = Batch::sample(len, p.batch_size(), rng);
                    (stoch_grad(p, i, x, &batch) - &full).norm_squared()
                })
                .sum();
            sigma2 = sigma2.max(total / draws as f64);
        }
    }
    sigma2
}

/// Estimates `L`, `β`, `σ²`, `ζ²` over the visited region; `Δ²` comes from
/// the trajectory.
///
/// For quadratics `L` is the largest curvature eigenvalue, and `β` and `ζ²`
/// are maxima of convex functions over the iterates' hull, so evaluating at
/// the iterates is exact. Otherwise all three are sampled: `L` from gradient
/// differences between point pairs, `β` as the largest gradient norm.
pub fn estimate_constants<R: Rng + ?Sized>(
    p: &Problem,
    traj: &Trajectory,
    opts: &ConstantOptions,
    rng: &mut R,
) -> Result<ConstantEstimates> {
    if traj.points.is_empty() {
        return Err(Error::Problem("trajectory sample is empty".into()));
    }
    let m = p.workers();
    let zeta2 = traj.points.iter().map(|x| p.heterogeneity(x)).fold(0.0, f64::max);
    let beta_lip = traj
        .points
        .iter()
        .flat_map(|x| (0..m).map(move |i| (i, x)))
        .map(|(i, x)| p.full_grad(i, x).norm())
        .fold(0.0, f64::max);
    let l_smooth = match p.curvatures() {
        Some(q) => q
            .iter()
            .map(|qi| *sym_eigenvalues(qi).last().expect("nonempty"))
            .fold(0.0, f64::max),
        None => {
            let mut best: f64 = 0.0;
            let n = traj.points.len();
            for _ in 0..opts.pairs {
                let x = &traj.points[rng.gen_range(0..n)];
                let y = if n > 1 {
                    traj.points[rng.gen_range(0..n)].clone()
                } else {
                    x.map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
                };
                let dist = (x - &y).norm();
                if dist < 1e-12 {
                    continue;
                }
                for i in 0..m {
                    let dg = (p.full_grad(i, x) - p.full_grad(i, &y)).norm();
                    best = best.max(dg / dist);
                }
            }
            best
        }
    };
    let var_points = evenly_spaced(&traj.points, opts.variance_points);
    let sigma2 = minibatch_variance(p, &var_points, opts.variance_draws, rng);
    Ok(ConstantEstimates {
        l_smooth,
        beta_lip,
        sigma2,
        zeta2,
        delta2: traj.delta2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logistic(partition: Partition, seed: u64) -> Problem {
        let mut spec = ProblemSpec::new(ProblemKind::Logistic, 5, 800);
        spec.partition = partition;
        make_problem(&spec, 8, seed).unwrap()
    }

    #[test]
    fn identity_quadratic_optimum_at_origin() {
        let q = vec![DMatrix::identity(3, 3); 4];
        let points = (0..4)
            .map(|i| {
                let v = DVector::from_vec(vec![i as f64, -1.0, 2.0]);
                vec![v.clone(), -v]
            })
            .collect();
        let p = Problem::quadratic(q, points, 1).unwrap();
        assert_eq!(p.f_star(), Some(0.0));
        assert!(p.optimum().unwrap().norm() < 1e-15);
        let x0 = DVector::zeros(3);
        assert_eq!(global_grad_norm(&p, &x0), 0.0);
    }

    #[test]
    fn iid_shards_are_even() {
        for (n, m) in [(800, 8), (803, 8), (10, 3)] {
            let spec = ProblemSpec::new(ProblemKind::Logistic, 3, n);
            let p = make_problem(&spec, m, 1).unwrap();
            for s in p.shards() {
                assert!(s.len() == n / m || s.len() == n / m + 1);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(make_problem(&ProblemSpec::new(ProblemKind::Logistic, 0, 100), 4, 0).is_err());
        assert!(make_problem(&ProblemSpec::new(ProblemKind::Logistic, 3, 3), 4, 0).is_err());
    }

    #[test]
    fn quadratic_gradient_closed_form() {
        let spec = ProblemSpec::new(ProblemKind::Quadratic, 4, 80);
        let p = make_problem(&spec, 4, 3).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
        let q = p.curvatures().unwrap();
        let b = p.centers().unwrap();
        for i in 0..4 {
            let g = stoch_grad(&p, i, &x, &Batch::full(p.shard_len(i)));
            assert_eq!(g, &q[i] * (&x - &b[i]));
            let at_center = stoch_grad(&p, i, &b[i], &Batch::full(p.shard_len(i)));
            assert!(at_center.amax() < 1e-12);
        }
        // Shard-mean loss equals the closed form.
        let (loss, _) = p.loss_and_grad(1, &x, &Batch::full(p.shard_len(1)));
        assert!((loss - p.local_loss(1, &x)).abs() < 1e-10);
    }

    #[test]
    fn global_grad_norm_closed_form() {
        let spec = ProblemSpec::new(ProblemKind::Quadratic, 3, 60);
        let p = make_problem(&spec, 3, 8).unwrap();
        let (q, b) = (p.curvatures().unwrap(), p.centers().unwrap());
        let bbar = b.iter().fold(DVector::zeros(3), |a, v| a + v) / 3.0;
        let x = &bbar + DVector::from_vec(vec![0.5, 0.0, -1.0]);
        let expect = (0..3).fold(DVector::zeros(3), |a, i| a + &q[i] * (&x - &b[i])) / 3.0;
        assert!((global_grad_norm(&p, &x) - expect.norm_squared()).abs() < 1e-12);

        // Gradient flow on a convex quadratic shrinks the gradient norm.
        let mut y = x.clone();
        let mut prev = global_grad_norm(&p, &y);
        for _ in 0..50 {
            y -= p.global_grad(&y) * 0.05;
            let cur = global_grad_norm(&p, &y);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    fn fd_check(p: &Problem, tol: f64, seed: u64) {
        let mut rng = rng::stream(seed, "fd");
        let dim = p.dim();
        for trial in 0..10 {
            let x = DVector::from_fn(dim, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
            let i = trial % p.workers();
            let g = p.full_grad(i, &x);
            let h = 1e-6;
            let mut fd = DVector::zeros(dim);
            for k in 0..dim {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                fd[k] = (p.local_loss(i, &xp) - p.local_loss(i, &xm)) / (2.0 * h);
            }
            let rel = (&fd - &g).norm() / g.norm().max(1e-8);
            assert!(rel < tol, "relative error {rel} at trial {trial}");
        }
    }

    #[test]
    fn finite_difference_gradients() {
        let q = make_problem(&ProblemSpec::new(ProblemKind::Quadratic, 5, 40), 4, 1).unwrap();
        fd_check(&q, 1e-5, 1);
        fd_check(&logistic(Partition::Iid, 2), 1e-5, 2);
        let mut mlp = ProblemSpec::new(ProblemKind::Mlp, 4, 200);
        mlp.hidden = Some(5);
        fd_check(&make_problem(&mlp, 4, 3).unwrap(), 1e-4, 3);
    }

    #[test]
    fn minibatch_gradient_is_unbiased() {
        let p = logistic(Partition::LabelSkew(0.5), 4);
        let x = DVector::from_element(5, 0.2);
        let full = p.full_grad(3, &x);
        let mut rng = rng::stream(4, rng::BATCH);
        let draws = 10_000;
        let samples: Vec<DVector<f64>> = (0..draws)
            .map(|_| stoch_grad(&p, 3, &x, &Batch::sample(p.shard_len(3), p.batch_size(), &mut rng)))
            .collect();
        let mean = samples.iter().fold(DVector::zeros(5), |a, g| a + g) / draws as f64;
        for k in 0..5 {
            let var = samples.iter().map(|g| (g[k] - mean[k]).powi(2)).sum::<f64>() / (draws as f64 - 1.0);
            let se = (var / draws as f64).sqrt();
            assert!((mean[k] - full[k]).abs() <= 4.0 * se, "coord {k}");
        }
    }

    #[test]
    fn heterogeneity_grows_with_skew() {
        let probe: Vec<DVector<f64>> = {
            let mut rng = rng::stream(0, "probe");
            (0..5)
                .map(|_| DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect()
        };
        let zeta = |p: &Problem| probe.iter().map(|x| p.heterogeneity(x)).fold(0.0, f64::max);
        let z: Vec<f64> = [0.0, 0.4, 0.8]
            .iter()
            .map(|&s| zeta(&logistic(Partition::LabelSkew(s), 6)))
            .collect();
        assert!(z[0] <= z[1] && z[1] <= z[2], "{z:?}");
        assert!(zeta(&logistic(Partition::Iid, 6)) < z[2]);
    }

    #[test]
    fn constants_exact_for_scaled_identity() {
        let c = 1.7;
        let q = vec![DMatrix::identity(2, 2) * c; 3];
        let points = (0..3)
            .map(|i| vec![DVector::from_vec(vec![i as f64, 1.0]), DVector::from_vec(vec![0.0, -1.0])])
            .collect();
        let mut p = Problem::quadratic(q, points, 2).unwrap();
        let traj = Trajectory {
            points: vec![DVector::zeros(2), DVector::from_vec(vec![1.0, 1.0])],
            delta2: 0.25,
        };
        let mut rng = rng::stream(1, "c");
        let est = estimate_constants(&p, &traj, &ConstantOptions::default(), &mut rng).unwrap();
        assert_eq!(est.l_smooth, c);
        assert_eq!(est.delta2, 0.25);

        // Full-batch "minibatches" carry no noise.
        p.batch_size = 2;
        let full = Trajectory { points: vec![DVector::zeros(2)], delta2: 0.0 };
        let q2 = vec![DMatrix::identity(2, 2); 2];
        let single = Problem::quadratic(q2, vec![vec![DVector::zeros(2)], vec![DVector::from_element(2, 1.0)]], 1).unwrap();
        let est = estimate_constants(&single, &full, &ConstantOptions::default(), &mut rng).unwrap();
        assert_eq!(est.sigma2, 0.0);
    }

    #[test]
    fn unit_batch_variance_matches_analytic() {
        let p = make_problem(&ProblemSpec::new(ProblemKind::Quadratic, 3, 40), 2, 12).unwrap();
        let (q, b) = (p.curvatures().unwrap(), p.centers().unwrap());
        let mut spec_one = p.clone();
        spec_one.batch_size = 1;
        let analytic = (0..2)
            .map(|i| {
                let s = &p.shards()[i];
                s.features
                    .iter()
                    .map(|a| (&q[i] * (a - &b[i])).norm_squared())
                    .sum::<f64>()
                    / s.len() as f64
            })
            .fold(0.0, f64::max);
        let x = DVector::zeros(3);
        let est = minibatch_variance(&spec_one, &[&x], 10_000, &mut rng::stream(3, rng::BATCH));
        assert!((est - analytic).abs() / analytic < 0.1, "{est} vs {analytic}");
    }
}
