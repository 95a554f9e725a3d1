//! Labelled samples, synthetic sample sources and non-IID partitioning.

pub mod idx;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{keyed_rng, Matrix, Purpose, RngStream, StreamId};

/// Row-major inputs plus one label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    xs: Vec<f64>,
    ys: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, xs: Vec<f64>, ys: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if xs.len() != ys.len() * dim {
            return Err(Error::shape(format!(
                "{} input values for {} labels of dimension {dim}",
                xs.len(),
                ys.len()
            )));
        }
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Dataset::new"));
        }
        Ok(Self { dim, xs, ys })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            xs: Vec::new(),
            ys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn ys(&self) -> &[usize] {
        &self.ys
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    /// Subset in the order given by `indices`.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let mut xs = Vec::with_capacity(indices.len() * self.dim);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            xs.extend_from_slice(self.x(i));
            ys.push(self.ys[i]);
        }
        Dataset { dim: self.dim, xs, ys }
    }

    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &y in &self.ys {
            if y < classes {
                h[y] += 1;
            }
        }
        h
    }

    fn push(&mut self, x: &[f64], y: usize) {
        self.xs.extend_from_slice(x);
        self.ys.push(y);
    }
}

/// A deterministic generator of labelled inputs.
///
/// `draw(class, index, out)` must depend only on the source's own seed,
/// `class` and `index`, so partitions can be built in any order.
pub trait SampleSource: Sync {
    fn classes(&self) -> usize;
    fn dim(&self) -> usize;
    fn draw(&self, class: usize, index: u64, out: &mut [f64]);
}

/// Isotropic unit-variance Gaussian clouds around fixed random class means
/// of norm `class_sep`.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    seed: u64,
    means: Matrix,
}

impl SyntheticWorld {
    pub fn new(classes: usize, dim: usize, class_sep: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if !(class_sep >= 0.0) || !class_sep.is_finite() {
            return Err(Error::invalid(format!(
                "class separation must be non-negative, got {class_sep}"
            )));
        }
        let mut rng = RngStream::new(seed, StreamId::new(0, 0, Purpose::ClassMeans)).rng();
        let mut means = Matrix::zeros(classes, dim);
        for k in 0..classes {
            let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v *= class_sep / norm);
            means.row_mut(k).copy_from_slice(&dir);
        }
        Ok(Self { seed, means })
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }
}

impl SampleSource for SyntheticWorld {
    fn classes(&self) -> usize {
        self.means.rows()
    }

    fn dim(&self) -> usize {
        self.means.cols()
    }

    fn draw(&self, class: usize, index: u64, out: &mut [f64]) {
        let mut rng = keyed_rng(self.seed, &[Purpose::Draw as u64, class as u64, index]);
        for (o, m) in out.iter_mut().zip(self.means.row(class)) {
            *o = m + rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Draws with replacement from a fixed labelled pool, e.g. an IDX file.
#[derive(Clone, Debug)]
pub struct PooledSource {
    seed: u64,
    data: Dataset,
    classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl PooledSource {
    pub fn new(data: Dataset, classes: usize, seed: u64) -> Result<Self> {
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in data.ys().iter().enumerate() {
            if y >= classes {
                return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
            }
            by_class[y].push(i);
        }
        if let Some(k) = by_class.iter().position(|v| v.is_empty()) {
            return Err(Error::invalid(format!("pool has no samples of class {k}")));
        }
        Ok(Self {
            seed,
            data,
            classes,
            by_class,
        })
    }
}

impl SampleSource for PooledSource {
    fn classes(&self) -> usize {
        self.classes
    }

    fn dim(&self) -> usize {
        self.data.dim()
    }

    fn draw(&self, class: usize, index: u64, out: &mut [f64]) {
        let pool = &self.by_class[class];
        let mut rng = keyed_rng(self.seed, &[Purpose::Draw as u64, class as u64, index]);
        out.copy_from_slice(self.data.x(pool[rng.random_range(0..pool.len())]));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// `s%` uniform over all classes, the rest uniform over the group's
    /// dominant classes.
    Shared,
    /// Per-class proportions across clients drawn from `Dir_m(β)`.
    Dirichlet,
    /// Each group sees exactly its class list.
    Pathological,
    /// Explicit per-group label weights.
    Custom,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" | "shared-s" => Ok(Scheme::Shared),
            "dirichlet" => Ok(Scheme::Dirichlet),
            "pathological" => Ok(Scheme::Pathological),
            "custom" => Ok(Scheme::Custom),
            other => Err(Error::invalid(format!("unknown partition scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Shared => "shared",
            Scheme::Dirichlet => "dirichlet",
            Scheme::Pathological => "pathological",
            Scheme::Custom => "custom",
        })
    }
}

/// Per-client training set sizes.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleSizes {
    /// Every client gets the same count.
    Fixed(usize),
    /// One count per client.
    PerClient(Vec<usize>),
    /// Each client draws its count uniformly from the list.
    Choice(Vec<usize>),
}

/// The recipe for a federated partition. Groups are contiguous blocks of
/// client ids; when `m` is not a multiple of `num_groups` the first groups
/// get one extra client each.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub s_percent: f64,
    pub num_groups: usize,
    /// Class lists per group; empty means three consecutive classes per
    /// group with wraparound.
    pub dominant: Vec<Vec<usize>>,
    /// Label weights per group for [`Scheme::Custom`].
    pub custom_weights: Vec<Vec<f64>>,
    pub dirichlet_beta: f64,
    pub train_sizes: SampleSizes,
    pub test_size: usize,
    /// Optional relabelling per group, applied after sampling.
    pub label_permutations: Vec<Option<Vec<usize>>>,
    /// Rotation angle per group in degrees; missing entries mean 0.
    pub rotation_degrees: Vec<f64>,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            scheme: Scheme::Shared,
            s_percent: 20.0,
            num_groups: 5,
            dominant: Vec::new(),
            custom_weights: Vec::new(),
            dirichlet_beta: 1.0,
            train_sizes: SampleSizes::Fixed(600),
            test_size: 300,
            label_permutations: Vec::new(),
            rotation_degrees: Vec::new(),
            seed: 0,
        }
    }
}

/// Three consecutive classes per group, evenly spaced with wraparound.
pub fn default_dominant(num_groups: usize, classes: usize) -> Vec<Vec<usize>> {
    (0..num_groups)
        .map(|g| {
            let start = g * classes / num_groups;
            (0..3.min(classes)).map(|o| (start + o) % classes).collect()
        })
        .collect()
}

/// Group index of every client.
pub fn group_assignment(clients: usize, num_groups: usize) -> Vec<usize> {
    let base = clients / num_groups;
    let extra = clients % num_groups;
    let mut out = Vec::with_capacity(clients);
    for g in 0..num_groups {
        let size = base + usize::from(g < extra);
        out.extend(std::iter::repeat_n(g, size));
    }
    out
}

impl PartitionSpec {
    pub fn validate(&self, classes: usize, clients: usize) -> Result<()> {
        if clients == 0 {
            return Err(Error::invalid("need at least one client"));
        }
        if !(0.0..=100.0).contains(&self.s_percent) {
            return Err(Error::invalid(format!(
                "s_percent must lie in [0, 100], got {}",
                self.s_percent
            )));
        }
        if self.num_groups == 0 || self.num_groups > clients {
            return Err(Error::invalid(format!(
                "num_groups must lie in 1..={clients}, got {}",
                self.num_groups
            )));
        }
        if !(self.dirichlet_beta > 0.0) || !self.dirichlet_beta.is_finite() {
            return Err(Error::invalid("dirichlet_beta must be positive"));
        }
        if self.test_size == 0 {
            return Err(Error::invalid("test_size must be at least 1"));
        }
        match &self.train_sizes {
            SampleSizes::Fixed(n) if *n == 0 => return Err(Error::invalid("sample counts must be at least 1")),
            SampleSizes::PerClient(v) if v.len() != clients => {
                return Err(Error::invalid(format!(
                    "{} per-client sizes for {clients} clients",
                    v.len()
                )))
            }
            SampleSizes::PerClient(v) | SampleSizes::Choice(v) if v.is_empty() || v.contains(&0) => {
                return Err(Error::invalid("sample counts must be at least 1"))
            }
            _ => {}
        }
        let dominant = self.dominant_sets(classes);
        if dominant.len() < self.num_groups {
            return Err(Error::invalid("fewer dominant class lists than groups"));
        }
        for set in &dominant {
            if let Some(k) = set.iter().find(|k| **k >= classes) {
                return Err(Error::invalid(format!("dominant class {k} out of range")));
            }
        }
        let needs_dominant =
            matches!(self.scheme, Scheme::Pathological) || (self.scheme == Scheme::Shared && self.s_percent < 100.0);
        if needs_dominant && dominant.iter().take(self.num_groups).any(|s| s.is_empty()) {
            return Err(Error::invalid("dominant class set is empty"));
        }
        if self.scheme == Scheme::Custom {
            if self.custom_weights.len() < self.num_groups {
                return Err(Error::invalid("custom scheme needs label weights for every group"));
            }
            for w in &self.custom_weights {
                if w.len() != classes || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::invalid(
                        "custom label weights must be K non-negative values with positive sum",
                    ));
                }
            }
        }
        for perm in self.label_permutations.iter().flatten() {
            let mut seen = vec![false; classes];
            if perm.len() != classes
                || perm
                    .iter()
                    .any(|&p| p >= classes || std::mem::replace(&mut seen[p], true))
            {
                return Err(Error::invalid("label permutation is not a bijection of the classes"));
            }
        }
        if self.rotation_degrees.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("rotation angles must be finite"));
        }
        Ok(())
    }

    fn dominant_sets(&self, classes: usize) -> Vec<Vec<usize>> {
        if self.dominant.is_empty() {
            default_dominant(self.num_groups, classes)
        } else {
            self.dominant.clone()
        }
    }

    fn train_size(&self, client: usize) -> usize {
        match &self.train_sizes {
            SampleSizes::Fixed(n) => *n,
            SampleSizes::PerClient(v) => v[client],
            SampleSizes::Choice(v) => {
                let mut rng = RngStream::new(self.seed, StreamId::new(client as u64, 0, Purpose::Quantity)).rng();
                v[rng.random_range(0..v.len())]
            }
        }
    }

    /// Label mixture of every client, before any relabelling.
    pub fn label_weights(&self, classes: usize, clients: usize) -> Result<Vec<Vec<f64>>> {
        self.validate(classes, clients)?;
        let groups = group_assignment(clients, self.num_groups);
        let dominant = self.dominant_sets(classes);
        let uniform = vec![1.0 / classes as f64; classes];
        let over = |set: &[usize]| {
            let mut w = vec![0.0; classes];
            for &k in set {
                w[k] += 1.0 / set.len() as f64;
            }
            w
        };
        let weights = match self.scheme {
            Scheme::Shared => {
                let s = self.s_percent / 100.0;
                groups
                    .iter()
                    .map(|&g| {
                        let dom = if s < 1.0 {
                            over(&dominant[g])
                        } else {
                            vec![0.0; classes]
                        };
                        uniform.iter().zip(dom).map(|(u, d)| s * u + (1.0 - s) * d).collect()
                    })
                    .collect()
            }
            Scheme::Pathological => groups.iter().map(|&g| over(&dominant[g])).collect(),
            Scheme::Custom => groups
                .iter()
                .map(|&g| {
                    let w = &self.custom_weights[g];
                    let total: f64 = w.iter().sum();
                    w.iter().map(|v| v / total).collect()
                })
                .collect(),
            Scheme::Dirichlet => {
                let props = dirichlet_proportions(classes, clients, self.dirichlet_beta, self.seed)?;
                (0..clients)
                    .map(|i| {
                        let col: Vec<f64> = (0..classes).map(|k| props.get(k, i)).collect();
                        let total: f64 = col.iter().sum();
                        if total > 0.0 {
                            col.iter().map(|v| v / total).collect()
                        } else {
                            uniform.clone()
                        }
                    })
                    .collect()
            }
        };
        Ok(weights)
    }
}

/// `K x m` matrix whose row `k` is the share of class `k` given to each
/// client, drawn from a symmetric Dirichlet with concentration `beta`.
pub fn dirichlet_proportions(classes: usize, clients: usize, beta: f64, seed: u64) -> Result<Matrix> {
    if clients == 0 || classes == 0 {
        return Err(Error::Empty("clients or classes"));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::invalid(format!("dirichlet_beta: {e}")))?;
    let mut out = Matrix::zeros(classes, clients);
    for k in 0..classes {
        let mut rng = RngStream::new(seed, StreamId::new(k as u64, 0, Purpose::Dirichlet)).rng();
        let draws: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let row = out.row_mut(k);
        if total > 0.0 {
            for (dst, v) in row.iter_mut().zip(&draws) {
                *dst = v / total;
            }
        } else {
            row.iter_mut().for_each(|v| *v = 1.0 / clients as f64);
        }
    }
    Ok(out)
}

/// Integer counts summing to `n` whose shares follow `weights`
/// (largest remainder, ties to the lowest index).
pub fn allocate_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// One client's share of the federation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub group_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Orthogonal map that rotates every plane of a random orthonormal basis by
/// `degrees`. Zero degrees gives the identity exactly.
pub fn group_rotation(dim: usize, degrees: f64, seed: u64, group: usize) -> Matrix {
    if degrees == 0.0 {
        return Matrix::identity(dim);
    }
    let mut rng = RngStream::new(seed, StreamId::new(group as u64, 0, Purpose::Transform)).rng();
    // Gram-Schmidt on a Gaussian matrix; basis vectors are the rows of `u`.
    let mut u = Matrix::zeros(dim, dim);
    for r in 0..dim {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            for q in 0..r {
                let proj: f64 = v.iter().zip(u.row(q)).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u.row(q)).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-8 {
                u.row_mut(r).iter_mut().zip(&v).for_each(|(d, a)| *d = a / norm);
                break;
            }
        }
    }
    let (c, s) = (degrees.to_radians().cos(), degrees.to_radians().sin());
    let mut block = Matrix::identity(dim);
    for p in (0..dim - dim % 2).step_by(2) {
        block.set(p, p, c);
        block.set(p, p + 1, -s);
        block.set(p + 1, p, s);
        block.set(p + 1, p + 1, c);
    }
    let ut = u.transpose();
    ut.matmul(&block).and_then(|m| m.matmul(&u)).expect("square factors")
}

/// Builds every client's train and test split. The output depends only on
/// `spec`, the source and `clients`.
pub fn partition(spec: &PartitionSpec, source: &dyn SampleSource, clients: usize) -> Result<Vec<ClientDataset>> {
    let classes = source.classes();
    let dim = source.dim();
    let weights = spec.label_weights(classes, clients)?;
    let groups = group_assignment(clients, spec.num_groups);
    let rotations: Vec<Option<Matrix>> = (0..spec.num_groups)
        .map(|g| {
            let deg = spec.rotation_degrees.get(g).copied().unwrap_or(0.0);
            (deg != 0.0).then(|| group_rotation(dim, deg, spec.seed, g))
        })
        .collect();
    let mut buf = vec![0.0; dim];
    let mut out = Vec::with_capacity(clients);
    for (client, w) in weights.iter().enumerate() {
        let g = groups[client];
        let perm = spec.label_permutations.get(g).and_then(|p| p.as_ref());
        let rotation = rotations[g].as_ref();
        let mut split = |split: u64, n: usize| -> Dataset {
            let counts = allocate_counts(w, n);
            let mut ds = Dataset::empty(dim);
            let mut j = 0u64;
            for (class, &c) in counts.iter().enumerate() {
                for _ in 0..c {
                    let index = (spec.seed << 40) ^ ((client as u64) << 24) ^ (split << 22) ^ j;
                    source.draw(class, index, &mut buf);
                    j += 1;
                    let x = match rotation {
                        Some(r) => r.matvec(&buf).expect("rotation matches input dimension"),
                        None => buf.clone(),
                    };
                    let y = perm.map_or(class, |p| p[class]);
                    ds.push(&x, y);
                }
            }
            ds
        };
        let train = split(0, spec.train_size(client));
        let test = split(1, spec.test_size);
        out.push(ClientDataset {
            client_id: client,
            group_id: g,
            train,
            test,
        });
    }
    Ok(out)
}

/// Mean total-variation distance between each client's training label
/// distribution and the pooled one.
pub fn label_heterogeneity(datasets: &[ClientDataset], classes: usize) -> f64 {
    let hists: Vec<Vec<usize>> = datasets.iter().map(|d| d.train.label_histogram(classes)).collect();
    let mut pooled = vec![0.0; classes];
    let mut total = 0.0;
    for h in &hists {
        for (p, c) in pooled.iter_mut().zip(h) {
            *p += *c as f64;
            total += *c as f64;
        }
    }
    if total == 0.0 {
        return 0.0;
    }
    pooled.iter_mut().for_each(|p| *p /= total);
    let tv: f64 = hists
        .iter()
        .map(|h| {
            let n: usize = h.iter().sum();
            h.iter()
                .zip(&pooled)
                .map(|(c, p)| (*c as f64 / n.max(1) as f64 - p).abs())
                .sum::<f64>()
                / 2.0
        })
        .sum();
    tv / hists.len() as f64
}
