//! Finite-sample-space analysis of the linear discriminative model
//! `Q(y|x) = (1 + f(x)ᵀg(y)) / K` under the χ² loss
//! `χ²(P, Q) = Σ_{x,y} (P(x,y) − Q(x,y))² / P_X(x)`.
//!
//! Everything here is exact arithmetic on small tables: no training, no
//! sampling except in [`DiscreteWorld::sample_empirical`].

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{dot, keyed_rng, Matrix};
use crate::qpsolve::SimplexQP;
use crate::stats::CentroidSet;

/// Ridge added to the feature second-moment matrix when it is singular.
pub const RIDGE: f64 = 1e-8;

/// A finite input space shared by all clients: one marginal `P_X`, a
/// zero-mean feature table, and one joint distribution per client.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteWorld {
    features: Matrix,
    marginal: Vec<f64>,
    classes: usize,
    joints: Vec<Matrix>,
}

impl DiscreteWorld {
    /// `features` is `S x d`, `marginal` has `S` entries, every conditional
    /// is `S x K` with rows summing to one. The feature table is re-centred
    /// so that `Σ_x P_X(x) f(x) = 0`.
    pub fn new(features: Matrix, marginal: Vec<f64>, conditionals: Vec<Matrix>) -> Result<Self> {
        let s = features.rows();
        if s == 0 || features.cols() == 0 {
            return Err(Error::Empty("feature table"));
        }
        if marginal.len() != s {
            return Err(Error::shape("marginal length does not match feature rows"));
        }
        if marginal.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("marginal has a negative entry"));
        }
        let total: f64 = marginal.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("marginal sums to {total}")));
        }
        let classes = conditionals.first().ok_or(Error::Empty("client conditionals"))?.cols();
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut joints = Vec::with_capacity(conditionals.len());
        for cond in &conditionals {
            if cond.rows() != s || cond.cols() != classes {
                return Err(Error::shape("conditional table has the wrong shape"));
            }
            let mut joint = Matrix::zeros(s, classes);
            for x in 0..s {
                let row = cond.row(x);
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("conditional row {x} is not a distribution")));
                }
                for (dst, p) in joint.row_mut(x).iter_mut().zip(row) {
                    *dst = marginal[x] * p;
                }
            }
            joints.push(joint);
        }
        let mut features = features;
        let d = features.cols();
        let mut mean = vec![0.0; d];
        for x in 0..s {
            for (m, f) in mean.iter_mut().zip(features.row(x)) {
                *m += marginal[x] * f;
            }
        }
        for x in 0..s {
            for (f, m) in features.row_mut(x).iter_mut().zip(&mean) {
                *f -= m;
            }
        }
        Ok(Self {
            features,
            marginal,
            classes,
            joints,
        })
    }

    /// Random world: Gaussian features, a marginal bounded away from zero and
    /// client conditionals drawn as softmax of Gaussian logits.
    pub fn random(inputs: usize, classes: usize, dim: usize, clients: usize, seed: u64) -> Result<Self> {
        let mut rng = keyed_rng(seed, &[inputs as u64, classes as u64, dim as u64, clients as u64]);
        let feats: Vec<f64> = (0..inputs * dim).map(|_| rng.sample(StandardNormal)).collect();
        let weight = Uniform::new(0.5, 1.5).expect("valid range");
        let raw: Vec<f64> = (0..inputs).map(|_| weight.sample(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        let marginal = raw.iter().map(|w| w / total).collect();
        let mut conditionals = Vec::with_capacity(clients);
        for _ in 0..clients {
            let mut cond = Vec::with_capacity(inputs * classes);
            for _ in 0..inputs {
                let logits: Vec<f64> = (0..classes).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                cond.extend(logits.iter().map(|l| l.exp() / z));
            }
            conditionals.push(Matrix::new(inputs, classes, cond)?);
        }
        Self::new(Matrix::new(inputs, dim, feats)?, marginal, conditionals)
    }

    pub fn inputs(&self) -> usize {
        self.features.rows()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn clients(&self) -> usize {
        self.joints.len()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    pub fn joint(&self, client: usize) -> &Matrix {
        &self.joints[client]
    }

    /// `E_{P_X}[f]`, zero up to rounding.
    pub fn feature_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for x in 0..self.inputs() {
            for (m, f) in mean.iter_mut().zip(self.features.row(x)) {
                *m += self.marginal[x] * f;
            }
        }
        mean
    }

    /// `Λ_f = E_{P_X}[f fᵀ]`
    pub fn second_moment(&self) -> Matrix {
        let d = self.dim();
        let mut lambda = Matrix::zeros(d, d);
        for x in 0..self.inputs() {
            let f = self.features.row(x);
            let p = self.marginal[x];
            for a in 0..d {
                for b in 0..d {
                    let v = lambda.get(a, b) + p * f[a] * f[b];
                    lambda.set(a, b, v);
                }
            }
        }
        lambda
    }

    fn inverse_second_moment(&self, ridge: Option<f64>) -> Result<Matrix> {
        let lambda = self.second_moment();
        match lambda.inverse() {
            Ok(inv) => Ok(inv),
            Err(Error::Singular) => match ridge {
                Some(eps) => lambda.add(&Matrix::identity(self.dim()).scale(eps)?)?.inverse(),
                None => Err(Error::Singular),
            },
            Err(e) => Err(e),
        }
    }

    /// Empirical joint of `n` i.i.d. draws from `client`'s distribution.
    pub fn sample_empirical<R: Rng + ?Sized>(&self, client: usize, n: usize, rng: &mut R) -> Matrix {
        let joint = self.joint(client).as_slice();
        let mut cdf = Vec::with_capacity(joint.len());
        let mut acc = 0.0;
        for p in joint {
            acc += p;
            cdf.push(acc);
        }
        let mut counts = vec![0usize; joint.len()];
        for _ in 0..n {
            let u = rng.random::<f64>() * acc;
            let cell = cdf.partition_point(|c| *c <= u).min(joint.len() - 1);
            counts[cell] += 1;
        }
        let data = counts.iter().map(|c| *c as f64 / n as f64).collect();
        Matrix::new(self.inputs(), self.classes, data).expect("finite frequencies")
    }

    /// `h(l, y) = Σ_x P_l(x, y) f(x)` as a `K x d` matrix.
    fn class_moments(&self, joint: &Matrix) -> Matrix {
        let (k, d) = (self.classes, self.dim());
        let mut h = Matrix::zeros(k, d);
        for x in 0..self.inputs() {
            let f = self.features.row(x);
            for y in 0..k {
                let p = joint.get(x, y);
                for (dst, fv) in h.row_mut(y).iter_mut().zip(f) {
                    *dst += p * fv;
                }
            }
        }
        h
    }
}

/// `g(y)` for every class, stored as a `K x d` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    g: Matrix,
}

impl LinearClassifier {
    pub fn new(g: Matrix) -> Result<Self> {
        if !g.is_finite() {
            return Err(Error::NonFinite("LinearClassifier::new"));
        }
        Ok(Self { g })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            g: Matrix::zeros(classes, dim),
        }
    }

    pub fn table(&self) -> &Matrix {
        &self.g
    }

    pub fn classes(&self) -> usize {
        self.g.rows()
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Ok(Self { g: self.g.scale(k)? })
    }

    /// `Σ_j w_j g_j`
    pub fn combine(weights: &[f64], parts: &[LinearClassifier]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("classifiers to combine"))?;
        if weights.len() != parts.len() {
            return Err(Error::shape("one weight per classifier required"));
        }
        let mut g = Matrix::zeros(first.g.rows(), first.g.cols());
        for (w, part) in weights.iter().zip(parts) {
            if part.g.rows() != g.rows() || part.g.cols() != g.cols() {
                return Err(Error::shape("classifier tables differ in shape"));
            }
            for (dst, v) in g.as_mut_slice().iter_mut().zip(part.g.as_slice()) {
                *dst += w * v;
            }
        }
        Ok(Self { g })
    }
}

fn check_joint(world: &DiscreteWorld, p: &Matrix, what: &str) -> Result<()> {
    if p.rows() != world.inputs() || p.cols() != world.classes() {
        return Err(Error::shape(format!("{what} is not an S x K table")));
    }
    Ok(())
}

/// `Σ_{x,y} (P(x,y) − Q(x,y))² / P_X(x)`
pub fn chi2_distance(world: &DiscreteWorld, p: &Matrix, q: &Matrix) -> Result<f64> {
    check_joint(world, p, "P")?;
    check_joint(world, q, "Q")?;
    let mut total = 0.0;
    for x in 0..world.inputs() {
        let px = world.marginal[x];
        if px <= 0.0 {
            return Err(Error::ZeroMarginal(x));
        }
        let row: f64 = p.row(x).iter().zip(q.row(x)).map(|(a, b)| (a - b) * (a - b)).sum();
        total += row / px;
    }
    Ok(total)
}

/// `P_X(x) (1 + f(x)ᵀg(y)) / K`. Entries may fall outside `[0, 1]`.
pub fn model_joint(world: &DiscreteWorld, g: &LinearClassifier) -> Matrix {
    let k = world.classes();
    let mut out = Matrix::zeros(world.inputs(), k);
    for x in 0..world.inputs() {
        let f = world.features.row(x);
        let px = world.marginal[x];
        for y in 0..k {
            out.set(x, y, px * (1.0 + dot(f, g.g.row(y))) / k as f64);
        }
    }
    out
}

/// Minimiser of `χ²(P̂, P_X·Q(g))`:
/// `ĝ(y) = K · Λ_f⁻¹ Σ_x P̂(x, y) f(x)`.
///
/// Falls back to `Λ_f + 1e-8·I` when `Λ_f` is singular.
pub fn fit_classifier_closed_form(world: &DiscreteWorld, p_hat: &Matrix) -> Result<LinearClassifier> {
    fit_classifier_closed_form_with_ridge(world, p_hat, Some(RIDGE))
}

/// As [`fit_classifier_closed_form`], but a singular `Λ_f` is an error when
/// `ridge` is `None`.
pub fn fit_classifier_closed_form_with_ridge(
    world: &DiscreteWorld,
    p_hat: &Matrix,
    ridge: Option<f64>,
) -> Result<LinearClassifier> {
    check_joint(world, p_hat, "P_hat")?;
    let inv = world.inverse_second_moment(ridge)?;
    let moments = world.class_moments(p_hat);
    let k = world.classes() as f64;
    let mut g = Matrix::zeros(world.classes(), world.dim());
    for y in 0..world.classes() {
        let v = inv.matvec(moments.row(y))?;
        for (dst, val) in g.row_mut(y).iter_mut().zip(v) {
            *dst = k * val;
        }
    }
    LinearClassifier::new(g)
}

/// `(2/n) Σ_l (c_{y_l} − f(x_l))ᵀ g(y_l) / K` from per-sample features
/// (`n x d`) and class centroids.
pub fn generalization_gap_estimate(
    features: &Matrix,
    labels: &[usize],
    centroids: &CentroidSet,
    g: &LinearClassifier,
) -> Result<f64> {
    if features.rows() != labels.len() {
        return Err(Error::shape("one label per feature row required"));
    }
    if labels.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let k = g.classes();
    let mut total = 0.0;
    for (l, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        let c = centroids.get(y).ok_or(Error::MissingCentroid(y))?;
        let f = features.row(l);
        let diff: Vec<f64> = c.iter().zip(f).map(|(a, b)| a - b).collect();
        total += dot(&diff, g.g.row(y));
    }
    Ok(2.0 * total / (labels.len() as f64 * k as f64))
}

/// The three parts of `χ²(P, P_X·Q(g))` when `P` is seen through its
/// empirical estimate `P̂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossDecomposition {
    /// `χ²(P̂, P_X·Q(g))`
    pub empirical: f64,
    /// `(2/K) Σ (P̂ − P)(x,y) f(x)ᵀg(y)`, the only part that depends on `g`
    /// besides the empirical loss.
    pub gap: f64,
    /// Everything independent of `g`.
    pub constant: f64,
}

impl LossDecomposition {
    pub fn total(&self) -> f64 {
        self.empirical + self.gap + self.constant
    }
}

/// Splits the true testing loss into empirical loss, a term linear in `g`,
/// and a `g`-free remainder. The parts sum to `χ²(P, P_X·Q(g))` exactly.
pub fn decompose_test_loss(
    world: &DiscreteWorld,
    p_true: &Matrix,
    p_hat: &Matrix,
    g: &LinearClassifier,
) -> Result<LossDecomposition> {
    check_joint(world, p_true, "P")?;
    check_joint(world, p_hat, "P_hat")?;
    let model = model_joint(world, g);
    let empirical = chi2_distance(world, p_hat, &model)?;
    let k = world.classes() as f64;
    let mut gap = 0.0;
    let mut constant = 0.0;
    for x in 0..world.inputs() {
        let px = world.marginal[x];
        let f = world.features.row(x);
        for y in 0..world.classes() {
            let (p, ph) = (p_true.get(x, y), p_hat.get(x, y));
            let delta = p - ph;
            gap -= 2.0 * delta * dot(f, g.g.row(y)) / k;
            constant += delta * delta / px + 2.0 * delta * ph / px - 2.0 * delta / k;
        }
    }
    Ok(LossDecomposition {
        empirical,
        gap,
        constant,
    })
}

/// KL divergence and χ² distance (normalised by the uniform label prior)
/// between the uniform conditional and the model `Q(y|x) = (1 + ε f(x)ᵀg(y))/K`.
///
/// Returns `(kl, chi2)`; for small `ε`, `kl ≈ chi2 / 2`. The model is a
/// proper conditional (and `kl ≥ 0`) when `Σ_y g(y) = 0`.
pub fn kl_chi2_relation_check(world: &DiscreteWorld, g: &LinearClassifier, eps: f64) -> Result<(f64, f64)> {
    if !(eps >= 0.0) {
        return Err(Error::invalid(format!(
            "perturbation scale must be non-negative, got {eps}"
        )));
    }
    if g.classes() != world.classes() || g.g.cols() != world.dim() {
        return Err(Error::shape("classifier does not match world"));
    }
    let k = world.classes() as f64;
    let (mut kl, mut chi2) = (0.0, 0.0);
    for x in 0..world.inputs() {
        let px = world.marginal[x];
        let f = world.features.row(x);
        for y in 0..world.classes() {
            let delta = eps * dot(f, g.g.row(y));
            if 1.0 + delta <= 0.0 {
                return Err(Error::invalid(format!(
                    "model probability at input {x}, class {y} is not positive"
                )));
            }
            kl -= px * delta.ln_1p() / k;
            chi2 += px * delta * delta / k;
        }
    }
    Ok((kl, chi2))
}

/// Sampling variance `V_j` of client `j`'s closed-form classifier, measured
/// with the exact feature second moment:
/// `Σ_y tr(Λ⁻¹ Σ_x P_j(x,y) f fᵀ) − h(j,y)ᵀ Λ⁻¹ h(j,y)`.
pub fn variance_term(world: &DiscreteWorld, client: usize) -> Result<f64> {
    let inv = world.inverse_second_moment(None)?;
    let joint = world.joint(client);
    let h = world.class_moments(joint);
    let d = world.dim();
    let mut v = 0.0;
    for y in 0..world.classes() {
        for x in 0..world.inputs() {
            let f = world.features.row(x);
            let inv_f = inv.matvec(f)?;
            v += joint.get(x, y) * dot(f, &inv_f);
        }
        let hy = h.row(y);
        let inv_h = inv.matvec(hy)?;
        v -= dot(hy, &inv_h);
    }
    debug_assert_eq!(d, world.features.cols());
    Ok(v)
}

/// Combination-weight QP for `target` with the exact feature second moment:
/// `Q = diag(V_j/n_j) + D`, `D_jj' = Σ_y (h_i − h_j)ᵀ Λ⁻¹ (h_i − h_j')`.
pub fn exact_qp(world: &DiscreteWorld, target: usize, n: &[usize]) -> Result<SimplexQP> {
    let m = world.clients();
    if n.len() != m {
        return Err(Error::shape("one sample count per client required"));
    }
    let inv = world.inverse_second_moment(None)?;
    let hs: Vec<Matrix> = (0..m).map(|j| world.class_moments(world.joint(j))).collect();
    let diffs: Vec<Matrix> = hs.iter().map(|h| hs[target].sub(h)).collect::<Result<_>>()?;
    let mut q = Matrix::zeros(m, m);
    for j in 0..m {
        for jp in 0..m {
            let mut dval = 0.0;
            for y in 0..world.classes() {
                let right = inv.matvec(diffs[jp].row(y))?;
                dval += dot(diffs[j].row(y), &right);
            }
            q.set(j, jp, dval);
        }
        let v = q.get(j, j) + variance_term(world, j)? / n[j] as f64;
        q.set(j, j, v);
    }
    let sym = q.add(&q.transpose())?.scale(0.5)?;
    SimplexQP::new(sym)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn two_point_world() -> DiscreteWorld {
        let f = Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let cond = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        DiscreteWorld::new(f, vec![0.5, 0.5], vec![cond]).unwrap()
    }

    #[test]
    fn construction_centres_features() {
        let f = Matrix::from_rows(&[vec![3.0, 1.0], vec![5.0, -1.0], vec![0.0, 2.0]]).unwrap();
        let cond = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let w = DiscreteWorld::new(f, vec![0.2, 0.3, 0.5], vec![cond]).unwrap();
        assert!(w.feature_mean().iter().all(|m| m.abs() < 1e-12));
        for seed in 0..5 {
            let w = DiscreteWorld::random(8, 3, 2, 3, seed).unwrap();
            assert!(w.feature_mean().iter().all(|m| m.abs() < 1e-12));
            let total: f64 = w.joint(2).as_slice().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn chi2_examples() {
        let w = two_point_world();
        let p = w.joint(0).clone();
        assert_eq!(chi2_distance(&w, &p, &p).unwrap(), 0.0);
        let q = Matrix::from_rows(&[vec![0.35, 0.25], vec![0.25, 0.15]]).unwrap();
        assert!((chi2_distance(&w, &p, &q).unwrap() - 0.04).abs() < 1e-12);
        let diff = q.sub(&p).unwrap().scale(2.0).unwrap();
        let q2 = p.add(&diff).unwrap();
        assert!((chi2_distance(&w, &p, &q2).unwrap() - 0.16).abs() < 1e-12);
    }

    #[test]
    fn chi2_rejects_zero_marginal() {
        let f = Matrix::from_rows(&[vec![1.0], vec![-1.0]]).unwrap();
        let cond = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let w = DiscreteWorld::new(f, vec![1.0, 0.0], vec![cond]).unwrap();
        let p = w.joint(0).clone();
        assert!(matches!(chi2_distance(&w, &p, &p), Err(Error::ZeroMarginal(1))));
    }

    #[test]
    fn model_joint_examples() {
        let w = DiscreteWorld::random(5, 3, 2, 1, 4).unwrap();
        let m = model_joint(&w, &LinearClassifier::zeros(3, 2));
        for x in 0..5 {
            for y in 0..3 {
                assert!((m.get(x, y) - w.marginal()[x] / 3.0).abs() < 1e-15);
            }
        }
        let w2 = DiscreteWorld::random(4, 2, 2, 1, 9).unwrap();
        let g = LinearClassifier::new(Matrix::from_rows(&[vec![0.3, -0.2], vec![-0.3, 0.2]]).unwrap()).unwrap();
        let m = model_joint(&w2, &g);
        for x in 0..4 {
            assert!((m.row(x).iter().sum::<f64>() - w2.marginal()[x]).abs() < 1e-15);
        }
        // direct evaluation on the two-point world: f = (1, -1), g = (0.4, -0.4)
        let w = two_point_world();
        let g = LinearClassifier::new(Matrix::from_rows(&[vec![0.4], vec![-0.4]]).unwrap()).unwrap();
        let m = model_joint(&w, &g);
        let expected = [0.5 * 1.4 / 2.0, 0.5 * 0.6 / 2.0, 0.5 * 0.6 / 2.0, 0.5 * 1.4 / 2.0];
        for (a, b) in m.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_hand_example() {
        let w = two_point_world();
        let p_hat = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap();
        let g = fit_classifier_closed_form(&w, &p_hat).unwrap();
        assert!((g.table().get(0, 0) - 1.0).abs() < 1e-12);
        assert!((g.table().get(1, 0) + 1.0).abs() < 1e-12);
        let flat = Matrix::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap();
        let g = fit_classifier_closed_form(&w, &flat).unwrap();
        assert!(g.table().as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn closed_form_is_stationary() {
        for seed in 0..5 {
            let w = DiscreteWorld::random(7, 3, 2, 1, seed).unwrap();
            let mut rng = keyed_rng(seed, &[1]);
            let p_hat = w.sample_empirical(0, 50, &mut rng);
            let g = fit_classifier_closed_form(&w, &p_hat).unwrap();
            let objective = |flat: &[f64]| {
                let g = LinearClassifier::new(Matrix::new(3, 2, flat.to_vec()).unwrap()).unwrap();
                chi2_distance(&w, &p_hat, &model_joint(&w, &g)).unwrap()
            };
            let grad = finite_diff_grad(objective, g.table().as_slice(), 1e-6);
            assert!(grad.iter().all(|v| v.abs() < 1e-6), "{grad:?}");
        }
    }

    #[test]
    fn singular_second_moment() {
        // two features that are exact copies of each other
        let f = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let cond = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]).unwrap();
        let w = DiscreteWorld::new(f, vec![0.5, 0.5], vec![cond]).unwrap();
        let p = w.joint(0).clone();
        assert!(matches!(
            fit_classifier_closed_form_with_ridge(&w, &p, None),
            Err(Error::Singular)
        ));
        assert!(fit_classifier_closed_form(&w, &p).is_ok());
    }

    #[test]
    fn gap_estimate_examples() {
        let feats = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let c = CentroidSet::dense(Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap(), vec![1, 0]).unwrap();
        let g = LinearClassifier::new(Matrix::from_rows(&[vec![3.0], vec![0.0]]).unwrap()).unwrap();
        assert!((generalization_gap_estimate(&feats, &[0], &c, &g).unwrap() - 3.0).abs() < 1e-15);
        let g2 = g.scaled(2.0).unwrap();
        assert!((generalization_gap_estimate(&feats, &[0], &c, &g2).unwrap() - 6.0).abs() < 1e-15);
        let at_centroid = Matrix::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(generalization_gap_estimate(&at_centroid, &[0], &c, &g).unwrap(), 0.0);
        let partial = CentroidSet::from_parts(
            Matrix::from_rows(&[vec![2.0], vec![0.0]]).unwrap(),
            vec![1, 0],
            vec![true, false],
            vec![false, false],
        )
        .unwrap();
        assert!(matches!(
            generalization_gap_estimate(&feats, &[1], &partial, &g),
            Err(Error::MissingCentroid(1))
        ));
    }

    #[test]
    fn decomposition_special_cases() {
        let w = DiscreteWorld::random(6, 3, 2, 1, 21).unwrap();
        let p = w.joint(0).clone();
        let mut rng = keyed_rng(3, &[]);
        let p_hat = w.sample_empirical(0, 30, &mut rng);
        let g = LinearClassifier::new(Matrix::new(3, 2, vec![0.3, -0.1, 0.2, 0.4, -0.5, 0.1]).unwrap()).unwrap();
        let same = decompose_test_loss(&w, &p, &p, &g).unwrap();
        assert_eq!(same.gap, 0.0);
        assert_eq!(same.constant, 0.0);
        let zero = decompose_test_loss(&w, &p, &p_hat, &LinearClassifier::zeros(3, 2)).unwrap();
        assert_eq!(zero.gap, 0.0);
        let full = decompose_test_loss(&w, &p, &p_hat, &g).unwrap();
        let direct = chi2_distance(&w, &p, &model_joint(&w, &g)).unwrap();
        assert!((full.total() - direct).abs() < 1e-12);
    }

    #[test]
    fn gap_estimate_mirrors_decomposition_with_true_centroids() {
        // With exact class means as centroids and the empirical label
        // distribution equal to the true one, the estimator recovers the
        // g-dependent part of the decomposition with the sign flipped.
        let f = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.5], vec![0.0, -0.5]]).unwrap();
        let cond = Matrix::from_rows(&[vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]]).unwrap();
        let w = DiscreteWorld::new(f, vec![0.4, 0.3, 0.3], vec![cond]).unwrap();
        let p = w.joint(0).clone();
        // 25 samples with the true label marginal 0.48 / 0.52
        let mut samples = Vec::new();
        for (x, y, c) in [(0, 0, 6), (1, 0, 3), (2, 0, 3), (0, 1, 4), (1, 1, 5), (2, 1, 4)] {
            samples.extend(std::iter::repeat_n((x, y), c));
        }
        let mut p_hat = Matrix::zeros(3, 2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &(x, y) in &samples {
            p_hat.set(x, y, p_hat.get(x, y) + 1.0 / 25.0);
            rows.push(w.features().row(x).to_vec());
            labels.push(y);
        }
        let h = w.class_moments(&p);
        let py: Vec<f64> = (0..2).map(|y| (0..3).map(|x| p.get(x, y)).sum()).collect();
        let means = Matrix::from_rows(&[
            h.row(0).iter().map(|v| v / py[0]).collect(),
            h.row(1).iter().map(|v| v / py[1]).collect(),
        ])
        .unwrap();
        let centroids = CentroidSet::dense(means, vec![12, 13]).unwrap();
        let g = LinearClassifier::new(Matrix::from_rows(&[vec![0.7, -0.2], vec![0.1, 0.9]]).unwrap()).unwrap();
        let est = generalization_gap_estimate(&Matrix::from_rows(&rows).unwrap(), &labels, &centroids, &g).unwrap();
        let dec = decompose_test_loss(&w, &p, &p_hat, &g).unwrap();
        assert!((est + dec.gap).abs() < 1e-12, "{est} vs {}", dec.gap);
    }

    #[test]
    fn kl_relation_basics() {
        let w = DiscreteWorld::random(6, 3, 2, 1, 2).unwrap();
        let (kl, chi2) = kl_chi2_relation_check(&w, &LinearClassifier::zeros(3, 2), 0.1).unwrap();
        assert_eq!((kl, chi2), (0.0, 0.0));
        let g = LinearClassifier::new(Matrix::new(3, 2, vec![0.5, -1.0, 0.2, 0.3, -0.7, 0.7]).unwrap()).unwrap();
        let (kl, chi2) = kl_chi2_relation_check(&w, &g, 0.05).unwrap();
        assert!(kl > 0.0 && chi2 > 0.0);
        assert!((kl - chi2 / 2.0).abs() / chi2 < 0.1);
        assert!(kl_chi2_relation_check(&w, &g, 100.0).is_err());
    }

    #[test]
    fn exact_qp_matches_direct_bias() {
        // αᵀDα equals χ²(P_X Q(g_i), Σ α_j P_X Q(g_j)) for the population classifiers
        let w = DiscreteWorld::random(8, 3, 2, 3, 17).unwrap();
        let gs: Vec<_> = (0..3)
            .map(|j| fit_classifier_closed_form(&w, w.joint(j)).unwrap())
            .collect();
        let qp = exact_qp(&w, 0, &[1_000_000_000, 1_000_000_000, 1_000_000_000]).unwrap();
        let alpha = [0.2, 0.5, 0.3];
        let combined = LinearClassifier::combine(&alpha, &gs).unwrap();
        let direct = chi2_distance(&w, &model_joint(&w, &gs[0]), &model_joint(&w, &combined)).unwrap();
        let var: f64 = (0..3)
            .map(|j| alpha[j] * alpha[j] * variance_term(&w, j).unwrap() / 1e9)
            .sum();
        assert!((qp.objective(&alpha) - var - direct).abs() < 1e-12);
    }
}
