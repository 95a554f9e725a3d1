//! Server side of a round: extractor and centroid aggregation, the
//! combination-weight QP and personalised heads.

use std::io::Write;
use std::path::Path;

use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::model::theory::{chi2_distance, model_joint, DiscreteWorld, LinearClassifier};
use crate::model::Extractor;
use crate::numerics::{dot, Matrix};
use crate::qpsolve::{solve, SimplexQP};
use crate::stats::{CentroidSet, FeatureStats};

/// `first + Σ w_i (v_i − first)` with `w_i = n_i / Σ n`. Equal to the
/// weighted mean, and exactly `first` when all inputs coincide.
fn weighted_mean(vectors: &[&[f64]], n: &[f64]) -> Result<Vec<f64>> {
    let first = *vectors.first().ok_or(Error::Empty("updates"))?;
    let total: f64 = n.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("aggregation weights sum to zero"));
    }
    let mut out = first.to_vec();
    for (v, w) in vectors.iter().zip(n) {
        if v.len() != first.len() {
            return Err(Error::shape("updates have different parameter counts"));
        }
        let w = w / total;
        for ((o, a), b) in out.iter_mut().zip(*v).zip(first) {
            *o += w * (a - b);
        }
    }
    Ok(out)
}

/// `θ̃ = Σ_i (n_i / Σ n) θ_i` over the given updates.
pub fn aggregate_extractors(updates: &[ClientUpdate]) -> Result<Extractor> {
    let first = updates.first().ok_or(Error::Empty("updates"))?;
    let vs: Vec<&[f64]> = updates.iter().map(|u| u.theta.as_slice()).collect();
    let n: Vec<f64> = updates.iter().map(|u| u.n as f64).collect();
    let flat = weighted_mean(&vs, &n)?;
    let mut out = first.theta.clone();
    out.as_mut_slice().copy_from_slice(&flat);
    Ok(out)
}

/// Sample-weighted mean of the heads.
pub fn aggregate_heads(updates: &[ClientUpdate]) -> Result<Matrix> {
    let first = updates.first().ok_or(Error::Empty("updates"))?;
    if updates
        .iter()
        .any(|u| u.phi.rows() != first.phi.rows() || u.phi.cols() != first.phi.cols())
    {
        return Err(Error::shape("heads differ in shape"));
    }
    let vs: Vec<&[f64]> = updates.iter().map(|u| u.phi.as_slice()).collect();
    let n: Vec<f64> = updates.iter().map(|u| u.n as f64).collect();
    Matrix::new(first.phi.rows(), first.phi.cols(), weighted_mean(&vs, &n)?)
}

/// `c_k = Σ_i n_{i,k} ĉ_{i,k} / Σ_i n_{i,k}`. Classes nobody holds keep the
/// previous value and are flagged stale.
pub fn aggregate_centroids(updates: &[ClientUpdate], previous: &CentroidSet) -> Result<CentroidSet> {
    let (k, d) = (previous.classes(), previous.dim());
    let mut vectors = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    let mut present = vec![false; k];
    let mut stale = vec![false; k];
    for class in 0..k {
        let mut vs = Vec::new();
        let mut n = Vec::new();
        for u in updates {
            let c = &u.local_centroids;
            if c.classes() != k || c.dim() != d {
                return Err(Error::shape("local centroids do not match the global set"));
            }
            if c.count(class) > 0 {
                vs.push(c.vector(class));
                n.push(c.count(class) as f64);
                counts[class] += c.count(class);
            }
        }
        if vs.is_empty() {
            vectors.row_mut(class).copy_from_slice(previous.vector(class));
            present[class] = previous.is_present(class);
            stale[class] = previous.is_present(class);
        } else {
            vectors.row_mut(class).copy_from_slice(&weighted_mean(&vs, &n)?);
            present[class] = true;
        }
    }
    CentroidSet::from_parts(vectors, counts, present, stale)
}

/// `Q = diag(V_j / n_j) + D` with
/// `D_jj' = Σ_y (h(i,y) − h(j,y))·(h(i,y) − h(j',y))` for target `i`,
/// i.e. the testing-loss estimate with the feature covariance replaced by
/// the identity.
pub fn assemble_qp(target: usize, stats: &[FeatureStats], n: &[usize]) -> Result<SimplexQP> {
    let m = stats.len();
    if m == 0 {
        return Err(Error::Empty("client statistics"));
    }
    if n.len() != m || target >= m {
        return Err(Error::shape("statistics, counts and target disagree"));
    }
    let (k, d) = (stats[target].classes(), stats[target].dim());
    if stats.iter().any(|s| s.h.rows() != k || s.h.cols() != d) {
        return Err(Error::shape("client statistics differ in shape"));
    }
    let hi = stats[target].h.as_slice();
    let diffs: Vec<Vec<f64>> = stats
        .iter()
        .map(|s| hi.iter().zip(s.h.as_slice()).map(|(a, b)| a - b).collect())
        .collect();
    let mut q = Matrix::zeros(m, m);
    for j in 0..m {
        for jp in j..m {
            let v = dot(&diffs[j], &diffs[jp]);
            q.set(j, jp, v);
            q.set(jp, j, v);
        }
        if n[j] == 0 {
            return Err(Error::invalid(format!("client {j} reports zero samples")));
        }
        let v = q.get(j, j) + stats[j].variance.max(0.0) / n[j] as f64;
        q.set(j, j, v);
    }
    SimplexQP::new(q)
}

/// Heads after combination, with the weights that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Personalization {
    /// Client ids in update order.
    pub participants: Vec<usize>,
    /// `heads[r]` belongs to `participants[r]`.
    pub heads: Vec<Matrix>,
    /// Row `r` is the simplex weight vector of `participants[r]` over the
    /// participants.
    pub weights: Matrix,
}

/// Combination weights from the reported statistics and the resulting heads
/// `φ̂_i = Σ_j α_ij φ_j`, one per participant.
pub fn personalize_heads(updates: &[ClientUpdate], tol: f64) -> Result<Personalization> {
    if updates.is_empty() {
        return Err(Error::Empty("updates"));
    }
    let stats: Vec<FeatureStats> = updates.iter().map(|u| u.stats.clone()).collect();
    let n: Vec<usize> = updates.iter().map(|u| u.n).collect();
    let phis: Vec<&Matrix> = updates.iter().map(|u| &u.phi).collect();
    let m = updates.len();
    let mut weights = Matrix::zeros(m, m);
    let mut heads = Vec::with_capacity(m);
    for i in 0..m {
        let alpha = solve(&assemble_qp(i, &stats, &n)?, tol)?;
        weights.row_mut(i).copy_from_slice(alpha.as_slice());
        heads.push(combine_heads(alpha.as_slice(), &phis)?);
    }
    Ok(Personalization {
        participants: updates.iter().map(|u| u.client_id).collect(),
        heads,
        weights,
    })
}

/// `Σ_j α_j φ_j`
pub fn combine_heads(alpha: &[f64], phis: &[&Matrix]) -> Result<Matrix> {
    let first = phis.first().ok_or(Error::Empty("heads"))?;
    if alpha.len() != phis.len() {
        return Err(Error::shape("one weight per head required"));
    }
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for (a, phi) in alpha.iter().zip(phis) {
        if phi.rows() != first.rows() || phi.cols() != first.cols() {
            return Err(Error::shape("heads differ in shape"));
        }
        if *a == 0.0 {
            continue;
        }
        for (o, v) in out.as_mut_slice().iter_mut().zip(phi.as_slice()) {
            *o += a * v;
        }
    }
    Ok(out)
}

/// Server-side state carried between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    pub theta: Extractor,
    pub centroids: CentroidSet,
    /// Current head of every client.
    pub heads: Vec<Matrix>,
    /// `m x m`; row `i` holds client `i`'s combination weights, zero outside
    /// the participants of the last round.
    pub weights: Matrix,
    pub round: usize,
}

impl GlobalState {
    pub fn new(theta: Extractor, head: Matrix, clients: usize, classes: usize, dim: usize) -> Self {
        Self {
            theta,
            centroids: CentroidSet::empty(classes, dim),
            heads: vec![head; clients],
            weights: Matrix::identity(clients),
            round: 0,
        }
    }

    /// Scatters a participant-level personalisation into the full state.
    pub fn apply(&mut self, p: &Personalization) {
        for (r, &i) in p.participants.iter().enumerate() {
            self.heads[i] = p.heads[r].clone();
            let row = self.weights.row_mut(i);
            row.iter_mut().for_each(|v| *v = 0.0);
            for (c, &j) in p.participants.iter().enumerate() {
                row[j] = p.weights.get(r, c);
            }
        }
    }
}

/// Writes the weight matrix as CSV: a header `target,0,1,...` then one row
/// per target client.
pub fn write_weights_csv(weights: &Matrix, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut text = String::from("target");
    for j in 0..weights.cols() {
        text.push_str(&format!(",{j}"));
    }
    text.push('\n');
    for i in 0..weights.rows() {
        text.push_str(&i.to_string());
        for v in weights.row(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

/// Expected testing loss of client `target` when its classifier is
/// `Σ_j α_j ĝ_j`: distribution bias, sampling variance and the irreducible
/// error of the population classifier `g_target`.
pub fn testing_loss_analytic(
    world: &DiscreteWorld,
    alpha: &[f64],
    g_means: &[LinearClassifier],
    variances: &[f64],
    n: &[usize],
    target: usize,
) -> Result<f64> {
    let m = g_means.len();
    if alpha.len() != m || variances.len() != m || n.len() != m || target >= m {
        return Err(Error::shape("alpha, classifiers, variances and counts disagree"));
    }
    let own = model_joint(world, &g_means[target]);
    let combined = model_joint(world, &LinearClassifier::combine(alpha, g_means)?);
    let bias = chi2_distance(world, &own, &combined)?;
    let variance: f64 = (0..m).map(|j| alpha[j] * alpha[j] * variances[j] / n[j] as f64).sum();
    let irreducible = chi2_distance(world, world.joint(target), &own)?;
    Ok(bias + variance + irreducible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::theory::{fit_classifier_closed_form, variance_term};
    use crate::model::ModelDims;
    use crate::qpsolve::{brute_force_oracle, SimplexPoint};

    fn dims() -> ModelDims {
        ModelDims {
            input: 1,
            hidden: 1,
            depth: 0,
            feature: 1,
            classes: 2,
        }
    }

    fn update(id: usize, theta: f64, n: usize) -> ClientUpdate {
        let d = dims();
        let theta = Extractor::from_flat(&d, vec![theta, 0.0]).unwrap();
        let stats = FeatureStats::from_features(&[1.0], &[0], 2, 1).unwrap();
        ClientUpdate {
            client_id: id,
            theta,
            phi: Matrix::zeros(2, 1),
            local_centroids: CentroidSet::empty(2, 1),
            stats,
            n,
        }
    }

    fn stats_with(h: &[f64], variance: f64) -> FeatureStats {
        let k = h.len();
        FeatureStats {
            priors: vec![1.0 / k as f64; k],
            mu: Matrix::new(k, 1, h.to_vec()).unwrap(),
            present: vec![true; k],
            h: Matrix::new(k, 1, h.to_vec()).unwrap(),
            variance,
            counts: vec![1; k],
        }
    }

    #[test]
    fn extractor_weighted_means() {
        let one = aggregate_extractors(&[update(0, 1.5, 10)]).unwrap();
        assert_eq!(one.as_slice()[0], 1.5);
        let eq = aggregate_extractors(&[update(0, 0.0, 5), update(1, 2.0, 5)]).unwrap();
        assert_eq!(eq.as_slice()[0], 1.0);
        let w = aggregate_extractors(&[update(0, 0.0, 1), update(1, 4.0, 3)]).unwrap();
        assert_eq!(w.as_slice()[0], 3.0);
        let same = aggregate_extractors(&[update(0, 0.1, 1), update(1, 0.1, 7), update(2, 0.1, 3)]).unwrap();
        assert_eq!(same.as_slice()[0], 0.1);
    }

    #[test]
    fn centroid_aggregation() {
        let mut a = update(0, 0.0, 1);
        let mut b = update(1, 0.0, 3);
        a.local_centroids = CentroidSet::from_features(&[0.0], &[0], 2, 1);
        b.local_centroids = CentroidSet::from_features(&[4.0, 4.0, 4.0], &[0, 0, 0], 2, 1);
        let prev = CentroidSet::dense(Matrix::from_rows(&[vec![9.0], vec![-2.0]]).unwrap(), vec![1, 1]).unwrap();
        let c = aggregate_centroids(&[a.clone(), b], &prev).unwrap();
        assert_eq!(c.get(0).unwrap(), &[3.0]);
        assert!(!c.is_stale(0));
        assert_eq!(c.get(1).unwrap(), &[-2.0]);
        assert!(c.is_stale(1));
        let solo = aggregate_centroids(&[a], &CentroidSet::empty(2, 1)).unwrap();
        assert_eq!(solo.get(0).unwrap(), &[0.0]);
        assert!(solo.get(1).is_none());
    }

    #[test]
    fn qp_self_term_and_symmetry() {
        let stats = vec![
            stats_with(&[1.0, 0.0], 2.0),
            stats_with(&[0.0, 1.0], 1.0),
            stats_with(&[0.5, 0.5], 0.5),
        ];
        let qp = assemble_qp(0, &stats, &[10, 10, 10]).unwrap();
        assert!((qp.matrix().get(0, 0) - 0.2).abs() < 1e-15);
        assert_eq!(qp.matrix().get(0, 1), 0.0);
        let same = vec![stats_with(&[0.3, 0.7], 1.0); 4];
        let qp = assemble_qp(2, &same, &[5; 4]).unwrap();
        assert!(qp.matrix().max_abs_diff(&Matrix::identity(4).scale(0.2).unwrap()) < 1e-15);
        let alpha = solve(&qp, 1e-10).unwrap();
        assert!(alpha.as_slice().iter().all(|a| (a - 0.25).abs() < 1e-9));
    }

    #[test]
    fn two_client_kkt() {
        let (h1, h2, v1, v2, n1, n2) = (0.7, -0.4, 3.0, 5.0, 20usize, 40usize);
        let stats = vec![stats_with(&[h1], v1), stats_with(&[h2], v2)];
        let qp = assemble_qp(0, &stats, &[n1, n2]).unwrap();
        let a = v1 / n1 as f64;
        let expected = a / (a + v2 / n2 as f64 + (h1 - h2) * (h1 - h2));
        let alpha = solve(&qp, 1e-12).unwrap();
        assert!((alpha.as_slice()[1] - expected).abs() < 1e-6);
        let grid = brute_force_oracle(&qp, 1e-3).unwrap();
        assert!((grid.as_slice()[1] - expected).abs() < 1e-3);
    }

    #[test]
    fn head_combination() {
        let p1 = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p2 = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(combine_heads(&[0.5, 0.5], &[&p1, &p2]).unwrap().as_slice(), &[0.5, 0.5]);
        let mut u = update(3, 0.0, 4);
        u.phi = Matrix::from_rows(&[vec![2.0], vec![-1.0]]).unwrap();
        let p = personalize_heads(&[u.clone()], 1e-8).unwrap();
        assert_eq!(p.heads[0], u.phi);
        assert_eq!(p.participants, vec![3]);
        // far-apart statistics force each client onto its own head
        let mut a = u.clone();
        let mut b = update(4, 0.0, 4);
        a.stats = stats_with(&[100.0, 0.0], 1.0);
        b.stats = stats_with(&[0.0, 100.0], 1.0);
        b.phi = Matrix::from_rows(&[vec![7.0], vec![7.0]]).unwrap();
        let p = personalize_heads(&[a.clone(), b], 1e-10).unwrap();
        assert!(p.heads[0].max_abs_diff(&a.phi) < 1e-3);
        let _ = SimplexPoint::new(p.weights.row(0).to_vec()).unwrap();
    }

    #[test]
    fn analytic_loss_special_cases() {
        let w = DiscreteWorld::random(8, 3, 2, 3, 5).unwrap();
        let gs: Vec<_> = (0..3)
            .map(|j| fit_classifier_closed_form(&w, w.joint(j)).unwrap())
            .collect();
        let v: Vec<f64> = (0..3).map(|j| variance_term(&w, j).unwrap()).collect();
        let irreducible = chi2_distance(&w, w.joint(1), &model_joint(&w, &gs[1])).unwrap();
        let at_vertex = testing_loss_analytic(&w, &[0.0, 1.0, 0.0], &gs, &[0.0; 3], &[20, 40, 40], 1).unwrap();
        assert!((at_vertex - irreducible).abs() < 1e-15);
        // identical classifiers: only variance varies, minimised by 1/(V/n) weights
        let same = vec![gs[0].clone(); 3];
        let n = [20, 40, 40];
        let inv: Vec<f64> = (0..3).map(|j| n[j] as f64 / v[j]).collect();
        let total: f64 = inv.iter().sum();
        let best: Vec<f64> = inv.iter().map(|x| x / total).collect();
        let at_best = testing_loss_analytic(&w, &best, &same, &v, &n, 0).unwrap();
        for alt in [[0.2, 0.4, 0.4], [1.0 / 3.0; 3], [0.5, 0.25, 0.25]] {
            assert!(testing_loss_analytic(&w, &alt, &same, &v, &n, 0).unwrap() >= at_best - 1e-15);
        }
    }

    #[test]
    fn weights_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        write_weights_csv(&Matrix::identity(2), &path).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "target,0,1\n0,1,0\n1,0,1\n");
    }
}
