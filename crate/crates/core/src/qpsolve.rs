//! Convex quadratics over the probability simplex.
//!
//! The combination-weight problem is `min αᵀQα` subject to `Σα = 1, α ≥ 0`
//! with a small symmetric PSD `Q`. [`solve`] runs accelerated projected
//! gradient descent from the uniform point; [`brute_force_oracle`]
//! enumerates the simplex lattice and exists to check it.
//!
//! When `Q` is singular the minimiser may not be unique. The solver then
//! returns whatever the gradient path from the uniform start reaches, which
//! keeps degenerate directions at their uniform values.

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

/// Iteration cap for [`solve`].
pub const MAX_ITERATIONS: usize = 10_000;

/// Default stopping tolerance on iterate movement.
pub const DEFAULT_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexQP {
    q: Matrix,
}

impl SimplexQP {
    /// Validates that `q` is square and symmetric (within `1e-12`, relative
    /// to its largest entry when that exceeds one).
    pub fn new(q: Matrix) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(Error::shape(format!("QP matrix is {}x{}", q.rows(), q.cols())));
        }
        if q.rows() == 0 {
            return Err(Error::Empty("QP matrix"));
        }
        let scale = q.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if !q.is_symmetric(SYMMETRY_TOL * scale) {
            return Err(Error::invalid("QP matrix is not symmetric"));
        }
        Ok(Self { q })
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.q
    }

    /// `αᵀQα`
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let m = self.dim();
        (0..m).map(|i| alpha[i] * dot(self.q.row(i), alpha)).sum()
    }

    fn permuted(&self, perm: &[usize]) -> Result<SimplexQP> {
        let m = self.dim();
        let mut data = Vec::with_capacity(m * m);
        for &i in perm {
            for &j in perm {
                data.push(self.q.get(i, j));
            }
        }
        SimplexQP::new(Matrix::new(m, m, data)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint {
    alpha: Vec<f64>,
}

impl SimplexPoint {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Empty("simplex point"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid("simplex point has a negative or non-finite entry"));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("simplex point sums to {sum}")));
        }
        Ok(Self { alpha })
    }

    pub fn uniform(m: usize) -> Self {
        Self {
            alpha: vec![1.0 / m as f64; m],
        }
    }

    pub fn vertex(m: usize, i: usize) -> Self {
        let mut alpha = vec![0.0; m];
        alpha[i] = 1.0;
        Self { alpha }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.alpha
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.alpha
    }
}

/// Euclidean projection onto the probability simplex (sort-and-threshold).
pub fn project_simplex(v: &[f64]) -> Result<SimplexPoint> {
    if v.is_empty() {
        return Err(Error::Empty("vector to project"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("project_simplex input"));
    }
    Ok(SimplexPoint { alpha: project_raw(v) })
}

fn project_raw(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // Rounding can leave the sum a few ulps away from one.
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        out.iter_mut().for_each(|x| *x /= sum);
    }
    out
}

/// Projected gradient descent on `½αᵀQα` with fixed step `1/L`, where `L` is
/// the largest absolute row sum of `Q` (an upper bound on its spectral
/// radius), accelerated with Nesterov momentum that restarts whenever it
/// stops pointing downhill. Starts at the uniform point and stops once an
/// iteration moves the iterate, and the gradient step from the extrapolated
/// point, by less than `tol` in Euclidean norm.
pub fn solve(qp: &SimplexQP, tol: f64) -> Result<SimplexPoint> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    let m = qp.dim();
    if m == 1 {
        return Ok(SimplexPoint::vertex(1, 0));
    }
    let q = qp.matrix();
    let lipschitz = (0..m)
        .map(|i| q.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max);
    let mut alpha = vec![1.0 / m as f64; m];
    if lipschitz == 0.0 {
        return Ok(SimplexPoint { alpha });
    }
    let step = 1.0 / lipschitz;
    let mut best = alpha.clone();
    let mut best_obj = qp.objective(&alpha);
    let mut y = alpha.clone();
    let mut t = 1.0f64;
    let mut trial = vec![0.0; m];
    for _ in 0..MAX_ITERATIONS {
        for i in 0..m {
            trial[i] = y[i] - step * dot(q.row(i), &y);
        }
        let next = project_raw(&trial);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let moved = dist(&next, &alpha);
        let mapped = dist(&next, &y);
        let uphill: f64 = (0..m).map(|i| (y[i] - next[i]) * (next[i] - alpha[i])).sum();
        if uphill > 0.0 {
            t = 1.0;
            y.copy_from_slice(&next);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..m {
                y[i] = next[i] + beta * (next[i] - alpha[i]);
            }
            t = t_next;
        }
        alpha = next;
        let obj = qp.objective(&alpha);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&alpha);
        }
        if moved < tol && mapped < tol {
            return Ok(SimplexPoint { alpha });
        }
    }
    Err(Error::NonConvergence {
        iterations: MAX_ITERATIONS,
        objective: best_obj,
        best,
    })
}

/// Lowest-objective point of the simplex lattice with spacing `grid_step`
/// (which should divide one). Refuses `m > 4`.
///
/// All coordinates but the last two are enumerated; the last pair lies on a
/// segment where the objective is a one-dimensional quadratic, so its lattice
/// minimum is at an endpoint or next to the stationary point. The result is
/// therefore the exact lattice minimum without visiting every point.
pub fn brute_force_oracle(qp: &SimplexQP, grid_step: f64) -> Result<SimplexPoint> {
    let m = qp.dim();
    if m > 4 {
        return Err(Error::invalid(format!("grid oracle supports m <= 4, got {m}")));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::invalid(format!("grid step must be in (0, 1], got {grid_step}")));
    }
    if m == 1 {
        return Ok(SimplexPoint::vertex(1, 0));
    }
    let n = (1.0 / grid_step).round() as usize;
    let h = 1.0 / n as f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut counts = vec![0usize; m];
    enumerate_prefix(qp, &mut counts, 0, n, h, &mut best);
    let (_, counts) = best.expect("lattice is non-empty");
    SimplexPoint::new(counts.iter().map(|c| *c as f64 * h).collect())
}

fn enumerate_prefix(
    qp: &SimplexQP,
    counts: &mut Vec<usize>,
    pos: usize,
    remaining: usize,
    h: f64,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let m = counts.len();
    if pos == m - 2 {
        best_on_segment(qp, counts, remaining, h, best);
        return;
    }
    for c in 0..=remaining {
        counts[pos] = c;
        enumerate_prefix(qp, counts, pos + 1, remaining - c, h, best);
    }
    counts[pos] = 0;
}

fn best_on_segment(
    qp: &SimplexQP,
    counts: &mut [usize],
    remaining: usize,
    h: f64,
    best: &mut Option<(f64, Vec<usize>)>,
) {
    let m = counts.len();
    let (a, b) = (m - 2, m - 1);
    // objective(t) along counts[a] = t, counts[b] = remaining - t
    let eval = |counts: &mut [usize], t: usize| {
        counts[a] = t;
        counts[b] = remaining - t;
        let mut alpha = [0.0; 4];
        for (dst, c) in alpha.iter_mut().zip(counts.iter()) {
            *dst = *c as f64 * h;
        }
        qp.objective(&alpha[..m])
    };
    let f0 = eval(counts, 0);
    let f1 = if remaining >= 1 { eval(counts, 1) } else { f0 };
    let f2 = if remaining >= 2 { eval(counts, 2) } else { f1 };
    let mut candidates = Vec::with_capacity(4);
    candidates.extend([0, remaining]);
    let curvature = f2 - 2.0 * f1 + f0;
    if remaining >= 2 && curvature > 0.0 {
        // f(t) = f0 + s t + c t²/2 with s = f1 - f0 - c/2
        let slope = f1 - f0 - curvature / 2.0;
        let t_star = -slope / curvature;
        if t_star > 0.0 && t_star < remaining as f64 {
            candidates.push(t_star.floor() as usize);
            candidates.push((t_star.ceil() as usize).min(remaining));
        }
    }
    candidates.sort_unstable();
    candidates.dedup();
    for t in candidates {
        let obj = eval(counts, t);
        let better = match best {
            None => true,
            Some((b, _)) => obj < *b,
        };
        if better {
            *best = Some((obj, counts.to_vec()));
        }
    }
}

/// Permutes `qp` by `perm`, solves, and maps the answer back. Used to check
/// that the solver is equivariant under relabelling of clients.
pub fn solve_permuted(qp: &SimplexQP, perm: &[usize], tol: f64) -> Result<SimplexPoint> {
    let permuted = qp.permuted(perm)?;
    let sol = solve(&permuted, tol)?;
    let mut alpha = vec![0.0; perm.len()];
    for (k, &i) in perm.iter().enumerate() {
        alpha[i] = sol.as_slice()[k];
    }
    Ok(SimplexPoint { alpha })
}
