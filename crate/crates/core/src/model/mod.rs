//! The decoupled classifier: a LeakyReLU MLP feature extractor followed by a
//! linear head with one row per class.
//!
//! Extractor parameters live in one flat buffer (per layer: weights row-major
//! as `out x in`, then biases) so that averaging, SGD and checkpointing are
//! plain vector operations.

pub mod checkpoint;
pub mod theory;

use rand::distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{
    argmax, axpy, dot, leaky_relu, leaky_relu_grad, softmax_xent_into, Matrix, Purpose, RngStream, StreamId,
};
use crate::stats::CentroidSet;

/// Network shape: `input -> hidden (x depth, LeakyReLU) -> feature -> classes`.
///
/// With `depth == 0` the extractor is a single linear map `input -> feature`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub depth: usize,
    pub feature: usize,
    pub classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: 16,
            hidden: 64,
            depth: 1,
            feature: 16,
            classes: 10,
        }
    }
}

impl ModelDims {
    /// `(out, in)` for each extractor layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input;
        for _ in 0..self.depth {
            shapes.push((self.hidden, fan_in));
            fan_in = self.hidden;
        }
        shapes.push((self.feature, fan_in));
        shapes
    }

    pub fn extractor_len(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.feature == 0 || (self.depth > 0 && self.hidden == 0) {
            return Err(Error::invalid(format!("degenerate model dims {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::invalid("model needs at least two classes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    shapes: Vec<(usize, usize)>,
    params: Vec<f64>,
}

/// Activations kept from a batched forward pass for backpropagation.
struct ForwardCache {
    rows: usize,
    /// `acts[0]` is the input; `acts[k + 1]` is the output of layer `k`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

impl Extractor {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            shapes: dims.layer_shapes(),
            params: vec![0.0; dims.extractor_len()],
        }
    }

    pub fn from_flat(dims: &ModelDims, params: Vec<f64>) -> Result<Self> {
        if params.len() != dims.extractor_len() {
            return Err(Error::shape(format!(
                "extractor needs {} parameters, got {}",
                dims.extractor_len(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Extractor::from_flat"));
        }
        Ok(Self {
            shapes: dims.layer_shapes(),
            params,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].1
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().expect("at least one layer").0
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.shapes.len());
        let mut at = 0;
        for (o, i) in &self.shapes {
            offsets.push(at);
            at += o * i + o;
        }
        offsets
    }

    fn forward_cached(&self, xs: &[f64], rows: usize) -> ForwardCache {
        let last = self.shapes.len() - 1;
        let mut acts = Vec::with_capacity(self.shapes.len() + 1);
        let mut pre = Vec::with_capacity(last);
        acts.push(xs.to_vec());
        let mut at = 0;
        for (k, &(n_out, n_in)) in self.shapes.iter().enumerate() {
            let w = &self.params[at..at + n_out * n_in];
            let b = &self.params[at + n_out * n_in..at + n_out * n_in + n_out];
            at += n_out * n_in + n_out;
            let mut z = vec![0.0; rows * n_out];
            let input = &acts[k];
            for r in 0..rows {
                let x = &input[r * n_in..(r + 1) * n_in];
                let dst = &mut z[r * n_out..(r + 1) * n_out];
                for o in 0..n_out {
                    dst[o] = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
                }
            }
            if k < last {
                let a = z.iter().map(|v| leaky_relu(*v)).collect();
                pre.push(z);
                acts.push(a);
            } else {
                acts.push(z);
            }
        }
        ForwardCache { rows, acts, pre }
    }

    /// Accumulates the parameter gradient for `d_out` (gradient of the loss
    /// w.r.t. the features of each row) into `grad`.
    fn backward(&self, cache: &ForwardCache, d_out: Vec<f64>, grad: &mut [f64]) {
        let offsets = self.layer_offsets();
        let last = self.shapes.len() - 1;
        let rows = cache.rows;
        let mut delta = d_out;
        for k in (0..=last).rev() {
            let (n_out, n_in) = self.shapes[k];
            if k < last {
                for (d, z) in delta.iter_mut().zip(&cache.pre[k]) {
                    *d *= leaky_relu_grad(*z);
                }
            }
            let at = offsets[k];
            let input = &cache.acts[k];
            {
                let (gw, gb) = grad[at..at + n_out * n_in + n_out].split_at_mut(n_out * n_in);
                for r in 0..rows {
                    let x = &input[r * n_in..(r + 1) * n_in];
                    let dz = &delta[r * n_out..(r + 1) * n_out];
                    for o in 0..n_out {
                        if dz[o] != 0.0 {
                            axpy(dz[o], x, &mut gw[o * n_in..(o + 1) * n_in]);
                        }
                        gb[o] += dz[o];
                    }
                }
            }
            if k > 0 {
                let w = &self.params[at..at + n_out * n_in];
                let mut below = vec![0.0; rows * n_in];
                for r in 0..rows {
                    let dz = &delta[r * n_out..(r + 1) * n_out];
                    let dst = &mut below[r * n_in..(r + 1) * n_in];
                    for o in 0..n_out {
                        if dz[o] != 0.0 {
                            axpy(dz[o], &w[o * n_in..(o + 1) * n_in], dst);
                        }
                    }
                }
                delta = below;
            }
        }
    }

    /// Features for a row-major batch of inputs.
    pub fn features(&self, xs: &[f64]) -> Vec<f64> {
        let rows = xs.len() / self.input_dim();
        self.forward_cached(xs, rows).acts.pop().expect("output layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    theta: Extractor,
    phi: Matrix,
}

/// Loss value and exact gradients for one batch.
#[derive(Clone, Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub cross_entropy: f64,
    pub alignment: f64,
    /// Same layout as [`Extractor::as_slice`].
    pub grad_theta: Vec<f64>,
    pub grad_phi: Matrix,
}

impl ModelParams {
    pub fn new(dims: ModelDims, theta: Extractor, phi: Matrix) -> Result<Self> {
        dims.validate()?;
        if theta.shapes != dims.layer_shapes() {
            return Err(Error::shape("extractor layers do not match dims"));
        }
        if phi.rows() != dims.classes || phi.cols() != dims.feature {
            return Err(Error::shape(format!(
                "head is {}x{}, dims need {}x{}",
                phi.rows(),
                phi.cols(),
                dims.classes,
                dims.feature
            )));
        }
        Ok(Self { dims, theta, phi })
    }

    /// PyTorch-style uniform initialisation `U(-1/√fan_in, 1/√fan_in)` for
    /// every weight and bias, drawn from the `Init` stream of `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = RngStream::new(seed, StreamId::new(0, 0, Purpose::Init)).rng();
        let mut params = Vec::with_capacity(dims.extractor_len());
        for (n_out, n_in) in dims.layer_shapes() {
            let bound = 1.0 / (n_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            params.extend((0..n_out * n_in + n_out).map(|_| dist.sample(&mut rng)));
        }
        let bound = 1.0 / (dims.feature as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let phi = (0..dims.classes * dims.feature)
            .map(|_| dist.sample(&mut rng))
            .collect();
        Self::new(
            dims,
            Extractor::from_flat(&dims, params)?,
            Matrix::new(dims.classes, dims.feature, phi)?,
        )
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn theta(&self) -> &Extractor {
        &self.theta
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    pub fn set_theta(&mut self, theta: Extractor) -> Result<()> {
        if theta.shapes != self.theta.shapes {
            return Err(Error::shape("extractor layers do not match dims"));
        }
        self.theta = theta;
        Ok(())
    }

    pub fn set_phi(&mut self, phi: Matrix) -> Result<()> {
        if phi.rows() != self.phi.rows() || phi.cols() != self.phi.cols() {
            return Err(Error::shape("head shape does not match dims"));
        }
        self.phi = phi;
        Ok(())
    }

    pub(crate) fn theta_mut(&mut self) -> &mut Extractor {
        &mut self.theta
    }

    pub(crate) fn phi_mut(&mut self) -> &mut Matrix {
        &mut self.phi
    }

    /// Feature vector and logits for one input.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.dims.input {
            return Err(Error::shape(format!(
                "input has {} values, model expects {}",
                x.len(),
                self.dims.input
            )));
        }
        let feature = self.theta.features(x);
        let logits = self.logits(&feature);
        Ok((feature, logits))
    }

    /// Features for every sample of `data`, row-major.
    pub fn features(&self, data: &Dataset) -> Vec<f64> {
        self.theta.features(data.xs())
    }

    pub(crate) fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.dims.classes).map(|k| dot(self.phi.row(k), feature)).collect()
    }

    /// Argmax of the logits, lowest class index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward(x)?.1))
    }

    /// Top-1 predictions for a whole dataset.
    pub fn predict_all(&self, data: &Dataset) -> Vec<usize> {
        let feats = self.features(data);
        feats
            .chunks_exact(self.dims.feature)
            .map(|f| argmax(&self.logits(f)))
            .collect()
    }

    /// Mean cross-entropy over `data` without gradients.
    pub fn mean_cross_entropy(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let feats = self.features(data);
        let mut scratch = vec![0.0; self.dims.classes];
        let total: f64 = feats
            .chunks_exact(self.dims.feature)
            .zip(data.ys())
            .map(|(f, &y)| softmax_xent_into(&self.logits(f), y, &mut scratch))
            .sum();
        Ok(total / data.len() as f64)
    }

    fn check_batch(&self, batch: &Dataset) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if batch.dim() != self.dims.input {
            return Err(Error::shape("batch input dimension does not match model"));
        }
        if let Some(y) = batch.ys().iter().find(|y| **y >= self.dims.classes) {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        Ok(())
    }
}

/// Mean cross-entropy plus the alignment penalty
/// `(λ/b) Σ_l (1/d) ‖f(x_l) − c_{y_l}‖²`, with exact gradients for both the
/// extractor and the head. Samples whose class has no centroid are not
/// penalised.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &Dataset,
    centroids: &CentroidSet,
    lambda: f64,
) -> Result<LossAndGrads> {
    params.check_batch(batch)?;
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be non-negative, got {lambda}")));
    }
    if lambda > 0.0 && (centroids.classes() != params.dims.classes || centroids.dim() != params.dims.feature) {
        return Err(Error::shape("centroid set does not match model dims"));
    }
    let dims = params.dims;
    let (k, d) = (dims.classes, dims.feature);
    let rows = batch.len();
    let inv_b = 1.0 / rows as f64;
    let cache = params.theta.forward_cached(batch.xs(), rows);
    let feats = cache.output();

    let mut ce = 0.0;
    let mut grad_phi = Matrix::zeros(k, d);
    let mut d_feat = vec![0.0; rows * d];
    let mut g_logit = vec![0.0; k];
    for (r, &y) in batch.ys().iter().enumerate() {
        let f = &feats[r * d..(r + 1) * d];
        let logits = params.logits(f);
        ce += softmax_xent_into(&logits, y, &mut g_logit);
        let df = &mut d_feat[r * d..(r + 1) * d];
        for (c, g) in g_logit.iter().enumerate() {
            let g = g * inv_b;
            axpy(g, f, grad_phi.row_mut(c));
            axpy(g, params.phi.row(c), df);
        }
    }
    ce *= inv_b;

    let mut alignment = 0.0;
    if lambda > 0.0 {
        let scale = lambda * inv_b / d as f64;
        for (r, &y) in batch.ys().iter().enumerate() {
            let Some(c) = centroids.get(y) else { continue };
            let f = &feats[r * d..(r + 1) * d];
            let df = &mut d_feat[r * d..(r + 1) * d];
            for j in 0..d {
                let diff = f[j] - c[j];
                alignment += scale * diff * diff;
                df[j] += 2.0 * scale * diff;
            }
        }
    }

    let mut grad_theta = vec![0.0; params.theta.len()];
    params.theta.backward(&cache, d_feat, &mut grad_theta);
    let loss = ce + alignment;
    if !loss.is_finite() || grad_theta.iter().any(|v| !v.is_finite()) || !grad_phi.is_finite() {
        return Err(Error::NonFinite("loss_and_grads"));
    }
    Ok(LossAndGrads {
        loss,
        cross_entropy: ce,
        alignment,
        grad_theta,
        grad_phi,
    })
}

/// Mean cross-entropy of the head on precomputed features and its gradient
/// w.r.t. the head.
pub(crate) fn head_loss_and_grad(phi: &Matrix, feats: &[f64], labels: &[usize]) -> (f64, Matrix) {
    let (k, d) = (phi.rows(), phi.cols());
    let inv_b = 1.0 / labels.len() as f64;
    let mut grad = Matrix::zeros(k, d);
    let mut g_logit = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let mut loss = 0.0;
    for (f, &y) in feats.chunks_exact(d).zip(labels) {
        for (c, z) in logits.iter_mut().enumerate() {
            *z = dot(phi.row(c), f);
        }
        loss += softmax_xent_into(&logits, y, &mut g_logit);
        for (c, g) in g_logit.iter().enumerate() {
            axpy(g * inv_b, f, grad.row_mut(c));
        }
    }
    (loss * inv_b, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, keyed_rng};
    use rand::Rng;

    fn toy_batch(dims: &ModelDims, n: usize, seed: u64) -> Dataset {
        let mut rng = keyed_rng(seed, &[n as u64]);
        let xs = (0..n * dims.input).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ys = (0..n).map(|_| rng.random_range(0..dims.classes)).collect();
        Dataset::new(dims.input, xs, ys).unwrap()
    }

    fn small_dims() -> ModelDims {
        ModelDims {
            input: 4,
            hidden: 6,
            depth: 1,
            feature: 3,
            classes: 3,
        }
    }

    fn random_centroids(dims: &ModelDims, seed: u64, absent: Option<usize>) -> CentroidSet {
        let mut rng = keyed_rng(seed, &[99]);
        let v = (0..dims.classes * dims.feature)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut present = vec![true; dims.classes];
        if let Some(a) = absent {
            present[a] = false;
        }
        CentroidSet::from_parts(
            Matrix::new(dims.classes, dims.feature, v).unwrap(),
            vec![1; dims.classes],
            present,
            vec![false; dims.classes],
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_use_bias_path() {
        let dims = small_dims();
        let mut theta = vec![0.0; dims.extractor_len()];
        // last layer bias occupies the final `feature` entries
        let n = theta.len();
        theta[n - 3..].copy_from_slice(&[1.0, -2.0, 0.5]);
        let phi = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]]).unwrap();
        let p = ModelParams::new(dims, Extractor::from_flat(&dims, theta).unwrap(), phi).unwrap();
        let (f, z) = p.forward(&[0.3, -0.1, 2.0, 1.0]).unwrap();
        assert_eq!(f, vec![1.0, -2.0, 0.5]);
        assert_eq!(z, vec![1.0, -2.0, -0.5]);
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let dims = ModelDims {
            input: 3,
            hidden: 0,
            depth: 0,
            feature: 3,
            classes: 3,
        };
        let mut theta = Matrix::identity(3).into_vec();
        theta.extend([0.0; 3]);
        let p = ModelParams::new(dims, Extractor::from_flat(&dims, theta).unwrap(), Matrix::identity(3)).unwrap();
        let x = [0.7, -1.2, 3.0];
        assert_eq!(p.forward(&x).unwrap().1, x.to_vec());
    }

    #[test]
    fn logits_are_linear_in_head() {
        let dims = ModelDims::default();
        let p = ModelParams::init(dims, 5).unwrap();
        let x: Vec<f64> = (0..dims.input).map(|i| (i as f64).sin()).collect();
        let (_, z) = p.forward(&x).unwrap();
        let mut doubled = p.clone();
        doubled.set_phi(p.phi().scale(2.0).unwrap()).unwrap();
        let (_, z2) = doubled.forward(&x).unwrap();
        for (a, b) in z.iter().zip(&z2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let p = ModelParams::init(small_dims(), 1).unwrap();
        assert!(matches!(p.forward(&[1.0; 5]), Err(Error::Shape(_))));
    }

    #[test]
    fn lambda_zero_is_plain_cross_entropy() {
        let dims = small_dims();
        let p = ModelParams::init(dims, 2).unwrap();
        let batch = toy_batch(&dims, 7, 3);
        let c = random_centroids(&dims, 4, None);
        let with = loss_and_grads(&p, &batch, &c, 0.0).unwrap();
        let without = loss_and_grads(&p, &batch, &CentroidSet::empty(3, 3), 0.0).unwrap();
        assert_eq!(with.loss, without.loss);
        assert_eq!(with.grad_theta, without.grad_theta);
        assert_eq!(with.alignment, 0.0);
        assert!((with.loss - p.mean_cross_entropy(&batch).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn aligned_features_have_no_penalty() {
        let dims = small_dims();
        let p = ModelParams::init(dims, 6).unwrap();
        // one sample per class, centroids set to the exact features
        let batch = Dataset::new(
            4,
            vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0, -0.2, 0.3, 0.9, -0.8],
            vec![0, 1, 2],
        )
        .unwrap();
        let feats = p.features(&batch);
        let c = CentroidSet::from_features(&feats, batch.ys(), 3, 3);
        let a = loss_and_grads(&p, &batch, &c, 5.0).unwrap();
        let b = loss_and_grads(&p, &batch, &c, 0.0).unwrap();
        assert_eq!(a.alignment, 0.0);
        for (x, y) in a.grad_theta.iter().zip(&b.grad_theta) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-5))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = small_dims();
        for (seed, lambda) in [(1u64, 0.0), (2, 1.0), (3, 5.0)] {
            let p = ModelParams::init(dims, seed).unwrap();
            let batch = toy_batch(&dims, 5, seed + 10);
            let c = random_centroids(&dims, seed, Some(1));
            let g = loss_and_grads(&p, &batch, &c, lambda).unwrap();

            let theta0 = p.theta().as_slice().to_vec();
            let fd_theta = finite_diff_grad(
                |t| {
                    let mut q = p.clone();
                    q.set_theta(Extractor::from_flat(&dims, t.to_vec()).unwrap()).unwrap();
                    loss_and_grads(&q, &batch, &c, lambda).unwrap().loss
                },
                &theta0,
                1e-6,
            );
            assert!(max_rel_err(&g.grad_theta, &fd_theta) < 1e-4);

            let phi0 = p.phi().as_slice().to_vec();
            let fd_phi = finite_diff_grad(
                |f| {
                    let mut q = p.clone();
                    q.set_phi(Matrix::new(3, 3, f.to_vec()).unwrap()).unwrap();
                    loss_and_grads(&q, &batch, &c, lambda).unwrap().loss
                },
                &phi0,
                1e-6,
            );
            assert!(max_rel_err(g.grad_phi.as_slice(), &fd_phi) < 1e-4);
        }
    }

    #[test]
    fn head_gradient_agrees_with_full_path() {
        let dims = small_dims();
        let p = ModelParams::init(dims, 8).unwrap();
        let batch = toy_batch(&dims, 9, 8);
        let full = loss_and_grads(&p, &batch, &CentroidSet::empty(3, 3), 0.0).unwrap();
        let (loss, grad) = head_loss_and_grad(p.phi(), &p.features(&batch), batch.ys());
        assert!((loss - full.loss).abs() < 1e-14);
        assert!(grad.max_abs_diff(&full.grad_phi) < 1e-14);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let dims = small_dims();
        let p = ModelParams::init(dims, 1).unwrap();
        let empty = Dataset::new(4, vec![], vec![]).unwrap();
        assert!(matches!(
            loss_and_grads(&p, &empty, &CentroidSet::empty(3, 3), 1.0),
            Err(Error::Empty(_))
        ));
    }
}
