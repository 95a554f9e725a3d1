//! Local training on one client: statistics before training, one head
//! epoch, several extractor epochs against the global centroids, and local
//! centroids after training.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{head_loss_and_grad, loss_and_grads, Extractor, ModelParams};
use crate::numerics::{keyed_rng, Matrix, Purpose};
use crate::stats::{CentroidSet, FeatureStats};

/// Local optimisation hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalConfig {
    pub eta_g: f64,
    pub eta_f: f64,
    pub head_epochs: usize,
    /// Extractor epochs per round (`E`).
    pub epochs: usize,
    pub batch: usize,
    pub lambda: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            eta_g: 0.1,
            eta_f: 0.01,
            head_epochs: 1,
            epochs: 5,
            batch: 50,
            lambda: 1.0,
            momentum: 0.5,
            weight_decay: 5e-4,
        }
    }
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_g >= 0.0) || !(self.eta_f >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "momentum must lie in [0, 1) and weight decay be non-negative",
            ));
        }
        Ok(())
    }
}

/// Which parts of the model local training updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Head for `head_epochs`, then extractor for `epochs` with the head
    /// frozen.
    Alternating,
    /// Head and extractor together for `epochs` at rate `eta_f`.
    Joint,
}

/// Identifies the random streams of one client in one round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundKey {
    pub seed: u64,
    pub client: usize,
    pub round: usize,
}

impl RoundKey {
    fn rng(&self, phase: u64) -> ChaCha8Rng {
        keyed_rng(
            self.seed,
            &[self.client as u64, self.round as u64, Purpose::Shuffle as u64, phase],
        )
    }
}

/// Plain SGD with optional heavy-ball momentum and L2 weight decay:
/// `v ← μv + g + wd·w`, `w ← w − η v`. Fresh state for every call.
struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    fn new(lr: f64, cfg: &LocalConfig, len: usize) -> Self {
        Self {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: vec![0.0; if cfg.momentum > 0.0 { len } else { 0 }],
        }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64]) {
        if self.momentum > 0.0 {
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(self.velocity.iter_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
        } else {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= self.lr * (gi + self.weight_decay * *wi);
            }
        }
    }
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Feature statistics of `train` under the current extractor.
pub fn extract_stats(params: &ModelParams, train: &Dataset) -> Result<FeatureStats> {
    let d = params.dims();
    FeatureStats::from_features(&params.features(train), train.ys(), d.classes, d.feature)
}

/// Class means of the features of `train`.
pub fn local_centroids(params: &ModelParams, train: &Dataset) -> CentroidSet {
    let d = params.dims();
    CentroidSet::from_features(&params.features(train), train.ys(), d.classes, d.feature)
}

/// Trains the head on cross-entropy with the extractor frozen. Features are
/// computed once, since they cannot change.
pub fn train_head(params: &ModelParams, train: &Dataset, cfg: &LocalConfig, key: RoundKey) -> Result<Matrix> {
    let mut phi = params.phi().clone();
    if cfg.eta_g == 0.0 || cfg.head_epochs == 0 || train.is_empty() {
        return Ok(phi);
    }
    let d = params.dims().feature;
    let feats = params.features(train);
    let mut rng = key.rng(0);
    let mut opt = Sgd::new(cfg.eta_g, cfg, phi.as_slice().len());
    let mut bf = Vec::with_capacity(cfg.batch * d);
    let mut by = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.head_epochs {
        for idx in batches(train.len(), cfg.batch, &mut rng) {
            bf.clear();
            by.clear();
            for &i in &idx {
                bf.extend_from_slice(&feats[i * d..(i + 1) * d]);
                by.push(train.ys()[i]);
            }
            let (_, grad) = head_loss_and_grad(&phi, &bf, &by);
            opt.step(phi.as_mut_slice(), grad.as_slice());
        }
    }
    if !phi.is_finite() {
        return Err(Error::NonFinite("train_head"));
    }
    Ok(phi)
}

/// Trains the extractor on cross-entropy plus the alignment penalty towards
/// `centroids`, with the head frozen.
pub fn train_extractor(
    params: &ModelParams,
    train: &Dataset,
    centroids: &CentroidSet,
    cfg: &LocalConfig,
    key: RoundKey,
) -> Result<Extractor> {
    let mut work = params.clone();
    if cfg.eta_f == 0.0 || cfg.epochs == 0 || train.is_empty() {
        return Ok(work.theta().clone());
    }
    let mut rng = key.rng(1);
    let mut opt = Sgd::new(cfg.eta_f, cfg, work.theta().len());
    for _ in 0..cfg.epochs {
        for idx in batches(train.len(), cfg.batch, &mut rng) {
            let out = loss_and_grads(&work, &train.gather(&idx), centroids, cfg.lambda)?;
            opt.step(work.theta_mut().as_mut_slice(), &out.grad_theta);
        }
    }
    Ok(work.theta().clone())
}

/// Trains head and extractor together on cross-entropy plus the alignment
/// penalty.
pub fn train_joint(
    params: &ModelParams,
    train: &Dataset,
    centroids: &CentroidSet,
    cfg: &LocalConfig,
    epochs: usize,
    key: RoundKey,
) -> Result<ModelParams> {
    let mut work = params.clone();
    if epochs == 0 || train.is_empty() {
        return Ok(work);
    }
    let mut rng = key.rng(2);
    let mut opt_theta = Sgd::new(cfg.eta_f, cfg, work.theta().len());
    let mut opt_phi = Sgd::new(cfg.eta_f, cfg, work.phi().as_slice().len());
    for _ in 0..epochs {
        for idx in batches(train.len(), cfg.batch, &mut rng) {
            let out = loss_and_grads(&work, &train.gather(&idx), centroids, cfg.lambda)?;
            opt_theta.step(work.theta_mut().as_mut_slice(), &out.grad_theta);
            opt_phi.step(work.phi_mut().as_mut_slice(), out.grad_phi.as_slice());
        }
    }
    Ok(work)
}

/// Everything a client sends back after a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub theta: Extractor,
    pub phi: Matrix,
    pub local_centroids: CentroidSet,
    pub stats: FeatureStats,
    pub n: usize,
}

/// One local round starting from `start` (broadcast extractor plus the
/// client's head). Statistics use the starting extractor; centroids use the
/// trained one.
pub fn run_client_round(
    start: &ModelParams,
    train: &Dataset,
    centroids: &CentroidSet,
    cfg: &LocalConfig,
    mode: TrainMode,
    key: RoundKey,
) -> Result<ClientUpdate> {
    if train.is_empty() {
        return Err(Error::Empty("client training set"));
    }
    if train.dim() != start.dims().input {
        return Err(Error::shape("client data does not match model input"));
    }
    let stats = extract_stats(start, train)?;
    let trained = match mode {
        TrainMode::Alternating => {
            let mut m = start.clone();
            m.set_phi(train_head(start, train, cfg, key)?)?;
            let theta = train_extractor(&m, train, centroids, cfg, key)?;
            m.set_theta(theta)?;
            m
        }
        TrainMode::Joint => train_joint(start, train, centroids, cfg, cfg.epochs, key)?,
    };
    Ok(ClientUpdate {
        client_id: key.client,
        local_centroids: local_centroids(&trained, train),
        theta: trained.theta().clone(),
        phi: trained.phi().clone(),
        stats,
        n: train.len(),
    })
}
