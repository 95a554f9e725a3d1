//! The federated round loop for FedPAC and its baselines, evaluation, and
//! multi-seed comparisons.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::client::{run_client_round, train_joint, ClientUpdate, LocalConfig, RoundKey, TrainMode};
use crate::data::{idx::read_idx, partition, ClientDataset, PartitionSpec, PooledSource, SampleSource, SyntheticWorld};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Extractor, ModelDims, ModelParams};
use crate::numerics::{keyed_rng, Matrix, Purpose};
use crate::qpsolve::DEFAULT_TOL;
use crate::server::{
    aggregate_centroids, aggregate_extractors, aggregate_heads, personalize_heads, write_weights_csv, GlobalState,
};
use crate::stats::CentroidSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    FedPac,
    FedAvg,
    FedAvgFt,
    /// Shared extractor, personal heads, no alignment, no combination. Also
    /// the "none" row of the ablation.
    FedRep,
    Local,
    FaOnly,
    CcOnly,
}

/// What an algorithm switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flags {
    pub share_extractor: bool,
    pub share_head: bool,
    pub alignment: bool,
    pub combination: bool,
    pub joint_training: bool,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::FedPac,
        Algorithm::FedAvg,
        Algorithm::FedAvgFt,
        Algorithm::FedRep,
        Algorithm::Local,
        Algorithm::FaOnly,
        Algorithm::CcOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedPac => "fedpac",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedAvgFt => "fedavg_ft",
            Algorithm::FedRep => "fedrep",
            Algorithm::Local => "local",
            Algorithm::FaOnly => "fa_only",
            Algorithm::CcOnly => "cc_only",
        }
    }

    pub fn flags(self) -> Flags {
        let (share_extractor, share_head, alignment, combination, joint_training) = match self {
            Algorithm::FedPac => (true, false, true, true, false),
            Algorithm::FedAvg | Algorithm::FedAvgFt => (true, true, false, false, true),
            Algorithm::FedRep => (true, false, false, false, false),
            Algorithm::Local => (false, false, false, false, false),
            Algorithm::FaOnly => (true, false, true, false, false),
            Algorithm::CcOnly => (true, false, false, true, false),
        };
        Flags {
            share_extractor,
            share_head,
            alignment,
            combination,
            joint_training,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Algorithm::FedRep),
            other => Algorithm::ALL
                .into_iter()
                .find(|a| a.name() == other)
                .ok_or_else(|| Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Where client samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Gaussian class clouds with means of norm `class_sep`.
    Synthetic { class_sep: f64 },
    /// Samples drawn with replacement from an IDX image/label pair.
    Idx { images: PathBuf, labels: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub clients: usize,
    /// Fraction of clients per round, `C`.
    pub sample_rate: f64,
    pub local: LocalConfig,
    pub seeds: Vec<u64>,
    pub partition: PartitionSpec,
    /// Seed of the data world and partition; the run seed when `None`.
    pub data_seed: Option<u64>,
    pub dims: ModelDims,
    pub data: DataSource,
    pub workers: usize,
    pub qp_tol: f64,
    /// Epochs of joint fine-tuning after the last round (FedAvg-FT only).
    pub finetune_epochs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::FedPac,
            rounds: 60,
            clients: 20,
            sample_rate: 1.0,
            local: LocalConfig::default(),
            seeds: vec![0],
            partition: PartitionSpec::default(),
            data_seed: None,
            dims: ModelDims::default(),
            data: DataSource::Synthetic { class_sep: 4.0 },
            workers: 1,
            qp_tol: DEFAULT_TOL,
            finetune_epochs: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::config(
                "sample_rate",
                format!("must lie in (0, 1], got {}", self.sample_rate),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if self.clients == 0 {
            return Err(Error::config("clients", "at least one client is required"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if !(self.qp_tol > 0.0) {
            return Err(Error::config("qp_tol", "must be positive"));
        }
        if let DataSource::Synthetic { class_sep } = self.data {
            if !(class_sep >= 0.0) {
                return Err(Error::config("data.class_sep", "must be non-negative"));
            }
        }
        self.dims
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        self.local
            .validate()
            .map_err(|e| Error::config("train", e.to_string()))?;
        self.partition
            .validate(self.dims.classes, self.clients)
            .map_err(|e| Error::config("partition", e.to_string()))
    }

    /// Local settings as used by this algorithm: the alignment weight is
    /// zero unless alignment is on.
    pub fn effective_local(&self) -> LocalConfig {
        let mut local = self.local.clone();
        if !self.algorithm.flags().alignment {
            local.lambda = 0.0;
        }
        local
    }
}

/// Builds the sample source and every client's data for one seed.
pub fn build_federation(config: &ExperimentConfig, seed: u64) -> Result<Vec<ClientDataset>> {
    let data_seed = config.data_seed.unwrap_or(seed);
    let source: Box<dyn SampleSource> = match &config.data {
        DataSource::Synthetic { class_sep } => Box::new(SyntheticWorld::new(
            config.dims.classes,
            config.dims.input,
            *class_sep,
            data_seed,
        )?),
        DataSource::Idx { images, labels } => Box::new(PooledSource::new(
            read_idx(images, labels)?,
            config.dims.classes,
            data_seed,
        )?),
    };
    if source.dim() != config.dims.input {
        return Err(Error::config(
            "model.p",
            format!("data has {} inputs, model expects {}", source.dim(), config.dims.input),
        ));
    }
    let spec = PartitionSpec {
        seed: data_seed,
        ..config.partition.clone()
    };
    partition(&spec, source.as_ref(), config.clients)
}

/// Top-1 accuracy of `models[i]` on `datasets[i].test`.
pub fn evaluate(models: &[ModelParams], datasets: &[ClientDataset]) -> Result<Vec<f64>> {
    if models.len() != datasets.len() {
        return Err(Error::shape("one model per client dataset required"));
    }
    models.iter().zip(datasets).map(|(m, d)| accuracy(m, &d.test)).collect()
}

fn accuracy(model: &ModelParams, data: &crate::data::Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let hits = model
        .predict_all(data)
        .iter()
        .zip(data.ys())
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// Metrics after one round (round 0 evaluates the initial models).
#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Mean cross-entropy of each client's model on its training set.
    pub losses: Vec<f64>,
    /// Combination weights when the algorithm combines heads.
    pub weights: Option<Matrix>,
    pub wall_seconds: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Final state of a run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub reports: Vec<RoundReport>,
    pub models: Vec<ModelParams>,
}

impl RunResult {
    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("at least the initial report")
    }
}

/// Clients taking part in `round` (1-based): `⌈C·m⌉` chosen uniformly
/// without replacement, everyone in the last round.
pub fn sample_clients(seed: u64, round: usize, rounds: usize, clients: usize, rate: f64) -> Vec<usize> {
    let k = ((rate * clients as f64).ceil() as usize).clamp(1, clients);
    if k == clients || round == rounds {
        return (0..clients).collect();
    }
    let mut rng = keyed_rng(seed, &[Purpose::ClientSampling as u64, round as u64]);
    let mut chosen = sample(&mut rng, clients, k).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Runs one seed of `config`. `observer` sees every report as soon as it is
/// complete.
pub fn run_experiment_with(
    config: &ExperimentConfig,
    seed: u64,
    observer: &mut dyn FnMut(&RoundReport) -> Result<()>,
) -> Result<RunResult> {
    config.validate()?;
    let datasets = build_federation(config, seed)?;
    let flags = config.algorithm.flags();
    let local = config.effective_local();
    let mode = if flags.joint_training {
        TrainMode::Joint
    } else {
        TrainMode::Alternating
    };
    let dims = config.dims;
    let m = config.clients;
    let init = ModelParams::init(dims, seed)?;
    let mut state = GlobalState::new(init.theta().clone(), init.phi().clone(), m, dims.classes, dims.feature);
    let mut own_thetas: Vec<Extractor> = vec![init.theta().clone(); m];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let model_of = |state: &GlobalState, own: &[Extractor], i: usize| -> Result<ModelParams> {
        let theta = if flags.share_extractor {
            state.theta.clone()
        } else {
            own[i].clone()
        };
        ModelParams::new(dims, theta, state.heads[i].clone())
    };

    let mut reports = Vec::with_capacity(config.rounds + 1);
    let mut report = |round: usize,
                      participants: Vec<usize>,
                      models: &[ModelParams],
                      weights: Option<Matrix>,
                      started: Instant|
     -> Result<()> {
        let (accuracies, losses): (Vec<f64>, Vec<f64>) = pool
            .install(|| {
                models
                    .par_iter()
                    .zip(&datasets)
                    .map(|(model, d)| Ok((accuracy(model, &d.test)?, model.mean_cross_entropy(&d.train)?)))
                    .collect::<Result<Vec<(f64, f64)>>>()
            })?
            .into_iter()
            .unzip();
        let (mean_accuracy, std_accuracy) = mean_std(&accuracies);
        let r = RoundReport {
            round,
            participants,
            accuracies,
            mean_accuracy,
            std_accuracy,
            losses,
            weights,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "round {round}: mean accuracy {:.4} ± {:.4}",
            r.mean_accuracy,
            r.std_accuracy
        );
        observer(&r)?;
        reports.push(r);
        Ok(())
    };

    let started = Instant::now();
    let models: Vec<ModelParams> = (0..m)
        .map(|i| model_of(&state, &own_thetas, i))
        .collect::<Result<_>>()?;
    report(0, Vec::new(), &models, None, started)?;
    let mut models = models;

    for round in 1..=config.rounds {
        let started = Instant::now();
        let participants = sample_clients(seed, round, config.rounds, m, config.sample_rate);
        let centroids = if flags.alignment {
            state.centroids.clone()
        } else {
            CentroidSet::empty(dims.classes, dims.feature)
        };
        let starts: Vec<ModelParams> = participants
            .iter()
            .map(|&i| model_of(&state, &own_thetas, i))
            .collect::<Result<_>>()?;
        let updates: Vec<ClientUpdate> = pool.install(|| {
            participants
                .par_iter()
                .zip(&starts)
                .map(|(&i, start)| {
                    let key = RoundKey { seed, client: i, round };
                    run_client_round(start, &datasets[i].train, &centroids, &local, mode, key)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        if flags.share_extractor {
            state.theta = aggregate_extractors(&updates)?;
        } else {
            for u in &updates {
                own_thetas[u.client_id] = u.theta.clone();
            }
        }
        if flags.alignment {
            state.centroids = aggregate_centroids(&updates, &state.centroids)?;
        }
        let mut weights = None;
        if flags.share_head {
            let phi = aggregate_heads(&updates)?;
            state.heads.iter_mut().for_each(|h| *h = phi.clone());
        } else if flags.combination {
            let p = pool.install(|| personalize_heads(&updates, config.qp_tol))?;
            state.apply(&p);
            weights = Some(state.weights.clone());
        } else {
            for u in &updates {
                state.heads[u.client_id] = u.phi.clone();
            }
        }
        state.round = round;

        models = (0..m)
            .map(|i| model_of(&state, &own_thetas, i))
            .collect::<Result<_>>()?;
        if round == config.rounds && config.algorithm == Algorithm::FedAvgFt && config.finetune_epochs > 0 {
            models = pool.install(|| {
                models
                    .par_iter()
                    .enumerate()
                    .map(|(i, model)| {
                        let key = RoundKey {
                            seed,
                            client: i,
                            round: round + 1,
                        };
                        let empty = CentroidSet::empty(dims.classes, dims.feature);
                        train_joint(model, &datasets[i].train, &empty, &local, config.finetune_epochs, key)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
        }
        report(round, participants, &models, weights, started)?;
    }
    Ok(RunResult { reports, models })
}

pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    run_experiment_with(config, seed, &mut |_| Ok(()))
}

/// `{algorithm}_seed{seed}` stem shared by every output file of a run.
pub fn run_stem(algorithm: Algorithm, seed: u64) -> String {
    format!("{}_seed{seed}", algorithm.name())
}

/// Writes per-round metrics and weight matrices under `out_dir` while the
/// run progresses, then the final checkpoint. Returns the run result.
///
/// Files: `metrics_<stem>.csv` with columns
/// `round,client_id,accuracy,loss,algorithm,seed` (one `AGG` row per round
/// with the client means), `weights_<stem>/round_<t>.csv`, and
/// `checkpoint_<stem>.json`.
pub fn run_to_dir(config: &ExperimentConfig, seed: u64, out_dir: &Path) -> Result<RunResult> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = run_stem(config.algorithm, seed);
    let metrics_path = out_dir.join(format!("metrics_{stem}.csv"));
    let weights_dir = out_dir.join(format!("weights_{stem}"));
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(&metrics_path, e);
    writeln!(metrics, "round,client_id,accuracy,loss,algorithm,seed").map_err(io)?;
    let name = config.algorithm.name();
    let result = run_experiment_with(config, seed, &mut |r| {
        let mut text = String::new();
        for (i, (a, l)) in r.accuracies.iter().zip(&r.losses).enumerate() {
            text.push_str(&format!("{},{i},{a},{l},{name},{seed}\n", r.round));
        }
        let (mean_loss, _) = mean_std(&r.losses);
        text.push_str(&format!(
            "{},AGG,{},{mean_loss},{name},{seed}\n",
            r.round, r.mean_accuracy
        ));
        metrics
            .write_all(text.as_bytes())
            .and_then(|_| metrics.flush())
            .map_err(io)?;
        if let Some(w) = &r.weights {
            std::fs::create_dir_all(&weights_dir).map_err(|e| Error::io(&weights_dir, e))?;
            write_weights_csv(w, &weights_dir.join(format!("round_{:04}.csv", r.round)))?;
        }
        Ok(())
    })?;
    Checkpoint::from_models(&result.models)?.write(&out_dir.join(format!("checkpoint_{stem}.json")))?;
    Ok(result)
}

/// Final mean accuracy of one algorithm over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub algorithm: Algorithm,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for ComparisonRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:.2} ± {:.2}",
            self.label,
            100.0 * self.mean,
            100.0 * self.std
        )
    }
}

/// Runs every `(label, algorithm)` over `base.seeds`.
pub fn compare_algorithms(base: &ExperimentConfig, algorithms: &[(&str, Algorithm)]) -> Result<Vec<ComparisonRow>> {
    algorithms
        .iter()
        .map(|&(label, algorithm)| {
            let config = ExperimentConfig {
                algorithm,
                ..base.clone()
            };
            let per_seed = base
                .seeds
                .iter()
                .map(|&s| Ok(run_experiment(&config, s)?.final_report().mean_accuracy))
                .collect::<Result<Vec<_>>>()?;
            let n = per_seed.len() as f64;
            let mean = per_seed.iter().sum::<f64>() / n;
            let std = if per_seed.len() > 1 {
                (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Ok(ComparisonRow {
                label: label.to_string(),
                algorithm,
                per_seed,
                mean,
                std,
            })
        })
        .collect()
}

/// Alignment and combination switched on and off: rows `none`, `fa_only`,
/// `cc_only`, `fedpac`.
pub fn ablation_suite(base: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    compare_algorithms(
        base,
        &[
            ("none", Algorithm::FedRep),
            ("fa_only", Algorithm::FaOnly),
            ("cc_only", Algorithm::CcOnly),
            ("fedpac", Algorithm::FedPac),
        ],
    )
}
