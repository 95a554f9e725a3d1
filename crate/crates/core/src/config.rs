//! Flat `key = value` experiment files.
//!
//! One assignment per line; `#` starts a comment. Keys are dotted
//! (`partition.scheme`, `model.d`); a `[section]` line prefixes the keys
//! that follow it. Unknown keys are rejected. Every key and its default:
//!
//! ```text
//! algorithm            = fedpac      # fedpac fedavg fedavg_ft fedrep local fa_only cc_only (none = fedrep)
//! rounds               = 60
//! clients              = 20
//! sample_rate          = 1.0
//! seeds                = 0           # comma separated
//! workers              = 1
//! out_dir              =             # falls back to $FEDPAC_OUT_DIR, then ./out
//! qp_tol               = 1e-8
//! finetune_epochs      = 5
//! train.eta_g          = 0.1
//! train.eta_f          = 0.01
//! train.head_epochs    = 1
//! train.epochs         = 5
//! train.batch          = 50
//! train.lambda         = 1.0
//! train.momentum       = 0.5
//! train.weight_decay   = 5e-4
//! model.p              = 16
//! model.h              = 64
//! model.depth          = 1
//! model.d              = 16
//! model.k              = 10
//! data.source          = synthetic   # synthetic | idx
//! data.class_sep       = 4.0
//! data.images          =             # idx only
//! data.labels          =             # idx only
//! data.seed            =             # defaults to the run seed
//! partition.scheme     = shared      # shared | dirichlet | pathological | custom
//! partition.s_percent  = 20
//! partition.groups     = 5
//! partition.dominant   =             # e.g. "0 1 2; 2 3 4"; default: consecutive triples
//! partition.weights    =             # custom scheme, one K-vector per group, ";" separated
//! partition.beta       = 1.0
//! partition.train_size = 600
//! partition.train_sizes =            # one size per client, comma separated
//! partition.size_choices =           # e.g. "300, 600, 1200"
//! partition.test_size  = 300
//! partition.permutations =           # one permutation per group, ";" separated, "-" for none
//! partition.rotation   =             # degrees per group, comma separated
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{SampleSizes, Scheme};
use crate::error::{Error, Result};
use crate::orchestrator::{DataSource, ExperimentConfig};

/// A parsed experiment file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ConfigFile {
    pub experiment: ExperimentConfig,
    pub out_dir: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str, sep: char) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(sep)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_groups<T: FromStr>(key: &str, value: &str) -> Result<Vec<Vec<T>>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(';')
        .map(|g| parse_list(key, &g.replace(',', " "), ' '))
        .collect()
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ConfigFile::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, found `{line}`"),
                )
            })?;
            let key = key.trim();
            let key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            cfg.set(&key, value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.experiment;
        let p = &mut e.partition;
        match key {
            "algorithm" => e.algorithm = parse(key, value)?,
            "rounds" => e.rounds = parse(key, value)?,
            "clients" => e.clients = parse(key, value)?,
            "sample_rate" => e.sample_rate = parse(key, value)?,
            "seeds" | "seed" => {
                e.seeds = parse_list(key, value, ',')?;
                if e.seeds.is_empty() {
                    return Err(Error::config(key, "at least one seed is required"));
                }
            }
            "workers" => e.workers = parse(key, value)?,
            "out_dir" => self.out_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "qp_tol" => e.qp_tol = parse(key, value)?,
            "finetune_epochs" => e.finetune_epochs = parse(key, value)?,
            "train.eta_g" => e.local.eta_g = parse(key, value)?,
            "train.eta_f" => e.local.eta_f = parse(key, value)?,
            "train.head_epochs" => e.local.head_epochs = parse(key, value)?,
            "train.epochs" => e.local.epochs = parse(key, value)?,
            "train.batch" => e.local.batch = parse(key, value)?,
            "train.lambda" => e.local.lambda = parse(key, value)?,
            "train.momentum" => e.local.momentum = parse(key, value)?,
            "train.weight_decay" => e.local.weight_decay = parse(key, value)?,
            "model.p" => e.dims.input = parse(key, value)?,
            "model.h" => e.dims.hidden = parse(key, value)?,
            "model.depth" => e.dims.depth = parse(key, value)?,
            "model.d" => e.dims.feature = parse(key, value)?,
            "model.k" => e.dims.classes = parse(key, value)?,
            "data.source" => {
                e.data = match value {
                    "synthetic" => DataSource::Synthetic { class_sep: 4.0 },
                    "idx" => DataSource::Idx {
                        images: PathBuf::new(),
                        labels: PathBuf::new(),
                    },
                    other => return Err(Error::config(key, format!("unknown data source `{other}`"))),
                }
            }
            "data.class_sep" => match &mut e.data {
                DataSource::Synthetic { class_sep } => *class_sep = parse(key, value)?,
                DataSource::Idx { .. } => return Err(Error::config(key, "only valid for the synthetic source")),
            },
            "data.images" | "data.labels" => match &mut e.data {
                DataSource::Idx { images, labels } => {
                    let target = if key == "data.images" { images } else { labels };
                    *target = PathBuf::from(value);
                }
                DataSource::Synthetic { .. } => {
                    return Err(Error::config(key, "set `data.source = idx` first"));
                }
            },
            "data.seed" => e.data_seed = Some(parse(key, value)?),
            "partition.scheme" => {
                p.scheme = Scheme::from_str(value).map_err(|err| Error::config(key, err.to_string()))?
            }
            "partition.s_percent" => p.s_percent = parse(key, value)?,
            "partition.groups" => p.num_groups = parse(key, value)?,
            "partition.dominant" => p.dominant = parse_groups(key, value)?,
            "partition.weights" => p.custom_weights = parse_groups(key, value)?,
            "partition.beta" => p.dirichlet_beta = parse(key, value)?,
            "partition.train_size" => p.train_sizes = SampleSizes::Fixed(parse(key, value)?),
            "partition.train_sizes" => p.train_sizes = SampleSizes::PerClient(parse_list(key, value, ',')?),
            "partition.size_choices" => p.train_sizes = SampleSizes::Choice(parse_list(key, value, ',')?),
            "partition.test_size" => p.test_size = parse(key, value)?,
            "partition.permutations" => {
                p.label_permutations = value
                    .split(';')
                    .map(|g| {
                        let g = g.trim();
                        if g == "-" || g.is_empty() {
                            Ok(None)
                        } else {
                            parse_list(key, &g.replace(',', " "), ' ').map(Some)
                        }
                    })
                    .collect::<Result<_>>()?
            }
            "partition.rotation" => p.rotation_degrees = parse_list(key, value, ',')?,
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Parses, then checks every value.
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Idx { images, labels } = &self.experiment.data {
            if images.as_os_str().is_empty() || labels.as_os_str().is_empty() {
                return Err(Error::config(
                    "data.images",
                    "idx source needs data.images and data.labels",
                ));
            }
        }
        self.experiment.validate()
    }

    /// The effective configuration in the same format, every key spelled
    /// out.
    pub fn to_text(&self) -> String {
        let e = &self.experiment;
        let p = &e.partition;
        let mut lines = vec![
            format!("algorithm = {}", e.algorithm),
            format!("rounds = {}", e.rounds),
            format!("clients = {}", e.clients),
            format!("sample_rate = {}", e.sample_rate),
            format!("seeds = {}", join(&e.seeds, ", ")),
            format!("workers = {}", e.workers),
        ];
        if let Some(dir) = &self.out_dir {
            lines.push(format!("out_dir = {}", dir.display()));
        }
        lines.extend([
            format!("qp_tol = {:e}", e.qp_tol),
            format!("finetune_epochs = {}", e.finetune_epochs),
            format!("train.eta_g = {}", e.local.eta_g),
            format!("train.eta_f = {}", e.local.eta_f),
            format!("train.head_epochs = {}", e.local.head_epochs),
            format!("train.epochs = {}", e.local.epochs),
            format!("train.batch = {}", e.local.batch),
            format!("train.lambda = {}", e.local.lambda),
            format!("train.momentum = {}", e.local.momentum),
            format!("train.weight_decay = {}", e.local.weight_decay),
            format!("model.p = {}", e.dims.input),
            format!("model.h = {}", e.dims.hidden),
            format!("model.depth = {}", e.dims.depth),
            format!("model.d = {}", e.dims.feature),
            format!("model.k = {}", e.dims.classes),
        ]);
        match &e.data {
            DataSource::Synthetic { class_sep } => {
                lines.push("data.source = synthetic".into());
                lines.push(format!("data.class_sep = {class_sep}"));
            }
            DataSource::Idx { images, labels } => {
                lines.push("data.source = idx".into());
                lines.push(format!("data.images = {}", images.display()));
                lines.push(format!("data.labels = {}", labels.display()));
            }
        }
        if let Some(s) = e.data_seed {
            lines.push(format!("data.seed = {s}"));
        }
        lines.push(format!("partition.scheme = {}", p.scheme));
        lines.push(format!("partition.s_percent = {}", p.s_percent));
        lines.push(format!("partition.groups = {}", p.num_groups));
        if !p.dominant.is_empty() {
            let groups: Vec<String> = p.dominant.iter().map(|g| join(g, " ")).collect();
            lines.push(format!("partition.dominant = {}", groups.join("; ")));
        }
        if !p.custom_weights.is_empty() {
            let groups: Vec<String> = p.custom_weights.iter().map(|g| join(g, " ")).collect();
            lines.push(format!("partition.weights = {}", groups.join("; ")));
        }
        lines.push(format!("partition.beta = {}", p.dirichlet_beta));
        match &p.train_sizes {
            SampleSizes::Fixed(n) => lines.push(format!("partition.train_size = {n}")),
            SampleSizes::PerClient(v) => lines.push(format!("partition.train_sizes = {}", join(v, ", "))),
            SampleSizes::Choice(v) => lines.push(format!("partition.size_choices = {}", join(v, ", "))),
        }
        lines.push(format!("partition.test_size = {}", p.test_size));
        if !p.label_permutations.is_empty() {
            let groups: Vec<String> = p
                .label_permutations
                .iter()
                .map(|g| g.as_ref().map_or("-".to_string(), |v| join(v, " ")))
                .collect();
            lines.push(format!("partition.permutations = {}", groups.join("; ")));
        }
        if !p.rotation_degrees.is_empty() {
            lines.push(format!("partition.rotation = {}", join(&p.rotation_degrees, ", ")));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }
}
