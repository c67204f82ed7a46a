//! Experiment configuration and its flat `key=value` file format.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use crate::data::PartitionMode;
use crate::error::{Error, Result};
use crate::matrix::{ScheduleMode, TopologyKind};

/// Keys accepted in config files and as `train` flag overrides, in the
/// order they are echoed.
pub const CONFIG_KEYS: [&str; 23] = [
    "algorithm",
    "nodes",
    "rounds",
    "batch_size",
    "local_epochs",
    "steps_mode",
    "lr",
    "lr_decay",
    "topology",
    "density",
    "time_varying",
    "tv_period",
    "partition",
    "shards_per_node",
    "data",
    "images",
    "labels",
    "classes",
    "dim",
    "per_class",
    "spread",
    "seed",
    "out",
];

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} '{}' (expected one of: {})",
                        stringify!($name),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Algorithm {
    Dacfl => "dacfl",
    Cdsgd => "cdsgd",
    Dpsgd => "dpsgd",
    Fedavg => "fedavg",
});

keyword_enum!(StepsMode {
    SingleBatch => "single_batch",
    FullEpoch => "full_epoch",
});

keyword_enum!(TopologyChoice {
    Uniform => "uniform",
    Dense => "dense",
    Sparse => "sparse",
});

keyword_enum!(DataSource {
    Synthetic => "synthetic",
    Idx => "idx",
});

fn partition_str(p: PartitionMode) -> &'static str {
    match p {
        PartitionMode::Iid => "iid",
        PartitionMode::NonIid => "noniid",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub nodes: usize,
    pub rounds: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub steps_mode: StepsMode,
    pub lr: f64,
    pub lr_decay: f64,
    pub topology: TopologyChoice,
    /// Fraction of nonzero mixing weights for the sparse topology.
    pub density: f64,
    pub time_varying: bool,
    pub tv_period: usize,
    pub partition: PartitionMode,
    pub shards_per_node: usize,
    pub data: DataSource,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
    pub out: PathBuf,
    /// Hidden width of the classifier; 0 selects the linear model. Not a file key.
    pub hidden_dim: usize,
    /// Synthetic test samples per class. Not a file key.
    pub test_per_class: usize,
    /// Evaluate the full-gradient bound pass every round.
    pub bound_check: bool,
}

pub const DEFAULT_HIDDEN_DIM: usize = 128;

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dacfl,
            nodes: 10,
            rounds: 100,
            batch_size: 20,
            local_epochs: 1,
            steps_mode: StepsMode::SingleBatch,
            lr: 0.001,
            lr_decay: 0.995,
            topology: TopologyChoice::Dense,
            density: 0.5,
            time_varying: false,
            tv_period: 10,
            partition: PartitionMode::Iid,
            shards_per_node: 2,
            data: DataSource::Synthetic,
            images: None,
            labels: None,
            classes: 10,
            dim: 16,
            per_class: 200,
            spread: 6.0,
            seed: 1,
            out: PathBuf::from("out"),
            hidden_dim: DEFAULT_HIDDEN_DIM,
            test_per_class: 100,
            bound_check: false,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got '{value}'"))),
    }
}

impl ExperimentConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "algorithm" => self.algorithm = v.parse()?,
            "nodes" => self.nodes = parse_num(key, v)?,
            "rounds" => self.rounds = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "local_epochs" => self.local_epochs = parse_num(key, v)?,
            "steps_mode" => self.steps_mode = v.parse()?,
            "lr" => self.lr = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "topology" => self.topology = v.parse()?,
            "density" => self.density = parse_num(key, v)?,
            "time_varying" => self.time_varying = parse_bool(key, v)?,
            "tv_period" => self.tv_period = parse_num(key, v)?,
            "partition" => {
                self.partition = match v {
                    "iid" => PartitionMode::Iid,
                    "noniid" | "non_iid" => PartitionMode::NonIid,
                    _ => return Err(Error::Config(format!("partition: expected iid or noniid, got '{v}'"))),
                }
            }
            "shards_per_node" => self.shards_per_node = parse_num(key, v)?,
            "data" => self.data = v.parse()?,
            "images" => self.images = (!v.is_empty()).then(|| PathBuf::from(v)),
            "labels" => self.labels = (!v.is_empty()).then(|| PathBuf::from(v)),
            "classes" => self.classes = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "per_class" => self.per_class = parse_num(key, v)?,
            "spread" => self.spread = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Apply a `key=value` text: blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", k + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {}", k + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Some(match key {
            "algorithm" => self.algorithm.to_string(),
            "nodes" => self.nodes.to_string(),
            "rounds" => self.rounds.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "local_epochs" => self.local_epochs.to_string(),
            "steps_mode" => self.steps_mode.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay" => self.lr_decay.to_string(),
            "topology" => self.topology.to_string(),
            "density" => self.density.to_string(),
            "time_varying" => self.time_varying.to_string(),
            "tv_period" => self.tv_period.to_string(),
            "partition" => partition_str(self.partition).to_string(),
            "shards_per_node" => self.shards_per_node.to_string(),
            "data" => self.data.to_string(),
            "images" => path(&self.images),
            "labels" => path(&self.labels),
            "classes" => self.classes.to_string(),
            "dim" => self.dim.to_string(),
            "per_class" => self.per_class.to_string(),
            "spread" => self.spread.to_string(),
            "seed" => self.seed.to_string(),
            "out" => self.out.display().to_string(),
            _ => return None,
        })
    }

    /// Every key in [`CONFIG_KEYS`] order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            writeln!(s, "{key}={}", self.get(key).expect("known key")).expect("write to String");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nodes", self.nodes),
            ("rounds", self.rounds),
            ("batch_size", self.batch_size),
            ("local_epochs", self.local_epochs),
            ("tv_period", self.tv_period),
            ("shards_per_node", self.shards_per_node),
            ("classes", self.classes),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.topology == TopologyChoice::Sparse && !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density must lie in (0, 1], got {}", self.density)));
        }
        match self.data {
            DataSource::Synthetic => {
                if self.classes < 2 || self.dim == 0 || self.per_class == 0 {
                    return Err(Error::Config("synthetic data needs classes >= 2, dim >= 1, per_class >= 1".into()));
                }
            }
            DataSource::Idx => {
                if self.images.is_none() || self.labels.is_none() {
                    return Err(Error::Config("data=idx needs both images and labels paths".into()));
                }
            }
        }
        Ok(())
    }

    pub fn topology_kind(&self) -> TopologyKind {
        match self.topology {
            TopologyChoice::Uniform => TopologyKind::Uniform,
            TopologyChoice::Dense => TopologyKind::Dense,
            TopologyChoice::Sparse => TopologyKind::Sparse { density: self.density },
        }
    }

    pub fn schedule_mode(&self) -> ScheduleMode {
        if self.time_varying {
            ScheduleMode::TimeVarying { period: self.tv_period }
        } else {
            ScheduleMode::TimeInvariant
        }
    }

    /// Learning rate used during round `t` (0-based): `lr * lr_decay^t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr * self.lr_decay.powi(t as i32)
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
