//! Run settings.
//!
//! Every setting has one canonical key. Config files are flat `key=value`
//! text whose keys are hyperparameter table row names, so `nr. neighbors =
//! 9`, `nr_neighbors=9` and the flag `--nr-neighbors 9` all set the same
//! value. Precedence, lowest first: built-in defaults, the `GRIDIFIER_SEED`
//! environment variable (seed only), the config file, command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use gridify_core::nn::{Activation, Aggregation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Value,
    /// Present or absent on the command line; `true`/`false` in files.
    Switch,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    /// Extra flag spellings, e.g. `k` for `--k`.
    pub aliases: &'static [&'static str],
    pub kind: Kind,
    pub help: &'static str,
}

const fn value(key: &'static str, aliases: &'static [&'static str], help: &'static str) -> KeySpec {
    KeySpec {
        key,
        aliases,
        kind: Kind::Value,
        help,
    }
}

const fn switch(key: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        key,
        aliases: &[],
        kind: Kind::Switch,
        help,
    }
}

pub const KEYS: &[KeySpec] = &[
    value("in", &[], "input file (.csv or .pcb; inspect also reads checkpoints)"),
    value("out", &[], "output file"),
    value("cloud", &[], "cloud whose points receive de-gridified features"),
    value("checkpoint", &[], "checkpoint to load (gridify, degridify) or to write (training)"),
    value("batch_size", &[], "clouds per optimizer step"),
    value("nr_conv_blocks", &["blocks"], "residual convolution blocks (train-classify)"),
    value("hidden_channels", &["channels"], "grid channels; a comma list for train-recon and bench"),
    value("nr_epochs", &["epochs"], "training epochs"),
    value("nr_input_points", &["n-points"], "points per generated cloud"),
    value("omega_position_embedding", &["omega"], "standard deviation of the Fourier frequencies"),
    value("optimizer", &[], "only adamw is available"),
    value("learning_rate", &["lr"], "peak learning rate"),
    value("learning_rate_scheduler", &[], "only cosine annealing is available"),
    value("learning_rate_warmup", &["warmup"], "linear warm-up epochs"),
    value("nr_neighbors", &["k"], "k of the bilateral k-nearest-neighbor graph"),
    value("grid_resolution", &["resolution"], "grid points per axis; a comma list for train-recon"),
    value("conv_kernel_size", &["kernel-size"], "taps per axis of the grid convolutions"),
    value("dropout", &[], "dropout after each convolution block"),
    value("weight_decay", &["wd"], "decoupled weight decay"),
    value("aggregation", &[], "mean or max"),
    value("embedding_width", &["hidden"], "width of the node, positional, message and update networks"),
    value("nr_frequencies", &[], "Fourier frequencies of the positional encodings"),
    value("activation", &[], "gelu or relu"),
    value("out_features", &[], "features produced by degridify"),
    value("n_train", &[], "training clouds"),
    value("n_val", &[], "validation clouds"),
    value("noise", &[], "surface jitter of the classification clouds"),
    value("n_list", &[], "comma list of point counts for bench"),
    value("repetitions", &[], "timed repetitions per bench configuration (at least 5)"),
    value("seed", &[], "seed of every random draw; falls back to GRIDIFIER_SEED"),
    switch("freeze_frequencies", "keep the Fourier frequencies fixed"),
    switch("shuffle_labels", "train-classify on shuffled labels (chance-level control)"),
    switch("strict", "treat requirement warnings as errors"),
    switch("edges", "inspect: print the bilateral edge set as src,dst rows"),
];

/// Row names of the hyperparameter table that do not reduce to a key.
const TABLE_NAMES: &[(&str, &str)] = &[("ω_position_embedding", "omega_position_embedding")];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Generate,
    Gridify,
    Degridify,
    TrainRecon,
    TrainClassify,
    Bench,
    Inspect,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Generate,
        Task::Gridify,
        Task::Degridify,
        Task::TrainRecon,
        Task::TrainClassify,
        Task::Bench,
        Task::Inspect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Generate => "generate",
            Task::Gridify => "gridify",
            Task::Degridify => "degridify",
            Task::TrainRecon => "train-recon",
            Task::TrainClassify => "train-classify",
            Task::Bench => "bench",
            Task::Inspect => "inspect",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Task::Generate => "Write a random cloud on [-1, 1]^3 with one scalar feature",
            Task::Gridify => "Map a cloud onto a regular grid",
            Task::Degridify => "Map grid features back onto the points of a cloud",
            Task::TrainRecon => "Train gridify -> degridify to reconstruct random clouds",
            Task::TrainClassify => "Train a sphere-versus-cube classifier on grids",
            Task::Bench => "Time the gridified pipeline against native point convolution",
            Task::Inspect => "Describe a cloud or checkpoint, or dump bilateral edges",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }
}

/// Defaults follow the ModelNet40 column of the hyperparameter table; the
/// remaining keys use desk-scale values.
fn default_value(task: Task, key: &str) -> Option<&'static str> {
    let v = match key {
        "batch_size" => "32",
        "nr_conv_blocks" => "3",
        "hidden_channels" if task == Task::Bench => "8",
        "hidden_channels" => "128",
        "nr_epochs" => "60",
        "nr_input_points" => "1000",
        "omega_position_embedding" => "0.1",
        "optimizer" => "adamw",
        "learning_rate" => "0.005",
        "learning_rate_scheduler" => "cosine annealing",
        "learning_rate_warmup" => "10",
        "nr_neighbors" => "9",
        "grid_resolution" => "9",
        "conv_kernel_size" => "9",
        "dropout" => "0.1",
        "weight_decay" => "0",
        "aggregation" => "mean",
        "embedding_width" => "16",
        "nr_frequencies" => "16",
        "activation" => "gelu",
        "out_features" => "1",
        "n_train" => "200",
        "n_val" => "50",
        "noise" => "0.02",
        "n_list" => "1000,2000,4000,8000",
        "repetitions" => "5",
        "seed" => "0",
        "freeze_frequencies" | "shuffle_labels" | "strict" | "edges" => "false",
        _ => return None,
    };
    Some(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    Env,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Env => "env",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

type Result<T> = std::result::Result<T, ConfigError>;

/// Lowercases and joins words with `_`: `"Nr. Neighbors"` → `"nr_neighbors"`.
fn normalize(raw: &str) -> String {
    let mut out = String::new();
    for ch in raw.trim().chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            out.push(ch);
        } else if !out.is_empty() && !out.ends_with('_') {
            out.push('_');
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

/// Canonical key for a file key, flag name or alias.
pub fn canonical_key(raw: &str) -> Option<&'static str> {
    let n = normalize(raw);
    KEYS.iter()
        .find(|k| k.key == n || k.aliases.iter().any(|a| normalize(a) == n))
        .map(|k| k.key)
        .or_else(|| TABLE_NAMES.iter().find(|(name, _)| *name == n).map(|(_, key)| *key))
}

fn spec_of(key: &str) -> &'static KeySpec {
    KEYS.iter().find(|k| k.key == key).expect("canonical key")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    task: Task,
    values: BTreeMap<&'static str, (String, Source)>,
}

impl Settings {
    pub fn with_defaults(task: Task) -> Self {
        let values = KEYS
            .iter()
            .filter_map(|k| default_value(task, k.key).map(|v| (k.key, (v.to_owned(), Source::Default))))
            .collect();
        Self { task, values }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn set(&mut self, raw_key: &str, value: &str, source: Source) -> Result<()> {
        let key = canonical_key(raw_key).ok_or_else(|| ConfigError(format!("unknown setting `{raw_key}`")))?;
        let value = value.trim();
        if spec_of(key).kind == Kind::Switch && !matches!(value, "true" | "false") {
            return Err(ConfigError(format!("{key} must be true or false, got `{value}`")));
        }
        self.values.insert(key, (value.to_owned(), source));
        Ok(())
    }

    /// The seed fallback; ignored when unset or empty.
    pub fn apply_env_seed(&mut self, seed: Option<&str>) -> Result<()> {
        match seed.map(str::trim) {
            Some(s) if !s.is_empty() => {
                s.parse::<u64>()
                    .map_err(|_| ConfigError(format!("GRIDIFIER_SEED must be an unsigned integer, got `{s}`")))?;
                self.set("seed", s, Source::Env)
            }
            _ => Ok(()),
        }
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("config line {}: expected key=value, found `{line}`", i + 1)))?;
            self.set(k, v, Source::File)
                .map_err(|e| ConfigError(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|&(_, s)| s)
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| ConfigError(format!("missing setting {key}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.required(key)?;
        v.parse().map_err(|_| ConfigError(format!("{key} must be {what}, got `{v}`")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "a non-negative integer")
    }

    /// A finite number.
    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parse(key, "a number")?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ConfigError(format!("{key} must be finite, got {v}")))
        }
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        let v = self.required(key)?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("{key} must be a comma list of integers, got `{v}`")))
            })
            .collect()
    }

    pub fn switch(&self, key: &str) -> bool {
        self.get(key) == Some("true")
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|v| !v.is_empty()).map(PathBuf::from)
    }

    pub fn aggregation(&self) -> Result<Aggregation> {
        match self.required("aggregation")?.to_ascii_lowercase().as_str() {
            "mean" => Ok(Aggregation::Mean),
            "max" => Ok(Aggregation::Max),
            "sum" => Ok(Aggregation::Sum),
            other => Err(ConfigError(format!("aggregation must be mean, max or sum, got `{other}`"))),
        }
    }

    pub fn activation(&self) -> Result<Activation> {
        match self.required("activation")?.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(ConfigError(format!("activation must be gelu or relu, got `{other}`"))),
        }
    }

    /// Rejects optimizer and scheduler names other than the implemented
    /// ones, so a pasted table cannot silently ask for something else.
    pub fn check_fixed_choices(&self) -> Result<()> {
        let opt = normalize(self.required("optimizer")?);
        if opt != "adamw" {
            return Err(ConfigError(format!("optimizer `{opt}` is not available, only adamw")));
        }
        let sched = normalize(self.required("learning_rate_scheduler")?);
        if !matches!(sched.as_str(), "cosine_annealing" | "cosine") {
            return Err(ConfigError(format!("scheduler `{sched}` is not available, only cosine annealing")));
        }
        Ok(())
    }

    /// One `key=value  # source` line per setting.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            if let Some((v, s)) = self.values.get(k.key) {
                out.push_str(&format!("{}={v}  # {s}\n", k.key));
            }
        }
        out
    }
}
