//! The `gridify` command-line tool.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (including
//! requirement violations under `--strict`), 2 for runtime failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use gridify_core::data::gen_random_cloud;
use gridify_core::gridify::{check_requirements, degridify, gridify, Gridifier, GridifierConfig};
use gridify_core::nn::{ParamStore, RffConfig};
use gridify_core::train::{train_classify_synth, train_recon_single, ClassifyConfig, ReconConfig, TrainConfig};
use gridify_core::{bilateral_knn, invert_edges, make_grid_coords, Grid, GridSpec, PointCloud, Rng, Tensor};
use rand::SeedableRng;

use crate::bench::{bench_scaling, BenchConfig, BenchPath};
use crate::checkpoint::{Checkpoint, MAGIC};
use crate::config::{ConfigError, Kind, Settings, Source, Task, KEYS};
use crate::io::{load_cloud, save_cloud, write_edges};
use crate::{alloc_count, Error};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Invalid(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.0)
    }
}

impl From<gridify_core::Error> for CliError {
    fn from(e: gridify_core::Error) -> Self {
        use gridify_core::Error as E;
        match e {
            E::Config(_) | E::Data(_) | E::Shape { .. } => CliError::Invalid(e.to_string()),
            E::Invariant(_) | E::Training { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(c) => c.into(),
            Error::Parse { .. } | Error::Format(_) => CliError::Invalid(e.to_string()),
            Error::Io { .. } | Error::Stream(_) => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn command() -> Command {
    let mut args: Vec<Arg> = KEYS
        .iter()
        .map(|k| {
            let arg = Arg::new(k.key)
                .long(k.key.replace('_', "-"))
                .help(k.help)
                .visible_aliases(k.aliases.iter().copied());
            match k.kind {
                Kind::Value => arg.value_name("VALUE").num_args(1),
                Kind::Switch => arg.action(ArgAction::SetTrue),
            }
        })
        .collect();
    args.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat key=value settings file; flags override it"),
    );
    Command::new("gridify")
        .about("Learned gridification of point clouds")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommands(Task::ALL.iter().map(|t| Command::new(t.name()).about(t.about()).args(args.clone())))
}

/// Runs the tool on `argv` (program name first) and returns the exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let env_seed = std::env::var("GRIDIFIER_SEED").ok();
    run_with(argv, env_seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run`] with the seed fallback and the output streams supplied by the
/// caller. Data and the one-line summary go to `out`; the effective
/// configuration, warnings and errors go to `log`.
pub fn run_with(argv: Vec<String>, env_seed: Option<&str>, out: &mut dyn Write, log: &mut dyn Write) -> i32 {
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { log.write_all(text.as_bytes()) };
            return code;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let task = Task::from_name(name).expect("subcommands come from Task::ALL");
    match settings_from(task, sub, env_seed).and_then(|s| {
        let _ = write!(log, "# effective configuration for {}\n{}", task.name(), s.echo());
        execute(&s, out, log)
    }) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(log, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn settings_from(task: Task, m: &ArgMatches, env_seed: Option<&str>) -> CliResult<Settings> {
    let mut s = Settings::with_defaults(task);
    s.apply_env_seed(env_seed)?;
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read config {path}: {e}")))?;
        s.apply_file(&text)?;
    }
    for k in KEYS {
        if m.value_source(k.key) != Some(ValueSource::CommandLine) {
            continue;
        }
        match k.kind {
            Kind::Value => s.set(k.key, m.get_one::<String>(k.key).expect("has value"), Source::Flag)?,
            Kind::Switch => s.set(k.key, "true", Source::Flag)?,
        }
    }
    s.check_fixed_choices()?;
    Ok(s)
}

fn execute(s: &Settings, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<()> {
    let report = match s.task() {
        Task::Generate => generate(s)?,
        Task::Gridify => gridify_task(s, log)?,
        Task::Degridify => degridify_task(s, log)?,
        Task::TrainRecon => train_recon(s, out, log)?,
        Task::TrainClassify => train_classify(s, out, log)?,
        Task::Bench => bench(s, out, log)?,
        Task::Inspect => inspect(s, out)?,
    };
    // when data went to stdout the summary must not mix with it
    let sink: &mut dyn Write = if report.data_on_stdout { log } else { out };
    writeln!(sink, "{}", report.summary).map_err(|e| CliError::Runtime(e.to_string()))
}

struct Report {
    summary: String,
    data_on_stdout: bool,
}

fn summary(text: String) -> Report {
    Report {
        summary: text,
        data_on_stdout: false,
    }
}

fn input(s: &Settings, key: &str) -> CliResult<PathBuf> {
    let p = s.path(key).ok_or_else(|| CliError::Invalid(format!("--{} is required", key.replace('_', "-"))))?;
    if !p.exists() {
        return Err(CliError::Invalid(format!("{}: no such file", p.display())));
    }
    Ok(p)
}

fn output(s: &Settings) -> CliResult<PathBuf> {
    s.path("out").ok_or_else(|| CliError::Invalid("--out is required".into()))
}

/// Writes `text` to `--out` when given, otherwise to `out`.
fn emit(s: &Settings, text: &str, out: &mut dyn Write) -> CliResult<(bool, String)> {
    match s.path("out") {
        Some(p) => {
            std::fs::write(&p, text).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
            Ok((false, p.display().to_string()))
        }
        None => {
            out.write_all(text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok((true, "stdout".into()))
        }
    }
}

fn rff(s: &Settings) -> CliResult<RffConfig> {
    Ok(RffConfig {
        omega: s.f64("omega_position_embedding")?,
        n_frequencies: s.usize("nr_frequencies")?,
        trainable: !s.switch("freeze_frequencies"),
        seed: s.u64("seed")?,
    })
}

fn layer_config(s: &Settings, in_features: usize, out_features: usize, dim: usize, rff_seed: u64) -> CliResult<GridifierConfig> {
    Ok(GridifierConfig {
        in_features,
        out_features,
        hidden: s.usize("embedding_width")?,
        dim,
        rff: Some(RffConfig { seed: rff_seed, ..rff(s)? }),
        aggregation: s.aggregation()?,
        activation: s.activation()?,
    })
}

/// Builds a layer named like the reconstruction model's layers, so that
/// reconstruction checkpoints load into it.
fn build_layer(s: &Settings, name: &str, cfg: &GridifierConfig) -> CliResult<(ParamStore, Gridifier)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::seed_from_u64(s.u64("seed")?);
    let layer = Gridifier::new(&mut store, &mut rng, name, cfg)?;
    if let Some(path) = s.path("checkpoint") {
        let ckpt = Checkpoint::load(&input(s, "checkpoint").map(|_| path)?)?;
        ckpt.restore_into(&mut store)?;
    }
    Ok((store, layer))
}

fn single(s: &Settings, key: &str) -> CliResult<usize> {
    match s.usize_list(key)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(CliError::Invalid(format!("{key} takes a single value for this task"))),
    }
}

fn generate(s: &Settings) -> CliResult<Report> {
    let out = output(s)?;
    let n = s.usize("nr_input_points")?;
    if n == 0 {
        return Err(CliError::Invalid("nr_input_points must be positive".into()));
    }
    let cloud = gen_random_cloud(n, s.u64("seed")?)?;
    save_cloud(&cloud, &out)?;
    Ok(summary(format!("wrote {n} random points to {}", out.display())))
}

fn gridify_task(s: &Settings, log: &mut dyn Write) -> CliResult<Report> {
    let cloud = load_cloud(&input(s, "in")?)?;
    let out = output(s)?;
    let k = s.usize("nr_neighbors")?;
    let spec = GridSpec::unit(single(s, "grid_resolution")?, cloud.dim())?;
    let cfg = layer_config(s, cloud.features(), single(s, "hidden_channels")?, cloud.dim(), s.u64("seed")?)?;
    let (store, layer) = build_layer(s, "gridify", &cfg)?;
    let grid_coords = make_grid_coords(&spec)?;
    let edges = bilateral_knn(cloud.coords(), &grid_coords, cloud.dim(), k)?;
    let violations = check_requirements(&cloud.meta(), &spec, &layer, k, Some(&edges));
    for v in &violations {
        let _ = writeln!(log, "warning: {v}");
    }
    if s.switch("strict") && !violations.is_empty() {
        return Err(CliError::Invalid(format!("{} requirement violation(s) under --strict", violations.len())));
    }
    let grid = gridify(&cloud, &spec, &edges, &layer, &store)?;
    let as_cloud = PointCloud::new(grid.coords(), grid.feats.data().to_vec(), spec.dim, grid.channels())?;
    save_cloud(&as_cloud, &out)?;
    Ok(summary(format!(
        "gridified {} points onto {} cells with {} channels -> {}",
        cloud.len(),
        spec.num_points(),
        grid.channels(),
        out.display()
    )))
}

/// Recovers the lattice of a grid stored as a cloud: `r = N^(1/D)` and the
/// domain from the extreme coordinates.
fn infer_spec(grid: &PointCloud) -> CliResult<GridSpec> {
    let (n, dim) = (grid.len(), grid.dim());
    let r = (1..=n).find(|r| r.pow(dim as u32) >= n).unwrap_or(1);
    if r.pow(dim as u32) != n {
        return Err(CliError::Invalid(format!("{n} cells is not a cubic grid in {dim} dimensions")));
    }
    let lo = grid.coords().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.coords().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spec = if r == 1 { GridSpec::new(1, lo - 1.0, hi + 1.0, dim)? } else { GridSpec::new(r, lo, hi, dim)? };
    let expected = make_grid_coords(&spec)?;
    let tol = 1e-6 * (1.0 + lo.abs().max(hi.abs()));
    if expected.iter().zip(grid.coords()).any(|(a, b)| (a - b).abs() > tol) {
        return Err(CliError::Invalid("grid file coordinates do not form a row-major lattice".into()));
    }
    Ok(spec)
}

fn degridify_task(s: &Settings, log: &mut dyn Write) -> CliResult<Report> {
    let grid_file = load_cloud(&input(s, "in")?)?;
    let cloud = load_cloud(&input(s, "cloud")?)?;
    let out = output(s)?;
    if grid_file.dim() != cloud.dim() {
        return Err(CliError::Invalid(format!("grid is {}-D but the cloud is {}-D", grid_file.dim(), cloud.dim())));
    }
    let spec = infer_spec(&grid_file)?;
    let k = s.usize("nr_neighbors")?;
    let cfg = layer_config(s, grid_file.features(), s.usize("out_features")?, cloud.dim(), s.u64("seed")?.wrapping_add(1))?;
    let (store, layer) = build_layer(s, "degridify", &cfg)?;
    let grid_coords = make_grid_coords(&spec)?;
    let edges = bilateral_knn(cloud.coords(), &grid_coords, cloud.dim(), k)?;
    let violations = check_requirements(&cloud.meta(), &spec, &layer, k, Some(&edges));
    for v in &violations {
        let _ = writeln!(log, "warning: {v}");
    }
    if s.switch("strict") && !violations.is_empty() {
        return Err(CliError::Invalid(format!("{} requirement violation(s) under --strict", violations.len())));
    }
    let grid = Grid::new(spec, Tensor::matrix(grid_file.len(), grid_file.features(), grid_file.feats().to_vec())?)?;
    let feats = degridify(&grid, cloud.coords(), &invert_edges(&edges), &layer, &store)?;
    let result = PointCloud::new(cloud.coords().to_vec(), feats.data().to_vec(), cloud.dim(), feats.cols())?;
    save_cloud(&result, &out)?;
    Ok(summary(format!(
        "de-gridified {} cells onto {} points with {} features -> {}",
        spec.num_points(),
        cloud.len(),
        feats.cols(),
        out.display()
    )))
}

fn train_config(s: &Settings) -> CliResult<TrainConfig> {
    Ok(TrainConfig {
        epochs: s.usize("nr_epochs")?,
        warmup_epochs: s.usize("learning_rate_warmup")?,
        lr: s.f64("learning_rate")?,
        weight_decay: s.f64("weight_decay")?,
        batch_size: s.usize("batch_size")?,
    })
}

pub fn recon_config(s: &Settings) -> CliResult<ReconConfig> {
    let cfg = ReconConfig {
        n_train: s.usize("n_train")?,
        n_val: s.usize("n_val")?,
        n_points: s.usize("nr_input_points")?,
        k: s.usize("nr_neighbors")?,
        hidden: s.usize("embedding_width")?,
        n_frequencies: s.usize("nr_frequencies")?,
        omega: s.f64("omega_position_embedding")?,
        aggregation: s.aggregation()?,
        activation: s.activation()?,
        resolutions: s.usize_list("grid_resolution")?,
        channels: s.usize_list("hidden_channels")?,
        train: train_config(s)?,
        seed: s.u64("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn save_checkpoint(path: &Path, store: ParamStore, opt: gridify_core::nn::AdamW) -> CliResult<()> {
    Ok(Checkpoint::new(store, Some(opt)).save(path)?)
}

fn train_recon(s: &Settings, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Report> {
    let cfg = recon_config(s)?;
    let ckpt = s.path("checkpoint");
    if ckpt.is_some() && cfg.resolutions.len() * cfg.channels.len() != 1 {
        return Err(CliError::Invalid("--checkpoint needs a single resolution and channel width".into()));
    }
    let mut csv = String::from("resolution,channels,seed,val_mse\n");
    let mut best: Option<(f64, usize, usize)> = None;
    for &r in &cfg.resolutions {
        for &c in &cfg.channels {
            let o = train_recon_single(&cfg, r, c)?;
            let _ = writeln!(log, "r={r} channels={c}: val_mse {:.6} (untrained {:.6})", o.row.val_mse, o.initial_val_mse);
            csv.push_str(&format!("{r},{c},{},{}\n", cfg.seed, o.row.val_mse));
            if best.is_none_or(|b| o.row.val_mse < b.0) {
                best = Some((o.row.val_mse, r, c));
            }
            if let Some(p) = &ckpt {
                save_checkpoint(p, o.store, o.optimizer)?;
            }
        }
    }
    let (on_stdout, dest) = emit(s, &csv, out)?;
    let (mse, r, c) = best.expect("at least one configuration");
    Ok(Report {
        summary: format!(
            "trained {} configuration(s); lowest val_mse {mse:.6} at resolution {r}, {c} channels -> {dest}",
            cfg.resolutions.len() * cfg.channels.len()
        ),
        data_on_stdout: on_stdout,
    })
}

pub fn classify_config(s: &Settings) -> CliResult<ClassifyConfig> {
    let cfg = ClassifyConfig {
        n_train: s.usize("n_train")?,
        n_val: s.usize("n_val")?,
        n_points: s.usize("nr_input_points")?,
        resolution: single(s, "grid_resolution")?,
        k: s.usize("nr_neighbors")?,
        hidden: s.usize("embedding_width")?,
        channels: single(s, "hidden_channels")?,
        blocks: s.usize("nr_conv_blocks")?,
        kernel_size: s.usize("conv_kernel_size")?,
        n_frequencies: s.usize("nr_frequencies")?,
        omega: s.f64("omega_position_embedding")?,
        dropout: s.f64("dropout")?,
        noise: s.f64("noise")?,
        shuffle_labels: s.switch("shuffle_labels"),
        train: train_config(s)?,
        seed: s.u64("seed")?,
    };
    cfg.validate()?;
    if cfg.kernel_size.is_multiple_of(2) {
        return Err(CliError::Invalid(format!("conv_kernel_size must be odd, got {}", cfg.kernel_size)));
    }
    Ok(cfg)
}

fn train_classify(s: &Settings, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Report> {
    let cfg = classify_config(s)?;
    let o = train_classify_synth(&cfg)?;
    for (e, l) in o.epoch_train_loss.iter().enumerate() {
        let _ = writeln!(log, "epoch {e}: train loss {l:.6}");
    }
    if let Some(p) = s.path("checkpoint") {
        save_checkpoint(&p, o.store, o.optimizer)?;
    }
    let (on_stdout, dest) = emit(s, &format!("seed,val_accuracy\n{},{}\n", cfg.seed, o.val_accuracy), out)?;
    Ok(Report {
        summary: format!("validation accuracy {:.4} after {} epochs -> {dest}", o.val_accuracy, cfg.train.epochs),
        data_on_stdout: on_stdout,
    })
}

fn bench(s: &Settings, out: &mut dyn Write, log: &mut dyn Write) -> CliResult<Report> {
    let cfg = BenchConfig {
        ns: s.usize_list("n_list")?,
        channels: s.usize_list("hidden_channels")?,
        k: s.usize("nr_neighbors")?,
        repetitions: s.usize("repetitions")?,
        resolution: single(s, "grid_resolution")?,
        kernel_size: s.usize("conv_kernel_size")?,
        hidden: s.usize("embedding_width")?,
        n_frequencies: s.usize("nr_frequencies")?,
        omega: s.f64("omega_position_embedding")?,
        seed: s.u64("seed")?,
    };
    if !alloc_count::is_active() {
        let _ = writeln!(log, "warning: allocation counter not installed; allocs_bytes will read 0");
    }
    let report = bench_scaling(&cfg)?;
    for r in &report.rows {
        let _ = writeln!(
            log,
            "{:>6} N={:<6} C={:<3} median {:.3} ms (mean {:.3} ± {:.3})",
            r.path.as_str(),
            r.n,
            r.c,
            r.time_ms_median,
            r.time_ms_mean,
            r.time_ms_std
        );
    }
    let (on_stdout, dest) = emit(s, &report.to_csv(), out)?;
    let slopes: Vec<String> = cfg
        .channels
        .iter()
        .filter_map(|&c| {
            let g = report.slope(BenchPath::Grid, c)?;
            let n = report.slope(BenchPath::Native, c)?;
            Some(format!("C={c}: grid slope {g:.3}, native slope {n:.3}"))
        })
        .collect();
    Ok(Report {
        summary: format!("benchmarked {} rows; {} -> {dest}", report.rows.len(), slopes.join("; ")),
        data_on_stdout: on_stdout,
    })
}

fn inspect(s: &Settings, out: &mut dyn Write) -> CliResult<Report> {
    let path = input(s, "in")?;
    let io_err = |e: std::io::Error| CliError::Runtime(e.to_string());
    if s.switch("edges") {
        let cloud = load_cloud(&path)?;
        let spec = GridSpec::unit(single(s, "grid_resolution")?, cloud.dim())?;
        let edges = bilateral_knn(cloud.coords(), &make_grid_coords(&spec)?, cloud.dim(), s.usize("nr_neighbors")?)?;
        let mut buf = Vec::new();
        write_edges(&edges, &mut buf)?;
        let text = String::from_utf8(buf).expect("ASCII digits");
        let (on_stdout, dest) = emit(s, &text, out)?;
        return Ok(Report {
            summary: format!("{} edges between {} points and {} cells -> {dest}", edges.len(), cloud.len(), spec.num_points()),
            data_on_stdout: on_stdout,
        });
    }
    let bytes = std::fs::read(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(MAGIC) {
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        for (_, p) in ckpt.store.iter() {
            writeln!(out, "{} {:?}{}", p.name, p.value.shape(), if p.trainable { "" } else { " frozen" }).map_err(io_err)?;
        }
        let steps = ckpt.optimizer.as_ref().map_or(0, |o| o.steps());
        return Ok(summary(format!(
            "checkpoint: {} parameters, {} scalars, {steps} optimizer steps",
            ckpt.store.len(),
            ckpt.store.num_scalars()
        )));
    }
    let cloud = load_cloud(&path)?;
    for axis in 0..cloud.dim() {
        let vals = cloud.coords().iter().skip(axis).step_by(cloud.dim());
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        writeln!(out, "axis {axis}: [{lo}, {hi}]").map_err(io_err)?;
    }
    Ok(summary(format!("cloud: {} points, D={}, F={}", cloud.len(), cloud.dim(), cloud.features())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        command().debug_assert();
    }

    #[test]
    fn infer_spec_round_trips() {
        let spec = GridSpec::unit(4, 2).unwrap();
        let c = PointCloud::new(make_grid_coords(&spec).unwrap(), vec![0.0; 16], 2, 1).unwrap();
        assert_eq!(infer_spec(&c).unwrap(), spec);
        let bad = PointCloud::new(vec![0.0; 10], vec![0.0; 5], 2, 1).unwrap();
        assert!(infer_spec(&bad).is_err());
    }
}
