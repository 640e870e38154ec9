//! Inference scaling of the gridified pipeline against convolution applied
//! directly to the points.
//!
//! The grid path builds bilateral connectivity, gridifies and applies one
//! neural-field convolution on the lattice, so its kernel network runs once
//! per tap. The native path builds within-cloud neighborhoods and evaluates
//! the kernel network once per edge.

use std::time::{Duration, Instant};

use gridify_core::connectivity::self_knn;
use gridify_core::data::gen_random_cloud;
use gridify_core::gridify::{Gridifier, GridifierConfig, MessageGraph};
use gridify_core::gridnet::{conv_point_native, ConvSpec, GridConv, KernelEvalCounter, NeuralKernel};
use gridify_core::nn::{Activation, Aggregation, ParamStore, RffConfig, Tape};
use gridify_core::{bilateral_knn, make_grid_coords, GridSpec, Rng, Tensor};

use crate::alloc_count;
use crate::error::{Error, Result};

const WARMUP: usize = 2;
/// Samples shorter than this repeat the forward pass in an inner loop.
const MIN_SAMPLE: Duration = Duration::from_millis(2);

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Point counts, increasing.
    pub ns: Vec<usize>,
    pub channels: Vec<usize>,
    pub k: usize,
    pub repetitions: usize,
    pub resolution: usize,
    pub kernel_size: usize,
    /// Width of the positional and kernel networks.
    pub hidden: usize,
    pub n_frequencies: usize,
    pub omega: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ns: vec![1000, 2000, 4000, 8000],
            channels: vec![8],
            k: 9,
            repetitions: 5,
            resolution: 9,
            kernel_size: 9,
            hidden: 16,
            n_frequencies: 16,
            omega: 0.1,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Core(gridify_core::Error::Config(m)));
        if self.ns.is_empty() || self.channels.is_empty() {
            return bad("need at least one point count and one channel width".into());
        }
        if self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("point counts must increase, got {:?}", self.ns));
        }
        if self.repetitions < 5 {
            return bad(format!("need at least 5 repetitions, got {}", self.repetitions));
        }
        if self.k == 0 || self.ns[0] < self.k {
            return bad(format!("k = {} must be in 1..={}", self.k, self.ns[0]));
        }
        if self.channels.contains(&0) || self.hidden == 0 || self.n_frequencies == 0 {
            return bad("channels, hidden width and frequency count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchPath {
    Grid,
    Native,
}

impl BenchPath {
    pub fn as_str(self) -> &'static str {
        match self {
            BenchPath::Grid => "grid",
            BenchPath::Native => "native",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub path: BenchPath,
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub time_ms_median: f64,
    pub time_ms_mean: f64,
    pub time_ms_std: f64,
    /// Bytes requested from the allocator by one forward pass; zero unless
    /// the counting allocator is installed.
    pub allocs_bytes: u64,
    /// Points at which a kernel network was evaluated in one forward pass.
    pub pos_evals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub path: BenchPath,
    pub c: usize,
    /// Least-squares slope of log median time against log N.
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub slopes: Vec<SlopeFit>,
}

impl BenchReport {
    pub fn slope(&self, path: BenchPath, c: usize) -> Option<f64> {
        self.slopes.iter().find(|s| s.path == path && s.c == c).map(|s| s.slope)
    }

    /// `path,N,C,k,time_ms_median,allocs_bytes,pos_evals`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,N,C,k,time_ms_median,allocs_bytes,pos_evals\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{},{}\n",
                r.path.as_str(),
                r.n,
                r.c,
                r.k,
                r.time_ms_median,
                r.allocs_bytes,
                r.pos_evals
            ));
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

struct Models {
    store: ParamStore,
    gridifier: Gridifier,
    conv: GridConv,
    native: NeuralKernel,
    spec: GridSpec,
    grid_coords: Vec<f64>,
}

impl Models {
    fn new(cfg: &BenchConfig, c: usize) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = Rng::seed_from_u64(cfg.seed ^ c as u64);
        let mut store = ParamStore::new();
        let rff = |seed| RffConfig {
            omega: cfg.omega,
            n_frequencies: cfg.n_frequencies,
            trainable: true,
            seed,
        };
        let spec = GridSpec::unit(cfg.resolution, 3)?;
        let gridifier = Gridifier::new(
            &mut store,
            &mut rng,
            "gridify",
            &GridifierConfig {
                in_features: c,
                out_features: c,
                hidden: cfg.hidden,
                dim: 3,
                rff: Some(rff(cfg.seed)),
                aggregation: Aggregation::Mean,
                activation: Activation::Gelu,
            },
        )?;
        let conv_spec = ConvSpec {
            kernel_size: cfg.kernel_size,
            c_in: c,
            c_out: c,
            dim: 3,
        };
        let conv = GridConv::neural_field(&mut store, &mut rng, "conv", conv_spec, spec.spacing(), rff(cfg.seed + 1), cfg.hidden, Activation::Gelu, false)?;
        let native = NeuralKernel::new(&mut store, &mut rng, "native", 3, c, c, cfg.k, rff(cfg.seed + 2), cfg.hidden, Activation::Gelu)?;
        Ok(Self {
            store,
            gridifier,
            conv,
            native,
            spec,
            grid_coords: make_grid_coords(&spec)?,
        })
    }

    fn grid_forward(&self, coords: &[f64], feats: &Tensor, k: usize, counter: &KernelEvalCounter) -> Result<Tensor> {
        let edges = bilateral_knn(coords, &self.grid_coords, 3, k)?;
        let graph = MessageGraph::new(&edges, coords, &self.grid_coords, 3)?;
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let g = self.gridifier.forward(&mut tape, &self.store, x, &graph)?;
        let y = self.conv.forward(&mut tape, &self.store, g, 1, self.spec.resolution, counter)?;
        Ok(tape.value(y).clone())
    }

    fn native_forward(&self, coords: &[f64], feats: &Tensor, k: usize, counter: &KernelEvalCounter) -> Result<Tensor> {
        let edges = self_knn(coords, 3, k)?;
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let y = conv_point_native(&mut tape, &self.store, coords, 3, x, &edges, &self.native, counter)?;
        Ok(tape.value(y).clone())
    }
}

struct Timing {
    samples_ms: Vec<f64>,
    allocs_bytes: u64,
    pos_evals: u64,
}

/// Two warm-up runs, then `reps` timed samples. `run` returns the kernel
/// evaluation count of one pass, which must not vary.
fn time_runs(reps: usize, mut run: impl FnMut() -> Result<u64>) -> Result<Timing> {
    let (first, allocs_bytes) = alloc_count::measure(&mut run);
    let pos_evals = first?;
    let mut last = Duration::ZERO;
    for _ in 1..WARMUP {
        let t = Instant::now();
        run()?;
        last = t.elapsed();
    }
    let inner = if last >= MIN_SAMPLE {
        1
    } else {
        (MIN_SAMPLE.as_nanos() / last.as_nanos().max(1)) as usize + 1
    };
    let mut samples_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        for _ in 0..inner {
            if run()? != pos_evals {
                return Err(Error::Core(gridify_core::Error::Invariant("kernel evaluation count changed between runs".into())));
            }
        }
        samples_ms.push(t.elapsed().as_secs_f64() * 1e3 / inner as f64);
    }
    Ok(Timing {
        samples_ms,
        allocs_bytes,
        pos_evals,
    })
}

fn row(path: BenchPath, n: usize, c: usize, k: usize, t: Timing) -> BenchRow {
    let mut s = t.samples_ms.clone();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    let median = if m % 2 == 1 { s[m / 2] } else { 0.5 * (s[m / 2 - 1] + s[m / 2]) };
    let mean = s.iter().sum::<f64>() / m as f64;
    let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m.max(2) - 1) as f64;
    BenchRow {
        path,
        n,
        c,
        k,
        time_ms_median: median,
        time_ms_mean: mean,
        time_ms_std: var.sqrt(),
        allocs_bytes: t.allocs_bytes,
        pos_evals: t.pos_evals,
    }
}

/// Times both paths for every `(C, N)` and fits the log–log slopes.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut slopes = Vec::new();
    for &c in &cfg.channels {
        let models = Models::new(cfg, c)?;
        for &n in &cfg.ns {
            let cloud = gen_random_cloud(n, cfg.seed.wrapping_add(n as u64))?;
            // C feature columns derived deterministically from the scalar one
            let feats: Vec<f64> = cloud
                .feats()
                .iter()
                .flat_map(|&f| (0..c).map(move |j| (f * (j + 1) as f64).sin()))
                .collect();
            let feats = Tensor::matrix(n, c, feats)?;
            let coords = cloud.coords();
            for path in [BenchPath::Grid, BenchPath::Native] {
                let timing = time_runs(cfg.repetitions, || {
                    let counter = KernelEvalCounter::new();
                    match path {
                        BenchPath::Grid => models.grid_forward(coords, &feats, cfg.k, &counter)?,
                        BenchPath::Native => models.native_forward(coords, &feats, cfg.k, &counter)?,
                    };
                    Ok(counter.snapshot().pos_evals)
                })?;
                rows.push(row(path, n, c, cfg.k, timing));
            }
        }
        if cfg.ns.len() >= 2 {
            for path in [BenchPath::Grid, BenchPath::Native] {
                let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                    .iter()
                    .filter(|r| r.path == path && r.c == c)
                    .map(|r| (r.n as f64, r.time_ms_median))
                    .unzip();
                slopes.push(SlopeFit {
                    path,
                    c,
                    slope: loglog_slope(&xs, &ys),
                });
            }
        }
    }
    Ok(BenchReport { rows, slopes })
}
