//! Networks that run on the grid: lattice convolutions whose kernels come
//! from a positional network evaluated once per forward pass, the
//! point-native convolution they are compared against, residual blocks and
//! prediction heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::cloud::{Grid, GridSpec};
use crate::connectivity::{Direction, EdgeSet};
use crate::error::{shape_err, Error, Result};
use crate::nn::{join, Activation, Aggregation, ConvGeometry, Linear, ParamId, ParamStore, PositionalNet, RffConfig, Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

/// Monotone counters of kernel work.
#[derive(Debug, Default)]
pub struct KernelEvalCounter {
    pos_evals: AtomicU64,
    materializations: AtomicU64,
    applications: AtomicU64,
}

/// Snapshot of a [`KernelEvalCounter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KernelEvalCounts {
    /// Positions at which a positional network was evaluated to produce
    /// kernel values.
    pub pos_evals: u64,
    /// Kernel tensors rendered.
    pub materializations: u64,
    /// Convolutions applied.
    pub applications: u64,
}

impl KernelEvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_pos_evals(&self, n: u64) {
        self.pos_evals.fetch_add(n, Ordering::Relaxed);
    }

    fn record_materialization(&self) {
        self.materializations.fetch_add(1, Ordering::Relaxed);
    }

    fn record_application(&self) {
        self.applications.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> KernelEvalCounts {
        KernelEvalCounts {
            pos_evals: self.pos_evals.load(Ordering::Relaxed),
            materializations: self.materializations.load(Ordering::Relaxed),
            applications: self.applications.load(Ordering::Relaxed),
        }
    }
}

/// Shape of a lattice convolution: odd `kernel_size` taps per axis, zero
/// padding of `(kernel_size - 1) / 2`, stride 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub dim: usize,
}

impl ConvSpec {
    pub fn taps(&self) -> usize {
        self.kernel_size.pow(self.dim as u32)
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if self.c_in == 0 || self.c_out == 0 || self.dim == 0 || self.dim > 3 {
            return Err(Error::Config(format!("invalid convolution {self:?}")));
        }
        Ok(())
    }

    fn geometry(&self, batch: usize, resolution: usize) -> ConvGeometry {
        ConvGeometry {
            batch,
            resolution,
            dim: self.dim,
            kernel_size: self.kernel_size,
            c_in: self.c_in,
            c_out: self.c_out,
        }
    }
}

/// A continuous kernel: a positional network mapping an offset to a
/// `c_in × c_out` matrix, scaled by `1/√(taps · c_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralKernel {
    net: PositionalNet,
    c_in: usize,
    c_out: usize,
    scale: f64,
}

impl NeuralKernel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        c_in: usize,
        c_out: usize,
        taps: usize,
        rff: RffConfig,
        hidden: usize,
        activation: Activation,
    ) -> Result<Self> {
        let net = PositionalNet::new(store, rng, name, dim, Some(rff), &[hidden, c_in * c_out], activation)?;
        Ok(Self {
            net,
            c_in,
            c_out,
            scale: 1.0 / libm::sqrt((taps * c_in) as f64),
        })
    }

    pub fn net(&self) -> &PositionalNet {
        &self.net
    }

    /// Kernel values at each row of `offsets` (`m × dim`), as
    /// `m × (c_in · c_out)`. Counts `m` positional evaluations.
    pub fn eval(&self, tape: &mut Tape, store: &ParamStore, offsets: Var, counter: &KernelEvalCounter) -> Result<Var> {
        counter.record_pos_evals(tape.value(offsets).rows() as u64);
        let k = self.net.forward(tape, store, offsets)?;
        Ok(tape.scale(k, self.scale))
    }
}

/// Where convolution weights come from.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSource {
    /// Free weights of shape `taps × (c_in · c_out)`.
    Explicit(ParamId),
    /// Rendered by a positional network on the lattice of tap offsets.
    NeuralField(NeuralKernel),
}

/// Lattice convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GridConv {
    spec: ConvSpec,
    source: KernelSource,
    bias: Option<ParamId>,
    spacing: f64,
}

impl GridConv {
    /// Convolution with free weights drawn from `U(±1/√(taps · c_in))`.
    pub fn explicit(store: &mut ParamStore, rng: &mut Rng, name: &str, spec: ConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let bound = 1.0 / libm::sqrt((spec.taps() * spec.c_in) as f64);
        let w = store.add_uniform(join(name, "kernel"), vec![spec.taps(), spec.c_in * spec.c_out], bound, true, rng);
        let bias = bias.then(|| store.add(join(name, "bias"), Tensor::zeros(vec![spec.c_out]), false));
        Ok(Self { spec, source: KernelSource::Explicit(w), bias, spacing: 1.0 })
    }

    /// Convolution whose kernel is a neural field sampled at tap offsets
    /// times `spacing` (the grid spacing).
    #[allow(clippy::too_many_arguments)]
    pub fn neural_field(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        spec: ConvSpec,
        spacing: f64,
        rff: RffConfig,
        hidden: usize,
        activation: Activation,
        bias: bool,
    ) -> Result<Self> {
        spec.validate()?;
        let kernel = NeuralKernel::new(store, rng, &join(name, "kernel"), spec.dim, spec.c_in, spec.c_out, spec.taps(), rff, hidden, activation)?;
        let bias = bias.then(|| store.add(join(name, "bias"), Tensor::zeros(vec![spec.c_out]), false));
        Ok(Self { spec, source: KernelSource::NeuralField(kernel), bias, spacing })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn source(&self) -> &KernelSource {
        &self.source
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    /// Tap offsets in row-major order, scaled to the grid spacing.
    pub fn tap_offsets(&self) -> Tensor {
        let (k, dim) = (self.spec.kernel_size, self.spec.dim);
        let half = (k / 2) as isize;
        let taps = self.spec.taps();
        let mut data = Vec::with_capacity(taps * dim);
        let mut digits = [0usize; 3];
        for t in 0..taps {
            let mut rem = t;
            for a in (0..dim).rev() {
                digits[a] = rem % k;
                rem /= k;
            }
            data.extend(digits[..dim].iter().map(|&d| (d as isize - half) as f64 * self.spacing));
        }
        Tensor::matrix(taps, dim, data).expect("sized from taps")
    }

    /// Renders the kernel once; the result can be applied any number of
    /// times within the same tape.
    pub fn materialize(&self, tape: &mut Tape, store: &ParamStore, counter: &KernelEvalCounter) -> Result<Var> {
        counter.record_materialization();
        match &self.source {
            KernelSource::Explicit(w) => Ok(tape.param(store, *w)),
            KernelSource::NeuralField(kernel) => {
                let offsets = tape.constant(self.tap_offsets());
                kernel.eval(tape, store, offsets, counter)
            }
        }
    }

    /// Applies a materialized kernel to `x`, a batch of `batch` grids with
    /// `resolution^dim` cells each.
    #[allow(clippy::too_many_arguments)]
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        kernel: Var,
        x: Var,
        batch: usize,
        resolution: usize,
        counter: &KernelEvalCounter,
    ) -> Result<Var> {
        counter.record_application();
        let y = tape.conv(x, kernel, self.spec.geometry(batch, resolution))?;
        match self.bias {
            Some(b) => {
                let bv = tape.param(store, b);
                tape.add_bias(y, bv)
            }
            None => Ok(y),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        batch: usize,
        resolution: usize,
        counter: &KernelEvalCounter,
    ) -> Result<Var> {
        let k = self.materialize(tape, store, counter)?;
        self.apply(tape, store, k, x, batch, resolution, counter)
    }
}

/// Convolves a single grid.
pub fn conv_grid(grid: &Grid, conv: &GridConv, store: &ParamStore, counter: &KernelEvalCounter) -> Result<Grid> {
    if grid.channels() != conv.spec.c_in || grid.spec.dim != conv.spec.dim {
        return Err(shape_err("conv_grid", grid.feats.shape(), &[conv.spec.c_in]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(grid.feats.clone());
    let y = conv.forward(&mut tape, store, x, 1, grid.spec.resolution, counter)?;
    Grid::new(grid.spec, tape.value(y).clone())
}

/// Continuous convolution evaluated directly on a cloud: each point sums
/// `W(c_j - c_i) x_j` over its neighbors `j`, rendering the kernel once per
/// edge. `edges` are within-cloud neighborhoods (`j -> i`).
pub fn conv_point_native(
    tape: &mut Tape,
    store: &ParamStore,
    coords: &[f64],
    dim: usize,
    feats: Var,
    edges: &EdgeSet,
    kernel: &NeuralKernel,
    counter: &KernelEvalCounter,
) -> Result<Var> {
    if edges.direction() != Direction::CloudToCloud {
        return Err(Error::Config(format!("native convolution needs CloudToCloud edges, got {:?}", edges.direction())));
    }
    let n = edges.n_dst();
    if coords.len() != n * dim || tape.value(feats).rows() != n || tape.value(feats).cols() != kernel.c_in {
        return Err(shape_err("conv_point_native", tape.value(feats).shape(), &[n, kernel.c_in]));
    }
    if let Some(i) = edges.in_degrees().iter().position(|&d| d == 0) {
        return Err(Error::Invariant(format!("point {i} has an empty neighborhood")));
    }
    let mut rel = Vec::with_capacity(edges.len() * dim);
    for &(s, d) in edges.edges() {
        rel.extend((0..dim).map(|a| coords[s * dim + a] - coords[d * dim + a]));
    }
    let rel = tape.constant(Tensor::matrix(edges.len(), dim, rel)?);
    let w = kernel.eval(tape, store, rel, counter)?;
    let x_edge = tape.gather_rows(feats, edges.edges().iter().map(|e| e.0).collect())?;
    let msg = tape.row_matvec(x_edge, w, kernel.c_out)?;
    tape.scatter(msg, edges.edges().iter().map(|e| e.1).collect(), n, Aggregation::Sum)
}

/// Settings of a residual convolution block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dim: usize,
    pub activation: Activation,
    pub residual: bool,
    pub dropout: f64,
}

/// `x + dropout(act(conv(norm(x))))`, where `norm` standardizes the
/// channels of every cell and applies a learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    spec: BlockSpec,
    norm_scale: ParamId,
    norm_shift: ParamId,
    conv: GridConv,
}

pub const NORM_EPS: f64 = 1e-5;

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, spec: BlockSpec, conv: GridConv) -> Result<Self> {
        if spec.residual && spec.in_channels != spec.out_channels {
            return Err(Error::Config(format!(
                "residual block needs equal channels, got {} -> {}",
                spec.in_channels, spec.out_channels
            )));
        }
        if conv.spec.c_in != spec.in_channels || conv.spec.c_out != spec.out_channels {
            return Err(Error::Config("block and convolution channels differ".into()));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", spec.dropout)));
        }
        let norm_scale = store.add(join(name, "norm.scale"), Tensor::full(vec![spec.in_channels], 1.0), false);
        let norm_shift = store.add(join(name, "norm.shift"), Tensor::zeros(vec![spec.in_channels]), false);
        Ok(Self { spec, norm_scale, norm_shift, conv })
    }

    /// Block with a neural-field kernel at the grid spacing of `grid`.
    pub fn neural_field(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        spec: BlockSpec,
        grid: &GridSpec,
        rff: RffConfig,
        hidden: usize,
    ) -> Result<Self> {
        let conv_spec = ConvSpec {
            kernel_size: spec.kernel_size,
            c_in: spec.in_channels,
            c_out: spec.out_channels,
            dim: spec.dim,
        };
        let conv = GridConv::neural_field(store, rng, &join(name, "conv"), conv_spec, grid.spacing(), rff, hidden, spec.activation, true)?;
        Self::new(store, name, spec, conv)
    }

    pub fn conv(&self) -> &GridConv {
        &self.conv
    }

    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    /// `dropout_rng` enables dropout (training); `None` is evaluation mode.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        batch: usize,
        resolution: usize,
        counter: &KernelEvalCounter,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let h = tape.layer_norm(x, NORM_EPS)?;
        let s = tape.param(store, self.norm_scale);
        let b = tape.param(store, self.norm_shift);
        let h = tape.mul_row(h, s)?;
        let h = tape.add_bias(h, b)?;
        let h = self.conv.forward(tape, store, h, batch, resolution, counter)?;
        let mut h = tape.activation(h, self.spec.activation);
        if let (Some(rng), true) = (dropout_rng, self.spec.dropout > 0.0) {
            let p = self.spec.dropout;
            let keep = 1.0 / (1.0 - p);
            let mask = (0..tape.value(h).len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            h = tape.mul_const(h, mask)?;
        }
        if self.spec.residual {
            h = tape.add(x, h)?;
        }
        Ok(h)
    }
}

/// Global mean pool over the cells of each grid followed by an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyHead {
    linear: Linear,
}

impl ClassifyHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, n_classes: usize) -> Self {
        Self { linear: Linear::new(store, rng, name, channels, n_classes) }
    }

    pub fn linear(&self) -> &Linear {
        &self.linear
    }

    /// `x` is `(batch · cells) × channels`; returns `batch × n_classes`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize) -> Result<Var> {
        let rows = tape.value(x).rows();
        if batch == 0 || !rows.is_multiple_of(batch) {
            return Err(shape_err("classify_head", tape.value(x).shape(), &[batch]));
        }
        let cells = rows / batch;
        let owner = (0..rows).map(|r| r / cells).collect();
        let pooled = tape.scatter(x, owner, batch, Aggregation::Mean)?;
        self.linear.forward(tape, store, pooled)
    }
}

/// Per-cell affine map to `n_out` channels (a 1×1×1 convolution).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHead {
    linear: Linear,
}

impl DenseHead {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, n_out: usize) -> Self {
        Self { linear: Linear::new(store, rng, name, channels, n_out) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.linear.forward(tape, store, x)
    }
}

/// Logits for a single grid.
pub fn classify_head(grid: &Grid, head: &ClassifyHead, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(grid.feats.clone());
    let y = head.forward(&mut tape, store, x, 1)?;
    Ok(tape.value(y).clone())
}

/// Dense per-cell predictions for a single grid.
pub fn dense_head(grid: &Grid, head: &DenseHead, store: &ParamStore) -> Result<Grid> {
    let mut tape = Tape::new();
    let x = tape.constant(grid.feats.clone());
    let y = head.forward(&mut tape, store, x)?;
    Grid::new(grid.spec, tape.value(y).clone())
}
