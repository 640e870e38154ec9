//! Training loops for the reconstruction and synthetic classification
//! experiments. Everything is seeded; identical configurations reproduce
//! losses and parameters bit for bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::cloud::{make_grid_coords, GridSpec, PointCloud};
use crate::connectivity::{bilateral_knn, invert_edges};
use crate::data::{random_cloud, surface_cloud, Shape};
use crate::error::{Error, Result};
use crate::gridify::{Gridifier, GridifierConfig, MessageGraph};
use crate::gridnet::{BlockSpec, ClassifyHead, ConvBlock, KernelEvalCounter};
use crate::nn::{Activation, AdamW, Aggregation, CosineWarmup, ParamStore, RffConfig, Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

// Independent random streams derived from the user seed.
const DATA_STREAM: u64 = 0x0da7a;
const INIT_STREAM: u64 = 0x1417;
const ORDER_STREAM: u64 = 0x0bde5;

fn stream(seed: u64, tag: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

/// Optimizer and schedule settings shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl TrainConfig {
    fn validate(&self) -> Result<CosineWarmup> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        CosineWarmup::new(self.lr, self.warmup_epochs, self.epochs)
    }
}

/// Gridify then de-gridify random clouds and regress the input features.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_points: usize,
    pub k: usize,
    pub hidden: usize,
    pub n_frequencies: usize,
    pub omega: f64,
    pub aggregation: Aggregation,
    pub activation: Activation,
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 50,
            n_points: 256,
            k: 2,
            hidden: 12,
            n_frequencies: 8,
            omega: 1.0,
            aggregation: Aggregation::Mean,
            activation: Activation::Gelu,
            resolutions: vec![6],
            channels: vec![4, 16],
            train: TrainConfig {
                epochs: 30,
                warmup_epochs: 3,
                lr: 0.005,
                weight_decay: 0.0,
                batch_size: 2,
            },
            seed: 1,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("need at least one training and one validation cloud".into()));
        }
        if self.n_points == 0 || self.hidden == 0 || self.k == 0 {
            return Err(Error::Config("point count, hidden width and k must be positive".into()));
        }
        if self.resolutions.is_empty() || self.channels.is_empty() {
            return Err(Error::Config("need at least one resolution and one channel width".into()));
        }
        if let Some(r) = self.resolutions.iter().find(|&&r| r < 2) {
            return Err(Error::Config(format!("grid resolution {r} is below 2")));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        self.train.validate()?;
        Ok(())
    }
}

/// One line of the reconstruction results table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconRow {
    pub resolution: usize,
    pub channels: usize,
    pub seed: u64,
    pub val_mse: f64,
}

/// Result of training one reconstruction configuration.
#[derive(Debug, Clone)]
pub struct ReconOutcome {
    pub row: ReconRow,
    /// Validation MSE of the freshly initialized model.
    pub initial_val_mse: f64,
    pub epoch_train_mse: Vec<f64>,
    pub model: ReconModel,
    pub store: ParamStore,
    pub optimizer: AdamW,
}

/// Gridification followed directly by de-gridification.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconModel {
    pub gridify: Gridifier,
    pub degridify: Gridifier,
}

struct ReconSample {
    feats: Tensor,
    to_grid: MessageGraph,
    to_cloud: MessageGraph,
}

fn prepare_recon(cloud: &PointCloud, grid_coords: &[f64], k: usize) -> Result<ReconSample> {
    let edges = bilateral_knn(cloud.coords(), grid_coords, 3, k)?;
    let to_grid = MessageGraph::new(&edges, cloud.coords(), grid_coords, 3)?;
    let to_cloud = MessageGraph::new(&invert_edges(&edges), grid_coords, cloud.coords(), 3)?;
    Ok(ReconSample {
        feats: cloud.feat_tensor(),
        to_grid,
        to_cloud,
    })
}

impl ReconModel {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ReconConfig, channels: usize, rff_seed: u64) -> Result<Self> {
        let layer = |in_features, out_features, seed| GridifierConfig {
            in_features,
            out_features,
            hidden: cfg.hidden,
            dim: 3,
            rff: Some(RffConfig {
                omega: cfg.omega,
                n_frequencies: cfg.n_frequencies,
                trainable: true,
                seed,
            }),
            aggregation: cfg.aggregation,
            activation: cfg.activation,
        };
        Ok(Self {
            gridify: Gridifier::new(store, rng, "gridify", &layer(1, channels, rff_seed))?,
            degridify: Gridifier::new(store, rng, "degridify", &layer(channels, 1, rff_seed.wrapping_add(1)))?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &[&ReconSample]) -> Result<(Var, Tensor)> {
        let feats: Vec<f64> = batch.iter().flat_map(|s| s.feats.data().iter().copied()).collect();
        let n = feats.len();
        let target = Tensor::matrix(n, 1, feats)?;
        let to_grid = MessageGraph::batch(&batch.iter().map(|s| &s.to_grid).collect::<Vec<_>>())?;
        let to_cloud = MessageGraph::batch(&batch.iter().map(|s| &s.to_cloud).collect::<Vec<_>>())?;
        let x = tape.constant(target.clone());
        let grid = self.gridify.forward(tape, store, x, &to_grid)?;
        let out = self.degridify.forward(tape, store, grid, &to_cloud)?;
        Ok((out, target))
    }
}

fn mse(tape: &mut Tape, pred: Var, target: Tensor) -> Result<Var> {
    let t = tape.constant(target);
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.reduce_mean(sq)
}

/// Shuffled minibatches of `0..n`.
fn batches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn checked_loss(tape: &Tape, loss: Var, epoch: usize) -> Result<f64> {
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Training {
            epoch,
            detail: format!("loss became {v}"),
        });
    }
    Ok(v)
}

fn optimizer_step(opt: &mut AdamW, store: &mut ParamStore, tape: &Tape, epoch: usize) -> Result<()> {
    let grads = tape.param_grads(store);
    opt.step(store, &grads).map_err(|e| match e {
        Error::Training { detail, .. } => Error::Training { epoch, detail },
        other => other,
    })
}

/// Trains one `(resolution, channels)` configuration of `cfg`.
pub fn train_recon_single(cfg: &ReconConfig, resolution: usize, channels: usize) -> Result<ReconOutcome> {
    cfg.validate()?;
    let schedule = cfg.train.validate()?;
    let spec = GridSpec::unit(resolution, 3)?;
    let grid_coords = make_grid_coords(&spec)?;

    // the dataset depends on the seed only, so every configuration sees the
    // same clouds
    let mut data_rng = stream(cfg.seed, DATA_STREAM);
    let mut make = |count| -> Result<Vec<ReconSample>> {
        (0..count)
            .map(|_| prepare_recon(&random_cloud(cfg.n_points, &mut data_rng)?, &grid_coords, cfg.k))
            .collect()
    };
    let train_set = make(cfg.n_train)?;
    let val_set = make(cfg.n_val)?;

    let mut store = ParamStore::new();
    let mut init_rng = stream(cfg.seed, INIT_STREAM);
    let model = ReconModel::new(&mut store, &mut init_rng, cfg, channels, cfg.seed)?;
    let mut opt = AdamW::new(&store, cfg.train.lr, cfg.train.weight_decay);
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);

    let evaluate = |store: &ParamStore| -> Result<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in val_set.chunks(cfg.train.batch_size) {
            let mut tape = Tape::new();
            let refs: Vec<&ReconSample> = chunk.iter().collect();
            let (pred, target) = model.forward(&mut tape, store, &refs)?;
            let p = tape.value(pred);
            sum += p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += target.len();
        }
        Ok(sum / count as f64)
    };

    let initial_val_mse = evaluate(&store)?;
    let mut epoch_train_mse = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        opt.lr = schedule.lr(epoch);
        let mut total = 0.0;
        let batch_list = batches(train_set.len(), cfg.train.batch_size, &mut order_rng);
        for idx in &batch_list {
            let refs: Vec<&ReconSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let (pred, target) = model.forward(&mut tape, &store, &refs)?;
            let loss = mse(&mut tape, pred, target)?;
            total += checked_loss(&tape, loss, epoch)?;
            tape.backward(loss)?;
            optimizer_step(&mut opt, &mut store, &tape, epoch)?;
        }
        epoch_train_mse.push(total / batch_list.len() as f64);
    }
    let val_mse = evaluate(&store)?;
    if !val_mse.is_finite() {
        return Err(Error::Training {
            epoch: cfg.train.epochs,
            detail: format!("validation loss is {val_mse}"),
        });
    }
    Ok(ReconOutcome {
        row: ReconRow {
            resolution,
            channels,
            seed: cfg.seed,
            val_mse,
        },
        initial_val_mse,
        epoch_train_mse,
        model,
        store,
        optimizer: opt,
    })
}

/// Trains every `(resolution, channels)` pair in `cfg`, resolutions outer.
pub fn train_reconstruction(cfg: &ReconConfig) -> Result<Vec<ReconRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &r in &cfg.resolutions {
        for &c in &cfg.channels {
            rows.push(train_recon_single(cfg, r, c)?.row);
        }
    }
    Ok(rows)
}

/// Sphere-versus-cube classification through gridification, residual
/// convolution blocks and a pooled linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_points: usize,
    pub resolution: usize,
    pub k: usize,
    pub hidden: usize,
    pub channels: usize,
    pub blocks: usize,
    pub kernel_size: usize,
    pub n_frequencies: usize,
    pub omega: f64,
    pub dropout: f64,
    pub noise: f64,
    /// Replace labels by a random permutation (chance-level control).
    pub shuffle_labels: bool,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_val: 200,
            n_points: 128,
            resolution: 6,
            k: 4,
            hidden: 16,
            channels: 8,
            blocks: 3,
            kernel_size: 3,
            n_frequencies: 16,
            omega: 0.1,
            dropout: 0.1,
            noise: 0.02,
            shuffle_labels: false,
            train: TrainConfig {
                epochs: 20,
                warmup_epochs: 2,
                lr: 0.005,
                weight_decay: 0.0,
                batch_size: 8,
            },
            seed: 1,
        }
    }
}

impl ClassifyConfig {
    pub fn validate(&self) -> Result<CosineWarmup> {
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("need training and validation clouds".into()));
        }
        if self.n_points == 0 || self.hidden == 0 || self.k == 0 || self.channels == 0 {
            return Err(Error::Config("point count, hidden width, k and channels must be positive".into()));
        }
        if self.resolution < 2 {
            return Err(Error::Config(format!("grid resolution {} is below 2", self.resolution)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be finite and non-negative", self.noise)));
        }
        self.train.validate()
    }
}

/// Gridifier, convolution blocks and classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub gridify: Gridifier,
    pub blocks: Vec<ConvBlock>,
    pub head: ClassifyHead,
    pub spec: GridSpec,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ClassifyConfig, in_features: usize, n_classes: usize) -> Result<Self> {
        let spec = GridSpec::unit(cfg.resolution, 3)?;
        let rff = |seed| RffConfig {
            omega: cfg.omega,
            n_frequencies: cfg.n_frequencies,
            trainable: true,
            seed,
        };
        let gridify = Gridifier::new(
            store,
            rng,
            "gridify",
            &GridifierConfig {
                in_features,
                out_features: cfg.channels,
                hidden: cfg.hidden,
                dim: 3,
                rff: Some(rff(cfg.seed)),
                aggregation: Aggregation::Mean,
                activation: Activation::Gelu,
            },
        )?;
        let block = BlockSpec {
            in_channels: cfg.channels,
            out_channels: cfg.channels,
            kernel_size: cfg.kernel_size,
            dim: 3,
            activation: Activation::Gelu,
            residual: true,
            dropout: cfg.dropout,
        };
        let blocks = (0..cfg.blocks)
            .map(|b| ConvBlock::neural_field(store, rng, &format!("block{b}"), block, &spec, rff(cfg.seed + 1 + b as u64), cfg.hidden))
            .collect::<Result<Vec<_>>>()?;
        let head = ClassifyHead::new(store, rng, "head", cfg.channels, n_classes);
        Ok(Self { gridify, blocks, head, spec })
    }

    /// Logits for a batch of prepared clouds.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        feats: Tensor,
        graph: &MessageGraph,
        batch: usize,
        counter: &KernelEvalCounter,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let x = tape.constant(feats);
        let mut h = self.gridify.forward(tape, store, x, graph)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, batch, self.spec.resolution, counter, dropout_rng.as_deref_mut())?;
        }
        self.head.forward(tape, store, h, batch)
    }
}

struct LabeledSample {
    feats: Tensor,
    graph: MessageGraph,
    label: usize,
}

/// Result of a classification run.
#[derive(Debug, Clone)]
pub struct ClassifyOutcome {
    pub val_accuracy: f64,
    pub epoch_train_loss: Vec<f64>,
    pub model: Classifier,
    pub store: ParamStore,
    pub optimizer: AdamW,
}

fn labeled_set(cfg: &ClassifyConfig, n: usize, grid_coords: &[f64], rng: &mut Rng) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let shape = if label == 0 { Shape::Sphere } else { Shape::Cube };
        let cloud = surface_cloud(shape, cfg.n_points, cfg.noise, rng)?;
        let edges = bilateral_knn(cloud.coords(), grid_coords, 3, cfg.k)?;
        out.push(LabeledSample {
            feats: cloud.feat_tensor(),
            graph: MessageGraph::new(&edges, cloud.coords(), grid_coords, 3)?,
            label,
        });
    }
    if cfg.shuffle_labels {
        let mut labels: Vec<usize> = out.iter().map(|s| s.label).collect();
        labels.shuffle(rng);
        for (s, l) in out.iter_mut().zip(labels) {
            s.label = l;
        }
    }
    Ok(out)
}

fn stack(batch: &[&LabeledSample]) -> Result<(Tensor, MessageGraph)> {
    let cols = batch[0].feats.cols();
    let data: Vec<f64> = batch.iter().flat_map(|s| s.feats.data().iter().copied()).collect();
    let rows = data.len() / cols;
    let graph = MessageGraph::batch(&batch.iter().map(|s| &s.graph).collect::<Vec<_>>())?;
    Ok((Tensor::matrix(rows, cols, data)?, graph))
}

/// Trains the sphere-versus-cube classifier and reports validation accuracy.
pub fn train_classify_synth(cfg: &ClassifyConfig) -> Result<ClassifyOutcome> {
    let schedule = cfg.validate()?;
    const CLASSES: usize = 2;
    let spec = GridSpec::unit(cfg.resolution, 3)?;
    let grid_coords = make_grid_coords(&spec)?;
    let mut data_rng = stream(cfg.seed, DATA_STREAM);
    let train_set = labeled_set(cfg, cfg.n_train, &grid_coords, &mut data_rng)?;
    let val_set = labeled_set(cfg, cfg.n_val, &grid_coords, &mut data_rng)?;

    let mut store = ParamStore::new();
    let mut init_rng = stream(cfg.seed, INIT_STREAM);
    let model = Classifier::new(&mut store, &mut init_rng, cfg, 3, CLASSES)?;
    let mut opt = AdamW::new(&store, cfg.train.lr, cfg.train.weight_decay);
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);
    let counter = KernelEvalCounter::new();

    let mut epoch_train_loss = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        opt.lr = schedule.lr(epoch);
        let mut total = 0.0;
        let batch_list = batches(train_set.len(), cfg.train.batch_size, &mut order_rng);
        for idx in &batch_list {
            let refs: Vec<&LabeledSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let (feats, graph) = stack(&refs)?;
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &store, feats, &graph, refs.len(), &counter, Some(&mut order_rng))?;
            let logp = tape.log_softmax(logits)?;
            let mut onehot = vec![0.0; refs.len() * CLASSES];
            for (r, s) in refs.iter().enumerate() {
                onehot[r * CLASSES + s.label] = 1.0;
            }
            let picked = tape.mul_const(logp, onehot)?;
            let mean = tape.reduce_mean(picked)?;
            let loss = tape.scale(mean, -(CLASSES as f64));
            total += checked_loss(&tape, loss, epoch)?;
            tape.backward(loss)?;
            optimizer_step(&mut opt, &mut store, &tape, epoch)?;
        }
        epoch_train_loss.push(total / batch_list.len() as f64);
    }

    let mut correct = 0usize;
    for chunk in val_set.chunks(cfg.train.batch_size) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        let (feats, graph) = stack(&refs)?;
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &store, feats, &graph, refs.len(), &counter, None)?;
        for (row, s) in tape.value(logits).data().chunks(CLASSES).zip(&refs) {
            let pred = if row[1] > row[0] { 1 } else { 0 };
            correct += usize::from(pred == s.label);
        }
    }
    Ok(ClassifyOutcome {
        val_accuracy: correct as f64 / val_set.len() as f64,
        epoch_train_loss,
        model,
        store,
        optimizer: opt,
    })
}
