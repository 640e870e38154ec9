//! Gridification and de-gridification as message passing over a bipartite
//! graph, and the checklist that guards against information loss.
//!
//! For a destination node `i` with incoming edges `j -> i`:
//!
//! ```text
//! x_i = upd( ⊕_j msg( [node(x_j), pos(c_i - c_j)] ) )
//! ```
//!
//! Gridification sends cloud features to grid nodes. De-gridification runs
//! the same layer, with its own parameters, over the inverted edge set.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cloud::{make_grid_coords, CloudMeta, Grid, GridSpec, PointCloud};
use crate::connectivity::{Direction, EdgeSet};
use crate::error::{Error, Result};
use crate::nn::{join, Activation, Aggregation, Mlp, ParamStore, PositionalNet, RffConfig, Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

/// Sizes and choices for one message-passing layer. Each of the four
/// networks is a two-layer MLP at width `hidden`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridifierConfig {
    pub in_features: usize,
    pub out_features: usize,
    pub hidden: usize,
    pub dim: usize,
    /// Fourier encoding of relative positions; `None` feeds raw offsets to
    /// the positional MLP.
    pub rff: Option<RffConfig>,
    pub aggregation: Aggregation,
    pub activation: Activation,
}

/// The learnable part of a (de-)gridification layer: node, positional,
/// message and update networks plus the aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Gridifier {
    node: Mlp,
    pos: PositionalNet,
    msg: Mlp,
    upd: Mlp,
    aggregation: Aggregation,
}

impl Gridifier {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &GridifierConfig) -> Result<Self> {
        let h = cfg.hidden;
        let node = Mlp::new(store, rng, &join(name, "node"), &[cfg.in_features, h, h], cfg.activation)?;
        let pos = PositionalNet::new(store, rng, &join(name, "pos"), cfg.dim, cfg.rff, &[h, h], cfg.activation)?;
        let msg = Mlp::new(store, rng, &join(name, "msg"), &[2 * h, h, h], cfg.activation)?;
        let upd = Mlp::new(store, rng, &join(name, "upd"), &[h, h, cfg.out_features], cfg.activation)?;
        Self::from_parts(node, pos, msg, upd, cfg.aggregation)
    }

    /// Assembles a layer from prebuilt networks, checking that they chain.
    pub fn from_parts(node: Mlp, pos: PositionalNet, msg: Mlp, upd: Mlp, aggregation: Aggregation) -> Result<Self> {
        let h = node.out_width();
        if pos.out_width() != h || msg.in_width() != 2 * h || upd.in_width() != msg.out_width() {
            return Err(Error::Config(format!(
                "gridifier widths do not chain: node -> {h}, pos -> {}, msg {} -> {}, upd {} -> {}",
                pos.out_width(),
                msg.in_width(),
                msg.out_width(),
                upd.in_width(),
                upd.out_width()
            )));
        }
        Ok(Self { node, pos, msg, upd, aggregation })
    }

    pub fn hidden(&self) -> usize {
        self.node.out_width()
    }

    pub fn in_features(&self) -> usize {
        self.node.in_width()
    }

    pub fn out_features(&self) -> usize {
        self.upd.out_width()
    }

    pub fn dim(&self) -> usize {
        self.pos.dim()
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation
    }

    pub fn node_net(&self) -> &Mlp {
        &self.node
    }

    pub fn pos_net(&self) -> &PositionalNet {
        &self.pos
    }

    pub fn msg_net(&self) -> &Mlp {
        &self.msg
    }

    pub fn upd_net(&self) -> &Mlp {
        &self.upd
    }

    /// Runs the layer: `src_feats` is `n_src × in_features`, the result is
    /// `n_dst × out_features`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, src_feats: Var, graph: &MessageGraph) -> Result<Var> {
        let rows = tape.value(src_feats).rows();
        if rows != graph.n_src {
            return Err(crate::error::shape_err("gridify sources", tape.value(src_feats).shape(), &[graph.n_src]));
        }
        if graph.dim != self.dim() {
            return Err(Error::Config(format!(
                "graph is {}-dimensional, positional network expects {}",
                graph.dim,
                self.dim()
            )));
        }
        let h = self.node.forward(tape, store, src_feats)?;
        let rel = tape.constant(graph.rel.clone());
        let trunk = self.pos.forward_trunk(tape, store, rel)?;
        // The first message layer acts on [h_j, p_ij]. Its node half is
        // applied once per source and gathered. Its positional half composes
        // with the affine last layer of φ_pos into one matrix per edge.
        let first = &self.msg.layers()[0];
        let hid = self.hidden();
        let w = tape.param(store, first.weight);
        let w_node = tape.slice_rows(w, 0, hid)?;
        let w_pos = tape.slice_rows(w, hid, 2 * hid)?;
        let node_part = tape.matmul(h, w_node)?;
        let node_part = tape.gather_rows(node_part, graph.src.clone())?;
        let pos_last = self.pos.head().layers().last().expect("head has a layer");
        let wl = tape.param(store, pos_last.weight);
        let bl = tape.param(store, pos_last.bias);
        let w_fused = tape.matmul(wl, w_pos)?;
        let bl = tape.reshape(bl, &[1, hid])?;
        let b_fused = tape.matmul(bl, w_pos)?;
        let b_fused = tape.reshape(b_fused, &[hid])?;
        let pos_part = tape.matmul(trunk, w_fused)?;
        let pre = tape.add(node_part, pos_part)?;
        let pre = tape.add_bias(pre, b_fused)?;
        let b = tape.param(store, first.bias);
        let mut m = tape.add_bias(pre, b)?;
        for layer in &self.msg.layers()[1..] {
            m = tape.activation(m, self.msg.activation());
            m = layer.forward(tape, store, m)?;
        }
        let agg = tape.scatter(m, graph.dst.clone(), graph.n_dst, self.aggregation)?;
        self.upd.forward(tape, store, agg)
    }
}

/// Edge lists and relative positions `c_dst - c_src` prepared for
/// [`Gridifier::forward`]. Several graphs can be batched into one disjoint
/// union.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageGraph {
    src: Vec<usize>,
    dst: Vec<usize>,
    rel: Tensor,
    n_src: usize,
    n_dst: usize,
    dim: usize,
}

impl MessageGraph {
    /// Fails with [`Error::Invariant`] if some destination has no incoming
    /// edge, which bilateral connectivity never produces.
    pub fn new(edges: &EdgeSet, src_coords: &[f64], dst_coords: &[f64], dim: usize) -> Result<Self> {
        if src_coords.len() != edges.n_src() * dim || dst_coords.len() != edges.n_dst() * dim {
            return Err(Error::Data(format!(
                "edge set spans {} sources and {} destinations, coordinates give {} and {}",
                edges.n_src(),
                edges.n_dst(),
                src_coords.len() / dim.max(1),
                dst_coords.len() / dim.max(1)
            )));
        }
        if let Some(d) = edges.in_degrees().iter().position(|&c| c == 0) {
            return Err(Error::Invariant(format!(
                "destination {d} has no incoming edge; the edge set is not bilateral"
            )));
        }
        let mut rel = Vec::with_capacity(edges.len() * dim);
        for &(s, d) in edges.edges() {
            let cs = &src_coords[s * dim..(s + 1) * dim];
            let cd = &dst_coords[d * dim..(d + 1) * dim];
            rel.extend(cd.iter().zip(cs).map(|(a, b)| a - b));
        }
        Ok(Self {
            src: edges.edges().iter().map(|e| e.0).collect(),
            dst: edges.edges().iter().map(|e| e.1).collect(),
            rel: Tensor::matrix(edges.len(), dim, rel)?,
            n_src: edges.n_src(),
            n_dst: edges.n_dst(),
            dim,
        })
    }

    /// Disjoint union: sources and destinations of graph `b` are offset by
    /// the totals of graphs `0..b`.
    pub fn batch(graphs: &[&MessageGraph]) -> Result<Self> {
        let Some(first) = graphs.first() else {
            return Err(Error::Config("cannot batch zero graphs".into()));
        };
        let dim = first.dim;
        let (mut src, mut dst, mut rel) = (Vec::new(), Vec::new(), Vec::new());
        let (mut n_src, mut n_dst) = (0, 0);
        for g in graphs {
            if g.dim != dim {
                return Err(Error::Config("batched graphs must share a dimension".into()));
            }
            src.extend(g.src.iter().map(|s| s + n_src));
            dst.extend(g.dst.iter().map(|d| d + n_dst));
            rel.extend_from_slice(g.rel.data());
            n_src += g.n_src;
            n_dst += g.n_dst;
        }
        let e = src.len();
        Ok(Self { src, dst, rel: Tensor::matrix(e, dim, rel)?, n_src, n_dst, dim })
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn n_dst(&self) -> usize {
        self.n_dst
    }

    pub fn rel(&self) -> &Tensor {
        &self.rel
    }
}

fn expect_direction(edges: &EdgeSet, want: Direction) -> Result<()> {
    if edges.direction() != want {
        return Err(Error::Config(format!(
            "expected {want:?} edges, got {:?}",
            edges.direction()
        )));
    }
    Ok(())
}

/// Maps a point cloud onto the grid described by `spec`.
pub fn gridify(cloud: &PointCloud, spec: &GridSpec, edges: &EdgeSet, params: &Gridifier, store: &ParamStore) -> Result<Grid> {
    expect_direction(edges, Direction::CloudToGrid)?;
    let grid_coords = make_grid_coords(spec)?;
    let graph = MessageGraph::new(edges, cloud.coords(), &grid_coords, cloud.dim())?;
    let mut tape = Tape::new();
    let x = tape.constant(cloud.feat_tensor());
    let y = params.forward(&mut tape, store, x, &graph)?;
    Grid::new(*spec, tape.value(y).clone())
}

/// Maps grid features back onto the cloud points at `cloud_coords`, using
/// grid-to-cloud edges (usually the inverted gridification edges).
pub fn degridify(grid: &Grid, cloud_coords: &[f64], edges: &EdgeSet, params: &Gridifier, store: &ParamStore) -> Result<Tensor> {
    expect_direction(edges, Direction::GridToCloud)?;
    let graph = MessageGraph::new(edges, &grid.coords(), cloud_coords, grid.spec.dim)?;
    let mut tape = Tape::new();
    let x = tape.constant(grid.feats.clone());
    let y = params.forward(&mut tape, store, x, &graph)?;
    Ok(tape.value(y).clone())
}

/// The conditions a gridification setup should meet to avoid losing
/// information or leaving grid capacity unused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Requirement {
    /// (i) at least as many grid points as cloud points.
    GridSize,
    /// (ii) node network never narrower than the cloud features.
    NodeWidth,
    /// (iii) positional network never narrower than the domain dimension.
    PositionWidth,
    /// (iv) message and update networks at least features + dimension wide.
    MessageWidth,
    /// (v) every cloud point connected to the grid.
    CloudConnected,
    /// (vi) positional network can represent high frequencies.
    HighFrequency,
    /// (vii) every grid point connected to the cloud.
    GridConnected,
}

impl Requirement {
    pub fn label(self) -> &'static str {
        match self {
            Requirement::GridSize => "(i)",
            Requirement::NodeWidth => "(ii)",
            Requirement::PositionWidth => "(iii)",
            Requirement::MessageWidth => "(iv)",
            Requirement::CloudConnected => "(v)",
            Requirement::HighFrequency => "(vi)",
            Requirement::GridConnected => "(vii)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub requirement: Requirement,
    pub detail: String,
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "requirement {} violated: {}", self.requirement.label(), self.detail)
    }
}

/// Reports every unmet requirement for gridifying a cloud described by
/// `meta` onto `spec` with `params` and `k` neighbors. Connectivity is
/// verified on `edges` when given (either direction).
pub fn check_requirements(
    meta: &CloudMeta,
    spec: &GridSpec,
    params: &Gridifier,
    k: usize,
    edges: Option<&EdgeSet>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut flag = |requirement, detail: String| out.push(Violation { requirement, detail });

    let n_grid = spec.num_points();
    if n_grid < meta.points {
        flag(Requirement::GridSize, format!("{n_grid} grid points < {} cloud points", meta.points));
    }
    let narrow = |widths: &[usize], bound: usize| widths.iter().copied().filter(|&w| w < bound).min();
    if let Some(w) = narrow(&params.node.widths()[1..], meta.features) {
        flag(Requirement::NodeWidth, format!("node network width {w} < {} features", meta.features));
    }
    let mut pos_widths: Vec<usize> = params.pos.fourier().map(|f| f.out_width()).into_iter().collect();
    pos_widths.extend_from_slice(&params.pos.head().widths()[1..]);
    if let Some(w) = narrow(&pos_widths, meta.dim) {
        flag(Requirement::PositionWidth, format!("positional network width {w} < dimension {}", meta.dim));
    }
    let bound = meta.features + meta.dim;
    let upd = params.upd.widths();
    let msg_upd: Vec<usize> = params.msg.widths()[1..].iter().chain(&upd[1..upd.len() - 1]).copied().collect();
    if let Some(w) = narrow(&msg_upd, bound) {
        flag(Requirement::MessageWidth, format!("message/update width {w} < features + dimension = {bound}"));
    }
    if params.pos.fourier().is_none() {
        flag(Requirement::HighFrequency, "positional network has no Fourier encoding".into());
    }

    if k == 0 {
        flag(Requirement::CloudConnected, "k = 0 leaves every cloud point unconnected".into());
        flag(Requirement::GridConnected, "k = 0 leaves every grid point unconnected".into());
    } else if let Some(e) = edges {
        let (cloud_deg, grid_deg) = match e.direction() {
            Direction::GridToCloud => (e.in_degrees(), e.out_degrees()),
            _ => (e.out_degrees(), e.in_degrees()),
        };
        let lonely = |deg: &[usize]| deg.iter().filter(|&&d| d == 0).count();
        let c = lonely(&cloud_deg);
        if c > 0 {
            flag(Requirement::CloudConnected, format!("{c} cloud points have no edge"));
        }
        let g = lonely(&grid_deg);
        if g > 0 {
            flag(Requirement::GridConnected, format!("{g} grid points have no edge"));
        }
    }
    out
}
