//! Acceptance criteria 1-9, one result line each.
//!
//! Criteria run one after another so timings do not compete for cores.
//! Arguments select a subset by number (`cargo test --test acceptance -- 5 6`).
//! The process exits non-zero when any selected criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use gridify::alloc_count::CountingAlloc;
use gridify::bench::{bench_scaling, BenchConfig, BenchPath};
use gridify::checkpoint::Checkpoint;
use gridify::io::{read_pcb, write_pcb};
use gridify_core::data::gen_random_cloud;
use gridify_core::gridify::{check_requirements, degridify, gridify, Gridifier, GridifierConfig, MessageGraph, Requirement};
use gridify_core::nn::{Activation, Aggregation, ConvGeometry, Mlp, ParamStore, PositionalNet, RffConfig, Tape, Var};
use gridify_core::train::{train_classify_synth, train_recon_single, ClassifyConfig, ReconConfig, TrainConfig};
use gridify_core::{bilateral_knn, invert_edges, make_grid_coords, CloudMeta, GridSpec, PointCloud, Rng, Tensor};
use rand::{Rng as _, SeedableRng};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

// ---- pinned tolerances and budgets ----
const ORACLE_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const TRANSLATION_TOL: f64 = 1e-12;
const MIN_ACCURACY: f64 = 0.9;
const CHANCE_BAND: (f64, f64) = (0.4, 0.6);

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (u32, &'static str, Option<Duration>, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "bilateral connectivity", Some(Duration::from_secs(30)), connectivity),
        (2, "message passing oracle", Some(Duration::from_secs(10)), message_passing_oracle),
        (3, "gradient suite", Some(Duration::from_secs(60)), gradient_suite),
        (4, "permutation and translation invariance", None, invariance),
        (5, "reconstruction trend", Some(Duration::from_secs(600)), reconstruction_trend),
        (6, "kernel reuse complexity", Some(Duration::from_secs(300)), kernel_reuse),
        (7, "requirement checker", None, requirement_checker),
        (8, "determinism and persistence", None, persistence),
        (9, "end-to-end classification", Some(Duration::from_secs(300)), classification),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut ran = 0;
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| Outcome {
            pass: false,
            detail: format!(
                "panicked: {}",
                p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            ),
        });
        let took = start.elapsed();
        let in_time = budget.is_none_or(|b| took <= b);
        let pass = outcome.pass && in_time;
        let budget_note = match budget {
            Some(b) if !in_time => format!("; over the {} s budget", b.as_secs()),
            Some(b) => format!(" (budget {} s)", b.as_secs()),
            None => String::new(),
        };
        println!(
            "criterion {n} {}: {name}: {} [{:.1} s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            took.as_secs_f64()
        );
        ran += 1;
        if !pass {
            failed += 1;
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn uniform_vec(r: &mut Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-bound..bound)).collect()
}

// ---- 1 ----

fn brute_knn(queries: &[f64], targets: &[f64], k: usize) -> Vec<Vec<usize>> {
    queries
        .chunks(3)
        .map(|q| {
            let mut d: Vec<(f64, usize)> = targets
                .chunks(3)
                .enumerate()
                .map(|(j, t)| (q.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|e| e.1).collect()
        })
        .collect()
}

fn connectivity() -> Outcome {
    const INSTANCES: usize = 50;
    let (mut equal, mut lower_ok, mut upper_ok) = (0, 0, 0);
    let mut worst_ratio = 0.0f64;
    let mut worst_case = String::new();
    for inst in 0..INSTANCES {
        let mut r = rng(1000 + inst as u64);
        let n = r.random_range(50..=2000);
        let res = r.random_range(3..=10);
        let k = r.random_range(1..=9);
        let cloud = uniform_vec(&mut r, 3 * n, 1.0);
        let grid = make_grid_coords(&GridSpec::unit(res, 3).unwrap()).unwrap();
        let mut want = BTreeSet::new();
        for (i, row) in brute_knn(&grid, &cloud, k).iter().enumerate() {
            want.extend(row.iter().map(|&j| (j, i)));
        }
        for (j, row) in brute_knn(&cloud, &grid, k).iter().enumerate() {
            want.extend(row.iter().map(|&i| (j, i)));
        }
        let got = bilateral_knn(&cloud, &grid, 3, k).unwrap();
        let got_set: BTreeSet<_> = got.edges().iter().copied().collect();
        if got_set == want && got.len() == want.len() {
            equal += 1;
        }
        let degrees: Vec<usize> = got.out_degrees().into_iter().chain(got.in_degrees()).collect();
        if degrees.iter().all(|&d| d >= k) {
            lower_ok += 1;
        }
        let max = *degrees.iter().max().unwrap();
        if max <= 2 * k {
            upper_ok += 1;
        }
        let ratio = max as f64 / k as f64;
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_case = format!("N_P={n}, r={res}, k={k}: max degree {max}");
        }
    }
    Outcome {
        pass: equal == INSTANCES && lower_ok == INSTANCES && upper_ok == INSTANCES,
        detail: format!(
            "edge sets equal brute force {equal}/{INSTANCES}; deg >= k {lower_ok}/{INSTANCES}; deg <= 2k {upper_ok}/{INSTANCES} (worst {worst_case}, {worst_ratio:.1}k)"
        ),
    }
}

// ---- 2 ----

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
    }
}

fn ref_mlp(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let n = mlp.layers().len();
    for (l, layer) in mlp.layers().iter().enumerate() {
        let w = store.value(layer.weight).data();
        let mut out = store.value(layer.bias).data().to_vec();
        for (i, hi) in h.iter().enumerate() {
            for (o, v) in out.iter_mut().enumerate() {
                *v += hi * w[i * layer.fan_out + o];
            }
        }
        if l + 1 < n {
            out.iter_mut().for_each(|v| *v = act(mlp.activation(), *v));
        }
        h = out;
    }
    h
}

fn ref_pos(store: &ParamStore, pos: &PositionalNet, p: &[f64]) -> Vec<f64> {
    let enc = match pos.fourier() {
        Some(ff) => {
            let b = store.value(ff.freqs());
            let nf = b.cols();
            let z: Vec<f64> = (0..nf)
                .map(|f| std::f64::consts::TAU * (0..p.len()).map(|a| p[a] * b.data()[a * nf + f]).sum::<f64>())
                .collect();
            z.iter().map(|v| v.cos()).chain(z.iter().map(|v| v.sin())).collect()
        }
        None => p.to_vec(),
    };
    ref_mlp(store, pos.head(), &enc)
}

/// The message-passing layer as two plain loops: destinations, then edges.
fn ref_layer(store: &ParamStore, g: &Gridifier, feats: &[f64], src: &[f64], dst: &[f64], edges: &[(usize, usize)], n_dst: usize) -> Vec<f64> {
    let f = g.in_features();
    let mut out = Vec::new();
    for i in 0..n_dst {
        let mut msgs: Vec<Vec<f64>> = Vec::new();
        for &(j, d) in edges {
            if d == i {
                let node = ref_mlp(store, g.node_net(), &feats[j * f..(j + 1) * f]);
                let rel: Vec<f64> = (0..3).map(|a| dst[i * 3 + a] - src[j * 3 + a]).collect();
                let joined: Vec<f64> = node.into_iter().chain(ref_pos(store, g.pos_net(), &rel)).collect();
                msgs.push(ref_mlp(store, g.msg_net(), &joined));
            }
        }
        let agg: Vec<f64> = (0..msgs[0].len())
            .map(|c| match g.aggregation() {
                Aggregation::Mean => msgs.iter().map(|m| m[c]).sum::<f64>() / msgs.len() as f64,
                Aggregation::Sum => msgs.iter().map(|m| m[c]).sum::<f64>(),
                Aggregation::Max => msgs.iter().map(|m| m[c]).fold(f64::NEG_INFINITY, f64::max),
            })
            .collect();
        out.extend(ref_mlp(store, g.upd_net(), &agg));
    }
    out
}

fn layer_cfg(f_in: usize, f_out: usize, hidden: usize, agg: Aggregation, activation: Activation, seed: u64) -> GridifierConfig {
    GridifierConfig {
        in_features: f_in,
        out_features: f_out,
        hidden,
        dim: 3,
        rff: Some(RffConfig {
            omega: 1.0,
            n_frequencies: 4,
            trainable: true,
            seed,
        }),
        aggregation: agg,
        activation,
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn message_passing_oracle() -> Outcome {
    const INSTANCES: u64 = 20;
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut r = rng(2000 + inst);
        let n = r.random_range(20..=80);
        let res = r.random_range(2..=4);
        let k = r.random_range(1..=4);
        let f = r.random_range(1..=3);
        let c = r.random_range(1..=4);
        let h = r.random_range(4..=8);
        let agg = if inst % 2 == 0 { Aggregation::Mean } else { Aggregation::Max };
        let activation = if inst % 3 == 0 { Activation::Relu } else { Activation::Gelu };
        let cloud = PointCloud::new(uniform_vec(&mut r, 3 * n, 1.0), uniform_vec(&mut r, n * f, 1.0), 3, f).unwrap();
        let spec = GridSpec::unit(res, 3).unwrap();
        let grid_coords = make_grid_coords(&spec).unwrap();
        let edges = bilateral_knn(cloud.coords(), &grid_coords, 3, k).unwrap();
        let mut store = ParamStore::new();
        let g = Gridifier::new(&mut store, &mut r, "g", &layer_cfg(f, c, h, agg, activation, inst)).unwrap();
        let d = Gridifier::new(&mut store, &mut r, "d", &layer_cfg(c, f, h, agg, activation, inst + 50)).unwrap();

        let grid = gridify(&cloud, &spec, &edges, &g, &store).unwrap();
        let want = ref_layer(&store, &g, cloud.feats(), cloud.coords(), &grid_coords, edges.edges(), spec.num_points());
        worst = worst.max(max_diff(grid.feats.data(), &want));
        let inv = invert_edges(&edges);
        let back = degridify(&grid, cloud.coords(), &inv, &d, &store).unwrap();
        let want = ref_layer(&store, &d, grid.feats.data(), &grid_coords, cloud.coords(), inv.edges(), n);
        worst = worst.max(max_diff(back.data(), &want));
    }
    Outcome {
        pass: worst <= ORACLE_TOL,
        detail: format!("{INSTANCES} instances, max |production - loops| = {worst:.2e} (tolerance {ORACLE_TOL:e})"),
    }
}

// ---- 3 ----

fn uniform(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vec(r, n, 1.0)).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Scalarizes an output with fixed random weights.
fn weighted(tape: &mut Tape, out: Var) -> Var {
    let n = tape.value(out).len();
    let w = uniform_vec(&mut rng(77 + n as u64), n, 1.0);
    let y = tape.mul_const(out, w).unwrap();
    tape.reduce_mean(y).unwrap()
}

type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

fn fd_inputs(inputs: &[Tensor], build: Build) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = build(&mut t, &v);
        let l = weighted(&mut t, o);
        t.value(l).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
    let o = build(&mut t, &vars);
    let l = weighted(&mut t, o);
    t.backward(l).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = t.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn fd_params(store: &ParamStore, build: &dyn Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let l = build(&mut t, s);
        t.value(l).data()[0]
    };
    let mut t = Tape::new();
    let l = build(&mut t, store);
    t.backward(l).unwrap();
    let grads = t.param_grads(store);
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        for i in 0..p.value.len() {
            let mut v = p.value.clone();
            v.data_mut()[i] += FD_STEP;
            probe.set(id, v.clone()).unwrap();
            let up = eval(&probe);
            v.data_mut()[i] -= 2.0 * FD_STEP;
            probe.set(id, v).unwrap();
            let down = eval(&probe);
            probe.set(id, p.value.clone()).unwrap();
            worst = worst.max(rel_err(grads[id.index()][i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(3000 + seed);
    let a = uniform(&mut r, &[4, 3]);
    let b = uniform(&mut r, &[4, 3]);
    let m = uniform(&mut r, &[3, 5]);
    let row = uniform(&mut r, &[3]);
    let mask = uniform_vec(&mut r, 12, 2.0);
    let pair = [a.clone(), b];
    let one = [a.clone()];
    let dst = vec![2, 0, 2, 1];
    let mut out: Vec<(&'static str, f64)> = vec![
        ("add", fd_inputs(&pair, &|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", fd_inputs(&pair, &|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", fd_inputs(&pair, &|t, v| t.mul(v[0], v[1]).unwrap())),
        ("scale", fd_inputs(&one, &|t, v| t.scale(v[0], -1.7))),
        ("mul_const", fd_inputs(&one, &|t, v| t.mul_const(v[0], mask.clone()).unwrap())),
        ("matmul", fd_inputs(&[a.clone(), m], &|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("add_bias", fd_inputs(&[a.clone(), row.clone()], &|t, v| t.add_bias(v[0], v[1]).unwrap())),
        ("mul_row", fd_inputs(&[a.clone(), row], &|t, v| t.mul_row(v[0], v[1]).unwrap())),
        ("concat", fd_inputs(&pair, &|t, v| t.concat(v[0], v[1]).unwrap())),
        ("sin", fd_inputs(&one, &|t, v| t.sin(v[0]))),
        ("cos", fd_inputs(&one, &|t, v| t.cos(v[0]))),
        ("sincos", fd_inputs(&one, &|t, v| t.sincos(v[0]).unwrap())),
        ("gelu", fd_inputs(&one, &|t, v| t.activation(v[0], Activation::Gelu))),
        ("relu", fd_inputs(&one, &|t, v| t.activation(v[0], Activation::Relu))),
        ("identity", fd_inputs(&one, &|t, v| t.activation(v[0], Activation::Identity))),
        ("reduce_mean", fd_inputs(&one, &|t, v| t.reduce_mean(v[0]).unwrap())),
        ("reduce_max", fd_inputs(&one, &|t, v| t.reduce_max(v[0]).unwrap())),
        ("gather_rows", fd_inputs(&one, &|t, v| t.gather_rows(v[0], vec![3, 0, 0, 1, 3]).unwrap())),
        ("slice_rows", fd_inputs(&one, &|t, v| t.slice_rows(v[0], 1, 3).unwrap())),
        ("reshape", fd_inputs(&one, &|t, v| t.reshape(v[0], &[2, 6]).unwrap())),
        ("layer_norm", fd_inputs(&one, &|t, v| t.layer_norm(v[0], 1e-5).unwrap())),
        ("log_softmax", fd_inputs(&one, &|t, v| t.log_softmax(v[0]).unwrap())),
        ("scatter_sum", fd_inputs(&one, &|t, v| t.scatter(v[0], dst.clone(), 3, Aggregation::Sum).unwrap())),
        ("scatter_mean", fd_inputs(&one, &|t, v| t.scatter(v[0], dst.clone(), 3, Aggregation::Mean).unwrap())),
        ("scatter_max", fd_inputs(&one, &|t, v| t.scatter(v[0], dst.clone(), 3, Aggregation::Max).unwrap())),
    ];
    let x = uniform(&mut r, &[5, 2]);
    let w = uniform(&mut r, &[5, 6]);
    out.push(("row_matvec", fd_inputs(&[x, w], &|t, v| t.row_matvec(v[0], v[1], 3).unwrap())));
    for dim in 1..=3 {
        let geom = ConvGeometry {
            batch: 2,
            resolution: 3,
            dim,
            kernel_size: 3,
            c_in: 2,
            c_out: 2,
        };
        let x = uniform(&mut r, &[2 * 3usize.pow(dim as u32), 2]);
        let k = uniform(&mut r, &[3usize.pow(dim as u32), 4]);
        out.push(("conv", fd_inputs(&[x, k], &|t, v| t.conv(v[0], v[1], geom).unwrap())));
    }
    out
}

fn pipeline_error(seed: u64) -> f64 {
    let mut r = rng(4000 + seed);
    let n = 12;
    let cloud = PointCloud::new(uniform_vec(&mut r, 3 * n, 1.0), uniform_vec(&mut r, n, 1.0), 3, 1).unwrap();
    let grid = make_grid_coords(&GridSpec::unit(2, 3).unwrap()).unwrap();
    let edges = bilateral_knn(cloud.coords(), &grid, 3, 2).unwrap();
    let down = MessageGraph::new(&edges, cloud.coords(), &grid, 3).unwrap();
    let up = MessageGraph::new(&invert_edges(&edges), &grid, cloud.coords(), 3).unwrap();
    let mut store = ParamStore::new();
    let g = Gridifier::new(&mut store, &mut r, "g", &layer_cfg(1, 2, 4, Aggregation::Mean, Activation::Gelu, seed)).unwrap();
    let d = Gridifier::new(&mut store, &mut r, "d", &layer_cfg(2, 1, 4, Aggregation::Mean, Activation::Gelu, seed + 9)).unwrap();
    let target = cloud.feat_tensor();
    fd_params(&store, &|t, s| {
        let x = t.constant(target.clone());
        let h = g.forward(t, s, x, &down).unwrap();
        let y = d.forward(t, s, h, &up).unwrap();
        let tv = t.constant(target.clone());
        let e = t.sub(y, tv).unwrap();
        let sq = t.mul(e, e).unwrap();
        t.reduce_mean(sq).unwrap()
    })
}

fn gradient_suite() -> Outcome {
    const PARAMETERIZATIONS: u64 = 10;
    let mut worst_op = ("", 0.0f64);
    let mut worst_pipeline = 0.0f64;
    let mut checks = 0;
    for seed in 0..PARAMETERIZATIONS {
        for (name, e) in op_errors(seed) {
            checks += 1;
            if e > worst_op.1 {
                worst_op = (name, e);
            }
        }
        worst_pipeline = worst_pipeline.max(pipeline_error(seed));
        checks += 1;
    }
    Outcome {
        pass: worst_op.1 < GRAD_TOL && worst_pipeline < GRAD_TOL,
        detail: format!(
            "{checks} checks over {PARAMETERIZATIONS} parameterizations; worst op {} {:.2e}, gridify->degridify->MSE {worst_pipeline:.2e} (tolerance {GRAD_TOL:e})",
            worst_op.0, worst_op.1
        ),
    }
}

// ---- 4 ----

fn grid_features(store: &ParamStore, g: &Gridifier, feats: &[f64], cloud: &[f64], grid: &[f64], k: usize) -> Vec<f64> {
    let edges = bilateral_knn(cloud, grid, 3, k).unwrap();
    let graph = MessageGraph::new(&edges, cloud, grid, 3).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(feats.len(), 1, feats.to_vec()).unwrap());
    let y = g.forward(&mut tape, store, x, &graph).unwrap();
    tape.value(y).data().to_vec()
}

fn invariance() -> Outcome {
    use rand::seq::SliceRandom;
    const TRIALS: u64 = 20;
    let (mut perm_ok, mut worst_shift) = (0, 0.0f64);
    for trial in 0..TRIALS {
        let mut r = rng(5000 + trial);
        let n = r.random_range(20..=120);
        let agg = if trial % 2 == 0 { Aggregation::Mean } else { Aggregation::Max };
        let mut store = ParamStore::new();
        let g = Gridifier::new(&mut store, &mut r, "g", &layer_cfg(1, 3, 6, agg, Activation::Gelu, trial)).unwrap();
        // dyadic coordinates and shifts keep every translated value exact,
        // so relative positions and neighbor ranks are unchanged
        let dyadic = |r: &mut Rng, n: usize, scale: i64, denom: f64| -> Vec<f64> {
            (0..n).map(|_| r.random_range(-scale..=scale) as f64 / denom).collect()
        };
        let cloud = dyadic(&mut r, 3 * n, 512, 512.0);
        let feats = uniform_vec(&mut r, n, 1.0);
        let grid = make_grid_coords(&GridSpec::unit(5, 3).unwrap()).unwrap();
        let base = grid_features(&store, &g, &feats, &cloud, &grid, 3);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let p_cloud: Vec<f64> = perm.iter().flat_map(|&i| cloud[3 * i..3 * i + 3].to_vec()).collect();
        let p_feats: Vec<f64> = perm.iter().map(|&i| feats[i]).collect();
        if grid_features(&store, &g, &p_feats, &p_cloud, &grid, 3) == base {
            perm_ok += 1;
        }

        let shift = dyadic(&mut r, 3, 16, 8.0);
        let moved = |c: &[f64]| -> Vec<f64> { c.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect() };
        let shifted = grid_features(&store, &g, &feats, &moved(&cloud), &moved(&grid), 3);
        worst_shift = worst_shift.max(max_diff(&shifted, &base));
    }
    Outcome {
        pass: perm_ok == TRIALS && worst_shift <= TRANSLATION_TOL,
        detail: format!(
            "bit-identical under permutation {perm_ok}/{TRIALS}; max change under translation {worst_shift:.2e} (tolerance {TRANSLATION_TOL:e})"
        ),
    }
}

// ---- 5 ----

fn reconstruction_trend() -> Outcome {
    let (mut channel_wins, mut resolution_wins) = (0, 0);
    let mut lines = Vec::new();
    for seed in 1..=3 {
        let cfg = ReconConfig {
            seed,
            ..ReconConfig::default()
        };
        let mse = |r, c| train_recon_single(&cfg, r, c).unwrap().row.val_mse;
        let (c4, c16) = (mse(6, 4), mse(6, 16));
        let (r4, r8) = (mse(4, 8), mse(8, 8));
        channel_wins += usize::from(c16 < c4);
        resolution_wins += usize::from(r8 <= r4);
        lines.push(format!("seed {seed}: r6 c4 {c4:.4} c16 {c16:.4}; c8 r4 {r4:.4} r8 {r8:.4}"));
    }
    Outcome {
        pass: channel_wins >= 2 && resolution_wins >= 2,
        detail: format!(
            "MSE(c16) < MSE(c4) in {channel_wins}/3, MSE(r8) <= MSE(r4) in {resolution_wins}/3 ({})",
            lines.join("; ")
        ),
    }
}

// ---- 6 ----

fn kernel_reuse() -> Outcome {
    let cfg = BenchConfig::default();
    let report = bench_scaling(&cfg).unwrap();
    let taps = cfg.kernel_size.pow(3) as u64;
    let native_exact = report
        .rows
        .iter()
        .filter(|r| r.path == BenchPath::Native)
        .all(|r| r.pos_evals == (r.n * cfg.k) as u64);
    let grid_constant = report.rows.iter().filter(|r| r.path == BenchPath::Grid).all(|r| r.pos_evals == taps);
    let c = cfg.channels[0];
    let (gs, ns) = (report.slope(BenchPath::Grid, c).unwrap(), report.slope(BenchPath::Native, c).unwrap());
    let times: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{} N={} {:.1} ms", r.path.as_str(), r.n, r.time_ms_median))
        .collect();
    Outcome {
        pass: native_exact && grid_constant && gs < ns,
        detail: format!(
            "native evals = N*k: {native_exact}; grid evals = {taps} for every N: {grid_constant}; log-log slope grid {gs:.3} < native {ns:.3}: {} ({})",
            gs < ns,
            times.join(", ")
        ),
    }
}

// ---- 7 ----

fn requirement_layer(store: &mut ParamStore, features: usize, node_hidden: usize) -> Gridifier {
    let mut r = rng(7);
    let h = 16;
    let act = Activation::Gelu;
    let rff = RffConfig::default();
    let node = Mlp::new(store, &mut r, "node", &[features, node_hidden, h], act).unwrap();
    let pos = PositionalNet::new(store, &mut r, "pos", 3, Some(rff), &[h, h], act).unwrap();
    let msg = Mlp::new(store, &mut r, "msg", &[2 * h, h, h], act).unwrap();
    let upd = Mlp::new(store, &mut r, "upd", &[h, h, features], act).unwrap();
    Gridifier::from_parts(node, pos, msg, upd, Aggregation::Mean).unwrap()
}

fn violated(meta: CloudMeta, res: usize, node_hidden: usize) -> Vec<Requirement> {
    let mut store = ParamStore::new();
    let layer = requirement_layer(&mut store, meta.features, node_hidden);
    let spec = GridSpec::unit(res, 3).unwrap();
    let cloud = uniform_vec(&mut rng(8), 3 * meta.points, 1.0);
    let edges = bilateral_knn(&cloud, &make_grid_coords(&spec).unwrap(), 3, 9).unwrap();
    check_requirements(&meta, &spec, &layer, 9, Some(&edges)).into_iter().map(|v| v.requirement).collect()
}

fn requirement_checker() -> Outcome {
    let meta = |points, features| CloudMeta { points, dim: 3, features };
    let cases = [
        ("N_P=1000 on 9^3", violated(meta(1000, 1), 9, 16), vec![Requirement::GridSize]),
        ("N_P=1000 on 10^3", violated(meta(1000, 1), 10, 16), vec![]),
        ("node width F_P-1", violated(meta(100, 4), 10, 3), vec![Requirement::NodeWidth]),
    ];
    let ok = cases.iter().filter(|(_, got, want)| got == want).count();
    let detail: Vec<String> = cases
        .iter()
        .map(|(name, got, _)| format!("{name}: {:?}", got.iter().map(|r| r.label()).collect::<Vec<_>>()))
        .collect();
    Outcome {
        pass: ok == cases.len(),
        detail: format!("{ok}/3 scenarios exact ({})", detail.join("; ")),
    }
}

// ---- 8 ----

fn persistence() -> Outcome {
    let recon = ReconConfig {
        n_train: 8,
        n_val: 4,
        n_points: 64,
        train: TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            lr: 0.01,
            weight_decay: 0.01,
            batch_size: 2,
        },
        ..ReconConfig::default()
    };
    let recon_bytes = || {
        let o = train_recon_single(&recon, 4, 4).unwrap();
        Checkpoint::new(o.store, Some(o.optimizer)).to_bytes().unwrap()
    };
    let classify = ClassifyConfig {
        n_train: 8,
        n_val: 4,
        n_points: 48,
        resolution: 3,
        channels: 4,
        train: TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            lr: 0.005,
            weight_decay: 0.0,
            batch_size: 4,
        },
        ..ClassifyConfig::default()
    };
    let classify_bytes = || {
        let o = train_classify_synth(&classify).unwrap();
        Checkpoint::new(o.store, Some(o.optimizer)).to_bytes().unwrap()
    };
    let a = recon_bytes();
    let same_recon = a == recon_bytes();
    let same_classify = classify_bytes() == classify_bytes();

    let ckpt = Checkpoint::from_bytes(&a).unwrap();
    let ckpt_exact = ckpt.to_bytes().unwrap() == a;

    // f32-representable values survive the 32-bit format bit for bit
    let cloud = gen_random_cloud(500, 8).unwrap();
    let narrow = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
    let cloud = PointCloud::new(narrow(cloud.coords()), narrow(cloud.feats()), 3, 1).unwrap();
    let mut buf = Vec::new();
    write_pcb(&cloud, &mut buf).unwrap();
    let pcb_exact = read_pcb(&mut buf.as_slice()).unwrap() == cloud;

    Outcome {
        pass: same_recon && same_classify && ckpt_exact && pcb_exact,
        detail: format!(
            "same-seed checkpoints identical: reconstruction {same_recon}, classification {same_classify}; checkpoint round trip exact {ckpt_exact} ({} bytes); pcb round trip exact {pcb_exact}",
            a.len()
        ),
    }
}

// ---- 9 ----

fn classification() -> Outcome {
    let cfg = ClassifyConfig::default();
    let clean = train_classify_synth(&cfg).unwrap().val_accuracy;
    let shuffled = train_classify_synth(&ClassifyConfig {
        shuffle_labels: true,
        ..cfg.clone()
    })
    .unwrap()
    .val_accuracy;
    let in_band = (CHANCE_BAND.0..=CHANCE_BAND.1).contains(&shuffled);
    Outcome {
        pass: clean >= MIN_ACCURACY && in_band,
        detail: format!(
            "{} blocks, {} epochs: accuracy {clean:.3} (need >= {MIN_ACCURACY}); shuffled labels {shuffled:.3} (need {}..{})",
            cfg.blocks, cfg.train.epochs, CHANCE_BAND.0, CHANCE_BAND.1
        ),
    }
}
