//! Reference implementations and fixtures shared by the integration tests.
//!
//! The oracles never call the operators under test; they work from the raw
//! edge list with dense or per-edge arithmetic.

#![allow(dead_code)]

use gtn::encoder::{Backend, Encoder, Tape};
use gtn::eval::GroundTruth;
use gtn::filter::{gtcf_filter, Combine, FilterConfig};
use gtn::graph::{IncidenceOperator, InteractionGraph};
use gtn::training::{loss_and_gradient, sample_triples, TripleBatch};
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random bipartite graph with at most `max_nodes` nodes and at least one edge.
pub fn random_graph<R: Rng>(rng: &mut R, max_nodes: usize) -> InteractionGraph {
    loop {
        let n = rng.random_range(1..max_nodes);
        let m = rng.random_range(1..=(max_nodes - n));
        let p: f64 = rng.random_range(0.15..0.8);
        let mut pairs = Vec::new();
        for u in 0..n {
            for i in 0..m {
                if rng.random_bool(p) {
                    pairs.push((u, i));
                }
            }
        }
        if !pairs.is_empty() {
            return InteractionGraph::new(&pairs, n, m).unwrap();
        }
    }
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn degrees(edges: &[(usize, usize)], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut du = vec![0.0; n];
    let mut di = vec![0.0; m];
    for &(u, i) in edges {
        du[u] += 1.0;
        di[i] += 1.0;
    }
    (du, di)
}

/// Dense `|E| x (n+m)` normalized incidence matrix, rows in `edges` order.
pub fn dense_incidence(edges: &[(usize, usize)], n: usize, m: usize) -> Array2<f64> {
    let (du, di) = degrees(edges, n, m);
    let mut d = Array2::zeros((edges.len(), n + m));
    for (e, &(u, i)) in edges.iter().enumerate() {
        d[[e, u]] = -1.0 / (du[u] + 1.0).sqrt();
        d[[e, n + i]] = 1.0 / (di[i] + 1.0).sqrt();
    }
    d
}

/// Dense `D^{-1/2}(A + I)D^{-1/2}` with self-loop-augmented degrees.
pub fn dense_propagation(edges: &[(usize, usize)], n: usize, m: usize) -> Array2<f64> {
    let (du, di) = degrees(edges, n, m);
    let deg: Vec<f64> = du.iter().chain(di.iter()).map(|d| d + 1.0).collect();
    let mut a = Array2::zeros((n + m, n + m));
    for v in 0..n + m {
        a[[v, v]] = 1.0 / deg[v];
    }
    for &(u, i) in edges {
        let w = 1.0 / (deg[u] * deg[n + i]).sqrt();
        a[[u, n + i]] = w;
        a[[n + i, u]] = w;
    }
    a
}

pub fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for r in 0..a.nrows() {
        for k in 0..a.ncols() {
            let x = a[[r, k]];
            if x != 0.0 {
                for c in 0..b.ncols() {
                    out[[r, c]] += x * b[[k, c]];
                }
            }
        }
    }
    out
}

/// Largest eigenvalue of `D Dᵀ` by power iteration on the dense matrix.
pub fn dense_gram_norm(d: &Array2<f64>, iterations: usize) -> f64 {
    let gram = matmul(d.view(), d.t());
    let mut v = Array2::from_elem((gram.nrows(), 1), 1.0);
    let mut est = 0.0;
    for _ in 0..iterations {
        let w = matmul(gram.view(), v.view());
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w / norm;
    }
    est
}

/// `½‖E − E_in‖² + λ‖DE‖₁` evaluated densely.
pub fn dense_objective(d: &Array2<f64>, e: ArrayView2<f64>, e_in: ArrayView2<f64>, lambda: f64) -> f64 {
    let fid: f64 = e.iter().zip(e_in.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let tv: f64 = matmul(d.view(), e).iter().map(|x| x.abs()).sum();
    0.5 * fid + lambda * tv
}

/// Reference minimum of the trend-filtering objective.
///
/// Projected gradient on the box-constrained dual
/// `min_{|Y| ≤ λ} ½‖E_in − DᵀY‖²`, with primal recovery `E = E_in − DᵀY`.
/// Stops once the duality gap certifies `tol`; returns the best primal value
/// seen and the final gap.
pub fn trend_filter_oracle(
    edges: &[(usize, usize)],
    n: usize,
    m: usize,
    e_in: ArrayView2<f64>,
    lambda: f64,
    max_steps: usize,
    tol: f64,
) -> (f64, f64) {
    let (du, di) = degrees(edges, n, m);
    let coef: Vec<(usize, usize, f64, f64)> = edges
        .iter()
        .map(|&(u, i)| (u, n + i, -1.0 / (du[u] + 1.0).sqrt(), 1.0 / (di[i] + 1.0).sqrt()))
        .collect();
    let step = 1.0 / dense_gram_norm(&dense_incidence(edges, n, m), 300).max(1e-12) / 1.01;
    let d = e_in.ncols();
    let mut y = Array2::<f64>::zeros((edges.len(), d));
    let mut e = e_in.to_owned();
    let base: f64 = e_in.iter().map(|x| x * x).sum();
    let mut best = f64::INFINITY;
    let mut gap = f64::INFINITY;
    for s in 0..=max_steps {
        // e = E_in − Dᵀy
        e.assign(&e_in);
        for (row, &(a, b, ca, cb)) in coef.iter().enumerate() {
            for c in 0..d {
                e[[a, c]] -= ca * y[[row, c]];
                e[[b, c]] -= cb * y[[row, c]];
            }
        }
        let check = s % 50 == 0 || s == max_steps;
        let mut tv = 0.0;
        for (row, &(a, b, ca, cb)) in coef.iter().enumerate() {
            for c in 0..d {
                let g = ca * e[[a, c]] + cb * e[[b, c]];
                tv += g.abs();
                y[[row, c]] = (y[[row, c]] + step * g).clamp(-lambda, lambda);
            }
        }
        if check {
            let fid: f64 = e.iter().zip(e_in.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let primal = 0.5 * fid + lambda * tv;
            let dual = 0.5 * base - 0.5 * e.iter().map(|x| x * x).sum::<f64>();
            best = best.min(primal);
            gap = best - dual;
            if gap < tol {
                break;
            }
        }
    }
    (best, gap)
}

/// Brute-force Recall@K and NDCG@K for one user from a full score vector.
pub fn brute_metrics(scores: &[f64], train: &[usize], test: &[usize], k: usize) -> (f64, f64) {
    let mut order: Vec<usize> = (0..scores.len()).filter(|i| !train.contains(i)).collect();
    // stable sort keeps ascending item index among ties
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order.truncate(k);
    let mut hits = 0usize;
    let mut dcg = 0.0;
    for (pos, item) in order.iter().enumerate() {
        if test.contains(item) {
            hits += 1;
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let ideal: f64 = (0..test.len().min(k)).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    (hits as f64 / test.len() as f64, dcg / ideal)
}

/// Least-squares fit `y = a + b x`; returns `(a, b, R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    (a, b, 1.0 - ss_res / ss_tot)
}

pub const FD_STEP: f64 = 1e-6;

pub struct Instance {
    pub graph: InteractionGraph,
    pub encoder: Encoder,
    pub e_in: Array2<f64>,
    pub batch: TripleBatch,
    pub alpha: f64,
}

pub fn gradient_instance<R: Rng>(rng: &mut R, backend: Backend) -> Instance {
    loop {
        let graph = random_graph(rng, 12);
        let Ok(batch) = sample_triples(&graph, 8, rng) else {
            continue;
        };
        let filter = FilterConfig {
            lambda: rng.random_range(0.05..1.0),
            num_layers: rng.random_range(1..5),
            gamma: [1.0, 1.0, 0.8, 0.5][rng.random_range(0..4)],
            beta: rng.random_range(0.2..0.6),
            record_trace: false,
        };
        let encoder = Encoder::new(backend, &graph, &filter, Combine::Mean);
        let dim = rng.random_range(1..4);
        let e_in = gaussian(rng, graph.num_nodes(), dim, 0.7);
        let alpha = [0.0, 1e-3][rng.random_range(0..2)];
        return Instance {
            graph,
            encoder,
            e_in,
            batch,
            alpha,
        };
    }
}

/// Smallest distance of any pre-clip dual entry to `±λ`.
pub fn clip_margin(inst: &Instance) -> f64 {
    match inst.encoder.encode_with_tape(inst.e_in.view()).unwrap().1 {
        Tape::Gtn(trace) => {
            let lambda = trace.config.lambda;
            let op = IncidenceOperator::new(&inst.graph);
            let traced = FilterConfig {
                record_trace: true,
                ..trace.config
            };
            gtcf_filter(inst.e_in.view(), &op, &traced)
                .unwrap()
                .iterations
                .iter()
                .flat_map(|r| r.dual_pre_clip.iter().map(move |y| (y.abs() - lambda).abs()))
                .fold(f64::INFINITY, f64::min)
        }
        Tape::Laplacian => f64::INFINITY,
    }
}

/// Relative error between the analytic and central-difference gradients.
pub fn gradient_error(inst: &Instance) -> f64 {
    let n = inst.graph.num_users();
    let loss = |e: &Array2<f64>| {
        loss_and_gradient(e.view(), &inst.encoder, n, &inst.batch, inst.alpha)
            .unwrap()
            .0
    };
    let (_, grad) = loss_and_gradient(inst.e_in.view(), &inst.encoder, n, &inst.batch, inst.alpha).unwrap();
    let mut numeric = Array2::<f64>::zeros(grad.raw_dim());
    let mut probe = inst.e_in.clone();
    for idx in 0..probe.len() {
        let (r, c) = (idx / probe.ncols(), idx % probe.ncols());
        let x = probe[[r, c]];
        probe[[r, c]] = x + FD_STEP;
        let up = loss(&probe);
        probe[[r, c]] = x - FD_STEP;
        let down = loss(&probe);
        probe[[r, c]] = x;
        numeric[[r, c]] = (up - down) / (2.0 * FD_STEP);
    }
    let diff = (&grad - &numeric).iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = grad
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt())
        .max(1e-8);
    diff / scale
}

pub struct Case {
    pub emb: Array2<f64>,
    pub num_users: usize,
    pub num_items: usize,
    pub truth: GroundTruth,
}

pub fn random_case<R: Rng>(rng: &mut R) -> Case {
    let num_users = rng.random_range(1..12);
    let num_items = rng.random_range(2..40);
    let d = rng.random_range(1..5);
    // coarse integer embeddings produce plenty of tied scores
    let coarse = rng.random_bool(0.5);
    let emb = Array2::from_shape_fn((num_users + num_items, d), |_| {
        if coarse {
            rng.random_range(-2..=2) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    let mut test = Vec::new();
    let mut train = Vec::new();
    for _ in 0..num_users {
        let mut items: Vec<usize> = (0..num_items).collect();
        items.shuffle(rng);
        let n_train = rng.random_range(0..num_items);
        let n_test = rng.random_range(0..=(num_items - n_train));
        train.push(items[..n_train].to_vec());
        test.push(items[n_train..n_train + n_test].to_vec());
    }
    Case {
        emb,
        num_users,
        num_items,
        truth: GroundTruth::new(test, train).unwrap(),
    }
}

pub fn brute_force(case: &Case, k: usize) -> (f64, f64) {
    let users = case.truth.eval_users();
    let (mut recall, mut ndcg) = (0.0, 0.0);
    for &u in &users {
        let scores: Vec<f64> = (0..case.num_items)
            .map(|i| {
                let a = case.emb.row(u);
                let b = case.emb.row(case.num_users + i);
                a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
            })
            .collect();
        let (r, n) = brute_metrics(&scores, case.truth.train_items(u), case.truth.test_items(u), k);
        recall += r;
        ndcg += n;
    }
    if users.is_empty() {
        (0.0, 0.0)
    } else {
        (recall / users.len() as f64, ndcg / users.len() as f64)
    }
}

/// Training settings for the directional comparisons on the default synthetic data.
///
/// Large enough embeddings that the 0.2 sparsity threshold discriminates, and a
/// λ at which the clip is active on the learned differences.
pub fn directional_settings(seed: u64) -> gtn::experiments::ModelSettings {
    let mut settings = gtn::experiments::ModelSettings::default();
    settings.train.epochs = 30;
    settings.train.learning_rate = 0.05;
    settings.train.l2_alpha = 0.0;
    settings.train.seed = seed;
    settings.train.filter.lambda = 1.0;
    settings
}
