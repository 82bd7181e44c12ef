//! BPR training of the input embeddings through an encoder.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::filter::{FilterConfig, FilterTrace};
use crate::graph::{IncidenceOperator, InteractionGraph};

pub const INIT_STD: f64 = 0.1;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of `‖E_in‖²_F`.
    pub l2_alpha: f64,
    pub epochs: usize,
    pub seed: u64,
    pub filter: FilterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            learning_rate: 0.01,
            batch_size: 1024,
            l2_alpha: 1e-5,
            epochs: 100,
            seed: 2022,
            filter: FilterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        // lr = 0 is allowed for frozen-parameter diagnostics
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                reason: format!("{} is not a finite nonnegative number", self.learning_rate),
            });
        }
        if !(self.l2_alpha >= 0.0 && self.l2_alpha.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "l2_alpha",
                reason: format!("{} is not a finite nonnegative number", self.l2_alpha),
            });
        }
        self.filter.validate()
    }
}

/// Trainable embeddings plus optimizer and sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u64,
    /// `E_in`, `(n + m) x d`.
    pub embeddings: Array2<f64>,
    pub first_moment: Array2<f64>,
    pub second_moment: Array2<f64>,
    /// Adam steps taken.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl ModelState {
    pub fn new(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Self {
        let embeddings = init_embeddings(num_users, num_items, dim, seed);
        let shape = embeddings.raw_dim();
        // the sampler stream is separate from the initialization stream
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            num_users,
            num_items,
            seed,
            epoch: 0,
            embeddings,
            first_moment: Array2::zeros(shape),
            second_moment: Array2::zeros(shape),
            step: 0,
            rng,
        }
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

/// I.i.d. `N(0, 0.1²)` entries, deterministic in `seed`.
pub fn init_embeddings(num_users: usize, num_items: usize, dim: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Array2::from_shape_simple_fn((num_users + num_items, dim), || normal.sample(&mut rng))
}

/// `(user, positive item, negative item)` triples.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TripleBatch {
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripleBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// Draws positives uniformly from the edge set and, for each, a negative
/// uniformly from the items the user has not interacted with.
pub fn sample_triples<R: Rng + ?Sized>(
    graph: &InteractionGraph,
    batch_size: usize,
    rng: &mut R,
) -> Result<TripleBatch> {
    let m = graph.num_items();
    let edges = graph.edges();
    let user_deg = graph.user_degree();
    if !edges.iter().any(|&(u, _)| user_deg[u] < m) {
        return Err(Error::SaturatedUsers);
    }
    let mut triples = Vec::with_capacity(batch_size);
    while triples.len() < batch_size {
        let (u, i) = edges[rng.random_range(0..edges.len())];
        if user_deg[u] == m {
            continue;
        }
        let j = loop {
            let j = rng.random_range(0..m);
            if !graph.has_edge(u, j) {
                break j;
            }
        };
        triples.push((u, i, j));
    }
    Ok(TripleBatch { triples })
}

/// `−ln σ(x)` without overflow.
#[inline]
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch mean of `−ln σ(pos − neg)` plus `α‖E_in‖²_F`.
pub fn bpr_loss(pos_scores: &[f64], neg_scores: &[f64], e_in: ArrayView2<f64>, alpha: f64) -> Result<f64> {
    if pos_scores.len() != neg_scores.len() {
        return Err(Error::dim("bpr scores", pos_scores.len(), neg_scores.len()));
    }
    let data = if pos_scores.is_empty() {
        0.0
    } else {
        pos_scores
            .iter()
            .zip(neg_scores)
            .map(|(p, n)| neg_log_sigmoid(p - n))
            .sum::<f64>()
            / pos_scores.len() as f64
    };
    Ok(data + alpha * frobenius_sq(e_in))
}

fn frobenius_sq(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Vector-Jacobian product of the filter output with respect to `E_in`.
///
/// Walks the recorded iterations backwards, passing the dual adjoint through
/// the clip masks and the two sparse products, and accumulates every place
/// where `E_in` enters the recursion.
pub fn backward_gtcf(trace: &FilterTrace, op: &IncidenceOperator, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
    let masks = trace.masks.as_ref().ok_or(Error::MissingMasks)?;
    let cfg = &trace.config;
    let layers = cfg.num_layers;
    if masks.len() != layers {
        return Err(Error::TraceMismatch {
            expected: layers,
            actual: masks.len(),
        });
    }
    if grad_out.nrows() != op.num_nodes() {
        return Err(Error::dim("filter gradient rows", op.num_nodes(), grad_out.nrows()));
    }
    if layers == 0 {
        return Ok(grad_out.to_owned());
    }
    let (gamma, beta) = (cfg.gamma, cfg.beta);
    let unit_step = gamma == 1.0;
    let dim = grad_out.ncols();

    let mut grad_in = Array2::<f64>::zeros(grad_out.raw_dim());
    // adjoint of E^{k+1}; stays zero below the top layer when γ = 1
    let mut grad_e = grad_out.to_owned();
    let mut grad_e_live = true;
    // adjoint of Y^{k+1}
    let mut grad_y = Array2::<f64>::zeros((op.num_edges(), dim));
    let mut edge_buf = Array2::<f64>::zeros((op.num_edges(), dim));
    let mut node_buf = Array2::<f64>::zeros(grad_out.raw_dim());

    for k in (0..layers).rev() {
        // E^{k+1} = (1 − γ)E^k + γE_in − γΔ̃ᵀY^{k+1}
        if grad_e_live {
            grad_in.scaled_add(gamma, &grad_e);
            op.forward_into(grad_e.view(), &mut edge_buf);
            grad_y.scaled_add(-gamma, &edge_buf);
            if unit_step {
                grad_e_live = false;
            } else {
                grad_e *= 1.0 - gamma;
            }
        }
        // Y^{k+1} = clip(Ȳ^{k+1}); Ȳ^{k+1} = Y^k + βΔ̃Ē^{k+1}
        Zip::from(&mut grad_y).and(&masks[k]).for_each(|g, &pass| {
            if !pass {
                *g = 0.0;
            }
        });
        op.transpose_into(grad_y.view(), &mut node_buf);
        node_buf *= beta;
        // Ē^{k+1} = (1 − γ)E^k + γE_in − γΔ̃ᵀY^k
        grad_in.scaled_add(gamma, &node_buf);
        if k > 0 {
            op.forward_into(node_buf.view(), &mut edge_buf);
            grad_y.scaled_add(-gamma, &edge_buf);
        }
        if !unit_step {
            grad_e.scaled_add(1.0 - gamma, &node_buf);
        }
    }
    // E^0 = E_in
    if grad_e_live {
        grad_in += &grad_e;
    }
    Ok(grad_in)
}

/// One Adam update with bias correction.
pub fn adam_step(state: &mut ModelState, grads: ArrayView2<f64>, lr: f64) -> Result<()> {
    if grads.dim() != state.embeddings.dim() {
        return Err(Error::dim(
            "adam gradient",
            format!("{:?}", state.embeddings.dim()),
            format!("{:?}", grads.dim()),
        ));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    Zip::from(&mut state.embeddings)
        .and(&mut state.first_moment)
        .and(&mut state.second_moment)
        .and(&grads)
        .for_each(|w, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
    Ok(())
}

/// Scores of the triples on final embeddings: `(positive, negative)` inner products.
pub fn triple_scores(final_emb: ArrayView2<f64>, num_users: usize, batch: &TripleBatch) -> (Vec<f64>, Vec<f64>) {
    batch
        .triples
        .iter()
        .map(|&(u, i, j)| {
            let eu = final_emb.row(u);
            (
                eu.dot(&final_emb.row(num_users + i)),
                eu.dot(&final_emb.row(num_users + j)),
            )
        })
        .unzip()
}

/// Loss and gradient of the full training objective with respect to `E_in`.
pub fn loss_and_gradient(
    e_in: ArrayView2<f64>,
    encoder: &Encoder,
    num_users: usize,
    batch: &TripleBatch,
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    let (final_emb, tape) = encoder.encode_with_tape(e_in)?;
    let (pos, neg) = triple_scores(final_emb.view(), num_users, batch);
    let loss = bpr_loss(&pos, &neg, e_in, alpha)?;

    let mut grad_final = Array2::<f64>::zeros(final_emb.raw_dim());
    let scale = 1.0 / batch.len().max(1) as f64;
    for (t, &(u, i, j)) in batch.triples.iter().enumerate() {
        // d/dx of −ln σ(x) is −σ(−x)
        let coef = -sigmoid(neg[t] - pos[t]) * scale;
        let (iu, ii, ij) = (u, num_users + i, num_users + j);
        for c in 0..final_emb.ncols() {
            let (eu, ei, ej) = (final_emb[[iu, c]], final_emb[[ii, c]], final_emb[[ij, c]]);
            grad_final[[iu, c]] += coef * (ei - ej);
            grad_final[[ii, c]] += coef * eu;
            grad_final[[ij, c]] -= coef * eu;
        }
    }
    let mut grad = encoder.backward(&tape, grad_final.view())?;
    if alpha != 0.0 {
        grad.scaled_add(2.0 * alpha, &e_in);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub batches: usize,
    /// Mean full loss (BPR + regularizer) over the epoch's batches.
    pub mean_loss: f64,
    /// Mean BPR term alone.
    pub mean_bpr: f64,
    pub wall_secs: f64,
}

/// Runs `⌈|E| / batch_size⌉` sampled mini-batch updates.
pub fn train_epoch(
    state: &mut ModelState,
    graph: &InteractionGraph,
    encoder: &Encoder,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    cfg.validate()?;
    if state.embeddings.nrows() != graph.num_nodes() || encoder.num_nodes() != graph.num_nodes() {
        return Err(Error::dim(
            "model rows",
            graph.num_nodes(),
            format!("{} / {}", state.embeddings.nrows(), encoder.num_nodes()),
        ));
    }
    let start = Instant::now();
    let batches = graph.num_edges().div_ceil(cfg.batch_size);
    let mut loss_sum = 0.0;
    let mut bpr_sum = 0.0;
    for _ in 0..batches {
        let batch = sample_triples(graph, cfg.batch_size, &mut state.rng)?;
        let (loss, grad) = loss_and_gradient(
            state.embeddings.view(),
            encoder,
            graph.num_users(),
            &batch,
            cfg.l2_alpha,
        )?;
        loss_sum += loss;
        bpr_sum += loss - cfg.l2_alpha * frobenius_sq(state.embeddings.view());
        adam_step(state, grad.view(), cfg.learning_rate)?;
    }
    state.epoch += 1;
    Ok(EpochStats {
        epoch: state.epoch,
        batches,
        mean_loss: loss_sum / batches as f64,
        mean_bpr: bpr_sum / batches as f64,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// Mean BPR term of `state` on a fixed batch, without updating anything.
pub fn evaluate_bpr(state: &ModelState, encoder: &Encoder, batch: &TripleBatch) -> Result<f64> {
    let final_emb = encoder.encode(state.embeddings.view())?;
    let (pos, neg) = triple_scores(final_emb.view(), state.num_users, batch);
    bpr_loss(&pos, &neg, state.embeddings.view(), 0.0)
}
