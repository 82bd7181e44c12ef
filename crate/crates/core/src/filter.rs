//! Graph trend filtering of embeddings.
//!
//! Solves `min_E ½‖E − E_in‖²_F + λ‖Δ̃E‖₁` with the proximal alternating
//! predictor-corrector iteration. With the default stepsizes `γ = 1`,
//! `β = ½` one iteration reads
//!
//! ```text
//! Ē ← E_in − Δ̃ᵀY
//! Ȳ ← Y + ½ Δ̃Ē
//! Y ← clip(Ȳ, λ)
//! ```
//!
//! and the filtered embeddings are `E_in − Δ̃ᵀY`. The dual starts at zero.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::graph::{IncidenceOperator, PropagationOperator};

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterConfig {
    /// Smoothness strength.
    pub lambda: f64,
    /// Number of iterations, also called layers.
    pub num_layers: usize,
    /// Primal stepsize; convergence needs `0 < gamma < 2`.
    pub gamma: f64,
    /// Dual stepsize; convergence needs `beta <= 1 / (gamma ‖Δ̃Δ̃ᵀ‖₂)`.
    pub beta: f64,
    /// Keep per-iteration iterates and objective values.
    pub record_trace: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            num_layers: 3,
            gamma: 1.0,
            beta: 0.5,
            record_trace: false,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold("lambda", self.lambda)?;
        if !(self.gamma > 0.0 && self.gamma < 2.0) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                reason: format!("{} is outside (0, 2)", self.gamma),
            });
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("{} is not positive", self.beta),
            });
        }
        Ok(())
    }

    /// Whether the stepsizes satisfy the convergence condition for this operator.
    pub fn stepsizes_converge(&self, op: &IncidenceOperator) -> bool {
        let norm = op.gram_norm_estimate(200);
        self.gamma < 2.0 && self.beta * self.gamma * norm <= 1.0 + 1e-9
    }
}

fn check_threshold(name: &'static str, value: f64) -> Result<()> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: format!("{value} must be a finite nonnegative number"),
        })
    }
}

/// One recorded solver iteration.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    /// Primal prediction `Ē^{k+1}`.
    pub primal_prediction: Array2<f64>,
    /// Dual before clipping, `Ȳ^{k+1}`.
    pub dual_pre_clip: Array2<f64>,
}

/// Result of a filter run.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    /// Filtered embeddings `E^K`.
    pub output: Array2<f64>,
    /// Final dual `Y^K`, `|E| x d`.
    pub dual: Array2<f64>,
    /// Per-iteration pass-through masks of the clip, `|Ȳ| <= λ`.
    pub masks: Option<Vec<Array2<bool>>>,
    /// Objective at `E^0 ..= E^K` when tracing is on.
    pub objectives: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
    pub config: FilterConfig,
}

impl FilterTrace {
    pub fn num_iterations(&self) -> usize {
        self.config.num_layers
    }

    /// Writes `iteration,objective` rows.
    pub fn write_convergence_csv(&self, path: &Path) -> Result<()> {
        write_series_csv(path, &self.objectives)
    }
}

pub(crate) fn write_series_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::from("iteration,objective\n");
    for (k, v) in values.iter().enumerate() {
        out.push_str(&format!("{k},{v:.17e}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[inline]
fn clip(x: f64, lambda: f64) -> f64 {
    x.clamp(-lambda, lambda)
}

#[inline]
fn shrink(x: f64, tau: f64) -> f64 {
    x.signum() * (x.abs() - tau).max(0.0)
}

/// Elementwise `sign(x) min(|x|, λ)`, the prox of the conjugate of `λ‖·‖₁`.
pub fn clip_prox(x: ArrayView2<f64>, lambda: f64) -> Result<Array2<f64>> {
    check_threshold("lambda", lambda)?;
    Ok(x.mapv(|v| clip(v, lambda)))
}

/// Elementwise `sign(x) max(|x| − τ, 0)`.
pub fn soft_threshold(x: ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
    check_threshold("tau", tau)?;
    Ok(x.mapv(|v| shrink(v, tau)))
}

/// `½‖E − E_in‖²_F + λ‖Δ̃E‖₁`.
pub fn gtf_objective(e: ArrayView2<f64>, e_in: ArrayView2<f64>, op: &IncidenceOperator, lambda: f64) -> Result<f64> {
    if e.dim() != e_in.dim() {
        return Err(Error::dim(
            "objective",
            format!("{:?}", e_in.dim()),
            format!("{:?}", e.dim()),
        ));
    }
    let diffs = op.forward(e)?;
    Ok(objective_parts(e, e_in, diffs.view(), lambda))
}

fn objective_parts(e: ArrayView2<f64>, e_in: ArrayView2<f64>, diffs: ArrayView2<f64>, lambda: f64) -> f64 {
    let fidelity = Zip::from(&e)
        .and(&e_in)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    let l1: f64 = diffs.iter().map(|x| x.abs()).sum();
    0.5 * fidelity + if lambda == 0.0 { 0.0 } else { lambda * l1 }
}

/// Runs the filter and records the clip masks needed for backpropagation.
pub fn gtcf_filter(e_in: ArrayView2<f64>, op: &IncidenceOperator, cfg: &FilterConfig) -> Result<FilterTrace> {
    run_filter(e_in, op, cfg, true)
}

/// Runs the filter for inference only; the returned trace carries no masks.
pub fn gtcf_inference(e_in: ArrayView2<f64>, op: &IncidenceOperator, cfg: &FilterConfig) -> Result<FilterTrace> {
    run_filter(e_in, op, cfg, false)
}

fn run_filter(
    e_in: ArrayView2<f64>,
    op: &IncidenceOperator,
    cfg: &FilterConfig,
    keep_masks: bool,
) -> Result<FilterTrace> {
    cfg.validate()?;
    if e_in.nrows() != op.num_nodes() {
        return Err(Error::dim("filter input rows", op.num_nodes(), e_in.nrows()));
    }
    let (lambda, gamma, beta) = (cfg.lambda, cfg.gamma, cfg.beta);
    let unit_step = gamma == 1.0;
    let dim = e_in.ncols();
    let nodes = op.num_nodes();

    let mut dual = Array2::<f64>::zeros((op.num_edges(), dim));
    let mut back = Array2::<f64>::zeros((nodes, dim));
    let mut diffs = Array2::<f64>::zeros((op.num_edges(), dim));
    // primal iterate E^k; only tracked when gamma != 1
    let mut primal = e_in.to_owned();
    let mut masks = keep_masks.then(|| Vec::with_capacity(cfg.num_layers));
    let mut objectives = Vec::new();
    let mut iterations = Vec::new();
    let mut pre_clips = Vec::with_capacity(1);

    for k in 0..cfg.num_layers {
        // Ē = (1 − γ)E^k + γ(E_in − Δ̃ᵀY^k)
        let mut predicted = if k == 0 {
            e_in.to_owned()
        } else {
            op.transpose_into(dual.view(), &mut back);
            let mut p = e_in.to_owned();
            p -= &back;
            p
        };
        if !unit_step {
            predicted.zip_mut_with(&primal, |p, &e| *p = (1.0 - gamma) * e + gamma * *p);
        }
        op.forward_into(predicted.view(), &mut diffs);

        if cfg.record_trace {
            // with γ = 1 the prediction equals E^k, so its objective comes for free
            let value = if unit_step {
                objective_parts(predicted.view(), e_in, diffs.view(), lambda)
            } else {
                gtf_objective(primal.view(), e_in, op, lambda)?
            };
            objectives.push(value);
        }

        if cfg.record_trace {
            let mut pre_clip = dual.clone();
            pre_clip.scaled_add(beta, &diffs);
            pre_clips.push(pre_clip);
        }
        // Ȳ = Y + βΔ̃Ē, then Y = clip(Ȳ, λ), fused into one pass
        let mut finite = true;
        let mut mask = masks.as_ref().map(|_| Array2::<bool>::default(dual.raw_dim()));
        match mask.as_mut() {
            Some(mask) => Zip::from(&mut dual).and(&diffs).and(mask).for_each(|y, &d, pass| {
                let pre = *y + beta * d;
                finite &= pre.is_finite();
                // λ = 0 makes the clip constant, so nothing passes through
                *pass = lambda > 0.0 && pre.abs() <= lambda;
                *y = clip(pre, lambda);
            }),
            None => Zip::from(&mut dual).and(&diffs).for_each(|y, &d| {
                let pre = *y + beta * d;
                finite &= pre.is_finite();
                *y = clip(pre, lambda);
            }),
        }
        if !finite {
            return Err(Error::NonFinite { iteration: k + 1 });
        }
        if let (Some(masks), Some(mask)) = (masks.as_mut(), mask) {
            masks.push(mask);
        }

        if !unit_step {
            op.transpose_into(dual.view(), &mut back);
            Zip::from(&mut primal)
                .and(&e_in)
                .and(&back)
                .for_each(|e, &base, &b| *e = (1.0 - gamma) * *e + gamma * (base - b));
        }
        if cfg.record_trace {
            iterations.push(IterationRecord {
                primal_prediction: predicted,
                dual_pre_clip: pre_clips.pop().expect("pushed above"),
            });
        }
    }

    let output = if cfg.num_layers == 0 {
        e_in.to_owned()
    } else if unit_step {
        op.transpose_into(dual.view(), &mut back);
        let mut out = e_in.to_owned();
        out -= &back;
        out
    } else {
        primal
    };
    if output.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            iteration: cfg.num_layers,
        });
    }
    if cfg.record_trace {
        objectives.push(gtf_objective(output.view(), e_in, op, lambda)?);
    }

    Ok(FilterTrace {
        output,
        dual,
        masks,
        objectives,
        iterations,
        config: *cfg,
    })
}

/// Objective values at `E^0 ..= E^{K_max}`.
pub fn convergence_log(
    e_in: ArrayView2<f64>,
    op: &IncidenceOperator,
    cfg: &FilterConfig,
    max_layers: usize,
) -> Result<Vec<(usize, f64)>> {
    if max_layers == 0 {
        return Err(Error::InvalidParameter {
            name: "max_layers",
            reason: "must be at least 1".into(),
        });
    }
    let cfg = FilterConfig {
        num_layers: max_layers,
        record_trace: true,
        ..*cfg
    };
    let trace = gtcf_inference(e_in, op, &cfg)?;
    Ok(trace.objectives.into_iter().enumerate().collect())
}

/// Reweighting factors `‖δ‖₁ / ‖δ‖₂²` of the normalized edge differences.
///
/// Edges whose difference has squared norm below `1e-12` get `None`.
pub fn edge_weights(e: ArrayView2<f64>, op: &IncidenceOperator) -> Result<Vec<Option<f64>>> {
    let diffs = op.forward(e)?;
    Ok(diffs
        .rows()
        .into_iter()
        .map(|row| {
            let l1: f64 = row.iter().map(|x| x.abs()).sum();
            let l2sq: f64 = row.iter().map(|x| x * x).sum();
            (l2sq >= 1e-12).then(|| l1 / l2sq)
        })
        .collect())
}

/// How propagated layers are combined into the final embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Use only the last layer.
    Last,
    /// Average of layers `0..=K`.
    Mean,
}

impl std::str::FromStr for Combine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Combine::Last),
            "mean" => Ok(Combine::Mean),
            other => Err(Error::Config(format!("unknown combine mode {other:?}"))),
        }
    }
}

/// Linear propagation `E^{k+1} = Ã E^k`, the Laplacian-smoothing baseline.
pub fn laplacian_propagate(
    e_in: ArrayView2<f64>,
    op: &PropagationOperator,
    layers: usize,
    combine: Combine,
) -> Result<Array2<f64>> {
    if e_in.nrows() != op.num_nodes() {
        return Err(Error::dim("propagation input rows", op.num_nodes(), e_in.nrows()));
    }
    let mut current = e_in.to_owned();
    let mut sum = e_in.to_owned();
    for _ in 0..layers {
        current = op.apply(current.view())?;
        if combine == Combine::Mean {
            sum += &current;
        }
    }
    Ok(match combine {
        Combine::Last => current,
        Combine::Mean => sum / (layers + 1) as f64,
    })
}
