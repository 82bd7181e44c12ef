//! Desk-scale studies: parameter sweeps, noise robustness, convergence and
//! sparsity of the learned edge differences.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::state_digest;
use crate::data::DatasetBundle;
use crate::encoder::{Backend, Encoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, sparsity_ratio, GroundTruth, MetricRecord};
use crate::filter::{gtf_objective, Combine, FilterConfig};
use crate::graph::{IncidenceOperator, InteractionGraph};
use crate::training::{train_epoch, EpochStats, ModelState, TrainConfig};

/// Perturbation rates used by the robustness study.
pub const NOISE_GRID: [f64; 8] = [0.05, 0.06, 0.08, 0.10, 0.15, 0.20, 0.30, 0.50];

/// Samples `⌊rate·|E|⌋` distinct user-item pairs absent from `graph`.
pub fn noise_edges<R: Rng + ?Sized>(graph: &InteractionGraph, rate: f64, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter {
            name: "rate",
            reason: format!("{rate} outside [0, 1]"),
        });
    }
    let requested = (rate * graph.num_edges() as f64).floor() as usize;
    let (n, m) = (graph.num_users(), graph.num_items());
    let available = n * m - graph.num_edges();
    if requested > available {
        return Err(Error::NoiseExhausted { requested, available });
    }
    if requested == 0 {
        return Ok(Vec::new());
    }
    if requested * 2 > available {
        // dense regime: shuffle-select from the explicit complement
        let mut absent: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (0..m).map(move |i| (u, i)))
            .filter(|&(u, i)| !graph.has_edge(u, i))
            .collect();
        let (picked, _) = rand::seq::SliceRandom::partial_shuffle(&mut absent[..], rng, requested);
        let mut picked = picked.to_vec();
        picked.sort_unstable();
        return Ok(picked);
    }
    let mut chosen = BTreeSet::new();
    while chosen.len() < requested {
        let pair = (rng.random_range(0..n), rng.random_range(0..m));
        if !graph.has_edge(pair.0, pair.1) {
            chosen.insert(pair);
        }
    }
    Ok(chosen.into_iter().collect())
}

/// Returns `graph` plus `⌊rate·|E|⌋` random edges that were previously absent.
pub fn inject_noise<R: Rng + ?Sized>(graph: &InteractionGraph, rate: f64, rng: &mut R) -> Result<InteractionGraph> {
    let extra = noise_edges(graph, rate, rng)?;
    if extra.is_empty() {
        return Ok(graph.clone());
    }
    graph.with_added_edges(&extra)
}

/// Model settings shared by every cell of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSettings {
    pub train: TrainConfig,
    pub combine: Combine,
    pub eval_k: Vec<usize>,
    pub sparsity_threshold: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            combine: Combine::Mean,
            eval_k: vec![20],
            sparsity_threshold: crate::eval::SPARSITY_THRESHOLD,
        }
    }
}

impl From<&crate::config::RunConfig> for ModelSettings {
    fn from(cfg: &crate::config::RunConfig) -> Self {
        Self {
            train: cfg.train.clone(),
            combine: cfg.combine,
            eval_k: cfg.eval_k.clone(),
            sparsity_threshold: cfg.sparsity_threshold,
        }
    }
}

/// Trains a fresh model for `settings.train.epochs` epochs.
pub fn train_model(
    dataset: &DatasetBundle,
    backend: Backend,
    settings: &ModelSettings,
    mut on_epoch: impl FnMut(&EpochStats, &ModelState) -> Result<()>,
) -> Result<ModelState> {
    let cfg = &settings.train;
    cfg.validate()?;
    let graph = &dataset.train;
    let encoder = Encoder::new(backend, graph, &cfg.filter, settings.combine);
    let mut state = ModelState::new(graph.num_users(), graph.num_items(), cfg.embed_dim, cfg.seed);
    for _ in 0..cfg.epochs {
        let stats = train_epoch(&mut state, graph, &encoder, cfg)?;
        info!(
            "{backend} epoch {} loss {:.6} ({:.2}s)",
            stats.epoch, stats.mean_loss, stats.wall_secs
        );
        on_epoch(&stats, &state)?;
    }
    Ok(state)
}

/// Final embeddings of `state` computed on `graph`.
pub fn final_embeddings(
    state: &ModelState,
    graph: &InteractionGraph,
    backend: Backend,
    settings: &ModelSettings,
) -> Result<Array2<f64>> {
    Encoder::new(backend, graph, &settings.train.filter, settings.combine).encode(state.embeddings.view())
}

/// Recall/NDCG of `state` with inference on `graph` against `truth`.
pub fn evaluate_state(
    state: &ModelState,
    graph: &InteractionGraph,
    truth: &GroundTruth,
    backend: Backend,
    settings: &ModelSettings,
) -> Result<Vec<MetricRecord>> {
    let emb = final_embeddings(state, graph, backend, settings)?;
    evaluate(emb.view(), truth, &settings.eval_k)
}

/// Sparsity ratio of `Δ̃E^K` for each trained backend.
pub fn sparsity_analysis(
    states: &[(Backend, &ModelState)],
    graph: &InteractionGraph,
    settings: &ModelSettings,
) -> Result<Vec<(Backend, f64)>> {
    let op = IncidenceOperator::new(graph);
    states
        .iter()
        .map(|&(backend, state)| {
            let emb = final_embeddings(state, graph, backend, settings)?;
            let diffs = op.forward(emb.view())?;
            Ok((backend, sparsity_ratio(diffs.view(), settings.sparsity_threshold)?))
        })
        .collect()
}

/// Sparsity ratio of `Δ̃E` for an arbitrary embedding matrix.
pub fn edge_difference_sparsity(emb: ArrayView2<f64>, graph: &InteractionGraph, threshold: f64) -> Result<f64> {
    let diffs = IncidenceOperator::new(graph).forward(emb)?;
    sparsity_ratio(diffs.view(), threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Lambda,
    Layers,
    Noise,
    Epochs,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Lambda => "lambda",
            SweepKind::Layers => "layers",
            SweepKind::Noise => "noise",
            SweepKind::Epochs => "epochs",
        }
    }
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepKind::Lambda),
            "layers" => Ok(SweepKind::Layers),
            "noise" => Ok(SweepKind::Noise),
            "epochs" => Ok(SweepKind::Epochs),
            other => Err(Error::Config(format!("unknown sweep kind {other:?}"))),
        }
    }
}

/// One result row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReportRow {
    pub kind: String,
    pub coordinate: f64,
    pub backend: Backend,
    pub seed: u64,
    pub metric: String,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub value: f64,
    /// SHA-256 of the trained state that produced the row.
    pub model_digest: String,
    /// Unix seconds when the row was appended.
    pub timestamp: u64,
}

/// Append-only collection of rows for one study.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_CSV_HEADER: &str = "kind,coordinate,backend,seed,metric,K,value,model_digest,timestamp";

impl ExperimentReport {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            rows: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        coordinate: f64,
        backend: Backend,
        seed: u64,
        metric: impl Into<String>,
        k: Option<usize>,
        value: f64,
        model_digest: &str,
    ) {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.rows.push(ReportRow {
            kind: self.kind.clone(),
            coordinate,
            backend,
            seed,
            metric: metric.into(),
            k,
            value,
            model_digest: model_digest.to_string(),
            timestamp,
        });
    }

    fn push_metrics(&mut self, coordinate: f64, backend: Backend, seed: u64, records: &[MetricRecord], digest: &str) {
        for r in records {
            self.push(coordinate, backend, seed, r.metric.clone(), Some(r.k), r.value, digest);
        }
    }

    /// Rows matching `metric` and `backend`, in append order.
    pub fn series(&self, backend: Backend, metric: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.backend == backend && r.metric == metric)
            .map(|r| (r.coordinate, r.value))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.17e},{},{}\n",
                r.kind,
                r.coordinate,
                r.backend,
                r.seed,
                r.metric,
                r.k.map(|k| k.to_string()).unwrap_or_default(),
                r.value,
                r.model_digest,
                r.timestamp
            ));
        }
        out
    }

    /// Writes `<dir>/<kind>.csv` and `<dir>/<kind>.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{}.csv", self.kind));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{}.json", self.kind));
        std::fs::write(&json, serde_json::to_string_pretty(&self.rows)?).map_err(|e| Error::io(&json, e))
    }
}

/// What to sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<f64>,
    pub backends: Vec<Backend>,
    pub settings: ModelSettings,
}

fn apply_coordinate(kind: SweepKind, value: f64, settings: &ModelSettings) -> Result<ModelSettings> {
    let mut s = settings.clone();
    let as_count = |v: f64| {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::InvalidParameter {
                name: "sweep value",
                reason: format!("{v} is not a count"),
            })
        }
    };
    match kind {
        SweepKind::Lambda => s.train.filter.lambda = value,
        SweepKind::Layers => s.train.filter.num_layers = as_count(value)?,
        SweepKind::Epochs => s.train.epochs = as_count(value)?,
        SweepKind::Noise => {}
    }
    Ok(s)
}

/// Settings that determine a trained state; the baseline ignores the filter's λ and stepsizes.
fn training_key(backend: Backend, s: &ModelSettings) -> String {
    let mut train = s.train.clone();
    if backend == Backend::Laplacian {
        train.filter = FilterConfig {
            num_layers: train.filter.num_layers,
            ..FilterConfig::default()
        };
    }
    format!("{backend}|{:?}|{:?}", train, s.combine)
}

fn row_extras(
    report: &mut ExperimentReport,
    coordinate: f64,
    backend: Backend,
    state: &ModelState,
    graph: &InteractionGraph,
    settings: &ModelSettings,
    digest: &str,
) -> Result<()> {
    let seed = settings.train.seed;
    let emb = final_embeddings(state, graph, backend, settings)?;
    let op = IncidenceOperator::new(graph);
    let diffs = op.forward(emb.view())?;
    let ratio = sparsity_ratio(diffs.view(), settings.sparsity_threshold)?;
    report.push(coordinate, backend, seed, "sparsity_ratio", None, ratio, digest);
    if backend == Backend::Gtn {
        let value = gtf_objective(emb.view(), state.embeddings.view(), &op, settings.train.filter.lambda)?;
        report.push(coordinate, backend, seed, "filter_objective", None, value, digest);
    }
    Ok(())
}

/// Runs a sweep, appending rows to `report` as they are produced so a
/// partial report survives a failure.
pub fn run_sweep(spec: &SweepSpec, dataset: &DatasetBundle, report: &mut ExperimentReport) -> Result<()> {
    if spec.values.is_empty() {
        return Err(Error::InvalidParameter {
            name: "values",
            reason: "sweep needs at least one value".into(),
        });
    }
    let seed = spec.settings.train.seed;
    match spec.kind {
        SweepKind::Noise => {
            let trained: Vec<(Backend, ModelState, String)> = spec
                .backends
                .iter()
                .map(|&b| {
                    let state = train_model(dataset, b, &spec.settings, |_, _| Ok(()))?;
                    let digest = state_digest(&state);
                    Ok((b, state, digest))
                })
                .collect::<Result<_>>()?;
            for (idx, &rate) in spec.values.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1000 + idx as u64);
                let noisy = inject_noise(&dataset.train, rate, &mut rng)?;
                for (backend, state, digest) in &trained {
                    let records = evaluate_state(state, &noisy, &dataset.truth, *backend, &spec.settings)?;
                    report.push_metrics(rate, *backend, seed, &records, digest);
                    row_extras(report, rate, *backend, state, &noisy, &spec.settings, digest)?;
                }
            }
        }
        SweepKind::Epochs => {
            let mut checkpoints: Vec<usize> = spec
                .values
                .iter()
                .map(|&v| apply_coordinate(SweepKind::Epochs, v, &spec.settings).map(|s| s.train.epochs))
                .collect::<Result<_>>()?;
            checkpoints.sort_unstable();
            checkpoints.dedup();
            let mut settings = spec.settings.clone();
            settings.train.epochs = *checkpoints.last().expect("nonempty");
            for &backend in &spec.backends {
                let emit = |report: &mut ExperimentReport, epoch: usize, state: &ModelState| -> Result<()> {
                    let digest = state_digest(state);
                    let records = evaluate_state(state, &dataset.train, &dataset.truth, backend, &settings)?;
                    report.push_metrics(epoch as f64, backend, seed, &records, &digest);
                    row_extras(report, epoch as f64, backend, state, &dataset.train, &settings, &digest)
                };
                if checkpoints[0] == 0 {
                    let fresh =
                        ModelState::new(dataset.num_users(), dataset.num_items(), settings.train.embed_dim, seed);
                    emit(report, 0, &fresh)?;
                }
                train_model(dataset, backend, &settings, |stats, state| {
                    let epoch = stats.epoch as usize;
                    if checkpoints.binary_search(&epoch).is_ok() {
                        emit(report, epoch, state)?;
                    }
                    Ok(())
                })?;
            }
        }
        SweepKind::Lambda | SweepKind::Layers => {
            let mut cache: HashMap<String, (ModelState, String)> = HashMap::new();
            for &value in &spec.values {
                let settings = apply_coordinate(spec.kind, value, &spec.settings)?;
                for &backend in &spec.backends {
                    let key = training_key(backend, &settings);
                    if !cache.contains_key(&key) {
                        let state = train_model(dataset, backend, &settings, |_, _| Ok(()))?;
                        let digest = state_digest(&state);
                        cache.insert(key.clone(), (state, digest));
                    }
                    let (state, digest) = &cache[&key];
                    let records = evaluate_state(state, &dataset.train, &dataset.truth, backend, &settings)?;
                    report.push_metrics(value, backend, seed, &records, digest);
                    row_extras(report, value, backend, state, &dataset.train, &settings, digest)?;
                }
            }
        }
    }
    Ok(())
}

/// Relative drop `(clean − noisy) / clean`; zero when `clean` is zero.
pub fn relative_degradation(clean: f64, noisy: f64) -> f64 {
    if clean == 0.0 {
        0.0
    } else {
        (clean - noisy) / clean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> InteractionGraph {
        let pairs: Vec<_> = (0..20)
            .flat_map(|u| (0..5).map(move |k| (u, (u + 3 * k) % 50)))
            .collect();
        InteractionGraph::new(&pairs, 20, 50).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inject_noise(&g, 0.0, &mut rng).unwrap(), g);
    }

    #[test]
    fn injected_edges_are_new_and_counted() {
        let g = graph();
        assert_eq!(g.num_edges(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let extra = noise_edges(&g, 0.1, &mut rng).unwrap();
        assert_eq!(extra.len(), 10);
        assert!(extra.iter().all(|&(u, i)| !g.has_edge(u, i)));
        let noisy = inject_noise(&g, 0.5, &mut rng).unwrap();
        assert_eq!(noisy.num_edges(), 150);
        assert!(g.edges().iter().all(|&(u, i)| noisy.has_edge(u, i)));
    }

    #[test]
    fn dense_regime_and_exhaustion() {
        let g = InteractionGraph::new(&[(0, 0), (0, 1), (1, 0)], 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // ⌊1.0 · 3⌋ = 3 new edges requested, only 1 absent pair
        assert!(matches!(
            noise_edges(&g, 1.0, &mut rng),
            Err(Error::NoiseExhausted {
                requested: 3,
                available: 1
            })
        ));
        let g = InteractionGraph::new(&[(0, 0), (0, 1), (1, 0), (1, 2)], 2, 3).unwrap();
        let extra = noise_edges(&g, 0.5, &mut rng).unwrap();
        assert_eq!(extra.len(), 2);
        assert!(extra.iter().all(|&(u, i)| !g.has_edge(u, i)));
    }

    #[test]
    fn grid_matches_study_rates() {
        assert_eq!(NOISE_GRID, [0.05, 0.06, 0.08, 0.10, 0.15, 0.20, 0.30, 0.50]);
    }

    #[test]
    fn report_csv_layout() {
        let mut r = ExperimentReport::new("lambda");
        r.push(0.5, Backend::Gtn, 3, "Recall@20", Some(20), 0.25, "abc");
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), REPORT_CSV_HEADER);
        assert!(lines.next().unwrap().starts_with("lambda,0.5,gtn,3,Recall@20,20,2.5"));
        assert_eq!(r.series(Backend::Gtn, "Recall@20"), vec![(0.5, 0.25)]);
    }

    #[test]
    fn degradation() {
        assert_eq!(relative_degradation(0.5, 0.4), 0.19999999999999996);
        assert_eq!(relative_degradation(0.0, 0.0), 0.0);
    }
}
