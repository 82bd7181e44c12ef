//! Command-line entry points.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint_for, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset_dir, write_dataset, DatasetBundle};
use crate::encoder::Backend;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::experiments::{
    final_embeddings, inject_noise, run_sweep, sparsity_analysis, train_model, ExperimentReport, ModelSettings,
    SweepKind, SweepSpec,
};
use crate::filter::{gtcf_inference, FilterConfig};
use crate::graph::IncidenceOperator;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Debug, Parser)]
#[command(name = "gtn", version, about = "Graph trend filtering collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Args, Clone, Default)]
struct ModelFlags {
    /// Dataset directory with train.txt and test.txt; synthetic data when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// gtn or laplacian-baseline.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic block-preference dataset.
    Gen {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        interactions: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train input embeddings and write a checkpoint.
    Train {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Compute Recall/NDCG for a checkpoint.
    Evaluate {
        #[command(flatten)]
        model: ModelFlags,
        /// Checkpoint path; defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Inject this fraction of random edges into the inference graph.
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Filter an embedding file once and log the objective per iteration.
    Filter {
        #[command(flatten)]
        model: ModelFlags,
        /// Whitespace-separated matrix, one row per node (users first).
        #[arg(long)]
        embeddings: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep lambda, layers, noise rate or epochs.
    Sweep {
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        kind: String,
        /// Comma-separated values; the noise grid is used when omitted for --kind noise.
        #[arg(long)]
        values: Option<String>,
        /// Comma-separated backends.
        #[arg(long, default_value = "gtn,laplacian-baseline")]
        backends: String,
        #[command(flatten)]
        common: Common,
    },
    /// Sparsity ratio of the learned edge differences.
    Analyze {
        #[command(flatten)]
        model: ModelFlags,
        /// `backend=path` pairs; defaults to the configured backend and <out>/model.ckpt.
        #[arg(long = "model", value_name = "BACKEND=PATH")]
        models: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn split_kv(raw: &str) -> Result<(String, String)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, found {raw:?}")))
}

fn resolve(common: &Common, mut overrides: Vec<(String, String)>) -> Result<RunConfig> {
    if let Some(seed) = common.seed {
        overrides.insert(0, ("seed".into(), seed.to_string()));
    }
    if let Some(out) = &common.out {
        overrides.insert(0, ("out_dir".into(), out.display().to_string()));
    }
    for raw in &common.set {
        overrides.push(split_kv(raw)?);
    }
    RunConfig::resolve(common.config.as_deref(), std::env::vars(), &overrides)
}

fn model_overrides(model: &ModelFlags) -> Vec<(String, String)> {
    let mut o = Vec::new();
    let mut add = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    add("data_dir", model.data.as_ref().map(|p| p.display().to_string()));
    add("backend", model.backend.clone());
    add("epochs", model.epochs.map(|v| v.to_string()));
    add("lambda", model.lambda.map(|v| v.to_string()));
    add("num_layers", model.layers.map(|v| v.to_string()));
    add("embed_dim", model.dim.map(|v| v.to_string()));
    o
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let echo = cfg.out_dir.join(CONFIG_ECHO_FILE);
    fs::write(&echo, cfg.to_kv_string()).map_err(|e| Error::io(&echo, e))
}

fn load_data(cfg: &RunConfig) -> Result<DatasetBundle> {
    match &cfg.data_dir {
        Some(dir) => load_dataset_dir(dir),
        None => generate_synthetic(&cfg.synthetic),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected a number, found {tok:?}"),
            })?);
        }
        let width = data.len() - before;
        if width == 0 {
            continue;
        }
        if *cols.get_or_insert(width) != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("row has {width} values, expected {}", cols.unwrap_or(0)),
            });
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "no rows".into(),
    })?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("row widths checked"))
}

fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn parse_values(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sweep value {v:?}")))
        })
        .collect()
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen {
            users,
            items,
            interactions,
            blocks,
            noise,
            common,
        } => {
            let mut o = Vec::new();
            let mut add = |k: &str, v: Option<String>| {
                if let Some(v) = v {
                    o.push((k.to_string(), v));
                }
            };
            add("synthetic_users", users.map(|v| v.to_string()));
            add("synthetic_items", items.map(|v| v.to_string()));
            add("synthetic_interactions", interactions.map(|v| v.to_string()));
            add("synthetic_blocks", blocks.map(|v| v.to_string()));
            add("synthetic_noise", noise.map(|v| v.to_string()));
            add("synthetic_seed", common.seed.map(|v| v.to_string()));
            let cfg = resolve(&common, o)?;
            prepare_out(&cfg)?;
            let bundle = generate_synthetic(&cfg.synthetic)?;
            write_dataset(&bundle, &cfg.out_dir)?;
            println!(
                "wrote {} users, {} items, {} train edges to {}",
                bundle.num_users(),
                bundle.num_items(),
                bundle.train.num_edges(),
                cfg.out_dir.display()
            );
        }
        Command::Train { model, common } => {
            let cfg = resolve(&common, model_overrides(&model))?;
            prepare_out(&cfg)?;
            let data = load_data(&cfg)?;
            let settings = ModelSettings::from(&cfg);
            let mut log = String::from("epoch,batches,mean_loss,mean_bpr,wall_secs\n");
            let state = train_model(&data, cfg.backend, &settings, |s, _| {
                log.push_str(&format!(
                    "{},{},{:.17e},{:.17e},{:.3}\n",
                    s.epoch, s.batches, s.mean_loss, s.mean_bpr, s.wall_secs
                ));
                Ok(())
            })?;
            let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
            save_checkpoint(&state, &ckpt)?;
            let log_path = cfg.out_dir.join("epochs.csv");
            fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
            println!("wrote {}", ckpt.display());
        }
        Command::Evaluate {
            model,
            checkpoint,
            noise,
            common,
        } => {
            let cfg = resolve(&common, model_overrides(&model))?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let data = load_data(&cfg)?;
            let state = load_checkpoint_for(&ckpt, data.num_users(), data.num_items(), cfg.train.embed_dim)?;
            prepare_out(&cfg)?;
            let settings = ModelSettings::from(&cfg);
            let graph = match noise {
                Some(rate) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                    rng.set_stream(1000);
                    inject_noise(&data.train, rate, &mut rng)?
                }
                None => data.train.clone(),
            };
            let emb = final_embeddings(&state, &graph, cfg.backend, &settings)?;
            let records = evaluate(emb.view(), &data.truth, &cfg.eval_k)?;
            let path = cfg.out_dir.join(METRICS_FILE);
            write_json(&path, &records)?;
            for r in &records {
                println!("{} = {:.6} ({} users)", r.metric, r.value, r.n_users);
            }
        }
        Command::Filter {
            model,
            embeddings,
            common,
        } => {
            let cfg = resolve(&common, model_overrides(&model))?;
            let data = load_data(&cfg)?;
            let e_in = read_matrix(&embeddings)?;
            prepare_out(&cfg)?;
            let op = IncidenceOperator::new(&data.train);
            let fcfg = FilterConfig {
                record_trace: true,
                ..cfg.train.filter
            };
            let trace = gtcf_inference(e_in.view(), &op, &fcfg)?;
            write_matrix(&cfg.out_dir.join("filtered.txt"), &trace.output)?;
            trace.write_convergence_csv(&cfg.out_dir.join("convergence.csv"))?;
            println!(
                "objective {:.6e} -> {:.6e} over {} iterations",
                trace.objectives.first().copied().unwrap_or(0.0),
                trace.objectives.last().copied().unwrap_or(0.0),
                fcfg.num_layers
            );
        }
        Command::Sweep {
            model,
            kind,
            values,
            backends,
            common,
        } => {
            let cfg = resolve(&common, model_overrides(&model))?;
            let kind: SweepKind = kind.parse()?;
            let values = match (values, kind) {
                (Some(v), _) => parse_values(&v)?,
                (None, SweepKind::Noise) => crate::experiments::NOISE_GRID.to_vec(),
                (None, _) => return Err(Error::Config("--values is required for this sweep".into())),
            };
            let backends = backends
                .split(',')
                .map(|b| b.trim().parse::<Backend>())
                .collect::<Result<Vec<_>>>()?;
            prepare_out(&cfg)?;
            let data = load_data(&cfg)?;
            let spec = SweepSpec {
                kind,
                values,
                backends,
                settings: ModelSettings::from(&cfg),
            };
            let mut report = ExperimentReport::new(kind.name());
            let outcome = run_sweep(&spec, &data, &mut report);
            // flush whatever finished, even on failure
            report.write(&cfg.out_dir)?;
            outcome?;
            println!("wrote {} rows to {}", report.rows.len(), cfg.out_dir.display());
        }
        Command::Analyze { model, models, common } => {
            let cfg = resolve(&common, model_overrides(&model))?;
            let data = load_data(&cfg)?;
            let pairs: Vec<(Backend, PathBuf)> = if models.is_empty() {
                vec![(cfg.backend, cfg.out_dir.join(CHECKPOINT_FILE))]
            } else {
                models
                    .iter()
                    .map(|raw| {
                        let (b, p) = split_kv(raw)?;
                        Ok((b.parse()?, PathBuf::from(p)))
                    })
                    .collect::<Result<_>>()?
            };
            let states = pairs
                .iter()
                .map(|(b, p)| {
                    load_checkpoint_for(p, data.num_users(), data.num_items(), cfg.train.embed_dim).map(|s| (*b, s))
                })
                .collect::<Result<Vec<_>>>()?;
            prepare_out(&cfg)?;
            let refs: Vec<_> = states.iter().map(|(b, s)| (*b, s)).collect();
            let ratios = sparsity_analysis(&refs, &data.train, &ModelSettings::from(&cfg))?;
            let rows: Vec<_> = ratios
                .iter()
                .map(|(b, r)| {
                    serde_json::json!({
                        "backend": b.name(),
                        "threshold": cfg.sparsity_threshold,
                        "sparsity_ratio": r,
                        "n_edges": data.train.num_edges(),
                    })
                })
                .collect();
            write_json(&cfg.out_dir.join("sparsity.json"), &rows)?;
            for (b, r) in &ratios {
                println!("{b}: sparsity ratio {r:.6}");
            }
        }
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            info!("command failed: {e:?}");
            eprintln!("error: {e}");
            1
        }
    }
}
