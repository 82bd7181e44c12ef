//! Embedding encoders: the trend filter and the linear propagation baseline.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::filter::{gtcf_filter, gtcf_inference, laplacian_propagate, Combine, FilterConfig, FilterTrace};
use crate::graph::{IncidenceOperator, InteractionGraph, PropagationOperator};
use crate::training::backward_gtcf;

/// Which encoder turns `E_in` into final embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Backend {
    #[serde(rename = "gtn")]
    Gtn,
    #[serde(rename = "laplacian-baseline")]
    Laplacian,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Gtn => "gtn",
            Backend::Laplacian => "laplacian-baseline",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gtn" => Ok(Backend::Gtn),
            "laplacian-baseline" | "laplacian" | "lightgcn" => Ok(Backend::Laplacian),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// A backend bound to the operators of one graph.
#[derive(Debug, Clone)]
pub enum Encoder {
    Gtn {
        op: IncidenceOperator,
        cfg: FilterConfig,
    },
    Laplacian {
        op: PropagationOperator,
        layers: usize,
        combine: Combine,
    },
}

/// Forward state needed to backpropagate through an encoder.
#[derive(Debug)]
pub enum Tape {
    Gtn(Box<FilterTrace>),
    Laplacian,
}

impl Encoder {
    /// Builds the encoder for `backend`. The baseline uses `filter.num_layers` as its depth.
    pub fn new(backend: Backend, graph: &InteractionGraph, filter: &FilterConfig, combine: Combine) -> Self {
        match backend {
            Backend::Gtn => Encoder::Gtn {
                op: IncidenceOperator::new(graph),
                cfg: *filter,
            },
            Backend::Laplacian => Encoder::Laplacian {
                op: PropagationOperator::new(graph),
                layers: filter.num_layers,
                combine,
            },
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            Encoder::Gtn { .. } => Backend::Gtn,
            Encoder::Laplacian { .. } => Backend::Laplacian,
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            Encoder::Gtn { op, .. } => op.num_nodes(),
            Encoder::Laplacian { op, .. } => op.num_nodes(),
        }
    }

    /// Final embeddings for inference.
    pub fn encode(&self, e_in: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            Encoder::Gtn { op, cfg } => Ok(gtcf_inference(e_in, op, cfg)?.output),
            Encoder::Laplacian { op, layers, combine } => laplacian_propagate(e_in, op, *layers, *combine),
        }
    }

    pub fn encode_with_tape(&self, e_in: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        match self {
            Encoder::Gtn { op, cfg } => {
                let mut trace = gtcf_filter(e_in, op, cfg)?;
                let out = std::mem::take(&mut trace.output);
                Ok((out, Tape::Gtn(Box::new(trace))))
            }
            Encoder::Laplacian { op, layers, combine } => {
                Ok((laplacian_propagate(e_in, op, *layers, *combine)?, Tape::Laplacian))
            }
        }
    }

    /// Vector-Jacobian product of the encoder at the taped point.
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<Array2<f64>> {
        match (self, tape) {
            (Encoder::Gtn { op, .. }, Tape::Gtn(trace)) => backward_gtcf(trace, op, grad_out),
            // Ã is symmetric, so the adjoint of the propagation is the propagation itself
            (Encoder::Laplacian { op, layers, combine }, Tape::Laplacian) => {
                laplacian_propagate(grad_out, op, *layers, *combine)
            }
            _ => Err(Error::Config("tape was produced by a different backend".into())),
        }
    }
}
