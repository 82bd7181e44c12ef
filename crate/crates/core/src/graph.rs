//! User-item bipartite graph and the sparse operators built on top of it.
//!
//! Nodes are indexed globally: users occupy `[0, n)` and items `[n, n + m)`.
//! Every edge is oriented user -> item, so the incidence row for edge
//! `(u, i)` carries `-1/sqrt(d_u + 1)` at column `u` and `+1/sqrt(d_i + 1)`
//! at column `n + i`.

use ndarray::{Array2, ArrayView2, ArrayViewMut1, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rows processed per rayon task in the sparse products.
const PAR_CHUNK: usize = 512;

/// Deduplicated user-item interaction set with degree bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    user_degree: Vec<usize>,
    item_degree: Vec<usize>,
    // edges[user_offsets[u]..user_offsets[u + 1]] are the edges of user u
    user_offsets: Vec<usize>,
    // item_edges[item_offsets[i]..item_offsets[i + 1]] are edge ids touching item i
    item_offsets: Vec<usize>,
    item_edges: Vec<usize>,
}

impl InteractionGraph {
    /// Builds a graph from raw `(user, item)` pairs. Duplicates are collapsed.
    pub fn new(interactions: &[(usize, usize)], num_users: usize, num_items: usize) -> Result<Self> {
        if num_users == 0 || num_items == 0 {
            return Err(Error::EmptyUniverse);
        }
        if interactions.is_empty() {
            return Err(Error::EmptyInteractions);
        }
        if let Some(&(user, item)) = interactions.iter().find(|&&(u, i)| u >= num_users || i >= num_items) {
            return Err(Error::IndexOutOfRange {
                user,
                item,
                num_users,
                num_items,
            });
        }
        let mut edges = interactions.to_vec();
        edges.sort_unstable();
        edges.dedup();
        Ok(Self::from_sorted_edges(edges, num_users, num_items))
    }

    fn from_sorted_edges(edges: Vec<(usize, usize)>, num_users: usize, num_items: usize) -> Self {
        let mut user_degree = vec![0usize; num_users];
        let mut item_degree = vec![0usize; num_items];
        for &(u, i) in &edges {
            user_degree[u] += 1;
            item_degree[i] += 1;
        }
        let user_offsets = prefix_offsets(&user_degree);
        let item_offsets = prefix_offsets(&item_degree);
        let mut cursor = item_offsets.clone();
        let mut item_edges = vec![0usize; edges.len()];
        for (e, &(_, i)) in edges.iter().enumerate() {
            item_edges[cursor[i]] = e;
            cursor[i] += 1;
        }
        Self {
            num_users,
            num_items,
            edges,
            user_degree,
            item_degree,
            user_offsets,
            item_offsets,
            item_edges,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Total node count `n + m`.
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edges sorted by `(user, item)`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn user_degree(&self) -> &[usize] {
        &self.user_degree
    }

    pub fn item_degree(&self) -> &[usize] {
        &self.item_degree
    }

    /// Items of `user` in ascending order.
    pub fn user_items(&self, user: usize) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.edges[self.user_offsets[user]..self.user_offsets[user + 1]]
            .iter()
            .map(|&(_, i)| i)
    }

    /// Edge ids incident to `item`, ascending.
    pub fn item_edge_ids(&self, item: usize) -> &[usize] {
        &self.item_edges[self.item_offsets[item]..self.item_offsets[item + 1]]
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        if user >= self.num_users {
            return false;
        }
        self.edges[self.user_offsets[user]..self.user_offsets[user + 1]]
            .binary_search(&(user, item))
            .is_ok()
    }

    /// Returns a new graph containing these edges plus `extra`.
    pub fn with_added_edges(&self, extra: &[(usize, usize)]) -> Result<Self> {
        let mut all = self.edges.clone();
        all.extend_from_slice(extra);
        Self::new(&all, self.num_users, self.num_items)
    }
}

fn prefix_offsets(counts: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(counts.len() + 1);
    let mut acc = 0;
    offsets.push(0);
    for &c in counts {
        acc += c;
        offsets.push(acc);
    }
    offsets
}

/// Direction of a sparse incidence product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// `Δ̃ M`, node rows to edge rows.
    Forward,
    /// `Δ̃ᵀ M`, edge rows to node rows.
    Transpose,
}

/// Degree-normalized oriented incidence matrix with two nonzeros per row.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceOperator {
    num_users: usize,
    num_items: usize,
    // per edge: global columns and coefficients (user side negative)
    edge_cols: Vec<[usize; 2]>,
    edge_coef: Vec<[f64; 2]>,
    // transpose layout: per node, (edge id, coefficient) in ascending edge order
    node_offsets: Vec<usize>,
    node_edges: Vec<usize>,
    node_coef: Vec<f64>,
}

impl IncidenceOperator {
    pub fn new(graph: &InteractionGraph) -> Self {
        let n = graph.num_users();
        let inv_sqrt = |d: usize| 1.0 / ((d + 1) as f64).sqrt();
        let user_scale: Vec<f64> = graph.user_degree().iter().map(|&d| inv_sqrt(d)).collect();
        let item_scale: Vec<f64> = graph.item_degree().iter().map(|&d| inv_sqrt(d)).collect();

        let mut edge_cols = Vec::with_capacity(graph.num_edges());
        let mut edge_coef = Vec::with_capacity(graph.num_edges());
        for &(u, i) in graph.edges() {
            edge_cols.push([u, n + i]);
            edge_coef.push([-user_scale[u], item_scale[i]]);
        }

        let mut node_offsets = Vec::with_capacity(graph.num_nodes() + 1);
        let mut node_edges = Vec::with_capacity(2 * graph.num_edges());
        let mut node_coef = Vec::with_capacity(2 * graph.num_edges());
        node_offsets.push(0);
        for (u, &scale) in user_scale.iter().enumerate() {
            for e in graph.user_offsets[u]..graph.user_offsets[u + 1] {
                node_edges.push(e);
                node_coef.push(-scale);
            }
            node_offsets.push(node_edges.len());
        }
        for (i, &scale) in item_scale.iter().enumerate() {
            for &e in graph.item_edge_ids(i) {
                node_edges.push(e);
                node_coef.push(scale);
            }
            node_offsets.push(node_edges.len());
        }

        Self {
            num_users: n,
            num_items: graph.num_items(),
            edge_cols,
            edge_coef,
            node_offsets,
            node_edges,
            node_coef,
        }
    }

    pub fn num_edges(&self) -> usize {
        self.edge_cols.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Global columns and coefficients of row `edge`.
    pub fn row(&self, edge: usize) -> ([usize; 2], [f64; 2]) {
        (self.edge_cols[edge], self.edge_coef[edge])
    }

    pub fn apply(&self, m: ArrayView2<f64>, direction: Direction) -> Result<Array2<f64>> {
        match direction {
            Direction::Forward => self.forward(m),
            Direction::Transpose => self.transpose(m),
        }
    }

    /// `Δ̃ M`: one output row per edge.
    pub fn forward(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        if m.nrows() != self.num_nodes() {
            return Err(Error::dim("incidence forward rows", self.num_nodes(), m.nrows()));
        }
        let mut out = Array2::zeros((self.num_edges(), m.ncols()));
        self.forward_into(m, &mut out);
        Ok(out)
    }

    /// `Δ̃ᵀ Y`: one output row per node.
    pub fn transpose(&self, y: ArrayView2<f64>) -> Result<Array2<f64>> {
        if y.nrows() != self.num_edges() {
            return Err(Error::dim("incidence transpose rows", self.num_edges(), y.nrows()));
        }
        let mut out = Array2::zeros((self.num_nodes(), y.ncols()));
        self.transpose_into(y, &mut out);
        Ok(out)
    }

    /// Shape-unchecked `out = Δ̃ M`. `out` must be `|E| x d`.
    pub(crate) fn forward_into(&self, m: ArrayView2<f64>, out: &mut Array2<f64>) {
        let m = m.as_standard_layout();
        let m = m.view();
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each(|(e, mut row)| {
                let [a, b] = self.edge_cols[e];
                let [ca, cb] = self.edge_coef[e];
                let ra = m.row(a);
                let rb = m.row(b);
                let (ra, rb) = (ra.as_slice().expect("standard"), rb.as_slice().expect("standard"));
                let row = row.as_slice_mut().expect("output is standard layout");
                for ((o, &x), &y) in row.iter_mut().zip(ra).zip(rb) {
                    *o = ca * x + cb * y;
                }
            });
    }

    /// Shape-unchecked `out = Δ̃ᵀ Y`. `out` must be `(n + m) x d`.
    pub(crate) fn transpose_into(&self, y: ArrayView2<f64>, out: &mut Array2<f64>) {
        let y = y.as_standard_layout();
        let y = y.view();
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each(|(node, row)| self.gather_node(node, y, row));
    }

    fn gather_node(&self, node: usize, y: ArrayView2<f64>, mut row: ArrayViewMut1<f64>) {
        let row = row.as_slice_mut().expect("output is standard layout");
        row.fill(0.0);
        for k in self.node_offsets[node]..self.node_offsets[node + 1] {
            let c = self.node_coef[k];
            let src = y.row(self.node_edges[k]);
            for (o, &v) in row.iter_mut().zip(src.as_slice().expect("standard")) {
                *o += c * v;
            }
        }
    }

    /// Power-iteration estimate of `‖Δ̃ Δ̃ᵀ‖₂`, run on the equal-spectrum `Δ̃ᵀ Δ̃`.
    pub fn gram_norm_estimate(&self, iterations: usize) -> f64 {
        let nodes = self.num_nodes();
        if nodes == 0 || self.num_edges() == 0 {
            return 0.0;
        }
        // deterministic, non-symmetric start so it is not orthogonal to the top eigenvector
        let mut v = Array2::from_shape_fn((nodes, 1), |(r, _)| 1.0 + (r as f64 * 0.618_033_988_75).fract());
        let mut estimate = 0.0;
        for _ in 0..iterations {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            v.mapv_inplace(|x| x / norm);
            let dv = self.forward(v.view()).expect("shape fixed above");
            let w = self.transpose(dv.view()).expect("shape fixed above");
            estimate = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>();
            v = w;
        }
        estimate
    }

    /// Dense `|E| x (n + m)` copy. Intended for tests and small diagnostics.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut dense = Array2::zeros((self.num_edges(), self.num_nodes()));
        for (e, (cols, coef)) in self.edge_cols.iter().zip(&self.edge_coef).enumerate() {
            dense[[e, cols[0]]] = coef[0];
            dense[[e, cols[1]]] = coef[1];
        }
        dense
    }
}

/// Symmetric normalized adjacency with self-loops, `D̂^{-1/2} (A + I) D̂^{-1/2}`, in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOperator {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
}

impl PropagationOperator {
    pub fn new(graph: &InteractionGraph) -> Self {
        let n = graph.num_users();
        let deg: Vec<f64> = graph
            .user_degree()
            .iter()
            .chain(graph.item_degree())
            .map(|&d| (d + 1) as f64)
            .collect();
        let weight = |a: usize, b: usize| 1.0 / (deg[a] * deg[b]).sqrt();

        let nodes = graph.num_nodes();
        let mut offsets = Vec::with_capacity(nodes + 1);
        let mut cols = Vec::with_capacity(nodes + 2 * graph.num_edges());
        let mut values = Vec::with_capacity(nodes + 2 * graph.num_edges());
        offsets.push(0);
        for u in 0..n {
            cols.push(u);
            values.push(weight(u, u));
            for i in graph.user_items(u) {
                cols.push(n + i);
                values.push(weight(u, n + i));
            }
            offsets.push(cols.len());
        }
        let edges = graph.edges();
        for i in 0..graph.num_items() {
            let node = n + i;
            // item edge ids ascend, so their users ascend too; all users precede the item itself
            for &e in graph.item_edge_ids(i) {
                let u = edges[e].0;
                cols.push(u);
                values.push(weight(node, u));
            }
            cols.push(node);
            values.push(weight(node, node));
            offsets.push(cols.len());
        }
        Self { offsets, cols, values }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Sorted `(column, value)` entries of one row.
    pub fn row(&self, node: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[node]..self.offsets[node + 1];
        self.cols[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// `Ã M`.
    pub fn apply(&self, m: ArrayView2<f64>) -> Result<Array2<f64>> {
        if m.nrows() != self.num_nodes() {
            return Err(Error::dim("propagation rows", self.num_nodes(), m.nrows()));
        }
        let mut out = Array2::zeros(m.raw_dim());
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .with_min_len(PAR_CHUNK)
            .enumerate()
            .for_each(|(r, mut row)| {
                for k in self.offsets[r]..self.offsets[r + 1] {
                    row.scaled_add(self.values[k], &m.row(self.cols[k]));
                }
            });
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let nodes = self.num_nodes();
        let mut dense = Array2::zeros((nodes, nodes));
        for r in 0..nodes {
            for (c, v) in self.row(r) {
                dense[[r, c]] = v;
            }
        }
        dense
    }
}
