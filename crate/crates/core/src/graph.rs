//! Row-normalized network operator `G` in CSR form and the aggregations built
//! on it: `G·M`, `G·(G·M)` and the feedback-removing difference `(I − G)·M`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::matrix::FeatureMatrix;

/// Row-normalized adjacency of an undirected simple graph.
///
/// Column indices are sorted within each row. Isolated nodes have empty rows,
/// so `G·M` is zero there and `(I − G)` acts as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseGraph {
    /// Build from undirected edges. Each pair is inserted in both directions.
    pub fn from_edge_list(edges: &[(usize, usize)], n: usize) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(a, b) in edges {
            for node in [a, b] {
                if node >= n {
                    return Err(Error::NodeOutOfRange { node, n });
                }
            }
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(2 * edges.len());
        let mut weights = Vec::with_capacity(2 * edges.len());
        row_ptr.push(0);
        for (i, nbrs) in adj.iter_mut().enumerate() {
            nbrs.sort_unstable();
            if let Some(w) = nbrs.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::DuplicateEdge(i.min(w[0]), i.max(w[0])));
            }
            let wt = if nbrs.is_empty() {
                0.0
            } else {
                1.0 / nbrs.len() as f64
            };
            col_idx.extend_from_slice(nbrs);
            weights.extend(std::iter::repeat_n(wt, nbrs.len()));
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            weights,
        })
    }

    /// Parse a whitespace-separated edge list (`#` starts a comment line).
    /// `n` defaults to one past the largest node id.
    pub fn read_edge_list(path: &Path, n: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let (edges, max_id) = parse_edge_list(&text).map_err(|m| Error::parse(path, m))?;
        let n = n.unwrap_or(max_id.map_or(0, |m| m + 1));
        Self::from_edge_list(&edges, n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.col_idx.len() / 2
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        self.degree(i) == 0
    }

    /// Undirected edges `(i, j)` with `i < j`, in CSR order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.n)
            .flat_map(|i| {
                self.neighbors(i)
                    .iter()
                    .filter(move |&&j| i < j)
                    .map(move |&j| (i, j))
            })
            .collect()
    }

    /// Dense copy of `G`, row-major. For tests and small-n oracles.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.col_idx[k]] = self.weights[k];
            }
        }
        d
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        if rows != self.n {
            return Err(Error::dim(format!(
                "matrix has {rows} rows, graph has {} nodes",
                self.n
            )));
        }
        Ok(())
    }

    /// `G·M`: row i is the neighbor mean of `M`.
    pub fn aggregate(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        self.aggregate_with(m, Execution::default())
    }

    pub fn aggregate_with(&self, m: &FeatureMatrix, exec: Execution) -> Result<FeatureMatrix> {
        self.check_rows(m.rows())?;
        let d = m.cols();
        let mut out = FeatureMatrix::zeros(self.n, d);
        if d == 0 {
            return Ok(out);
        }
        // 256 rows per task keeps scheduling overhead negligible.
        let rows_per_chunk = 256;
        exec.for_each_chunk(out.as_mut_slice(), rows_per_chunk * d, |ci, chunk| {
            let first = ci * rows_per_chunk;
            for (r, dst) in chunk.chunks_mut(d).enumerate() {
                let i = first + r;
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    let w = self.weights[k];
                    for (o, &v) in dst.iter_mut().zip(m.row(self.col_idx[k])) {
                        *o += w * v;
                    }
                }
            }
        });
        Ok(out)
    }

    /// `G·v` for a single vector.
    pub fn aggregate_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_rows(v.len())?;
        Ok(self.aggregate_vec_unchecked(v))
    }

    pub(crate) fn aggregate_vec_unchecked(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|k| self.weights[k] * v[self.col_idx[k]])
                    .sum()
            })
            .collect()
    }

    /// `G·(G·X)` without forming `G²`.
    pub fn second_order(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        let gx = self.aggregate(x)?;
        self.aggregate(&gx)
    }

    /// `(I − G)·M`.
    pub fn ig_transform(&self, m: &FeatureMatrix) -> Result<FeatureMatrix> {
        let gm = self.aggregate(m)?;
        m.lin_comb(1.0, &gm, -1.0)
    }

    pub fn ig_transform_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let gv = self.aggregate_vec(v)?;
        Ok(v.iter().zip(&gv).map(|(a, b)| a - b).collect())
    }

    /// Power-iteration estimate of the spectral radius of `G`.
    ///
    /// Uses the two-step ratio `sqrt(|G²x| / |x|)`, which also converges when
    /// the dominant eigenvalues are `±ρ` (bipartite components).
    pub fn spectral_radius_upper_bound(&self) -> f64 {
        const MIN_ITERS: usize = 50;
        const MAX_ITERS: usize = 2000;
        if self.col_idx.is_empty() {
            return 0.0;
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut x = vec![1.0 / (self.n as f64).sqrt(); self.n];
        let mut estimate = 0.0;
        for it in 0..MAX_ITERS {
            let g1 = self.aggregate_vec_unchecked(&x);
            let g2 = self.aggregate_vec_unchecked(&g1);
            let n2 = norm(&g2);
            if n2 == 0.0 {
                return 0.0;
            }
            let next = (n2 / norm(&x)).sqrt();
            let change = (next - estimate).abs() / next;
            estimate = next;
            x = g2.into_iter().map(|v| v / n2).collect();
            if it + 1 >= MIN_ITERS && change < 1e-10 {
                break;
            }
        }
        estimate
    }
}

/// Returns the edges and the largest node id seen.
pub(crate) fn parse_edge_list(
    text: &str,
) -> std::result::Result<(Vec<(usize, usize)>, Option<usize>), String> {
    let mut edges = Vec::new();
    let mut max_id: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut next_id = || -> std::result::Result<usize, String> {
            let tok = parts
                .next()
                .ok_or_else(|| format!("line {}: expected two node ids", lineno + 1))?;
            tok.parse::<usize>()
                .map_err(|e| format!("line {}: bad node id {tok:?}: {e}", lineno + 1))
        };
        let a = next_id()?;
        let b = next_id()?;
        if parts.next().is_some() {
            return Err(format!("line {}: more than two fields", lineno + 1));
        }
        max_id = Some(max_id.map_or(a.max(b), |m| m.max(a).max(b)));
        edges.push((a, b));
    }
    Ok((edges, max_id))
}
