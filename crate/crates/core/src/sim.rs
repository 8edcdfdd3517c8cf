//! Ground-truth simulator for the linear-in-peers structural model
//!
//! ```text
//! Y = β·G·Y + (G·X)·γ + g(X)·δ + λ·U + ω·(G·U) + ε
//! ```
//!
//! solved to its feedback equilibrium. `g` is the identity in linear mode and
//! `tanh(x) + x²/4` elementwise in nonlinear mode; the peer term stays linear
//! in both, so the true peer effect is exactly `β`.
//!
//! Random streams: every dataset is a pure function of `(n, d, graph spec,
//! params, seed)`. Each ingredient draws from its own ChaCha stream derived
//! from the seed, so changing e.g. the confounder settings leaves the graph
//! and the features untouched (paired comparisons across sweeps rely on this).

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;
use crate::matrix::FeatureMatrix;

const STREAM_GRAPH: u64 = 1;
const STREAM_FEATURES: u64 = 2;
const STREAM_CONFOUNDER: u64 = 3;
const STREAM_NOISE: u64 = 4;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Linear,
    /// `g(x) = tanh(x) + 0.25·x²` on the own-feature channel.
    TanhQuadratic,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Linear => x,
            Nonlinearity::TanhQuadratic => x.tanh() + 0.25 * x * x,
        }
    }
}

/// Structural coefficients and noise scales of the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemParams {
    /// Peer effect. Must satisfy `|beta| < 1`.
    pub beta: f64,
    /// Contextual effect of neighbor-mean features, one per feature column.
    pub gamma: Vec<f64>,
    /// Own-feature effect, one per feature column.
    pub delta: Vec<f64>,
    /// Confounder loading on the own outcome.
    pub lambda_u: f64,
    /// Confounder loading on the peer-exposure channel (enters as `ω·G·U`).
    pub omega: f64,
    /// Leading-order stage-1 coefficient on `X_{G²}` (`γ + β·δ`); descriptive only.
    pub phi: Vec<f64>,
    /// Leading-order stage-1 coefficient on `X_G` (`δ`); descriptive only.
    pub psi: Vec<f64>,
    /// Standard deviation of the outcome noise.
    pub eps_scale: f64,
    /// Standard deviation of the latent draw behind `U`.
    pub confounder_scale: f64,
    /// Share of `U` that is the neighbor mean of the latent draw, in `[0, 1]`.
    pub confounder_mixing: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
}

impl SemParams {
    /// Homogeneous coefficients over `d` features with `phi`/`psi` filled in.
    pub fn new(beta: f64, gamma: f64, delta: f64, d: usize) -> Self {
        let mut p = Self {
            beta,
            gamma: vec![gamma; d],
            delta: vec![delta; d],
            lambda_u: 1.0,
            omega: 1.0,
            phi: Vec::new(),
            psi: Vec::new(),
            eps_scale: 0.1,
            confounder_scale: 1.0,
            confounder_mixing: 0.7,
            nonlinearity: Nonlinearity::Linear,
        };
        p.refresh_stage1_coefficients();
        p
    }

    /// Default process over `d` features: β = 0.5, γ = 0.5, δ = 0.25, λ = ω = 1.
    pub fn default_for(d: usize) -> Self {
        Self::new(0.5, 0.5, 0.25, d)
    }

    pub fn with_confounding(mut self, strength: f64) -> Self {
        self.lambda_u = strength;
        self.omega = strength;
        self
    }

    pub fn with_nonlinearity(mut self, nl: Nonlinearity) -> Self {
        self.nonlinearity = nl;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self.refresh_stage1_coefficients();
        self
    }

    /// Recompute `phi = γ + β·δ` and `psi = δ` from the other coefficients.
    pub fn refresh_stage1_coefficients(&mut self) {
        self.phi = self
            .gamma
            .iter()
            .zip(&self.delta)
            .map(|(g, d)| g + self.beta * d)
            .collect();
        self.psi = self.delta.clone();
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.abs() < 1.0) {
            return Err(Error::param(format!(
                "|beta| must be < 1 for the feedback equilibrium to exist, got {}",
                self.beta
            )));
        }
        if self.gamma.len() != self.delta.len() {
            return Err(Error::param("gamma and delta must have the same length"));
        }
        if self.gamma.is_empty() {
            return Err(Error::param("at least one feature is required"));
        }
        if !(self.eps_scale > 0.0) || !(self.confounder_scale > 0.0) {
            return Err(Error::param("noise and confounder scales must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.confounder_mixing) {
            return Err(Error::param("confounder_mixing must lie in [0, 1]"));
        }
        let all = self
            .gamma
            .iter()
            .chain(&self.delta)
            .chain(&self.phi)
            .chain(&self.psi)
            .chain([&self.lambda_u, &self.omega]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::param("coefficients must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    ErdosRenyi { p: f64 },
    BarabasiAlbert { m: usize },
    FromFile { path: PathBuf },
}

/// Known ground truth attached to simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub params: SemParams,
    pub seed: u64,
}

/// Node-level data with the derived network aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub graph: SparseGraph,
    pub x: FeatureMatrix,
    pub y: Vec<f64>,
    pub y_g: Vec<f64>,
    pub x_g: FeatureMatrix,
    pub x_g2: FeatureMatrix,
    /// Hidden confounder; only present for simulated data.
    pub u: Option<Vec<f64>>,
    pub truth: Option<Truth>,
    /// Whether the `(I − G)` transform has been applied.
    pub transformed: bool,
}

impl Dataset {
    /// Derive `Y_G`, `X_G`, `X_{G²}` from the graph.
    pub fn new(
        graph: SparseGraph,
        x: FeatureMatrix,
        y: Vec<f64>,
        u: Option<Vec<f64>>,
        truth: Option<Truth>,
    ) -> Result<Self> {
        let n = graph.n();
        if x.rows() != n || y.len() != n || u.as_ref().is_some_and(|u| u.len() != n) {
            return Err(Error::dim(format!(
                "dataset vectors must all have length {n} (X has {}, Y has {})",
                x.rows(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("outcomes must be finite"));
        }
        let y_g = graph.aggregate_vec(&y)?;
        let x_g = graph.aggregate(&x)?;
        let x_g2 = graph.aggregate(&x_g)?;
        Ok(Self {
            graph,
            x,
            y,
            y_g,
            x_g,
            x_g2,
            u,
            truth,
            transformed: false,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn true_beta(&self) -> Option<f64> {
        self.truth.as_ref().map(|t| t.params.beta)
    }

    /// Replace every variable `V` by `(I − G)·V`; the original is untouched.
    pub fn preprocess_ig(&self) -> Result<Dataset> {
        let g = &self.graph;
        Ok(Dataset {
            graph: g.clone(),
            x: g.ig_transform(&self.x)?,
            y: g.ig_transform_vec(&self.y)?,
            y_g: g.ig_transform_vec(&self.y_g)?,
            x_g: g.ig_transform(&self.x_g)?,
            x_g2: g.ig_transform(&self.x_g2)?,
            u: self.u.as_ref().map(|u| g.ig_transform_vec(u)).transpose()?,
            truth: self.truth.clone(),
            transformed: true,
        })
    }
}

/// Seeded random graph, row-normalized.
pub fn gen_graph(n: usize, spec: &GraphSpec, seed: u64) -> Result<SparseGraph> {
    if n < 2 && !matches!(spec, GraphSpec::FromFile { .. }) {
        return Err(Error::param(format!("need at least 2 nodes, got {n}")));
    }
    let mut rng = stream_rng(seed, STREAM_GRAPH);
    match spec {
        GraphSpec::ErdosRenyi { p } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::param(format!("edge probability must be in (0, 1], got {p}")));
            }
            SparseGraph::from_edge_list(&erdos_renyi_edges(n, *p, &mut rng), n)
        }
        GraphSpec::BarabasiAlbert { m } => {
            if *m < 1 {
                return Err(Error::param("attachment count m must be >= 1"));
            }
            SparseGraph::from_edge_list(&barabasi_albert_edges(n, *m, &mut rng), n)
        }
        GraphSpec::FromFile { path } => SparseGraph::read_edge_list(path, Some(n)),
    }
}

/// G(n, p) by geometric skipping over the upper triangle; O(n + edges).
fn erdos_renyi_edges(n: usize, p: f64, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    if p >= 1.0 {
        for i in 0..n {
            for j in i + 1..n {
                edges.push((i, j));
            }
        }
        return edges;
    }
    let log_q = (1.0 - p).ln();
    // Walk pairs (v, w) with w < v, as in Batagelj & Brandes.
    let (mut v, mut w) = (1usize, -1i64);
    while v < n {
        let r: f64 = rng.random();
        let skip = ((1.0 - r).ln() / log_q).floor() as i64;
        w += 1 + skip;
        while v < n && w >= v as i64 {
            w -= v as i64;
            v += 1;
        }
        if v < n {
            edges.push((w as usize, v));
        }
    }
    edges
}

/// Preferential attachment seeded with a clique on the first `m + 1` nodes.
fn barabasi_albert_edges(n: usize, m: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let core = (m + 1).min(n);
    let mut edges = Vec::new();
    // Each node appears once per incident edge.
    let mut targets: Vec<usize> = Vec::new();
    for i in 0..core {
        for j in i + 1..core {
            edges.push((i, j));
            targets.push(i);
            targets.push(j);
        }
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for v in core..n {
        chosen.clear();
        while chosen.len() < m {
            let t = targets[rng.random_range(0..targets.len())];
            if !chosen.contains(&t) {
                chosen.push(t);
            }
        }
        chosen.sort_unstable();
        for &t in &chosen {
            edges.push((t, v));
            targets.push(t);
            targets.push(v);
        }
    }
    edges
}

/// `U = (1 − mixing)·Z + mixing·G·Z` with `Z ~ N(0, scale²)` iid.
pub fn gen_confounders(g: &SparseGraph, scale: f64, mixing: f64, seed: u64) -> Result<Vec<f64>> {
    if !(scale > 0.0) || !(0.0..=1.0).contains(&mixing) {
        return Err(Error::param("confounder scale must be > 0 and mixing in [0, 1]"));
    }
    let mut rng = stream_rng(seed, STREAM_CONFOUNDER);
    let dist = Normal::new(0.0, scale).map_err(|e| Error::param(e.to_string()))?;
    let z: Vec<f64> = (0..g.n()).map(|_| dist.sample(&mut rng)).collect();
    let gz = g.aggregate_vec(&z)?;
    Ok(z.iter()
        .zip(&gz)
        .map(|(a, b)| (1.0 - mixing) * a + mixing * b)
        .collect())
}

pub const EQUILIBRIUM_MAX_ITERS: usize = 10_000;

/// Solve `(I − β·G)·Y = c` by the fixed-point sweep `Y ← c + β·G·Y`.
pub fn solve_equilibrium(g: &SparseGraph, beta: f64, c: &[f64]) -> Result<Vec<f64>> {
    if c.len() != g.n() {
        return Err(Error::dim(format!(
            "right-hand side has length {}, graph has {} nodes",
            c.len(),
            g.n()
        )));
    }
    let rho = g.spectral_radius_upper_bound();
    if !(beta.abs() * rho < 1.0) {
        return Err(Error::param(format!(
            "|beta|*rho(G) = {} must be < 1",
            beta.abs() * rho
        )));
    }
    let mut y = c.to_vec();
    let mut last_change = f64::INFINITY;
    for _ in 0..EQUILIBRIUM_MAX_ITERS {
        let gy = g.aggregate_vec_unchecked(&y);
        let mut change: f64 = 0.0;
        let mut scale: f64 = 1.0;
        for ((yi, ci), gi) in y.iter_mut().zip(c).zip(&gy) {
            let next = ci + beta * gi;
            change = change.max((next - *yi).abs());
            scale = scale.max(next.abs());
            *yi = next;
        }
        last_change = change;
        if change < 1e-12 * scale {
            let gy = g.aggregate_vec_unchecked(&y);
            let resid = y
                .iter()
                .zip(c)
                .zip(&gy)
                .map(|((yi, ci), gi)| (yi - ci - beta * gi).abs())
                .fold(0.0, f64::max);
            if resid < 1e-10 * scale {
                return Ok(y);
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: EQUILIBRIUM_MAX_ITERS,
        last_change,
    })
}

/// Ingredients of a simulated dataset before the equilibrium solve.
#[derive(Debug, Clone)]
pub struct StructuralDraw {
    pub x: FeatureMatrix,
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
    /// Right-hand side `c` of `(I − β·G)·Y = c`.
    pub rhs: Vec<f64>,
}

/// Draw `X`, `U`, `ε` on a given graph and assemble the right-hand side.
pub fn draw_structural(
    graph: &SparseGraph,
    d: usize,
    params: &SemParams,
    seed: u64,
) -> Result<StructuralDraw> {
    params.validate()?;
    if params.dim() != d {
        return Err(Error::param(format!(
            "params carry {} coefficients, expected d = {d}",
            params.dim()
        )));
    }
    let n = graph.n();
    let mut rng = stream_rng(seed, STREAM_FEATURES);
    let xs: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = FeatureMatrix::from_vec(n, d, xs)?;
    let u = gen_confounders(
        graph,
        params.confounder_scale,
        params.confounder_mixing,
        seed,
    )?;
    let mut rng = stream_rng(seed, STREAM_NOISE);
    let noise = Normal::new(0.0, params.eps_scale).map_err(|e| Error::param(e.to_string()))?;
    let eps: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();

    let x_g = graph.aggregate(&x)?;
    let g_u = graph.aggregate_vec(&u)?;
    let rhs = (0..n)
        .map(|i| {
            let contextual: f64 = x_g.row(i).iter().zip(&params.gamma).map(|(a, b)| a * b).sum();
            let own: f64 = x
                .row(i)
                .iter()
                .zip(&params.delta)
                .map(|(a, b)| params.nonlinearity.apply(*a) * b)
                .sum();
            contextual + own + params.lambda_u * u[i] + params.omega * g_u[i] + eps[i]
        })
        .collect();
    Ok(StructuralDraw { x, u, eps, rhs })
}

/// Simulate a dataset on a freshly generated graph.
pub fn gen_dataset(
    n: usize,
    d: usize,
    graph_spec: &GraphSpec,
    params: &SemParams,
    seed: u64,
) -> Result<Dataset> {
    params.validate()?;
    let graph = gen_graph(n, graph_spec, seed)?;
    gen_dataset_on(graph, d, params, seed)
}

/// Simulate outcomes on a fixed graph.
pub fn gen_dataset_on(graph: SparseGraph, d: usize, params: &SemParams, seed: u64) -> Result<Dataset> {
    let draw = draw_structural(&graph, d, params, seed)?;
    let y = solve_equilibrium(&graph, params.beta, &draw.rhs)?;
    Dataset::new(
        graph,
        draw.x,
        y,
        Some(draw.u),
        Some(Truth {
            params: params.clone(),
            seed,
        }),
    )
}
