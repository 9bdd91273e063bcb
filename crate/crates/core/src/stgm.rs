//! Spatial-temporal GraphFormer: local aggregation with pruned, dynamically
//! rebuilt graphs.
//!
//! Graph construction for node rows `r_i`:
//!
//! 1. edge score `e_ij = F_map([Euc(r_i,r_j), Cos(r_i,r_j), r_iᵀr_j])`, where
//!    `F_map` is a two-layer MLP and `Euc` is the Euclidean distance after
//!    dividing each feature by its standard deviation over the nodes;
//! 2. adjacency `A = softmax_row(e)`;
//! 3. adjacency tensor: slice 1 is the identity, slice `s ≥ 2` keeps the
//!    off-diagonal `A_ij` whose probability `P_ij = λ·A_ij / d_i` lies in
//!    `[θ_{s-1}, θ_s)`, with `d_i = Σ_j (A + E)_ij`;
//! 4. two convex slice mixtures `Q1`, `Q2` with softmax-normalized logits;
//! 5. `Ā = ψ(Q1·Q2 + E)` where `ψ(Y) = D^{-1/2} Y D^{-1/2}` on row degrees.
//!
//! A graph convolution layer maps `H[D×M]` to `ReLU(W·H·Ā(H))`, rebuilding
//! the graph from its own input, and a block stacks layers with a `ρ·H`
//! residual.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::params::{bind, join};
use crate::rng::SeedStream;
use crate::tape::{evaluate, Tape, Var};
use crate::tensor::Tensor;
use crate::tokenizer::TokenFrame;

/// Variance floor of the standardized Euclidean distance.
pub const STANDARDIZE_FLOOR: f64 = 1e-8;
/// Norms below this give a cosine similarity of zero.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

/// Threshold partition used to build the adjacency tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Ascending thresholds `θ_1 < … < θ_S` in `[0, 1]`.
    pub thresholds: Vec<f64>,
    pub lambda: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.1, 0.3, 1.0],
            lambda: 0.3,
        }
    }
}

impl PruneConfig {
    pub fn slices(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::config("stgm.thresholds", "at least one threshold is required"));
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("stgm.thresholds", "thresholds must lie in [0, 1]"));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("stgm.thresholds", "thresholds must be strictly ascending"));
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("stgm.lambda", "must be finite"));
        }
        Ok(())
    }
}

/// Node set of the temporal graphs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalGraph {
    /// One graph per spatial location, with a node per frame.
    #[default]
    PerLocation,
    /// A single graph over every token of every frame.
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StgmConfig {
    pub prune: PruneConfig,
    pub rho: f64,
    pub temporal_graph: TemporalGraph,
}

impl Default for StgmConfig {
    fn default() -> Self {
        Self {
            prune: PruneConfig::default(),
            rho: 0.5,
            temporal_graph: TemporalGraph::PerLocation,
        }
    }
}

/// The edge mapping MLP `3 → hidden → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMlpParams<P = Tensor> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

impl<P> EdgeMlpParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> EdgeMlpParams<U> {
        EdgeMlpParams {
            w1: f(&join(prefix, "w1"), &self.w1),
            b1: f(&join(prefix, "b1"), &self.b1),
            w2: f(&join(prefix, "w2"), &self.w2),
            b2: f(&join(prefix, "b2"), &self.b2),
        }
    }
}

impl EdgeMlpParams {
    pub fn init(seeds: &SeedStream, label: &str, hidden: usize) -> Self {
        Self {
            w1: seeds.init(&join(label, "w1"), &[3, hidden], 3),
            b1: seeds.init(&join(label, "b1"), &[hidden], 3),
            w2: seeds.init(&join(label, "w2"), &[hidden, 1], hidden),
            b2: seeds.init(&join(label, "b2"), &[1], hidden),
        }
    }
}

/// Learned parts of graph construction: the edge MLP and the two slice
/// selection logit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphParams<P = Tensor> {
    pub edge_mlp: EdgeMlpParams<P>,
    pub select1: P,
    pub select2: P,
}

impl<P> GraphParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> GraphParams<U> {
        GraphParams {
            edge_mlp: self.edge_mlp.map(&join(prefix, "edge_mlp"), f),
            select1: f(&join(prefix, "select1"), &self.select1),
            select2: f(&join(prefix, "select2"), &self.select2),
        }
    }
}

impl GraphParams {
    pub fn init(seeds: &SeedStream, label: &str, hidden: usize, slices: usize) -> Self {
        Self {
            edge_mlp: EdgeMlpParams::init(seeds, &join(label, "edge_mlp"), hidden),
            select1: seeds.init(&join(label, "select1"), &[slices], slices),
            select2: seeds.init(&join(label, "select2"), &[slices], slices),
        }
    }
}

/// Parameters of one graph convolution block: a `D×D` weight per layer and
/// the graph construction shared by all of its layers.
#[derive(Clone, Debug, PartialEq)]
pub struct DgclParams<P = Tensor> {
    pub weights: Vec<P>,
    pub graph: GraphParams<P>,
}

impl<P> DgclParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> DgclParams<U> {
        DgclParams {
            weights: self
                .weights
                .iter()
                .enumerate()
                .map(|(i, w)| f(&join(prefix, &format!("w{i}")), w))
                .collect(),
            graph: self.graph.map(&join(prefix, "graph"), f),
        }
    }
}

impl DgclParams {
    pub fn init(
        seeds: &SeedStream,
        label: &str,
        d: usize,
        layers: usize,
        hidden: usize,
        slices: usize,
    ) -> Self {
        Self {
            weights: (0..layers)
                .map(|i| seeds.init(&join(label, &format!("w{i}")), &[d, d], d))
                .collect(),
            graph: GraphParams::init(seeds, &join(label, "graph"), hidden, slices),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StgmParams<P = Tensor> {
    pub spatial: DgclParams<P>,
    pub temporal: DgclParams<P>,
}

impl<P> StgmParams<P> {
    pub fn map<U, F: FnMut(&str, &P) -> U>(&self, prefix: &str, f: &mut F) -> StgmParams<U> {
        StgmParams {
            spatial: self.spatial.map(&join(prefix, "spatial"), f),
            temporal: self.temporal.map(&join(prefix, "temporal"), f),
        }
    }
}

impl StgmParams {
    pub fn init(
        seeds: &SeedStream,
        label: &str,
        d: usize,
        layers: usize,
        hidden: usize,
        slices: usize,
    ) -> Self {
        Self {
            spatial: DgclParams::init(seeds, &join(label, "spatial"), d, layers, hidden, slices),
            temporal: DgclParams::init(seeds, &join(label, "temporal"), d, layers, hidden, slices),
        }
    }
}

/// `P_ij = λ·A_ij / d_i` with `d_i = Σ_j (A + E)_ij`.
pub fn probability_matrix(a: &Tensor, lambda: f64) -> Tensor {
    let m = a.rows();
    let degree: Vec<f64> = (0..m).map(|i| a.row(i).iter().sum::<f64>() + 1.0).collect();
    Tensor::from_fn(a.shape(), |i| lambda * a.at(i[0], i[1]) / degree[i[0]])
}

/// Membership masks of slices `2..=S` (flattened `M×M`, row-major).
fn slice_masks(a: &Tensor, cfg: &PruneConfig) -> Vec<Vec<bool>> {
    let p = probability_matrix(a, cfg.lambda);
    let m = a.rows();
    cfg.thresholds
        .windows(2)
        .map(|w| {
            (0..m * m)
                .map(|idx| {
                    let (i, j) = (idx / m, idx % m);
                    let v = p.at(i, j);
                    i != j && w[0] <= v && v < w[1]
                })
                .collect()
        })
        .collect()
}

pub mod traced {
    use super::*;

    pub fn edge_scores(tape: &mut Tape, r: Var, mlp: &EdgeMlpParams<Var>) -> Result<Var> {
        let m = tape.shape(r)[0];
        let s = tape.column_standardize(r, STANDARDIZE_FLOOR)?;
        let euc = tape.pairwise_distance(s)?;
        let u = tape.row_unit(r, COSINE_NORM_FLOOR)?;
        let ut = tape.transpose(u)?;
        let cos = tape.matmul(u, ut)?;
        let rt = tape.transpose(r)?;
        let sec = tape.matmul(r, rt)?;
        let cols = [euc, cos, sec]
            .into_iter()
            .map(|v| tape.reshape(v, &[m * m, 1]))
            .collect::<Result<Vec<_>>>()?;
        let feats = tape.concat_cols(&cols)?;
        let h = tape.linear(feats, mlp.w1, mlp.b1)?;
        let h = tape.relu(h);
        let e = tape.linear(h, mlp.w2, mlp.b2)?;
        tape.reshape(e, &[m, m])
    }

    pub fn adjacency(tape: &mut Tape, e: Var) -> Result<Var> {
        tape.softmax_rows(e)
    }

    /// Adjacency tensor as an `[S, M·M]` node, one flattened slice per row.
    pub fn adjacency_tensor(tape: &mut Tape, a: Var, cfg: &PruneConfig) -> Result<Var> {
        cfg.validate()?;
        let m = tape.shape(a)[0];
        let masks = slice_masks(tape.value(a), cfg);
        let eye = tape.leaf(Tensor::eye(m).reshape(&[1, m * m])?);
        let mut rows = vec![eye];
        let flat = tape.reshape(a, &[1, m * m])?;
        for mask in masks {
            let mt = Tensor::new(
                &[1, m * m],
                mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?;
            tape.note_branches(mask);
            let mv = tape.leaf(mt);
            rows.push(tape.mul(flat, mv)?);
        }
        tape.concat_rows(&rows)
    }

    /// `Σ_s softmax(logits)_s · slice_s`, reshaped to `M×M`.
    pub fn soft_select(tape: &mut Tape, stack: Var, logits: Var) -> Result<Var> {
        let (s, mm) = (tape.shape(stack)[0], tape.shape(stack)[1]);
        if tape.value(logits).numel() != s {
            return Err(Error::dim("soft_select", tape.shape(stack), tape.shape(logits)));
        }
        let l = tape.reshape(logits, &[1, s])?;
        let w = tape.softmax_rows(l)?;
        let q = tape.matmul(w, stack)?;
        let m = (mm as f64).sqrt().round() as usize;
        tape.reshape(q, &[m, m])
    }

    pub fn laplacian_normalize(tape: &mut Tape, y: Var) -> Result<Var> {
        let deg = tape.row_sum(y)?;
        if let Some((row, &degree)) = tape
            .value(deg)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &d)| d <= 0.0)
        {
            return Err(Error::DegenerateGraph { row, degree });
        }
        let inv = tape.powf(deg, -0.5);
        let c = tape.scale_cols(y, inv)?;
        tape.scale_rows(c, inv)
    }

    /// Final pruned adjacency `Ā` of the graph over the rows of `r`.
    pub fn pruned_adjacency(
        tape: &mut Tape,
        r: Var,
        p: &GraphParams<Var>,
        cfg: &PruneConfig,
    ) -> Result<Var> {
        let m = tape.shape(r)[0];
        let e = edge_scores(tape, r, &p.edge_mlp)?;
        let a = adjacency(tape, e)?;
        let stack = adjacency_tensor(tape, a, cfg)?;
        let q1 = soft_select(tape, stack, p.select1)?;
        let q2 = soft_select(tape, stack, p.select2)?;
        let qq = tape.matmul(q1, q2)?;
        let eye = tape.leaf(Tensor::eye(m));
        let y = tape.add(qq, eye)?;
        laplacian_normalize(tape, y)
    }

    /// `ReLU(W·H·Ā(H))` with the graph rebuilt from the columns of `h`.
    pub fn dgcl(
        tape: &mut Tape,
        h: Var,
        w: Var,
        graph: &GraphParams<Var>,
        cfg: &PruneConfig,
    ) -> Result<Var> {
        let r = tape.transpose(h)?;
        let abar = pruned_adjacency(tape, r, graph, cfg)?;
        let wh = tape.matmul(w, h)?;
        let out = tape.matmul(wh, abar)?;
        Ok(tape.relu(out))
    }

    /// Stacked layers plus the `ρ·H` residual. With no layers the block
    /// reduces to the residual alone.
    pub fn dgcb(
        tape: &mut Tape,
        h: Var,
        p: &DgclParams<Var>,
        cfg: &StgmConfig,
    ) -> Result<Var> {
        let mut x = h;
        for &w in &p.weights {
            x = dgcl(tape, x, w, &p.graph, &cfg.prune)?;
        }
        let res = tape.scale(h, cfg.rho);
        if p.weights.is_empty() {
            Ok(res)
        } else {
            tape.add(x, res)
        }
    }

    /// Local aggregated features, `[(N·M)×D]` frame-major. `inputs` holds the
    /// token+position sum (`M×D`) of each frame.
    pub fn stgm_forward(
        tape: &mut Tape,
        inputs: &[Var],
        p: &StgmParams<Var>,
        cfg: &StgmConfig,
    ) -> Result<Var> {
        let first = *inputs.first().ok_or(Error::EmptyInput("stgm_forward"))?;
        let shape = tape.shape(first).to_vec();
        for &z in inputs {
            if tape.shape(z) != shape.as_slice() {
                return Err(Error::dim("stgm_forward", &shape, tape.shape(z)));
            }
        }
        let (n, m) = (inputs.len(), shape[0]);

        let mut inter = Vec::with_capacity(n);
        for &z in inputs {
            let h = tape.transpose(z)?;
            inter.push(dgcb(tape, h, &p.spatial, cfg)?);
        }

        let local = match cfg.temporal_graph {
            TemporalGraph::Full => {
                let all = tape.concat_cols(&inter)?;
                dgcb(tape, all, &p.temporal, cfg)?
            }
            TemporalGraph::PerLocation => {
                let mut per_loc = Vec::with_capacity(m);
                for loc in 0..m {
                    let cols = inter
                        .iter()
                        .map(|&h| tape.slice_cols(h, loc, 1))
                        .collect::<Result<Vec<_>>>()?;
                    let h = tape.concat_cols(&cols)?;
                    per_loc.push(dgcb(tape, h, &p.temporal, cfg)?);
                }
                let mut cols = Vec::with_capacity(n * m);
                for frame in 0..n {
                    for &t in &per_loc {
                        cols.push(tape.slice_cols(t, frame, 1)?);
                    }
                }
                tape.concat_cols(&cols)?
            }
        };
        tape.transpose(local)
    }
}

pub fn edge_scores(r: &Tensor, mlp: &EdgeMlpParams) -> Result<Tensor> {
    evaluate(|t| {
        let p = mlp.map("", &mut bind(t));
        let rv = t.leaf(r.clone());
        traced::edge_scores(t, rv, &p)
    })
}

pub fn adjacency(e: &Tensor) -> Result<Tensor> {
    crate::tensor::softmax(e, 1)
}

/// Adjacency tensor `[S, M, M]`.
pub fn adjacency_tensor(a: &Tensor, cfg: &PruneConfig) -> Result<Tensor> {
    let m = a.rows();
    let flat = evaluate(|t| {
        let av = t.leaf(a.clone());
        traced::adjacency_tensor(t, av, cfg)
    })?;
    flat.reshape(&[cfg.slices(), m, m])
}

/// Both slice mixtures `(Q1, Q2)` of an `[S, M, M]` adjacency tensor.
pub fn soft_select(stack: &Tensor, graph: &GraphParams) -> Result<(Tensor, Tensor)> {
    if stack.rank() != 3 {
        return Err(Error::dim("soft_select", stack.shape(), &[0, 0, 0]));
    }
    let (s, m) = (stack.shape()[0], stack.shape()[1]);
    let select = |logits: &Tensor| {
        evaluate(|t| {
            let st = t.leaf(stack.reshape(&[s, m * m])?);
            let l = t.leaf(logits.clone());
            traced::soft_select(t, st, l)
        })
    };
    Ok((select(&graph.select1)?, select(&graph.select2)?))
}

pub fn laplacian_normalize(y: &Tensor) -> Result<Tensor> {
    evaluate(|t| {
        let yv = t.leaf(y.clone());
        traced::laplacian_normalize(t, yv)
    })
}

pub fn pruned_adjacency(r: &Tensor, graph: &GraphParams, cfg: &PruneConfig) -> Result<Tensor> {
    evaluate(|t| {
        let p = graph.map("", &mut bind(t));
        let rv = t.leaf(r.clone());
        traced::pruned_adjacency(t, rv, &p, cfg)
    })
}

pub fn dgcl(h: &Tensor, w: &Tensor, graph: &GraphParams, cfg: &PruneConfig) -> Result<Tensor> {
    evaluate(|t| {
        let p = graph.map("", &mut bind(t));
        let hv = t.leaf(h.clone());
        let wv = t.leaf(w.clone());
        traced::dgcl(t, hv, wv, &p, cfg)
    })
}

pub fn dgcb(h: &Tensor, params: &DgclParams, cfg: &StgmConfig) -> Result<Tensor> {
    evaluate(|t| {
        let p = params.map("", &mut bind(t));
        let hv = t.leaf(h.clone());
        traced::dgcb(t, hv, &p, cfg)
    })
}

pub fn stgm_forward(frames: &[TokenFrame], params: &StgmParams, cfg: &StgmConfig) -> Result<Tensor> {
    evaluate(|t| {
        let p = params.map("", &mut bind(t));
        let inputs: Vec<Var> = frames.iter().map(|f| t.leaf(f.summed())).collect();
        traced::stgm_forward(t, &inputs, &p, cfg)
    })
    .stage("stgm")
}

/// Every intermediate of one graph construction.
#[derive(Clone, Debug)]
pub struct PrunedGraph {
    /// Node features, `D×M`.
    pub nodes: Tensor,
    pub edges: Tensor,
    pub adjacency: Tensor,
    pub probability: Tensor,
    /// `[S, M, M]`.
    pub tensor: Tensor,
    pub q1: Tensor,
    pub q2: Tensor,
    pub pruned: Tensor,
}

impl PrunedGraph {
    pub fn build(r: &Tensor, graph: &GraphParams, cfg: &PruneConfig) -> Result<Self> {
        let edges = edge_scores(r, &graph.edge_mlp)?;
        let adjacency = adjacency(&edges)?;
        let tensor = adjacency_tensor(&adjacency, cfg)?;
        let (q1, q2) = soft_select(&tensor, graph)?;
        let m = r.rows();
        let y = crate::tensor::matmul(&q1, &q2)?.add(&Tensor::eye(m))?;
        let pruned = laplacian_normalize(&y)?;
        Ok(Self {
            nodes: r.transpose()?,
            probability: probability_matrix(&adjacency, cfg.lambda),
            edges,
            adjacency,
            tensor,
            q1,
            q2,
            pruned,
        })
    }

    fn slice(&self, s: usize) -> &[f64] {
        let m = self.adjacency.rows();
        &self.tensor.data()[s * m * m..(s + 1) * m * m]
    }

    /// Named structural checks on this graph.
    pub fn invariants(&self) -> Vec<(&'static str, bool)> {
        let m = self.adjacency.rows();
        let rows_stochastic =
            (0..m).all(|i| (self.adjacency.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let first_is_identity = self.slice(0) == Tensor::eye(m).data();
        let s = self.tensor.shape()[0];
        let mut partition = true;
        for idx in 0..m * m {
            let (i, j) = (idx / m, idx % m);
            if i == j {
                continue;
            }
            let hits: Vec<f64> = (1..s)
                .map(|k| self.slice(k)[idx])
                .filter(|&v| v != 0.0)
                .collect();
            partition &= hits.len() <= 1 && hits.iter().all(|&v| v == self.adjacency.at(i, j));
        }
        let nonneg = self.pruned.data().iter().all(|&v| v >= 0.0);
        vec![
            ("adjacency_row_stochastic", rows_stochastic),
            ("tensor_first_slice_identity", first_is_identity),
            ("tensor_slice_partition", partition),
            ("pruned_nonnegative", nonneg),
        ]
    }
}
