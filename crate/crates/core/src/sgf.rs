//! Sparse graph fusion of binocular gaze features with head-pose features.
//!
//! Every feature dimension is a scalar node: `2·d_e` gaze nodes (left eye,
//! then right eye) and `d_p` pose nodes. A small MLP scores each
//! gaze/pose pair from the scalar difference of their values, each gaze node
//! keeps its top-`k` pose nodes as neighbors, and `L` layers of
//! `nᵢ ← w_self·nᵢ + b_self + Σ_{j∈N(i)} w_nbr·pⱼ`, `pⱼ ← w_pose·pⱼ + b_pose`
//! mix pose information into the gaze nodes. A linear readout maps the
//! final gaze nodes to the fused representation.
//!
//! Selection is hard, so no gradient reaches the similarity MLP through the
//! adjacency.

use std::rc::Rc;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::random::gaussian_matrix;
use crate::numerics::{GatherSum, Matrix, NodeId, Tape};

/// Column layout of [`SgfParams::layers`].
pub const W_SELF: usize = 0;
pub const B_SELF: usize = 1;
pub const W_NBR: usize = 2;
pub const W_POSE: usize = 3;
pub const B_POSE: usize = 4;
pub const LAYER_PARAMS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct SgfConfig {
    /// Pose neighbors per gaze node.
    pub k: usize,
    pub layers: usize,
    /// Hidden width of the similarity MLP.
    pub hidden: usize,
    /// Width of the fused representation.
    pub d_g: usize,
    pub recompute_adjacency_per_layer: bool,
    pub static_pose_nodes: bool,
}

impl Default for SgfConfig {
    fn default() -> Self {
        Self { k: 1, layers: 4, hidden: 8, d_g: 32, recompute_adjacency_per_layer: false, static_pose_nodes: false }
    }
}

impl SgfConfig {
    pub fn validate(&self, pose_nodes: usize) -> Result<()> {
        if self.k == 0 || self.k > pose_nodes {
            return invalid(format!("k must lie in 1..={pose_nodes}, got {}", self.k));
        }
        if self.layers == 0 || self.hidden == 0 || self.d_g == 0 {
            return invalid("layers, hidden and d_g must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgfParams {
    /// `1 x h` weights and biases of the first similarity layer.
    pub sim_w1: Matrix,
    pub sim_b1: Matrix,
    /// `h x 1` weights and `1 x 1` bias of the second similarity layer.
    pub sim_w2: Matrix,
    pub sim_b2: Matrix,
    /// `L x 5`: one row of scalar affine parameters per layer.
    pub layers: Matrix,
    /// `2·d_e x d_g` readout.
    pub readout_w: Matrix,
    pub readout_b: Matrix,
}

impl SgfParams {
    pub fn init<R: Rng + ?Sized>(gaze_nodes: usize, cfg: &SgfConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let mut layers = Matrix::zeros(cfg.layers, LAYER_PARAMS);
        for l in 0..cfg.layers {
            layers.set(l, W_SELF, 1.0);
            layers.set(l, W_NBR, 0.1);
            layers.set(l, W_POSE, 1.0);
        }
        let readout_scale = (1.0 / gaze_nodes as f64).sqrt();
        Self {
            sim_w1: gaussian_matrix(1, h, rng),
            sim_b1: gaussian_matrix(1, h, rng).scale(0.1),
            sim_w2: gaussian_matrix(h, 1, rng).scale((1.0 / h as f64).sqrt()),
            sim_b2: Matrix::zeros(1, 1),
            layers,
            readout_w: gaussian_matrix(gaze_nodes, cfg.d_g, rng).scale(readout_scale),
            readout_b: Matrix::zeros(1, cfg.d_g),
        }
    }

    pub fn gaze_nodes(&self) -> usize {
        self.readout_w.rows()
    }

    /// Similarity MLP on a scalar difference.
    pub fn similarity(&self, diff: f64) -> f64 {
        let h = self.sim_w1.cols();
        let mut out = self.sim_b2.get(0, 0);
        for u in 0..h {
            let pre = self.sim_w1.get(0, u) * diff + self.sim_b1.get(0, u);
            out += self.sim_w2.get(u, 0) * pre.max(0.0);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        [&self.sim_w1, &self.sim_b1, &self.sim_w2, &self.sim_b2, &self.layers, &self.readout_w, &self.readout_b]
            .iter()
            .map(|m| m.len())
            .sum()
    }
}

/// Boolean gaze-to-pose adjacency with exactly `k` ones per row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    rows: usize,
    cols: usize,
    k: usize,
    /// Selected pose indices per row, in selection order.
    selected: Vec<usize>,
}

impl Adjacency {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.selected[i * self.k..(i + 1) * self.k]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).contains(&j)
    }

    pub fn row_sum(&self, i: usize) -> usize {
        (0..self.cols).filter(|&j| self.contains(i, j)).count()
    }

    /// Dense `rows x cols` 0/1 matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if self.contains(i, j) { 1.0 } else { 0.0 })
    }
}

/// `S_ij = similarity(gᵢ − pⱼ)` for every gaze/pose pair.
pub fn node_similarity(gaze: &[f64], pose: &[f64], p: &SgfParams) -> Matrix {
    assert!(!gaze.is_empty() && !pose.is_empty(), "node lists must be non-empty");
    Matrix::from_fn(gaze.len(), pose.len(), |i, j| p.similarity(gaze[i] - pose[j]))
}

/// Per row, the `k` largest entries of `s`; ties go to the lower column index.
pub fn topk_adjacency(s: &Matrix, k: usize) -> Result<Adjacency> {
    if k == 0 || k > s.cols() {
        return invalid(format!("k must lie in 1..={}, got {k}", s.cols()));
    }
    let mut selected = Vec::with_capacity(s.rows() * k);
    let mut order: Vec<usize> = Vec::with_capacity(s.cols());
    for i in 0..s.rows() {
        let row = s.row(i);
        order.clear();
        order.extend(0..s.cols());
        // Stable sort keeps ascending index order among equal scores.
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        selected.extend_from_slice(&order[..k]);
    }
    Ok(Adjacency { rows: s.rows(), cols: s.cols(), k, selected })
}

/// One sample's gaze and pose nodes with their adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeGraph {
    pub gaze_nodes: Vec<f64>,
    pub pose_nodes: Vec<f64>,
    pub adjacency: Adjacency,
}

impl NodeGraph {
    pub fn build(gaze_nodes: Vec<f64>, pose_nodes: Vec<f64>, p: &SgfParams, k: usize) -> Result<Self> {
        if gaze_nodes.is_empty() || pose_nodes.is_empty() {
            return invalid("node lists must be non-empty");
        }
        if gaze_nodes.iter().chain(&pose_nodes).any(|v| !v.is_finite()) {
            return invalid("node values must be finite");
        }
        let adjacency = topk_adjacency(&node_similarity(&gaze_nodes, &pose_nodes, p), k)?;
        Ok(Self { gaze_nodes, pose_nodes, adjacency })
    }
}

/// Batched neighbor table for `b` samples: row `r` of `gaze`/`pose` is one sample.
pub fn batch_adjacency(gaze: &Matrix, pose: &Matrix, p: &SgfParams, k: usize) -> Result<GatherSum> {
    if gaze.rows() != pose.rows() {
        return invalid(format!("gaze and pose batches differ in size ({} vs {})", gaze.rows(), pose.rows()));
    }
    let mut index = Vec::with_capacity(gaze.rows() * gaze.cols() * k);
    for r in 0..gaze.rows() {
        let adj = topk_adjacency(&node_similarity(gaze.row(r), pose.row(r), p), k)?;
        index.extend_from_slice(&adj.selected);
    }
    Ok(GatherSum { rows: gaze.rows(), out_cols: gaze.cols(), k, index })
}

impl From<&Adjacency> for GatherSum {
    fn from(a: &Adjacency) -> Self {
        GatherSum { rows: 1, out_cols: a.rows, k: a.k, index: a.selected.clone() }
    }
}

/// Trainable SGF parameters bound to a tape. The similarity MLP is not
/// bound: with hard top-k it only shapes the adjacency.
#[derive(Clone, Copy, Debug)]
pub struct SgfNodes {
    pub layers: NodeId,
    pub readout_w: NodeId,
    pub readout_b: NodeId,
}

impl SgfNodes {
    pub fn bind(tape: &mut Tape, p: &SgfParams) -> Self {
        Self {
            layers: tape.param(p.layers.clone()),
            readout_w: tape.param(p.readout_w.clone()),
            readout_b: tape.param(p.readout_b.clone()),
        }
    }
}

/// Message passing over `L` layers followed by the readout, batched over rows.
///
/// `adjacency` is used for every layer unless
/// `cfg.recompute_adjacency_per_layer` is set, in which case layers after the
/// first rebuild it from the current node values with `sim`.
pub fn sgf_forward_on_tape(
    tape: &mut Tape,
    gaze: NodeId,
    pose: NodeId,
    nodes: &SgfNodes,
    sim: &SgfParams,
    adjacency: Rc<GatherSum>,
    cfg: &SgfConfig,
) -> Result<NodeId> {
    let (b, q) = tape.value(gaze).shape();
    let d_p = tape.value(pose).cols();
    cfg.validate(d_p)?;
    if tape.value(pose).rows() != b || adjacency.rows != b || adjacency.out_cols != q {
        return invalid("adjacency does not match the node batches");
    }
    if tape.value(nodes.layers).shape() != (cfg.layers, LAYER_PARAMS) {
        return invalid(format!("layer parameters must be {}x{LAYER_PARAMS}", cfg.layers));
    }
    if tape.value(nodes.readout_w).shape() != (q, cfg.d_g) {
        return invalid(format!("readout must be {q}x{}", cfg.d_g));
    }

    let mut n = gaze;
    let mut p = pose;
    let mut adj = adjacency;
    for l in 0..cfg.layers {
        if cfg.recompute_adjacency_per_layer && l > 0 {
            adj = Rc::new(batch_adjacency(tape.value(n), tape.value(p), sim, cfg.k)?);
        }
        let own = tape.mul_entry(n, nodes.layers, (l, W_SELF));
        let own = tape.add_entry(own, nodes.layers, (l, B_SELF));
        let gathered = tape.gather_sum(p, Rc::clone(&adj));
        let msg = tape.mul_entry(gathered, nodes.layers, (l, W_NBR));
        let next = tape.add(own, msg);
        if !cfg.static_pose_nodes {
            let scaled = tape.mul_entry(p, nodes.layers, (l, W_POSE));
            p = tape.add_entry(scaled, nodes.layers, (l, B_POSE));
        }
        n = next;
    }
    Ok(tape.affine(n, nodes.readout_w, nodes.readout_b))
}

/// Fused representation of a single graph.
pub fn sgf_forward(g: &NodeGraph, p: &SgfParams, cfg: &SgfConfig) -> Result<Vec<f64>> {
    if g.adjacency.rows() != g.gaze_nodes.len() || g.adjacency.cols() != g.pose_nodes.len() {
        return invalid("adjacency does not match the node lists");
    }
    if g.adjacency.k() != cfg.k {
        return invalid(format!("adjacency built with k={} but config has k={}", g.adjacency.k(), cfg.k));
    }
    let mut tape = Tape::new();
    let gaze = tape.constant(Matrix::row_vector(&g.gaze_nodes));
    let pose = tape.constant(Matrix::row_vector(&g.pose_nodes));
    let nodes = SgfNodes::bind(&mut tape, p);
    let out = sgf_forward_on_tape(&mut tape, gaze, pose, &nodes, p, Rc::new(GatherSum::from(&g.adjacency)), cfg)?;
    Ok(tape.value(out).data().to_vec())
}
