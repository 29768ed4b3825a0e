//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Each node holds its forward
//! value and the operation that produced it, so nodes are already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Nodes that cannot reach a parameter are marked as not needing gradients
//! and are skipped entirely during the sweep.
//!
//! Shape mismatches between operands are programming errors and panic.

use std::rc::Rc;

use crate::error::{invalid, Result};
use crate::numerics::eigen::{sym_eig, sym_eig_backward, GramSpectrum};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-wise gather-and-sum table: output entry `(r, i)` is the sum of
/// `input[r, j]` over the `k` column indices listed for `(r, i)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherSum {
    pub rows: usize,
    pub out_cols: usize,
    pub k: usize,
    /// `rows * out_cols * k` column indices, row-major over `(r, i)`.
    pub index: Vec<usize>,
}

impl GatherSum {
    pub fn neighbors(&self, r: usize, i: usize) -> &[usize] {
        let start = (r * self.out_cols + i) * self.k;
        &self.index[start..start + self.k]
    }

    pub fn apply(&self, input: &Matrix) -> Matrix {
        assert_eq!(input.rows(), self.rows, "gather-sum row mismatch");
        let mut out = Matrix::zeros(self.rows, self.out_cols);
        for r in 0..self.rows {
            let src = input.row(r);
            for i in 0..self.out_cols {
                let v: f64 = self.neighbors(r, i).iter().map(|&j| src[j]).sum();
                out.set(r, i, v);
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    MulEntry { a: NodeId, p: NodeId, idx: (usize, usize) },
    AddEntry { a: NodeId, p: NodeId, idx: (usize, usize) },
    HStack(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Sum(NodeId),
    Mse(NodeId, Matrix),
    Gather(NodeId, Rc<GatherSum>),
    Gram(NodeId),
    EigVals { g: NodeId, spectrum: Rc<GramSpectrum>, gap_floor: f64 },
    EigVecs { g: NodeId, spectrum: Rc<GramSpectrum>, gap_floor: f64 },
    PinvSpectrum { vals: NodeId, vecs: NodeId, weights: Vec<f64> },
    ColumnCosine { a: NodeId, b: NodeId, eps: f64 },
    L1FromOne(NodeId),
    HeadL2 { a: NodeId, b: NodeId, r: usize },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Single-owner recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints[id.0].as_ref()
    }

    /// Adjoint of `id`, or zeros of the node's shape when nothing reached it.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        self.get(id).cloned().unwrap_or_else(|| {
            let (r, c) = self.shapes[id.0];
            Matrix::zeros(r, c)
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "node {} is not scalar", id.0);
        v.get(0, 0)
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id.0].needs_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients (inputs, frozen weights).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row needs a 1x{} row", av.cols());
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let g = self.any_grad(&[a, row]);
        self.push(v, Op::AddRow(a, row), g)
    }

    /// `x W + b` for `W: in x out`, `b: 1 x out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    /// `a * p[idx]` with a scalar taken from one entry of `p`.
    pub fn mul_entry(&mut self, a: NodeId, p: NodeId, idx: (usize, usize)) -> NodeId {
        let s = self.value(p).get(idx.0, idx.1);
        let v = self.value(a).scale(s);
        let g = self.any_grad(&[a, p]);
        self.push(v, Op::MulEntry { a, p, idx }, g)
    }

    /// `a + p[idx]` elementwise.
    pub fn add_entry(&mut self, a: NodeId, p: NodeId, idx: (usize, usize)) -> NodeId {
        let s = self.value(p).get(idx.0, idx.1);
        let v = self.value(a).map(|x| x + s);
        let g = self.any_grad(&[a, p]);
        self.push(v, Op::AddEntry { a, p, idx }, g)
    }

    pub fn hstack(&mut self, parts: &[NodeId]) -> NodeId {
        let values: Vec<&Matrix> = parts.iter().map(|&id| self.value(id)).collect();
        let v = Matrix::hstack(&values);
        let g = self.any_grad(parts);
        self.push(v, Op::HStack(parts.to_vec()), g)
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let v = self.value(a).select_rows(rows);
        let g = self.any_grad(&[a]);
        self.push(v, Op::SelectRows(a, rows.to_vec()), g)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let g = self.any_grad(&[a]);
        self.push(v, Op::Sum(a), g)
    }

    /// Mean squared error against a constant target, averaged over all entries.
    pub fn mse(&mut self, a: NodeId, target: &Matrix) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.shape(), target.shape(), "mse target shape mismatch");
        let m = av.sub(target).data().iter().map(|d| d * d).sum::<f64>() / av.len() as f64;
        let g = self.any_grad(&[a]);
        self.push(Matrix::filled(1, 1, m), Op::Mse(a, target.clone()), g)
    }

    pub fn gather_sum(&mut self, a: NodeId, table: Rc<GatherSum>) -> NodeId {
        let v = table.apply(self.value(a));
        let g = self.any_grad(&[a]);
        self.push(v, Op::Gather(a, table), g)
    }

    /// `ZᵀZ`.
    pub fn gram(&mut self, z: NodeId) -> NodeId {
        let v = crate::numerics::eigen::gram(self.value(z));
        let g = self.any_grad(&[z]);
        self.push(v, Op::Gram(z), g)
    }

    /// Eigendecomposition of a symmetric node, returned as
    /// `(eigenvalues as a 1 x n row, eigenvectors as columns of n x n)`.
    pub fn sym_eig(&mut self, g: NodeId, gap_floor: f64) -> Result<(NodeId, NodeId, Rc<GramSpectrum>)> {
        let spectrum = Rc::new(sym_eig(self.value(g))?);
        let grad = self.any_grad(&[g]);
        let vals = self.push(
            Matrix::row_vector(&spectrum.eigenvalues),
            Op::EigVals { g, spectrum: Rc::clone(&spectrum), gap_floor },
            grad,
        );
        let vecs = self.push(
            spectrum.eigenvectors.clone(),
            Op::EigVecs { g, spectrum: Rc::clone(&spectrum), gap_floor },
            grad,
        );
        Ok((vals, vecs, spectrum))
    }

    /// `V diag(w) Vᵀ` where `wᵢ = 1/λᵢ` above `rel_tol * λ₁` and zero otherwise.
    /// The kept set is fixed at record time.
    pub fn pinv_spectrum(&mut self, vals: NodeId, vecs: NodeId, rel_tol: f64) -> NodeId {
        let lam = self.value(vals).data().to_vec();
        let weights = crate::numerics::eigen::pinv_weights(&lam, rel_tol);
        let v = self.value(vecs);
        let scaled = Matrix::from_fn(v.rows(), v.cols(), |i, j| v.get(i, j) * weights[j]);
        let out = scaled.matmul_t(v);
        let g = self.any_grad(&[vals, vecs]);
        self.push(out, Op::PinvSpectrum { vals, vecs, weights }, g)
    }

    /// Cosine similarity of matching columns of `a` and `b` over the first
    /// `cols` columns, as a `1 x cols` row. Each column norm is floored at
    /// `eps`, so zero columns give cosine 0 and identical columns give exactly 1.
    pub fn column_cosine(&mut self, a: NodeId, b: NodeId, cols: usize, eps: f64) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "column_cosine shape mismatch");
        assert!(cols >= 1 && cols <= av.cols(), "column count out of range");
        let full = av.cols();
        let mut m = Matrix::zeros(1, cols);
        for j in 0..cols {
            let (dot, na, nb) = column_stats(av, bv, j);
            m.set(0, j, dot / (na.max(eps) * nb.max(eps)));
        }
        let (a, b) = if cols == full { (a, b) } else { (self.trim_cols(a, cols), self.trim_cols(b, cols)) };
        let g = self.any_grad(&[a, b]);
        self.push(m, Op::ColumnCosine { a, b, eps }, g)
    }

    /// Leading `cols` columns of `a`, via a constant selector product.
    fn trim_cols(&mut self, a: NodeId, cols: usize) -> NodeId {
        let n = self.value(a).cols();
        let sel = self.constant(Matrix::from_fn(n, cols, |i, j| if i == j { 1.0 } else { 0.0 }));
        self.matmul(a, sel)
    }

    /// `Σᵢ |1 − mᵢ|` over all entries.
    pub fn l1_from_one(&mut self, m: NodeId) -> NodeId {
        let v = self.value(m).data().iter().map(|x| (1.0 - x).abs()).sum::<f64>();
        let g = self.any_grad(&[m]);
        self.push(Matrix::filled(1, 1, v), Op::L1FromOne(m), g)
    }

    /// Euclidean distance between the first `r` entries of two row vectors.
    pub fn head_l2(&mut self, a: NodeId, b: NodeId, r: usize) -> NodeId {
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        assert!(r >= 1 && r <= av.len() && r <= bv.len(), "head length out of range");
        let d = av[..r].iter().zip(&bv[..r]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let g = self.any_grad(&[a, b]);
        self.push(Matrix::filled(1, 1, d), Op::HeadL2 { a, b, r }, g)
    }

    /// Reverse sweep from a scalar node. Every node that can reach a
    /// parameter gets an adjoint; others are skipped.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| n.value.shape()).collect();
        if shapes[seed.0] != (1, 1) {
            return invalid(format!("backward seed must be scalar, node {} has shape {:?}", seed.0, shapes[seed.0]));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if !self.nodes[seed.0].needs_grad {
            return Ok(Gradients { adjoints: adj, shapes });
        }
        adj[seed.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=seed.0).rev() {
            let Some(d) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &d, &mut adj);
            adj[idx] = Some(d);
        }
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Matrix, d: &Matrix, adj: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let g = d.matmul_t(self.value(*b));
                    self.accumulate(adj, *a, g);
                }
                if self.wants(*b) {
                    let g = self.value(*a).t_matmul(d);
                    self.accumulate(adj, *b, g);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, d.clone());
                self.accumulate(adj, *b, d.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, d.clone());
                self.accumulate(adj, *b, d.scale(-1.0));
            }
            Op::AddRow(a, row) => {
                self.accumulate(adj, *a, d.clone());
                if self.wants(*row) {
                    let mut g = Matrix::zeros(1, d.cols());
                    for i in 0..d.rows() {
                        for (x, y) in g.data_mut().iter_mut().zip(d.row(i)) {
                            *x += y;
                        }
                    }
                    self.accumulate(adj, *row, g);
                }
            }
            Op::Relu(a) => {
                let g = self.value(*a).zip_map(d, |x, dy| if x > 0.0 { dy } else { 0.0 });
                self.accumulate(adj, *a, g);
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, d.scale(*s)),
            Op::MulEntry { a, p, idx } => {
                let pv = self.value(*p);
                if self.wants(*a) {
                    self.accumulate(adj, *a, d.scale(pv.get(idx.0, idx.1)));
                }
                if self.wants(*p) {
                    let mut g = Matrix::zeros(pv.rows(), pv.cols());
                    let s: f64 = self.value(*a).data().iter().zip(d.data()).map(|(x, y)| x * y).sum();
                    g.set(idx.0, idx.1, s);
                    self.accumulate(adj, *p, g);
                }
            }
            Op::AddEntry { a, p, idx } => {
                self.accumulate(adj, *a, d.clone());
                if self.wants(*p) {
                    let pv = self.value(*p);
                    let mut g = Matrix::zeros(pv.rows(), pv.cols());
                    g.set(idx.0, idx.1, d.sum());
                    self.accumulate(adj, *p, g);
                }
            }
            Op::HStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.wants(p) {
                        let g = Matrix::from_fn(d.rows(), cols, |i, j| d.get(i, offset + j));
                        self.accumulate(adj, p, g);
                    }
                    offset += cols;
                }
            }
            Op::SelectRows(a, rows) => {
                let av = self.value(*a);
                let mut g = Matrix::zeros(av.rows(), av.cols());
                for (src, &dst) in rows.iter().enumerate() {
                    for (x, y) in g.row_mut(dst).iter_mut().zip(d.row(src)) {
                        *x += y;
                    }
                }
                self.accumulate(adj, *a, g);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(adj, *a, Matrix::filled(r, c, d.get(0, 0)));
            }
            Op::Mse(a, target) => {
                let av = self.value(*a);
                let k = 2.0 * d.get(0, 0) / av.len() as f64;
                let g = av.zip_map(target, |x, t| k * (x - t));
                self.accumulate(adj, *a, g);
            }
            Op::Gather(a, table) => {
                let av = self.value(*a);
                let mut g = Matrix::zeros(av.rows(), av.cols());
                for r in 0..table.rows {
                    for i in 0..table.out_cols {
                        let dy = d.get(r, i);
                        for &j in table.neighbors(r, i) {
                            g.set(r, j, g.get(r, j) + dy);
                        }
                    }
                }
                self.accumulate(adj, *a, g);
            }
            Op::Gram(z) => {
                // d(ZᵀZ) → Z (D + Dᵀ)
                let sym = d.add(&d.transpose());
                let g = self.value(*z).matmul(&sym);
                self.accumulate(adj, *z, g);
            }
            Op::EigVals { g, spectrum, gap_floor } => {
                let n = spectrum.dim();
                let dg = sym_eig_backward(spectrum, d.data(), &Matrix::zeros(n, n), *gap_floor);
                self.accumulate(adj, *g, dg);
            }
            Op::EigVecs { g, spectrum, gap_floor } => {
                let n = spectrum.dim();
                let dg = sym_eig_backward(spectrum, &vec![0.0; n], d, *gap_floor);
                self.accumulate(adj, *g, dg);
            }
            Op::PinvSpectrum { vals, vecs, weights } => {
                let v = self.value(*vecs);
                let n = v.rows();
                if self.wants(*vecs) {
                    // d(V W Vᵀ)/dV → (D + Dᵀ) V W
                    let sym = d.add(&d.transpose());
                    let sv = sym.matmul(v);
                    let g = Matrix::from_fn(n, v.cols(), |i, j| sv.get(i, j) * weights[j]);
                    self.accumulate(adj, *vecs, g);
                }
                if self.wants(*vals) {
                    // wᵢ = 1/λᵢ → dλᵢ = -wᵢ² vᵢᵀ D vᵢ on the kept set
                    let dv = d.matmul(v);
                    let mut g = Matrix::zeros(1, weights.len());
                    for (j, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let quad: f64 = (0..n).map(|i| v.get(i, j) * dv.get(i, j)).sum();
                        g.set(0, j, -w * w * quad);
                    }
                    self.accumulate(adj, *vals, g);
                }
            }
            Op::ColumnCosine { a, b, eps } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                for j in 0..out.cols() {
                    let (_, na, nb) = column_stats(av, bv, j);
                    let denom = na.max(*eps) * nb.max(*eps);
                    let m = out.get(0, j);
                    let dm = d.get(0, j);
                    // Below the floor the norm is a constant and drops out.
                    let ka = if na > *eps { m / (na * na) } else { 0.0 };
                    let kb = if nb > *eps { m / (nb * nb) } else { 0.0 };
                    for i in 0..av.rows() {
                        let (x, y) = (av.get(i, j), bv.get(i, j));
                        ga.set(i, j, dm * (y / denom - ka * x));
                        gb.set(i, j, dm * (x / denom - kb * y));
                    }
                }
                self.accumulate(adj, *a, ga);
                self.accumulate(adj, *b, gb);
            }
            Op::L1FromOne(m) => {
                let dy = d.get(0, 0);
                let g = self.value(*m).map(|x| {
                    let r = 1.0 - x;
                    if r > 0.0 {
                        -dy
                    } else if r < 0.0 {
                        dy
                    } else {
                        0.0
                    }
                });
                self.accumulate(adj, *m, g);
            }
            Op::HeadL2 { a, b, r } => {
                let dist = out.get(0, 0);
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                if dist > 0.0 {
                    let k = d.get(0, 0) / dist;
                    for i in 0..*r {
                        let diff = av.data()[i] - bv.data()[i];
                        ga.data_mut()[i] = k * diff;
                        gb.data_mut()[i] = -k * diff;
                    }
                }
                self.accumulate(adj, *a, ga);
                self.accumulate(adj, *b, gb);
            }
        }
    }
}

fn column_stats(a: &Matrix, b: &Matrix, j: usize) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..a.rows() {
        let (x, y) = (a.get(i, j), b.get(i, j));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::random_matrix;

    #[test]
    fn mse_of_linear_map_matches_closed_form() {
        let w = random_matrix(3, 4, 1);
        let x = random_matrix(4, 1, 2);
        let target = random_matrix(3, 1, 3);
        let mut t = Tape::new();
        let wn = t.param(w.clone());
        let xn = t.constant(x.clone());
        let y = t.matmul(wn, xn);
        let loss = t.mse(y, &target);
        let grads = t.backward(loss).unwrap();
        // 2 (Wx - target) xᵀ / size
        let resid = w.matmul(&x).sub(&target);
        let expected = resid.matmul_t(&x).scale(2.0 / 3.0);
        assert!(grads.wrt(wn).rel_diff(&expected) < 1e-14);
        assert!(grads.get(xn).is_none());
    }

    #[test]
    fn relu_sum_gradient_is_indicator() {
        let x = Matrix::from_rows(&[&[-1.5, 0.3, 2.0], &[0.7, -0.2, -3.0]]);
        let mut t = Tape::new();
        let xn = t.param(x.clone());
        let r = t.relu(xn);
        let s = t.sum(r);
        let g = t.backward(s).unwrap().wrt(xn);
        assert_eq!(g, x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 2));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = sum(x ∘ x) via x used twice in a matmul: sum(xᵀ x) for a column x
        let x = random_matrix(3, 1, 4);
        let mut t = Tape::new();
        let xn = t.param(x.clone());
        let g = t.gram(xn);
        let s = t.sum(g);
        let grad = t.backward(s).unwrap().wrt(xn);
        assert!(grad.rel_diff(&x.scale(2.0)) < 1e-14);
    }

    #[test]
    fn gather_sum_routes_to_neighbors() {
        let table = Rc::new(GatherSum { rows: 1, out_cols: 2, k: 2, index: vec![0, 2, 1, 1] });
        let mut t = Tape::new();
        let p = t.param(Matrix::from_rows(&[&[1.0, 10.0, 100.0]]));
        let g = t.gather_sum(p, table);
        assert_eq!(t.value(g), &Matrix::from_rows(&[&[101.0, 20.0]]));
        let s = t.sum(g);
        assert_eq!(t.backward(s).unwrap().wrt(p), Matrix::from_rows(&[&[1.0, 2.0, 1.0]]));
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut t = Tape::new();
            let z = t.param(random_matrix(6, 5, 7));
            let g = t.gram(z);
            let (vals, vecs, _) = t.sym_eig(g, 1e-6).unwrap();
            let p = t.pinv_spectrum(vals, vecs, 1e-6);
            let s = t.sum(p);
            t.backward(s).unwrap().wrt(z)
        };
        assert_eq!(run().data(), run().data());
    }
}
