//! Symmetric eigendecomposition of Gram matrices and the pieces built on it:
//! the spectral pseudo-inverse and the reverse-mode rule for `G = V diag(λ) Vᵀ`.
//!
//! The SVD of a feature batch `Z` is never formed. `ZᵀZ = V Λ Vᵀ` carries the
//! same right singular vectors and squared singular values, so one symmetric
//! solver (cyclic Jacobi) and one backward rule cover everything downstream.

use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;

/// Sweep limit for the cyclic Jacobi solver.
pub const MAX_JACOBI_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm, relative to `‖G‖_F`.
pub const JACOBI_OFF_TOL: f64 = 1e-12;
/// Default pseudo-inverse cutoff, relative to the largest eigenvalue.
pub const DEFAULT_REL_TOL: f64 = 1e-6;
/// Default lower clamp on eigenvalue gaps in the backward rule, relative to `max(λ₁, 1)`.
pub const DEFAULT_GAP_FLOOR: f64 = 1e-6;
/// Symmetry tolerance accepted by [`sym_eig`], relative to `‖G‖_max`.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Eigenvalues (non-increasing) and orthonormal eigenvectors of a symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramSpectrum {
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Matrix,
    /// Number of eigenvalues above `DEFAULT_REL_TOL * λ₁` (at least 1).
    pub effective_rank: usize,
}

impl GramSpectrum {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Count of eigenvalues strictly above `rel_tol * λ₁`, never less than 1.
    pub fn rank_at(&self, rel_tol: f64) -> usize {
        numerical_rank(&self.eigenvalues, rel_tol)
    }

    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        spectral_sum(&self.eigenvectors, &self.eigenvalues)
    }

    /// Smallest gap `λᵢ - λᵢ₊₁` among the leading `count` eigenvalues, relative to `max(λ₁, 1)`.
    pub fn min_relative_gap(&self, count: usize) -> f64 {
        let scale = self.eigenvalues[0].max(1.0);
        let count = count.min(self.dim());
        self.eigenvalues[..count]
            .windows(2)
            .map(|w| (w[0] - w[1]) / scale)
            .fold(f64::INFINITY, f64::min)
    }
}

fn numerical_rank(eigenvalues: &[f64], rel_tol: f64) -> usize {
    let top = eigenvalues[0];
    if top <= 0.0 {
        return 1;
    }
    eigenvalues.iter().filter(|&&l| l > rel_tol * top).count().max(1)
}

/// `Σᵢ wᵢ vᵢ vᵢᵀ` over the columns of `v`.
fn spectral_sum(v: &Matrix, weights: &[f64]) -> Matrix {
    let n = v.rows();
    let scaled = Matrix::from_fn(n, weights.len(), |i, j| v.get(i, j) * weights[j]);
    scaled.matmul_t(v)
}

/// `ZᵀZ` for a `b x n` batch.
pub fn gram(z: &Matrix) -> Matrix {
    let g = z.t_matmul(z);
    // Exact symmetry; the product above is symmetric only up to summation order.
    g.symmetrized()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back non-increasing, eigenvectors as the columns of an
/// orthogonal matrix. Rejects inputs whose asymmetry exceeds
/// `1e-8 * ‖G‖_max`; the accepted input is symmetrized before iterating.
pub fn sym_eig(g: &Matrix) -> Result<GramSpectrum> {
    if !g.is_square() {
        return invalid(format!("sym_eig needs a square matrix, got {:?}", g.shape()));
    }
    if !g.is_finite() {
        return invalid("sym_eig input has non-finite entries");
    }
    let n = g.rows();
    let scale = g.max_abs();
    let asym = g.sub(&g.transpose()).max_abs();
    if asym > SYMMETRY_TOL * scale {
        return invalid(format!("sym_eig input is not symmetric (max asymmetry {asym:e})"));
    }

    let mut a = g.symmetrized();
    let mut v = Matrix::identity(n);
    let tol = JACOBI_OFF_TOL * a.frobenius();

    let mut sweeps = 0;
    loop {
        let off = off_diagonal_norm(&a);
        if off <= tol {
            break;
        }
        if sweeps == MAX_JACOBI_SWEEPS {
            return Err(Error::NoConvergence { sweeps, off_norm: off });
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let eigenvectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    let effective_rank = numerical_rank(&eigenvalues, DEFAULT_REL_TOL);
    Ok(GramSpectrum { eigenvalues, eigenvectors, effective_rank })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// One Jacobi rotation `A ← JᵀAJ`, `V ← VJ`, annihilating `a[p][q]`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;
    let n = a.rows();

    for k in 0..n {
        let (akp, akq) = (a.get(k, p), a.get(k, q));
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let (apk, aqk) = (a.get(p, k), a.get(q, k));
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);

    for k in 0..n {
        let (vkp, vkq) = (v.get(k, p), v.get(k, q));
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// Per-eigenvalue weights of the pseudo-inverse: `1/λᵢ` above the cutoff, zero otherwise.
pub fn pinv_weights(eigenvalues: &[f64], rel_tol: f64) -> Vec<f64> {
    let top = eigenvalues[0];
    if top <= 0.0 {
        return vec![0.0; eigenvalues.len()];
    }
    eigenvalues.iter().map(|&l| if l > rel_tol * top { 1.0 / l } else { 0.0 }).collect()
}

/// Moore–Penrose pseudo-inverse `V Λ⁺ Vᵀ`.
///
/// Eigenvalues at or below `rel_tol * λ₁` are treated as zero. A spectrum with
/// `λ₁ ≤ 0` (the zero matrix) yields the zero matrix.
pub fn pinv_from_spectrum(s: &GramSpectrum, rel_tol: f64) -> Result<Matrix> {
    if !(rel_tol > 0.0) {
        return invalid(format!("rel_tol must be positive, got {rel_tol}"));
    }
    Ok(spectral_sum(&s.eigenvectors, &pinv_weights(&s.eigenvalues, rel_tol)))
}

/// Reverse-mode rule for `G = V diag(λ) Vᵀ`.
///
/// Given cotangents `dλ` and `dV`, returns the symmetric
/// `dG = V (diag(dλ) + sym(F ∘ VᵀdV)) Vᵀ` with `F_ij = 1/(λ_j − λ_i)`.
/// Gaps smaller than `gap_floor * max(λ₁, 1)` are clamped to that magnitude,
/// which biases the gradient near degeneracy but keeps it bounded.
pub fn sym_eig_backward(s: &GramSpectrum, d_lambda: &[f64], d_v: &Matrix, gap_floor: f64) -> Matrix {
    let n = s.dim();
    assert_eq!(d_lambda.len(), n, "dLambda length mismatch");
    assert_eq!(d_v.shape(), (n, n), "dV shape mismatch");
    let v = &s.eigenvectors;
    let lam = &s.eigenvalues;
    let floor = gap_floor * lam[0].max(1.0);

    let x = v.t_matmul(d_v);
    let mut inner = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let gap = clamp_gap(lam[j] - lam[i], floor, i < j);
            inner.set(i, j, x.get(i, j) / gap);
        }
    }
    let mut core = inner.symmetrized();
    for (i, &dl) in d_lambda.iter().enumerate() {
        core.set(i, i, core.get(i, i) + dl);
    }
    v.matmul(&core).matmul_t(v).symmetrized()
}

/// Keeps the sign of `gap` and lifts its magnitude to at least `floor`.
/// An exact zero takes the sign descending order implies (`λ_j ≤ λ_i` for `i < j`).
fn clamp_gap(gap: f64, floor: f64, i_before_j: bool) -> f64 {
    if gap.abs() >= floor && gap != 0.0 {
        return gap;
    }
    let sign = if gap > 0.0 {
        1.0
    } else if gap < 0.0 || i_before_j {
        -1.0
    } else {
        1.0
    };
    sign * floor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::{random_matrix, random_orthogonal};

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        let d = a.rel_diff(b);
        assert!(d < tol, "matrices differ by {d:e}\n{a:?}\n{b:?}");
    }

    /// Aligns eigenvector signs so that the largest-magnitude entry of each column is positive.
    fn canonical_signs(v: &Matrix) -> Matrix {
        let n = v.rows();
        let mut out = v.clone();
        for j in 0..v.cols() {
            let col = v.col(j);
            let pivot = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() + 1e-12 { x } else { m });
            if pivot < 0.0 {
                for i in 0..n {
                    out.set(i, j, -v.get(i, j));
                }
            }
        }
        out
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&Matrix::identity(2)), Matrix::identity(2));
        let z = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(gram(&z), Matrix::from_rows(&[&[10.0, 14.0], &[14.0, 20.0]]));
        assert_eq!(gram(&Matrix::zeros(4, 3)), Matrix::zeros(3, 3));
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let z = random_matrix(5, 7, 11);
        let g = gram(&z);
        assert_eq!(g, g.transpose());
        let s = sym_eig(&g).unwrap();
        assert!(s.eigenvalues.iter().all(|&l| l > -1e-10 * s.eigenvalues[0]));
    }

    #[test]
    fn diagonal_spectrum() {
        let s = sym_eig(&Matrix::from_diag(&[4.0, 1.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![4.0, 1.0]);
        assert_eq!(canonical_signs(&s.eigenvectors), Matrix::identity(2));
        // Ascending diagonal comes back sorted.
        let s = sym_eig(&Matrix::from_diag(&[1.0, 4.0])).unwrap();
        assert_eq!(s.eigenvalues, vec![4.0, 1.0]);
    }

    #[test]
    fn two_by_two_characteristic_polynomial() {
        // det([[2-λ,1],[1,2-λ]]) = (2-λ)² - 1 → λ ∈ {3, 1}.
        let s = sym_eig(&Matrix::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]])).unwrap();
        assert!((s.eigenvalues[0] - 3.0).abs() < 1e-14);
        assert!((s.eigenvalues[1] - 1.0).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let v = canonical_signs(&s.eigenvectors);
        // (1,1)/√2 for λ=3; (1,-1)/√2 up to sign for λ=1.
        assert!((v.get(0, 0) - r).abs() < 1e-14 && (v.get(1, 0) - r).abs() < 1e-14);
        assert!((v.get(0, 1).abs() - r).abs() < 1e-14);
        assert!((v.get(0, 1) + v.get(1, 1)).abs() < 1e-14);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let a = random_matrix(8, 8, 3);
        let g = a.add(&a.transpose());
        let s = sym_eig(&g).unwrap();
        assert_close(&s.reconstruct(), &g, 1e-12);
        assert_close(&s.eigenvectors.t_matmul(&s.eigenvectors), &Matrix::identity(8), 1e-12);
        assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_non_symmetric_and_non_square() {
        let g = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(sym_eig(&g), Err(Error::InvalidInput(_))));
        assert!(matches!(sym_eig(&Matrix::zeros(2, 3)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_matrix_spectrum() {
        let s = sym_eig(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(s.eigenvalues, vec![0.0; 3]);
        assert_eq!(s.effective_rank, 1);
        assert_eq!(pinv_from_spectrum(&s, DEFAULT_REL_TOL).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn pinv_examples() {
        let s = sym_eig(&Matrix::from_diag(&[4.0, 0.0])).unwrap();
        assert_close(&pinv_from_spectrum(&s, 1e-6).unwrap(), &Matrix::from_diag(&[0.25, 0.0]), 1e-15);
        let s = sym_eig(&Matrix::identity(3).scale(2.0)).unwrap();
        assert_close(&pinv_from_spectrum(&s, 1e-6).unwrap(), &Matrix::identity(3).scale(0.5), 1e-15);
        assert!(pinv_from_spectrum(&s, 0.0).is_err());
    }

    #[test]
    fn pinv_penrose_conditions_rank_deficient() {
        let z = random_matrix(8, 16, 5);
        let g = gram(&z);
        let s = sym_eig(&g).unwrap();
        assert_eq!(s.effective_rank, 8);
        let gp = pinv_from_spectrum(&s, DEFAULT_REL_TOL).unwrap();
        let rel = |a: &Matrix, b: &Matrix| a.sub(b).max_abs() / b.max_abs();
        assert!(rel(&g.matmul(&gp).matmul(&g), &g) < 1e-8);
        assert!(rel(&gp.matmul(&g).matmul(&gp), &gp) < 1e-8);
        let gg = g.matmul(&gp);
        assert!(rel(&gg.transpose(), &gg) < 1e-8);
        let pg = gp.matmul(&g);
        assert!(rel(&pg.transpose(), &pg) < 1e-8);
    }

    #[test]
    fn backward_zero_cotangent() {
        let s = sym_eig(&gram(&random_matrix(4, 4, 1))).unwrap();
        let d = sym_eig_backward(&s, &[0.0; 4], &Matrix::zeros(4, 4), DEFAULT_GAP_FLOOR);
        assert_eq!(d, Matrix::zeros(4, 4));
    }

    #[test]
    fn top_eigenvalue_gradient_matches_finite_differences() {
        let a = random_matrix(4, 4, 9);
        let g = a.add(&a.transpose());
        let s = sym_eig(&g).unwrap();
        let d = sym_eig_backward(&s, &[1.0, 0.0, 0.0, 0.0], &Matrix::zeros(4, 4), DEFAULT_GAP_FLOOR);
        let v1 = Matrix::from_fn(4, 1, |i, _| s.eigenvectors.get(i, 0));
        assert_close(&d, &v1.matmul_t(&v1), 1e-14);

        // Symmetric perturbation E_ij + E_ji: dλ₁ = (dG + dGᵀ)_ij off the diagonal, dG_ii on it.
        let h = 1e-6;
        for i in 0..4 {
            for j in i..4 {
                let bump = |sign: f64| {
                    let mut p = g.clone();
                    p.set(i, j, p.get(i, j) + sign * h);
                    if i != j {
                        p.set(j, i, p.get(j, i) + sign * h);
                    }
                    sym_eig(&p).unwrap().eigenvalues[0]
                };
                let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                let analytic = if i == j { d.get(i, i) } else { 2.0 * d.get(i, j) };
                assert!((fd - analytic).abs() < 1e-7, "({i},{j}): fd {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn eigenvector_gradient_matches_finite_differences() {
        // Loss = uᵀ V w for fixed u, w: sign-invariant only if we pin signs, so use
        // the sign-invariant quantity Σ_k (u·v_k)² c_k instead.
        let a = random_matrix(5, 5, 21);
        let g = a.add(&a.transpose());
        let u: Vec<f64> = (0..5).map(|i| (i as f64 * 0.7).sin() + 0.3).collect();
        let c = [1.0, -0.5, 2.0, 0.25, -1.5];
        let loss = |g: &Matrix| {
            let s = sym_eig(g).unwrap();
            (0..5)
                .map(|k| {
                    let dot: f64 = (0..5).map(|i| u[i] * s.eigenvectors.get(i, k)).sum();
                    c[k] * dot * dot
                })
                .sum::<f64>()
        };
        let s = sym_eig(&g).unwrap();
        let d_v = Matrix::from_fn(5, 5, |i, k| {
            let dot: f64 = (0..5).map(|r| u[r] * s.eigenvectors.get(r, k)).sum();
            2.0 * c[k] * dot * u[i]
        });
        let d = sym_eig_backward(&s, &[0.0; 5], &d_v, DEFAULT_GAP_FLOOR);
        let h = 1e-6;
        for i in 0..5 {
            for j in i..5 {
                let bump = |sign: f64| {
                    let mut p = g.clone();
                    p.set(i, j, p.get(i, j) + sign * h);
                    if i != j {
                        p.set(j, i, p.get(j, i) + sign * h);
                    }
                    loss(&p)
                };
                let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
                let analytic = if i == j { d.get(i, i) } else { 2.0 * d.get(i, j) };
                assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "({i},{j}): fd {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn clamped_gaps_stay_bounded() {
        // Exactly repeated eigenvalues: the rule must stay finite and symmetric.
        let q = random_orthogonal(4, 2);
        let g = q.matmul(&Matrix::from_diag(&[2.0, 2.0, 1.0, 1.0])).matmul_t(&q);
        let s = sym_eig(&g).unwrap();
        let d_v = random_matrix(4, 4, 8);
        let d = sym_eig_backward(&s, &[0.0; 4], &d_v, DEFAULT_GAP_FLOOR);
        assert!(d.is_finite());
        assert_eq!(d, d.transpose());
    }
}
