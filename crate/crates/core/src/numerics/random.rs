use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::Matrix;

/// Matrix of i.i.d. standard normal entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Haar-ish random orthogonal matrix from Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let a = gaussian_matrix(n, n, rng);
    let mut q = Matrix::zeros(n, n);
    for j in 0..n {
        let mut v = a.col(j);
        for _ in 0..2 {
            for k in 0..j {
                let dot: f64 = (0..n).map(|i| q.get(i, k) * v[i]).sum();
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi -= dot * q.get(i, k);
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (i, vi) in v.iter().enumerate() {
            q.set(i, j, vi / norm);
        }
    }
    q
}
