//! Dense f64 helpers over `nalgebra` used by the alignment fits and attacks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Builds a matrix from row-major values of any float type.
pub fn from_rows<T: Copy + Into<f64>>(rows: usize, cols: usize, data: &[T]) -> DMatrix<f64> {
    assert_eq!(data.len(), rows * cols, "row-major buffer size");
    DMatrix::from_fn(rows, cols, |r, c| data[r * cols + c].into())
}

pub fn from_f32_rows(rows: usize, cols: usize, data: &[f32]) -> DMatrix<f64> {
    from_rows(rows, cols, data)
}

/// Row-major values of `m`.
pub fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

pub fn to_f32_rows(m: &DMatrix<f64>) -> Vec<f32> {
    to_rows(m).into_iter().map(|v| v as f32).collect()
}

/// Singular values below `max_sv · RANK_TOL` count as zero.
pub const RANK_TOL: f64 = 1e-9;

/// Truncated SVD: the top `rank` singular triplets (fewer if `m` has lower
/// numerical rank), sorted by decreasing singular value.
pub struct Truncated {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
    /// Numerical rank of the full matrix.
    pub full_rank: usize,
}

pub fn truncated_svd(m: &DMatrix<f64>, rank: usize) -> Truncated {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let max = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
    let tol = max * RANK_TOL * (m.nrows().max(m.ncols()) as f64).max(1.0);
    let full_rank = order.iter().filter(|&&i| svd.singular_values[i] > tol).count();
    let keep: Vec<usize> = order.into_iter().take(rank.min(full_rank)).collect();
    Truncated {
        u: DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])]),
        s: DVector::from_iterator(keep.len(), keep.iter().map(|&i| svd.singular_values[i])),
        v: DMatrix::from_fn(m.ncols(), keep.len(), |r, c| vt[(keep[c], r)]),
        full_rank,
    }
}

/// Rank-`rank` Moore–Penrose pseudo-inverse.
pub fn pinv_rank(m: &DMatrix<f64>, rank: usize) -> (DMatrix<f64>, usize) {
    let t = truncated_svd(m, rank);
    let sinv = DMatrix::from_diagonal(&t.s.map(|x| 1.0 / x));
    (&t.v * sinv * t.u.transpose(), t.full_rank)
}

pub fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    pinv_rank(m, usize::MAX)
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the sign of each column fixed by the diagonal of R).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..n {
        if r[(c, c)] < 0.0 {
            for i in 0..n {
                q[(i, c)] = -q[(i, c)];
            }
        }
    }
    q
}

/// `max |a − b|` elementwise.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_orthogonal(12, &mut rng);
        let eye = DMatrix::<f64>::identity(12, 12);
        assert!(max_abs_diff(&(q.transpose() * &q), &eye) < 1e-12);
    }

    #[test]
    fn pinv_inverts_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_orthogonal(5, &mut rng) * 3.0;
        let (p, rank) = pinv(&q);
        assert_eq!(rank, 5);
        assert!(max_abs_diff(&(p * q), &DMatrix::identity(5, 5)) < 1e-12);
    }

    #[test]
    fn truncation_keeps_largest_values() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 5.0, 3.0]));
        let t = truncated_svd(&m, 2);
        assert_eq!(t.s.as_slice(), &[5.0, 3.0]);
        assert_eq!(t.full_rank, 3);
    }

    #[test]
    fn row_major_round_trip() {
        let data = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let m = from_rows(2, 3, &data);
        assert_eq!(m[(1, 0)], 4.0);
        assert_eq!(to_rows(&m), data);
    }
}
