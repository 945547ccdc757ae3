//! Lawson–Hanson active-set non-negative least squares.
//!
//! The solver keeps an explicit passive set, so coordinates outside it are
//! exact zeros rather than small positive residue. Two back ends share the
//! same active-set loop: a Householder QR on the passive columns of the basis
//! (used for projections, where accuracy matters most) and a Cholesky solve on
//! a precomputed Gram matrix (used inside NMF, where the same Gram serves
//! thousands of right-hand sides).

use super::matrix::{dot, norm2, Matrix};
use super::LinalgError;

/// Relative tolerance on the dual variable `w = Bᵀ(t − Bx)` at termination.
const DUAL_TOL: f64 = 1e-10;

/// Solves `min ‖basis · u − target‖₂` subject to `u ≥ 0`.
///
/// `basis` is `p × r` (one concept per column), `target` has length `p`.
/// All-zero basis columns receive a zero coefficient.
pub fn nnls(basis: &Matrix, target: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let (p, r) = basis.shape();
    if p == 0 || r == 0 {
        return Err(LinalgError::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    if target.len() != p {
        return Err(LinalgError::DimensionMismatch {
            expected: p,
            found: target.len(),
        });
    }
    if target.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let problem = BasisProblem::new(basis, target);
    let tol = DUAL_TOL * norm2(target).max(1.0);
    Ok(lawson_hanson(&problem, tol, None))
}

/// Gram-form NNLS: minimizes `½ uᵀGu − hᵀu` over `u ≥ 0`, with `G = BᵀB` and `h = Bᵀt`.
///
/// `target_norm` is `‖t‖₂` and only scales the termination tolerance.
pub fn nnls_gram(gram: &Matrix, rhs: &[f64], target_norm: f64) -> Vec<f64> {
    debug_assert_eq!(gram.rows(), rhs.len());
    let problem = GramProblem { gram, rhs };
    let tol = DUAL_TOL * target_norm.max(1.0);
    lawson_hanson(&problem, tol, None)
}

/// [`nnls_gram`] started from a guessed passive set, typically the support of
/// the previous solution in an alternating scheme. The result satisfies the
/// same optimality conditions; only the number of iterations changes.
pub fn nnls_gram_warm(gram: &Matrix, rhs: &[f64], target_norm: f64, initial: &[bool]) -> Vec<f64> {
    debug_assert_eq!(gram.rows(), rhs.len());
    debug_assert_eq!(initial.len(), rhs.len());
    let problem = GramProblem { gram, rhs };
    let tol = DUAL_TOL * target_norm.max(1.0);
    lawson_hanson(&problem, tol, Some(initial))
}

/// Reusable projector onto the non-negative cone of a fixed basis.
#[derive(Debug, Clone)]
pub struct NnlsProjector {
    basis: Matrix,
}

impl NnlsProjector {
    pub fn new(basis: Matrix) -> Self {
        Self { basis }
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn project(&self, target: &[f64]) -> Result<Vec<f64>, LinalgError> {
        nnls(&self.basis, target)
    }
}

trait ActiveSetProblem {
    fn dim(&self) -> usize;
    /// Whether coordinate `j` can ever enter the passive set.
    fn usable(&self, j: usize) -> bool;
    /// Dual vector `w = −∇f(x)`.
    fn dual(&self, x: &[f64]) -> Vec<f64>;
    /// Unconstrained least squares on the passive coordinates, or `None` when
    /// the passive columns are numerically dependent.
    fn solve_passive(&self, passive: &[usize]) -> Option<Vec<f64>>;
}

fn lawson_hanson<P: ActiveSetProblem>(problem: &P, tol: f64, initial: Option<&[bool]>) -> Vec<f64> {
    let n = problem.dim();
    let mut x = vec![0.0; n];
    let mut passive = vec![false; n];
    let mut rejected = vec![false; n];
    let usable: Vec<bool> = (0..n).map(|j| problem.usable(j)).collect();
    let max_outer = 3 * n + 10;

    if let Some(init) = initial {
        // Shrink the guess until its least-squares solution is strictly positive.
        for j in 0..n {
            passive[j] = init[j] && usable[j];
        }
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            if idx.is_empty() {
                break;
            }
            let Some(z) = problem.solve_passive(&idx) else {
                passive.iter_mut().for_each(|p| *p = false);
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                for (&j, &v) in idx.iter().zip(&z) {
                    x[j] = v;
                }
                break;
            }
            for (&j, &v) in idx.iter().zip(&z) {
                if v <= 0.0 {
                    passive[j] = false;
                }
            }
        }
    }

    for _ in 0..max_outer {
        let w = problem.dual(&x);
        let candidate = (0..n)
            .filter(|&j| usable[j] && !passive[j] && !rejected[j] && w[j] > tol)
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if w[b] >= w[j] => Some(b),
                _ => Some(j),
            });
        let Some(entering) = candidate else {
            break;
        };
        passive[entering] = true;

        let mut first_inner = true;
        for _ in 0..=n {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let Some(z) = problem.solve_passive(&idx) else {
                passive[entering] = false;
                rejected[entering] = true;
                break;
            };
            if z.iter().all(|&v| v > 0.0) {
                for (&j, &v) in idx.iter().zip(&z) {
                    x[j] = v;
                }
                rejected.iter_mut().for_each(|r| *r = false);
                break;
            }
            let entering_pos = idx.iter().position(|&j| j == entering);
            if first_inner {
                if let Some(pos) = entering_pos {
                    if z[pos] <= 0.0 {
                        // Roundoff made the entering coordinate non-positive.
                        passive[entering] = false;
                        rejected[entering] = true;
                        break;
                    }
                }
            }
            first_inner = false;

            let mut alpha = f64::INFINITY;
            let mut blocking = entering;
            for (&j, &zj) in idx.iter().zip(&z) {
                if zj <= 0.0 {
                    let step = x[j] / (x[j] - zj);
                    if step < alpha {
                        alpha = step;
                        blocking = j;
                    }
                }
            }
            for (&j, &zj) in idx.iter().zip(&z) {
                x[j] += alpha * (zj - x[j]);
            }
            x[blocking] = 0.0;
            for &j in &idx {
                if x[j] <= 0.0 {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    for j in 0..n {
        if !passive[j] {
            x[j] = 0.0;
        }
    }
    x
}

struct BasisProblem<'a> {
    basis: &'a Matrix,
    target: &'a [f64],
    col_norms: Vec<f64>,
}

impl<'a> BasisProblem<'a> {
    fn new(basis: &'a Matrix, target: &'a [f64]) -> Self {
        let col_norms = (0..basis.cols())
            .map(|j| (0..basis.rows()).map(|i| basis.get(i, j).powi(2)).sum::<f64>().sqrt())
            .collect();
        Self {
            basis,
            target,
            col_norms,
        }
    }
}

impl ActiveSetProblem for BasisProblem<'_> {
    fn dim(&self) -> usize {
        self.basis.cols()
    }

    fn usable(&self, j: usize) -> bool {
        self.col_norms[j] > 0.0
    }

    fn dual(&self, x: &[f64]) -> Vec<f64> {
        let residual: Vec<f64> = (0..self.basis.rows())
            .map(|i| self.target[i] - dot(self.basis.row(i), x))
            .collect();
        self.basis
            .tr_matvec(&residual)
            .expect("residual length matches basis rows")
    }

    fn solve_passive(&self, passive: &[usize]) -> Option<Vec<f64>> {
        let p = self.basis.rows();
        let columns: Vec<Vec<f64>> = passive
            .iter()
            .map(|&j| (0..p).map(|i| self.basis.get(i, j)).collect())
            .collect();
        let scale = passive
            .iter()
            .map(|&j| self.col_norms[j])
            .fold(0.0, f64::max);
        householder_lstsq(columns, self.target, scale)
    }
}

struct GramProblem<'a> {
    gram: &'a Matrix,
    rhs: &'a [f64],
}

impl ActiveSetProblem for GramProblem<'_> {
    fn dim(&self) -> usize {
        self.rhs.len()
    }

    fn usable(&self, j: usize) -> bool {
        self.gram.get(j, j) > 0.0
    }

    fn dual(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rhs.len())
            .map(|i| self.rhs[i] - dot(self.gram.row(i), x))
            .collect()
    }

    fn solve_passive(&self, passive: &[usize]) -> Option<Vec<f64>> {
        let k = passive.len();
        let mut l = vec![0.0; k * k];
        let max_diag = passive
            .iter()
            .map(|&j| self.gram.get(j, j))
            .fold(0.0, f64::max);
        for a in 0..k {
            for b in 0..=a {
                let mut s = self.gram.get(passive[a], passive[b]);
                for c in 0..b {
                    s -= l[a * k + c] * l[b * k + c];
                }
                if a == b {
                    if s <= 1e-13 * max_diag {
                        return None;
                    }
                    l[a * k + a] = s.sqrt();
                } else {
                    l[a * k + b] = s / l[b * k + b];
                }
            }
        }
        let mut y = vec![0.0; k];
        for a in 0..k {
            let mut s = self.rhs[passive[a]];
            for c in 0..a {
                s -= l[a * k + c] * y[c];
            }
            y[a] = s / l[a * k + a];
        }
        let mut z = vec![0.0; k];
        for a in (0..k).rev() {
            let mut s = y[a];
            for c in a + 1..k {
                s -= l[c * k + a] * z[c];
            }
            z[a] = s / l[a * k + a];
        }
        Some(z)
    }
}

/// Least squares `min ‖A z − t‖` via Householder QR. `columns` holds the columns of `A`.
fn householder_lstsq(mut columns: Vec<Vec<f64>>, target: &[f64], scale: f64) -> Option<Vec<f64>> {
    let k = columns.len();
    let p = target.len();
    if k > p {
        return None;
    }
    let mut rhs = target.to_vec();
    let mut diag = vec![0.0; k];
    for j in 0..k {
        let norm = columns[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 * scale {
            return None;
        }
        let alpha = if columns[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = columns[j][j..].to_vec();
        v[0] -= alpha;
        let v_norm_sq: f64 = v.iter().map(|x| x * x).sum();
        diag[j] = alpha;
        if v_norm_sq > 0.0 {
            for col in columns.iter_mut().skip(j + 1) {
                let f = 2.0 * dot(&v, &col[j..]) / v_norm_sq;
                for (c, vi) in col[j..].iter_mut().zip(&v) {
                    *c -= f * vi;
                }
            }
            let f = 2.0 * dot(&v, &rhs[j..]) / v_norm_sq;
            for (c, vi) in rhs[j..].iter_mut().zip(&v) {
                *c -= f * vi;
            }
        }
    }
    let mut z = vec![0.0; k];
    for j in (0..k).rev() {
        let mut s = rhs[j];
        for c in j + 1..k {
            s -= columns[c][j] * z[c];
        }
        z[j] = s / diag[j];
    }
    Some(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_basis_returns_target() {
        let u = nnls(&Matrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(u, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn constraint_binds_on_negative_target() {
        let basis = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(nnls(&basis, &[-1.0, -1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_column_gets_zero_coefficient() {
        let basis = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(nnls(&basis, &[2.0, 5.0]).unwrap(), vec![2.0, 0.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let basis = Matrix::identity(2);
        assert_eq!(nnls(&basis, &[1.0, f64::INFINITY]), Err(LinalgError::NonFinite));
        assert!(matches!(
            nnls(&basis, &[1.0]),
            Err(LinalgError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gram_and_basis_forms_agree() {
        let basis = Matrix::from_rows(&[[1.0, 0.5], [0.2, 1.0], [0.3, 0.3]]).unwrap();
        let t = [1.0, -0.5, 0.4];
        let a = nnls(&basis, &t).unwrap();
        let b = nnls_gram(&basis.gram(), &basis.tr_matvec(&t).unwrap(), norm2(&t));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a[1], 0.0);
    }
}
