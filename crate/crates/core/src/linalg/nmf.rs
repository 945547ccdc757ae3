use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::matrix::{norm2, Matrix};
use super::nnls::{nnls_gram, nnls_gram_warm};
use super::LinalgError;

/// Settings for [`nmf`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmfConfig {
    pub rank: usize,
    pub max_outer_iters: usize,
    /// Stop once `(prev − cur) / prev` drops below this.
    pub rel_tol: f64,
    pub seed: u64,
    /// Independent initializations; the lowest final objective wins. The
    /// first one uses `seed` itself.
    pub restarts: usize,
}

impl NmfConfig {
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            max_outer_iters: 200,
            rel_tol: 1e-5,
            seed,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NmfResult {
    /// Coefficients, `n × r`.
    pub coefficients: Matrix,
    /// Concepts, `p × r`.
    pub concepts: Matrix,
    /// `½‖A − U Wᵀ‖²_F` after each outer iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl NmfResult {
    pub fn objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }
}

/// Factorizes a non-negative `n × p` matrix as `A ≈ U Wᵀ` by alternating NNLS.
///
/// Each half step solves its subproblem exactly with the active-set solver, so
/// the objective cannot increase; a half step that roundoff would make worse
/// is discarded, which keeps the recorded trace monotone. The objective is
/// evaluated from Gram matrices and the cross products the solves already
/// need, never by forming `U Wᵀ`.
pub fn nmf(a: &Matrix, config: &NmfConfig) -> Result<NmfResult, LinalgError> {
    let (n, p) = a.shape();
    let r = config.rank;
    if r == 0 || r > n.min(p) {
        return Err(LinalgError::RankOutOfRange {
            rank: r,
            max: n.min(p),
        });
    }
    if !a.is_nonnegative() {
        return Err(LinalgError::NegativeInput);
    }
    let mut best = nmf_from(a, config, config.seed)?;
    for k in 1..config.restarts as u64 {
        let seed = config.seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let candidate = nmf_from(a, config, seed)?;
        if candidate.objective() < best.objective() {
            best = candidate;
        }
    }
    Ok(best)
}

/// One run of the alternating scheme from a seeded random `W`.
fn nmf_from(a: &Matrix, config: &NmfConfig, seed: u64) -> Result<NmfResult, LinalgError> {
    let (n, p) = a.shape();
    let r = config.rank;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = a.mean() / (r as f64).sqrt();
    let init: Vec<f64> = (0..p * r).map(|_| rng.random::<f64>() * scale).collect();
    let mut w = Matrix::new(p, r, init)?;

    let a_norm_sq = a.frobenius_norm_sq();
    let row_norms: Vec<f64> = (0..n).map(|i| norm2(a.row(i))).collect();
    let col_norms: Vec<f64> = {
        let mut sq = vec![0.0; p];
        for i in 0..n {
            for (s, v) in sq.iter_mut().zip(a.row(i)) {
                *s += v * v;
            }
        }
        sq.into_iter().map(f64::sqrt).collect()
    };

    let mut wtw = w.gram();
    let mut aw = a.matmul(&w).expect("shapes agree");
    let mut u = solve_rows(&wtw, &aw, &row_norms, None);
    let mut utu = u.gram();
    let mut current = objective_from_products(a_norm_sq, &u, &aw, &utu, &wtw);
    let mut trace = Vec::with_capacity(config.max_outer_iters);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_outer_iters {
        iterations += 1;
        let prev = current;

        let atu = transpose_times(a, &u);
        let w_next = solve_rows(&utu, &atu, &col_norms, Some(&w));
        let wtw_next = w_next.gram();
        let obj = objective_from_products(a_norm_sq, &w_next, &atu, &wtw_next, &utu);
        if obj <= current {
            w = w_next;
            wtw = wtw_next;
            aw = a.matmul(&w).expect("shapes agree");
            current = obj;
        }

        let u_next = solve_rows(&wtw, &aw, &row_norms, Some(&u));
        let utu_next = u_next.gram();
        let obj = objective_from_products(a_norm_sq, &u_next, &aw, &utu_next, &wtw);
        if obj <= current {
            u = u_next;
            utu = utu_next;
            current = obj;
        }

        trace.push(current);
        if current == 0.0 || (prev - current) / prev < config.rel_tol {
            converged = true;
            break;
        }
    }

    Ok(NmfResult {
        coefficients: u,
        concepts: w,
        objective_trace: trace,
        iterations,
        converged,
    })
}

/// `Aᵀ B` for `A` of shape `n × p` and `B` of shape `n × r`, skipping zeros of `A`.
fn transpose_times(a: &Matrix, b: &Matrix) -> Matrix {
    let r = b.cols();
    let mut out = Matrix::zeros(a.cols(), r);
    for i in 0..a.rows() {
        let brow = b.row(i);
        for (j, &v) in a.row(i).iter().enumerate() {
            if v != 0.0 {
                for (o, &bv) in out.row_mut(j).iter_mut().zip(brow) {
                    *o += v * bv;
                }
            }
        }
    }
    out
}

/// `½‖A − X Yᵀ‖²` from `‖A‖²`, the cross product `C = A Y` (or `Aᵀ Y`),
/// and both Gram matrices: `½‖A‖² − ⟨X, C⟩ + ½⟨XᵀX, YᵀY⟩`, clamped at 0.
fn objective_from_products(a_norm_sq: f64, x: &Matrix, cross: &Matrix, xtx: &Matrix, yty: &Matrix) -> f64 {
    let inner: f64 = x.as_slice().iter().zip(cross.as_slice()).map(|(a, b)| a * b).sum();
    let gram: f64 = xtx.as_slice().iter().zip(yty.as_slice()).map(|(a, b)| a * b).sum();
    (0.5 * a_norm_sq - inner + 0.5 * gram).max(0.0)
}

/// Solves `min ‖x_i − B c‖` over `c ≥ 0` for every row, given `G = BᵀB` and
/// the rows `Bᵀ x_i` of `rhs`. Returns the stacked solutions. With `previous`,
/// each solve starts from the support of the matching previous row.
fn solve_rows(gram: &Matrix, rhs: &Matrix, norms: &[f64], previous: Option<&Matrix>) -> Matrix {
    let r = gram.rows();
    let rows: Vec<Vec<f64>> = (0..rhs.rows())
        .into_par_iter()
        .map(|i| match previous {
            Some(prev) => {
                let support: Vec<bool> = prev.row(i).iter().map(|&v| v > 0.0).collect();
                nnls_gram_warm(gram, rhs.row(i), norms[i], &support)
            }
            None => nnls_gram(gram, rhs.row(i), norms[i]),
        })
        .collect();
    let mut out = Matrix::zeros(rhs.rows(), r);
    for (i, row) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(row);
    }
    out
}

/// `½‖A − U Wᵀ‖²_F`, accumulated in fixed row order.
pub fn objective(a: &Matrix, u: &Matrix, w: &Matrix) -> f64 {
    let p = a.cols();
    let mut total = 0.0;
    let mut recon = vec![0.0; p];
    for i in 0..a.rows() {
        recon.iter_mut().for_each(|v| *v = 0.0);
        for (k, &c) in u.row(i).iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (j, rv) in recon.iter_mut().enumerate() {
                *rv += c * w.get(j, k);
            }
        }
        total += a
            .row(i)
            .iter()
            .zip(&recon)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    0.5 * total
}
