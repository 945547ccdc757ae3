use biasprobe::linalg::{cosine_similarity, nmf, nnls, Matrix, NmfConfig};
use proptest::prelude::*;

/// Random `rows × cols` matrix with entries in `[-1, 1]`.
fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-1.0f64..1.0, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    })
}

fn nonneg_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (2..=max_rows, 2..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(0.0f64..1.0, r * c).prop_map(move |v| Matrix::new(r, c, v).unwrap())
    })
}

fn residual(b: &Matrix, u: &[f64], t: &[f64]) -> Vec<f64> {
    b.matvec(u).unwrap().iter().zip(t).map(|(x, y)| x - y).collect()
}

fn half_sq(v: &[f64]) -> f64 {
    0.5 * v.iter().map(|x| x * x).sum::<f64>()
}

/// Largest KKT violation of `u` for `min ½‖Bu − t‖², u ≥ 0`.
fn kkt_violation(b: &Matrix, u: &[f64], t: &[f64]) -> f64 {
    let g = b.tr_matvec(&residual(b, u, t)).unwrap();
    u.iter()
        .zip(&g)
        .map(|(&uk, &gk)| {
            let primal = (-uk).max(0.0);
            let dual = (-gk).max(0.0);
            let slack = if uk > 0.0 { gk.abs() } else { 0.0 };
            primal.max(dual).max(slack)
        })
        .fold(0.0, f64::max)
}

/// `‖B‖₂²` by power iteration on `BᵀB`, padded slightly so the step stays safe.
fn spectral_norm_sq(b: &Matrix) -> f64 {
    let mut v = vec![1.0; b.cols()];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = b.tr_matvec(&b.matvec(&v).unwrap()).unwrap();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / norm).collect();
    }
    1.01 * lambda
}

/// Accelerated projected gradient with adaptive restart. Stops once its
/// objective comes within 1e-11 of `reference` or stalls; a lower objective
/// than the reference would show the reference is not optimal.
fn projected_gradient(b: &Matrix, t: &[f64], reference: f64) -> Vec<f64> {
    let n = b.cols();
    let step = 1.0 / spectral_norm_sq(b).max(1e-300);
    let mut x = vec![0.0; n];
    let mut y = x.clone();
    let mut momentum = 1.0f64;
    let mut prev = half_sq(&residual(b, &x, t));
    for it in 0..200_000 {
        let g = b.tr_matvec(&residual(b, &y, t)).unwrap();
        let next: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| (yi - step * gi).max(0.0)).collect();
        let f = half_sq(&residual(b, &next, t));
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        if f > prev {
            // Restart the momentum when it overshoots.
            momentum = 1.0;
            y = x.clone();
            continue;
        }
        y = next.iter().zip(&x).map(|(a, b)| a + (momentum - 1.0) / m_next * (a - b)).collect();
        x = next;
        momentum = m_next;
        let done = f - reference <= 1e-11 || (it % 16 == 0 && kkt_violation(b, &x, t) < 1e-13);
        prev = f;
        if done {
            break;
        }
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn nnls_satisfies_kkt_and_matches_projected_gradient(
        (b, t) in matrix(50, 20).prop_flat_map(|b| {
            let rows = b.rows();
            (Just(b), prop::collection::vec(-2.0f64..2.0, rows))
        })
    ) {
        let u = nnls(&b, &t).unwrap();
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(u.iter().all(|&v| v >= 0.0));
        prop_assert!(kkt_violation(&b, &u, &t) <= 1e-8 * norm.max(1.0));
        let f_nnls = half_sq(&residual(&b, &u, &t));
        let f_pg = half_sq(&residual(&b, &projected_gradient(&b, &t, f_nnls), &t));
        // The exact solver can only do better than the iterative oracle.
        prop_assert!(f_nnls <= f_pg + 1e-10, "nnls {f_nnls} vs pg {f_pg}");
        prop_assert!((f_nnls - f_pg).abs() <= 1e-10, "nnls {f_nnls} vs pg {f_pg}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn nmf_trace_is_monotone_and_factors_nonnegative(a in nonneg_matrix(40, 30), rank in 1usize..6, seed in any::<u64>()) {
        let rank = rank.min(a.rows()).min(a.cols());
        let res = nmf(&a, &NmfConfig::new(rank, seed)).unwrap();
        prop_assert!(res.objective_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(res.coefficients.is_nonnegative() && res.concepts.is_nonnegative());
        prop_assert_eq!(res.coefficients.shape(), (a.rows(), rank));
        prop_assert_eq!(res.concepts.shape(), (a.cols(), rank));
    }

    #[test]
    fn restarts_never_do_worse(a in nonneg_matrix(20, 12), rank in 1usize..4, seed in any::<u64>()) {
        let rank = rank.min(a.rows()).min(a.cols());
        let once = nmf(&a, &NmfConfig::new(rank, seed)).unwrap();
        let best = nmf(&a, &NmfConfig { restarts: 3, ..NmfConfig::new(rank, seed) }).unwrap();
        prop_assert!(best.objective() <= once.objective());
        prop_assert!(best.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(u in prop::collection::vec(-5.0f64..5.0, 8), v in prop::collection::vec(-5.0f64..5.0, 8)) {
        if let (Ok(a), Ok(b)) = (cosine_similarity(&u, &v), cosine_similarity(&v, &u)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
            prop_assert_eq!(a, b);
        }
    }
}

#[test]
fn nmf_recovers_exact_factorizations() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for case in 0..20 {
        let (n, p, r) = (rng.random_range(20..60), rng.random_range(10..30), rng.random_range(1..5));
        let u = Matrix::new(n, r, (0..n * r).map(|_| rng.random::<f64>()).collect()).unwrap();
        let w = Matrix::new(p, r, (0..p * r).map(|_| rng.random::<f64>()).collect()).unwrap();
        let a = u.matmul(&w.transpose()).unwrap();
        let cfg = NmfConfig {
            max_outer_iters: 2000,
            rel_tol: 1e-12,
            restarts: 5,
            ..NmfConfig::new(r, case)
        };
        let res = nmf(&a, &cfg).unwrap();
        // The trace stores ½‖A − UWᵀ‖².
        let rel = 2.0 * res.objective() / a.frobenius_norm_sq();
        assert!(rel <= 1e-6, "case {case} ({n}x{p}, rank {r}): relative residual {rel:.3e}");
    }
}
