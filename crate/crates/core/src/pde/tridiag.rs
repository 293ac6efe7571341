//! Tridiagonal systems via the Thomas algorithm.

/// Solve `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]` in place.
/// `sub[0]` and `sup[n-1]` are ignored. Requires a nonsingular factorization
/// (diagonally dominant in all our uses); panics on a zero pivot.
pub fn solve(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &mut [f64], scratch: &mut [f64]) {
    let n = rhs.len();
    debug_assert!(sub.len() == n && diag.len() == n && sup.len() == n && scratch.len() >= n);
    // forward sweep
    let mut d = diag[0];
    assert!(d != 0.0, "zero pivot in tridiagonal solve");
    scratch[0] = sup[0] / d;
    rhs[0] /= d;
    for i in 1..n {
        let m = diag[i] - sub[i] * scratch[i - 1];
        assert!(m != 0.0, "zero pivot in tridiagonal solve");
        scratch[i] = sup[i] / m;
        rhs[i] = (rhs[i] - sub[i] * rhs[i - 1]) / m;
        d = m;
    }
    let _ = d;
    // back substitution
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i] * rhs[i + 1];
    }
}
