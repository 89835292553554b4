//! Small shared quadrature helpers (crate-internal).

/// 4-point Gauss-Legendre rule on [-1, 1]: (node, weight) pairs.
pub(crate) const GL4: [(f64, f64); 4] = [
    (-0.8611363115940526, 0.34785484513745385),
    (-0.3399810435848563, 0.6521451548625461),
    (0.3399810435848563, 0.6521451548625461),
    (0.8611363115940526, 0.34785484513745385),
];

/// Integrates `f` over `[a, b]` with one 4-point Gauss-Legendre panel.
pub(crate) fn gl4<F: FnMut(f64) -> f64>(a: f64, b: f64, mut f: F) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    GL4.iter().map(|&(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}
