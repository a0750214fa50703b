//! Dense f64 kernels used by the forward/backward passes and the evaluators.
//!
//! Reductions use fixed-order 4-lane accumulators: fast on a scalar core and
//! still fully deterministic (the summation order is part of the contract).

use crate::error::{Error, Result};

/// Dot product with a fixed 4-lane reduction order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let j = c * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..n {
        s += a[j] * b[j];
    }
    s
}

/// Euclidean norm.
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// y += alpha * x
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// y = W x for row-major W with `rows` rows of length x.len().
pub(crate) fn matvec(w: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), y.len() * cols);
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = dot(&w[i * cols..(i + 1) * cols], x);
    }
}

/// y += Wᵀ u for row-major W with u.len() rows of length y.len().
pub(crate) fn matvec_t_add(w: &[f64], u: &[f64], y: &mut [f64]) {
    let cols = y.len();
    debug_assert_eq!(w.len(), u.len() * cols);
    for (i, &ui) in u.iter().enumerate() {
        axpy(ui, &w[i * cols..(i + 1) * cols], y);
    }
}

/// G += u ⊗ x (outer product) for row-major G with u.len() rows.
pub(crate) fn outer_add(g: &mut [f64], u: &[f64], x: &[f64]) {
    let cols = x.len();
    debug_assert_eq!(g.len(), u.len() * cols);
    for (i, &ui) in u.iter().enumerate() {
        axpy(ui, x, &mut g[i * cols..(i + 1) * cols]);
    }
}

/// True when the slices carry bit-identical contents.
pub(crate) fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Cosine similarity. Bit-identical inputs short-circuit to exactly 1.0 so
/// that the student-equals-teacher degeneracy produces exact zeros downstream.
pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = norm(a);
    if na == 0.0 {
        return Err(Error::Numeric("zero-norm embedding in cosine".to_string()));
    }
    if bits_equal(a, b) {
        return Ok(1.0);
    }
    let nb = norm(b);
    if nb == 0.0 {
        return Err(Error::Numeric("zero-norm embedding in cosine".to_string()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// v / |v|; errors on the zero vector.
pub(crate) fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize vector with norm {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}
