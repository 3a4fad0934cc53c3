//! Small dense-vector helpers over `&[f64]`.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], k: f64) -> Vec<f64> {
    a.iter().map(|x| x * k).collect()
}

/// `y += k·x`
pub fn axpy(y: &mut [f64], k: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += k * xi;
    }
}

/// `a + t(b − a)`, exact at `t = 0`, at `t = 1` and when `a == b`.
pub fn lerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    if t == 1.0 {
        return b.to_vec();
    }
    a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(I − u uᵀ) v` for a unit vector `u`.
pub fn reject(v: &[f64], unit: &[f64]) -> Vec<f64> {
    let k = dot(v, unit);
    v.iter().zip(unit).map(|(x, u)| x - k * u).collect()
}

pub fn is_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// `log Σ exp(xᵢ)`, ignoring `-inf` terms.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
