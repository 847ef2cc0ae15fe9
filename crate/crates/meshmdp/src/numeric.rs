//! Log-space accumulation helpers.
//!
//! All density arithmetic in this crate stays in log space; sums of densities
//! go through max-shifted exponential summation with index-ascending order so
//! results are bit-reproducible.

/// Max-shifted log of the sum of exponentials.
///
/// Returns `-inf` for an empty slice or when every entry is `-inf`; returns
/// `+inf` if any entry is `+inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &v in values {
        if v > m {
            m = v;
        }
    }
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    let mut sum = 0.0;
    for &v in values {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

/// Two-term log-sum-exp.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// Softmax of `log_terms` written into `out`, index-ascending sums.
///
/// Returns `true` (degenerate) with an all-zero `out` when every term is
/// `-inf`; that is the 0/0 = 0 convention for fully underflowed weights.
/// `+inf` terms absorb all mass, split equally among themselves.
pub fn normalized_exp_weights(log_terms: &[f64], out: &mut [f64]) -> bool {
    assert_eq!(log_terms.len(), out.len());
    let mut m = f64::NEG_INFINITY;
    for &t in log_terms {
        if t > m {
            m = t;
        }
    }
    if m == f64::NEG_INFINITY {
        out.fill(0.0);
        return true;
    }
    if m == f64::INFINITY {
        let count = log_terms.iter().filter(|&&t| t == f64::INFINITY).count();
        let w = 1.0 / count as f64;
        for (o, &t) in out.iter_mut().zip(log_terms) {
            *o = if t == f64::INFINITY { w } else { 0.0 };
        }
        return false;
    }
    let mut total = 0.0;
    for (o, &t) in out.iter_mut().zip(log_terms) {
        *o = (t - m).exp();
        total += *o;
    }
    let inv = 1.0 / total;
    for o in out.iter_mut() {
        *o *= inv;
    }
    false
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Squared Euclidean distance.
pub fn dist2_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
}
