//! Special functions not provided by `statrs`.

/// Trigamma `ψ′(x)` for `x > 0`: upward recurrence to `x ≥ 10`, then the
/// asymptotic series in `1/x`.
pub fn trigamma(mut x: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let z = 1.0 / (x * x);
    // 1/x + 1/(2x²) + Σ B_{2k}/x^{2k+1}
    let series = 1.0 / x
        + z / 2.0
        + z / x
            * (1.0 / 6.0
                + z * (-1.0 / 30.0
                    + z * (1.0 / 42.0 + z * (-1.0 / 30.0 + z * (5.0 / 66.0 + z * (-691.0 / 2730.0))))));
    acc + series
}
