//! Small numeric helpers shared across modules.

/// Neumaier-compensated sum; result is insensitive to summation order
/// well below 1e-9 for the magnitudes handled here.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Compensated arithmetic mean; `None` for an empty input.
pub fn mean<I: IntoIterator<Item = f64>>(values: I) -> Option<f64> {
    let mut n = 0usize;
    let mut infinite = None;
    let s = compensated_sum(values.into_iter().inspect(|v| {
        n += 1;
        if v.is_infinite() {
            infinite = Some(*v);
        }
    }).filter(|v| v.is_finite()));
    if n == 0 {
        return None;
    }
    // An infinite score (identical images) dominates the mean.
    Some(infinite.unwrap_or(s / n as f64))
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &mut [f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let (lower, m, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        Some(m)
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(0.5 * (below + m))
    }
}
