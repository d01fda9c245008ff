//! Small numeric helpers shared across modules: empirical quantiles,
//! means, and deterministic seed derivation.

/// Linear-interpolation quantile at rank `p * (n - 1)` over a sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level out of range");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Quantile of an unsorted slice (copies and sorts).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

/// Midpoint-convention quantile over a sorted slice: when `p * n` lands on
/// an integer boundary, average the two adjacent order statistics.
pub fn quantile_midpoint_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len();
    let h = p * n as f64;
    let k = h.floor();
    if (h - k).abs() < 1e-12 {
        let k = k as usize;
        if k == 0 {
            sorted[0]
        } else if k >= n {
            sorted[n - 1]
        } else {
            0.5 * (sorted[k - 1] + sorted[k])
        }
    } else {
        sorted[(h.ceil() as usize - 1).min(n - 1)]
    }
}

/// Lowest order statistic minimizing the pinball loss at level `p`: the
/// type-1 empirical quantile `sorted[ceil(p * n) - 1]`. Unlike the
/// interpolated quantile this is an exact minimizer of the empirical
/// pinball loss and is invariant to duplicating the sample.
pub fn pinball_minimizer(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&p), "quantile level out of range");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let k = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// Median with the midpoint rule at even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_midpoint_sorted(&v, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// splitmix64 step, used to derive independent per-unit seeds from a master
/// seed so results do not depend on scheduling.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
