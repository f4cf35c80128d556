//! Quarter-resolution Gaussian head kernels.

/// Kernels are cut off at this many standard deviations per axis.
pub const TRUNCATION_SIGMAS: f64 = 4.0;

/// Per-axis weights of a unit-mass discrete Gaussian centred at `mu`
/// (in grid-index units), truncated at `TRUNCATION_SIGMAS * sigma`.
///
/// The normalizer runs over the untruncated grid, so the returned weights
/// sum to slightly less than 1. Indices outside `0..len` fold onto the
/// nearest edge cell.
fn axis_weights(mu: f64, sigma: f64, len: usize) -> Vec<(usize, f64)> {
    let g = |k: i64| {
        let d = k as f64 - mu;
        (-d * d / (2.0 * sigma * sigma)).exp()
    };
    let wide = (12.0 * sigma).ceil() as i64 + 1;
    let centre = mu.round() as i64;
    let z: f64 = (centre - wide..=centre + wide).map(g).sum();
    let reach = TRUNCATION_SIGMAS * sigma;
    let lo = (mu - reach).ceil() as i64;
    let hi = (mu + reach).floor() as i64;
    (lo..=hi)
        .map(|k| (k.clamp(0, len as i64 - 1) as usize, g(k) / z))
        .collect()
}

/// Adds one head's mass to a `rows x cols` map. `(r, c)` is the head's
/// full-resolution position in pixel units; the map is `scale` times
/// coarser, with cell `k` centred at `(k + 0.5) * scale`.
pub fn splat(map: &mut [f64], rows: usize, cols: usize, r: f64, c: f64, scale: f64, sigma: f64) {
    let wr = axis_weights(r / scale - 0.5, sigma, rows);
    let wc = axis_weights(c / scale - 0.5, sigma, cols);
    for &(i, a) in &wr {
        for &(j, b) in &wc {
            map[i * cols + j] += a * b;
        }
    }
}
