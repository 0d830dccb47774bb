use crate::error::{Error, Result};

/// Fills unvoiced frames of a log-F0 track by linear interpolation between
/// the nearest voiced neighbours. Leading and trailing unvoiced runs hold the
/// nearest voiced value. Voiced frames are returned unchanged.
pub fn interpolate_f0(lf0: &[f64], voiced: &[bool]) -> Result<Vec<f64>> {
    if lf0.len() != voiced.len() {
        return Err(Error::shape("f0 voicing flags", lf0.len(), voiced.len()));
    }
    let anchors: Vec<usize> = (0..lf0.len()).filter(|&t| voiced[t]).collect();
    let (Some(&first), Some(&last)) = (anchors.first(), anchors.last()) else {
        if lf0.is_empty() {
            return Ok(Vec::new());
        }
        return Err(Error::Data(
            "cannot interpolate F0 of an all-unvoiced utterance".into(),
        ));
    };

    let mut out = lf0.to_vec();
    out[..first].fill(lf0[first]);
    out[last + 1..].fill(lf0[last]);
    for pair in anchors.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 2 {
            continue;
        }
        let span = (b - a) as f64;
        for (t, v) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (t - a) as f64 / span;
            *v = lf0[a] + w * (lf0[b] - lf0[a]);
        }
    }
    Ok(out)
}

/// Appends first and second differences to a static track, clamping at the
/// edges: `Δ_t = (x_{t+1} − x_{t−1})/2`, `ΔΔ_t = x_{t+1} − 2x_t + x_{t−1}`.
pub(crate) fn with_deltas(x: &[f64]) -> Vec<[f64; 3]> {
    let n = x.len();
    (0..n)
        .map(|t| {
            let prev = x[t.saturating_sub(1)];
            let next = x[(t + 1).min(n - 1)];
            [x[t], 0.5 * (next - prev), next - 2.0 * x[t] + prev]
        })
        .collect()
}
