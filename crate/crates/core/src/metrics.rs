//! Objective measures: mel-cepstral distortion, F0 RMSE, U/V error and the
//! overall normalized-space MSE.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

use crate::corpus::NormStats;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::streams::Streams;
use crate::training::mse_loss;

/// `10 / ln 10`, converting natural-log cepstral distance to decibels.
pub const MCD_CONST: f64 = 10.0 / LN_10;

/// Frames whose regressed U/V value is strictly above this are voiced.
pub const UV_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mcd: f64,
    pub f0_rmse: f64,
    pub uv_error: f64,
    pub overall_mse: f64,
    pub n_frames: usize,
    /// False when no frame was voiced in both reference and prediction, in
    /// which case `f0_rmse` is reported as 0.
    pub f0_defined: bool,
}

pub const CSV_HEADER: &str = "system,n_adapt,mcd,f0_rmse,uv_err,mse,n_frames";

impl MetricsReport {
    pub fn csv_row(&self, system: &str, n_adapt: usize) -> String {
        format!(
            "{system},{n_adapt},{:.6},{:.6},{:.6},{:.8},{}",
            self.mcd, self.f0_rmse, self.uv_error, self.overall_mse, self.n_frames
        )
    }
}

fn same_frames(context: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

/// Mean over frames of `MCD_CONST · sqrt(2 Σ_{d≥1} (c_d − ĉ_d)²)`. The
/// energy coefficient `c_0` is excluded.
pub fn mcd(reference: &Matrix, hypothesis: &Matrix) -> Result<f64> {
    same_frames("mcd frames", reference.rows(), hypothesis.rows())?;
    same_frames("mcd dims", reference.cols(), hypothesis.cols())?;
    if reference.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = reference
        .row_iter()
        .zip(hypothesis.row_iter())
        .map(|(r, h)| {
            let sq: f64 = r
                .iter()
                .zip(h)
                .skip(1)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            MCD_CONST * (2.0 * sq).sqrt()
        })
        .sum();
    Ok(total / reference.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F0Rmse {
    pub hz: f64,
    pub voiced_frames: usize,
}

impl F0Rmse {
    pub fn defined(&self) -> bool {
        self.voiced_frames > 0
    }
}

/// RMSE in Hz of `exp(lf0)` over frames voiced in both reference and
/// hypothesis.
pub fn f0_rmse(
    ref_lf0: &[f64],
    hyp_lf0: &[f64],
    ref_voiced: &[bool],
    hyp_voiced: &[bool],
) -> Result<F0Rmse> {
    let n = ref_lf0.len();
    same_frames("f0 hypothesis frames", n, hyp_lf0.len())?;
    same_frames("f0 reference voicing frames", n, ref_voiced.len())?;
    same_frames("f0 hypothesis voicing frames", n, hyp_voiced.len())?;
    let mut sq = 0.0;
    let mut count = 0;
    for t in 0..n {
        if ref_voiced[t] && hyp_voiced[t] {
            let d = ref_lf0[t].exp() - hyp_lf0[t].exp();
            sq += d * d;
            count += 1;
        }
    }
    Ok(F0Rmse {
        hz: if count == 0 {
            0.0
        } else {
            (sq / count as f64).sqrt()
        },
        voiced_frames: count,
    })
}

pub fn is_voiced(regressed: f64) -> bool {
    regressed > UV_THRESHOLD
}

/// Fraction of frames where the thresholded regressed value disagrees with
/// the reference flag.
pub fn uv_error(ref_voiced: &[bool], hyp_regressed: &[f64]) -> Result<f64> {
    same_frames("uv frames", ref_voiced.len(), hyp_regressed.len())?;
    if ref_voiced.is_empty() {
        return Ok(0.0);
    }
    let wrong = ref_voiced
        .iter()
        .zip(hyp_regressed)
        .filter(|(&r, &h)| is_voiced(h) != r)
        .count();
    Ok(wrong as f64 / ref_voiced.len() as f64)
}

/// Training loss evaluated on de-normalized streams after mapping both back
/// into normalized space with `stats`.
pub fn overall_mse(preds: &Streams, targets: &Streams, stats: &NormStats) -> Result<f64> {
    let p = stats.normalize_streams(preds)?;
    let t = stats.normalize_streams(targets)?;
    Ok(mse_loss(p.as_array(), t.as_array())?.0)
}
