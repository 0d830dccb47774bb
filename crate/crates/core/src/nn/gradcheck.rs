use super::{Layer, Matrix};
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
}

/// Result of comparing analytic against central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// One entry per parameter block, followed by `"input"`.
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
    pub worst_block: String,
}

pub(crate) fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn probe_loss<L: Layer>(layer: &L, x: &Matrix) -> Result<f64> {
    let y = layer.forward(x)?;
    let loss: f64 = y.as_slice().iter().map(|v| v * v).sum();
    if !loss.is_finite() {
        return Err(Error::numeric(
            "probe loss",
            format!("non-finite value {loss}"),
        ));
    }
    Ok(loss)
}

/// Checks every parameter block and the input gradient of `layer` under the
/// probe loss `sum(y^2)` using central differences with step `eps`.
pub fn grad_check<L: Layer + Clone>(layer: &L, x: &Matrix, eps: f64) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    probe_loss(layer, x)?;
    let (y, cache) = layer.forward_cached(x)?;
    let mut dy = y.clone();
    dy.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
    let (dx, grads) = layer.backward_cached(&cache, &dy)?;

    let names: Vec<String> = layer.param_blocks().into_iter().map(|(n, _)| n).collect();
    let mut blocks = Vec::with_capacity(names.len() + 1);
    for (b, name) in names.iter().enumerate() {
        let mut probe = layer.clone();
        let mut worst: f64 = 0.0;
        for i in 0..grads[b].len() {
            let orig = probe.param_blocks()[b].1[i];
            probe.param_blocks_mut()[b].1[i] = orig + eps;
            let plus = probe_loss(&probe, x)?;
            probe.param_blocks_mut()[b].1[i] = orig - eps;
            let minus = probe_loss(&probe, x)?;
            probe.param_blocks_mut()[b].1[i] = orig;
            worst = worst.max(rel_error(grads[b][i], (plus - minus) / (2.0 * eps)));
        }
        blocks.push(BlockError {
            name: name.clone(),
            max_rel_error: worst,
        });
    }

    let mut worst_input: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.as_slice().len() {
        let orig = xp.as_slice()[i];
        xp.as_mut_slice()[i] = orig + eps;
        let plus = probe_loss(layer, &xp)?;
        xp.as_mut_slice()[i] = orig - eps;
        let minus = probe_loss(layer, &xp)?;
        xp.as_mut_slice()[i] = orig;
        worst_input = worst_input.max(rel_error(dx.as_slice()[i], (plus - minus) / (2.0 * eps)));
    }
    blocks.push(BlockError {
        name: "input".into(),
        max_rel_error: worst_input,
    });

    let worst = blocks
        .iter()
        .fold(None::<&BlockError>, |acc, b| match acc {
            Some(a) if a.max_rel_error >= b.max_rel_error => Some(a),
            _ => Some(b),
        })
        .expect("at least the input block");
    Ok(GradCheckReport {
        max_rel_error: worst.max_rel_error,
        worst_block: worst.name.clone(),
        blocks,
    })
}
