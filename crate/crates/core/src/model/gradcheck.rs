use rand::seq::index::sample;
use rand::Rng as _;

use super::batch::Batch;
use super::params::Params;
use super::transformer::{forward, loss_and_grads};
use super::ModelError;
use crate::seeded_rng;

/// Gradient magnitudes below this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients to central differences at `coords` sampled
/// coordinates (at least a few from every tensor, the rest uniform).
pub fn finite_diff_check(
    p: &Params<f64>,
    b: &Batch,
    eps: f64,
    coords: usize,
    seed: u64,
) -> Result<GradCheck, ModelError> {
    let (_, grads) = loss_and_grads(p, b)?;
    let mut rng = seeded_rng(seed);
    let layout = p.layout().clone();
    let per_tensor = (coords / layout.tensors().len()).clamp(1, 4);
    let mut picks = Vec::with_capacity(coords);
    for t in layout.tensors() {
        let k = per_tensor.min(t.len);
        picks.extend(sample(&mut rng, t.len, k).into_iter().map(|i| t.offset + i));
    }
    while picks.len() < coords {
        picks.push(rng.gen_range(0..layout.len()));
    }

    let mut probe = p.clone();
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coords: picks.len(),
    };
    for &i in &picks {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = forward(&probe, b)?.loss;
        probe.data_mut()[i] = orig - eps;
        let down = forward(&probe, b)?.loss;
        probe.data_mut()[i] = orig;
        let err = relative_error(grads.data()[i], (up - down) / (2.0 * eps));
        if err > result.max_rel_error || result.worst.is_none() {
            let name = layout
                .tensor_at(i)
                .map(|t| t.name.clone())
                .unwrap_or_default();
            result.max_rel_error = err;
            result.worst = Some((name, i));
        }
    }
    Ok(result)
}
