//! Central finite-difference check of the reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::net::Model;
use crate::model::train::{clip_loss, Clip};

/// Gradients smaller than this in magnitude are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

fn loss_value(model: &Model, clip: &Clip) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let (loss, _) = clip_loss(model, &mut g, &p, clip)?
        .ok_or_else(|| Error::InvalidAnnotation("clip carries no target".into()))?;
    Ok(g.value(loss).data()[0])
}

/// `|a - n| / max(|a|, |n|)`, or the absolute gap when both are below
/// [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let gap = (analytic - numeric).abs();
    if scale < ABS_FLOOR {
        gap
    } else {
        gap / scale
    }
}

/// Compares the gradient of the clip loss against central differences on
/// `count` scalars drawn uniformly from the parameters the loss reaches.
pub fn check_gradients(model: &Model, clip: &Clip, count: usize, eps: f64, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let (loss, _) = clip_loss(model, &mut g, &p, clip)?
        .ok_or_else(|| Error::InvalidAnnotation("clip carries no target".into()))?;
    let grads = g.backward(loss)?;
    let live = g.reached_params(&grads);
    let reached: Vec<_> = g.param_grads(&grads).into_iter().filter(|(id, _)| live.contains(id)).collect();
    let total: usize = reached.iter().map(|(_, t)| t.len()).sum();
    if total == 0 {
        return Err(Error::Invariant("loss reaches no parameter".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut k = rng.random_range(0..total);
        let (id, grad) = reached
            .iter()
            .find(|(_, t)| {
                if k < t.len() {
                    true
                } else {
                    k -= t.len();
                    false
                }
            })
            .expect("index within total");
        let original = probe.params().get(*id).data()[k];
        probe.params_mut().get_mut(*id).data_mut()[k] = original + eps;
        let up = loss_value(&probe, clip)?;
        probe.params_mut().get_mut(*id).data_mut()[k] = original - eps;
        let down = loss_value(&probe, clip)?;
        probe.params_mut().get_mut(*id).data_mut()[k] = original;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grad.data()[k];
        out.push(GradCheckEntry {
            param: model.params().name(*id).to_string(),
            index: k,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}
