//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::MamocNet;
use crate::params::{Gradients, ParamStore};
use crate::train::{batch_backward, l2_slices, Example};

/// Gradient magnitudes below this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub samples: usize,
    pub tensors_covered: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares `grads` against central differences of `loss` at `samples`
/// random coordinates; every tensor contributes at least one coordinate.
pub fn finite_difference_check(
    loss: impl Fn(&ParamStore<f64>) -> Result<f64>,
    params: &ParamStore<f64>,
    grads: &Gradients<f64>,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::BadEpsilon(eps));
    }
    if !params.same_layout(grads) {
        return Err(Error::ShapeMismatch("gradients do not mirror the parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = params.tensors().iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let mut coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .filter(|(_, &n)| n > 0)
        .map(|(id, &n)| (id, rng.random_range(0..n)))
        .collect();
    let covered = coords.len();
    while coords.len() < samples {
        let mut flat = rng.random_range(0..total);
        let mut id = 0;
        while flat >= sizes[id] {
            flat -= sizes[id];
            id += 1;
        }
        coords.push((id, flat));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        samples: coords.len(),
        tensors_covered: covered,
    };
    let mut probe = params.clone();
    for (id, k) in coords {
        let orig = probe.get(id)[k];
        probe.get_mut(id)[k] = orig + eps;
        let fp = loss(&probe)?;
        probe.get_mut(id)[k] = orig - eps;
        let fm = loss(&probe)?;
        probe.get_mut(id)[k] = orig;
        let err = relative_error(grads.get(id)[k], (fp - fm) / (2.0 * eps));
        if err > report.max_rel_error || report.worst_tensor.is_empty() {
            report.max_rel_error = err;
            report.worst_tensor = params.name(id).to_owned();
            report.worst_index = k;
        }
    }
    Ok(report)
}

/// Full-network check of the batched L2 objective in 64-bit arithmetic.
pub fn network_gradient_check(
    net: &MamocNet,
    params: &ParamStore<f64>,
    batch: &[Example<f64>],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::BadEpsilon(eps));
    }
    let (_, grads) = batch_backward(net, params, batch)?;
    let side = net.config().side;
    let cat = |f: fn(&Example<f64>) -> &Vec<f64>| -> Vec<f64> { batch.iter().flat_map(|e| f(e).iter().copied()).collect() };
    let input = crate::tensor::FeatureGrid::new(batch.len(), side, 1, cat(|e| &e.input))?;
    let keep = crate::tensor::FeatureGrid::new(batch.len(), side, 1, cat(|e| &e.keep))?;
    let target = cat(|e| &e.target);
    let loss = |p: &ParamStore<f64>| -> Result<f64> { Ok(l2_slices(&net.forward(p, &input, &keep)?.output, &target)) };
    finite_difference_check(loss, params, &grads, eps, samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use crate::params::Registry;

    #[test]
    fn linear_layer_is_exact() {
        let mut reg = Registry::new();
        let lin = Linear::register(&mut reg, "l", 3, 2);
        let p: ParamStore<f64> = reg.init(0.5, 1).cast();
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.4).collect();
        let w = [0.3, -0.7, 1.1, 0.2, 0.5, -0.9, 0.4, 0.8];
        let loss = |p: &ParamStore<f64>| -> Result<f64> { Ok(lin.forward(p, &x).iter().zip(&w).map(|(a, b)| a * b).sum()) };
        let mut g = p.zeros_like();
        lin.backward(&p, &x, &w, &mut g);
        let r = finite_difference_check(loss, &p, &g, 1e-5, 20, 3).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.tensors_covered, 2);
        assert!(matches!(finite_difference_check(loss, &p, &g, 0.0, 20, 3), Err(Error::BadEpsilon(_))));
    }
}
