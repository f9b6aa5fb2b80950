//! Per-voxel output gate blending the observed input with the prediction.

use rayon::prelude::*;

use crate::layers::Linear;
use crate::params::{Gradients, ParamStore, Registry};
use crate::real::Real;
use crate::tensor::{gelu_backward, gelu_forward, sigmoid, ROW_CHUNK};

#[derive(Debug, Clone)]
pub struct Gate {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct GateCache<T> {
    input: Vec<T>,
    keep: Vec<T>,
    prediction: Vec<T>,
    features: Vec<T>,
    hidden: Vec<T>,
    act: Vec<T>,
    gate: Vec<T>,
}

/// `out = a·x + (1 − a)·pred` with `a = m·g`; where `m = 0` the prediction
/// is returned untouched.
#[inline]
pub fn blend<T: Real>(x: T, m: T, g: T, pred: T) -> T {
    if m == T::zero() {
        pred
    } else {
        let a = m * g;
        a * x + (T::one() - a) * pred
    }
}

impl Gate {
    pub fn register(reg: &mut Registry, name: &str, hidden: usize) -> Self {
        Self {
            fc1: Linear::register(reg, &format!("{name}.fc1"), 3, hidden),
            fc2: Linear::register(reg, &format!("{name}.fc2"), hidden, 1),
        }
    }

    /// Returns the blended output and the gate values `g`.
    pub fn forward<T: Real>(
        &self,
        p: &ParamStore<T>,
        input: &[T],
        keep: &[T],
        prediction: &[T],
    ) -> (Vec<T>, Vec<T>, GateCache<T>) {
        let n = input.len();
        let mut features = vec![T::zero(); 3 * n];
        features.par_chunks_mut(3 * ROW_CHUNK).enumerate().for_each(|(chunk, f)| {
            for (r, row) in f.chunks_exact_mut(3).enumerate() {
                let i = chunk * ROW_CHUNK + r;
                row[0] = input[i];
                row[1] = keep[i];
                row[2] = prediction[i];
            }
        });
        let hidden = self.fc1.forward(p, &features);
        let act = gelu_forward(&hidden);
        let logits = self.fc2.forward(p, &act);
        let gate: Vec<T> = logits.iter().map(|&l| sigmoid(l)).collect();
        let out: Vec<T> = (0..n).map(|i| blend(input[i], keep[i], gate[i], prediction[i])).collect();
        let cache = GateCache {
            input: input.to_vec(),
            keep: keep.to_vec(),
            prediction: prediction.to_vec(),
            features,
            hidden,
            act,
            gate: gate.clone(),
        };
        (out, gate, cache)
    }

    /// Gradient with respect to the prediction; input and keep grid are data.
    pub fn backward<T: Real>(&self, p: &ParamStore<T>, cache: &GateCache<T>, dout: &[T], g: &mut Gradients<T>) -> Vec<T> {
        let n = dout.len();
        let mut dpred = vec![T::zero(); n];
        let mut dlogit = vec![T::zero(); n];
        for i in 0..n {
            let (x, m, gv, pr) = (cache.input[i], cache.keep[i], cache.gate[i], cache.prediction[i]);
            if m == T::zero() {
                dpred[i] = dout[i];
            } else {
                let a = m * gv;
                dpred[i] = dout[i] * (T::one() - a);
                dlogit[i] = dout[i] * (x - pr) * m * gv * (T::one() - gv);
            }
        }
        let dact = self.fc2.backward(p, &cache.act, &dlogit, g);
        let dhidden = gelu_backward(&cache.hidden, &dact);
        let dfeat = self.fc1.backward(p, &cache.features, &dhidden, g);
        for (d, f) in dpred.iter_mut().zip(dfeat.chunks_exact(3)) {
            *d += f[2];
        }
        dpred
    }
}
