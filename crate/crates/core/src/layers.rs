//! Parameterized wrappers around the dense kernels.

use crate::params::{Gradients, Init, ParamId, ParamStore, Registry};
use crate::real::Real;
use crate::tensor::{layer_norm_backward, layer_norm_forward, linear_backward, linear_forward, NormCache};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register(reg: &mut Registry, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = reg.register(format!("{name}.weight"), &[d_out, d_in], Init::TruncNormal);
        let bias = reg.register(format!("{name}.bias"), &[d_out], Init::Zeros);
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        linear_forward(x, self.d_in, p.get(self.weight), p.get(self.bias), self.d_out)
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, x: &[T], dy: &[T], g: &mut Gradients<T>) -> Vec<T> {
        let (gw, gb) = g.pair_mut(self.weight, self.bias);
        linear_backward(x, self.d_in, p.get(self.weight), self.d_out, dy, gw, gb)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl LayerNorm {
    pub fn register(reg: &mut Registry, name: &str, channels: usize) -> Self {
        let gain = reg.register(format!("{name}.weight"), &[channels], Init::Ones);
        let bias = reg.register(format!("{name}.bias"), &[channels], Init::Zeros);
        Self { gain, bias, channels }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, NormCache<T>) {
        layer_norm_forward(x, self.channels, p.get(self.gain), p.get(self.bias))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        cache: &NormCache<T>,
        dy: &[T],
        g: &mut Gradients<T>,
    ) -> Vec<T> {
        let (gg, gb) = g.pair_mut(self.gain, self.bias);
        layer_norm_backward(cache, self.channels, p.get(self.gain), dy, gg, gb)
    }
}
