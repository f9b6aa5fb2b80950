use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LionConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl LionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::BadConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::BadConfig(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::BadConfig(format!("{k} {b} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Momentum tensors shaped like the parameters, plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: ParamStore<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { momentum: params.zeros_like(), step: 0 }
    }
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn lion_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut OptimizerState<T>,
    cfg: &LionConfig,
) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.momentum) {
        return Err(Error::ShapeMismatch("optimizer tensors do not mirror the parameters".into()));
    }
    let lr = T::lit(cfg.lr);
    let wd = T::lit(cfg.weight_decay);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    for id in 0..params.len() {
        let g = grads.get(id);
        let m = state.momentum.get_mut(id);
        let p = params.get_mut(id);
        for i in 0..p.len() {
            let u = sign(b1 * m[i] + (one - b1) * g[i]);
            p[i] -= lr * (u + wd * p[i]);
            m[i] = b2 * m[i] + (one - b2) * g[i];
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Registry};

    fn scalar() -> ParamStore<f64> {
        let mut r = Registry::new();
        r.register("p", &[1], Init::Zeros);
        r.zeros()
    }

    const CFG: LionConfig = LionConfig { lr: 0.1, weight_decay: 0.0, beta1: 0.9, beta2: 0.99 };

    #[test]
    fn hand_oracle() {
        let mut p = scalar();
        p.get_mut(0)[0] = 1.0;
        let mut g = scalar();
        g.get_mut(0)[0] = 1.0;
        let mut st = OptimizerState::new(&p);
        lion_step(&mut p, &g, &mut st, &CFG).unwrap();
        assert!((p.get(0)[0] - 0.9).abs() < 1e-15);
        assert!((st.momentum.get(0)[0] - 0.01).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_and_sign_is_scale_free() {
        let mut p = scalar();
        p.get_mut(0)[0] = 0.3;
        let g = scalar();
        let mut st = OptimizerState::new(&p);
        lion_step(&mut p, &g, &mut st, &CFG).unwrap();
        assert_eq!(p.get(0)[0], 0.3);

        let mut a = scalar();
        let mut b = scalar();
        let mut ga = scalar();
        ga.get_mut(0)[0] = -0.2;
        let mut gb = scalar();
        gb.get_mut(0)[0] = -2.0;
        let mut sa = OptimizerState::new(&a);
        let mut sb = OptimizerState::new(&b);
        lion_step(&mut a, &ga, &mut sa, &CFG).unwrap();
        lion_step(&mut b, &gb, &mut sb, &CFG).unwrap();
        assert_eq!(a.get(0), b.get(0));
    }

    #[test]
    fn update_magnitude_bound() {
        let cfg = LionConfig { weight_decay: 0.5, ..CFG };
        let mut p = scalar();
        p.get_mut(0)[0] = -0.8;
        let mut g = scalar();
        g.get_mut(0)[0] = 0.01;
        let before = p.get(0)[0];
        let mut st = OptimizerState::new(&p);
        lion_step(&mut p, &g, &mut st, &cfg).unwrap();
        let d = (p.get(0)[0] - before).abs();
        assert!(d <= cfg.lr * (1.0 + cfg.weight_decay * 0.8) + 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(LionConfig { lr: 0.0, ..CFG }.validate().is_err());
        assert!(LionConfig { beta1: 1.0, ..CFG }.validate().is_err());
        assert!(CFG.validate().is_ok());
    }
}
