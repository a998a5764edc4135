use crate::backbone::{ModelParams, Scalar};
use crate::error::Result;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        Adam {
            m: ModelParams::zeros_like(params),
            v: ModelParams::zeros_like(params),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, lr: f64) -> Result<()> {
        params.ensure_compatible(grads)?;
        params.ensure_compatible(&self.m)?;
        self.t += 1;
        let b1 = F::of(BETA1);
        let b2 = F::of(BETA2);
        let one = F::one();
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let step = F::of(lr / c1);
        let inv_c2 = F::of(1.0 / c2);
        let eps = F::of(EPSILON);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.m.values_mut())
            .zip(self.v.values_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            *p = *p - step * *m / ((*v * inv_c2).sqrt() + eps);
        }
        Ok(())
    }
}
