//! Adam optimizer over a named parameter map.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::real::Real;

/// Adam with bias correction. Parameters are identified by name so the
/// same optimizer state survives rebuilt computation graphs.
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update. Only parameters present in `grads` move; shapes
    /// must match the stored parameters.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Arc<ArrayD<T>>>,
        grads: &BTreeMap<String, ArrayD<T>>,
    ) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step_size = T::from_f64(self.lr / bc1);
        let bc2_sqrt_inv = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("adam: gradient for unknown parameter {name}"));
            assert_eq!(param.shape(), grad.shape(), "adam: shape mismatch for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| *m = *m * b1 + g * one_m_b1);
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| *v = *v * b2 + g * g * one_m_b2);
            let p = Arc::make_mut(param);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let denom = (v.maxv(T::ZERO)).sqrt() * bc2_sqrt_inv + eps;
                *p = *p - step_size * m / denom;
            });
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(p) = ||p - c||^2 has gradient 2(p - c); Adam should converge.
        let c = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0f64, -2.0, 0.5]).unwrap();
        let mut params: BTreeMap<String, Arc<ArrayD<f64>>> = BTreeMap::new();
        params.insert("p".into(), Arc::new(ArrayD::zeros(IxDyn(&[3]))));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let p = params.get("p").unwrap();
            let grad = (p.as_ref() - &c).mapv(|d| 2.0 * d);
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), grad);
            opt.step(&mut params, &grads);
        }
        let p = params.get("p").unwrap();
        for (a, b) in p.iter().zip(c.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
