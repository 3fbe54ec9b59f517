//! Adam with inverse-square-root warmup, and checkpoint averaging.

use alloc::vec::Vec;

use crate::{Error, ParamStore, Result, Tensor};

/// `base · D^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
///
/// Rises linearly for `step < warmup`, peaks at `step == warmup`, then decays
/// as `step^-0.5`. `step` is 1-based.
pub fn lr_schedule(step: u64, warmup: u64, dim: usize, base: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    let rise = step * libm::pow(warmup, -1.5);
    let decay = 1.0 / libm::sqrt(step);
    base / libm::sqrt(dim as f64) * rise.min(decay)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| p.value.zeros_like()).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One bias-corrected update from the accumulated gradients. Leaves
    /// parameters untouched and fails if any gradient is not finite.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(beta1, t);
        let c2 = 1.0 - libm::pow(beta2, t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let grad = p.grad.data();
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Indices of the `n` smallest metrics, best first. Ties keep input order.
pub fn top_n_indices(metrics: &[f64], n: usize) -> Result<Vec<usize>> {
    if metrics.is_empty() {
        return Err(Error::Empty("checkpoint list"));
    }
    if n == 0 || n > metrics.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "cannot select top {n} of {} checkpoints",
            metrics.len()
        )));
    }
    let mut order: Vec<usize> = (0..metrics.len()).collect();
    order.sort_by(|&a, &b| metrics[a].total_cmp(&metrics[b]));
    order.truncate(n);
    Ok(order)
}

/// Elementwise arithmetic mean of parameter sets sharing one layout.
/// Gradients of the result are zero.
pub fn average_params(sets: &[&ParamStore]) -> Result<ParamStore> {
    let first = sets.first().ok_or(Error::Empty("parameter sets"))?;
    if sets.iter().any(|s| !s.same_layout(first)) {
        return Err(Error::Contract("parameter sets differ in layout".into()));
    }
    let mut out = (*first).clone();
    out.zero_grad();
    // Running mean: averaging copies of one set reproduces it bit for bit.
    for (k, set) in sets.iter().enumerate().skip(1) {
        let count = (k + 1) as f64;
        for (i, p) in out.iter_mut().enumerate() {
            let other = set.get(crate::ParamId(i)).value.data();
            for (w, &x) in p.value.data_mut().iter_mut().zip(other) {
                *w += (x - *w) / count;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_crossover_and_shape() {
        let (w, d, base) = (100, 64, 2.0);
        let at = lr_schedule(w, w, d, base);
        let rise = base / 8.0 * (w as f64) * (w as f64).powf(-1.5);
        let decay = base / 8.0 / (w as f64).sqrt();
        assert!((at - rise).abs() < 1e-15 && (at - decay).abs() < 1e-15);
        for s in 1..w {
            assert!(lr_schedule(s, w, d, base) < lr_schedule(s + 1, w, d, base));
        }
        for s in w..3 * w {
            assert!(lr_schedule(s, w, d, base) > lr_schedule(s + 1, w, d, base));
        }
        let ratio = lr_schedule(2 * w, w, d, base) / at;
        assert!((ratio - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(1.5);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(crate::ParamId(0)).value.item(), 1.5);
    }

    #[test]
    fn single_step_by_hand() {
        let mut s = scalar_store(1.0);
        s.get_mut(crate::ParamId(0)).grad = Tensor::scalar(0.2);
        let cfg = AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = Adam::new(&s, cfg);
        adam.step(&mut s, 0.01).unwrap();
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps)
        let expected = 1.0 - 0.01 * 0.2 / (0.2 + 1e-8);
        assert!((s.get(crate::ParamId(0)).value.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        s.get_mut(crate::ParamId(0)).grad = Tensor::scalar(f64::NAN);
        let mut adam = Adam::new(&s, AdamConfig::default());
        assert_eq!(
            adam.step(&mut s, 0.1),
            Err(Error::NonFiniteGradient("w".into()))
        );
        assert_eq!(s.get(crate::ParamId(0)).value.item(), 1.0);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut s = ParamStore::new();
            s.add("w", Tensor::new(&[5], crate::Init::ScaledNormal { seed: 1 }).unwrap())
                .unwrap();
            let mut adam = Adam::new(&s, AdamConfig::default());
            for step in 1..=10 {
                let g = s.get(crate::ParamId(0)).value.clone();
                s.get_mut(crate::ParamId(0)).grad = g;
                adam.step(&mut s, lr_schedule(step, 4, 8, 1.0)).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn averaging() {
        let p = scalar_store(1.0);
        let q = scalar_store(4.0);
        let avg = average_params(&[&p, &p, &p]).unwrap();
        assert_eq!(avg, p);
        let avg = average_params(&[&p, &q]).unwrap();
        assert_eq!(avg.get(crate::ParamId(0)).value.item(), 2.5);
        assert!(average_params(&[]).is_err());
    }

    #[test]
    fn top_n_selection() {
        let m = [0.3, 0.1, 0.5, 0.2];
        assert_eq!(top_n_indices(&m, 2).unwrap(), [1, 3]);
        assert!(top_n_indices(&m, 5).is_err());
        assert!(top_n_indices(&[], 1).is_err());
    }
}
