use std::collections::BTreeMap;

use freqdet_core::{ParamStore, Tensor};

/// Adam with decoupled weight decay. Decay applies to convolution weights
/// only; biases and the learned blend scalars are left alone.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1, beta2, eps, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient entry see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<f64>, grads: &BTreeMap<String, Tensor<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (name, param) in store.iter_mut() {
            let n = param.len();
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let grad = grads.get(name).map(|g| g.data());
            let decay = if decays(name) { self.lr * self.weight_decay } else { 0.0 };
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *p -= decay * *p + self.lr * update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::full((1, 1, 1, 2), v)).unwrap();
        s.insert("a.bias", Tensor::full((1, 1, 1, 1), v)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("a.weight".to_string(), Tensor::from_values((1, 1, 1, 2), vec![0.3, -2.0]).unwrap());
        grads.insert("a.bias".to_string(), Tensor::full((1, 1, 1, 1), 5.0));
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0, 0.0);
        opt.step(&mut s, &grads);
        assert!((s.get("a.weight").unwrap().data()[0] - 0.9).abs() < 1e-12);
        assert!((s.get("a.weight").unwrap().data()[1] - 1.1).abs() < 1e-12);
        assert!((s.get("a.bias").unwrap().data()[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled_and_skips_biases() {
        let mut s = store(2.0);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut s, &BTreeMap::new());
        assert!((s.get("a.weight").unwrap().data()[0] - 1.9).abs() < 1e-12);
        assert_eq!(s.get("a.bias").unwrap().data()[0], 2.0);
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut s = store(0.5);
        let mut opt = AdamW::new(0.01, 0.9, 0.99, 1e-8, 0.1);
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let g = (t as f64).sin();
            let mut grads = BTreeMap::new();
            grads.insert("a.weight".to_string(), Tensor::full((1, 1, 1, 2), g));
            opt.step(&mut s, &grads);
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            p = p - 0.01 * 0.1 * p - 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.get("a.weight").unwrap().data()[1] - p).abs() < 1e-14);
    }
}
