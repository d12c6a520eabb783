use super::net::Params;
use std::collections::BTreeMap;
use ndarray::Array2;

/// Linear warmup to `peak`, then linear decay to zero at `total`.
pub fn lr_at(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        peak * (total - step.min(total)) as f64 / (total - warmup) as f64
    } else {
        peak
    }
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    t: i32,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64, clip: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, clip, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, Array2<f64>>, lr: f64) -> f64 {
        let norm = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(p.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(p.dim()));
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_shape() {
        assert!((lr_at(0, 1.0, 10, 100) - 0.1).abs() < 1e-15);
        assert_eq!(lr_at(9, 1.0, 10, 100), 1.0);
        assert_eq!(lr_at(10, 1.0, 10, 100), 1.0);
        assert!((lr_at(55, 1.0, 10, 100) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(100, 1.0, 10, 100), 0.0);
    }

    #[test]
    fn minimizes_a_quadratic_and_clips() {
        let mut p = Params::new();
        p.insert("x".into(), ndarray::arr2(&[[3.0, -2.0]]));
        let mut opt = AdamW::new(0.0, 1.0);
        for _ in 0..2000 {
            let g: BTreeMap<_, _> = [("x".to_string(), p["x"].mapv(|x| 2.0 * x))].into();
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p["x"].iter().all(|x| x.abs() < 1e-2));
        let g: BTreeMap<_, _> = [("x".to_string(), ndarray::arr2(&[[30.0, 40.0]]))].into();
        assert_eq!(opt.step(&mut p, &g, 0.0), 50.0);
    }
}
