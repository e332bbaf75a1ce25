use super::Parameters;

/// Adam over the flattened parameter walk.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &[f64]) {
        let mut flat = params.flatten();
        assert_eq!(flat.len(), grads.len(), "gradient length mismatch");
        if self.m.is_empty() {
            self.m = vec![0.0; flat.len()];
            self.v = vec![0.0; flat.len()];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in flat.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.load_flat(&flat);
    }
}

/// Rescales the concatenation of `grads` to global L2 norm at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::{array, Array2};

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut lin = Linear::zeros(1, 1);
        let mut adam = Adam::new(0.1);
        adam.step(&mut lin, &[2.0, -3.0]);
        assert!((lin.weight[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((lin.bias[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut lin = Linear::zeros(1, 1);
        lin.weight = Array2::from_elem((1, 1), 5.0);
        lin.bias = array![-4.0];
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let flat = lin.flatten();
            let g: Vec<f64> = flat.iter().map(|p| 2.0 * (p - 1.0)).collect();
            adam.step(&mut lin, &g);
        }
        assert!(lin.flatten().iter().all(|p| (p - 1.0).abs() < 1e-3));
    }

    #[test]
    fn clipping() {
        let mut a = vec![3.0];
        let mut b = vec![4.0];
        let n = clip_global_norm(&mut [&mut a, &mut b], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-12 && (b[0] - 0.8).abs() < 1e-12);
        let mut c = vec![0.1];
        clip_global_norm(&mut [&mut c], 1.0);
        assert_eq!(c, vec![0.1]);
    }
}
