use ndarray::{s, Array1, Array2};
use rand::Rng;

use super::{
    join, sigmoid, visit_array1, visit_array1_mut, visit_array2, visit_array2_mut,
    xavier_uniform, Parameters,
};

/// Single-layer LSTM whose output is the final hidden state.
///
/// Gate blocks are laid out as `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `(input, 4 * hidden)`
    pub w_input: Array2<f64>,
    /// `(hidden, 4 * hidden)`
    pub w_hidden: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LstmStep {
    x: Array1<f64>,
    h_prev: Array1<f64>,
    c_prev: Array1<f64>,
    i: Array1<f64>,
    f: Array1<f64>,
    g: Array1<f64>,
    o: Array1<f64>,
    c: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self {
            w_input: xavier_uniform(input, 4 * hidden, rng),
            w_hidden: xavier_uniform(hidden, 4 * hidden, rng),
            bias,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.nrows()
    }

    /// Runs over the rows of `xs` and returns the last hidden state.
    pub fn forward(&self, xs: &Array2<f64>) -> (Array1<f64>, LstmCache) {
        let hd = self.hidden_dim();
        let mut h = Array1::zeros(hd);
        let mut c = Array1::zeros(hd);
        let mut steps = Vec::with_capacity(xs.nrows());
        for x in xs.rows() {
            let z = x.dot(&self.w_input) + h.dot(&self.w_hidden) + &self.bias;
            let i = z.slice(s![..hd]).mapv(sigmoid);
            let f = z.slice(s![hd..2 * hd]).mapv(sigmoid);
            let g = z.slice(s![2 * hd..3 * hd]).mapv(f64::tanh);
            let o = z.slice(s![3 * hd..]).mapv(sigmoid);
            let c_new = &f * &c + &i * &g;
            let h_new = &o * &c_new.mapv(f64::tanh);
            steps.push(LstmStep {
                x: x.to_owned(),
                h_prev: h,
                c_prev: c,
                i,
                f,
                g,
                o,
                c: c_new.clone(),
            });
            h = h_new;
            c = c_new;
        }
        (h, LstmCache { steps })
    }

    /// Backpropagation through time from a gradient on the final hidden state.
    pub fn backward(&self, cache: &LstmCache, d_h_last: &Array1<f64>, grad: &mut Lstm) {
        let hd = self.hidden_dim();
        let mut dh = d_h_last.clone();
        let mut dc = Array1::<f64>::zeros(hd);
        for step in cache.steps.iter().rev() {
            let tc = step.c.mapv(f64::tanh);
            let d_o = &dh * &tc;
            dc = dc + &dh * &step.o * &tc.mapv(|t| 1.0 - t * t);
            let d_i = &dc * &step.g;
            let d_g = &dc * &step.i;
            let d_f = &dc * &step.c_prev;
            let mut dz = Array1::zeros(4 * hd);
            dz.slice_mut(s![..hd]).assign(&(&d_i * &step.i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![hd..2 * hd]).assign(&(&d_f * &step.f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![2 * hd..3 * hd]).assign(&(&d_g * &step.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![3 * hd..]).assign(&(&d_o * &step.o.mapv(|v| v * (1.0 - v))));
            let dz_row = dz.view().insert_axis(ndarray::Axis(0));
            grad.w_input += &step.x.view().insert_axis(ndarray::Axis(1)).dot(&dz_row);
            grad.w_hidden += &step.h_prev.view().insert_axis(ndarray::Axis(1)).dot(&dz_row);
            grad.bias += &dz;
            dh = self.w_hidden.dot(&dz);
            dc = &dc * &step.f;
        }
    }
}

impl Parameters for Lstm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array2(&self.w_input, &join(prefix, "w_input"), f);
        visit_array2(&self.w_hidden, &join(prefix, "w_hidden"), f);
        visit_array1(&self.bias, &join(prefix, "bias"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        visit_array2_mut(&mut self.w_input, &join(prefix, "w_input"), f);
        visit_array2_mut(&mut self.w_hidden, &join(prefix, "w_hidden"), f);
        visit_array1_mut(&mut self.bias, &join(prefix, "bias"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{numeric_grad, relative_error};
    use crate::nn::zeros_like;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn lstm_bptt_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lstm = Lstm::new(3, 4, &mut rng);
        let xs = Array2::from_shape_simple_fn((5, 3), || StandardNormal.sample(&mut rng));
        let r = Array1::from_shape_simple_fn(4, || StandardNormal.sample(&mut rng));
        let (_, cache) = lstm.forward(&xs);
        let mut grad = zeros_like(&lstm);
        lstm.backward(&cache, &r, &mut grad);
        let num = numeric_grad(&lstm, 1e-5, |p| p.forward(&xs).0.dot(&r));
        assert!(relative_error(&grad.flatten(), &num) < 1e-6);
    }

    #[test]
    fn empty_sequence_gives_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lstm = Lstm::new(2, 3, &mut rng);
        let (h, _) = lstm.forward(&Array2::zeros((0, 2)));
        assert_eq!(h, Array1::<f64>::zeros(3));
    }
}
