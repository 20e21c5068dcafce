//! Fully connected ReLU network over a flat parameter slice.

use ndarray::{linalg::general_mat_mul, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

/// Layer widths of an MLP. Each layer stores its `(in, out)` weight matrix
/// row-major followed by its bias; hidden layers use ReLU, the last is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    offsets: Vec<usize>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden_width: usize, hidden_layers: usize, out_dim: usize) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(hidden_width, hidden_layers));
        dims.push(out_dim);
        let mut offsets = vec![0];
        for w in dims.windows(2) {
            let last = *offsets.last().unwrap();
            offsets.push(last + w[0] * w[1] + w[1]);
        }
        Self { dims, offsets }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Range of the parameters belonging to layer `l`.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    fn layer<'a, T: Scalar>(&self, params: &'a [T], l: usize) -> (ArrayView2<'a, T>, ArrayView1<'a, T>) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let p = &params[self.layer_range(l)];
        let (w, b) = p.split_at(i * o);
        (ArrayView2::from_shape((i, o), w).unwrap(), ArrayView1::from(b))
    }

    fn layer_mut<'a, T: Scalar>(&self, params: &'a mut [T], l: usize) -> (ArrayViewMut2<'a, T>, ArrayViewMut1<'a, T>) {
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        let range = self.layer_range(l);
        let (w, b) = params[range].split_at_mut(i * o);
        (ArrayViewMut2::from_shape((i, o), w).unwrap(), ArrayViewMut1::from(b))
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases.
    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng, out: &mut [T]) {
        for l in 0..self.n_layers() {
            let bound = 1.0 / (self.dims[l] as f64).sqrt();
            for p in out[self.layer_range(l)].iter_mut() {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        }
    }

    /// Output for a batch of inputs (rows).
    pub fn forward<T: Scalar>(&self, params: &[T], x: ArrayView2<T>) -> Array2<T> {
        let mut acts = self.forward_trace(params, x.to_owned());
        acts.pop().unwrap()
    }

    /// All layer outputs, starting with the input itself.
    pub fn forward_trace<T: Scalar>(&self, params: &[T], x: Array2<T>) -> Vec<Array2<T>> {
        let n = x.nrows();
        let mut acts = vec![x];
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(params, l);
            let mut z = Array2::from_shape_fn((n, self.dims[l + 1]), |(_, j)| b[j]);
            general_mat_mul(T::one(), &acts[l], &w, T::one(), &mut z);
            if l + 1 < self.n_layers() {
                z.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
            }
            acts.push(z);
        }
        acts
    }

    /// Runs forward, then accumulates parameter gradients for `dout` into
    /// `grad` and returns the gradient with respect to the input.
    pub fn backward<T: Scalar>(&self, params: &[T], x: Array2<T>, dout: Array2<T>, grad: &mut [T]) -> Array2<T> {
        let acts = self.forward_trace(params, x);
        self.backward_trace(params, &acts, dout, grad)
    }

    /// Backward pass over activations recorded by [`Mlp::forward_trace`].
    pub fn backward_trace<T: Scalar>(&self, params: &[T], acts: &[Array2<T>], dout: Array2<T>, grad: &mut [T]) -> Array2<T> {
        let mut delta = dout;
        for l in (0..self.n_layers()).rev() {
            if l + 1 < self.n_layers() {
                delta.zip_mut_with(&acts[l + 1], |d, &a| {
                    if a <= T::zero() {
                        *d = T::zero()
                    }
                });
            }
            let (w, _) = self.layer(params, l);
            {
                let (mut gw, mut gb) = self.layer_mut(grad, l);
                general_mat_mul(T::one(), &acts[l].t(), &delta, T::one(), &mut gw);
                gb += &delta.sum_axis(Axis(0));
            }
            let mut prev = Array2::zeros((delta.nrows(), self.dims[l]));
            general_mat_mul(T::one(), &delta, &w.t(), T::zero(), &mut prev);
            delta = prev;
        }
        delta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gradient_matches_finite_differences() {
        let mlp = Mlp::new(4, 6, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = vec![0.0f64; mlp.n_params()];
        mlp.init_params(&mut rng, &mut params);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let dout = Array2::from_shape_fn((5, 2), |(i, j)| 1.0 + i as f64 - j as f64);
        let loss = |p: &[f64], x: &Array2<f64>| (mlp.forward(p, x.view()) * &dout).sum();
        let mut grad = vec![0.0; mlp.n_params()];
        let dx = mlp.backward(&params, x.clone(), dout.clone(), &mut grad);
        for i in (0..params.len()).step_by(7) {
            let mut hi = params.clone();
            hi[i] += 1e-6;
            let mut lo = params.clone();
            lo[i] -= 1e-6;
            let fd = (loss(&hi, &x) - loss(&lo, &x)) / 2e-6;
            assert!((fd - grad[i]).abs() <= 1e-4 * grad[i].abs().max(1e-6), "{i}: {fd} vs {}", grad[i]);
        }
        let mut hi = x.clone();
        hi[[2, 1]] += 1e-6;
        let mut lo = x.clone();
        lo[[2, 1]] -= 1e-6;
        let fd = (loss(&params, &hi) - loss(&params, &lo)) / 2e-6;
        assert!((fd - dx[[2, 1]]).abs() < 1e-6);
    }

    #[test]
    fn layout() {
        let mlp = Mlp::new(32, 64, 3, 1);
        assert_eq!(mlp.n_params(), 32 * 64 + 64 + 2 * (64 * 64 + 64) + 64 + 1);
        assert_eq!(mlp.layer_range(3).len(), 65);
    }
}
