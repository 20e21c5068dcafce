//! Centered, orthonormal 3D discrete Fourier transform on row-major volumes.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;

/// Plans for one volume shape. `forward` computes `fftshift(fft(ifftshift(x)))`
/// along every axis scaled by `1/sqrt(N)`, so it is unitary and `inverse` is its
/// adjoint.
pub struct Fft3<T: Scalar> {
    shape: [usize; 3],
    forward: [Arc<dyn Fft<T>>; 3],
    inverse: [Arc<dyn Fft<T>>; 3],
    scale: T,
}

impl<T: Scalar> Fft3<T> {
    pub fn new(shape: [usize; 3]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = shape.map(|n| planner.plan_fft_forward(n));
        let inverse = shape.map(|n| planner.plan_fft_inverse(n));
        let n: usize = shape.iter().product();
        Self {
            shape,
            forward,
            inverse,
            scale: T::one() / T::lit(n as f64).sqrt(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut [Complex<T>]) {
        self.transform(data, &self.forward);
    }

    pub fn inverse(&self, data: &mut [Complex<T>]) {
        self.transform(data, &self.inverse);
    }

    fn transform(&self, data: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3]) {
        assert_eq!(data.len(), self.len(), "volume length does not match FFT plan");
        let [h, w, d] = self.shape;
        let strides = [w * d, d, 1];
        let total = self.len();
        let mut lines = vec![Complex::new(T::zero(), T::zero()); total];
        for axis in 0..3 {
            let n = self.shape[axis];
            if n == 1 {
                continue;
            }
            let stride = strides[axis];
            let half = n / 2;
            // every line along `axis` is identified by its starting offset
            let starts = line_starts(self.shape, axis);
            for (li, &start) in starts.iter().enumerate() {
                let dst = &mut lines[li * n..(li + 1) * n];
                for (i, v) in dst.iter_mut().enumerate() {
                    // ifftshift: y[i] = x[(i + n/2) mod n]
                    *v = data[start + ((i + half) % n) * stride];
                }
            }
            let plan = &plans[axis];
            let mut scratch =
                vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()];
            plan.process_with_scratch(&mut lines[..starts.len() * n], &mut scratch);
            for (li, &start) in starts.iter().enumerate() {
                let src = &lines[li * n..(li + 1) * n];
                for (i, v) in src.iter().enumerate() {
                    // fftshift: y[(i + n/2) mod n] = x[i]
                    data[start + ((i + half) % n) * stride] = *v;
                }
            }
        }
        debug_assert_eq!(h * w * d, total);
        let s = self.scale;
        for v in data.iter_mut() {
            *v = v.scale(s);
        }
    }
}

fn line_starts(shape: [usize; 3], axis: usize) -> Vec<usize> {
    let [h, w, d] = shape;
    let mut starts = Vec::with_capacity(h * w * d / shape[axis]);
    match axis {
        0 => {
            for j in 0..w {
                for k in 0..d {
                    starts.push(j * d + k);
                }
            }
        }
        1 => {
            for i in 0..h {
                for k in 0..d {
                    starts.push(i * w * d + k);
                }
            }
        }
        _ => {
            for i in 0..h {
                for j in 0..w {
                    starts.push((i * w + j) * d);
                }
            }
        }
    }
    starts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(n: usize, seed: u64) -> Vec<Complex<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect()
    }

    /// Direct O(N^2) centered DFT along all axes.
    fn naive_centered_dft(x: &[Complex<f64>], shape: [usize; 3]) -> Vec<Complex<f64>> {
        let [h, w, d] = shape;
        let n = (h * w * d) as f64;
        let centered = |i: usize, len: usize| i as f64 - (len / 2) as f64;
        let mut out = vec![Complex::new(0.0, 0.0); x.len()];
        for ka in 0..h {
            for kb in 0..w {
                for kc in 0..d {
                    let mut acc = Complex::new(0.0, 0.0);
                    for a in 0..h {
                        for b in 0..w {
                            for c in 0..d {
                                let phase = -2.0
                                    * std::f64::consts::PI
                                    * (centered(ka, h) * centered(a, h) / h as f64
                                        + centered(kb, w) * centered(b, w) / w as f64
                                        + centered(kc, d) * centered(c, d) / d as f64);
                                acc += x[(a * w + b) * d + c] * Complex::from_polar(1.0, phase);
                            }
                        }
                    }
                    out[(ka * w + kb) * d + kc] = acc / n.sqrt();
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_centered_dft_even_and_odd() {
        for shape in [[4, 6, 2], [5, 3, 4], [3, 1, 5]] {
            let n = shape.iter().product();
            let x = random_volume(n, 3);
            let mut y = x.clone();
            Fft3::new(shape).forward(&mut y);
            let expected = naive_centered_dft(&x, shape);
            for (a, b) in y.iter().zip(&expected) {
                assert!((a - b).norm() < 1e-12, "{shape:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn inverse_undoes_forward() {
        let shape = [8, 6, 5];
        let x = random_volume(240, 9);
        let fft = Fft3::new(shape);
        let mut y = x.clone();
        fft.forward(&mut y);
        fft.inverse(&mut y);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn dc_lands_at_center() {
        let shape = [4, 4, 2];
        let mut x = vec![Complex::new(1.0f64, 0.0); 32];
        Fft3::new(shape).forward(&mut x);
        let center = (2 * 4 + 2) * 2 + 1;
        assert!((x[center].re - 32f64.sqrt()).abs() < 1e-12);
        let rest: f64 = x.iter().enumerate().filter(|(i, _)| *i != center).map(|(_, v)| v.norm()).sum();
        assert!(rest < 1e-12);
    }
}
