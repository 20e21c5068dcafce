//! Residual refinement network applied to the spatial bases.
//!
//! Volumes are stored channel-last, `(H*W*D) x channels`. Every convolution uses
//! a 3x3x3 kernel with zero padding 1 and is evaluated as an im2col product in
//! chunks of output positions.

use ndarray::{linalg::general_mat_mul, Array4, ArrayView2, ArrayViewMut2};
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::subspace::SpatialBases;

const TAPS: usize = 27;
const CHUNK: usize = 4096;
const WIDTH: usize = 32;
const DEEP: usize = 64;
const SQUEEZE: usize = 16;

/// A 3x3x3 convolution geometry from `input` to `output` grid.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Geom {
    input: [usize; 3],
    output: [usize; 3],
    stride: usize,
}

impl Geom {
    fn new(input: [usize; 3], stride: usize) -> Self {
        Self {
            input,
            output: input.map(|n| (n - 1) / stride + 1),
            stride,
        }
    }

    fn n_in(&self) -> usize {
        self.input.iter().product()
    }

    fn n_out(&self) -> usize {
        self.output.iter().product()
    }

    /// Input position of tap `o` for output position `p`, if inside the volume.
    #[inline]
    fn tap(&self, p: usize, o: usize) -> Option<usize> {
        let [_, wo, dout] = self.output;
        let (pi, pj, pk) = (p / (wo * dout), (p / dout) % wo, p % dout);
        let (oi, oj, ok) = (o / 9, (o / 3) % 3, o % 3);
        let s = self.stride;
        let i = (pi * s + oi).checked_sub(1)?;
        let j = (pj * s + oj).checked_sub(1)?;
        let k = (pk * s + ok).checked_sub(1)?;
        let [h, w, d] = self.input;
        (i < h && j < w && k < d).then(|| (i * w + j) * d + k)
    }

    /// Patch matrix rows for output positions `range`.
    fn im2col<T: Scalar>(&self, x: &[T], ch: usize, range: std::ops::Range<usize>, cols: &mut Vec<T>) {
        cols.clear();
        cols.resize(range.len() * TAPS * ch, T::zero());
        for (r, p) in range.enumerate() {
            let row = &mut cols[r * TAPS * ch..(r + 1) * TAPS * ch];
            for o in 0..TAPS {
                if let Some(q) = self.tap(p, o) {
                    row[o * ch..(o + 1) * ch].copy_from_slice(&x[q * ch..(q + 1) * ch]);
                }
            }
        }
    }

    /// Scatter-adds patch rows back onto the input grid.
    fn col2im<T: Scalar>(&self, cols: &[T], ch: usize, range: std::ops::Range<usize>, x: &mut [T]) {
        for (r, p) in range.enumerate() {
            let row = &cols[r * TAPS * ch..(r + 1) * TAPS * ch];
            for o in 0..TAPS {
                if let Some(q) = self.tap(p, o) {
                    for (dst, &v) in x[q * ch..(q + 1) * ch].iter_mut().zip(&row[o * ch..(o + 1) * ch]) {
                        *dst += v;
                    }
                }
            }
        }
    }
}

fn chunks(n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(CHUNK).map(move |s| s..(s + CHUNK).min(n))
}

fn view<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix layout")
}

fn view_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix layout")
}

/// Weight `(27*cin, cout)` followed by bias `cout`, at `offset` in the flat
/// parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    offset: usize,
}

impl ConvLayer {
    fn n_params(&self) -> usize {
        TAPS * self.cin * self.cout + self.cout
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_params()
    }

    fn split<'a, T>(&self, params: &'a [T]) -> (&'a [T], &'a [T]) {
        params[self.range()].split_at(TAPS * self.cin * self.cout)
    }

    fn split_mut<'a, T>(&self, params: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        params[self.range()].split_at_mut(TAPS * self.cin * self.cout)
    }

    /// `y = conv(x) + b`, without activation.
    fn forward<T: Scalar>(&self, params: &[T], g: &Geom, x: &[T]) -> Vec<T> {
        let (w, b) = self.split(params);
        let w = view(w, TAPS * self.cin, self.cout);
        let mut y = vec![T::zero(); g.n_out() * self.cout];
        let mut cols = Vec::new();
        for range in chunks(g.n_out()) {
            g.im2col(x, self.cin, range.clone(), &mut cols);
            let rows = range.len();
            let out = &mut y[range.start * self.cout..range.end * self.cout];
            for row in out.chunks_exact_mut(self.cout) {
                row.copy_from_slice(b);
            }
            general_mat_mul(T::one(), &view(&cols, rows, TAPS * self.cin), &w, T::one(), &mut view_mut(out, rows, self.cout));
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx` when asked.
    fn backward<T: Scalar>(&self, params: &[T], g: &Geom, x: &[T], dy: &[T], grad: &mut [T], want_dx: bool) -> Option<Vec<T>> {
        let (w, _) = self.split(params);
        let w = view(w, TAPS * self.cin, self.cout);
        let (gw, gb) = self.split_mut(grad);
        let mut gw = view_mut(gw, TAPS * self.cin, self.cout);
        for row in dy.chunks_exact(self.cout) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut dx = want_dx.then(|| vec![T::zero(); g.n_in() * self.cin]);
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for range in chunks(g.n_out()) {
            let rows = range.len();
            g.im2col(x, self.cin, range.clone(), &mut cols);
            let dyc = view(&dy[range.start * self.cout..range.end * self.cout], rows, self.cout);
            general_mat_mul(T::one(), &view(&cols, rows, TAPS * self.cin).t(), &dyc, T::one(), &mut gw);
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(rows * TAPS * self.cin, T::zero());
                general_mat_mul(T::one(), &dyc, &w.t(), T::zero(), &mut view_mut(&mut dcols, rows, TAPS * self.cin));
                g.col2im(&dcols, self.cin, range, dx);
            }
        }
        dx
    }

    /// Transposed convolution: the adjoint of this layer's strided convolution
    /// (mapping `cin` channels on the fine grid to `cout` on the coarse grid),
    /// followed by a fine-grid bias of `cin` entries stored after the weights.
    fn transposed_forward<T: Scalar>(&self, params: &[T], g: &Geom, x_coarse: &[T]) -> Vec<T> {
        let (w, b) = self.split_transposed(params);
        let w = view(w, TAPS * self.cin, self.cout);
        let mut y = vec![T::zero(); g.n_in() * self.cin];
        for row in y.chunks_exact_mut(self.cin) {
            row.copy_from_slice(b);
        }
        let mut cols = Vec::new();
        for range in chunks(g.n_out()) {
            let rows = range.len();
            cols.clear();
            cols.resize(rows * TAPS * self.cin, T::zero());
            let xc = view(&x_coarse[range.start * self.cout..range.end * self.cout], rows, self.cout);
            general_mat_mul(T::one(), &xc, &w.t(), T::zero(), &mut view_mut(&mut cols, rows, TAPS * self.cin));
            g.col2im(&cols, self.cin, range, &mut y);
        }
        y
    }

    fn transposed_backward<T: Scalar>(&self, params: &[T], g: &Geom, x_coarse: &[T], dy: &[T], grad: &mut [T]) -> Vec<T> {
        let (w, _) = self.split_transposed(params);
        let w = view(w, TAPS * self.cin, self.cout);
        let range_all = self.range_transposed();
        let (gw, gb) = grad[range_all].split_at_mut(TAPS * self.cin * self.cout);
        let mut gw = view_mut(gw, TAPS * self.cin, self.cout);
        for row in dy.chunks_exact(self.cin) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut dx = vec![T::zero(); g.n_out() * self.cout];
        let mut cols = Vec::new();
        for range in chunks(g.n_out()) {
            let rows = range.len();
            g.im2col(dy, self.cin, range.clone(), &mut cols);
            let cols = view(&cols, rows, TAPS * self.cin);
            let xc = view(&x_coarse[range.start * self.cout..range.end * self.cout], rows, self.cout);
            general_mat_mul(T::one(), &cols.t(), &xc, T::one(), &mut gw);
            general_mat_mul(T::one(), &cols, &w, T::zero(), &mut view_mut(&mut dx[range.start * self.cout..range.end * self.cout], rows, self.cout));
        }
        dx
    }

    fn n_params_transposed(&self) -> usize {
        TAPS * self.cin * self.cout + self.cin
    }

    fn range_transposed(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_params_transposed()
    }

    fn split_transposed<'a, T>(&self, params: &'a [T]) -> (&'a [T], &'a [T]) {
        params[self.range_transposed()].split_at(TAPS * self.cin * self.cout)
    }
}

fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

fn relu_mask<T: Scalar>(d: &mut [T], act: &[T]) {
    for (g, &a) in d.iter_mut().zip(act) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + num_traits::Float::exp(-x))
}

/// Encoder-decoder refiner with channel attention and a residual connection:
///
/// `2K -conv-> 32 -conv/2-> 64 -attention-> 64 -tconv*2-> 32 -conv-> 2K (+ input)`.
///
/// The attention gate squeezes the coarse features over space into a 16-unit
/// bottleneck and rescales each channel, so the same gate applies to every
/// basis. The last convolution starts at zero, making the refiner the
/// identity at initialization.
#[derive(Clone, Debug)]
pub struct Refiner<T> {
    rank: usize,
    conv_in: ConvLayer,
    conv_down: ConvLayer,
    att: [usize; 4],
    conv_up: ConvLayer,
    conv_out: ConvLayer,
    params: Vec<T>,
}

/// Intermediate activations of one refiner pass.
#[derive(Clone, Debug)]
pub struct RefinerTape<T> {
    shape: [usize; 3],
    x: Vec<T>,
    a1: Vec<T>,
    a2: Vec<T>,
    pooled: Vec<T>,
    hidden: Vec<T>,
    gate: Vec<T>,
    a3: Vec<T>,
    a4: Vec<T>,
}

impl<T: Scalar> Refiner<T> {
    /// PyTorch-style uniform initialization, except the output convolution
    /// which is zero.
    pub fn new(rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidParameter("refiner rank must be >= 1".into()));
        }
        let c = 2 * rank;
        let conv_in = ConvLayer { cin: c, cout: WIDTH, offset: 0 };
        let conv_down = ConvLayer {
            cin: WIDTH,
            cout: DEEP,
            offset: conv_in.range().end,
        };
        let a0 = conv_down.range().end;
        // squeeze weight (64x16), bias, excite weight (16x64), bias
        let att = [a0, a0 + DEEP * SQUEEZE, a0 + DEEP * SQUEEZE + SQUEEZE, a0 + 2 * DEEP * SQUEEZE + SQUEEZE];
        let conv_up = ConvLayer {
            cin: WIDTH,
            cout: DEEP,
            offset: att[3] + DEEP,
        };
        let conv_out = ConvLayer {
            cin: WIDTH,
            cout: c,
            offset: conv_up.range_transposed().end,
        };
        let n = conv_out.range().end;
        let mut params = vec![T::zero(); n];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
        };
        fill(conv_in.range(), TAPS * c);
        fill(conv_down.range(), TAPS * WIDTH);
        fill(att[0]..att[2], DEEP);
        fill(att[2]..att[3] + DEEP, SQUEEZE);
        // a transposed convolution's fan-in is its coarse channel count times the taps
        fill(conv_up.range_transposed(), TAPS * DEEP);
        Ok(Self {
            rank,
            conv_in,
            conv_down,
            att,
            conv_up,
            conv_out,
            params,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Parameters of the final convolution.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        self.conv_out.range()
    }

    fn check(&self, u: &Array4<Complex<T>>) -> Result<[usize; 3]> {
        let s = u.shape();
        if s[0] != self.rank {
            return Err(Error::ShapeMismatch {
                axis: "rank",
                expected: self.rank,
                got: s[0],
            });
        }
        Ok([s[1], s[2], s[3]])
    }

    pub fn forward(&self, u: &Array4<Complex<T>>) -> Result<Array4<Complex<T>>> {
        Ok(self.forward_taped(u)?.0)
    }

    pub fn forward_taped(&self, u: &Array4<Complex<T>>) -> Result<(Array4<Complex<T>>, RefinerTape<T>)> {
        let shape = self.check(u)?;
        let x = to_channels(u);
        let p = &self.params;
        let fine = Geom::new(shape, 1);
        let down = Geom::new(shape, 2);
        let mut a1 = self.conv_in.forward(p, &fine, &x);
        relu_inplace(&mut a1);
        let mut a2 = self.conv_down.forward(p, &down, &a1);
        relu_inplace(&mut a2);
        let n_coarse = down.n_out();
        let mut pooled = vec![T::zero(); DEEP];
        for row in a2.chunks_exact(DEEP) {
            for (s, &v) in pooled.iter_mut().zip(row) {
                *s += v;
            }
        }
        let inv = T::one() / T::lit(n_coarse as f64);
        pooled.iter_mut().for_each(|s| *s *= inv);
        let [w1, b1, w2, b2] = self.att;
        let mut hidden: Vec<T> = (0..SQUEEZE)
            .map(|j| p[b1 + j] + (0..DEEP).map(|c| pooled[c] * p[w1 + c * SQUEEZE + j]).sum::<T>())
            .collect();
        relu_inplace(&mut hidden);
        let gate: Vec<T> = (0..DEEP)
            .map(|c| sigmoid(p[b2 + c] + (0..SQUEEZE).map(|j| hidden[j] * p[w2 + j * DEEP + c]).sum::<T>()))
            .collect();
        let mut a3 = a2.clone();
        for row in a3.chunks_exact_mut(DEEP) {
            for (v, &g) in row.iter_mut().zip(&gate) {
                *v *= g;
            }
        }
        let mut a4 = self.conv_up.transposed_forward(p, &down, &a3);
        relu_inplace(&mut a4);
        let mut y = self.conv_out.forward(p, &fine, &a4);
        for (o, &v) in y.iter_mut().zip(&x) {
            *o += v;
        }
        let out = from_channels(&y, self.rank, shape);
        Ok((
            out,
            RefinerTape {
                shape,
                x,
                a1,
                a2,
                pooled,
                hidden,
                gate,
                a3,
                a4,
            },
        ))
    }

    /// Accumulates parameter gradients for `dout` (same convention as the
    /// complex gradients elsewhere: `dL/dRe + i dL/dIm`) and returns the
    /// gradient with respect to the input bases.
    pub fn backward(&self, tape: &RefinerTape<T>, dout: &Array4<Complex<T>>, grad: &mut [T]) -> Result<Array4<Complex<T>>> {
        let shape = self.check(dout)?;
        if shape != tape.shape {
            return Err(Error::Dimension(format!("refiner tape is for {:?}, gradient for {shape:?}", tape.shape)));
        }
        let p = &self.params;
        let fine = Geom::new(shape, 1);
        let down = Geom::new(shape, 2);
        let dy = to_channels(dout);
        let mut d4 = self.conv_out.backward(p, &fine, &tape.a4, &dy, grad, true).unwrap();
        relu_mask(&mut d4, &tape.a4);
        let d3 = self.conv_up.transposed_backward(p, &down, &tape.a3, &d4, grad);

        let [w1, b1, w2, b2] = self.att;
        let n_coarse = down.n_out();
        let mut dgate = vec![T::zero(); DEEP];
        let mut d2 = d3.clone();
        for ((row, a), dst) in d3.chunks_exact(DEEP).zip(tape.a2.chunks_exact(DEEP)).zip(d2.chunks_exact_mut(DEEP)) {
            for c in 0..DEEP {
                dgate[c] += row[c] * a[c];
                dst[c] = row[c] * tape.gate[c];
            }
        }
        let dpre2: Vec<T> = dgate.iter().zip(&tape.gate).map(|(&d, &g)| d * g * (T::one() - g)).collect();
        let mut dhidden = vec![T::zero(); SQUEEZE];
        for j in 0..SQUEEZE {
            for c in 0..DEEP {
                grad[w2 + j * DEEP + c] += tape.hidden[j] * dpre2[c];
                dhidden[j] += p[w2 + j * DEEP + c] * dpre2[c];
            }
        }
        for c in 0..DEEP {
            grad[b2 + c] += dpre2[c];
        }
        relu_mask(&mut dhidden, &tape.hidden);
        let mut dpooled = vec![T::zero(); DEEP];
        for c in 0..DEEP {
            for j in 0..SQUEEZE {
                grad[w1 + c * SQUEEZE + j] += tape.pooled[c] * dhidden[j];
                dpooled[c] += p[w1 + c * SQUEEZE + j] * dhidden[j];
            }
        }
        for j in 0..SQUEEZE {
            grad[b1 + j] += dhidden[j];
        }
        let inv = T::one() / T::lit(n_coarse as f64);
        for row in d2.chunks_exact_mut(DEEP) {
            for (v, &dp) in row.iter_mut().zip(&dpooled) {
                *v += dp * inv;
            }
        }
        relu_mask(&mut d2, &tape.a2);
        let mut d1 = self.conv_down.backward(p, &down, &tape.a1, &d2, grad, true).unwrap();
        relu_mask(&mut d1, &tape.a1);
        let mut dx = self.conv_in.backward(p, &fine, &tape.x, &d1, grad, true).unwrap();
        for (a, &b) in dx.iter_mut().zip(&dy) {
            *a += b;
        }
        Ok(from_channels(&dx, self.rank, shape))
    }
}

/// Channel-last real layout: real parts in channels `0..K`, imaginary parts in
/// `K..2K`.
fn to_channels<T: Scalar>(u: &Array4<Complex<T>>) -> Vec<T> {
    let s = u.shape();
    let (k, n) = (s[0], s[1] * s[2] * s[3]);
    let src = u.as_standard_layout();
    let src = src.as_slice().unwrap();
    let mut x = vec![T::zero(); n * 2 * k];
    for b in 0..k {
        for v in 0..n {
            let z = src[b * n + v];
            x[v * 2 * k + b] = z.re;
            x[v * 2 * k + k + b] = z.im;
        }
    }
    x
}

fn from_channels<T: Scalar>(x: &[T], k: usize, shape: [usize; 3]) -> Array4<Complex<T>> {
    let n = shape.iter().product::<usize>();
    let mut out = vec![Complex::new(T::zero(), T::zero()); k * n];
    for b in 0..k {
        for v in 0..n {
            out[b * n + v] = Complex::new(x[v * 2 * k + b], x[v * 2 * k + k + b]);
        }
    }
    Array4::from_shape_vec((k, shape[0], shape[1], shape[2]), out).expect("layout")
}

/// Refined spatial bases.
pub fn cnn_refine<T: Scalar>(u_coarse: &SpatialBases<T>, refiner: &Refiner<T>) -> Result<SpatialBases<T>> {
    Ok(SpatialBases {
        u: refiner.forward(&u_coarse.u)?,
    })
}
