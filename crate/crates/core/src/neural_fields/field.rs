//! Hash-encoded coordinate networks with output heads.

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_coords, Coord, HashEncoding, HashEncodingConfig, Mlp};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Coordinates evaluated together in one pass.
pub const BATCH_SIZE: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Head {
    /// Elementwise `exp` of the network output.
    PositiveExp,
    /// Network output unchanged.
    LinearReal,
    /// Two networks giving real and imaginary parts; output columns are all
    /// real parts followed by all imaginary parts.
    ComplexTwoHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    pub encoding: HashEncodingConfig,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub head: Head,
    pub out_dim: usize,
}

impl FieldConfig {
    /// Three hidden layers of 64.
    pub fn new(encoding: HashEncodingConfig, head: Head, out_dim: usize) -> Self {
        Self {
            encoding,
            hidden_layers: 3,
            hidden_width: 64,
            head,
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.hidden_layers == 0 || self.hidden_width == 0 || self.out_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "field needs at least one hidden layer, width and output (got {}, {}, {})",
                self.hidden_layers, self.hidden_width, self.out_dim
            )));
        }
        Ok(())
    }

    /// Columns produced by the field.
    pub fn n_outputs(&self) -> usize {
        match self.head {
            Head::ComplexTwoHead => 2 * self.out_dim,
            _ => self.out_dim,
        }
    }

    fn n_networks(&self) -> usize {
        match self.head {
            Head::ComplexTwoHead => 2,
            _ => 1,
        }
    }
}

/// A field `x -> head(MLP(encode(x)))` owning its flat parameter vector: the
/// hash tables first, then each network. The complex head shares one encoding
/// between its two networks.
#[derive(Clone, Debug)]
pub struct NeuralField<T> {
    config: FieldConfig,
    encoding: HashEncoding,
    net: Mlp,
    params: Vec<T>,
}

/// Activations recorded during a forward pass, for one batch.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    start: usize,
    acts: Vec<Vec<Array2<T>>>,
}

impl<T: Scalar> NeuralField<T> {
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self> {
        let mut field = Self::zeroed(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_enc = field.encoding.n_params();
        field.encoding.init_params(&mut rng, &mut field.params[..n_enc]);
        for k in 0..config.n_networks() {
            let r = field.network_range(k);
            field.net.init_params(&mut rng, &mut field.params[r]);
        }
        Ok(field)
    }

    /// A field with every parameter zero.
    pub fn zeroed(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let encoding = HashEncoding::new(config.encoding)?;
        let net = Mlp::new(encoding.output_dim(), config.hidden_width, config.hidden_layers, config.out_dim);
        let n = encoding.n_params() + config.n_networks() * net.n_params();
        Ok(Self {
            config,
            encoding,
            net,
            params: vec![T::zero(); n],
        })
    }

    pub fn from_params(config: FieldConfig, params: Vec<T>) -> Result<Self> {
        let mut field = Self::zeroed(config)?;
        if params.len() != field.params.len() {
            return Err(Error::ShapeMismatch {
                axis: "parameter",
                expected: field.params.len(),
                got: params.len(),
            });
        }
        field.params = params;
        Ok(field)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.config.n_outputs()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Parameters of network `k` (0 real, 1 imaginary for the complex head).
    pub fn network_range(&self, k: usize) -> std::ops::Range<usize> {
        let start = self.encoding.n_params() + k * self.net.n_params();
        start..start + self.net.n_params()
    }

    /// Parameters of the last layer of network `k`.
    pub fn output_layer_range(&self, k: usize) -> std::ops::Range<usize> {
        let base = self.network_range(k).start;
        let r = self.net.layer_range(self.net.n_layers() - 1);
        base + r.start..base + r.end
    }

    fn encode(&self, coords: &[Coord<T>]) -> Array2<T> {
        let dim = self.encoding.output_dim();
        let mut feats = vec![T::zero(); coords.len() * dim];
        self.encoding.forward(&self.params[..self.encoding.n_params()], coords, &mut feats);
        Array2::from_shape_vec((coords.len(), dim), feats).expect("layout")
    }

    fn tape_batch(&self, coords: &[Coord<T>], start: usize) -> Tape<T> {
        let feats = self.encode(coords);
        let acts = (0..self.config.n_networks())
            .map(|k| self.net.forward_trace(&self.params[self.network_range(k)], feats.clone()))
            .collect();
        Tape { start, acts }
    }

    fn write_outputs(&self, tape: &Tape<T>, out: &mut Array2<T>) {
        let d = self.config.out_dim;
        let n = tape.acts[0][0].nrows();
        for (k, acts) in tape.acts.iter().enumerate() {
            let raw = acts.last().unwrap();
            let mut dst = out.slice_mut(s![tape.start..tape.start + n, k * d..(k + 1) * d]);
            match self.config.head {
                Head::PositiveExp => dst.zip_mut_with(raw, |o, &r| *o = num_traits::Float::exp(r)),
                _ => dst.assign(raw),
            }
        }
    }

    /// Values at `coords`, `coords.len() x n_outputs`.
    pub fn forward(&self, coords: &[Coord<T>]) -> Result<Array2<T>> {
        check_coords(coords)?;
        let mut out = Array2::zeros((coords.len(), self.n_outputs()));
        for (b, chunk) in coords.chunks(BATCH_SIZE).enumerate() {
            let tape = self.tape_batch(chunk, b * BATCH_SIZE);
            self.write_outputs(&tape, &mut out);
        }
        Ok(out)
    }

    /// Forward pass keeping every activation for a later [`Self::backward_taped`].
    pub fn forward_taped(&self, coords: &[Coord<T>]) -> Result<(Array2<T>, Vec<Tape<T>>)> {
        check_coords(coords)?;
        let mut out = Array2::zeros((coords.len(), self.n_outputs()));
        let tapes = coords
            .chunks(BATCH_SIZE)
            .enumerate()
            .map(|(b, chunk)| {
                let tape = self.tape_batch(chunk, b * BATCH_SIZE);
                self.write_outputs(&tape, &mut out);
                tape
            })
            .collect();
        Ok((out, tapes))
    }

    fn check_dout(&self, coords: &[Coord<T>], dout: &ArrayView2<T>) -> Result<()> {
        if dout.nrows() != coords.len() {
            return Err(Error::ShapeMismatch {
                axis: "coordinate",
                expected: coords.len(),
                got: dout.nrows(),
            });
        }
        if dout.ncols() != self.n_outputs() {
            return Err(Error::ShapeMismatch {
                axis: "output",
                expected: self.n_outputs(),
                got: dout.ncols(),
            });
        }
        Ok(())
    }

    fn backward_batch(&self, coords: &[Coord<T>], tape: &Tape<T>, dout: ArrayView2<T>, grad: &mut [T]) {
        let d = self.config.out_dim;
        let n = coords.len();
        let mut dfeat: Option<Array2<T>> = None;
        for (k, acts) in tape.acts.iter().enumerate() {
            let mut delta = dout.slice(s![tape.start..tape.start + n, k * d..(k + 1) * d]).to_owned();
            if self.config.head == Head::PositiveExp {
                delta.zip_mut_with(acts.last().unwrap(), |g, &r| *g *= num_traits::Float::exp(r));
            }
            let r = self.network_range(k);
            let df = self.net.backward_trace(&self.params[r.clone()], acts, delta, &mut grad[r]);
            dfeat = Some(match dfeat {
                Some(acc) => acc + df,
                None => df,
            });
        }
        let dfeat = dfeat.expect("at least one network").as_standard_layout().into_owned();
        let n_enc = self.encoding.n_params();
        self.encoding.backward(coords, dfeat.as_slice().unwrap(), &mut grad[..n_enc]);
    }

    /// Accumulates into `grad` the gradient of `sum(dout * forward(coords))`.
    /// Activations are recomputed batch by batch.
    pub fn backward(&self, coords: &[Coord<T>], dout: ArrayView2<T>, grad: &mut [T]) -> Result<()> {
        check_coords(coords)?;
        self.check_dout(coords, &dout)?;
        for (b, chunk) in coords.chunks(BATCH_SIZE).enumerate() {
            let tape = self.tape_batch(chunk, b * BATCH_SIZE);
            self.backward_batch(chunk, &tape, dout, grad);
        }
        Ok(())
    }

    /// Like [`Self::backward`] but reuses the activations of [`Self::forward_taped`].
    pub fn backward_taped(&self, coords: &[Coord<T>], tapes: &[Tape<T>], dout: ArrayView2<T>, grad: &mut [T]) -> Result<()> {
        self.check_dout(coords, &dout)?;
        for (chunk, tape) in coords.chunks(BATCH_SIZE).zip(tapes) {
            self.backward_batch(chunk, tape, dout, grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural_fields::coordinate_grid;

    fn tiny(head: Head) -> FieldConfig {
        FieldConfig {
            encoding: HashEncodingConfig {
                levels: 3,
                log2_table_size: 6,
                features: 2,
                base_resolution: 2,
                per_level_scale: 2.0,
            },
            hidden_layers: 2,
            hidden_width: 8,
            head,
            out_dim: 2,
        }
    }

    #[test]
    fn exp_head_is_positive() {
        let field = NeuralField::<f64>::new(FieldConfig::new(HashEncodingConfig::for_volume([8, 8, 4]), Head::PositiveExp, 3), 9).unwrap();
        let coords = coordinate_grid::<f64>([8, 8, 4]).unwrap();
        let out = field.forward(&coords).unwrap();
        assert_eq!(out.dim(), (256, 3));
        assert!(out.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_imaginary_network_gives_real_output() {
        let mut field = NeuralField::<f64>::new(tiny(Head::ComplexTwoHead), 2).unwrap();
        let r = field.network_range(1);
        field.params_mut()[r].iter_mut().for_each(|p| *p = 0.0);
        let out = field.forward(&coordinate_grid::<f64>([4, 4, 2]).unwrap()).unwrap();
        assert!(out.slice(s![.., 2..]).iter().all(|&v| v == 0.0));
        assert!(out.slice(s![.., ..2]).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        for head in [Head::PositiveExp, Head::LinearReal, Head::ComplexTwoHead] {
            let mut field = NeuralField::<f64>::new(tiny(head), 4).unwrap();
            // large table entries so the encoding matters
            let n_enc = field.network_range(0).start;
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for p in field.params_mut()[..n_enc].iter_mut() {
                *p = rand::Rng::random_range(&mut rng, -0.5..0.5);
            }
            let coords = [[0.1, 0.5, 0.9], [0.7, 0.2, 0.35], [0.45, 0.95, 0.0]];
            let weights = Array2::from_shape_fn((3, field.n_outputs()), |(i, j)| 0.5 + i as f64 - 0.7 * j as f64);
            let loss = |f: &NeuralField<f64>| (f.forward(&coords).unwrap() * &weights).sum();
            let mut grad = vec![0.0; field.n_params()];
            field.backward(&coords, weights.view(), &mut grad).unwrap();
            let (_, tapes) = field.forward_taped(&coords).unwrap();
            let mut grad2 = vec![0.0; field.n_params()];
            field.backward_taped(&coords, &tapes, weights.view(), &mut grad2).unwrap();
            assert_eq!(grad, grad2);
            let probes: Vec<usize> = (0..grad.len()).filter(|&i| grad[i].abs() > 1e-4).step_by(3).collect();
            assert!(probes.len() > 10);
            for i in probes {
                let mut hi = field.clone();
                hi.params_mut()[i] += 1e-6;
                let mut lo = field.clone();
                lo.params_mut()[i] -= 1e-6;
                let fd = (loss(&hi) - loss(&lo)) / 2e-6;
                assert!((fd - grad[i]).abs() <= 1e-4 * grad[i].abs(), "{head:?} {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let a = NeuralField::<f32>::new(tiny(Head::LinearReal), 1).unwrap();
        let b = NeuralField::<f32>::new(tiny(Head::LinearReal), 1).unwrap();
        let coords = coordinate_grid::<f32>([3, 3, 3]).unwrap();
        assert_eq!(a.forward(&coords).unwrap(), b.forward(&coords).unwrap());
        assert!(a.forward(&[[0.0, -0.1, 0.0]]).is_err());
        assert!(NeuralField::<f32>::from_params(tiny(Head::LinearReal), vec![0.0; 3]).is_err());
        let mut bad = tiny(Head::LinearReal);
        bad.hidden_layers = 0;
        assert!(NeuralField::<f32>::new(bad, 1).is_err());
    }
}
