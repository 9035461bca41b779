use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParameterStore;
use super::tensor::{matmul_raw, Tensor};
use crate::error::Result;

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    /// `dims` lists the input width, hidden widths and output width.
    pub fn new(prefix: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self {
            prefix: prefix.to_string(),
            dims: dims.to_vec(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.{layer}.w", self.prefix),
            format!("{}.{layer}.b", self.prefix),
        )
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        for (layer, pair) in self.dims.windows(2).enumerate() {
            let (w, b) = self.names(layer);
            store.insert_xavier(w, pair[0], pair[1], rng)?;
            store.insert_zeros(b, &[1, pair[1]])?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, input: Var) -> Result<Var> {
        let layers = self.dims.len() - 1;
        let mut h = input;
        for layer in 0..layers {
            let (w, b) = self.names(layer);
            let wv = g.param(store, &w)?;
            let bv = g.param(store, &b)?;
            let z = g.matmul(h, wv)?;
            h = g.add_row(z, bv)?;
            if layer + 1 < layers {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Untracked forward pass over a row-major `rows x input` matrix.
    pub fn eval(&self, store: &ParameterStore, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        let layers = self.dims.len() - 1;
        let mut h = input.to_vec();
        for layer in 0..layers {
            let (w, b) = self.names(layer);
            let (fan_in, fan_out) = (self.dims[layer], self.dims[layer + 1]);
            let mut z = matmul_raw(&h, store.get(&w)?.data(), rows, fan_in, fan_out);
            let bias = store.get(&b)?.data();
            for row in z.chunks_mut(fan_out) {
                for (x, bv) in row.iter_mut().zip(bias) {
                    *x += bv;
                }
                if layer + 1 < layers {
                    row.iter_mut().for_each(|x| *x = x.max(0.0));
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Sets every weight and bias to zero.
    /// Zeroes the last layer only, so the network starts as the constant 0
    /// (before any output nonlinearity) while hidden layers stay random.
    pub fn zero_output(&self, store: &mut ParameterStore) -> Result<()> {
        let last = self.dims.len() - 2;
        let (w, b) = self.names(last);
        store.set(&w, Tensor::zeros(&[self.dims[last], self.dims[last + 1]]))?;
        store.set(&b, Tensor::zeros(&[1, self.dims[last + 1]]))
    }

    pub fn zero(&self, store: &mut ParameterStore) -> Result<()> {
        for (layer, pair) in self.dims.windows(2).enumerate() {
            let (w, b) = self.names(layer);
            store.set(&w, Tensor::zeros(&[pair[0], pair[1]]))?;
            store.set(&b, Tensor::zeros(&[1, pair[1]]))?;
        }
        Ok(())
    }
}
