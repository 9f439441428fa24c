use das_numerics::{ParamStore, SeededRng, Tape, Tensor, Var};

use crate::error::Result;

/// Fully connected stack with ReLU between layers and a linear output.
/// Parameters are `{prefix}.layer{k}.weight` (in×out) and `.bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self { prefix: prefix.into(), dims }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.layer{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.layer{layer}.bias", self.prefix)
    }

    /// He-normal weights for layers feeding a ReLU, Glorot-normal for the
    /// output layer; zero biases.
    pub fn register(&self, store: &mut ParamStore, rng: &mut SeededRng) -> Result<()> {
        let layers = self.dims.len() - 1;
        for k in 0..layers {
            let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
            let std =
                if k + 1 < layers { (2.0 / fan_in as f64).sqrt() } else { (2.0 / (fan_in + fan_out) as f64).sqrt() };
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.normal() * std).collect();
            store.insert(self.weight_name(k), Tensor::matrix(fan_in, fan_out, w)?)?;
            store.insert(self.bias_name(k), Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for k in 0..layers {
            let w = tape.param(store, &self.weight_name(k))?;
            let b = tape.param(store, &self.bias_name(k))?;
            h = tape.affine(h, w, b)?;
            if k + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }
}
