use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamStore};
use super::tape::{Activation, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Affine map `x W + b` with `W: fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(±1/√fan_in)`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let weight = store.add_uniform(
            format!("{name}.weight"),
            vec![fan_in, fan_out],
            bound,
            true,
            rng,
        );
        let bias = store.add_uniform(format!("{name}.bias"), vec![fan_out], bound, false, rng);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_bias(h, b)
    }
}

/// Multilayer perceptron: affine layers separated by a nonlinearity, with
/// the last layer left affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    widths: Vec<usize>,
}

impl Mlp {
    /// `widths` lists input width, hidden widths and output width.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        widths: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "{name}: an MLP needs at least two positive widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Ok(Self {
            layers,
            activation,
            widths: widths.to_vec(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn in_width(&self) -> usize {
        self.widths[0]
    }

    pub fn out_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_width() {
            return Err(shape_err("mlp input", shape, &[self.in_width()]));
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.activation(h, self.activation);
            }
        }
        Ok(h)
    }
}

/// Evaluates an MLP on plain data, without keeping the tape.
pub fn mlp_forward(mlp: &Mlp, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = mlp.forward(&mut tape, store, xv)?;
    Ok(tape.value(y).clone())
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}
