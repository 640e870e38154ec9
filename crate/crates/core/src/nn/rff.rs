//! Random Fourier feature encodings and the positional networks built on
//! them.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use super::mlp::{join, Mlp};
use super::params::{ParamId, ParamStore};
use super::tape::{Activation, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::Rng;

/// Settings of a random Fourier feature encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RffConfig {
    /// Standard deviation of the sampled frequencies.
    pub omega: f64,
    pub n_frequencies: usize,
    /// Whether the frequencies keep training after initialization.
    pub trainable: bool,
    pub seed: u64,
}

impl Default for RffConfig {
    fn default() -> Self {
        Self {
            omega: 0.1,
            n_frequencies: 16,
            trainable: true,
            seed: 0,
        }
    }
}

/// `p ↦ [cos(2π p B), sin(2π p B)]` with `B ~ N(0, Ω²)` of shape
/// `dim × n_frequencies`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatures {
    freqs: ParamId,
    dim: usize,
    cfg: RffConfig,
}

impl FourierFeatures {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: RffConfig) -> Result<Self> {
        if !(cfg.omega.is_finite() && cfg.omega > 0.0) || cfg.n_frequencies == 0 || dim == 0 {
            return Err(Error::Config(format!(
                "{name}: Fourier features need omega > 0, at least one frequency and dim > 0"
            )));
        }
        let normal = Normal::new(0.0, cfg.omega).map_err(|e| Error::Config(format!("{e}")))?;
        let mut rng = Rng::seed_from_u64(cfg.seed);
        let data: Vec<f64> = (0..dim * cfg.n_frequencies)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let freqs = store.add(
            join(name, "freqs"),
            Tensor::matrix(dim, cfg.n_frequencies, data)?,
            false,
        );
        store.set_trainable(freqs, cfg.trainable);
        Ok(Self { freqs, dim, cfg })
    }

    pub fn out_width(&self) -> usize {
        2 * self.cfg.n_frequencies
    }

    pub fn config(&self) -> &RffConfig {
        &self.cfg
    }

    pub fn freqs(&self) -> ParamId {
        self.freqs
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> Result<Var> {
        let shape = tape.value(p).shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(shape_err("fourier features", shape, &[self.dim]));
        }
        let b = tape.param(store, self.freqs);
        let z = tape.matmul(p, b)?;
        let z = tape.scale(z, TAU);
        tape.sincos(z)
    }
}

/// Evaluates the Fourier encoding of `rel_pos` (`m × dim`) for `cfg`.
pub fn rff_embed(cfg: &RffConfig, rel_pos: &Tensor) -> Result<Tensor> {
    let dim = rel_pos.cols();
    let mut store = ParamStore::new();
    let ff = FourierFeatures::new(&mut store, "rff", dim, *cfg)?;
    let mut tape = Tape::new();
    let p = tape.constant(rel_pos.clone());
    let y = ff.forward(&mut tape, &store, p)?;
    Ok(tape.value(y).clone())
}

/// Positional embedding network: an optional Fourier encoding followed by an
/// MLP head.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalNet {
    fourier: Option<FourierFeatures>,
    head: Mlp,
    dim: usize,
}

impl PositionalNet {
    /// `widths` are the head's hidden and output widths. Without `rff` the
    /// head reads raw relative positions.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        rff: Option<RffConfig>,
        widths: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        let fourier = rff
            .map(|cfg| FourierFeatures::new(store, &join(name, "rff"), dim, cfg))
            .transpose()?;
        let in_width = fourier.as_ref().map_or(dim, FourierFeatures::out_width);
        let mut all = Vec::with_capacity(widths.len() + 1);
        all.push(in_width);
        all.extend_from_slice(widths);
        let head = Mlp::new(store, rng, &join(name, "head"), &all, activation)?;
        Ok(Self { fourier, head, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fourier(&self) -> Option<&FourierFeatures> {
        self.fourier.as_ref()
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn out_width(&self) -> usize {
        self.head.out_width()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, rel: Var) -> Result<Var> {
        let h = match &self.fourier {
            Some(ff) => ff.forward(tape, store, rel)?,
            None => rel,
        };
        self.head.forward(tape, store, h)
    }

    /// Everything up to, not including, the last affine layer of the head.
    pub(crate) fn forward_trunk(&self, tape: &mut Tape, store: &ParamStore, rel: Var) -> Result<Var> {
        let mut h = match &self.fourier {
            Some(ff) => ff.forward(tape, store, rel)?,
            None => rel,
        };
        let layers = self.head.layers();
        for layer in &layers[..layers.len() - 1] {
            h = layer.forward(tape, store, h)?;
            h = tape.activation(h, self.head.activation());
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_position_gives_cos_one_sin_zero() {
        let cfg = RffConfig {
            n_frequencies: 5,
            ..RffConfig::default()
        };
        let y = rff_embed(&cfg, &Tensor::zeros(vec![2, 3])).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        for row in y.data().chunks(10) {
            assert!(row[..5].iter().all(|&v| v == 1.0));
            assert!(row[5..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = RffConfig {
            omega: 1.0,
            seed: 42,
            ..RffConfig::default()
        };
        let p = Tensor::matrix(2, 2, vec![0.1, -0.3, 0.7, 0.2]).unwrap();
        assert_eq!(rff_embed(&cfg, &p).unwrap(), rff_embed(&cfg, &p).unwrap());
    }

    #[test]
    fn rejects_bad_omega() {
        let mut store = ParamStore::new();
        let cfg = RffConfig {
            omega: 0.0,
            ..RffConfig::default()
        };
        assert!(FourierFeatures::new(&mut store, "x", 3, cfg).is_err());
    }

    #[test]
    fn frozen_frequencies_are_constant() {
        let mut store = ParamStore::new();
        let cfg = RffConfig {
            trainable: false,
            ..RffConfig::default()
        };
        let ff = FourierFeatures::new(&mut store, "x", 2, cfg).unwrap();
        let mut tape = Tape::new();
        let p = tape.variable(Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap());
        let y = ff.forward(&mut tape, &store, p).unwrap();
        let l = tape.reduce_mean(y).unwrap();
        tape.backward(l).unwrap();
        let b = tape.param(&store, ff.freqs());
        assert!(tape.grad(b).is_none());
    }
}
