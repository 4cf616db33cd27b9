//! WaveNet-style shared feature extractor.
//!
//! A width-1 input projection lifts the waveform `[B, 1, T]` to `channels`
//! feature maps; `num_blocks * layers_per_block` residual atoms follow, each
//! computing `x + sigmoid(W_gate ⊛ x) * tanh(W_filter ⊛ x)` with width-2
//! causal convolutions. Within a block the dilations are `1, 2, 4, …,
//! 2^(S-1)`, which gives a receptive field of `1 + N (2^S - 1)` samples.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::ndgrad::{Array, Scalar, Tape, Var};
use crate::nn::{he_uniform, Module};

/// Width of every dilated trunk convolution.
pub const KERNEL_WIDTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    #[serde(rename = "blocks")]
    pub num_blocks: usize,
    #[serde(rename = "layers")]
    pub layers_per_block: usize,
    pub channels: usize,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        TrunkConfig { num_blocks: 3, layers_per_block: 6, channels: 64 }
    }
}

impl TrunkConfig {
    pub fn new(num_blocks: usize, layers_per_block: usize, channels: usize) -> Self {
        TrunkConfig { num_blocks, layers_per_block, channels }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_blocks >= 1, "trunk needs at least one block");
        ensure!(
            (1..=24).contains(&self.layers_per_block),
            "layers per block must be in 1..=24, got {}",
            self.layers_per_block
        );
        ensure!(self.channels >= 1, "trunk needs at least one channel");
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.num_blocks * self.layers_per_block
    }

    /// Dilation of residual layer `layer` (0-based across all blocks).
    pub fn dilation(&self, layer: usize) -> usize {
        1 << (layer % self.layers_per_block)
    }

    pub fn receptive_field(&self) -> usize {
        receptive_field(self)
    }
}

/// `1 + N (2^S - 1)`.
pub fn receptive_field(cfg: &TrunkConfig) -> usize {
    1 + cfg.num_blocks * ((1usize << cfg.layers_per_block) - 1)
}

/// Receptive field after the first `blocks` blocks.
pub fn block_receptive_field(cfg: &TrunkConfig, blocks: usize) -> usize {
    1 + blocks * ((1usize << cfg.layers_per_block) - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtomParams<F> {
    pub gate_w: Array<F>,
    pub gate_b: Array<F>,
    pub filter_w: Array<F>,
    pub filter_b: Array<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrunkParams<F> {
    pub input_w: Array<F>,
    pub input_b: Array<F>,
    pub layers: Vec<AtomParams<F>>,
}

impl<F: Scalar> TrunkParams<F> {
    /// He-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(cfg: &TrunkConfig, rng: &mut R) -> Self {
        let c = cfg.channels;
        let input_w = he_uniform(&[c, 1, 1], 1, rng);
        let layers = (0..cfg.num_layers())
            .map(|_| AtomParams {
                gate_w: he_uniform(&[c, c, KERNEL_WIDTH], c * KERNEL_WIDTH, rng),
                gate_b: Array::zeros(&[c]),
                filter_w: he_uniform(&[c, c, KERNEL_WIDTH], c * KERNEL_WIDTH, rng),
                filter_b: Array::zeros(&[c]),
            })
            .collect();
        TrunkParams { input_w, input_b: Array::zeros(&[c]), layers }
    }

    pub fn zeros(cfg: &TrunkConfig) -> Self {
        let c = cfg.channels;
        let atom = AtomParams {
            gate_w: Array::zeros(&[c, c, KERNEL_WIDTH]),
            gate_b: Array::zeros(&[c]),
            filter_w: Array::zeros(&[c, c, KERNEL_WIDTH]),
            filter_b: Array::zeros(&[c]),
        };
        TrunkParams { input_w: Array::zeros(&[c, 1, 1]), input_b: Array::zeros(&[c]), layers: vec![atom; cfg.num_layers()] }
    }

    /// Checks that every tensor agrees with `cfg`.
    pub fn check(&self, cfg: &TrunkConfig) -> Result<()> {
        let c = cfg.channels;
        ensure!(
            self.input_w.shape() == [c, 1, 1] && self.input_b.shape() == [c],
            "trunk input projection is {:?} but config has {c} channels",
            self.input_w.shape()
        );
        ensure!(
            self.layers.len() == cfg.num_layers(),
            "trunk has {} layers but config needs {}",
            self.layers.len(),
            cfg.num_layers()
        );
        for (l, a) in self.layers.iter().enumerate() {
            for w in [&a.gate_w, &a.filter_w] {
                ensure!(w.shape() == [c, c, KERNEL_WIDTH], "trunk layer {l} weight {:?} does not match {c} channels", w.shape());
            }
            for b in [&a.gate_b, &a.filter_b] {
                ensure!(b.shape() == [c], "trunk layer {l} bias {:?} does not match {c} channels", b.shape());
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Module<F> for TrunkParams<F> {
    fn params(&self) -> Vec<(String, &Array<F>)> {
        let mut out = vec![("input.weight".to_string(), &self.input_w), ("input.bias".to_string(), &self.input_b)];
        for (l, a) in self.layers.iter().enumerate() {
            out.push((format!("layer{l:02}.gate.weight"), &a.gate_w));
            out.push((format!("layer{l:02}.gate.bias"), &a.gate_b));
            out.push((format!("layer{l:02}.filter.weight"), &a.filter_w));
            out.push((format!("layer{l:02}.filter.bias"), &a.filter_b));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Array<F>)> {
        let mut out = vec![("input.weight".to_string(), &mut self.input_w), ("input.bias".to_string(), &mut self.input_b)];
        for (l, a) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l:02}.gate.weight"), &mut a.gate_w));
            out.push((format!("layer{l:02}.gate.bias"), &mut a.gate_b));
            out.push((format!("layer{l:02}.filter.weight"), &mut a.filter_w));
            out.push((format!("layer{l:02}.filter.bias"), &mut a.filter_b));
        }
        out
    }
}

/// Runs the trunk on `x: [B, 1, T]` using parameter vars from
/// [`Module::bind`], returning `[B, channels, T]`.
pub fn trunk_forward<F: Scalar>(tape: &mut Tape<F>, x: Var, vars: &[Var], cfg: &TrunkConfig) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    ensure!(xs.len() == 3 && xs[1] == 1, "trunk input must be [B, 1, T], got {xs:?}");
    ensure!(vars.len() == 2 + 4 * cfg.num_layers(), "trunk expects {} parameter vars, got {}", 2 + 4 * cfg.num_layers(), vars.len());
    ensure!(
        tape.shape(vars[0])[0] == cfg.channels,
        "trunk parameters have {} channels but config has {}",
        tape.shape(vars[0])[0],
        cfg.channels
    );
    let mut h = tape.causal_conv1d(x, vars[0], vars[1], 1)?;
    for l in 0..cfg.num_layers() {
        let v = &vars[2 + 4 * l..6 + 4 * l];
        h = tape.gated_residual(h, v[0], v[1], v[2], v[3], cfg.dilation(l))?;
    }
    Ok(h)
}

/// Trunk output for `x: [B, 1, T]` without recording gradients.
pub fn embed<F: Scalar>(params: &TrunkParams<F>, cfg: &TrunkConfig, x: &Array<F>) -> Result<Array<F>> {
    params.check(cfg)?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = trunk_forward(&mut tape, xv, &vars, cfg)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn receptive_field_formula() {
        assert_eq!(receptive_field(&TrunkConfig::new(3, 6, 64)), 190);
        assert_eq!(receptive_field(&TrunkConfig::new(1, 1, 1)), 2);
        assert_eq!(receptive_field(&TrunkConfig::new(4, 5, 8)), 125);
        assert_eq!(block_receptive_field(&TrunkConfig::default(), 1), 64);
    }

    #[test]
    fn dilation_schedule_restarts_each_block() {
        let cfg = TrunkConfig::new(2, 3, 4);
        let d: Vec<usize> = (0..cfg.num_layers()).map(|l| cfg.dilation(l)).collect();
        assert_eq!(d, [1, 2, 4, 1, 2, 4]);
    }

    #[test]
    fn zero_layers_reduce_to_input_projection() {
        let cfg = TrunkConfig::new(2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = TrunkParams::<f64>::zeros(&cfg);
        params.input_w = he_uniform(&[5, 1, 1], 1, &mut rng);
        params.input_b = he_uniform(&[5], 1, &mut rng);
        let x = Array::from_f64(&[1, 1, 9], &[0.1, -0.5, 0.3, 0.9, -1.0, 0.0, 0.2, 0.4, -0.7]).unwrap();
        let out = embed(&params, &cfg, &x).unwrap();
        for c in 0..5 {
            for t in 0..9 {
                let want = params.input_w.data()[c] * x.data()[t] + params.input_b.data()[c];
                assert_eq!(out.data()[c * 9 + t], want);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let params = TrunkParams::<f32>::zeros(&TrunkConfig::new(1, 2, 4));
        let x = Array::zeros(&[1, 1, 8]);
        assert!(embed(&params, &TrunkConfig::new(1, 2, 8), &x).is_err());
    }
}
