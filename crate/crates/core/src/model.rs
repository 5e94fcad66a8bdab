//! Encoder/decoder network.
//!
//! Encoders are three fully connected layers, each followed by a leaky ReLU,
//! mapping the phase vector to a latent vector of size `c`. The decoder
//! reshapes the latent vector to `(c, 1, 1)` and applies ten transposed
//! convolutions: a 3x4 kernel that creates the 3x4 base map, a 3x3 kernel
//! that keeps it, then 5x5 kernels of which the last `n_upsample` have
//! stride 2 and double both extents. Every stage but the last is followed by
//! batch normalization and a leaky ReLU; the last one by a sigmoid.
//!
//! Several encoders (one per working point) can share a single decoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::ops::{
    self, BatchNormConfig, BatchNormState, ConvTransposeSpec, Mode, DEFAULT_LEAKY_SLOPE,
};
use crate::tensor::{BatchNormStats, Graph, Scalar, Tensor, Var};

/// Channel widths of the desk-scale decoder (96x128 output).
pub const DESK_CHANNELS: [usize; 10] = [64, 64, 48, 32, 24, 16, 12, 8, 4, 1];
/// Channel widths of the full-scale decoder (768x1024 output). With a
/// 64-wide latent space and the default encoder the network has 1,897,137
/// trainable parameters.
pub const FULL_SCALE_CHANNELS: [usize; 10] = [192, 192, 128, 128, 64, 64, 32, 16, 8, 1];
pub const DEFAULT_LATENT_DIM: usize = 64;
pub const DECODER_STAGES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub latent_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::new(3, DEFAULT_LATENT_DIM)
    }
}

impl EncoderConfig {
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: [64, 128],
            latent_dim,
        }
    }

    pub fn with_hidden(mut self, hidden: [usize; 2]) -> Self {
        self.hidden = hidden;
        self
    }

    /// `(fan_in, fan_out)` of the three layers.
    pub fn layer_dims(&self) -> [(usize, usize); 3] {
        [
            (self.input_dim, self.hidden[0]),
            (self.hidden[0], self.hidden[1]),
            (self.hidden[1], self.latent_dim),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (a, b)) in self.layer_dims().iter().enumerate() {
            if *a == 0 || *b == 0 {
                return Err(Error::Config(format!(
                    "encoder layer {}: zero width ({a} -> {b})",
                    i + 1
                )));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(a, b)| a * b + b).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub latent_dim: usize,
    pub stages: Vec<ConvTransposeSpec>,
    /// Number of stride-2 stages.
    pub n_upsample: usize,
}

impl DecoderConfig {
    /// Standard ten-stage layout. The `8 - n_upsample` stride-1 5x5 stages
    /// come right after the 3x3 stage, at base resolution.
    pub fn new(latent_dim: usize, channels: &[usize], n_upsample: usize) -> Result<Self> {
        if channels.len() != DECODER_STAGES {
            return Err(Error::Config(format!(
                "decoder needs {DECODER_STAGES} channel widths, got {}",
                channels.len()
            )));
        }
        if n_upsample > DECODER_STAGES - 2 {
            return Err(Error::Config(format!(
                "at most {} stride-2 stages fit",
                DECODER_STAGES - 2
            )));
        }
        let mut stages = vec![
            ConvTransposeSpec::new(latent_dim, channels[0], (3, 4)),
            ConvTransposeSpec::new(channels[0], channels[1], (3, 3)).with_padding((1, 1)),
        ];
        let first_up = DECODER_STAGES - n_upsample;
        for i in 2..DECODER_STAGES {
            let spec =
                ConvTransposeSpec::new(channels[i - 1], channels[i], (5, 5)).with_padding((2, 2));
            stages.push(if i >= first_up {
                spec.with_stride((2, 2)).with_output_padding((1, 1))
            } else {
                spec
            });
        }
        let cfg = Self {
            latent_dim,
            stages,
            n_upsample,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 96x128 output.
    pub fn desk() -> Self {
        Self::new(DEFAULT_LATENT_DIM, &DESK_CHANNELS, 5).expect("valid preset")
    }

    /// 768x1024 output.
    pub fn full_scale() -> Self {
        Self::new(DEFAULT_LATENT_DIM, &FULL_SCALE_CHANNELS, 8).expect("valid preset")
    }

    /// Structural checks that any decoder must pass (stage chaining, geometry).
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("decoder has no stages".into()));
        }
        let mut channels = self.latent_dim;
        for (i, s) in self.stages.iter().enumerate() {
            let stage = i + 1;
            s.validate()
                .map_err(|e| Error::Config(format!("decoder stage {stage}: {e}")))?;
            if s.in_channels != channels {
                return Err(Error::Config(format!(
                    "decoder stage {stage}: expects {} input channels, previous stage provides {channels}",
                    s.in_channels
                )));
            }
            channels = s.out_channels;
        }
        if channels != 1 {
            return Err(Error::Config(format!(
                "decoder stage {}: final stage must emit 1 channel, got {channels}",
                self.stages.len()
            )));
        }
        self.shape_chain().map(|_| ())
    }

    /// Checks the ten-stage layout: kernel sizes, stride count and output extent.
    pub fn check_layout(&self) -> Result<()> {
        self.validate()?;
        if self.stages.len() != DECODER_STAGES {
            return Err(Error::Config(format!(
                "expected {DECODER_STAGES} stages, got {}",
                self.stages.len()
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let want = match i {
                0 => (3, 4),
                1 => (3, 3),
                _ => (5, 5),
            };
            if s.kernel != want {
                return Err(Error::Config(format!(
                    "decoder stage {}: kernel {:?}, expected {want:?}",
                    i + 1,
                    s.kernel
                )));
            }
        }
        let ups = self.stages.iter().filter(|s| s.stride == (2, 2)).count();
        if ups != self.n_upsample {
            return Err(Error::Config(format!(
                "{ups} stride-2 stages, n_upsample says {}",
                self.n_upsample
            )));
        }
        let (h, w) = self.output_dims()?;
        let want = (3 << self.n_upsample, 4 << self.n_upsample);
        if (h, w) != want {
            return Err(Error::Config(format!(
                "decoder emits {h}x{w}, expected {}x{}",
                want.0, want.1
            )));
        }
        Ok(())
    }

    /// `(channels, height, width)` after each stage, starting from the `(c, 1, 1)` latent map.
    pub fn shape_chain(&self) -> Result<Vec<[usize; 3]>> {
        let mut chain = vec![[self.latent_dim, 1, 1]];
        let (mut h, mut w) = (1, 1);
        for (i, s) in self.stages.iter().enumerate() {
            (h, w) = s
                .output_size(h, w)
                .map_err(|e| Error::Config(format!("decoder stage {}: {e}", i + 1)))?;
            chain.push([s.out_channels, h, w]);
        }
        Ok(chain)
    }

    pub fn output_dims(&self) -> Result<(usize, usize)> {
        let last = *self.shape_chain()?.last().expect("non-empty");
        Ok((last[1], last[2]))
    }

    /// Transposed-convolution weights and biases plus `2 * C` affine
    /// batch-norm parameters for every stage except the last.
    pub fn param_count(&self) -> usize {
        let n = self.stages.len();
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.param_count() + if i + 1 < n { 2 * s.out_channels } else { 0 })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    /// `[fan_in, fan_out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub layers: Vec<DenseLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub state: BatchNormState<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage<T> {
    pub spec: ConvTransposeSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Absent on the final (sigmoid) stage.
    pub norm: Option<BatchNormLayer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub config: DecoderConfig,
    pub stages: Vec<DecoderStage<T>>,
}

/// Unit of freezing and of parameter bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Decoder,
    Encoder(String),
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Decoder => f.write_str("decoder"),
            ParamGroup::Encoder(id) => write!(f, "encoder:{id}"),
        }
    }
}

/// Hyperparameters that are not part of the layer geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub leaky_slope: f64,
    pub batch_norm: BatchNormConfig,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            batch_norm: BatchNormConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub per_group: BTreeMap<String, usize>,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
}

/// Tape handles for one forward pass.
pub struct ForwardPass {
    pub output: Var,
    /// Parameter name and its leaf on the tape, for every trainable parameter.
    pub params: Vec<(String, Var)>,
    /// Shape after the latent reshape and after every decoder stage.
    pub stage_shapes: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T: Scalar = f32> {
    decoder: Decoder<T>,
    encoders: BTreeMap<String, Encoder<T>>,
    frozen: BTreeSet<ParamGroup>,
    options: ModelOptions,
}

fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| T::of(normal.sample(rng)))
}

/// Stream-separated seed so that encoder and decoder draws never overlap.
pub(crate) fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> Encoder<T> {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| DenseLayer {
                weight: he_normal(&[fan_in, fan_out], fan_in, &mut rng),
                bias: Tensor::zeros([fan_out]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }
}

impl<T: Scalar> Decoder<T> {
    pub fn init(config: &DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.stages.len();
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
                DecoderStage {
                    spec: *spec,
                    weight: he_normal(&spec.weight_shape(), fan_in, &mut rng),
                    bias: Tensor::zeros([spec.out_channels]),
                    norm: (i + 1 < n).then(|| BatchNormLayer {
                        gamma: Tensor::full([spec.out_channels], T::one()),
                        beta: Tensor::zeros([spec.out_channels]),
                        state: BatchNormState::new(spec.out_channels),
                    }),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }
}

fn encoder_param_names(id: &str, i: usize) -> (String, String) {
    (
        format!("encoder:{id}/dense{i}/weight"),
        format!("encoder:{id}/dense{i}/bias"),
    )
}

fn stage_name(i: usize, what: &str) -> String {
    format!("decoder/stage{:02}/{what}", i + 1)
}

impl<T: Scalar> Autoencoder<T> {
    /// He-initialized model with one encoder registered under `encoder_id`.
    pub fn build(
        encoder_id: &str,
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
        seed: u64,
    ) -> Result<Self> {
        Self::build_with(encoder_id, encoder, decoder, seed, ModelOptions::default())
    }

    pub fn build_with(
        encoder_id: &str,
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
        seed: u64,
        options: ModelOptions,
    ) -> Result<Self> {
        let mut model = Self {
            decoder: Decoder::init(decoder, sub_seed(seed, 0))?,
            encoders: BTreeMap::new(),
            frozen: BTreeSet::new(),
            options,
        };
        model.attach_encoder(encoder_id, encoder, sub_seed(seed, 1))?;
        Ok(model)
    }

    /// Reassembles a model from its parts; used when loading checkpoints.
    pub fn from_parts(
        decoder: Decoder<T>,
        encoders: BTreeMap<String, Encoder<T>>,
        frozen: BTreeSet<ParamGroup>,
        options: ModelOptions,
    ) -> Result<Self> {
        decoder.config.validate()?;
        for enc in encoders.values() {
            if enc.config.latent_dim != decoder.config.latent_dim {
                return Err(Error::LatentMismatch {
                    encoder: enc.config.latent_dim,
                    decoder: decoder.config.latent_dim,
                });
            }
        }
        Ok(Self {
            decoder,
            encoders,
            frozen,
            options,
        })
    }

    /// Adds (or replaces) a He-initialized encoder that feeds the shared decoder.
    pub fn attach_encoder(
        &mut self,
        encoder_id: &str,
        config: &EncoderConfig,
        seed: u64,
    ) -> Result<()> {
        if config.latent_dim != self.decoder.config.latent_dim {
            return Err(Error::LatentMismatch {
                encoder: config.latent_dim,
                decoder: self.decoder.config.latent_dim,
            });
        }
        let enc = Encoder::init(config, seed)?;
        self.encoders.insert(encoder_id.to_string(), enc);
        Ok(())
    }

    fn check_group(&self, group: &ParamGroup) -> Result<()> {
        match group {
            ParamGroup::Encoder(id) if !self.encoders.contains_key(id) => {
                Err(Error::UnknownEncoder(id.clone()))
            }
            _ => Ok(()),
        }
    }

    pub fn freeze(&mut self, group: &ParamGroup) -> Result<()> {
        self.check_group(group)?;
        self.frozen.insert(group.clone());
        Ok(())
    }

    pub fn unfreeze(&mut self, group: &ParamGroup) -> Result<()> {
        self.check_group(group)?;
        self.frozen.remove(group);
        Ok(())
    }

    pub fn is_frozen(&self, group: &ParamGroup) -> bool {
        self.frozen.contains(group)
    }

    pub fn frozen_groups(&self) -> &BTreeSet<ParamGroup> {
        &self.frozen
    }

    pub fn decoder(&self) -> &Decoder<T> {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut Decoder<T> {
        &mut self.decoder
    }

    pub fn encoder(&self, id: &str) -> Result<&Encoder<T>> {
        self.encoders
            .get(id)
            .ok_or_else(|| Error::UnknownEncoder(id.to_string()))
    }

    pub fn encoders(&self) -> &BTreeMap<String, Encoder<T>> {
        &self.encoders
    }

    pub fn options(&self) -> &ModelOptions {
        &self.options
    }

    pub fn output_dims(&self) -> (usize, usize) {
        self.decoder
            .config
            .output_dims()
            .expect("validated at construction")
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let mut per_group = BTreeMap::new();
        per_group.insert(
            ParamGroup::Decoder.to_string(),
            self.decoder.config.param_count(),
        );
        for (id, enc) in &self.encoders {
            per_group.insert(
                ParamGroup::Encoder(id.clone()).to_string(),
                enc.config.param_count(),
            );
        }
        let total: usize = per_group.values().sum();
        let frozen: usize = self
            .frozen
            .iter()
            .map(|g| per_group.get(&g.to_string()).copied().unwrap_or(0))
            .sum();
        ParamCounts {
            per_group,
            trainable: total - frozen,
            frozen,
            total,
        }
    }

    /// Every trainable tensor with its stable name and group, in a fixed order.
    pub fn parameters(&self) -> Vec<(String, ParamGroup, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.decoder.stages.iter().enumerate() {
            out.push((stage_name(i, "weight"), ParamGroup::Decoder, &s.weight));
            out.push((stage_name(i, "bias"), ParamGroup::Decoder, &s.bias));
            if let Some(bn) = &s.norm {
                out.push((stage_name(i, "gamma"), ParamGroup::Decoder, &bn.gamma));
                out.push((stage_name(i, "beta"), ParamGroup::Decoder, &bn.beta));
            }
        }
        for (id, enc) in &self.encoders {
            for (i, l) in enc.layers.iter().enumerate() {
                let (w, b) = encoder_param_names(id, i);
                out.push((w, ParamGroup::Encoder(id.clone()), &l.weight));
                out.push((b, ParamGroup::Encoder(id.clone()), &l.bias));
            }
        }
        out
    }

    /// Mutable counterpart of [`Autoencoder::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.decoder.stages.iter_mut().enumerate() {
            out.push((stage_name(i, "weight"), ParamGroup::Decoder, &mut s.weight));
            out.push((stage_name(i, "bias"), ParamGroup::Decoder, &mut s.bias));
            if let Some(bn) = &mut s.norm {
                out.push((stage_name(i, "gamma"), ParamGroup::Decoder, &mut bn.gamma));
                out.push((stage_name(i, "beta"), ParamGroup::Decoder, &mut bn.beta));
            }
        }
        for (id, enc) in &mut self.encoders {
            for (i, l) in enc.layers.iter_mut().enumerate() {
                let (w, b) = encoder_param_names(id, i);
                out.push((w, ParamGroup::Encoder(id.clone()), &mut l.weight));
                out.push((b, ParamGroup::Encoder(id.clone()), &mut l.bias));
            }
        }
        out
    }

    /// SHA-256 over all decoder weights and batch-norm statistics.
    pub fn decoder_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut feed = |v: &[T]| v.iter().for_each(|x| h.update(x.as_f64().to_le_bytes()));
        for s in &self.decoder.stages {
            feed(s.weight.data());
            feed(s.bias.data());
            if let Some(bn) = &s.norm {
                feed(bn.gamma.data());
                feed(bn.beta.data());
                feed(&bn.state.running_mean);
                feed(&bn.state.running_var);
            }
        }
        h.finalize().into()
    }

    fn check_phases(&self, phases: &Tensor<T>, encoder_id: &str) -> Result<&Encoder<T>> {
        let enc = self.encoder(encoder_id)?;
        let (_, m) = phases.dims2()?;
        if m != enc.config.input_dim {
            return Err(Error::shape(
                "encoder input",
                phases.shape(),
                &[0, enc.config.input_dim],
            ));
        }
        Ok(enc)
    }

    /// Inference-mode forward pass: `[B, m]` phases to `[B, 1, H, W]` images in (0, 1).
    pub fn forward(&self, phases: &Tensor<T>, encoder_id: &str) -> Result<Tensor<T>> {
        let enc = self.check_phases(phases, encoder_id)?;
        let slope = T::of(self.options.leaky_slope);
        let mut x = phases.clone();
        for l in &enc.layers {
            x = ops::leaky_relu(&ops::dense(&x, &l.weight, &l.bias)?, slope);
        }
        let batch = x.shape()[0];
        x = x.reshape([batch, enc.config.latent_dim, 1, 1])?;
        for s in &self.decoder.stages {
            x = ops::conv_transpose2d(&x, &s.spec, &s.weight, &s.bias)?;
            x = match &s.norm {
                Some(bn) => {
                    let (y, _) = ops::batch_norm_infer(
                        &x,
                        &bn.gamma,
                        &bn.beta,
                        &bn.state,
                        &self.options.batch_norm,
                    )?;
                    ops::leaky_relu(&y, slope)
                }
                None => ops::sigmoid(&x),
            };
        }
        Ok(x)
    }

    /// Records a forward pass on `graph`. Frozen groups enter the tape as
    /// constants, so they get no gradients but still pass them through.
    /// In [`Mode::Train`] the batch-norm layers normalize with batch
    /// statistics and update their running statistics, unless the decoder is
    /// frozen, in which case they run in inference mode.
    pub fn forward_graph(
        &mut self,
        graph: &mut Graph<T>,
        phases: &Tensor<T>,
        encoder_id: &str,
        mode: Mode,
    ) -> Result<ForwardPass> {
        self.check_phases(phases, encoder_id)?;
        let slope = T::of(self.options.leaky_slope);
        let bn_cfg = self.options.batch_norm;
        let enc_group = ParamGroup::Encoder(encoder_id.to_string());
        let enc_trainable = !self.frozen.contains(&enc_group);
        let dec_trainable = !self.frozen.contains(&ParamGroup::Decoder);
        let mut params = Vec::new();
        let mut bind =
            |graph: &mut Graph<T>, name: String, t: &Tensor<T>, trainable: bool| -> Var {
                let v = graph.leaf(t.clone(), trainable);
                if trainable {
                    params.push((name, v));
                }
                v
            };

        let enc = &self.encoders[encoder_id];
        let mut x = graph.constant(phases.clone());
        for (i, l) in enc.layers.iter().enumerate() {
            let (wn, bn) = encoder_param_names(encoder_id, i);
            let w = bind(graph, wn, &l.weight, enc_trainable);
            let b = bind(graph, bn, &l.bias, enc_trainable);
            let d = graph.dense(x, w, b)?;
            x = graph.leaky_relu(d, slope);
        }
        let batch = phases.shape()[0];
        x = graph.reshape(x, &[batch, enc.config.latent_dim, 1, 1])?;
        let mut stage_shapes = vec![graph.value(x).shape().to_vec()];

        for (i, s) in self.decoder.stages.iter_mut().enumerate() {
            let w = bind(graph, stage_name(i, "weight"), &s.weight, dec_trainable);
            let b = bind(graph, stage_name(i, "bias"), &s.bias, dec_trainable);
            x = graph.conv_transpose2d(x, w, b, s.spec)?;
            x = match &mut s.norm {
                Some(bn) => {
                    let gamma = bind(graph, stage_name(i, "gamma"), &bn.gamma, dec_trainable);
                    let beta = bind(graph, stage_name(i, "beta"), &bn.beta, dec_trainable);
                    // a frozen decoder keeps its running statistics too
                    let stats = match mode {
                        Mode::Train if dec_trainable => BatchNormStats::Train(&mut bn.state),
                        _ => BatchNormStats::Infer(&bn.state),
                    };
                    let y = graph.batch_norm(x, gamma, beta, stats, &bn_cfg)?;
                    graph.leaky_relu(y, slope)
                }
                None => graph.sigmoid(x),
            };
            stage_shapes.push(graph.value(x).shape().to_vec());
        }
        Ok(ForwardPass {
            output: x,
            params,
            stage_shapes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_decoder(latent: usize) -> DecoderConfig {
        DecoderConfig {
            latent_dim: latent,
            stages: vec![
                ConvTransposeSpec::new(latent, 4, (3, 4)),
                ConvTransposeSpec::new(4, 2, (3, 3)).with_padding((1, 1)),
                ConvTransposeSpec::new(2, 1, (5, 5))
                    .with_stride((2, 2))
                    .with_padding((2, 2))
                    .with_output_padding((1, 1)),
            ],
            n_upsample: 1,
        }
    }

    #[test]
    fn he_std_and_layer_counts() {
        assert!(((2.0f64 / 50.0).sqrt() - 0.2).abs() < 1e-15);
        assert_eq!(EncoderConfig::new(3, 64).layer_dims()[0], (3, 64));
        assert_eq!(3 * 64 + 64, 256);
        assert_eq!(ConvTransposeSpec::new(16, 8, (5, 5)).param_count(), 3208);
        let enc = EncoderConfig::new(3, 8).with_hidden([8, 8]);
        assert_eq!(enc.param_count(), 176);
    }

    #[test]
    fn he_initialized_weights_have_expected_spread() {
        let enc =
            Encoder::<f64>::init(&EncoderConfig::new(50, 8).with_hidden([400, 8]), 11).unwrap();
        let w = enc.layers[0].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.2).abs() < 0.01, "{std}");
        assert!(enc.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn presets_follow_layout() {
        let desk = DecoderConfig::desk();
        desk.check_layout().unwrap();
        assert_eq!(desk.output_dims().unwrap(), (96, 128));
        let full = DecoderConfig::full_scale();
        full.check_layout().unwrap();
        assert_eq!(full.output_dims().unwrap(), (768, 1024));
        let chain = full.shape_chain().unwrap();
        assert_eq!(chain[1][1..], [3, 4]);
        assert_eq!(chain[2][1..], [3, 4]);
        for k in 3..=10 {
            assert_eq!(chain[k][1..], [3 << (k - 2), 4 << (k - 2)]);
        }
    }

    #[test]
    fn build_errors_name_the_stage() {
        let mut cfg = DecoderConfig::desk();
        cfg.stages[3].in_channels = 7;
        let err = Autoencoder::<f32>::build("WP1", &EncoderConfig::default(), &cfg, 0).unwrap_err();
        assert!(err.to_string().contains("stage 4"), "{err}");
    }

    #[test]
    fn toy_parameter_count_matches_hand_formula() {
        let cfg = toy_decoder(5);
        let hand = (5 * 4 * 12 + 4) + (4 * 2 * 9 + 2) + (2 * 25 + 1) + 2 * 4 + 2 * 2;
        assert_eq!(cfg.param_count(), hand);
    }

    #[test]
    fn freezing_moves_counts_not_total() {
        let mut m = Autoencoder::<f32>::build(
            "WP1",
            &EncoderConfig::new(3, 5).with_hidden([8, 8]),
            &toy_decoder(5),
            1,
        )
        .unwrap();
        let before = m.count_parameters();
        m.freeze(&ParamGroup::Decoder).unwrap();
        let after = m.count_parameters();
        assert_eq!(before.total, after.total);
        assert_eq!(
            after.trainable,
            before.trainable - toy_decoder(5).param_count()
        );
        assert!(m.freeze(&ParamGroup::Encoder("nope".into())).is_err());
    }

    #[test]
    fn forward_shapes_and_range() {
        let mut m = Autoencoder::<f32>::build(
            "WP1",
            &EncoderConfig::new(3, 5).with_hidden([8, 8]),
            &toy_decoder(5),
            2,
        )
        .unwrap();
        let x = Tensor::new([2, 3], vec![1.0, -2.0, 3.0, 100.0, -100.0, 0.0]).unwrap();
        let y = m.forward(&x, "WP1").unwrap();
        assert_eq!(y.shape(), &[2, 1, 6, 8]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let mut g = Graph::new();
        let pass = m.forward_graph(&mut g, &x, "WP1", Mode::Infer).unwrap();
        assert_eq!(g.value(pass.output), &y);
        assert_eq!(pass.stage_shapes[0], vec![2, 5, 1, 1]);
        assert_eq!(pass.stage_shapes[1], vec![2, 4, 3, 4]);
        assert!(matches!(
            m.forward(&x, "WP2"),
            Err(Error::UnknownEncoder(_))
        ));
    }

    #[test]
    fn attach_checks_latent_dim() {
        let mut m = Autoencoder::<f32>::build("WP1", &EncoderConfig::new(3, 5), &toy_decoder(5), 2)
            .unwrap();
        assert!(matches!(
            m.attach_encoder("WP2", &EncoderConfig::new(2, 6), 3),
            Err(Error::LatentMismatch {
                encoder: 6,
                decoder: 5
            })
        ));
        m.attach_encoder("WP2", &EncoderConfig::new(2, 5), 3)
            .unwrap();
        let y = m
            .forward(&Tensor::new([1, 2], vec![0.5, -0.5]).unwrap(), "WP2")
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 8]);
    }

    #[test]
    fn build_is_deterministic() {
        let a =
            Autoencoder::<f32>::build("WP1", &EncoderConfig::default(), &DecoderConfig::desk(), 9)
                .unwrap();
        let b =
            Autoencoder::<f32>::build("WP1", &EncoderConfig::default(), &DecoderConfig::desk(), 9)
                .unwrap();
        assert_eq!(a, b);
        let c =
            Autoencoder::<f32>::build("WP1", &EncoderConfig::default(), &DecoderConfig::desk(), 10)
                .unwrap();
        assert_ne!(a.decoder_digest(), c.decoder_digest());
    }
}
