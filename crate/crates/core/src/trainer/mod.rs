//! Mini-batch training, frozen-decoder transfer, evaluation and checkpoints.
//!
//! Phases enter the encoder divided by their scan half-width (3° for the gun,
//! 6° for A1 and AH1), so every input feature lies in `[-1, 1]`.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamline::{Calibration, Dataset, PhaseVector, ScreenImage, Split, WorkingPoint};
use crate::diagnostics::{compare, Comparison};
use crate::digest::hex;
use crate::error::{Error, Result};
use crate::loss::{ms_ssim, Loss, MsSsimConfig};
use crate::model::{sub_seed, Autoencoder, ParamGroup};
use crate::tensor::{Graph, Mode, Tensor};

pub use adam::{adam_step, Adam, AdamConfig, Moments};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Encoder input for a phase vector.
pub fn phase_features(phases: &PhaseVector) -> Vec<f32> {
    let wp = if phases.ah1.is_some() {
        WorkingPoint::Wp1
    } else {
        WorkingPoint::Wp2
    };
    phases
        .to_vec()
        .iter()
        .zip(wp.phase_ranges())
        .map(|(p, r)| (p / r) as f32)
        .collect()
}

/// `[B, m]` encoder inputs and `[B, 1, H, W]` targets for the given shots.
pub fn batch_tensors(dataset: &Dataset, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let m = dataset.working_point.phase_dim();
    let mut x = Vec::with_capacity(indices.len() * m);
    let mut y = Vec::with_capacity(indices.len() * dataset.height * dataset.width);
    for &i in indices {
        let shot = dataset
            .shots
            .get(i)
            .ok_or_else(|| Error::Input(format!("shot index {i} out of range")))?;
        x.extend(phase_features(&shot.phases));
        y.extend_from_slice(&shot.image.pixels);
    }
    Ok((
        Tensor::new([indices.len(), m], x)?,
        Tensor::new([indices.len(), 1, dataset.height, dataset.width], y)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: Loss,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub encoder_id: String,
    /// Groups frozen before the first epoch.
    pub freeze: Vec<ParamGroup>,
    /// 1-based epoch from which the decoder is trainable again.
    pub fine_tune_at: Option<usize>,
    /// Test-set evaluation period in epochs (the last epoch is always evaluated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: Loss::MsSsim(MsSsimConfig::default()),
            learning_rate: 1e-3,
            epochs: 600,
            batch_size: 16,
            seed: 0,
            encoder_id: WorkingPoint::Wp1.id().to_string(),
            freeze: Vec::new(),
            fine_tune_at: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Defaults of the second working point: 300 epochs.
    pub fn wp2() -> Self {
        Self {
            epochs: 300,
            encoder_id: WorkingPoint::Wp2.id().to_string(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch size must be at least 2 (batch norm)".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if let Loss::MsSsim(c) = &self.loss {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean MS-SSIM over the test split, inference mode.
    pub test_mean_h: Option<f64>,
    pub decoder_frozen: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub steps: u64,
    pub decoder_digest_before: String,
    pub decoder_digest_after: String,
}

impl TrainReport {
    pub fn final_test_mean_h(&self) -> Option<f64> {
        self.metrics.last().and_then(|m| m.test_mean_h)
    }
}

fn check_compat(model: &Autoencoder<f32>, dataset: &Dataset, encoder_id: &str) -> Result<()> {
    let enc = model.encoder(encoder_id)?;
    if enc.config.input_dim != dataset.working_point.phase_dim() {
        return Err(Error::Input(format!(
            "encoder `{encoder_id}` takes {} phases but the dataset is {} ({} phases)",
            enc.config.input_dim,
            dataset.working_point,
            dataset.working_point.phase_dim()
        )));
    }
    if model.output_dims() != (dataset.height, dataset.width) {
        return Err(Error::Input(format!(
            "decoder emits {:?} images, dataset holds {}x{}",
            model.output_dims(),
            dataset.height,
            dataset.width
        )));
    }
    Ok(())
}

/// Owns the optimizer and epoch counter of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Adam<f32>,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        });
        Ok(Self {
            config,
            optimizer,
            epoch: 0,
        })
    }

    /// Continues from a saved optimizer state.
    pub fn resume(config: TrainConfig, optimizer: Adam<f32>, epoch: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            optimizer,
            epoch,
        })
    }

    fn step(
        &mut self,
        model: &mut Autoencoder<f32>,
        x: &Tensor<f32>,
        y: &Tensor<f32>,
    ) -> Result<f64> {
        let mut graph = Graph::new();
        let fp = model.forward_graph(&mut graph, x, &self.config.encoder_id, Mode::Train)?;
        let loss = self.config.loss.record(&mut graph, fp.output, y)?;
        let value = graph.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Ok(value);
        }
        let mut grads = graph.backward(loss)?;
        let named: BTreeMap<String, Tensor<f32>> = fp
            .params
            .into_iter()
            .filter_map(|(name, v)| grads.take(v).map(|g| (name, g)))
            .collect();
        self.optimizer.step(model, &named)?;
        Ok(value)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        model: &mut Autoencoder<f32>,
        dataset: &Dataset,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<TrainReport> {
        let cfg = self.config.clone();
        check_compat(model, dataset, &cfg.encoder_id)?;
        for g in &cfg.freeze {
            model.freeze(g)?;
        }
        let train_idx = dataset.indices(Split::Train);
        if train_idx.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        if train_idx.len() < 2 {
            return Err(Error::BatchTooSmall(train_idx.len()));
        }
        let test_idx = dataset.indices(Split::Test);
        let before = hex(&model.decoder_digest());
        let mut metrics = Vec::new();
        let mut steps = 0;
        while self.epoch < cfg.epochs {
            let epoch = self.epoch + 1;
            let started = Instant::now();
            if cfg.fine_tune_at.is_some_and(|e| epoch >= e) {
                model.unfreeze(&ParamGroup::Decoder)?;
            }
            let mut order = train_idx.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(
                cfg.seed,
                100 + epoch as u64,
            )));
            let (mut total, mut seen) = (0.0, 0usize);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if chunk.len() < 2 {
                    continue; // batch norm cannot train on a single sample
                }
                let (x, y) = batch_tensors(dataset, chunk)?;
                let loss = self.step(model, &x, &y)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                total += loss * chunk.len() as f64;
                seen += chunk.len();
                steps += 1;
            }
            let evaluate_now =
                !test_idx.is_empty() && (epoch.is_multiple_of(cfg.eval_every) || epoch == cfg.epochs);
            let test_mean_h = if evaluate_now {
                Some(mean_h(model, dataset, &test_idx, &cfg.encoder_id)?)
            } else {
                None
            };
            self.epoch = epoch;
            let m = EpochMetrics {
                epoch,
                train_loss: total / seen as f64,
                test_mean_h,
                decoder_frozen: model.is_frozen(&ParamGroup::Decoder),
                seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&m);
            metrics.push(m);
        }
        Ok(TrainReport {
            metrics,
            steps,
            decoder_digest_before: before,
            decoder_digest_after: hex(&model.decoder_digest()),
        })
    }
}

/// Trains `model` on the train split of `dataset`.
pub fn train(
    model: &mut Autoencoder<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    Trainer::new(config.clone())?.run(model, dataset, |_| {})
}

/// Encoder-only training against a frozen decoder. The caller attaches the new
/// encoder under `config.encoder_id` and freezes the decoder first; an
/// optional `fine_tune_at` epoch releases the decoder.
pub fn transfer_train(
    model: &mut Autoencoder<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    transfer_trainer(model, config)?.run(model, dataset, |_| {})
}

/// Checks the transfer preconditions and returns the trainer to run.
pub fn transfer_trainer(model: &Autoencoder<f32>, config: &TrainConfig) -> Result<Trainer> {
    if !model.is_frozen(&ParamGroup::Decoder) {
        return Err(Error::Refused(
            "transfer training needs a frozen decoder; freeze it, or use plain training to update it".into(),
        ));
    }
    model.encoder(&config.encoder_id)?;
    Trainer::new(config.clone())
}

const EVAL_CHUNK: usize = 64;

/// Inference-mode predictions for the given shots.
fn predict_indices(
    model: &Autoencoder<f32>,
    dataset: &Dataset,
    idx: &[usize],
    encoder_id: &str,
) -> Result<Vec<Vec<f32>>> {
    let plane = dataset.height * dataset.width;
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = batch_tensors(dataset, chunk)?;
        let pred = model.forward(&x, encoder_id)?;
        out.extend(pred.data().chunks(plane).map(<[f32]>::to_vec));
    }
    Ok(out)
}

fn similarity(target: &[f32], pred: &[f32], h: usize, w: usize) -> Result<f64> {
    let a = Tensor::new([h, w], target.iter().map(|&v| v as f64).collect())?;
    let b = Tensor::new([h, w], pred.iter().map(|&v| v as f64).collect())?;
    ms_ssim(&a, &b, &MsSsimConfig::default())
}

fn mean_h(
    model: &Autoencoder<f32>,
    dataset: &Dataset,
    idx: &[usize],
    encoder_id: &str,
) -> Result<f64> {
    let preds = predict_indices(model, dataset, idx, encoder_id)?;
    let hs = idx
        .par_iter()
        .zip(&preds)
        .map(|(&i, p)| {
            similarity(
                &dataset.shots[i].image.pixels,
                p,
                dataset.height,
                dataset.width,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(hs.iter().sum::<f64>() / hs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotEvaluation {
    pub index: usize,
    pub phases: Vec<f64>,
    pub h: f64,
    pub comparison: Comparison,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub shots: usize,
    pub mean_h: f64,
    pub min_h: f64,
    pub max_h: f64,
    pub mean_current_max_error_a: f64,
    pub mean_spectrum_peak_ratio: f64,
    pub mean_sigma_e_ratio: Option<f64>,
    pub per_shot: Vec<ShotEvaluation>,
}

/// MS-SSIM and physics deltas of the model's predictions on one split.
pub fn evaluate(
    model: &Autoencoder<f32>,
    dataset: &Dataset,
    split: Split,
    encoder_id: &str,
) -> Result<EvalReport> {
    let idx = dataset.indices(split);
    evaluate_indices(model, dataset, &idx, split, encoder_id)
}

/// [`evaluate`] restricted to explicit shot indices.
pub fn evaluate_indices(
    model: &Autoencoder<f32>,
    dataset: &Dataset,
    idx: &[usize],
    split: Split,
    encoder_id: &str,
) -> Result<EvalReport> {
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    check_compat(model, dataset, encoder_id)?;
    let preds = predict_indices(model, dataset, idx, encoder_id)?;
    let per_shot = idx
        .par_iter()
        .zip(preds)
        .map(|(&i, p)| {
            let shot = &dataset.shots[i];
            let h = similarity(&shot.image.pixels, &p, dataset.height, dataset.width)?;
            let pred = ScreenImage::new(dataset.height, dataset.width, p, dataset.calibration)?;
            Ok(ShotEvaluation {
                index: i,
                phases: shot.phases.to_vec(),
                h,
                comparison: compare(&shot.image, &pred)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_shot.len() as f64;
    let mean = |f: &dyn Fn(&ShotEvaluation) -> f64| per_shot.iter().map(f).sum::<f64>() / n;
    let ratios: Vec<f64> = per_shot
        .iter()
        .filter_map(|s| s.comparison.sigma_e_ratio)
        .collect();
    Ok(EvalReport {
        split,
        shots: per_shot.len(),
        mean_h: mean(&|s| s.h),
        min_h: per_shot.iter().map(|s| s.h).fold(f64::INFINITY, f64::min),
        max_h: per_shot
            .iter()
            .map(|s| s.h)
            .fold(f64::NEG_INFINITY, f64::max),
        mean_current_max_error_a: mean(&|s| s.comparison.current_max_error_a),
        mean_spectrum_peak_ratio: mean(&|s| s.comparison.spectrum_peak_ratio),
        mean_sigma_e_ratio: (!ratios.is_empty())
            .then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
        per_shot,
    })
}

/// Inference-mode image for one phase vector.
pub fn predict(
    model: &Autoencoder<f32>,
    encoder_id: &str,
    phases: &PhaseVector,
    calibration: Calibration,
) -> Result<ScreenImage> {
    let f = phase_features(phases);
    let x = Tensor::new([1, f.len()], f)?;
    let y = model.forward(&x, encoder_id)?;
    let (h, w) = model.output_dims();
    ScreenImage::new(h, w, y.into_data(), calibration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamline::Shot;
    use crate::model::{DecoderConfig, EncoderConfig};
    use crate::tensor::ConvTransposeSpec;

    fn toy_decoder() -> DecoderConfig {
        let up = |c, o| {
            ConvTransposeSpec::new(c, o, (5, 5))
                .with_stride((2, 2))
                .with_padding((2, 2))
                .with_output_padding((1, 1))
        };
        DecoderConfig {
            latent_dim: 8,
            stages: vec![
                ConvTransposeSpec::new(8, 4, (3, 4)),
                ConvTransposeSpec::new(4, 4, (3, 3)).with_padding((1, 1)),
                up(4, 4),
                up(4, 1),
            ],
            n_upsample: 2,
        }
    }

    /// 20 blobs on a 12x16 screen whose position follows the phases.
    fn toy_dataset() -> Dataset {
        let shots = (0..20)
            .map(|i| {
                let t = i as f64 / 19.0;
                let phases = PhaseVector::wp1(3.0 * (2.0 * t - 1.0), 6.0 * (1.0 - 2.0 * t), 0.0);
                let mut image = ScreenImage::zeros(12, 16, Calibration::CAMERA);
                let (r0, c0) = (3.0 + 6.0 * t, 4.0 + 8.0 * t);
                for r in 0..12 {
                    for c in 0..16 {
                        let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
                        image.set(r, c, (-d2 / 6.0).exp() as f32);
                    }
                }
                Shot {
                    phases,
                    image,
                    split: Split::Train,
                }
            })
            .collect();
        Dataset {
            working_point: WorkingPoint::Wp1,
            height: 12,
            width: 16,
            calibration: Calibration::CAMERA,
            shots,
        }
    }

    #[test]
    fn encoder_learns_against_a_frozen_decoder() {
        let ds = toy_dataset();
        let mut model = Autoencoder::build(
            "WP1",
            &EncoderConfig::new(3, 8).with_hidden([16, 16]),
            &toy_decoder(),
            4,
        )
        .unwrap();
        model.freeze(&ParamGroup::Decoder).unwrap();
        let cfg = TrainConfig {
            loss: Loss::MsSsim(MsSsimConfig {
                alphas: vec![0.5, 0.5],
                window_size: 4,
                ..MsSsimConfig::default()
            }),
            epochs: 50,
            batch_size: 20,
            eval_every: 50,
            ..TrainConfig::default()
        };
        let report = transfer_train(&mut model, &ds, &cfg).unwrap();
        assert_eq!(report.steps, 50);
        assert_eq!(report.decoder_digest_before, report.decoder_digest_after);
        let (first, last) = (report.metrics[0].train_loss, report.metrics[49].train_loss);
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn transfer_without_frozen_decoder_is_refused() {
        let model =
            Autoencoder::build("WP1", &EncoderConfig::new(3, 8), &toy_decoder(), 4).unwrap();
        let err = transfer_trainer(&model, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Refused(_)));
    }
}
