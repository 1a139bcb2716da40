//! Autoencoder-based distillation strategy.
//!
//! Four sequential steps turn a set of per-sample attribution maps into an
//! assembled predictor:
//!
//! 1. explanations are generated up front (see [`crate::attribution`]);
//! 2. an autoencoder compresses flattened explanations into latent codes;
//! 3. a convolutional encoder `F` learns to predict those codes from raw
//!    inputs (targets precomputed with the frozen autoencoder);
//! 4. a fusion head is trained on the *autoencoder's* codes plus the base
//!    model's logits — inference later substitutes `F(x)`, and an optional
//!    short fine-tune on `F(x)` inputs closes that train/inference gap.
//!
//! The base model stays frozen through all of it; its checkpoint hash is the
//! witness.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::AttributionMap;
use crate::container::{read_checkpoint_file, write_checkpoint_file};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fusion::{
    train_fusion, FusionClassifier, ImpactxPredictor, LogitMode, FUSION_HIDDEN, LEAK,
};
use crate::model::{BaseClassifier, TrainConfig, CONV1_FILTERS, CONV2_FILTERS};
use crate::nn::{Adam, ConvNet, Mlp};
use crate::tensor::Tensor;
use crate::util::{derived_seed, digest_f32, holdout_split, rng_from_seed, shuffle};

/// Hidden widths of the explanation autoencoder, encoder-side order.
pub const AE_HIDDEN: [usize; 2] = [256, 64];

/// Default width of the latent explanation code.
pub const DEFAULT_LATENT_DIM: usize = 32;

/// One epoch of a mean-squared-error training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Mean squared error between two equally long vectors.
pub(crate) fn mse(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    sum / a.len() as f64
}

// ---------------------------------------------------------------------------
// Explanation autoencoder
// ---------------------------------------------------------------------------

/// Dense autoencoder over flattened explanations: encoder
/// `input → 256 → 64 → latent`, decoder mirror `latent → 64 → 256 → input`,
/// leaky-ReLU (slope 0.01) everywhere except the last layer of each stack.
#[derive(Debug, Clone)]
pub struct ExplanationAutoencoder {
    encoder: Mlp,
    decoder: Mlp,
    input_dim: usize,
    latent_dim: usize,
    val_loss: Option<f64>,
    history: Vec<MseEpoch>,
}

impl ExplanationAutoencoder {
    pub fn new(input_dim: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::Config(
                "autoencoder dimensions must be positive".into(),
            ));
        }
        if latent_dim >= input_dim {
            return Err(Error::Config(format!(
                "latent dimension {latent_dim} does not compress explanations of size {input_dim}"
            )));
        }
        let enc_sizes = [input_dim, AE_HIDDEN[0], AE_HIDDEN[1], latent_dim];
        let dec_sizes = [latent_dim, AE_HIDDEN[1], AE_HIDDEN[0], input_dim];
        let mut rng = rng_from_seed(derived_seed(seed, "autoencoder:init"));
        Ok(ExplanationAutoencoder {
            encoder: Mlp::new(&enc_sizes, LEAK, &mut rng)?,
            decoder: Mlp::new(&dec_sizes, LEAK, &mut rng)?,
            input_dim,
            latent_dim,
            val_loss: None,
            history: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Best validation reconstruction MSE recorded by [`train_autoencoder`];
    /// `None` on an untrained instance.
    pub fn val_loss(&self) -> Option<f64> {
        self.val_loss
    }

    pub fn history(&self) -> &[MseEpoch] {
        &self.history
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn param_digest(&self) -> String {
        let mut all = self.encoder.params.clone();
        all.extend_from_slice(&self.decoder.params);
        digest_f32(&all)
    }

    fn check_flat(&self, explanation: &[f32]) -> Result<()> {
        if explanation.len() != self.input_dim {
            return Err(Error::Input(format!(
                "explanation has {} values, autoencoder expects {}",
                explanation.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Encode a flattened explanation into a latent code. Pure and
    /// deterministic.
    pub fn encode(&self, explanation: &[f32]) -> Result<Vec<f32>> {
        self.check_flat(explanation)?;
        let mut scratch = self.encoder.scratch();
        Ok(self.encoder.forward(explanation, &mut scratch).to_vec())
    }

    /// Encode an attribution map (its full-input expansion).
    pub fn encode_map(&self, map: &AttributionMap) -> Result<Vec<f32>> {
        self.encode(map.expand().data())
    }

    /// Decode a latent code back into a flattened explanation.
    pub fn decode(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.latent_dim {
            return Err(Error::Input(format!(
                "latent code has {} dims, autoencoder expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        let mut scratch = self.decoder.scratch();
        Ok(self.decoder.forward(z, &mut scratch).to_vec())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "autoencoder",
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "hidden": AE_HIDDEN,
            "val_loss": self.val_loss,
            "param_digest": self.param_digest(),
        });
        let mut payload = self.encoder.params.clone();
        payload.extend_from_slice(&self.decoder.params);
        write_checkpoint_file(path, &header, &payload)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (header, payload) = read_checkpoint_file(path)?;
        let kind = header["kind"].as_str().unwrap_or_default();
        if kind != "autoencoder" {
            return Err(Error::Format(format!(
                "checkpoint holds a {kind:?}, expected an autoencoder"
            )));
        }
        let input_dim = header["input_dim"].as_u64().unwrap_or(0) as usize;
        let latent_dim = header["latent_dim"].as_u64().unwrap_or(0) as usize;
        let mut ae = ExplanationAutoencoder::new(input_dim, latent_dim, 0)?;
        let enc_len = ae.encoder.param_count();
        let dec_len = ae.decoder.param_count();
        if payload.len() != enc_len + dec_len {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, autoencoder needs {}",
                payload.len(),
                enc_len + dec_len
            )));
        }
        ae.encoder.params.copy_from_slice(&payload[..enc_len]);
        ae.decoder.params.copy_from_slice(&payload[enc_len..]);
        let recorded = header["param_digest"].as_str().unwrap_or_default();
        let actual = ae.param_digest();
        if recorded != actual {
            return Err(Error::Integrity(format!(
                "parameter digest mismatch: header says {recorded}, payload hashes to {actual}"
            )));
        }
        ae.val_loss = header["val_loss"].as_f64();
        Ok(ae)
    }
}

/// Flatten attribution maps into equally sized vectors, checking shape
/// agreement and finiteness.
fn flatten_explanations(explanations: &[AttributionMap]) -> Result<Vec<Vec<f32>>> {
    let first_len = explanations[0].expand().len();
    let mut flat = Vec::with_capacity(explanations.len());
    for map in explanations {
        let e = map.expand();
        if e.len() != first_len {
            return Err(Error::Consistency(format!(
                "explanations have mixed sizes: {} and {} values",
                first_len,
                e.len()
            )));
        }
        if !e.all_finite() {
            return Err(Error::Input(format!(
                "explanation for sample {} contains non-finite values",
                map.sample_id
            )));
        }
        flat.push(e.into_data());
    }
    Ok(flat)
}

/// Train an explanation autoencoder by minimizing mean squared
/// reconstruction error. 10% of the explanations are held out (seeded); the
/// parameters with the best validation reconstruction are restored and the
/// loss recorded on the returned model.
pub fn train_autoencoder(
    explanations: &[AttributionMap],
    latent_dim: usize,
    config: &TrainConfig,
) -> Result<ExplanationAutoencoder> {
    config.validate()?;
    if explanations.len() < latent_dim + 1 {
        return Err(Error::Config(format!(
            "autoencoder training needs more explanations than latent dimensions: got {}, need ≥ {}",
            explanations.len(),
            latent_dim + 1
        )));
    }
    let targets = flatten_explanations(explanations)?;
    let input_dim = targets[0].len();
    let mut ae = ExplanationAutoencoder::new(input_dim, latent_dim, config.seed)?;

    let (train_idx, val_idx) = holdout_split(
        targets.len(),
        0.1,
        derived_seed(config.seed, "autoencoder:holdout"),
    );

    let mut enc_opt = Adam::new(
        config.learning_rate,
        config.decay1,
        config.decay2,
        config.epsilon,
        ae.encoder.param_count(),
    );
    let mut dec_opt = Adam::new(
        config.learning_rate,
        config.decay1,
        config.decay2,
        config.epsilon,
        ae.decoder.param_count(),
    );
    let mut enc_scratch = ae.encoder.scratch();
    let mut dec_scratch = ae.decoder.scratch();
    let mut enc_grads = vec![0.0f32; ae.encoder.param_count()];
    let mut dec_grads = vec![0.0f32; ae.decoder.param_count()];
    let mut grad_recon = vec![0.0f32; input_dim];
    let mut grad_z = vec![0.0f32; latent_dim];
    let mut best: Option<(f64, Vec<f32>, Vec<f32>)> = None;
    let mut stale_epochs = 0usize;

    let eval_mse = |ae: &ExplanationAutoencoder,
                    idx: &[usize],
                    enc_s: &mut crate::nn::MlpScratch,
                    dec_s: &mut crate::nn::MlpScratch|
     -> f64 {
        let mut total = 0.0f64;
        for &i in idx {
            let z = ae.encoder.forward(&targets[i], enc_s);
            let z = z.to_vec();
            let recon = ae.decoder.forward(&z, dec_s);
            total += mse(recon, &targets[i]);
        }
        total / idx.len() as f64
    };

    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        let mut rng =
            rng_from_seed(derived_seed(config.seed, &format!("autoencoder:epoch:{epoch}")));
        shuffle(&mut order, &mut rng);

        let mut epoch_loss = 0.0f64;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            enc_grads.fill(0.0);
            dec_grads.fill(0.0);
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let target = &targets[i];
                let z = ae.encoder.forward(target, &mut enc_scratch).to_vec();
                let recon = ae.decoder.forward(&z, &mut dec_scratch);
                batch_loss += mse(recon, target);
                let scale = 2.0 / input_dim as f32;
                for (g, (&r, &t)) in grad_recon.iter_mut().zip(recon.iter().zip(target)) {
                    *g = scale * (r - t);
                }
                ae.decoder.backward(
                    &mut dec_scratch,
                    &grad_recon,
                    Some(&mut dec_grads),
                    Some(&mut grad_z),
                );
                ae.encoder
                    .backward(&mut enc_scratch, &grad_z, Some(&mut enc_grads), None);
            }
            let inv = 1.0 / batch.len() as f32;
            for g in enc_grads.iter_mut() {
                *g *= inv;
            }
            for g in dec_grads.iter_mut() {
                *g *= inv;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                    message: format!("reconstruction loss {batch_loss} is not finite"),
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            enc_opt.step(&mut ae.encoder.params, &enc_grads);
            dec_opt.step(&mut ae.decoder.params, &dec_grads);
        }

        let val_mse = eval_mse(&ae, &val_idx, &mut enc_scratch, &mut dec_scratch);
        ae.history.push(MseEpoch {
            epoch,
            train_mse: epoch_loss / train_idx.len() as f64,
            val_mse,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_mse < *b);
        if improved {
            best = Some((val_mse, ae.encoder.params.clone(), ae.decoder.params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.early_stop_patience {
                break;
            }
        }
    }

    if let Some((loss, enc, dec)) = best {
        ae.encoder.params = enc;
        ae.decoder.params = dec;
        ae.val_loss = Some(loss);
    }
    Ok(ae)
}

// ---------------------------------------------------------------------------
// Attribution encoder (F)
// ---------------------------------------------------------------------------

/// Convolutional encoder `F` mapping raw inputs to latent explanation codes.
/// Same backbone shape as the base classifier, independently initialized,
/// with a final dense layer of width `latent_dim`.
#[derive(Debug, Clone)]
pub struct AttributionEncoder {
    net: ConvNet,
    latent_dim: usize,
    history: Vec<MseEpoch>,
    warnings: Vec<String>,
}

impl AttributionEncoder {
    pub fn new(shape: &[usize], latent_dim: usize, seed: u64) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::Config(format!(
                "input shape must be [channels, height, width], got {shape:?}"
            )));
        }
        let mut rng = rng_from_seed(derived_seed(seed, "attribution-encoder:init"));
        Ok(AttributionEncoder {
            net: ConvNet::new(
                shape[0],
                shape[1],
                shape[2],
                CONV1_FILTERS,
                CONV2_FILTERS,
                latent_dim,
                &mut rng,
            )?,
            latent_dim,
            history: Vec::new(),
            warnings: Vec::new(),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn history(&self) -> &[MseEpoch] {
        &self.history
    }

    /// Bookkeeping notes from training (e.g. an overfitting warning when the
    /// validation distillation error exceeds twice the training error).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn param_digest(&self) -> String {
        digest_f32(&self.net.params)
    }

    /// Map a sample to its latent code. Pure and deterministic.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<f32>> {
        if x.shape() != [self.net.in_c, self.net.h, self.net.w].as_slice() {
            return Err(Error::Input(format!(
                "sample shape {:?} does not match encoder input {}×{}×{}",
                x.shape(),
                self.net.in_c,
                self.net.h,
                self.net.w
            )));
        }
        let mut scratch = self.net.scratch();
        Ok(self.net.forward(x.data(), &mut scratch).to_vec())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "attribution_encoder",
            "input": [self.net.in_c, self.net.h, self.net.w],
            "conv_filters": [self.net.c1, self.net.c2],
            "latent_dim": self.latent_dim,
            "param_digest": self.param_digest(),
        });
        write_checkpoint_file(path, &header, &self.net.params)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint_file(path)?;
        let kind = header["kind"].as_str().unwrap_or_default();
        if kind != "attribution_encoder" {
            return Err(Error::Format(format!(
                "checkpoint holds a {kind:?}, expected an attribution_encoder"
            )));
        }
        let input: Vec<usize> = header["input"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        let latent_dim = header["latent_dim"].as_u64().unwrap_or(0) as usize;
        if input.len() != 3 || latent_dim == 0 {
            return Err(Error::Format(
                "checkpoint header missing input shape or latent width".into(),
            ));
        }
        let mut enc = AttributionEncoder::new(&input, latent_dim, 0)?;
        if params.len() != enc.net.param_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, encoder needs {}",
                params.len(),
                enc.net.param_count()
            )));
        }
        enc.net.params = params;
        let recorded = header["param_digest"].as_str().unwrap_or_default();
        let actual = enc.param_digest();
        if recorded != actual {
            return Err(Error::Integrity(format!(
                "parameter digest mismatch: header says {recorded}, payload hashes to {actual}"
            )));
        }
        Ok(enc)
    }
}

/// Pair every dataset sample with its attribution map by sample id.
/// A sample without an explanation, or two explanations claiming the same
/// id, is a consistency error; surplus explanations are ignored.
pub(crate) fn align_by_id<'a>(
    dataset: &LabeledDataset,
    explanations: &'a [AttributionMap],
) -> Result<Vec<&'a AttributionMap>> {
    let mut by_id: HashMap<u64, &AttributionMap> = HashMap::with_capacity(explanations.len());
    for map in explanations {
        if by_id.insert(map.sample_id, map).is_some() {
            return Err(Error::Consistency(format!(
                "two explanations claim sample id {}",
                map.sample_id
            )));
        }
    }
    dataset
        .samples
        .iter()
        .map(|s| {
            by_id.get(&s.id).copied().ok_or_else(|| {
                Error::Consistency(format!("no explanation for sample id {}", s.id))
            })
        })
        .collect()
}

/// Distill latent explanation codes into a convolutional encoder: minimizes
/// ‖F(x) − E_A(e_x)‖² with the autoencoder frozen, targets precomputed once
/// up front. Explanations are matched to samples by id. 10% of the pairs are
/// held out (seeded); best-validation parameters are restored. If the final
/// validation error exceeds twice the training error, an overfitting warning
/// is recorded on the returned encoder.
pub fn train_attribution_encoder(
    dataset: &LabeledDataset,
    ae: &ExplanationAutoencoder,
    explanations: &[AttributionMap],
    config: &TrainConfig,
) -> Result<AttributionEncoder> {
    config.validate()?;
    if ae.val_loss.is_none() {
        return Err(Error::Config(
            "autoencoder must be trained before distillation".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let aligned = align_by_id(dataset, explanations)?;
    let targets: Vec<Vec<f32>> = aligned
        .iter()
        .map(|map| ae.encode(map.expand().data()))
        .collect::<Result<_>>()?;

    let latent_dim = ae.latent_dim;
    let mut enc = AttributionEncoder::new(dataset.feature_shape(), latent_dim, config.seed)?;

    let n = dataset.len();
    let (train_idx, val_idx) = if n == 1 {
        (vec![0], vec![0])
    } else {
        holdout_split(n, 0.1, derived_seed(config.seed, "attribution-encoder:holdout"))
    };

    let mut opt = Adam::new(
        config.learning_rate,
        config.decay1,
        config.decay2,
        config.epsilon,
        enc.net.param_count(),
    );
    let mut scratch = enc.net.scratch();
    let mut grads = vec![0.0f32; enc.net.param_count()];
    let mut grad_out = vec![0.0f32; latent_dim];
    let mut best: Option<(f64, Vec<f32>)> = None;
    let mut stale_epochs = 0usize;

    let eval_mse = |enc: &AttributionEncoder,
                    idx: &[usize],
                    scratch: &mut crate::nn::ConvNetScratch|
     -> f64 {
        let mut total = 0.0f64;
        for &i in idx {
            let out = enc
                .net
                .forward(dataset.samples[i].features.data(), scratch);
            total += mse(out, &targets[i]);
        }
        total / idx.len() as f64
    };

    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        let mut rng = rng_from_seed(derived_seed(
            config.seed,
            &format!("attribution-encoder:epoch:{epoch}"),
        ));
        shuffle(&mut order, &mut rng);

        let mut epoch_loss = 0.0f64;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill(0.0);
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let out = enc
                    .net
                    .forward(dataset.samples[i].features.data(), &mut scratch);
                batch_loss += mse(out, &targets[i]);
                let scale = 2.0 / latent_dim as f32;
                for (g, (&o, &t)) in grad_out.iter_mut().zip(out.iter().zip(&targets[i])) {
                    *g = scale * (o - t);
                }
                enc.net
                    .backward(&mut scratch, &grad_out, Some(&mut grads), None);
            }
            let inv = 1.0 / batch.len() as f32;
            for g in grads.iter_mut() {
                *g *= inv;
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                    message: format!("distillation loss {batch_loss} is not finite"),
                });
            }
            epoch_loss += batch_loss * batch.len() as f64;
            opt.step(&mut enc.net.params, &grads);
        }

        let val_mse = eval_mse(&enc, &val_idx, &mut scratch);
        enc.history.push(MseEpoch {
            epoch,
            train_mse: epoch_loss / train_idx.len() as f64,
            val_mse,
        });

        let improved = best.as_ref().map_or(true, |(b, _)| val_mse < *b);
        if improved {
            best = Some((val_mse, enc.net.params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.early_stop_patience {
                break;
            }
        }
    }

    if let Some((_, params)) = best {
        enc.net.params = params;
    }
    let final_train = eval_mse(&enc, &train_idx, &mut scratch);
    let final_val = eval_mse(&enc, &val_idx, &mut scratch);
    if final_val > 2.0 * final_train {
        enc.warnings.push(format!(
            "distillation overfits: validation error {final_val:.3e} exceeds twice the training error {final_train:.3e}"
        ));
    }
    Ok(enc)
}

// ---------------------------------------------------------------------------
// Strategy driver
// ---------------------------------------------------------------------------

/// Knobs for the full autoencoder strategy run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeStrategyConfig {
    pub latent_dim: usize,
    pub autoencoder: TrainConfig,
    pub encoder: TrainConfig,
    pub fusion: TrainConfig,
    /// Epochs of fusion-head adaptation on `F(x)` inputs after the literal
    /// training pass on autoencoder codes; 0 disables the fine-tune and
    /// reproduces the literal four-step procedure.
    pub fine_tune_epochs: usize,
    pub logit_mode: LogitMode,
    /// Hidden width of the fusion head; `None` for a linear head.
    pub fusion_hidden: Option<usize>,
}

impl Default for AeStrategyConfig {
    fn default() -> Self {
        AeStrategyConfig {
            latent_dim: DEFAULT_LATENT_DIM,
            autoencoder: TrainConfig::default(),
            encoder: TrainConfig::default(),
            fusion: TrainConfig::default(),
            fine_tune_epochs: 5,
            logit_mode: LogitMode::RawLogits,
            fusion_hidden: Some(FUSION_HIDDEN),
        }
    }
}

/// Everything a strategy run produces.
#[derive(Debug, Clone)]
pub struct AeStrategyArtifacts {
    pub autoencoder: ExplanationAutoencoder,
    pub encoder: AttributionEncoder,
    pub fusion: FusionClassifier,
    pub predictor: ImpactxPredictor,
    pub warnings: Vec<String>,
}

/// Run the autoencoder strategy end to end against a frozen base model:
/// train the autoencoder on the explanations, distill its codes into `F`,
/// train the fusion head on autoencoder codes plus base logits (then
/// optionally fine-tune it on `F`'s codes), and assemble the predictor.
pub fn run_autoencoder_strategy(
    model: &BaseClassifier,
    dataset: &LabeledDataset,
    explanations: &[AttributionMap],
    config: &AeStrategyConfig,
) -> Result<AeStrategyArtifacts> {
    if !model.is_frozen() {
        return Err(Error::Config(
            "base model must be frozen before strategy training".into(),
        ));
    }
    if dataset.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, base model {}",
            dataset.num_classes,
            model.num_classes()
        )));
    }
    let hash_before = model.checkpoint_hash();

    // Step 2: compress explanations into latent codes.
    let ae = train_autoencoder(explanations, config.latent_dim, &config.autoencoder)?;

    // Step 3: distill codes into an input-side encoder.
    let encoder = train_attribution_encoder(dataset, &ae, explanations, &config.encoder)?;

    // Step 4: train the fusion head on the *autoencoder's* codes, per the
    // four-step procedure; inference will substitute F(x).
    let aligned = align_by_id(dataset, explanations)?;
    let mut codes = Vec::with_capacity(dataset.len());
    for map in &aligned {
        codes.push(ae.encode(map.expand().data())?);
    }
    let mut logits = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        logits.push(model.predict_logits(&sample.features)?);
    }
    let mut fusion = train_fusion(
        &codes,
        &logits,
        &dataset.labels,
        config.logit_mode,
        config.fusion_hidden,
        &config.fusion,
    )?;

    if config.fine_tune_epochs > 0 {
        let mut distilled = Vec::with_capacity(dataset.len());
        for sample in &dataset.samples {
            distilled.push(encoder.encode(&sample.features)?);
        }
        fusion.fine_tune(
            &distilled,
            &logits,
            &dataset.labels,
            config.fine_tune_epochs,
            &config.fusion,
        )?;
    }

    let predictor = ImpactxPredictor::new(
        model.clone(),
        encoder.net().clone(),
        ae.decoder.clone(),
        fusion.clone(),
    )?;

    debug_assert_eq!(model.checkpoint_hash(), hash_before);
    let warnings = encoder.warnings().to_vec();
    Ok(AeStrategyArtifacts {
        autoencoder: ae,
        encoder,
        fusion,
        predictor,
        warnings,
    })
}
