//! Joint encoder–decoder distillation strategy.
//!
//! One training loop fits three modules at once against a frozen base model:
//! an input-side encoder `LEP`, a decoder `Dec` reconstructing the sample's
//! attribution map from the latent code, and a fusion head `C` classifying
//! from the code plus the base model's logits. The loss is
//!
//! ```text
//! lambda_recon · ‖Dec(LEP(x)) − e_x‖²  +  lambda_cls · CE(C(concat(LEP(x), M(x))), y)
//! ```
//!
//! with one optimizer per minibatch over the union of the three parameter
//! sets (Adam is elementwise, so per-module moment buffers stepped together
//! are identical to a single optimizer over the concatenation). Setting a
//! weight to zero disables that path entirely — the corresponding module
//! never sees a gradient and keeps its initialization.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::AttributionMap;
use crate::autoencoder::{align_by_id, mse, AE_HIDDEN, DEFAULT_LATENT_DIM};
use crate::container::{atomic_write, read_checkpoint_file, write_checkpoint_file};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fusion::{FusionClassifier, ImpactxPredictor, LogitMode, FUSION_HIDDEN, LEAK};
use crate::model::{BaseClassifier, TrainConfig, CONV1_FILTERS, CONV2_FILTERS};
use crate::nn::{self, Adam, ConvNet, Mlp};
use crate::tensor::Tensor;
use crate::util::{derived_seed, digest_f32, holdout_split, rng_from_seed, shuffle};

/// Relative weights of the two joint loss terms. Both default to 1.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JointLossWeights {
    pub lambda_recon: f32,
    pub lambda_cls: f32,
}

impl Default for JointLossWeights {
    fn default() -> Self {
        JointLossWeights {
            lambda_recon: 1.0,
            lambda_cls: 1.0,
        }
    }
}

impl JointLossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_recon", self.lambda_recon),
            ("lambda_cls", self.lambda_cls),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.lambda_recon == 0.0 && self.lambda_cls == 0.0 {
            return Err(Error::Config(
                "at least one joint loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder–decoder pair: convolutional encoder to a latent code (same
/// backbone shape as the base classifier) and a dense mirror decoder back to
/// explanation space.
#[derive(Debug, Clone)]
pub struct ExplanationEncoderDecoder {
    encoder: ConvNet,
    decoder: Mlp,
    latent_dim: usize,
}

impl ExplanationEncoderDecoder {
    pub fn new(shape: &[usize], latent_dim: usize, seed: u64) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::Config(format!(
                "input shape must be [channels, height, width], got {shape:?}"
            )));
        }
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        let flat = shape.iter().product::<usize>();
        let mut rng = rng_from_seed(derived_seed(seed, "encoder-decoder:init"));
        let encoder = ConvNet::new(
            shape[0],
            shape[1],
            shape[2],
            CONV1_FILTERS,
            CONV2_FILTERS,
            latent_dim,
            &mut rng,
        )?;
        let decoder = Mlp::new(&[latent_dim, AE_HIDDEN[1], AE_HIDDEN[0], flat], LEAK, &mut rng)?;
        Ok(ExplanationEncoderDecoder {
            encoder,
            decoder,
            latent_dim,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn encoder(&self) -> &ConvNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn encoder_digest(&self) -> String {
        digest_f32(&self.encoder.params)
    }

    pub fn decoder_digest(&self) -> String {
        digest_f32(&self.decoder.params)
    }

    pub fn param_digest(&self) -> String {
        let mut all = self.encoder.params.clone();
        all.extend_from_slice(&self.decoder.params);
        digest_f32(&all)
    }

    /// Latent code for a sample. Pure and deterministic.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<f32>> {
        if x.shape() != [self.encoder.in_c, self.encoder.h, self.encoder.w].as_slice() {
            return Err(Error::Input(format!(
                "sample shape {:?} does not match encoder input {}×{}×{}",
                x.shape(),
                self.encoder.in_c,
                self.encoder.h,
                self.encoder.w
            )));
        }
        let mut scratch = self.encoder.scratch();
        Ok(self.encoder.forward(x.data(), &mut scratch).to_vec())
    }

    /// Reconstructed explanation for a sample, shaped like the input.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        let mut scratch = self.decoder.scratch();
        let recon = self.decoder.forward(&z, &mut scratch);
        Tensor::from_vec(x.shape(), recon.to_vec())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "encoder_decoder",
            "input": [self.encoder.in_c, self.encoder.h, self.encoder.w],
            "conv_filters": [self.encoder.c1, self.encoder.c2],
            "latent_dim": self.latent_dim,
            "decoder_sizes": self.decoder.sizes(),
            "param_digest": self.param_digest(),
        });
        let mut payload = self.encoder.params.clone();
        payload.extend_from_slice(&self.decoder.params);
        write_checkpoint_file(path, &header, &payload)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (header, payload) = read_checkpoint_file(path)?;
        let kind = header["kind"].as_str().unwrap_or_default();
        if kind != "encoder_decoder" {
            return Err(Error::Format(format!(
                "checkpoint holds a {kind:?}, expected an encoder_decoder"
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
        let mut ed = ExplanationEncoderDecoder::new(&input, latent_dim, 0)?;
        let enc_len = ed.encoder.param_count();
        let dec_len = ed.decoder.param_count();
        if payload.len() != enc_len + dec_len {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, encoder-decoder needs {}",
                payload.len(),
                enc_len + dec_len
            )));
        }
        ed.encoder.params.copy_from_slice(&payload[..enc_len]);
        ed.decoder.params.copy_from_slice(&payload[enc_len..]);
        let recorded = header["param_digest"].as_str().unwrap_or_default();
        let actual = ed.param_digest();
        if recorded != actual {
            return Err(Error::Integrity(format!(
                "parameter digest mismatch: header says {recorded}, payload hashes to {actual}"
            )));
        }
        Ok(ed)
    }
}

/// One epoch of the joint training record. `total` values are the weighted
/// sums actually optimized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointEpoch {
    pub epoch: usize,
    pub recon_loss: f64,
    pub cls_loss: f64,
    pub total_loss: f64,
    pub val_recon: f64,
    pub val_cls: f64,
    pub val_total: f64,
    pub val_accuracy: f64,
}

/// Parameter digests captured immediately after initialization, before any
/// optimizer step — the reference points for zero-weight isolation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointInitDigests {
    pub encoder: String,
    pub decoder: String,
    pub fusion: String,
}

/// Everything [`train_joint`] produces.
#[derive(Debug, Clone)]
pub struct JointArtifacts {
    pub encoder_decoder: ExplanationEncoderDecoder,
    pub fusion: FusionClassifier,
    pub history: Vec<JointEpoch>,
    pub init_digests: JointInitDigests,
}

/// Knobs for the joint strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdStrategyConfig {
    pub latent_dim: usize,
    pub weights: JointLossWeights,
    pub train: TrainConfig,
    pub logit_mode: LogitMode,
    /// Hidden width of the fusion head; `None` for a linear head.
    pub fusion_hidden: Option<usize>,
}

impl Default for EdStrategyConfig {
    fn default() -> Self {
        EdStrategyConfig {
            latent_dim: DEFAULT_LATENT_DIM,
            weights: JointLossWeights::default(),
            train: TrainConfig::default(),
            logit_mode: LogitMode::RawLogits,
            fusion_hidden: Some(FUSION_HIDDEN),
        }
    }
}

/// Write the training-history sidecar next to an encoder-decoder checkpoint.
pub fn write_history_sidecar(path: &Path, history: &[JointEpoch]) -> Result<()> {
    let text = serde_json::to_string_pretty(history)?;
    atomic_write(path, text.as_bytes())
}

pub fn read_history_sidecar(path: &Path) -> Result<Vec<JointEpoch>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Jointly train encoder, decoder and fusion head against a frozen base
/// model. Explanations are matched to samples by id; 10% of the samples are
/// held out (seeded) and the parameters with the best joint validation loss
/// are restored. Per-epoch records keep both loss terms separately.
pub fn train_joint(
    dataset: &LabeledDataset,
    explanations: &[AttributionMap],
    model: &BaseClassifier,
    weights: JointLossWeights,
    config: &EdStrategyConfig,
) -> Result<JointArtifacts> {
    weights.validate()?;
    config.train.validate()?;
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
    if dataset.len() < 2 {
        return Err(Error::Config(
            "joint training needs at least two samples".into(),
        ));
    }
    if dataset.feature_shape() != model.input_shape().as_slice() {
        return Err(Error::Config(format!(
            "dataset shape {:?} does not match model input {:?}",
            dataset.feature_shape(),
            model.input_shape()
        )));
    }
    let hash_before = model.checkpoint_hash();
    let seed = config.train.seed;

    // Align explanations, flatten them, and precompute the frozen base
    // model's outputs once — they never change during training.
    let aligned = align_by_id(dataset, explanations)?;
    let input_len: usize = dataset.feature_shape().iter().product();
    let mut targets = Vec::with_capacity(aligned.len());
    for map in &aligned {
        let e = map.expand();
        if e.len() != input_len {
            return Err(Error::Consistency(format!(
                "explanation for sample {} has {} values, samples have {}",
                map.sample_id,
                e.len(),
                input_len
            )));
        }
        if !e.all_finite() {
            return Err(Error::Input(format!(
                "explanation for sample {} contains non-finite values",
                map.sample_id
            )));
        }
        targets.push(e.into_data());
    }
    let mut base_logits = Vec::with_capacity(dataset.len());
    for sample in &dataset.samples {
        base_logits.push(model.predict_logits(&sample.features)?);
    }

    let k = model.num_classes();
    let latent = config.latent_dim;
    let mut ed = ExplanationEncoderDecoder::new(dataset.feature_shape(), latent, seed)?;
    let mut fusion = FusionClassifier::new(
        latent,
        k,
        config.logit_mode,
        config.fusion_hidden,
        derived_seed(seed, "encoder-decoder:fusion"),
    )?;
    let init_digests = JointInitDigests {
        encoder: ed.encoder_digest(),
        decoder: ed.decoder_digest(),
        fusion: fusion.param_digest(),
    };
    // The mode-transformed base outputs the fusion head actually consumes.
    let fused_tail: Vec<Vec<f32>> = base_logits
        .iter()
        .map(|m| {
            let fused = fusion.fused_input(&vec![0.0; latent], m)?;
            Ok(fused[latent..].to_vec())
        })
        .collect::<Result<_>>()?;

    let (train_idx, val_idx) = holdout_split(
        dataset.len(),
        0.1,
        derived_seed(seed, "encoder-decoder:holdout"),
    );

    let adam = |len: usize| {
        Adam::new(
            config.train.learning_rate,
            config.train.decay1,
            config.train.decay2,
            config.train.epsilon,
            len,
        )
    };
    let mut enc_opt = adam(ed.encoder.param_count());
    let mut dec_opt = adam(ed.decoder.param_count());
    let mut fus_opt = adam(fusion.mlp().param_count());

    let mut enc_scratch = ed.encoder.scratch();
    let mut dec_scratch = ed.decoder.scratch();
    let mut fus_scratch = fusion.mlp().scratch();
    let mut enc_grads = vec![0.0f32; ed.encoder.param_count()];
    let mut dec_grads = vec![0.0f32; ed.decoder.param_count()];
    let mut fus_grads = vec![0.0f32; fusion.mlp().param_count()];
    let mut grad_recon = vec![0.0f32; input_len];
    let mut grad_ce = vec![0.0f32; k];
    let mut grad_fused = vec![0.0f32; latent + k];
    let mut grad_z = vec![0.0f32; latent];
    let mut grad_z_dec = vec![0.0f32; latent];
    let mut fused = vec![0.0f32; latent + k];

    let (lr, lc) = (weights.lambda_recon, weights.lambda_cls);
    let mut best: Option<(f64, Vec<f32>, Vec<f32>, Vec<f32>)> = None;
    let mut stale_epochs = 0usize;
    let mut history = Vec::new();

    // Shared forward pass: runs all three modules on sample `i` and returns
    // (raw recon loss, raw cls loss, hit). Scratches stay valid for a
    // subsequent backward.
    macro_rules! forward_sample {
        ($i:expr) => {{
            let i = $i;
            let z = ed
                .encoder
                .forward(dataset.samples[i].features.data(), &mut enc_scratch);
            fused[..latent].copy_from_slice(z);
            fused[latent..].copy_from_slice(&fused_tail[i]);
            let recon = ed.decoder.forward(&fused[..latent], &mut dec_scratch);
            let recon_loss = mse(recon, &targets[i]);
            let out = fusion.mlp().forward(&fused, &mut fus_scratch);
            let hit = nn::argmax(out) == dataset.labels[i];
            let cls_loss = nn::softmax_cross_entropy(out, dataset.labels[i], &mut grad_ce) as f64;
            (recon_loss, cls_loss, hit)
        }};
    }

    for epoch in 0..config.train.epochs {
        let mut order = train_idx.clone();
        let mut rng =
            rng_from_seed(derived_seed(seed, &format!("encoder-decoder:epoch:{epoch}")));
        shuffle(&mut order, &mut rng);

        let mut epoch_recon = 0.0f64;
        let mut epoch_cls = 0.0f64;
        let mut epoch_total = 0.0f64;
        for (batch_idx, batch) in order.chunks(config.train.batch_size).enumerate() {
            enc_grads.fill(0.0);
            dec_grads.fill(0.0);
            fus_grads.fill(0.0);
            let mut batch_recon = 0.0f64;
            let mut batch_cls = 0.0f64;
            for &i in batch {
                let z = ed
                    .encoder
                    .forward(dataset.samples[i].features.data(), &mut enc_scratch);
                fused[..latent].copy_from_slice(z);
                fused[latent..].copy_from_slice(&fused_tail[i]);

                let recon = ed.decoder.forward(&fused[..latent], &mut dec_scratch);
                let recon_loss = mse(recon, &targets[i]);
                if lr > 0.0 {
                    let scale = lr * 2.0 / input_len as f32;
                    for (g, (&r, &t)) in
                        grad_recon.iter_mut().zip(recon.iter().zip(&targets[i]))
                    {
                        *g = scale * (r - t);
                    }
                }
                let out = fusion.mlp().forward(&fused, &mut fus_scratch);
                let cls_loss =
                    nn::softmax_cross_entropy(out, dataset.labels[i], &mut grad_ce) as f64;
                batch_recon += recon_loss;
                batch_cls += cls_loss;
                epoch_total += lr as f64 * recon_loss + lc as f64 * cls_loss;

                grad_z.fill(0.0);
                if lr > 0.0 {
                    ed.decoder.backward(
                        &mut dec_scratch,
                        &grad_recon,
                        Some(&mut dec_grads),
                        Some(&mut grad_z_dec),
                    );
                    for (g, &d) in grad_z.iter_mut().zip(&grad_z_dec) {
                        *g += d;
                    }
                }
                if lc > 0.0 {
                    for g in grad_ce.iter_mut() {
                        *g *= lc;
                    }
                    fusion.mlp().backward(
                        &mut fus_scratch,
                        &grad_ce,
                        Some(&mut fus_grads),
                        Some(&mut grad_fused),
                    );
                    for (g, &d) in grad_z.iter_mut().zip(&grad_fused[..latent]) {
                        *g += d;
                    }
                }
                ed.encoder
                    .backward(&mut enc_scratch, &grad_z, Some(&mut enc_grads), None);
            }
            let n = batch.len() as f64;
            batch_recon /= n;
            batch_cls /= n;
            if !batch_recon.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                    message: format!("reconstruction term diverged to {batch_recon}"),
                });
            }
            if !batch_cls.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                    message: format!("classification term diverged to {batch_cls}"),
                });
            }
            epoch_recon += batch_recon * n;
            epoch_cls += batch_cls * n;
            let inv = 1.0 / batch.len() as f32;
            for g in enc_grads.iter_mut() {
                *g *= inv;
            }
            enc_opt.step(&mut ed.encoder.params, &enc_grads);
            if lr > 0.0 {
                for g in dec_grads.iter_mut() {
                    *g *= inv;
                }
                dec_opt.step(&mut ed.decoder.params, &dec_grads);
            }
            if lc > 0.0 {
                for g in fus_grads.iter_mut() {
                    *g *= inv;
                }
                fus_opt.step(&mut fusion.mlp_mut().params, &fus_grads);
            }
        }

        let mut val_recon = 0.0f64;
        let mut val_cls = 0.0f64;
        let mut val_hits = 0usize;
        for &i in &val_idx {
            let (r, c, hit) = forward_sample!(i);
            val_recon += r;
            val_cls += c;
            val_hits += hit as usize;
        }
        val_recon /= val_idx.len() as f64;
        val_cls /= val_idx.len() as f64;
        let val_total = lr as f64 * val_recon + lc as f64 * val_cls;

        let n_train = train_idx.len() as f64;
        history.push(JointEpoch {
            epoch,
            recon_loss: epoch_recon / n_train,
            cls_loss: epoch_cls / n_train,
            total_loss: epoch_total / n_train,
            val_recon,
            val_cls,
            val_total,
            val_accuracy: val_hits as f64 / val_idx.len() as f64,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _, _)| val_total < *b);
        if improved {
            best = Some((
                val_total,
                ed.encoder.params.clone(),
                ed.decoder.params.clone(),
                fusion.mlp().params.clone(),
            ));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.train.early_stop_patience {
                break;
            }
        }
    }

    if let Some((_, enc, dec, fus)) = best {
        ed.encoder.params = enc;
        ed.decoder.params = dec;
        fusion.mlp_mut().params = fus;
    }
    debug_assert_eq!(model.checkpoint_hash(), hash_before);
    Ok(JointArtifacts {
        encoder_decoder: ed,
        fusion,
        history,
        init_digests,
    })
}

/// Wire a jointly trained encoder-decoder and fusion head to their frozen
/// base model. Inference never touches attribution computation — the
/// explanation comes from the decoder alone.
pub fn assemble_ed_pipeline(
    model: &BaseClassifier,
    ed: &ExplanationEncoderDecoder,
    fusion: &FusionClassifier,
) -> Result<ImpactxPredictor> {
    ImpactxPredictor::new(
        model.clone(),
        ed.encoder.clone(),
        ed.decoder.clone(),
        fusion.clone(),
    )
}

/// Everything an end-to-end strategy run produces.
#[derive(Debug, Clone)]
pub struct EdStrategyArtifacts {
    pub encoder_decoder: ExplanationEncoderDecoder,
    pub fusion: FusionClassifier,
    pub predictor: ImpactxPredictor,
    pub history: Vec<JointEpoch>,
    pub init_digests: JointInitDigests,
}

/// Run the joint strategy end to end: train the three modules and assemble
/// the predictor.
pub fn run_encoder_decoder_strategy(
    model: &BaseClassifier,
    dataset: &LabeledDataset,
    explanations: &[AttributionMap],
    config: &EdStrategyConfig,
) -> Result<EdStrategyArtifacts> {
    let artifacts = train_joint(dataset, explanations, model, config.weights, config)?;
    let predictor = assemble_ed_pipeline(model, &artifacts.encoder_decoder, &artifacts.fusion)?;
    Ok(EdStrategyArtifacts {
        encoder_decoder: artifacts.encoder_decoder,
        fusion: artifacts.fusion,
        predictor,
        history: artifacts.history,
        init_digests: artifacts.init_digests,
    })
}
