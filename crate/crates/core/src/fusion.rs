//! Fusion head combining a latent attribution code with the base model's
//! output, and the assembled predictor that serves fused predictions.
//!
//! The fusion classifier `C` consumes `concat(z, m)` — latent code first,
//! base-model output second, an ordering fixed here and recorded in
//! checkpoints — and produces a distribution over the same `K` classes the
//! base model was trained on. Whether `m` enters as raw logits or as softmax
//! probabilities is controlled by [`LogitMode`]; raw logits are the default
//! because the softmax discards scale information the head could use.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{read_checkpoint_file, write_checkpoint_file};
use crate::error::{Error, Result};
use crate::model::{BaseClassifier, EpochStats, TrainConfig};
use crate::nn::{self, Adam, ConvNet, ConvNetScratch, Mlp, MlpScratch};
use crate::tensor::Tensor;
use crate::util::{derived_seed, digest_f32, holdout_split, rng_from_seed, shuffle};

/// Default hidden width of the fusion head.
pub const FUSION_HIDDEN: usize = 64;

/// Negative slope shared by every leaky-ReLU dense stack in this crate.
pub const LEAK: f32 = 0.01;

/// Which form of the base model's output is concatenated with the latent
/// code. Must match between training and prediction; persisted in the
/// checkpoint header so a loaded head cannot be driven inconsistently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    RawLogits,
    SoftmaxProbs,
}

impl Default for LogitMode {
    fn default() -> Self {
        LogitMode::RawLogits
    }
}

impl LogitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LogitMode::RawLogits => "raw_logits",
            LogitMode::SoftmaxProbs => "softmax_probs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw_logits" => Ok(LogitMode::RawLogits),
            "softmax_probs" => Ok(LogitMode::SoftmaxProbs),
            other => Err(Error::Config(format!(
                "unknown logit mode {other:?}; expected raw_logits or softmax_probs"
            ))),
        }
    }
}

/// Dense head mapping `concat(z, m)` to class scores. One 64-unit hidden
/// layer by default; pass `hidden: None` to [`FusionClassifier::new`] for a
/// purely linear head (ablation).
#[derive(Debug, Clone)]
pub struct FusionClassifier {
    mlp: Mlp,
    latent_dim: usize,
    num_classes: usize,
    logit_mode: LogitMode,
    history: Vec<EpochStats>,
    best_val_accuracy: f64,
}

impl FusionClassifier {
    pub fn new(
        latent_dim: usize,
        num_classes: usize,
        logit_mode: LogitMode,
        hidden: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "fusion head needs at least two classes, got {num_classes}"
            )));
        }
        let input = latent_dim + num_classes;
        let sizes = match hidden {
            Some(h) => vec![input, h, num_classes],
            None => vec![input, num_classes],
        };
        let mut rng = rng_from_seed(derived_seed(seed, "fusion:init"));
        Ok(FusionClassifier {
            mlp: Mlp::new(&sizes, LEAK, &mut rng)?,
            latent_dim,
            num_classes,
            logit_mode,
            history: Vec::new(),
            best_val_accuracy: 0.0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn logit_mode(&self) -> LogitMode {
        self.logit_mode
    }

    /// Layer widths of the underlying dense stack, input first.
    pub fn layer_sizes(&self) -> &[usize] {
        self.mlp.sizes()
    }

    /// Raw parameter vector (read/write); layout follows [`Mlp`].
    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.mlp.params
    }

    /// Underlying dense stack, for trainers that drive the head inside a
    /// larger joint loss.
    pub(crate) fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub(crate) fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn params(&self) -> &[f32] {
        &self.mlp.params
    }

    pub fn param_digest(&self) -> String {
        digest_f32(&self.mlp.params)
    }

    /// Per-epoch record of the most recent training run (not persisted).
    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    /// Validation accuracy of the restored (best) parameters from the most
    /// recent [`train_fusion`] run.
    pub fn best_val_accuracy(&self) -> f64 {
        self.best_val_accuracy
    }

    /// Build the head's input from the latent code and the base model's raw
    /// logits, applying the configured [`LogitMode`]. All call sites —
    /// training, fine-tuning, prediction — go through here, so the mode can
    /// never be applied twice or not at all.
    pub fn fused_input(&self, z: &[f32], m_logits: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.latent_dim {
            return Err(Error::Input(format!(
                "latent code has {} dims, head expects {}",
                z.len(),
                self.latent_dim
            )));
        }
        if m_logits.len() != self.num_classes {
            return Err(Error::Input(format!(
                "base output has {} entries, head expects {}",
                m_logits.len(),
                self.num_classes
            )));
        }
        let mut fused = Vec::with_capacity(self.latent_dim + self.num_classes);
        fused.extend_from_slice(z);
        match self.logit_mode {
            LogitMode::RawLogits => fused.extend_from_slice(m_logits),
            LogitMode::SoftmaxProbs => {
                let mut probs = vec![0.0f32; self.num_classes];
                nn::softmax_stable(m_logits, &mut probs);
                fused.extend_from_slice(&probs);
            }
        }
        Ok(fused)
    }

    /// Predict from a latent code and the base model's raw logits. Returns
    /// the argmax class (lowest index on ties, matching the base model's
    /// contract) and the stabilized-softmax distribution.
    pub fn fuse_predict(&self, z: &[f32], m_logits: &[f32]) -> Result<(usize, Vec<f32>)> {
        let fused = self.fused_input(z, m_logits)?;
        let mut scratch = self.mlp.scratch();
        let out = self.mlp.forward(&fused, &mut scratch);
        let mut probs = vec![0.0f32; self.num_classes];
        nn::softmax_stable(out, &mut probs);
        Ok((nn::argmax(&probs), probs))
    }

    /// Continue training the current parameters for a fixed number of epochs
    /// without validation-based restore. Used to adapt a head trained on
    /// encoder targets to the slightly different codes a distilled encoder
    /// actually produces. Returns the final mean training loss.
    pub fn fine_tune(
        &mut self,
        latents: &[Vec<f32>],
        logits: &[Vec<f32>],
        labels: &[usize],
        epochs: usize,
        config: &TrainConfig,
    ) -> Result<f64> {
        config.validate()?;
        let inputs = self.check_pairs(latents, logits, labels, false)?;
        let mut opt = Adam::new(
            config.learning_rate,
            config.decay1,
            config.decay2,
            config.epsilon,
            self.mlp.param_count(),
        );
        let mut scratch = self.mlp.scratch();
        let mut grads = vec![0.0f32; self.mlp.param_count()];
        let mut grad_out = vec![0.0f32; self.num_classes];
        let mut last_loss = 0.0f64;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..inputs.len()).collect();
            let mut rng =
                rng_from_seed(derived_seed(config.seed, &format!("fusion:finetune:{epoch}")));
            shuffle(&mut order, &mut rng);
            let mut epoch_loss = 0.0f64;
            for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
                let loss = self.train_batch(
                    batch,
                    &inputs,
                    labels,
                    &mut scratch,
                    &mut grads,
                    &mut grad_out,
                    &mut opt,
                    &mut 0,
                )?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        batch: batch_idx,
                        message: format!("fine-tune batch loss {loss} is not finite"),
                    });
                }
                epoch_loss += loss * batch.len() as f64;
            }
            last_loss = epoch_loss / inputs.len() as f64;
        }
        Ok(last_loss)
    }

    /// Validate pair dimensions and (optionally) class coverage, returning
    /// the fused input vectors.
    fn check_pairs(
        &self,
        latents: &[Vec<f32>],
        logits: &[Vec<f32>],
        labels: &[usize],
        require_all_classes: bool,
    ) -> Result<Vec<Vec<f32>>> {
        if latents.len() != logits.len() || latents.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "pair counts disagree: {} latents, {} outputs, {} labels",
                latents.len(),
                logits.len(),
                labels.len()
            )));
        }
        if latents.is_empty() {
            return Err(Error::Config("no training pairs supplied".into()));
        }
        let mut seen = vec![false; self.num_classes];
        for &label in labels {
            if label >= self.num_classes {
                return Err(Error::Input(format!(
                    "label {label} out of range for {} classes",
                    self.num_classes
                )));
            }
            seen[label] = true;
        }
        if require_all_classes {
            let covered = seen.iter().filter(|&&s| s).count();
            if covered < self.num_classes {
                return Err(Error::Config(format!(
                    "training pairs cover {covered} of {} classes; every class must appear",
                    self.num_classes
                )));
            }
        }
        let mut inputs = Vec::with_capacity(latents.len());
        for (z, m) in latents.iter().zip(logits) {
            let fused = self.fused_input(z, m)?;
            if fused.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("training pair contains non-finite values".into()));
            }
            inputs.push(fused);
        }
        Ok(inputs)
    }

    /// One optimizer step over `batch`; returns the mean batch loss and adds
    /// classification hits to `hits`.
    #[allow(clippy::too_many_arguments)]
    fn train_batch(
        &mut self,
        batch: &[usize],
        inputs: &[Vec<f32>],
        labels: &[usize],
        scratch: &mut MlpScratch,
        grads: &mut [f32],
        grad_out: &mut [f32],
        opt: &mut Adam,
        hits: &mut usize,
    ) -> Result<f64> {
        grads.fill(0.0);
        let mut batch_loss = 0.0f64;
        for &i in batch {
            let out = self.mlp.forward(&inputs[i], scratch);
            if nn::argmax(out) == labels[i] {
                *hits += 1;
            }
            batch_loss += nn::softmax_cross_entropy(out, labels[i], grad_out) as f64;
            self.mlp.backward(scratch, grad_out, Some(grads), None);
        }
        let inv = 1.0 / batch.len() as f32;
        for g in grads.iter_mut() {
            *g *= inv;
        }
        opt.step(&mut self.mlp.params, grads);
        Ok(batch_loss / batch.len() as f64)
    }

    /// Mean cross-entropy and accuracy over the given pair indices.
    fn evaluate(
        &self,
        indices: &[usize],
        inputs: &[Vec<f32>],
        labels: &[usize],
        scratch: &mut MlpScratch,
    ) -> (f64, f64) {
        let mut loss = 0.0f64;
        let mut hits = 0usize;
        let mut grad = vec![0.0f32; self.num_classes];
        for &i in indices {
            let out = self.mlp.forward(&inputs[i], scratch);
            if nn::argmax(out) == labels[i] {
                hits += 1;
            }
            loss += nn::softmax_cross_entropy(out, labels[i], &mut grad) as f64;
        }
        (loss / indices.len() as f64, hits as f64 / indices.len() as f64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "fusion_classifier",
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
            "logit_mode": self.logit_mode.as_str(),
            "layer_sizes": self.mlp.sizes(),
            "concat_order": "latent,base_output",
            "param_digest": self.param_digest(),
        });
        write_checkpoint_file(path, &header, &self.mlp.params)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint_file(path)?;
        let kind = header["kind"].as_str().unwrap_or_default();
        if kind != "fusion_classifier" {
            return Err(Error::Format(format!(
                "checkpoint holds a {kind:?}, expected a fusion_classifier"
            )));
        }
        let latent_dim = header["latent_dim"].as_u64().unwrap_or(0) as usize;
        let num_classes = header["num_classes"].as_u64().unwrap_or(0) as usize;
        let logit_mode = LogitMode::parse(header["logit_mode"].as_str().unwrap_or_default())?;
        let sizes: Vec<usize> = header["layer_sizes"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        if sizes.len() < 2
            || sizes[0] != latent_dim + num_classes
            || *sizes.last().unwrap() != num_classes
        {
            return Err(Error::Format(format!(
                "layer sizes {sizes:?} do not match latent_dim {latent_dim} + {num_classes} classes"
            )));
        }
        let hidden = if sizes.len() == 2 { None } else { Some(sizes[1]) };
        let mut head = FusionClassifier::new(latent_dim, num_classes, logit_mode, hidden, 0)?;
        if head.mlp.sizes() != sizes.as_slice() {
            return Err(Error::Format(format!(
                "unsupported fusion layer stack {sizes:?}"
            )));
        }
        if params.len() != head.mlp.param_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, head needs {}",
                params.len(),
                head.mlp.param_count()
            )));
        }
        head.mlp.params = params;
        let recorded = header["param_digest"].as_str().unwrap_or_default();
        let actual = head.param_digest();
        if recorded != actual {
            return Err(Error::Integrity(format!(
                "parameter digest mismatch: header says {recorded}, payload hashes to {actual}"
            )));
        }
        Ok(head)
    }
}

/// The train/holdout index split used by [`train_fusion`] for a pair set of
/// size `n` under the given seed. Exposed so callers can evaluate oracle
/// baselines on the exact same holdout side.
pub fn fusion_holdout(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    holdout_split(n, 0.1, derived_seed(seed, "fusion:holdout"))
}

/// Train a fusion head on (latent code, base output, label) triples.
///
/// `latents` and `logits` are aligned with `labels`; the base output is
/// always passed as raw logits and transformed per `logit_mode` internally.
/// 10% of the pairs are held out (seeded) for validation; the parameters
/// with the best validation loss are restored before returning. Every class
/// must appear at least once in `labels`.
pub fn train_fusion(
    latents: &[Vec<f32>],
    logits: &[Vec<f32>],
    labels: &[usize],
    logit_mode: LogitMode,
    hidden: Option<usize>,
    config: &TrainConfig,
) -> Result<FusionClassifier> {
    config.validate()?;
    if latents.len() < 2 {
        return Err(Error::Config(format!(
            "fusion training needs at least two pairs, got {}",
            latents.len()
        )));
    }
    let latent_dim = latents[0].len();
    let num_classes = logits.first().map_or(0, |m| m.len());
    let mut head = FusionClassifier::new(latent_dim, num_classes, logit_mode, hidden, config.seed)?;
    for z in latents {
        if z.len() != latent_dim {
            return Err(Error::Consistency(format!(
                "latent codes have mixed dimensions: {} and {}",
                latent_dim,
                z.len()
            )));
        }
    }
    for m in logits {
        if m.len() != num_classes {
            return Err(Error::Consistency(format!(
                "base outputs have mixed dimensions: {} and {}",
                num_classes,
                m.len()
            )));
        }
    }
    let inputs = head.check_pairs(latents, logits, labels, true)?;
    let (train_idx, val_idx) = fusion_holdout(inputs.len(), config.seed);

    let mut opt = Adam::new(
        config.learning_rate,
        config.decay1,
        config.decay2,
        config.epsilon,
        head.mlp.param_count(),
    );
    let mut scratch = head.mlp.scratch();
    let mut grads = vec![0.0f32; head.mlp.param_count()];
    let mut grad_out = vec![0.0f32; num_classes];
    let mut best: Option<(f64, f64, Vec<f32>)> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..config.epochs {
        let mut order = train_idx.clone();
        let mut rng = rng_from_seed(derived_seed(config.seed, &format!("fusion:epoch:{epoch}")));
        shuffle(&mut order, &mut rng);

        let mut epoch_loss = 0.0f64;
        let mut epoch_hits = 0usize;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let loss = head.train_batch(
                batch,
                &inputs,
                labels,
                &mut scratch,
                &mut grads,
                &mut grad_out,
                &mut opt,
                &mut epoch_hits,
            )?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_idx,
                    message: format!("batch loss {loss} is not finite"),
                });
            }
            epoch_loss += loss * batch.len() as f64;
        }

        let (val_loss, val_acc) = head.evaluate(&val_idx, &inputs, labels, &mut scratch);
        head.history.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            train_accuracy: epoch_hits as f64 / train_idx.len() as f64,
            val_loss,
            val_accuracy: val_acc,
        });

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_loss < *b);
        if improved {
            best = Some((val_loss, val_acc, head.mlp.params.clone()));
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.early_stop_patience {
                break;
            }
        }
    }

    if let Some((_, acc, params)) = best {
        head.mlp.params = params;
        head.best_val_accuracy = acc;
    }
    Ok(head)
}

// ---------------------------------------------------------------------------
// Assembled predictor
// ---------------------------------------------------------------------------

/// Everything one fused prediction produces: the fused decision plus the
/// frozen base model's own view of the sample and the latent code that drove
/// the fusion.
#[derive(Debug, Clone)]
pub struct FusedPrediction {
    pub class: usize,
    pub probabilities: Vec<f32>,
    pub base_class: usize,
    pub base_logits: Vec<f32>,
    pub latent: Vec<f32>,
}

/// Reusable buffers for [`ImpactxPredictor`] inference.
pub struct PredictorScratch {
    base: ConvNetScratch,
    encoder: ConvNetScratch,
    decoder: MlpScratch,
}

/// A frozen base classifier, an input-to-latent encoder, a latent-to-
/// explanation decoder, and a fusion head, assembled for inference.
///
/// Prediction runs exactly two network forwards (encoder and base model)
/// plus the fusion head; no attribution computation happens here — the
/// explanation signal lives entirely in the distilled encoder weights.
#[derive(Debug, Clone)]
pub struct ImpactxPredictor {
    model: BaseClassifier,
    encoder: ConvNet,
    decoder: Mlp,
    fusion: FusionClassifier,
}

impl ImpactxPredictor {
    /// Assemble a predictor, checking that every interface lines up:
    /// encoder input ↔ model input, encoder output ↔ fusion latent width ↔
    /// decoder input, decoder output ↔ flattened explanation size, fusion
    /// classes ↔ model classes.
    pub fn new(
        model: BaseClassifier,
        encoder: ConvNet,
        decoder: Mlp,
        fusion: FusionClassifier,
    ) -> Result<Self> {
        let shape = model.input_shape();
        if [encoder.in_c, encoder.h, encoder.w] != shape {
            return Err(Error::Config(format!(
                "encoder expects {}×{}×{} inputs, base model {}×{}×{}",
                encoder.in_c, encoder.h, encoder.w, shape[0], shape[1], shape[2]
            )));
        }
        if encoder.out_dim != fusion.latent_dim() {
            return Err(Error::Config(format!(
                "encoder emits {} latent dims, fusion head expects {}",
                encoder.out_dim,
                fusion.latent_dim()
            )));
        }
        if decoder.input_dim() != encoder.out_dim {
            return Err(Error::Config(format!(
                "decoder consumes {} latent dims, encoder emits {}",
                decoder.input_dim(),
                encoder.out_dim
            )));
        }
        let input_len = shape.iter().product::<usize>();
        if decoder.output_dim() != input_len {
            return Err(Error::Config(format!(
                "decoder reconstructs {} values, explanations have {}",
                decoder.output_dim(),
                input_len
            )));
        }
        if fusion.num_classes() != model.num_classes() {
            return Err(Error::Config(format!(
                "fusion head has {} classes, base model {}",
                fusion.num_classes(),
                model.num_classes()
            )));
        }
        Ok(ImpactxPredictor {
            model,
            encoder,
            decoder,
            fusion,
        })
    }

    pub fn model(&self) -> &BaseClassifier {
        &self.model
    }

    pub fn fusion(&self) -> &FusionClassifier {
        &self.fusion
    }

    pub fn encoder(&self) -> &ConvNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn scratch(&self) -> PredictorScratch {
        PredictorScratch {
            base: self.model.scratch(),
            encoder: self.encoder.scratch(),
            decoder: self.decoder.scratch(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let shape = self.model.input_shape();
        if x.shape() != shape.as_slice() {
            return Err(Error::Input(format!(
                "sample shape {:?} does not match model input {:?}",
                x.shape(),
                shape
            )));
        }
        Ok(())
    }

    /// Fused prediction with reusable buffers; the hot path for evaluation
    /// loops.
    pub fn predict_into(&self, x: &Tensor, scratch: &mut PredictorScratch) -> Result<FusedPrediction> {
        self.check_input(x)?;
        let base_logits = self.model.logits_into(x.data(), &mut scratch.base).to_vec();
        let latent = self.encoder.forward(x.data(), &mut scratch.encoder).to_vec();
        let (class, probabilities) = self.fusion.fuse_predict(&latent, &base_logits)?;
        Ok(FusedPrediction {
            class,
            probabilities,
            base_class: nn::argmax(&base_logits),
            base_logits,
            latent,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<FusedPrediction> {
        let mut scratch = self.scratch();
        self.predict_into(x, &mut scratch)
    }

    /// Decode the sample's latent code back into explanation space. The
    /// result has the base model's input shape — one reconstructed
    /// attribution value per input position.
    pub fn reconstruct_explanation(&self, x: &Tensor) -> Result<Tensor> {
        let mut scratch = self.scratch();
        self.reconstruct_into(x, &mut scratch)
    }

    pub fn reconstruct_into(&self, x: &Tensor, scratch: &mut PredictorScratch) -> Result<Tensor> {
        self.check_input(x)?;
        let latent = self.encoder.forward(x.data(), &mut scratch.encoder).to_vec();
        let recon = self.decoder.forward(&latent, &mut scratch.decoder);
        Tensor::from_vec(&self.model.input_shape(), recon.to_vec())
    }
}
