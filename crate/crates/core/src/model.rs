//! The pre-trained base classifier M: a small convolutional network with a
//! generic trainer, checkpointing, logit/softmax prediction and class-score
//! gradients with respect to the input.
//!
//! Once training finishes the model is frozen; nothing downstream —
//! explanation, distillation, evaluation — can mutate its parameters, and
//! `checkpoint_hash` witnesses that.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{read_checkpoint_file, write_checkpoint_file};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, ConvNet, ConvNetScratch};
use crate::tensor::Tensor;
use crate::util::{derived_seed, digest_f32, rng_from_seed, shuffle};

/// Channel widths of the two convolutional stages.
pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;

/// Hyperparameters for [`BaseClassifier::pretrain`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub decay1: f32,
    pub decay2: f32,
    pub epsilon: f32,
    pub seed: u64,
    pub early_stop_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            decay1: 0.9,
            decay2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            early_stop_patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config(
                "epochs, batch_size and early_stop_patience must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.epsilon > 0.0) {
            return Err(Error::Config(
                "learning_rate and epsilon must be positive".into(),
            ));
        }
        for (name, v) in [("decay1", self.decay1), ("decay2", self.decay2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

/// One epoch of the training-history record attached to a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// The frozen classifier whose predictions are to be improved.
#[derive(Debug, Clone)]
pub struct BaseClassifier {
    net: ConvNet,
    num_classes: usize,
    frozen: bool,
    history: Vec<EpochStats>,
}

impl BaseClassifier {
    /// Fresh unfrozen model with seeded initialization. `shape` is the
    /// per-sample feature shape `(channels, height, width)`.
    pub fn new(shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::Config(format!(
                "expected (channels, height, width) input shape, got {shape:?}"
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least two classes, got {num_classes}"
            )));
        }
        let mut rng = rng_from_seed(derived_seed(seed, "base-model:init"));
        let net = ConvNet::new(
            shape[0],
            shape[1],
            shape[2],
            CONV1_FILTERS,
            CONV2_FILTERS,
            num_classes,
            &mut rng,
        )?;
        Ok(BaseClassifier {
            net,
            num_classes,
            frozen: false,
            history: Vec::new(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.net.in_c, self.net.h, self.net.w]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    /// Content digest of the parameters; changes iff the parameters change.
    pub fn checkpoint_hash(&self) -> String {
        digest_f32(&self.net.params)
    }

    /// Layer list used in checkpoint headers and manifests.
    pub fn architecture(&self) -> serde_json::Value {
        json!({
            "input": [self.net.in_c, self.net.h, self.net.w],
            "layers": [
                format!("conv 3x3x{CONV1_FILTERS} same + relu"),
                "maxpool 2x2",
                format!("conv 3x3x{CONV2_FILTERS} same + relu"),
                "maxpool 2x2",
                format!("dense {}", self.num_classes),
            ],
        })
    }

    pub fn scratch(&self) -> ConvNetScratch {
        self.net.scratch()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.input_shape();
        if x.shape() != want {
            return Err(Error::Input(format!(
                "input shape {:?} does not match model shape {:?}",
                x.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Hot-path forward over a raw feature buffer, reusing caller scratch.
    /// The buffer length must equal the flattened input shape.
    pub fn logits_into<'s>(&self, features: &[f32], scratch: &'s mut ConvNetScratch) -> &'s [f32] {
        self.net.forward(features, scratch)
    }

    /// Unnormalized class scores m(x); pure function of (parameters, x).
    pub fn predict_logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        self.check_input(x)?;
        let mut scratch = self.net.scratch();
        Ok(self.net.forward(x.data(), &mut scratch).to_vec())
    }

    /// Predicted class and stabilized softmax probabilities. Argmax ties
    /// break toward the lowest index.
    pub fn predict_label(&self, x: &Tensor) -> Result<(usize, Vec<f32>)> {
        let logits = self.predict_logits(x)?;
        let mut probs = vec![0.0f32; self.num_classes];
        nn::softmax_stable(&logits, &mut probs);
        Ok((nn::argmax(&logits), probs))
    }

    /// Gradient of the pre-softmax logit of `target_class` with respect to
    /// the input features, shaped like `x`.
    pub fn class_score_gradient(&self, x: &Tensor, target_class: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if target_class >= self.num_classes {
            return Err(Error::Input(format!(
                "target class {target_class} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut scratch = self.net.scratch();
        self.net.forward(x.data(), &mut scratch);
        let mut grad_out = vec![0.0f32; self.num_classes];
        grad_out[target_class] = 1.0;
        let mut grad_input = vec![0.0f32; self.net.input_len()];
        self.net
            .backward(&mut scratch, &grad_out, None, Some(&mut grad_input));
        Tensor::from_vec(x.shape(), grad_input)
    }

    /// Scratch-reusing variant of [`Self::class_score_gradient`] for the
    /// attribution hot path; writes into `grad_input`.
    pub fn class_score_gradient_into(
        &self,
        features: &[f32],
        target_class: usize,
        scratch: &mut ConvNetScratch,
        grad_input: &mut [f32],
    ) {
        self.net.forward(features, scratch);
        let mut grad_out = vec![0.0f32; self.num_classes];
        grad_out[target_class] = 1.0;
        self.net.backward(scratch, &grad_out, None, Some(grad_input));
    }

    /// Trains a fresh model with minibatch adaptive-moment descent on the
    /// cross-entropy of `softmax(logits)`, restores the best-validation-loss
    /// parameters, and returns the model frozen with its history attached.
    pub fn pretrain(
        train: &LabeledDataset,
        val: &LabeledDataset,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation sets must be nonempty".into()));
        }
        if train.feature_shape() != val.feature_shape() {
            return Err(Error::Config(format!(
                "train shape {:?} != val shape {:?}",
                train.feature_shape(),
                val.feature_shape()
            )));
        }
        if train.num_classes != val.num_classes {
            return Err(Error::Config(format!(
                "train has {} classes, val has {}",
                train.num_classes, val.num_classes
            )));
        }
        let mut model = BaseClassifier::new(train.feature_shape(), train.num_classes, config.seed)?;
        let mut opt = Adam::new(
            config.learning_rate,
            config.decay1,
            config.decay2,
            config.epsilon,
            model.net.param_count(),
        );
        let mut scratch = model.net.scratch();
        let mut grads = vec![0.0f32; model.net.param_count()];
        let mut grad_out = vec![0.0f32; model.num_classes];
        let mut best: Option<(f64, Vec<f32>)> = None;
        let mut stale_epochs = 0usize;

        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng =
                rng_from_seed(derived_seed(config.seed, &format!("pretrain:epoch:{epoch}")));
            shuffle(&mut order, &mut rng);

            let mut epoch_loss = 0.0f64;
            let mut epoch_hits = 0usize;
            for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
                grads.fill(0.0);
                let mut batch_loss = 0.0f64;
                for &i in batch {
                    let logits = model
                        .net
                        .forward(train.samples[i].features.data(), &mut scratch);
                    if nn::argmax(logits) == train.labels[i] {
                        epoch_hits += 1;
                    }
                    let loss = nn::softmax_cross_entropy(logits, train.labels[i], &mut grad_out);
                    batch_loss += loss as f64;
                    model
                        .net
                        .backward(&mut scratch, &grad_out, Some(&mut grads), None);
                }
                let inv = 1.0 / batch.len() as f32;
                for g in &mut grads {
                    *g *= inv;
                }
                batch_loss /= batch.len() as f64;
                if !batch_loss.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        batch: batch_idx,
                        message: format!("batch loss {batch_loss} is not finite"),
                    });
                }
                epoch_loss += batch_loss * batch.len() as f64;
                opt.step(&mut model.net.params, &grads);
            }

            let (val_loss, val_acc) = model.evaluate_loss(val, &mut scratch);
            let stats = EpochStats {
                epoch,
                train_loss: epoch_loss / train.len() as f64,
                train_accuracy: epoch_hits as f64 / train.len() as f64,
                val_loss,
                val_accuracy: val_acc,
            };
            model.history.push(stats);

            let improved = best.as_ref().map_or(true, |(b, _)| val_loss < *b);
            if improved {
                best = Some((val_loss, model.net.params.clone()));
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= config.early_stop_patience {
                    break;
                }
            }
        }

        if let Some((_, params)) = best {
            model.net.params = params;
        }
        model.frozen = true;
        Ok(model)
    }

    /// Mean cross-entropy loss and accuracy over a labeled set.
    pub fn evaluate_loss(
        &self,
        data: &LabeledDataset,
        scratch: &mut ConvNetScratch,
    ) -> (f64, f64) {
        let mut loss = 0.0f64;
        let mut hits = 0usize;
        let mut grad = vec![0.0f32; self.num_classes];
        for (sample, &label) in data.samples.iter().zip(&data.labels) {
            let logits = self.net.forward(sample.features.data(), scratch);
            if nn::argmax(logits) == label {
                hits += 1;
            }
            loss += nn::softmax_cross_entropy(logits, label, &mut grad) as f64;
        }
        (loss / data.len() as f64, hits as f64 / data.len() as f64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let header = json!({
            "kind": "base-classifier",
            "architecture": self.architecture(),
            "num_classes": self.num_classes,
            "frozen": self.frozen,
            "param_digest": self.checkpoint_hash(),
        });
        write_checkpoint_file(path, &header, &self.net.params)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (header, params) = read_checkpoint_file(path)?;
        let kind = header["kind"].as_str().unwrap_or_default();
        if kind != "base-classifier" {
            return Err(Error::Format(format!(
                "checkpoint holds a {kind:?}, expected a base-classifier"
            )));
        }
        let input: Vec<usize> = header["architecture"]["input"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        let num_classes = header["num_classes"].as_u64().unwrap_or(0) as usize;
        if input.len() != 3 || num_classes < 2 {
            return Err(Error::Format("checkpoint header missing shape or class count".into()));
        }
        let mut model = BaseClassifier::new(&input, num_classes, 0)?;
        if params.len() != model.net.param_count() {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                params.len(),
                model.net.param_count()
            )));
        }
        model.net.params = params;
        let recorded = header["param_digest"].as_str().unwrap_or_default();
        let actual = model.checkpoint_hash();
        if recorded != actual {
            return Err(Error::Integrity(format!(
                "parameter digest mismatch: header says {recorded}, payload hashes to {actual}"
            )));
        }
        model.frozen = header["frozen"].as_bool().unwrap_or(false);
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sample, SplitTag};

    fn tiny_dataset(n_per_class: usize, seed: u64) -> LabeledDataset {
        // Two linearly separable blobs on an 8×8 canvas: class 0 bright in
        // the top-left quadrant, class 1 bright in the bottom-right.
        let mut rng = rng_from_seed(seed);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2usize {
            for i in 0..n_per_class {
                let mut data = vec![0.05f32; 64];
                for y in 0..4 {
                    for x in 0..4 {
                        let (yy, xx) = if c == 0 { (y, x) } else { (y + 4, x + 4) };
                        data[yy * 8 + xx] = 0.8 + 0.2 * rand::Rng::gen_range(&mut rng, -0.5f32..0.5);
                    }
                }
                samples.push(Sample {
                    features: Tensor::from_vec(&[1, 8, 8], data).unwrap(),
                    id: (c * n_per_class + i) as u64,
                });
                labels.push(c);
            }
        }
        LabeledDataset::new(samples, labels, 2, SplitTag::Train).unwrap()
    }

    #[test]
    fn memorizes_a_single_repeated_point() {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            samples.push(Sample {
                features: Tensor::from_vec(&[1, 8, 8], vec![0.7; 64]).unwrap(),
                id: i,
            });
            labels.push(if i < 4 { 0 } else { 0 });
        }
        // A lone repeated point with one label plus a contrast point so the
        // set has two classes for the trainer's benefit.
        samples.push(Sample {
            features: Tensor::from_vec(&[1, 8, 8], vec![0.0; 64]).unwrap(),
            id: 99,
        });
        labels.push(1);
        samples.push(Sample {
            features: Tensor::from_vec(&[1, 8, 8], vec![0.01; 64]).unwrap(),
            id: 100,
        });
        labels.push(1);
        let ds = LabeledDataset::new(samples, labels, 2, SplitTag::Train).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            early_stop_patience: 50,
            ..TrainConfig::default()
        };
        let model = BaseClassifier::pretrain(&ds, &ds, &cfg).unwrap();
        let mut scratch = model.scratch();
        let (_, acc) = model.evaluate_loss(&ds, &mut scratch);
        assert_eq!(acc, 1.0, "failed to memorize {} points", ds.len());
    }

    #[test]
    fn linearly_separable_blobs_reach_high_val_accuracy() {
        let train = tiny_dataset(40, 1);
        let val = tiny_dataset(20, 2);
        // Oracle first: the two blobs are separable by the mean difference
        // of the two quadrants, so a nearest-centroid rule must be perfect.
        let centroid = |c: usize| -> Vec<f32> {
            let picks: Vec<&Sample> = train
                .samples
                .iter()
                .zip(&train.labels)
                .filter(|(_, &l)| l == c)
                .map(|(s, _)| s)
                .collect();
            let mut acc = vec![0.0f32; 64];
            for s in &picks {
                for (a, &v) in acc.iter_mut().zip(s.features.data()) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a /= picks.len() as f32);
            acc
        };
        let (c0, c1) = (centroid(0), centroid(1));
        let dist = |a: &[f32], b: &[f32]| -> f32 {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
        };
        let oracle_hits = val
            .samples
            .iter()
            .zip(&val.labels)
            .filter(|(s, &l)| {
                let d0 = dist(s.features.data(), &c0);
                let d1 = dist(s.features.data(), &c1);
                (if d0 <= d1 { 0 } else { 1 }) == l
            })
            .count();
        assert_eq!(oracle_hits, val.len(), "oracle says the data is not separable");

        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 7,
            ..TrainConfig::default()
        };
        let model = BaseClassifier::pretrain(&train, &val, &cfg).unwrap();
        assert!(model.is_frozen());
        let mut scratch = model.scratch();
        let (_, acc) = model.evaluate_loss(&val, &mut scratch);
        assert!(acc >= 0.99, "val accuracy {acc}");
        assert!(!model.history().is_empty());
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let train = tiny_dataset(10, 3);
        let val = tiny_dataset(4, 4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = BaseClassifier::pretrain(&train, &val, &cfg).unwrap();
        let b = BaseClassifier::pretrain(&train, &val, &cfg).unwrap();
        assert_eq!(a.checkpoint_hash(), b.checkpoint_hash());
    }

    #[test]
    fn logits_are_pure_and_sized() {
        let model = BaseClassifier::new(&[1, 8, 8], 3, 5).unwrap();
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| i as f32 / 64.0).collect()).unwrap();
        let a = model.predict_logits(&x).unwrap();
        let b = model.predict_logits(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        let bad = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(model.predict_logits(&bad), Err(Error::Input(_))));
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let mut model = BaseClassifier::new(&[1, 8, 8], 4, 9).unwrap();
        let n = model.net.param_count();
        let dense_params = 4 * CONV2_FILTERS * 4 + 4; // weights + biases of the head
        for p in &mut model.net.params[n - dense_params..] {
            *p = 0.0;
        }
        let x = Tensor::from_vec(&[1, 8, 8], vec![0.3; 64]).unwrap();
        assert_eq!(model.predict_logits(&x).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn predict_label_ties_break_low_and_probs_normalize() {
        let mut model = BaseClassifier::new(&[1, 8, 8], 3, 2).unwrap();
        for p in &mut model.net.params {
            *p = 0.0;
        }
        let x = Tensor::from_vec(&[1, 8, 8], vec![0.5; 64]).unwrap();
        let (class, probs) = model.predict_label(&x).unwrap();
        assert_eq!(class, 0);
        for p in &probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_is_linear_across_classes() {
        let model = BaseClassifier::new(&[1, 8, 8], 3, 13).unwrap();
        let x = Tensor::from_vec(&[1, 8, 8], (0..64).map(|i| (i as f32).sin().abs()).collect())
            .unwrap();
        let ga = model.class_score_gradient(&x, 0).unwrap();
        let gb = model.class_score_gradient(&x, 1).unwrap();
        // Gradient of (logit_a + logit_b): run backward with both outputs set.
        let mut scratch = model.scratch();
        model.net.forward(x.data(), &mut scratch);
        let grad_out = [1.0f32, 1.0, 0.0];
        let mut combined = vec![0.0f32; 64];
        model
            .net
            .backward(&mut scratch, &grad_out, None, Some(&mut combined));
        for ((a, b), c) in ga.data().iter().zip(gb.data()).zip(&combined) {
            assert!((a + b - c).abs() < 1e-5);
        }
        assert!(matches!(
            model.class_score_gradient(&x, 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let train = tiny_dataset(6, 20);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let model = BaseClassifier::pretrain(&train, &train, &cfg).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save_checkpoint(&path).unwrap();
        let loaded = BaseClassifier::load_checkpoint(&path).unwrap();
        assert_eq!(model.checkpoint_hash(), loaded.checkpoint_hash());
        assert!(loaded.is_frozen());
        let mut rng = rng_from_seed(77);
        for _ in 0..10 {
            let x = Tensor::from_vec(
                &[1, 8, 8],
                (0..64).map(|_| rand::Rng::gen_range(&mut rng, 0.0f32..1.0)).collect(),
            )
            .unwrap();
            assert_eq!(
                model.predict_logits(&x).unwrap(),
                loaded.predict_logits(&x).unwrap()
            );
        }
    }

    #[test]
    fn flipped_parameter_byte_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = BaseClassifier::new(&[1, 8, 8], 2, 3).unwrap();
        let path = dir.path().join("m.ckpt");
        model.save_checkpoint(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 3] ^= 0x40; // inside the parameter payload
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            BaseClassifier::load_checkpoint(&path),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn shape_mismatch_between_train_and_val_is_a_config_error() {
        let train = tiny_dataset(4, 1);
        let mut small = Vec::new();
        for i in 0..4u64 {
            small.push(Sample {
                features: Tensor::zeros(&[1, 4, 4]),
                id: i,
            });
        }
        let val = LabeledDataset::new(small, vec![0, 0, 1, 1], 2, SplitTag::Val).unwrap();
        assert!(matches!(
            BaseClassifier::pretrain(&train, &val, &TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }
}
