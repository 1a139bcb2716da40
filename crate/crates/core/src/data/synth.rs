//! Synthetic patch-pattern dataset generator.
//!
//! Each class owns one cell of a fixed spatial grid and a deterministic
//! pattern stamped into that cell. Distractor patterns borrowed from other
//! classes are added at `distractor_strength`, creating evidence a
//! capacity-limited classifier latches onto. Ground-truth masks mark the
//! true-class cell of every sample.

use rand::Rng;

use crate::data::{
    GroundTruthMask, GroundTruthMasks, LabeledDataset, Sample, SplitTag, UnlabeledDataset,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{derived_seed, rng_from_seed, shuffle};

/// Side of the patch grid; each class's pattern occupies one grid cell.
pub const PATCH_GRID_SIDE: usize = 4;

const BACKGROUND: f32 = 0.1;
const PATTERN_SCALE: f32 = 0.8;
/// Probability that a sample's distractor is the "companion" class
/// (class + 1 mod K) rather than a uniformly random other class.
const COMPANION_DISTRACTOR_PROB: f64 = 0.8;
/// Unlabeled evaluation samples generated per class, as a fraction of
/// `samples_per_class`.
const UNLABELED_RATIO: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct PatchDatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub distractor_strength: f64,
    pub label_noise: f64,
    pub seed: u64,
}

impl PatchDatasetSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.num_classes > PATCH_GRID_SIDE * PATCH_GRID_SIDE {
            return Err(Error::Config(format!(
                "num_classes must be <= {} grid cells, got {}",
                PATCH_GRID_SIDE * PATCH_GRID_SIDE,
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.image_side < 8 {
            return Err(Error::Config(format!(
                "image_side must be >= 8, got {}",
                self.image_side
            )));
        }
        if self.image_side % PATCH_GRID_SIDE != 0 {
            return Err(Error::Config(format!(
                "image_side must be divisible by {PATCH_GRID_SIDE}, got {}",
                self.image_side
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_strength) {
            return Err(Error::Config(format!(
                "distractor_strength must be in [0,1], got {}",
                self.distractor_strength
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise must be in [0,1), got {}",
                self.label_noise
            )));
        }
        Ok(())
    }
}

struct CellRect {
    row0: usize,
    row1: usize,
    col0: usize,
    col1: usize,
}

fn cell_rect(cell: usize, side: usize) -> CellRect {
    let patch = side / PATCH_GRID_SIDE;
    let r = cell / PATCH_GRID_SIDE;
    let c = cell % PATCH_GRID_SIDE;
    CellRect {
        row0: r * patch,
        row1: (r + 1) * patch,
        col0: c * patch,
        col1: (c + 1) * patch,
    }
}

/// Per-class deterministic pattern, values in [0.5, 1.0].
fn class_pattern(seed: u64, class: usize, patch: usize) -> Vec<f32> {
    let mut rng = rng_from_seed(derived_seed(seed, &format!("pattern:{class}")));
    (0..patch * patch)
        .map(|_| 0.5 + 0.5 * rng.gen::<f32>())
        .collect()
}

/// Generate a labeled training pool, an unlabeled evaluation pool (hidden
/// labels retained for evaluation only) and per-sample ground-truth masks.
/// Identical arguments give bit-identical outputs.
pub fn generate_patch_dataset(
    spec: &PatchDatasetSpec,
) -> Result<(LabeledDataset, UnlabeledDataset, GroundTruthMasks)> {
    spec.validate()?;
    let side = spec.image_side;
    let patch = side / PATCH_GRID_SIDE;
    let patterns: Vec<Vec<f32>> = (0..spec.num_classes)
        .map(|k| class_pattern(spec.seed, k, patch))
        .collect();

    let unlabeled_per_class =
        ((spec.samples_per_class as f64 * UNLABELED_RATIO).ceil() as usize).max(1);

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    let mut next_id = 0u64;

    let build = |part: &str,
                     class: usize,
                     index: usize,
                     id: u64,
                     masks: &mut Vec<GroundTruthMask>|
     -> Sample {
        let mut rng = rng_from_seed(derived_seed(
            spec.seed,
            &format!("sample:{part}:{class}:{index}"),
        ));
        let mut pixels = vec![BACKGROUND; side * side];
        let amplitude = 0.85 + 0.15 * rng.gen::<f32>();
        let rect = cell_rect(class, side);
        for r in rect.row0..rect.row1 {
            for c in rect.col0..rect.col1 {
                let local = (r - rect.row0) * patch + (c - rect.col0);
                pixels[r * side + c] = BACKGROUND + amplitude * PATTERN_SCALE * patterns[class][local];
            }
        }
        if spec.distractor_strength > 0.0 {
            let companion = rng.gen::<f64>() < COMPANION_DISTRACTOR_PROB;
            let distractor = if companion {
                (class + 1) % spec.num_classes
            } else {
                // uniform over the other classes
                let mut d = rng.gen_range(0..spec.num_classes - 1);
                if d >= class {
                    d += 1;
                }
                d
            };
            let strength = spec.distractor_strength as f32;
            let beta = 0.85 + 0.15 * rng.gen::<f32>();
            let drect = cell_rect(distractor, side);
            for r in drect.row0..drect.row1 {
                for c in drect.col0..drect.col1 {
                    let local = (r - drect.row0) * patch + (c - drect.col0);
                    pixels[r * side + c] +=
                        strength * beta * PATTERN_SCALE * patterns[distractor][local];
                }
            }
            // Low-amplitude clutter outside the true-class cell, scaled with
            // the distractor strength so the zero-distractor construction
            // stays exactly clean.
            for r in 0..side {
                for c in 0..side {
                    let in_true = r >= rect.row0 && r < rect.row1 && c >= rect.col0 && c < rect.col1;
                    if !in_true {
                        pixels[r * side + c] += strength * 0.05 * rng.gen::<f32>();
                    }
                }
            }
        }
        let mut mask = vec![false; side * side];
        for r in rect.row0..rect.row1 {
            for c in rect.col0..rect.col1 {
                mask[r * side + c] = true;
            }
        }
        masks.push(GroundTruthMask {
            sample_id: id,
            height: side,
            width: side,
            mask,
        });
        Sample {
            features: Tensor::from_vec(&[1, side, side], pixels).expect("shape"),
            id,
        }
    };

    for class in 0..spec.num_classes {
        for index in 0..spec.samples_per_class {
            let sample = build("labeled", class, index, next_id, &mut masks);
            samples.push(sample);
            labels.push(class);
            next_id += 1;
        }
    }

    // Label noise applies to the labeled pool only; hidden evaluation labels
    // stay clean.
    let noisy_count = (spec.label_noise * labels.len() as f64).round() as usize;
    if noisy_count > 0 {
        let mut rng = rng_from_seed(derived_seed(spec.seed, "label_noise"));
        let mut order: Vec<usize> = (0..labels.len()).collect();
        shuffle(&mut order, &mut rng);
        for &idx in order.iter().take(noisy_count) {
            labels[idx] = rng.gen_range(0..spec.num_classes);
        }
    }

    let mut eval_samples = Vec::new();
    let mut eval_labels = Vec::new();
    for class in 0..spec.num_classes {
        for index in 0..unlabeled_per_class {
            let sample = build("unlabeled", class, index, next_id, &mut masks);
            eval_samples.push(sample);
            eval_labels.push(class);
            next_id += 1;
        }
    }

    let labeled = LabeledDataset::new(samples, labels, spec.num_classes, SplitTag::Train)?;
    let unlabeled = UnlabeledDataset::new(eval_samples, Some(eval_labels), spec.num_classes)?;
    Ok((labeled, unlabeled, GroundTruthMasks::new(masks)))
}
