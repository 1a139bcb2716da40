//! Dataset representation: labeled/unlabeled sets, synthetic generation with
//! known ground-truth discriminative regions, IDX ingestion and stratified
//! splits.

mod idx;
mod synth;

pub use idx::{load_idx, save_idx};
pub use synth::{generate_patch_dataset, PatchDatasetSpec, PATCH_GRID_SIDE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{derived_seed, rng_from_seed, shuffle};

/// One input instance. `id` is unique across the datasets produced together
/// by a generator or loader call.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Tensor,
    pub id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
        }
    }
}

/// The labeled set used to train the base classifier and the distillation
/// modules.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub samples: Vec<Sample>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split_tag: SplitTag,
}

impl LabeledDataset {
    pub fn new(
        samples: Vec<Sample>,
        labels: Vec<usize>,
        num_classes: usize,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Consistency(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        let ds = LabeledDataset {
            samples,
            labels,
            num_classes,
            split_tag,
        };
        ds.check_shapes()?;
        Ok(ds)
    }

    fn check_shapes(&self) -> Result<()> {
        if let Some(first) = self.samples.first() {
            let shape = first.features.shape().to_vec();
            for s in &self.samples {
                if s.features.shape() != shape.as_slice() {
                    return Err(Error::Consistency(format!(
                        "sample {} shape {:?} differs from {:?}",
                        s.id,
                        s.features.shape(),
                        shape
                    )));
                }
                if !s.features.all_finite() {
                    return Err(Error::Consistency(format!(
                        "sample {} has non-finite features",
                        s.id
                    )));
                }
            }
        }
        let mut ids: Vec<u64> = self.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.samples.len() {
            return Err(Error::Consistency("duplicate sample ids".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        self.samples
            .first()
            .map(|s| s.features.shape())
            .unwrap_or(&[])
    }
}

/// The evaluation set. Labels, when present, are hidden from every training
/// path; only the evaluation module reveals them.
#[derive(Debug, Clone)]
pub struct UnlabeledDataset {
    pub samples: Vec<Sample>,
    hidden_labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl UnlabeledDataset {
    pub fn new(
        samples: Vec<Sample>,
        hidden_labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if let Some(labels) = &hidden_labels {
            if labels.len() != samples.len() {
                return Err(Error::Consistency(format!(
                    "{} samples but {} hidden labels",
                    samples.len(),
                    labels.len()
                )));
            }
        }
        Ok(UnlabeledDataset {
            samples,
            hidden_labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Evaluation-only access to the ground-truth labels. Training code must
    /// never call this; the evaluation module is the single consumer.
    pub(crate) fn hidden_labels(&self) -> Option<&[usize]> {
        self.hidden_labels.as_deref()
    }
}

/// Binary mask over the spatial grid marking the class-discriminative region
/// injected by the synthetic generator.
#[derive(Debug, Clone)]
pub struct GroundTruthMask {
    pub sample_id: u64,
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl GroundTruthMask {
    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }
}

/// Masks for every generated sample, keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct GroundTruthMasks {
    masks: Vec<GroundTruthMask>,
}

impl GroundTruthMasks {
    pub fn new(masks: Vec<GroundTruthMask>) -> Self {
        GroundTruthMasks { masks }
    }

    pub fn get(&self, sample_id: u64) -> Option<&GroundTruthMask> {
        self.masks.iter().find(|m| m.sample_id == sample_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &GroundTruthMask> {
        self.masks.iter()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// Stratified train/validation split, deterministic per seed. Per-class
/// validation counts are `round(count * val_fraction)` clamped so both sides
/// keep at least one sample of every class.
pub fn split(
    dataset: &LabeledDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must be in (0,1), got {val_fraction}"
        )));
    }
    let n = dataset.len() as f64;
    if n * val_fraction < dataset.num_classes as f64 {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} infeasible: {} samples cannot cover {} classes",
            dataset.len(),
            dataset.num_classes
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (idx, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(idx);
    }
    let mut val_indices = Vec::new();
    let mut train_indices = Vec::new();
    for (class, indices) in by_class.iter().enumerate() {
        if indices.is_empty() {
            continue;
        }
        if indices.len() < 2 {
            return Err(Error::Config(format!(
                "val_fraction: class {class} has {} sample(s), cannot stratify",
                indices.len()
            )));
        }
        let mut order = indices.clone();
        let mut rng = rng_from_seed(derived_seed(seed, &format!("split:class:{class}")));
        shuffle(&mut order, &mut rng);
        let want = (indices.len() as f64 * val_fraction).round() as usize;
        let val_count = want.clamp(1, indices.len() - 1);
        val_indices.extend_from_slice(&order[..val_count]);
        train_indices.extend_from_slice(&order[val_count..]);
    }
    val_indices.sort_unstable();
    train_indices.sort_unstable();
    let pick = |indices: &[usize], tag: SplitTag| -> Result<LabeledDataset> {
        LabeledDataset::new(
            indices.iter().map(|&i| dataset.samples[i].clone()).collect(),
            indices.iter().map(|&i| dataset.labels[i]).collect(),
            dataset.num_classes,
            tag,
        )
    };
    Ok((
        pick(&train_indices, SplitTag::Train)?,
        pick(&val_indices, SplitTag::Val)?,
    ))
}
