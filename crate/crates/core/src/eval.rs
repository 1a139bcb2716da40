//! Evaluation: accuracy, confusion matrices, flip analysis between the base
//! model and the fused predictor, per-class recall deltas, explanation
//! similarity, and saliency rendering.
//!
//! Everything here is a pure function over immutable inputs. The evaluation
//! set's ground-truth labels stay hidden from every training path by type
//! separation ([`UnlabeledDataset`] keeps them private); this module is
//! their single consumer.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::AttributionMap;
use crate::data::UnlabeledDataset;
use crate::error::{Error, Result};
use crate::fusion::ImpactxPredictor;
use crate::model::BaseClassifier;
use crate::tensor::{cosine, Tensor};

// ---------------------------------------------------------------------------
// Confusion matrix
// ---------------------------------------------------------------------------

/// K×K counts; rows index the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} predictions but {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if predictions.is_empty() {
            return Err(Error::Config("cannot evaluate an empty set".into()));
        }
        let mut counts = vec![0u64; num_classes * num_classes];
        for (&pred, &label) in predictions.iter().zip(labels) {
            if pred >= num_classes || label >= num_classes {
                return Err(Error::Config(format!(
                    "class {} out of range for {num_classes} classes",
                    pred.max(label)
                )));
            }
            counts[label * num_classes + pred] += 1;
        }
        Ok(ConfusionMatrix {
            num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, true_class: usize, predicted_class: usize) -> u64 {
        self.counts[true_class * self.num_classes + predicted_class]
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        self.counts[true_class * self.num_classes..(true_class + 1) * self.num_classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|k| self.count(k, k)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    /// Recall per class; a class with no samples reports 0 (check
    /// [`ConfusionMatrix::row_sum`] to distinguish).
    pub fn per_class_recall(&self) -> Vec<f64> {
        (0..self.num_classes)
            .map(|k| {
                let row = self.row_sum(k);
                if row == 0 {
                    0.0
                } else {
                    self.count(k, k) as f64 / row as f64
                }
            })
            .collect()
    }

    /// CSV rendering with a header row and column of class indices; the
    /// corner cell names the orientation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\pred");
        for c in 0..self.num_classes {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for r in 0..self.num_classes {
            out.push_str(&format!("{r}"));
            for c in 0..self.num_classes {
                out.push_str(&format!(",{}", self.count(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Flip analysis
// ---------------------------------------------------------------------------

/// How predictions moved between the baseline and the fused predictor. The
/// four categories partition the evaluation set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipAnalysis {
    /// Baseline wrong, fused right.
    pub corrected: Vec<u64>,
    /// Baseline right, fused wrong.
    pub broken: Vec<u64>,
    pub unchanged_right: u64,
    pub unchanged_wrong: u64,
}

impl FlipAnalysis {
    /// |corrected| − |broken|; equals the difference in correct counts.
    pub fn delta_correct(&self) -> i64 {
        self.corrected.len() as i64 - self.broken.len() as i64
    }

    pub fn total(&self) -> u64 {
        self.corrected.len() as u64
            + self.broken.len() as u64
            + self.unchanged_right
            + self.unchanged_wrong
    }
}

/// Partition samples by (baseline correct?, fused correct?). Vectors are
/// aligned: `baseline[i]`, `fused[i]`, `labels[i]` and `ids[i]` all describe
/// the same sample.
pub fn flip_analysis(
    baseline: &[usize],
    fused: &[usize],
    labels: &[usize],
    ids: &[u64],
) -> Result<FlipAnalysis> {
    if baseline.len() != fused.len() || baseline.len() != labels.len() || baseline.len() != ids.len()
    {
        return Err(Error::Consistency(format!(
            "prediction vectors misaligned: {} baseline, {} fused, {} labels, {} ids",
            baseline.len(),
            fused.len(),
            labels.len(),
            ids.len()
        )));
    }
    let mut flip = FlipAnalysis {
        corrected: Vec::new(),
        broken: Vec::new(),
        unchanged_right: 0,
        unchanged_wrong: 0,
    };
    for i in 0..baseline.len() {
        let base_right = baseline[i] == labels[i];
        let fused_right = fused[i] == labels[i];
        match (base_right, fused_right) {
            (false, true) => flip.corrected.push(ids[i]),
            (true, false) => flip.broken.push(ids[i]),
            (true, true) => flip.unchanged_right += 1,
            (false, false) => flip.unchanged_wrong += 1,
        }
    }
    Ok(flip)
}

// ---------------------------------------------------------------------------
// Evaluation reports
// ---------------------------------------------------------------------------

/// One full evaluation: fused-prediction metrics plus the flip analysis
/// against the base model. `seed` and `config_digest` are plumbing the
/// caller fills in before serializing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_recall: Vec<f64>,
    pub confusion: ConfusionMatrix,
    pub flip: FlipAnalysis,
    pub num_samples: usize,
    pub num_classes: usize,
    pub model_hash: String,
    pub eval_set_digest: String,
    pub seed: u64,
    pub config_digest: String,
}

/// Digest identifying an evaluation set: sample ids and labels in order.
fn eval_set_digest(ids: &[u64], labels: &[usize]) -> String {
    let mut hasher = Sha256::new();
    for (&id, &label) in ids.iter().zip(labels) {
        hasher.update(id.to_le_bytes());
        hasher.update((label as u64).to_le_bytes());
    }
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn revealed_labels(eval_set: &UnlabeledDataset) -> Result<&[usize]> {
    eval_set.hidden_labels().ok_or_else(|| {
        Error::Config("evaluation set carries no ground-truth labels to reveal".into())
    })
}

fn build_report(
    predictions: &[usize],
    baseline: &[usize],
    labels: &[usize],
    ids: &[u64],
    num_classes: usize,
    model_hash: String,
) -> Result<EvalReport> {
    let confusion = ConfusionMatrix::from_predictions(predictions, labels, num_classes)?;
    let flip = flip_analysis(baseline, predictions, labels, ids)?;
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        per_class_recall: confusion.per_class_recall(),
        num_samples: predictions.len(),
        num_classes,
        confusion,
        flip,
        model_hash,
        eval_set_digest: eval_set_digest(ids, labels),
        seed: 0,
        config_digest: String::new(),
    })
}

/// Evaluate a fused predictor on an evaluation set with revealed labels.
/// The report's flip analysis compares the fused predictions against the
/// embedded base model's own predictions from the same pass.
pub fn evaluate(predictor: &ImpactxPredictor, eval_set: &UnlabeledDataset) -> Result<EvalReport> {
    let labels = revealed_labels(eval_set)?;
    let k = predictor.model().num_classes();
    if eval_set.num_classes != k {
        return Err(Error::Config(format!(
            "evaluation set declares {} classes, predictor has {k}",
            eval_set.num_classes
        )));
    }
    let mut scratch = predictor.scratch();
    let mut fused = Vec::with_capacity(eval_set.len());
    let mut base = Vec::with_capacity(eval_set.len());
    let mut ids = Vec::with_capacity(eval_set.len());
    for sample in &eval_set.samples {
        let pred = predictor.predict_into(&sample.features, &mut scratch)?;
        fused.push(pred.class);
        base.push(pred.base_class);
        ids.push(sample.id);
    }
    build_report(
        &fused,
        &base,
        labels,
        &ids,
        k,
        predictor.model().checkpoint_hash(),
    )
}

/// Evaluate the base model alone. The flip analysis compares the model
/// against itself, so `corrected` and `broken` are empty and the unchanged
/// counts split the set by correctness.
pub fn evaluate_baseline(
    model: &BaseClassifier,
    eval_set: &UnlabeledDataset,
) -> Result<EvalReport> {
    let labels = revealed_labels(eval_set)?;
    if eval_set.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "evaluation set declares {} classes, model has {}",
            eval_set.num_classes,
            model.num_classes()
        )));
    }
    let shape = model.input_shape();
    let mut scratch = model.scratch();
    let mut preds = Vec::with_capacity(eval_set.len());
    let mut ids = Vec::with_capacity(eval_set.len());
    for sample in &eval_set.samples {
        if sample.features.shape() != shape.as_slice() {
            return Err(Error::Input(format!(
                "sample {} has shape {:?}, model expects {:?}",
                sample.id,
                sample.features.shape(),
                shape
            )));
        }
        let logits = model.logits_into(sample.features.data(), &mut scratch);
        preds.push(crate::nn::argmax(logits));
        ids.push(sample.id);
    }
    let preds_copy = preds.clone();
    build_report(
        &preds,
        &preds_copy,
        labels,
        &ids,
        model.num_classes(),
        model.checkpoint_hash(),
    )
}

/// Per-class recall difference `impactx − baseline`. Both reports must
/// describe the same evaluation set.
pub fn per_class_delta(baseline: &EvalReport, impactx: &EvalReport) -> Result<Vec<f64>> {
    if baseline.num_classes != impactx.num_classes {
        return Err(Error::Consistency(format!(
            "reports disagree on class count: {} vs {}",
            baseline.num_classes, impactx.num_classes
        )));
    }
    if baseline.eval_set_digest != impactx.eval_set_digest {
        return Err(Error::Consistency(
            "reports describe different evaluation sets".into(),
        ));
    }
    Ok(impactx
        .per_class_recall
        .iter()
        .zip(&baseline.per_class_recall)
        .map(|(&a, &b)| a - b)
        .collect())
}

/// Min/max/spread summary reported alongside per-class deltas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub deltas: Vec<f64>,
    pub min: f64,
    pub max: f64,
    pub spread: f64,
}

impl DeltaSummary {
    pub fn new(deltas: Vec<f64>) -> Self {
        let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
        let max = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        DeltaSummary {
            min,
            max,
            spread: max - min,
            deltas,
        }
    }
}

// ---------------------------------------------------------------------------
// Explanation similarity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMetric {
    Cosine,
    /// Fraction of the top-k group indices (ranked by signed value) shared
    /// by both maps.
    TopKOverlap(usize),
}

/// A similarity value plus a degeneracy flag: a zero-norm vector makes the
/// cosine undefined, reported as 0 with `degenerate` set so batch statistics
/// stay total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    pub degenerate: bool,
}

fn check_same_shape(a: &AttributionMap, b: &AttributionMap) -> Result<()> {
    if a.grouping.num_groups() != b.grouping.num_groups()
        || a.grouping.spatial_dims() != b.grouping.spatial_dims()
        || a.channels != b.channels
    {
        return Err(Error::Input(format!(
            "attribution maps have different shapes: {} groups over {:?} vs {} groups over {:?}",
            a.grouping.num_groups(),
            a.grouping.spatial_dims(),
            b.grouping.num_groups(),
            b.grouping.spatial_dims()
        )));
    }
    Ok(())
}

/// Indices of the k largest values, ranked by signed value, ties broken by
/// lower index.
fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Compare two attribution maps over their group scores.
pub fn explanation_similarity(
    a: &AttributionMap,
    b: &AttributionMap,
    metric: SimilarityMetric,
) -> Result<SimilarityScore> {
    check_same_shape(a, b)?;
    match metric {
        SimilarityMetric::Cosine => Ok(match cosine(&a.group_values, &b.group_values) {
            Some(value) => SimilarityScore {
                value,
                degenerate: false,
            },
            None => SimilarityScore {
                value: 0.0,
                degenerate: true,
            },
        }),
        SimilarityMetric::TopKOverlap(k) => {
            let groups = a.grouping.num_groups();
            if k == 0 || k > groups {
                return Err(Error::Input(format!(
                    "top-k overlap needs 1 ≤ k ≤ {groups}, got {k}"
                )));
            }
            let top_a = top_k_indices(&a.group_values, k);
            let top_b = top_k_indices(&b.group_values, k);
            let shared = top_a.iter().filter(|i| top_b.contains(i)).count();
            Ok(SimilarityScore {
                value: shared as f64 / k as f64,
                degenerate: false,
            })
        }
    }
}

/// Cosine between a reconstructed explanation tensor (decoder output) and a
/// reference attribution map's full-input expansion.
pub fn reconstruction_cosine(recon: &Tensor, reference: &AttributionMap) -> Result<SimilarityScore> {
    let expanded = reference.expand();
    if recon.shape() != expanded.shape() {
        return Err(Error::Input(format!(
            "reconstruction shape {:?} does not match explanation shape {:?}",
            recon.shape(),
            expanded.shape()
        )));
    }
    Ok(match cosine(recon.data(), expanded.data()) {
        Some(value) => SimilarityScore {
            value,
            degenerate: false,
        },
        None => SimilarityScore {
            value: 0.0,
            degenerate: true,
        },
    })
}

// ---------------------------------------------------------------------------
// Saliency rendering
// ---------------------------------------------------------------------------

/// Render one spatial plane of signed scores as a binary 8-bit PGM. Values
/// are max-abs normalized, then mapped to gray levels by
/// `v ↦ round(127.5·(v+1))`: −1 → black, 0 → mid-gray, +1 → white.
pub fn render_plane_pgm(plane: &[f32], height: usize, width: usize) -> Result<Vec<u8>> {
    if plane.len() < height * width {
        return Err(Error::Input(format!(
            "plane has {} values, {height}×{width} needs {}",
            plane.len(),
            height * width
        )));
    }
    let max = plane[..height * width]
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()));
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in plane.iter().take(height * width) {
        let n = if max > 0.0 { v / max } else { 0.0 };
        let level = (127.5 * (n + 1.0)).round().clamp(0.0, 255.0) as u8;
        out.push(level);
    }
    Ok(out)
}

/// Render an attribution map as a PGM (one spatial plane; group values are
/// constant across channels).
pub fn render_pgm(map: &AttributionMap) -> Vec<u8> {
    let (h, w) = map.grouping.spatial_dims();
    let expanded = map.grouping.expand(&map.group_values, 1);
    render_plane_pgm(expanded.data(), h, w).expect("expansion covers the plane")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{AttributionMethod, FeatureGrouping};
    use crate::data::Sample;
    use crate::util::rng_from_seed;
    use rand::Rng;

    fn map_from_groups(groups: Vec<f32>, h: usize, w: usize, side: usize) -> AttributionMap {
        AttributionMap {
            sample_id: 0,
            group_values: groups,
            grouping: FeatureGrouping::grid(h, w, side).unwrap(),
            channels: 1,
            target_class: 0,
            method: AttributionMethod::GradientXInput,
            baseline_ref: "zero".into(),
            normalized: true,
        }
    }

    #[test]
    fn perfect_predictions_give_identity_confusion() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let m = ConfusionMatrix::from_predictions(&labels, &labels, 3).unwrap();
        assert_eq!(m.accuracy(), 1.0);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(m.count(r, c), if r == c { 2 } else { 0 });
            }
        }
        assert_eq!(m.total(), 6);
        assert_eq!(m.trace(), 6);
    }

    #[test]
    fn constant_predictions_on_balanced_data_hit_one_over_k() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let preds = vec![2usize; 40];
        let m = ConfusionMatrix::from_predictions(&preds, &labels, 4).unwrap();
        assert!((m.accuracy() - 0.25).abs() < 1e-12);
        // Accuracy always equals trace/total.
        assert!((m.accuracy() - m.trace() as f64 / m.total() as f64).abs() < 1e-15);
    }

    #[test]
    fn recall_matches_diagonal_over_row() {
        let labels = vec![0, 0, 0, 1, 1];
        let preds = vec![0, 0, 1, 1, 0];
        let m = ConfusionMatrix::from_predictions(&preds, &labels, 2).unwrap();
        let recall = m.per_class_recall();
        assert!((recall[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((recall[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_row_and_column() {
        let labels = vec![0, 1];
        let preds = vec![1, 1];
        let m = ConfusionMatrix::from_predictions(&preds, &labels, 2).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv, "true\\pred,0,1\n0,0,1\n1,0,1\n");
    }

    #[test]
    fn flip_identity_holds_on_random_instances() {
        let mut rng = rng_from_seed(31);
        for _ in 0..200 {
            let n = 1 + rng.gen_range(0..60);
            let k = 2 + rng.gen_range(0..5);
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let base: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let fused: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
            let ids: Vec<u64> = (0..n as u64).collect();
            let flip = flip_analysis(&base, &fused, &labels, &ids).unwrap();
            // Brute-force oracle for the identity.
            let base_correct = base.iter().zip(&labels).filter(|(p, l)| p == l).count() as i64;
            let fused_correct = fused.iter().zip(&labels).filter(|(p, l)| p == l).count() as i64;
            assert_eq!(flip.delta_correct(), fused_correct - base_correct);
            assert_eq!(flip.total(), n as u64, "categories must partition the set");
        }
    }

    #[test]
    fn flip_edge_cases() {
        let labels = vec![0, 1, 0];
        let ids = vec![10, 11, 12];
        let same = vec![0, 0, 0];
        let flip = flip_analysis(&same, &same, &labels, &ids).unwrap();
        assert!(flip.corrected.is_empty());
        assert!(flip.broken.is_empty());
        assert_eq!(flip.unchanged_right, 2);
        assert_eq!(flip.unchanged_wrong, 1);

        let all_wrong = vec![1, 0, 1];
        let all_right = labels.clone();
        let flip = flip_analysis(&all_wrong, &all_right, &labels, &ids).unwrap();
        assert_eq!(flip.corrected, ids);
        assert!(flip.broken.is_empty());

        let err = flip_analysis(&same, &same, &labels, &ids[..2]).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    fn report_from_preds(preds: &[usize], base: &[usize], labels: &[usize]) -> EvalReport {
        let ids: Vec<u64> = (0..labels.len() as u64).collect();
        build_report(preds, base, labels, &ids, 3, "model".into()).unwrap()
    }

    #[test]
    fn per_class_delta_identities() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut rng = rng_from_seed(5);
        let base: Vec<usize> = (0..30).map(|_| rng.gen_range(0..3)).collect();
        let fused: Vec<usize> = (0..30).map(|_| rng.gen_range(0..3)).collect();
        let base_report = report_from_preds(&base, &base, &labels);
        let fused_report = report_from_preds(&fused, &base, &labels);

        // Identical reports → zero deltas.
        let zero = per_class_delta(&base_report, &base_report).unwrap();
        assert!(zero.iter().all(|&d| d == 0.0));

        // Weighted-sum identity: Σ delta[k]·row_count(k) = Δ correct.
        let deltas = per_class_delta(&base_report, &fused_report).unwrap();
        let weighted: f64 = deltas
            .iter()
            .enumerate()
            .map(|(k, &d)| d * fused_report.confusion.row_sum(k) as f64)
            .sum();
        let delta_correct =
            fused_report.confusion.trace() as f64 - base_report.confusion.trace() as f64;
        assert!(
            (weighted - delta_correct).abs() < 1e-9,
            "weighted deltas {weighted} vs correct-count delta {delta_correct}"
        );

        let summary = DeltaSummary::new(deltas.clone());
        assert!(summary.min <= summary.max);
        assert!((summary.spread - (summary.max - summary.min)).abs() < 1e-15);

        // A report over a different set is rejected.
        let other_labels: Vec<usize> = (0..30).map(|i| (i + 1) % 3).collect();
        let other = report_from_preds(&base, &base, &other_labels);
        assert!(matches!(
            per_class_delta(&base_report, &other),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn evaluate_baseline_reveals_labels_and_is_deterministic() {
        let mut rng = rng_from_seed(8);
        let samples: Vec<Sample> = (0..12)
            .map(|i| Sample {
                features: Tensor::from_vec(
                    &[1, 8, 8],
                    (0..64).map(|_| rng.gen::<f32>()).collect(),
                )
                .unwrap(),
                id: i,
            })
            .collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let eval_set = UnlabeledDataset::new(samples, Some(labels), 2).unwrap();
        let model = BaseClassifier::new(&[1, 8, 8], 2, 3).unwrap();

        let a = evaluate_baseline(&model, &eval_set).unwrap();
        let b = evaluate_baseline(&model, &eval_set).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.eval_set_digest, b.eval_set_digest);
        assert_eq!(a.confusion, b.confusion);

        // Matrix invariants.
        assert_eq!(a.confusion.total(), 12);
        assert!((a.accuracy - a.confusion.trace() as f64 / 12.0).abs() < 1e-15);
        // Baseline flip compares the model against itself.
        assert!(a.flip.corrected.is_empty());
        assert!(a.flip.broken.is_empty());
        assert_eq!(a.flip.total(), 12);

        // Without revealed labels evaluation must refuse.
        let unlabeled = UnlabeledDataset::new(eval_set.samples.clone(), None, 2).unwrap();
        assert!(matches!(
            evaluate_baseline(&model, &unlabeled),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn similarity_examples() {
        let a = map_from_groups(vec![0.8, -0.2, 0.5, 0.1], 4, 4, 2);
        let same = explanation_similarity(&a, &a, SimilarityMetric::Cosine).unwrap();
        assert!((same.value - 1.0).abs() < 1e-9);
        assert!(!same.degenerate);
        let overlap = explanation_similarity(&a, &a, SimilarityMetric::TopKOverlap(2)).unwrap();
        assert_eq!(overlap.value, 1.0);

        let mut neg = a.clone();
        for v in &mut neg.group_values {
            *v = -*v;
        }
        let opposite = explanation_similarity(&a, &neg, SimilarityMetric::Cosine).unwrap();
        assert!((opposite.value + 1.0).abs() < 1e-9);

        let e0 = map_from_groups(vec![1.0, 0.0, 0.0, 0.0], 4, 4, 2);
        let e1 = map_from_groups(vec![0.0, 1.0, 0.0, 0.0], 4, 4, 2);
        let ortho = explanation_similarity(&e0, &e1, SimilarityMetric::Cosine).unwrap();
        assert_eq!(ortho.value, 0.0);
        let overlap1 = explanation_similarity(&e0, &e1, SimilarityMetric::TopKOverlap(1)).unwrap();
        assert_eq!(overlap1.value, 0.0);

        // Zero-norm vectors are degenerate, not errors.
        let zero = map_from_groups(vec![0.0; 4], 4, 4, 2);
        let degen = explanation_similarity(&a, &zero, SimilarityMetric::Cosine).unwrap();
        assert_eq!(degen.value, 0.0);
        assert!(degen.degenerate);

        // Shape mismatches are input errors.
        let bigger = map_from_groups(vec![0.0; 16], 8, 8, 4);
        assert!(matches!(
            explanation_similarity(&a, &bigger, SimilarityMetric::Cosine),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            explanation_similarity(&a, &a, SimilarityMetric::TopKOverlap(0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn reconstruction_cosine_matches_expansion() {
        let a = map_from_groups(vec![1.0, -1.0, 0.5, 0.0], 4, 4, 2);
        let recon = a.expand();
        let score = reconstruction_cosine(&recon, &a).unwrap();
        assert!((score.value - 1.0).abs() < 1e-9);

        let wrong = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(
            reconstruction_cosine(&wrong, &a),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn pgm_rendering_maps_signed_values_to_gray() {
        let map = map_from_groups(vec![1.0, -1.0, 0.5, 0.0], 4, 4, 2);
        let pgm = render_pgm(&map);
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        let pixels = &pgm[header.len()..];
        assert_eq!(pixels.len(), 16);
        // Group layout: [0 | 1] over [2 | 3], each 2×2.
        assert_eq!(pixels[0], 255); // v = 1.0
        assert_eq!(pixels[3], 0); // v = −1.0
        assert_eq!(pixels[12], 191); // v = 0.5 → 127.5·1.5 = 191.25
        assert_eq!(pixels[15], 128); // v = 0.0 → 127.5 rounds half away from zero
    }
}
