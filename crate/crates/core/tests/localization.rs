//! Pointing-game check: on clean generator data (no distractors, no label
//! noise) the strongest attribution group of a well-trained model should
//! land on the class-discriminative cell the generator injected.

use impactx_core::attribution::{integrated_gradients, BaselineSpec, FeatureGrouping};
use impactx_core::data::{generate_patch_dataset, split, PatchDatasetSpec};
use impactx_core::model::{BaseClassifier, TrainConfig};

#[test]
fn top_attribution_group_lands_on_the_ground_truth_cell() {
    let spec = PatchDatasetSpec {
        num_classes: 4,
        samples_per_class: 40,
        image_side: 16,
        distractor_strength: 0.0,
        label_noise: 0.0,
        seed: 4242,
    };
    let (labeled, _eval, masks) = generate_patch_dataset(&spec).expect("dataset");
    let (train, val) = split(&labeled, 0.2, 7).expect("split");
    let config = TrainConfig {
        epochs: 10,
        batch_size: 32,
        seed: 99,
        ..Default::default()
    };
    let model = BaseClassifier::pretrain(&train, &val, &config).expect("pretrain");

    // Groups align with the generator's 4×4 patch grid, so localization is
    // a clean one-cell question.
    let side = spec.image_side;
    let grouping = FeatureGrouping::grid(side, side, 4).expect("grouping");
    let baseline = BaselineSpec::dataset_mean(&train).expect("baseline");

    let mut hits = 0usize;
    let mut total = 0usize;
    for (sample, &label) in train.samples.iter().zip(&train.labels).take(60) {
        let map = integrated_gradients(&model, &sample.features, &baseline, &grouping, label, 64)
            .expect("attribution");
        let top = map
            .group_values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .expect("nonempty map");

        // Resolve the winning group to pixels through the public expansion
        // instead of assuming the grid's index order.
        let mut one_hot = vec![0.0f32; grouping.num_groups()];
        one_hot[top] = 1.0;
        let region = grouping.expand(&one_hot, 1);
        let mask = masks.get(sample.id).expect("mask for sample");
        let intersects = (0..side).any(|row| {
            (0..side).any(|col| {
                region.data()[row * side + col] > 0.5 && mask.is_set(row, col)
            })
        });
        hits += usize::from(intersects);
        total += 1;
    }

    let share = hits as f64 / total as f64;
    assert!(
        share >= 0.9,
        "only {hits}/{total} top groups intersect the ground-truth cell"
    );
}
