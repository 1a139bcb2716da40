//! Explanation backends over a frozen classifier: an exact Shapley oracle,
//! KernelSHAP over grouped features, integrated gradients and
//! gradient×input, plus a persistent on-disk explanation cache.
//!
//! Shapley-style methods work on *feature groups* (square patches covering
//! all channels) so coalition spaces stay tractable. Coalitions are `u64`
//! bitmasks — bit `g` set means group `g` keeps the input's values, clear
//! means it takes the baseline's. Solvers accumulate in f64; stored scores
//! are f32.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{read_cache_file, write_cache_file};
use crate::data::{LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::model::BaseClassifier;
use crate::nn::ConvNetScratch;
use crate::tensor::Tensor;
use crate::util::{derived_seed, rng_from_seed, sha256_hex};

/// Counts every model evaluation made on behalf of an attribution backend
/// (coalition values, gradient steps). Lets tests prove that a given code
/// path — in particular fused inference — never computes explanations.
static BACKEND_EVALS: AtomicU64 = AtomicU64::new(0);

pub fn backend_eval_count() -> u64 {
    BACKEND_EVALS.load(Ordering::Relaxed)
}

fn count_evals(n: u64) {
    BACKEND_EVALS.fetch_add(n, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    ExactShapley,
    KernelShap,
    IntegratedGradients,
    GradientXInput,
}

impl AttributionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttributionMethod::ExactShapley => "exact_shapley",
            AttributionMethod::KernelShap => "kernel_shap",
            AttributionMethod::IntegratedGradients => "integrated_gradients",
            AttributionMethod::GradientXInput => "gradient_x_input",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact_shapley" => Ok(AttributionMethod::ExactShapley),
            "kernel_shap" => Ok(AttributionMethod::KernelShap),
            "integrated_gradients" => Ok(AttributionMethod::IntegratedGradients),
            "gradient_x_input" => Ok(AttributionMethod::GradientXInput),
            other => Err(Error::Config(format!("unknown attribution method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPolicy {
    TrueClass,
    PredictedClass,
}

impl TargetPolicy {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetPolicy::TrueClass => "true_class",
            TargetPolicy::PredictedClass => "predicted_class",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "true_class" => Ok(TargetPolicy::TrueClass),
            "predicted_class" => Ok(TargetPolicy::PredictedClass),
            other => Err(Error::Config(format!("unknown target policy {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Feature grouping and baselines
// ---------------------------------------------------------------------------

/// Partition of the spatial grid into `side × side` square patches; every
/// channel at a spatial position belongs to that position's group. Patch
/// boundaries are `round(i·extent/side)`, so non-divisible extents are
/// covered exactly with near-equal patches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureGrouping {
    height: usize,
    width: usize,
    side: usize,
    group_of_pixel: Vec<u16>,
}

impl FeatureGrouping {
    pub fn grid(height: usize, width: usize, side: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::Config(format!(
                "grouping grid side must be at least 2, got {side}"
            )));
        }
        if side > height || side > width {
            return Err(Error::Config(format!(
                "grouping grid {side}×{side} does not fit a {height}×{width} input"
            )));
        }
        if side * side > 64 {
            return Err(Error::Config(format!(
                "grouping grid {side}×{side} exceeds the 64-group coalition mask"
            )));
        }
        let bound = |i: usize, extent: usize| -> usize {
            ((i as f64 * extent as f64 / side as f64).round()) as usize
        };
        let mut group_of_pixel = vec![0u16; height * width];
        for y in 0..height {
            let gy = (0..side).rfind(|&i| bound(i, height) <= y).unwrap();
            for x in 0..width {
                let gx = (0..side).rfind(|&i| bound(i, width) <= x).unwrap();
                group_of_pixel[y * width + x] = (gy * side + gx) as u16;
            }
        }
        Ok(FeatureGrouping {
            height,
            width,
            side,
            group_of_pixel,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.side * self.side
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn group_of(&self, y: usize, x: usize) -> usize {
        self.group_of_pixel[y * self.width + x] as usize
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            format!(
                "grid:{}x{} over {}x{}",
                self.side, self.side, self.height, self.width
            )
            .as_bytes(),
        )
    }

    /// Builds the hybrid input: groups whose bit is set in `coalition` keep
    /// `x`'s values, the rest take the baseline's.
    pub fn mask_into(&self, coalition: u64, x: &[f32], baseline: &[f32], out: &mut [f32]) {
        let plane = self.height * self.width;
        let channels = x.len() / plane;
        for p in 0..plane {
            let keep = coalition >> self.group_of_pixel[p] & 1 == 1;
            for c in 0..channels {
                let i = c * plane + p;
                out[i] = if keep { x[i] } else { baseline[i] };
            }
        }
    }

    /// Sums a per-pixel score tensor (all channels) into per-group totals.
    pub fn sum_per_group(&self, per_pixel: &[f32]) -> Vec<f32> {
        let plane = self.height * self.width;
        let channels = per_pixel.len() / plane;
        let mut sums = vec![0.0f64; self.num_groups()];
        for c in 0..channels {
            for p in 0..plane {
                sums[self.group_of_pixel[p] as usize] += per_pixel[c * plane + p] as f64;
            }
        }
        sums.into_iter().map(|v| v as f32).collect()
    }

    /// Expands per-group scores to the full input shape; constant within
    /// each group and identical across channels.
    pub fn expand(&self, group_values: &[f32], channels: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0f32; channels * plane];
        for p in 0..plane {
            let v = group_values[self.group_of_pixel[p] as usize];
            for c in 0..channels {
                data[c * plane + p] = v;
            }
        }
        Tensor::from_vec(&[channels, self.height, self.width], data).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    Zero,
    DatasetMean,
}

/// The reference input SHAP-style masking falls back to.
#[derive(Debug, Clone)]
pub struct BaselineSpec {
    pub mode: BaselineMode,
    pub reference: Tensor,
}

impl BaselineSpec {
    pub fn zero(shape: &[usize]) -> Self {
        BaselineSpec {
            mode: BaselineMode::Zero,
            reference: Tensor::zeros(shape),
        }
    }

    /// Per-pixel mean over the labeled training set.
    pub fn dataset_mean(data: &LabeledDataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config("cannot take the mean of an empty dataset".into()));
        }
        let shape = data.feature_shape().to_vec();
        let mut acc = vec![0.0f64; data.samples[0].features.len()];
        for s in &data.samples {
            for (a, &v) in acc.iter_mut().zip(s.features.data()) {
                *a += v as f64;
            }
        }
        let n = data.len() as f64;
        let mean: Vec<f32> = acc.into_iter().map(|a| (a / n) as f32).collect();
        let spec = BaselineSpec {
            mode: BaselineMode::DatasetMean,
            reference: Tensor::from_vec(&shape, mean)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.reference.all_finite()
            || self.reference.data().iter().any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::Config(
                "baseline reference values must be finite and in [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + self.reference.len() * 4);
        bytes.extend_from_slice(
            match self.mode {
                BaselineMode::Zero => "zero:",
                BaselineMode::DatasetMean => "dataset_mean:",
            }
            .as_bytes(),
        );
        for v in self.reference.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Attribution maps
// ---------------------------------------------------------------------------

/// One explanation e_x: a signed score per feature group.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub sample_id: u64,
    pub group_values: Vec<f32>,
    pub grouping: FeatureGrouping,
    pub channels: usize,
    pub target_class: usize,
    pub method: AttributionMethod,
    pub baseline_ref: String,
    /// True once scores are scaled to max-absolute-value 1.
    pub normalized: bool,
}

impl AttributionMap {
    /// Full-input-shape expansion; constant within each group.
    pub fn expand(&self) -> Tensor {
        self.grouping.expand(&self.group_values, self.channels)
    }

    /// Scales scores so the largest magnitude is 1 (no-op on an all-zero map).
    pub fn normalize(&mut self) {
        let max = self
            .group_values
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        if max > 0.0 {
            for v in &mut self.group_values {
                *v /= max;
            }
        }
        self.normalized = true;
    }

    pub fn is_finite(&self) -> bool {
        self.group_values.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Shapley solvers
// ---------------------------------------------------------------------------

fn binom(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1u64;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// Exact Shapley values: φᵢ = Σ_{S⊆N\{i}} |S|!(G−|S|−1)!/G! (v(S∪{i})−v(S)).
/// Runs 2^G value evaluations; G is capped at 14.
pub fn exact_shapley(v: &mut dyn FnMut(u64) -> f64, g: usize) -> Result<Vec<f64>> {
    if g == 0 {
        return Err(Error::Config("need at least one group".into()));
    }
    if g > 14 {
        return Err(Error::Capacity(format!(
            "exact Shapley over {g} groups needs 2^{g} evaluations; use kernel_shap instead"
        )));
    }
    let full = 1u64 << g;
    let mut table = vec![0.0f64; full as usize];
    for (mask, slot) in table.iter_mut().enumerate() {
        *slot = v(mask as u64);
    }
    // weight[s] = s!(g−s−1)!/g!
    let mut fact = vec![1.0f64; g + 1];
    for i in 1..=g {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..g).map(|s| fact[s] * fact[g - s - 1] / fact[g]).collect();
    let mut phi = vec![0.0f64; g];
    for i in 0..g {
        let bit = 1u64 << i;
        for mask in 0..full {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            phi[i] += weight[s] * (table[(mask | bit) as usize] - table[mask as usize]);
        }
    }
    Ok(phi)
}

/// Lexicographic rank → combination of `k` elements out of `n`.
fn unrank_combination(n: usize, k: usize, mut rank: u64) -> u64 {
    let mut mask = 0u64;
    let mut next = 0usize;
    for remaining in (1..=k).rev() {
        for candidate in next..n {
            let c = binom(n - candidate - 1, remaining - 1);
            if rank < c {
                mask |= 1u64 << candidate;
                next = candidate + 1;
                break;
            }
            rank -= c;
        }
    }
    mask
}

/// Subset-size-stratified coalition sample. Complementary size pairs
/// (s, G−s) are processed from the extremes inward: a pair that fits in the
/// remaining budget is enumerated fully, otherwise the remaining budget is
/// split between its halves and sampling stops. Returns (mask, WLS weight)
/// pairs where the weight is the Shapley kernel scaled by n_s/k_s for
/// partially sampled strata.
fn sample_coalitions(g: usize, budget: usize, seed: u64) -> Vec<(u64, f64)> {
    let kernel = |s: usize| -> f64 {
        (g - 1) as f64 / (binom(g, s) as f64 * s as f64 * (g - s) as f64)
    };
    let mut rng = rng_from_seed(seed);
    let mut picks: Vec<(u64, f64)> = Vec::with_capacity(budget);
    let draw_stratum = |s: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng,
                            picks: &mut Vec<(u64, f64)>| {
        let n = binom(g, s);
        let scaled = kernel(s) * n as f64 / k as f64;
        if k as u64 == n {
            // Full stratum: enumerate ranks directly.
            for rank in 0..n {
                picks.push((unrank_combination(g, s, rank), kernel(s)));
            }
        } else {
            let mut used = std::collections::HashSet::with_capacity(k);
            while used.len() < k {
                let rank = rand::Rng::gen_range(rng, 0..n);
                if used.insert(rank) {
                    picks.push((unrank_combination(g, s, rank), scaled));
                }
            }
        }
    };

    let mut remaining = budget;
    let (mut lo, mut hi) = (1usize, g - 1);
    while lo <= hi && remaining > 0 {
        if lo == hi {
            let k = (remaining as u64).min(binom(g, lo)) as usize;
            draw_stratum(lo, k, &mut rng, &mut picks);
            remaining -= k;
        } else {
            let (n_lo, n_hi) = (binom(g, lo) as usize, binom(g, hi) as usize);
            if remaining >= n_lo + n_hi {
                draw_stratum(lo, n_lo, &mut rng, &mut picks);
                draw_stratum(hi, n_hi, &mut rng, &mut picks);
                remaining -= n_lo + n_hi;
            } else {
                let mut k_lo = remaining.div_ceil(2).min(n_lo);
                let k_hi = (remaining - k_lo).min(n_hi);
                k_lo = (k_lo + remaining - k_lo - k_hi).min(n_lo);
                if k_lo > 0 {
                    draw_stratum(lo, k_lo, &mut rng, &mut picks);
                }
                if k_hi > 0 {
                    draw_stratum(hi, k_hi, &mut rng, &mut picks);
                }
                remaining = 0;
            }
        }
        lo += 1;
        hi = hi.saturating_sub(1);
    }
    picks
}

/// Gaussian elimination with partial pivoting; `a` is n×n row-major.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    let scale: f64 = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| {
                a[r * n + col]
                    .abs()
                    .partial_cmp(&a[s * n + col].abs())
                    .unwrap()
            })
            .unwrap();
        if a[pivot_row * n + col].abs() < 1e-12 * scale {
            return Err(Error::DegenerateDesign(
                "constrained weighted least squares system is singular; raise num_coalitions"
                    .into(),
            ));
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            b.swap(col, pivot_row);
        }
        let pivot = a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= factor * a[col * n + j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for j in row + 1..n {
            acc -= a[row * n + j] * x[j];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// KernelSHAP: weighted least squares over sampled coalitions with the
/// Shapley kernel, under the two exact constraints `intercept = v(∅)` and
/// `intercept + Σφ = v(N)` (eliminated by substitution, so efficiency holds
/// by construction). Deterministic per seed. With
/// `num_coalitions = 2^G − 2` the enumeration is complete and the result
/// equals exact Shapley up to solver arithmetic.
pub fn kernel_shap(
    v: &mut dyn FnMut(u64) -> f64,
    g: usize,
    num_coalitions: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if g < 2 {
        return Err(Error::Config("kernel_shap needs at least two groups".into()));
    }
    let total = if g >= 64 { u64::MAX } else { (1u64 << g) - 2 };
    let full_budget = total.min(usize::MAX as u64) as usize;
    if num_coalitions != full_budget && num_coalitions < g + 2 {
        return Err(Error::Config(format!(
            "num_coalitions must be at least G+2 = {} (or exactly 2^G−2 = {full_budget} \
             for full enumeration), got {num_coalitions}",
            g + 2
        )));
    }
    let budget = num_coalitions.min(full_budget);

    let v0 = v(0);
    let v_full = v((1u64 << g) - 1);
    count_evals(2);
    let delta = v_full - v0;

    let coalitions = sample_coalitions(g, budget, seed);
    count_evals(coalitions.len() as u64);

    // Substitute φ_{g−1} = Δ − Σ_{i<g−1} φᵢ: unknowns are φ_0..φ_{g−2},
    // design entry aᵢ = zᵢ − z_{g−1}, target y = v(z) − v₀ − z_{g−1}·Δ.
    let n = g - 1;
    let mut ata = vec![0.0f64; n * n];
    let mut atb = vec![0.0f64; n];
    let mut row = vec![0.0f64; n];
    let last_bit = 1u64 << (g - 1);
    for &(mask, weight) in &coalitions {
        let z_last = if mask & last_bit != 0 { 1.0 } else { 0.0 };
        for (i, r) in row.iter_mut().enumerate() {
            let z_i = if mask >> i & 1 == 1 { 1.0 } else { 0.0 };
            *r = z_i - z_last;
        }
        let y = v(mask) - v0 - z_last * delta;
        for i in 0..n {
            if row[i] == 0.0 {
                continue;
            }
            let wi = weight * row[i];
            for j in 0..n {
                ata[i * n + j] += wi * row[j];
            }
            atb[i] += wi * y;
        }
    }
    let head = solve_linear(ata, atb)?;
    let mut phi = Vec::with_capacity(g);
    let mut sum = 0.0f64;
    for h in &head {
        phi.push(*h);
        sum += h;
    }
    phi.push(delta - sum);
    Ok(phi)
}

// ---------------------------------------------------------------------------
// Model-backed value function and gradient backends
// ---------------------------------------------------------------------------

/// Coalition value function over a frozen model: v(S) is the target-class
/// logit of the hybrid input that keeps x inside S and the baseline outside.
pub struct CoalitionValue<'a> {
    model: &'a BaseClassifier,
    x: &'a [f32],
    baseline: &'a [f32],
    grouping: &'a FeatureGrouping,
    target_class: usize,
    scratch: ConvNetScratch,
    hybrid: Vec<f32>,
    pub evals: u64,
}

impl<'a> CoalitionValue<'a> {
    pub fn new(
        model: &'a BaseClassifier,
        x: &'a [f32],
        baseline: &'a [f32],
        grouping: &'a FeatureGrouping,
        target_class: usize,
    ) -> Self {
        CoalitionValue {
            model,
            x,
            baseline,
            grouping,
            target_class,
            scratch: model.scratch(),
            hybrid: vec![0.0f32; x.len()],
            evals: 0,
        }
    }

    pub fn value(&mut self, coalition: u64) -> f64 {
        self.evals += 1;
        self.grouping
            .mask_into(coalition, self.x, self.baseline, &mut self.hybrid);
        let logits = self.model.logits_into(&self.hybrid, &mut self.scratch);
        logits[self.target_class] as f64
    }
}

/// Midpoint-rule path integral of a gradient field from `baseline` to `x`:
/// per-coordinate (xᵢ−bᵢ)·(1/steps)·Σₜ gᵢ(b + (t−½)/steps·(x−b)), with f64
/// accumulation. Exact for gradients that are affine in the input.
pub fn integrate_gradients_raw(
    grad_fn: &mut dyn FnMut(&[f32], &mut [f32]),
    x: &[f32],
    baseline: &[f32],
    steps: usize,
) -> Vec<f64> {
    let n = x.len();
    let mut acc = vec![0.0f64; n];
    let mut point = vec![0.0f32; n];
    let mut grad = vec![0.0f32; n];
    for t in 1..=steps {
        let alpha = (t as f64 - 0.5) / steps as f64;
        for i in 0..n {
            point[i] = baseline[i] + (alpha as f32) * (x[i] - baseline[i]);
        }
        grad_fn(&point, &mut grad);
        for i in 0..n {
            acc[i] += grad[i] as f64;
        }
    }
    for i in 0..n {
        acc[i] *= (x[i] - baseline[i]) as f64 / steps as f64;
    }
    acc
}

/// Integrated gradients of the target-class logit, summed per feature group.
/// `steps ≥ 16` is the intended operating range; smaller values are allowed
/// because the midpoint rule is already exact for affine gradient fields.
pub fn integrated_gradients(
    model: &BaseClassifier,
    x: &Tensor,
    baseline: &BaselineSpec,
    grouping: &FeatureGrouping,
    target_class: usize,
    steps: usize,
) -> Result<AttributionMap> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    check_explained_input(model, x, baseline, grouping, target_class)?;
    let mut scratch = model.scratch();
    let mut grad_fn = |point: &[f32], grad: &mut [f32]| {
        model.class_score_gradient_into(point, target_class, &mut scratch, grad);
    };
    let per_pixel = integrate_gradients_raw(&mut grad_fn, x.data(), baseline.reference.data(), steps);
    count_evals(steps as u64);
    let per_pixel_f32: Vec<f32> = per_pixel.into_iter().map(|v| v as f32).collect();
    Ok(AttributionMap {
        sample_id: 0,
        group_values: grouping.sum_per_group(&per_pixel_f32),
        grouping: grouping.clone(),
        channels: x.shape()[0],
        target_class,
        method: AttributionMethod::IntegratedGradients,
        baseline_ref: baseline.digest(),
        normalized: false,
    })
}

/// First-order Taylor attribution (xᵢ−bᵢ)·∂f_c/∂xᵢ at x, summed per group.
pub fn gradient_x_input(
    model: &BaseClassifier,
    x: &Tensor,
    baseline: &BaselineSpec,
    grouping: &FeatureGrouping,
    target_class: usize,
) -> Result<AttributionMap> {
    check_explained_input(model, x, baseline, grouping, target_class)?;
    let grad = model.class_score_gradient(x, target_class)?;
    count_evals(1);
    let per_pixel: Vec<f32> = x
        .data()
        .iter()
        .zip(baseline.reference.data())
        .zip(grad.data())
        .map(|((&xi, &bi), &gi)| (xi - bi) * gi)
        .collect();
    Ok(AttributionMap {
        sample_id: 0,
        group_values: grouping.sum_per_group(&per_pixel),
        grouping: grouping.clone(),
        channels: x.shape()[0],
        target_class,
        method: AttributionMethod::GradientXInput,
        baseline_ref: baseline.digest(),
        normalized: false,
    })
}

fn check_explained_input(
    model: &BaseClassifier,
    x: &Tensor,
    baseline: &BaselineSpec,
    grouping: &FeatureGrouping,
    target_class: usize,
) -> Result<()> {
    if x.shape() != model.input_shape() {
        return Err(Error::Input(format!(
            "input shape {:?} does not match model shape {:?}",
            x.shape(),
            model.input_shape()
        )));
    }
    if baseline.reference.shape() != x.shape() {
        return Err(Error::Input(format!(
            "baseline shape {:?} does not match input shape {:?}",
            baseline.reference.shape(),
            x.shape()
        )));
    }
    let (h, w) = grouping.spatial_dims();
    if [x.shape()[1], x.shape()[2]] != [h, w] {
        return Err(Error::Input(format!(
            "grouping covers {h}×{w} but input is {}×{}",
            x.shape()[1],
            x.shape()[2]
        )));
    }
    if target_class >= model.num_classes() {
        return Err(Error::Input(format!(
            "target class {target_class} out of range for {} classes",
            model.num_classes()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset-level explanation with caching
// ---------------------------------------------------------------------------

/// Everything fixed across one explanation pass.
#[derive(Debug, Clone)]
pub struct ExplainSettings {
    pub method: AttributionMethod,
    pub target_policy: TargetPolicy,
    pub budget: usize,
    pub seed: u64,
    pub cache_dir: PathBuf,
}

/// Maps plus cache/compute accounting for one [`explain_dataset`] call.
#[derive(Debug)]
pub struct ExplainReport {
    pub maps: Vec<AttributionMap>,
    pub cache_hits: usize,
    pub cache_misses: usize,
    /// Model evaluations actually performed (0 on a fully cached pass).
    pub value_evals: u64,
    pub warnings: Vec<String>,
}

fn cache_key(
    model_hash: &str,
    sample_id: u64,
    settings: &ExplainSettings,
    target_class: usize,
    baseline_digest: &str,
    grouping_digest: &str,
) -> String {
    sha256_hex(
        format!(
            "model={model_hash}&sample={sample_id}&method={}&policy={}&target={target_class}\
             &baseline={baseline_digest}&grouping={grouping_digest}&budget={}&seed={}",
            settings.method.as_str(),
            settings.target_policy.as_str(),
            settings.budget,
            settings.seed,
        )
        .as_bytes(),
    )
}

/// One explanation per sample, with persistent caching keyed by everything
/// that determines the result. Cached raw scores are reused bit-identically;
/// the returned maps are normalized to max-absolute-value 1 per sample.
///
/// `labels` must be present when the target policy is `true_class`.
pub fn explain_dataset(
    model: &BaseClassifier,
    samples: &[Sample],
    labels: Option<&[usize]>,
    baseline: &BaselineSpec,
    grouping: &FeatureGrouping,
    settings: &ExplainSettings,
) -> Result<ExplainReport> {
    if settings.target_policy == TargetPolicy::TrueClass && labels.is_none() {
        return Err(Error::Config(
            "true_class target policy needs a labeled dataset".into(),
        ));
    }
    if let Some(labels) = labels {
        if labels.len() != samples.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
    }
    baseline.validate()?;
    std::fs::create_dir_all(&settings.cache_dir)?;

    let model_hash = model.checkpoint_hash();
    let baseline_digest = baseline.digest();
    let grouping_digest = grouping.digest();
    let g = grouping.num_groups();

    let mut report = ExplainReport {
        maps: Vec::with_capacity(samples.len()),
        cache_hits: 0,
        cache_misses: 0,
        value_evals: 0,
        warnings: Vec::new(),
    };

    for (idx, sample) in samples.iter().enumerate() {
        let target_class = match settings.target_policy {
            TargetPolicy::TrueClass => labels.unwrap()[idx],
            TargetPolicy::PredictedClass => model.predict_label(&sample.features)?.0,
        };
        if target_class >= model.num_classes() {
            return Err(Error::Input(format!(
                "sample {} targets class {target_class}, model has {}",
                sample.id,
                model.num_classes()
            )));
        }
        let key = cache_key(
            &model_hash,
            sample.id,
            settings,
            target_class,
            &baseline_digest,
            &grouping_digest,
        );
        let path = settings.cache_dir.join(format!("{key}.xai"));

        let mut raw: Option<Vec<f32>> = None;
        if path.exists() {
            match read_cache_file(&path) {
                Ok((header, payload)) if payload.len() == g => {
                    let _ = header;
                    raw = Some(payload);
                    report.cache_hits += 1;
                }
                Ok(_) => {
                    report
                        .warnings
                        .push(format!("cache entry {key} has wrong shape; recomputing"));
                }
                Err(e) => {
                    report
                        .warnings
                        .push(format!("cache entry {key} unreadable ({e}); recomputing"));
                }
            }
        }

        let raw = match raw {
            Some(r) => r,
            None => {
                let r = compute_raw(
                    model,
                    sample,
                    baseline,
                    grouping,
                    settings,
                    target_class,
                    &mut report.value_evals,
                )?;
                let header = json!({
                    "kind": "attribution",
                    "shape": [g],
                    "dtype": "f32",
                    "model_hash": model_hash,
                    "method": settings.method.as_str(),
                    "target_policy": settings.target_policy.as_str(),
                    "target_class": target_class,
                    "baseline_digest": baseline_digest,
                    "grouping_digest": grouping_digest,
                    "budget": settings.budget,
                    "seed": settings.seed,
                    "sample_id": sample.id,
                });
                write_cache_file(&path, &header, &r)?;
                report.cache_misses += 1;
                r
            }
        };

        let mut map = AttributionMap {
            sample_id: sample.id,
            group_values: raw,
            grouping: grouping.clone(),
            channels: sample.features.shape()[0],
            target_class,
            method: settings.method,
            baseline_ref: baseline_digest.clone(),
            normalized: false,
        };
        if !map.is_finite() {
            return Err(Error::Consistency(format!(
                "attribution for sample {} contains non-finite scores",
                sample.id
            )));
        }
        map.normalize();
        report.maps.push(map);
    }
    Ok(report)
}

/// Which samples already have a cache entry under these settings, resolved
/// the same way [`explain_dataset`] resolves them. Checks existence only;
/// a corrupt entry still counts as present and is repaired on the next
/// explain pass.
pub fn cache_coverage(
    model: &BaseClassifier,
    samples: &[Sample],
    labels: Option<&[usize]>,
    baseline: &BaselineSpec,
    grouping: &FeatureGrouping,
    settings: &ExplainSettings,
) -> Result<Vec<bool>> {
    if settings.target_policy == TargetPolicy::TrueClass && labels.is_none() {
        return Err(Error::Config(
            "true_class target policy needs a labeled dataset".into(),
        ));
    }
    if let Some(labels) = labels {
        if labels.len() != samples.len() {
            return Err(Error::Consistency(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
    }
    baseline.validate()?;
    let model_hash = model.checkpoint_hash();
    let baseline_digest = baseline.digest();
    let grouping_digest = grouping.digest();
    let mut present = Vec::with_capacity(samples.len());
    for (idx, sample) in samples.iter().enumerate() {
        let target_class = match settings.target_policy {
            TargetPolicy::TrueClass => labels.unwrap()[idx],
            TargetPolicy::PredictedClass => model.predict_label(&sample.features)?.0,
        };
        let key = cache_key(
            &model_hash,
            sample.id,
            settings,
            target_class,
            &baseline_digest,
            &grouping_digest,
        );
        present.push(settings.cache_dir.join(format!("{key}.xai")).exists());
    }
    Ok(present)
}

fn compute_raw(
    model: &BaseClassifier,
    sample: &Sample,
    baseline: &BaselineSpec,
    grouping: &FeatureGrouping,
    settings: &ExplainSettings,
    target_class: usize,
    eval_counter: &mut u64,
) -> Result<Vec<f32>> {
    let g = grouping.num_groups();
    match settings.method {
        AttributionMethod::ExactShapley => {
            let mut value = CoalitionValue::new(
                model,
                sample.features.data(),
                baseline.reference.data(),
                grouping,
                target_class,
            );
            let phi = exact_shapley(&mut |m| value.value(m), g)?;
            count_evals(value.evals);
            *eval_counter += value.evals;
            Ok(phi.into_iter().map(|v| v as f32).collect())
        }
        AttributionMethod::KernelShap => {
            let mut value = CoalitionValue::new(
                model,
                sample.features.data(),
                baseline.reference.data(),
                grouping,
                target_class,
            );
            let seed = derived_seed(settings.seed, &format!("kernel-shap:sample:{}", sample.id));
            let phi = kernel_shap(&mut |m| value.value(m), g, settings.budget, seed)?;
            count_evals(value.evals);
            *eval_counter += value.evals;
            Ok(phi.into_iter().map(|v| v as f32).collect())
        }
        AttributionMethod::IntegratedGradients => {
            let steps = settings.budget.max(1);
            let map = integrated_gradients(
                model,
                &sample.features,
                baseline,
                grouping,
                target_class,
                steps,
            )?;
            *eval_counter += steps as u64;
            Ok(map.group_values)
        }
        AttributionMethod::GradientXInput => {
            let map = gradient_x_input(model, &sample.features, baseline, grouping, target_class)?;
            *eval_counter += 1;
            Ok(map.group_values)
        }
    }
}
