//! Run orchestration: JSON experiment configs, run directories with
//! digest-tracked artifacts, and the pretrain → explain → train → evaluate →
//! ablate command pipeline the CLI fronts.
//!
//! Every command is a library function here so tests and the ablation grid
//! can drive them in-process. All reports are JSON with sorted keys and a
//! trailing newline, so identical runs produce byte-identical files.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::{
    cache_coverage, explain_dataset, AttributionMethod, BaselineMode, BaselineSpec,
    ExplainSettings, FeatureGrouping, TargetPolicy,
};
use crate::autoencoder::{
    run_autoencoder_strategy, AeStrategyConfig, AttributionEncoder, ExplanationAutoencoder,
    DEFAULT_LATENT_DIM,
};
use crate::container::atomic_write;
use crate::data::{
    generate_patch_dataset, load_idx, split, LabeledDataset, PatchDatasetSpec, UnlabeledDataset,
};
use crate::encoder_decoder::{
    assemble_ed_pipeline, run_encoder_decoder_strategy, write_history_sidecar, EdStrategyConfig,
    ExplanationEncoderDecoder, JointLossWeights,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, evaluate_baseline, per_class_delta, render_plane_pgm, reconstruction_cosine,
    DeltaSummary, EvalReport,
};
use crate::fusion::{FusionClassifier, ImpactxPredictor, LogitMode, FUSION_HIDDEN};
use crate::model::{BaseClassifier, TrainConfig};
use crate::util::{derived_seed, rng_from_seed, sha256_hex, shuffle};

/// Environment variable that relocates a run's explanation cache, letting
/// several runs share one content-keyed cache directory.
pub const CACHE_DIR_ENV: &str = "IMPACTX_CACHE_DIR";

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

fn default_distractor() -> f64 {
    0.5
}
fn default_noise() -> f64 {
    0.1
}
fn default_model_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f32 {
    1e-3
}
fn default_val_fraction() -> f64 {
    0.15
}
fn default_grouping_side() -> usize {
    3
}
fn default_budget() -> usize {
    2000
}
fn default_method() -> AttributionMethod {
    AttributionMethod::KernelShap
}
fn default_policy() -> TargetPolicy {
    TargetPolicy::TrueClass
}
fn default_baseline() -> BaselineMode {
    BaselineMode::Zero
}
fn default_latent_dim() -> usize {
    DEFAULT_LATENT_DIM
}
fn one() -> f32 {
    1.0
}
fn default_fine_tune() -> usize {
    5
}
fn default_strategy_epochs() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_patience() -> usize {
    5
}
fn default_fraction() -> f64 {
    1.0
}
fn default_similarity_samples() -> usize {
    64
}
fn default_saliency_count() -> usize {
    8
}

/// Synthetic patch-pattern generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    #[serde(default = "default_distractor")]
    pub distractor_strength: f64,
    #[serde(default = "default_noise")]
    pub label_noise: f64,
}

/// External IDX image/label file pairs for training and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub eval_images: PathBuf,
    pub eval_labels: PathBuf,
    pub num_classes: usize,
}

/// Exactly one data source must be set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSection>,
    /// Generator seed; defaults to a stream derived from the global seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Base-classifier training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_model_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    /// Fraction of the labeled pool held out as the model's validation set.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl ModelSection {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            early_stop_patience: self.early_stop_patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            epochs: default_model_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            early_stop_patience: default_patience(),
            val_fraction: default_val_fraction(),
        }
    }
}

/// Attribution method and its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XaiSection {
    #[serde(default = "default_method")]
    pub method: AttributionMethod,
    /// Squares per axis of the feature grouping (side × side groups).
    #[serde(default = "default_grouping_side")]
    pub grouping_side: usize,
    #[serde(default = "default_baseline")]
    pub baseline: BaselineMode,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_policy")]
    pub target_policy: TargetPolicy,
}

impl Default for XaiSection {
    fn default() -> Self {
        XaiSection {
            method: default_method(),
            grouping_side: default_grouping_side(),
            baseline: default_baseline(),
            budget: default_budget(),
            target_policy: default_policy(),
        }
    }
}

/// Which distillation strategy to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// Autoencoder distillation: explanation autoencoder, then an input
    /// encoder distilled onto its codes, then the fusion head.
    Ae,
    /// Joint encoder–decoder training against reconstruction plus
    /// classification.
    Ed,
}

impl Default for StrategyKind {
    fn default() -> Self {
        StrategyKind::Ed
    }
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Ae => "ae",
            StrategyKind::Ed => "ed",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ae" => Ok(StrategyKind::Ae),
            "ed" => Ok(StrategyKind::Ed),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?}; expected ae or ed"
            ))),
        }
    }
}

/// Strategy hyperparameters shared by both strategies; the joint-loss
/// weights only apply to `ed`, the fine-tune epochs only to `ae`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    #[serde(default)]
    pub kind: StrategyKind,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "one")]
    pub lambda_recon: f32,
    #[serde(default = "one")]
    pub lambda_cls: f32,
    #[serde(default = "default_fine_tune")]
    pub fine_tune_epochs: usize,
    #[serde(default = "default_strategy_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
}

impl StrategySection {
    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            early_stop_patience: self.early_stop_patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            kind: StrategyKind::default(),
            latent_dim: default_latent_dim(),
            lambda_recon: 1.0,
            lambda_cls: 1.0,
            fine_tune_epochs: default_fine_tune(),
            epochs: default_strategy_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            early_stop_patience: default_patience(),
        }
    }
}

/// Fusion-head settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSection {
    #[serde(default)]
    pub logit_mode: LogitMode,
    /// `false` trains a purely linear head (architecture ablation).
    #[serde(default = "default_true")]
    pub hidden_layer: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            logit_mode: LogitMode::default(),
            hidden_layer: true,
        }
    }
}

impl FusionSection {
    fn hidden(&self) -> Option<usize> {
        self.hidden_layer.then_some(FUSION_HIDDEN)
    }
}

/// Evaluation-stage knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluation samples used for the reconstructed-vs-direct explanation
    /// similarity statistic.
    #[serde(default = "default_similarity_samples")]
    pub similarity_samples: usize,
    /// Maximum number of corrected samples rendered as saliency PGMs.
    #[serde(default = "default_saliency_count")]
    pub saliency_count: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            similarity_samples: default_similarity_samples(),
            saliency_count: default_saliency_count(),
        }
    }
}

/// Everything one experiment needs, loaded from a JSON file and frozen into
/// the run directory. A single global `seed` drives every derived random
/// stream, so two configs differing only in `seed` are independent repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub xai: XaiSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub eval: EvalSection,
    /// Fraction of the training split the strategies may learn from.
    #[serde(default = "default_fraction")]
    pub impactx_train_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config schema: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.generator, &self.dataset.idx) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "dataset: exactly one of `generator` or `idx` must be set".into(),
                ))
            }
        }
        if !(self.impactx_train_fraction > 0.0 && self.impactx_train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "impactx_train_fraction must be in (0, 1], got {}",
                self.impactx_train_fraction
            )));
        }
        if self.xai.grouping_side < 2 {
            return Err(Error::Config(format!(
                "xai.grouping_side must be >= 2, got {}",
                self.xai.grouping_side
            )));
        }
        if self.strategy.latent_dim == 0 {
            return Err(Error::Config("strategy.latent_dim must be positive".into()));
        }
        if !(self.model.val_fraction > 0.0 && self.model.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "model.val_fraction must be in (0, 1), got {}",
                self.model.val_fraction
            )));
        }
        JointLossWeights {
            lambda_recon: self.strategy.lambda_recon,
            lambda_cls: self.strategy.lambda_cls,
        }
        .validate()?;
        Ok(())
    }

    fn ae_config(&self) -> AeStrategyConfig {
        let base = derived_seed(self.seed, "strategy");
        AeStrategyConfig {
            latent_dim: self.strategy.latent_dim,
            autoencoder: self.strategy.train_config(derived_seed(base, "autoencoder")),
            encoder: self.strategy.train_config(derived_seed(base, "encoder")),
            fusion: self.strategy.train_config(derived_seed(base, "fusion")),
            fine_tune_epochs: self.strategy.fine_tune_epochs,
            logit_mode: self.fusion.logit_mode,
            fusion_hidden: self.fusion.hidden(),
        }
    }

    fn ed_config(&self) -> EdStrategyConfig {
        EdStrategyConfig {
            latent_dim: self.strategy.latent_dim,
            weights: JointLossWeights {
                lambda_recon: self.strategy.lambda_recon,
                lambda_cls: self.strategy.lambda_cls,
            },
            train: self.strategy.train_config(derived_seed(self.seed, "strategy")),
            logit_mode: self.fusion.logit_mode,
            fusion_hidden: self.fusion.hidden(),
        }
    }
}

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

/// Serialize through `serde_json::Value` so object keys come out sorted,
/// pretty-printed with a trailing newline. Identical data gives identical
/// bytes, which the determinism guarantees lean on.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&value)?;
    s.push('\n');
    Ok(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, canonical_json(value)?.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

/// A run's on-disk layout: `config.json` (frozen at creation), plus
/// `checkpoints/`, `cache/`, `reports/` and `logs/`. `manifest.json` maps
/// every tracked artifact to its SHA-256, so later commands can detect
/// drift before trusting a file.
#[derive(Debug, Clone)]
pub struct RunDirectory {
    root: PathBuf,
}

const MANIFEST: &str = "manifest.json";
const CONFIG: &str = "config.json";
const MODEL_CKPT: &str = "checkpoints/model.ckpt";
const PREDICTOR: &str = "predictor.json";

impl RunDirectory {
    /// Create a fresh run directory. Refuses a non-empty existing directory
    /// rather than overwriting anything in it.
    pub fn create(root: &Path, config: &ExperimentConfig) -> Result<Self> {
        if root.exists() {
            let non_empty = fs::read_dir(root)?.next().is_some();
            if non_empty {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; refusing to overwrite",
                    root.display()
                )));
            }
        }
        for sub in ["checkpoints", "cache", "reports", "logs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let run = RunDirectory {
            root: root.to_path_buf(),
        };
        atomic_write(&run.root.join(CONFIG), canonical_json(config)?.as_bytes())?;
        run.write_manifest(&BTreeMap::new())?;
        run.record_artifact(CONFIG)?;
        Ok(run)
    }

    /// Open an existing run directory.
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(CONFIG).is_file() {
            return Err(Error::Config(format!(
                "{} is not a run directory (no config.json)",
                root.display()
            )));
        }
        Ok(RunDirectory {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let config: ExperimentConfig = read_json(&self.root.join(CONFIG))?;
        config.validate()?;
        Ok(config)
    }

    /// Digest of the frozen config file; embedded in every report.
    pub fn config_digest(&self) -> Result<String> {
        Ok(sha256_hex(&fs::read(self.root.join(CONFIG))?))
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Explanation cache location; `IMPACTX_CACHE_DIR` overrides the
    /// default `cache/` subdirectory so runs can share one cache.
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var(CACHE_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.root.join("cache"),
        }
    }

    pub fn manifest(&self) -> Result<BTreeMap<String, String>> {
        let value: Value = read_json(&self.root.join(MANIFEST))?;
        let map = value
            .get("artifacts")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Format("manifest.json has no artifacts object".into()))?;
        Ok(map
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
            .collect())
    }

    fn write_manifest(&self, artifacts: &BTreeMap<String, String>) -> Result<()> {
        write_json(&self.root.join(MANIFEST), &json!({ "artifacts": artifacts }))
    }

    /// Record (or refresh) one artifact's digest in the manifest. `rel` is
    /// the path relative to the run root, with forward slashes.
    pub fn record_artifact(&self, rel: &str) -> Result<()> {
        let digest = sha256_hex(&fs::read(self.root.join(rel))?);
        let mut artifacts = self.manifest()?;
        artifacts.insert(rel.to_string(), digest);
        self.write_manifest(&artifacts)
    }

    /// Verify one artifact against its manifest digest; any drift is an
    /// integrity failure (exit code 6 at the CLI).
    pub fn verify_artifact(&self, rel: &str) -> Result<()> {
        let artifacts = self.manifest()?;
        let recorded = artifacts.get(rel).ok_or_else(|| Error::Stage {
            exit_code: 6,
            message: format!("artifact {rel} is not recorded in the manifest"),
        })?;
        let actual = sha256_hex(&fs::read(self.root.join(rel))?);
        if &actual != recorded {
            return Err(Error::Stage {
                exit_code: 6,
                message: format!(
                    "artifact {rel} has drifted: manifest records {recorded}, file digests {actual}"
                ),
            });
        }
        Ok(())
    }

    fn log(&self, command: &str, line: &str) -> Result<()> {
        use std::io::Write;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.logs_dir().join(format!("{command}.log")))?;
        writeln!(file, "{line}")?;
        Ok(())
    }
}

/// Map an error to the fixed process exit code: 0 ok, 2 config, 3 training,
/// 4–7 stage-specific, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Stage { exit_code, .. } => *exit_code,
        Error::Config(_) | Error::Format(_) | Error::Json(_) | Error::Capacity(_) => 2,
        Error::TrainingDiverged { .. } | Error::Training(_) => 3,
        Error::Integrity(_) => 6,
        _ => 1,
    }
}

// ---------------------------------------------------------------------------
// Dataset materialization
// ---------------------------------------------------------------------------

struct Materialized {
    train: LabeledDataset,
    val: LabeledDataset,
    eval_set: UnlabeledDataset,
}

/// Rebuild the datasets a config describes. Generation and splitting are
/// seed-deterministic, so every command sees the same data without the run
/// directory persisting it.
fn materialize(config: &ExperimentConfig) -> Result<Materialized> {
    let (pool, eval_set) = match (&config.dataset.generator, &config.dataset.idx) {
        (Some(gen), None) => {
            let spec = PatchDatasetSpec {
                num_classes: gen.num_classes,
                samples_per_class: gen.samples_per_class,
                image_side: gen.image_side,
                distractor_strength: gen.distractor_strength,
                label_noise: gen.label_noise,
                seed: config
                    .dataset
                    .seed
                    .unwrap_or_else(|| derived_seed(config.seed, "dataset")),
            };
            let (pool, eval_set, _masks) = generate_patch_dataset(&spec)?;
            (pool, eval_set)
        }
        (None, Some(idx)) => {
            let mut pool = load_idx(&idx.train_images, &idx.train_labels)?;
            let eval = load_idx(&idx.eval_images, &idx.eval_labels)?;
            if pool.num_classes > idx.num_classes || eval.num_classes > idx.num_classes {
                return Err(Error::Config(format!(
                    "dataset.idx.num_classes = {} but the files contain labels up to {}",
                    idx.num_classes,
                    pool.num_classes.max(eval.num_classes) - 1
                )));
            }
            pool.num_classes = idx.num_classes;
            let eval_set =
                UnlabeledDataset::new(eval.samples, Some(eval.labels), idx.num_classes)?;
            (pool, eval_set)
        }
        _ => unreachable!("validated"),
    };
    let (train, val) = split(
        &pool,
        config.model.val_fraction,
        derived_seed(config.seed, "model:val"),
    )?;
    Ok(Materialized {
        train,
        val,
        eval_set,
    })
}

fn grouping_for(config: &ExperimentConfig, shape: &[usize]) -> Result<FeatureGrouping> {
    FeatureGrouping::grid(shape[1], shape[2], config.xai.grouping_side)
}

fn baseline_for(config: &ExperimentConfig, train: &LabeledDataset) -> Result<BaselineSpec> {
    match config.xai.baseline {
        BaselineMode::Zero => Ok(BaselineSpec::zero(train.feature_shape())),
        BaselineMode::DatasetMean => BaselineSpec::dataset_mean(train),
    }
}

fn explain_settings(config: &ExperimentConfig, cache_dir: PathBuf) -> ExplainSettings {
    ExplainSettings {
        method: config.xai.method,
        target_policy: config.xai.target_policy,
        budget: config.xai.budget,
        seed: derived_seed(config.seed, "xai"),
        cache_dir,
    }
}

fn load_model(run: &RunDirectory) -> Result<BaseClassifier> {
    let path = run.root().join(MODEL_CKPT);
    if !path.is_file() {
        return Err(Error::Stage {
            exit_code: 4,
            message: format!(
                "missing model checkpoint {}; run the pretrain command first",
                path.display()
            ),
        });
    }
    run.verify_artifact(MODEL_CKPT)?;
    BaseClassifier::load_checkpoint(&path)
}

// ---------------------------------------------------------------------------
// Training-fraction subset
// ---------------------------------------------------------------------------

/// Deterministic stratified subset of exactly `⌈fraction·n⌉` indices.
/// Seats are apportioned per class by largest remainder, then every
/// represented class is guaranteed at least one seat (taking from the
/// largest class) so downstream class-coverage requirements hold.
pub fn stratified_subset(
    labels: &[usize],
    num_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    if labels.is_empty() {
        return Err(Error::Config("cannot subset an empty label set".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_classes {
            return Err(Error::Consistency(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        by_class[l].push(i);
    }
    let n = labels.len();
    let total = ((fraction * n as f64).ceil() as usize).min(n);

    // Largest-remainder apportionment of `total` seats.
    let mut seats: Vec<usize> = Vec::with_capacity(num_classes);
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(num_classes);
    for (k, members) in by_class.iter().enumerate() {
        let quota = fraction * members.len() as f64;
        let floor = quota.floor() as usize;
        seats.push(floor.min(members.len()));
        remainders.push((quota - floor as f64, k));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut assigned: usize = seats.iter().sum();
    let mut cursor = 0;
    while assigned < total {
        let (_, k) = remainders[cursor % remainders.len()];
        if seats[k] < by_class[k].len() {
            seats[k] += 1;
            assigned += 1;
        }
        cursor += 1;
    }
    // Guarantee one seat per represented class, funded by the largest class.
    loop {
        let Some(starved) = (0..num_classes).find(|&k| !by_class[k].is_empty() && seats[k] == 0)
        else {
            break;
        };
        let donor = (0..num_classes)
            .max_by_key(|&k| seats[k])
            .expect("num_classes > 0");
        if seats[donor] < 2 {
            break; // not enough seats to cover every class
        }
        seats[donor] -= 1;
        seats[starved] += 1;
    }

    let mut chosen = Vec::with_capacity(total);
    for (k, members) in by_class.iter().enumerate() {
        let mut order = members.clone();
        shuffle(
            &mut order,
            &mut rng_from_seed(derived_seed(seed, &format!("class:{k}"))),
        );
        chosen.extend_from_slice(&order[..seats[k]]);
    }
    chosen.sort_unstable();
    debug_assert_eq!(chosen.len(), total);
    Ok(chosen)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct PretrainSummary {
    pub run: RunDirectory,
    pub model_hash: String,
    pub baseline_accuracy: f64,
    pub epochs_run: usize,
}

/// Create the run directory, train and freeze the base model, and write its
/// baseline evaluation report.
pub fn run_pretrain(config: &ExperimentConfig, out: &Path) -> Result<PretrainSummary> {
    config.validate()?;
    let run = RunDirectory::create(out, config)?;
    let data = materialize(config)?;
    let train_cfg = config.model.train_config(derived_seed(config.seed, "model"));
    let model = BaseClassifier::pretrain(&data.train, &data.val, &train_cfg)?;
    model.save_checkpoint(&run.root().join(MODEL_CKPT))?;
    run.record_artifact(MODEL_CKPT)?;

    let mut report = evaluate_baseline(&model, &data.eval_set)?;
    report.seed = config.seed;
    report.config_digest = run.config_digest()?;
    write_json(&run.reports_dir().join("baseline.json"), &report)?;
    run.record_artifact("reports/baseline.json")?;

    run.log(
        "pretrain",
        &format!(
            "model hash={} epochs={} baseline_accuracy={:.6}",
            model.checkpoint_hash(),
            model.history().len(),
            report.accuracy
        ),
    )?;
    Ok(PretrainSummary {
        run,
        model_hash: model.checkpoint_hash(),
        baseline_accuracy: report.accuracy,
        epochs_run: model.history().len(),
    })
}

/// `cmd_pretrain --config PATH --out DIR`.
pub fn cmd_pretrain(config_path: &Path, out: &Path) -> Result<PretrainSummary> {
    let config = ExperimentConfig::from_path(config_path)?;
    run_pretrain(&config, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            other => Err(Error::Config(format!(
                "unknown split {other:?}; expected train or val"
            ))),
        }
    }
}

#[derive(Debug)]
pub struct ExplainSummary {
    pub split: SplitKind,
    pub total: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
    pub value_evals: u64,
    pub sample_ids: Vec<u64>,
    pub warnings: Vec<String>,
}

/// `cmd_explain --run DIR --split {train,val}`: populate the explanation
/// cache for the chosen split. Idempotent; a second invocation is all cache
/// hits.
pub fn cmd_explain(run_root: &Path, split: SplitKind) -> Result<ExplainSummary> {
    let run = RunDirectory::open(run_root)?;
    let config = run.config()?;
    let model = load_model(&run)?;
    let data = materialize(&config)?;
    let part = match split {
        SplitKind::Train => &data.train,
        SplitKind::Val => &data.val,
    };
    let grouping = grouping_for(&config, part.feature_shape())?;
    let baseline = baseline_for(&config, &data.train)?;
    let settings = explain_settings(&config, run.cache_dir());
    let report = explain_dataset(
        &model,
        &part.samples,
        Some(&part.labels),
        &baseline,
        &grouping,
        &settings,
    )?;
    run.log(
        "explain",
        &format!(
            "split={} total={} hits={} misses={} value_evals={}",
            split.as_str(),
            report.maps.len(),
            report.cache_hits,
            report.cache_misses,
            report.value_evals
        ),
    )?;
    Ok(ExplainSummary {
        split,
        total: report.maps.len(),
        cache_hits: report.cache_hits,
        cache_misses: report.cache_misses,
        value_evals: report.value_evals,
        sample_ids: report.maps.iter().map(|m| m.sample_id).collect(),
        warnings: report.warnings,
    })
}

/// What `cmd_train_impactx` wrote: the strategy actually trained, the
/// subset it trained on, and the checkpoint files with their kinds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorManifest {
    pub strategy: StrategyKind,
    pub latent_dim: usize,
    pub logit_mode: LogitMode,
    pub model_hash: String,
    pub train_fraction: f64,
    pub train_ids: Vec<u64>,
    /// Checkpoint path (relative to the run root) → container kind.
    pub components: BTreeMap<String, String>,
    pub config_digest: String,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub strategy: StrategyKind,
    pub train_ids: Vec<u64>,
    pub model_hash: String,
    pub components: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

/// `cmd_train_impactx --run DIR [--strategy {ae,ed}]`: train the selected
/// strategy on the cached explanations of the deterministic training-
/// fraction subset, and write its checkpoints plus `predictor.json`.
pub fn cmd_train_impactx(run_root: &Path, strategy: Option<StrategyKind>) -> Result<TrainSummary> {
    let run = RunDirectory::open(run_root)?;
    let config = run.config()?;
    if run.root().join(PREDICTOR).exists() {
        return Err(Error::Config(format!(
            "{} already holds trained strategy artifacts; use a fresh run directory",
            run_root.display()
        )));
    }
    let model = load_model(&run)?;
    let hash_before = model.checkpoint_hash();
    let data = materialize(&config)?;

    let subset_idx = stratified_subset(
        &data.train.labels,
        data.train.num_classes,
        config.impactx_train_fraction,
        derived_seed(config.seed, "subset"),
    )?;
    let subset = LabeledDataset::new(
        subset_idx.iter().map(|&i| data.train.samples[i].clone()).collect(),
        subset_idx.iter().map(|&i| data.train.labels[i]).collect(),
        data.train.num_classes,
        data.train.split_tag,
    )?;

    let grouping = grouping_for(&config, subset.feature_shape())?;
    let baseline = baseline_for(&config, &data.train)?;
    let settings = explain_settings(&config, run.cache_dir());
    let coverage = cache_coverage(
        &model,
        &subset.samples,
        Some(&subset.labels),
        &baseline,
        &grouping,
        &settings,
    )?;
    let missing = coverage.iter().filter(|&&c| !c).count();
    if missing > 0 {
        return Err(Error::Stage {
            exit_code: 5,
            message: format!(
                "{missing} of {} training explanations are not cached; \
                 run the explain command for the train split first",
                coverage.len()
            ),
        });
    }
    let maps = explain_dataset(
        &model,
        &subset.samples,
        Some(&subset.labels),
        &baseline,
        &grouping,
        &settings,
    )?
    .maps;

    let kind = strategy.unwrap_or(config.strategy.kind);
    let mut components: BTreeMap<String, String> = BTreeMap::new();
    let mut warnings = Vec::new();
    match kind {
        StrategyKind::Ed => {
            let artifacts =
                run_encoder_decoder_strategy(&model, &subset, &maps, &config.ed_config())?;
            let ckpt = run.checkpoints_dir();
            artifacts
                .encoder_decoder
                .save_checkpoint(&ckpt.join("encoder_decoder.ckpt"))?;
            artifacts.fusion.save_checkpoint(&ckpt.join("fusion.ckpt"))?;
            write_history_sidecar(
                &ckpt.join("encoder_decoder.history.json"),
                &artifacts.history,
            )?;
            components.insert(
                "checkpoints/encoder_decoder.ckpt".into(),
                "encoder_decoder".into(),
            );
            components.insert("checkpoints/fusion.ckpt".into(), "fusion_classifier".into());
            run.record_artifact("checkpoints/encoder_decoder.history.json")?;
        }
        StrategyKind::Ae => {
            let artifacts = run_autoencoder_strategy(&model, &subset, &maps, &config.ae_config())?;
            let ckpt = run.checkpoints_dir();
            artifacts
                .autoencoder
                .save_checkpoint(&ckpt.join("autoencoder.ckpt"))?;
            artifacts
                .encoder
                .save_checkpoint(&ckpt.join("attribution_encoder.ckpt"))?;
            artifacts.fusion.save_checkpoint(&ckpt.join("fusion.ckpt"))?;
            components.insert("checkpoints/autoencoder.ckpt".into(), "autoencoder".into());
            components.insert(
                "checkpoints/attribution_encoder.ckpt".into(),
                "attribution_encoder".into(),
            );
            components.insert("checkpoints/fusion.ckpt".into(), "fusion_classifier".into());
            warnings = artifacts.warnings;
        }
    }
    for rel in components.keys() {
        run.record_artifact(rel)?;
    }

    if model.checkpoint_hash() != hash_before {
        return Err(Error::Stage {
            exit_code: 6,
            message: "base model hash drifted during strategy training".into(),
        });
    }

    let manifest = PredictorManifest {
        strategy: kind,
        latent_dim: config.strategy.latent_dim,
        logit_mode: config.fusion.logit_mode,
        model_hash: hash_before.clone(),
        train_fraction: config.impactx_train_fraction,
        train_ids: subset.samples.iter().map(|s| s.id).collect(),
        components: components.clone(),
        config_digest: run.config_digest()?,
    };
    write_json(&run.root().join(PREDICTOR), &manifest)?;
    run.record_artifact(PREDICTOR)?;
    run.log(
        "train",
        &format!(
            "strategy={} subset={} components={}",
            kind.as_str(),
            manifest.train_ids.len(),
            components.len()
        ),
    )?;
    Ok(TrainSummary {
        strategy: kind,
        train_ids: manifest.train_ids,
        model_hash: hash_before,
        components,
        warnings,
    })
}

/// Rebuild the fused predictor from a run's checkpoints, verifying digests
/// and the frozen-model hash along the way.
pub fn load_predictor(run: &RunDirectory, model: &BaseClassifier) -> Result<(PredictorManifest, ImpactxPredictor)> {
    let path = run.root().join(PREDICTOR);
    if !path.is_file() {
        return Err(Error::Stage {
            exit_code: 4,
            message: format!(
                "missing {}; run the train command first",
                path.display()
            ),
        });
    }
    run.verify_artifact(PREDICTOR)?;
    let manifest: PredictorManifest = read_json(&path)?;
    if manifest.model_hash != model.checkpoint_hash() {
        return Err(Error::Stage {
            exit_code: 6,
            message: format!(
                "predictor was trained against model {}, but the checkpoint digests {}",
                manifest.model_hash,
                model.checkpoint_hash()
            ),
        });
    }
    for rel in manifest.components.keys() {
        run.verify_artifact(rel)?;
    }
    let ckpt = run.checkpoints_dir();
    let fusion = FusionClassifier::load_checkpoint(&ckpt.join("fusion.ckpt"))?;
    let predictor = match manifest.strategy {
        StrategyKind::Ed => {
            let ed = ExplanationEncoderDecoder::load_checkpoint(&ckpt.join("encoder_decoder.ckpt"))?;
            assemble_ed_pipeline(model, &ed, &fusion)?
        }
        StrategyKind::Ae => {
            let ae = ExplanationAutoencoder::load_checkpoint(&ckpt.join("autoencoder.ckpt"))?;
            let enc = AttributionEncoder::load_checkpoint(&ckpt.join("attribution_encoder.ckpt"))?;
            ImpactxPredictor::new(
                model.clone(),
                enc.net().clone(),
                ae.decoder().clone(),
                fusion,
            )?
        }
    };
    Ok((manifest, predictor))
}

/// Reconstructed-vs-direct explanation similarity on a seeded sample of the
/// evaluation set, with a permuted-pairing baseline for scale.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityStats {
    pub samples: usize,
    pub mean_cosine: f64,
    pub permuted_mean_cosine: f64,
    pub margin: f64,
    pub degenerate: usize,
}

fn similarity_stats(
    config: &ExperimentConfig,
    run: &RunDirectory,
    model: &BaseClassifier,
    predictor: &ImpactxPredictor,
    data: &Materialized,
) -> Result<SimilarityStats> {
    let eval_set = &data.eval_set;
    let labels = eval_set
        .hidden_labels()
        .expect("evaluate() already required revealed labels");
    let count = config.eval.similarity_samples.min(eval_set.len());
    if count == 0 {
        return Ok(SimilarityStats {
            samples: 0,
            mean_cosine: 0.0,
            permuted_mean_cosine: 0.0,
            margin: 0.0,
            degenerate: 0,
        });
    }
    let mut order: Vec<usize> = (0..eval_set.len()).collect();
    shuffle(
        &mut order,
        &mut rng_from_seed(derived_seed(config.seed, "eval:similarity")),
    );
    let mut picked: Vec<usize> = order[..count].to_vec();
    picked.sort_unstable();

    let samples: Vec<_> = picked.iter().map(|&i| eval_set.samples[i].clone()).collect();
    let sample_labels: Vec<usize> = picked.iter().map(|&i| labels[i]).collect();
    let grouping = grouping_for(config, data.train.feature_shape())?;
    let baseline = baseline_for(config, &data.train)?;
    // Direct explanations always target the true class here — this statistic
    // asks whether the decoder reproduces the class-conditioned explanation.
    let mut settings = explain_settings(config, run.cache_dir());
    settings.target_policy = TargetPolicy::TrueClass;
    let maps = explain_dataset(
        model,
        &samples,
        Some(&sample_labels),
        &baseline,
        &grouping,
        &settings,
    )?
    .maps;

    let mut scratch = predictor.scratch();
    let mut recons = Vec::with_capacity(count);
    for sample in &samples {
        recons.push(predictor.reconstruct_into(&sample.features, &mut scratch)?);
    }
    // The mismatched pairing walks a seeded random cycle over the picked
    // samples. Picked ids are sorted (and eval ids cluster by class), so a
    // plain i→i+1 shift would mostly pair same-class samples and overstate
    // the baseline statistic.
    let mut cycle: Vec<usize> = (0..count).collect();
    shuffle(
        &mut cycle,
        &mut rng_from_seed(derived_seed(config.seed, "eval:similarity:pairing")),
    );
    let mut partner = vec![0usize; count];
    for k in 0..count {
        partner[cycle[k]] = cycle[(k + 1) % count];
    }
    let mut mean = 0.0;
    let mut permuted_mean = 0.0;
    let mut degenerate = 0;
    for i in 0..count {
        let direct = reconstruction_cosine(&recons[i], &maps[i])?;
        let shifted = reconstruction_cosine(&recons[i], &maps[partner[i]])?;
        if direct.degenerate || shifted.degenerate {
            degenerate += 1;
        }
        mean += direct.value;
        permuted_mean += shifted.value;
    }
    mean /= count as f64;
    permuted_mean /= count as f64;
    Ok(SimilarityStats {
        samples: count,
        mean_cosine: mean,
        permuted_mean_cosine: permuted_mean,
        margin: mean - permuted_mean,
        degenerate,
    })
}

#[derive(Debug)]
pub struct EvaluateSummary {
    pub baseline_accuracy: f64,
    pub impactx_accuracy: f64,
    pub difference: f64,
    pub corrected: usize,
    pub broken: usize,
    pub delta_summary: DeltaSummary,
    pub similarity: SimilarityStats,
    pub saliency_files: Vec<PathBuf>,
}

/// `cmd_evaluate --run DIR`: evaluate the trained predictor against the
/// baseline report and write `reports/impactx.json`, `comparison.json`,
/// confusion CSVs, flip lists, and saliency renderings of the top corrected
/// samples. Deterministic: a rerun rewrites byte-identical reports.
pub fn cmd_evaluate(run_root: &Path) -> Result<EvaluateSummary> {
    let run = RunDirectory::open(run_root)?;
    let config = run.config()?;
    let baseline_path = run.reports_dir().join("baseline.json");
    if !baseline_path.is_file() {
        return Err(Error::Stage {
            exit_code: 7,
            message: format!(
                "missing baseline report {}; run the pretrain command first",
                baseline_path.display()
            ),
        });
    }
    let baseline_report: EvalReport = read_json(&baseline_path)?;
    let model = load_model(&run)?;
    if baseline_report.model_hash != model.checkpoint_hash() {
        return Err(Error::Stage {
            exit_code: 6,
            message: "baseline report was produced by a different model checkpoint".into(),
        });
    }
    let (manifest, predictor) = load_predictor(&run, &model)?;
    let data = materialize(&config)?;

    let mut impactx_report = evaluate(&predictor, &data.eval_set)?;
    impactx_report.seed = config.seed;
    impactx_report.config_digest = run.config_digest()?;
    write_json(&run.reports_dir().join("impactx.json"), &impactx_report)?;

    let deltas = per_class_delta(&baseline_report, &impactx_report)?;
    let delta_summary = DeltaSummary::new(deltas);
    let flip = impactx_report.flip.clone();

    atomic_write(
        &run.reports_dir().join("confusion_baseline.csv"),
        baseline_report.confusion.to_csv().as_bytes(),
    )?;
    atomic_write(
        &run.reports_dir().join("confusion_impactx.csv"),
        impactx_report.confusion.to_csv().as_bytes(),
    )?;
    write_json(
        &run.reports_dir().join("flips.json"),
        &json!({
            "corrected": flip.corrected,
            "broken": flip.broken,
            "unchanged_right": flip.unchanged_right,
            "unchanged_wrong": flip.unchanged_wrong,
            "delta_correct": flip.delta_correct(),
        }),
    )?;

    let similarity = similarity_stats(&config, &run, &model, &predictor, &data)?;

    // Saliency renderings of the most confidently corrected samples.
    let saliency_dir = run.reports_dir().join("saliency");
    let mut saliency_files = Vec::new();
    if !flip.corrected.is_empty() {
        fs::create_dir_all(&saliency_dir)?;
        let by_id: HashMap<u64, usize> = data
            .eval_set
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id, i))
            .collect();
        let mut scratch = predictor.scratch();
        let mut ranked: Vec<(f64, u64)> = Vec::new();
        for &id in &flip.corrected {
            let sample = &data.eval_set.samples[by_id[&id]];
            let pred = predictor.predict_into(&sample.features, &mut scratch)?;
            ranked.push((pred.probabilities[pred.class] as f64, id));
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        ranked.truncate(config.eval.saliency_count);
        let [_, h, w] = model.input_shape();
        for &(_, id) in &ranked {
            let sample = &data.eval_set.samples[by_id[&id]];
            let recon = predictor.reconstruct_into(&sample.features, &mut scratch)?;
            let pgm = render_plane_pgm(&recon.data()[..h * w], h, w)?;
            let path = saliency_dir.join(format!("corrected_{id:06}.pgm"));
            atomic_write(&path, &pgm)?;
            saliency_files.push(path);
        }
    }

    let difference = impactx_report.accuracy - baseline_report.accuracy;
    let comparison = json!({
        "baseline_accuracy": baseline_report.accuracy,
        "impactx_accuracy": impactx_report.accuracy,
        "difference": difference,
        "per_class_delta": delta_summary.deltas,
        "delta_summary": {
            "min": delta_summary.min,
            "max": delta_summary.max,
            "spread": delta_summary.spread,
        },
        "flip": {
            "corrected": flip.corrected,
            "broken": flip.broken,
            "unchanged_right": flip.unchanged_right,
            "unchanged_wrong": flip.unchanged_wrong,
            "delta_correct": flip.delta_correct(),
        },
        "explanation_similarity": similarity,
        "num_samples": impactx_report.num_samples,
        "num_classes": impactx_report.num_classes,
        "eval_set_digest": impactx_report.eval_set_digest,
        "seed": config.seed,
        "provenance": {
            "config_digest": run.config_digest()?,
            "model_hash": model.checkpoint_hash(),
            "strategy": manifest.strategy,
            "components": manifest.components,
            "train_fraction": manifest.train_fraction,
            "xai": {
                "method": config.xai.method,
                "grouping_side": config.xai.grouping_side,
                "budget": config.xai.budget,
                "target_policy": config.xai.target_policy,
                "seed": derived_seed(config.seed, "xai"),
            },
        },
    });
    write_json(&run.reports_dir().join("comparison.json"), &comparison)?;
    for rel in [
        "reports/impactx.json",
        "reports/comparison.json",
        "reports/confusion_baseline.csv",
        "reports/confusion_impactx.csv",
        "reports/flips.json",
    ] {
        run.record_artifact(rel)?;
    }

    run.log(
        "evaluate",
        &format!(
            "baseline={:.6} impactx={:.6} corrected={} broken={}",
            baseline_report.accuracy,
            impactx_report.accuracy,
            flip.corrected.len(),
            flip.broken.len()
        ),
    )?;
    Ok(EvaluateSummary {
        baseline_accuracy: baseline_report.accuracy,
        impactx_accuracy: impactx_report.accuracy,
        difference,
        corrected: flip.corrected.len(),
        broken: flip.broken.len(),
        delta_summary,
        similarity,
        saliency_files,
    })
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

/// Finite value lists whose cross product defines the ablation rows; each
/// row is averaged over `seeds`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub methods: Vec<AttributionMethod>,
    pub strategies: Vec<StrategyKind>,
    pub latent_dims: Vec<usize>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("methods", self.methods.is_empty()),
            ("strategies", self.strategies.is_empty()),
            ("latent_dims", self.latent_dims.is_empty()),
            ("fractions", self.fractions.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(Error::Config(format!("ablation grid field `{name}` is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct AblationSummary {
    pub rows: usize,
    pub failures: usize,
    pub csv_path: PathBuf,
}

fn csv_field(value: Option<f64>) -> String {
    value.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// `cmd_ablate --config PATH --grid PATH --out DIR`: run the full pipeline
/// for every (method × strategy × latent_dim × fraction) combination,
/// averaging accuracies over the grid's seeds. A failing combination is
/// recorded as an error row; it does not abort the grid.
pub fn cmd_ablate(config_path: &Path, grid_path: &Path, out: &Path) -> Result<AblationSummary> {
    let base = ExperimentConfig::from_path(config_path)?;
    let grid: AblationGrid = read_json(grid_path).map_err(|e| match e {
        Error::Json(e) => Error::Config(format!("grid schema: {e}")),
        other => other,
    })?;
    grid.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::Config(format!(
            "output directory {} is not empty; refusing to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(out)?;

    let mut csv = String::from(
        "method,strategy,latent_dim,fraction,seeds,status,baseline_accuracy,impactx_accuracy,delta,note\n",
    );
    let mut rows = 0;
    let mut failures = 0;
    for &method in &grid.methods {
        for &strategy in &grid.strategies {
            for &latent_dim in &grid.latent_dims {
                for &fraction in &grid.fractions {
                    let mut baseline_sum = 0.0;
                    let mut impactx_sum = 0.0;
                    let mut note = String::new();
                    let mut ok = true;
                    for &seed in &grid.seeds {
                        let mut config = base.clone();
                        config.xai.method = method;
                        config.strategy.kind = strategy;
                        config.strategy.latent_dim = latent_dim;
                        config.impactx_train_fraction = fraction;
                        config.seed = seed;
                        let dir = out.join(format!("runs/row{rows:03}/seed{seed}"));
                        let result = (|| -> Result<EvaluateSummary> {
                            run_pretrain(&config, &dir)?;
                            cmd_explain(&dir, SplitKind::Train)?;
                            cmd_train_impactx(&dir, None)?;
                            cmd_evaluate(&dir)
                        })();
                        match result {
                            Ok(summary) => {
                                baseline_sum += summary.baseline_accuracy;
                                impactx_sum += summary.impactx_accuracy;
                            }
                            Err(e) => {
                                ok = false;
                                note = e.to_string().replace([',', '\n'], ";");
                                break;
                            }
                        }
                    }
                    let n = grid.seeds.len() as f64;
                    let (base_acc, imp_acc, delta) = if ok {
                        let b = baseline_sum / n;
                        let i = impactx_sum / n;
                        (Some(b), Some(i), Some(i - b))
                    } else {
                        failures += 1;
                        (None, None, None)
                    };
                    let seeds_str = grid
                        .seeds
                        .iter()
                        .map(|s| s.to_string())
                        .collect::<Vec<_>>()
                        .join(";");
                    csv.push_str(&format!(
                        "{},{},{},{},{},{},{},{},{},{}\n",
                        method.as_str(),
                        strategy.as_str(),
                        latent_dim,
                        fraction,
                        seeds_str,
                        if ok { "ok" } else { "error" },
                        csv_field(base_acc),
                        csv_field(imp_acc),
                        csv_field(delta),
                        note
                    ));
                    rows += 1;
                }
            }
        }
    }
    let csv_path = out.join("ablation.csv");
    atomic_write(&csv_path, csv.as_bytes())?;
    Ok(AblationSummary {
        rows,
        failures,
        csv_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSection {
                generator: Some(GeneratorSection {
                    num_classes: 2,
                    samples_per_class: 10,
                    image_side: 8,
                    distractor_strength: 0.3,
                    label_noise: 0.0,
                }),
                idx: None,
                seed: None,
            },
            model: ModelSection {
                epochs: 2,
                batch_size: 8,
                learning_rate: 1e-3,
                early_stop_patience: 5,
                val_fraction: 0.2,
            },
            xai: XaiSection {
                method: AttributionMethod::GradientXInput,
                grouping_side: 2,
                baseline: BaselineMode::Zero,
                budget: 16,
                target_policy: TargetPolicy::TrueClass,
            },
            strategy: StrategySection {
                kind: StrategyKind::Ed,
                latent_dim: 4,
                lambda_recon: 1.0,
                lambda_cls: 1.0,
                fine_tune_epochs: 2,
                epochs: 3,
                batch_size: 8,
                learning_rate: 1e-3,
                early_stop_patience: 5,
            },
            fusion: FusionSection::default(),
            eval: EvalSection {
                similarity_samples: 4,
                saliency_count: 2,
            },
            impactx_train_fraction: 1.0,
            seed,
        }
    }

    #[test]
    fn config_schema_errors_name_fields() {
        let err = serde_json::from_str::<ExperimentConfig>("{\"seed\": 1}").unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");

        let err =
            serde_json::from_str::<ExperimentConfig>("{\"dataset\": {}, \"bogus\": 1}").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        let mut config = tiny_config(0);
        config.impactx_train_fraction = 0.0;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("impactx_train_fraction"), "{err}");
        assert_eq!(exit_code(&err), 2);

        let mut config = tiny_config(0);
        config.dataset.generator = None;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("dataset"), "{err}");
    }

    #[test]
    fn exit_codes_map_error_kinds() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 2);
        assert_eq!(
            exit_code(&Error::TrainingDiverged {
                epoch: 0,
                batch: 0,
                message: "x".into()
            }),
            3
        );
        assert_eq!(exit_code(&Error::Integrity("x".into())), 6);
        assert_eq!(
            exit_code(&Error::Stage {
                exit_code: 5,
                message: "x".into()
            }),
            5
        );
        assert_eq!(exit_code(&Error::Input("x".into())), 1);
    }

    #[test]
    fn stratified_subset_apportions_by_largest_remainder() {
        // 30 of class 0, 15 of class 1, 5 of class 2.
        let labels: Vec<usize> = std::iter::repeat(0)
            .take(30)
            .chain(std::iter::repeat(1).take(15))
            .chain(std::iter::repeat(2).take(5))
            .collect();

        let half = stratified_subset(&labels, 3, 0.5, 7).unwrap();
        assert_eq!(half.len(), 25); // ceil(0.5 · 50)
        let counts = |subset: &[usize]| {
            let mut c = [0usize; 3];
            for &i in subset {
                c[labels[i]] += 1;
            }
            c
        };
        let c = counts(&half);
        // Exact halves: 15, 7.5→8 or 7, 2.5→3 or 2, summing to 25.
        assert_eq!(c[0], 15);
        assert_eq!(c[1] + c[2], 10);
        assert!(c[1] >= 7 && c[2] >= 2);

        // Deterministic and sorted.
        assert_eq!(half, stratified_subset(&labels, 3, 0.5, 7).unwrap());
        assert!(half.windows(2).all(|w| w[0] < w[1]));

        // Fraction 1 takes everything.
        assert_eq!(stratified_subset(&labels, 3, 1.0, 7).unwrap().len(), 50);

        // A tiny fraction still covers every represented class.
        let tiny = stratified_subset(&labels, 3, 0.06, 7).unwrap();
        assert_eq!(tiny.len(), 3); // ceil(0.06 · 50)
        let c = counts(&tiny);
        assert!(c.iter().all(|&x| x == 1), "{c:?}");

        assert!(matches!(
            stratified_subset(&labels, 3, 0.0, 7),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            stratified_subset(&labels, 3, 1.5, 7),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn run_directory_freezes_config_and_tracks_digests() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let config = tiny_config(3);
        RunDirectory::create(&root, &config).unwrap();

        // Refuses to reuse a non-empty directory.
        let err = RunDirectory::create(&root, &config).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(exit_code(&err), 2);

        // Config round-trips and its manifest digest matches the file.
        let reopened = RunDirectory::open(&root).unwrap();
        let loaded = reopened.config().unwrap();
        assert_eq!(
            canonical_json(&loaded).unwrap(),
            canonical_json(&config).unwrap()
        );
        reopened.verify_artifact(CONFIG).unwrap();
        assert_eq!(
            reopened.manifest().unwrap()[CONFIG],
            reopened.config_digest().unwrap()
        );

        // Tampering is detected.
        std::fs::write(root.join(CONFIG), b"{}").unwrap();
        let err = reopened.verify_artifact(CONFIG).unwrap_err();
        assert_eq!(exit_code(&err), 6);
    }

    #[test]
    fn pipeline_runs_end_to_end_and_reports_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let config = tiny_config(11);

        let pre = run_pretrain(&config, &root).unwrap();
        assert!(root.join(MODEL_CKPT).is_file());
        assert!(root.join("reports/baseline.json").is_file());

        // Training before explaining refuses with the cache-missing code.
        let err = cmd_train_impactx(&root, None).unwrap_err();
        assert_eq!(exit_code(&err), 5, "{err}");

        // Explain is idempotent: all misses, then all hits.
        let first = cmd_explain(&root, SplitKind::Train).unwrap();
        assert_eq!(first.cache_misses, first.total);
        let second = cmd_explain(&root, SplitKind::Train).unwrap();
        assert_eq!(second.cache_hits, second.total);
        assert_eq!(second.cache_misses, 0);

        // The val split explains only validation ids.
        let val = cmd_explain(&root, SplitKind::Val).unwrap();
        assert!(!val.sample_ids.is_empty());
        for id in &val.sample_ids {
            assert!(!first.sample_ids.contains(id), "val id {id} is a train id");
        }

        let trained = cmd_train_impactx(&root, None).unwrap();
        assert_eq!(trained.strategy, StrategyKind::Ed);
        assert_eq!(trained.model_hash, pre.model_hash);
        assert!(root.join("checkpoints/encoder_decoder.ckpt").is_file());
        assert!(root.join("checkpoints/fusion.ckpt").is_file());
        assert!(root.join(PREDICTOR).is_file());
        // fraction 1.0 → the whole training split is recorded.
        assert_eq!(trained.train_ids.len(), first.total);

        // Retraining refuses rather than silently recomputing.
        let err = cmd_train_impactx(&root, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        let summary = cmd_evaluate(&root).unwrap();
        for rel in [
            "reports/impactx.json",
            "reports/comparison.json",
            "reports/confusion_baseline.csv",
            "reports/confusion_impactx.csv",
            "reports/flips.json",
        ] {
            assert!(root.join(rel).is_file(), "{rel} missing");
        }
        // Saliency renderings exist exactly when something was corrected.
        let expected = summary.corrected.min(config.eval.saliency_count);
        assert_eq!(summary.saliency_files.len(), expected);
        for f in &summary.saliency_files {
            assert!(f.is_file());
        }

        // Flip identity against the accuracy difference.
        let n = summary.corrected as i64 - summary.broken as i64;
        let comparison: Value =
            serde_json::from_str(&fs::read_to_string(root.join("reports/comparison.json")).unwrap())
                .unwrap();
        assert_eq!(comparison["flip"]["delta_correct"].as_i64().unwrap(), n);
        let num_samples = comparison["num_samples"].as_u64().unwrap() as f64;
        let measured = (summary.impactx_accuracy - summary.baseline_accuracy) * num_samples;
        assert!((measured - n as f64).abs() < 1e-6);

        // Provenance digests match the frozen config and model.
        let run = RunDirectory::open(&root).unwrap();
        assert_eq!(
            comparison["provenance"]["config_digest"].as_str().unwrap(),
            run.config_digest().unwrap()
        );
        assert_eq!(
            comparison["provenance"]["model_hash"].as_str().unwrap(),
            pre.model_hash
        );

        // Re-evaluating writes byte-identical reports.
        let before = fs::read(root.join("reports/comparison.json")).unwrap();
        cmd_evaluate(&root).unwrap();
        let after = fs::read(root.join("reports/comparison.json")).unwrap();
        assert_eq!(before, after, "comparison.json changed across reruns");
    }

    #[test]
    fn train_fraction_takes_stratified_ceiling() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut config = tiny_config(5);
        config.impactx_train_fraction = 0.5;

        run_pretrain(&config, &root).unwrap();
        cmd_explain(&root, SplitKind::Train).unwrap();
        let trained = cmd_train_impactx(&root, None).unwrap();

        // 16 training samples → ⌈0.5·16⌉ = 8, stratified over both classes.
        assert_eq!(trained.train_ids.len(), 8);
        let manifest: PredictorManifest =
            read_json(&root.join(PREDICTOR)).unwrap();
        assert_eq!(manifest.train_ids, trained.train_ids);
        assert_eq!(manifest.train_fraction, 0.5);
        assert_eq!(
            manifest.components["checkpoints/encoder_decoder.ckpt"],
            "encoder_decoder"
        );
    }

    #[test]
    fn ablation_grid_records_failures_per_row() {
        let dir = tempfile::tempdir().unwrap();
        let config_path = dir.path().join("config.json");
        let mut config = tiny_config(9);
        // kernel_shap with this budget is invalid (needs >= G+2); the
        // gradient_x_input rows ignore the budget entirely.
        config.xai.budget = 3;
        fs::write(&config_path, canonical_json(&config).unwrap()).unwrap();

        let grid_path = dir.path().join("grid.json");
        let grid = AblationGrid {
            methods: vec![
                AttributionMethod::GradientXInput,
                AttributionMethod::KernelShap,
            ],
            strategies: vec![StrategyKind::Ed],
            latent_dims: vec![4],
            fractions: vec![1.0],
            seeds: vec![1],
        };
        fs::write(&grid_path, canonical_json(&grid).unwrap()).unwrap();

        let out = dir.path().join("ablation");
        let summary = cmd_ablate(&config_path, &grid_path, &out).unwrap();
        assert_eq!(summary.rows, 2);
        assert_eq!(summary.failures, 1);

        let csv = fs::read_to_string(&summary.csv_path).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("method,strategy,latent_dim,fraction,seeds,status,baseline_accuracy"));
        let ok_fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(&ok_fields[..6], &["gradient_x_input", "ed", "4", "1", "1", "ok"]);
        let baseline: f64 = ok_fields[6].parse().unwrap();
        let impactx: f64 = ok_fields[7].parse().unwrap();
        assert!((0.0..=1.0).contains(&baseline));
        assert!((0.0..=1.0).contains(&impactx));
        assert!(lines[2].starts_with("kernel_shap,ed,4,1,1,error,,,"));

        // Empty grids are refused.
        let empty = AblationGrid {
            methods: vec![],
            ..grid
        };
        fs::write(&grid_path, canonical_json(&empty).unwrap()).unwrap();
        let err = cmd_ablate(&config_path, &grid_path, &dir.path().join("ablation2")).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("methods"));
    }
}
