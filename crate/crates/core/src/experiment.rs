//! Experiment orchestration behind the command-line interface: a versioned
//! JSON config, the output-directory file layout, per-seed training,
//! multi-seed evaluation, and parameter sweeps.
//!
//! Commands rebuild the dataset from the config instead of reading tile
//! files; generation is deterministic and takes seconds, which keeps every
//! command a pure function of (config, seeds). `gen-data` still materializes
//! the manifest and tiles for inspection and external tooling.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ridge_fit_dataset, RidgeModel};
use crate::checkpoint::{network_checkpoint, ridge_checkpoint, Checkpoint, SavedModel};
use crate::data::{
    build_dataset, ChannelLayout, ChannelStats, Dataset, SplitTag, SynthConfig, Tile,
};
use crate::data::prep::{eval_pixel_set, EVAL_MIN_SOUNDINGS, EVAL_MIN_VALUE};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_metrics_rows, evaluate, factor1_pairs, metrics_rows, nrmse, similarity_vs_label_diff,
    train_label_mean, write_metrics_csv, write_pairs_csv, write_similarity_csv, EvalMode,
    MetricsRow, TilePredictor,
};
use crate::losses::LossConfig;
use crate::model::{build_cs_sunet, build_pixel_nn, ModelConfig, ModelParams, PixelNnConfig};
use crate::tensor::Mask;
use crate::train::{train, write_curves_csv, Objective, TrainConfig, TrainOutcome};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;
pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// How many test-tile prediction maps `evaluate` exports.
const MAP_EXPORT_LIMIT: usize = 4;

/// The five predictors the experiments compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    CsSunet,
    VanillaUnet,
    PixelNn,
    Ridge,
    FineUnet,
}

impl Predictor {
    pub const ALL: [Predictor; 5] = [
        Predictor::CsSunet,
        Predictor::VanillaUnet,
        Predictor::PixelNn,
        Predictor::Ridge,
        Predictor::FineUnet,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Predictor::CsSunet => "cs-sunet",
            Predictor::VanillaUnet => "vanilla-unet",
            Predictor::PixelNn => "pixel-nn",
            Predictor::Ridge => "ridge",
            Predictor::FineUnet => "fine-unet",
        }
    }
}

impl fmt::Display for Predictor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Predictor::ALL
            .iter()
            .find(|p| p.as_str() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Predictor::ALL.iter().map(|p| p.as_str()).collect();
                Error::Config(format!("unknown predictor '{}', expected one of {}", s, names.join(", ")))
            })
    }
}

/// Parameters `sweep` can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParameter {
    Lambda,
    Tau,
    MinSoundings,
    Alpha,
}

impl SweepParameter {
    pub const ALL: [SweepParameter; 4] = [
        SweepParameter::Lambda,
        SweepParameter::Tau,
        SweepParameter::MinSoundings,
        SweepParameter::Alpha,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::Tau => "tau",
            SweepParameter::MinSoundings => "min_soundings",
            SweepParameter::Alpha => "alpha",
        }
    }
}

impl fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // Accept the CLI-friendly hyphen spelling too.
        let canon = s.replace('-', "_");
        SweepParameter::ALL
            .iter()
            .find(|p| p.as_str() == canon)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = SweepParameter::ALL.iter().map(|p| p.as_str()).collect();
                Error::Config(format!("unknown sweep parameter '{}', expected one of {}", s, names.join(", ")))
            })
    }
}

/// Everything one experiment needs, as a single JSON document. Unknown keys
/// are rejected so a typo cannot silently fall back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Output directory; the CLI's `--out` overrides it.
    pub output: PathBuf,
    /// Predictor to train or evaluate; the CLI's `--predictor` overrides it.
    pub predictor: Predictor,
    /// One training run per seed; evaluation averages across them.
    pub seeds: Vec<u64>,
    pub ridge_alpha: f64,
    pub data: SynthConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub pixel_model: PixelNnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: EXPERIMENT_SCHEMA_VERSION,
            output: PathBuf::from("runs"),
            predictor: Predictor::CsSunet,
            seeds: vec![0, 1, 2],
            ridge_alpha: 1.0,
            data: SynthConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            pixel_model: PixelNnConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema version {} is not supported, this build reads version {}",
                self.version, EXPERIMENT_SCHEMA_VERSION
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !self.ridge_alpha.is_finite() || self.ridge_alpha < 0.0 {
            return Err(Error::Config(format!(
                "ridge_alpha must be finite and >= 0, got {}",
                self.ridge_alpha
            )));
        }
        self.data.validate()?;
        self.train.validate()?;
        let channels = self.data.layout().total();
        self.loss.validate(channels)?;
        if self.model.in_channels != channels {
            return Err(Error::Config(format!(
                "model.in_channels is {} but the dataset has {} channels; set it to {}",
                self.model.in_channels, channels, channels
            )));
        }
        if self.pixel_model.in_channels != channels {
            return Err(Error::Config(format!(
                "pixel_model.in_channels is {} but the dataset has {} channels; set it to {}",
                self.pixel_model.in_channels, channels, channels
            )));
        }
        Ok(())
    }

    /// Short content hash stamped into every output CSV for provenance.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{:02x}", byte));
        }
        hex
    }

    fn provenance(&self) -> Vec<String> {
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        vec![
            format!("config {}", self.hash()),
            format!("predictor {}", self.predictor),
            format!("seeds {}", seeds.join(" ")),
        ]
    }
}

pub fn checkpoint_path(out: &Path, predictor: Predictor, seed: u64) -> PathBuf {
    out.join(format!("checkpoint_{}_{}.json", predictor, seed))
}

pub fn curves_path(out: &Path, predictor: Predictor, seed: u64) -> PathBuf {
    out.join(format!("curves_{}_{}.csv", predictor, seed))
}

pub fn metrics_path(out: &Path, predictor: Predictor) -> PathBuf {
    out.join(format!("metrics_{}.csv", predictor))
}

pub fn sweep_path(out: &Path, parameter: SweepParameter) -> PathBuf {
    out.join(format!("sweep_{}.csv", parameter))
}

/// Build a rayon pool sized by `COARSE2FINE_THREADS` (default: the machine's
/// available parallelism). Each worker runs one full training or sweep point.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("COARSE2FINE_THREADS") {
        Ok(text) => text.parse::<usize>().map_err(|_| {
            Error::Config(format!("COARSE2FINE_THREADS must be a positive integer, got '{}'", text))
        })?,
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    if threads == 0 {
        return Err(Error::Config("COARSE2FINE_THREADS must be a positive integer, got '0'".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Train(format!("could not start worker pool: {}", e)))
}

// ---------------------------------------------------------------------------
// gen-data

/// Per-tile line in the dataset manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestTile {
    pub index: usize,
    pub split: SplitTag,
    pub coarse_label: f64,
    pub valid_pixels: usize,
    pub coarse_only: bool,
}

/// Summary of a generated dataset; written as `manifest.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_hash: String,
    pub data: SynthConfig,
    pub layout: ChannelLayout,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub test_tiles: usize,
    pub tiles: Vec<ManifestTile>,
}

#[derive(Serialize, Deserialize)]
struct StoredTile {
    height: usize,
    width: usize,
    features: Vec<f64>,
    land_cover: Vec<u8>,
    valid: Vec<bool>,
    soundings: Vec<u32>,
    fine_truth: Vec<f64>,
    fine_observed: Vec<f64>,
    coarse_label: f64,
    coarse_only: bool,
}

#[derive(Serialize, Deserialize)]
struct StoredDataset {
    version: u32,
    config: SynthConfig,
    layout: ChannelLayout,
    stats: ChannelStats,
    split: Vec<SplitTag>,
    tiles: Vec<StoredTile>,
}

pub struct GenDataSummary {
    pub manifest_path: PathBuf,
    pub tiles_path: PathBuf,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub test_tiles: usize,
}

/// Generate the dataset and write `manifest.json` plus `tiles.json`.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<GenDataSummary> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = build_dataset::<f64>(&config.data)?;

    let count = |tag: SplitTag| dataset.split.iter().filter(|t| **t == tag).count();
    let manifest = Manifest {
        version: DATASET_SCHEMA_VERSION,
        config_hash: config.hash(),
        data: config.data.clone(),
        layout: dataset.layout.clone(),
        train_tiles: count(SplitTag::Train),
        val_tiles: count(SplitTag::Val),
        test_tiles: count(SplitTag::Test),
        tiles: dataset
            .tiles
            .iter()
            .enumerate()
            .map(|(index, tile)| ManifestTile {
                index,
                split: dataset.split[index],
                coarse_label: tile.coarse_label,
                valid_pixels: tile.valid.count(),
                coarse_only: tile.coarse_only,
            })
            .collect(),
    };
    let manifest_path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let stored = StoredDataset {
        version: DATASET_SCHEMA_VERSION,
        config: dataset.config.clone(),
        layout: dataset.layout.clone(),
        stats: dataset.stats.clone(),
        split: dataset.split.clone(),
        tiles: dataset
            .tiles
            .iter()
            .map(|t| StoredTile {
                height: t.height(),
                width: t.width(),
                features: t.features.clone(),
                land_cover: t.land_cover.clone(),
                valid: t.valid.flags().to_vec(),
                soundings: t.soundings.clone(),
                fine_truth: t.fine_truth.clone(),
                fine_observed: t.fine_observed.clone(),
                coarse_label: t.coarse_label,
                coarse_only: t.coarse_only,
            })
            .collect(),
    };
    let tiles_path = out.join("tiles.json");
    let text = serde_json::to_string(&stored)?;
    fs::write(&tiles_path, text).map_err(|e| Error::io(&tiles_path, e))?;

    Ok(GenDataSummary {
        manifest_path,
        tiles_path,
        train_tiles: manifest.train_tiles,
        val_tiles: manifest.val_tiles,
        test_tiles: manifest.test_tiles,
    })
}

/// Read a dataset back from a `tiles.json` written by [`cmd_gen_data`].
pub fn load_tiles(path: &Path) -> Result<Dataset<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stored: StoredDataset = serde_json::from_str(&text)?;
    if stored.version != DATASET_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "tile file {} has schema version {}, this build reads version {}",
            path.display(),
            stored.version,
            DATASET_SCHEMA_VERSION
        )));
    }
    let tiles: Vec<Tile<f64>> = stored
        .tiles
        .into_iter()
        .map(|t| {
            Ok(Tile {
                features: t.features,
                land_cover: t.land_cover,
                valid: Mask::new(t.height, t.width, t.valid)?,
                soundings: t.soundings,
                fine_truth: t.fine_truth,
                fine_observed: t.fine_observed,
                coarse_label: t.coarse_label,
                coarse_only: t.coarse_only,
            })
        })
        .collect::<Result<_>>()?;
    if tiles.len() != stored.split.len() {
        return Err(Error::Data(format!(
            "tile file {} has {} tiles but {} split tags",
            path.display(),
            tiles.len(),
            stored.split.len()
        )));
    }
    Ok(Dataset {
        config: stored.config,
        layout: stored.layout,
        tiles,
        split: stored.split,
        stats: stored.stats,
    })
}

// ---------------------------------------------------------------------------
// train

/// Model, objective, and effective settings for one training run. Vanilla
/// U-Net forces the smoothness weight to zero and disables early stopping;
/// what actually ran is recorded in the checkpoint.
fn training_plan(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(ModelParams<f64>, Objective, TrainConfig, Option<LossConfig>)> {
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    match config.predictor {
        Predictor::CsSunet => {
            let params = build_cs_sunet(&config.model, seed)?;
            let loss = config.loss.clone();
            Ok((params, Objective::Coarse(loss.clone()), train_cfg, Some(loss)))
        }
        Predictor::VanillaUnet => {
            let mut loss = config.loss.clone();
            loss.lambda = 0.0;
            train_cfg.early_stopping = false;
            let params = build_cs_sunet(&config.model, seed)?;
            Ok((params, Objective::Coarse(loss.clone()), train_cfg, Some(loss)))
        }
        Predictor::PixelNn => {
            let params = build_pixel_nn(&config.pixel_model, seed)?;
            let loss = config.loss.clone();
            Ok((params, Objective::Coarse(loss.clone()), train_cfg, Some(loss)))
        }
        Predictor::FineUnet => {
            let params = build_cs_sunet(&config.model, seed)?;
            Ok((params, Objective::FineSupervised, train_cfg, None))
        }
        Predictor::Ridge => Err(Error::Config("ridge is fit in closed form, not trained".into())),
    }
}

fn train_one_seed(
    config: &ExperimentConfig,
    dataset: &Dataset<f64>,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    let path = checkpoint_path(out, config.predictor, seed);
    if config.predictor == Predictor::Ridge {
        let model = ridge_fit_dataset(dataset, config.ridge_alpha)?;
        ridge_checkpoint(config.predictor.as_str(), seed, &model).save(&path)?;
        return Ok(path);
    }

    let (initial, objective, train_cfg, loss) = training_plan(config, seed)?;
    let outcome: TrainOutcome<f64> = train(&initial, dataset, &objective, &train_cfg)?;

    let mut comments = config.provenance();
    comments.push(format!("seed {}", seed));
    write_curves_csv(&curves_path(out, config.predictor, seed), &comments, &outcome.records)?;

    network_checkpoint(
        config.predictor.as_str(),
        seed,
        loss.as_ref(),
        &train_cfg,
        outcome.best_epoch,
        &outcome.params,
    )
    .save(&path)?;
    Ok(path)
}

/// Train the configured predictor once per seed; returns checkpoint paths.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = build_dataset::<f64>(&config.data)?;
    let pool = worker_pool()?;
    pool.install(|| {
        use rayon::prelude::*;
        config
            .seeds
            .par_iter()
            .map(|&seed| train_one_seed(config, &dataset, seed, out))
            .collect::<Result<Vec<PathBuf>>>()
    })
}

// ---------------------------------------------------------------------------
// evaluate

/// A checkpointed predictor ready to score tiles.
pub enum LoadedPredictor {
    Network(ModelParams<f64>),
    Ridge(RidgeModel<f64>),
}

impl LoadedPredictor {
    pub fn as_tile_predictor(&self) -> &dyn TilePredictor<f64> {
        match self {
            LoadedPredictor::Network(params) => params,
            LoadedPredictor::Ridge(model) => model,
        }
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        let found = match self {
            LoadedPredictor::Network(params) => params.arch().in_channels(),
            LoadedPredictor::Ridge(model) => model.weights.len(),
        };
        if found != channels {
            return Err(Error::Config(format!(
                "checkpoint expects {} input channels but the dataset has {}",
                found, channels
            )));
        }
        Ok(())
    }
}

/// Load a checkpoint and rebuild its predictor.
pub fn load_predictor(path: &Path) -> Result<LoadedPredictor> {
    let checkpoint = Checkpoint::load(path)?;
    match &checkpoint.model {
        SavedModel::Network { .. } => Ok(LoadedPredictor::Network(checkpoint.network_params()?)),
        SavedModel::Ridge { .. } => Ok(LoadedPredictor::Ridge(checkpoint.ridge_model()?)),
    }
}

fn export_maps(
    predictor: Predictor,
    loaded: &LoadedPredictor,
    dataset: &Dataset<f64>,
    out: &Path,
) -> Result<()> {
    let maps_dir = out.join("maps");
    fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    let p = loaded.as_tile_predictor();
    for (index, tile) in dataset.tiles_in(SplitTag::Test).take(MAP_EXPORT_LIMIT) {
        let map = p.predict_tile(tile)?;
        let stem = format!("{}_tile{}", predictor, index);
        crate::eval::export_pgm(&maps_dir.join(format!("{}.pgm", stem)), &map, tile.height(), tile.width())?;
        write_grid_csv(&maps_dir.join(format!("{}.csv", stem)), &map, tile.height(), tile.width())?;
    }
    Ok(())
}

/// Write a prediction map as rows of comma-separated values.
pub fn write_grid_csv(path: &Path, map: &[f64], height: usize, width: usize) -> Result<()> {
    if map.len() != height * width {
        return Err(Error::Shape {
            op: "write_grid_csv",
            details: format!("{} values for a {}x{} grid", map.len(), height, width),
        });
    }
    let mut text = String::new();
    for row in map.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluate every seed's checkpoint in both modes, averaging metric cells
/// across seeds; also exports prediction maps, scatter pairs, and the
/// similarity diagnostic. Returns the metrics CSV path.
pub fn cmd_evaluate(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    config.validate()?;
    let dataset = build_dataset::<f64>(&config.data)?;
    let channels = dataset.layout.total();

    let loaded: Vec<LoadedPredictor> = config
        .seeds
        .iter()
        .map(|&seed| {
            let predictor = load_predictor(&checkpoint_path(out, config.predictor, seed))?;
            predictor.check_channels(channels)?;
            Ok(predictor)
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<MetricsRow> = Vec::new();
    for mode in [EvalMode::TrainTilesCalibrated, EvalMode::TestTilesRaw] {
        let per_run: Vec<Vec<MetricsRow>> = loaded
            .iter()
            .map(|p| {
                let report = evaluate(p.as_tile_predictor(), &dataset, mode)?;
                Ok(metrics_rows(config.predictor.as_str(), &report))
            })
            .collect::<Result<_>>()?;
        rows.extend(aggregate_metrics_rows(&per_run)?);
    }
    let path = metrics_path(out, config.predictor);
    write_metrics_csv(&path, &config.provenance(), &rows)?;

    let first = &loaded[0];
    let pairs = factor1_pairs(first.as_tile_predictor(), &dataset, EvalMode::TestTilesRaw)?;
    write_pairs_csv(&out.join(format!("pairs_{}.csv", config.predictor)), &pairs)?;
    export_maps(config.predictor, first, &dataset, out)?;

    let bins = similarity_vs_label_diff(&dataset, config.loss.tau, 2000, 4, config.seeds[0])?;
    write_similarity_csv(&out.join("similarity.csv"), &bins)?;

    Ok(path)
}

// ---------------------------------------------------------------------------
// sweep

/// One sweep point: the fine-validation NRMSE at a parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub val_fine_nrmse: f64,
    pub val_fine_nrmse_std: Option<f64>,
    pub runs: usize,
}

/// NRMSE against fine observations on trusted validation pixels, with a
/// custom sounding threshold; matches the training loop's fine-validation
/// definition at the default threshold.
pub fn val_fine_nrmse<P: TilePredictor<f64> + ?Sized>(
    predictor: &P,
    dataset: &Dataset<f64>,
    min_soundings: u32,
) -> Result<f64> {
    let train_mean = train_label_mean(dataset)?;
    let mut observed = Vec::new();
    let mut predicted = Vec::new();
    for (_, tile) in dataset.tiles_in(SplitTag::Val) {
        if tile.coarse_only {
            continue;
        }
        let pixels = eval_pixel_set(tile, min_soundings, EVAL_MIN_VALUE);
        if pixels.is_empty() {
            continue;
        }
        let map = predictor.predict_tile(tile)?;
        for p in pixels {
            observed.push(tile.fine_observed[p]);
            predicted.push(map[p]);
        }
    }
    if observed.is_empty() {
        return Err(Error::Data(format!(
            "no validation pixels have >= {} soundings and observations above {}",
            min_soundings, EVAL_MIN_VALUE
        )));
    }
    nrmse(&observed, &predicted, train_mean)
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Train per seed at one (lambda, tau) setting and return each run's
/// fine-validation NRMSE at the selected epoch.
fn retrain_point(config: &ExperimentConfig, dataset: &Dataset<f64>) -> Result<Vec<f64>> {
    config
        .seeds
        .iter()
        .map(|&seed| {
            let (initial, objective, train_cfg, _) = training_plan(config, seed)?;
            let outcome = train(&initial, dataset, &objective, &train_cfg)?;
            Ok(outcome.records[outcome.best_epoch].val_fine_nrmse)
        })
        .collect()
}

/// Retrain (lambda, tau, alpha) or re-filter (min_soundings) across the
/// given values; writes `sweep_<parameter>.csv` and returns its rows.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    parameter: SweepParameter,
    values: &[f64],
    out: &Path,
) -> Result<(PathBuf, Vec<SweepRow>)> {
    config.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    for &v in values {
        if !v.is_finite() {
            return Err(Error::Config(format!("sweep values must be finite, got {}", v)));
        }
    }
    match parameter {
        SweepParameter::Lambda | SweepParameter::Tau => {
            if !matches!(config.predictor, Predictor::CsSunet | Predictor::PixelNn) {
                return Err(Error::Config(format!(
                    "a {} sweep needs a coarse-supervised network predictor, got {}",
                    parameter, config.predictor
                )));
            }
        }
        SweepParameter::MinSoundings => {
            for &v in values {
                if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                    return Err(Error::Config(format!(
                        "min_soundings values must be positive integers, got {}",
                        v
                    )));
                }
            }
        }
        SweepParameter::Alpha => {
            for &v in values {
                if v < 0.0 {
                    return Err(Error::Config(format!("alpha must be >= 0, got {}", v)));
                }
            }
        }
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = build_dataset::<f64>(&config.data)?;
    let pool = worker_pool()?;

    let rows: Vec<SweepRow> = match parameter {
        SweepParameter::Lambda | SweepParameter::Tau => pool.install(|| {
            use rayon::prelude::*;
            values
                .par_iter()
                .map(|&value| {
                    let mut point = config.clone();
                    match parameter {
                        SweepParameter::Lambda => point.loss.lambda = value,
                        SweepParameter::Tau => point.loss.tau = value,
                        _ => unreachable!(),
                    }
                    point.validate()?;
                    let scores = retrain_point(&point, &dataset)?;
                    let (mean, std) = mean_std(&scores);
                    Ok(SweepRow {
                        parameter: parameter.as_str().to_string(),
                        value,
                        val_fine_nrmse: mean,
                        val_fine_nrmse_std: std,
                        runs: scores.len(),
                    })
                })
                .collect::<Result<_>>()
        })?,
        SweepParameter::Alpha => values
            .iter()
            .map(|&value| {
                let model = ridge_fit_dataset(&dataset, value)?;
                let score = val_fine_nrmse(&model, &dataset, EVAL_MIN_SOUNDINGS)?;
                Ok(SweepRow {
                    parameter: parameter.as_str().to_string(),
                    value,
                    val_fine_nrmse: score,
                    val_fine_nrmse_std: None,
                    runs: 1,
                })
            })
            .collect::<Result<_>>()?,
        SweepParameter::MinSoundings => {
            // One training per seed; thresholds only re-filter the pixels
            // that count toward the error.
            let predictors: Vec<LoadedPredictor> = if config.predictor == Predictor::Ridge {
                vec![LoadedPredictor::Ridge(ridge_fit_dataset(&dataset, config.ridge_alpha)?)]
            } else {
                pool.install(|| {
                    use rayon::prelude::*;
                    config
                        .seeds
                        .par_iter()
                        .map(|&seed| {
                            let (initial, objective, train_cfg, _) = training_plan(config, seed)?;
                            let outcome = train(&initial, &dataset, &objective, &train_cfg)?;
                            Ok(LoadedPredictor::Network(outcome.params))
                        })
                        .collect::<Result<_>>()
                })?
            };
            values
                .iter()
                .map(|&value| {
                    let scores: Vec<f64> = predictors
                        .iter()
                        .map(|p| val_fine_nrmse(p.as_tile_predictor(), &dataset, value as u32))
                        .collect::<Result<_>>()?;
                    let (mean, std) = mean_std(&scores);
                    Ok(SweepRow {
                        parameter: parameter.as_str().to_string(),
                        value,
                        val_fine_nrmse: mean,
                        val_fine_nrmse_std: std,
                        runs: scores.len(),
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    let path = sweep_path(out, parameter);
    write_sweep_csv(&path, &config.provenance(), &rows)?;
    Ok((path, rows))
}

/// Write sweep rows as CSV with `# `-prefixed provenance comments.
pub fn write_sweep_csv(path: &Path, comments: &[String], rows: &[SweepRow]) -> Result<()> {
    let mut text = String::new();
    for comment in comments {
        text.push_str("# ");
        text.push_str(comment);
        text.push('\n');
    }
    text.push_str("parameter,value,val_fine_nrmse,val_fine_nrmse_std,runs\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.parameter,
            r.value,
            r.val_fine_nrmse,
            r.val_fine_nrmse_std.map(|v| v.to_string()).unwrap_or_default(),
            r.runs
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
