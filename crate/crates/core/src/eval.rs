//! Metrics, per-tile calibration, multi-resolution evaluation, and report
//! export.
//!
//! Fine-resolution truth is never available to training; here it is the
//! held-out measuring stick. Scores are computed at native resolution on
//! trusted pixels only (enough soundings, observation above the reporting
//! floor) and again at coarser resolutions by aggregating prediction and
//! observation with the same block-mean rule, so a model can be compared
//! against products that only exist at coarse scales.

use std::fs;
use std::path::{Path, PathBuf};

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::masked_mean_forward;
use crate::baselines::{predict_coarse_trivial, ridge_predict_fine, RidgeModel};
use crate::data::prep::{
    aggregate, eval_pixel_set, AGGREGATE_COVERAGE, EVAL_MIN_SOUNDINGS, EVAL_MIN_VALUE,
};
use crate::data::synth::stream;
use crate::data::{Dataset, SplitTag, Tile};
use crate::error::{Error, Result};
use crate::losses::{similarity, PixelSample};
use crate::model::{forward, Architecture, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Mask;

/// Valid-pixel means at or below this magnitude make the calibration ratio
/// unstable, so such tiles are left unscaled and flagged.
pub const CALIBRATION_MEAN_FLOOR: f64 = 1e-9;

/// Root mean squared error normalized by the mean of the training labels.
///
/// The normalizer must be positive; a zero or negative label mean means the
/// dataset is not in the regime this metric is defined for.
pub fn nrmse<S: Scalar>(truth: &[S], predictions: &[S], train_mean: f64) -> Result<f64> {
    if truth.is_empty() || truth.len() != predictions.len() {
        return Err(Error::Shape {
            op: "nrmse",
            details: format!("{} truth values, {} predictions", truth.len(), predictions.len()),
        });
    }
    if !(train_mean > 0.0) || !train_mean.is_finite() {
        return Err(Error::Data(format!(
            "NRMSE normalizer must be a positive train-label mean, got {}",
            train_mean
        )));
    }
    let mut sq_sum = 0.0f64;
    for (t, p) in truth.iter().zip(predictions) {
        let d = t.to_f64c() - p.to_f64c();
        sq_sum += d * d;
    }
    Ok((sq_sum / truth.len() as f64).sqrt() / train_mean)
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
///
/// Undefined for fewer than two values or for constant truth, both reported
/// as structured errors rather than NaN.
pub fn r2<S: Scalar>(truth: &[S], predictions: &[S]) -> Result<f64> {
    if truth.len() < 2 || truth.len() != predictions.len() {
        return Err(Error::Shape {
            op: "r2",
            details: format!(
                "need >= 2 paired values, got {} truth and {} predictions",
                truth.len(),
                predictions.len()
            ),
        });
    }
    if truth.iter().all(|v| *v == truth[0]) {
        return Err(Error::Data("R^2 is undefined for constant truth".into()));
    }
    let mean = truth.iter().map(|v| v.to_f64c()).sum::<f64>() / truth.len() as f64;
    let mut ss_res = 0.0f64;
    let mut ss_tot = 0.0f64;
    for (t, p) in truth.iter().zip(predictions) {
        let t = t.to_f64c();
        let r = t - p.to_f64c();
        let d = t - mean;
        ss_res += r * r;
        ss_tot += d * d;
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// What per-tile calibration did to one tile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Multiplier applied to every pixel.
    pub scale: f64,
    /// False when the valid-pixel mean was too close to zero to divide by.
    pub applied: bool,
    /// True when the label and the prediction mean disagree in sign.
    pub negative: bool,
}

/// Rescale a tile's predictions so their valid-pixel mean equals the tile's
/// own coarse label.
///
/// Training tiles may be scored this way because their labels are known at
/// inference time; it isolates within-tile pattern quality from per-tile
/// bias. Tiles whose prediction mean is within [`CALIBRATION_MEAN_FLOOR`] of
/// zero are returned unscaled with `applied = false`.
pub fn calibrate_train_tile<S: Scalar>(
    predictions: &[S],
    valid: &Mask,
    label: S,
) -> Result<(Vec<S>, Calibration)> {
    if predictions.len() != valid.len() {
        return Err(Error::Shape {
            op: "calibrate_train_tile",
            details: format!("{} predictions for a {}-pixel mask", predictions.len(), valid.len()),
        });
    }
    if valid.count() == 0 {
        return Err(Error::EmptyMask { op: "calibrate_train_tile" });
    }
    let mean = masked_mean_forward(predictions, valid);
    if mean.to_f64c().abs() <= CALIBRATION_MEAN_FLOOR {
        let outcome = Calibration { scale: 1.0, applied: false, negative: false };
        return Ok((predictions.to_vec(), outcome));
    }
    let scale = label / mean;
    let scaled = predictions.iter().map(|&p| p * scale).collect();
    let outcome =
        Calibration { scale: scale.to_f64c(), applied: true, negative: scale < S::zero() };
    Ok((scaled, outcome))
}

/// Anything that can map a tile to a per-pixel prediction plane.
///
/// Implemented by the neural models, the ridge baseline, and the trivial
/// coarse-label predictor, so evaluation and export code is written once.
pub trait TilePredictor<S: Scalar> {
    /// Name used in reports and CSV rows.
    fn name(&self) -> &'static str;

    /// Row-major predictions, one value per pixel.
    fn predict_tile(&self, tile: &Tile<S>) -> Result<Vec<S>>;
}

impl<S: Scalar> TilePredictor<S> for ModelParams<S> {
    fn name(&self) -> &'static str {
        match self.arch() {
            Architecture::Unet(_) => "unet",
            Architecture::PixelNn(_) => "pixel-nn",
        }
    }

    fn predict_tile(&self, tile: &Tile<S>) -> Result<Vec<S>> {
        let out = forward(self, &tile.input_tensor()?)?;
        Ok(out.data().to_vec())
    }
}

impl<S: Scalar> TilePredictor<S> for RidgeModel<S> {
    fn name(&self) -> &'static str {
        "ridge"
    }

    fn predict_tile(&self, tile: &Tile<S>) -> Result<Vec<S>> {
        ridge_predict_fine(self, tile)
    }
}

/// Predicts every pixel of a tile as the tile's own coarse label. The floor
/// any model with fine-scale skill must beat.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrivialPredictor;

impl<S: Scalar> TilePredictor<S> for TrivialPredictor {
    fn name(&self) -> &'static str {
        "coarse-constant"
    }

    fn predict_tile(&self, tile: &Tile<S>) -> Result<Vec<S>> {
        Ok(predict_coarse_trivial(tile))
    }
}

/// Which tiles to score and whether to calibrate them first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Train-split tiles, each rescaled to match its own coarse label.
    TrainTilesCalibrated,
    /// Test-split tiles, predictions used as-is.
    TestTilesRaw,
}

impl EvalMode {
    pub fn split(self) -> SplitTag {
        match self {
            EvalMode::TrainTilesCalibrated => SplitTag::Train,
            EvalMode::TestTilesRaw => SplitTag::Test,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::TrainTilesCalibrated => "train-tiles-calibrated",
            EvalMode::TestTilesRaw => "test-tiles-raw",
        }
    }
}

/// Scores for one subset of evaluation cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCell {
    pub n_pixels: usize,
    pub nrmse: f64,
    /// Absent when R^2 is undefined for the cell (constant truth or a
    /// single value).
    pub r2: Option<f64>,
}

/// Full evaluation of one predictor on one split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EvalMode,
    /// Mean of the train-split coarse labels, the NRMSE normalizer.
    pub train_mean: f64,
    pub tiles_evaluated: usize,
    /// Tiles whose calibration was skipped because the prediction mean was
    /// too close to zero. Always 0 in raw mode.
    pub tiles_skipped_calibration: usize,
    /// Native-resolution scores over the trusted evaluation pixels.
    pub overall: MetricsCell,
    /// One entry per configured aggregation factor, in config order. `None`
    /// marks a resolution at which no block met the coverage rule.
    pub by_factor: Vec<(usize, Option<MetricsCell>)>,
    /// Native-resolution scores per land-cover class, ascending class id,
    /// classes with no evaluation pixels omitted.
    pub by_class: Vec<(u8, MetricsCell)>,
}

/// Mean of the train-split coarse labels; the NRMSE normalizer.
pub fn train_label_mean<S: Scalar>(dataset: &Dataset<S>) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (_, tile) in dataset.tiles_in(SplitTag::Train) {
        sum += tile.coarse_label.to_f64c();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("no train tiles to average labels over".into()));
    }
    Ok(sum / count as f64)
}

fn predict_for_mode<S: Scalar, P: TilePredictor<S> + ?Sized>(
    predictor: &P,
    tile: &Tile<S>,
    mode: EvalMode,
    skipped: &mut usize,
) -> Result<Vec<S>> {
    let raw = predictor.predict_tile(tile)?;
    if raw.len() != tile.pixel_count() {
        return Err(Error::Shape {
            op: "evaluate",
            details: format!(
                "predictor returned {} values for a {}-pixel tile",
                raw.len(),
                tile.pixel_count()
            ),
        });
    }
    match mode {
        EvalMode::TestTilesRaw => Ok(raw),
        EvalMode::TrainTilesCalibrated => {
            let (scaled, outcome) = calibrate_train_tile(&raw, &tile.valid, tile.coarse_label)?;
            if !outcome.applied {
                *skipped += 1;
            }
            Ok(scaled)
        }
    }
}

fn metrics_cell(truth: &[f64], predictions: &[f64], train_mean: f64) -> Result<MetricsCell> {
    let score = nrmse(truth, predictions, train_mean)?;
    Ok(MetricsCell { n_pixels: truth.len(), nrmse: score, r2: r2(truth, predictions).ok() })
}

/// Score a predictor against held-out fine observations.
///
/// Native-resolution scores use only trusted pixels (at least
/// [`EVAL_MIN_SOUNDINGS`] soundings and observation above
/// [`EVAL_MIN_VALUE`]). Coarser resolutions aggregate prediction and
/// observation over the valid mask with the shared block-mean rule and keep
/// cells meeting [`AGGREGATE_COVERAGE`]. Tiles that only ever had a coarse
/// label carry no usable fine observations and are skipped.
pub fn evaluate<S: Scalar, P: TilePredictor<S> + ?Sized>(
    predictor: &P,
    dataset: &Dataset<S>,
    mode: EvalMode,
) -> Result<MetricsReport> {
    evaluate_with(predictor, dataset, mode, EVAL_MIN_SOUNDINGS)
}

/// [`evaluate`] with a custom sounding threshold for the trusted pixel set.
/// Raising the threshold keeps only pixels with lower observation noise.
pub fn evaluate_with<S: Scalar, P: TilePredictor<S> + ?Sized>(
    predictor: &P,
    dataset: &Dataset<S>,
    mode: EvalMode,
    min_soundings: u32,
) -> Result<MetricsReport> {
    let train_mean = train_label_mean(dataset)?;
    let factors = &dataset.config.aggregation_factors;
    let min_value = S::from_f64c(EVAL_MIN_VALUE);

    let mut truth_native: Vec<f64> = Vec::new();
    let mut pred_native: Vec<f64> = Vec::new();
    let mut class_native: Vec<u8> = Vec::new();
    let mut factor_truth: Vec<Vec<f64>> = vec![Vec::new(); factors.len()];
    let mut factor_pred: Vec<Vec<f64>> = vec![Vec::new(); factors.len()];
    let mut tiles_evaluated = 0usize;
    let mut tiles_skipped_calibration = 0usize;

    for (_, tile) in dataset.tiles_in(mode.split()) {
        if tile.coarse_only {
            continue;
        }
        let predictions =
            predict_for_mode(predictor, tile, mode, &mut tiles_skipped_calibration)?;
        for p in eval_pixel_set(tile, min_soundings, min_value) {
            truth_native.push(tile.fine_observed[p].to_f64c());
            pred_native.push(predictions[p].to_f64c());
            class_native.push(tile.land_cover[p]);
        }
        for (fi, &factor) in factors.iter().enumerate() {
            if factor <= 1 {
                continue;
            }
            let (obs_agg, obs_mask) =
                aggregate(&tile.fine_observed, &tile.valid, factor, AGGREGATE_COVERAGE)?;
            let (pred_agg, _) = aggregate(&predictions, &tile.valid, factor, AGGREGATE_COVERAGE)?;
            for i in 0..obs_agg.len() {
                if obs_mask.get(i) {
                    factor_truth[fi].push(obs_agg[i].to_f64c());
                    factor_pred[fi].push(pred_agg[i].to_f64c());
                }
            }
        }
        tiles_evaluated += 1;
    }

    if truth_native.is_empty() {
        return Err(Error::Data(format!(
            "no evaluation pixels in the {} split (need >= {} soundings and observed > {})",
            mode.as_str(),
            min_soundings,
            EVAL_MIN_VALUE
        )));
    }

    let overall = metrics_cell(&truth_native, &pred_native, train_mean)?;

    let mut by_factor = Vec::with_capacity(factors.len());
    for (fi, &factor) in factors.iter().enumerate() {
        if factor <= 1 {
            by_factor.push((factor, Some(overall)));
            continue;
        }
        let cell = if factor_truth[fi].is_empty() {
            None
        } else {
            Some(metrics_cell(&factor_truth[fi], &factor_pred[fi], train_mean)?)
        };
        by_factor.push((factor, cell));
    }

    let mut by_class = Vec::new();
    for class in 0..dataset.layout.classes {
        let idx: Vec<usize> =
            (0..class_native.len()).filter(|&i| class_native[i] as usize == class).collect();
        if idx.is_empty() {
            continue;
        }
        let t: Vec<f64> = idx.iter().map(|&i| truth_native[i]).collect();
        let p: Vec<f64> = idx.iter().map(|&i| pred_native[i]).collect();
        by_class.push((class as u8, metrics_cell(&t, &p, train_mean)?));
    }

    Ok(MetricsReport {
        mode,
        train_mean,
        tiles_evaluated,
        tiles_skipped_calibration,
        overall,
        by_factor,
        by_class,
    })
}

/// Native-resolution (observed, predicted) pairs over the evaluation pixels,
/// for scatter exports. Matches the pixels behind the report's overall cell.
pub fn factor1_pairs<S: Scalar, P: TilePredictor<S> + ?Sized>(
    predictor: &P,
    dataset: &Dataset<S>,
    mode: EvalMode,
) -> Result<Vec<(f64, f64)>> {
    let min_value = S::from_f64c(EVAL_MIN_VALUE);
    let mut skipped = 0usize;
    let mut pairs = Vec::new();
    for (_, tile) in dataset.tiles_in(mode.split()) {
        if tile.coarse_only {
            continue;
        }
        let predictions = predict_for_mode(predictor, tile, mode, &mut skipped)?;
        for p in eval_pixel_set(tile, EVAL_MIN_SOUNDINGS, min_value) {
            pairs.push((tile.fine_observed[p].to_f64c(), predictions[p].to_f64c()));
        }
    }
    Ok(pairs)
}

/// One similarity bin of the kernel diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBin {
    /// Inclusive lower edge of the similarity interval.
    pub lo: f64,
    /// Exclusive upper edge (inclusive for the last bin).
    pub hi: f64,
    pub pairs: usize,
    pub mean_abs_diff: f64,
    pub median_abs_diff: f64,
    pub p90_abs_diff: f64,
}

/// Empirically check the premise behind the smoothness term: pixels the
/// kernel calls similar should have similar truth.
///
/// Draws random same-class pairs of valid pixels, bins them by kernel
/// similarity over [0, 1], and summarizes the absolute truth difference per
/// bin. Only populated bins are returned. A downward trend in the bin means
/// as similarity grows is the evidence that smoothing toward similar pixels
/// pulls predictions in the right direction.
pub fn similarity_vs_label_diff<S: Scalar>(
    dataset: &Dataset<S>,
    tau: f64,
    pair_count: usize,
    bin_count: usize,
    seed: u64,
) -> Result<Vec<SimilarityBin>> {
    if bin_count == 0 || pair_count == 0 {
        return Err(Error::Config(
            "similarity diagnostic needs at least one bin and one pair".into(),
        ));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("similarity tau must be positive, got {}", tau)));
    }
    let refl = dataset.layout.reflectance_indices();

    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); dataset.layout.classes];
    for (t, tile) in dataset.tiles.iter().enumerate() {
        if tile.coarse_only {
            continue;
        }
        for p in 0..tile.pixel_count() {
            if tile.valid.get(p) {
                members[tile.land_cover[p] as usize].push((t, p));
            }
        }
    }
    // Classes with fewer than two valid pixels cannot form a pair; sampling
    // runs over the remaining classes, weighted by their pixel counts.
    let eligible: Vec<usize> = (0..members.len()).filter(|&c| members[c].len() >= 2).collect();
    let total: usize = eligible.iter().map(|&c| members[c].len()).sum();
    if eligible.is_empty() {
        return Err(Error::Data("no land-cover class has two valid pixels".into()));
    }

    let mut rng = stream(seed, "simdiag", 0);
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); bin_count];
    for _ in 0..pair_count {
        let mut flat = rng.random_range(0..total);
        let mut class = eligible[0];
        for &c in &eligible {
            if flat < members[c].len() {
                class = c;
                break;
            }
            flat -= members[c].len();
        }
        let list = &members[class];
        let a = flat;
        let mut b = rng.random_range(0..list.len());
        if b == a {
            b = (b + 1) % list.len();
        }
        let (ta, pa) = list[a];
        let (tb, pb) = list[b];
        let sample_a = pixel_sample(&dataset.tiles[ta], pa, &refl);
        let sample_b = pixel_sample(&dataset.tiles[tb], pb, &refl);
        let sim = similarity(&sample_a, &sample_b, S::from_f64c(tau)).to_f64c();
        let diff = (dataset.tiles[ta].fine_truth[pa].to_f64c()
            - dataset.tiles[tb].fine_truth[pb].to_f64c())
        .abs();
        let k = ((sim * bin_count as f64) as usize).min(bin_count - 1);
        bins[k].push(diff);
    }

    let width = 1.0 / bin_count as f64;
    let mut out = Vec::new();
    for (k, mut diffs) in bins.into_iter().enumerate() {
        if diffs.is_empty() {
            continue;
        }
        diffs.sort_by(f64::total_cmp);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        out.push(SimilarityBin {
            lo: k as f64 * width,
            hi: (k + 1) as f64 * width,
            pairs: diffs.len(),
            mean_abs_diff: mean,
            median_abs_diff: quantile_sorted(&diffs, 0.5),
            p90_abs_diff: quantile_sorted(&diffs, 0.9),
        });
    }
    Ok(out)
}

fn pixel_sample<S: Scalar>(tile: &Tile<S>, pixel: usize, refl: &[usize]) -> PixelSample<S> {
    let px = tile.pixel_count();
    let features: Vec<S> =
        (0..tile.channel_count()).map(|c| tile.features[c * px + pixel]).collect();
    let x_ref: Vec<S> = refl.iter().map(|&c| tile.features[c * px + pixel]).collect();
    PixelSample { tile: 0, pixel, class_id: tile.land_cover[pixel], features, x_ref, z: S::zero() }
}

/// Nearest-rank quantile of an ascending slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// One line of the long-format metrics table.
///
/// Rows from a single run leave the spread columns empty; rows averaged over
/// several seeds carry the run-to-run standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub predictor: String,
    pub split: String,
    pub resolution_factor: usize,
    /// `None` for rows that pool all classes.
    pub class: Option<u8>,
    pub n_pixels: usize,
    pub nrmse: f64,
    pub r2: Option<f64>,
    pub nrmse_std: Option<f64>,
    pub r2_std: Option<f64>,
    /// How many runs the row summarizes.
    pub runs: usize,
}

/// Flatten a report into long-format rows: one per populated resolution,
/// then one per land-cover class at native resolution.
pub fn metrics_rows(predictor: &str, report: &MetricsReport) -> Vec<MetricsRow> {
    let split = report.mode.as_str().to_string();
    let mut rows = Vec::new();
    let row = |factor: usize, class: Option<u8>, cell: &MetricsCell| MetricsRow {
        predictor: predictor.to_string(),
        split: split.clone(),
        resolution_factor: factor,
        class,
        n_pixels: cell.n_pixels,
        nrmse: cell.nrmse,
        r2: cell.r2,
        nrmse_std: None,
        r2_std: None,
        runs: 1,
    };
    let has_native = report.by_factor.iter().any(|(f, c)| *f == 1 && c.is_some());
    if !has_native {
        rows.push(row(1, None, &report.overall));
    }
    for (factor, cell) in &report.by_factor {
        if let Some(cell) = cell {
            rows.push(row(*factor, None, cell));
        }
    }
    for (class, cell) in &report.by_class {
        rows.push(row(1, Some(*class), cell));
    }
    rows
}

/// Average per-seed rows for one predictor into summary rows.
///
/// Runs are matched cell by cell on (split, resolution factor, class); every
/// run must report the same cells over the same pixels, which holds when all
/// checkpoints were evaluated on one dataset. The spread columns get the
/// sample standard deviation over runs; R^2 is summarized only when defined
/// in every run.
pub fn aggregate_metrics_rows(per_run: &[Vec<MetricsRow>]) -> Result<Vec<MetricsRow>> {
    if per_run.is_empty() {
        return Err(Error::Data("no runs to aggregate".into()));
    }
    if per_run.len() == 1 {
        return Ok(per_run[0].clone());
    }
    let first = &per_run[0];
    let mut out = Vec::with_capacity(first.len());
    for base in first {
        let key = (&base.split, base.resolution_factor, base.class);
        let mut nrmse_values = Vec::with_capacity(per_run.len());
        let mut r2_values = Some(Vec::with_capacity(per_run.len()));
        for run in per_run {
            let row = run
                .iter()
                .find(|r| (&r.split, r.resolution_factor, r.class) == key)
                .ok_or_else(|| {
                    Error::Data(format!(
                        "runs report different cells: {} factor {} class {:?} missing",
                        base.split, base.resolution_factor, base.class
                    ))
                })?;
            if row.predictor != base.predictor || row.n_pixels != base.n_pixels {
                return Err(Error::Data(format!(
                    "runs disagree on cell identity for {} factor {} class {:?}",
                    base.split, base.resolution_factor, base.class
                )));
            }
            nrmse_values.push(row.nrmse);
            match (&mut r2_values, row.r2) {
                (Some(vs), Some(v)) => vs.push(v),
                _ => r2_values = None,
            }
        }
        let (nrmse_mean, nrmse_std) = mean_and_std(&nrmse_values);
        let (r2_mean, r2_std) = match &r2_values {
            Some(vs) => {
                let (m, s) = mean_and_std(vs);
                (Some(m), Some(s))
            }
            None => (None, None),
        };
        out.push(MetricsRow {
            predictor: base.predictor.clone(),
            split: base.split.clone(),
            resolution_factor: base.resolution_factor,
            class: base.class,
            n_pixels: base.n_pixels,
            nrmse: nrmse_mean,
            r2: r2_mean,
            nrmse_std: Some(nrmse_std),
            r2_std,
            runs: per_run.len(),
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation (n - 1 denominator, 0 for one value).
fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Write metrics rows as CSV. Each comment line is prefixed with `# ` above
/// the header; empty fields mark absent classes, undefined R^2, and spread
/// columns of single runs.
pub fn write_metrics_csv(path: &Path, comments: &[String], rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::new();
    for comment in comments {
        text.push_str("# ");
        text.push_str(comment);
        text.push('\n');
    }
    text.push_str("predictor,split,resolution_factor,class,n_pixels,nrmse,r2,nrmse_std,r2_std,runs\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let class = r.class.map(|c| c.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.predictor,
            r.split,
            r.resolution_factor,
            class,
            r.n_pixels,
            r.nrmse,
            opt(r.r2),
            opt(r.nrmse_std),
            opt(r.r2_std),
            r.runs
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write (observed, predicted) pairs as a two-column CSV for scatter plots.
pub fn write_pairs_csv(path: &Path, pairs: &[(f64, f64)]) -> Result<()> {
    let mut text = String::from("observed,predicted\n");
    for (observed, predicted) in pairs {
        text.push_str(&format!("{},{}\n", observed, predicted));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write similarity-diagnostic bins as CSV.
pub fn write_similarity_csv(path: &Path, bins: &[SimilarityBin]) -> Result<()> {
    let mut text =
        String::from("similarity_lo,similarity_hi,pairs,mean_abs_diff,median_abs_diff,p90_abs_diff\n");
    for b in bins {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            b.lo, b.hi, b.pairs, b.mean_abs_diff, b.median_abs_diff, b.p90_abs_diff
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Affine mapping from gray levels back to physical values, stored next to
/// the image as `<name>.json`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgmScale {
    pub width: usize,
    pub height: usize,
    /// Value encoded as gray 0.
    pub offset: f64,
    /// Value increment per gray level: `value = offset + gray * step`.
    pub step: f64,
}

/// Export a map as a 16-bit binary PGM plus a JSON sidecar with the affine
/// value scale.
///
/// The full gray range is stretched over the map's min and max; a constant
/// map encodes as all zeros with step 0. Sample values are big-endian as the
/// netpbm format requires for a 65535 maxval.
pub fn export_pgm<S: Scalar>(path: &Path, map: &[S], height: usize, width: usize) -> Result<PgmScale> {
    if height == 0 || width == 0 || map.len() != height * width {
        return Err(Error::Shape {
            op: "export_pgm",
            details: format!("{} values for a {}x{} image", map.len(), height, width),
        });
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in map {
        let v = v.to_f64c();
        if !v.is_finite() {
            return Err(Error::NonFinite("pgm export input".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let mut bytes = format!("P5\n{} {}\n65535\n", width, height).into_bytes();
    for v in map {
        let gray = if range > 0.0 {
            ((v.to_f64c() - lo) / range * 65535.0).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&gray.to_be_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;

    let scale = PgmScale {
        width,
        height,
        offset: lo,
        step: if range > 0.0 { range / 65535.0 } else { 0.0 },
    };
    let sidecar = sidecar_path(path);
    fs::write(&sidecar, serde_json::to_string_pretty(&scale)?).map_err(|e| Error::io(&sidecar, e))?;
    Ok(scale)
}

/// `map.pgm` gets its value scale in `map.pgm.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::ridge_fit_dataset;
    use crate::data::{build_dataset, SynthConfig};
    use crate::losses::coarse_loss;
    use crate::model::{build_cs_sunet, ModelConfig};
    use proptest::prelude::*;
    use tempfile::tempdir;

    /// Small dataset where almost every pixel clears the sounding threshold.
    fn dense_config(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            tiles: 8,
            tile_size: 8,
            sounding_atoms: vec![0, 30, 60],
            sounding_probs: vec![0.02, 0.49, 0.49],
            missing_fraction: 0.0,
            aggregation_factors: vec![1, 2, 4],
            ..SynthConfig::default()
        }
    }

    struct Oracle;

    impl TilePredictor<f64> for Oracle {
        fn name(&self) -> &'static str {
            "oracle"
        }

        fn predict_tile(&self, tile: &Tile<f64>) -> Result<Vec<f64>> {
            Ok(tile.fine_observed.clone())
        }
    }

    #[test]
    fn nrmse_matches_hand_values_and_rejects_bad_inputs() {
        assert_eq!(nrmse(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), 0.0);
        // Single pixel off by 0.2 with normalizer 0.5: 0.2 / 0.5 = 0.4.
        let got = nrmse(&[1.0], &[1.2], 0.5).unwrap();
        assert!((got - 0.4).abs() < 1e-12, "got {}", got);

        assert!(matches!(nrmse::<f64>(&[], &[], 1.0), Err(Error::Shape { .. })));
        assert!(matches!(nrmse(&[1.0], &[1.0, 2.0], 1.0), Err(Error::Shape { .. })));
        assert!(matches!(nrmse(&[1.0], &[1.0], 0.0), Err(Error::Data(_))));
        assert!(matches!(nrmse(&[1.0], &[1.0], -2.0), Err(Error::Data(_))));
        assert!(matches!(nrmse(&[1.0], &[1.0], f64::NAN), Err(Error::Data(_))));
    }

    #[test]
    fn nrmse_matches_two_pass_oracle() {
        let mut rng = stream(11, "evaltest", 0);
        let truth: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mean = 1.7;

        // Oracle: collect squared diffs first, then sum in reverse order.
        let sq: Vec<f64> = truth.iter().zip(&pred).map(|(t, p)| (t - p) * (t - p)).collect();
        let expect = (sq.iter().rev().sum::<f64>() / 64.0).sqrt() / mean;

        let got = nrmse(&truth, &pred, mean).unwrap();
        assert!((got - expect).abs() <= 1e-12 * expect.abs(), "{} vs {}", got, expect);
    }

    proptest! {
        #[test]
        fn nrmse_covaries_with_uniform_rescaling(
            values in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
            c in 0.1f64..10.0,
        ) {
            let truth: Vec<f64> = values.iter().map(|v| v.0).collect();
            let pred: Vec<f64> = values.iter().map(|v| v.1).collect();
            let mean = 2.0;
            let base = nrmse(&truth, &pred, mean).unwrap();
            let scaled_truth: Vec<f64> = truth.iter().map(|v| c * v).collect();
            let scaled_pred: Vec<f64> = pred.iter().map(|v| c * v).collect();
            let scaled = nrmse(&scaled_truth, &scaled_pred, c * mean).unwrap();
            prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1e-12));
        }

        #[test]
        fn r2_never_exceeds_one(
            values in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40),
        ) {
            let truth: Vec<f64> = values.iter().map(|v| v.0).collect();
            let pred: Vec<f64> = values.iter().map(|v| v.1).collect();
            prop_assume!(truth.iter().any(|v| *v != truth[0]));
            let got = r2(&truth, &pred).unwrap();
            prop_assert!(got <= 1.0, "r2 = {}", got);
        }
    }

    #[test]
    fn r2_hand_values_and_errors() {
        let truth = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r2(&truth, &truth).unwrap(), 1.0);

        // Predicting the truth mean everywhere scores exactly zero.
        let mean = truth.iter().sum::<f64>() / 4.0;
        assert_eq!(r2(&truth, &[mean; 4]).unwrap(), 0.0);

        // Worse than the mean goes negative.
        assert!(r2(&[1.0, 2.0], &[5.0, -5.0]).unwrap() < 0.0);

        assert!(matches!(r2(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Data(_))));
        assert!(matches!(r2(&[1.0], &[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(r2(&[1.0, 2.0], &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn calibration_matches_label_and_flags() {
        let valid = Mask::new(1, 4, vec![true, true, true, false]).unwrap();

        // Mean 2.0, label 4.0: every pixel doubles exactly.
        let (scaled, outcome) =
            calibrate_train_tile(&[1.0f64, 2.0, 3.0, 9.0], &valid, 4.0).unwrap();
        assert_eq!(scaled, vec![2.0, 4.0, 6.0, 18.0]);
        assert_eq!(outcome, Calibration { scale: 2.0, applied: true, negative: false });
        let mean = masked_mean_forward(&scaled, &valid);
        assert!((mean - 4.0).abs() < 1e-12);
        // By construction the coarse loss collapses after calibration.
        assert!(coarse_loss(4.0, &scaled, &valid).unwrap() < 1e-24);

        // Sign disagreement is flagged but still applied.
        let (_, outcome) = calibrate_train_tile(&[-1.0, -2.0, -3.0, 0.0], &valid, 4.0).unwrap();
        assert!(outcome.applied && outcome.negative);

        // Mean below the floor: unscaled, flagged as skipped.
        let (kept, outcome) =
            calibrate_train_tile(&[1e-10, -1e-10, 0.0, 7.0], &valid, 4.0).unwrap();
        assert_eq!(kept, vec![1e-10, -1e-10, 0.0, 7.0]);
        assert_eq!(outcome, Calibration { scale: 1.0, applied: false, negative: false });

        assert!(matches!(
            calibrate_train_tile(&[1.0], &valid, 4.0),
            Err(Error::Shape { .. })
        ));
        let none = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(matches!(
            calibrate_train_tile(&[1.0, 2.0], &none, 4.0),
            Err(Error::EmptyMask { .. })
        ));
    }

    #[test]
    fn calibration_is_identity_when_mean_equals_label() {
        let valid = Mask::new(1, 2, vec![true, true]).unwrap();
        let label = 0.7f64;
        let (scaled, outcome) = calibrate_train_tile(&[label, label], &valid, label).unwrap();
        assert_eq!(outcome.scale, 1.0);
        assert_eq!(scaled[0].to_bits(), label.to_bits());
        assert_eq!(scaled[1].to_bits(), label.to_bits());
    }

    #[test]
    fn perfect_predictor_scores_zero_everywhere() {
        let dataset = build_dataset::<f64>(&dense_config(1)).unwrap();
        let report = evaluate(&Oracle, &dataset, EvalMode::TestTilesRaw).unwrap();

        assert_eq!(report.overall.nrmse, 0.0);
        assert_eq!(report.overall.r2, Some(1.0));
        assert!(report.overall.n_pixels > 0);
        assert!(report.tiles_evaluated > 0);
        assert_eq!(report.tiles_skipped_calibration, 0);

        assert_eq!(report.by_factor.len(), 3);
        for (factor, cell) in &report.by_factor {
            let cell = cell.unwrap_or_else(|| panic!("factor {} has no cell", factor));
            assert_eq!(cell.nrmse, 0.0, "factor {}", factor);
        }
        assert!(!report.by_class.is_empty());
        for (class, cell) in &report.by_class {
            assert_eq!(cell.nrmse, 0.0, "class {}", class);
            assert!(cell.n_pixels > 0);
        }
    }

    #[test]
    fn trivial_predictor_error_shrinks_with_aggregation() {
        let dataset = build_dataset::<f64>(&dense_config(3)).unwrap();
        let report =
            evaluate(&TrivialPredictor, &dataset, EvalMode::TrainTilesCalibrated).unwrap();

        assert!(report.overall.nrmse > 0.0);
        let cell_at = |f: usize| {
            report
                .by_factor
                .iter()
                .find(|(factor, _)| *factor == f)
                .and_then(|(_, c)| *c)
                .unwrap_or_else(|| panic!("factor {} missing", f))
        };
        let f1 = cell_at(1).nrmse;
        let f2 = cell_at(2).nrmse;
        let f4 = cell_at(4).nrmse;
        // Constant-per-tile predictions lose only within-tile structure,
        // and block means have less of it the bigger the block.
        assert!(f2 <= f1, "factor 2 {} vs factor 1 {}", f2, f1);
        assert!(f4 <= f2, "factor 4 {} vs factor 2 {}", f4, f2);
    }

    #[test]
    fn evaluate_matches_independent_loop() {
        let dataset = build_dataset::<f64>(&dense_config(5)).unwrap();
        let report = evaluate(&TrivialPredictor, &dataset, EvalMode::TestTilesRaw).unwrap();

        let mut labels = Vec::new();
        for (i, tile) in dataset.tiles.iter().enumerate() {
            if dataset.split[i] == SplitTag::Train {
                labels.push(tile.coarse_label);
            }
        }
        let train_mean = labels.iter().sum::<f64>() / labels.len() as f64;
        assert_eq!(report.train_mean, train_mean);

        let mut sq_sum = 0.0;
        let mut n = 0usize;
        for (i, tile) in dataset.tiles.iter().enumerate() {
            if dataset.split[i] != SplitTag::Test || tile.coarse_only {
                continue;
            }
            for p in 0..tile.pixel_count() {
                if tile.soundings[p] >= EVAL_MIN_SOUNDINGS && tile.fine_observed[p] > EVAL_MIN_VALUE
                {
                    let d = tile.fine_observed[p] - tile.coarse_label;
                    sq_sum += d * d;
                    n += 1;
                }
            }
        }
        let expect = (sq_sum / n as f64).sqrt() / train_mean;
        assert_eq!(report.overall.n_pixels, n);
        assert!(
            (report.overall.nrmse - expect).abs() <= 1e-12 * expect,
            "{} vs {}",
            report.overall.nrmse,
            expect
        );
    }

    #[test]
    fn evaluate_without_eval_pixels_is_an_error() {
        let config = SynthConfig {
            tiles: 6,
            tile_size: 8,
            sounding_atoms: vec![0, 1],
            sounding_probs: vec![0.2, 0.8],
            aggregation_factors: vec![1, 2],
            ..SynthConfig::default()
        };
        let dataset = build_dataset::<f64>(&config).unwrap();
        let err = evaluate(&TrivialPredictor, &dataset, EvalMode::TestTilesRaw).unwrap_err();
        match err {
            Error::Data(msg) => assert!(msg.contains("soundings"), "{}", msg),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn factor1_pairs_match_overall_cell() {
        let dataset = build_dataset::<f64>(&dense_config(5)).unwrap();
        let report = evaluate(&TrivialPredictor, &dataset, EvalMode::TestTilesRaw).unwrap();
        let pairs = factor1_pairs(&TrivialPredictor, &dataset, EvalMode::TestTilesRaw).unwrap();
        assert_eq!(pairs.len(), report.overall.n_pixels);
        let truth: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let direct = nrmse(&truth, &pred, report.train_mean).unwrap();
        assert_eq!(direct, report.overall.nrmse);
    }

    #[test]
    fn model_and_ridge_predictors_run_through_evaluate() {
        let dataset = build_dataset::<f64>(&dense_config(7)).unwrap();

        let ridge = ridge_fit_dataset(&dataset, 100.0).unwrap();
        let report = evaluate(&ridge, &dataset, EvalMode::TrainTilesCalibrated).unwrap();
        assert!(report.overall.nrmse.is_finite());
        assert_eq!(TilePredictor::<f64>::name(&ridge), "ridge");

        let config = ModelConfig { in_channels: dataset.layout.total(), hidden_units: [4, 8, 8] };
        let params = build_cs_sunet::<f64>(&config, 0).unwrap();
        let report = evaluate(&params, &dataset, EvalMode::TestTilesRaw).unwrap();
        assert!(report.overall.nrmse.is_finite());
        assert_eq!(TilePredictor::<f64>::name(&params), "unet");
    }

    #[test]
    fn similarity_diagnostic_orders_bins_by_truth_difference() {
        let dataset = build_dataset::<f64>(&dense_config(0)).unwrap();
        let bins = similarity_vs_label_diff(&dataset, 0.5, 4000, 4, 0).unwrap();

        assert!(bins.len() >= 2, "want multiple populated bins, got {:?}", bins);
        assert_eq!(bins.iter().map(|b| b.pairs).sum::<usize>(), 4000);
        for b in &bins {
            assert!(b.lo >= 0.0 && b.hi <= 1.0 && b.lo < b.hi);
            assert!(b.median_abs_diff <= b.p90_abs_diff);
        }
        let lowest = bins.first().unwrap();
        let highest = bins.last().unwrap();
        assert!(
            highest.mean_abs_diff < lowest.mean_abs_diff,
            "similar pixels should have closer truth: {:?}",
            bins
        );
    }

    #[test]
    fn similarity_diagnostic_on_constant_truth_is_all_zero() {
        let mut dataset = build_dataset::<f64>(&dense_config(2)).unwrap();
        for tile in &mut dataset.tiles {
            tile.fine_truth = vec![1.5; tile.fine_truth.len()];
        }
        let bins = similarity_vs_label_diff(&dataset, 0.5, 500, 3, 9).unwrap();
        assert!(!bins.is_empty());
        for b in &bins {
            assert_eq!(b.mean_abs_diff, 0.0);
            assert_eq!(b.p90_abs_diff, 0.0);
        }
    }

    #[test]
    fn similarity_diagnostic_rejects_bad_arguments() {
        let dataset = build_dataset::<f64>(&dense_config(2)).unwrap();
        assert!(matches!(
            similarity_vs_label_diff(&dataset, 0.5, 0, 3, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            similarity_vs_label_diff(&dataset, 0.5, 10, 0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            similarity_vs_label_diff(&dataset, 0.0, 10, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pgm_export_round_trips_bytes_and_scale() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let map = [0.0f64, 1.0, 2.0, 4.0];
        let scale = export_pgm(&path, &map, 2, 2).unwrap();

        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let samples = &bytes[header.len()..];
        // min -> 0, 1/4 of range -> 16384, half -> 32768, max -> 65535,
        // big-endian sample order.
        assert_eq!(samples, &[0, 0, 0x40, 0x00, 0x80, 0x00, 0xff, 0xff]);

        let sidecar = fs::read_to_string(sidecar_path(&path)).unwrap();
        let parsed: PgmScale = serde_json::from_str(&sidecar).unwrap();
        assert_eq!(parsed, scale);
        assert_eq!(scale.offset, 0.0);
        assert!((scale.step - 4.0 / 65535.0).abs() < 1e-15);

        // Every value reconstructs to within half a gray step.
        for (i, v) in map.iter().enumerate() {
            let gray = u16::from_be_bytes([samples[2 * i], samples[2 * i + 1]]) as f64;
            let back = scale.offset + gray * scale.step;
            assert!((back - v).abs() <= scale.step / 2.0 + 1e-12, "pixel {}", i);
        }
    }

    #[test]
    fn pgm_export_handles_constant_and_rejects_bad_maps() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("flat.pgm");
        let scale = export_pgm(&path, &[2.5f64; 4], 2, 2).unwrap();
        assert_eq!(scale.step, 0.0);
        assert_eq!(scale.offset, 2.5);
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.ends_with(&[0u8; 8]));

        assert!(matches!(
            export_pgm(&path, &[1.0f64; 3], 2, 2),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            export_pgm(&path, &[1.0, f64::NAN, 0.0, 0.0], 2, 2),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn metrics_csv_golden() {
        let overall = MetricsCell { n_pixels: 10, nrmse: 0.5, r2: Some(0.75) };
        let report = MetricsReport {
            mode: EvalMode::TestTilesRaw,
            train_mean: 2.0,
            tiles_evaluated: 3,
            tiles_skipped_calibration: 0,
            overall,
            by_factor: vec![
                (1, Some(overall)),
                (2, Some(MetricsCell { n_pixels: 4, nrmse: 0.25, r2: None })),
                (4, None),
            ],
            by_class: vec![(0, MetricsCell { n_pixels: 6, nrmse: 0.5, r2: Some(0.5) })],
        };
        let rows = metrics_rows("ridge", &report);
        assert_eq!(rows.len(), 3);

        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &["seed 0".to_string()], &rows).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "# seed 0\n\
             predictor,split,resolution_factor,class,n_pixels,nrmse,r2,nrmse_std,r2_std,runs\n\
             ridge,test-tiles-raw,1,,10,0.5,0.75,,,1\n\
             ridge,test-tiles-raw,2,,4,0.25,,,,1\n\
             ridge,test-tiles-raw,1,0,6,0.5,0.5,,,1\n"
        );
    }

    #[test]
    fn aggregating_rows_averages_across_seeds() {
        let base = MetricsRow {
            predictor: "unet".to_string(),
            split: "test-tiles-raw".to_string(),
            resolution_factor: 1,
            class: None,
            n_pixels: 40,
            nrmse: 0.2,
            r2: Some(0.8),
            nrmse_std: None,
            r2_std: None,
            runs: 1,
        };
        let run_a = vec![base.clone()];
        let run_b = vec![MetricsRow { nrmse: 0.4, r2: Some(0.6), ..base.clone() }];

        let merged = aggregate_metrics_rows(&[run_a.clone(), run_b.clone()]).unwrap();
        assert_eq!(merged.len(), 1);
        let row = &merged[0];
        assert_eq!(row.runs, 2);
        assert!((row.nrmse - 0.3).abs() < 1e-15);
        // Sample std of {0.2, 0.4} is 0.2 / sqrt(2).
        assert!((row.nrmse_std.unwrap() - 0.2 / 2.0f64.sqrt()).abs() < 1e-15);
        assert!((row.r2.unwrap() - 0.7).abs() < 1e-15);

        // One run is passed through untouched.
        let single = aggregate_metrics_rows(std::slice::from_ref(&run_a)).unwrap();
        assert_eq!(single, run_a);

        // R^2 undefined in one run suppresses the summary.
        let run_c = vec![MetricsRow { r2: None, ..base.clone() }];
        let merged = aggregate_metrics_rows(&[run_a.clone(), run_c]).unwrap();
        assert_eq!(merged[0].r2, None);

        // Mismatched cells are rejected.
        let run_d = vec![MetricsRow { resolution_factor: 2, ..base.clone() }];
        assert!(aggregate_metrics_rows(&[run_a.clone(), run_d]).is_err());
        let run_e = vec![MetricsRow { n_pixels: 39, ..base }];
        assert!(aggregate_metrics_rows(&[run_a, run_e]).is_err());
        assert!(aggregate_metrics_rows(&[]).is_err());
    }

    #[test]
    fn raising_the_sounding_threshold_lowers_observation_noise() {
        // A predictor that answers with the latent truth turns the score into
        // a pure measurement of observation noise, which the sounding law
        // makes fall as the threshold rises.
        struct TruthOracle;
        impl TilePredictor<f64> for TruthOracle {
            fn name(&self) -> &'static str {
                "truth-oracle"
            }
            fn predict_tile(&self, tile: &Tile<f64>) -> Result<Vec<f64>> {
                Ok(tile.fine_truth.clone())
            }
        }

        let config = SynthConfig {
            seed: 4,
            tiles: 40,
            tile_size: 12,
            aggregation_factors: vec![1],
            ..SynthConfig::default()
        };
        let dataset = build_dataset::<f64>(&config).unwrap();
        let mut last = f64::INFINITY;
        for min in [1u32, 5, 10, 30] {
            let report =
                evaluate_with(&TruthOracle, &dataset, EvalMode::TestTilesRaw, min).unwrap();
            assert!(
                report.overall.nrmse < last,
                "threshold {} gave {} after {}",
                min,
                report.overall.nrmse,
                last
            );
            last = report.overall.nrmse;
        }
    }

    #[test]
    fn pairs_and_similarity_csv_have_expected_shape() {
        let dir = tempdir().unwrap();
        let pairs_path = dir.path().join("pairs.csv");
        write_pairs_csv(&pairs_path, &[(1.0, 2.0), (0.5, 0.25)]).unwrap();
        assert_eq!(
            fs::read_to_string(&pairs_path).unwrap(),
            "observed,predicted\n1,2\n0.5,0.25\n"
        );

        let bins_path = dir.path().join("bins.csv");
        let bin = SimilarityBin {
            lo: 0.0,
            hi: 0.5,
            pairs: 3,
            mean_abs_diff: 0.5,
            median_abs_diff: 0.5,
            p90_abs_diff: 1.5,
        };
        write_similarity_csv(&bins_path, &[bin]).unwrap();
        assert_eq!(
            fs::read_to_string(&bins_path).unwrap(),
            "similarity_lo,similarity_hi,pairs,mean_abs_diff,median_abs_diff,p90_abs_diff\n\
             0,0.5,3,0.5,0.5,1.5\n"
        );
    }
}
