//! Reference predictors the learned models are compared against: ridge
//! regression on tile-average features (the strongest statistical
//! downscaler here), the trivial predictor that copies the coarse label to
//! every pixel, and the fine-supervision loss that turns the training loop
//! into a fully supervised upper bound.

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{masked_mean_forward, masked_mse_forward};
use crate::data::{Dataset, SplitTag, Tile};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mask;

pub const DEFAULT_RIDGE_ALPHA: f64 = 100.0;

/// Linear model over tile-average features, one weight per feature channel
/// (mask and one-hot channels included) plus an unpenalized intercept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel<S> {
    pub weights: Vec<S>,
    pub intercept: S,
    pub alpha: f64,
}

/// Per-channel mean over the tile's valid pixels.
pub fn tile_average_features<S: Scalar>(tile: &Tile<S>) -> Result<Vec<S>> {
    if tile.valid.count() == 0 {
        return Err(Error::EmptyMask { op: "tile_average_features" });
    }
    Ok((0..tile.channel_count())
        .map(|c| masked_mean_forward(tile.channel(c), &tile.valid))
        .collect())
}

/// Fit ridge regression with an unpenalized intercept.
///
/// Features and targets are centered, `w = (Xc'Xc + alpha I)^-1 Xc' yc` is
/// solved by Cholesky factorization (accumulating in f64), and the intercept
/// restores the means. With `alpha = 0` a rank-deficient system is reported
/// as an error instead of returning garbage coefficients.
pub fn ridge_fit<S: Scalar>(x: &[Vec<S>], y: &[S], alpha: f64) -> Result<RidgeModel<S>> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(Error::Data(format!(
            "ridge fit needs matching nonempty rows and targets, got {} rows and {} targets",
            n,
            y.len()
        )));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|row| row.len() != d) {
        return Err(Error::Data("ridge fit needs equal-length nonempty feature rows".into()));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Config(format!("ridge alpha must be finite and >= 0, got {}", alpha)));
    }

    let xf: Vec<Vec<f64>> = x
        .iter()
        .map(|row| row.iter().map(|v| v.to_f64c()).collect())
        .collect();
    let yf: Vec<f64> = y.iter().map(|v| v.to_f64c()).collect();
    let x_mean: Vec<f64> = (0..d)
        .map(|j| xf.iter().map(|row| row[j]).sum::<f64>() / n as f64)
        .collect();
    let y_mean = yf.iter().sum::<f64>() / n as f64;

    // gram matrix of centered features, plus the ridge on the diagonal
    let mut a = vec![vec![0.0f64; d]; d];
    let mut b = vec![0.0f64; d];
    for (row, &target) in xf.iter().zip(&yf) {
        let centered: Vec<f64> = row.iter().zip(&x_mean).map(|(v, m)| v - m).collect();
        let yc = target - y_mean;
        for j in 0..d {
            b[j] += centered[j] * yc;
            for k in j..d {
                a[j][k] += centered[j] * centered[k];
            }
        }
    }
    for j in 0..d {
        a[j][j] += alpha;
        for k in 0..j {
            a[j][k] = a[k][j];
        }
    }

    let w = cholesky_solve(a, b)?;
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(w, m)| w * m).sum::<f64>();
    Ok(RidgeModel {
        weights: w.into_iter().map(S::from_f64c).collect(),
        intercept: S::from_f64c(intercept),
        alpha,
    })
}

/// Solve `A x = b` for symmetric positive definite `A`, in place.
fn cholesky_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let d = a.len();
    let scale = (0..d).map(|j| a[j][j].abs()).fold(0.0f64, f64::max).max(1.0);
    for j in 0..d {
        for k in 0..j {
            let ljk = a[j][k];
            for i in j..d {
                a[i][j] -= ljk * a[i][k];
            }
        }
        let pivot = a[j][j];
        if !(pivot > scale * 1e-13) {
            return Err(Error::Data(
                "ridge system is singular (collinear features with alpha = 0); use alpha > 0".into(),
            ));
        }
        let root = pivot.sqrt();
        for i in j..d {
            a[i][j] /= root;
        }
    }
    // forward substitution L z = b, then back substitution L' x = z
    for j in 0..d {
        b[j] /= a[j][j];
        for i in j + 1..d {
            b[i] -= a[i][j] * b[j];
        }
    }
    for j in (0..d).rev() {
        b[j] /= a[j][j];
        for i in 0..j {
            b[i] -= a[j][i] * b[j];
        }
    }
    Ok(b)
}

/// Fit ridge on the train split: one row of tile-average features per train
/// tile, coarse labels as targets.
pub fn ridge_fit_dataset<S: Scalar>(dataset: &Dataset<S>, alpha: f64) -> Result<RidgeModel<S>> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (_, tile) in dataset.tiles_in(SplitTag::Train) {
        rows.push(tile_average_features(tile)?);
        labels.push(tile.coarse_label);
    }
    ridge_fit(&rows, &labels, alpha)
}

/// Apply the linear model at every pixel.
pub fn ridge_predict_fine<S: Scalar>(model: &RidgeModel<S>, tile: &Tile<S>) -> Result<Vec<S>> {
    let channels = tile.channel_count();
    if model.weights.len() != channels {
        return Err(Error::Shape {
            op: "ridge_predict_fine",
            details: format!("{} weights for {} feature channels", model.weights.len(), channels),
        });
    }
    let px = tile.pixel_count();
    let mut out = vec![model.intercept; px];
    for (c, w) in model.weights.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(tile.channel(c)) {
            *o += *w * *v;
        }
    }
    Ok(out)
}

/// The degenerate solution the coarse loss alone admits: every pixel gets
/// the tile's coarse label.
pub fn predict_coarse_trivial<S: Scalar>(tile: &Tile<S>) -> Vec<S> {
    vec![tile.coarse_label; tile.pixel_count()]
}

/// Mean squared error over the evaluation pixels; swapped in for the
/// coarse+smoothness objective to train the fully supervised upper bound.
pub fn fine_loss<S: Scalar>(truth: &[S], predictions: &[S], eval_mask: &Mask) -> Result<S> {
    if truth.len() != eval_mask.len() || predictions.len() != eval_mask.len() {
        return Err(Error::Shape {
            op: "fine_loss",
            details: format!(
                "{} truth and {} prediction values for a {}-pixel mask",
                truth.len(),
                predictions.len(),
                eval_mask.len()
            ),
        });
    }
    if eval_mask.count() == 0 {
        return Err(Error::EmptyMask { op: "fine_loss" });
    }
    Ok(masked_mse_forward(predictions, truth, eval_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::coarse_loss;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tile_with_features(h: usize, w: usize, planes: Vec<Vec<f64>>, valid: Vec<bool>) -> Tile<f64> {
        let px = h * w;
        let features: Vec<f64> = planes.into_iter().flatten().collect();
        let valid = Mask::new(h, w, valid).unwrap();
        let coarse_label = if valid.count() > 0 {
            masked_mean_forward(&vec![1.0; px], &valid)
        } else {
            0.0
        };
        Tile {
            features,
            land_cover: vec![0; px],
            valid,
            soundings: vec![1; px],
            fine_truth: vec![0.0; px],
            fine_observed: vec![0.0; px],
            coarse_label,
            coarse_only: false,
        }
    }

    #[test]
    fn tile_averages_are_masked_channel_means() {
        let tile = tile_with_features(
            1,
            3,
            vec![vec![5.0, 5.0, 5.0], vec![1.0, 3.0, 9.0]],
            vec![true, true, false],
        );
        let avg = tile_average_features(&tile).unwrap();
        assert_eq!(avg, vec![5.0, 2.0]);

        // independent per-channel loop oracle
        let mut oracle = vec![0.0f64; 2];
        for c in 0..2 {
            let (mut sum, mut count) = (0.0, 0usize);
            for p in 0..3 {
                if tile.valid.get(p) {
                    sum += tile.channel(c)[p];
                    count += 1;
                }
            }
            oracle[c] = sum / count as f64;
        }
        for (a, o) in avg.iter().zip(&oracle) {
            assert_eq!(a.to_bits(), o.to_bits());
        }

        let empty = tile_with_features(1, 1, vec![vec![1.0]], vec![false]);
        assert!(matches!(
            tile_average_features(&empty),
            Err(Error::EmptyMask { .. })
        ));
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect()
    }

    #[test]
    fn unregularized_fit_recovers_exact_linear_data() {
        let truth_w = [1.5, -2.0, 0.5];
        let truth_b = 0.75;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..3).map(|_| rng.random_range(-5i32..6) as f64).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|row| truth_b + row.iter().zip(&truth_w).map(|(v, w)| v * w).sum::<f64>())
            .collect();
        let model = ridge_fit(&x, &y, 0.0).unwrap();
        for (w, t) in model.weights.iter().zip(&truth_w) {
            assert!((w - t).abs() < 1e-8, "weight {} vs {}", w, t);
        }
        assert!((model.intercept - truth_b).abs() < 1e-8);
    }

    #[test]
    fn huge_alpha_shrinks_weights_to_the_mean_predictor() {
        let x = random_rows(30, 4, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y: Vec<f64> = (0..30).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = ridge_fit(&x, &y, 1e12).unwrap();
        for w in &model.weights {
            assert!(w.abs() < 1e-6, "weight {} should be shrunk away", w);
        }
        let y_mean = y.iter().sum::<f64>() / 30.0;
        assert!((model.intercept - y_mean).abs() < 1e-6);
    }

    /// Independent oracle: assemble the same centered normal equations and
    /// solve them by Gauss-Jordan elimination with partial pivoting.
    fn gauss_jordan_ridge(x: &[Vec<f64>], y: &[f64], alpha: f64) -> (Vec<f64>, f64) {
        let n = x.len();
        let d = x[0].len();
        let xm: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let ym = y.iter().sum::<f64>() / n as f64;
        let mut a = vec![vec![0.0; d + 1]; d];
        for (row, &target) in x.iter().zip(y) {
            for j in 0..d {
                for k in 0..d {
                    a[j][k] += (row[j] - xm[j]) * (row[k] - xm[k]);
                }
                a[j][d] += (row[j] - xm[j]) * (target - ym);
            }
        }
        for j in 0..d {
            a[j][j] += alpha;
        }
        for col in 0..d {
            let pivot = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for v in &mut a[col] {
                *v /= p;
            }
            for row in 0..d {
                if row != col {
                    let f = a[row][col];
                    for k in 0..=d {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let w: Vec<f64> = (0..d).map(|j| a[j][d]).collect();
        let b = ym - w.iter().zip(&xm).map(|(w, m)| w * m).sum::<f64>();
        (w, b)
    }

    #[test]
    fn fit_matches_an_independent_normal_equations_oracle() {
        let x = random_rows(50, 10, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let y: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let model = ridge_fit(&x, &y, 3.7).unwrap();
        let (ow, ob) = gauss_jordan_ridge(&x, &y, 3.7);
        for (w, o) in model.weights.iter().zip(&ow) {
            assert!((w - o).abs() < 1e-10, "{} vs oracle {}", w, o);
        }
        assert!((model.intercept - ob).abs() < 1e-10);
    }

    #[test]
    fn collinear_features_without_ridge_are_a_structured_error() {
        // second column duplicates the first
        let x: Vec<Vec<f64>> = random_rows(20, 1, 31)
            .into_iter()
            .map(|r| vec![r[0], r[0], r[0] * 0.5])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = ridge_fit(&x, &y, 0.0).unwrap_err();
        assert!(err.to_string().contains("alpha"), "got: {}", err);
        assert!(ridge_fit(&x, &y, 1.0).is_ok(), "ridge regularizes the collinearity away");
    }

    #[test]
    fn fit_is_invariant_under_row_permutation() {
        let x = random_rows(25, 6, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let y: Vec<f64> = (0..25).map(|_| rng.random_range(-3.0..3.0)).collect();
        let forward = ridge_fit(&x, &y, 2.5).unwrap();
        let xr: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
        let yr: Vec<f64> = y.iter().rev().cloned().collect();
        let reversed = ridge_fit(&xr, &yr, 2.5).unwrap();
        for (a, b) in forward.weights.iter().zip(&reversed.weights) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!((forward.intercept - reversed.intercept).abs() < 1e-10);
    }

    #[test]
    fn prediction_is_the_per_pixel_dot_product() {
        let tile = tile_with_features(
            1,
            2,
            vec![vec![1.0, 2.0], vec![3.0, -1.0]],
            vec![true, true],
        );
        let model = RidgeModel { weights: vec![0.0, 0.0], intercept: 1.25, alpha: 1.0 };
        assert_eq!(ridge_predict_fine(&model, &tile).unwrap(), vec![1.25, 1.25]);

        let model = RidgeModel { weights: vec![2.0, -0.5], intercept: 0.25, alpha: 1.0 };
        let pred = ridge_predict_fine(&model, &tile).unwrap();
        for p in 0..2 {
            let oracle = 0.25 + 2.0 * tile.channel(0)[p] - 0.5 * tile.channel(1)[p];
            assert!((pred[p] - oracle).abs() < 1e-15);
        }

        let short = RidgeModel { weights: vec![1.0], intercept: 0.0, alpha: 1.0 };
        assert!(ridge_predict_fine(&short, &tile).is_err());
    }

    #[test]
    fn uniform_tiles_predict_their_own_coarse_value_everywhere() {
        let tile = tile_with_features(
            2,
            2,
            vec![vec![0.5; 4], vec![-1.5; 4]],
            vec![true, true, true, false],
        );
        let model = RidgeModel { weights: vec![1.0, 2.0], intercept: 0.1, alpha: 1.0 };
        let pred = ridge_predict_fine(&model, &tile).unwrap();
        let avg = tile_average_features(&tile).unwrap();
        let coarse = 0.1 + 1.0 * avg[0] + 2.0 * avg[1];
        for p in pred {
            assert!((p - coarse).abs() < 1e-15);
        }
    }

    /// The defining failure mode of statistical downscaling: a linear model
    /// cannot tell fine structure from its tile mean, so per-pixel
    /// predictions averaged over valid pixels equal the coarse prediction.
    #[test]
    fn valid_mean_of_fine_predictions_equals_the_coarse_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..9).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let valid: Vec<bool> = (0..9).map(|p| p % 4 != 0).collect();
        let tile = tile_with_features(3, 3, planes, valid);
        let model = RidgeModel { weights: vec![1.5, -0.25, 0.75], intercept: -0.4, alpha: 1.0 };
        let pred = ridge_predict_fine(&model, &tile).unwrap();
        let fine_mean = masked_mean_forward(&pred, &tile.valid);
        let avg = tile_average_features(&tile).unwrap();
        let coarse: f64 = -0.4 + avg.iter().zip(&model.weights).map(|(a, w)| a * w).sum::<f64>();
        assert!((fine_mean - coarse).abs() < 1e-12, "{} vs {}", fine_mean, coarse);
    }

    #[test]
    fn trivial_predictor_zeroes_the_coarse_loss() {
        let mut tile = tile_with_features(
            2,
            2,
            vec![vec![0.0; 4]],
            vec![true, false, true, true],
        );
        tile.coarse_label = 1.2;
        let pred = predict_coarse_trivial(&tile);
        assert_eq!(pred, vec![1.2; 4]);
        let loss = coarse_loss(tile.coarse_label, &pred, &tile.valid).unwrap();
        assert!(loss < 1e-28, "coarse loss {} should vanish", loss);
    }

    #[test]
    fn fine_loss_is_the_masked_mse() {
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        assert_eq!(fine_loss(&[1.0, 9.0], &[1.0, -4.0], &mask).unwrap(), 0.0);
        assert_eq!(fine_loss(&[1.0, 9.0], &[1.5, -4.0], &mask).unwrap(), 0.25);
        let none = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(matches!(
            fine_loss(&[1.0, 9.0], &[1.5, -4.0], &none),
            Err(Error::EmptyMask { .. })
        ));
        assert!(fine_loss(&[1.0], &[1.5, -4.0], &mask).is_err());
    }

    /// With exactly one valid pixel the coarse loss and the fine loss are
    /// the same squared error.
    #[test]
    fn single_pixel_tiles_make_fine_and_coarse_losses_agree() {
        let mask = Mask::new(1, 3, vec![false, true, false]).unwrap();
        let truth = 0.7f64;
        let pred = vec![5.0, 0.9, -3.0];
        let fine: f64 = fine_loss(&[0.0, truth, 0.0], &pred, &mask).unwrap();
        let coarse: f64 = coarse_loss(truth, &pred, &mask).unwrap();
        assert_eq!(fine.to_bits(), coarse.to_bits());
    }

    #[test]
    fn dataset_fit_uses_train_tiles_only() {
        let config = crate::data::SynthConfig {
            tiles: 10,
            tile_size: 8,
            aggregation_factors: vec![1, 2],
            landcover_scale: 2.0,
            reflectance_scale: 2.0,
            ..Default::default()
        };
        let dataset: Dataset<f64> = crate::data::build_dataset(&config).unwrap();
        let model = ridge_fit_dataset(&dataset, DEFAULT_RIDGE_ALPHA).unwrap();
        assert_eq!(model.weights.len(), dataset.layout.total());

        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (_, tile) in dataset.tiles_in(SplitTag::Train) {
            rows.push(tile_average_features(tile).unwrap());
            labels.push(tile.coarse_label);
        }
        let direct = ridge_fit(&rows, &labels, DEFAULT_RIDGE_ALPHA).unwrap();
        assert_eq!(model, direct);
    }
}
