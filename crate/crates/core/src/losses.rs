//! Training losses: the coarse tile-average loss, a similarity-gated
//! pairwise smoothness regularizer, and their weighted combination.
//!
//! The model never sees per-pixel targets. Supervision comes from one scalar
//! label per tile, compared against the masked mean of the prediction map,
//! plus a regularizer that pulls predictions together for pixel pairs whose
//! reflectance vectors are close and whose land-cover class matches.
//!
//! Everything here is a pure function of its inputs. The training loop builds
//! the same expressions as graph nodes to get gradients; tests pin the two
//! routes against each other.

use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{masked_mean_forward, pairwise_smoothness_forward};
use crate::autodiff::SimMatrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mask;

/// Weights and sampling knobs for the combined loss.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the smoothness term.
    pub lambda: f64,
    /// Spread of the similarity kernel `exp(-tau * ||dx_ref||^2)`.
    pub tau: f64,
    /// Pixels drawn per batch for the smoothness term.
    pub sample_size: usize,
    /// Feature-channel indices whose values form `x_ref`.
    pub reflectance_channels: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.5, tau: 0.5, sample_size: 1000, reflectance_channels: (0..7).collect() }
    }
}

impl LossConfig {
    /// Validate against the feature channel count of the dataset in use.
    pub fn validate(&self, channel_count: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        if self.sample_size < 2 {
            return Err(Error::Config(format!("sample_size must be >= 2, got {}", self.sample_size)));
        }
        if self.reflectance_channels.is_empty() {
            return Err(Error::Config("reflectance_channels must not be empty".into()));
        }
        if let Some(&bad) = self.reflectance_channels.iter().find(|&&c| c >= channel_count) {
            return Err(Error::Config(format!(
                "reflectance channel {} out of range for {} channels",
                bad, channel_count
            )));
        }
        Ok(())
    }
}

/// One pixel drawn for the smoothness term.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSample<S> {
    /// Index of the source tile within the batch.
    pub tile: usize,
    /// Row-major pixel index within the tile.
    pub pixel: usize,
    /// Land-cover class id.
    pub class_id: u8,
    /// Full feature vector at the pixel, one value per channel.
    pub features: Vec<S>,
    /// The `reflectance_channels` slice of `features`.
    pub x_ref: Vec<S>,
    /// Predicted value at the pixel.
    pub z: S,
}

/// Everything the loss needs to know about one tile of a batch.
///
/// Borrowed views keep the loss functions independent of how tiles are
/// stored; predictions typically point into a graph value buffer.
#[derive(Clone, Copy)]
pub struct TileView<'a, S> {
    /// Feature planes, channel-major, each `height * width` long.
    pub features: &'a [S],
    /// Land-cover class id per pixel, row-major.
    pub land_cover: &'a [u8],
    /// Pixels that carry usable observations.
    pub valid: &'a Mask,
    /// Predicted value per pixel, row-major.
    pub predictions: &'a [S],
}

impl<'a, S: Scalar> TileView<'a, S> {
    fn pixel_count(&self) -> usize {
        self.valid.height() * self.valid.width()
    }

    fn channel_count(&self) -> usize {
        debug_assert_eq!(self.features.len() % self.pixel_count(), 0);
        self.features.len() / self.pixel_count()
    }

    fn feature_at(&self, channel: usize, pixel: usize) -> S {
        self.features[channel * self.pixel_count() + pixel]
    }
}

/// Squared error between the tile label and the masked mean prediction.
pub fn coarse_loss<S: Scalar>(label: S, predictions: &[S], valid: &Mask) -> Result<S> {
    if predictions.len() != valid.height() * valid.width() {
        return Err(Error::Shape {
            op: "coarse_loss",
            details: format!(
                "{} predictions for a {}x{} mask",
                predictions.len(),
                valid.height(),
                valid.width()
            ),
        });
    }
    if valid.count() == 0 {
        return Err(Error::EmptyMask { op: "coarse_loss" });
    }
    let diff = label - masked_mean_forward(predictions, valid);
    Ok(diff * diff)
}

/// Kernel similarity of two sampled pixels, gated to 0 across classes.
pub fn similarity<S: Scalar>(a: &PixelSample<S>, b: &PixelSample<S>, tau: S) -> S {
    assert_eq!(a.x_ref.len(), b.x_ref.len(), "x_ref lengths differ");
    if a.class_id != b.class_id {
        return S::zero();
    }
    let sq_dist: S = a
        .x_ref
        .iter()
        .zip(&b.x_ref)
        .map(|(&xa, &xb)| {
            let d = xa - xb;
            d * d
        })
        .sum();
    (-tau * sq_dist).exp()
}

/// Pairwise similarities of a sample set, packed for the smoothness term.
pub fn build_similarity_matrix<S: Scalar>(samples: &[PixelSample<S>], tau: S) -> SimMatrix<S> {
    let n = samples.len();
    let mut upper = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for j in 0..n {
        for k in j + 1..n {
            upper.push(similarity(&samples[j], &samples[k], tau));
        }
    }
    SimMatrix::new(n, upper).expect("triangle length is correct by construction")
}

/// Mean similarity-weighted squared prediction difference over all ordered
/// pairs, `(1/n^2) * sum_{j,k} sim(j,k) * (z_j - z_k)^2`.
///
/// Returns the loss and a degeneracy flag that is true when fewer than two
/// samples were available (the loss is then 0 and carries no signal).
pub fn smoothness_loss<S: Scalar>(samples: &[PixelSample<S>], tau: S) -> (S, bool) {
    let sim = build_similarity_matrix(samples, tau);
    let z: Vec<S> = samples.iter().map(|s| s.z).collect();
    (pairwise_smoothness_forward(&z, &sim), samples.len() < 2)
}

/// Draw pixels for the smoothness term, uniformly without replacement from
/// the union of valid pixels across the batch.
///
/// If the batch has at most `sample_size` valid pixels, all of them are
/// returned in tile-major order.
pub fn sample_pixels<S: Scalar, R: rand::Rng + ?Sized>(
    batch: &[TileView<'_, S>],
    reflectance_channels: &[usize],
    sample_size: usize,
    rng: &mut R,
) -> Result<Vec<PixelSample<S>>> {
    for (t, tile) in batch.iter().enumerate() {
        let px = tile.pixel_count();
        if tile.predictions.len() != px || tile.land_cover.len() != px {
            return Err(Error::Shape {
                op: "sample_pixels",
                details: format!("tile {} has inconsistent plane sizes", t),
            });
        }
        if let Some(&bad) = reflectance_channels.iter().find(|&&c| c >= tile.channel_count()) {
            return Err(Error::Shape {
                op: "sample_pixels",
                details: format!("reflectance channel {} out of range in tile {}", bad, t),
            });
        }
    }

    // flat index space over the concatenated valid pixels of all tiles
    let per_tile: Vec<Vec<usize>> = batch.iter().map(|t| t.valid.indices().collect()).collect();
    let offsets: Vec<usize> = per_tile
        .iter()
        .scan(0usize, |acc, v| {
            let start = *acc;
            *acc += v.len();
            Some(start)
        })
        .collect();
    let total: usize = per_tile.iter().map(Vec::len).sum();

    let make = |flat: usize| -> PixelSample<S> {
        let tile_idx = match offsets.binary_search(&flat) {
            Ok(exact) => {
                // offsets of empty tiles collide; take the last tile starting here
                let mut t = exact;
                while t + 1 < offsets.len() && offsets[t + 1] == flat {
                    t += 1;
                }
                t
            }
            Err(insertion) => insertion - 1,
        };
        let tile = &batch[tile_idx];
        let pixel = per_tile[tile_idx][flat - offsets[tile_idx]];
        let channels = tile.channel_count();
        let features: Vec<S> = (0..channels).map(|c| tile.feature_at(c, pixel)).collect();
        let x_ref: Vec<S> = reflectance_channels.iter().map(|&c| features[c]).collect();
        PixelSample {
            tile: tile_idx,
            pixel,
            class_id: tile.land_cover[pixel],
            features,
            x_ref,
            z: tile.predictions[pixel],
        }
    };

    if total <= sample_size {
        return Ok((0..total).map(make).collect());
    }
    let picks = rand::seq::index::sample(rng, total, sample_size);
    Ok(picks.into_iter().map(make).collect())
}

/// Batch loss: mean per-tile coarse loss plus `lambda` times the smoothness
/// loss over one shared pixel sample.
///
/// Returns the loss and the smoothness degeneracy flag.
pub fn combined_loss<S: Scalar, R: rand::Rng + ?Sized>(
    batch: &[TileView<'_, S>],
    labels: &[S],
    config: &LossConfig,
    rng: &mut R,
) -> Result<(S, bool)> {
    if batch.is_empty() || batch.len() != labels.len() {
        return Err(Error::Shape {
            op: "combined_loss",
            details: format!("{} tiles with {} labels", batch.len(), labels.len()),
        });
    }
    let mut coarse_sum = S::zero();
    for (tile, &label) in batch.iter().zip(labels) {
        coarse_sum += coarse_loss(label, tile.predictions, tile.valid)?;
    }
    let mean_coarse = coarse_sum / S::from_f64c(batch.len() as f64);
    if config.lambda == 0.0 {
        return Ok((mean_coarse, false));
    }
    let samples = sample_pixels(batch, &config.reflectance_channels, config.sample_size, rng)?;
    let (smooth, degenerate) = smoothness_loss(&samples, S::from_f64c(config.tau));
    Ok((mean_coarse + S::from_f64c(config.lambda) * smooth, degenerate))
}
