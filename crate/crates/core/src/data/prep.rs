//! Dataset preparation: tile filtering, the train/val/test split,
//! standardization, evaluation-pixel selection, and block aggregation of
//! per-pixel maps to coarser resolutions.

use super::synth::stream;
use super::{ChannelLayout, ChannelStats, SplitTag, Tile};
use crate::autodiff::ops::masked_mean_forward;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mask;

/// Sounding count a pixel needs before its observed value is trusted as an
/// evaluation target.
pub const EVAL_MIN_SOUNDINGS: u32 = 30;

/// Observed values at or below this are excluded from evaluation targets.
pub const EVAL_MIN_VALUE: f64 = 0.1;

/// Fraction of a block's pixels that must be valid for the aggregated cell
/// to count.
pub const AGGREGATE_COVERAGE: f64 = 0.9;

/// Drop tiles with fewer valid pixels than the threshold.
pub fn filter_tiles<S: Scalar>(tiles: Vec<Tile<S>>, min_valid_pixels: usize) -> Vec<Tile<S>> {
    tiles
        .into_iter()
        .filter(|t| t.valid.count() >= min_valid_pixels)
        .collect()
}

/// Random 60/20/20 split: shuffle tile indices, assign the first
/// `round(0.6 n)` to train, the next `round(0.2 n)` to validation, the rest
/// to test.
pub fn split_tiles(count: usize, seed: u64) -> Result<Vec<SplitTag>> {
    if count < 5 {
        return Err(Error::Data(format!(
            "need at least 5 tiles for a split with all three parts, got {}",
            count
        )));
    }
    let mut rng = stream(seed, "split", 0);
    let order = rand::seq::index::sample(&mut rng, count, count);
    let train = (0.6 * count as f64).round() as usize;
    let val = (0.2 * count as f64).round() as usize;
    let mut tags = vec![SplitTag::Test; count];
    for (rank, idx) in order.into_iter().enumerate() {
        tags[idx] = if rank < train {
            SplitTag::Train
        } else if rank < train + val {
            SplitTag::Val
        } else {
            SplitTag::Test
        };
    }
    Ok(tags)
}

/// Pixels reliable enough to score against: many soundings and a value
/// strictly above the low-signal floor.
pub fn eval_pixel_set<S: Scalar>(tile: &Tile<S>, min_soundings: u32, min_value: S) -> Vec<usize> {
    (0..tile.pixel_count())
        .filter(|&p| tile.soundings[p] >= min_soundings && tile.fine_observed[p] > min_value)
        .collect()
}

/// Standardize continuous channels in place using train-split statistics.
///
/// Means and population standard deviations are estimated per channel over
/// every pixel of every train tile, then every tile (all splits) is mapped
/// through `clamp((x - mean) / sd, -3, 3)`. Binary channels (the missing
/// mask and the land-cover one-hots) pass through untouched. Channels whose
/// train variance is zero are centered only; their sd is recorded as 1 and
/// the channel index is reported.
pub fn standardize<S: Scalar>(
    tiles: &mut [Tile<S>],
    split: &[SplitTag],
    layout: &ChannelLayout,
) -> Result<ChannelStats> {
    if tiles.len() != split.len() {
        return Err(Error::Data(format!(
            "{} tiles but {} split tags",
            tiles.len(),
            split.len()
        )));
    }
    let channels = layout.total();
    let continuous = layout.continuous_indices();
    let mut mean = vec![0.0f64; channels];
    let mut sd = vec![1.0f64; channels];
    let mut degenerate = Vec::new();

    let train: Vec<&Tile<S>> = tiles
        .iter()
        .zip(split)
        .filter(|(_, tag)| **tag == SplitTag::Train)
        .map(|(t, _)| t)
        .collect();
    if train.is_empty() {
        return Err(Error::Data("train split is empty, cannot standardize".into()));
    }

    for &c in &continuous {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for tile in &train {
            for v in tile.channel(c) {
                sum += v.to_f64c();
                count += 1;
            }
        }
        let mu = sum / count as f64;
        let mut sq = 0.0f64;
        for tile in &train {
            for v in tile.channel(c) {
                let d = v.to_f64c() - mu;
                sq += d * d;
            }
        }
        let var = sq / count as f64;
        mean[c] = mu;
        if var.sqrt() < 1e-12 {
            degenerate.push(c);
            sd[c] = 1.0;
        } else {
            sd[c] = var.sqrt();
        }
    }

    let lo = S::from_f64c(-3.0);
    let hi = S::from_f64c(3.0);
    for tile in tiles.iter_mut() {
        let px = tile.pixel_count();
        for &c in &continuous {
            let mu = S::from_f64c(mean[c]);
            let scale = S::from_f64c(sd[c]);
            for v in &mut tile.features[c * px..(c + 1) * px] {
                let z = (*v - mu) / scale;
                *v = if z < lo {
                    lo
                } else if z > hi {
                    hi
                } else {
                    z
                };
            }
        }
    }

    Ok(ChannelStats { mean, sd, degenerate })
}

/// Masked block mean of a per-pixel map at a coarser resolution.
///
/// The map is cut into `factor x factor` blocks; each output cell is the
/// mean of the valid pixels in its block. A cell is valid only if at least
/// `coverage` of its block is, and never when the block has no valid pixels.
/// Invalid cells hold zero.
pub fn aggregate<S: Scalar>(
    map: &[S],
    valid: &Mask,
    factor: usize,
    coverage: f64,
) -> Result<(Vec<S>, Mask)> {
    let (h, w) = (valid.height(), valid.width());
    if map.len() != h * w {
        return Err(Error::Shape {
            op: "aggregate",
            details: format!("map has {} values for a {}x{} mask", map.len(), h, w),
        });
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape {
            op: "aggregate",
            details: format!("factor {} does not divide {}x{}", factor, h, w),
        });
    }
    let (oh, ow) = (h / factor, w / factor);
    let block = (factor * factor) as f64;
    let mut values = vec![S::zero(); oh * ow];
    let mut flags = vec![false; oh * ow];
    for by in 0..oh {
        for bx in 0..ow {
            let mut sum = S::zero();
            let mut count = 0usize;
            for py in 0..factor {
                for px in 0..factor {
                    let p = (by * factor + py) * w + bx * factor + px;
                    if valid.get(p) {
                        sum += map[p];
                        count += 1;
                    }
                }
            }
            if count > 0 && count as f64 >= coverage * block {
                values[by * ow + bx] = sum / S::from_f64c(count as f64);
                flags[by * ow + bx] = true;
            }
        }
    }
    let mask = Mask::new(oh, ow, flags).expect("output dims consistent");
    Ok((values, mask))
}

/// The coarse label of a tile: the exact masked mean of a per-pixel map.
///
/// This is the same kernel the coarse loss differentiates through, so labels
/// generated here match what a perfect predictor would be scored against,
/// bit for bit.
pub fn tile_coarse_label<S: Scalar>(values: &[S], valid: &Mask) -> Result<S> {
    if values.len() != valid.len() {
        return Err(Error::Shape {
            op: "tile_coarse_label",
            details: format!("{} values for a {}-pixel mask", values.len(), valid.len()),
        });
    }
    if valid.count() == 0 {
        return Err(Error::EmptyMask { op: "tile_coarse_label" });
    }
    Ok(masked_mean_forward(values, valid))
}
