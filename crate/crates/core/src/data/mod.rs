//! Tile data model: synthetic generation, preprocessing, and persistence.
//!
//! A tile is the unit of supervision. Its feature planes are what the models
//! see; its fine-resolution truth exists only because the data is synthetic
//! and is reserved for evaluation and for the fine-supervised upper-bound
//! baseline. The only label available to coarsely-supervised training is one
//! scalar per tile, the masked mean of the fine truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TileView;
use crate::scalar::Scalar;
use crate::tensor::{Mask, TensorBase};

pub mod io;
pub mod prep;
pub mod synth;

pub use synth::{generate_dataset, ClassResponse, SynthConfig};

/// Full pipeline: generate tiles, drop those with too few valid pixels,
/// split what remains, and standardize features with train statistics.
pub fn build_dataset<S: Scalar>(config: &SynthConfig) -> Result<Dataset<S>> {
    let tiles = synth::generate_dataset(config)?;
    let mut tiles = prep::filter_tiles(tiles, config.min_valid_pixels());
    let split = prep::split_tiles(tiles.len(), config.seed)?;
    let layout = config.layout();
    let stats = prep::standardize(&mut tiles, &split, &layout)?;
    let dataset = Dataset { config: config.clone(), layout, tiles, split, stats };
    dataset.validate()?;
    Ok(dataset)
}

/// Where each feature channel lives in the channel-major feature buffer.
///
/// Order: reflectance channels, then the missing-data mask channel, then
/// auxiliary channels, then one land-cover indicator channel per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub reflectance: usize,
    pub aux: usize,
    pub classes: usize,
}

impl ChannelLayout {
    pub fn total(&self) -> usize {
        self.reflectance + 1 + self.aux + self.classes
    }

    pub fn reflectance_indices(&self) -> Vec<usize> {
        (0..self.reflectance).collect()
    }

    pub fn mask_index(&self) -> usize {
        self.reflectance
    }

    pub fn aux_indices(&self) -> Vec<usize> {
        (self.reflectance + 1..self.reflectance + 1 + self.aux).collect()
    }

    pub fn class_indices(&self) -> Vec<usize> {
        (self.reflectance + 1 + self.aux..self.total()).collect()
    }

    /// Channels that get standardized; mask and class channels are binary
    /// and stay untouched.
    pub fn continuous_indices(&self) -> Vec<usize> {
        let mut v = self.reflectance_indices();
        v.extend(self.aux_indices());
        v
    }
}

/// One spatial tile with features, labels, and synthetic ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile<S> {
    /// Channel-major feature planes, `layout.total() * h * w` values.
    pub features: Vec<S>,
    /// Land-cover class id per pixel, row-major.
    pub land_cover: Vec<u8>,
    /// Pixels with at least one sounding. Coarse-only tiles are the
    /// exception: they model instruments that measure whole-tile averages,
    /// so their mask is all-true while soundings stay zero.
    pub valid: Mask,
    /// Sounding count per pixel.
    pub soundings: Vec<u32>,
    /// Latent per-pixel truth; synthetic only, never an input.
    pub fine_truth: Vec<S>,
    /// Truth plus sounding noise where valid, 0 where undefined.
    pub fine_observed: Vec<S>,
    /// Masked mean of `fine_truth` over `valid`, exactly.
    pub coarse_label: S,
    /// True for tiles that contribute only their coarse label.
    pub coarse_only: bool,
}

impl<S: Scalar> Tile<S> {
    pub fn height(&self) -> usize {
        self.valid.height()
    }

    pub fn width(&self) -> usize {
        self.valid.width()
    }

    pub fn pixel_count(&self) -> usize {
        self.valid.height() * self.valid.width()
    }

    pub fn channel_count(&self) -> usize {
        self.features.len() / self.pixel_count()
    }

    /// One feature plane, `h * w` values.
    pub fn channel(&self, c: usize) -> &[S] {
        let px = self.pixel_count();
        &self.features[c * px..(c + 1) * px]
    }

    /// Feature planes as a `[channels, height, width]` tensor for model
    /// input.
    pub fn input_tensor(&self) -> Result<TensorBase<S>> {
        TensorBase::new(
            vec![self.channel_count(), self.height(), self.width()],
            self.features.clone(),
        )
    }

    /// View with an externally supplied prediction map, as the losses
    /// consume it.
    pub fn view_with<'a>(&'a self, predictions: &'a [S]) -> TileView<'a, S> {
        TileView {
            features: &self.features,
            land_cover: &self.land_cover,
            valid: &self.valid,
            predictions,
        }
    }
}

/// Split membership of a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Per-channel standardization parameters, learned on the train split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Channels whose train variance was zero; they were centered and their
    /// sd recorded as 1.
    pub degenerate: Vec<usize>,
}

/// A generated, filtered, split, and standardized set of tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    pub config: SynthConfig,
    pub layout: ChannelLayout,
    pub tiles: Vec<Tile<S>>,
    pub split: Vec<SplitTag>,
    pub stats: ChannelStats,
}

impl<S: Scalar> Dataset<S> {
    pub fn tiles_in(&self, tag: SplitTag) -> impl Iterator<Item = (usize, &Tile<S>)> {
        self.tiles
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.split[*i] == tag)
    }

    pub fn indices_in(&self, tag: SplitTag) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiles.len() != self.split.len() {
            return Err(Error::Data(format!(
                "{} tiles but {} split tags",
                self.tiles.len(),
                self.split.len()
            )));
        }
        let channels = self.layout.total();
        for (i, tile) in self.tiles.iter().enumerate() {
            let px = tile.pixel_count();
            if tile.features.len() != channels * px
                || tile.land_cover.len() != px
                || tile.soundings.len() != px
                || tile.fine_truth.len() != px
                || tile.fine_observed.len() != px
            {
                return Err(Error::Data(format!("tile {} has inconsistent plane sizes", i)));
            }
        }
        if self.stats.mean.len() != channels || self.stats.sd.len() != channels {
            return Err(Error::Data("channel statistics do not match layout".into()));
        }
        Ok(())
    }
}
