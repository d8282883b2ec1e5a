//! Seeded synthetic tile generator.
//!
//! The generator mimics the structure of satellite reflectance with
//! field-scale land cover: smooth correlated reflectance fields, contiguous
//! land-cover patches, per-class saturating response curves from reflectance
//! to the target scalar, slowly varying auxiliary channels, a spatially
//! correlated noise field that no feature explains, per-pixel sounding
//! counts whose averaging shrinks observation noise as 1/n, and a fraction
//! of pixels with missing (zeroed) reflectance flagged in a mask channel.
//!
//! Every random decision draws from a named per-tile stream derived from the
//! dataset seed, so changing one knob does not reshuffle unrelated
//! randomness and tiles can be generated in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{prep, ChannelLayout, Tile};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mask;

/// Response curve of one land-cover class: an affine ramp through a tanh
/// saturation, applied to a class-specific mix of reflectance channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassResponse {
    pub base: f64,
    pub gain: f64,
    pub steepness: f64,
    pub midpoint: f64,
    /// Weights over reflectance channels forming the class's driver value.
    pub mix: Vec<f64>,
}

impl ClassResponse {
    fn respond(&self, driver: f64) -> f64 {
        self.base + self.gain * (self.steepness * (driver - self.midpoint)).tanh()
    }
}

fn default_responses() -> Vec<ClassResponse> {
    vec![
        ClassResponse {
            base: 0.4,
            gain: 1.0,
            steepness: 1.2,
            midpoint: 0.1,
            mix: vec![0.7, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0],
        },
        ClassResponse {
            base: 0.9,
            gain: 0.6,
            steepness: 2.0,
            midpoint: -0.2,
            mix: vec![0.1, 0.6, 0.2, 0.1, 0.0, 0.0, 0.0],
        },
        ClassResponse {
            base: 0.6,
            gain: 1.4,
            steepness: 0.8,
            midpoint: 0.3,
            mix: vec![0.0, 0.1, 0.5, 0.3, 0.1, 0.0, 0.0],
        },
        ClassResponse {
            base: 1.2,
            gain: 0.8,
            steepness: 1.5,
            midpoint: 0.0,
            mix: vec![0.0, 0.0, 0.1, 0.3, 0.4, 0.2, 0.0],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub tiles: usize,
    /// Tiles are square, `tile_size` x `tile_size` pixels.
    pub tile_size: usize,
    pub reflectance_channels: usize,
    pub aux_channels: usize,
    /// Correlation length (pixels) of the land-cover field.
    pub landcover_scale: f64,
    /// Correlation length (pixels) of reflectance fields.
    pub reflectance_scale: f64,
    /// Spread of per-tile reflectance offsets; this is what moves coarse
    /// labels apart across tiles.
    pub tile_offset_sd: f64,
    /// One response per land-cover class; the class count is this length.
    pub responses: Vec<ClassResponse>,
    /// Linear weight of the first auxiliary channel in the truth.
    pub aux_effect: f64,
    /// Amplitude of the spatially correlated component no feature explains.
    pub spatial_noise_sd: f64,
    /// Correlation length (pixels) of that component.
    pub spatial_noise_scale: f64,
    /// Per-sounding observation noise; n soundings average to sd/sqrt(n).
    pub sounding_noise_sd: f64,
    /// Possible per-pixel sounding counts.
    pub sounding_atoms: Vec<u32>,
    /// Probability of each atom; same length, sums to 1.
    pub sounding_probs: Vec<f64>,
    /// Fraction of pixels whose reflectance is zeroed and flagged.
    pub missing_fraction: f64,
    /// Fraction of tiles that carry only a coarse label.
    pub coarse_only_fraction: f64,
    /// Resolutions (in pixels per side) at which metrics aggregate.
    pub aggregation_factors: Vec<usize>,
    /// Tiles with fewer valid pixels than this fraction are dropped.
    pub min_valid_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tiles: 200,
            tile_size: 60,
            reflectance_channels: 7,
            aux_channels: 3,
            landcover_scale: 9.0,
            reflectance_scale: 5.0,
            tile_offset_sd: 0.6,
            responses: default_responses(),
            aux_effect: 0.15,
            spatial_noise_sd: 0.15,
            spatial_noise_scale: 3.0,
            sounding_noise_sd: 0.3,
            sounding_atoms: vec![0, 1, 5, 10, 20, 30, 60],
            sounding_probs: vec![0.30, 0.21, 0.14, 0.105, 0.105, 0.07, 0.07],
            missing_fraction: 0.05,
            coarse_only_fraction: 0.0,
            aggregation_factors: vec![1, 3, 5, 10, 20],
            min_valid_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn layout(&self) -> ChannelLayout {
        ChannelLayout {
            reflectance: self.reflectance_channels,
            aux: self.aux_channels,
            classes: self.responses.len(),
        }
    }

    pub fn classes(&self) -> usize {
        self.responses.len()
    }

    pub fn min_valid_pixels(&self) -> usize {
        ((self.tile_size * self.tile_size) as f64 * self.min_valid_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.tiles < 5 {
            return fail(format!("need at least 5 tiles to split, got {}", self.tiles));
        }
        if self.tile_size < 4 || self.tile_size % 4 != 0 {
            return fail(format!("tile_size must be a positive multiple of 4, got {}", self.tile_size));
        }
        if self.aggregation_factors.is_empty() {
            return fail("aggregation_factors must not be empty".into());
        }
        for &f in &self.aggregation_factors {
            if f == 0 || self.tile_size % f != 0 {
                return fail(format!("aggregation factor {} does not divide tile_size {}", f, self.tile_size));
            }
        }
        if self.reflectance_channels == 0 {
            return fail("need at least one reflectance channel".into());
        }
        if self.responses.len() < 2 {
            return fail("need at least 2 land-cover classes".into());
        }
        if self.responses.len() > u8::MAX as usize {
            return fail("class ids are u8".into());
        }
        for (c, r) in self.responses.iter().enumerate() {
            if r.mix.len() != self.reflectance_channels {
                return fail(format!(
                    "class {} mix has {} weights for {} reflectance channels",
                    c,
                    r.mix.len(),
                    self.reflectance_channels
                ));
            }
            let vals = [r.base, r.gain, r.steepness, r.midpoint];
            if vals.iter().any(|v| !v.is_finite()) || r.mix.iter().any(|v| !v.is_finite()) {
                return fail(format!("class {} response has non-finite coefficients", c));
            }
        }
        if self.sounding_atoms.len() != self.sounding_probs.len() || self.sounding_atoms.is_empty() {
            return fail("sounding_atoms and sounding_probs must be equal nonempty lengths".into());
        }
        if self.sounding_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return fail("sounding_probs must be nonnegative".into());
        }
        let total: f64 = self.sounding_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return fail(format!("sounding_probs sum to {}, expected 1", total));
        }
        let has_valid = self
            .sounding_atoms
            .iter()
            .zip(&self.sounding_probs)
            .any(|(&a, &p)| a >= 1 && p > 0.0);
        if !has_valid {
            return fail("at least one sounding atom >= 1 needs positive probability".into());
        }
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return fail(format!("missing_fraction must be in [0, 1), got {}", self.missing_fraction));
        }
        if !(0.0..=1.0).contains(&self.coarse_only_fraction) {
            return fail(format!("coarse_only_fraction must be in [0, 1], got {}", self.coarse_only_fraction));
        }
        if !(0.0..=1.0).contains(&self.min_valid_fraction) {
            return fail(format!("min_valid_fraction must be in [0, 1], got {}", self.min_valid_fraction));
        }
        for (name, v) in [
            ("landcover_scale", self.landcover_scale),
            ("reflectance_scale", self.reflectance_scale),
            ("spatial_noise_scale", self.spatial_noise_scale),
        ] {
            if !v.is_finite() || v < 0.5 {
                return fail(format!("{} must be >= 0.5, got {}", name, v));
            }
        }
        for (name, v) in [
            ("tile_offset_sd", self.tile_offset_sd),
            ("spatial_noise_sd", self.spatial_noise_sd),
            ("sounding_noise_sd", self.sounding_noise_sd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{} must be >= 0, got {}", name, v));
            }
        }
        Ok(())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent RNG stream named by purpose and tile index.
pub(crate) fn stream(seed: u64, tag: &str, idx: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(seed ^ fnv1a(tag.as_bytes())) ^ idx);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Smooth standard-normal-ish field: white noise blurred by a separable
/// Gaussian with reflect padding, then renormalized to mean 0 and sd 1.
fn smoothed_field(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Vec<f64> {
    let mut field: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let radius = (3.0 * scale).ceil() as usize;
    if radius > 0 {
        let kernel: Vec<f64> = (-(radius as isize)..=radius as isize)
            .map(|d| (-0.5 * (d as f64 / scale).powi(2)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            // reflect indices into [0, n) (period 2n - 2)
            while i < 0 || i >= n {
                if i < 0 {
                    i = -i;
                }
                if i >= n {
                    i = 2 * (n - 1) - i;
                }
            }
            i as usize
        };
        // horizontal pass
        let mut tmp = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius as isize, w);
                    acc += kv * field[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // vertical pass
        for x in 0..w {
            for y in 0..h {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius as isize, h);
                    acc += kv * tmp[sy * w + x];
                }
                field[y * w + x] = acc;
            }
        }
    }
    let n = (h * w) as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        for v in &mut field {
            *v -= mean;
        }
    } else {
        for v in &mut field {
            *v = (*v - mean) / sd;
        }
    }
    field
}

/// Threshold a field into `k` classes at its own quantiles, giving
/// contiguous patches of roughly equal area.
fn quantile_classes(field: &[f64], k: usize) -> Vec<u8> {
    let mut sorted = field.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("field values are finite"));
    let cuts: Vec<f64> = (1..k).map(|i| sorted[i * field.len() / k]).collect();
    field
        .iter()
        .map(|v| cuts.iter().take_while(|c| *v >= **c).count() as u8)
        .collect()
}

struct RawTile {
    clean_reflectance: Vec<Vec<f64>>,
    aux: Vec<Vec<f64>>,
    land: Vec<u8>,
    truth: Vec<f64>,
    observed: Vec<f64>,
    soundings: Vec<u32>,
    missing: Vec<bool>,
}

fn generate_raw_tile(config: &SynthConfig, idx: u64) -> RawTile {
    let n = config.tile_size;
    let px = n * n;

    let mut land_rng = stream(config.seed, "landcover", idx);
    let land_field = smoothed_field(&mut land_rng, n, n, config.landcover_scale);
    let land = quantile_classes(&land_field, config.classes());

    let mut refl_rng = stream(config.seed, "reflectance", idx);
    let clean_reflectance: Vec<Vec<f64>> = (0..config.reflectance_channels)
        .map(|_| {
            let offset: f64 =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut refl_rng)
                    * config.tile_offset_sd;
            smoothed_field(&mut refl_rng, n, n, config.reflectance_scale)
                .into_iter()
                .map(|v| v + offset)
                .collect()
        })
        .collect();

    let mut aux_rng = stream(config.seed, "aux", idx);
    let aux: Vec<Vec<f64>> = (0..config.aux_channels)
        .map(|_| {
            let level: f64 = StandardNormal.sample(&mut aux_rng);
            let gx: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut aux_rng) * 0.4;
            let gy: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut aux_rng) * 0.4;
            (0..px)
                .map(|p| {
                    let (y, x) = (p / n, p % n);
                    let fx = x as f64 / (n - 1).max(1) as f64 - 0.5;
                    let fy = y as f64 / (n - 1).max(1) as f64 - 0.5;
                    level + gx * fx + gy * fy
                })
                .collect()
        })
        .collect();

    let mut noise_rng = stream(config.seed, "spatialnoise", idx);
    let noise: Vec<f64> = smoothed_field(&mut noise_rng, n, n, config.spatial_noise_scale)
        .into_iter()
        .map(|v| v * config.spatial_noise_sd)
        .collect();

    let truth: Vec<f64> = (0..px)
        .map(|p| {
            let response = &config.responses[land[p] as usize];
            let driver: f64 = response
                .mix
                .iter()
                .enumerate()
                .map(|(c, m)| m * clean_reflectance[c][p])
                .sum();
            let aux_term = if config.aux_channels > 0 { config.aux_effect * aux[0][p] } else { 0.0 };
            response.respond(driver) + aux_term + noise[p]
        })
        .collect();

    let mut sounding_rng = stream(config.seed, "soundings", idx);
    let cumulative: Vec<f64> = config
        .sounding_probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let soundings: Vec<u32> = (0..px)
        .map(|_| {
            let u: f64 = rand::RngExt::random::<f64>(&mut sounding_rng);
            let slot = cumulative.iter().position(|c| u < *c).unwrap_or(config.sounding_atoms.len() - 1);
            config.sounding_atoms[slot]
        })
        .collect();

    let mut obs_rng = stream(config.seed, "obsnoise", idx);
    let observed: Vec<f64> = (0..px)
        .map(|p| {
            if soundings[p] == 0 {
                0.0
            } else if config.sounding_noise_sd == 0.0 {
                truth[p]
            } else {
                let z: f64 = StandardNormal.sample(&mut obs_rng);
                truth[p] + config.sounding_noise_sd / (soundings[p] as f64).sqrt() * z
            }
        })
        .collect();

    let mut missing_rng = stream(config.seed, "missing", idx);
    let missing_count = (px as f64 * config.missing_fraction).round() as usize;
    let mut missing = vec![false; px];
    for i in rand::seq::index::sample(&mut missing_rng, px, missing_count) {
        missing[i] = true;
    }

    RawTile { clean_reflectance, aux, land, truth, observed, soundings, missing }
}

fn assemble_tile<S: Scalar>(config: &SynthConfig, raw: RawTile) -> Tile<S> {
    let n = config.tile_size;
    let px = n * n;
    let layout = config.layout();
    let mut features = vec![S::zero(); layout.total() * px];

    for (c, plane) in raw.clean_reflectance.iter().enumerate() {
        for p in 0..px {
            features[c * px + p] =
                if raw.missing[p] { S::zero() } else { S::from_f64c(plane[p]) };
        }
    }
    let mask_base = layout.mask_index() * px;
    for p in 0..px {
        if raw.missing[p] {
            features[mask_base + p] = S::one();
        }
    }
    for (j, plane) in raw.aux.iter().enumerate() {
        let base = (layout.reflectance + 1 + j) * px;
        for p in 0..px {
            features[base + p] = S::from_f64c(plane[p]);
        }
    }
    for p in 0..px {
        let base = (layout.reflectance + 1 + layout.aux + raw.land[p] as usize) * px;
        features[base + p] = S::one();
    }

    let valid = Mask::new(n, n, raw.soundings.iter().map(|&s| s >= 1).collect())
        .expect("mask dimensions match by construction");
    let fine_truth: Vec<S> = raw.truth.iter().map(|&v| S::from_f64c(v)).collect();
    let fine_observed: Vec<S> = raw.observed.iter().map(|&v| S::from_f64c(v)).collect();
    let coarse_label = if valid.count() > 0 {
        prep::tile_coarse_label(&fine_truth, &valid).expect("mask checked nonempty")
    } else {
        S::zero()
    };

    Tile {
        features,
        land_cover: raw.land,
        valid,
        soundings: raw.soundings,
        fine_truth,
        fine_observed,
        coarse_label,
        coarse_only: false,
    }
}

/// Generate raw (unfiltered, unsplit, unstandardized) tiles.
pub fn generate_dataset<S: Scalar>(config: &SynthConfig) -> Result<Vec<Tile<S>>> {
    config.validate()?;
    let mut tiles: Vec<Tile<S>> = (0..config.tiles)
        .map(|i| assemble_tile(config, generate_raw_tile(config, i as u64)))
        .collect();

    let coarse_only_count = (config.tiles as f64 * config.coarse_only_fraction).round() as usize;
    if coarse_only_count > 0 {
        let mut rng = stream(config.seed, "coarseonly", 0);
        for i in rand::seq::index::sample(&mut rng, config.tiles, coarse_only_count) {
            let tile = &mut tiles[i];
            tile.coarse_only = true;
            // a tile-average instrument: no per-pixel soundings, the label
            // covers every pixel
            tile.soundings = vec![0; tile.pixel_count()];
            tile.fine_observed = vec![S::zero(); tile.pixel_count()];
            tile.valid = Mask::all(tile.height(), tile.width());
            tile.coarse_label = prep::tile_coarse_label(&tile.fine_truth, &tile.valid)?;
        }
    }
    Ok(tiles)
}
