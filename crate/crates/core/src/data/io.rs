//! Dataset persistence.
//!
//! A dataset directory holds `manifest.json` (version, generator config,
//! channel layout, standardization statistics, split tags, tile file list)
//! plus one little-endian binary file per tile. Numeric planes are stored as
//! f64, so an f64 dataset round-trips bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ChannelLayout, ChannelStats, Dataset, SplitTag, SynthConfig, Tile};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mask;

pub const DATASET_VERSION: u32 = 1;
const TILE_MAGIC: &[u8; 8] = b"C2FTILE1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: SynthConfig,
    layout: ChannelLayout,
    stats: ChannelStats,
    split: Vec<SplitTag>,
    tile_files: Vec<String>,
}

pub fn save_dataset<S: Scalar>(dataset: &Dataset<S>, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tile_files: Vec<String> = (0..dataset.tiles.len())
        .map(|i| format!("tile_{:05}.bin", i))
        .collect();
    let manifest = Manifest {
        version: DATASET_VERSION,
        config: dataset.config.clone(),
        layout: dataset.layout.clone(),
        stats: dataset.stats.clone(),
        split: dataset.split.clone(),
        tile_files: tile_files.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    for (tile, name) in dataset.tiles.iter().zip(&tile_files) {
        let path = dir.join(name);
        fs::write(&path, encode_tile(tile)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub fn load_dataset<S: Scalar>(dir: &Path) -> Result<Dataset<S>> {
    let manifest_path = dir.join("manifest.json");
    let json = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&json)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Data(format!(
            "dataset version {} in {}, this build reads version {}",
            manifest.version,
            manifest_path.display(),
            DATASET_VERSION
        )));
    }
    if manifest.split.len() != manifest.tile_files.len() {
        return Err(Error::Data(format!(
            "{}: {} split tags for {} tile files",
            manifest_path.display(),
            manifest.split.len(),
            manifest.tile_files.len()
        )));
    }
    let mut tiles = Vec::with_capacity(manifest.tile_files.len());
    for name in &manifest.tile_files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        tiles.push(decode_tile(&bytes, &path)?);
    }
    let dataset = Dataset {
        config: manifest.config,
        layout: manifest.layout,
        tiles,
        split: manifest.split,
        stats: manifest.stats,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn encode_tile<S: Scalar>(tile: &Tile<S>) -> Vec<u8> {
    let px = tile.pixel_count();
    let channels = tile.channel_count();
    let mut out = Vec::with_capacity(8 + 13 + (channels + 2) * px * 8 + px * 6);
    out.extend_from_slice(TILE_MAGIC);
    out.extend_from_slice(&(tile.height() as u32).to_le_bytes());
    out.extend_from_slice(&(tile.width() as u32).to_le_bytes());
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    out.push(tile.coarse_only as u8);
    out.extend_from_slice(&tile.coarse_label.to_f64c().to_le_bytes());
    for v in &tile.features {
        out.extend_from_slice(&v.to_f64c().to_le_bytes());
    }
    out.extend_from_slice(&tile.land_cover);
    for p in 0..px {
        out.push(tile.valid.get(p) as u8);
    }
    for s in &tile.soundings {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in &tile.fine_truth {
        out.extend_from_slice(&v.to_f64c().to_le_bytes());
    }
    for v in &tile.fine_observed {
        out.extend_from_slice(&v.to_f64c().to_le_bytes());
    }
    out
}

/// Byte reader that reports the offending file and offset on truncation.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {} (wanted {} more)",
                self.path.display(),
                self.pos,
                n
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64_plane<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| S::from_f64c(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

fn decode_tile<S: Scalar>(bytes: &[u8], path: &Path) -> Result<Tile<S>> {
    let mut cur = Cursor { buf: bytes, pos: 0, path };
    if cur.take(8)? != TILE_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a tile file (bad magic)",
            path.display()
        )));
    }
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let channels = cur.u32()? as usize;
    let px = h.checked_mul(w).filter(|px| *px > 0 && *px <= 1 << 28).ok_or_else(|| {
        Error::Data(format!("{}: implausible tile dimensions {}x{}", path.display(), h, w))
    })?;
    let coarse_only = match cur.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Data(format!(
                "{}: coarse_only flag is {}, expected 0 or 1",
                path.display(),
                other
            )))
        }
    };
    let coarse_label = S::from_f64c(cur.f64()?);
    let features = cur.f64_plane(channels * px)?;
    let land_cover = cur.take(px)?.to_vec();
    let flags: Vec<bool> = cur.take(px)?.iter().map(|&b| b != 0).collect();
    let soundings: Vec<u32> = cur
        .take(px * 4)?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let fine_truth = cur.f64_plane(px)?;
    let fine_observed = cur.f64_plane(px)?;
    if cur.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after tile payload",
            path.display(),
            bytes.len() - cur.pos
        )));
    }
    Ok(Tile {
        features,
        land_cover,
        valid: Mask::new(h, w, flags).expect("dimensions match by construction"),
        soundings,
        fine_truth,
        fine_observed,
        coarse_label,
        coarse_only,
    })
}
