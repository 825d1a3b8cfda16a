//! On-disk store of raw d-pixel tiles.
//!
//! Layout: one directory per tile under a root, each holding
//!
//! * `tile.json`: [`TileMeta`] (id, size, year, geo, acquisition doys);
//! * `pixels.bin`: magic `DPIXTILE`, `u32` version, `u32` H, W, T_s2, T_s1,
//!   then for every pixel in row-major order: T_s2×10 `f32` S2 values,
//!   T_s1×2 `f32` S1 values, T_s2 S2 mask bytes, T_s1 S1 mask bytes;
//!   trailing CRC-32 of all preceding bytes (little-endian throughout);
//! * `truth.bin` (optional): H×W `u8` ground-truth class raster.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::dpixel::{DPixel, Modality, ObservationSeries, PixelLocation};
use crate::error::{Error, Result};
use crate::geo::GeoTransform;

const MAGIC: &[u8; 8] = b"DPIXTILE";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileMeta {
    pub tile_id: String,
    pub height: usize,
    pub width: usize,
    pub year: u16,
    pub geo: GeoTransform,
    pub s2_doys: Vec<u16>,
    pub s1_doys: Vec<u16>,
}

/// A fully loaded raw tile.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTile {
    pub meta: TileMeta,
    /// H·W·T_s2·10, pixel-major.
    pub s2_values: Vec<f32>,
    /// H·W·T_s1·2, pixel-major.
    pub s1_values: Vec<f32>,
    pub s2_mask: Vec<bool>,
    pub s1_mask: Vec<bool>,
    pub truth: Option<Vec<u8>>,
}

impl RawTile {
    pub fn num_pixels(&self) -> usize {
        self.meta.height * self.meta.width
    }

    fn dims(&self, m: Modality) -> (usize, &[f32], &[bool], &[u16]) {
        match m {
            Modality::S2 => (
                self.meta.s2_doys.len(),
                &self.s2_values,
                &self.s2_mask,
                &self.meta.s2_doys,
            ),
            Modality::S1 => (
                self.meta.s1_doys.len(),
                &self.s1_values,
                &self.s1_mask,
                &self.meta.s1_doys,
            ),
        }
    }

    pub fn series(&self, m: Modality, row: usize, col: usize) -> Result<ObservationSeries> {
        let p = row * self.meta.width + col;
        let (t, values, mask, doys) = self.dims(m);
        let c = m.channels();
        let vals = &values[p * t * c..(p + 1) * t * c];
        let values = Array2::from_shape_fn((t, c), |(i, j)| f64::from(vals[i * c + j]));
        ObservationSeries::new(m, values, mask[p * t..(p + 1) * t].to_vec(), doys.to_vec())
    }

    pub fn valid_count(&self, m: Modality, row: usize, col: usize) -> usize {
        let p = row * self.meta.width + col;
        let (t, _, mask, _) = self.dims(m);
        mask[p * t..(p + 1) * t].iter().filter(|&&v| v).count()
    }

    pub fn dpixel(&self, tile_index: u32, row: usize, col: usize) -> Result<DPixel> {
        Ok(DPixel {
            s2: self.series(Modality::S2, row, col)?,
            s1: self.series(Modality::S1, row, col)?,
            location: PixelLocation {
                tile: tile_index,
                row: row as u32,
                col: col as u32,
            },
        })
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_pixels();
        let (t2, t1) = (self.meta.s2_doys.len(), self.meta.s1_doys.len());
        let ok = self.s2_values.len() == n * t2 * 10
            && self.s1_values.len() == n * t1 * 2
            && self.s2_mask.len() == n * t2
            && self.s1_mask.len() == n * t1
            && self.truth.as_ref().is_none_or(|t| t.len() == n);
        if !ok || n == 0 {
            return Err(Error::shape(format!(
                "tile {} buffers do not match its metadata",
                self.meta.tile_id
            )));
        }
        Ok(())
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        self.validate()?;
        let dir = root.join(&self.meta.tile_id);
        binio::create_dir_all(&dir)?;
        let json = serde_json::to_string_pretty(&self.meta)?;
        binio::write_atomic(&dir.join("tile.json"), json.as_bytes())?;

        let (h, w) = (self.meta.height, self.meta.width);
        let (t2, t1) = (self.meta.s2_doys.len(), self.meta.s1_doys.len());
        let mut out = ByteWriter::with_capacity(h * w * (t2 * 41 + t1 * 9) + 32);
        out.bytes(MAGIC);
        out.u32(VERSION);
        for v in [h, w, t2, t1] {
            out.u32(v as u32);
        }
        for p in 0..h * w {
            for v in &self.s2_values[p * t2 * 10..(p + 1) * t2 * 10] {
                out.f32(*v);
            }
            for v in &self.s1_values[p * t1 * 2..(p + 1) * t1 * 2] {
                out.f32(*v);
            }
            for &m in &self.s2_mask[p * t2..(p + 1) * t2] {
                out.u8(m as u8);
            }
            for &m in &self.s1_mask[p * t1..(p + 1) * t1] {
                out.u8(m as u8);
            }
        }
        binio::write_atomic(&dir.join("pixels.bin"), &out.finish())?;
        if let Some(truth) = &self.truth {
            binio::write_atomic(&dir.join("truth.bin"), truth)?;
        }
        Ok(dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("tile.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TileMeta = serde_json::from_str(&text)?;

        let path = dir.join("pixels.bin");
        let data = binio::read_file(&path)?;
        let body = binio::verify_crc(&path, &data)?;
        let mut r = ByteReader::new(body, &path);
        r.expect_magic(MAGIC)?;
        if r.u32()? != VERSION {
            return Err(Error::format(&path, "unsupported version"));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        let (h, w) = (meta.height, meta.width);
        let (t2, t1) = (meta.s2_doys.len(), meta.s1_doys.len());
        if dims != [h, w, t2, t1] {
            return Err(Error::format(&path, "header disagrees with tile.json"));
        }
        let n = h * w;
        let mut tile = RawTile {
            meta,
            s2_values: Vec::with_capacity(n * t2 * 10),
            s1_values: Vec::with_capacity(n * t1 * 2),
            s2_mask: Vec::with_capacity(n * t2),
            s1_mask: Vec::with_capacity(n * t1),
            truth: None,
        };
        for _ in 0..n {
            for _ in 0..t2 * 10 {
                tile.s2_values.push(r.f32()?);
            }
            for _ in 0..t1 * 2 {
                tile.s1_values.push(r.f32()?);
            }
            for _ in 0..t2 {
                tile.s2_mask.push(r.u8()? != 0);
            }
            for _ in 0..t1 {
                tile.s1_mask.push(r.u8()? != 0);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(&path, "trailing bytes"));
        }
        let truth_path = dir.join("truth.bin");
        if truth_path.exists() {
            tile.truth = Some(binio::read_file(&truth_path)?);
        }
        tile.validate()?;
        Ok(tile)
    }
}

/// Tile directories under `root`, sorted by name.
pub fn list_tiles(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.is_dir() && p.join("tile.json").exists() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
