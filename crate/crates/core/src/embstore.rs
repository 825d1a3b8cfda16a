//! Embedding product: per-pixel inference over whole tiles, int8
//! quantization with per-dimension scales, an on-disk tile store keyed by
//! year and tile id, region mosaics, and PCA false-colour rendering.
//!
//! Tile file layout (little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic | `DPIXEMBT` |
//! | version | `u32` (1) |
//! | height, width, dim | `u32` ×3 |
//! | origin x, origin y, pixel size | `f64` ×3 |
//! | crs | `u32` |
//! | year | `u16` |
//! | tile id | `u16` length + utf-8 |
//! | scales | `f32` × dim |
//! | validity bitmap | `ceil(H·W/8)` bytes, row-major, LSB first |
//! | payload | `i8` × H·W·dim, row-major, dimension fastest |
//! | crc | CRC-32 of everything above |

use std::collections::HashMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::dpixel::{sample_view, standardize, GlobalStats, Modality, SampledView};
use crate::encoder::{Model, ModelBatch};
use crate::error::{Error, Result};
use crate::geo::{BBox, GeoTransform, GridWindow};
use crate::tilestore::RawTile;

pub const QUANT_LEVELS: f64 = 127.0;
pub const SCALE_FLOOR: f64 = 1e-12;
const TILE_MAGIC: &[u8; 8] = b"DPIXEMBT";
const TILE_VERSION: u32 = 1;

/// Float embeddings for a grid of pixels; `valid` is false where no
/// embedding could be computed and the row is a zero fill vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMap {
    pub data: Array3<f64>,
    pub valid: Array2<bool>,
}

impl EmbeddingMap {
    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dim(&self) -> usize {
        self.data.dim().2
    }

    /// Valid pixel vectors as rows, in row-major pixel order.
    pub fn valid_rows(&self) -> Array2<f64> {
        let d = self.dim();
        let rows: Vec<f64> = self
            .data
            .lanes(Axis(2))
            .into_iter()
            .zip(self.valid.iter())
            .filter(|(_, &v)| v)
            .flat_map(|(lane, _)| lane.to_vec())
            .collect();
        Array2::from_shape_vec((rows.len() / d.max(1), d), rows).expect("whole rows")
    }
}

#[derive(Clone, Debug)]
pub struct InferConfig {
    pub n_draws: usize,
    pub seed: u64,
    /// Index of the first draw; draw `k` uses random stream `draw_offset + k`.
    pub draw_offset: u64,
    pub batch_size: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            n_draws: 1,
            seed: 0,
            draw_offset: 0,
            batch_size: 256,
        }
    }
}

/// Runs the frozen encoder over every pixel of `tile`, averaging
/// `n_draws` independent temporal samples. Pixels lacking valid
/// observations in a modality the model uses get a zero fill vector and are
/// flagged invalid.
pub fn infer_tile(model: &Model, stats: &GlobalStats, tile: &RawTile, cfg: &InferConfig) -> Result<EmbeddingMap> {
    if cfg.n_draws == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("n_draws and batch_size must be positive".into()));
    }
    let (h, w) = (tile.meta.height, tile.meta.width);
    let mc = model.config();
    let modalities: &[Modality] = if mc.use_s1 { &Modality::ALL } else { &[Modality::S2] };
    let mut valid = Array2::from_elem((h, w), false);
    let mut pixels = Vec::new();
    for row in 0..h {
        for col in 0..w {
            if modalities.iter().all(|&m| tile.valid_count(m, row, col) > 0) {
                valid[[row, col]] = true;
                pixels.push((row, col));
            }
        }
    }
    let mut data = Array3::zeros((h, w, mc.d_repr));
    for k in 0..cfg.n_draws as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(cfg.draw_offset + k);
        let mut views = Vec::with_capacity(pixels.len());
        for &(row, col) in &pixels {
            let mut pair = Vec::with_capacity(2);
            for m in Modality::ALL {
                // unused modalities still get a placeholder so batches stay rectangular
                let v = if modalities.contains(&m) {
                    standardize(
                        &sample_view(&tile.series(m, row, col)?, mc.seq_len, &mut rng)?,
                        stats.get(m),
                    )?
                } else {
                    placeholder(m, mc.seq_len)
                };
                pair.push(v);
            }
            views.push(pair);
        }
        let reprs: Vec<Array2<f64>> = views
            .par_chunks(cfg.batch_size)
            .map(|chunk| {
                let s2: Vec<&SampledView> = chunk.iter().map(|p| &p[0]).collect();
                let s1: Vec<&SampledView> = chunk.iter().map(|p| &p[1]).collect();
                model.represent(&ModelBatch::from_views(&s2, &s1)?)
            })
            .collect::<Result<_>>()?;
        let rows = reprs.iter().flat_map(|r| r.outer_iter());
        for (&(row, col), z) in pixels.iter().zip(rows) {
            let mut lane = data.slice_mut(s![row, col, ..]);
            lane += &z;
        }
    }
    data.mapv_inplace(|v| v / cfg.n_draws as f64);
    Ok(EmbeddingMap { data, valid })
}

fn placeholder(m: Modality, len: usize) -> SampledView {
    SampledView {
        values: Array2::zeros((len, m.channels())),
        doys: vec![0.0; len],
    }
}

/// Int8 codes with one symmetric scale per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedMap {
    pub codes: Array3<i8>,
    pub scales: Vec<f32>,
    pub valid: Array2<bool>,
}

/// Per-dimension symmetric quantization: `scale_d = max|x_d| / 127`
/// (floored), `q = round(x / scale_d)` clamped to ±127.
pub fn quantize(map: &EmbeddingMap) -> Result<QuantizedMap> {
    if !map.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteActivation("embedding map".into()));
    }
    let d = map.dim();
    let scales: Vec<f32> = (0..d)
        .map(|k| {
            let max = map
                .data
                .index_axis(Axis(2), k)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            (max / QUANT_LEVELS).max(SCALE_FLOOR) as f32
        })
        .collect();
    let mut codes = Array3::zeros(map.data.dim());
    ndarray::Zip::indexed(&mut codes)
        .and(&map.data)
        .for_each(|(_, _, k), q, &x| {
            *q = quantize_value(x, f64::from(scales[k]));
        });
    Ok(QuantizedMap {
        codes,
        scales,
        valid: map.valid.clone(),
    })
}

fn quantize_value(x: f64, scale: f64) -> i8 {
    let q = (x / scale).round().clamp(-QUANT_LEVELS, QUANT_LEVELS);
    // guard the rounding of x / scale so the half-step bound holds exactly
    // as evaluated
    let best = [q - 1.0, q, q + 1.0]
        .into_iter()
        .filter(|c| c.abs() <= QUANT_LEVELS)
        .min_by(|a, b| (a * scale - x).abs().total_cmp(&(b * scale - x).abs()))
        .unwrap_or(q);
    best as i8
}

pub fn dequantize(q: &QuantizedMap) -> EmbeddingMap {
    let mut data = q.codes.mapv(f64::from);
    for (k, &s) in q.scales.iter().enumerate() {
        data.index_axis_mut(Axis(2), k).mapv_inplace(|v| v * f64::from(s));
    }
    EmbeddingMap {
        data,
        valid: q.valid.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileHeader {
    pub tile_id: String,
    pub year: u16,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub geo: GeoTransform,
}

impl TileHeader {
    pub fn window(&self) -> GridWindow {
        self.geo.window(self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTile {
    pub header: TileHeader,
    pub map: QuantizedMap,
}

impl EmbeddingTile {
    pub fn new(tile_id: &str, year: u16, geo: GeoTransform, map: QuantizedMap) -> Result<Self> {
        let (height, width, dim) = map.codes.dim();
        if height == 0 || width == 0 || dim == 0 || map.scales.len() != dim || map.valid.dim() != (height, width) {
            return Err(Error::shape("inconsistent embedding tile dimensions"));
        }
        Ok(Self {
            header: TileHeader {
                tile_id: tile_id.to_owned(),
                year,
                height,
                width,
                dim,
                geo,
            },
            map,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let n = h.height * h.width;
        let mut w = ByteWriter::with_capacity(64 + h.tile_id.len() + 4 * h.dim + n / 8 + n * h.dim);
        w.bytes(TILE_MAGIC);
        w.u32(TILE_VERSION);
        w.u32(h.height as u32);
        w.u32(h.width as u32);
        w.u32(h.dim as u32);
        w.f64(h.geo.origin_x);
        w.f64(h.geo.origin_y);
        w.f64(h.geo.pixel_size);
        w.u32(h.geo.crs);
        w.u16(h.year);
        w.str16(&h.tile_id);
        for &s in &self.map.scales {
            w.f32(s);
        }
        let mut bitmap = vec![0u8; n.div_ceil(8)];
        for (i, _) in self.map.valid.iter().enumerate().filter(|(_, &v)| v) {
            bitmap[i / 8] |= 1 << (i % 8);
        }
        w.bytes(&bitmap);
        w.bytes(&self.map.codes.iter().map(|&q| q as u8).collect::<Vec<_>>());
        w.finish()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let body = binio::verify_crc(path, data)?;
        let mut r = ByteReader::new(body, path);
        r.expect_magic(TILE_MAGIC)?;
        if r.u32()? != TILE_VERSION {
            return Err(Error::format(path, "unsupported version"));
        }
        let (height, width, dim) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let geo = GeoTransform {
            origin_x: r.f64()?,
            origin_y: r.f64()?,
            pixel_size: r.f64()?,
            crs: r.u32()?,
        };
        let year = r.u16()?;
        let tile_id = r.str16()?;
        let scales = (0..dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        if scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::format(path, "non-positive scale"));
        }
        let n = height * width;
        let bitmap = r.take(n.div_ceil(8))?;
        let valid = Array2::from_shape_fn((height, width), |(i, j)| {
            let p = i * width + j;
            bitmap[p / 8] >> (p % 8) & 1 == 1
        });
        let payload = r.take(n * dim)?;
        let codes = Array3::from_shape_vec((height, width, dim), payload.iter().map(|&b| b as i8).collect())
            .map_err(|e| Error::format(path, e.to_string()))?;
        if r.remaining() != 0 {
            return Err(Error::format(path, "trailing bytes"));
        }
        Self::new(&tile_id, year, geo, QuantizedMap { codes, scales, valid })
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Directory of embedding tiles laid out as `<root>/<year>/<tile_id>.emb`
/// with a `<tile_id>.json` header sidecar. Decoded tiles are cached.
#[derive(Debug)]
pub struct EmbeddingStore {
    root: PathBuf,
    cache: RwLock<HashMap<(u16, String), Arc<EmbeddingTile>>>,
}

impl EmbeddingStore {
    pub fn open(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tile_path(&self, year: u16, tile_id: &str) -> PathBuf {
        self.root.join(year.to_string()).join(format!("{tile_id}.emb"))
    }

    pub fn write_tile(&self, tile: &EmbeddingTile) -> Result<PathBuf> {
        let h = &tile.header;
        let dir = self.root.join(h.year.to_string());
        binio::create_dir_all(&dir)?;
        let path = self.tile_path(h.year, &h.tile_id);
        binio::write_atomic(&path, &tile.to_bytes())?;
        binio::write_atomic(
            &path.with_extension("json"),
            serde_json::to_string_pretty(h)?.as_bytes(),
        )?;
        self.cache
            .write()
            .expect("cache lock")
            .remove(&(h.year, h.tile_id.clone()));
        Ok(path)
    }

    pub fn read_tile(&self, year: u16, tile_id: &str) -> Result<Arc<EmbeddingTile>> {
        let key = (year, tile_id.to_owned());
        if let Some(t) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(Arc::clone(t));
        }
        let path = self.tile_path(year, tile_id);
        let tile = Arc::new(EmbeddingTile::from_bytes(&binio::read_file(&path)?, &path)?);
        self.cache.write().expect("cache lock").insert(key, Arc::clone(&tile));
        Ok(tile)
    }

    /// Headers of every tile stored for `year`, sorted by tile id.
    pub fn headers(&self, year: u16) -> Result<Vec<TileHeader>> {
        let dir = self.root.join(year.to_string());
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                out.push(serde_json::from_str::<TileHeader>(&text)?);
            }
        }
        out.sort_by(|a, b| a.tile_id.cmp(&b.tile_id));
        Ok(out)
    }
}

/// A dequantized region on the global grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Mosaic {
    pub window: GridWindow,
    pub pixel_size: f64,
    pub crs: u32,
    pub map: EmbeddingMap,
}

impl Mosaic {
    pub fn bbox(&self) -> BBox {
        self.window.bbox(self.pixel_size)
    }

    /// Local `(row, col)` of the cell containing map point `(x, y)`.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        self.window.locate(x, y, self.pixel_size)
    }
}

/// Dequantizes, crops and places every stored tile of `year` that meets
/// `bbox` onto one grid. The box is snapped outward to whole pixels; cells
/// no tile covers are zero and invalid.
pub fn fetch_region(store: &EmbeddingStore, bbox: &BBox, year: u16) -> Result<Mosaic> {
    bbox.validate()?;
    let headers = store.headers(year)?;
    let Some(first) = headers.first() else {
        return Err(Error::NoCoverage);
    };
    let (pixel_size, crs, dim) = (first.geo.pixel_size, first.geo.crs, first.dim);
    if headers
        .iter()
        .any(|h| h.geo.pixel_size != pixel_size || h.geo.crs != crs || h.dim != dim)
    {
        return Err(Error::Config(
            "tiles in one year must share pixel size, CRS and dimension".into(),
        ));
    }
    let window = bbox.snap(pixel_size);
    let mut data = Array3::zeros((window.height, window.width, dim));
    let mut valid = Array2::from_elem((window.height, window.width), false);
    let mut covered = false;
    for h in &headers {
        let tw = h.window();
        let Some(cut) = tw.intersect(&window) else { continue };
        covered = true;
        let tile = store.read_tile(year, &h.tile_id)?;
        let (tr, tc) = ((cut.row0 - tw.row0) as usize, (cut.col0 - tw.col0) as usize);
        let (mr, mc) = ((cut.row0 - window.row0) as usize, (cut.col0 - window.col0) as usize);
        let src = s![tr..tr + cut.height, tc..tc + cut.width];
        let dst = s![mr..mr + cut.height, mc..mc + cut.width];
        let codes = tile.map.codes.slice(s![tr..tr + cut.height, tc..tc + cut.width, ..]);
        let mut out = data.slice_mut(s![mr..mr + cut.height, mc..mc + cut.width, ..]);
        ndarray::Zip::indexed(&mut out)
            .and(&codes)
            .for_each(|(_, _, k), o, &q| {
                *o = f64::from(q) * f64::from(tile.map.scales[k]);
            });
        valid.slice_mut(dst).assign(&tile.map.valid.slice(src));
    }
    if !covered {
        return Err(Error::NoCoverage);
    }
    Ok(Mosaic {
        window,
        pixel_size,
        crs,
        map: EmbeddingMap { data, valid },
    })
}

/// Principal axes of a set of row vectors, strongest first.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit-length component per row.
    pub components: Array2<f64>,
    pub variances: Vec<f64>,
}

impl Pca {
    pub fn fit(points: &Array2<f64>) -> Result<Self> {
        let (n, d) = points.dim();
        if n < 3 {
            return Err(Error::DegenerateInput(format!("{n} points, need at least 3")));
        }
        let mean = points.mean_axis(Axis(0)).expect("non-empty");
        let centered = points - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let eig = SymmetricEigen::new(DMatrix::from_row_iterator(d, d, cov.iter().copied()));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Array2::zeros((d, d));
        for (i, &k) in order.iter().enumerate() {
            let v = eig.eigenvectors.column(k);
            // fix the sign so the largest-magnitude entry is positive
            let pivot = v
                .iter()
                .copied()
                .fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for j in 0..d {
                components[[i, j]] = sign * v[j];
            }
        }
        let variances = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        Ok(Self {
            mean: mean.to_vec(),
            components,
            variances,
        })
    }

    /// Coordinates of `points` along the first `k` components.
    pub fn project(&self, points: &Array2<f64>, k: usize) -> Array2<f64> {
        let mean = ndarray::Array1::from(self.mean.clone());
        (points - &mean).dot(&self.components.slice(s![..k, ..]).t())
    }

    pub fn reconstruct(&self, coords: &Array2<f64>) -> Array2<f64> {
        let k = coords.ncols();
        let mean = ndarray::Array1::from(self.mean.clone());
        coords.dot(&self.components.slice(s![..k, ..])) + &mean
    }
}

/// 8-bit image, `channels` samples per pixel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Png(format!("unsupported channel count {c}"))),
        };
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(BufWriter::new(&mut out), self.width as u32, self.height as u32);
            enc.set_color(color);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.data).map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let dec = png::Decoder::new(bytes);
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        buf.truncate(info.buffer_size());
        Ok(Self {
            width: info.width as usize,
            height: info.height as usize,
            channels: info.color_type.samples(),
            data: buf,
        })
    }
}

/// False-colour RGB of the first three principal components of the valid
/// pixels, each min-max scaled to 0..=255. Components without spread render
/// as 0; invalid pixels are black. With no variance at all the image falls
/// back to uniform mid-grey.
pub fn pca_rgb(map: &EmbeddingMap) -> Result<Image> {
    let (h, w) = (map.height(), map.width());
    let rows = map.valid_rows();
    let pca = Pca::fit(&rows)?;
    let mut data = vec![0u8; h * w * 3];
    let total: f64 = pca.variances.iter().sum();
    if !(total > 0.0) {
        for (i, _) in map.valid.iter().enumerate().filter(|(_, &v)| v) {
            data[i * 3..i * 3 + 3].fill(128);
        }
        return Ok(Image {
            width: w,
            height: h,
            channels: 3,
            data,
        });
    }
    let k = rows.ncols().min(3);
    let coords = pca.project(&rows, k);
    let scale = coords.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ranges: Vec<(f64, f64)> = coords
        .columns()
        .into_iter()
        .map(|c| {
            c.iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect();
    let mut next = coords.outer_iter();
    for (i, _) in map.valid.iter().enumerate().filter(|(_, &v)| v) {
        let c = next.next().expect("one coordinate row per valid pixel");
        for (ch, &(lo, hi)) in ranges.iter().enumerate() {
            data[i * 3 + ch] = if hi - lo > 1e-9 * scale {
                ((c[ch] - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                0
            };
        }
    }
    Ok(Image {
        width: w,
        height: h,
        channels: 3,
        data,
    })
}

/// Infers, quantizes and stores every raw tile of `year` under `tiles_root`.
pub fn infer_store(
    model: &Model,
    stats: &GlobalStats,
    tile_dirs: &[PathBuf],
    year: u16,
    store: &EmbeddingStore,
    cfg: &InferConfig,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in tile_dirs {
        let raw = RawTile::read(dir)?;
        if raw.meta.year != year {
            continue;
        }
        let map = infer_tile(model, stats, &raw, cfg)?;
        let tile = EmbeddingTile::new(&raw.meta.tile_id, year, raw.meta.geo, quantize(&map)?)?;
        out.push(store.write_tile(&tile)?);
        log::info!(
            "embedded tile {} ({}×{})",
            raw.meta.tile_id,
            raw.meta.height,
            raw.meta.width
        );
    }
    Ok(out)
}
