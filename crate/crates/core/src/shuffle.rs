//! Two-view pair records, chunked on disk, with an out-of-core global
//! permutation and an in-order batch reader.
//!
//! Chunk file layout (little-endian):
//!
//! ```text
//! magic "DPIXPAIR" | u32 version | u32 L | u32 C_s2 | u32 C_s1 | u64 count
//! count × record:
//!     u32 tile | u32 row | u32 col
//!     s2 view a, s2 view b   each: L×C_s2 f32 values, L f32 doys
//!     s1 view a, s1 view b   each: L×C_s1 f32 values, L f32 doys
//! u32 CRC-32 of all preceding bytes
//! ```
//!
//! Records are fixed size, so shuffling moves opaque byte slices.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::dpixel::{sample_view, GlobalStats, Modality, PixelLocation, SampledView, StatsAccumulator};
use crate::error::{Error, Result};
use crate::tilestore::{list_tiles, RawTile};

const MAGIC: &[u8; 8] = b"DPIXPAIR";
const VERSION: u32 = 1;
const HEADER_BYTES: usize = 8 + 4 * 4 + 8;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub location: PixelLocation,
    pub s2_a: SampledView,
    pub s2_b: SampledView,
    pub s1_a: SampledView,
    pub s1_b: SampledView,
}

/// Byte length of one record for sequence length `len`.
pub fn record_bytes(len: usize) -> usize {
    let view = |c: usize| len * (c + 1) * 4;
    12 + 2 * view(Modality::S2.channels()) + 2 * view(Modality::S1.channels())
}

impl PairRecord {
    pub fn len(&self) -> usize {
        self.s2_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn views(&self, m: Modality) -> (&SampledView, &SampledView) {
        match m {
            Modality::S2 => (&self.s2_a, &self.s2_b),
            Modality::S1 => (&self.s1_a, &self.s1_b),
        }
    }

    fn check(&self, len: usize) -> Result<()> {
        for m in Modality::ALL {
            let (a, b) = self.views(m);
            for v in [a, b] {
                if v.len() != len || v.channels() != m.channels() || v.doys.len() != len {
                    return Err(Error::shape(format!("{} view is not {len}×{}", m.name(), m.channels())));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        let mut w = ByteWriter::default();
        w.u32(self.location.tile);
        w.u32(self.location.row);
        w.u32(self.location.col);
        for v in [&self.s2_a, &self.s2_b, &self.s1_a, &self.s1_b] {
            for x in v.values.iter() {
                w.f32(*x as f32);
            }
            for d in &v.doys {
                w.f32(*d as f32);
            }
        }
        out.extend_from_slice(&w.into_inner());
    }

    pub fn decode(bytes: &[u8], len: usize, path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let location = PixelLocation {
            tile: r.u32()?,
            row: r.u32()?,
            col: r.u32()?,
        };
        let mut view = |c: usize| -> Result<SampledView> {
            let mut vals = Vec::with_capacity(len * c);
            for _ in 0..len * c {
                vals.push(f64::from(r.f32()?));
            }
            let mut doys = Vec::with_capacity(len);
            for _ in 0..len {
                doys.push(f64::from(r.f32()?));
            }
            Ok(SampledView {
                values: Array2::from_shape_vec((len, c), vals).map_err(|e| Error::shape(e.to_string()))?,
                doys,
            })
        };
        let (c2, c1) = (Modality::S2.channels(), Modality::S1.channels());
        Ok(Self {
            location,
            s2_a: view(c2)?,
            s2_b: view(c2)?,
            s1_a: view(c1)?,
            s1_b: view(c1)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub file: String,
    pub records: u64,
    pub crc: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleManifest {
    pub version: u32,
    pub seq_len: usize,
    pub chunks: Vec<ChunkInfo>,
    pub total: u64,
    /// Seed of the most recent operation that produced the chunks.
    pub seed: u64,
    pub tiles: Vec<String>,
    /// Incremented by every permutation; chunk file names carry it.
    pub generation: u32,
    pub permuted: bool,
}

impl ShuffleManifest {
    pub fn validate(&self) -> Result<()> {
        let sum: u64 = self.chunks.iter().map(|c| c.records).sum();
        if sum != self.total {
            return Err(Error::Config(format!(
                "manifest total {} but chunks hold {sum}",
                self.total
            )));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        binio::write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
    }

    pub fn chunk_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.chunks.iter().map(|c| dir.join(&c.file)).collect()
    }
}

/// A chunk read into memory, records kept as raw bytes.
pub struct ChunkData {
    pub seq_len: usize,
    pub count: usize,
    body: Vec<u8>,
}

impl ChunkData {
    pub fn record(&self, i: usize) -> &[u8] {
        let rb = record_bytes(self.seq_len);
        &self.body[HEADER_BYTES + i * rb..HEADER_BYTES + (i + 1) * rb]
    }

    pub fn records(&self) -> impl Iterator<Item = &[u8]> {
        (0..self.count).map(|i| self.record(i))
    }

    pub fn decode(&self, path: &Path) -> Result<Vec<PairRecord>> {
        self.records()
            .map(|r| PairRecord::decode(r, self.seq_len, path))
            .collect()
    }
}

pub fn read_chunk(path: &Path) -> Result<ChunkData> {
    let mut data = binio::read_file(path)?;
    let body_len = binio::verify_crc(path, &data)?.len();
    let mut r = ByteReader::new(&data[..body_len], path);
    r.expect_magic(MAGIC)?;
    if r.u32()? != VERSION {
        return Err(Error::format(path, "unsupported version"));
    }
    let seq_len = r.u32()? as usize;
    let (c2, c1) = (r.u32()? as usize, r.u32()? as usize);
    if c2 != Modality::S2.channels() || c1 != Modality::S1.channels() {
        return Err(Error::format(path, "unexpected channel counts"));
    }
    let count = r.u64()? as usize;
    if r.remaining() != count * record_bytes(seq_len) {
        return Err(Error::format(path, "record count disagrees with file size"));
    }
    data.truncate(body_len);
    Ok(ChunkData {
        seq_len,
        count,
        body: data,
    })
}

/// Accumulates encoded records and flushes them as numbered chunk files.
struct ChunkSink<'a> {
    dir: &'a Path,
    prefix: String,
    seq_len: usize,
    chunk_records: usize,
    pending: Vec<u8>,
    pending_count: usize,
    chunks: Vec<ChunkInfo>,
}

impl<'a> ChunkSink<'a> {
    fn new(dir: &'a Path, prefix: String, seq_len: usize, chunk_records: usize) -> Self {
        Self {
            dir,
            prefix,
            seq_len,
            chunk_records: chunk_records.max(1),
            pending: Vec::new(),
            pending_count: 0,
            chunks: Vec::new(),
        }
    }

    fn push(&mut self, record: &[u8]) -> Result<()> {
        self.pending.extend_from_slice(record);
        self.pending_count += 1;
        if self.pending_count == self.chunk_records {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending_count == 0 {
            return Ok(());
        }
        let mut w = ByteWriter::with_capacity(HEADER_BYTES + self.pending.len() + 4);
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.seq_len as u32);
        w.u32(Modality::S2.channels() as u32);
        w.u32(Modality::S1.channels() as u32);
        w.u64(self.pending_count as u64);
        w.bytes(&self.pending);
        let bytes = w.finish();
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let file = format!("{}-{:05}.bin", self.prefix, self.chunks.len());
        binio::write_atomic(&self.dir.join(&file), &bytes)?;
        self.chunks.push(ChunkInfo {
            file,
            records: self.pending_count as u64,
            crc,
        });
        self.pending.clear();
        self.pending_count = 0;
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<ChunkInfo>> {
        self.flush()?;
        Ok(self.chunks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub seq_len: usize,
    /// Minimum valid observations per modality for a pixel to be kept.
    pub min_valid: usize,
    pub seed: u64,
    pub chunk_records: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            seq_len: 40,
            min_valid: 1,
            seed: 0,
            chunk_records: 4096,
        }
    }
}

fn tile_pairs(tile: &RawTile, tile_index: u32, cfg: &BuildConfig) -> Result<(Vec<u8>, usize, StatsAccumulator)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::from(tile_index) + 1);
    let mut bytes = Vec::new();
    let mut count = 0;
    let mut stats = StatsAccumulator::default();
    let min_valid = cfg.min_valid.max(1);
    for row in 0..tile.meta.height {
        for col in 0..tile.meta.width {
            if Modality::ALL.iter().any(|&m| tile.valid_count(m, row, col) < min_valid) {
                continue;
            }
            let px = tile.dpixel(tile_index, row, col)?;
            stats.add(&px.s2);
            stats.add(&px.s1);
            let record = PairRecord {
                location: px.location,
                s2_a: sample_view(&px.s2, cfg.seq_len, &mut rng)?,
                s2_b: sample_view(&px.s2, cfg.seq_len, &mut rng)?,
                s1_a: sample_view(&px.s1, cfg.seq_len, &mut rng)?,
                s1_b: sample_view(&px.s1, cfg.seq_len, &mut rng)?,
            };
            record.encode(&mut bytes);
            count += 1;
        }
    }
    Ok((bytes, count, stats))
}

/// Tile id, encoded records, record count and stats of one tile.
type TilePairs = (String, Vec<u8>, usize, StatsAccumulator);

/// Builds unshuffled pair chunks (tile order, then row-major) plus
/// `manifest.json` and `stats.json` under `out`.
pub fn build_pairs(tile_dirs: &[PathBuf], cfg: &BuildConfig, out: &Path) -> Result<ShuffleManifest> {
    if cfg.seq_len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    binio::create_dir_all(out)?;
    let mut sink = ChunkSink::new(out, "c000".into(), cfg.seq_len, cfg.chunk_records);
    let rb = record_bytes(cfg.seq_len);
    let mut stats = StatsAccumulator::default();
    let mut ids = Vec::with_capacity(tile_dirs.len());
    let mut total = 0u64;
    // Tiles are read and sampled in parallel a few at a time; one writer.
    let wave = rayon::current_num_threads().max(1);
    for (w, dirs) in tile_dirs.chunks(wave).enumerate() {
        let results: Vec<Result<TilePairs>> = dirs
            .par_iter()
            .enumerate()
            .map(|(i, dir)| {
                let tile = RawTile::read(dir)?;
                let (bytes, n, s) = tile_pairs(&tile, (w * wave + i) as u32, cfg)?;
                Ok((tile.meta.tile_id, bytes, n, s))
            })
            .collect();
        for r in results {
            let (id, bytes, n, s) = r?;
            for rec in bytes.chunks_exact(rb) {
                sink.push(rec)?;
            }
            stats.merge(&s);
            total += n as u64;
            ids.push(id);
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let manifest = ShuffleManifest {
        version: VERSION,
        seq_len: cfg.seq_len,
        chunks: sink.finish()?,
        total,
        seed: cfg.seed,
        tiles: ids,
        generation: 0,
        permuted: false,
    };
    stats.finish()?.save(&out.join(STATS_FILE))?;
    manifest.save(out)?;
    info!("built {total} pair records from {} tiles", manifest.tiles.len());
    Ok(manifest)
}

/// [`build_pairs`] over every tile directory under `root`.
pub fn build_pairs_from_root(root: &Path, cfg: &BuildConfig, out: &Path) -> Result<ShuffleManifest> {
    build_pairs(&list_tiles(root)?, cfg, out)
}

pub fn load_stats(dir: &Path) -> Result<GlobalStats> {
    GlobalStats::load(&dir.join(STATS_FILE))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermuteConfig {
    pub seed: u64,
    /// Most records held in memory at once.
    pub memory_records: usize,
    pub chunk_records: usize,
}

impl Default for PermuteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            memory_records: 1 << 16,
            chunk_records: 4096,
        }
    }
}

enum Source {
    Chunks(Vec<PathBuf>),
    Bucket(PathBuf),
}

impl Source {
    fn for_each(&self, rb: usize, f: &mut dyn FnMut(&[u8]) -> Result<()>) -> Result<()> {
        match self {
            Source::Chunks(paths) => {
                for p in paths {
                    let chunk = read_chunk(p)?;
                    if record_bytes(chunk.seq_len) != rb {
                        return Err(Error::format(p, "sequence length differs from manifest"));
                    }
                    for rec in chunk.records() {
                        f(rec)?;
                    }
                }
                Ok(())
            }
            Source::Bucket(path) => {
                let file = File::open(path).map_err(|e| Error::io(path, e))?;
                let mut reader = BufReader::new(file);
                let mut buf = vec![0u8; rb];
                loop {
                    match reader.read_exact(&mut buf) {
                        Ok(()) => f(&buf)?,
                        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
                        Err(e) => return Err(Error::io(path, e)),
                    }
                }
            }
        }
    }
}

/// Uniform permutation of `count` records from `source` into `sink`,
/// holding at most `budget` records in memory. Larger inputs are scattered
/// to random bucket files, each of which is permuted recursively; the
/// concatenation of independently permuted random buckets is itself a
/// uniform permutation.
fn permute_into(
    source: &Source,
    count: usize,
    rb: usize,
    budget: usize,
    rng: &mut ChaCha8Rng,
    scratch: &Path,
    sink: &mut ChunkSink,
) -> Result<()> {
    if count <= budget {
        let mut all = Vec::with_capacity(count * rb);
        source.for_each(rb, &mut |rec| {
            all.extend_from_slice(rec);
            Ok(())
        })?;
        let mut order: Vec<usize> = (0..all.len() / rb).collect();
        order.shuffle(rng);
        for i in order {
            sink.push(&all[i * rb..(i + 1) * rb])?;
        }
        return Ok(());
    }

    let n_buckets = (2 * count).div_ceil(budget).max(2);
    binio::create_dir_all(scratch)?;
    let paths: Vec<PathBuf> = (0..n_buckets).map(|b| scratch.join(format!("b{b:05}"))).collect();
    let mut writers = paths
        .iter()
        .map(|p| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e)))
        .collect::<Result<Vec<_>>>()?;
    let mut sizes = vec![0usize; n_buckets];
    source.for_each(rb, &mut |rec| {
        let b = rng.gen_range(0..n_buckets);
        sizes[b] += 1;
        writers[b].write_all(rec).map_err(|e| Error::io(&paths[b], e))
    })?;
    for (w, p) in writers.into_iter().zip(&paths) {
        w.into_inner().map_err(|e| Error::io(p, e.into_error()))?;
    }
    let seeds: Vec<u64> = (0..n_buckets).map(|_| rng.gen()).collect();
    for (b, path) in paths.iter().enumerate() {
        let mut sub = ChaCha8Rng::seed_from_u64(seeds[b]);
        let nested = scratch.join(format!("r{b:05}"));
        permute_into(
            &Source::Bucket(path.clone()),
            sizes[b],
            rb,
            budget,
            &mut sub,
            &nested,
            sink,
        )?;
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
        if nested.exists() {
            fs::remove_dir_all(&nested).map_err(|e| Error::io(&nested, e))?;
        }
    }
    Ok(())
}

/// Replaces the chunks under `dir` with a uniformly random permutation of
/// their records and rewrites the manifest.
pub fn global_permute(dir: &Path, cfg: &PermuteConfig) -> Result<ShuffleManifest> {
    if cfg.memory_records == 0 {
        return Err(Error::Config("memory budget must be at least one record".into()));
    }
    let old = ShuffleManifest::load(dir)?;
    let rb = record_bytes(old.seq_len);
    let generation = old.generation + 1;
    let mut sink = ChunkSink::new(dir, format!("c{generation:03}"), old.seq_len, cfg.chunk_records);
    let scratch = dir.join(format!(".scratch-{generation:03}"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = Source::Chunks(old.chunk_paths(dir));
    permute_into(
        &source,
        old.total as usize,
        rb,
        cfg.memory_records,
        &mut rng,
        &scratch,
        &mut sink,
    )?;
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }
    let manifest = ShuffleManifest {
        chunks: sink.finish()?,
        seed: cfg.seed,
        generation,
        permuted: true,
        ..old.clone()
    };
    manifest.validate()?;
    manifest.save(dir)?;
    for p in old.chunk_paths(dir) {
        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    }
    info!(
        "permuted {} records into {} chunks",
        manifest.total,
        manifest.chunks.len()
    );
    Ok(manifest)
}

/// Batches in on-disk order; the final batch may be short.
pub struct BatchReader {
    dir: PathBuf,
    manifest: ShuffleManifest,
    batch_size: usize,
    next_chunk: usize,
    buffer: std::collections::VecDeque<PairRecord>,
}

impl BatchReader {
    pub fn open(dir: &Path, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: ShuffleManifest::load(dir)?,
            batch_size,
            next_chunk: 0,
            buffer: Default::default(),
        })
    }

    pub fn manifest(&self) -> &ShuffleManifest {
        &self.manifest
    }

    pub fn num_batches(&self) -> usize {
        (self.manifest.total as usize).div_ceil(self.batch_size)
    }

    fn fill(&mut self) -> Result<()> {
        while self.buffer.len() < self.batch_size && self.next_chunk < self.manifest.chunks.len() {
            let path = self.dir.join(&self.manifest.chunks[self.next_chunk].file);
            self.next_chunk += 1;
            let chunk = read_chunk(&path)?;
            if chunk.seq_len != self.manifest.seq_len {
                return Err(Error::format(&path, "sequence length differs from manifest"));
            }
            self.buffer.extend(chunk.decode(&path)?);
        }
        Ok(())
    }
}

impl Iterator for BatchReader {
    type Item = Result<Vec<PairRecord>>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Err(e) = self.fill() {
            self.next_chunk = self.manifest.chunks.len();
            self.buffer.clear();
            return Some(Err(e));
        }
        if self.buffer.is_empty() {
            return None;
        }
        let n = self.batch_size.min(self.buffer.len());
        Some(Ok(self.buffer.drain(..n).collect()))
    }
}

pub fn read_batches(dir: &Path, batch_size: usize) -> Result<BatchReader> {
    BatchReader::open(dir, batch_size)
}

/// Writes an already-built record list as a store; used for fixtures and
/// for re-chunking.
pub fn write_records(
    dir: &Path,
    records: &[PairRecord],
    seq_len: usize,
    chunk_records: usize,
    seed: u64,
) -> Result<ShuffleManifest> {
    binio::create_dir_all(dir)?;
    let mut sink = ChunkSink::new(dir, "c000".into(), seq_len, chunk_records);
    let mut buf = Vec::with_capacity(record_bytes(seq_len));
    for r in records {
        r.check(seq_len)?;
        buf.clear();
        r.encode(&mut buf);
        sink.push(&buf)?;
    }
    let manifest = ShuffleManifest {
        version: VERSION,
        seq_len,
        chunks: sink.finish()?,
        total: records.len() as u64,
        seed,
        tiles: Vec::new(),
        generation: 0,
        permuted: false,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(len: usize, c: usize, fill: f64) -> SampledView {
        SampledView {
            values: Array2::from_elem((len, c), fill),
            doys: (0..len).map(|t| t as f64 / 366.0).collect(),
        }
    }

    pub(crate) fn record(id: u32, len: usize) -> PairRecord {
        let f = f64::from(id);
        PairRecord {
            location: PixelLocation {
                tile: id % 3,
                row: id,
                col: 0,
            },
            s2_a: view(len, 10, f),
            s2_b: view(len, 10, f + 0.5),
            s1_a: view(len, 2, -f),
            s1_b: view(len, 2, -f - 0.5),
        }
    }

    fn stored(r: &PairRecord) -> PairRecord {
        let mut buf = Vec::new();
        r.encode(&mut buf);
        PairRecord::decode(&buf, r.len(), Path::new("mem")).unwrap()
    }

    #[test]
    fn record_round_trip() {
        let r = record(7, 3);
        let mut buf = Vec::new();
        r.encode(&mut buf);
        assert_eq!(buf.len(), record_bytes(3));
        let back = PairRecord::decode(&buf, 3, Path::new("mem")).unwrap();
        assert_eq!(back.location, r.location);
        assert_eq!(back.s1_b.values, r.s1_b.values);
        assert!((back.s2_a.doys[2] - 2.0 / 366.0).abs() < 1e-7);
    }

    #[test]
    fn batch_sizes_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..10).map(|i| record(i, 2)).collect();
        write_records(dir.path(), &recs, 2, 3, 0).unwrap();
        let batches: Vec<_> = read_batches(dir.path(), 4).unwrap().map(|b| b.unwrap()).collect();
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let flat: Vec<u32> = batches.iter().flatten().map(|r| r.location.row).collect();
        assert_eq!(flat, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_store_yields_nothing() {
        let dir = tempfile::tempdir().unwrap();
        write_records(dir.path(), &[], 2, 3, 0).unwrap();
        assert_eq!(read_batches(dir.path(), 4).unwrap().count(), 0);
    }

    #[test]
    fn single_record_permutes_to_itself() {
        let dir = tempfile::tempdir().unwrap();
        write_records(dir.path(), &[record(1, 2)], 2, 3, 0).unwrap();
        global_permute(
            dir.path(),
            &PermuteConfig {
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let out: Vec<_> = read_batches(dir.path(), 8).unwrap().flat_map(|b| b.unwrap()).collect();
        assert_eq!(out, vec![stored(&record(1, 2))]);
    }

    #[test]
    fn corrupt_chunk_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..4).map(|i| record(i, 2)).collect();
        let m = write_records(dir.path(), &recs, 2, 10, 0).unwrap();
        let path = dir.path().join(&m.chunks[0].file);
        let mut bytes = fs::read(&path).unwrap();
        bytes[HEADER_BYTES + 5] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            global_permute(dir.path(), &PermuteConfig::default()),
            Err(Error::ChecksumMismatch { .. })
        ));
        let mut reader = read_batches(dir.path(), 2).unwrap();
        assert!(matches!(reader.next(), Some(Err(Error::ChecksumMismatch { .. }))));
        assert!(reader.next().is_none());
    }
}
