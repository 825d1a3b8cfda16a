//! Pieces of the `dpix` command line that are worth testing on their own:
//! bbox parsing, label CSV handling, probing a store and region export.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use anyhow::{bail, Context, Result};
use dpix_core::downstream::{
    f1, regression_metrics, split_indices, train_probe, Average, LabeledSet, ProbeConfig, Targets, Task,
};
use dpix_core::embstore::{fetch_region, EmbeddingStore, Mosaic};
use dpix_core::geo::BBox;
use dpix_core::tilestore::RawTile;
use ndarray::{Array2, Array3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Parses `x0,y0,x1,y1`.
pub fn parse_bbox(s: &str) -> Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("bbox {s:?} is not four numbers"))?;
    let [min_x, min_y, max_x, max_y] = v[..] else {
        bail!("bbox {s:?} needs exactly four comma-separated numbers");
    };
    let b = BBox {
        min_x,
        min_y,
        max_x,
        max_y,
    };
    b.validate()?;
    Ok(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub x: f64,
    pub y: f64,
    pub year: u16,
    pub label: String,
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
    rdr.deserialize()
        .map(|r| r.with_context(|| format!("reading {}", path.display())))
        .collect()
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| path.display().to_string())?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Draws `per_tile` distinct pixels from every tile that carries ground
/// truth and returns them as label rows at pixel centres.
pub fn sample_truth_labels(tiles: &[RawTile], per_tile: usize, seed: u64) -> Vec<LabelRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for t in tiles {
        let Some(truth) = &t.truth else { continue };
        let (w, geo) = (t.meta.width, &t.meta.geo);
        let n = truth.len();
        for i in sample(&mut rng, n, per_tile.min(n)).into_iter() {
            let (r, c) = (i / w, i % w);
            rows.push(LabelRow {
                x: geo.origin_x + (c as f64 + 0.5) * geo.pixel_size,
                y: geo.origin_y - (r as f64 + 0.5) * geo.pixel_size,
                year: t.meta.year,
                label: truth[i].to_string(),
            });
        }
    }
    rows
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum TaskKind {
    Classify,
    Regress,
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub task: TaskKind,
    /// Train and validation fractions; the rest is the test split.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            task: TaskKind::Classify,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 0,
            hidden: p.hidden,
            epochs: p.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub labels_read: usize,
    pub labels_used: usize,
    /// Labels outside the store or on no-data pixels.
    pub labels_skipped: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

/// Embedding rows for every label that lands on a valid stored pixel, plus
/// the indices of those labels.
pub fn lookup_embeddings(store: &EmbeddingStore, rows: &[LabelRow]) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut by_year: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        by_year.entry(r.year).or_default().push(i);
    }
    let mut found: Vec<(usize, Vec<f64>)> = Vec::new();
    for (year, idx) in by_year {
        let headers = store.headers(year)?;
        let Some(first) = headers.first() else {
            log::warn!("no stored tiles for {year}; skipping {} labels", idx.len());
            continue;
        };
        let pad = first.geo.pixel_size / 2.0;
        let bbox = idx.iter().fold(
            BBox {
                min_x: f64::INFINITY,
                min_y: f64::INFINITY,
                max_x: f64::NEG_INFINITY,
                max_y: f64::NEG_INFINITY,
            },
            |b, &i| BBox {
                min_x: b.min_x.min(rows[i].x - pad),
                min_y: b.min_y.min(rows[i].y - pad),
                max_x: b.max_x.max(rows[i].x + pad),
                max_y: b.max_y.max(rows[i].y + pad),
            },
        );
        let mosaic = match fetch_region(store, &bbox, year) {
            Ok(m) => m,
            Err(dpix_core::Error::NoCoverage) => continue,
            Err(e) => return Err(e.into()),
        };
        for i in idx {
            if let Some((r, c)) = mosaic.locate(rows[i].x, rows[i].y) {
                if mosaic.map.valid[[r, c]] {
                    found.push((i, mosaic.map.data.slice(ndarray::s![r, c, ..]).to_vec()));
                }
            }
        }
    }
    found.sort_by_key(|(i, _)| *i);
    let dim = found.first().map_or(0, |(_, v)| v.len());
    let used: Vec<usize> = found.iter().map(|(i, _)| *i).collect();
    let flat: Vec<f64> = found.into_iter().flat_map(|(_, v)| v).collect();
    Ok((Array2::from_shape_vec((used.len(), dim), flat)?, used))
}

/// Trains a probe on labelled store pixels and scores it on a held-out split.
pub fn probe_store(store: &EmbeddingStore, rows: &[LabelRow], opts: &ProbeOptions) -> Result<ProbeReport> {
    let (x, used) = lookup_embeddings(store, rows)?;
    if used.len() < 3 {
        bail!("only {} labels fall on valid stored pixels", used.len());
    }
    let (targets, classes) = match opts.task {
        TaskKind::Classify => {
            let names: BTreeSet<&str> = used.iter().map(|&i| rows[i].label.as_str()).collect();
            let names: Vec<String> = names.into_iter().map(str::to_owned).collect();
            let ids = used
                .iter()
                .map(|&i| names.binary_search(&rows[i].label).expect("collected above"))
                .collect();
            (Targets::Classes(ids), names)
        }
        TaskKind::Regress => {
            let vals = used
                .iter()
                .map(|&i| {
                    rows[i]
                        .label
                        .trim()
                        .parse::<f64>()
                        .with_context(|| format!("label {:?} is not a number", rows[i].label))
                })
                .collect::<Result<_>>()?;
            (Targets::Values(vals), Vec::new())
        }
    };
    let set = LabeledSet::new(x, targets)?;
    let test_fraction = 1.0 - opts.train_fraction - opts.val_fraction;
    if opts.train_fraction <= 0.0 || opts.val_fraction <= 0.0 || test_fraction <= 0.0 {
        bail!("train and validation fractions must be positive and sum below 1");
    }
    let parts = split_indices(
        set.len(),
        &[opts.train_fraction, opts.val_fraction, test_fraction],
        opts.seed,
    );
    let (train, val, test) = (set.subset(&parts[0]), set.subset(&parts[1]), set.subset(&parts[2]));
    let task = match opts.task {
        TaskKind::Classify => Task::Classify { classes: classes.len() },
        TaskKind::Regress => Task::Regress,
    };
    let cfg = ProbeConfig {
        task,
        hidden: opts.hidden.clone(),
        epochs: opts.epochs,
        seed: opts.seed,
        ..ProbeConfig::default()
    };
    let probe = train_probe(&train, &val, &cfg)?;
    let mut metrics = BTreeMap::new();
    match &test.targets {
        Targets::Classes(truth) => {
            let preds = probe.predict_classes(&test.embeddings);
            let hits = preds.iter().zip(truth).filter(|(p, t)| p == t).count();
            metrics.insert("accuracy".into(), hits as f64 / truth.len() as f64);
            metrics.insert("macro_f1".into(), f1(&preds, truth, Average::Macro)?);
            metrics.insert("weighted_f1".into(), f1(&preds, truth, Average::Weighted)?);
        }
        Targets::Values(truth) => {
            let m = regression_metrics(&probe.predict_values(&test.embeddings), truth)?;
            metrics.insert("rmse".into(), m.rmse);
            metrics.insert("r2".into(), m.r2);
            metrics.insert("mean_bias".into(), m.mean_bias);
        }
    }
    Ok(ProbeReport {
        task: format!("{:?}", opts.task).to_lowercase(),
        labels_read: rows.len(),
        labels_used: used.len(),
        labels_skipped: rows.len() - used.len(),
        train: train.len(),
        validation: val.len(),
        test: test.len(),
        classes,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionHeader {
    pub bbox: BBox,
    pub year: u16,
    pub pixel_size: f64,
    pub crs: u32,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub valid_pixels: usize,
}

/// Writes a mosaic as `<out>` (f32 H x W x D `.npy`), `<out stem>.valid.npy`
/// (bool H x W) and `<out stem>.json` (georeferencing).
pub fn export_region(mosaic: &Mosaic, year: u16, out: &Path) -> Result<RegionHeader> {
    let map = &mosaic.map;
    let data: Array3<f32> = map.data.mapv(|v| v as f32);
    ndarray_npy::write_npy(out, &data).with_context(|| out.display().to_string())?;
    ndarray_npy::write_npy(out.with_extension("valid.npy"), &map.valid)?;
    let header = RegionHeader {
        bbox: mosaic.bbox(),
        year,
        pixel_size: mosaic.pixel_size,
        crs: mosaic.crs,
        height: map.height(),
        width: map.width(),
        dim: map.dim(),
        valid_pixels: map.valid.iter().filter(|&&v| v).count(),
    };
    std::fs::write(out.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_parsing() {
        let b = parse_bbox("0, 10,20.5,30").unwrap();
        assert_eq!((b.min_x, b.min_y, b.max_x, b.max_y), (0.0, 10.0, 20.5, 30.0));
        assert!(parse_bbox("0,10,20").is_err());
        assert!(parse_bbox("0,10,20,x").is_err());
        assert!(parse_bbox("20,10,0,30").is_err());
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let rows = vec![
            LabelRow {
                x: 1.5,
                y: -2.0,
                year: 2021,
                label: "crop".into(),
            },
            LabelRow {
                x: 3.0,
                y: 4.0,
                year: 2022,
                label: "0.25".into(),
            },
        ];
        write_labels(&path, &rows).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("x,y,year,label\n"));
        assert_eq!(read_labels(&path).unwrap(), rows);
    }
}
