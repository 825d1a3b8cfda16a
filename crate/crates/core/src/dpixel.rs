//! Per-pixel time series ("d-pixels") and the preprocessing applied before
//! they reach the encoder: validity filtering, sparse temporal sampling to a
//! fixed length, standardization and day-of-year features.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization denominator for day-of-year (covers leap years).
pub const DOY_DENOMINATOR: f64 = 366.0;

/// Smallest admissible standard deviation in [`GlobalStats`].
pub const MIN_STD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Optical: B2, B3, B4, B5, B6, B7, B8, B8A, B11, B12.
    S2,
    /// Radar: VV, VH.
    S1,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::S2, Modality::S1];

    pub const fn channels(self) -> usize {
        match self {
            Modality::S2 => 10,
            Modality::S1 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::S2 => "s2",
            Modality::S1 => "s1",
        }
    }
}

/// One modality's annual observations at a single location.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries {
    modality: Modality,
    /// T×C
    values: Array2<f64>,
    mask: Vec<bool>,
    doys: Vec<u16>,
}

impl ObservationSeries {
    pub fn new(modality: Modality, values: Array2<f64>, mask: Vec<bool>, doys: Vec<u16>) -> Result<Self> {
        let t = values.nrows();
        if mask.len() != t || doys.len() != t {
            return Err(Error::InvalidSeries(format!(
                "{} rows, {} mask entries, {} doys",
                t,
                mask.len(),
                doys.len()
            )));
        }
        if values.ncols() != modality.channels() {
            return Err(Error::ChannelMismatch {
                expected: modality.channels(),
                actual: values.ncols(),
            });
        }
        if doys.iter().any(|&d| !(1..=366).contains(&d)) {
            return Err(Error::InvalidSeries("day-of-year outside [1, 366]".into()));
        }
        if doys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSeries("day-of-year not strictly increasing".into()));
        }
        Ok(Self {
            modality,
            values,
            mask,
            doys,
        })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn doys(&self) -> &[u16] {
        &self.doys
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Identifies a pixel within a corpus: tile index plus row/column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelLocation {
    pub tile: u32,
    pub row: u32,
    pub col: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DPixel {
    pub s2: ObservationSeries,
    pub s1: ObservationSeries,
    pub location: PixelLocation,
}

impl DPixel {
    pub fn series(&self, modality: Modality) -> &ObservationSeries {
        match modality {
            Modality::S2 => &self.s2,
            Modality::S1 => &self.s1,
        }
    }
}

/// A fixed-length sample of a series: L×C values and doys normalized to
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledView {
    pub values: Array2<f64>,
    pub doys: Vec<f64>,
}

impl SampledView {
    pub fn len(&self) -> usize {
        self.doys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doys.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    /// L×2 matrix of `(sin, cos)` day-of-year features.
    pub fn doy_features(&self) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.doys.len(), 2));
        for (t, &d) in self.doys.iter().enumerate() {
            let (s, c) = encode_doy(d)?;
            out[[t, 0]] = s;
            out[[t, 1]] = c;
        }
        Ok(out)
    }
}

/// Indices of valid timesteps, ascending.
pub fn valid_indices(series: &ObservationSeries) -> Vec<usize> {
    series
        .mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Draws `len` valid timesteps: without replacement when enough are valid,
/// with replacement otherwise. Rows come out sorted by day-of-year.
pub fn sample_view<R: Rng + ?Sized>(series: &ObservationSeries, len: usize, rng: &mut R) -> Result<SampledView> {
    let valid = valid_indices(series);
    if valid.is_empty() {
        return Err(Error::NoValidObservations);
    }
    let mut picked: Vec<usize> = if valid.len() >= len {
        index::sample(rng, valid.len(), len)
            .into_iter()
            .map(|i| valid[i])
            .collect()
    } else {
        (0..len).map(|_| valid[rng.gen_range(0..valid.len())]).collect()
    };
    // doys are strictly increasing, so index order is doy order
    picked.sort_unstable();
    let values = series.values.select(Axis(0), &picked);
    let doys = picked
        .iter()
        .map(|&i| f64::from(series.doys[i]) / DOY_DENOMINATOR)
        .collect();
    Ok(SampledView { values, doys })
}

/// `(sin 2πt, cos 2πt)` for a normalized day-of-year `t ∈ [0, 1]`.
pub fn encode_doy(t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            value: t,
            min: 0.0,
            max: 1.0,
        });
    }
    let a = 2.0 * PI * t;
    Ok((a.sin(), a.cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel standardization statistics for both modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub s2: ChannelStats,
    pub s1: ChannelStats,
}

impl GlobalStats {
    pub fn identity() -> Self {
        let unit = |c: usize| ChannelStats {
            mean: vec![0.0; c],
            std: vec![1.0; c],
        };
        Self {
            s2: unit(Modality::S2.channels()),
            s1: unit(Modality::S1.channels()),
        }
    }

    pub fn get(&self, modality: Modality) -> &ChannelStats {
        match modality {
            Modality::S2 => &self.s2,
            Modality::S1 => &self.s1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for m in Modality::ALL {
            let st = self.get(m);
            if st.mean.len() != m.channels() || st.std.len() != m.channels() {
                return Err(Error::ChannelMismatch {
                    expected: m.channels(),
                    actual: st.mean.len().min(st.std.len()),
                });
            }
            if let Some(s) = st.std.iter().find(|s| !(**s > MIN_STD) || !s.is_finite()) {
                return Err(Error::DegenerateStats(format!("{} std {s} <= {MIN_STD}", m.name())));
            }
            if st.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::DegenerateStats(format!("{} mean not finite", m.name())));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stats: GlobalStats = serde_json::from_str(text)?;
        stats.validate()?;
        Ok(stats)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Streaming accumulator for [`GlobalStats`] over valid observations.
#[derive(Clone, Debug)]
pub struct StatsAccumulator {
    count: [u64; 2],
    sum: [Vec<f64>; 2],
    sum_sq: [Vec<f64>; 2],
}

impl Default for StatsAccumulator {
    fn default() -> Self {
        Self {
            count: [0; 2],
            sum: [vec![0.0; 10], vec![0.0; 2]],
            sum_sq: [vec![0.0; 10], vec![0.0; 2]],
        }
    }
}

impl StatsAccumulator {
    pub fn add(&mut self, series: &ObservationSeries) {
        let m = match series.modality {
            Modality::S2 => 0,
            Modality::S1 => 1,
        };
        for (row, &valid) in series.values.rows().into_iter().zip(&series.mask) {
            if !valid {
                continue;
            }
            self.count[m] += 1;
            for (c, &v) in row.iter().enumerate() {
                self.sum[m][c] += v;
                self.sum_sq[m][c] += v * v;
            }
        }
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        for m in 0..2 {
            self.count[m] += other.count[m];
            for c in 0..self.sum[m].len() {
                self.sum[m][c] += other.sum[m][c];
                self.sum_sq[m][c] += other.sum_sq[m][c];
            }
        }
    }

    pub fn finish(&self) -> Result<GlobalStats> {
        let build = |m: usize| -> Result<ChannelStats> {
            let n = self.count[m] as f64;
            if self.count[m] == 0 {
                return Err(Error::DegenerateStats("no valid observations".into()));
            }
            let mean: Vec<f64> = self.sum[m].iter().map(|s| s / n).collect();
            let std = self.sum_sq[m]
                .iter()
                .zip(&mean)
                .map(|(sq, mu)| (sq / n - mu * mu).max(0.0).sqrt())
                .collect();
            Ok(ChannelStats { mean, std })
        };
        let stats = GlobalStats {
            s2: build(0)?,
            s1: build(1)?,
        };
        stats.validate()?;
        Ok(stats)
    }
}

/// `(x − mean) / std` per channel; doys pass through.
pub fn standardize(view: &SampledView, stats: &ChannelStats) -> Result<SampledView> {
    check_channels(view, stats)?;
    let mut values = view.values.clone();
    for mut row in values.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(SampledView {
        values,
        doys: view.doys.clone(),
    })
}

/// Inverse of [`standardize`].
pub fn unstandardize(view: &SampledView, stats: &ChannelStats) -> Result<SampledView> {
    check_channels(view, stats)?;
    let mut values = view.values.clone();
    for mut row in values.rows_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = *v * stats.std[c] + stats.mean[c];
        }
    }
    Ok(SampledView {
        values,
        doys: view.doys.clone(),
    })
}

fn check_channels(view: &SampledView, stats: &ChannelStats) -> Result<()> {
    let c = view.channels();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::ChannelMismatch {
            expected: stats.mean.len(),
            actual: c,
        });
    }
    Ok(())
}
