//! Synthetic corpus of irregular, gappy pixel time series drawn from a few
//! latent phenology classes laid out in contiguous spatial blocks.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dpixel::Modality;
use crate::error::{Error, Result};
use crate::geo::GeoTransform;
use crate::tilestore::{RawTile, TileMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub tiles: usize,
    pub height: usize,
    pub width: usize,
    pub s2_obs: usize,
    pub s1_obs: usize,
    /// Probability that an observation is masked out.
    pub gap_prob: f64,
    pub noise_std: f64,
    /// Std of per-pixel perturbations of amplitude (relative), phase and
    /// offset, shared by all channels of a pixel; 0 keeps every pixel on its
    /// class curves.
    pub pixel_variation: f64,
    /// Side of the square class blocks, in pixels.
    pub block_size: usize,
    pub year: u16,
    pub pixel_size: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            tiles: 4,
            height: 32,
            width: 32,
            s2_obs: 73,
            s1_obs: 60,
            gap_prob: 0.4,
            noise_std: 0.1,
            pixel_variation: 0.0,
            block_size: 8,
            year: 2024,
            pixel_size: 10.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.classes,
            self.tiles,
            self.height,
            self.width,
            self.s2_obs,
            self.s1_obs,
            self.block_size,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("synthetic spec sizes must be positive".into()));
        }
        if self.s2_obs > 365 || self.s1_obs > 365 {
            return Err(Error::Config("at most 365 observations per year".into()));
        }
        if self.classes > 255 {
            return Err(Error::Config("at most 255 classes".into()));
        }
        if !(0.0..1.0).contains(&self.gap_prob) {
            return Err(Error::Config("gap probability must be in [0, 1)".into()));
        }
        if !(self.noise_std >= 0.0) || !(self.pixel_variation >= 0.0) || !(self.pixel_size > 0.0) {
            return Err(Error::Config(
                "noise and variation std must be >= 0 and pixel size > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Seasonal curve parameters of one class for one channel.
#[derive(Clone, Copy, Debug)]
struct Curve {
    amplitude: f64,
    phase: f64,
    offset: f64,
}

impl Curve {
    fn at(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * (t + self.phase)).sin() + self.offset
    }

    fn perturbed(&self, p: [f64; 3]) -> Curve {
        Curve {
            amplitude: self.amplitude * (1.0 + p[0]),
            phase: self.phase + p[1],
            offset: self.offset + p[2],
        }
    }
}

/// Raw sensor scaling applied after the unit-scale curve.
fn sensor_scale(m: Modality) -> (f64, f64) {
    match m {
        Modality::S2 => (1000.0, 2500.0),
        Modality::S1 => (3.0, -15.0),
    }
}

fn class_curves(spec: &SynthSpec) -> Vec<[Vec<Curve>; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.classes)
        .map(|_| {
            Modality::ALL.map(|m| {
                (0..m.channels())
                    .map(|_| Curve {
                        amplitude: rng.gen_range(0.5..1.5),
                        phase: rng.gen_range(0.0..1.0),
                        offset: rng.gen_range(-1.0..1.0),
                    })
                    .collect()
            })
        })
        .collect()
}

fn acquisition_days<R: Rng>(count: usize, rng: &mut R) -> Vec<u16> {
    let mut days: Vec<u16> = index::sample(rng, 365, count)
        .into_iter()
        .map(|d| d as u16 + 1)
        .collect();
    days.sort_unstable();
    days
}

/// Generates all tiles in memory, each carrying its ground-truth raster.
pub fn generate(spec: &SynthSpec) -> Result<Vec<RawTile>> {
    spec.validate()?;
    let curves = class_curves(spec);
    let per_row = (spec.tiles as f64).sqrt().ceil() as usize;
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    let variation =
        Normal::new(0.0, spec.pixel_variation.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
    (0..spec.tiles)
        .map(|ti| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(ti as u64 + 1);
            let (h, w) = (spec.height, spec.width);
            let s2_doys = acquisition_days(spec.s2_obs, &mut rng);
            let s1_doys = acquisition_days(spec.s1_obs, &mut rng);

            let blocks_y = h.div_ceil(spec.block_size);
            let blocks_x = w.div_ceil(spec.block_size);
            let block_class: Vec<u8> = (0..blocks_y * blocks_x)
                .map(|_| rng.gen_range(0..spec.classes) as u8)
                .collect();
            let truth: Vec<u8> = (0..h * w)
                .map(|p| {
                    let (r, c) = (p / w, p % w);
                    block_class[(r / spec.block_size) * blocks_x + c / spec.block_size]
                })
                .collect();

            let mut s2_values = Vec::with_capacity(h * w * s2_doys.len() * 10);
            let mut s1_values = Vec::with_capacity(h * w * s1_doys.len() * 2);
            let mut s2_mask = Vec::with_capacity(h * w * s2_doys.len());
            let mut s1_mask = Vec::with_capacity(h * w * s1_doys.len());
            for &class in &truth {
                let p = if spec.pixel_variation > 0.0 {
                    [(); 3].map(|_| variation.sample(&mut rng))
                } else {
                    [0.0; 3]
                };
                for (mi, m) in Modality::ALL.into_iter().enumerate() {
                    let doys = if mi == 0 { &s2_doys } else { &s1_doys };
                    let (scale, shift) = sensor_scale(m);
                    let (values, mask) = if mi == 0 {
                        (&mut s2_values, &mut s2_mask)
                    } else {
                        (&mut s1_values, &mut s1_mask)
                    };
                    for &d in doys {
                        let t = f64::from(d) / 366.0;
                        for curve in &curves[class as usize][mi] {
                            let v = curve.perturbed(p).at(t)
                                + if spec.noise_std > 0.0 {
                                    noise.sample(&mut rng)
                                } else {
                                    0.0
                                };
                            values.push((v * scale + shift) as f32);
                        }
                        mask.push(rng.gen::<f64>() >= spec.gap_prob);
                    }
                }
            }
            Ok(RawTile {
                meta: TileMeta {
                    tile_id: format!("T{ti:03}"),
                    height: h,
                    width: w,
                    year: spec.year,
                    geo: GeoTransform {
                        origin_x: ((ti % per_row) * w) as f64 * spec.pixel_size,
                        origin_y: -(((ti / per_row) * h) as f64) * spec.pixel_size,
                        pixel_size: spec.pixel_size,
                        crs: 32630,
                    },
                    s2_doys,
                    s1_doys,
                },
                s2_values,
                s1_values,
                s2_mask,
                s1_mask,
                truth: Some(truth),
            })
        })
        .collect()
}

/// Generates the corpus and writes it as a tile store plus `synth.json`.
pub fn write_corpus(spec: &SynthSpec, root: &Path) -> Result<Vec<RawTile>> {
    let tiles = generate(spec)?;
    crate::binio::create_dir_all(root)?;
    for t in &tiles {
        t.write(root)?;
    }
    let json = serde_json::to_string_pretty(spec)?;
    crate::binio::write_atomic(&root.join("synth.json"), json.as_bytes())?;
    Ok(tiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> SynthSpec {
        SynthSpec {
            tiles: 2,
            height: 6,
            width: 5,
            s2_obs: 20,
            s1_obs: 12,
            block_size: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn zero_gap_probability_keeps_everything() {
        let tiles = generate(&SynthSpec {
            gap_prob: 0.0,
            ..small()
        })
        .unwrap();
        for t in &tiles {
            assert!(t.s2_mask.iter().all(|&m| m));
            assert!(t.s1_mask.iter().all(|&m| m));
        }
    }

    #[test]
    fn seed_fixed_corpus_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(&small(), a.path()).unwrap();
        write_corpus(&small(), b.path()).unwrap();
        for t in ["T000", "T001"] {
            for f in ["pixels.bin", "tile.json", "truth.bin"] {
                let x = std::fs::read(a.path().join(t).join(f)).unwrap();
                let y = std::fs::read(b.path().join(t).join(f)).unwrap();
                assert_eq!(x, y, "{t}/{f}");
            }
        }
        let other = generate(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(other[0].s2_values, generate(&small()).unwrap()[0].s2_values);
    }

    #[test]
    fn two_class_truth_has_two_values() {
        let spec = SynthSpec {
            classes: 2,
            tiles: 3,
            height: 16,
            width: 16,
            block_size: 2,
            ..small()
        };
        let values: BTreeSet<u8> = generate(&spec)
            .unwrap()
            .iter()
            .flat_map(|t| t.truth.clone().unwrap())
            .collect();
        assert_eq!(values, BTreeSet::from([0, 1]));
    }

    #[test]
    fn classes_form_blocks_and_tiles_tile_the_plane() {
        let tiles = generate(&small()).unwrap();
        let t = &tiles[0];
        let truth = t.truth.as_ref().unwrap();
        for r in 0..6 {
            for c in 0..5 {
                let anchor = truth[(r / 3 * 3) * 5 + c / 3 * 3];
                assert_eq!(truth[r * 5 + c], anchor);
            }
        }
        assert_eq!(tiles[1].meta.geo.origin_x, 50.0);
        assert_eq!(tiles[1].meta.geo.origin_y, 0.0);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&SynthSpec {
            gap_prob: 1.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthSpec { classes: 0, ..small() }).is_err());
        assert!(generate(&SynthSpec {
            pixel_variation: -0.1,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn pixel_variation_separates_same_class_pixels() {
        let spec = SynthSpec {
            noise_std: 0.0,
            classes: 1,
            tiles: 1,
            ..small()
        };
        let per_pixel = 20 * 10;
        let distinct = |spec: &SynthSpec| {
            let t = &generate(spec).unwrap()[0];
            t.s2_values
                .chunks(per_pixel)
                .map(|c| format!("{c:?}"))
                .collect::<BTreeSet<_>>()
                .len()
        };
        assert_eq!(distinct(&spec), 1);
        assert_eq!(
            distinct(&SynthSpec {
                pixel_variation: 0.1,
                ..spec
            }),
            30
        );
    }
}
