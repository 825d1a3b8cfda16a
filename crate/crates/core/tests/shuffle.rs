mod support;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dpix_core::shuffle::{
    build_pairs, global_permute, read_batches, read_chunk, BuildConfig, PermuteConfig, ShuffleManifest,
};
use dpix_core::synthdata::{write_corpus, SynthSpec};
use dpix_core::tilestore::{list_tiles, RawTile};
use dpix_core::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use support::id_tile;

fn write_tiles(root: &Path, tiles: &[RawTile]) -> Vec<PathBuf> {
    tiles.iter().map(|t| t.write(root).unwrap()).collect()
}

fn raw_records(dir: &Path) -> Vec<Vec<u8>> {
    let m = ShuffleManifest::load(dir).unwrap();
    m.chunk_paths(dir)
        .iter()
        .flat_map(|p| read_chunk(p).unwrap().records().map(<[u8]>::to_vec).collect::<Vec<_>>())
        .collect()
}

fn build(tiles: &[RawTile], len: usize, seed: u64) -> (tempfile::TempDir, tempfile::TempDir) {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let dirs = write_tiles(src.path(), tiles);
    let cfg = BuildConfig {
        seq_len: len,
        seed,
        chunk_records: 64,
        ..Default::default()
    };
    build_pairs(&dirs, &cfg, out.path()).unwrap();
    (src, out)
}

#[test]
fn two_tiles_of_nine_pixels_give_eighteen_records() {
    let src = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        tiles: 2,
        height: 3,
        width: 3,
        gap_prob: 0.0,
        ..SynthSpec::default()
    };
    write_corpus(&spec, src.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let m = build_pairs(&list_tiles(src.path()).unwrap(), &BuildConfig::default(), out.path()).unwrap();
    assert_eq!(m.total, 18);
    assert_eq!(m.tiles, vec!["T000", "T001"]);
    assert!(out.path().join("stats.json").exists());
}

#[test]
fn pixels_without_valid_observations_are_dropped() {
    let mut tile = id_tile(0, 2, 2);
    for v in &mut tile.s2_mask[0..6] {
        *v = false;
    }
    let (_src, out) = build(&[tile], 4, 1);
    let records: Vec<_> = read_batches(out.path(), 100)
        .unwrap()
        .flat_map(|b| b.unwrap())
        .collect();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| (r.location.row, r.location.col) != (0, 0)));

    let mut dead = id_tile(0, 1, 1);
    dead.s1_mask.iter_mut().for_each(|m| *m = false);
    let src = tempfile::tempdir().unwrap();
    let dirs = write_tiles(src.path(), &[dead]);
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(
        build_pairs(&dirs, &BuildConfig::default(), out.path()),
        Err(Error::EmptyCorpus)
    ));
}

#[test]
fn same_seed_builds_identical_chunks() {
    let tiles: Vec<_> = (0..3).map(|i| id_tile(i, 4, 5)).collect();
    let (_s1, a) = build(&tiles, 8, 42);
    let (_s2, b) = build(&tiles, 8, 42);
    let (_s3, c) = build(&tiles, 8, 43);
    let ma = ShuffleManifest::load(a.path()).unwrap();
    assert_eq!(ma, ShuffleManifest::load(b.path()).unwrap());
    for chunk in &ma.chunks {
        assert_eq!(
            fs::read(a.path().join(&chunk.file)).unwrap(),
            fs::read(b.path().join(&chunk.file)).unwrap()
        );
    }
    assert_ne!(raw_records(a.path()), raw_records(c.path()));
}

#[test]
fn permutation_preserves_record_multiset_and_pairs() {
    let tiles: Vec<_> = (0..4).map(|i| id_tile(i, 10, 12)).collect();
    let (_src, out) = build(&tiles, 5, 7);
    let mut before = raw_records(out.path());
    let cfg = PermuteConfig {
        seed: 99,
        memory_records: 37,
        chunk_records: 50,
    };
    let m = global_permute(out.path(), &cfg).unwrap();
    assert!(m.permuted);
    assert_eq!(m.total, 480);
    let mut after = raw_records(out.path());
    assert_ne!(before, after);
    before.sort();
    after.sort();
    assert_eq!(before, after);

    // no stale chunks or scratch files remain
    let files = fs::read_dir(out.path()).unwrap().count();
    assert_eq!(files, m.chunks.len() + 2);

    for r in read_batches(out.path(), 64).unwrap().flat_map(|b| b.unwrap()) {
        let w = 12;
        let id = f64::from(r.location.tile * 10_000 + r.location.row * w + r.location.col);
        for v in [&r.s2_a, &r.s2_b] {
            assert!(v.values.iter().all(|&x| x == id));
        }
        for v in [&r.s1_a, &r.s1_b] {
            assert!(v.values.iter().all(|&x| x == -id));
        }
    }
}

#[test]
fn marked_record_position_is_uniform() {
    let tile = id_tile(0, 2, 5);
    let (_src, out) = build(&[tile], 2, 0);
    let n = 10;
    let draws = 2000;
    let mut counts = vec![0usize; n];
    for seed in 0..draws {
        // tiny budget forces the scatter and recursive paths
        let cfg = PermuteConfig {
            seed,
            memory_records: 3,
            chunk_records: 4,
        };
        global_permute(out.path(), &cfg).unwrap();
        let recs: Vec<_> = read_batches(out.path(), n).unwrap().flat_map(|b| b.unwrap()).collect();
        let pos = recs
            .iter()
            .position(|r| (r.location.row, r.location.col) == (0, 0))
            .unwrap();
        counts[pos] += 1;
    }
    let expected = draws as f64 / n as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat} p={p} counts={counts:?}");
}

#[test]
fn shuffled_batches_mix_tiles() {
    let k = 8;
    let tiles: Vec<_> = (0..k).map(|i| id_tile(i, 10, 10)).collect();
    let (_src, out) = build(&tiles, 2, 3);

    let same_tile_fraction = |dir: &Path| {
        let (mut same, mut pairs) = (0usize, 0usize);
        for batch in read_batches(dir, 32).unwrap() {
            let batch = batch.unwrap();
            for w in batch.windows(2) {
                pairs += 1;
                same += usize::from(w[0].location.tile == w[1].location.tile);
            }
        }
        (same, pairs)
    };

    let (same, pairs) = same_tile_fraction(out.path());
    assert!(same as f64 / pairs as f64 > 0.9);

    global_permute(
        out.path(),
        &PermuteConfig {
            seed: 11,
            memory_records: 150,
            chunk_records: 100,
        },
    )
    .unwrap();
    let (same, pairs) = same_tile_fraction(out.path());
    let p = 1.0 / k as f64;
    let sigma = (pairs as f64 * p * (1.0 - p)).sqrt();
    let dev = (same as f64 - pairs as f64 * p).abs();
    assert!(dev <= 3.0 * sigma, "{same}/{pairs} same-tile neighbours");
}

#[test]
fn tile_counts_survive_permutation() {
    let tiles: Vec<_> = (0..3).map(|i| id_tile(i, 3, 4)).collect();
    let (_src, out) = build(&tiles, 3, 2);
    global_permute(
        out.path(),
        &PermuteConfig {
            seed: 1,
            memory_records: 5,
            chunk_records: 7,
        },
    )
    .unwrap();
    let mut per_tile = BTreeMap::new();
    for r in read_batches(out.path(), 9).unwrap().flat_map(|b| b.unwrap()) {
        *per_tile.entry(r.location.tile).or_insert(0) += 1;
    }
    assert_eq!(per_tile, BTreeMap::from([(0, 12), (1, 12), (2, 12)]));
}
