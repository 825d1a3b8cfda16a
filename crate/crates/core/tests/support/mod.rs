//! Helpers shared by the gradient check and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use dpix_core::downstream::{f1, split_indices, train_probe, Average, LabeledSet, ProbeConfig, Targets, Task};
use dpix_core::embstore::{dequantize, infer_tile, quantize, EmbeddingMap, InferConfig, QuantizedMap};
use dpix_core::encoder::{Checkpoint, EncoderConfig, Model};
use dpix_core::geo::GeoTransform;
use dpix_core::shuffle::{
    build_pairs, global_permute, load_stats, read_batches, BuildConfig, PairRecord, PermuteConfig,
};
use dpix_core::synthdata::{generate, write_corpus, SynthSpec};
use dpix_core::tilestore::{list_tiles, RawTile, TileMeta};
use dpix_core::trainer::{run_training, TrainConfig, TrainLogRecord, Trainer};

const FD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
const FD_PER_TENSOR: usize = 6;

fn tiny_trainer(lambda_scaled_mixup: bool) -> (Trainer, Vec<PairRecord>) {
    let src = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        tiles: 1,
        height: 4,
        width: 4,
        seed: 5,
        ..SynthSpec::default()
    };
    write_corpus(&spec, src.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let bc = BuildConfig {
        seq_len: 4,
        seed: 1,
        ..Default::default()
    };
    build_pairs(&list_tiles(src.path()).unwrap(), &bc, out.path()).unwrap();
    let batch = read_batches(out.path(), 4).unwrap().next().unwrap().unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 3,
        lambda_scaled_mixup,
        encoder: EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            seq_len: 4,
            d_repr: 8,
            projector_hidden_layers: 1,
            projector_width: 8,
            ffn_width: 16,
            branch_width: 8,
            doy_hidden: 4,
            quantize: false,
            use_s1: true,
        },
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(cfg, load_stats(out.path()).unwrap(), 10).unwrap();
    (trainer, batch)
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients
/// per parameter group, over a spread of entries from every tensor.
pub fn fd_check(lambda_scaled_mixup: bool) -> BTreeMap<String, f64> {
    let (mut t, batch) = tiny_trainer(lambda_scaled_mixup);
    let analytic = t.loss_and_grads(&batch, false).unwrap().grads;
    let mut worst = BTreeMap::new();
    let names = t.model.params().names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let len = t.model.params().values()[i].len();
        let stride = (len / FD_PER_TENSOR).max(1);
        let mut err: f64 = 0.0;
        for k in (0..len).step_by(stride).take(FD_PER_TENSOR) {
            let orig = t.model.params().values()[i].as_slice().unwrap()[k];
            let mut loss_at = |v: f64| {
                t.model.params_mut().values_mut()[i].as_slice_mut().unwrap()[k] = v;
                t.loss_and_grads(&batch, false).unwrap().loss.l_total
            };
            // shrink the stencil while it straddles a ReLU kink, detected by
            // the h and 2h estimates disagreeing
            let mut numeric = 0.0;
            for h in FD_STEPS {
                let c1 = (loss_at(orig + h) - loss_at(orig - h)) / (2.0 * h);
                let c2 = (loss_at(orig + 2.0 * h) - loss_at(orig - 2.0 * h)) / (4.0 * h);
                numeric = c1;
                if (c1 - c2).abs() <= 1e-4 * c1.abs().max(c2.abs()) + 1e-8 {
                    break;
                }
            }
            loss_at(orig);
            let a = analytic[i].as_slice().unwrap()[k];
            err = err.max(rel_err(a, numeric));
        }
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        let e = worst.entry(group).or_insert(0.0f64);
        *e = e.max(err);
    }
    worst
}

/// Desk-scale pretraining setup: the last generated tile is held out for
/// evaluation, the rest feed the pair corpus.
#[derive(Clone, Debug)]
pub struct ToySetup {
    pub data: SynthSpec,
    pub seq_len: usize,
    pub train: TrainConfig,
    /// Labelled pixels in each of the probe's train and validation splits.
    pub probe_labels: usize,
}

#[derive(Clone, Debug)]
pub struct ToyOutcome {
    pub pretrain_pixels: u64,
    pub train_secs: f64,
    pub log: Vec<TrainLogRecord>,
    pub trained: EvalResult,
    pub random: EvalResult,
    /// Largest `|dequantized − x| / (scale/2)` over the trained evaluation map.
    pub quant_error_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    /// Mean cosine similarity between two independent temporal draws.
    pub cosine: f64,
    pub f1: f64,
    pub f1_quantized: f64,
    pub map: EmbeddingMap,
}

pub fn mean_cosine(a: &EmbeddingMap, b: &EmbeddingMap) -> f64 {
    let (a, b) = (a.valid_rows(), b.valid_rows());
    let total: f64 = a
        .outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt()))
        .sum();
    total / a.nrows() as f64
}

/// Macro-F1 on the test split of a fixed train/validation/test partition.
pub fn probe_f1(map: &EmbeddingMap, truth: &[u8], labels: usize, classes: usize) -> f64 {
    let valid: Vec<usize> = map
        .valid
        .iter()
        .enumerate()
        .filter(|(_, &v)| v)
        .map(|(i, _)| i)
        .collect();
    let y = valid.iter().map(|&i| usize::from(truth[i])).collect();
    let set = LabeledSet::new(map.valid_rows(), Targets::Classes(y)).unwrap();
    let f = labels as f64 / set.len() as f64;
    let parts = split_indices(set.len(), &[f, f, 1.0 - 2.0 * f], 7);
    let (train, val, test) = (set.subset(&parts[0]), set.subset(&parts[1]), set.subset(&parts[2]));
    let cfg = ProbeConfig {
        task: Task::Classify { classes },
        ..ProbeConfig::default()
    };
    let probe = train_probe(&train, &val, &cfg).unwrap();
    let Targets::Classes(truth) = &test.targets else {
        unreachable!()
    };
    f1(&probe.predict_classes(&test.embeddings), truth, Average::Macro).unwrap()
}

fn evaluate(model: &Model, stats: &dpix_core::dpixel::GlobalStats, tile: &RawTile, setup: &ToySetup) -> EvalResult {
    let draw = |k| {
        infer_tile(
            model,
            stats,
            tile,
            &InferConfig {
                seed: 9,
                draw_offset: k,
                ..Default::default()
            },
        )
        .unwrap()
    };
    let (a, b) = (draw(0), draw(1));
    let truth = tile.truth.as_ref().unwrap();
    let classes = setup.data.classes;
    EvalResult {
        cosine: mean_cosine(&a, &b),
        f1: probe_f1(&a, truth, setup.probe_labels, classes),
        f1_quantized: probe_f1(&dequantize(&quantize(&a).unwrap()), truth, setup.probe_labels, classes),
        map: a,
    }
}

pub fn quant_error_ratio(map: &EmbeddingMap, q: &QuantizedMap) -> f64 {
    let back = dequantize(q);
    let mut worst = 0.0f64;
    for ((idx, &x), &y) in map.data.indexed_iter().zip(back.data.iter()) {
        worst = worst.max((y - x).abs() / (f64::from(q.scales[idx.2]) / 2.0));
    }
    worst
}

pub fn toy_run(setup: &ToySetup, work: &Path) -> ToyOutcome {
    let tiles = generate(&setup.data).unwrap();
    let (pretrain, held_out) = tiles.split_at(tiles.len() - 1);
    let src = work.join("tiles");
    let dirs: Vec<_> = pretrain.iter().map(|t| t.write(&src).unwrap()).collect();
    let pairs = work.join("pairs");
    let bc = BuildConfig {
        seq_len: setup.seq_len,
        seed: 2,
        ..Default::default()
    };
    let manifest = build_pairs(&dirs, &bc, &pairs).unwrap();
    global_permute(
        &pairs,
        &PermuteConfig {
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();

    let start = Instant::now();
    let summary = run_training(&pairs, &setup.train, &work.join("run"), None).unwrap();
    let train_secs = start.elapsed().as_secs_f64();

    let ck = Checkpoint::load(&summary.final_checkpoint).unwrap();
    let stats = load_stats(&pairs).unwrap();
    let random = Model::new(setup.train.encoder.clone(), setup.train.seed).unwrap();
    let trained = evaluate(&ck.model, &stats, &held_out[0], setup);
    let quant_error_ratio = quant_error_ratio(&trained.map, &quantize(&trained.map).unwrap());
    ToyOutcome {
        pretrain_pixels: manifest.total,
        train_secs,
        log: summary.records,
        random: evaluate(&random, &stats, &held_out[0], setup),
        trained,
        quant_error_ratio,
    }
}

/// Tile whose every value equals the pixel's global id, so views can be
/// traced back to their source.
pub fn id_tile(index: usize, h: usize, w: usize) -> RawTile {
    let (t2, t1) = (6, 5);
    let n = h * w;
    let id = |p: usize| (index * 10_000 + p) as f32;
    RawTile {
        meta: TileMeta {
            tile_id: format!("K{index:02}"),
            height: h,
            width: w,
            year: 2024,
            geo: GeoTransform {
                origin_x: (index * w) as f64 * 10.0,
                origin_y: 0.0,
                pixel_size: 10.0,
                crs: 32630,
            },
            s2_doys: vec![3, 40, 90, 150, 200, 300],
            s1_doys: vec![10, 70, 130, 190, 250],
        },
        s2_values: (0..n).flat_map(|p| std::iter::repeat_n(id(p), t2 * 10)).collect(),
        s1_values: (0..n).flat_map(|p| std::iter::repeat_n(-id(p), t1 * 2)).collect(),
        s2_mask: (0..n * t2).map(|i| i % 4 != 1).collect(),
        s1_mask: (0..n * t1).map(|i| i % 3 != 2).collect(),
        truth: None,
    }
}
