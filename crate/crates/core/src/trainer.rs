//! Pretraining loop: AdamW with linear warmup and cosine decay, global-norm
//! gradient clipping, mixup batches, effective-rank telemetry, JSON-lines
//! logs and resumable checkpoints.

use std::f64::consts::PI;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpixel::{standardize, GlobalStats, Modality, SampledView};
use crate::encoder::{
    BnBatchStats, BranchInput, Checkpoint, CheckpointMeta, EncoderConfig, Mode, Model, ModelBatch, MomentState,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix};
use crate::objective::{mix_views, objective_graph, LossBreakdown, ObjectiveConfig};
use crate::shuffle::{load_stats, read_batches, PairRecord, ShuffleManifest};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    /// Cap on optimizer steps; 0 means one full pass per epoch.
    pub total_steps: u64,
    pub epochs: usize,
    pub lambda_bt: f64,
    pub lambda_mix: f64,
    pub alpha_a: f64,
    pub alpha_b: f64,
    pub lambda_scaled_mixup: bool,
    /// Disables the mixup term and the mixed view altogether.
    pub mixup: bool,
    pub seed: u64,
    /// RankMe is logged every this many steps, on full batches only.
    pub rankme_every: u64,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.002,
            weight_decay: 1e-6,
            warmup_fraction: 0.10,
            grad_clip_norm: 2.0,
            batch_size: 256,
            total_steps: 0,
            epochs: 1,
            lambda_bt: 5e-3,
            lambda_mix: 1.0,
            alpha_a: 1.0,
            alpha_b: 1.0,
            lambda_scaled_mixup: false,
            mixup: true,
            seed: 0,
            rankme_every: 50,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.base_lr,
            self.grad_clip_norm,
            self.lambda_bt,
            self.alpha_a,
            self.alpha_b,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.weight_decay < 0.0 || self.lambda_mix < 0.0 {
            return Err(Error::Config(
                "learning rate, clip norm, lambdas and alphas must be positive".into(),
            ));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config("warmup_fraction must be in (0, 1)".into()));
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(Error::Config("batch_size must be >= 2 and epochs >= 1".into()));
        }
        self.encoder.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            lambda_bt: self.lambda_bt,
            lambda_mix: if self.mixup { self.lambda_mix } else { 0.0 },
            alpha_a: self.alpha_a,
            alpha_b: self.alpha_b,
            lambda_scaled_mixup: self.lambda_scaled_mixup,
        }
    }

    /// Reads a JSON or (by `.toml` extension) TOML file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            serde_json::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn warmup_steps(&self, total: u64) -> u64 {
        ((self.warmup_fraction * total as f64).round() as u64).clamp(1, total.max(1))
    }
}

/// Learning rate at a (possibly fractional) step.
pub fn lr_at_f(t: f64, base_lr: f64, warmup: u64, total: u64) -> f64 {
    let w = warmup as f64;
    if t < w {
        return base_lr * t / w;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = ((t - w) / (total - warmup) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total`.
pub fn lr_at(step: u64, total: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > total {
        return Err(Error::OutOfRange {
            value: step as f64,
            min: 0.0,
            max: total as f64,
        });
    }
    Ok(lr_at_f(step as f64, cfg.base_lr, cfg.warmup_steps(total), total))
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_update(params: &mut [Matrix], grads: &[Matrix], state: &mut MomentState, lr: f64, weight_decay: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * weight_decay * *p;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        });
    }
}

/// Normalized entropy of the singular-value distribution of `z`.
pub fn rankme(z: &Array2<f64>) -> Result<f64> {
    let (n, d) = z.dim();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if z.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateInput("all-zero embedding matrix".into()));
    }
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateInput("non-finite embedding matrix".into()));
    }
    if d < 2 {
        return Ok(0.0);
    }
    let m = DMatrix::from_row_iterator(n, d, z.iter().copied());
    let sv = m.singular_values();
    let total: f64 = sv.iter().sum();
    let h: f64 = sv
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok((h / (d as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub lr: f64,
    pub l_bt: f64,
    pub l_mix: f64,
    pub l_total: f64,
    pub invariance: f64,
    pub redundancy: f64,
    pub alpha: f64,
    pub grad_norm: f64,
    pub rankme_proj: Option<f64>,
    pub rankme_repr: Option<f64>,
    pub wall_ms: f64,
}

fn standardized(views: &[&SampledView], stats: &GlobalStats, m: Modality) -> Result<Vec<SampledView>> {
    views.iter().map(|v| standardize(v, stats.get(m))).collect()
}

/// Standardized model inputs for views A and B of a batch of records.
pub fn record_batches(records: &[PairRecord], stats: &GlobalStats) -> Result<(ModelBatch, ModelBatch)> {
    let side = |pick: fn(&PairRecord, Modality) -> &SampledView| -> Result<ModelBatch> {
        let s2 = standardized(
            &records.iter().map(|r| pick(r, Modality::S2)).collect::<Vec<_>>(),
            stats,
            Modality::S2,
        )?;
        let s1 = standardized(
            &records.iter().map(|r| pick(r, Modality::S1)).collect::<Vec<_>>(),
            stats,
            Modality::S1,
        )?;
        ModelBatch::from_views(&s2.iter().collect::<Vec<_>>(), &s1.iter().collect::<Vec<_>>())
    };
    Ok((side(|r, m| r.views(m).0)?, side(|r, m| r.views(m).1)?))
}

/// The mixed and shuffled inputs for `alpha` and `perm`.
pub fn mix_batches(a: &ModelBatch, b: &ModelBatch, alpha: f64, perm: &[usize]) -> Result<(ModelBatch, ModelBatch)> {
    let mix = |x: &BranchInput, y: &BranchInput| -> Result<(BranchInput, BranchInput)> {
        let (vm, vs) = mix_views(&x.values, &y.values, alpha, perm, x.seq_len)?;
        let (dm, ds) = mix_views(&x.doy, &y.doy, alpha, perm, x.seq_len)?;
        Ok((
            BranchInput {
                values: vm,
                doy: dm,
                seq_len: x.seq_len,
            },
            BranchInput {
                values: vs,
                doy: ds,
                seq_len: x.seq_len,
            },
        ))
    };
    let (s2m, s2s) = mix(&a.s2, &b.s2)?;
    let (s1m, s1s) = mix(&a.s1, &b.s1)?;
    Ok((ModelBatch { s2: s2m, s1: s1m }, ModelBatch { s2: s2s, s1: s1s }))
}

/// Owns the model, optimizer state and step counter of one run.
pub struct Trainer {
    pub model: Model,
    pub opt: MomentState,
    pub cfg: TrainConfig,
    pub stats: GlobalStats,
    pub step: u64,
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, stats: GlobalStats, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        stats.validate()?;
        let model = Model::new(cfg.encoder.clone(), cfg.seed)?;
        let opt = MomentState::zeros(model.params());
        Ok(Self {
            model,
            opt,
            cfg,
            stats,
            step: 0,
            total_steps,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: TrainConfig, total_steps: u64) -> Result<Self> {
        cfg.validate()?;
        if ck.meta.config != cfg.encoder {
            return Err(Error::Config(
                "checkpoint encoder config differs from the training config".into(),
            ));
        }
        let opt = ck.optimizer.unwrap_or_else(|| MomentState::zeros(ck.model.params()));
        Ok(Self {
            model: ck.model,
            opt,
            cfg,
            stats: ck.meta.stats,
            step: ck.meta.step,
            total_steps,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: CheckpointMeta {
                config: self.cfg.encoder.clone(),
                stats: self.stats.clone(),
                step: self.step,
                train: Some(serde_json::to_value(&self.cfg)?),
            },
            model: self.model.clone(),
            optimizer: Some(self.opt.clone()),
        })
    }

    /// Mixing coefficient and permutation for a step; a pure function of
    /// the seed and step so resumed runs see the same draws.
    fn step_draws(&self, n: usize) -> Result<(f64, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.step + 1);
        let alpha = self.cfg.objective().sample_alpha(&mut rng)?;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Ok((alpha, perm))
    }

    /// Loss and raw parameter gradients for one batch, without touching the
    /// parameters, optimizer or normalization buffers.
    pub fn loss_and_grads(&self, records: &[PairRecord], with_rankme: bool) -> Result<StepResult> {
        let n = records.len();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let (a, b) = record_batches(records, &self.stats)?;
        let (alpha, perm) = if self.cfg.mixup {
            self.step_draws(n)?
        } else {
            (1.0, (0..n).collect())
        };
        let mixed = if self.cfg.mixup {
            Some(mix_batches(&a, &b, alpha, &perm)?.0)
        } else {
            None
        };
        let mut parts = vec![&a, &b];
        parts.extend(mixed.as_ref());
        let input = ModelBatch::concat(&parts)?;

        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let z = self.model.encode_graph(&mut g, &bound, &input, Mode::Train)?;
        let mut proj = Vec::new();
        let mut bn_stats = Vec::new();
        for i in 0..parts.len() {
            let zi = g.slice_rows(z, i * n, n);
            let p = self.model.project_graph(&mut g, &bound, zi, Mode::Train)?;
            proj.push(p.out);
            bn_stats.push(p.bn_stats);
        }
        let pm = if self.cfg.mixup { proj[2] } else { proj[0] };
        let loss =
            objective_graph(&mut g, proj[0], proj[1], pm, &perm, alpha, &self.cfg.objective()).map_err(
                |e| match e {
                    Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
                        step: self.step,
                        detail,
                    },
                    other => other,
                },
            )?;

        let (rankme_proj, rankme_repr) = if with_rankme {
            let za = g.value(z).slice(ndarray::s![0..n, ..]).to_owned();
            (rankme(g.value(proj[0])).ok(), rankme(&za).ok())
        } else {
            (None, None)
        };

        g.backward(loss.total);
        let names = self.model.params().names();
        let mut grads = Vec::with_capacity(names.len());
        for (i, v) in bound.vars().iter().enumerate() {
            let grad = match g.grad(*v) {
                Some(gr) => gr.clone(),
                None => Array2::zeros(self.model.params().values()[i].dim()),
            };
            if !grad.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFiniteGradient(names[i].clone()));
            }
            grads.push(grad);
        }
        Ok(StepResult {
            loss: loss.breakdown,
            grads,
            bn_stats,
            rankme_proj,
            rankme_repr,
        })
    }

    /// Forward on views A, B and the mixed view, backward, clip, update.
    pub fn train_step(&mut self, records: &[PairRecord], with_rankme: bool) -> Result<TrainLogRecord> {
        let start = Instant::now();
        let StepResult {
            loss,
            mut grads,
            bn_stats,
            rankme_proj,
            rankme_repr,
        } = self.loss_and_grads(records, with_rankme)?;
        let grad_norm = clip_global_norm(&mut grads, self.cfg.grad_clip_norm);
        let lr = lr_at(self.step.min(self.total_steps), self.total_steps, &self.cfg)?;
        adamw_update(
            self.model.params_mut().values_mut(),
            &grads,
            &mut self.opt,
            lr,
            self.cfg.weight_decay,
        );
        for s in &bn_stats {
            self.model.update_bn(s);
        }

        let record = TrainLogRecord {
            step: self.step,
            lr,
            l_bt: loss.l_bt,
            l_mix: loss.l_mix,
            l_total: loss.l_total,
            invariance: loss.invariance,
            redundancy: loss.redundancy,
            alpha: loss.alpha,
            grad_norm,
            rankme_proj,
            rankme_repr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(record)
    }
}

pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: Vec<Matrix>,
    /// Per projected view, one entry per batch-norm layer.
    pub bn_stats: Vec<Vec<BnBatchStats>>,
    pub rankme_proj: Option<f64>,
    pub rankme_repr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub records: Vec<TrainLogRecord>,
    pub final_checkpoint: PathBuf,
}

/// Number of optimizer steps a run over `manifest` will take.
pub fn planned_steps(manifest: &ShuffleManifest, cfg: &TrainConfig) -> u64 {
    let total = manifest.total as usize;
    let mut per_epoch = total / cfg.batch_size;
    if total % cfg.batch_size >= 2 {
        per_epoch += 1;
    }
    let all = (per_epoch * cfg.epochs) as u64;
    if cfg.total_steps > 0 {
        all.min(cfg.total_steps)
    } else {
        all
    }
}

/// Trains over the pair store in `data`, writing logs and checkpoints to
/// `out`. With `resume`, continues from that checkpoint's step, skipping the
/// batches it has already consumed.
pub fn run_training(data: &Path, cfg: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = ShuffleManifest::load(data)?;
    let total = planned_steps(&manifest, cfg);
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(Checkpoint::load(p)?, cfg.clone(), total)?,
        None => Trainer::new(cfg.clone(), load_stats(data)?, total)?,
    };
    crate::binio::create_dir_all(out)?;
    let log_path = out.join(LOG_FILE);
    let log_file = if resume.is_some() {
        OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);

    let (tx, rx) = sync_channel::<Result<Vec<PairRecord>>>(2);
    let reader_dir = data.to_path_buf();
    let (batch_size, epochs) = (cfg.batch_size, cfg.epochs);
    let skip = trainer.step;
    let reader = std::thread::spawn(move || {
        let mut produced = 0u64;
        for _ in 0..epochs {
            let batches = match read_batches(&reader_dir, batch_size) {
                Ok(b) => b,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            };
            for batch in batches {
                if matches!(&batch, Ok(b) if b.len() < 2) {
                    continue;
                }
                produced += 1;
                if produced <= skip {
                    continue;
                }
                if tx.send(batch).is_err() {
                    return;
                }
            }
        }
    });

    let mut records = Vec::new();
    while trainer.step < total {
        let Ok(batch) = rx.recv() else { break };
        let batch = batch?;
        let step = trainer.step;
        // a short final batch would cap the spectrum and is not comparable
        let with_rankme = batch.len() == cfg.batch_size && (step % cfg.rankme_every.max(1) == 0 || step + 1 == total);
        let rec = trainer.train_step(&batch, with_rankme)?;
        serde_json::to_writer(&mut log, &rec)?;
        log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        if step % 10 == 0 {
            info!("step {step}/{total} loss {:.4} lr {:.2e}", rec.l_total, rec.lr);
        }
        records.push(rec);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < total {
            trainer
                .checkpoint()?
                .save(&out.join(format!("step-{:06}.ckpt", trainer.step)))?;
        }
    }
    drop(rx);
    let _ = reader.join();
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if trainer.step < total {
        warn!("data ran out after {} of {total} steps", trainer.step);
    }
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint()?.save(&final_checkpoint)?;
    Ok(TrainSummary {
        steps: trainer.step,
        records,
        final_checkpoint,
    })
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn cfg(total: u64) -> (TrainConfig, u64) {
        (TrainConfig::default(), total)
    }

    #[test]
    fn schedule_endpoints() {
        let (c, total) = cfg(1000);
        let w = c.warmup_steps(total);
        assert_eq!(w, 100);
        assert_eq!(lr_at(0, total, &c).unwrap(), 0.0);
        assert_eq!(lr_at(w, total, &c).unwrap(), c.base_lr);
        assert!(lr_at(total, total, &c).unwrap().abs() < 1e-18);
        assert!(lr_at(total + 1, total, &c).is_err());
        let left = lr_at_f(w as f64 - 1e-9, c.base_lr, w, total);
        let right = lr_at_f(w as f64 + 1e-9, c.base_lr, w, total);
        assert!((left - c.base_lr).abs() <= 1e-12 && (right - c.base_lr).abs() <= 1e-12);
        assert!((lr_at(550, total, &c).unwrap() - c.base_lr * 0.5).abs() < 1e-15);
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let mut g = vec![array![[3.0, 0.0]], array![[0.0], [4.0]]];
        let norm = clip_global_norm(&mut g, 2.5);
        assert_eq!(norm, 5.0);
        assert_eq!(g[0], array![[1.5, 0.0]]);
        assert_eq!(g[1], array![[0.0], [2.0]]);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 2.0);
        assert_eq!(small[0], array![[0.1]]);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![array![[1.0, -2.0]]];
        let g = vec![array![[0.0, 0.0]]];
        let mut st = MomentState {
            t: 0,
            m: vec![Array2::zeros((1, 2))],
            v: vec![Array2::zeros((1, 2))],
        };
        adamw_update(&mut p, &g, &mut st, 0.1, 0.0);
        assert_eq!(p[0], array![[1.0, -2.0]]);
        adamw_update(&mut p, &g, &mut st, 0.1, 0.5);
        assert!((p[0][[0, 0]] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = vec![array![[1.0, 1.0]]];
        let g = vec![array![[0.3, -5.0]]];
        let mut st = MomentState {
            t: 0,
            m: vec![Array2::zeros((1, 2))],
            v: vec![Array2::zeros((1, 2))],
        };
        adamw_update(&mut p, &g, &mut st, 0.01, 0.0);
        assert!((p[0][[0, 0]] - 0.99).abs() < 1e-9);
        assert!((p[0][[0, 1]] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn rankme_examples() {
        assert!((rankme(&Array2::eye(4)).unwrap() - 1.0).abs() < 1e-12);
        let r1 = array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [-1.0, -2.0, -3.0]];
        assert!(rankme(&r1).unwrap().abs() < 1e-7);
        let expect = {
            let p = [2.0 / 3.0, 1.0 / 3.0];
            -p.iter().map(|p: &f64| p * p.ln()).sum::<f64>() / 2f64.ln()
        };
        assert!((rankme(&array![[2.0, 0.0], [0.0, 1.0]]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.9183).abs() < 1e-4);
        assert!(matches!(rankme(&Array2::zeros((3, 3))), Err(Error::DegenerateInput(_))));
    }

    proptest! {
        #[test]
        fn rankme_bounded_and_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array2::from_shape_simple_fn((6, 4), || rng.gen_range(-1.0..1.0));
            let a = rankme(&z).unwrap();
            let b = rankme(&(&z * c)).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn clipping_never_increases_norm(vals in proptest::collection::vec(-10.0f64..10.0, 1..20), max in 0.1f64..5.0) {
            let before = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut g = vec![Array2::from_shape_vec((1, vals.len()), vals).unwrap()];
            clip_global_norm(&mut g, max);
            let after = g[0].iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(after <= before + 1e-12);
            prop_assert!(after <= max + 1e-12);
        }
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let c = TrainConfig {
            batch_size: 64,
            seed: 9,
            ..Default::default()
        };
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(TrainConfig::load(&j).unwrap(), c);
        let t = dir.path().join("c.toml");
        std::fs::write(&t, "batch_size = 32\nseed = 4\n[encoder]\nd_model = 16\n").unwrap();
        let tc = TrainConfig::load(&t).unwrap();
        assert_eq!(
            (tc.batch_size, tc.seed, tc.encoder.d_model, tc.base_lr),
            (32, 4, 16, 0.002)
        );
        std::fs::write(&t, "warmup_fraction = 1.5\n").unwrap();
        assert!(TrainConfig::load(&t).is_err());
    }
}
