//! Heads and metrics over frozen embeddings: an MLP probe for
//! classification or regression, a k-nearest-neighbour classifier, and the
//! evaluation metrics (F1, RMSE / R² / bias, silhouette, Davies-Bouldin).

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::MomentState;
use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix, Var};
use crate::trainer::adamw_update;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify { classes: usize },
    Regress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: Vec<usize>,
    pub task: Task,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 128],
            task: Task::Classify { classes: 2 },
            lr: 0.002,
            weight_decay: 1e-6,
            epochs: 200,
            batch_size: 64,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub embeddings: Array2<f64>,
    pub targets: Targets,
}

impl LabeledSet {
    pub fn new(embeddings: Array2<f64>, targets: Targets) -> Result<Self> {
        if embeddings.nrows() != targets.len() {
            return Err(Error::LengthMismatch(embeddings.nrows(), targets.len()));
        }
        if !embeddings.iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateInput("non-finite embedding".into()));
        }
        if let Targets::Values(v) = &targets {
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::DegenerateInput("non-finite target".into()));
            }
        }
        Ok(Self { embeddings, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        };
        Self {
            embeddings: self.embeddings.select(Axis(0), idx),
            targets,
        }
    }
}

/// Shuffles `0..n` and cuts it into consecutive parts of the given
/// fractions; the last part takes the remainder.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::new();
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (start + (f * n as f64).round() as usize).min(n)
        };
        out.push(idx[start..end].to_vec());
        start = end;
    }
    out
}

/// Fitted MLP head with ReLU hidden layers. Inputs are standardized with
/// training-set statistics; regression targets likewise.
#[derive(Clone, Debug)]
pub struct Probe {
    pub task: Task,
    weights: Vec<(Matrix, Matrix)>,
    feat_mean: Array1<f64>,
    feat_std: Array1<f64>,
    target_mean: f64,
    target_std: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn column_moments(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

impl Probe {
    fn inputs(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.feat_mean) / &self.feat_std
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = self.inputs(x);
        for (i, (w, b)) in self.weights.iter().enumerate() {
            h = h.dot(w) + b;
            if i + 1 < self.weights.len() {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        h
    }

    pub fn predict_classes(&self, x: &Array2<f64>) -> Vec<usize> {
        self.forward(x)
            .outer_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }

    pub fn predict_values(&self, x: &Array2<f64>) -> Vec<f64> {
        self.forward(x)
            .column(0)
            .iter()
            .map(|v| v * self.target_std + self.target_mean)
            .collect()
    }

    /// Higher is better: macro F1 for classification, negative RMSE for
    /// regression.
    pub fn score(&self, set: &LabeledSet) -> Result<f64> {
        match &set.targets {
            Targets::Classes(c) => f1(&self.predict_classes(&set.embeddings), c, Average::Macro),
            Targets::Values(v) => Ok(-regression_metrics(&self.predict_values(&set.embeddings), v)?.rmse),
        }
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    it.enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

fn check_set(set: &LabeledSet, name: &'static str, task: Task, dim: usize) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptySplit(name));
    }
    if set.embeddings.ncols() != dim {
        return Err(Error::shape(format!(
            "{name} set has {} features, expected {dim}",
            set.embeddings.ncols()
        )));
    }
    match (task, &set.targets) {
        (Task::Classify { classes }, Targets::Classes(c)) => {
            if let Some(&bad) = c.iter().find(|&&l| l >= classes) {
                return Err(Error::OutOfRange {
                    value: bad as f64,
                    min: 0.0,
                    max: (classes - 1) as f64,
                });
            }
            Ok(())
        }
        (Task::Regress, Targets::Values(_)) => Ok(()),
        _ => Err(Error::Config(format!("{name} targets do not match the probe task"))),
    }
}

/// Trains a probe with AdamW on mini-batches, keeping the parameters with
/// the best validation score and stopping after `patience` epochs without
/// improvement.
pub fn train_probe(train: &LabeledSet, val: &LabeledSet, cfg: &ProbeConfig) -> Result<Probe> {
    if let Task::Classify { classes } = cfg.task {
        if classes < 2 {
            return Err(Error::Config("classification needs at least 2 classes".into()));
        }
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch_size, epochs and lr must be positive".into()));
    }
    let dim = train.embeddings.ncols();
    check_set(train, "train", cfg.task, dim)?;
    check_set(val, "validation", cfg.task, dim)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let out_dim = match cfg.task {
        Task::Classify { classes } => classes,
        Task::Regress => 1,
    };
    let mut widths = vec![dim];
    widths.extend(&cfg.hidden);
    widths.push(out_dim);
    let weights: Vec<(Matrix, Matrix)> = widths
        .windows(2)
        .map(|w| {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound);
            (
                Array2::from_shape_simple_fn((w[0], w[1]), || u.sample(&mut rng)),
                Array2::from_shape_simple_fn((1, w[1]), || u.sample(&mut rng)),
            )
        })
        .collect();
    let (feat_mean, feat_std) = column_moments(&train.embeddings);
    let (target_mean, target_std) = match &train.targets {
        Targets::Values(v) => {
            let a = Array1::from(v.clone());
            let s = a.std(0.0);
            (a.mean().expect("non-empty"), if s > 1e-12 { s } else { 1.0 })
        }
        Targets::Classes(_) => (0.0, 1.0),
    };
    let mut probe = Probe {
        task: cfg.task,
        weights,
        feat_mean,
        feat_std,
        target_mean,
        target_std,
        best_epoch: 0,
        epochs_run: 0,
    };
    let x = probe.inputs(&train.embeddings);
    let mut flat: Vec<Matrix> = probe.weights.iter().flat_map(|(w, b)| [w.clone(), b.clone()]).collect();
    let mut opt = MomentState {
        t: 0,
        m: flat.iter().map(|p| Array2::zeros(p.dim())).collect(),
        v: flat.iter().map(|p| Array2::zeros(p.dim())).collect(),
    };

    let mut best = (probe.score(val)?, probe.weights.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let mut g = Graph::new();
            let vars: Vec<Var> = flat.iter().map(|p| g.param(p.clone())).collect();
            let mut h = g.constant(xb);
            for (i, pair) in vars.chunks(2).enumerate() {
                let y = g.matmul(h, pair[0]);
                h = g.add_row(y, pair[1]);
                if 2 * (i + 1) < vars.len() {
                    h = g.relu(h);
                }
            }
            let loss = match &train.targets {
                Targets::Classes(c) => {
                    let labels: Vec<usize> = batch.iter().map(|&i| c[i]).collect();
                    g.softmax_cross_entropy(h, &labels)
                }
                Targets::Values(v) => {
                    let t = Array2::from_shape_fn((batch.len(), 1), |(r, _)| (v[batch[r]] - target_mean) / target_std);
                    let sse = g.weighted_sq_diff(h, t, None);
                    g.scale(sse, 1.0 / batch.len() as f64)
                }
            };
            if !g.scalar_value(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: epoch as u64,
                    detail: "probe loss".into(),
                });
            }
            g.backward(loss);
            let grads: Vec<Matrix> = vars
                .iter()
                .zip(&flat)
                .map(|(v, p)| g.grad(*v).cloned().unwrap_or_else(|| Array2::zeros(p.dim())))
                .collect();
            adamw_update(&mut flat, &grads, &mut opt, cfg.lr, cfg.weight_decay);
        }
        probe.weights = flat.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
        probe.epochs_run = epoch;
        let score = probe.score(val)?;
        if score > best.0 {
            best = (score, probe.weights.clone());
            probe.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    probe.weights = best.1;
    Ok(probe)
}

/// Majority vote over the `k` nearest stored points (Euclidean). Distance
/// ties are broken by insertion order, vote ties by the smallest class id.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnModel {
    points: Array2<f64>,
    labels: Vec<usize>,
    k: usize,
}

pub fn knn_fit(points: Array2<f64>, labels: Vec<usize>, k: usize) -> Result<KnnModel> {
    if points.nrows() == 0 {
        return Err(Error::EmptyModel);
    }
    if points.nrows() != labels.len() {
        return Err(Error::LengthMismatch(points.nrows(), labels.len()));
    }
    if k == 0 || k > labels.len() {
        return Err(Error::OutOfRange {
            value: k as f64,
            min: 1.0,
            max: labels.len() as f64,
        });
    }
    Ok(KnnModel { points, labels, k })
}

impl KnnModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn predict_one(&self, q: ndarray::ArrayView1<f64>) -> usize {
        let mut d: Vec<(f64, usize)> = self
            .points
            .outer_iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for &(_, i) in &d[..self.k] {
            *votes.entry(self.labels[i]).or_default() += 1;
        }
        // BTreeMap iterates ascending, and max_by_key keeps the last maximum,
        // so reverse to prefer the smallest id
        votes
            .into_iter()
            .rev()
            .max_by_key(|&(_, n)| n)
            .map(|(c, _)| c)
            .expect("k >= 1")
    }
}

pub fn knn_predict(model: &KnnModel, queries: &Array2<f64>) -> Result<Vec<usize>> {
    if model.is_empty() {
        return Err(Error::EmptyModel);
    }
    if queries.ncols() != model.points.ncols() {
        return Err(Error::shape(format!(
            "queries have {} features, model {}",
            queries.ncols(),
            model.points.ncols()
        )));
    }
    Ok(queries.outer_iter().map(|q| model.predict_one(q)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Average {
    Macro,
    Weighted,
}

/// Per-class F1 over the union of observed classes, averaged unweighted
/// (macro) or by true-class support (weighted).
pub fn f1(preds: &[usize], labels: &[usize], average: Average) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptySplit("labels"));
    }
    let classes: BTreeSet<usize> = preds.iter().chain(labels).copied().collect();
    let (mut sum, mut weight) = (0.0, 0.0);
    for &c in &classes {
        let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count() as f64;
        let support = labels.iter().filter(|&&l| l == c).count() as f64;
        let fn_ = support - tp;
        let denom = 2.0 * tp + fp + fn_;
        let score = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        let w = match average {
            Average::Macro => 1.0,
            Average::Weighted => support,
        };
        sum += w * score;
        weight += w;
    }
    Ok(if weight > 0.0 { sum / weight } else { 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub rmse: f64,
    pub r2: f64,
    pub mean_bias: f64,
}

/// RMSE, coefficient of determination and mean bias (`pred − target`).
/// R² is 1 for a perfect fit of constant targets and 0 otherwise when the
/// targets have no variance.
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<RegressionMetrics> {
    if preds.len() != targets.len() {
        return Err(Error::LengthMismatch(preds.len(), targets.len()));
    }
    if targets.is_empty() {
        return Err(Error::EmptySplit("targets"));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_res: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
    let ss_tot: f64 = targets.iter().map(|t| (t - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(RegressionMetrics {
        rmse: (ss_res / n).sqrt(),
        r2,
        mean_bias: preds.iter().zip(targets).map(|(p, t)| p - t).sum::<f64>() / n,
    })
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn clusters(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        out.entry(l).or_default().push(i);
    }
    out
}

/// Mean silhouette coefficient; points in singleton clusters score 0.
pub fn silhouette(points: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if points.nrows() != labels.len() {
        return Err(Error::LengthMismatch(points.nrows(), labels.len()));
    }
    let groups = clusters(labels);
    if groups.len() < 2 {
        return Err(Error::SingleCluster);
    }
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        let own = &groups[&li];
        if own.len() == 1 {
            continue;
        }
        let mean_to = |members: &[usize]| members.iter().map(|&j| dist(points.row(i), points.row(j))).sum::<f64>();
        let a = mean_to(own) / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .filter(|(&l, _)| l != li)
            .map(|(_, m)| mean_to(m) / m.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / labels.len() as f64)
}

/// Davies-Bouldin index with scatter measured as mean distance to the
/// centroid.
pub fn davies_bouldin(points: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if points.nrows() != labels.len() {
        return Err(Error::LengthMismatch(points.nrows(), labels.len()));
    }
    let groups = clusters(labels);
    if groups.len() < 2 {
        return Err(Error::SingleCluster);
    }
    let (ids, members): (Vec<usize>, Vec<Vec<usize>>) = groups.into_iter().unzip();
    let centroids: Vec<Array1<f64>> = members
        .iter()
        .map(|m| points.select(Axis(0), m).mean_axis(Axis(0)).expect("non-empty"))
        .collect();
    let scatter: Vec<f64> = members
        .iter()
        .zip(&centroids)
        .map(|(m, c)| m.iter().map(|&i| dist(points.row(i), c.view())).sum::<f64>() / m.len() as f64)
        .collect();
    let k = ids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in (0..k).filter(|&j| j != i) {
            let d = dist(centroids[i].view(), centroids[j].view());
            if d == 0.0 {
                return Err(Error::CoincidentCentroids(ids[i].min(ids[j]), ids[i].max(ids[j])));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand::Rng;

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0, 1, 2, 1], &[0, 1, 2, 1], Average::Macro).unwrap(), 1.0);
        assert_eq!(f1(&[1, 0, 1], &[0, 1, 0], Average::Macro).unwrap(), 0.0);
        // confusion rows = truth, cols = prediction:
        // [[2,1,0],[0,1,1],[1,0,2]]
        let labels = [0, 0, 0, 1, 1, 2, 2, 2];
        let preds = [0, 0, 1, 1, 2, 0, 2, 2];
        let per = [
            2.0 * 2.0 / (4.0 + 1.0 + 1.0),
            2.0 * 1.0 / (2.0 + 1.0 + 1.0),
            2.0 * 2.0 / (4.0 + 1.0 + 1.0),
        ];
        let macro_ = per.iter().sum::<f64>() / 3.0;
        let weighted = (3.0 * per[0] + 2.0 * per[1] + 3.0 * per[2]) / 8.0;
        assert!((f1(&preds, &labels, Average::Macro).unwrap() - macro_).abs() < 1e-15);
        assert!((f1(&preds, &labels, Average::Weighted).unwrap() - weighted).abs() < 1e-15);
        assert!(matches!(
            f1(&[0], &[0, 1], Average::Macro),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn regression_examples() {
        let t = [1.0, 2.0, 4.0];
        assert_eq!(
            regression_metrics(&t, &t).unwrap(),
            RegressionMetrics {
                rmse: 0.0,
                r2: 1.0,
                mean_bias: 0.0
            }
        );
        let m = regression_metrics(&[2.0, 3.0, 5.0], &t).unwrap();
        assert!((m.rmse - 1.0).abs() < 1e-15 && (m.mean_bias - 1.0).abs() < 1e-15);
    }

    #[test]
    fn silhouette_and_dbi_examples() {
        let pts = array![[0.0, 0.0], [0.0, 0.0], [3.0, 4.0], [3.0, 4.0]];
        assert_eq!(silhouette(&pts, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(davies_bouldin(&pts, &[0, 0, 1, 1]).unwrap(), 0.0);
        let line = array![[0.0], [1.0], [2.0], [3.0]];
        // regular tetrahedron: every pairwise distance equal, so a(i) == b(i)
        let tet = array![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
        assert!(silhouette(&tet, &[0, 0, 1, 1]).unwrap().abs() < 1e-15);
        let d = davies_bouldin(&line, &[0, 0, 1, 1]).unwrap();
        assert!((d - (0.5 + 0.5) / 2.0).abs() < 1e-15);
        assert!(matches!(silhouette(&line, &[1, 1, 1, 1]), Err(Error::SingleCluster)));
        assert!(matches!(
            davies_bouldin(&array![[0.0], [1.0], [1.0], [0.0]], &[0, 0, 1, 1]),
            Err(Error::CoincidentCentroids(0, 1))
        ));
        assert_eq!(silhouette(&array![[0.0], [0.0], [0.0]], &[0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn knn_examples() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0], [6.0, 5.0]];
        let m = knn_fit(pts.clone(), vec![0, 0, 1, 2, 2], 1).unwrap();
        assert_eq!(knn_predict(&m, &pts).unwrap(), vec![0, 0, 1, 2, 2]);
        let all = knn_fit(pts.clone(), vec![3; 5], 5).unwrap();
        assert_eq!(knn_predict(&all, &array![[100.0, -3.0]]).unwrap(), vec![3]);
        // one vote each for classes 1 and 0 at k=2: smallest id wins
        let tie = knn_fit(array![[0.0], [2.0]], vec![1, 0], 2).unwrap();
        assert_eq!(knn_predict(&tie, &array![[0.1]]).unwrap(), vec![0]);
        assert!(matches!(
            knn_fit(Array2::zeros((0, 2)), vec![], 1),
            Err(Error::EmptyModel)
        ));
        assert!(knn_fit(pts, vec![0; 5], 6).is_err());
    }

    fn blobs(n: usize, seed: u64, sep: f64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| {
            let shift = if j == 0 {
                sep * (2.0 * labels[i] as f64 - 1.0)
            } else {
                0.0
            };
            shift + rng.gen_range(-1.0..1.0)
        });
        LabeledSet::new(x, Targets::Classes(labels)).unwrap()
    }

    fn small_cfg(task: Task) -> ProbeConfig {
        ProbeConfig {
            hidden: vec![16, 8],
            task,
            epochs: 60,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn probe_separates_linear_classes_reproducibly() {
        let (train, val) = (blobs(200, 1, 1.5), blobs(100, 2, 1.5));
        let cfg = small_cfg(Task::Classify { classes: 2 });
        let p = train_probe(&train, &val, &cfg).unwrap();
        let Targets::Classes(truth) = &val.targets else {
            unreachable!()
        };
        let acc = p
            .predict_classes(&val.embeddings)
            .iter()
            .zip(truth)
            .filter(|(a, b)| a == b)
            .count() as f64
            / val.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
        let q = train_probe(&train, &val, &cfg).unwrap();
        assert_eq!(p.predict_classes(&val.embeddings), q.predict_classes(&val.embeddings));
        assert_eq!(p.forward(&val.embeddings), q.forward(&val.embeddings));
    }

    #[test]
    fn constant_regression_predicts_the_mean() {
        let x = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        let set = LabeledSet::new(x, Targets::Values(vec![4.5; 50])).unwrap();
        let p = train_probe(&set, &set, &small_cfg(Task::Regress)).unwrap();
        let m = regression_metrics(&p.predict_values(&set.embeddings), &[4.5; 50]).unwrap();
        assert!(m.rmse < 1e-2, "rmse {}", m.rmse);
    }

    #[test]
    fn probe_input_errors() {
        let empty = LabeledSet::new(Array2::zeros((0, 4)), Targets::Classes(vec![])).unwrap();
        let cfg = small_cfg(Task::Classify { classes: 2 });
        assert!(matches!(
            train_probe(&empty, &blobs(4, 0, 1.0), &cfg),
            Err(Error::EmptySplit("train"))
        ));
        assert!(matches!(
            train_probe(&blobs(4, 0, 1.0), &empty, &cfg),
            Err(Error::EmptySplit("validation"))
        ));
        let bad = ProbeConfig {
            task: Task::Classify { classes: 1 },
            ..cfg
        };
        assert!(train_probe(&blobs(4, 0, 1.0), &blobs(4, 0, 1.0), &bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn f1_macro_invariant_under_relabeling(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..30).map(|_| rng.gen_range(0..4)).collect();
            let preds: Vec<usize> = (0..30).map(|_| rng.gen_range(0..4)).collect();
            let mut perm = [0, 1, 2, 3];
            perm.shuffle(&mut rng);
            let relabel = |v: &[usize]| v.iter().map(|&c| perm[c] + 10).collect::<Vec<_>>();
            let a = f1(&preds, &labels, Average::Macro).unwrap();
            let b = f1(&relabel(&preds), &relabel(&labels), Average::Macro).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cluster_metrics_in_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_simple_fn((12, 3), || rng.gen_range(-1.0..1.0));
            let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let s = silhouette(&pts, &labels).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            prop_assert!(davies_bouldin(&pts, &labels).unwrap() >= 0.0);
        }

        #[test]
        fn knn_invariant_under_rotation(seed in 0u64..1000, theta in 0.0f64..std::f64::consts::TAU) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_simple_fn((9, 2), || rng.gen_range(-5.0..5.0));
            let labels: Vec<usize> = (0..9).map(|_| rng.gen_range(0..3)).collect();
            let queries = Array2::from_shape_simple_fn((6, 2), || rng.gen_range(-5.0..5.0));
            let rot = array![[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
            let shift = array![3.0, -1.0];
            let m = knn_fit(pts.clone(), labels.clone(), 3).unwrap();
            let r = knn_fit(pts.dot(&rot) + &shift, labels, 3).unwrap();
            prop_assert!(knn_predict(&m, &queries).unwrap() == knn_predict(&r, &(queries.dot(&rot) + &shift)).unwrap());
        }
    }
}
