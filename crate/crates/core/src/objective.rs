//! Redundancy-reduction loss with a mixup consistency regularizer.
//!
//! Plain-array functions are provided for evaluation and testing; the
//! `*_graph` variants record the same computation on a [`Graph`] for
//! training.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix, Var};

pub const STANDARDIZE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Weight of the off-diagonal terms.
    pub lambda_bt: f64,
    pub lambda_mix: f64,
    /// Mixing coefficients are drawn from `Beta(alpha_a, alpha_b)`.
    pub alpha_a: f64,
    pub alpha_b: f64,
    /// Scale the mixup term by `lambda_bt·(a + b)` instead of `½(a + b)`.
    pub lambda_scaled_mixup: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_bt: 5e-3,
            lambda_mix: 1.0,
            alpha_a: 1.0,
            alpha_b: 1.0,
            lambda_scaled_mixup: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn sample_alpha<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let beta = Beta::new(self.alpha_a, self.alpha_b).map_err(|e| Error::Config(e.to_string()))?;
        Ok(beta.sample(rng))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub invariance: f64,
    pub redundancy: f64,
    pub l_bt: f64,
    pub l_mix: f64,
    pub l_total: f64,
    pub alpha: f64,
}

/// Per-column zero mean and unit population variance.
pub fn batch_standardize(z: &Array2<f64>) -> Result<Array2<f64>> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let mut out = z.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        col.mapv_inplace(|v| (v - mean) * inv);
    }
    Ok(out)
}

/// `C = AᵀB / N`.
pub fn cross_correlation(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::BatchTooSmall(0));
    }
    Ok(a.t().dot(b) / a.nrows() as f64)
}

/// `(l_bt, invariance, redundancy)` with `l_bt = invariance + λ·redundancy`.
pub fn barlow_loss(c: &Array2<f64>, lambda_bt: f64) -> Result<(f64, f64, f64)> {
    if !c.is_square() {
        return Err(Error::shape(format!("correlation matrix is {:?}", c.dim())));
    }
    let mut inv = 0.0;
    let mut red = 0.0;
    for ((i, j), v) in c.indexed_iter() {
        if i == j {
            inv += (1.0 - v).powi(2);
        } else {
            red += v * v;
        }
    }
    Ok((inv + lambda_bt * red, inv, red))
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(n));
        }
    }
    if perm.len() != n {
        return Err(Error::InvalidPermutation(n));
    }
    Ok(())
}

/// Returns `(Y_M, Y_S)` with `Y_S = Y_B[perm]` and
/// `Y_M = α·Y_A + (1−α)·Y_S`. Rows come in blocks of `group` per sample, so
/// sequence inputs (`N·L` rows) are permuted sample-wise.
pub fn mix_views(
    ya: &Array2<f64>,
    yb: &Array2<f64>,
    alpha: f64,
    perm: &[usize],
    group: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::OutOfRange {
            value: alpha,
            min: 0.0,
            max: 1.0,
        });
    }
    if ya.dim() != yb.dim() || group == 0 || !ya.nrows().is_multiple_of(group) {
        return Err(Error::shape(format!(
            "views {:?} and {:?} in groups of {group}",
            ya.dim(),
            yb.dim()
        )));
    }
    let n = ya.nrows() / group;
    check_perm(perm, n)?;
    let mut ys = Array2::zeros(yb.dim());
    for (i, &p) in perm.iter().enumerate() {
        ys.slice_mut(s![i * group..(i + 1) * group, ..])
            .assign(&yb.slice(s![p * group..(p + 1) * group, ..]));
    }
    let ym = ya * alpha + &ys * (1.0 - alpha);
    Ok((ym, ys))
}

fn mixup_diffs(zm: &Matrix, za: &Matrix, zs: &Matrix, alpha: f64) -> (f64, f64) {
    let n = za.nrows() as f64;
    let corr = |a: &Matrix, b: &Matrix| a.t().dot(b) / n;
    let t_ma = corr(za, za) * alpha + corr(zs, za) * (1.0 - alpha);
    let t_ms = corr(za, zs) * alpha + corr(zs, zs) * (1.0 - alpha);
    let fro = |m: Matrix| m.iter().map(|v| v * v).sum::<f64>();
    (fro(corr(zm, za) - t_ma), fro(corr(zm, zs) - t_ms))
}

/// `½(‖C^MA − T^MA‖² + ‖C^MS − T^MS‖²)` over batch-standardized inputs.
pub fn mixup_loss(zm: &Array2<f64>, za: &Array2<f64>, zs: &Array2<f64>, alpha: f64) -> Result<f64> {
    if zm.dim() != za.dim() || zs.dim() != za.dim() {
        return Err(Error::shape(format!("{:?}, {:?}, {:?}", zm.dim(), za.dim(), zs.dim())));
    }
    if za.nrows() == 0 {
        return Err(Error::BatchTooSmall(0));
    }
    let (a, b) = mixup_diffs(zm, za, zs, alpha);
    Ok(0.5 * (a + b))
}

pub fn total_loss(l_bt: f64, l_mix: f64, lambda_mix: f64) -> f64 {
    l_bt + lambda_mix * l_mix
}

/// Full objective from raw projector outputs of views A, B and the mixed
/// view, where the mixed view was built with `perm` and `alpha`.
pub fn objective(
    pa: &Array2<f64>,
    pb: &Array2<f64>,
    pm: &Array2<f64>,
    perm: &[usize],
    alpha: f64,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    check_perm(perm, pa.nrows())?;
    let za = batch_standardize(pa)?;
    let zb = batch_standardize(pb)?;
    let zm = batch_standardize(pm)?;
    let zs = zb.select(Axis(0), perm);
    let (l_bt, invariance, redundancy) = barlow_loss(&cross_correlation(&za, &zb)?, cfg.lambda_bt)?;
    let (a, b) = mixup_diffs(&zm, &za, &zs, alpha);
    let l_mix = mix_scale(cfg) * (a + b);
    Ok(LossBreakdown {
        invariance,
        redundancy,
        l_bt,
        l_mix,
        l_total: total_loss(l_bt, l_mix, cfg.lambda_mix),
        alpha,
    })
}

fn mix_scale(cfg: &ObjectiveConfig) -> f64 {
    if cfg.lambda_scaled_mixup {
        cfg.lambda_bt
    } else {
        0.5
    }
}

/// Graph nodes of the objective.
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Records the objective on `g` for raw projector outputs `pa`, `pb`, `pm`.
pub fn objective_graph(
    g: &mut Graph,
    pa: Var,
    pb: Var,
    pm: Var,
    perm: &[usize],
    alpha: f64,
    cfg: &ObjectiveConfig,
) -> Result<LossVars> {
    let (n, d) = g.value(pa).dim();
    if g.value(pb).dim() != (n, d) || g.value(pm).dim() != (n, d) {
        return Err(Error::shape("projector outputs differ in shape"));
    }
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    check_perm(perm, n)?;
    let inv_n = 1.0 / n as f64;
    let za = g.col_standardize(pa, STANDARDIZE_EPS);
    let zb = g.col_standardize(pb, STANDARDIZE_EPS);
    let zm = g.col_standardize(pm, STANDARDIZE_EPS);
    let zs = g.gather_rows(zb, perm);

    let corr = |g: &mut Graph, a: Var, b: Var| {
        let c = g.matmul_tn(a, b);
        g.scale(c, inv_n)
    };
    let c = corr(g, za, zb);
    let (_, invariance, redundancy) = barlow_loss(g.value(c), cfg.lambda_bt)?;
    let eye = Array2::eye(d);
    let weights = Array2::from_shape_fn((d, d), |(i, j)| if i == j { 1.0 } else { cfg.lambda_bt });
    let l_bt = g.weighted_sq_diff(c, eye, Some(weights));

    let c_ma = corr(g, zm, za);
    let c_ms = corr(g, zm, zs);
    let c_aa = corr(g, za, za);
    let c_sa = corr(g, zs, za);
    let c_as = corr(g, za, zs);
    let c_ss = corr(g, zs, zs);
    let target = |g: &mut Graph, x: Var, y: Var| {
        let x = g.scale(x, alpha);
        let y = g.scale(y, 1.0 - alpha);
        g.add(x, y)
    };
    let t_ma = target(g, c_aa, c_sa);
    let t_ms = target(g, c_as, c_ss);
    let d_ma = g.sub(c_ma, t_ma);
    let d_ms = g.sub(c_ms, t_ms);
    let diff = g.concat_cols(&[d_ma, d_ms]);
    let sq = g.sq_sum(diff);
    let l_mix = g.scale(sq, mix_scale(cfg));
    let weighted = g.scale(l_mix, cfg.lambda_mix);
    let total = g.add(l_bt, weighted);

    let (l_bt_v, l_mix_v) = (g.scalar_value(l_bt), g.scalar_value(l_mix));
    if !g.scalar_value(total).is_finite() {
        return Err(Error::NonFiniteLoss {
            step: 0,
            detail: format!("l_bt={l_bt_v} l_mix={l_mix_v}"),
        });
    }
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            invariance,
            redundancy,
            l_bt: l_bt_v,
            l_mix: l_mix_v,
            l_total: g.scalar_value(total),
            alpha,
        },
    })
}
