//! Dual-branch pixel time-series encoder.
//!
//! Each modality branch embeds its tokens as `φ(values) + ψ(sin, cos)`,
//! runs pre-norm transformer blocks, and pools the sequence with a GRU whose
//! final hidden state is the branch output. The two branch outputs are
//! concatenated and fused by a two-layer MLP into the representation `z`.
//! During pretraining `z` is expanded by a wide projector built from
//! linear / batch-norm / ReLU blocks.
//!
//! Sequences of a batch are stacked as consecutive row blocks: sample `n`,
//! timestep `t` lives in row `n·L + t`.

use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::dpixel::{GlobalStats, Modality, SampledView};
use crate::error::{Error, Result};
use crate::graph::{Graph, Matrix, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.02;
/// Smallest quantization step, guarding all-zero columns.
pub const QUANT_SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Sampled sequence length used by the data pipeline; the network itself
    /// accepts any length.
    pub seq_len: usize,
    pub d_repr: usize,
    pub projector_hidden_layers: usize,
    pub projector_width: usize,
    pub ffn_width: usize,
    /// GRU hidden size, i.e. width of each branch output.
    pub branch_width: usize,
    /// Hidden width of the day-of-year map; 0 makes it a single linear layer.
    pub doy_hidden: usize,
    pub quantize: bool,
    pub use_s1: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            seq_len: 40,
            d_repr: 128,
            projector_hidden_layers: 2,
            projector_width: 512,
            ffn_width: 256,
            branch_width: 128,
            doy_hidden: 0,
            quantize: false,
            use_s1: true,
        }
    }
}

impl EncoderConfig {
    /// Full-size architecture (too large to instantiate on a desk machine;
    /// use [`EncoderConfig::param_count`]).
    pub fn full_size() -> Self {
        Self {
            d_model: 512,
            n_layers: 4,
            n_heads: 8,
            seq_len: 40,
            d_repr: 128,
            projector_hidden_layers: 4,
            projector_width: 16384,
            ffn_width: 4096,
            branch_width: 512,
            doy_hidden: 512,
            quantize: true,
            use_s1: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("seq_len", self.seq_len),
            ("d_repr", self.d_repr),
            ("projector_width", self.projector_width),
            ("ffn_width", self.ffn_width),
            ("branch_width", self.branch_width),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_repr > self.projector_width {
            return Err(Error::Config("d_repr must not exceed projector_width".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> Result<ParamCount> {
        self.validate()?;
        let mut meta = MetaRegistrar::default();
        Layout::build(self, &mut meta);
        let group = |prefix: &str| -> usize {
            meta.shapes
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(_, (r, c))| r * c)
                .sum()
        };
        Ok(ParamCount {
            s2_branch: group("s2."),
            s1_branch: group("s1."),
            fusion: group("fusion."),
            projector: group("projector."),
            bn_buffers: meta.bn_widths.iter().map(|w| 2 * w + 1).sum(),
            projector_output: self.projector_width,
        })
    }
}

/// Parameter totals derived from shapes alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub s2_branch: usize,
    pub s1_branch: usize,
    pub fusion: usize,
    pub projector: usize,
    /// Batch-norm running mean, running variance and step counter.
    pub bn_buffers: usize,
    pub projector_output: usize,
}

impl ParamCount {
    pub fn encoders(&self) -> usize {
        self.s2_branch + self.s1_branch
    }

    pub fn learnable(&self) -> usize {
        self.encoders() + self.fusion + self.projector
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug)]
enum Init {
    Zeros,
    Ones,
    TruncNormal,
    /// `h × 3h`: three orthogonal `h × h` blocks side by side.
    OrthogonalBlocks,
}

trait Registrar {
    fn tensor(&mut self, name: String, shape: (usize, usize), init: Init) -> ParamId;
    fn batch_norm(&mut self, width: usize) -> usize;
}

#[derive(Default)]
struct MetaRegistrar {
    shapes: Vec<(String, (usize, usize))>,
    bn_widths: Vec<usize>,
}

impl Registrar for MetaRegistrar {
    fn tensor(&mut self, name: String, shape: (usize, usize), _: Init) -> ParamId {
        self.shapes.push((name, shape));
        ParamId(self.shapes.len() - 1)
    }

    fn batch_norm(&mut self, width: usize) -> usize {
        self.bn_widths.push(width);
        self.bn_widths.len() - 1
    }
}

struct InitRegistrar {
    rng: ChaCha8Rng,
    store: ParamStore,
    bn: Vec<BnRunning>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

impl Registrar for InitRegistrar {
    fn tensor(&mut self, name: String, (rows, cols): (usize, usize), init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Array2::zeros((rows, cols)),
            Init::Ones => Array2::ones((rows, cols)),
            Init::TruncNormal => Array2::from_shape_simple_fn((rows, cols), || trunc_normal(&mut self.rng, INIT_STD)),
            Init::OrthogonalBlocks => {
                let mut m = Array2::zeros((rows, cols));
                for b in 0..cols / rows {
                    let q = orthogonal(&mut self.rng, rows);
                    for i in 0..rows {
                        for j in 0..rows {
                            m[[i, b * rows + j]] = q[(i, j)];
                        }
                    }
                }
                m
            }
        };
        self.store.push(name, value)
    }

    fn batch_norm(&mut self, width: usize) -> usize {
        self.bn.push(BnRunning::new(width));
        self.bn.len() - 1
    }
}

/// Named, flat collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    fn push(&mut self, name: String, value: Matrix) -> ParamId {
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub steps: u64,
}

impl BnRunning {
    fn new(width: usize) -> Self {
        Self {
            mean: Array1::zeros(width),
            var: Array1::ones(width),
            steps: 0,
        }
    }

    /// Exponential update from a batch mean and unbiased batch variance.
    pub fn update(&mut self, batch: &BnBatchStats) {
        let m = BN_MOMENTUM;
        self.mean = &self.mean * (1.0 - m) + &batch.mean * m;
        self.var = &self.var * (1.0 - m) + &batch.var * m;
        self.steps += 1;
    }
}

/// Batch statistics observed by a batch-norm layer in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Array1<f64>,
    /// Unbiased variance.
    pub var: Array1<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(reg: &mut dyn Registrar, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: reg.tensor(format!("{name}.w"), (fan_in, fan_out), Init::TruncNormal),
            b: reg.tensor(format!("{name}.b"), (1, fan_out), Init::Zeros),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(reg: &mut dyn Registrar, name: &str, width: usize) -> Self {
        Self {
            gamma: reg.tensor(format!("{name}.gamma"), (1, width), Init::Ones),
            beta: reg.tensor(format!("{name}.beta"), (1, width), Init::Zeros),
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Gru {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    hidden: usize,
}

#[derive(Clone, Debug)]
struct Branch {
    phi: Linear,
    psi: Vec<Linear>,
    blocks: Vec<Block>,
    ln_f: Norm,
    gru: Gru,
}

impl Branch {
    fn new(reg: &mut dyn Registrar, cfg: &EncoderConfig, m: Modality) -> Self {
        let p = m.name().to_ascii_lowercase();
        let d = cfg.d_model;
        let phi = Linear::new(reg, &format!("{p}.phi"), m.channels(), d);
        let psi = if cfg.doy_hidden == 0 {
            vec![Linear::new(reg, &format!("{p}.psi"), 2, d)]
        } else {
            vec![
                Linear::new(reg, &format!("{p}.psi.0"), 2, cfg.doy_hidden),
                Linear::new(reg, &format!("{p}.psi.1"), cfg.doy_hidden, d),
            ]
        };
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                let b = format!("{p}.block{i}");
                Block {
                    ln1: Norm::new(reg, &format!("{b}.ln1"), d),
                    qkv: Linear::new(reg, &format!("{b}.qkv"), d, 3 * d),
                    out: Linear::new(reg, &format!("{b}.out"), d, d),
                    ln2: Norm::new(reg, &format!("{b}.ln2"), d),
                    ff1: Linear::new(reg, &format!("{b}.ff1"), d, cfg.ffn_width),
                    ff2: Linear::new(reg, &format!("{b}.ff2"), cfg.ffn_width, d),
                }
            })
            .collect();
        let ln_f = Norm::new(reg, &format!("{p}.ln_f"), d);
        let h = cfg.branch_width;
        let gru = Gru {
            w_ih: reg.tensor(format!("{p}.gru.w_ih"), (d, 3 * h), Init::TruncNormal),
            w_hh: reg.tensor(format!("{p}.gru.w_hh"), (h, 3 * h), Init::OrthogonalBlocks),
            b_ih: reg.tensor(format!("{p}.gru.b_ih"), (1, 3 * h), Init::Zeros),
            b_hh: reg.tensor(format!("{p}.gru.b_hh"), (1, 3 * h), Init::Zeros),
            hidden: h,
        };
        Self {
            phi,
            psi,
            blocks,
            ln_f,
            gru,
        }
    }
}

#[derive(Clone, Debug)]
struct ProjBlock {
    linear: Linear,
    bn: Norm,
    running: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    s2: Branch,
    s1: Option<Branch>,
    fuse1: Linear,
    fuse2: Linear,
    proj_blocks: Vec<ProjBlock>,
    proj_out: Linear,
}

impl Layout {
    fn build(cfg: &EncoderConfig, reg: &mut dyn Registrar) -> Self {
        let s2 = Branch::new(reg, cfg, Modality::S2);
        let s1 = cfg.use_s1.then(|| Branch::new(reg, cfg, Modality::S1));
        let fuse1 = Linear::new(reg, "fusion.0", 2 * cfg.branch_width, cfg.d_repr);
        let fuse2 = Linear::new(reg, "fusion.1", cfg.d_repr, cfg.d_repr);
        let w = cfg.projector_width;
        let proj_blocks = (0..=cfg.projector_hidden_layers)
            .map(|i| {
                let fan_in = if i == 0 { cfg.d_repr } else { w };
                ProjBlock {
                    linear: Linear::new(reg, &format!("projector.{i}"), fan_in, w),
                    bn: Norm::new(reg, &format!("projector.{i}.bn"), w),
                    running: reg.batch_norm(w),
                }
            })
            .collect();
        let proj_out = Linear::new(reg, "projector.out", w, w);
        Self {
            s2,
            s1,
            fuse1,
            fuse2,
            proj_blocks,
            proj_out,
        }
    }

    fn branch(&self, m: Modality) -> Option<&Branch> {
        match m {
            Modality::S2 => Some(&self.s2),
            Modality::S1 => self.s1.as_ref(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Standardized model input for one modality: `N·L × C` values and
/// `N·L × 2` day-of-year features.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInput {
    pub values: Matrix,
    pub doy: Matrix,
    pub seq_len: usize,
}

impl BranchInput {
    pub fn from_views(views: &[&SampledView]) -> Result<Self> {
        let first = views.first().ok_or_else(|| Error::shape("empty batch"))?;
        let (len, c) = (first.len(), first.channels());
        if len == 0 {
            return Err(Error::shape("empty view"));
        }
        let mut values = Array2::zeros((views.len() * len, c));
        let mut doy = Array2::zeros((views.len() * len, 2));
        for (n, v) in views.iter().enumerate() {
            if v.len() != len || v.channels() != c {
                return Err(Error::shape(format!(
                    "view {n} is {}×{}, expected {len}×{c}",
                    v.len(),
                    v.channels()
                )));
            }
            values.slice_mut(s![n * len..(n + 1) * len, ..]).assign(&v.values);
            doy.slice_mut(s![n * len..(n + 1) * len, ..]).assign(&v.doy_features()?);
        }
        Ok(Self {
            values,
            doy,
            seq_len: len,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows() / self.seq_len
    }

    pub fn concat(parts: &[&BranchInput]) -> Result<Self> {
        let seq_len = parts
            .first()
            .ok_or_else(|| Error::shape("nothing to concatenate"))?
            .seq_len;
        if parts.iter().any(|p| p.seq_len != seq_len) {
            return Err(Error::shape("sequence lengths differ"));
        }
        let cat = |f: fn(&BranchInput) -> &Matrix| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
        };
        Ok(Self {
            values: cat(|p| &p.values)?,
            doy: cat(|p| &p.doy)?,
            seq_len,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBatch {
    pub s2: BranchInput,
    pub s1: BranchInput,
}

impl ModelBatch {
    pub fn from_views(s2: &[&SampledView], s1: &[&SampledView]) -> Result<Self> {
        if s2.len() != s1.len() {
            return Err(Error::LengthMismatch(s2.len(), s1.len()));
        }
        Ok(Self {
            s2: BranchInput::from_views(s2)?,
            s1: BranchInput::from_views(s1)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.s2.batch_size()
    }

    pub fn input(&self, m: Modality) -> &BranchInput {
        match m {
            Modality::S2 => &self.s2,
            Modality::S1 => &self.s1,
        }
    }

    pub fn concat(parts: &[&ModelBatch]) -> Result<Self> {
        Ok(Self {
            s2: BranchInput::concat(&parts.iter().map(|p| &p.s2).collect::<Vec<_>>())?,
            s1: BranchInput::concat(&parts.iter().map(|p| &p.s1).collect::<Vec<_>>())?,
        })
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound(Vec<Var>);

impl Bound {
    fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Graph nodes produced by a projector pass.
pub struct Projected {
    pub out: Var,
    /// One entry per batch-norm layer (train mode only).
    pub bn_stats: Vec<BnBatchStats>,
}

/// Plain-array forward result.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub repr: Array2<f64>,
    pub proj: Option<Array2<f64>>,
}

/// Per-column symmetric int8 fake quantization of a batch.
pub fn fake_quantize(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = (max / 127.0).max(QUANT_SCALE_FLOOR);
        col.mapv_inplace(|v| (v / scale).round().clamp(-127.0, 127.0) * scale);
    }
    out
}

fn check_finite(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation(what.into()))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: EncoderConfig,
    layout: Layout,
    params: ParamStore,
    bn_running: Vec<BnRunning>,
}

impl Model {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = InitRegistrar {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::default(),
            bn: Vec::new(),
        };
        let layout = Layout::build(&config, &mut reg);
        Ok(Self {
            config,
            layout,
            params: reg.store,
            bn_running: reg.bn,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_running(&self) -> &[BnRunning] {
        &self.bn_running
    }

    pub fn update_bn(&mut self, stats: &[BnBatchStats]) {
        for (r, s) in self.bn_running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound(
            self.params
                .values
                .iter()
                .map(|v| {
                    if trainable {
                        g.param(v.clone())
                    } else {
                        g.constant(v.clone())
                    }
                })
                .collect(),
        )
    }

    fn linear(g: &mut Graph, p: &Bound, l: &Linear, x: Var) -> Var {
        let y = g.matmul(x, p.var(l.w));
        g.add_row(y, p.var(l.b))
    }

    fn norm_affine(g: &mut Graph, p: &Bound, n: &Norm, x: Var) -> Var {
        let y = g.mul_row(x, p.var(n.gamma));
        g.add_row(y, p.var(n.beta))
    }

    fn branch_layout(&self, m: Modality) -> Result<&Branch> {
        self.layout
            .branch(m)
            .ok_or_else(|| Error::Config(format!("{} branch is disabled", m.name())))
    }

    /// Tokens `e_t = φ(values_t) + ψ(doy_t)` for every stacked row.
    pub fn embed_graph(&self, g: &mut Graph, p: &Bound, m: Modality, input: &BranchInput) -> Result<Var> {
        let br = self.branch_layout(m)?;
        if input.values.ncols() != m.channels() || input.doy.ncols() != 2 || input.doy.nrows() != input.values.nrows() {
            return Err(Error::shape(format!(
                "{} input is {:?} with doy {:?}",
                m.name(),
                input.values.dim(),
                input.doy.dim()
            )));
        }
        let x = g.constant(input.values.clone());
        let d = g.constant(input.doy.clone());
        let phi = Self::linear(g, p, &br.phi, x);
        let mut psi = Self::linear(g, p, &br.psi[0], d);
        for l in &br.psi[1..] {
            psi = g.gelu(psi);
            psi = Self::linear(g, p, l, psi);
        }
        Ok(g.add(phi, psi))
    }

    /// Transformer blocks plus GRU pooling over stacked tokens; one output
    /// row per sequence.
    pub fn encode_tokens_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        m: Modality,
        tokens: Var,
        seq_len: usize,
    ) -> Result<Var> {
        let br = self.branch_layout(m)?;
        let d = self.config.d_model;
        let (rows, cols) = g.value(tokens).dim();
        if cols != d || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(format!("tokens {rows}×{cols} with L={seq_len}")));
        }
        let n = rows / seq_len;
        let mut x = tokens;
        for blk in &br.blocks {
            let h = g.layer_norm(x, LN_EPS);
            let h = Self::norm_affine(g, p, &blk.ln1, h);
            let qkv = Self::linear(g, p, &blk.qkv, h);
            let q = g.slice_cols(qkv, 0, d);
            let k = g.slice_cols(qkv, d, d);
            let v = g.slice_cols(qkv, 2 * d, d);
            let a = g.attention(q, k, v, seq_len, self.config.n_heads);
            let a = Self::linear(g, p, &blk.out, a);
            x = g.add(x, a);
            let h = g.layer_norm(x, LN_EPS);
            let h = Self::norm_affine(g, p, &blk.ln2, h);
            let f = Self::linear(g, p, &blk.ff1, h);
            let f = g.gelu(f);
            let f = Self::linear(g, p, &blk.ff2, f);
            x = g.add(x, f);
        }
        let x = g.layer_norm(x, LN_EPS);
        let x = Self::norm_affine(g, p, &br.ln_f, x);
        check_finite(g, x, "transformer")?;

        let gru = &br.gru;
        let hd = gru.hidden;
        let xi = g.matmul(x, p.var(gru.w_ih));
        let xi = g.add_row(xi, p.var(gru.b_ih));
        let mut h = g.constant(Array2::zeros((n, hd)));
        let mut rows_t = vec![0usize; n];
        for t in 0..seq_len {
            for (i, r) in rows_t.iter_mut().enumerate() {
                *r = i * seq_len + t;
            }
            let xt = g.gather_rows(xi, &rows_t);
            let hh = g.matmul(h, p.var(gru.w_hh));
            let hh = g.add_row(hh, p.var(gru.b_hh));
            let xr = g.slice_cols(xt, 0, hd);
            let xz = g.slice_cols(xt, hd, hd);
            let xn = g.slice_cols(xt, 2 * hd, hd);
            let hr = g.slice_cols(hh, 0, hd);
            let hz = g.slice_cols(hh, hd, hd);
            let hn = g.slice_cols(hh, 2 * hd, hd);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let rn = g.mul(r, hn);
            let cand = g.add(xn, rn);
            let cand = g.tanh(cand);
            let diff = g.sub(h, cand);
            let keep = g.mul(z, diff);
            h = g.add(cand, keep);
        }
        check_finite(g, h, "gru")?;
        Ok(h)
    }

    pub fn fuse_graph(&self, g: &mut Graph, p: &Bound, z_s2: Var, z_s1: Var) -> Result<Var> {
        let b = self.config.branch_width;
        let (r2, c2) = g.value(z_s2).dim();
        let (r1, c1) = g.value(z_s1).dim();
        if c2 != b || c1 != b || r1 != r2 {
            return Err(Error::shape(format!(
                "fusion inputs {r2}×{c2} and {r1}×{c1}, width {b}"
            )));
        }
        let cat = g.concat_cols(&[z_s2, z_s1]);
        let h = Self::linear(g, p, &self.layout.fuse1, cat);
        let h = g.gelu(h);
        Ok(Self::linear(g, p, &self.layout.fuse2, h))
    }

    /// Representation `z` for a batch. In train mode with quantization
    /// enabled, `z` is fake-quantized with a straight-through gradient.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, batch: &ModelBatch, mode: Mode) -> Result<Var> {
        let n = batch.batch_size();
        if batch.s1.batch_size() != n {
            return Err(Error::LengthMismatch(n, batch.s1.batch_size()));
        }
        let t2 = self.embed_graph(g, p, Modality::S2, &batch.s2)?;
        let z2 = self.encode_tokens_graph(g, p, Modality::S2, t2, batch.s2.seq_len)?;
        let z1 = if self.config.use_s1 {
            let t1 = self.embed_graph(g, p, Modality::S1, &batch.s1)?;
            self.encode_tokens_graph(g, p, Modality::S1, t1, batch.s1.seq_len)?
        } else {
            g.constant(Array2::zeros((n, self.config.branch_width)))
        };
        let z = self.fuse_graph(g, p, z2, z1)?;
        let z = if self.config.quantize && mode == Mode::Train {
            let q = fake_quantize(g.value(z));
            g.straight_through(z, q)
        } else {
            z
        };
        check_finite(g, z, "fusion")?;
        Ok(z)
    }

    pub fn project_graph(&self, g: &mut Graph, p: &Bound, z: Var, mode: Mode) -> Result<Projected> {
        if g.value(z).ncols() != self.config.d_repr {
            return Err(Error::shape(format!(
                "projector input width {} != {}",
                g.value(z).ncols(),
                self.config.d_repr
            )));
        }
        let mut x = z;
        let mut bn_stats = Vec::new();
        for blk in &self.layout.proj_blocks {
            let h = Self::linear(g, p, &blk.linear, x);
            let normed = match mode {
                Mode::Train => {
                    let v = g.value(h);
                    let n = v.nrows() as f64;
                    let mean = v.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = v.map_axis(Axis(0), |c| {
                        let m = c.mean().unwrap_or(0.0);
                        c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
                    });
                    bn_stats.push(BnBatchStats { mean, var });
                    g.col_standardize(h, BN_EPS)
                }
                Mode::Infer => {
                    let run = &self.bn_running[blk.running];
                    let shift = g.constant((-&run.mean).insert_axis(Axis(0)));
                    let inv = g.constant(run.var.mapv(|v| 1.0 / (v + BN_EPS).sqrt()).insert_axis(Axis(0)));
                    let c = g.add_row(h, shift);
                    g.mul_row(c, inv)
                }
            };
            let y = Self::norm_affine(g, p, &blk.bn, normed);
            x = g.relu(y);
        }
        let out = Self::linear(g, p, &self.layout.proj_out, x);
        check_finite(g, out, "projector")?;
        Ok(Projected { out, bn_stats })
    }

    /// Representation (and, in train mode, projector output) with frozen
    /// parameters.
    pub fn forward(&self, batch: &ModelBatch, mode: Mode) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let z = self.encode_graph(&mut g, &p, batch, mode)?;
        let proj = match mode {
            Mode::Train => {
                let out = self.project_graph(&mut g, &p, z, mode)?.out;
                Some(g.value(out).clone())
            }
            Mode::Infer => None,
        };
        Ok(ForwardOutput {
            repr: g.value(z).clone(),
            proj,
        })
    }

    /// Representations only, in infer mode.
    pub fn represent(&self, batch: &ModelBatch) -> Result<Array2<f64>> {
        Ok(self.forward(batch, Mode::Infer)?.repr)
    }

    pub fn embed_sequence(&self, m: Modality, view: &SampledView) -> Result<Array2<f64>> {
        if view.channels() != m.channels() {
            return Err(Error::ChannelMismatch {
                expected: m.channels(),
                actual: view.channels(),
            });
        }
        let input = BranchInput::from_views(&[view])?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let t = self.embed_graph(&mut g, &p, m, &input)?;
        Ok(g.value(t).clone())
    }

    pub fn encode_branch(&self, m: Modality, tokens: &Array2<f64>) -> Result<Array1<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let t = g.constant(tokens.clone());
        let z = self.encode_tokens_graph(&mut g, &p, m, t, tokens.nrows())?;
        Ok(g.value(z).row(0).to_owned())
    }

    /// Fuses branch outputs; `None` stands for the disabled S1 branch.
    pub fn fuse(&self, z_s2: &Array1<f64>, z_s1: Option<&Array1<f64>>) -> Result<Array1<f64>> {
        let zeros = Array1::zeros(self.config.branch_width);
        let z_s1 = z_s1.unwrap_or(&zeros);
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let a = g.constant(z_s2.clone().insert_axis(Axis(0)));
        let b = g.constant(z_s1.clone().insert_axis(Axis(0)));
        let z = self.fuse_graph(&mut g, &p, a, b)?;
        Ok(g.value(z).row(0).to_owned())
    }

    pub fn project(&self, z: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.project_graph(&mut g, &p, zv, mode)?.out;
        Ok(g.value(out).clone())
    }
}

/// First and second moment estimates of an adaptive optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl MomentState {
    pub fn zeros(params: &ParamStore) -> Self {
        let z: Vec<Matrix> = params.values.iter().map(|v| Array2::zeros(v.dim())).collect();
        Self {
            t: 0,
            m: z.clone(),
            v: z,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: EncoderConfig,
    pub stats: GlobalStats,
    pub step: u64,
    #[serde(default)]
    pub train: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub optimizer: Option<MomentState>,
}

const CKPT_MAGIC: &[u8; 8] = b"DPIXCKPT";
const CKPT_VERSION: u32 = 1;

fn write_matrix(w: &mut ByteWriter, m: &Matrix) {
    w.u32(m.nrows() as u32);
    w.u32(m.ncols() as u32);
    for v in m.iter() {
        w.f64(*v);
    }
}

fn read_matrix(r: &mut ByteReader, expect: (usize, usize), path: &Path) -> Result<Matrix> {
    let dims = (r.u32()? as usize, r.u32()? as usize);
    if dims != expect {
        return Err(Error::format(path, format!("tensor is {dims:?}, expected {expect:?}")));
    }
    let mut data = Vec::with_capacity(dims.0 * dims.1);
    for _ in 0..dims.0 * dims.1 {
        data.push(r.f64()?);
    }
    Ok(Array2::from_shape_vec(dims, data).expect("length checked"))
}

impl Checkpoint {
    /// Writes `path` and a `<path>.json` sidecar with the metadata.
    ///
    /// Layout: magic `DPIXCKPT`, `u32` version, `u32` length + metadata JSON,
    /// `u32` tensor count, then per tensor a name, `u32` rows, cols and `f64`
    /// data; `u32` batch-norm count, then per layer `u64` steps and mean /
    /// variance as `1×W` tensors; `u8` optimizer flag, then `u64` step and
    /// first / second moments in tensor order; trailing CRC-32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_string(&self.meta)?;
        let mut w = ByteWriter::default();
        w.bytes(CKPT_MAGIC);
        w.u32(CKPT_VERSION);
        w.u32(meta.len() as u32);
        w.bytes(meta.as_bytes());
        let params = self.model.params();
        w.u32(params.len() as u32);
        for (name, v) in params.names.iter().zip(&params.values) {
            w.str16(name);
            write_matrix(&mut w, v);
        }
        w.u32(self.model.bn_running.len() as u32);
        for bn in &self.model.bn_running {
            w.u64(bn.steps);
            write_matrix(&mut w, &bn.mean.clone().insert_axis(Axis(0)));
            write_matrix(&mut w, &bn.var.clone().insert_axis(Axis(0)));
        }
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.t);
                for m in opt.m.iter().chain(&opt.v) {
                    write_matrix(&mut w, m);
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            binio::create_dir_all(dir)?;
        }
        binio::write_atomic(path, &w.finish())?;
        let sidecar = serde_json::to_string_pretty(&self.meta)?;
        binio::write_atomic(&sidecar_path(path), sidecar.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = binio::read_file(path)?;
        let body = binio::verify_crc(path, &data)?;
        let mut r = ByteReader::new(body, path);
        r.expect_magic(CKPT_MAGIC)?;
        if r.u32()? != CKPT_VERSION {
            return Err(Error::format(path, "unsupported version"));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let mut model = Model::new(meta.config.clone(), 0)?;
        if r.u32()? as usize != model.params.len() {
            return Err(Error::format(path, "tensor count does not match the configuration"));
        }
        for i in 0..model.params.len() {
            let name = r.str16()?;
            if name != model.params.names[i] {
                return Err(Error::format(path, format!("unexpected tensor {name}")));
            }
            model.params.values[i] = read_matrix(&mut r, model.params.values[i].dim(), path)?;
        }
        if r.u32()? as usize != model.bn_running.len() {
            return Err(Error::format(path, "batch-norm count does not match the configuration"));
        }
        for bn in &mut model.bn_running {
            let w = bn.mean.len();
            bn.steps = r.u64()?;
            bn.mean = read_matrix(&mut r, (1, w), path)?.row(0).to_owned();
            bn.var = read_matrix(&mut r, (1, w), path)?.row(0).to_owned();
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let dims: Vec<_> = model.params.values.iter().map(Array2::dim).collect();
                let read_all = |r: &mut ByteReader| -> Result<Vec<Matrix>> {
                    dims.iter().map(|&d| read_matrix(r, d, path)).collect()
                };
                let m = read_all(&mut r)?;
                let v = read_all(&mut r)?;
                Some(MomentState { t, m, v })
            }
            _ => return Err(Error::format(path, "bad optimizer flag")),
        };
        if r.remaining() != 0 {
            return Err(Error::format(path, "trailing bytes"));
        }
        Ok(Self { meta, model, optimizer })
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(d_model: usize) -> EncoderConfig {
        EncoderConfig {
            d_model,
            n_layers: 2,
            n_heads: 2,
            seq_len: 4,
            d_repr: 16,
            projector_hidden_layers: 1,
            projector_width: 24,
            ffn_width: 2 * d_model,
            branch_width: 12,
            doy_hidden: 0,
            quantize: false,
            use_s1: true,
        }
    }

    fn view(len: usize, c: usize, rng: &mut ChaCha8Rng) -> SampledView {
        let mut doys: Vec<f64> = (0..len).map(|_| rng.gen_range(0.0..1.0)).collect();
        doys.sort_by(f64::total_cmp);
        SampledView {
            values: Array2::from_shape_simple_fn((len, c), || rng.sample(StandardNormal)),
            doys,
        }
    }

    fn batch(n: usize, len: usize, seed: u64) -> ModelBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s2: Vec<_> = (0..n).map(|_| view(len, 10, &mut rng)).collect();
        let s1: Vec<_> = (0..n).map(|_| view(len, 2, &mut rng)).collect();
        ModelBatch::from_views(&s2.iter().collect::<Vec<_>>(), &s1.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn shapes_across_config_sweep() {
        for d_model in [8, 64] {
            for len in [4, 40] {
                for n in [1, 32] {
                    let m = Model::new(
                        EncoderConfig {
                            seq_len: len,
                            ..tiny(d_model)
                        },
                        1,
                    )
                    .unwrap();
                    let out = m.forward(&batch(n, len, 2), Mode::Train).unwrap();
                    assert_eq!(out.repr.dim(), (n, 16));
                    assert_eq!(out.proj.unwrap().dim(), (n, 24));
                    assert!(m.forward(&batch(n, len, 2), Mode::Infer).unwrap().proj.is_none());
                }
            }
        }
    }

    #[test]
    fn desk_defaults_project_to_512() {
        let m = Model::new(EncoderConfig::default(), 0).unwrap();
        let out = m.forward(&batch(8, 6, 3), Mode::Train).unwrap();
        assert_eq!(out.repr.dim(), (8, 128));
        assert_eq!(out.proj.unwrap().dim(), (8, 512));
    }

    #[test]
    fn full_size_projector_output_width() {
        let c = EncoderConfig::full_size().param_count().unwrap();
        assert_eq!(c.projector_output, 16384);
    }

    #[test]
    fn embedding_is_linear_in_values() {
        let mut m = Model::new(tiny(8), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = view(4, 10, &mut rng);
        for (name, value) in m.params.names.clone().iter().zip(m.params.values_mut()) {
            if name.starts_with("s2.psi") {
                value.fill(0.0);
            }
        }
        let zero = SampledView {
            values: Array2::zeros((4, 10)),
            ..v.clone()
        };
        assert!(m.embed_sequence(Modality::S2, &zero).unwrap().iter().all(|&x| x == 0.0));
        let double = SampledView {
            values: &v.values * 2.0,
            ..v.clone()
        };
        let e1 = m.embed_sequence(Modality::S2, &v).unwrap();
        let e2 = m.embed_sequence(Modality::S2, &double).unwrap();
        assert!((&e2 - &(&e1 * 2.0)).iter().all(|x| x.abs() < 1e-12));
        assert_eq!(e1.dim(), (4, 8));
        assert!(matches!(
            m.embed_sequence(Modality::S1, &v),
            Err(Error::ChannelMismatch {
                expected: 2,
                actual: 10
            })
        ));
    }

    #[test]
    fn gru_pooling_is_order_sensitive() {
        let m = Model::new(tiny(8), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tokens = Array2::from_shape_simple_fn((5, 8), || rng.sample(StandardNormal));
        let z = m.encode_branch(Modality::S2, &tokens).unwrap();
        assert_eq!(z.len(), 12);
        let mut swapped = tokens.clone();
        for j in 0..8 {
            swapped.swap([1, j], [3, j]);
        }
        let zs = m.encode_branch(Modality::S2, &swapped).unwrap();
        assert!((&z - &zs).iter().any(|x| x.abs() > 1e-9));
        for len in [1, 2, 7] {
            assert_eq!(
                m.encode_branch(Modality::S1, &tokens.slice(s![..len.min(5), ..]).to_owned())
                    .unwrap()
                    .len(),
                12
            );
        }
    }

    #[test]
    fn duplicated_tokens_stay_finite() {
        let m = Model::new(tiny(8), 8).unwrap();
        let row = array![[0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.2, 4.0]];
        let tokens = ndarray::concatenate(Axis(0), &[row.view(); 4]).unwrap();
        assert!(m
            .encode_branch(Modality::S2, &tokens)
            .unwrap()
            .iter()
            .all(|x| x.is_finite()));
    }

    #[test]
    fn fusion_distinguishes_inputs() {
        let m = Model::new(tiny(8), 9).unwrap();
        let a = Array1::linspace(-1.0, 1.0, 12);
        let b = Array1::linspace(1.0, -0.5, 12);
        let za = m.fuse(&a, Some(&b)).unwrap();
        let zb = m.fuse(&b, Some(&a)).unwrap();
        assert_eq!(za.len(), 16);
        assert!((&za - &zb).iter().any(|x| x.abs() > 1e-9));
        assert!(m.fuse(&a, None).unwrap().iter().all(|x| x.is_finite()));
        assert!(m.fuse(&Array1::zeros(5), None).is_err());
    }

    #[test]
    fn s1_ablation_ignores_s1_input() {
        let m = Model::new(
            EncoderConfig {
                use_s1: false,
                ..tiny(8)
            },
            10,
        )
        .unwrap();
        let b1 = batch(3, 4, 11);
        let mut b2 = b1.clone();
        b2.s1.values.mapv_inplace(|x| x + 5.0);
        assert_eq!(m.represent(&b1).unwrap(), m.represent(&b2).unwrap());
        assert!(m.params.names.iter().all(|n| !n.starts_with("s1.")));
    }

    #[test]
    fn identical_rows_give_identical_outputs_in_infer_mode() {
        let m = Model::new(tiny(8), 12).unwrap();
        let one = batch(1, 4, 13);
        let twice = ModelBatch::concat(&[&one, &one]).unwrap();
        let z = m.represent(&twice).unwrap();
        assert_eq!(z.row(0), z.row(1));
        let p = m.project(&z, Mode::Infer).unwrap();
        assert_eq!(p.row(0), p.row(1));
        let again = m.represent(&twice).unwrap();
        assert_eq!(z, again);
    }

    #[test]
    fn fake_quantization_is_bounded_and_passes_gradients() {
        let x = array![[0.5, -2.0], [-1.0, 0.01], [0.25, 2.0]];
        let q = fake_quantize(&x);
        for j in 0..2 {
            let scale = x.column(j).iter().fold(0.0f64, |m, v| m.max(v.abs())) / 127.0;
            for i in 0..3 {
                assert!((q[[i, j]] - x[[i, j]]).abs() <= scale / 2.0 + 1e-15);
            }
        }
        let mut g = Graph::new();
        let a = g.param(x.clone());
        let st = g.straight_through(a, q);
        let s = g.sum(st);
        g.backward(s);
        assert_eq!(g.grad(a).unwrap(), &Array2::<f64>::ones((3, 2)));

        let m = Model::new(
            EncoderConfig {
                quantize: true,
                ..tiny(8)
            },
            14,
        )
        .unwrap();
        let b = batch(4, 4, 15);
        let train = m.forward(&b, Mode::Train).unwrap().repr;
        assert_eq!(train, fake_quantize(&m.represent(&b).unwrap()));
    }

    #[test]
    fn batch_norm_running_update() {
        let mut r = BnRunning::new(2);
        r.update(&BnBatchStats {
            mean: array![1.0, -1.0],
            var: array![3.0, 1.0],
        });
        assert_eq!(r.mean, array![0.1, -0.1]);
        assert!((r.var[0] - 1.2).abs() < 1e-15);
        assert_eq!(r.steps, 1);
    }

    #[test]
    fn orthogonal_recurrent_init() {
        let m = Model::new(tiny(8), 16).unwrap();
        let i = m.params.names.iter().position(|n| n == "s2.gru.w_hh").unwrap();
        let w = &m.params.values[i];
        for b in 0..3 {
            let blk = w.slice(s![.., b * 12..(b + 1) * 12]);
            let gram = blk.t().dot(&blk);
            for r in 0..12 {
                for c in 0..12 {
                    let e = if r == c { 1.0 } else { 0.0 };
                    assert!((gram[[r, c]] - e).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn param_count_matches_instantiated_model() {
        for cfg in [
            tiny(8),
            EncoderConfig {
                doy_hidden: 5,
                use_s1: false,
                ..tiny(8)
            },
            EncoderConfig::default(),
        ] {
            let c = cfg.param_count().unwrap();
            let m = Model::new(cfg, 0).unwrap();
            assert_eq!(c.learnable(), m.params.num_elements());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Model::new(EncoderConfig { n_heads: 3, ..tiny(8) }, 0).is_err());
        assert!(Model::new(EncoderConfig { d_repr: 64, ..tiny(8) }, 0).is_err());
        assert!(Model::new(
            EncoderConfig {
                branch_width: 0,
                ..tiny(8)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(tiny(8), 17).unwrap();
        model.update_bn(&[
            BnBatchStats {
                mean: Array1::from_elem(24, 0.5),
                var: Array1::from_elem(24, 2.0),
            },
            BnBatchStats {
                mean: Array1::from_elem(24, -0.5),
                var: Array1::from_elem(24, 0.5),
            },
        ]);
        // exact f32 values survive the round trip bit for bit
        for v in model.params_mut().values_mut() {
            v.mapv_inplace(|x| f64::from(x as f32));
        }
        for bn in &mut model.bn_running {
            bn.mean.mapv_inplace(|x| f64::from(x as f32));
            bn.var.mapv_inplace(|x| f64::from(x as f32));
        }
        let mut opt = MomentState::zeros(model.params());
        opt.t = 3;
        opt.m[0].fill(0.25);
        let ck = Checkpoint {
            meta: CheckpointMeta {
                config: tiny(8),
                stats: GlobalStats::identity(),
                step: 3,
                train: None,
            },
            model: model.clone(),
            optimizer: Some(opt.clone()),
        };
        let path = dir.path().join("ck/model.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.model.params, model.params);
        assert_eq!(back.model.bn_running, model.bn_running);
        assert_eq!(back.optimizer, Some(opt));
        assert!(sidecar_path(&path).exists());

        let mut bytes = std::fs::read(&path).unwrap();
        let k = bytes.len() / 2;
        bytes[k] ^= 0x10;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::ChecksumMismatch { .. })));
    }
}
