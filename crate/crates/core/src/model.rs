//! Spiking vision transformer with per-layer time-step masks.
//!
//! Activations are kept time-folded as `[T_max · batch, channels, h, w]`
//! (step-major), so convolutions and batchnorm see every step at once and
//! batchnorm statistics are shared across time. Each LIF unfolds the leading
//! axis back into `[T_max, ...]`.
//!
//! Layout of one forward pass:
//!
//! ```text
//! image ─(repeat over T)─► SPS: [conv → BN → LIF]×stages
//!   └► N × { x += proj(LIF(s·(Q·Kᵀ)·V)),  x += mlp2(mlp1(x)) }
//!        with Q, K, V = LIF(BN(conv1x1(x)))
//!   └► spatial mean → mean over the final layer's active steps → linear head
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchNormStats, Graph, NormMode, Var};
use crate::rng;
use crate::spiking::{self, LifParams};
use crate::tensor::Tensor;

/// Sensitivity bins of the masked layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerGroup {
    Sps,
    Qkv,
    Attn,
    Mlp,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 4] = [
        LayerGroup::Sps,
        LayerGroup::Qkv,
        LayerGroup::Attn,
        LayerGroup::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Sps => "sps",
            LayerGroup::Qkv => "qkv",
            LayerGroup::Attn => "attn",
            LayerGroup::Mlp => "mlp",
        }
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::config("mask_groups", format!("unknown layer group `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of encoder blocks.
    pub blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub t_max: usize,
    pub attn_scale: f32,
    pub sps_stages: usize,
    pub mlp_ratio: usize,
    pub leak: f32,
    pub threshold: f32,
    pub surrogate_gamma: f32,
    /// Attach trainable time-step masks to every LIF layer.
    pub dtss: bool,
    pub bn_momentum: f32,
    pub bn_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            blocks: 1,
            embed_dim: 32,
            heads: 2,
            patch_size: 4,
            image_size: 16,
            channels: 1,
            num_classes: 10,
            t_max: 4,
            attn_scale: 0.125,
            sps_stages: 2,
            mlp_ratio: 4,
            leak: 1.0,
            threshold: 1.0,
            surrogate_gamma: 1.0,
            dtss: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn lif(&self) -> LifParams {
        LifParams {
            leak: self.leak,
            threshold: self.threshold,
            gamma: self.surrogate_gamma,
        }
    }

    fn downsampling_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("num_classes", self.num_classes),
            ("t_max", self.t_max),
            ("sps_stages", self.sps_stages),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!(
                    "embed_dim {} is not divisible by heads {}",
                    self.embed_dim, self.heads
                ),
            ));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!(
                    "image_size {} is not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if !self.patch_size.is_power_of_two() || self.downsampling_stages() > self.sps_stages {
            return Err(Error::config(
                "patch_size",
                format!(
                    "must be a power of two reachable with {} stride-2 stages",
                    self.sps_stages
                ),
            ));
        }
        if !self.embed_dim.is_multiple_of(1 << (self.sps_stages - 1)) {
            return Err(Error::config(
                "embed_dim",
                format!(
                    "must be divisible by 2^(sps_stages-1) = {}",
                    1 << (self.sps_stages - 1)
                ),
            ));
        }
        if !(self.attn_scale > 0.0) {
            return Err(Error::config("attn_scale", "must be positive"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config(
                "bn_eps",
                "eps must be positive and momentum in [0, 1]",
            ));
        }
        self.lif().validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    NormScale,
    NormShift,
    TimeSteps,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Non-trainable state (batchnorm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
struct ConvSpec {
    weight: usize,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Debug)]
struct NormSpec {
    scale: usize,
    shift: usize,
    running_mean: usize,
    running_var: usize,
}

/// One LIF layer together with the conv/BN that produces its drive.
#[derive(Clone, Debug)]
struct Unit {
    name: String,
    group: LayerGroup,
    conv: Option<ConvSpec>,
    norm: Option<NormSpec>,
    lif: LifParams,
    time_params: Option<usize>,
}

#[derive(Clone, Debug)]
struct Block {
    q: usize,
    k: usize,
    v: usize,
    attn: usize,
    proj: usize,
    mlp1: usize,
    mlp2: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    units: Vec<Unit>,
    sps: Vec<usize>,
    blocks: Vec<Block>,
    head: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Batch statistics and trainable parameter leaves.
    pub train: bool,
    /// In eval mode, evaluate each masked layer's conv only on its active steps.
    pub skip_inactive: bool,
    /// Collect a [`Trace`] for profiling and histograms.
    pub record: bool,
    /// Replace every mask with all ones (no gradient reaches the time parameters).
    pub force_full_masks: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions {
            train: true,
            ..Default::default()
        }
    }

    pub fn eval() -> Self {
        ForwardOptions {
            skip_inactive: true,
            ..Default::default()
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Graph node of every parameter, indexed like [`Model::params`].
    pub param_vars: Vec<Var>,
    /// Mask node of each LIF layer (None for unmasked layers).
    pub masks: Vec<Option<Var>>,
    /// Batch statistics per unit, present in train mode for normalized units.
    pub norm_stats: Vec<Option<BatchNormStats<f32>>>,
    pub trace: Option<Trace>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// First convolution on the analog image: dense MACs.
    Embedding,
    /// Dot products with a spike-valued operand: accumulates.
    Synaptic,
    /// Attention scale: one multiply per nonzero output element.
    AttentionScale,
    /// Residual addition of a spike tensor.
    Residual,
    /// Linear classifier on time-averaged features; zero features are skipped.
    Head,
}

/// Operation counts of one compute op over a recorded batch.
#[derive(Clone, Debug)]
pub struct OpRecord {
    pub name: String,
    pub kind: OpKind,
    /// Dense multiply-accumulates per sample per time step.
    pub flops: u64,
    pub weights: u64,
    /// Size of the gating operand per sample per step (0 for dense ops).
    pub input_slots: u64,
    /// Nonzero entries of the spike operand per time step, over the batch.
    pub input_nonzero: Vec<u64>,
    /// Time steps on which the op executes.
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct UnitRecord {
    pub name: String,
    pub group: LayerGroup,
    pub neurons: u64,
    pub active_steps: usize,
    pub masked: bool,
    /// The tensor entering the LIF, `[T_max, batch · neurons]`.
    pub drive: Tensor,
    /// Nonzero masked outputs per step, over the batch.
    pub spikes: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Trace {
    pub batch: usize,
    pub t_max: usize,
    pub units: Vec<UnitRecord>,
    pub ops: Vec<OpRecord>,
}

/// Summary of one masked (or unmasked) LIF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInfo {
    pub name: String,
    pub group: LayerGroup,
    pub masked: bool,
}

struct Ctx<'a> {
    g: &'a mut Graph<f32>,
    opts: ForwardOptions,
    pv: Vec<Var>,
    masks: Vec<Option<Var>>,
    actives: Vec<usize>,
    norm_stats: Vec<Option<BatchNormStats<f32>>>,
    trace: Option<Trace>,
    batch: usize,
}

fn uniform_init(rng: &mut rng::Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (3.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn count_nonzero_rows(t: &Tensor, steps: usize) -> Vec<u64> {
    let per = t.numel() / steps;
    t.data()
        .chunks(per)
        .map(|c| c.iter().filter(|v| **v != 0.0).count() as u64)
        .collect()
}

impl Model {
    /// Builds a model with every masked layer starting at `t_init` active steps.
    pub fn build(config: &ModelConfig, t_init: usize, seed: u64) -> Result<Model> {
        config.validate()?;
        if config.dtss {
            spiking::init_time_params(config.t_max, t_init)?;
        }
        let mut m = Model {
            config: config.clone(),
            params: Vec::new(),
            buffers: Vec::new(),
            units: Vec::new(),
            sps: Vec::new(),
            blocks: Vec::new(),
            head: 0,
        };
        let mut rng = rng::stream(seed, "model-init");
        let d = config.embed_dim;
        let down = config.downsampling_stages();
        let mut cin = config.channels;
        for s in 0..config.sps_stages {
            let cout = d >> (config.sps_stages - 1 - s);
            // 4x4/2 halves the side exactly; later stages keep it with 3x3/1.
            let geom = if s < down { (4, 2) } else { (3, 1) };
            let u = m.add_unit(
                &mut rng,
                &format!("sps.{s}"),
                LayerGroup::Sps,
                Some((cin, cout, geom.0, geom.1, 1)),
                t_init,
            )?;
            m.sps.push(u);
            cin = cout;
        }
        let hidden = d * config.mlp_ratio;
        for b in 0..config.blocks {
            let p = format!("block{b}");
            let conv1 = |i, o| Some((i, o, 1, 1, 0));
            let q = m.add_unit(
                &mut rng,
                &format!("{p}.q"),
                LayerGroup::Qkv,
                conv1(d, d),
                t_init,
            )?;
            let k = m.add_unit(
                &mut rng,
                &format!("{p}.k"),
                LayerGroup::Qkv,
                conv1(d, d),
                t_init,
            )?;
            let v = m.add_unit(
                &mut rng,
                &format!("{p}.v"),
                LayerGroup::Qkv,
                conv1(d, d),
                t_init,
            )?;
            let attn = m.add_unit(
                &mut rng,
                &format!("{p}.attn"),
                LayerGroup::Attn,
                None,
                t_init,
            )?;
            let proj = m.add_unit(
                &mut rng,
                &format!("{p}.proj"),
                LayerGroup::Attn,
                conv1(d, d),
                t_init,
            )?;
            let mlp1 = m.add_unit(
                &mut rng,
                &format!("{p}.mlp1"),
                LayerGroup::Mlp,
                conv1(d, hidden),
                t_init,
            )?;
            let mlp2 = m.add_unit(
                &mut rng,
                &format!("{p}.mlp2"),
                LayerGroup::Mlp,
                conv1(hidden, d),
                t_init,
            )?;
            m.blocks.push(Block {
                q,
                k,
                v,
                attn,
                proj,
                mlp1,
                mlp2,
            });
        }
        let w = uniform_init(&mut rng, &[d, config.num_classes], d);
        m.head = m.push_param("head.weight", w, ParamKind::Weight);
        Ok(m)
    }

    fn push_param(&mut self, name: &str, value: Tensor, kind: ParamKind) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            value,
            kind,
        });
        self.params.len() - 1
    }

    fn push_buffer(&mut self, name: &str, value: Tensor) -> usize {
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        self.buffers.len() - 1
    }

    fn add_unit(
        &mut self,
        rng: &mut rng::Rng,
        name: &str,
        group: LayerGroup,
        conv: Option<(usize, usize, usize, usize, usize)>,
        t_init: usize,
    ) -> Result<usize> {
        let (conv, norm) = match conv {
            Some((cin, cout, k, stride, padding)) => {
                let w = uniform_init(rng, &[cout, cin, k, k], cin * k * k);
                let weight = self.push_param(&format!("{name}.conv.weight"), w, ParamKind::Weight);
                let scale = self.push_param(
                    &format!("{name}.bn.scale"),
                    Tensor::full(&[cout], 1.0),
                    ParamKind::NormScale,
                );
                let shift = self.push_param(
                    &format!("{name}.bn.shift"),
                    Tensor::zeros(&[cout]),
                    ParamKind::NormShift,
                );
                let running_mean =
                    self.push_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]));
                let running_var = self.push_buffer(
                    &format!("{name}.bn.running_var"),
                    Tensor::full(&[cout], 1.0),
                );
                (
                    Some(ConvSpec {
                        weight,
                        stride,
                        padding,
                    }),
                    Some(NormSpec {
                        scale,
                        shift,
                        running_mean,
                        running_var,
                    }),
                )
            }
            None => (None, None),
        };
        let time_params = if self.config.dtss {
            let tp = spiking::init_time_params(self.config.t_max, t_init)?;
            Some(self.push_param(
                &format!("{name}.time_params"),
                Tensor::from_vec(tp),
                ParamKind::TimeSteps,
            ))
        } else {
            None
        };
        self.units.push(Unit {
            name: name.to_string(),
            group,
            conv,
            norm,
            lif: self.config.lif(),
            time_params,
        });
        Ok(self.units.len() - 1)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// All LIF layers in forward order.
    pub fn layers(&self) -> Vec<LayerInfo> {
        self.units
            .iter()
            .map(|u| LayerInfo {
                name: u.name.clone(),
                group: u.group,
                masked: u.time_params.is_some(),
            })
            .collect()
    }

    fn unit_index(&self, name: &str) -> Result<usize> {
        self.units
            .iter()
            .position(|u| u.name == name)
            .ok_or_else(|| Error::Argument(format!("no layer named `{name}`")))
    }

    /// Overrides the neuron constants of one layer.
    pub fn set_lif(&mut self, layer: &str, lif: LifParams) -> Result<()> {
        lif.validate()?;
        let i = self.unit_index(layer)?;
        self.units[i].lif = lif;
        Ok(())
    }

    /// Index into [`Model::params`] of a layer's time-step parameters.
    pub fn time_param_index(&self, layer: &str) -> Result<Option<usize>> {
        Ok(self.units[self.unit_index(layer)?].time_params)
    }

    /// Current binary mask of every layer (all ones for unmasked layers).
    pub fn masks(&self) -> Result<Vec<Vec<f32>>> {
        self.units.iter().map(|u| self.unit_mask(u)).collect()
    }

    fn unit_mask(&self, u: &Unit) -> Result<Vec<f32>> {
        match u.time_params {
            Some(i) => Ok(spiking::dtss_mask(&spiking::dtss_scores(
                self.params[i].value.data(),
            )?)),
            None => Ok(vec![1.0; self.config.t_max]),
        }
    }

    /// Active steps per layer.
    pub fn active_steps(&self) -> Result<Vec<usize>> {
        self.masks()?
            .iter()
            .map(|m| spiking::active_steps(m))
            .collect()
    }

    /// Mean number of active steps over all LIF layers.
    pub fn t_avg(&self) -> Result<f64> {
        let steps = self.active_steps()?;
        Ok(steps.iter().sum::<usize>() as f64 / steps.len() as f64)
    }

    /// Clamps every time-step parameter to be non-negative.
    pub fn project_time_params(&mut self) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| p.kind == ParamKind::TimeSteps)
        {
            spiking::project_nonneg(p.value.data_mut());
        }
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[Option<BatchNormStats<f32>>]) {
        let mom = self.config.bn_momentum;
        for (u, s) in self.units.iter().zip(stats) {
            let (Some(n), Some(s)) = (&u.norm, s) else {
                continue;
            };
            let unbias = if s.count > 1 {
                s.count as f32 / (s.count - 1) as f32
            } else {
                1.0
            };
            let rm = self.buffers[n.running_mean].value.data_mut();
            for (r, &m) in rm.iter_mut().zip(&s.mean) {
                *r = (1.0 - mom) * *r + mom * m;
            }
            let rv = self.buffers[n.running_var].value.data_mut();
            for (r, &v) in rv.iter_mut().zip(&s.var) {
                *r = (1.0 - mom) * *r + mom * v * unbias;
            }
        }
    }

    /// Runs all `T_max` steps on `[batch, channels, h, w]` images with the
    /// image presented unchanged at every step.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        images: &Tensor,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != c.channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::Shape {
                op: "forward",
                lhs: s.to_vec(),
                rhs: vec![0, c.channels, c.image_size, c.image_size],
            });
        }
        let batch = s[0];
        let t = c.t_max;
        let pv = self
            .params
            .iter()
            .map(|p| {
                if opts.train {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        let actives = if opts.force_full_masks {
            vec![t; self.units.len()]
        } else {
            self.active_steps()?
        };
        let mut cx = Ctx {
            g,
            opts,
            pv,
            masks: vec![None; self.units.len()],
            actives,
            norm_stats: vec![None; self.units.len()],
            trace: opts.record.then(|| Trace {
                batch,
                t_max: t,
                units: Vec::new(),
                ops: Vec::new(),
            }),
            batch,
        };

        let mut repeated = Vec::with_capacity(t * images.numel());
        for _ in 0..t {
            repeated.extend_from_slice(images.data());
        }
        let mut shape = s.to_vec();
        shape[0] *= t;
        let mut x = cx.g.constant(Tensor::new(shape, repeated)?);

        for (i, &u) in self.sps.iter().enumerate() {
            let kind = if i == 0 {
                OpKind::Embedding
            } else {
                OpKind::Synaptic
            };
            x = self.conv_unit(&mut cx, x, u, kind)?;
        }
        let (hh, ww) = (cx.g.shape(x)[2], cx.g.shape(x)[3]);
        for b in &self.blocks {
            x = self.block(&mut cx, x, b, hh, ww)?;
        }

        // Head: spatial mean, then mean over the final layer's active steps.
        let d = c.embed_dim;
        let pooled = cx.g.mean_trailing(x, 2)?;
        let pooled = cx.g.reshape(pooled, &[t, batch * d])?;
        let last = self.units.len() - 1;
        let active = cx.actives[last];
        let weights: Vec<f32> = (0..t).map(|s| if s < active { 1.0 } else { 0.0 }).collect();
        let denom = if active > 0 { active as f32 } else { 1.0 };
        let feat = cx.g.time_average(pooled, &weights, denom)?;
        let feat = cx.g.reshape(feat, &[batch, d])?;
        let logits = cx.g.matmul(feat, cx.pv[self.head])?;
        cx.g.set_label(logits, "head");
        if let Some(tr) = cx.trace.as_mut() {
            let nz = vec![cx.g.value(feat).count_nonzero() as u64];
            tr.ops.push(OpRecord {
                name: "head".into(),
                kind: OpKind::Head,
                flops: (d * c.num_classes) as u64,
                weights: (d * c.num_classes) as u64,
                input_slots: d as u64,
                input_nonzero: nz,
                steps: 1,
            });
        }
        if let Some(at) = cx.g.first_non_finite() {
            return Err(Error::Numeric(format!("non-finite activation at {at}")));
        }
        Ok(ForwardOutput {
            logits,
            param_vars: cx.pv,
            masks: cx.masks,
            norm_stats: cx.norm_stats,
            trace: cx.trace,
        })
    }

    fn block(&self, cx: &mut Ctx<'_>, x: Var, b: &Block, hh: usize, ww: usize) -> Result<Var> {
        let c = &self.config;
        let (d, heads) = (c.embed_dim, c.heads);
        let dh = d / heads;
        let n = hh * ww;
        let tb = c.t_max * cx.batch;

        let q = self.conv_unit(cx, x, b.q, OpKind::Synaptic)?;
        let k = self.conv_unit(cx, x, b.k, OpKind::Synaptic)?;
        let v = self.conv_unit(cx, x, b.v, OpKind::Synaptic)?;
        let q4 = cx.g.reshape(q, &[tb, heads, dh, n])?;
        let q4 = cx.g.permute(q4, &[0, 1, 3, 2])?;
        let kt = cx.g.reshape(k, &[tb, heads, dh, n])?;
        let v4 = cx.g.reshape(v, &[tb, heads, dh, n])?;
        let v4 = cx.g.permute(v4, &[0, 1, 3, 2])?;
        let scores = cx.g.matmul(q4, kt)?;
        let mixed = cx.g.matmul(scores, v4)?;
        let scaled = cx.g.scale(mixed, c.attn_scale);
        let back = cx.g.permute(scaled, &[0, 1, 3, 2])?;
        let drive = cx.g.reshape(back, &[tb, d, hh, ww])?;
        if let Some(tr) = cx.trace.as_mut() {
            let steps = cx.actives[b.attn];
            let pair = (heads * n * n * dh) as u64;
            let k_nz = count_nonzero_rows(cx.g.value(k), c.t_max);
            let v_nz = count_nonzero_rows(cx.g.value(v), c.t_max);
            let s_nz = count_nonzero_rows(cx.g.value(mixed), c.t_max);
            let name = &self.units[b.attn].name;
            tr.ops.push(OpRecord {
                name: format!("{name}.qk"),
                kind: OpKind::Synaptic,
                flops: pair,
                weights: 0,
                input_slots: (d * n) as u64,
                input_nonzero: k_nz,
                steps,
            });
            tr.ops.push(OpRecord {
                name: format!("{name}.av"),
                kind: OpKind::Synaptic,
                flops: pair,
                weights: 0,
                input_slots: (d * n) as u64,
                input_nonzero: v_nz,
                steps,
            });
            tr.ops.push(OpRecord {
                name: format!("{name}.scale"),
                kind: OpKind::AttentionScale,
                flops: (d * n) as u64,
                weights: 0,
                input_slots: (d * n) as u64,
                input_nonzero: s_nz,
                steps,
            });
        }
        let a = self.spiking_stage(cx, drive, b.attn)?;
        let p = self.conv_unit(cx, a, b.proj, OpKind::Synaptic)?;
        self.record_residual(cx, p, b.proj, (d * n) as u64);
        let x = cx.g.add(x, p)?;

        let m1 = self.conv_unit(cx, x, b.mlp1, OpKind::Synaptic)?;
        let m2 = self.conv_unit(cx, m1, b.mlp2, OpKind::Synaptic)?;
        self.record_residual(cx, m2, b.mlp2, (d * n) as u64);
        cx.g.add(x, m2)
    }

    fn record_residual(&self, cx: &mut Ctx<'_>, branch: Var, unit: usize, elems: u64) {
        let Some(tr) = cx.trace.as_mut() else {
            return;
        };
        let nz = count_nonzero_rows(cx.g.value(branch), self.config.t_max);
        let steps = cx.actives[unit];
        tr.ops.push(OpRecord {
            name: format!("{}.residual", self.units[unit].name),
            kind: OpKind::Residual,
            flops: elems,
            weights: 0,
            input_slots: elems,
            input_nonzero: nz,
            steps,
        });
    }

    /// conv → BN → LIF → mask, on a time-folded input.
    fn conv_unit(&self, cx: &mut Ctx<'_>, x: Var, ui: usize, kind: OpKind) -> Result<Var> {
        let u = &self.units[ui];
        let conv = u.conv.as_ref().expect("conv unit");
        let norm = u.norm.as_ref().expect("normalized unit");
        let t = self.config.t_max;
        let rows = if !cx.opts.train && cx.opts.skip_inactive {
            cx.actives[ui] * cx.batch
        } else {
            t * cx.batch
        };
        let y =
            cx.g.conv2d_rows(x, cx.pv[conv.weight], conv.stride, conv.padding, rows)?;
        cx.g.set_label(y, format!("{}.conv", u.name));
        if let Some(tr) = cx.trace.as_mut() {
            let xs = cx.g.shape(x).to_vec();
            let ys = cx.g.shape(y).to_vec();
            let w = self.params[conv.weight].value.shape();
            let slots = (xs[1] * xs[2] * xs[3]) as u64;
            let per_out = (w[1] * w[2] * w[3]) as u64;
            let flops = per_out * (ys[1] * ys[2] * ys[3]) as u64;
            let nz = if kind == OpKind::Embedding {
                vec![]
            } else {
                count_nonzero_rows(cx.g.value(x), t)
            };
            let steps = cx.actives[ui];
            tr.ops.push(OpRecord {
                name: format!("{}.conv", u.name),
                kind,
                flops,
                weights: self.params[conv.weight].value.numel() as u64,
                input_slots: if kind == OpKind::Embedding { 0 } else { slots },
                input_nonzero: nz,
                steps,
            });
        }
        let (scale, shift) = (cx.pv[norm.scale], cx.pv[norm.shift]);
        let eps = self.config.bn_eps;
        let (y, stats) = if cx.opts.train {
            cx.g.batchnorm(y, scale, shift, NormMode::Batch { eps })?
        } else {
            cx.g.batchnorm(
                y,
                scale,
                shift,
                NormMode::Running {
                    mean: self.buffers[norm.running_mean].value.data(),
                    var: self.buffers[norm.running_var].value.data(),
                    eps,
                },
            )?
        };
        cx.g.set_label(y, format!("{}.bn", u.name));
        cx.norm_stats[ui] = stats;
        self.spiking_stage(cx, y, ui)
    }

    /// LIF over the unfolded time axis, then the layer's mask.
    fn spiking_stage(&self, cx: &mut Ctx<'_>, drive: Var, ui: usize) -> Result<Var> {
        let u = &self.units[ui];
        let t = self.config.t_max;
        let folded = cx.g.shape(drive).to_vec();
        let per_step = cx.g.value(drive).numel() / t;
        let d = cx.g.reshape(drive, &[t, per_step])?;
        let mut y = cx.g.lif(d, u.lif)?;
        cx.g.set_label(y, format!("{}.lif", u.name));
        if let Some(tpi) = u.time_params {
            let tm = if cx.opts.force_full_masks {
                cx.g.constant(Tensor::full(&[t], 1.0))
            } else {
                let ts = cx.g.suffix_sum(cx.pv[tpi])?;
                cx.g.threshold(ts)
            };
            cx.masks[ui] = Some(tm);
            y = cx.g.time_mask(y, tm)?;
        }
        if let Some(tr) = cx.trace.as_mut() {
            let rec = UnitRecord {
                name: u.name.clone(),
                group: u.group,
                neurons: (per_step / cx.batch) as u64,
                active_steps: cx.actives[ui],
                masked: u.time_params.is_some(),
                drive: cx.g.value(d).clone(),
                spikes: count_nonzero_rows(cx.g.value(y), t),
            };
            tr.units.push(rec);
        }
        cx.g.reshape(y, &folded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(batch: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test-images");
        let data = (0..batch * 256).map(|_| r.random_range(0.0..1.0)).collect();
        Tensor::new(vec![batch, 1, 16, 16], data).unwrap()
    }

    #[test]
    fn one_block_32_wide_logit_shape() {
        let m = Model::build(&ModelConfig::default(), 2, 0).unwrap();
        let mut g = Graph::new();
        let out = m
            .forward(&mut g, &images(3, 1), ForwardOptions::eval())
            .unwrap();
        assert_eq!(g.shape(out.logits), &[3, 10]);
    }

    #[test]
    fn layer_census() {
        let m = Model::build(&ModelConfig::default(), 2, 0).unwrap();
        let layers = m.layers();
        let names: Vec<&str> = layers.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "sps.0",
                "sps.1",
                "block0.q",
                "block0.k",
                "block0.v",
                "block0.attn",
                "block0.proj",
                "block0.mlp1",
                "block0.mlp2"
            ]
        );
        let count = |g| layers.iter().filter(|l| l.group == g).count();
        assert_eq!(
            [
                LayerGroup::Sps,
                LayerGroup::Qkv,
                LayerGroup::Attn,
                LayerGroup::Mlp
            ]
            .map(count),
            [2, 3, 2, 2]
        );
        assert!(layers.iter().all(|l| l.masked));
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let bad = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        let err = Model::build(&bad, 2, 0).unwrap_err().to_string();
        assert!(err.contains("heads"), "{err}");
        let bad = ModelConfig {
            patch_size: 3,
            image_size: 15,
            ..Default::default()
        };
        assert!(Model::build(&bad, 2, 0).is_err());
        assert!(Model::build(&ModelConfig::default(), 5, 0).is_err());
    }

    #[test]
    fn single_step_network() {
        let cfg = ModelConfig {
            t_max: 1,
            ..Default::default()
        };
        let m = Model::build(&cfg, 1, 0).unwrap();
        assert!(m.masks().unwrap().iter().all(|mk| mk == &vec![1.0]));
        let mut g = Graph::new();
        m.forward(&mut g, &images(2, 3), ForwardOptions::train())
            .unwrap();
        assert_eq!(m.t_avg().unwrap(), 1.0);
    }

    #[test]
    fn t_avg_is_mean_of_active_steps() {
        let mut m = Model::build(&ModelConfig::default(), 4, 0).unwrap();
        assert_eq!(m.t_avg().unwrap(), 4.0);
        let set = |m: &mut Model, layer: &str, steps: usize| {
            let i = m.time_param_index(layer).unwrap().unwrap();
            m.params_mut()[i].value =
                Tensor::from_vec(spiking::init_time_params(4, steps).unwrap());
        };
        set(&mut m, "sps.0", 1);
        set(&mut m, "block0.q", 2);
        // 7 layers at 4, one at 1, one at 2
        assert_eq!(m.t_avg().unwrap(), (7.0 * 4.0 + 3.0) / 9.0);
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let m = Model::build(&ModelConfig::default(), 2, 0).unwrap();
        let one = images(1, 9);
        let mut both = one.data().to_vec();
        both.extend_from_slice(one.data());
        let x = Tensor::new(vec![2, 1, 16, 16], both).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, &x, ForwardOptions::eval()).unwrap();
        let l = g.value(out.logits).data();
        assert_eq!(&l[..10], &l[10..]);
    }
}
