//! Desk-scale reference networks buildable in the four experimental modes.
//!
//! * MLP: flatten → linear(h1) → σ → linear(h2) → σ → head(K)
//! * CNN: temporal conv (1×k, same padding) → σ → spatial conv (C×1, valid)
//!   → σ → mean over time → head(K)
//!
//! The hidden layers are plain, adapter-only or subject-conditioned depending
//! on the mode; the classification head is always a plain shared layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    AdapterBank, ConvShape, LinearShape, LowRank, LowRankConv, LowRankLinear, ParamCount,
    PlainConv, PlainLinear, SubjectConditionedConv, SubjectConditionedLinear, SubjectId,
};
use crate::rng;
use crate::tensor::{Activation, ConvGeometry, Graph, Param, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    Cnn,
}

/// Experimental condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One plain model trained on pooled data.
    Agnostic,
    /// One plain model per subject, trained from scratch.
    Specific,
    /// One entirely low-rank model per subject.
    Lora,
    /// One model with shared weights and per-subject adapters.
    SubjectConditioned,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::Agnostic,
        Mode::Specific,
        Mode::Lora,
        Mode::SubjectConditioned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Agnostic => "agnostic",
            Mode::Specific => "specific",
            Mode::Lora => "lora",
            Mode::SubjectConditioned => "subject_conditioned",
        }
    }

    pub fn per_subject(self) -> bool {
        matches!(self, Mode::Specific | Mode::Lora)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub mode: Mode,
    /// Per-trial feature shape: `[d]` for the MLP, `[C, T]` for the CNN.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub subjects: usize,
    /// Hidden widths of the MLP.
    pub hidden: Vec<usize>,
    /// Output channels of the temporal and spatial convolutions.
    pub channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub rank: usize,
    pub alpha: f64,
    pub activation: Activation,
    pub bias: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::Mlp,
            mode: Mode::SubjectConditioned,
            input_shape: vec![16],
            classes: 4,
            subjects: 6,
            hidden: vec![64, 32],
            channels: vec![8, 16],
            temporal_kernel: 9,
            rank: 4,
            alpha: 1.0,
            activation: Activation::Elu,
            bias: true,
            seed: 1,
        }
    }
}

impl ModelConfig {
    fn low_rank(&self) -> LowRank {
        LowRank {
            rank: self.rank,
            alpha: self.alpha,
        }
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.classes == 0 || self.subjects == 0 {
            return fail("classes and subjects must be positive".into());
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return fail(format!("invalid input shape {:?}", self.input_shape));
        }
        match self.architecture {
            Architecture::Mlp => {
                if self.hidden.len() != 2 || self.hidden.contains(&0) {
                    return fail(format!("mlp needs two positive hidden widths, got {:?}", self.hidden));
                }
            }
            Architecture::Cnn => {
                if self.input_shape.len() != 2 {
                    return fail(format!("cnn input must be [C, T], got {:?}", self.input_shape));
                }
                if self.channels.len() != 2 || self.channels.contains(&0) {
                    return fail(format!("cnn needs two positive channel counts, got {:?}", self.channels));
                }
                if self.temporal_kernel % 2 == 0 || self.temporal_kernel > self.input_shape[1] {
                    return fail(format!(
                        "temporal kernel {} must be odd and at most T = {}",
                        self.temporal_kernel, self.input_shape[1]
                    ));
                }
            }
        }
        Ok(())
    }

    fn linear_shapes(&self) -> Vec<LinearShape> {
        let d: usize = self.input_shape.iter().product();
        let widths = [d, self.hidden[0], self.hidden[1]];
        widths
            .windows(2)
            .map(|w| LinearShape {
                in_features: w[0],
                out_features: w[1],
                bias: self.bias,
                activation: self.activation,
            })
            .collect()
    }

    fn conv_shapes(&self) -> Vec<ConvShape> {
        let (c, k) = (self.input_shape[0], self.temporal_kernel);
        vec![
            ConvShape {
                in_channels: 1,
                out_channels: self.channels[0],
                kernel_h: 1,
                kernel_w: k,
                geometry: ConvGeometry::with_padding(1, 0, k / 2),
                bias: self.bias,
                activation: self.activation,
            },
            ConvShape {
                in_channels: self.channels[0],
                out_channels: self.channels[1],
                kernel_h: c,
                kernel_w: 1,
                geometry: ConvGeometry::new(1, 0),
                bias: self.bias,
                activation: self.activation,
            },
        ]
    }

    fn embedding_dim(&self) -> usize {
        match self.architecture {
            Architecture::Mlp => self.hidden[1],
            Architecture::Cnn => self.channels[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LinearVariant {
    Plain(PlainLinear),
    LowRank(LowRankLinear),
    Conditioned(SubjectConditionedLinear),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvVariant {
    Plain(PlainConv),
    LowRank(LowRankConv),
    Conditioned(SubjectConditionedConv),
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Mlp(Vec<LinearVariant>),
    Cnn(Vec<ConvVariant>),
}

/// Pre-activation parts of one variant layer: shared path and adapter path.
struct Parts {
    general: Var,
    adapter: Option<Var>,
}

impl LinearVariant {
    fn parts(&self, g: &mut Graph, x: Var, ids: &[Option<SubjectId>]) -> Result<Parts> {
        Ok(match self {
            LinearVariant::Plain(l) => Parts {
                general: l.pre_activation(g, x)?,
                adapter: None,
            },
            LinearVariant::LowRank(l) => Parts {
                general: l.pre_activation(g, x)?,
                adapter: None,
            },
            LinearVariant::Conditioned(l) => {
                let (general, adapter) = l.forward_parts(g, x, ids)?;
                Parts {
                    general,
                    adapter: Some(adapter),
                }
            }
        })
    }

    fn activation(&self) -> Activation {
        match self {
            LinearVariant::Plain(l) => l.shape.activation,
            LinearVariant::LowRank(l) => l.shape.activation,
            LinearVariant::Conditioned(l) => l.shape.activation,
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            LinearVariant::Plain(l) => l.params(),
            LinearVariant::LowRank(l) => l.params(),
            LinearVariant::Conditioned(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            LinearVariant::Plain(l) => l.params_mut(),
            LinearVariant::LowRank(l) => l.params_mut(),
            LinearVariant::Conditioned(l) => l.params_mut(),
        }
    }

    fn count(&self, subjects: usize) -> ParamCount {
        match self {
            LinearVariant::Plain(l) => l.count(),
            LinearVariant::LowRank(l) => l.count(subjects),
            LinearVariant::Conditioned(l) => l.count(),
        }
    }
}

impl ConvVariant {
    fn parts(&self, g: &mut Graph, x: Var, ids: &[Option<SubjectId>]) -> Result<Parts> {
        Ok(match self {
            ConvVariant::Plain(l) => Parts {
                general: l.pre_activation(g, x)?,
                adapter: None,
            },
            ConvVariant::LowRank(l) => Parts {
                general: l.pre_activation(g, x)?,
                adapter: None,
            },
            ConvVariant::Conditioned(l) => {
                let (general, adapter) = l.forward_parts(g, x, ids)?;
                Parts {
                    general,
                    adapter: Some(adapter),
                }
            }
        })
    }

    fn activation(&self) -> Activation {
        match self {
            ConvVariant::Plain(l) => l.shape.activation,
            ConvVariant::LowRank(l) => l.shape.activation,
            ConvVariant::Conditioned(l) => l.shape.activation,
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            ConvVariant::Plain(l) => l.params(),
            ConvVariant::LowRank(l) => l.params(),
            ConvVariant::Conditioned(l) => l.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            ConvVariant::Plain(l) => l.params_mut(),
            ConvVariant::LowRank(l) => l.params_mut(),
            ConvVariant::Conditioned(l) => l.params_mut(),
        }
    }

    fn count(&self, subjects: usize) -> ParamCount {
        match self {
            ConvVariant::Plain(l) => l.count(),
            ConvVariant::LowRank(l) => l.count(subjects),
            ConvVariant::Conditioned(l) => l.count(),
        }
    }
}

/// Per-sample embeddings at the last hidden layer's pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTap {
    /// Shared path only.
    pub general: Tensor,
    /// Adapter path only.
    pub adapter: Tensor,
    /// general + adapter.
    pub fused: Tensor,
}

/// One network instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    architecture: Architecture,
    input_shape: Vec<usize>,
    body: Body,
    head: PlainLinear,
}

impl Network {
    fn build(cfg: &ModelConfig, layer_mode: Mode, seed: u64) -> Result<Self> {
        let low_rank = cfg.low_rank();
        let body = match cfg.architecture {
            Architecture::Mlp => Body::Mlp(
                cfg.linear_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(i, shape)| {
                        let name = format!("body.{i}");
                        Ok(match layer_mode {
                            Mode::Agnostic | Mode::Specific => {
                                LinearVariant::Plain(PlainLinear::new(&name, shape, seed))
                            }
                            Mode::Lora => LinearVariant::LowRank(LowRankLinear::new(&name, shape, low_rank, seed)?),
                            Mode::SubjectConditioned => LinearVariant::Conditioned(
                                SubjectConditionedLinear::new(&name, shape, low_rank, cfg.subjects, seed)?,
                            ),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            Architecture::Cnn => Body::Cnn(
                cfg.conv_shapes()
                    .into_iter()
                    .enumerate()
                    .map(|(i, shape)| {
                        let name = format!("body.{i}");
                        Ok(match layer_mode {
                            Mode::Agnostic | Mode::Specific => ConvVariant::Plain(PlainConv::new(&name, shape, seed)),
                            Mode::Lora => ConvVariant::LowRank(LowRankConv::new(&name, shape, low_rank, seed)?),
                            Mode::SubjectConditioned => ConvVariant::Conditioned(SubjectConditionedConv::new(
                                &name,
                                shape,
                                low_rank,
                                cfg.subjects,
                                seed,
                            )?),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let head = PlainLinear::new(
            "head",
            LinearShape {
                in_features: cfg.embedding_dim(),
                out_features: cfg.classes,
                bias: cfg.bias,
                activation: Activation::Identity,
            },
            seed,
        );
        Ok(Network {
            architecture: cfg.architecture,
            input_shape: cfg.input_shape.clone(),
            body,
            head,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn is_conditioned(&self) -> bool {
        match &self.body {
            Body::Mlp(ls) => ls.iter().any(|l| matches!(l, LinearVariant::Conditioned(_))),
            Body::Cnn(ls) => ls.iter().any(|l| matches!(l, ConvVariant::Conditioned(_))),
        }
    }

    fn input(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::dim(
                "network input",
                format!("got {s:?}, expected [B, {:?}]", self.input_shape),
            ));
        }
        match self.architecture {
            Architecture::Mlp => g.reshape(x, &[s[0], s[1..].iter().product()]),
            Architecture::Cnn => g.reshape(x, &[s[0], 1, s[1], s[2]]),
        }
    }

    fn run(&self, g: &mut Graph, x: Var, ids: &[Option<SubjectId>], tap: bool) -> Result<(Var, Option<[Var; 3]>)> {
        let mut h = self.input(g, x)?;
        let mut taps = None;
        let last = match &self.body {
            Body::Mlp(ls) => ls.len() - 1,
            Body::Cnn(ls) => ls.len() - 1,
        };
        for i in 0..=last {
            let (parts, act) = match &self.body {
                Body::Mlp(ls) => (ls[i].parts(g, h, ids)?, ls[i].activation()),
                Body::Cnn(ls) => (ls[i].parts(g, h, ids)?, ls[i].activation()),
            };
            let pre = match parts.adapter {
                Some(a) => g.add(parts.general, a)?,
                None => parts.general,
            };
            if tap && i == last {
                let Some(adapter) = parts.adapter else {
                    return Err(Error::Usage("embedding taps need a subject-conditioned model".into()));
                };
                let mut vars = [parts.general, adapter, pre];
                if self.architecture == Architecture::Cnn {
                    for v in &mut vars {
                        *v = g.mean_spatial(*v)?;
                    }
                }
                taps = Some(vars);
            }
            h = g.activation(pre, act)?;
        }
        if self.architecture == Architecture::Cnn {
            h = g.mean_spatial(h)?;
        }
        Ok((self.head.forward(g, h)?, taps))
    }

    /// Logits for a batch `x` of shape `[B, input_shape...]`.
    pub fn forward(&self, g: &mut Graph, x: Var, ids: &[Option<SubjectId>]) -> Result<Var> {
        Ok(self.run(g, x, ids, false)?.0)
    }

    /// Logits plus the general/adapter/fused embeddings of the last hidden
    /// layer. Only subject-conditioned networks have an adapter path to tap.
    pub fn forward_with_taps(&self, x: &Tensor, ids: &[Option<SubjectId>]) -> Result<(Tensor, EmbeddingTap)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let (logits, taps) = self.run(&mut g, xv, ids, true)?;
        let [general, adapter, fused] = taps.expect("taps requested");
        Ok((
            g.value(logits).clone(),
            EmbeddingTap {
                general: g.value(general).clone(),
                adapter: g.value(adapter).clone(),
                fused: g.value(fused).clone(),
            },
        ))
    }

    pub fn logits(&self, x: &Tensor, ids: &[Option<SubjectId>]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let y = self.forward(&mut g, xv, ids)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = match &self.body {
            Body::Mlp(ls) => ls.iter().flat_map(LinearVariant::params).collect(),
            Body::Cnn(ls) => ls.iter().flat_map(ConvVariant::params).collect(),
        };
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = match &mut self.body {
            Body::Mlp(ls) => ls.iter_mut().flat_map(LinearVariant::params_mut).collect(),
            Body::Cnn(ls) => ls.iter_mut().flat_map(ConvVariant::params_mut).collect(),
        };
        out.extend(self.head.params_mut());
        out
    }

    pub fn count(&self, subjects: usize) -> Result<ParamCount> {
        let layers: Vec<ParamCount> = match &self.body {
            Body::Mlp(ls) => ls.iter().map(|l| l.count(subjects)).collect(),
            Body::Cnn(ls) => ls.iter().map(|l| l.count(subjects)).collect(),
        };
        layers
            .into_iter()
            .try_fold(self.head.count(), ParamCount::merge)
    }

    /// Subject-conditioned layers as adapter banks, by layer name.
    pub fn adapter_banks(&self) -> Vec<(&str, &dyn AdapterBank)> {
        match &self.body {
            Body::Mlp(ls) => ls
                .iter()
                .filter_map(|l| match l {
                    LinearVariant::Conditioned(c) => Some((c.name(), c as &dyn AdapterBank)),
                    _ => None,
                })
                .collect(),
            Body::Cnn(ls) => ls
                .iter()
                .filter_map(|l| match l {
                    ConvVariant::Conditioned(c) => Some((c.name(), c as &dyn AdapterBank)),
                    _ => None,
                })
                .collect(),
        }
    }

    /// Subjects with adapters in every conditioned layer.
    pub fn subjects(&self) -> Vec<SubjectId> {
        let first = match &self.body {
            Body::Mlp(ls) => ls.iter().find_map(|l| match l {
                LinearVariant::Conditioned(c) => Some(c.adapters().keys().copied().collect()),
                _ => None,
            }),
            Body::Cnn(ls) => ls.iter().find_map(|l| match l {
                ConvVariant::Conditioned(c) => Some(c.adapters().keys().copied().collect()),
                _ => None,
            }),
        };
        first.unwrap_or_default()
    }

    /// Adds a fresh adapter for `subject` to every conditioned layer.
    pub fn add_subject(&mut self, subject: SubjectId, seed: u64) -> Result<()> {
        if !self.is_conditioned() {
            return Err(Error::Usage("only subject-conditioned models take new subjects".into()));
        }
        if self.subjects().contains(&subject) {
            return Err(Error::Usage(format!("subject {subject} already has adapters")));
        }
        match &mut self.body {
            Body::Mlp(ls) => {
                for l in ls {
                    if let LinearVariant::Conditioned(c) = l {
                        c.add_adapter(subject, seed)?;
                    }
                }
            }
            Body::Cnn(ls) => {
                for l in ls {
                    if let ConvVariant::Conditioned(c) = l {
                        c.add_adapter(subject, seed)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Freezes everything except the adapters of `subject`.
    pub fn train_only_subject(&mut self, subject: SubjectId) {
        let marker = format!(".adapter.{subject}.");
        for p in self.params_mut() {
            p.frozen = !p.name.contains(&marker);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.params_mut() {
            p.frozen = false;
        }
    }

    /// Sets every adapter factor to zero.
    pub fn zero_adapters(&mut self) {
        for p in self.params_mut() {
            if p.name.contains(".adapter.") {
                p.value.data_mut().fill(0.0);
            }
        }
    }
}

/// A built model: one network, or one network per subject.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSet {
    Shared(Network),
    PerSubject(BTreeMap<SubjectId, Network>),
}

/// Builds the network(s) described by `cfg`. Shared weights are seeded by
/// parameter name, so a subject-conditioned and an agnostic model built from
/// the same seed share identical base weights.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelSet> {
    cfg.validate()?;
    if cfg.mode.per_subject() {
        let nets = (0..cfg.subjects)
            .map(|s| {
                let seed = rng::derive_seed(cfg.seed, &format!("subject.{s}"));
                Ok((SubjectId(s as u32), Network::build(cfg, cfg.mode, seed)?))
            })
            .collect::<Result<_>>()?;
        Ok(ModelSet::PerSubject(nets))
    } else {
        Ok(ModelSet::Shared(Network::build(cfg, cfg.mode, cfg.seed)?))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl ModelSet {
    pub fn networks(&self) -> Vec<&Network> {
        match self {
            ModelSet::Shared(n) => vec![n],
            ModelSet::PerSubject(m) => m.values().collect(),
        }
    }

    pub fn shared(&self) -> Option<&Network> {
        match self {
            ModelSet::Shared(n) => Some(n),
            ModelSet::PerSubject(_) => None,
        }
    }

    pub fn shared_mut(&mut self) -> Option<&mut Network> {
        match self {
            ModelSet::Shared(n) => Some(n),
            ModelSet::PerSubject(_) => None,
        }
    }

    /// Logits for a batch. Per-subject sets send each row to its subject's
    /// network and reject unknown or foreign subjects.
    pub fn logits(&self, x: &Tensor, ids: &[Option<SubjectId>]) -> Result<Tensor> {
        match self {
            ModelSet::Shared(n) => n.logits(x, ids),
            ModelSet::PerSubject(nets) => {
                if x.shape()[0] != ids.len() {
                    return Err(Error::dim("predict", format!("{} rows, {} ids", x.shape()[0], ids.len())));
                }
                let mut groups: BTreeMap<SubjectId, Vec<usize>> = BTreeMap::new();
                for (i, id) in ids.iter().enumerate() {
                    match id {
                        Some(s) if nets.contains_key(s) => groups.entry(*s).or_default().push(i),
                        Some(s) => {
                            return Err(Error::Usage(format!("no per-subject model for subject {s}")));
                        }
                        None => {
                            return Err(Error::Usage("per-subject models cannot serve unknown subjects".into()));
                        }
                    }
                }
                let mut out: Option<Vec<f64>> = None;
                let mut classes = 0;
                for (s, rows) in groups {
                    let mut g = Graph::new();
                    let xv = g.constant(x.clone())?;
                    let xs = g.gather_rows(xv, &rows)?;
                    let y = nets[&s].forward(&mut g, xs, &vec![Some(s); rows.len()])?;
                    let y = g.value(y);
                    classes = y.shape()[1];
                    let buf = out.get_or_insert_with(|| vec![0.0; ids.len() * classes]);
                    for (j, &r) in rows.iter().enumerate() {
                        buf[r * classes..(r + 1) * classes].copy_from_slice(y.row(j));
                    }
                }
                Tensor::new(vec![ids.len(), classes], out.unwrap_or_default())
            }
        }
    }

    pub fn predict(&self, x: &Tensor, ids: &[Option<SubjectId>]) -> Result<Vec<usize>> {
        let logits = self.logits(x, ids)?;
        Ok((0..logits.shape()[0]).map(|i| argmax(logits.row(i))).collect())
    }

    /// Parameter counts in the shared-plus-per-subject form. Subject-specific
    /// sets report one model's size as both total and active.
    pub fn count(&self, subjects: usize) -> Result<ParamCount> {
        match self {
            ModelSet::Shared(n) => n.count(subjects),
            ModelSet::PerSubject(nets) => {
                let one = nets
                    .values()
                    .next()
                    .ok_or_else(|| Error::Config("empty model set".into()))?
                    .count(subjects)?;
                if one.per_subject == 0 {
                    Ok(ParamCount {
                        shared: one.shared,
                        per_subject: 0,
                        subjects,
                    })
                } else {
                    Ok(one)
                }
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.networks().into_iter().flat_map(Network::params).collect()
    }
}
