use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::linear::scatter_adapters;
use super::{check_batch, normal_param, zero_param, Adapter, LowRank, ParamCount, SubjectId};
use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvGeometry, Graph, Param, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub geometry: ConvGeometry,
    pub bias: bool,
    pub activation: Activation,
}

impl ConvShape {
    fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn kernel_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Largest rank of the flattened `C_out × (C_in·kh·kw)` kernel.
    pub fn max_rank(&self) -> usize {
        self.out_channels.min(self.fan_in())
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::dim(
                "conv layer",
                format!("input {s:?}, expected [B, {}, H, W]", self.in_channels),
            ));
        }
        Ok(())
    }
}

fn shared_path(g: &mut Graph, s: &ConvShape, kernel: &Param, bias: Option<&Param>, x: Var) -> Result<Var> {
    let k = g.param(kernel)?;
    let y = g.conv2d(x, k, s.geometry)?;
    match bias {
        Some(b) => {
            let b = g.param(b)?;
            g.add_channel_bias(y, b)
        }
        None => Ok(y),
    }
}

/// `(α/r) · ((X ∗ A) ∗ B)`: channel reduction to `r` at full kernel size,
/// then a 1×1 projection to `C_out`.
fn factored_path(g: &mut Graph, s: &ConvShape, adapter: &Adapter, scale: f64, x: Var) -> Result<Var> {
    let a = g.param(&adapter.a)?;
    let b = g.param(&adapter.b)?;
    let h = g.conv2d(x, a, s.geometry)?;
    let h = g.conv2d(h, b, ConvGeometry::new(1, 0))?;
    g.scale(h, scale)
}

fn new_adapter(prefix: &str, s: &ConvShape, rank: usize, seed: u64) -> Adapter {
    Adapter {
        a: normal_param(
            format!("{prefix}.a"),
            &[rank, s.in_channels, s.kernel_h, s.kernel_w],
            1.0 / s.fan_in() as f64,
            seed,
        ),
        b: zero_param(format!("{prefix}.b"), &[s.out_channels, rank, 1, 1]),
    }
}

/// Dense kernel equivalent to the factored pair:
/// `K[o,c,y,x] = Σ_ρ B[o,ρ] · A[ρ,c,y,x]`, times `scale`.
pub fn composed_kernel(adapter: &Adapter, scale: f64) -> Tensor {
    let a = &adapter.a.value;
    let b = &adapter.b.value;
    let (r, c_out) = (a.shape()[0], b.shape()[0]);
    let patch = a.row_len();
    let mut out = vec![0.0; c_out * patch];
    for o in 0..c_out {
        for rho in 0..r {
            let w = b.data()[o * r + rho] * scale;
            for (dst, src) in out[o * patch..(o + 1) * patch].iter_mut().zip(a.row(rho)) {
                *dst += w * src;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape[0] = c_out;
    Tensor::new(shape, out).expect("composed kernel shape")
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainConv {
    pub shape: ConvShape,
    pub kernel: Param,
    pub bias: Option<Param>,
}

impl PlainConv {
    pub fn new(name: &str, shape: ConvShape, seed: u64) -> Self {
        PlainConv {
            shape,
            kernel: normal_param(
                format!("{name}.weight"),
                &shape.kernel_dims(),
                1.0 / shape.fan_in() as f64,
                seed,
            ),
            bias: shape.bias.then(|| zero_param(format!("{name}.bias"), &[shape.out_channels])),
        }
    }

    pub fn pre_activation(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.shape.check_input(g, x)?;
        shared_path(g, &self.shape, &self.kernel, self.bias.as_ref(), x)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.pre_activation(g, x)?;
        g.activation(z, self.shape.activation)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.kernel).chain(&self.bias).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.kernel).chain(&mut self.bias).collect()
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::shared_only(self.params().iter().map(|p| p.numel()).sum())
    }
}

/// Convolution whose kernel is entirely the factored pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankConv {
    pub shape: ConvShape,
    pub low_rank: LowRank,
    pub adapter: Adapter,
    pub bias: Option<Param>,
}

impl LowRankConv {
    pub fn new(name: &str, shape: ConvShape, low_rank: LowRank, seed: u64) -> Result<Self> {
        low_rank.validate(shape.max_rank(), name)?;
        Ok(LowRankConv {
            shape,
            low_rank,
            adapter: new_adapter(&format!("{name}.lora"), &shape, low_rank.rank, seed),
            bias: shape.bias.then(|| zero_param(format!("{name}.bias"), &[shape.out_channels])),
        })
    }

    pub fn pre_activation(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.shape.check_input(g, x)?;
        let y = factored_path(g, &self.shape, &self.adapter, self.low_rank.scale(), x)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add_channel_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.pre_activation(g, x)?;
        g.activation(z, self.shape.activation)
    }

    pub fn params(&self) -> Vec<&Param> {
        [&self.adapter.a, &self.adapter.b]
            .into_iter()
            .chain(&self.bias)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.adapter.a, &mut self.adapter.b]
            .into_iter()
            .chain(&mut self.bias)
            .collect()
    }

    pub fn count(&self, subjects: usize) -> ParamCount {
        ParamCount {
            shared: self.bias.as_ref().map_or(0, Param::numel),
            per_subject: self.adapter.numel(),
            subjects,
        }
    }
}

/// Shared kernel plus one factored low-rank kernel per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectConditionedConv {
    pub shape: ConvShape,
    pub low_rank: LowRank,
    pub kernel: Param,
    pub bias: Option<Param>,
    adapters: BTreeMap<SubjectId, Adapter>,
    name: String,
}

impl SubjectConditionedConv {
    pub fn new(name: &str, shape: ConvShape, low_rank: LowRank, subjects: usize, seed: u64) -> Result<Self> {
        low_rank.validate(shape.max_rank(), name)?;
        if subjects == 0 {
            return Err(Error::Config(format!("{name}: at least one subject required")));
        }
        let base = PlainConv::new(name, shape, seed);
        let mut layer = SubjectConditionedConv {
            shape,
            low_rank,
            kernel: base.kernel,
            bias: base.bias,
            adapters: BTreeMap::new(),
            name: name.to_string(),
        };
        for s in 0..subjects {
            layer.add_adapter(SubjectId(s as u32), seed)?;
        }
        Ok(layer)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn adapters(&self) -> &BTreeMap<SubjectId, Adapter> {
        &self.adapters
    }

    pub fn adapter_mut(&mut self, subject: SubjectId) -> Option<&mut Adapter> {
        self.adapters.get_mut(&subject)
    }

    pub fn add_adapter(&mut self, subject: SubjectId, seed: u64) -> Result<()> {
        if self.adapters.contains_key(&subject) {
            return Err(Error::Usage(format!(
                "{}: subject {subject} already has an adapter",
                self.name
            )));
        }
        let prefix = format!("{}.adapter.{subject}", self.name);
        self.adapters
            .insert(subject, new_adapter(&prefix, &self.shape, self.low_rank.rank, seed));
        Ok(())
    }

    pub fn forward_parts(&self, g: &mut Graph, x: Var, ids: &[Option<SubjectId>]) -> Result<(Var, Var)> {
        self.shape.check_input(g, x)?;
        check_batch(g.shape(x)[0], ids.len())?;
        let general = shared_path(g, &self.shape, &self.kernel, self.bias.as_ref(), x)?;
        let scale = self.low_rank.scale();
        let adapter = scatter_adapters(g, x, ids, &self.adapters, &self.name, |g, xs, ad| {
            factored_path(g, &self.shape, ad, scale, xs)
        })?;
        let adapter = match adapter {
            Some(v) => v,
            None => {
                let shape = g.shape(general).to_vec();
                g.constant(Tensor::zeros(&shape))?
            }
        };
        Ok((general, adapter))
    }

    pub fn pre_activation(&self, g: &mut Graph, x: Var, ids: &[Option<SubjectId>]) -> Result<Var> {
        let (general, adapter) = self.forward_parts(g, x, ids)?;
        g.add(general, adapter)
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ids: &[Option<SubjectId>]) -> Result<Var> {
        let z = self.pre_activation(g, x, ids)?;
        g.activation(z, self.shape.activation)
    }

    pub fn shared_params(&self) -> Vec<&Param> {
        std::iter::once(&self.kernel).chain(&self.bias).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.shared_params();
        for ad in self.adapters.values() {
            out.push(&ad.a);
            out.push(&ad.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = std::iter::once(&mut self.kernel)
            .chain(&mut self.bias)
            .collect();
        for ad in self.adapters.values_mut() {
            out.push(&mut ad.a);
            out.push(&mut ad.b);
        }
        out
    }

    pub fn count(&self) -> ParamCount {
        let s = &self.shape;
        let r = self.low_rank.rank;
        ParamCount {
            shared: self.shared_params().iter().map(|p| p.numel()).sum(),
            per_subject: r * s.fan_in() + s.out_channels * r,
            subjects: self.adapters.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn shape(c_in: usize, c_out: usize, kh: usize, kw: usize, geometry: ConvGeometry) -> ConvShape {
        ConvShape {
            in_channels: c_in,
            out_channels: c_out,
            kernel_h: kh,
            kernel_w: kw,
            geometry,
            bias: true,
            activation: Activation::Gelu,
        }
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "t");
        Tensor::new(shape.to_vec(), rng::normal_vec(&mut r, shape.iter().product(), 1.0)).unwrap()
    }

    #[test]
    fn init_matches_plain_conv() {
        let s = shape(2, 3, 3, 3, ConvGeometry::new(1, 1));
        let sc = SubjectConditionedConv::new("c", s, LowRank { rank: 2, alpha: 1.0 }, 3, 5).unwrap();
        let plain = PlainConv::new("c", s, 5);
        let x = random(&[4, 2, 5, 6], 1);
        let ids: Vec<_> = [0, 2, 1, 0].iter().map(|&i| Some(SubjectId(i))).collect();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let a = sc.forward(&mut g, xv, &ids).unwrap();
        let b = plain.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn adapter_shapes_and_counts() {
        let s = shape(3, 5, 2, 4, ConvGeometry::new(1, 0));
        let sc = SubjectConditionedConv::new("c", s, LowRank { rank: 2, alpha: 1.0 }, 4, 0).unwrap();
        let ad = &sc.adapters()[&SubjectId(0)];
        assert_eq!(ad.a.value.shape(), &[2, 3, 2, 4]);
        assert_eq!(ad.b.value.shape(), &[5, 2, 1, 1]);
        assert!(ad.b.value.data().iter().all(|&v| v == 0.0));
        let c = sc.count();
        assert_eq!(c.per_subject, 2 * 3 * 2 * 4 + 5 * 2);
        assert_eq!(c.shared, 5 * 3 * 2 * 4 + 5);
        assert_eq!(c.per_subject, ad.numel());
    }

    #[test]
    fn composed_kernel_matches_sequential_path() {
        let s = shape(2, 4, 3, 2, ConvGeometry::with_padding(2, 1, 0));
        let mut sc = SubjectConditionedConv::new("c", s, LowRank { rank: 2, alpha: 3.0 }, 1, 9).unwrap();
        sc.adapter_mut(SubjectId(0)).unwrap().b.value = random(&[4, 2, 1, 1], 3);
        let ad = sc.adapters()[&SubjectId(0)].clone();
        let x = random(&[2, 2, 7, 5], 4);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let seq = factored_path(&mut g, &s, &ad, 1.5, xv).unwrap();
        let k = g.constant(composed_kernel(&ad, 1.5)).unwrap();
        let dense = g.conv2d(xv, k, s.geometry).unwrap();
        assert!(g.value(seq).max_abs_diff(g.value(dense)) < 1e-10);
    }

    #[test]
    fn rank_bound_uses_flattened_kernel() {
        // C_in = 1 with a 1×9 kernel still admits rank up to min(C_out, 9).
        let s = shape(1, 8, 1, 9, ConvGeometry::with_padding(1, 0, 4));
        assert!(SubjectConditionedConv::new("c", s, LowRank { rank: 8, alpha: 1.0 }, 1, 0).is_ok());
        assert!(SubjectConditionedConv::new("c", s, LowRank { rank: 9, alpha: 1.0 }, 1, 0).is_err());
    }
}
