use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{check_batch, normal_param, route, zero_param, Adapter, LowRank, ParamCount, SubjectId};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Graph, Param, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearShape {
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
    pub activation: Activation,
}

impl LinearShape {
    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.in_features {
            return Err(Error::dim(
                "linear",
                format!("input {s:?}, expected [B, {}]", self.in_features),
            ));
        }
        Ok(())
    }

    pub fn max_rank(&self) -> usize {
        self.in_features.min(self.out_features)
    }
}

/// Shared path `X Wᵀ + bias` with `W` stored as `out×in`.
fn shared_path(g: &mut Graph, weight: &Param, bias: Option<&Param>, x: Var) -> Result<Var> {
    let w = g.param(weight)?;
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    match bias {
        Some(b) => {
            let b = g.param(b)?;
            g.add_row_bias(y, b)
        }
        None => Ok(y),
    }
}

/// `(α/r) · X A B`
fn low_rank_path(g: &mut Graph, adapter: &Adapter, scale: f64, x: Var) -> Result<Var> {
    let a = g.param(&adapter.a)?;
    let b = g.param(&adapter.b)?;
    let h = g.matmul(x, a)?;
    let h = g.matmul(h, b)?;
    g.scale(h, scale)
}

/// Ordinary dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainLinear {
    pub shape: LinearShape,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl PlainLinear {
    pub fn new(name: &str, shape: LinearShape, seed: u64) -> Self {
        let (m, n) = (shape.out_features, shape.in_features);
        PlainLinear {
            shape,
            weight: normal_param(format!("{name}.weight"), &[m, n], 1.0 / n as f64, seed),
            bias: shape.bias.then(|| zero_param(format!("{name}.bias"), &[m])),
        }
    }

    pub fn pre_activation(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.shape.check_input(g, x)?;
        shared_path(g, &self.weight, self.bias.as_ref(), x)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let z = self.pre_activation(g, x)?;
        g.activation(z, self.shape.activation)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(&self.bias).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(&mut self.bias).collect()
    }

    pub fn count(&self) -> ParamCount {
        ParamCount::shared_only(self.params().iter().map(|p| p.numel()).sum())
    }
}

/// Dense layer whose weight is entirely the low-rank product `(α/r) A B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankLinear {
    pub shape: LinearShape,
    pub low_rank: LowRank,
    pub adapter: Adapter,
    pub bias: Option<Param>,
}

impl LowRankLinear {
    pub fn new(name: &str, shape: LinearShape, low_rank: LowRank, seed: u64) -> Result<Self> {
        low_rank.validate(shape.max_rank(), name)?;
        let (m, n, r) = (shape.out_features, shape.in_features, low_rank.rank);
        Ok(LowRankLinear {
            shape,
            low_rank,
            adapter: Adapter {
                a: normal_param(format!("{name}.lora_a"), &[n, r], 1.0 / n as f64, seed),
                b: zero_param(format!("{name}.lora_b"), &[r, m]),
            },
            bias: shape.bias.then(|| zero_param(format!("{name}.bias"), &[m])),
        })
    }

    pub fn pre_activation(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.shape.check_input(g, x)?;
        let y = low_rank_path(g, &self.adapter, self.low_rank.scale(), x)?;
        match &self.bias {
            Some(b) => {
                let b = g.param(b)?;
                g.add_row_bias(y, b)
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

    /// The bias counts as shared, the factor pair as the per-subject part.
    pub fn count(&self, subjects: usize) -> ParamCount {
        ParamCount {
            shared: self.bias.as_ref().map_or(0, Param::numel),
            per_subject: self.adapter.numel(),
            subjects,
        }
    }
}

/// Shared dense weight plus one low-rank adapter per subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectConditionedLinear {
    pub shape: LinearShape,
    pub low_rank: LowRank,
    pub weight: Param,
    pub bias: Option<Param>,
    adapters: BTreeMap<SubjectId, Adapter>,
    name: String,
}

impl SubjectConditionedLinear {
    /// Builds the layer for subjects `0..subjects`. `W_general` and every
    /// `A_s` are drawn from N(0, 1/in_features); every `B_s` starts at zero.
    pub fn new(
        name: &str,
        shape: LinearShape,
        low_rank: LowRank,
        subjects: usize,
        seed: u64,
    ) -> Result<Self> {
        low_rank.validate(shape.max_rank(), name)?;
        if subjects == 0 {
            return Err(Error::Config(format!("{name}: at least one subject required")));
        }
        let base = PlainLinear::new(name, shape, seed);
        let mut layer = SubjectConditionedLinear {
            shape,
            low_rank,
            weight: base.weight,
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

    /// Registers a freshly initialised adapter (`B = 0`) for `subject`.
    pub fn add_adapter(&mut self, subject: SubjectId, seed: u64) -> Result<()> {
        if self.adapters.contains_key(&subject) {
            return Err(Error::Usage(format!(
                "{}: subject {subject} already has an adapter",
                self.name
            )));
        }
        let (m, n, r) = (self.shape.out_features, self.shape.in_features, self.low_rank.rank);
        let prefix = format!("{}.adapter.{subject}", self.name);
        self.adapters.insert(
            subject,
            Adapter {
                a: normal_param(format!("{prefix}.a"), &[n, r], 1.0 / n as f64, seed),
                b: zero_param(format!("{prefix}.b"), &[r, m]),
            },
        );
        Ok(())
    }

    /// Shared-path and adapter-path pre-activations. The adapter part is
    /// zero for rows of unknown subjects.
    pub fn forward_parts(
        &self,
        g: &mut Graph,
        x: Var,
        ids: &[Option<SubjectId>],
    ) -> Result<(Var, Var)> {
        self.shape.check_input(g, x)?;
        check_batch(g.shape(x)[0], ids.len())?;
        let general = shared_path(g, &self.weight, self.bias.as_ref(), x)?;
        let adapter = scatter_adapters(g, x, ids, &self.adapters, &self.name, |g, xs, ad| {
            low_rank_path(g, ad, self.low_rank.scale(), xs)
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
        std::iter::once(&self.weight).chain(&self.bias).collect()
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
        let mut out: Vec<&mut Param> = std::iter::once(&mut self.weight)
            .chain(&mut self.bias)
            .collect();
        for ad in self.adapters.values_mut() {
            out.push(&mut ad.a);
            out.push(&mut ad.b);
        }
        out
    }

    pub fn count(&self) -> ParamCount {
        let (m, n, r) = (self.shape.out_features, self.shape.in_features, self.low_rank.rank);
        ParamCount {
            shared: self.shared_params().iter().map(|p| p.numel()).sum(),
            per_subject: r * (m + n),
            subjects: self.adapters.len(),
        }
    }
}

/// Routes rows of `x` to their subject's adapter and scatters the results
/// back into batch order, summing over subjects. Returns `None` when no row
/// has a known subject.
pub(super) fn scatter_adapters<F>(
    g: &mut Graph,
    x: Var,
    ids: &[Option<SubjectId>],
    adapters: &BTreeMap<SubjectId, Adapter>,
    layer: &str,
    mut path: F,
) -> Result<Option<Var>>
where
    F: FnMut(&mut Graph, Var, &Adapter) -> Result<Var>,
{
    if let Some(missing) = ids
        .iter()
        .flatten()
        .find(|s| !adapters.contains_key(s))
    {
        return Err(Error::Usage(format!(
            "{layer}: no adapter for subject {missing}; pass it as unknown to use the shared path"
        )));
    }
    let count = adapters.keys().next_back().map_or(0, |s| s.index() + 1);
    let mask = route(ids, count);
    let batch = ids.len();
    let mut acc: Option<Var> = None;
    for (subject, rows) in mask.present() {
        let xs = g.gather_rows(x, rows)?;
        let ys = path(g, xs, &adapters[&subject])?;
        let full = g.scatter_rows(ys, rows, batch)?;
        acc = Some(match acc {
            Some(a) => g.add(a, full)?,
            None => full,
        });
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(m: usize, n: usize, bias: bool) -> LinearShape {
        LinearShape {
            in_features: n,
            out_features: m,
            bias,
            activation: Activation::Identity,
        }
    }

    fn ids(v: &[u32]) -> Vec<Option<SubjectId>> {
        v.iter().map(|&s| Some(SubjectId(s))).collect()
    }

    fn eval(layer: &SubjectConditionedLinear, x: &Tensor, ids: &[Option<SubjectId>]) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = layer.forward(&mut g, xv, ids).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn hand_evaluated_example() {
        let lr = LowRank { rank: 1, alpha: 1.0 };
        let mut layer = SubjectConditionedLinear::new("l", shape(1, 2, false), lr, 1, 0).unwrap();
        layer.weight.value = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let ad = layer.adapter_mut(SubjectId(0)).unwrap();
        ad.a.value = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
        ad.b.value = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(eval(&layer, &x, &ids(&[0])).data(), &[5.0]);

        layer.low_rank.alpha = 0.0;
        assert_eq!(eval(&layer, &x, &ids(&[0])).data(), &[3.0]);

        let lora = LowRankLinear {
            shape: shape(1, 2, false),
            low_rank: lr,
            adapter: layer.adapters()[&SubjectId(0)].clone(),
            bias: None,
        };
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let y = lora.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y).data(), &[2.0]);
    }

    #[test]
    fn init_matches_plain_layer() {
        let s = LinearShape {
            activation: Activation::Elu,
            ..shape(5, 7, true)
        };
        let sc = SubjectConditionedLinear::new("l", s, LowRank { rank: 3, alpha: 2.0 }, 4, 11).unwrap();
        let plain = PlainLinear::new("l", s, 11);
        let mut r = crate::rng::stream(1, "x");
        let x = Tensor::new(vec![6, 7], crate::rng::normal_vec(&mut r, 42, 1.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = plain.forward(&mut g, xv).unwrap();
        assert_eq!(&eval(&sc, &x, &ids(&[0, 1, 2, 3, 0, 1])), g.value(y));
    }

    #[test]
    fn rank_bound_and_duplicates() {
        let err = SubjectConditionedLinear::new("l", shape(4, 3, false), LowRank { rank: 4, alpha: 1.0 }, 2, 0);
        assert!(matches!(err, Err(Error::Config(_))));
        let mut layer =
            SubjectConditionedLinear::new("l", shape(4, 3, false), LowRank { rank: 3, alpha: 1.0 }, 2, 0).unwrap();
        assert!(matches!(layer.add_adapter(SubjectId(1), 0), Err(Error::Usage(_))));
        layer.add_adapter(SubjectId(2), 0).unwrap();
        assert_eq!(layer.adapters().len(), 3);
    }

    #[test]
    fn unregistered_subject_is_a_usage_error() {
        let layer =
            SubjectConditionedLinear::new("l", shape(2, 2, false), LowRank { rank: 1, alpha: 1.0 }, 2, 0).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        assert!(matches!(layer.forward(&mut g, xv, &ids(&[5])), Err(Error::Usage(_))));
        assert!(layer.forward(&mut g, xv, &[None]).is_ok());
    }

    #[test]
    fn dimension_and_empty_batch_errors() {
        let layer =
            SubjectConditionedLinear::new("l", shape(2, 3, false), LowRank { rank: 1, alpha: 1.0 }, 1, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(layer.forward(&mut g, x, &ids(&[0, 0])), Err(Error::Dimension { .. })));
        let x = g.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(layer.forward(&mut g, x, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let make = || {
            SubjectConditionedLinear::new("l", shape(4, 6, true), LowRank { rank: 2, alpha: 1.0 }, 3, 1).unwrap()
        };
        assert_eq!(make(), make());
    }
}
