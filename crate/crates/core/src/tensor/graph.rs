use std::collections::HashMap;

use super::conv::{conv2d_backward, conv2d_forward, ConvDims, ConvGeometry};
use super::kernels::{gemm, gemm_nt, gemm_tn};
use super::{Activation, Param, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Sum(Var),
    Act(Var, Activation),
    Conv(Var, Var, ConvDims),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Reshape(Var),
    MeanSpatial(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass in execution order so that adjoints can be
/// replayed in reverse. A graph supports exactly one [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
    consumed: bool,
}

/// Gradients produced by one backward pass, addressable by node or by the
/// name of the bound parameter.
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: HashMap<Var, Tensor>,
    by_name: HashMap<String, Tensor>,
}

impl Gradients {
    /// Gradients keyed by parameter name only.
    pub fn from_named(pairs: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        Gradients {
            by_var: HashMap::new(),
            by_name: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var)
    }

    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

fn row_split(shape: &[usize]) -> (usize, usize) {
    let rows = shape[0];
    (rows, shape[1..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage("graph already consumed by backward".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a parameter as a leaf. Its gradient is reported under its name
    /// unless the parameter is frozen.
    pub fn param(&mut self, p: &Param) -> Result<Var> {
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen, &p.name)?;
        if !p.frozen {
            self.bindings.push((p.name.clone(), v));
        }
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.tracked(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("{s:?} is not 2-D")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.tracked(&[a]);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg, "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.tracked(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Scale(a, factor), rg, "scale")
    }

    /// x[B×m] + bias[m], bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim("add_row_bias", format!("{sx:?} + {sb:?}")));
        }
        let m = sx[1];
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % m])
            .collect();
        let shape = sx.to_vec();
        let rg = self.tracked(&[x, bias]);
        self.push(Tensor::new(shape, out)?, Op::AddRowBias(x, bias), rg, "add_row_bias")
    }

    /// x[N×C×H×W] + bias[C], bias broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::dim("add_channel_bias", format!("{sx:?} + {sb:?}")));
        }
        let (c, plane) = (sx[1], sx[2] * sx[3]);
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / plane) % c])
            .collect();
        let shape = sx.to_vec();
        let rg = self.tracked(&[x, bias]);
        self.push(
            Tensor::new(shape, out)?,
            Op::AddChannelBias(x, bias),
            rg,
            "add_channel_bias",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(a);
        }
        let t = self.value(a);
        let out = t.data().iter().map(|&x| kind.apply(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.tracked(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Act(a, kind), rg, "activation")
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = ConvDims::new(self.shape(x), self.shape(kernel), geom)?;
        let out = conv2d_forward(&dims, self.value(x).data(), self.value(kernel).data());
        let rg = self.tracked(&[x, kernel]);
        self.push(
            Tensor::new(dims.out_shape(), out)?,
            Op::Conv(x, kernel, dims),
            rg,
            "conv2d",
        )
    }

    /// Selects slices along the leading axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, width) = row_split(&shape);
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let rg = self.tracked(&[x]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::GatherRows(x, rows.to_vec()),
            rg,
            "gather_rows",
        )
    }

    /// Inverse of [`Graph::gather_rows`]: places slice `i` of `x` at leading
    /// index `rows[i]` of a zero tensor with `total` slices.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, width) = row_split(&shape);
        if rows.len() != n {
            return Err(Error::dim(
                "scatter_rows",
                format!("{} indices for {n} rows", rows.len()),
            ));
        }
        let mut seen = vec![false; total];
        for &r in rows {
            if r >= total || std::mem::replace(&mut seen[r], true) {
                return Err(Error::dim(
                    "scatter_rows",
                    format!("index {r} out of range or repeated"),
                ));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; total * width];
        for (i, &r) in rows.iter().enumerate() {
            out[r * width..(r + 1) * width].copy_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = total;
        let rg = self.tracked(&[x]);
        self.push(
            Tensor::new(out_shape, out)?,
            Op::ScatterRows(x, rows.to_vec()),
            rg,
            "scatter_rows",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.tracked(&[x]);
        self.push(t, Op::Reshape(x), rg, "reshape")
    }

    /// Mean over the two spatial axes: N×C×H×W → N×C.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("mean_spatial", format!("{s:?} is not 4-D")));
        }
        let plane = s[2] * s[3];
        let out = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect();
        let rg = self.tracked(&[x]);
        self.push(
            Tensor::new(vec![s[0], s[1]], out)?,
            Op::MeanSpatial(x),
            rg,
            "mean_spatial",
        )
    }

    /// Batch mean of −log softmax(logits)[label], stabilised by max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {s:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / norm;
            }
            loss += norm.ln() - (row[labels[i]] - max);
        }
        loss /= n as f64;
        let rg = self.tracked(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy(logits, labels.to_vec(), probs),
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Propagates adjoints from the scalar `loss` back to every tracked leaf.
    /// The graph is consumed afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on one graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {idx}")));
            }
            let node = &self.nodes[idx];
            for (input, contribution) in self.input_adjoints(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) {
                out.by_var
                    .insert(Var(idx), Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        for (name, var) in &self.bindings {
            if let Some(g) = out.by_var.get(var) {
                match out.by_name.get_mut(name) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    None => {
                        out.by_name.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        self.nodes.clear();
        self.bindings.clear();
        Ok(out)
    }

    fn input_adjoints(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, val(*b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(val(*a), g, &mut gb, k, m, n);
                    out.push((*b, gb));
                }
                out
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(g, x)| g * x).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|v| v * f).collect())],
            Op::AddRowBias(x, b) => {
                let m = self.shape(*b)[0];
                let mut gb = vec![0.0; m];
                for (i, v) in g.iter().enumerate() {
                    gb[i % m] += v;
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::AddChannelBias(x, b) => {
                let s = self.shape(*x);
                let (c, plane) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; c];
                for (i, v) in g.iter().enumerate() {
                    gb[(i / plane) % c] += v;
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.len()])],
            Op::Act(a, kind) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| g * kind.derivative(x))
                    .collect();
                vec![(*a, ga)]
            }
            Op::Conv(x, k, dims) => {
                let (gx, gk) = conv2d_backward(dims, val(*x), val(*k), g, needs(*x), needs(*k));
                gx.map(|gx| (*x, gx))
                    .into_iter()
                    .chain(gk.map(|gk| (*k, gk)))
                    .collect()
            }
            Op::GatherRows(x, rows) => {
                let (n, width) = row_split(self.shape(*x));
                let mut gx = vec![0.0; n * width];
                for (i, &r) in rows.iter().enumerate() {
                    for (dst, src) in gx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[i * width..(i + 1) * width])
                    {
                        *dst += src;
                    }
                }
                vec![(*x, gx)]
            }
            Op::ScatterRows(x, rows) => {
                let width = self.nodes[x.0].value.row_len();
                let mut gx = Vec::with_capacity(rows.len() * width);
                for &r in rows {
                    gx.extend_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::MeanSpatial(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let gx = (0..s.iter().product::<usize>())
                    .map(|i| g[i / plane] / plane as f64)
                    .collect();
                vec![(*x, gx)]
            }
            Op::SoftmaxCrossEntropy(logits, labels, probs) => {
                let k = self.shape(*logits)[1];
                let n = labels.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0] / n).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * k + l] -= g[0] / n;
                }
                vec![(*logits, gl)]
            }
        }
    }
}
