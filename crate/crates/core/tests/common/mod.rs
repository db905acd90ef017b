//! Central finite-difference gradient checks shared by the gradient and
//! acceptance suites.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use subcond_core::layers::SubjectId;
use subcond_core::model::{build_model, Architecture, ModelConfig, Mode, ModelSet, Network};
use subcond_core::rng;
use subcond_core::tensor::{Activation, ConvGeometry, Graph, Tensor, Var};
use subcond_core::Result;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Relative error with the denominator floored so that gradients that are
/// zero on both sides compare equal.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(r, n, 1.0)).unwrap()
}

/// Values bounded away from zero, for checking kinked functions.
fn off_kink(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random_tensor(r, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

/// Reduces a non-scalar output to a scalar through fixed random weights so
/// every output element contributes a distinct adjoint.
fn scalarize(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    if g.shape(out).iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights.clone().reshape(g.shape(out))?)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn loss_value(case: &Case, inputs: &[Tensor], weights: &Tensor) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false).unwrap()).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let loss = scalarize(&mut g, out, weights).unwrap();
    g.value(loss).data()[0]
}

/// Largest relative error between backpropagated and central-difference
/// gradients over every input element.
pub fn check_case(case: &Case, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let n_out = g.shape(out).iter().product::<usize>();
    let weights = random_tensor(&mut rng::stream(seed, &format!("weights.{}", case.name)), &[n_out]);
    let loss = scalarize(&mut g, out, &weights).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        for j in 0..case.inputs[i].len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (loss_value(case, &plus, &weights) - loss_value(case, &minus, &weights)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

fn dim(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// Every differentiable graph operation, each at `shapes` randomized shapes.
pub fn op_cases(seed: u64, shapes: usize) -> Vec<Case> {
    let mut r = rng::stream(seed, "gradcheck.shapes");
    let mut cases = Vec::new();
    for k in 0..shapes {
        let (n, m, p) = (dim(&mut r, 1, 5), dim(&mut r, 1, 5), dim(&mut r, 1, 5));
        cases.push(Case {
            name: format!("matmul.{k} [{n}x{m}]x[{m}x{p}]"),
            inputs: vec![random_tensor(&mut r, &[n, m]), random_tensor(&mut r, &[m, p])],
            build: Box::new(|g, v| g.matmul(v[0], v[1])),
        });
        cases.push(Case {
            name: format!("transpose.{k} [{n}x{m}]"),
            inputs: vec![random_tensor(&mut r, &[n, m])],
            build: Box::new(|g, v| g.transpose(v[0])),
        });
        cases.push(Case {
            name: format!("add.{k} [{n}x{m}]"),
            inputs: vec![random_tensor(&mut r, &[n, m]), random_tensor(&mut r, &[n, m])],
            build: Box::new(|g, v| g.add(v[0], v[1])),
        });
        cases.push(Case {
            name: format!("mul.{k} [{n}x{m}]"),
            inputs: vec![random_tensor(&mut r, &[n, m]), random_tensor(&mut r, &[n, m])],
            build: Box::new(|g, v| g.mul(v[0], v[1])),
        });
        let factor: f64 = r.random_range(-2.0..2.0);
        cases.push(Case {
            name: format!("scale.{k} [{n}x{m}]"),
            inputs: vec![random_tensor(&mut r, &[n, m])],
            build: Box::new(move |g, v| g.scale(v[0], factor)),
        });
        cases.push(Case {
            name: format!("add_row_bias.{k} [{n}x{m}]"),
            inputs: vec![random_tensor(&mut r, &[n, m]), random_tensor(&mut r, &[m])],
            build: Box::new(|g, v| g.add_row_bias(v[0], v[1])),
        });
        cases.push(Case {
            name: format!("sum.{k} [{n}x{m}]"),
            inputs: vec![random_tensor(&mut r, &[n, m])],
            build: Box::new(|g, v| g.sum(v[0])),
        });
        for act in [Activation::Relu, Activation::Elu, Activation::Gelu] {
            cases.push(Case {
                name: format!("activation.{act:?}.{k} [{n}x{m}]"),
                inputs: vec![off_kink(&mut r, &[n, m])],
                build: Box::new(move |g, v| g.activation(v[0], act)),
            });
        }
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..m.max(2))).collect();
        cases.push(Case {
            name: format!("softmax_cross_entropy.{k} [{n}x{}]", m.max(2)),
            inputs: vec![random_tensor(&mut r, &[n, m.max(2)])],
            build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
        });
        let rows: Vec<usize> = (0..dim(&mut r, 1, 6)).map(|_| r.random_range(0..n)).collect();
        cases.push(Case {
            name: format!("gather_rows.{k} [{n}x{m}] {rows:?}"),
            inputs: vec![random_tensor(&mut r, &[n, m])],
            build: Box::new(move |g, v| g.gather_rows(v[0], &rows)),
        });
        let total = n + dim(&mut r, 0, 3);
        let mut slots: Vec<usize> = (0..total).collect();
        for i in (1..slots.len()).rev() {
            slots.swap(i, r.random_range(0..=i));
        }
        slots.truncate(n);
        cases.push(Case {
            name: format!("scatter_rows.{k} [{n}x{m}] -> {total}"),
            inputs: vec![random_tensor(&mut r, &[n, m])],
            build: Box::new(move |g, v| g.scatter_rows(v[0], &slots, total)),
        });

        let (c, o, h, w) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 3, 6), dim(&mut r, 3, 6));
        let (kh, kw) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
        let geom = ConvGeometry::with_padding(dim(&mut r, 1, 2), dim(&mut r, 0, 1), dim(&mut r, 0, 2));
        let batch = dim(&mut r, 1, 2);
        cases.push(Case {
            name: format!("conv2d.{k} x[{batch}x{c}x{h}x{w}] k[{o}x{c}x{kh}x{kw}] {geom:?}"),
            inputs: vec![
                random_tensor(&mut r, &[batch, c, h, w]),
                random_tensor(&mut r, &[o, c, kh, kw]),
            ],
            build: Box::new(move |g, v| g.conv2d(v[0], v[1], geom)),
        });
        cases.push(Case {
            name: format!("add_channel_bias.{k} [{batch}x{c}x{h}x{w}]"),
            inputs: vec![random_tensor(&mut r, &[batch, c, h, w]), random_tensor(&mut r, &[c])],
            build: Box::new(|g, v| g.add_channel_bias(v[0], v[1])),
        });
        cases.push(Case {
            name: format!("mean_spatial.{k} [{batch}x{c}x{h}x{w}]"),
            inputs: vec![random_tensor(&mut r, &[batch, c, h, w])],
            build: Box::new(|g, v| g.mean_spatial(v[0])),
        });
        cases.push(Case {
            name: format!("reshape.{k} [{batch}x{c}x{h}x{w}]"),
            inputs: vec![random_tensor(&mut r, &[batch, c, h, w])],
            build: Box::new(move |g, v| g.reshape(v[0], &[batch, c * h * w])),
        });
    }
    cases
}

/// Small reference networks with nonzero adapters so that every parameter
/// receives gradient.
pub fn model_networks(seed: u64) -> Vec<(String, Network)> {
    let mut out = Vec::new();
    for arch in [Architecture::Mlp, Architecture::Cnn] {
        for mode in [Mode::SubjectConditioned, Mode::Lora, Mode::Agnostic] {
            let mut cfg = ModelConfig {
                architecture: arch,
                mode,
                subjects: 3,
                classes: 3,
                input_shape: vec![6],
                hidden: vec![5, 4],
                rank: 2,
                alpha: 1.5,
                activation: Activation::Gelu,
                seed,
                ..ModelConfig::default()
            };
            if arch == Architecture::Cnn {
                cfg.input_shape = vec![2, 7];
                cfg.channels = vec![3, 4];
                cfg.temporal_kernel = 3;
                cfg.activation = Activation::Elu;
            }
            let mut net = match build_model(&cfg).unwrap() {
                ModelSet::Shared(n) => n,
                ModelSet::PerSubject(m) => m.into_values().next().unwrap(),
            };
            let mut r = rng::stream(seed, "gradcheck.adapters");
            for p in net.params_mut() {
                if p.name.ends_with(".b") || p.name.ends_with("lora_b") {
                    for v in p.value.data_mut() {
                        *v = rng::normal_vec(&mut r, 1, 0.5)[0];
                    }
                }
            }
            out.push((format!("{arch:?}/{}", mode.name()), net));
        }
    }
    out
}

/// Gradient check of a network's cross-entropy loss against every parameter.
pub fn check_network(net: &Network, seed: u64) -> f64 {
    let mut r = rng::stream(seed, "gradcheck.batch");
    let mut shape = vec![5];
    shape.extend_from_slice(net.input_shape());
    let x = random_tensor(&mut r, &shape);
    let subjects = net.subjects();
    let ids: Vec<Option<SubjectId>> = if net.is_conditioned() {
        vec![Some(SubjectId(0)), Some(SubjectId(2)), None, Some(SubjectId(0)), Some(SubjectId(1))]
    } else {
        vec![subjects.first().copied(); 5]
    };
    let labels = vec![0, 2, 1, 1, 0];
    let loss_of = |net: &Network| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = net.forward(&mut g, xv, &ids).unwrap();
        let l = g.softmax_cross_entropy(y, &labels).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let y = net.forward(&mut g, xv, &ids).unwrap();
    let l = g.softmax_cross_entropy(y, &labels).unwrap();
    let grads = g.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    let names: Vec<String> = net.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let analytic = grads.named(name).cloned();
        let len = net.params()[pi].value.len();
        for j in 0..len {
            let mut plus = net.clone();
            plus.params_mut()[pi].value.data_mut()[j] += H;
            let mut minus = net.clone();
            minus.params_mut()[pi].value.data_mut()[j] -= H;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * H);
            let a = analytic.as_ref().map_or(0.0, |t| t.data()[j]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}
