//! Central finite-difference gradient checking. Uses only
//! [`Graph::forward`], so it is independent of the backward pass it audits.

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;

/// Worst-case comparison between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
    pub worst: Option<String>,
}

impl GradCheck {
    /// Relative error with an absolute floor, so entries whose true gradient
    /// is ~0 are judged by absolute error instead.
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }
}

fn scalar_at(
    graph: &Graph,
    params: &ParamStore,
    inputs: &[(&str, &Tensor)],
    output: NodeId,
) -> Result<f64> {
    Ok(graph.forward(params, inputs)?.value(output).item())
}

/// Numeric gradient of `output` with respect to parameter `name`.
pub fn numeric_param_grad(
    graph: &Graph,
    params: &ParamStore,
    inputs: &[(&str, &Tensor)],
    output: NodeId,
    name: &str,
    h: f64,
) -> Result<Tensor> {
    let mut probe = params.clone();
    let n = params.get(name).expect("known parameter").len();
    let mut grad = vec![0.0; n];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.get(name).unwrap().data()[i];
        probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let up = scalar_at(graph, &probe, inputs, output)?;
        probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let down = scalar_at(graph, &probe, inputs, output)?;
        probe.get_mut(name).unwrap().data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(params.get(name).unwrap().shape().to_vec(), grad)
}

/// Numeric gradient of `output` with respect to input `name`.
pub fn numeric_input_grad(
    graph: &Graph,
    params: &ParamStore,
    inputs: &[(&str, &Tensor)],
    output: NodeId,
    name: &str,
    h: f64,
) -> Result<Tensor> {
    let idx = inputs.iter().position(|(n, _)| *n == name).expect("known input");
    let mut probe = inputs[idx].1.clone();
    let mut grad = vec![0.0; probe.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        let eval = |v: f64, probe: &mut Tensor| -> Result<f64> {
            probe.data_mut()[i] = v;
            let mut feeds: Vec<(&str, &Tensor)> = inputs.to_vec();
            feeds[idx] = (name, &*probe);
            scalar_at(graph, params, &feeds, output)
        };
        let up = eval(orig + h, &mut probe)?;
        let down = eval(orig - h, &mut probe)?;
        probe.data_mut()[i] = orig;
        *g = (up - down) / (2.0 * h);
    }
    Tensor::new(inputs[idx].1.shape().to_vec(), grad)
}

/// Compare every parameter and gradient-enabled input gradient from
/// [`Graph::backward`] against central differences with step `h`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_gradients(
    graph: &Graph,
    params: &ParamStore,
    inputs: &[(&str, &Tensor)],
    output: NodeId,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    let fwd = graph.forward(params, inputs)?;
    let analytic = graph.backward(&fwd, output)?;
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
        worst: None,
    };
    let mut compare = |label: &str, a: &Tensor, n: &Tensor| {
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let abs = (x - y).abs();
            let rel = abs / x.abs().max(y.abs()).max(floor);
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(format!("{label}[{i}]: analytic {x:e} numeric {y:e}"));
            }
        }
    };
    for (name, a) in &analytic.params {
        let n = numeric_param_grad(graph, params, inputs, output, name, h)?;
        compare(name, a, &n);
    }
    for (name, a) in &analytic.inputs {
        let n = numeric_input_grad(graph, params, inputs, output, name, h)?;
        compare(name, a, &n);
    }
    Ok(report)
}

/// Every differentiable op kind, as named by [`Op::kind`](super::Op::kind).
pub const OP_KINDS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "maximum",
    "scale",
    "add_scalar",
    "matmul",
    "add_row_bias",
    "conv2d",
    "relu",
    "silu",
    "group_norm",
    "channel_add",
    "channel_mul",
    "avg_pool2",
    "upsample2",
    "reshape",
    "concat",
    "mean",
    "sum_squares",
    "row_mean_squares",
];

/// A small randomized graph exercising one op kind, reduced to a scalar
/// through a fixed random linear functional.
pub struct OpCase {
    pub graph: Graph,
    pub params: ParamStore,
    pub inputs: Vec<(String, Tensor)>,
    pub output: NodeId,
}

impl OpCase {
    pub fn feeds(&self) -> Vec<(&str, &Tensor)> {
        self.inputs.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    pub fn check(&self, h: f64, floor: f64) -> Result<GradCheck> {
        check_gradients(&self.graph, &self.params, &self.feeds(), self.output, h, floor)
    }
}

/// Entries bounded away from zero by `margin`, so kinked ops (relu,
/// maximum) are never probed across their kink.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut crate::rng::Rng) -> Tensor {
    use rand::Rng as _;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = margin + rng.random::<f64>();
            if rng.random::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Build the gradient-check case for `kind` from `seed`.
pub fn op_case(kind: &str, seed: u64) -> OpCase {
    use rand::Rng as _;
    let mut rng = crate::rng::derive_rng(seed, kind, 0);
    let rng = &mut rng;
    let mut g = Graph::new();
    let mut params = ParamStore::new();
    let mut inputs: Vec<(String, Tensor)> = Vec::new();
    let batch = rng.random_range(1..=2usize);
    let rows = rng.random_range(1..=3usize);
    let cols = rng.random_range(1..=4usize);

    let mut param = |g: &mut Graph, name: &str, t: Tensor| {
        params.insert(name, t);
        g.param(name)
    };

    let out = match kind {
        "add" | "sub" | "mul" => {
            let a = param(&mut g, "a", Tensor::randn(&[rows, cols], 1.0, rng));
            let b = param(&mut g, "b", Tensor::randn(&[rows, cols], 1.0, rng));
            match kind {
                "add" => g.add(a, b),
                "sub" => g.sub(a, b),
                _ => g.mul(a, b),
            }
        }
        "maximum" => {
            let av = Tensor::randn(&[rows, cols], 1.0, rng);
            let gap = away_from_zero(&[rows, cols], 0.1, rng);
            let mut bv = av.clone();
            bv.axpy(1.0, &gap);
            let a = param(&mut g, "a", av);
            let b = param(&mut g, "b", bv);
            g.maximum(a, b)
        }
        "scale" => {
            let a = param(&mut g, "a", Tensor::randn(&[rows, cols], 1.0, rng));
            g.scale(a, rng.random_range(-2.0..2.0))
        }
        "add_scalar" => {
            let a = param(&mut g, "a", Tensor::randn(&[rows, cols], 1.0, rng));
            g.add_scalar(a, rng.random_range(-2.0..2.0))
        }
        "matmul" => {
            let k = rng.random_range(1..=4usize);
            let a = param(&mut g, "a", Tensor::randn(&[rows, k], 1.0, rng));
            let b = param(&mut g, "b", Tensor::randn(&[k, cols], 1.0, rng));
            g.matmul(a, b)
        }
        "add_row_bias" => {
            let a = param(&mut g, "a", Tensor::randn(&[rows, cols], 1.0, rng));
            let b = param(&mut g, "b", Tensor::randn(&[cols], 1.0, rng));
            g.add_row_bias(a, b)
        }
        "conv2d" => {
            let (ci, co) = (rng.random_range(1..=2usize), rng.random_range(1..=3usize));
            let k = if rng.random::<bool>() { 3 } else { 1 };
            let (h, w) = (rng.random_range(2..=5usize), rng.random_range(2..=5usize));
            inputs.push(("x".into(), Tensor::randn(&[batch, ci, h, w], 1.0, rng)));
            let x = g.input_with_grad("x");
            let wt = param(&mut g, "w", Tensor::randn(&[co, ci, k, k], 0.5, rng));
            let b = param(&mut g, "b", Tensor::randn(&[co], 0.5, rng));
            g.conv2d(x, wt, b)
        }
        "relu" | "silu" => {
            let a = param(&mut g, "a", away_from_zero(&[rows, cols], 0.05, rng));
            if kind == "relu" {
                g.relu(a)
            } else {
                g.silu(a)
            }
        }
        "group_norm" => {
            let groups = rng.random_range(1..=2usize);
            let c = groups * rng.random_range(1..=2usize);
            let a = param(&mut g, "a", Tensor::randn(&[batch, c, 2, rng.random_range(1..=3usize)], 1.0, rng));
            g.group_norm(a, groups)
        }
        "channel_add" | "channel_mul" => {
            let c = rng.random_range(1..=3usize);
            let x = param(&mut g, "x", Tensor::randn(&[batch, c, 2, 3], 1.0, rng));
            let v = param(&mut g, "v", Tensor::randn(&[batch, c], 1.0, rng));
            if kind == "channel_add" {
                g.channel_add(x, v)
            } else {
                g.channel_mul(x, v)
            }
        }
        "avg_pool2" => {
            let a = param(&mut g, "a", Tensor::randn(&[batch, 2, 4, 2 * cols], 1.0, rng));
            g.avg_pool2(a)
        }
        "upsample2" => {
            let a = param(&mut g, "a", Tensor::randn(&[batch, 2, rows, cols], 1.0, rng));
            g.upsample2(a)
        }
        "reshape" => {
            let a = param(&mut g, "a", Tensor::randn(&[rows, cols, 2], 1.0, rng));
            g.reshape(a, &[0, rows])
        }
        "concat" => {
            let a = param(&mut g, "a", Tensor::randn(&[batch, 1, 3], 1.0, rng));
            let b = param(&mut g, "b", Tensor::randn(&[batch, rows, 3], 1.0, rng));
            g.concat(&[a, b])
        }
        "mean" | "sum_squares" | "row_mean_squares" => {
            let a = param(&mut g, "a", Tensor::randn(&[rows, cols, 2], 1.0, rng));
            match kind {
                "mean" => g.mean(a),
                "sum_squares" => g.sum_squares(a),
                _ => g.row_mean_squares(a),
            }
        }
        other => panic!("unknown op kind {other}"),
    };

    // Fixed random weights reduce the op output to a scalar with a generic
    // (non-symmetric) upstream gradient.
    let probe_shape = probe_shape(&g, &params, &inputs, out);
    inputs.push(("probe".into(), Tensor::randn(&probe_shape, 1.0, rng)));
    let probe = g.input("probe");
    let weighted = g.mul(out, probe);
    let output = g.mean(weighted);
    OpCase {
        graph: g,
        params,
        inputs,
        output,
    }
}

fn probe_shape(g: &Graph, params: &ParamStore, inputs: &[(String, Tensor)], out: NodeId) -> Vec<usize> {
    let feeds: Vec<(&str, &Tensor)> = inputs.iter().map(|(n, t)| (n.as_str(), t)).collect();
    g.forward(params, &feeds)
        .expect("op case evaluates")
        .value(out)
        .shape()
        .to_vec()
}
