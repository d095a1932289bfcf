//! Reverse-mode differentiation over the operation graph recorded by the
//! tensor ops.
//!
//! Each tensor carries the primitive operation that produced it. `Graph`
//! traces the DAG rooted at a loss into a topological order; `backward`
//! walks that order exactly once in reverse, accumulating gradients into
//! every tensor that requires them.

use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, ConvGeom,
};
use crate::tensor::Tensor;

pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Neg(Tensor),
    Abs(Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor),
    Relu(Tensor),
    LeakyRelu(Tensor, f32),
    Tanh(Tensor),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        geom: ConvGeom,
    },
    ConcatChannels(Tensor, Tensor),
    Dropout {
        input: Tensor,
        mask: Rc<[f32]>,
    },
    SumAll(Tensor),
    MeanAll(Tensor),
    SumPerSample(Tensor),
    MeanPerSample(Tensor),
    /// input * scalar, where scalar is a 1x1x1x1 graph tensor.
    MulScalarT {
        input: Tensor,
        scalar: Tensor,
    },
    /// input / max(scalar, floor); the clamp gates the scalar gradient.
    DivScalarT {
        input: Tensor,
        scalar: Tensor,
        floor: f32,
    },
    /// uᵀ W v over the matricized tensor (dim0 x rest) -> 1x1x1x1.
    BilinearForm {
        input: Tensor,
        u: Rc<[f32]>,
        v: Rc<[f32]>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Abs(..) => "abs",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "transposed_conv2d",
            Op::ConcatChannels(..) => "concat_channels",
            Op::Dropout { .. } => "dropout",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumPerSample(..) => "sum_per_sample",
            Op::MeanPerSample(..) => "mean_per_sample",
            Op::MulScalarT { .. } => "mul_scalar_t",
            Op::DivScalarT { .. } => "div_scalar_t",
            Op::BilinearForm { .. } => "bilinear_form",
        }
    }

    fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => {
                vec![a, b]
            }
            Op::Neg(a)
            | Op::Abs(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumPerSample(a)
            | Op::MeanPerSample(a)
            | Op::Dropout { input: a, .. } => vec![a],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => vec![input, weight, bias],
            Op::MulScalarT { input, scalar } | Op::DivScalarT { input, scalar, .. } => {
                vec![input, scalar]
            }
            Op::BilinearForm { input, .. } => vec![input],
        }
    }
}

/// One traced node, exposed for graph-shape assertions in tests.
#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: u64,
    pub op: &'static str,
    pub input_ids: Vec<u64>,
}

/// Topologically ordered trace of the DAG reachable from a root tensor.
/// Only tensors that require gradients are retained; inputs always precede
/// the node that consumes them.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    pub fn trace(root: &Tensor) -> Graph {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // Iterative DFS with an explicit "expanded" marker so children are
        // emitted before their consumer (postorder).
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.id()) || !t.requires_grad() {
                continue;
            }
            stack.push((t.clone(), true));
            for input in t.op().inputs() {
                if !seen.contains(&input.id()) && input.requires_grad() {
                    stack.push((input.clone(), false));
                }
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn nodes(&self) -> Vec<GraphNode> {
        self.order
            .iter()
            .map(|t| GraphNode {
                id: t.id(),
                op: t.op().name(),
                input_ids: t.op().inputs().iter().map(|i| i.id()).collect(),
            })
            .collect()
    }
}

pub(crate) fn backward(root: &Tensor) -> Result<()> {
    if root.len() != 1 {
        return Err(Error::Autodiff(format!(
            "backward requires a scalar loss, got dims {:?}",
            root.dims()
        )));
    }
    if !root.requires_grad() {
        return Err(Error::Autodiff(
            "backward on a detached graph: loss does not require gradients".into(),
        ));
    }
    if root.backward_already_run() {
        return Err(Error::Autodiff(
            "backward called twice on the same graph without reset".into(),
        ));
    }
    root.mark_backward_run();

    let graph = Graph::trace(root);
    root.accumulate_grad_from_slice(&[1.0]);
    for t in graph.order.iter().rev() {
        let Some(g) = t.take_grad_for_backprop() else {
            continue;
        };
        propagate(t, &g)?;
        t.restore_grad(g);
    }
    Ok(())
}

fn accumulate(target: &Tensor, contribution: &[f32]) {
    if target.requires_grad() {
        target.accumulate_grad_from_slice(contribution);
    }
}

/// Apply one node's vector-Jacobian product, pushing `g` into its inputs.
fn propagate(out: &Tensor, g: &[f32]) -> Result<()> {
    match out.op() {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(a, g);
            accumulate(b, g);
        }
        Op::Sub(a, b) => {
            accumulate(a, g);
            if b.requires_grad() {
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                b.accumulate_grad_from_slice(&neg);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.data_ref();
                let ga: Vec<f32> = g.iter().zip(bd.iter()).map(|(gv, bv)| gv * bv).collect();
                a.accumulate_grad_from_slice(&ga);
            }
            if b.requires_grad() {
                let ad = a.data_ref();
                let gb: Vec<f32> = g.iter().zip(ad.iter()).map(|(gv, av)| gv * av).collect();
                b.accumulate_grad_from_slice(&gb);
            }
        }
        Op::Neg(a) => {
            if a.requires_grad() {
                let ga: Vec<f32> = g.iter().map(|v| -v).collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::Abs(a) => {
            if a.requires_grad() {
                let ad = a.data_ref();
                let ga: Vec<f32> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(gv, &av)| gv * av.signum() * f32::from(av != 0.0))
                    .collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::Scale(a, c) => {
            if a.requires_grad() {
                let ga: Vec<f32> = g.iter().map(|v| v * c).collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::AddScalar(a) => accumulate(a, g),
        Op::Relu(a) => {
            if a.requires_grad() {
                let ad = a.data_ref();
                // Subgradient at exactly 0 is 0.
                let ga: Vec<f32> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(gv, &av)| if av > 0.0 { *gv } else { 0.0 })
                    .collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::LeakyRelu(a, slope) => {
            if a.requires_grad() {
                let ad = a.data_ref();
                let ga: Vec<f32> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(gv, &av)| if av > 0.0 { *gv } else { gv * slope })
                    .collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::Tanh(a) => {
            if a.requires_grad() {
                let od = out.data_ref();
                let ga: Vec<f32> = g
                    .iter()
                    .zip(od.iter())
                    .map(|(gv, &ov)| gv * (1.0 - ov * ov))
                    .collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::Sigmoid(a) => {
            if a.requires_grad() {
                let od = out.data_ref();
                let ga: Vec<f32> = g
                    .iter()
                    .zip(od.iter())
                    .map(|(gv, &ov)| gv * ov * (1.0 - ov))
                    .collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::Softplus(a) => {
            if a.requires_grad() {
                let ad = a.data_ref();
                let ga: Vec<f32> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(gv, &av)| gv * sigmoid_scalar(av))
                    .collect();
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            if input.requires_grad() {
                let d_in = conv2d_backward_input(g, &weight.data_ref(), geom);
                input.accumulate_grad_from_slice(&d_in);
            }
            if weight.requires_grad() {
                let d_w = conv2d_backward_weight(g, &input.data_ref(), geom);
                weight.accumulate_grad_from_slice(&d_w);
            }
            if bias.requires_grad() {
                let d_b = conv2d_backward_bias(g, geom);
                bias.accumulate_grad_from_slice(&d_b);
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            geom,
        } => {
            // Adjoint pair of conv2d: forward is conv2d_backward_input, so
            // the input gradient is a plain forward convolution.
            if input.requires_grad() {
                let d_in = conv2d_forward(g, &weight.data_ref(), None, geom);
                input.accumulate_grad_from_slice(&d_in);
            }
            if weight.requires_grad() {
                let d_w = conv2d_backward_weight(&input.data_ref(), g, geom);
                weight.accumulate_grad_from_slice(&d_w);
            }
            if bias.requires_grad() {
                // Transposed-conv bias is per c_min channel of the output map.
                let [n, c, h, w] = out.dims();
                let plane = h * w;
                let mut d_b = vec![0.0f32; c];
                for s in 0..n {
                    for (ci, acc) in d_b.iter_mut().enumerate() {
                        let base = (s * c + ci) * plane;
                        *acc += g[base..base + plane].iter().sum::<f32>();
                    }
                }
                bias.accumulate_grad_from_slice(&d_b);
            }
        }
        Op::ConcatChannels(a, b) => {
            let [n, ca, h, w] = a.dims();
            let cb = b.dims()[1];
            let plane = h * w;
            if a.requires_grad() {
                let mut ga = vec![0.0f32; n * ca * plane];
                for s in 0..n {
                    let src = (s * (ca + cb)) * plane;
                    ga[s * ca * plane..(s + 1) * ca * plane]
                        .copy_from_slice(&g[src..src + ca * plane]);
                }
                a.accumulate_grad_from_slice(&ga);
            }
            if b.requires_grad() {
                let mut gb = vec![0.0f32; n * cb * plane];
                for s in 0..n {
                    let src = (s * (ca + cb) + ca) * plane;
                    gb[s * cb * plane..(s + 1) * cb * plane]
                        .copy_from_slice(&g[src..src + cb * plane]);
                }
                b.accumulate_grad_from_slice(&gb);
            }
        }
        Op::Dropout { input, mask } => {
            if input.requires_grad() {
                let ga: Vec<f32> = g.iter().zip(mask.iter()).map(|(gv, mv)| gv * mv).collect();
                input.accumulate_grad_from_slice(&ga);
            }
        }
        Op::SumAll(a) => {
            if a.requires_grad() {
                let ga = vec![g[0]; a.len()];
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::MeanAll(a) => {
            if a.requires_grad() {
                let ga = vec![g[0] / a.len() as f32; a.len()];
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::SumPerSample(a) => {
            if a.requires_grad() {
                let [n, c, h, w] = a.dims();
                let per = c * h * w;
                let mut ga = vec![0.0f32; n * per];
                for s in 0..n {
                    ga[s * per..(s + 1) * per].fill(g[s]);
                }
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::MeanPerSample(a) => {
            if a.requires_grad() {
                let [n, c, h, w] = a.dims();
                let per = c * h * w;
                let mut ga = vec![0.0f32; n * per];
                for s in 0..n {
                    ga[s * per..(s + 1) * per].fill(g[s] / per as f32);
                }
                a.accumulate_grad_from_slice(&ga);
            }
        }
        Op::MulScalarT { input, scalar } => {
            let s = scalar.data_ref()[0];
            if input.requires_grad() {
                let ga: Vec<f32> = g.iter().map(|v| v * s).collect();
                input.accumulate_grad_from_slice(&ga);
            }
            if scalar.requires_grad() {
                let id = input.data_ref();
                let ds: f32 = g.iter().zip(id.iter()).map(|(gv, iv)| gv * iv).sum();
                scalar.accumulate_grad_from_slice(&[ds]);
            }
        }
        Op::DivScalarT {
            input,
            scalar,
            floor,
        } => {
            let raw = scalar.data_ref()[0];
            let s = raw.max(*floor);
            if input.requires_grad() {
                let ga: Vec<f32> = g.iter().map(|v| v / s).collect();
                input.accumulate_grad_from_slice(&ga);
            }
            if scalar.requires_grad() && raw > *floor {
                let id = input.data_ref();
                let dot: f32 = g.iter().zip(id.iter()).map(|(gv, iv)| gv * iv).sum();
                scalar.accumulate_grad_from_slice(&[-dot / (s * s)]);
            }
        }
        Op::BilinearForm { input, u, v } => {
            if input.requires_grad() {
                let cols = v.len();
                let mut ga = vec![0.0f32; input.len()];
                for (i, &ui) in u.iter().enumerate() {
                    let coeff = g[0] * ui;
                    for (gj, vj) in ga[i * cols..(i + 1) * cols].iter_mut().zip(v.iter()) {
                        *gj = coeff * vj;
                    }
                }
                input.accumulate_grad_from_slice(&ga);
            }
        }
    }
    Ok(())
}

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus: log(1 + e^x).
pub(crate) fn softplus_scalar(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
