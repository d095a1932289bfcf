//! Dense 4-D tensors (batch, channel, height, width) with reverse-mode
//! automatic differentiation.
//!
//! Tensors are cheaply clonable handles (`Rc`) onto immutable value buffers;
//! the only mutation after creation is gradient accumulation and in-place
//! parameter updates by the optimizer. A training run owns its tensors on a
//! single thread; independent runs can live on independent threads because
//! nothing is shared between handles from different graphs.

mod autograd;
pub mod conv;
pub mod io;

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use autograd::Op;
pub use autograd::{Graph, GraphNode};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use conv::ConvGeom;

/// Tensor dimensions in NCHW order.
pub type Dims = [usize; 4];

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Inner {
    id: u64,
    dims: Dims,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: Cell<bool>,
    backward_run: Cell<bool>,
    op: Op,
}

/// A dense NCHW value with optional gradient tracking.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, dims={:?}, grad={})",
            self.inner.id,
            self.inner.dims,
            self.requires_grad()
        )
    }
}

pub(crate) fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

impl Tensor {
    fn build(data: Vec<f32>, dims: Dims, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), numel(dims));
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                dims,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                backward_run: Cell::new(false),
                op,
            }),
        }
    }

    // Constructors

    pub fn zeros(dims: Dims) -> Tensor {
        Tensor::build(vec![0.0; numel(dims)], dims, false, Op::Leaf)
    }

    pub fn full(dims: Dims, value: f32) -> Tensor {
        Tensor::build(vec![value; numel(dims)], dims, false, Op::Leaf)
    }

    /// A 1x1x1x1 constant.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::full([1, 1, 1, 1], value)
    }

    pub fn from_vec(data: Vec<f32>, dims: Dims) -> Result<Tensor> {
        if data.len() != numel(dims) {
            return Err(Error::Config(format!(
                "from_vec: {} values for dims {:?} ({} expected)",
                data.len(),
                dims,
                numel(dims)
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("from_vec: zero dimension in {dims:?}")));
        }
        Ok(Tensor::build(data, dims, false, Op::Leaf))
    }

    /// A trainable leaf: gradients accumulate here during backward.
    pub fn param(data: Vec<f32>, dims: Dims) -> Result<Tensor> {
        let t = Tensor::from_vec(data, dims)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    // Accessors

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn dims(&self) -> Dims {
        self.inner.dims
    }

    pub fn len(&self) -> usize {
        numel(self.inner.dims)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggle gradient tracking on a leaf (used to freeze a network while
    /// another one trains against it).
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn data_ref(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// The single value of a 1-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Overwrite the buffer in place (optimizer updates). The graph that
    /// produced old values must no longer be alive when this is used.
    pub fn set_data(&self, values: &[f32]) {
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(data.len(), values.len(), "set_data length mismatch");
        data.copy_from_slice(values);
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, label: &str) -> Result<()> {
        if self.inner.data.borrow().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(label.to_string()))
        }
    }

    // Gradients

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad_from_slice(&self, contribution: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (acc, c) in g.iter_mut().zip(contribution) {
                    *acc += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    pub(crate) fn take_grad_for_backprop(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow_mut().take()
    }

    pub(crate) fn restore_grad(&self, g: Vec<f32>) {
        *self.inner.grad.borrow_mut() = Some(g);
    }

    pub(crate) fn backward_already_run(&self) -> bool {
        self.inner.backward_run.get()
    }

    pub(crate) fn mark_backward_run(&self) {
        self.inner.backward_run.set(true);
    }

    pub(crate) fn op(&self) -> &Op {
        &self.inner.op
    }

    /// A leaf sharing this tensor's values but cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.to_vec(), self.dims(), false, Op::Leaf)
    }

    /// Populate `d(self)/d(t)` for every reachable tensor that requires
    /// gradients. `self` must be scalar; calling it twice on the same graph
    /// is an error.
    pub fn backward(&self) -> Result<()> {
        autograd::backward(self)
    }

    // Elementwise and structural ops

    fn same_dims(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.dims(),
                rhs: other.dims(),
            });
        }
        Ok(())
    }

    fn derived(&self, other: Option<&Tensor>) -> bool {
        self.requires_grad() || other.is_some_and(|t| t.requires_grad())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_dims(other, "add")?;
        let data = zip_map(&self.data_ref(), &other.data_ref(), |a, b| a + b);
        Ok(Tensor::build(
            data,
            self.dims(),
            self.derived(Some(other)),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_dims(other, "sub")?;
        let data = zip_map(&self.data_ref(), &other.data_ref(), |a, b| a - b);
        Ok(Tensor::build(
            data,
            self.dims(),
            self.derived(Some(other)),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_dims(other, "mul")?;
        let data = zip_map(&self.data_ref(), &other.data_ref(), |a, b| a * b);
        Ok(Tensor::build(
            data,
            self.dims(),
            self.derived(Some(other)),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data_ref().iter().map(|v| -v).collect();
        Tensor::build(data, self.dims(), self.derived(None), Op::Neg(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        let data = self.data_ref().iter().map(|v| v.abs()).collect();
        Tensor::build(data, self.dims(), self.derived(None), Op::Abs(self.clone()))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let data = self.data_ref().iter().map(|v| v * factor).collect();
        Tensor::build(
            data,
            self.dims(),
            self.derived(None),
            Op::Scale(self.clone(), factor),
        )
    }

    pub fn add_scalar(&self, value: f32) -> Tensor {
        let data = self.data_ref().iter().map(|v| v + value).collect();
        Tensor::build(
            data,
            self.dims(),
            self.derived(None),
            Op::AddScalar(self.clone()),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data_ref().iter().map(|v| v.max(0.0)).collect();
        Tensor::build(data, self.dims(), self.derived(None), Op::Relu(self.clone()))
    }

    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        let data = self
            .data_ref()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v * slope })
            .collect();
        Tensor::build(
            data,
            self.dims(),
            self.derived(None),
            Op::LeakyRelu(self.clone(), slope),
        )
    }

    pub fn tanh_act(&self) -> Tensor {
        let data = self.data_ref().iter().map(|v| v.tanh()).collect();
        Tensor::build(data, self.dims(), self.derived(None), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data_ref()
            .iter()
            .map(|&v| autograd::sigmoid_scalar(v))
            .collect();
        Tensor::build(
            data,
            self.dims(),
            self.derived(None),
            Op::Sigmoid(self.clone()),
        )
    }

    /// log(1 + e^x), evaluated in shifted form so large magnitudes do not
    /// overflow.
    pub fn softplus(&self) -> Tensor {
        let data = self
            .data_ref()
            .iter()
            .map(|&v| autograd::softplus_scalar(v))
            .collect();
        Tensor::build(
            data,
            self.dims(),
            self.derived(None),
            Op::Softplus(self.clone()),
        )
    }

    /// Stack `self`'s channels before `other`'s. Batch and spatial dims must
    /// match.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let [n, ca, h, w] = self.dims();
        let [n2, cb, h2, w2] = other.dims();
        if n != n2 || h != h2 || w != w2 {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.dims(),
                rhs: other.dims(),
            });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        let ad = self.data_ref();
        let bd = other.data_ref();
        for s in 0..n {
            data.extend_from_slice(&ad[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&bd[s * cb * plane..(s + 1) * cb * plane]);
        }
        Ok(Tensor::build(
            data,
            [n, ca + cb, h, w],
            self.derived(Some(other)),
            Op::ConcatChannels(self.clone(), other.clone()),
        ))
    }

    /// Inverted dropout with an explicit RNG stream: kept activations are
    /// rescaled by 1/(1-rate) so the expectation is unchanged. `rate == 0`
    /// is the identity.
    pub fn dropout(&self, rate: f32, rng: &mut Rng) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Rc<[f32]> = (0..self.len())
            .map(|_| if rng.gen::<f32>() < keep { inv } else { 0.0 })
            .collect();
        let data = zip_map(&self.data_ref(), &mask, |v, m| v * m);
        Ok(Tensor::build(
            data,
            self.dims(),
            self.derived(None),
            Op::Dropout {
                input: self.clone(),
                mask,
            },
        ))
    }

    // Reductions

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.data_ref().iter().sum();
        Tensor::build(vec![s], [1, 1, 1, 1], self.derived(None), Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let s: f32 = self.data_ref().iter().sum();
        Tensor::build(
            vec![s / self.len() as f32],
            [1, 1, 1, 1],
            self.derived(None),
            Op::MeanAll(self.clone()),
        )
    }

    /// Per-sample sum over channels and space; output is Nx1x1x1.
    pub fn sum_per_sample(&self) -> Tensor {
        let [n, c, h, w] = self.dims();
        let per = c * h * w;
        let d = self.data_ref();
        let data: Vec<f32> = (0..n).map(|s| d[s * per..(s + 1) * per].iter().sum()).collect();
        Tensor::build(
            data,
            [n, 1, 1, 1],
            self.derived(None),
            Op::SumPerSample(self.clone()),
        )
    }

    /// Per-sample mean over channels and space; output is Nx1x1x1.
    pub fn mean_per_sample(&self) -> Tensor {
        let [n, c, h, w] = self.dims();
        let per = (c * h * w) as f32;
        let d = self.data_ref();
        let data: Vec<f32> = (0..n)
            .map(|s| d[s * per as usize..(s + 1) * per as usize].iter().sum::<f32>() / per)
            .collect();
        Tensor::build(
            data,
            [n, 1, 1, 1],
            self.derived(None),
            Op::MeanPerSample(self.clone()),
        )
    }

    /// Multiply every element by a 1x1x1x1 graph scalar.
    pub fn mul_scalar_t(&self, scalar: &Tensor) -> Result<Tensor> {
        if scalar.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_t",
                lhs: self.dims(),
                rhs: scalar.dims(),
            });
        }
        let s = scalar.item();
        let data = self.data_ref().iter().map(|v| v * s).collect();
        Ok(Tensor::build(
            data,
            self.dims(),
            self.derived(Some(scalar)),
            Op::MulScalarT {
                input: self.clone(),
                scalar: scalar.clone(),
            },
        ))
    }

    /// Divide every element by `max(scalar, floor)`. The clamp keeps a zero
    /// divisor from poisoning the result; no gradient flows to the scalar
    /// while it is clamped.
    pub fn div_scalar_t(&self, scalar: &Tensor, floor: f32) -> Result<Tensor> {
        if scalar.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "div_scalar_t",
                lhs: self.dims(),
                rhs: scalar.dims(),
            });
        }
        let s = scalar.item().max(floor);
        let data = self.data_ref().iter().map(|v| v / s).collect();
        Ok(Tensor::build(
            data,
            self.dims(),
            self.derived(Some(scalar)),
            Op::DivScalarT {
                input: self.clone(),
                scalar: scalar.clone(),
                floor,
            },
        ))
    }

    /// uᵀ W v of the matricized tensor (dim0 x rest), as a 1x1x1x1 graph
    /// scalar. `u` and `v` are treated as constants.
    pub fn bilinear_form(&self, u: &Rc<[f32]>, v: &Rc<[f32]>) -> Result<Tensor> {
        let rows = self.dims()[0];
        let cols = self.len() / rows;
        if u.len() != rows || v.len() != cols {
            return Err(Error::Config(format!(
                "bilinear_form: u/v lengths {}x{} for matricized {rows}x{cols}",
                u.len(),
                v.len()
            )));
        }
        let d = self.data_ref();
        let mut acc = 0.0f32;
        for (i, &ui) in u.iter().enumerate() {
            let row = &d[i * cols..(i + 1) * cols];
            let dot: f32 = row.iter().zip(v.iter()).map(|(w, vv)| w * vv).sum();
            acc += ui * dot;
        }
        Ok(Tensor::build(
            vec![acc],
            [1, 1, 1, 1],
            self.derived(None),
            Op::BilinearForm {
                input: self.clone(),
                u: Rc::clone(u),
                v: Rc::clone(v),
            },
        ))
    }

    // Convolutions

    /// Cross-correlation with weight (C_out, C_in, kH, kW) and a per-output-
    /// channel bias of dims (1, C_out, 1, 1).
    pub fn conv2d(&self, weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let geom = ConvGeom::forward(self.dims(), weight.dims(), stride, pad)?;
        check_bias(bias, geom.c_out, "conv2d")?;
        let data = conv::conv2d_forward(
            &self.data_ref(),
            &weight.data_ref(),
            Some(&bias.data_ref()),
            &geom,
        );
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(Tensor::build(
            data,
            geom.output_dims(),
            rg,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                geom,
            },
        ))
    }

    /// Adjoint of `conv2d` with the same weight layout: maps C_out-channel
    /// maps back up to C_in-channel maps, upsampling by `stride`.
    pub fn transposed_conv2d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let geom = ConvGeom::transposed(self.dims(), weight.dims(), stride, pad)?;
        check_bias(bias, geom.c_in, "transposed_conv2d")?;
        let mut data = conv::conv2d_backward_input(&self.data_ref(), &weight.data_ref(), &geom);
        let plane = geom.h_in * geom.w_in;
        let bd = bias.data_ref();
        for s in 0..geom.n {
            for c in 0..geom.c_in {
                let base = (s * geom.c_in + c) * plane;
                for v in &mut data[base..base + plane] {
                    *v += bd[c];
                }
            }
        }
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        Ok(Tensor::build(
            data,
            geom.input_dims(),
            rg,
            Op::ConvTranspose2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                geom,
            },
        ))
    }

    // Non-differentiable raster helpers (data preparation only)

    /// Nearest-neighbor resize to (new_h, new_w). Produces a detached leaf.
    pub fn nearest_resize(&self, new_h: usize, new_w: usize) -> Tensor {
        let [n, c, h, w] = self.dims();
        let d = self.data_ref();
        let mut out = vec![0.0f32; n * c * new_h * new_w];
        for s in 0..n {
            for ch in 0..c {
                let src = &d[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                let dst = &mut out[(s * c + ch) * new_h * new_w..(s * c + ch + 1) * new_h * new_w];
                for oy in 0..new_h {
                    let iy = (oy * h) / new_h;
                    for ox in 0..new_w {
                        let ix = (ox * w) / new_w;
                        dst[oy * new_w + ox] = src[iy * w + ix];
                    }
                }
            }
        }
        Tensor::build(out, [n, c, new_h, new_w], false, Op::Leaf)
    }

    /// Crop a (crop_h, crop_w) window at row/col offset. Detached leaf.
    pub fn crop(&self, oy: usize, ox: usize, crop_h: usize, crop_w: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims();
        if oy + crop_h > h || ox + crop_w > w {
            return Err(Error::Config(format!(
                "crop window {crop_h}x{crop_w} at ({oy},{ox}) exceeds {h}x{w}"
            )));
        }
        let d = self.data_ref();
        let mut out = Vec::with_capacity(n * c * crop_h * crop_w);
        for s in 0..n {
            for ch in 0..c {
                let plane = &d[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                for y in 0..crop_h {
                    let row = (oy + y) * w + ox;
                    out.extend_from_slice(&plane[row..row + crop_w]);
                }
            }
        }
        Tensor::from_vec(out, [n, c, crop_h, crop_w])
    }

    /// Stack single-sample tensors along the batch axis. Detached leaf.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("stack_batch: empty".into()))?;
        let [_, c, h, w] = first.dims();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            let [n1, c1, h1, w1] = t.dims();
            if n1 != 1 || c1 != c || h1 != h || w1 != w {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    lhs: first.dims(),
                    rhs: t.dims(),
                });
            }
            data.extend_from_slice(&t.data_ref());
        }
        Tensor::from_vec(data, [items.len(), c, h, w])
    }
}

fn check_bias(bias: &Tensor, c_out: usize, op: &'static str) -> Result<()> {
    if bias.dims() != [1, c_out, 1, 1] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: [1, c_out, 1, 1],
            rhs: bias.dims(),
        });
    }
    Ok(())
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Fill a tensor-sized buffer with N(0, std²) draws.
pub fn gaussian(dims: Dims, std: f32, rng: &mut Rng) -> Vec<f32> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0f32, std).expect("std must be finite and positive");
    (0..numel(dims)).map(|_| normal.sample(rng)).collect()
}
