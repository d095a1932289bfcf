//! Network building blocks: spectrally normalized (transposed) convolution
//! blocks with activation and dropout, plus the fusion combine step used by
//! the two-branch discriminators.

use std::rc::Rc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gaussian, Dims, Tensor};

/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f32 = 0.02;
/// Divisor floor when a spectral estimate collapses to zero.
pub const SIGMA_FLOOR: f32 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    None,
    Relu,
    LeakyRelu(f32),
    Tanh,
}

impl Activation {
    pub fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Activation::None => t.clone(),
            Activation::Relu => t.relu(),
            Activation::LeakyRelu(slope) => t.leaky_relu(*slope),
            Activation::Tanh => t.tanh_act(),
        }
    }
}

/// Declarative description of one convolution block.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Transposed blocks upsample by `stride` instead of downsampling.
    pub transposed: bool,
    pub activation: Activation,
    pub use_sn: bool,
    pub dropout_rate: f32,
}

impl ConvBlockSpec {
    /// Downsampling block: 4x4 kernel, stride 2, pad 1.
    pub fn down(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        ConvBlockSpec {
            in_channels,
            out_channels,
            kernel: 4,
            stride: 2,
            pad: 1,
            transposed: false,
            activation,
            use_sn: true,
            dropout_rate: 0.0,
        }
    }

    /// Upsampling block: transposed 4x4 kernel, stride 2, pad 1.
    pub fn up(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        ConvBlockSpec {
            transposed: true,
            ..ConvBlockSpec::down(in_channels, out_channels, activation)
        }
    }

    /// Resolution-preserving block: 3x3 kernel, stride 1, pad 1. A stride-1
    /// 4x4 kernel cannot keep spatial dims, so same-size stages use 3x3.
    pub fn same(in_channels: usize, out_channels: usize, activation: Activation) -> Self {
        ConvBlockSpec {
            kernel: 3,
            stride: 1,
            ..ConvBlockSpec::down(in_channels, out_channels, activation)
        }
    }

    pub fn with_dropout(mut self, rate: f32) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_sn(mut self, use_sn: bool) -> Self {
        self.use_sn = use_sn;
        self
    }

    /// Weight dims: (C_out, C_in, k, k) for plain blocks and (C_in, C_out,
    /// k, k) for transposed ones (dim 0 always matches the conv input side).
    pub fn weight_dims(&self) -> Dims {
        if self.transposed {
            [self.in_channels, self.out_channels, self.kernel, self.kernel]
        } else {
            [self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }
}

/// Persistent power-iteration state for spectral normalization. The
/// singular vector estimates carry across training steps; evaluation-mode
/// normalizations reuse them untouched, so a frozen layer is an exactly
/// linear function of its weight.
#[derive(Debug, Clone)]
pub struct SpectralState {
    pub u: Vec<f32>,
    /// Right singular-vector estimate; empty until the first normalization.
    pub v: Vec<f32>,
    pub sigma_estimate: f32,
    pub power_iters_per_step: usize,
    pub zero_weight_warned: bool,
}

impl SpectralState {
    pub fn new(rows: usize, rng: &mut Rng) -> SpectralState {
        let mut u: Vec<f32> = (0..rows).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        normalize_in_place(&mut u);
        SpectralState {
            u,
            v: Vec::new(),
            sigma_estimate: 1.0,
            power_iters_per_step: 1,
            zero_weight_warned: false,
        }
    }

    /// Normalize `weight` by its estimated top singular value, matricized as
    /// (dim0) x (rest). With `update_u` the persisted estimate advances by
    /// `power_iters_per_step` power iterations; without it (evaluation) the
    /// stored u is used as-is.
    pub fn normalize(&mut self, weight: &Tensor, update_u: bool) -> Result<Tensor> {
        let rows = weight.dims()[0];
        let cols = weight.len() / rows;
        if self.u.len() != rows {
            return Err(Error::Config(format!(
                "spectral state has u of length {}, weight rows {rows}",
                self.u.len()
            )));
        }

        {
            let w = weight.data_ref();
            if update_u || self.v.len() != cols {
                let iters = if update_u { self.power_iters_per_step } else { 1 };
                let mut v = vec![0.0f32; cols];
                for _ in 0..iters {
                    matvec_t(&w, rows, cols, &self.u, &mut v);
                    normalize_in_place(&mut v);
                    if update_u {
                        let mut u_next = vec![0.0f32; rows];
                        matvec(&w, rows, cols, &v, &mut u_next);
                        normalize_in_place(&mut u_next);
                        if u_next.iter().any(|x| *x != 0.0) {
                            self.u = u_next;
                        }
                    }
                }
                self.v = v;
            }
        }

        let u_rc: Rc<[f32]> = Rc::from(self.u.clone().into_boxed_slice());
        let v_rc: Rc<[f32]> = Rc::from(self.v.clone().into_boxed_slice());
        let sigma = weight.bilinear_form(&u_rc, &v_rc)?;
        let sigma_val = sigma.item();
        if sigma_val <= SIGMA_FLOOR {
            self.zero_weight_warned = true;
        }
        self.sigma_estimate = sigma_val.max(SIGMA_FLOOR);
        weight.div_scalar_t(&sigma, SIGMA_FLOOR)
    }
}

/// One training-mode normalization step: advances the persisted u.
pub fn spectral_normalize(weight: &Tensor, state: &mut SpectralState) -> Result<Tensor> {
    state.normalize(weight, true)
}

fn normalize_in_place(v: &mut [f32]) {
    let norm = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt() as f32;
    if norm > 1e-24 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    } else {
        v.fill(0.0);
    }
}

/// y = W v for row-major W (rows x cols).
fn matvec(w: &[f32], rows: usize, cols: usize, v: &[f32], y: &mut [f32]) {
    for (i, yi) in y.iter_mut().enumerate().take(rows) {
        let row = &w[i * cols..(i + 1) * cols];
        *yi = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// y = Wᵀ u for row-major W (rows x cols).
fn matvec_t(w: &[f32], rows: usize, cols: usize, u: &[f32], y: &mut [f32]) {
    y.fill(0.0);
    for (i, &ui) in u.iter().enumerate().take(rows) {
        let row = &w[i * cols..(i + 1) * cols];
        for (yj, wj) in y.iter_mut().zip(row) {
            *yj += ui * wj;
        }
    }
}

/// Draw a fresh weight from N(0, 0.02²) and a zero bias for `spec`.
pub fn init_weights(spec: &ConvBlockSpec, rng: &mut Rng) -> (Tensor, Tensor) {
    let dims = spec.weight_dims();
    let weight = Tensor::param(gaussian(dims, INIT_STD, rng), dims).expect("weight dims");
    let bias = Tensor::param(vec![0.0; spec.out_channels], [1, spec.out_channels, 1, 1])
        .expect("bias dims");
    (weight, bias)
}

/// A convolution block with its parameters and spectral state.
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    pub weight: Tensor,
    pub bias: Tensor,
    pub sn: Option<SpectralState>,
}

impl ConvBlock {
    pub fn init(spec: ConvBlockSpec, rng: &mut Rng) -> ConvBlock {
        let (weight, bias) = init_weights(&spec, rng);
        let sn = spec
            .use_sn
            .then(|| SpectralState::new(spec.weight_dims()[0], rng));
        ConvBlock { spec, weight, bias, sn }
    }

    /// conv (or transposed conv) -> spectral norm -> activation -> dropout.
    /// Dropout only fires in training mode; the spectral u only advances in
    /// training mode.
    pub fn forward(&mut self, input: &Tensor, training: bool, rng: &mut Rng) -> Result<Tensor> {
        let weight = match self.sn.as_mut() {
            Some(state) => state.normalize(&self.weight, training)?,
            None => self.weight.clone(),
        };
        let pre = if self.spec.transposed {
            input.transposed_conv2d(&weight, &self.bias, self.spec.stride, self.spec.pad)?
        } else {
            input.conv2d(&weight, &self.bias, self.spec.stride, self.spec.pad)?
        };
        let mut out = self.spec.activation.apply(&pre);
        if training && self.spec.dropout_rate > 0.0 {
            out = out.dropout(self.spec.dropout_rate, rng)?;
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Convenience wrapper matching the block-level contract.
pub fn conv_block_forward(
    block: &mut ConvBlock,
    input: &Tensor,
    training: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    block.forward(input, training, rng)
}

/// Element-wise sum of two post-activation feature maps. `stage` labels the
/// error if the branch architectures drifted apart.
pub fn fusion_combine(trunk: &Tensor, branch: &Tensor, stage: usize) -> Result<Tensor> {
    if trunk.dims() != branch.dims() {
        return Err(Error::Architecture {
            layer: format!("fusion stage {stage}"),
            msg: format!(
                "trunk {:?} and branch {:?} must have identical dims",
                trunk.dims(),
                branch.dims()
            ),
        });
    }
    trunk.add(branch)
}
