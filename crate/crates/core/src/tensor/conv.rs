//! Convolution kernels: an im2col + GEMM fast path and a naive
//! cross-correlation reference. The two must agree within 1e-6; the unit
//! tests enforce that on random inputs.

use crate::error::{Error, Result};

/// Resolved geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Geometry for a forward convolution. Fails if the output size is not
    /// a positive integer.
    pub fn forward(
        input_dims: [usize; 4],
        weight_dims: [usize; 4],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let [n, c_in, h_in, w_in] = input_dims;
        let [c_out, wc_in, kh, kw] = weight_dims;
        if c_in != wc_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input_dims,
                rhs: weight_dims,
            });
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be positive".into()));
        }
        let h_out = out_extent(h_in, kh, stride, pad)?;
        let w_out = out_extent(w_in, kw, stride, pad)?;
        Ok(ConvGeom {
            n,
            c_in,
            h_in,
            w_in,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    /// Geometry for a transposed convolution with input `input_dims` and
    /// weight `(c_maj, c_min, kh, kw)` where `c_maj` matches the input
    /// channels. Expressed internally as the adjoint of a forward
    /// convolution whose *output* is the transposed conv's input.
    pub fn transposed(
        input_dims: [usize; 4],
        weight_dims: [usize; 4],
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeom> {
        let [n, c_maj, h_in, w_in] = input_dims;
        let [wc_maj, c_min, kh, kw] = weight_dims;
        if c_maj != wc_maj {
            return Err(Error::ShapeMismatch {
                op: "transposed_conv2d",
                lhs: input_dims,
                rhs: weight_dims,
            });
        }
        if stride == 0 {
            return Err(Error::Config(
                "transposed_conv2d: stride must be positive".into(),
            ));
        }
        let h_out = (h_in - 1) * stride + kh;
        let w_out = (w_in - 1) * stride + kw;
        if h_out <= 2 * pad || w_out <= 2 * pad {
            return Err(Error::Config(format!(
                "transposed_conv2d: padding {pad} consumes the whole {h_out}x{w_out} output"
            )));
        }
        // Geometry of the adjoint forward conv: maps (h_out, w_out) -> (h_in, w_in).
        Ok(ConvGeom {
            n,
            c_in: c_min,
            h_in: h_out - 2 * pad,
            w_in: w_out - 2 * pad,
            c_out: c_maj,
            kh,
            kw,
            stride,
            pad,
            h_out: h_in,
            w_out: w_in,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn input_dims(&self) -> [usize; 4] {
        [self.n, self.c_in, self.h_in, self.w_in]
    }

    pub fn output_dims(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }
}

fn out_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "conv2d: kernel {k} larger than padded input {padded}"
        )));
    }
    let span = padded - k;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "conv2d: output size ({extent} + 2*{pad} - {k})/{stride} + 1 is not an integer"
        )));
    }
    Ok(span / stride + 1)
}

/// Lower one sample into a (c_in*kh*kw) x (h_out*w_out) column matrix.
/// Out-of-bounds taps are zero.
pub fn im2col(input: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let p = g.out_positions();
    debug_assert_eq!(input.len(), g.c_in * g.h_in * g.w_in);
    debug_assert_eq!(col.len(), g.patch_len() * p);
    col.fill(0.0);
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let src_row = iy as usize * g.w_in;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w_in as isize {
                            continue;
                        }
                        col[row + oy * g.w_out + ox] = plane[src_row + ix as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add a column matrix back onto an image.
pub fn col2im_add(col: &[f32], g: &ConvGeom, image: &mut [f32]) {
    let p = g.out_positions();
    debug_assert_eq!(image.len(), g.c_in * g.h_in * g.w_in);
    debug_assert_eq!(col.len(), g.patch_len() * p);
    for ci in 0..g.c_in {
        let plane = &mut image[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let dst_row = iy as usize * g.w_in;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w_in as isize {
                            continue;
                        }
                        plane[dst_row + ix as usize] += col[row + oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Forward convolution: `out[n] = W @ im2col(in[n]) + bias`.
pub fn conv2d_forward(input: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let k = g.patch_len();
    let p = g.out_positions();
    let in_stride = g.c_in * g.h_in * g.w_in;
    let out_stride = g.c_out * p;
    let mut out = vec![0.0f32; g.n * out_stride];
    let mut col = vec![0.0f32; k * p];
    for s in 0..g.n {
        im2col(&input[s * in_stride..(s + 1) * in_stride], g, &mut col);
        sgemm(
            g.c_out,
            k,
            p,
            1.0,
            weight,
            k as isize,
            1,
            &col,
            p as isize,
            1,
            0.0,
            &mut out[s * out_stride..(s + 1) * out_stride],
        );
        if let Some(b) = bias {
            let slab = &mut out[s * out_stride..(s + 1) * out_stride];
            for (c, &bc) in b.iter().enumerate() {
                for v in &mut slab[c * p..(c + 1) * p] {
                    *v += bc;
                }
            }
        }
    }
    out
}

/// Gradient of the convolution w.r.t. its input: `col2im(Wᵀ @ g_out)`.
pub fn conv2d_backward_input(g_out: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let k = g.patch_len();
    let p = g.out_positions();
    let in_stride = g.c_in * g.h_in * g.w_in;
    let out_stride = g.c_out * p;
    let mut d_in = vec![0.0f32; g.n * in_stride];
    let mut dcol = vec![0.0f32; k * p];
    for s in 0..g.n {
        sgemm(
            k,
            g.c_out,
            p,
            1.0,
            weight,
            1,
            k as isize,
            &g_out[s * out_stride..(s + 1) * out_stride],
            p as isize,
            1,
            0.0,
            &mut dcol,
        );
        col2im_add(&dcol, g, &mut d_in[s * in_stride..(s + 1) * in_stride]);
    }
    d_in
}

/// Gradient of the convolution w.r.t. its weight: `Σ_n g_out[n] @ im2col(in[n])ᵀ`.
pub fn conv2d_backward_weight(g_out: &[f32], input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let k = g.patch_len();
    let p = g.out_positions();
    let in_stride = g.c_in * g.h_in * g.w_in;
    let out_stride = g.c_out * p;
    let mut d_w = vec![0.0f32; g.c_out * k];
    let mut col = vec![0.0f32; k * p];
    for s in 0..g.n {
        im2col(&input[s * in_stride..(s + 1) * in_stride], g, &mut col);
        sgemm(
            g.c_out,
            p,
            k,
            1.0,
            &g_out[s * out_stride..(s + 1) * out_stride],
            p as isize,
            1,
            &col,
            1,
            p as isize,
            1.0,
            &mut d_w,
        );
    }
    d_w
}

/// Gradient of the convolution w.r.t. its per-channel bias.
pub fn conv2d_backward_bias(g_out: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p = g.out_positions();
    let out_stride = g.c_out * p;
    let mut d_b = vec![0.0f32; g.c_out];
    for s in 0..g.n {
        let slab = &g_out[s * out_stride..(s + 1) * out_stride];
        for (c, acc) in d_b.iter_mut().enumerate() {
            *acc += slab[c * p..(c + 1) * p].iter().sum::<f32>();
        }
    }
    d_b
}

/// Reference cross-correlation, straight from the definition. Slow; used to
/// pin down the fast path.
pub fn conv2d_naive(input: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let in_stride = g.c_in * g.h_in * g.w_in;
    let p = g.out_positions();
    let mut out = vec![0.0f32; g.n * g.c_out * p];
    for s in 0..g.n {
        let image = &input[s * in_stride..(s + 1) * in_stride];
        for co in 0..g.c_out {
            for oy in 0..g.h_out {
                for ox in 0..g.w_out {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..g.c_in {
                        for ki in 0..g.kh {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h_in as isize {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w_in as isize {
                                    continue;
                                }
                                acc += image[(ci * g.h_in + iy as usize) * g.w_in + ix as usize]
                                    * weight[((co * g.c_in + ci) * g.kh + ki) * g.kw + kj];
                            }
                        }
                    }
                    out[(s * g.c_out + co) * p + oy * g.w_out + ox] = acc;
                }
            }
        }
    }
    out
}
