//! 2-D convolution and its adjoint, via im2col and a single GEMM per sample.
//!
//! Kernels are laid out `[F, C, k, k]`. `conv2d` maps `C` channels to `F`;
//! `conv_transpose2d` with the same kernel maps `F` channels back to `C` and
//! is the exact adjoint of `conv2d`.

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::tensor::Tensor;

/// Output side of a strided convolution, `None` when the kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output side of a transposed convolution.
pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Float>(x: &[T], g: &Geometry, col: &mut [T]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.height {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix as usize >= g.width {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of `col` back into image space; the adjoint of [`im2col`].
fn col2im<T: Float>(col: &[T], g: &Geometry, x: &mut [T]) {
    let k = g.kernel;
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn kernel_dims<T: Float>(kernel: &Tensor<T>) -> Result<[usize; 4]> {
    let [f, c, kh, kw] = kernel.dims4()?;
    if kh != kw {
        return Err(NnError::Shape(format!(
            "only square kernels are supported, got {kh}x{kw}"
        )));
    }
    Ok([f, c, kh, kw])
}

/// Cross-correlation of `input [N,C,H,W]` with `kernel [F,C,k,k]`.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let [f, kc, k, _] = kernel_dims(kernel)?;
    if c != kc {
        return Err(NnError::ChannelMismatch {
            input: c,
            kernel: kc,
        });
    }
    let (out_h, out_w) = match (
        conv_output_size(h, k, stride, padding),
        conv_output_size(w, k, stride, padding),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(NnError::Shape(format!(
                "kernel {k} stride {stride} padding {padding} does not fit a {h}x{w} input"
            )))
        }
    };
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h,
        out_w,
    };
    let mut out = Tensor::zeros([n, f, out_h, out_w]);
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let in_len = c * h * w;
    let out_len = f * out_h * out_w;
    for b in 0..n {
        im2col(&input.data()[b * in_len..(b + 1) * in_len], &g, &mut col);
        T::gemm(
            f,
            g.col_rows(),
            g.col_cols(),
            kernel.data(),
            false,
            &col,
            false,
            &mut out.data_mut()[b * out_len..(b + 1) * out_len],
            false,
        );
    }
    Ok(out)
}

/// Transposed convolution with the natural output size `(H−1)·s − 2p + k`.
pub fn conv_transpose2d<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [_, _, h, w] = input.dims4()?;
    let [_, _, k, _] = kernel_dims(kernel)?;
    let (out_h, out_w) = match (
        conv_transpose_output_size(h, k, stride, padding),
        conv_transpose_output_size(w, k, stride, padding),
    ) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(NnError::Shape(format!(
                "transposed kernel {k} stride {stride} padding {padding} yields an empty output for {h}x{w}"
            )))
        }
    };
    conv_transpose2d_sized(input, kernel, stride, padding, out_h, out_w)
}

/// Transposed convolution producing an explicit `out_h × out_w`, which must be
/// a size whose forward convolution has the input's spatial shape.
pub fn conv_transpose2d_sized<T: Float>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let [n, f_in, h, w] = input.dims4()?;
    let [f, c, k, _] = kernel_dims(kernel)?;
    if f_in != f {
        return Err(NnError::ChannelMismatch {
            input: f_in,
            kernel: f,
        });
    }
    if conv_output_size(out_h, k, stride, padding) != Some(h)
        || conv_output_size(out_w, k, stride, padding) != Some(w)
    {
        return Err(NnError::Shape(format!(
            "output {out_h}x{out_w} is not consistent with input {h}x{w} (k={k}, s={stride}, p={padding})"
        )));
    }
    let g = Geometry {
        channels: c,
        height: out_h,
        width: out_w,
        kernel: k,
        stride,
        padding,
        out_h: h,
        out_w: w,
    };
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let in_len = f * h * w;
    let out_len = c * out_h * out_w;
    for b in 0..n {
        // col = Kᵀ · y
        T::gemm(
            g.col_rows(),
            f,
            g.col_cols(),
            kernel.data(),
            true,
            &input.data()[b * in_len..(b + 1) * in_len],
            false,
            &mut col,
            false,
        );
        col2im(&col, &g, &mut out.data_mut()[b * out_len..(b + 1) * out_len]);
    }
    Ok(out)
}

/// Kernel gradient of `y = conv2d(x, K)` given `dy`: `Σ_n dy_n · col(x_n)ᵀ`.
pub(crate) fn conv2d_kernel_grad<T: Float>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let [_, f, out_h, out_w] = grad_out.dims4()?;
    let k = kernel_shape[2];
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h,
        out_w,
    };
    let mut grad = Tensor::zeros(kernel_shape.to_vec());
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let in_len = c * h * w;
    let out_len = f * out_h * out_w;
    for b in 0..n {
        im2col(&input.data()[b * in_len..(b + 1) * in_len], &g, &mut col);
        T::gemm(
            f,
            g.col_cols(),
            g.col_rows(),
            &grad_out.data()[b * out_len..(b + 1) * out_len],
            false,
            &col,
            true,
            grad.data_mut(),
            true,
        );
    }
    Ok(grad)
}

/// Kernel gradient of `x = conv_transpose2d(y, K)` given `dx`: `Σ_n y_n · col(dx_n)ᵀ`.
pub(crate) fn conv_transpose2d_kernel_grad<T: Float>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernel_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d_kernel_grad(grad_out, input, kernel_shape, stride, padding)
}
