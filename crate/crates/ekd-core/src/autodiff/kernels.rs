//! Raw numeric kernels shared by forward and backward passes.
//!
//! Parallel kernels split work so that every output element is produced by
//! exactly one task with a fixed sequential accumulation order, keeping
//! results bitwise reproducible regardless of thread count.

use rayon::prelude::*;

use crate::error::{EkdError, Result};
use crate::tensor::Scalar;

/// Work below this many multiply-adds is not worth a rayon dispatch.
const PAR_THRESHOLD: usize = 1 << 16;

/// Geometry of a 2D convolution / im2col lowering over NCHW input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(EkdError::shape("conv2d", "kernel and stride must be positive"));
        }
        let out_h = conv_out_dim(h, kernel, stride, padding, "conv2d")?;
        let out_w = conv_out_dim(w, kernel, stride, padding, "conv2d")?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.n * self.out_h * self.out_w
    }
}

/// Geometry of a 2D max-pool over NCHW input (no padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(n: usize, c: usize, h: usize, w: usize, kernel: usize, stride: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(EkdError::shape("max_pool2d", "kernel and stride must be positive"));
        }
        let out_h = conv_out_dim(h, kernel, stride, 0, "max_pool2d")?;
        let out_w = conv_out_dim(w, kernel, stride, 0, "max_pool2d")?;
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            kernel,
            stride,
            out_h,
            out_w,
        })
    }
}

pub fn conv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    op: &'static str,
) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(EkdError::shape(
            op,
            format!("window {kernel} larger than padded input {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `y += alpha * x`, element-wise over equal-length slices.
#[inline]
pub fn axpy<E: Scalar>(y: &mut [E], alpha: E, x: &[E]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// Dot product with a fixed four-way accumulation tree.
#[inline]
pub fn dot<E: Scalar>(a: &[E], b: &[E]) -> E {
    let mut s0 = E::zero();
    let mut s1 = E::zero();
    let mut s2 = E::zero();
    let mut s3 = E::zero();
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        s0 = s0 + a[j] * b[j];
        s1 = s1 + a[j + 1] * b[j + 1];
        s2 = s2 + a[j + 2] * b[j + 2];
        s3 = s3 + a[j + 3] * b[j + 3];
    }
    let mut tail = E::zero();
    for j in chunks * 4..a.len() {
        tail = tail + a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    let row = |out_row: &mut [E], i: usize| {
        for p in 0..k {
            axpy(out_row, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(out_row, i));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(out_row, i);
        }
    }
    out
}

/// dA[m,k] = G[m,n] * B[k,n]^T  (gradient of matmul w.r.t. its left operand).
pub fn matmul_nt<E: Scalar>(g: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    let row = |out_row: &mut [E], i: usize| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, slot) in out_row.iter_mut().enumerate() {
            *slot = dot(g_row, &b[p * n..(p + 1) * n]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, out_row)| row(out_row, i));
    } else {
        for (i, out_row) in out.chunks_mut(k).enumerate() {
            row(out_row, i);
        }
    }
    out
}

/// dB[k,n] = A[m,k]^T * G[m,n]  (gradient of matmul w.r.t. its right operand).
pub fn matmul_tn<E: Scalar>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    let row = |out_row: &mut [E], p: usize| {
        for i in 0..m {
            axpy(out_row, a[i * k + p], &g[i * n..(i + 1) * n]);
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(p, out_row)| row(out_row, p));
    } else {
        for (p, out_row) in out.chunks_mut(n).enumerate() {
            row(out_row, p);
        }
    }
    out
}

/// Lowers NCHW input to a patch matrix of shape
/// `[c_in * kernel * kernel, n * out_h * out_w]`; zero padding positions stay 0.
pub fn im2col<E: Scalar>(x: &[E], g: &ConvGeom) -> Vec<E> {
    let cols = g.positions();
    let mut out = vec![E::zero(); g.patch_len() * cols];
    let k = g.kernel;
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let out_row = &mut out[r * cols..(r + 1) * cols];
                for ni in 0..g.n {
                    let x_base = (ni * g.c_in + ci) * g.h * g.w;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let col_base = (ni * g.out_h + oy) * g.out_w;
                        let in_row = x_base + iy as usize * g.w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            out_row[col_base + ox] = x[in_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add transpose of [`im2col`]: accumulates patch-matrix gradients
/// back onto input positions.
pub fn col2im_add<E: Scalar>(d_cols: &[E], g: &ConvGeom, dx: &mut [E]) {
    let cols = g.positions();
    let k = g.kernel;
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let grad_row = &d_cols[r * cols..(r + 1) * cols];
                for ni in 0..g.n {
                    let x_base = (ni * g.c_in + ci) * g.h * g.w;
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let col_base = (ni * g.out_h + oy) * g.out_w;
                        let in_row = x_base + iy as usize * g.w;
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            dx[in_row + ix as usize] =
                                dx[in_row + ix as usize] + grad_row[col_base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max pool forward; argmax records the flat input index of each window
/// maximum (first occurrence wins ties, so results are order-deterministic).
pub fn max_pool<E: Scalar>(x: &[E], g: &PoolGeom) -> (Vec<E>, Vec<u32>) {
    let out_len = g.n * g.c * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(out_len);
    let mut argmax = Vec::with_capacity(out_len);
    for ni in 0..g.n {
        for ci in 0..g.c {
            let base = (ni * g.c + ci) * g.h * g.w;
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let y0 = oy * g.stride;
                    let x0 = ox * g.stride;
                    let mut best_idx = base + y0 * g.w + x0;
                    let mut best = x[best_idx];
                    for ky in 0..g.kernel {
                        for kx in 0..g.kernel {
                            let idx = base + (y0 + ky) * g.w + (x0 + kx);
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx as u32);
                }
            }
        }
    }
    (out, argmax)
}

/// Reorders `data` (row-major, `shape`) so that output axis `i` is input axis
/// `axes[i]`. Returns the permuted shape and data.
pub fn permute<E: Scalar>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<E>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = crate::tensor::strides_of(&out_shape);
    // fac[j]: contribution of input axis j to the output linear index.
    let mut fac = vec![0usize; rank];
    for (pos, &a) in axes.iter().enumerate() {
        fac[a] = out_strides[pos];
    }
    let mut out = vec![E::zero(); data.len()];
    let mut coords = vec![0usize; rank];
    let mut out_idx = 0usize;
    for &v in data {
        out[out_idx] = v;
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            out_idx += fac[ax];
            if coords[ax] < shape[ax] {
                break;
            }
            coords[ax] = 0;
            out_idx -= fac[ax] * shape[ax];
        }
    }
    (out_shape, out)
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (pos, &a) in axes.iter().enumerate() {
        inv[a] = pos;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2,3] x [3,2]
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_grad_kernels_match_definitions() {
        let a = vec![1.0f64, -2.0, 0.5, 3.0, 4.0, -1.0]; // [2,3]
        let g = vec![0.25, -0.5, 1.5, 2.0]; // [2,2]
        let b = vec![1.0, 0.0, -1.0, 2.0, 0.5, 0.5]; // [3,2]
        let da = matmul_nt(&g, &b, 2, 3, 2);
        let db = matmul_tn(&a, &g, 2, 3, 2);
        // dA[i,p] = sum_j g[i,j] * b[p,j]
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..2).map(|j| g[i * 2 + j] * b[p * 2 + j]).sum();
                assert!((da[i * 3 + p] - want).abs() < 1e-12);
            }
        }
        // dB[p,j] = sum_i a[i,p] * g[i,j]
        for p in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..2).map(|i| a[i * 3 + p] * g[i * 2 + j]).sum();
                assert!((db[p * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permute_round_trip() {
        let shape = vec![2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let axes = vec![2, 0, 1];
        let (pshape, pdata) = permute(&data, &shape, &axes);
        assert_eq!(pshape, vec![4, 2, 3]);
        let (bshape, bdata) = permute(&pdata, &pshape, &inverse_axes(&axes));
        assert_eq!(bshape, shape);
        assert_eq!(bdata, data);
    }

    #[test]
    fn im2col_counts_padding_as_zero() {
        // 1x1x2x2 input, kernel 2, stride 1, padding 1 -> 3x3 positions
        let g = ConvGeom::new(1, 1, 2, 2, 2, 1, 1).unwrap();
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let cols = im2col(&x, &g);
        assert_eq!(cols.len(), 4 * 9);
        // center position (oy=1, ox=1) sees the full input
        let center: Vec<f64> = (0..4).map(|r| cols[r * 9 + 4]).collect();
        assert_eq!(center, x);
        // top-left position only overlaps at its bottom-right tap
        assert_eq!(cols[3 * 9], 1.0);
        assert_eq!(cols[0], 0.0);
    }
}
