//! Valid (unpadded) 2-D cross-correlation via im2col + GEMM.

use crate::tensor::{gemm, MatRef, Result, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    shapes: [[usize; 4]; 3],
}

/// Output extent of a valid convolution along one axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

impl Geometry {
    pub fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        };
        let (&[batch, c_in, height, width], &[c_out, kc, kh, kw]) = (input, kernel) else {
            return Err(mismatch());
        };
        if kc != c_in {
            return Err(mismatch());
        }
        if bias != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: kernel.to_vec(),
                rhs: bias.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        if kh > height || kw > width {
            return Err(TensorError::KernelTooLarge {
                kernel: (kh, kw),
                input: (height, width),
            });
        }
        let out_h = output_extent(height, kh, stride);
        let out_w = output_extent(width, kw, stride);
        Ok(Geometry {
            batch,
            c_in,
            height,
            width,
            c_out,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            shapes: [
                [batch, c_in, height, width],
                [c_out, c_in, kh, kw],
                [batch, c_out, out_h, out_w],
            ],
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn kernel_shape(&self) -> &[usize] {
        &self.shapes[1]
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes[2]
    }

    /// Rows of the unfolded matrix: `c_in * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x` into a `(patch_len, batch * positions)` row-major matrix.
fn im2col<T: Scalar>(g: &Geometry, x: &[T]) -> Vec<T> {
    let p = g.positions();
    let cols_n = g.batch * p;
    let mut cols = vec![T::zero(); g.patch_len() * cols_n];
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let plane = &x[(b * g.c_in + ci) * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let src = &plane[(oy * g.stride + ky) * g.width + kx..];
                        let dst = &mut dst_row[b * p + oy * g.out_w..b * p + (oy + 1) * g.out_w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds an unfolded gradient back onto the input layout.
fn col2im<T: Scalar>(g: &Geometry, cols: &[T]) -> Vec<T> {
    let p = g.positions();
    let cols_n = g.batch * p;
    let mut dx = vec![T::zero(); g.batch * g.c_in * g.height * g.width];
    for ci in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let base = (b * g.c_in + ci) * g.height * g.width;
                    for oy in 0..g.out_h {
                        let src = &src_row[b * p + oy * g.out_w..b * p + (oy + 1) * g.out_w];
                        let off = base + (oy * g.stride + ky) * g.width + kx;
                        for (ox, &s) in src.iter().enumerate() {
                            dx[off + ox * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns the `(B,Cout,H',W')` output and the unfolded input.
pub fn forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
    let k = g.patch_len();
    let p = g.positions();
    let n = g.batch * p;
    let cols = im2col(g, x);
    let mut out_mat = vec![T::zero(); g.c_out * n];
    gemm(
        T::one(),
        MatRef::row_major(w, g.c_out, k),
        MatRef::row_major(&cols, k, n),
        T::zero(),
        &mut out_mat,
    );
    let mut out = vec![T::zero(); g.batch * g.c_out * p];
    for co in 0..g.c_out {
        let row = &out_mat[co * n..(co + 1) * n];
        for b in 0..g.batch {
            let dst = &mut out[(b * g.c_out + co) * p..(b * g.c_out + co + 1) * p];
            for (d, &s) in dst.iter_mut().zip(&row[b * p..(b + 1) * p]) {
                *d = s + bias[co];
            }
        }
    }
    (out, cols)
}

type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

/// Gradients for (input, kernels, bias) given the output gradient.
pub fn backward<T: Scalar>(
    g: &Geometry,
    grad_out: &[T],
    w: &[T],
    cols: Option<&[T]>,
    needs: &[bool],
) -> ConvGrads<T> {
    let k = g.patch_len();
    let p = g.positions();
    let n = g.batch * p;
    let mut gmat = vec![T::zero(); g.c_out * n];
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let src = &grad_out[(b * g.c_out + co) * p..(b * g.c_out + co + 1) * p];
            gmat[co * n + b * p..co * n + (b + 1) * p].copy_from_slice(src);
        }
    }
    let gm = MatRef::row_major(&gmat, g.c_out, n);
    let dw = needs.get(1).copied().unwrap_or(false).then(|| {
        let cols = cols.expect("unfolded input retained for kernel gradient");
        let mut dw = vec![T::zero(); g.c_out * k];
        gemm(T::one(), gm, MatRef::row_major(cols, k, n).t(), T::zero(), &mut dw);
        dw
    });
    let db = needs.get(2).copied().unwrap_or(false).then(|| {
        gmat.chunks(n).map(|row| row.iter().copied().sum()).collect()
    });
    let dx = needs.first().copied().unwrap_or(false).then(|| {
        let mut dcols = vec![T::zero(); k * n];
        gemm(T::one(), MatRef::row_major(w, g.c_out, k).t(), gm, T::zero(), &mut dcols);
        col2im(g, &dcols)
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple loop.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let [bs, cin, h, wd] = x.shape().try_into().unwrap();
        let [cout, _, kh, kw] = w.shape().try_into().unwrap();
        let oh = (h - kh) / stride + 1;
        let ow = (wd - kw) / stride + 1;
        let mut out = Tensor::zeros(&[bs, cout, oh, ow]);
        let mut idx = 0;
        for n in 0..bs {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    acc += x.at(&[n, ci, oy * stride + ky, ox * stride + kx])
                                        * w.at(&[co, ci, ky, kx]);
                                }
                            }
                        }
                        out.data_mut()[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
        let tape = Tape::new();
        let out = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), tape.constant(b.clone()), stride)
            .unwrap();
        out.value().as_ref().clone()
    }

    #[test]
    fn window_sum_example() {
        let out = run(
            &Tensor::ones(&[1, 1, 3, 3]),
            &Tensor::ones(&[1, 1, 2, 2]),
            &Tensor::zeros(&[1]),
            1,
        );
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert_eq!(out.data(), &[4.0; 4]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 1, 3, 4], |i| i as f64 * 0.5 - 1.0);
        let out = run(&x, &Tensor::ones(&[1, 1, 1, 1]), &Tensor::zeros(&[1]), 1);
        assert_eq!(out, x);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(stride, h, w) in &[(1, 7, 6), (2, 9, 9), (3, 8, 11)] {
            let x = Tensor::from_fn(&[2, 3, h, w], |_| rng.random_range(-1.0..1.0));
            let k = Tensor::from_fn(&[4, 3, 3, 2], |_| rng.random_range(-1.0..1.0));
            let b = Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
            let fast = run(&x, &k, &b, stride);
            let slow = naive(&x, &k, &b, stride);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-10);
        }
    }

    #[test]
    fn spatial_chain_28_20_6() {
        let g1 = Geometry::new(&[1, 1, 28, 28], &[256, 1, 9, 9], &[256], 1).unwrap();
        assert_eq!(g1.output_shape(), &[1, 256, 20, 20]);
        let g2 = Geometry::new(&[1, 256, 20, 20], &[256, 256, 9, 9], &[256], 2).unwrap();
        assert_eq!(g2.output_shape(), &[1, 256, 6, 6]);
    }

    #[test]
    fn kernel_larger_than_input_rejected() {
        assert!(matches!(
            Geometry::new(&[1, 1, 3, 3], &[1, 1, 4, 2], &[1], 1),
            Err(TensorError::KernelTooLarge { .. })
        ));
        assert!(Geometry::new(&[1, 2, 3, 3], &[1, 1, 2, 2], &[1], 1).is_err());
        assert!(Geometry::new(&[1, 1, 3, 3], &[1, 1, 2, 2], &[2], 1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::gradcheck::{finite_diff_gradient, max_relative_error};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_fn(&[2, 2, 6, 5], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[3, 2, 3, 2], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[3], |_| rng.random_range(-1.0..1.0));
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
            run(x, k, b, 2).sum_squares()
        };
        let tape = Tape::new();
        let (vx, vk, vb) = (tape.param(x.clone()), tape.param(k.clone()), tape.param(b.clone()));
        let l = vx.conv2d(vk, vb, 2).unwrap().sum_squares();
        let grads = tape.backward(l).unwrap();
        let nx = finite_diff_gradient(|t| loss(t, &k, &b), &x, 1e-5);
        let nk = finite_diff_gradient(|t| loss(&x, t, &b), &k, 1e-5);
        let nb = finite_diff_gradient(|t| loss(&x, &k, t), &b, 1e-5);
        assert!(max_relative_error(grads.get(vx).unwrap(), &nx) < 1e-4);
        assert!(max_relative_error(grads.get(vk).unwrap(), &nk) < 1e-4);
        assert!(max_relative_error(grads.get(vb).unwrap(), &nb) < 1e-4);
    }
}
