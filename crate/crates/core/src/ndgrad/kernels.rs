//! Strided GEMM wrapper and the 1-D convolution kernels built on it.
//!
//! Layouts are row-major `[batch, channels, time]`. A convolution tap is a
//! plain matrix product between the weight slice for that tap and a
//! time-offset (and possibly strided) view of the input, so every kernel
//! below reduces to `matmul_acc` calls. Reduction order is fixed, which
//! keeps results bit-reproducible.

use super::Scalar;

/// A strided matrix view into a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn new(offset: usize, rs: usize, cs: usize) -> Self {
        View { offset, rs, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C += A · B` with `A: m×k`, `B: k×n`, `C: m×n`, all strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_acc<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    av: View,
    b: &[F],
    bv: View,
    c: &mut [F],
    cv: View,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: B view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: bounds checked above; `c` is a distinct &mut borrow so it
    // cannot alias `a` or `b`.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            F::one(),
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        )
    }
}

/// One kernel tap: output frames `out_start..out_start+len` read input frames
/// `in_start + j*in_stride` for `j in 0..len`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub k: usize,
    pub in_start: usize,
    pub out_start: usize,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub t_out: usize,
    pub in_stride: usize,
    pub taps: Vec<Tap>,
}

pub(crate) fn conv_out_len(t_in: usize, width: usize, stride: usize) -> Option<usize> {
    (t_in >= width).then(|| (t_in - width) / stride + 1)
}

impl ConvGeom {
    /// Same-length causal convolution with left zero padding `(width-1)*dilation`.
    pub fn causal(batch: usize, c_in: usize, t: usize, c_out: usize, width: usize, dilation: usize) -> Self {
        let taps = (0..width)
            .filter_map(|k| {
                let shift = (width - 1 - k) * dilation;
                (shift < t).then(|| Tap { k, in_start: 0, out_start: shift, len: t - shift })
            })
            .collect();
        ConvGeom { batch, c_in, t_in: t, c_out, width, t_out: t, in_stride: 1, taps }
    }

    /// Valid (unpadded) strided convolution.
    pub fn strided(batch: usize, c_in: usize, t_in: usize, c_out: usize, width: usize, stride: usize) -> Self {
        let t_out = conv_out_len(t_in, width, stride).expect("caller validated t_in >= width");
        let taps = (0..width).map(|k| Tap { k, in_start: k, out_start: 0, len: t_out }).collect();
        ConvGeom { batch, c_in, t_in, c_out, width, t_out, in_stride: stride, taps }
    }

    fn w_view(&self, k: usize) -> View {
        View::new(k, self.c_in * self.width, self.width)
    }

    fn w_view_t(&self, k: usize) -> View {
        View::new(k, self.width, self.c_in * self.width)
    }

    pub fn forward<F: Scalar>(&self, x: &[F], w: &[F], bias: &[F], out: &mut [F]) {
        let (in_sz, out_sz) = (self.c_in * self.t_in, self.c_out * self.t_out);
        for b in 0..self.batch {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let ob = &mut out[b * out_sz..(b + 1) * out_sz];
            for (co, row) in ob.chunks_exact_mut(self.t_out).enumerate() {
                row.fill(bias[co]);
            }
            for tap in &self.taps {
                matmul_acc(
                    self.c_out,
                    self.c_in,
                    tap.len,
                    w,
                    self.w_view(tap.k),
                    xb,
                    View::new(tap.in_start, self.t_in, self.in_stride),
                    ob,
                    View::new(tap.out_start, self.t_out, 1),
                );
            }
        }
    }

    pub fn backward_input<F: Scalar>(&self, w: &[F], gout: &[F], gx: &mut [F]) {
        let (in_sz, out_sz) = (self.c_in * self.t_in, self.c_out * self.t_out);
        for b in 0..self.batch {
            let gb = &gout[b * out_sz..(b + 1) * out_sz];
            let gxb = &mut gx[b * in_sz..(b + 1) * in_sz];
            for tap in &self.taps {
                matmul_acc(
                    self.c_in,
                    self.c_out,
                    tap.len,
                    w,
                    self.w_view_t(tap.k),
                    gb,
                    View::new(tap.out_start, self.t_out, 1),
                    gxb,
                    View::new(tap.in_start, self.t_in, self.in_stride),
                );
            }
        }
    }

    pub fn backward_weight<F: Scalar>(&self, x: &[F], gout: &[F], gw: &mut [F]) {
        let (in_sz, out_sz) = (self.c_in * self.t_in, self.c_out * self.t_out);
        for b in 0..self.batch {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let gb = &gout[b * out_sz..(b + 1) * out_sz];
            for tap in &self.taps {
                matmul_acc(
                    self.c_out,
                    tap.len,
                    self.c_in,
                    gb,
                    View::new(tap.out_start, self.t_out, 1),
                    xb,
                    View::new(tap.in_start, self.in_stride, self.t_in),
                    gw,
                    self.w_view(tap.k),
                );
            }
        }
    }

    pub fn backward_bias<F: Scalar>(&self, gout: &[F], gb: &mut [F]) {
        for row_block in gout.chunks_exact(self.c_out * self.t_out) {
            for (co, row) in row_block.chunks_exact(self.t_out).enumerate() {
                gb[co] += row.iter().copied().sum::<F>();
            }
        }
    }
}
