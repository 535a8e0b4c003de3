//! Dense kernels shared by the network: GEMM, im2col convolution, nearest
//! upsampling. Tensors are channel-major `c x h x w` slices.

use alloc::vec;
use alloc::vec::Vec;

/// `c = a · b (+ c)`, with `a` logically `m x k` and `b` logically `k x n`.
/// `trans_a` / `trans_b` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    #[cfg(test)]
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

/// Unfolds `x` into a `(cin*k*k) x (oh*ow)` patch matrix.
pub(crate) fn im2col(x: &[f64], h: usize, w: usize, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_dims(h, w);
    let mut cols = vec![0.0; g.cin * g.k * g.k * oh * ow];
    for c in 0..g.cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], h: usize, w: usize, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_dims(h, w);
    let mut x = vec![0.0; g.cin * h * w];
    for c in 0..g.cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution via im2col. Returns `(output, patch matrix)`.
pub(crate) fn conv_forward(
    x: &[f64],
    h: usize,
    w: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.out_dims(h, w);
    let n = oh * ow;
    let cols = im2col(x, h, w, g);
    let mut y = vec![0.0; g.cout * n];
    for (row, &b) in y.chunks_exact_mut(n).zip(bias) {
        row.fill(b);
    }
    gemm(g.cout, g.cin * g.k * g.k, n, weight, false, &cols, false, &mut y, true);
    (y, cols)
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    dy: &[f64],
    cols: &[f64],
    h: usize,
    w: usize,
    g: &ConvGeom,
    weight: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let (oh, ow) = g.out_dims(h, w);
    let n = oh * ow;
    let kk = g.cin * g.k * g.k;
    gemm(g.cout, n, kk, dy, false, cols, true, dweight, true);
    for (db, row) in dbias.iter_mut().zip(dy.chunks_exact(n)) {
        *db += row.iter().sum::<f64>();
    }
    if !need_input_grad {
        return None;
    }
    let mut dcols = vec![0.0; kk * n];
    gemm(kk, g.cout, n, weight, true, dy, false, &mut dcols, false);
    Some(col2im(&dcols, h, w, g))
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &x[(ch * h + oy / f) * w..(ch * h + oy / f + 1) * w];
            let dst = &mut y[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / f];
            }
        }
    }
    y
}

/// Adjoint of [`upsample`]: sums each `f x f` block.
pub(crate) fn upsample_backward(dy: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let src = &dy[(ch * oh + oy) * ow..(ch * oh + oy + 1) * ow];
            let dst = &mut dx[(ch * h + oy / f) * w..(ch * h + oy / f + 1) * w];
            for (ox, s) in src.iter().enumerate() {
                dst[ox / f] += s;
            }
        }
    }
    dx
}

pub(crate) fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the (post-ReLU) activation is not positive.
pub(crate) fn relu_mask(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}
