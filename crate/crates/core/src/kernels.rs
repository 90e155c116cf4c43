//! Raw numeric kernels: GEMM, 3x3 convolution via im2col, 2x2 max pooling.

/// `c = a' * b' + beta * c` for row-major buffers, where `a'` is `a` (m x k)
/// or the transpose of `a` stored as k x m, and likewise for `b'`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are exactly m*k, k*n and m*n long and the strides
    // above address only elements inside them.
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

/// Unfold one `[c, h, w]` image into a `[c * 9, h * w]` patch matrix for a
/// 3x3 kernel with stride 1 and zero padding 1.
pub(crate) fn im2col_3x3(input: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_3x3`]: scatter-add a patch matrix back into an image.
pub(crate) fn col2im_3x3(cols: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
}

pub(crate) fn conv2d_forward(d: &ConvDims, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = d.h * d.w;
    let k = d.c * 9;
    let mut out = vec![0.0; d.n * d.f * hw];
    let mut cols = vec![0.0; k * hw];
    for s in 0..d.n {
        im2col_3x3(&input[s * d.c * hw..(s + 1) * d.c * hw], d.c, d.h, d.w, &mut cols);
        let o = &mut out[s * d.f * hw..(s + 1) * d.f * hw];
        for (f, row) in o.chunks_exact_mut(hw).enumerate() {
            row.fill(bias[f]);
        }
        gemm(d.f, k, hw, kernel, false, &cols, false, 1.0, o);
    }
    out
}

/// Gradients of a 3x3 convolution. Each output buffer is `None` when the
/// corresponding operand does not need a gradient.
pub(crate) fn conv2d_backward(
    d: &ConvDims,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_bias: Option<&mut [f64]>,
) {
    let hw = d.h * d.w;
    let k = d.c * 9;
    let mut cols = vec![0.0; k * hw];
    for s in 0..d.n {
        let go = &grad_out[s * d.f * hw..(s + 1) * d.f * hw];
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (f, row) in go.chunks_exact(hw).enumerate() {
                gb[f] += row.iter().sum::<f64>();
            }
        }
        if let Some(gk) = grad_kernel.as_deref_mut() {
            im2col_3x3(&input[s * d.c * hw..(s + 1) * d.c * hw], d.c, d.h, d.w, &mut cols);
            // dK[f, k] += dY[f, hw] * cols[k, hw]^T
            gemm(d.f, hw, k, go, false, &cols, true, 1.0, gk);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcols[k, hw] = K[f, k]^T * dY[f, hw]
            gemm(k, d.f, hw, kernel, true, go, false, 0.0, &mut cols);
            col2im_3x3(&cols, d.c, d.h, d.w, &mut gi[s * d.c * hw..(s + 1) * d.c * hw]);
        }
    }
}

/// 2x2 stride-2 max pooling over `[planes, h, w]`. Returns the pooled values
/// and, per output element, the flat input index of its maximum (first in
/// row-major scan order on ties).
pub(crate) fn maxpool2x2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}
