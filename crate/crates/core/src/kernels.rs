//! Raw forward/backward kernels over flat row-major slices.
//!
//! These carry no shape bookkeeping beyond their explicit dimension
//! arguments; [`crate::graph`] owns validation and gradient routing.

/// `c = a' * b' + beta * c` where `a'` is `a` (m×k) or its transpose and
/// `b'` is `b` (k×n) or its transpose. All operands row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
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
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above pin every buffer to the extents and
    // strides handed to dgemm.
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

/// Unfolds one `[cin, h, w]` image into `[cin*9, h*w]` columns for a 3×3
/// stencil with one pixel of zero padding.
pub fn im2col3(x: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), cin * 9 * hw);
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    let dst = &mut row[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let sj = j as isize + kx as isize - 1;
                        *d = if sj < 0 || sj >= w as isize {
                            0.0
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the image.
pub fn col2im3_add(cols: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 9) + ky * 3 + kx) * hw..][..hw];
                for i in 0..h {
                    let si = i as isize + ky as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                    let src = &row[i * w..(i + 1) * w];
                    for (j, g) in src.iter().enumerate() {
                        let sj = j as isize + kx as isize - 1;
                        if sj >= 0 && sj < w as isize {
                            dst[sj as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

/// Dimensions of a 3×3 same-padding convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvDims {
    fn col_len(&self) -> usize {
        self.cin * 9 * self.h * self.w
    }
}

/// Forward convolution. When `keep_cols` is set the unfolded columns of
/// every image are returned for reuse in the backward pass.
pub fn conv3_forward(
    d: ConvDims,
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    out: &mut [f64],
    keep_cols: bool,
) -> Option<Vec<f64>> {
    let hw = d.h * d.w;
    let col_len = d.col_len();
    let mut saved = keep_cols.then(|| vec![0.0; d.n * col_len]);
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; col_len] };
    for img in 0..d.n {
        let cols: &mut [f64] = match saved.as_mut() {
            Some(s) => &mut s[img * col_len..(img + 1) * col_len],
            None => &mut scratch,
        };
        im2col3(
            &x[img * d.cin * hw..(img + 1) * d.cin * hw],
            d.cin,
            d.h,
            d.w,
            cols,
        );
        let y = &mut out[img * d.cout * hw..(img + 1) * d.cout * hw];
        for (o, plane) in y.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias[o]);
        }
        gemm(d.cout, d.cin * 9, hw, kernel, false, cols, false, 1.0, y);
    }
    saved
}

/// Backward convolution from saved columns. Any of `dx`, `dkernel`,
/// `dbias` may be omitted when that input needs no gradient; present
/// buffers are accumulated into.
pub fn conv3_backward(
    d: ConvDims,
    cols: &[f64],
    kernel: &[f64],
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let hw = d.h * d.w;
    let col_len = d.col_len();
    if let Some(dk) = dkernel {
        for img in 0..d.n {
            let g = &dout[img * d.cout * hw..(img + 1) * d.cout * hw];
            let c = &cols[img * col_len..(img + 1) * col_len];
            gemm(d.cout, hw, d.cin * 9, g, false, c, true, 1.0, dk);
        }
    }
    if let Some(db) = dbias {
        for img in 0..d.n {
            let g = &dout[img * d.cout * hw..(img + 1) * d.cout * hw];
            for (o, plane) in g.chunks_exact(hw).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; col_len];
        for img in 0..d.n {
            let g = &dout[img * d.cout * hw..(img + 1) * d.cout * hw];
            gemm(d.cin * 9, d.cout, hw, kernel, true, g, false, 0.0, &mut dcols);
            col2im3_add(
                &dcols,
                d.cin,
                d.h,
                d.w,
                &mut dx[img * d.cin * hw..(img + 1) * d.cin * hw],
            );
        }
    }
}

/// Batch-statistics normalisation over `[n, c, hw]`. Returns the
/// normalised activations `xhat` and per-channel `1/sqrt(var + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    for (i, plane) in x.chunks_exact(hw).enumerate() {
        mean[i % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, plane) in x.chunks_exact(hw).enumerate() {
        let m = mean[i % c];
        var[i % c] += plane.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / count + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    for (i, ((src, h), o)) in x
        .chunks_exact(hw)
        .zip(xhat.chunks_exact_mut(hw))
        .zip(out.chunks_exact_mut(hw))
        .enumerate()
    {
        let ch = i % c;
        let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for ((v, h), o) in src.iter().zip(h.iter_mut()).zip(o.iter_mut()) {
            *h = (v - m) * s;
            *o = g * *h + b;
        }
    }
    (xhat, inv_std)
}

/// Gradients of [`batchnorm_forward`]. `dgamma`/`dbeta`/`dx` are
/// accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    dout: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    n: usize,
    c: usize,
    hw: usize,
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let count = (n * hw) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for (i, (g, h)) in dout.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
        sum_dy[i % c] += g.iter().sum::<f64>();
        sum_dy_xhat[i % c] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
    }
    if let Some(dg) = dgamma {
        add_assign(dg, &sum_dy_xhat);
    }
    if let Some(db) = dbeta {
        add_assign(db, &sum_dy);
    }
    if let Some(dx) = dx {
        for (i, ((d, g), h)) in dx
            .chunks_exact_mut(hw)
            .zip(dout.chunks_exact(hw))
            .zip(xhat.chunks_exact(hw))
            .enumerate()
        {
            let ch = i % c;
            let scale = gamma[ch] * inv_std[ch] / count;
            let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
            for ((d, g), h) in d.iter_mut().zip(g).zip(h) {
                *d += scale * (count * g - sd - h * sdx);
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// 2×2 stride-2 max pooling over `[planes, h, w]`; odd trailing rows and
/// columns are dropped. Returns the flat input index of each winner, the
/// first maximal element in row-major window order on ties.
pub fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize, out: &mut [f64]) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut argmax = vec![0; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + 2 * i * w + 2 * j;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = (p * oh + i) * ow + j;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    argmax
}
