//! Numeric kernels behind the graph primitives. Everything here works on
//! raw row-major slices; shape validation happens in the graph layer.

/// `c[m×n] (+)= a[m×k] · b[k×n]` with explicit row/column strides for
/// `a` and `b`, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover every index reachable
    // through the given dimensions and strides; `c` is dense row-major m×n.
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

/// Column matrix for a stride-1, zero-padded square convolution of one
/// image: rows are `(channel, ky, kx)`, columns are output pixels.
pub(crate) fn im2col(input: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    debug_assert_eq!(col.len(), c * k * k * hw);
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dx = kx as isize - pad as isize;
                    // valid x range: 0 <= x + dx < w
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    out[..x0.min(w)].fill(0.0);
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                    }
                    out[x1.max(x0)..].fill(0.0);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, grad: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut grad[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x1 <= x0 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
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
    pub o: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    d: &ConvDims,
) -> Vec<f64> {
    let hw = d.h * d.w;
    let ckk = d.c * d.k * d.k;
    let mut out = vec![0.0; d.n * d.o * hw];
    let mut col = if d.k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
    for img in 0..d.n {
        let x = &input[img * d.c * hw..(img + 1) * d.c * hw];
        let y = &mut out[img * d.o * hw..(img + 1) * d.o * hw];
        let cols: &[f64] = if d.k == 1 {
            x
        } else {
            im2col(x, d.c, d.h, d.w, d.k, &mut col);
            &col
        };
        gemm(
            d.o, ckk, hw, weight, ckk as isize, 1, cols, hw as isize, 1, y, false,
        );
        if let Some(b) = bias {
            for (o, bo) in b.iter().enumerate() {
                for v in &mut y[o * hw..(o + 1) * hw] {
                    *v += bo;
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`; each is computed only
/// when requested.
pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = d.h * d.w;
    let ckk = d.c * d.k * d.k;
    let mut gi = want_input.then(|| vec![0.0; d.n * d.c * hw]);
    let mut gw = want_weight.then(|| vec![0.0; d.o * ckk]);
    let mut gb = want_bias.then(|| vec![0.0; d.o]);
    let mut col = if d.k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
    let mut dcol = if want_input && d.k != 1 {
        vec![0.0; ckk * hw]
    } else {
        Vec::new()
    };
    for img in 0..d.n {
        let x = &input[img * d.c * hw..(img + 1) * d.c * hw];
        let g = &grad_out[img * d.o * hw..(img + 1) * d.o * hw];
        if let Some(gb) = gb.as_mut() {
            for (o, acc) in gb.iter_mut().enumerate() {
                *acc += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let cols: &[f64] = if d.k == 1 {
                x
            } else {
                im2col(x, d.c, d.h, d.w, d.k, &mut col);
                &col
            };
            // gw[o, r] += sum_p g[o, p] * cols[r, p]
            gemm(d.o, hw, ckk, g, hw as isize, 1, cols, 1, hw as isize, gw, true);
        }
        if let Some(gi) = gi.as_mut() {
            let gi = &mut gi[img * d.c * hw..(img + 1) * d.c * hw];
            if d.k == 1 {
                // gi[c, p] = sum_o w[o, c] g[o, p]
                gemm(d.c, d.o, hw, weight, 1, ckk as isize, g, hw as isize, 1, gi, false);
            } else {
                gemm(
                    ckk, d.o, hw, weight, 1, ckk as isize, g, hw as isize, 1, &mut dcol, false,
                );
                col2im(&dcol, d.c, d.h, d.w, d.k, gi);
            }
        }
    }
    (gi, gw, gb)
}

/// 2×2 max pooling. Returns the output and, per output element, the
/// winning window position (0..4, row-major, first maximum on ties).
pub(crate) fn maxpool2_forward(input: &[f64], nc: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * oh * ow];
    let mut arg = vec![0u8; nc * oh * ow];
    for p in 0..nc {
        let plane = &input[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let cand = [
                    plane[2 * y * w + 2 * x],
                    plane[2 * y * w + 2 * x + 1],
                    plane[(2 * y + 1) * w + 2 * x],
                    plane[(2 * y + 1) * w + 2 * x + 1],
                ];
                let mut best = 0;
                for i in 1..4 {
                    if cand[i] > cand[best] {
                        best = i;
                    }
                }
                let o = (p * oh + y) * ow + x;
                out[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward(grad: &[f64], arg: &[u8], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gi = vec![0.0; nc * h * w];
    for p in 0..nc {
        for y in 0..oh {
            for x in 0..ow {
                let o = (p * oh + y) * ow + x;
                let a = arg[o] as usize;
                let (dy, dx) = (a / 2, a % 2);
                gi[p * h * w + (2 * y + dy) * w + 2 * x + dx] += grad[o];
            }
        }
    }
    gi
}

pub(crate) fn upsample2_forward(input: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; nc * oh * ow];
    for p in 0..nc {
        for y in 0..oh {
            let src = &input[p * h * w + (y / 2) * w..p * h * w + (y / 2 + 1) * w];
            let dst = &mut out[p * oh * ow + y * ow..p * oh * ow + (y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(grad: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gi = vec![0.0; nc * h * w];
    for p in 0..nc {
        for y in 0..oh {
            for x in 0..ow {
                gi[p * h * w + (y / 2) * w + x / 2] += grad[p * oh * ow + y * ow + x];
            }
        }
    }
    gi
}
