//! Feature-map kernels. Maps are `[channel][y][x]`, `x` fastest.

use matrixmultiply::dgemm;

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices are long enough for the requested strides (checked
    // above), and `c` does not alias `a` or `b`.
    unsafe {
        dgemm(
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
            rsc,
            1,
        );
    }
}

/// Unfold 3x3 zero-padded neighbourhoods: `col[(c*9 + ky*3 + kx)][y*w + x]`.
pub(crate) fn im2col3(input: &[f64], channels: usize, h: usize, w: usize, col: &mut Vec<f64>) {
    let hw = h * w;
    col.clear();
    col.resize(channels * 9 * hw, 0.0);
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = if dx < 0 { 1 } else { 0 };
                let x_hi = if dx > 0 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for x in x_lo..x_hi {
                        dst[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: accumulate columns back into a feature map.
pub(crate) fn col2im3(col: &[f64], channels: usize, h: usize, w: usize, out: &mut [f64]) {
    let hw = h * w;
    out[..channels * hw].fill(0.0);
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(c * 9 + ky * 3 + kx) * hw..(c * 9 + ky * 3 + kx + 1) * hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                let x_lo = if dx < 0 { 1 } else { 0 };
                let x_hi = if dx > 0 { w - 1 } else { w };
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in x_lo..x_hi {
                        dst[(x as isize + dx) as usize] += src[x];
                    }
                }
            }
        }
    }
}

/// Convolution with SAME zero padding. `weight` is `[cout][cin][k][k]`, `k` is 1 or 3.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    kernel: usize,
    col: &mut Vec<f64>,
    out: &mut Vec<f64>,
) {
    let hw = h * w;
    let kk = cin * kernel * kernel;
    out.clear();
    out.reserve(cout * hw);
    for &b in bias.iter().take(cout) {
        out.extend(std::iter::repeat_n(b, hw));
    }
    let b: &[f64] = if kernel == 3 {
        im2col3(input, cin, h, w, col);
        col
    } else {
        &input[..cin * hw]
    };
    gemm(cout, kk, hw, 1.0, weight, (kk as isize, 1), b, (hw as isize, 1), 1.0, out, hw as isize);
}

/// Backward of [`conv_forward`]. Accumulates into `dweight`/`dbias`; writes
/// the input gradient to `dinput` when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    input: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    kernel: usize,
    dout: &[f64],
    dweight: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut Vec<f64>>,
    col: &mut Vec<f64>,
    dcol: &mut Vec<f64>,
) {
    let hw = h * w;
    let kk = cin * kernel * kernel;
    for (o, db) in dbias.iter_mut().enumerate().take(cout) {
        *db += dout[o * hw..(o + 1) * hw].iter().sum::<f64>();
    }
    let b: &[f64] = if kernel == 3 {
        im2col3(input, cin, h, w, col);
        col
    } else {
        &input[..cin * hw]
    };
    // dW (cout x kk) += dout (cout x hw) * col^T (hw x kk)
    gemm(cout, hw, kk, 1.0, dout, (hw as isize, 1), b, (1, hw as isize), 1.0, dweight, kk as isize);

    if let Some(dinput) = dinput {
        dinput.clear();
        dinput.resize(cin * hw, 0.0);
        if kernel == 3 {
            dcol.clear();
            dcol.resize(kk * hw, 0.0);
            // dcol (kk x hw) = W^T (kk x cout) * dout (cout x hw)
            gemm(kk, cout, hw, 1.0, weight, (1, kk as isize), dout, (hw as isize, 1), 0.0, dcol, hw as isize);
            col2im3(dcol, cin, h, w, dinput);
        } else {
            gemm(kk, cout, hw, 1.0, weight, (1, kk as isize), dout, (hw as isize, 1), 0.0, dinput, hw as isize);
        }
    }
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zero the gradient wherever the ReLU output was not positive.
pub(crate) fn relu_backward(output: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; `argmax` records the winning input index per output.
pub(crate) fn maxpool2(input: &[f64], c: usize, h: usize, w: usize, out: &mut Vec<f64>, argmax: &mut Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    out.clear();
    argmax.clear();
    out.reserve(c * oh * ow);
    argmax.reserve(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let i0 = base + 2 * y * w + 2 * x;
                let mut best = i0;
                for i in [i0 + 1, i0 + w, i0 + w + 1] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                out.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
}

pub(crate) fn maxpool2_backward(dout: &[f64], argmax: &[u32], input_len: usize, dinput: &mut Vec<f64>) {
    dinput.clear();
    dinput.resize(input_len, 0.0);
    for (&g, &i) in dout.iter().zip(argmax) {
        dinput[i as usize] += g;
    }
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2(input: &[f64], c: usize, h: usize, w: usize, out: &mut Vec<f64>) {
    let (oh, ow) = (2 * h, 2 * w);
    out.clear();
    out.resize(c * oh * ow, 0.0);
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for x in 0..ow {
                dst[x] = src[x / 2];
            }
        }
    }
}

pub(crate) fn upsample2_backward(dout: &[f64], c: usize, h: usize, w: usize, dinput: &mut Vec<f64>) {
    let (oh, ow) = (2 * h, 2 * w);
    dinput.clear();
    dinput.resize(c * h * w, 0.0);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                dinput[ch * h * w + (y / 2) * w + x / 2] += dout[ch * oh * ow + y * ow + x];
            }
        }
    }
}
