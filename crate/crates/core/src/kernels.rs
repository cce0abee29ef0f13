//! Numeric kernels behind the graph ops: convolutions, batch
//! normalization statistics and row-wise softmax/log-sum-exp. All loops are
//! plain single-threaded f64; shapes are validated by the caller.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Output spatial extent of a convolution (floor division).
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output spatial extent of a transposed convolution.
pub fn convt_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let grown = (input - 1) * stride + kernel;
    if grown < 2 * padding {
        return None;
    }
    Some(grown - 2 * padding)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for c_out in 0..co {
            let y_base = (bi * co + c_out) * oh * ow;
            let bv = bias[c_out];
            for v in &mut y[y_base..y_base + oh * ow] {
                *v = bv;
            }
            for c_in in 0..ci {
                let x_base = (bi * ci + c_in) * h * wd;
                let w_base = (c_out * ci + c_in) * kh * kw;
                for r in 0..oh {
                    let ih0 = (r * stride) as isize - padding as isize;
                    let y_row = y_base + r * ow;
                    for i in 0..kh {
                        let ih = ih0 + i as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * wd;
                        let w_row = w_base + i * kw;
                        for c in 0..ow {
                            let iw0 = (c * stride) as isize - padding as isize;
                            let mut acc = 0.0;
                            for j in 0..kw {
                                let iw = iw0 + j as isize;
                                if iw >= 0 && iw < wd as isize {
                                    acc += x[x_row + iw as usize] * w[w_row + j];
                                }
                            }
                            y[y_row + c] += acc;
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    b: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; b * ci * h * wd];
    let mut dw = vec![0.0; co * ci * kh * kw];
    let mut db = vec![0.0; co];
    for bi in 0..b {
        for c_out in 0..co {
            let y_base = (bi * co + c_out) * oh * ow;
            for v in &dy[y_base..y_base + oh * ow] {
                db[c_out] += v;
            }
            for c_in in 0..ci {
                let x_base = (bi * ci + c_in) * h * wd;
                let w_base = (c_out * ci + c_in) * kh * kw;
                for r in 0..oh {
                    let ih0 = (r * stride) as isize - padding as isize;
                    let y_row = y_base + r * ow;
                    for i in 0..kh {
                        let ih = ih0 + i as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * wd;
                        let w_row = w_base + i * kw;
                        for c in 0..ow {
                            let g = dy[y_row + c];
                            if g == 0.0 {
                                continue;
                            }
                            let iw0 = (c * stride) as isize - padding as isize;
                            for j in 0..kw {
                                let iw = iw0 + j as isize;
                                if iw >= 0 && iw < wd as isize {
                                    let xi = x_row + iw as usize;
                                    dx[xi] += g * w[w_row + j];
                                    dw[w_row + j] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution; weight layout is (Cin, Cout, kh, kw).
#[allow(clippy::too_many_arguments)]
pub fn convt2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for c_out in 0..co {
            let y_base = (bi * co + c_out) * oh * ow;
            let bv = bias[c_out];
            for v in &mut y[y_base..y_base + oh * ow] {
                *v = bv;
            }
        }
        for c_in in 0..ci {
            let x_base = (bi * ci + c_in) * h * wd;
            for c_out in 0..co {
                let y_base = (bi * co + c_out) * oh * ow;
                let w_base = (c_in * co + c_out) * kh * kw;
                for r in 0..h {
                    let oh0 = (r * stride) as isize - padding as isize;
                    let x_row = x_base + r * wd;
                    for i in 0..kh {
                        let or = oh0 + i as isize;
                        if or < 0 || or >= oh as isize {
                            continue;
                        }
                        let y_row = y_base + or as usize * ow;
                        let w_row = w_base + i * kw;
                        for c in 0..wd {
                            let xv = x[x_row + c];
                            if xv == 0.0 {
                                continue;
                            }
                            let oc0 = (c * stride) as isize - padding as isize;
                            for j in 0..kw {
                                let oc = oc0 + j as isize;
                                if oc >= 0 && oc < ow as isize {
                                    y[y_row + oc as usize] += xv * w[w_row + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn convt2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    b: usize,
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; b * ci * h * wd];
    let mut dw = vec![0.0; ci * co * kh * kw];
    let mut db = vec![0.0; co];
    for bi in 0..b {
        for c_out in 0..co {
            let y_base = (bi * co + c_out) * oh * ow;
            for v in &dy[y_base..y_base + oh * ow] {
                db[c_out] += v;
            }
        }
        for c_in in 0..ci {
            let x_base = (bi * ci + c_in) * h * wd;
            for c_out in 0..co {
                let y_base = (bi * co + c_out) * oh * ow;
                let w_base = (c_in * co + c_out) * kh * kw;
                for r in 0..h {
                    let oh0 = (r * stride) as isize - padding as isize;
                    let x_row = x_base + r * wd;
                    for i in 0..kh {
                        let or = oh0 + i as isize;
                        if or < 0 || or >= oh as isize {
                            continue;
                        }
                        let y_row = y_base + or as usize * ow;
                        let w_row = w_base + i * kw;
                        for c in 0..wd {
                            let oc0 = (c * stride) as isize - padding as isize;
                            let xv = x[x_row + c];
                            let mut acc = 0.0;
                            for j in 0..kw {
                                let oc = oc0 + j as isize;
                                if oc >= 0 && oc < ow as isize {
                                    let g = dy[y_row + oc as usize];
                                    acc += g * w[w_row + j];
                                    dw[w_row + j] += g * xv;
                                }
                            }
                            dx[x_row + c] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel mean and biased variance over (B, H, W) of an NCHW tensor.
pub fn channel_stats(x: &[f64], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let mut s = 0.0;
            for &v in &x[base..base + hw] {
                s += v;
            }
            mean[ch] += s;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * hw;
            let m = mean[ch];
            let mut s = 0.0;
            for &v in &x[base..base + hw] {
                let d = v - m;
                s += d * d;
            }
            var[ch] += s;
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Row-wise numerically stable softmax; `cols` is the trailing extent.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (xr, yr) in x.chunks_exact(cols).zip(y.chunks_exact_mut(cols)) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (yv, &xv) in yr.iter_mut().zip(xr) {
            let e = math::exp(xv - m);
            *yv = e;
            sum += e;
        }
        for yv in yr.iter_mut() {
            *yv /= sum;
        }
    }
    y
}

/// Row-wise log-sum-exp; `cols` is the trailing extent.
pub fn logsumexp_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / cols);
    for xr in x.chunks_exact(cols) {
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &xv in xr {
            sum += math::exp(xv - m);
        }
        out.push(m + math::ln(sum));
    }
    out
}
