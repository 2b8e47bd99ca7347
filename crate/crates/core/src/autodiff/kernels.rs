//! Direct convolution kernels over contiguous H x W x C buffers.
//!
//! Weight layout is (Cout, K, K, Cin) so the innermost loops run over
//! contiguous Cin-length slices. Each public kernel has a `_seq` twin that
//! runs the identical arithmetic on one thread; the default entry points
//! dispatch through `par::for_rows` and are bit-identical to the twins.

use crate::par::{for_rows, for_rows_seq};

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn work(&self) -> usize {
        self.out_h() * self.out_w() * self.k * self.k * self.cin * self.cout
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n4 = a.len() / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut j = 0;
    while j < n4 {
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
        j += 4;
    }
    let mut acc = (s0 + s1) + (s2 + s3);
    while j < a.len() {
        acc += a[j] * b[j];
        j += 1;
    }
    acc
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * *xi;
    }
}

fn conv_forward_row(
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    yo: usize,
    out_row: &mut [f64],
) {
    let (ow, cout, cin, k) = (d.out_w(), d.cout, d.cin, d.k);
    let kk_cin = k * k * cin;
    for xo in 0..ow {
        let opix = &mut out_row[xo * cout..(xo + 1) * cout];
        opix.copy_from_slice(bias);
        let ybase = (yo * d.stride) as isize - d.pad as isize;
        let xbase = (xo * d.stride) as isize - d.pad as isize;
        for ky in 0..k {
            let yi = ybase + ky as isize;
            if yi < 0 || yi >= d.h as isize {
                continue;
            }
            for kx in 0..k {
                let xi = xbase + kx as isize;
                if xi < 0 || xi >= d.w as isize {
                    continue;
                }
                let ipix = &input[((yi as usize * d.w) + xi as usize) * cin..][..cin];
                let wofs = (ky * k + kx) * cin;
                for (co, acc) in opix.iter_mut().enumerate() {
                    let wrow = &weight[co * kk_cin + wofs..][..cin];
                    *acc += dot(wrow, ipix);
                }
            }
        }
    }
}

/// Zero-padded direct convolution; returns a (out_h * out_w * cout) buffer.
pub fn conv2d_forward(d: &ConvDims, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.out_h() * d.out_w() * d.cout];
    let row = d.out_w() * d.cout;
    for_rows(&mut out, row, d.work(), |yo, out_row| {
        conv_forward_row(d, input, weight, bias, yo, out_row)
    });
    out
}

/// Single-thread twin of [`conv2d_forward`]; same arithmetic, same result.
pub fn conv2d_forward_seq(d: &ConvDims, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; d.out_h() * d.out_w() * d.cout];
    let row = d.out_w() * d.cout;
    for_rows_seq(&mut out, row, |yo, out_row| {
        conv_forward_row(d, input, weight, bias, yo, out_row)
    });
    out
}

fn conv_backward_input_row(
    d: &ConvDims,
    weight: &[f64],
    grad_out: &[f64],
    yi: usize,
    gin_row: &mut [f64],
) {
    let (ow, oh, cout, cin, k) = (d.out_w(), d.out_h(), d.cout, d.cin, d.k);
    let kk_cin = k * k * cin;
    for ky in 0..k {
        let ynum = yi + d.pad;
        if ynum < ky || (ynum - ky) % d.stride != 0 {
            continue;
        }
        let yo = (ynum - ky) / d.stride;
        if yo >= oh {
            continue;
        }
        for xo in 0..ow {
            let gpix = &grad_out[(yo * ow + xo) * cout..][..cout];
            let xbase = (xo * d.stride) as isize - d.pad as isize;
            for kx in 0..k {
                let xi = xbase + kx as isize;
                if xi < 0 || xi >= d.w as isize {
                    continue;
                }
                let target = &mut gin_row[xi as usize * cin..][..cin];
                let wofs = (ky * k + kx) * cin;
                for (co, g) in gpix.iter().enumerate() {
                    if *g != 0.0 {
                        axpy(target, *g, &weight[co * kk_cin + wofs..][..cin]);
                    }
                }
            }
        }
    }
}

/// Gradient of the convolution with respect to its input.
pub fn conv2d_backward_input(d: &ConvDims, weight: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; d.h * d.w * d.cin];
    let row = d.w * d.cin;
    for_rows(&mut gin, row, d.work(), |yi, gin_row| {
        conv_backward_input_row(d, weight, grad_out, yi, gin_row)
    });
    gin
}

pub fn conv2d_backward_input_seq(d: &ConvDims, weight: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let mut gin = vec![0.0; d.h * d.w * d.cin];
    let row = d.w * d.cin;
    for_rows_seq(&mut gin, row, |yi, gin_row| {
        conv_backward_input_row(d, weight, grad_out, yi, gin_row)
    });
    gin
}

fn conv_backward_weight_block(
    d: &ConvDims,
    input: &[f64],
    grad_out: &[f64],
    co: usize,
    gw_block: &mut [f64],
) {
    let (oh, ow, cout, cin, k) = (d.out_h(), d.out_w(), d.cout, d.cin, d.k);
    for yo in 0..oh {
        let ybase = (yo * d.stride) as isize - d.pad as isize;
        for xo in 0..ow {
            let g = grad_out[(yo * ow + xo) * cout + co];
            if g == 0.0 {
                continue;
            }
            let xbase = (xo * d.stride) as isize - d.pad as isize;
            for ky in 0..k {
                let yi = ybase + ky as isize;
                if yi < 0 || yi >= d.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xi = xbase + kx as isize;
                    if xi < 0 || xi >= d.w as isize {
                        continue;
                    }
                    let ipix = &input[((yi as usize * d.w) + xi as usize) * cin..][..cin];
                    axpy(&mut gw_block[(ky * k + kx) * cin..][..cin], g, ipix);
                }
            }
        }
    }
}

/// Gradients with respect to the kernel and bias.
pub fn conv2d_backward_weights(
    d: &ConvDims,
    input: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let kk_cin = d.k * d.k * d.cin;
    let mut gw = vec![0.0; d.cout * kk_cin];
    for_rows(&mut gw, kk_cin, d.work(), |co, gw_block| {
        conv_backward_weight_block(d, input, grad_out, co, gw_block)
    });
    let mut gb = vec![0.0; d.cout];
    let (oh, ow) = (d.out_h(), d.out_w());
    for p in 0..oh * ow {
        let gpix = &grad_out[p * d.cout..][..d.cout];
        for (b, g) in gb.iter_mut().zip(gpix.iter()) {
            *b += *g;
        }
    }
    (gw, gb)
}

pub fn conv2d_backward_weights_seq(
    d: &ConvDims,
    input: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let kk_cin = d.k * d.k * d.cin;
    let mut gw = vec![0.0; d.cout * kk_cin];
    for_rows_seq(&mut gw, kk_cin, |co, gw_block| {
        conv_backward_weight_block(d, input, grad_out, co, gw_block)
    });
    let mut gb = vec![0.0; d.cout];
    let (oh, ow) = (d.out_h(), d.out_w());
    for p in 0..oh * ow {
        let gpix = &grad_out[p * d.cout..][..d.cout];
        for (b, g) in gb.iter_mut().zip(gpix.iter()) {
            *b += *g;
        }
    }
    (gw, gb)
}
