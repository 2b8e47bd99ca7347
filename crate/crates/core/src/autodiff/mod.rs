//! Minimal reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Tape`] records each operation as a node holding its forward value and
//! a closure that scatters the output gradient to the node's parents. Nodes
//! only ever reference earlier nodes, so a single reverse sweep in index
//! order completes all gradients. Feature maps are H x W x C, vectors are
//! 1-D, scalars are single-element arrays.

pub mod kernels;

use kernels::ConvDims;
use ndarray::{ArrayD, IxDyn};
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut GradBuf)>;

struct Node {
    value: Rc<ArrayD<f64>>,
    backward: Option<BackwardFn>,
}

/// Per-node gradient accumulator produced by [`Tape::backward`].
pub struct GradBuf {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl GradBuf {
    fn add(&mut self, var: Var, delta: ArrayD<f64>) {
        match &mut self.grads[var.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<ArrayD<f64>> {
        self.grads[var.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn std_slice(a: &ArrayD<f64>) -> &[f64] {
    a.as_slice().expect("tape arrays are standard layout")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1);
        a[[0]]
    }

    fn push(&mut self, value: ArrayD<f64>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(value),
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    fn rc_value(&self, v: Var) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    /// Input node; gradients accumulate here but do not propagate further.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar root. Returns gradients for every node
    /// that influences the root, leaves included.
    pub fn backward(&self, root: Var) -> GradBuf {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut buf = GradBuf {
            grads: vec![None; self.nodes.len()],
        };
        buf.grads[root.0] = Some(ArrayD::ones(IxDyn(&[1])));
        for i in (0..=root.0).rev() {
            let g = match buf.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(f) = &self.nodes[i].backward {
                f(&g, &mut buf);
            }
            buf.grads[i] = Some(g);
        }
        buf
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let value = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.add(a, g.clone());
                buf.add(b, g.clone());
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let va = self.rc_value(a);
        let vb = self.rc_value(b);
        let value = &*va * &*vb;
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.add(a, g * &*vb);
                buf.add(b, g * &*va);
            })),
        )
    }

    /// x * k for a compile-time constant k; no gradient to k.
    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = &*self.nodes[x.0].value * k;
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.add(x, g * k);
            })),
        )
    }

    /// x + k elementwise for a constant k.
    pub fn add_scalar_const(&mut self, x: Var, k: f64) -> Var {
        let value = &*self.nodes[x.0].value + k;
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.add(x, g.clone());
            })),
        )
    }

    /// x - c for a constant tensor c (no gradient to c).
    pub fn sub_const(&mut self, x: Var, c: &ArrayD<f64>) -> Var {
        assert_eq!(self.value(x).shape(), c.shape());
        let value = &*self.nodes[x.0].value - c;
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.add(x, g.clone());
            })),
        )
    }

    /// x * s where s is a single-element variable.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let vx = self.rc_value(x);
        let sv = self.scalar(s);
        let value = &*vx * sv;
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                buf.add(x, g * sv);
                let ds: f64 = g
                    .iter()
                    .zip(vx.iter())
                    .map(|(gi, xi)| gi * xi)
                    .sum();
                buf.add(s, ArrayD::from_elem(IxDyn(&[1]), ds));
            })),
        )
    }

    /// Broadcast multiply of an (H, W, C) map by a length-C vector.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Var {
        let vx = self.rc_value(x);
        let vw = self.rc_value(w);
        let c = vw.len();
        assert_eq!(vx.shape()[2], c, "channel vector length mismatch");
        let mut value = (*vx).clone();
        let ws = std_slice(&vw).to_vec();
        for pix in std_mut(&mut value).chunks_mut(c) {
            for (v, wv) in pix.iter_mut().zip(&ws) {
                *v *= *wv;
            }
        }
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let xs = std_slice(&vx);
                let ws = std_slice(&vw);
                let mut gx = vec![0.0; xs.len()];
                let mut gw = vec![0.0; c];
                for (p, gpix) in gs.chunks(c).enumerate() {
                    let xpix = &xs[p * c..(p + 1) * c];
                    for i in 0..c {
                        gx[p * c + i] = gpix[i] * ws[i];
                        gw[i] += gpix[i] * xpix[i];
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(vx.raw_dim(), gx).unwrap());
                buf.add(w, ArrayD::from_shape_vec(IxDyn(&[c]), gw).unwrap());
            })),
        )
    }

    /// Broadcast add of a length-C vector to an (H, W, C) map.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let vx = self.rc_value(x);
        let vb = self.rc_value(b);
        let c = vb.len();
        assert_eq!(vx.shape()[2], c, "channel vector length mismatch");
        let mut value = (*vx).clone();
        let bs = std_slice(&vb).to_vec();
        for pix in std_mut(&mut value).chunks_mut(c) {
            for (v, bv) in pix.iter_mut().zip(&bs) {
                *v += *bv;
            }
        }
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let mut gb = vec![0.0; c];
                for gpix in gs.chunks(c) {
                    for i in 0..c {
                        gb[i] += gpix[i];
                    }
                }
                buf.add(x, g.clone());
                buf.add(b, ArrayD::from_shape_vec(IxDyn(&[c]), gb).unwrap());
            })),
        )
    }

    // ---- nonlinearities ----

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.rc_value(x);
        let sig: Vec<f64> = vx.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let value_vec: Vec<f64> = vx.iter().zip(&sig).map(|(v, s)| v * s).collect();
        let value = ArrayD::from_shape_vec(vx.raw_dim(), value_vec).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let dx: Vec<f64> = vx
                    .iter()
                    .zip(&sig)
                    .zip(gs)
                    .map(|((v, s), gi)| gi * s * (1.0 + v * (1.0 - s)))
                    .collect();
                buf.add(x, ArrayD::from_shape_vec(vx.raw_dim(), dx).unwrap());
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.rc_value(x);
        let y: Vec<f64> = vx.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let value = ArrayD::from_shape_vec(vx.raw_dim(), y.clone()).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let dx: Vec<f64> = y
                    .iter()
                    .zip(gs)
                    .map(|(yi, gi)| gi * yi * (1.0 - yi))
                    .collect();
                buf.add(x, ArrayD::from_shape_vec(vx.raw_dim(), dx).unwrap());
            })),
        )
    }

    /// Channel layer normalization at each spatial location, no affine.
    pub fn layernorm_channels(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.rc_value(x);
        let shape = vx.shape().to_vec();
        let c = shape[2];
        let xs = std_slice(&vx);
        let n_pix = xs.len() / c;
        let mut norm = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; n_pix];
        for p in 0..n_pix {
            let pix = &xs[p * c..(p + 1) * c];
            let mean = pix.iter().sum::<f64>() / c as f64;
            let var = pix.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[p] = inv;
            for i in 0..c {
                norm[p * c + i] = (pix[i] - mean) * inv;
            }
        }
        let norm_rc = Rc::new(norm);
        let value =
            ArrayD::from_shape_vec(vx.raw_dim(), norm_rc.as_ref().clone()).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let mut dx = vec![0.0; gs.len()];
                for p in 0..n_pix {
                    let gpix = &gs[p * c..(p + 1) * c];
                    let ypix = &norm_rc[p * c..(p + 1) * c];
                    let g_mean = gpix.iter().sum::<f64>() / c as f64;
                    let gy_mean = gpix
                        .iter()
                        .zip(ypix)
                        .map(|(gi, yi)| gi * yi)
                        .sum::<f64>()
                        / c as f64;
                    let inv = inv_std[p];
                    for i in 0..c {
                        dx[p * c + i] = inv * (gpix[i] - g_mean - ypix[i] * gy_mean);
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(vx.raw_dim(), dx).unwrap());
            })),
        )
    }

    // ---- structural ops ----

    /// Mean over space per channel: (H, W, C) -> (C).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.rc_value(x);
        let shape = vx.shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let n_pix = h * w;
        let xs = std_slice(&vx);
        let mut pooled = vec![0.0; c];
        for pix in xs.chunks(c) {
            for i in 0..c {
                pooled[i] += pix[i];
            }
        }
        for v in pooled.iter_mut() {
            *v /= n_pix as f64;
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[c]), pooled).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let scale = 1.0 / n_pix as f64;
                let mut dx = vec![0.0; n_pix * c];
                for pix in dx.chunks_mut(c) {
                    for i in 0..c {
                        pix[i] = gs[i] * scale;
                    }
                }
                buf.add(
                    x,
                    ArrayD::from_shape_vec(IxDyn(&[h, w, c]), dx).unwrap(),
                );
            })),
        )
    }

    /// Concatenates two (H, W, *) maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let va = self.rc_value(a);
        let vb = self.rc_value(b);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        assert_eq!(&sa[..2], &sb[..2], "spatial dims differ in concat");
        let (h, w, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
        let asl = std_slice(&va);
        let bsl = std_slice(&vb);
        let mut out = vec![0.0; h * w * (ca + cb)];
        for p in 0..h * w {
            out[p * (ca + cb)..p * (ca + cb) + ca].copy_from_slice(&asl[p * ca..(p + 1) * ca]);
            out[p * (ca + cb) + ca..(p + 1) * (ca + cb)]
                .copy_from_slice(&bsl[p * cb..(p + 1) * cb]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[h, w, ca + cb]), out).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let mut ga = vec![0.0; h * w * ca];
                let mut gb = vec![0.0; h * w * cb];
                for p in 0..h * w {
                    ga[p * ca..(p + 1) * ca]
                        .copy_from_slice(&gs[p * (ca + cb)..p * (ca + cb) + ca]);
                    gb[p * cb..(p + 1) * cb]
                        .copy_from_slice(&gs[p * (ca + cb) + ca..(p + 1) * (ca + cb)]);
                }
                buf.add(a, ArrayD::from_shape_vec(IxDyn(&[h, w, ca]), ga).unwrap());
                buf.add(b, ArrayD::from_shape_vec(IxDyn(&[h, w, cb]), gb).unwrap());
            })),
        )
    }

    /// Nearest-neighbour 2x upsample.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let vx = self.rc_value(x);
        let shape = vx.shape().to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let xs = std_slice(&vx);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for x_ in 0..ow {
                let src = ((y / 2) * w + x_ / 2) * c;
                out[(y * ow + x_) * c..(y * ow + x_ + 1) * c]
                    .copy_from_slice(&xs[src..src + c]);
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[oh, ow, c]), out).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let mut dx = vec![0.0; h * w * c];
                for y in 0..oh {
                    for x_ in 0..ow {
                        let src = ((y / 2) * w + x_ / 2) * c;
                        let gpix = &gs[(y * ow + x_) * c..(y * ow + x_ + 1) * c];
                        for i in 0..c {
                            dx[src + i] += gpix[i];
                        }
                    }
                }
                buf.add(x, ArrayD::from_shape_vec(IxDyn(&[h, w, c]), dx).unwrap());
            })),
        )
    }

    /// Contiguous sub-vector of a 1-D variable.
    pub fn slice1(&mut self, v: Var, start: usize, len: usize) -> Var {
        let vv = self.rc_value(v);
        assert_eq!(vv.ndim(), 1);
        let total = vv.len();
        assert!(start + len <= total);
        let vs = std_slice(&vv);
        let value = ArrayD::from_shape_vec(IxDyn(&[len]), vs[start..start + len].to_vec()).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let mut dv = vec![0.0; total];
                dv[start..start + len].copy_from_slice(gs);
                buf.add(v, ArrayD::from_shape_vec(IxDyn(&[total]), dv).unwrap());
            })),
        )
    }

    /// Dense layer on a 1-D vector: y = W v + b, W of shape (out, in).
    pub fn linear(&mut self, v: Var, w: Var, b: Var) -> Var {
        let vv = self.rc_value(v);
        let vw = self.rc_value(w);
        let vb = self.rc_value(b);
        let (n_out, n_in) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vv.len(), n_in, "linear input length mismatch");
        assert_eq!(vb.len(), n_out, "linear bias length mismatch");
        let vs = std_slice(&vv);
        let ws = std_slice(&vw);
        let bs = std_slice(&vb);
        let mut y = vec![0.0; n_out];
        for i in 0..n_out {
            let row = &ws[i * n_in..(i + 1) * n_in];
            y[i] = bs[i] + row.iter().zip(vs).map(|(a, x)| a * x).sum::<f64>();
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n_out]), y).unwrap();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let vs = std_slice(&vv);
                let ws = std_slice(&vw);
                let mut dv = vec![0.0; n_in];
                let mut dw = vec![0.0; n_out * n_in];
                for i in 0..n_out {
                    let gi = gs[i];
                    let row = &ws[i * n_in..(i + 1) * n_in];
                    let drow = &mut dw[i * n_in..(i + 1) * n_in];
                    for j in 0..n_in {
                        dv[j] += gi * row[j];
                        drow[j] = gi * vs[j];
                    }
                }
                buf.add(v, ArrayD::from_shape_vec(IxDyn(&[n_in]), dv).unwrap());
                buf.add(
                    w,
                    ArrayD::from_shape_vec(IxDyn(&[n_out, n_in]), dw).unwrap(),
                );
                buf.add(b, ArrayD::from_shape_vec(IxDyn(&[n_out]), gs.to_vec()).unwrap());
            })),
        )
    }

    /// 2-D convolution; x is (H, W, Cin), w is (Cout, K, K, Cin), b is (Cout).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let vx = self.rc_value(x);
        let vw = self.rc_value(w);
        let vb = self.rc_value(b);
        let xs = vx.shape().to_vec();
        let wsh = vw.shape().to_vec();
        assert_eq!(wsh[1], wsh[2], "square kernels only");
        assert_eq!(xs[2], wsh[3], "conv input channel mismatch");
        assert_eq!(vb.len(), wsh[0], "conv bias length mismatch");
        let d = ConvDims {
            h: xs[0],
            w: xs[1],
            cin: xs[2],
            cout: wsh[0],
            k: wsh[1],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(&d, std_slice(&vx), std_slice(&vw), std_slice(&vb));
        let value =
            ArrayD::from_shape_vec(IxDyn(&[d.out_h(), d.out_w(), d.cout]), out).unwrap();
        let w_dim = vw.raw_dim();
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gs = std_slice(g);
                let gin = kernels::conv2d_backward_input(&d, std_slice(&vw), gs);
                let (gw, gb) = kernels::conv2d_backward_weights(&d, std_slice(&vx), gs);
                buf.add(
                    x,
                    ArrayD::from_shape_vec(IxDyn(&[d.h, d.w, d.cin]), gin).unwrap(),
                );
                buf.add(w, ArrayD::from_shape_vec(w_dim.clone(), gw).unwrap());
                buf.add(
                    b,
                    ArrayD::from_shape_vec(IxDyn(&[d.cout]), gb).unwrap(),
                );
            })),
        )
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.rc_value(x);
        let n = vx.len();
        let m = vx.iter().sum::<f64>() / n as f64;
        let value = ArrayD::from_elem(IxDyn(&[1]), m);
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gi = g[[0]] / n as f64;
                buf.add(x, ArrayD::from_elem(vx.raw_dim(), gi));
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = self.rc_value(x);
        let s = vx.iter().sum::<f64>();
        let value = ArrayD::from_elem(IxDyn(&[1]), s);
        self.push(
            value,
            Some(Box::new(move |g, buf| {
                let gi = g[[0]];
                buf.add(x, ArrayD::from_elem(vx.raw_dim(), gi));
            })),
        )
    }
}

fn std_mut(a: &mut ArrayD<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("tape arrays are standard layout")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{normal_field, rng_from_seed};
    use ndarray::IxDyn;

    /// Central-difference check of d(loss)/d(leaf) for a scalar-valued graph.
    fn fd_check<F>(build: F, leaf_value: ArrayD<f64>, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(leaf_value.clone());
        let root = build(&mut tape, leaf);
        let grads = tape.backward(root);
        let analytic = grads.get(leaf).expect("leaf grad").clone();
        let h = 1e-6;
        for idx in 0..leaf_value.len().min(24) {
            let mut plus = leaf_value.clone();
            let mut minus = leaf_value.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let mut tp = Tape::new();
            let lp = tp.leaf(plus);
            let rp = build(&mut tp, lp);
            let mut tm = Tape::new();
            let lm = tm.leaf(minus);
            let rm = build(&mut tm, lm);
            let num = (tp.scalar(rp) - tm.scalar(rm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = a.abs().max(num.abs()).max(1e-8);
            assert!(
                (a - num).abs() / denom < tol,
                "idx {idx}: analytic {a} vs numeric {num}"
            );
        }
    }

    #[test]
    fn silu_gradient() {
        let mut rng = rng_from_seed(10);
        fd_check(
            |t, x| {
                let y = t.silu(x);
                t.mean_all(y)
            },
            normal_field(&[4, 3, 2], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn sigmoid_gradient() {
        let mut rng = rng_from_seed(11);
        fd_check(
            |t, x| {
                let y = t.sigmoid(x);
                t.sum_all(y)
            },
            normal_field(&[10], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn layernorm_gradient_and_statistics() {
        let mut rng = rng_from_seed(12);
        let x = normal_field(&[3, 3, 8], &mut rng);
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let y = tape.layernorm_channels(leaf, 1e-6);
        // per-location mean ~ 0
        let yv = tape.value(y);
        for pix in yv.as_slice().unwrap().chunks(8) {
            let m = pix.iter().sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-6);
        }
        fd_check(
            |t, x| {
                let n = t.layernorm_channels(x, 1e-6);
                let sq = t.mul(n, n);
                let w = t.silu(sq);
                t.mean_all(w)
            },
            x,
            1e-5,
        );
    }

    #[test]
    fn mul_channel_and_add_channel_gradients() {
        let mut rng = rng_from_seed(13);
        let w = normal_field(&[5], &mut rng);
        let b = normal_field(&[5], &mut rng);
        let wc = w.clone();
        let bc = b.clone();
        fd_check(
            move |t, x| {
                let wv = t.leaf(wc.clone());
                let bv = t.leaf(bc.clone());
                let y = t.mul_channel(x, wv);
                let z = t.add_channel(y, bv);
                let s = t.silu(z);
                t.mean_all(s)
            },
            normal_field(&[4, 4, 5], &mut rng),
            1e-6,
        );
        // gradient w.r.t. the channel vector itself
        let x = normal_field(&[4, 4, 5], &mut rng);
        let xc = x.clone();
        fd_check(
            move |t, wleaf| {
                let xv = t.leaf(xc.clone());
                let y = t.mul_channel(xv, wleaf);
                t.sum_all(y)
            },
            w,
            1e-6,
        );
    }

    #[test]
    fn linear_gradient() {
        let mut rng = rng_from_seed(14);
        let v = normal_field(&[6], &mut rng);
        let b = normal_field(&[4], &mut rng);
        let vc = v.clone();
        let bc = b.clone();
        fd_check(
            move |t, wleaf| {
                let vv = t.leaf(vc.clone());
                let bv = t.leaf(bc.clone());
                let y = t.linear(vv, wleaf, bv);
                let s = t.silu(y);
                t.sum_all(s)
            },
            normal_field(&[4, 6], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn conv_gradient_through_tape() {
        let mut rng = rng_from_seed(15);
        let x = normal_field(&[5, 5, 2], &mut rng);
        let b = normal_field(&[3], &mut rng);
        let xc = x.clone();
        let bc = b.clone();
        fd_check(
            move |t, wleaf| {
                let xv = t.leaf(xc.clone());
                let bv = t.leaf(bc.clone());
                let y = t.conv2d(xv, wleaf, bv, 1, 1);
                let s = t.silu(y);
                t.mean_all(s)
            },
            normal_field(&[3, 3, 3, 2], &mut rng),
            1e-5,
        );
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = rng_from_seed(16);
        fd_check(
            |t, x| {
                let up = t.upsample_nearest2(x);
                let g = t.global_avg_pool(up);
                let s = t.silu(g);
                t.sum_all(s)
            },
            normal_field(&[3, 3, 4], &mut rng),
            1e-6,
        );
        let b = normal_field(&[3, 3, 2], &mut rng);
        let bc = b.clone();
        fd_check(
            move |t, a| {
                let bv = t.leaf(bc.clone());
                let cat = t.concat_channels(a, bv);
                let sq = t.mul(cat, cat);
                t.mean_all(sq)
            },
            normal_field(&[3, 3, 4], &mut rng),
            1e-6,
        );
        fd_check(
            |t, v| {
                let s = t.slice1(v, 2, 3);
                let sq = t.mul(s, s);
                t.sum_all(sq)
            },
            normal_field(&[8], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn mul_scalar_var_gradient() {
        let mut rng = rng_from_seed(17);
        let x = normal_field(&[3, 3, 2], &mut rng);
        let xc = x.clone();
        fd_check(
            move |t, s| {
                let xv = t.leaf(xc.clone());
                let y = t.mul_scalar_var(xv, s);
                let sq = t.mul(y, y);
                t.mean_all(sq)
            },
            normal_field(&[1], &mut rng),
            1e-6,
        );
    }

    #[test]
    fn shared_parent_accumulates_both_paths() {
        // loss = mean(x * x): gradient must be 2x/n, exercising double
        // accumulation into one parent.
        let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, -2.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let sq = tape.mul(leaf, leaf);
        let root = tape.mean_all(sq);
        let grads = tape.backward(root);
        let g = grads.get(leaf).unwrap();
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - 2.0 * xi / 3.0).abs() < 1e-12);
        }
    }
}
