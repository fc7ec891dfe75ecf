//! Minimal reverse-mode autodiff over tensors.
//!
//! A `Tape` records the forward computation as a topologically ordered
//! node list; `backward` walks it in reverse, accumulating gradients in
//! a fixed order so results are bit-reproducible regardless of thread
//! count. The op set is exactly what the velocity networks need:
//! dense layers, 2-D convolutions (im2col + GEMM), pooling, nearest
//! upsampling, concatenation, SiLU and bias broadcasts.

use crate::tensor::Tensor;

pub(crate) type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// `x` is `(C, H, W)`, `bias` is `(C,)` broadcast over the plane.
    AddChannelBias { x: NodeId, bias: NodeId },
    Silu(NodeId),
    /// `y = W x + b` with `w` of shape `(out, in)`.
    Linear { x: NodeId, w: NodeId, b: NodeId },
    /// Stride-1 conv with zero padding `k/2`; `w` is `(Cout, Cin, k, k)`.
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    AvgPool2(NodeId),
    UpsampleNearest2(NodeId),
    /// Concatenation along axis 0; tail shapes must agree.
    Concat(Vec<NodeId>),
}

pub(crate) struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a]
            .add(&self.values[b])
            .expect("add: shape mismatch");
        self.push(v, Op::Add(a, b))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.values[x];
        let bv = &self.values[bias];
        assert_eq!(xv.ndim(), 3, "channel bias needs (C,H,W)");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert_eq!(bv.shape(), &[c], "bias length mismatch");
        let plane = h * w;
        let mut out = xv.clone();
        for ci in 0..c {
            let delta = bv.data()[ci];
            for v in &mut out.data_mut()[ci * plane..(ci + 1) * plane] {
                *v += delta;
            }
        }
        self.push(out, Op::AddChannelBias { x, bias })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.values[x].map(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = &self.values[x];
        let wv = &self.values[w];
        let bv = &self.values[b];
        assert_eq!(wv.ndim(), 2, "linear weight must be (out, in)");
        let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), cols, "linear input length mismatch");
        assert_eq!(bv.len(), rows, "linear bias length mismatch");
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &wv.data()[r * cols..(r + 1) * cols];
            *o = row.iter().zip(xv.data()).map(|(&a, &b)| a * b).sum::<f64>() + bv.data()[r];
        }
        let v = Tensor::new(vec![rows], out).expect("linear output");
        self.push(v, Op::Linear { x, w, b })
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let v = conv2d_forward(&self.values[x], &self.values[w], &self.values[b]);
        self.push(v, Op::Conv2d { x, w, b })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x];
        assert_eq!(xv.ndim(), 3);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even extents, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let s = xv.at3(ci, 2 * y, 2 * xx)
                        + xv.at3(ci, 2 * y, 2 * xx + 1)
                        + xv.at3(ci, 2 * y + 1, 2 * xx)
                        + xv.at3(ci, 2 * y + 1, 2 * xx + 1);
                    out.data_mut()[(ci * oh + y) * ow + xx] = 0.25 * s;
                }
            }
        }
        self.push(out, Op::AvgPool2(x))
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> NodeId {
        let xv = &self.values[x];
        assert_eq!(xv.ndim(), 3);
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.data_mut()[(ci * oh + y) * ow + xx] = xv.at3(ci, y / 2, xx / 2);
                }
            }
        }
        self.push(out, Op::UpsampleNearest2(x))
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty());
        let tail = self.values[parts[0]].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in &parts {
            let pv = &self.values[p];
            assert_eq!(&pv.shape()[1..], &tail[..], "concat tail mismatch");
            lead += pv.shape()[0];
            data.extend_from_slice(pv.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let v = Tensor::new(shape, data).expect("concat output");
        self.push(v, Op::Concat(parts))
    }

    /// Gradients of `sum(upstream * node[output])` with respect to every
    /// node, indexed like the tape. Nodes off the path stay `None`.
    pub fn backward(&self, output: NodeId, upstream: Tensor) -> Vec<Option<Tensor>> {
        assert_eq!(
            upstream.shape(),
            self.values[output].shape(),
            "upstream shape mismatch"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output] = Some(upstream);
        for id in (0..=output).rev() {
            if grads[id].is_none() {
                continue;
            }
            // Inputs always precede their consumers on the tape.
            let (before, rest) = grads.split_at_mut(id);
            let g = rest[0].as_ref().unwrap();
            match &self.ops[id] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut before[*a], g.clone());
                    acc(&mut before[*b], g.clone());
                }
                Op::AddChannelBias { x, bias } => {
                    let (c, plane) = {
                        let s = self.values[*x].shape();
                        (s[0], s[1] * s[2])
                    };
                    let mut db = Tensor::zeros(&[c]);
                    for ci in 0..c {
                        db.data_mut()[ci] = g.data()[ci * plane..(ci + 1) * plane].iter().sum();
                    }
                    acc(&mut before[*x], g.clone());
                    acc(&mut before[*bias], db);
                }
                Op::Silu(x) => {
                    let xv = &self.values[*x];
                    let mut dx = xv.clone();
                    for (d, (&a, &gu)) in dx
                        .data_mut()
                        .iter_mut()
                        .zip(xv.data().iter().zip(g.data()))
                    {
                        let s = sigmoid(a);
                        *d = gu * (s + a * s * (1.0 - s));
                    }
                    acc(&mut before[*x], dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.values[*x];
                    let wv = &self.values[*w];
                    let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
                    let mut dx = Tensor::zeros(&[cols]);
                    let mut dw = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        let gr = g.data()[r];
                        let wrow = &wv.data()[r * cols..(r + 1) * cols];
                        let dwrow = &mut dw.data_mut()[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            dwrow[i] = gr * xv.data()[i];
                        }
                        for (dxi, &wi) in dx.data_mut().iter_mut().zip(wrow) {
                            *dxi += gr * wi;
                        }
                    }
                    acc(&mut before[*x], dx);
                    acc(&mut before[*w], dw);
                    acc(&mut before[*b], g.clone());
                }
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = conv2d_backward(&self.values[*x], &self.values[*w], g);
                    acc(&mut before[*x], dx);
                    acc(&mut before[*w], dw);
                    acc(&mut before[*b], db);
                }
                Op::AvgPool2(x) => {
                    let xv = &self.values[*x];
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = 0.25 * g.data()[(ci * oh + y) * ow + xx];
                                for (dy2, dx2) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    dx.data_mut()
                                        [(ci * h + 2 * y + dy2) * w + 2 * xx + dx2] += gv;
                                }
                            }
                        }
                    }
                    acc(&mut before[*x], dx);
                }
                Op::UpsampleNearest2(x) => {
                    let xv = &self.values[*x];
                    let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx.data_mut()[(ci * h + y / 2) * w + xx / 2] +=
                                    g.data()[(ci * oh + y) * ow + xx];
                            }
                        }
                    }
                    acc(&mut before[*x], dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &self.values[p];
                        let n = pv.len();
                        let piece =
                            Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())
                                .expect("concat grad slice");
                        acc(&mut before[p], piece);
                        offset += n;
                    }
                }
            }
        }
        grads
    }
}

fn acc(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => {
            t.add_scaled_mut(1.0, &delta).expect("gradient shape mismatch");
        }
        None => *slot = Some(delta),
    }
}

/// Zero-padded im2col: `(Cin*k*k, H*W)`, row-major.
fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![0.0; cin * k * k * hw];
    let xd = x.data();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dy = ky as isize - pad as isize;
                let dx = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let src = (ci * h + sy as usize) * w;
                    let src_lo = (x_lo as isize + dx) as usize;
                    cols[row + y * w + x_lo..row + y * w + x_hi]
                        .copy_from_slice(&xd[src + src_lo..src + src_lo + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(x.ndim(), 3, "conv input must be (C,H,W)");
    assert_eq!(w.ndim(), 4, "conv weight must be (Cout,Cin,k,k)");
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, k, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv channel mismatch");
    assert_eq!(k, k2, "conv kernel must be square");
    assert_eq!(b.len(), cout, "conv bias mismatch");
    let hw = h * wd;
    let kk = cin * k * k;
    let cols = im2col(x, k);
    let mut out = Tensor::zeros(&[cout, h, wd]);
    unsafe {
        matrixmultiply::dgemm(
            cout,
            kk,
            hw,
            1.0,
            w.data().as_ptr(),
            kk as isize,
            1,
            cols.as_ptr(),
            hw as isize,
            1,
            0.0,
            out.data_mut().as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    for ci in 0..cout {
        let bias = b.data()[ci];
        for v in &mut out.data_mut()[ci * hw..(ci + 1) * hw] {
            *v += bias;
        }
    }
    out
}

fn conv2d_backward(x: &Tensor, w: &Tensor, upstream: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let hw = h * wd;
    let kk = cin * k * k;
    let pad = k / 2;
    let cols = im2col(x, k);

    let mut db = Tensor::zeros(&[cout]);
    for ci in 0..cout {
        db.data_mut()[ci] = upstream.data()[ci * hw..(ci + 1) * hw].iter().sum();
    }

    // dW = dY * cols^T
    let mut dw = Tensor::zeros(&[cout, cin, k, k]);
    unsafe {
        matrixmultiply::dgemm(
            cout,
            hw,
            kk,
            1.0,
            upstream.data().as_ptr(),
            hw as isize,
            1,
            cols.as_ptr(),
            1,
            hw as isize,
            0.0,
            dw.data_mut().as_mut_ptr(),
            kk as isize,
            1,
        );
    }

    // dcols = W^T * dY, then scatter back to the input grid.
    let mut dcols = vec![0.0; kk * hw];
    unsafe {
        matrixmultiply::dgemm(
            kk,
            cout,
            hw,
            1.0,
            w.data().as_ptr(),
            1,
            kk as isize,
            upstream.data().as_ptr(),
            hw as isize,
            1,
            0.0,
            dcols.as_mut_ptr(),
            hw as isize,
            1,
        );
    }
    let mut dx = Tensor::zeros(&[cin, h, wd]);
    let dxd = dx.data_mut();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dy = ky as isize - pad as isize;
                let dxo = kx as isize - pad as isize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dxo).max(0) as usize;
                    let x_hi = ((wd as isize - dxo).min(wd as isize)).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    let dst = (ci * h + sy as usize) * wd;
                    let dst_lo = (x_lo as isize + dxo) as usize;
                    for (d, s) in dxd[dst + dst_lo..dst + dst_lo + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&dcols[row + y * wd + x_lo..row + y * wd + x_hi])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Direct sliding-window convolution, the oracle for the GEMM path.
    fn conv2d_naive(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[cout, h, wd]);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    let wv = w.data()
                                        [((co * cin + ci) * k + ky) * k + kx];
                                    acc += wv * x.at3(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.data_mut()[(co * h + y) * wd + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = SeededRng::new(61);
        for (cin, cout, h, w, k) in [(1, 4, 6, 6, 3), (3, 2, 5, 7, 3), (4, 3, 8, 8, 1)] {
            let x = rng.sample_standard_normal(&[cin, h, w]).unwrap();
            let wt = rng.sample_standard_normal(&[cout, cin, k, k]).unwrap();
            let b = rng.sample_standard_normal(&[cout]).unwrap();
            let fast = conv2d_forward(&x, &wt, &b);
            let slow = conv2d_naive(&x, &wt, &b);
            let err = fast.sub(&slow).unwrap().max_abs();
            assert!(err < 1e-12, "({cin},{cout},{h},{w},{k}): {err}");
        }
    }

    /// Central finite difference of `f` at `xs[i]`.
    fn central_diff(mut f: impl FnMut(&[f64]) -> f64, xs: &[f64], i: usize, h: f64) -> f64 {
        let mut plus = xs.to_vec();
        plus[i] += h;
        let mut minus = xs.to_vec();
        minus[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    /// Loss: sum of (upstream .* output), differentiated with respect
    /// to every scalar of the node the builder designates as input.
    fn check_gradients(
        build: impl Fn(&mut Tape, &[f64]) -> (NodeId, NodeId),
        n_inputs: usize,
        seed: u64,
    ) {
        let mut rng = SeededRng::new(seed);
        let xs: Vec<f64> = (0..n_inputs).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let (out, input) = build(&mut tape, &xs);
        let upstream = {
            let mut r = SeededRng::new(seed + 1);
            r.sample_standard_normal(tape.value(out).shape()).unwrap()
        };
        let grads = tape.backward(out, upstream.clone());
        let analytic = grads[input].as_ref().expect("input got no gradient");

        let eval = |vals: &[f64]| {
            let mut t = Tape::new();
            let (o, _) = build(&mut t, vals);
            t.value(o).dot(&upstream).unwrap()
        };
        for i in 0..n_inputs {
            let num = central_diff(eval, &xs, i, 1e-5);
            let ana = analytic.data()[i];
            let denom = num.abs().max(ana.abs()).max(1e-6);
            let rel = (num - ana).abs() / denom;
            assert!(rel < 1e-6, "input {i}: analytic {ana} vs numeric {num}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        // One 3x3 conv over a 2x4x4 input; differentiate w.r.t. x.
        let n = 2 * 4 * 4;
        check_gradients(
            |tape, vals| {
                let x = tape.leaf(Tensor::new(vec![2, 4, 4], vals.to_vec()).unwrap());
                let mut wr = SeededRng::new(77);
                let w = tape.leaf(wr.sample_standard_normal(&[3, 2, 3, 3]).unwrap());
                let b = tape.leaf(wr.sample_standard_normal(&[3]).unwrap());
                (tape.conv2d(x, w, b), x)
            },
            n,
            62,
        );
    }

    #[test]
    fn conv_weight_gradients_match_finite_differences() {
        let n = 3 * 2 * 3 * 3;
        check_gradients(
            |tape, vals| {
                let mut xr = SeededRng::new(78);
                let x = tape.leaf(xr.sample_standard_normal(&[2, 4, 4]).unwrap());
                let w = tape.leaf(Tensor::new(vec![3, 2, 3, 3], vals.to_vec()).unwrap());
                let b = tape.leaf(xr.sample_standard_normal(&[3]).unwrap());
                (tape.conv2d(x, w, b), w)
            },
            n,
            63,
        );
    }

    #[test]
    fn composite_network_gradients() {
        // silu(conv) -> pool -> upsample -> concat -> channel bias.
        let n = 2 * 4 * 4;
        check_gradients(
            |tape, vals| {
                let x = tape.leaf(Tensor::new(vec![2, 4, 4], vals.to_vec()).unwrap());
                let mut wr = SeededRng::new(79);
                let w = tape.leaf(wr.sample_standard_normal(&[2, 2, 3, 3]).unwrap());
                let b = tape.leaf(wr.sample_standard_normal(&[2]).unwrap());
                let c1 = tape.conv2d(x, w, b);
                let a = tape.silu(c1);
                let p = tape.avg_pool2(a);
                let u = tape.upsample_nearest2(p);
                let cat = tape.concat(vec![u, a]);
                let bias = tape.leaf(wr.sample_standard_normal(&[4]).unwrap());
                (tape.add_channel_bias(cat, bias), x)
            },
            n,
            64,
        );
    }

    #[test]
    fn linear_gradients() {
        check_gradients(
            |tape, vals| {
                let x = tape.leaf(Tensor::new(vec![5], vals.to_vec()).unwrap());
                let mut wr = SeededRng::new(80);
                let w = tape.leaf(wr.sample_standard_normal(&[3, 5]).unwrap());
                let b = tape.leaf(wr.sample_standard_normal(&[3]).unwrap());
                let y = tape.linear(x, w, b);
                (tape.silu(y), x)
            },
            5,
            65,
        );
    }

    #[test]
    fn backward_accumulation_is_linear() {
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(66);
        let x = tape.leaf(rng.sample_standard_normal(&[2, 4, 4]).unwrap());
        let w = tape.leaf(rng.sample_standard_normal(&[2, 2, 3, 3]).unwrap());
        let b = tape.leaf(rng.sample_standard_normal(&[2]).unwrap());
        let c = tape.conv2d(x, w, b);
        let out = tape.silu(c);
        let u1 = rng.sample_standard_normal(&[2, 4, 4]).unwrap();
        let u2 = rng.sample_standard_normal(&[2, 4, 4]).unwrap();
        let g1 = tape.backward(out, u1.clone());
        let g2 = tape.backward(out, u2.clone());
        let gsum = tape.backward(out, u1.add(&u2).unwrap());
        for id in [x, w, b] {
            let lhs = g1[id].as_ref().unwrap().add(g2[id].as_ref().unwrap()).unwrap();
            let rhs = gsum[id].as_ref().unwrap();
            assert!(lhs.sub(rhs).unwrap().max_abs() < 1e-12);
        }
        // Zero upstream kills every gradient.
        let gz = tape.backward(out, Tensor::zeros(&[2, 4, 4]));
        for id in [x, w, b] {
            assert_eq!(gz[id].as_ref().unwrap().max_abs(), 0.0);
        }
    }
}
