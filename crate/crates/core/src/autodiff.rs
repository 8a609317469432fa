//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding its output value and
//! enough metadata to replay the adjoint. `backward` walks the node list in
//! reverse creation order (which is already topological) and accumulates
//! gradients into per-node slots. Every reduction runs in a fixed sequential
//! order, so gradients — like forward values — are bit-identical across runs.
//!
//! The op set is exactly what the networks in this crate need: dense/conv
//! linear algebra, layer norm, windowed attention plumbing (partition, heads,
//! roll, relative-position bias, additive masks), pixel shuffle, and the
//! training losses.

use crate::kernels::{col2im, im2col, mm_nn, mm_nt, mm_tn, ConvGeom};
use crate::tensor::{Scalar, Tensor};
use std::sync::Arc;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub usize);

enum Op<T: Scalar> {
    Leaf,
    /// alpha * a + beta * b (same shape)
    AddScaled {
        a: VarId,
        b: VarId,
        alpha: T,
        beta: T,
    },
    Scale {
        x: VarId,
        c: T,
    },
    /// out = x + c for a constant tensor c (no gradient into c)
    AddConst {
        x: VarId,
    },
    /// (N,K) @ (K,M) + bias(M)
    Linear {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    /// (B,Cin,H,W) * (Cout,Cin,k,k) + bias(Cout), zero padding
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        geom: ConvGeom,
        batch: usize,
        c_out: usize,
    },
    /// Row-wise layer norm over the last dim of (N,C), affine.
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        // saved per-row statistics
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    /// Softmax over the last dimension; backward uses the saved output.
    SoftmaxLast {
        x: VarId,
        dim: usize,
    },
    Gelu {
        x: VarId,
    },
    Relu {
        x: VarId,
    },
    /// (B,C,H,W) -> (B*H*W, C)
    ChwToTokens {
        x: VarId,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    /// (B*H*W, C) -> (B,C,H,W)
    TokensToChw {
        x: VarId,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    /// Cyclic shift of the two spatial axes of (B,C,H,W).
    Roll2d {
        x: VarId,
        dy: isize,
        dx: isize,
    },
    /// (B,C,H,W) -> (B*nW*win*win, C), window-major token rows.
    WindowPartition {
        x: VarId,
        win: usize,
    },
    /// Inverse of WindowPartition back to (B,C,H,W).
    WindowMerge {
        x: VarId,
        win: usize,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    /// (G0*T, heads*hd) -> (G0*heads, T, hd)
    HeadsSplit {
        x: VarId,
        heads: usize,
        t: usize,
    },
    /// (G0*heads, T, hd) -> (G0*T, heads*hd)
    HeadsMerge {
        x: VarId,
        heads: usize,
        t: usize,
    },
    /// Batched matmul (G,M,K) @ (G,K,N), optionally (G,N,K) transposed.
    Bmm {
        a: VarId,
        b: VarId,
        trans_b: bool,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    /// Column slice of a (N,C) matrix.
    SliceCols {
        x: VarId,
        cols: usize,
        start: usize,
        len: usize,
    },
    /// Channel concatenation of two (B,C,H,W) maps.
    ConcatChannels {
        a: VarId,
        b: VarId,
        c_a: usize,
        c_b: usize,
        hw: usize,
        batch: usize,
    },
    /// out[b, c, y*s+dy, x*s+dx] = in[b, c*s*s + dy*s + dx, y, x]
    PixelShuffle {
        x: VarId,
        s: usize,
    },
    UpsampleNearest2x {
        x: VarId,
    },
    /// scores(G,T,T) + table[idx[i*T+j]*heads + g%heads]
    RelBiasAdd {
        scores: VarId,
        table: VarId,
        idx: Arc<Vec<u32>>,
        heads: usize,
        t: usize,
    },
    /// scores(G,T,T) + mask[((g/heads)%nw)*T*T + i*T + j], mask constant.
    WindowMaskAdd {
        scores: VarId,
    },
    L1Loss {
        pred: VarId,
        target: Tensor<T>,
    },
    L2Loss {
        pred: VarId,
        target: Tensor<T>,
    },
    /// Mean of -log softmax(logits)[label] over pixels with label != 255.
    MaskedCe {
        logits: VarId,
        labels: Arc<Vec<u8>>,
        classes: usize,
        n_valid: usize,
    },
    MeanAll {
        x: VarId,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by `VarId`.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: VarId) -> Option<&[T]> {
        self.slots[id.0].as_deref()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn wants(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Input or parameter. `trainable` marks it as a gradient sink.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> VarId {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.add_scaled(a, b, T::ONE, T::ONE)
    }

    pub fn add_scaled(&mut self, a: VarId, b: VarId, alpha: T, beta: T) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add_scaled shape mismatch");
        let data = va
            .iter()
            .zip(vb.iter())
            .map(|(&x, &y)| alpha * x + beta * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let ng = self.wants(a) || self.wants(b);
        self.push(out, Op::AddScaled { a, b, alpha, beta }, ng)
    }

    pub fn scale(&mut self, x: VarId, c: T) -> VarId {
        let out = self.value(x).map(|v| v * c);
        let ng = self.wants(x);
        self.push(out, Op::Scale { x, c }, ng)
    }

    pub fn add_const(&mut self, x: VarId, c: &Tensor<T>) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.shape(), c.shape(), "add_const shape mismatch");
        let data = vx.iter().zip(c.iter()).map(|(&a, &b)| a + b).collect();
        let out = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.wants(x);
        self.push(out, Op::AddConst { x }, ng)
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n, k) = (vx.shape()[0], vx.shape()[1]);
        let (kw, m) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(k, kw, "linear inner dim");
        assert_eq!(vb.numel(), m, "linear bias dim");
        let mut out = vec![T::ZERO; n * m];
        for row in out.chunks_exact_mut(m) {
            row.copy_from_slice(vb.as_slice());
        }
        mm_nn(vx.as_slice(), vw.as_slice(), &mut out, n, k, m);
        let ng = self.wants(x) || self.wants(w) || self.wants(b);
        self.push(Tensor::new(vec![n, m], out), Op::Linear { x, w, b }, ng)
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, pad: usize, stride: usize) -> VarId {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let xs = vx.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d expects (B,C,H,W)");
        let (batch, c_in, h, w_) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = vw.shape().to_vec();
        assert_eq!(ws[1], c_in, "conv2d channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (c_out, ksize) = (ws[0], ws[2]);
        assert_eq!(vb.numel(), c_out);
        let geom = ConvGeom::new(c_in, h, w_, ksize, pad, stride);
        let np = geom.out_pixels();
        let ck = geom.col_rows();
        let mut out = vec![T::ZERO; batch * c_out * np];
        let mut col = vec![T::ZERO; ck * np];
        let in_stride = c_in * h * w_;
        for bi in 0..batch {
            im2col(&vx.as_slice()[bi * in_stride..(bi + 1) * in_stride], &geom, &mut col);
            let y = &mut out[bi * c_out * np..(bi + 1) * c_out * np];
            for (co, row) in y.chunks_exact_mut(np).enumerate() {
                let bias = vb.as_slice()[co];
                row.iter_mut().for_each(|v| *v = bias);
            }
            mm_nn(vw.as_slice(), &col, y, c_out, ck, np);
        }
        let ng = self.wants(x) || self.wants(w) || self.wants(b);
        self.push(
            Tensor::new(vec![batch, c_out, geom.out_h, geom.out_w], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                c_out,
            },
            ng,
        )
    }

    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: T) -> VarId {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(vg.numel(), c);
        assert_eq!(vb.numel(), c);
        let xs = vx.as_slice();
        let gs = vg.as_slice();
        let bs = vb.as_slice();
        let mut out = vec![T::ZERO; n * c];
        let mut means = vec![T::ZERO; n];
        let mut rstds = vec![T::ZERO; n];
        let inv_c = T::from_f64(1.0 / c as f64);
        for i in 0..n {
            let row = &xs[i * c..(i + 1) * c];
            let mut mu = T::ZERO;
            for &v in row {
                mu += v;
            }
            mu = mu * inv_c;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mu;
                var = d.mul_add(d, var);
            }
            var = var * inv_c;
            let rstd = T::ONE / (var + eps).sqrt();
            means[i] = mu;
            rstds[i] = rstd;
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] = (row[j] - mu) * rstd * gs[j] + bs[j];
            }
        }
        let ng = self.wants(x) || self.wants(gamma) || self.wants(beta);
        self.push(
            Tensor::new(vec![n, c], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            ng,
        )
    }

    /// Softmax over the trailing dimension of any shape.
    pub fn softmax_last(&mut self, x: VarId) -> VarId {
        let vx = self.value(x);
        let dim = *vx.shape().last().expect("softmax on empty shape");
        let xs = vx.as_slice();
        let mut out = vec![T::ZERO; xs.len()];
        for (orow, row) in out.chunks_exact_mut(dim).zip(xs.chunks_exact(dim)) {
            let mut mx = row[0];
            for &v in row {
                mx = mx.max_s(v);
            }
            let mut sum = T::ZERO;
            for (o, &v) in orow.iter_mut().zip(row) {
                let e = (v - mx).exp();
                *o = e;
                sum += e;
            }
            let inv = T::ONE / sum;
            orow.iter_mut().for_each(|v| *v = *v * inv);
        }
        let ng = self.wants(x);
        self.push(Tensor::new(vx.shape().to_vec(), out), Op::SoftmaxLast { x, dim }, ng)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(gelu_fwd);
        let ng = self.wants(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| v.max_s(T::ZERO));
        let ng = self.wants(x);
        self.push(out, Op::Relu { x }, ng)
    }

    pub fn chw_to_tokens(&mut self, x: VarId) -> VarId {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xs = vx.as_slice();
        let mut out = vec![T::ZERO; xs.len()];
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let src = &xs[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, &v) in src.iter().enumerate() {
                    out[(bi * hw + p) * c + ci] = v;
                }
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![b * hw, c], out),
            Op::ChwToTokens { x, b, c, h, w },
            ng,
        )
    }

    pub fn tokens_to_chw(&mut self, x: VarId, b: usize, c: usize, h: usize, w: usize) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.shape(), &[b * h * w, c]);
        let xs = vx.as_slice();
        let mut out = vec![T::ZERO; xs.len()];
        let hw = h * w;
        for bi in 0..b {
            for ci in 0..c {
                let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                for (p, v) in dst.iter_mut().enumerate() {
                    *v = xs[(bi * hw + p) * c + ci];
                }
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![b, c, h, w], out),
            Op::TokensToChw { x, b, c, h, w },
            ng,
        )
    }

    pub fn roll2d(&mut self, x: VarId, dy: isize, dx: isize) -> VarId {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let out = roll_apply(vx.as_slice(), &s, dy, dx);
        let ng = self.wants(x);
        self.push(Tensor::new(s, out), Op::Roll2d { x, dy, dx }, ng)
    }

    pub fn window_partition(&mut self, x: VarId, win: usize) -> VarId {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(h % win == 0 && w % win == 0, "dims not divisible by window");
        let out = window_gather(vx.as_slice(), b, c, h, w, win, false);
        let rows = b * (h / win) * (w / win) * win * win;
        let ng = self.wants(x);
        self.push(Tensor::new(vec![rows, c], out), Op::WindowPartition { x, win }, ng)
    }

    pub fn window_merge(&mut self, x: VarId, win: usize, b: usize, c: usize, h: usize, w: usize) -> VarId {
        let vx = self.value(x);
        assert_eq!(vx.shape(), &[b * h * w, c]);
        let out = window_scatter(vx.as_slice(), b, c, h, w, win, false);
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![b, c, h, w], out),
            Op::WindowMerge { x, win, b, c, h, w },
            ng,
        )
    }

    pub fn heads_split(&mut self, x: VarId, heads: usize, t: usize) -> VarId {
        let vx = self.value(x);
        let (rows, c) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(rows % t, 0);
        assert_eq!(c % heads, 0);
        let g0 = rows / t;
        let hd = c / heads;
        let xs = vx.as_slice();
        let mut out = vec![T::ZERO; xs.len()];
        for gi in 0..g0 {
            for i in 0..t {
                let src = &xs[(gi * t + i) * c..(gi * t + i + 1) * c];
                for hh in 0..heads {
                    let dst_row = (gi * heads + hh) * t + i;
                    out[dst_row * hd..(dst_row + 1) * hd]
                        .copy_from_slice(&src[hh * hd..(hh + 1) * hd]);
                }
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![g0 * heads, t, hd], out),
            Op::HeadsSplit { x, heads, t },
            ng,
        )
    }

    pub fn heads_merge(&mut self, x: VarId, heads: usize, t: usize) -> VarId {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (gh, t_, hd) = (s[0], s[1], s[2]);
        assert_eq!(t_, t);
        assert_eq!(gh % heads, 0);
        let g0 = gh / heads;
        let c = heads * hd;
        let xs = vx.as_slice();
        let mut out = vec![T::ZERO; xs.len()];
        for gi in 0..g0 {
            for hh in 0..heads {
                for i in 0..t {
                    let src_row = (gi * heads + hh) * t + i;
                    let dst = &mut out[(gi * t + i) * c + hh * hd..(gi * t + i) * c + (hh + 1) * hd];
                    dst.copy_from_slice(&xs[src_row * hd..(src_row + 1) * hd]);
                }
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![g0 * t, c], out),
            Op::HeadsMerge { x, heads, t },
            ng,
        )
    }

    pub fn bmm(&mut self, a: VarId, b: VarId, trans_b: bool) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        let sa = va.shape().to_vec();
        let sb = vb.shape().to_vec();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm group count");
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k, "bmm inner dim (trans)");
            sb[1]
        } else {
            assert_eq!(sb[1], k, "bmm inner dim");
            sb[2]
        };
        let mut out = vec![T::ZERO; g * m * n];
        let (pa, pb) = (va.as_slice(), vb.as_slice());
        for gi in 0..g {
            let ag = &pa[gi * m * k..(gi + 1) * m * k];
            let og = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                let bg = &pb[gi * n * k..(gi + 1) * n * k];
                mm_nt(ag, bg, og, m, k, n);
            } else {
                let bg = &pb[gi * k * n..(gi + 1) * k * n];
                mm_nn(ag, bg, og, m, k, n);
            }
        }
        let ng = self.wants(a) || self.wants(b);
        self.push(
            Tensor::new(vec![g, m, n], out),
            Op::Bmm {
                a,
                b,
                trans_b,
                g,
                m,
                k,
                n,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let vx = self.value(x);
        let (n, c) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= c);
        let xs = vx.as_slice();
        let mut out = vec![T::ZERO; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![n, len], out),
            Op::SliceCols {
                x,
                cols: c,
                start,
                len,
            },
            ng,
        )
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> VarId {
        let (va, vb) = (self.value(a), self.value(b));
        let sa = va.shape().to_vec();
        let sb = vb.shape().to_vec();
        assert_eq!(sa.len(), 4);
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2..], sb[2..]);
        let (batch, c_a, c_b, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let (pa, pb) = (va.as_slice(), vb.as_slice());
        let mut out = vec![T::ZERO; (c_a + c_b) * hw * batch];
        for bi in 0..batch {
            let dst = &mut out[bi * (c_a + c_b) * hw..(bi + 1) * (c_a + c_b) * hw];
            dst[..c_a * hw].copy_from_slice(&pa[bi * c_a * hw..(bi + 1) * c_a * hw]);
            dst[c_a * hw..].copy_from_slice(&pb[bi * c_b * hw..(bi + 1) * c_b * hw]);
        }
        let ng = self.wants(a) || self.wants(b);
        self.push(
            Tensor::new(vec![batch, c_a + c_b, sa[2], sa[3]], out),
            Op::ConcatChannels {
                a,
                b,
                c_a,
                c_b,
                hw,
                batch,
            },
            ng,
        )
    }

    pub fn pixel_shuffle(&mut self, x: VarId, s: usize) -> VarId {
        let vx = self.value(x);
        let sh = vx.shape().to_vec();
        assert_eq!(sh.len(), 4);
        let (batch, c_in, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(c_in % (s * s), 0, "channels not divisible by s^2");
        let c_out = c_in / (s * s);
        let out = pixel_shuffle_apply(vx.as_slice(), batch, c_out, h, w, s, false);
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![batch, c_out, h * s, w * s], out),
            Op::PixelShuffle { x, s },
            ng,
        )
    }

    pub fn upsample_nearest2x(&mut self, x: VarId) -> VarId {
        let vx = self.value(x);
        let s = vx.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xs = vx.as_slice();
        let mut out = vec![T::ZERO; xs.len() * 4];
        for plane in 0..b * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h * w * 4..(plane + 1) * h * w * 4];
            for y in 0..h {
                for x_ in 0..w {
                    let v = src[y * w + x_];
                    let o = 2 * y * 2 * w + 2 * x_;
                    dst[o] = v;
                    dst[o + 1] = v;
                    dst[o + 2 * w] = v;
                    dst[o + 2 * w + 1] = v;
                }
            }
        }
        let ng = self.wants(x);
        self.push(
            Tensor::new(vec![b, c, 2 * h, 2 * w], out),
            Op::UpsampleNearest2x { x },
            ng,
        )
    }

    pub fn rel_bias_add(&mut self, scores: VarId, table: VarId, idx: Arc<Vec<u32>>, heads: usize) -> VarId {
        let (vs, vt) = (self.value(scores), self.value(table));
        let s = vs.shape().to_vec();
        assert_eq!(s.len(), 3);
        let (g, t, t2) = (s[0], s[1], s[2]);
        assert_eq!(t, t2);
        assert_eq!(idx.len(), t * t);
        assert_eq!(g % heads, 0);
        let ts = vt.as_slice();
        let mut out = vs.as_slice().to_vec();
        for gi in 0..g {
            let hh = gi % heads;
            let block = &mut out[gi * t * t..(gi + 1) * t * t];
            for (p, v) in block.iter_mut().enumerate() {
                *v += ts[idx[p] as usize * heads + hh];
            }
        }
        let ng = self.wants(scores) || self.wants(table);
        self.push(
            Tensor::new(s, out),
            Op::RelBiasAdd {
                scores,
                table,
                idx,
                heads,
                t,
            },
            ng,
        )
    }

    pub fn window_mask_add(&mut self, scores: VarId, mask: Arc<Vec<T>>, heads: usize, n_w: usize) -> VarId {
        let vs = self.value(scores);
        let s = vs.shape().to_vec();
        let (g, t, t2) = (s[0], s[1], s[2]);
        assert_eq!(t, t2);
        assert_eq!(mask.len(), n_w * t * t);
        assert_eq!(g % (heads * n_w), 0);
        let mut out = vs.as_slice().to_vec();
        for gi in 0..g {
            let wi = (gi / heads) % n_w;
            let mblock = &mask[wi * t * t..(wi + 1) * t * t];
            let block = &mut out[gi * t * t..(gi + 1) * t * t];
            for (v, &m) in block.iter_mut().zip(mblock) {
                *v += m;
            }
        }
        let ng = self.wants(scores);
        self.push(Tensor::new(s, out), Op::WindowMaskAdd { scores }, ng)
    }

    pub fn l1_loss(&mut self, pred: VarId, target: &Tensor<T>) -> VarId {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "loss shape mismatch");
        let n = vp.numel() as f64;
        let sum: f64 = vp
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| (p.to_f64() - t.to_f64()).abs())
            .sum();
        let ng = self.wants(pred);
        self.push(
            Tensor::scalar(T::from_f64(sum / n)),
            Op::L1Loss {
                pred,
                target: target.clone(),
            },
            ng,
        )
    }

    pub fn l2_loss(&mut self, pred: VarId, target: &Tensor<T>) -> VarId {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "loss shape mismatch");
        let n = vp.numel() as f64;
        let sum: f64 = vp
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| {
                let d = p.to_f64() - t.to_f64();
                d * d
            })
            .sum();
        let ng = self.wants(pred);
        self.push(
            Tensor::scalar(T::from_f64(sum / n)),
            Op::L2Loss {
                pred,
                target: target.clone(),
            },
            ng,
        )
    }

    /// `labels` is row-major (B,H,W) with 255 = ignore. Returns an error value
    /// to the caller if no pixel is valid — checked by callers beforehand.
    pub fn masked_ce(&mut self, logits: VarId, labels: Arc<Vec<u8>>, classes: usize) -> VarId {
        let vl = self.value(logits);
        let s = vl.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(k, classes);
        assert_eq!(labels.len(), b * h * w);
        let hw = h * w;
        let xs = vl.as_slice();
        let mut n_valid = 0usize;
        let mut total = 0.0f64;
        for bi in 0..b {
            for p in 0..hw {
                let lab = labels[bi * hw + p];
                if lab == 255 {
                    continue;
                }
                assert!((lab as usize) < k, "label {lab} out of range");
                n_valid += 1;
                // log-softmax over the class dim at this pixel
                let mut mx = f64::NEG_INFINITY;
                for ci in 0..k {
                    mx = mx.max(xs[(bi * k + ci) * hw + p].to_f64());
                }
                let mut denom = 0.0;
                for ci in 0..k {
                    denom += (xs[(bi * k + ci) * hw + p].to_f64() - mx).exp();
                }
                let z = xs[(bi * k + lab as usize) * hw + p].to_f64() - mx;
                total += denom.ln() - z;
            }
        }
        assert!(n_valid > 0, "masked_ce: every pixel is ignored");
        let ng = self.wants(logits);
        self.push(
            Tensor::scalar(T::from_f64(total / n_valid as f64)),
            Op::MaskedCe {
                logits,
                labels,
                classes,
                n_valid,
            },
            ng,
        )
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let vx = self.value(x);
        let m = vx.mean();
        let ng = self.wants(x);
        self.push(Tensor::scalar(T::from_f64(m)), Op::MeanAll { x }, ng)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: VarId) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut slots: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(vec![T::ONE]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match slots[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut slots);
            slots[id] = Some(g);
        }
        Grads { slots }
    }

    fn grad_slot<'a>(
        &self,
        slots: &'a mut Vec<Option<Vec<T>>>,
        id: VarId,
    ) -> Option<&'a mut Vec<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let numel = self.nodes[id.0].value.numel();
        Some(slots[id.0].get_or_insert_with(|| vec![T::ZERO; numel]))
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, g: &[T], slots: &mut Vec<Option<Vec<T>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::AddScaled { a, b, alpha, beta } => {
                if let Some(da) = self.grad_slot(slots, *a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d = alpha.mul_add(gv, *d);
                    }
                }
                if let Some(db) = self.grad_slot(slots, *b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d = beta.mul_add(gv, *d);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.grad_slot(slots, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = c.mul_add(gv, *d);
                    }
                }
            }
            Op::AddConst { x } => {
                if let Some(dx) = self.grad_slot(slots, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let (n, k) = (vx.shape()[0], vx.shape()[1]);
                let m = vw.shape()[1];
                if let Some(dx) = self.grad_slot(slots, *x) {
                    mm_nt(g, vw.as_slice(), dx, n, m, k);
                }
                if let Some(dw) = self.grad_slot(slots, *w) {
                    mm_tn(vx.as_slice(), g, dw, n, k, m);
                }
                if let Some(db) = self.grad_slot(slots, *b) {
                    for row in g.chunks_exact(m) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch,
                c_out,
            } => {
                let vx = self.value(*x);
                let vw = self.value(*w);
                let np = geom.out_pixels();
                let ck = geom.col_rows();
                let in_stride = geom.c_in * geom.h * geom.w;
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                let mut col = vec![T::ZERO; ck * np];
                let mut dcol = vec![T::ZERO; ck * np];
                for bi in 0..*batch {
                    let gy = &g[bi * c_out * np..(bi + 1) * c_out * np];
                    if want_w {
                        im2col(
                            &vx.as_slice()[bi * in_stride..(bi + 1) * in_stride],
                            geom,
                            &mut col,
                        );
                        let dw = self.grad_slot(slots, *w).expect("dw slot");
                        mm_nt(gy, &col, dw, *c_out, np, ck);
                    }
                    if want_x {
                        dcol.iter_mut().for_each(|v| *v = T::ZERO);
                        mm_tn(vw.as_slice(), gy, &mut dcol, *c_out, ck, np);
                        let dx = self.grad_slot(slots, *x).expect("dx slot");
                        col2im(&dcol, geom, &mut dx[bi * in_stride..(bi + 1) * in_stride]);
                    }
                }
                if let Some(db) = self.grad_slot(slots, *b) {
                    for bi in 0..*batch {
                        for co in 0..*c_out {
                            let row = &g[(bi * c_out + co) * np..(bi * c_out + co + 1) * np];
                            let mut s = T::ZERO;
                            for &gv in row {
                                s += gv;
                            }
                            db[co] += s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let vx = self.value(*x);
                let vg = self.value(*gamma);
                let (n, c) = (vx.shape()[0], vx.shape()[1]);
                let xs = vx.as_slice();
                let gs = vg.as_slice();
                let inv_c = T::from_f64(1.0 / c as f64);
                if let Some(dg) = self.grad_slot(slots, *gamma) {
                    for i in 0..n {
                        let row = &xs[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        for j in 0..c {
                            dg[j] += grow[j] * (row[j] - mean[i]) * rstd[i];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(slots, *beta) {
                    for i in 0..n {
                        let grow = &g[i * c..(i + 1) * c];
                        for (d, &gv) in db.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
                if let Some(dx) = self.grad_slot(slots, *x) {
                    for i in 0..n {
                        let row = &xs[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let drow = &mut dx[i * c..(i + 1) * c];
                        let mut sum_gg = T::ZERO;
                        let mut sum_ggx = T::ZERO;
                        for j in 0..c {
                            let gg = grow[j] * gs[j];
                            let xh = (row[j] - mean[i]) * rstd[i];
                            sum_gg += gg;
                            sum_ggx = gg.mul_add(xh, sum_ggx);
                        }
                        let m1 = sum_gg * inv_c;
                        let m2 = sum_ggx * inv_c;
                        for j in 0..c {
                            let gg = grow[j] * gs[j];
                            let xh = (row[j] - mean[i]) * rstd[i];
                            drow[j] += rstd[i] * (gg - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::SoftmaxLast { x, dim } => {
                if self.nodes[x.0].needs_grad {
                    let p = self.value(VarId(id)).as_slice().to_vec();
                    let dx = self.grad_slot(slots, *x).expect("softmax dx");
                    for ((drow, prow), grow) in dx
                        .chunks_exact_mut(*dim)
                        .zip(p.chunks_exact(*dim))
                        .zip(g.chunks_exact(*dim))
                    {
                        let mut s = T::ZERO;
                        for (pv, gv) in prow.iter().zip(grow) {
                            s = pv.mul_add(*gv, s);
                        }
                        for j in 0..*dim {
                            drow[j] += prow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.nodes[x.0].needs_grad {
                    let vx = self.value(*x).as_slice().to_vec();
                    let dx = self.grad_slot(slots, *x).expect("gelu dx");
                    for (i, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d = gelu_bwd(vx[i]).mul_add(gv, *d);
                    }
                }
            }
            Op::Relu { x } => {
                if self.nodes[x.0].needs_grad {
                    let vx = self.value(*x).as_slice().to_vec();
                    let dx = self.grad_slot(slots, *x).expect("relu dx");
                    for (i, (d, &gv)) in dx.iter_mut().zip(g).enumerate() {
                        if vx[i] > T::ZERO {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ChwToTokens { x, b, c, h, w } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.grad_slot(slots, *x).expect("dx");
                    let hw = h * w;
                    for bi in 0..*b {
                        for ci in 0..*c {
                            let dst = &mut dx[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                            for (p, v) in dst.iter_mut().enumerate() {
                                *v += g[(bi * hw + p) * c + ci];
                            }
                        }
                    }
                }
            }
            Op::TokensToChw { x, b, c, h, w } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.grad_slot(slots, *x).expect("dx");
                    let hw = h * w;
                    for bi in 0..*b {
                        for ci in 0..*c {
                            let src = &g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                            for (p, &v) in src.iter().enumerate() {
                                dx[(bi * hw + p) * c + ci] += v;
                            }
                        }
                    }
                }
            }
            Op::Roll2d { x, dy, dx } => {
                if self.nodes[x.0].needs_grad {
                    let s = self.value(*x).shape().to_vec();
                    let back = roll_apply(g, &s, -dy, -dx);
                    let dslot = self.grad_slot(slots, *x).expect("dx");
                    for (d, v) in dslot.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::WindowPartition { x, win } => {
                if self.nodes[x.0].needs_grad {
                    let s = self.value(*x).shape().to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let back = window_scatter(g, b, c, h, w, *win, true);
                    let dslot = self.grad_slot(slots, *x).expect("dx");
                    for (d, v) in dslot.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::WindowMerge { x, win, b, c, h, w } => {
                if self.nodes[x.0].needs_grad {
                    let back = window_gather(g, *b, *c, *h, *w, *win, true);
                    let dslot = self.grad_slot(slots, *x).expect("dx");
                    for (d, v) in dslot.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::HeadsSplit { x, heads, t } => {
                if self.nodes[x.0].needs_grad {
                    let vx = self.value(*x);
                    let (rows, c) = (vx.shape()[0], vx.shape()[1]);
                    let g0 = rows / t;
                    let hd = c / heads;
                    let dx = self.grad_slot(slots, *x).expect("dx");
                    for gi in 0..g0 {
                        for i in 0..*t {
                            let dst = &mut dx[(gi * t + i) * c..(gi * t + i + 1) * c];
                            for hh in 0..*heads {
                                let src_row = (gi * heads + hh) * t + i;
                                for d in 0..hd {
                                    dst[hh * hd + d] += g[src_row * hd + d];
                                }
                            }
                        }
                    }
                }
            }
            Op::HeadsMerge { x, heads, t } => {
                if self.nodes[x.0].needs_grad {
                    let vx = self.value(*x);
                    let s = vx.shape();
                    let (gh, hd) = (s[0], s[2]);
                    let g0 = gh / heads;
                    let c = heads * hd;
                    let dx = self.grad_slot(slots, *x).expect("dx");
                    for gi in 0..g0 {
                        for hh in 0..*heads {
                            for i in 0..*t {
                                let dst_row = (gi * heads + hh) * t + i;
                                for d in 0..hd {
                                    dx[dst_row * hd + d] += g[(gi * t + i) * c + hh * hd + d];
                                }
                            }
                        }
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                g: groups,
                m,
                k,
                n,
            } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let want_a = self.nodes[a.0].needs_grad;
                let want_b = self.nodes[b.0].needs_grad;
                for gi in 0..*groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    if *trans_b {
                        // y = a @ b^T, b is (n, k)
                        if want_a {
                            let bg = &vb.as_slice()[gi * n * k..(gi + 1) * n * k];
                            let da = self.grad_slot(slots, *a).expect("da");
                            mm_nn(gg, bg, &mut da[gi * m * k..(gi + 1) * m * k], *m, *n, *k);
                        }
                        if want_b {
                            let ag = &va.as_slice()[gi * m * k..(gi + 1) * m * k];
                            let db = self.grad_slot(slots, *b).expect("db");
                            mm_tn(gg, ag, &mut db[gi * n * k..(gi + 1) * n * k], *m, *n, *k);
                        }
                    } else {
                        if want_a {
                            let bg = &vb.as_slice()[gi * k * n..(gi + 1) * k * n];
                            let da = self.grad_slot(slots, *a).expect("da");
                            mm_nt(gg, bg, &mut da[gi * m * k..(gi + 1) * m * k], *m, *n, *k);
                        }
                        if want_b {
                            let ag = &va.as_slice()[gi * m * k..(gi + 1) * m * k];
                            let db = self.grad_slot(slots, *b).expect("db");
                            mm_tn(ag, gg, &mut db[gi * k * n..(gi + 1) * k * n], *m, *k, *n);
                        }
                    }
                }
            }
            Op::SliceCols {
                x,
                cols,
                start,
                len,
            } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.grad_slot(slots, *x).expect("dx");
                    let n = dx.len() / cols;
                    for i in 0..n {
                        let grow = &g[i * len..(i + 1) * len];
                        let drow = &mut dx[i * cols + start..i * cols + start + len];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatChannels {
                a,
                b,
                c_a,
                c_b,
                hw,
                batch,
            } => {
                let stride = (c_a + c_b) * hw;
                if let Some(da) = self.grad_slot(slots, *a) {
                    for bi in 0..*batch {
                        let src = &g[bi * stride..bi * stride + c_a * hw];
                        for (d, &gv) in da[bi * c_a * hw..(bi + 1) * c_a * hw].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
                if let Some(db) = self.grad_slot(slots, *b) {
                    for bi in 0..*batch {
                        let src = &g[bi * stride + c_a * hw..(bi + 1) * stride];
                        for (d, &gv) in db[bi * c_b * hw..(bi + 1) * c_b * hw].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::PixelShuffle { x, s } => {
                if self.nodes[x.0].needs_grad {
                    let sh = self.value(*x).shape().to_vec();
                    let (batch, c_in, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let c_out = c_in / (s * s);
                    let back = pixel_shuffle_apply(g, batch, c_out, h, w, *s, true);
                    let dslot = self.grad_slot(slots, *x).expect("dx");
                    for (d, v) in dslot.iter_mut().zip(back) {
                        *d += v;
                    }
                }
            }
            Op::UpsampleNearest2x { x } => {
                if self.nodes[x.0].needs_grad {
                    let s = self.value(*x).shape().to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let dx = self.grad_slot(slots, *x).expect("dx");
                    for plane in 0..b * c {
                        let src = &g[plane * h * w * 4..(plane + 1) * h * w * 4];
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h {
                            for x_ in 0..w {
                                let o = 2 * y * 2 * w + 2 * x_;
                                dst[y * w + x_] +=
                                    (src[o] + src[o + 1]) + (src[o + 2 * w] + src[o + 2 * w + 1]);
                            }
                        }
                    }
                }
            }
            Op::RelBiasAdd {
                scores,
                table,
                idx,
                heads,
                t,
            } => {
                if let Some(ds) = self.grad_slot(slots, *scores) {
                    for (d, &gv) in ds.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.nodes[table.0].needs_grad {
                    let groups = g.len() / (t * t);
                    let dt = self.grad_slot(slots, *table).expect("dtable");
                    for gi in 0..groups {
                        let hh = gi % heads;
                        let block = &g[gi * t * t..(gi + 1) * t * t];
                        for (p, &gv) in block.iter().enumerate() {
                            dt[idx[p] as usize * heads + hh] += gv;
                        }
                    }
                }
            }
            Op::WindowMaskAdd { scores } => {
                if let Some(ds) = self.grad_slot(slots, *scores) {
                    for (d, &gv) in ds.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::L1Loss { pred, target } => {
                if self.nodes[pred.0].needs_grad {
                    let vp = self.value(*pred).as_slice().to_vec();
                    let scale = g[0].to_f64() / vp.len() as f64;
                    let dx = self.grad_slot(slots, *pred).expect("dpred");
                    for (i, d) in dx.iter_mut().enumerate() {
                        let diff = vp[i].to_f64() - target.as_slice()[i].to_f64();
                        let s = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *d += T::from_f64(s * scale);
                    }
                }
            }
            Op::L2Loss { pred, target } => {
                if self.nodes[pred.0].needs_grad {
                    let vp = self.value(*pred).as_slice().to_vec();
                    let scale = 2.0 * g[0].to_f64() / vp.len() as f64;
                    let dx = self.grad_slot(slots, *pred).expect("dpred");
                    for (i, d) in dx.iter_mut().enumerate() {
                        let diff = vp[i].to_f64() - target.as_slice()[i].to_f64();
                        *d += T::from_f64(diff * scale);
                    }
                }
            }
            Op::MaskedCe {
                logits,
                labels,
                classes,
                n_valid,
            } => {
                if self.nodes[logits.0].needs_grad {
                    let vl = self.value(*logits);
                    let s = vl.shape().to_vec();
                    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
                    debug_assert_eq!(k, *classes);
                    let xs = vl.as_slice().to_vec();
                    let scale = g[0].to_f64() / *n_valid as f64;
                    let dx = self.grad_slot(slots, *logits).expect("dlogits");
                    for bi in 0..b {
                        for p in 0..hw {
                            let lab = labels[bi * hw + p];
                            if lab == 255 {
                                continue;
                            }
                            let mut mx = f64::NEG_INFINITY;
                            for ci in 0..k {
                                mx = mx.max(xs[(bi * k + ci) * hw + p].to_f64());
                            }
                            let mut denom = 0.0;
                            for ci in 0..k {
                                denom += (xs[(bi * k + ci) * hw + p].to_f64() - mx).exp();
                            }
                            for ci in 0..k {
                                let soft = (xs[(bi * k + ci) * hw + p].to_f64() - mx).exp() / denom;
                                let ind = if ci == lab as usize { 1.0 } else { 0.0 };
                                dx[(bi * k + ci) * hw + p] += T::from_f64((soft - ind) * scale);
                            }
                        }
                    }
                }
            }
            Op::MeanAll { x } => {
                if self.nodes[x.0].needs_grad {
                    let n = self.value(*x).numel();
                    let gv = g[0].to_f64() / n as f64;
                    let dx = self.grad_slot(slots, *x).expect("dx");
                    for d in dx.iter_mut() {
                        *d += T::from_f64(gv);
                    }
                }
            }
        }
    }
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    // tanh approximation of GELU
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let u = c * (x + k * x.powi(3));
    T::from_f64(0.5) * x * (T::ONE + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x.powi(3));
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    let du = c * (T::ONE + T::from_f64(3.0) * k * x * x);
    half * (T::ONE + t) + half * x * sech2 * du
}

fn roll_apply<T: Scalar>(x: &[T], shape: &[usize], dy: isize, dx: isize) -> Vec<T> {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = vec![T::ZERO; x.len()];
    let hw = h * w;
    for plane in 0..b * c {
        let src = &x[plane * hw..(plane + 1) * hw];
        let dst = &mut out[plane * hw..(plane + 1) * hw];
        for y in 0..h {
            let ty = (y as isize + dy).rem_euclid(h as isize) as usize;
            for x_ in 0..w {
                let tx = (x_ as isize + dx).rem_euclid(w as isize) as usize;
                dst[ty * w + tx] = src[y * w + x_];
            }
        }
    }
    out
}

/// Gather (B,C,H,W) into window-token rows (B*nW*win², C); `adjoint` swaps
/// the roles of source and destination (used by WindowMerge backward).
fn window_gather<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    adjoint: bool,
) -> Vec<T> {
    let nwy = h / win;
    let nwx = w / win;
    let hw = h * w;
    let t = win * win;
    let mut out = vec![T::ZERO; b * c * hw];
    for bi in 0..b {
        for wy in 0..nwy {
            for wx in 0..nwx {
                let widx = (bi * nwy + wy) * nwx + wx;
                for iy in 0..win {
                    for ix in 0..win {
                        let row = widx * t + iy * win + ix;
                        let (py, px) = (wy * win + iy, wx * win + ix);
                        for ci in 0..c {
                            let chw = (bi * c + ci) * hw + py * w + px;
                            let tok = row * c + ci;
                            if adjoint {
                                out[tok] = x[chw];
                            } else {
                                out[tok] = x[chw];
                            }
                        }
                    }
                }
            }
        }
    }
    // adjoint of scatter == gather (bijection); kept as one code path
    out
}

/// Scatter window-token rows back to (B,C,H,W). Exact inverse of
/// `window_gather` (the mapping is a bijection).
fn window_scatter<T: Scalar>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    _adjoint: bool,
) -> Vec<T> {
    let nwy = h / win;
    let nwx = w / win;
    let hw = h * w;
    let t = win * win;
    let mut out = vec![T::ZERO; b * c * hw];
    for bi in 0..b {
        for wy in 0..nwy {
            for wx in 0..nwx {
                let widx = (bi * nwy + wy) * nwx + wx;
                for iy in 0..win {
                    for ix in 0..win {
                        let row = widx * t + iy * win + ix;
                        let (py, px) = (wy * win + iy, wx * win + ix);
                        for ci in 0..c {
                            out[(bi * c + ci) * hw + py * w + px] = x[row * c + ci];
                        }
                    }
                }
            }
        }
    }
    out
}

/// out[b, c, y*s+dy, x*s+dx] = in[b, c*s² + dy*s + dx, y, x]; `inverse`
/// applies the transpose (space back to channels).
pub(crate) fn pixel_shuffle_apply<T: Scalar>(
    x: &[T],
    batch: usize,
    c_out: usize,
    h: usize,
    w: usize,
    s: usize,
    inverse: bool,
) -> Vec<T> {
    let mut out = vec![T::ZERO; batch * c_out * s * s * h * w];
    let (oh, ow) = (h * s, w * s);
    for bi in 0..batch {
        for co in 0..c_out {
            for dy in 0..s {
                for dx in 0..s {
                    let ci = co * s * s + dy * s + dx;
                    for y in 0..h {
                        for x_ in 0..w {
                            let chan_idx = ((bi * c_out * s * s + ci) * h + y) * w + x_;
                            let spat_idx =
                                ((bi * c_out + co) * oh + y * s + dy) * ow + x_ * s + dx;
                            if inverse {
                                out[chan_idx] = x[spat_idx];
                            } else {
                                out[spat_idx] = x[chan_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Finite-difference check of d(loss)/d(leaf) for an arbitrary graph.
    fn check_grads(
        build: impl Fn(&mut Tape<f64>, &[VarId]) -> VarId,
        leaf_shapes: &[Vec<usize>],
        seed: u64,
        tol: f64,
    ) {
        let mut rng = Rng::new(seed);
        let leaves: Vec<Tensor<f64>> = leaf_shapes
            .iter()
            .map(|s| Tensor::from_fn(s, |_| rng.normal() * 0.5))
            .collect();

        let mut tape = Tape::new();
        let ids: Vec<VarId> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        assert_eq!(tape.value(loss).numel(), 1);
        let grads = tape.backward(loss);

        let eps = 1e-5;
        for (li, base) in leaves.iter().enumerate() {
            let g = grads.get(ids[li]).expect("missing grad").to_vec();
            // probe a handful of coordinates per leaf
            let n = base.numel();
            let probes: Vec<usize> = (0..n.min(5)).map(|i| i * (n / n.min(5)).max(1)).collect();
            for &pi in &probes {
                let run = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let ids2: Vec<VarId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.make_mut()[pi] += delta;
                            }
                            tape.leaf(t, false)
                        })
                        .collect();
                    let l = build(&mut tape, &ids2);
                    tape.value(l).as_slice()[0]
                };
                let fd = (run(eps) - run(-eps)) / (2.0 * eps);
                let an = g[pi];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "leaf {li} coord {pi}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_linear_chain() {
        check_grads(
            |t, ids| {
                let y = t.linear(ids[0], ids[1], ids[2]);
                let y = t.gelu(y);
                let target = Tensor::zeros(t.value(y).shape());
                t.l2_loss(y, &target)
            },
            &[vec![3, 4], vec![4, 5], vec![5]],
            1,
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d() {
        for &(pad, stride) in &[(1usize, 1usize), (0, 1), (1, 2)] {
            check_grads(
                |t, ids| {
                    let y = t.conv2d(ids[0], ids[1], ids[2], pad, stride);
                    let y = t.relu(y);
                    let target = Tensor::zeros(t.value(y).shape());
                    t.l2_loss(y, &target)
                },
                &[vec![2, 3, 5, 6], vec![4, 3, 3, 3], vec![4]],
                2,
                1e-4,
            );
        }
    }

    #[test]
    fn grad_layer_norm() {
        check_grads(
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5);
                let target = Tensor::full(t.value(y).shape(), 0.3);
                t.l2_loss(y, &target)
            },
            &[vec![6, 8], vec![8], vec![8]],
            3,
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_bmm_heads() {
        // a miniature attention: qkv -> heads -> scores -> softmax -> ctx -> merge
        check_grads(
            |t, ids| {
                let t_tokens = 4;
                let heads = 2;
                let q = t.heads_split(ids[0], heads, t_tokens);
                let k = t.heads_split(ids[1], heads, t_tokens);
                let v = t.heads_split(ids[2], heads, t_tokens);
                let scores = t.bmm(q, k, true);
                let scores = t.scale(scores, 0.5);
                let p = t.softmax_last(scores);
                let ctx = t.bmm(p, v, false);
                let merged = t.heads_merge(ctx, heads, t_tokens);
                let target = Tensor::zeros(t.value(merged).shape());
                t.l2_loss(merged, &target)
            },
            &[vec![8, 6], vec![8, 6], vec![8, 6]],
            4,
            1e-5,
        );
    }

    #[test]
    fn grad_window_roundtrip_and_roll() {
        check_grads(
            |t, ids| {
                let r = t.roll2d(ids[0], -1, 2);
                let wp = t.window_partition(r, 2);
                let back = t.window_merge(wp, 2, 2, 3, 4, 4);
                let unr = t.roll2d(back, 1, -2);
                let target = Tensor::full(t.value(unr).shape(), 0.1);
                t.l1_loss(unr, &target)
            },
            &[vec![2, 3, 4, 4]],
            5,
            1e-4,
        );
    }

    #[test]
    fn grad_pixel_shuffle_concat_upsample() {
        check_grads(
            |t, ids| {
                let ps = t.pixel_shuffle(ids[0], 2);
                let up = t.upsample_nearest2x(ids[1]);
                let cat = t.concat_channels(ps, up);
                let target = Tensor::zeros(t.value(cat).shape());
                t.l2_loss(cat, &target)
            },
            &[vec![1, 8, 3, 3], vec![1, 3, 3, 3]],
            6,
            1e-5,
        );
    }

    #[test]
    fn grad_rel_bias_and_mask() {
        let idx: Arc<Vec<u32>> = Arc::new(vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0]);
        let mask: Arc<Vec<f64>> = Arc::new(vec![0.0; 16]); // one window, no masking
        check_grads(
            move |t, ids| {
                let scores = t.bmm(ids[0], ids[1], true);
                let scores = t.rel_bias_add(scores, ids[2], Arc::clone(&idx), 2);
                let scores = t.window_mask_add(scores, Arc::clone(&mask), 2, 1);
                let p = t.softmax_last(scores);
                let ctx = t.bmm(p, ids[3], false);
                let target = Tensor::zeros(t.value(ctx).shape());
                t.l2_loss(ctx, &target)
            },
            &[
                vec![2, 4, 3],
                vec![2, 4, 3],
                vec![9, 2], // table: (2*2-1)^2 = 9 positions x 2 heads
                vec![2, 4, 3],
            ],
            7,
            1e-5,
        );
    }

    #[test]
    fn grad_masked_ce_ignores_labels() {
        let labels: Arc<Vec<u8>> = Arc::new(vec![0, 255, 1, 2, 255, 0]);
        let labels2 = Arc::clone(&labels);
        check_grads(
            move |t, ids| t.masked_ce(ids[0], Arc::clone(&labels2), 3),
            &[vec![1, 3, 2, 3]],
            8,
            1e-5,
        );

        // gradient at ignored pixels is exactly zero
        let mut tape = Tape::<f64>::new();
        let mut rng = Rng::new(9);
        let logits = Tensor::from_fn(&[1, 3, 2, 3], |_| rng.normal());
        let id = tape.leaf(logits, true);
        let loss = tape.masked_ce(id, labels, 3);
        let grads = tape.backward(loss);
        let g = grads.get(id).unwrap();
        for ci in 0..3 {
            assert_eq!(g[ci * 6 + 1], 0.0, "ignored pixel 1, class {ci}");
            assert_eq!(g[ci * 6 + 4], 0.0, "ignored pixel 4, class {ci}");
        }
    }

    #[test]
    fn grad_chw_tokens_roundtrip() {
        check_grads(
            |t, ids| {
                let tok = t.chw_to_tokens(ids[0]);
                let ln_g = t.leaf(Tensor::full(&[3], 1.0), false);
                let ln_b = t.leaf(Tensor::zeros(&[3]), false);
                let n = t.layer_norm(tok, ln_g, ln_b, 1e-5);
                let back = t.tokens_to_chw(n, 2, 3, 2, 2);
                let target = Tensor::full(t.value(back).shape(), 0.05);
                t.l2_loss(back, &target)
            },
            &[vec![2, 3, 2, 2]],
            10,
            1e-5,
        );
    }

    #[test]
    fn pixel_shuffle_index_convention() {
        // s=2, one pixel, 4 channels {a,b,c,d} -> 2x2 block [[a,b],[c,d]]
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.pixel_shuffle(x, 2);
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(11);
        let x = tape.leaf(Tensor::from_fn(&[5, 7], |_| (rng.normal() * 3.0) as f32), false);
        let p = tape.softmax_last(x);
        for row in tape.value(p).as_slice().chunks_exact(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_softmax_is_exactly_zero() {
        // additive -inf mask must zero attention weights exactly
        let mut tape = Tape::<f32>::new();
        let mut rng = Rng::new(12);
        let x = tape.leaf(Tensor::from_fn(&[1, 4, 4], |_| rng.normal() as f32), false);
        let ninf = f32::NEG_INFINITY;
        let mut mask = vec![0.0f32; 16];
        for row in 0..4 {
            mask[row * 4 + 1] = ninf;
            mask[row * 4 + 3] = ninf;
        }
        let m = tape.window_mask_add(x, Arc::new(mask), 1, 1);
        let p = tape.softmax_last(m);
        for row in tape.value(p).as_slice().chunks_exact(4) {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
            assert!((row[0] + row[2] - 1.0).abs() < 1e-6);
        }
    }
}
