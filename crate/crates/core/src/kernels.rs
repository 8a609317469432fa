//! Hot numeric kernels: the three matmul variants everything lowers to, plus
//! im2col/col2im for convolutions.
//!
//! All loops are written so each output element is produced by one fixed
//! sequential reduction — results are bit-identical run to run regardless of
//! how callers schedule work. Inner loops lean on `mul_add` over contiguous
//! slices, which the compiler turns into FMA vector code under
//! `target-cpu=native`.

use crate::tensor::Scalar;

/// out(m,n) += a(m,k) @ b(k,n)
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        // 4 b-rows per pass: 4 FMAs per out_row store instead of 1.
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..p * n + n];
            let b1 = &b[(p + 1) * n..(p + 1) * n + n];
            let b2 = &b[(p + 2) * n..(p + 2) * n + n];
            let b3 = &b[(p + 3) * n..(p + 3) * n + n];
            for j in 0..n {
                let acc = a0.mul_add(b0[j], out_row[j]);
                let acc = a1.mul_add(b1[j], acc);
                let acc = a2.mul_add(b2[j], acc);
                out_row[j] = a3.mul_add(b3[j], acc);
            }
            p += 4;
        }
        while p < k {
            let av = a_row[p];
            let b_row = &b[p * n..p * n + n];
            for j in 0..n {
                out_row[j] = av.mul_add(b_row[j], out_row[j]);
            }
            p += 1;
        }
    }
}

/// out(m,n) += a(m,k) @ b(n,k)^T
///
/// For anything beyond a handful of rows it is faster to transpose `b` once
/// and run the streaming `mm_nn` kernel than to do n·m strided dot products.
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m <= 4 {
        for i in 0..m {
            let a_row = &a[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let b_row = &b[j * k..(j + 1) * k];
                out_row[j] += dot(a_row, b_row);
            }
        }
        return;
    }
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        let b_row = &b[j * k..(j + 1) * k];
        for p in 0..k {
            bt[p * n + j] = b_row[p];
        }
    }
    mm_nn(a, &bt, out, m, k, n);
}

/// out(k,n) += a(m,k)^T @ b(m,n)
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut r = 0;
    while r + 4 <= m {
        let a0 = &a[r * k..(r + 1) * k];
        let a1 = &a[(r + 1) * k..(r + 2) * k];
        let a2 = &a[(r + 2) * k..(r + 3) * k];
        let a3 = &a[(r + 3) * k..(r + 4) * k];
        let b0 = &b[r * n..(r + 1) * n];
        let b1 = &b[(r + 1) * n..(r + 2) * n];
        let b2 = &b[(r + 2) * n..(r + 3) * n];
        let b3 = &b[(r + 3) * n..(r + 4) * n];
        for i in 0..k {
            let out_row = &mut out[i * n..(i + 1) * n];
            let (c0, c1, c2, c3) = (a0[i], a1[i], a2[i], a3[i]);
            for j in 0..n {
                let acc = c0.mul_add(b0[j], out_row[j]);
                let acc = c1.mul_add(b1[j], acc);
                let acc = c2.mul_add(b2[j], acc);
                out_row[j] = c3.mul_add(b3[j], acc);
            }
        }
        r += 4;
    }
    while r < m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let c = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] = c.mul_add(b_row[j], out_row[j]);
            }
        }
        r += 1;
    }
}

/// Dot product with four independent accumulators so the reduction vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] = a[i].mul_add(b[i], acc[0]);
        acc[1] = a[i + 1].mul_add(b[i + 1], acc[1]);
        acc[2] = a[i + 2].mul_add(b[i + 2], acc[2]);
        acc[3] = a[i + 3].mul_add(b[i + 3], acc[3]);
    }
    let mut tail = T::ZERO;
    for i in chunks * 4..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// Geometry of one conv2d application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub ksize: usize,
    pub pad: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, ksize: usize, pad: usize, stride: usize) -> Self {
        assert!(stride >= 1 && ksize >= 1);
        assert!(h + 2 * pad >= ksize && w + 2 * pad >= ksize, "kernel larger than padded input");
        ConvGeom {
            c_in,
            h,
            w,
            ksize,
            pad,
            stride,
            out_h: (h + 2 * pad - ksize) / stride + 1,
            out_w: (w + 2 * pad - ksize) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.ksize * self.ksize
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image (C,H,W) into a (C*k*k, out_h*out_w) column matrix.
/// Out-of-bounds taps are zero (zero padding).
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.out_pixels());
    let np = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = ((c * g.ksize + ky) * g.ksize + kx) * np;
                let dst = &mut col[row..row + np];
                for oy in 0..g.out_h {
                    let sy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if sy < 0 || sy >= g.h as isize {
                        for v in drow.iter_mut() {
                            *v = T::ZERO;
                        }
                        continue;
                    }
                    let srow = &plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let sx = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if sx < 0 || sx >= g.w as isize {
                            T::ZERO
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a column-matrix gradient back onto the (C,H,W) image, accumulating
/// overlapping taps. Exact adjoint of `im2col`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, x_grad: &mut [T]) {
    debug_assert_eq!(x_grad.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.out_pixels());
    let np = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut x_grad[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let row = ((c * g.ksize + ky) * g.ksize + kx) * np;
                let src = &col[row..row + np];
                for oy in 0..g.out_h {
                    let sy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let prow = &mut plane[sy as usize * g.w..(sy as usize + 1) * g.w];
                    for (ox, &v) in srow.iter().enumerate() {
                        let sx = (ox * g.stride + kx) as isize - g.pad as isize;
                        if sx >= 0 && sx < g.w as isize {
                            prow[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let mut rng = Rng::new(17);
        for &(m, k, n) in &[(3, 5, 7), (8, 8, 8), (13, 29, 6), (1, 7, 1), (5, 4, 9)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let want = naive_mm(&a, &b, m, k, n);

            let mut out = vec![0.0; m * n];
            mm_nn(&a, &b, &mut out, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // b^T laid out as (n,k)
            let mut bt = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut out = vec![0.0; m * n];
            mm_nt(&a, &bt, &mut out, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // a^T laid out as (k_rows=m, cols=k) then mm_tn computes a^T@b over rows m
            let mut at = vec![0.0; m * k];
            at.copy_from_slice(&a);
            let mut out = vec![0.0; k * n];
            // mm_tn treats `a` as (m,k) and computes (k,n) = a^T @ b, with b (m,n).
            // Build b2 = (m,n) random, compare against naive on transposed a.
            let b2: Vec<f64> = (0..m * n).map(|_| rng.normal()).collect();
            mm_tn(&at, &b2, &mut out, m, k, n);
            let mut want2 = vec![0.0; k * n];
            for r in 0..m {
                for i in 0..k {
                    for j in 0..n {
                        want2[i * n + j] += a[r * k + i] * b2[r * n + j];
                    }
                }
            }
            for (x, y) in out.iter().zip(&want2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c — the defining
        // property the conv backward relies on.
        let mut rng = Rng::new(23);
        for &(ci, h, w, ks, pad, stride) in
            &[(2, 5, 6, 3, 1, 1), (3, 8, 8, 3, 1, 2), (1, 4, 4, 1, 0, 1), (2, 7, 5, 3, 0, 2)]
        {
            let g = ConvGeom::new(ci, h, w, ks, pad, stride);
            let x: Vec<f64> = (0..ci * h * w).map(|_| rng.normal()).collect();
            let c: Vec<f64> = (0..g.col_rows() * g.out_pixels()).map(|_| rng.normal()).collect();
            let mut col = vec![0.0; c.len()];
            im2col(&x, &g, &mut col);
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let mut xg = vec![0.0; x.len()];
            col2im(&c, &g, &mut xg);
            let rhs: f64 = x.iter().zip(&xg).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    #[ignore = "throughput probe, run manually"]
    fn matmul_throughput_probe() {
        let (m, k, n) = (128, 288, 1024);
        let a: Vec<f32> = (0..m * k).map(|i| (i % 97) as f32 * 0.01).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 89) as f32 * 0.01).collect();
        let mut out = vec![0.0f32; m * n];
        let reps = 50;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            mm_nn(&a, &b, &mut out, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        println!("mm_nn {m}x{k}x{n}: {gflops:.1} GFLOP/s");

        let mut out = vec![0.0f32; m * n];
        let bt: Vec<f32> = (0..n * k).map(|i| (i % 83) as f32 * 0.01).collect();
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            mm_nt(&a, &bt, &mut out, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        println!("mm_nt {m}x{k}x{n}: {gflops:.1} GFLOP/s");

        let a2: Vec<f32> = (0..m * k).map(|i| (i % 97) as f32 * 0.01).collect();
        let b2: Vec<f32> = (0..m * n).map(|i| (i % 89) as f32 * 0.01).collect();
        let mut out = vec![0.0f32; k * n];
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            out.iter_mut().for_each(|v| *v = 0.0);
            mm_tn(&a2, &b2, &mut out, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        println!("mm_tn {m}x{k}x{n}: {gflops:.1} GFLOP/s");
    }
}
