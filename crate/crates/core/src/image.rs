//! Plain (non-differentiable) image resampling and filtering on (C,H,W)
//! float tensors: bilinear/bicubic resize with pixel-center alignment,
//! wrap-boundary Gaussian blur and sub-pixel translation for the synthetic
//! degradation pipeline, and box-average downsampling.

use crate::tensor::Tensor;

/// Source coordinate of output pixel `i` under pixel-center alignment.
#[inline]
fn src_coord(i: usize, in_dim: usize, out_dim: usize) -> f64 {
    (i as f64 + 0.5) * (in_dim as f64 / out_dim as f64) - 0.5
}

/// Bilinear resize with edge clamping. Constant images map to the same
/// constant because interpolation is evaluated in lerp form.
pub fn resize_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = chw(img);
    assert!(out_h > 0 && out_w > 0, "zero output dims");
    let xs = img.as_slice();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        let sy = src_coord(oy, h, out_h).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = (sy - y0 as f64) as f32;
        for ox in 0..out_w {
            let sx = src_coord(ox, w, out_w).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = (sx - x0 as f64) as f32;
            for ci in 0..c {
                let plane = &xs[ci * h * w..(ci + 1) * h * w];
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(ci * out_h + oy) * out_w + ox] = top + fy * (bot - top);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Keys cubic kernel with a = -0.5.
#[inline]
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        (((t - 5.0) * t + 8.0) * t - 4.0) * a
    } else {
        0.0
    }
}

/// Bicubic resize (Catmull-Rom), edge clamped. The learning-free upsampling
/// baseline the trained models are compared against.
pub fn resize_bicubic(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let (c, h, w) = chw(img);
    assert!(out_h > 0 && out_w > 0, "zero output dims");
    let xs = img.as_slice();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for oy in 0..out_h {
        let sy = src_coord(oy, h, out_h);
        let y_base = sy.floor() as isize;
        let fy = sy - y_base as f64;
        let wy: [f64; 4] = [
            cubic_weight(fy + 1.0),
            cubic_weight(fy),
            cubic_weight(fy - 1.0),
            cubic_weight(fy - 2.0),
        ];
        for ox in 0..out_w {
            let sx = src_coord(ox, w, out_w);
            let x_base = sx.floor() as isize;
            let fx = sx - x_base as f64;
            let wx: [f64; 4] = [
                cubic_weight(fx + 1.0),
                cubic_weight(fx),
                cubic_weight(fx - 1.0),
                cubic_weight(fx - 2.0),
            ];
            for ci in 0..c {
                let plane = &xs[ci * h * w..(ci + 1) * h * w];
                let mut acc = 0.0f64;
                for (j, &wyv) in wy.iter().enumerate() {
                    let yy = (y_base - 1 + j as isize).clamp(0, h as isize - 1) as usize;
                    let mut row_acc = 0.0f64;
                    for (i, &wxv) in wx.iter().enumerate() {
                        let xx = (x_base - 1 + i as isize).clamp(0, w as isize - 1) as usize;
                        row_acc += wxv * plane[yy * w + xx] as f64;
                    }
                    acc += wyv * row_acc;
                }
                out[(ci * out_h + oy) * out_w + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Separable Gaussian blur with circular (wrap) boundary, so the image mean
/// is preserved exactly. sigma <= 0 returns the input unchanged.
pub fn gaussian_blur_wrap(img: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (c, h, w) = chw(img);
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0f64;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    kernel.iter_mut().for_each(|v| *v /= sum);

    let xs = img.as_slice();
    let mut tmp = vec![0.0f32; xs.len()];
    // horizontal pass
    for ci in 0..c {
        for y in 0..h {
            let row = &xs[(ci * h + y) * w..(ci * h + y + 1) * w];
            let orow = &mut tmp[(ci * h + y) * w..(ci * h + y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0f64;
                for (i, &kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + i as isize - radius as isize)
                        .rem_euclid(w as isize) as usize;
                    acc += kv * row[sx] as f64;
                }
                orow[x] = acc as f32;
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0f32; xs.len()];
    for ci in 0..c {
        for x in 0..w {
            for y in 0..h {
                let mut acc = 0.0f64;
                for (i, &kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + i as isize - radius as isize)
                        .rem_euclid(h as isize) as usize;
                    acc += kv * tmp[(ci * h + sy) * w + x] as f64;
                }
                out[(ci * h + y) * w + x] = acc as f32;
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Sub-pixel translation with circular boundary: output(y,x) samples
/// input(y - dy, x - dx) bilinearly, so positive shifts move content
/// down/right. Wrap keeps every input pixel's total weight at one, which
/// preserves the band mean.
pub fn translate_wrap(img: &Tensor<f32>, dy: f64, dx: f64) -> Tensor<f32> {
    let (c, h, w) = chw(img);
    let xs = img.as_slice();
    let mut out = vec![0.0f32; xs.len()];
    for y in 0..h {
        let sy = y as f64 - dy;
        let y0 = sy.floor();
        let fy = (sy - y0) as f32;
        let y0i = (y0 as isize).rem_euclid(h as isize) as usize;
        let y1i = (y0 as isize + 1).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = x as f64 - dx;
            let x0 = sx.floor();
            let fx = (sx - x0) as f32;
            let x0i = (x0 as isize).rem_euclid(w as isize) as usize;
            let x1i = (x0 as isize + 1).rem_euclid(w as isize) as usize;
            for ci in 0..c {
                let plane = &xs[ci * h * w..(ci + 1) * h * w];
                let v00 = plane[y0i * w + x0i];
                let v01 = plane[y0i * w + x1i];
                let v10 = plane[y1i * w + x0i];
                let v11 = plane[y1i * w + x1i];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(ci * h + y) * w + x] = top + fy * (bot - top);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Mean over factor x factor blocks — the sensor area-integration model for
/// low-resolution image formation. Dims must divide evenly.
pub fn box_downsample(img: &Tensor<f32>, factor: usize) -> Tensor<f32> {
    let (c, h, w) = chw(img);
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0);
    let (oh, ow) = (h / factor, w / factor);
    let xs = img.as_slice();
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for iy in 0..factor {
                    let row = &plane[(oy * factor + iy) * w + ox * factor..];
                    for ix in 0..factor {
                        acc += row[ix] as f64;
                    }
                }
                out[(ci * oh + oy) * ow + ox] = (acc * inv) as f32;
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn clamp01(img: &Tensor<f32>) -> Tensor<f32> {
    img.map(|v| v.clamp(0.0, 1.0))
}

fn chw(img: &Tensor<f32>) -> (usize, usize, usize) {
    let s = img.shape();
    assert_eq!(s.len(), 3, "expected (C,H,W), got {s:?}");
    (s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn bilinear_constant_preserved() {
        let img = Tensor::full(&[2, 10, 14], 0.7f32);
        for &(oh, ow) in &[(5, 7), (3, 3), (10, 14), (1, 1)] {
            let out = resize_bilinear(&img, oh, ow);
            assert!(out.iter().all(|&v| v == 0.7), "dims {oh}x{ow}");
        }
    }

    #[test]
    fn bilinear_checker_to_single_pixel() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let out = resize_bilinear(&img, 1, 1);
        assert!((out.at(&[0, 0, 0]) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn bilinear_factor_one_is_identity() {
        let mut rng = Rng::new(31);
        let img = Tensor::from_fn(&[3, 6, 5], |_| rng.uniform() as f32);
        let out = resize_bilinear(&img, 6, 5);
        for (a, b) in out.iter().zip(img.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bicubic_constant_and_range() {
        let img = Tensor::full(&[1, 8, 8], 0.25f32);
        let out = resize_bicubic(&img, 32, 32);
        for v in out.iter() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_mean_wrap() {
        let mut rng = Rng::new(33);
        let img = Tensor::from_fn(&[1, 16, 16], |_| rng.uniform() as f32);
        let out = gaussian_blur_wrap(&img, 1.2);
        assert!((out.mean() - img.mean()).abs() < 1e-6);
    }

    #[test]
    fn translate_integer_shift_equals_roll() {
        let mut rng = Rng::new(35);
        let img = Tensor::from_fn(&[2, 8, 8], |_| rng.uniform() as f32);
        let out = translate_wrap(&img, 2.0, -3.0);
        for ci in 0..2 {
            for y in 0..8usize {
                for x in 0..8usize {
                    let sy = (y as isize - 2).rem_euclid(8) as usize;
                    let sx = (x as isize + 3).rem_euclid(8) as usize;
                    assert!((out.at(&[ci, y, x]) - img.at(&[ci, sy, sx])).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn translate_preserves_mean() {
        let mut rng = Rng::new(37);
        let img = Tensor::from_fn(&[1, 12, 12], |_| rng.uniform() as f32);
        let out = translate_wrap(&img, 0.37, -1.62);
        assert!((out.mean() - img.mean()).abs() < 1e-6);
    }

    #[test]
    fn box_downsample_means() {
        let img = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        let out = box_downsample(&img, 2);
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert!((out.at(&[0, 0, 0]) - 0.5).abs() < 1e-7);
    }
}
