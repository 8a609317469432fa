//! Least-squares multi-image reconstruction with known shifts:
//! min sum_v ||A_v x - y_v||^2 + lam ||L x||^2, solved by conjugate
//! gradient, where A_v = box-downsample . blur . translate is the true
//! forward operator of the synthetic degradation.
//!
//! Comparing the 8-view against the anchor-only reconstruction measures how
//! much information the extra shifted revisits actually carry — the upper
//! bound a learned fusion model can exploit. Run with:
//!
//! ```sh
//! cargo run --release -p sen4x-core --example oracle_probe
//! ```
use sen4x_core::datapipe::{clip_normalize, histogram_match_image, impute_masked};
use sen4x_core::image::{box_downsample, clamp01, gaussian_blur_wrap, translate_wrap};
use sen4x_core::metrics::psnr;
use sen4x_core::synthdata::{degrade, gen_scene, DegradeSpec, SceneSpec};
use sen4x_core::tensor::Tensor;

const SCALE: usize = 4;
const BLUR: f64 = 1.2;

fn forward_op(x: &Tensor<f32>, shift: (f64, f64)) -> Tensor<f32> {
    let shifted = translate_wrap(x, shift.0 * SCALE as f64, shift.1 * SCALE as f64);
    box_downsample(&gaussian_blur_wrap(&shifted, BLUR), SCALE)
}

// adjoint: box^T (replicate/s^2) -> blur (self-adjoint) -> translate by -shift
fn adjoint_op(y: &Tensor<f32>, shift: (f64, f64), th: usize, tw: usize) -> Tensor<f32> {
    let s = y.shape();
    let (c, lh, lw) = (s[0], s[1], s[2]);
    let mut up = vec![0.0f32; c * th * tw];
    let inv = 1.0 / (SCALE * SCALE) as f32;
    for ci in 0..c {
        for yy in 0..lh {
            for xx in 0..lw {
                let v = y.at(&[ci, yy, xx]) * inv;
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        up[(ci * th + yy * SCALE + dy) * tw + xx * SCALE + dx] = v;
                    }
                }
            }
        }
    }
    let up = Tensor::new(vec![c, th, tw], up);
    let blurred = gaussian_blur_wrap(&up, BLUR);
    translate_wrap(&blurred, -shift.0 * SCALE as f64, -shift.1 * SCALE as f64)
}

fn laplacian(x: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let xs = x.as_slice();
    let mut out = vec![0.0f32; xs.len()];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let at = |yy: isize, xxx: isize| {
                    let yy = yy.rem_euclid(h as isize) as usize;
                    let xxx = xxx.rem_euclid(w as isize) as usize;
                    xs[(ci * h + yy) * w + xxx]
                };
                out[(ci * h + y) * w + xx] = 4.0 * at(y as isize, xx as isize)
                    - at(y as isize - 1, xx as isize)
                    - at(y as isize + 1, xx as isize)
                    - at(y as isize, xx as isize - 1)
                    - at(y as isize, xx as isize + 1);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

fn dot(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn axpy(y: &mut Tensor<f32>, alpha: f64, x: &Tensor<f32>) {
    let ys = y.make_mut();
    for (yv, xv) in ys.iter_mut().zip(x.iter()) {
        *yv += (alpha * *xv as f64) as f32;
    }
}

/// CG on (sum_v A_v^T A_v + lam L) x = sum_v A_v^T y_v
fn reconstruct(views: &[(Tensor<f32>, (f64, f64))], th: usize, tw: usize, lam: f32, iters: usize) -> Tensor<f32> {
    let c = views[0].0.shape()[0];
    let apply = |x: &Tensor<f32>| -> Tensor<f32> {
        let mut acc = Tensor::<f32>::zeros(&[c, th, tw]);
        for (y, shift) in views {
            let _ = y;
            let ax = forward_op(x, *shift);
            let back = adjoint_op(&ax, *shift, th, tw);
            axpy(&mut acc, 1.0, &back);
        }
        let lap = laplacian(x);
        axpy(&mut acc, lam as f64, &lap);
        acc
    };
    let mut b = Tensor::<f32>::zeros(&[c, th, tw]);
    for (y, shift) in views {
        let back = adjoint_op(y, *shift, th, tw);
        axpy(&mut b, 1.0, &back);
    }
    let mut x = Tensor::<f32>::zeros(&[c, th, tw]);
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for _ in 0..iters {
        let ap = apply(&p);
        let alpha = rs / dot(&p, &ap).max(1e-30);
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rs_new = dot(&r, &r);
        if rs_new < 1e-12 {
            break;
        }
        let beta = rs_new / rs;
        let pdata = p.make_mut();
        for (i, rv) in r.iter().enumerate() {
            pdata[i] = rv + (beta as f32) * pdata[i];
        }
        rs = rs_new;
    }
    x
}

fn main() {
    for (name, mix) in [
        ("default", SceneSpec::default().class_mix),
        ("urban", [0.22, 0.14, 0.08, 0.14, 0.12, 0.20, 0.10]),
    ] {
        run(name, mix);
    }
}

fn run(name: &str, mix: [f64; 7]) {
    let n = 8;
    let (mut p1, mut p8) = (0.0, 0.0);
    for i in 0..n {
        let scene = SceneSpec { seed: 700 + i, hr_size: 96, class_mix: mix };
        let (hr, _) = gen_scene(&scene).unwrap();
        let (mut stack, metas) = degrade(&hr, &DegradeSpec::default(), 1700 + i, "t").unwrap();
        clip_normalize(&mut stack, 2.0, 98.0).unwrap();
        let stack = impute_masked(&stack).unwrap();
        let (nv, c, lh, lw) = stack.dims();
        let anchor = Tensor::new(vec![c, lh, lw], stack.views.as_slice()[..c * lh * lw].to_vec());
        let target = histogram_match_image(&hr, &anchor).unwrap();
        let (th, tw) = (lh * 4, lw * 4);

        let all: Vec<(Tensor<f32>, (f64, f64))> = (0..nv)
            .map(|v| {
                (
                    Tensor::new(
                        vec![c, lh, lw],
                        stack.views.as_slice()[v * c * lh * lw..(v + 1) * c * lh * lw].to_vec(),
                    ),
                    metas[v].shift,
                )
            })
            .collect();
        let one = vec![all[0].clone()];

        let r1 = clamp01(&reconstruct(&one, th, tw, 0.02, 40));
        let r8 = clamp01(&reconstruct(&all, th, tw, 0.02, 40));
        p1 += psnr(&r1, &target, 1.0).unwrap() / n as f64;
        p8 += psnr(&r8, &target, 1.0).unwrap() / n as f64;
    }
    println!("{name}: CG anchor {p1:.3} dB, 8 views {p8:.3} dB (gain {:+.3} dB)", p8 - p1);
}
