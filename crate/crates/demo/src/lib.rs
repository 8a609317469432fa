//! Browser demo bindings: synthesize a labeled scene, degrade it into
//! low-resolution revisits with adjustable acquisition parameters, and
//! compare naive upsampling against the ground truth — all running in the
//! page via wasm-bindgen. The exported functions are plain Rust and are
//! exercised natively by the crate tests.

use sen4x_core::image::{clamp01, resize_bicubic};
use sen4x_core::metrics::{psnr, ssim};
use sen4x_core::synthdata::{degrade, gen_scene, DegradeSpec, SceneSpec};
use sen4x_core::tensor::Tensor;
use wasm_bindgen::prelude::*;

fn scene_spec(seed: u64, hr_size: usize) -> SceneSpec {
    SceneSpec {
        seed,
        hr_size,
        ..Default::default()
    }
}

fn degrade_spec(blur: f64, noise: f64, shift: f64, mask_fraction: f64) -> DegradeSpec {
    DegradeSpec {
        blur_sigma: blur,
        noise_sigma: noise,
        shift_max: shift.min(0.95),
        mask_fraction: mask_fraction.clamp(0.0, 0.5),
        ..Default::default()
    }
}

/// (C,H,W) float image -> RGBA bytes for a canvas ImageData.
fn to_rgba(img: &Tensor<f32>, gain: f32) -> Vec<u8> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let xs = img.as_slice();
    let mut out = vec![255u8; h * w * 4];
    for p in 0..h * w {
        for b in 0..3 {
            out[p * 4 + b] = ((xs[b * h * w + p] * gain).clamp(0.0, 1.0) * 255.0) as u8;
        }
    }
    out
}

const LABEL_COLORS: [[u8; 3]; 7] = [
    [220, 60, 60],
    [128, 128, 140],
    [60, 100, 220],
    [20, 120, 40],
    [120, 200, 80],
    [220, 200, 80],
    [180, 140, 100],
];

/// Render the synthetic high-resolution scene (RGB bands) as RGBA bytes,
/// hr_size x hr_size.
#[wasm_bindgen]
pub fn render_scene(seed: u64, hr_size: usize) -> Vec<u8> {
    let (hr, _) = gen_scene(&scene_spec(seed, hr_size)).expect("scene");
    to_rgba(&hr, 1.15)
}

/// Render the scene's land-cover labels as RGBA bytes.
#[wasm_bindgen]
pub fn render_labels(seed: u64, hr_size: usize) -> Vec<u8> {
    let (_, labels) = gen_scene(&scene_spec(seed, hr_size)).expect("scene");
    let mut out = vec![255u8; labels.len() * 4];
    for (p, &l) in labels.iter().enumerate() {
        let c = LABEL_COLORS[(l as usize).min(6)];
        out[p * 4..p * 4 + 3].copy_from_slice(&c);
    }
    out
}

/// Render one degraded low-resolution revisit (RGBA, hr_size/4 per side).
/// Masked-invalid pixels show magenta.
#[wasm_bindgen]
pub fn render_view(
    seed: u64,
    hr_size: usize,
    view: usize,
    blur: f64,
    noise: f64,
    shift: f64,
    mask_fraction: f64,
) -> Vec<u8> {
    let (hr, _) = gen_scene(&scene_spec(seed, hr_size)).expect("scene");
    let spec = degrade_spec(blur, noise, shift, mask_fraction);
    let (stack, _) = degrade(&hr, &spec, seed ^ 0x5eed, "demo").expect("degrade");
    let (n, c, h, w) = stack.dims();
    let v = view.min(n - 1);
    let img = Tensor::new(
        vec![c, h, w],
        stack.views.as_slice()[v * c * h * w..(v + 1) * c * h * w].to_vec(),
    );
    let mut rgba = to_rgba(&img, 1.15);
    for p in 0..h * w {
        if stack.masks[v * h * w + p] == 0 {
            rgba[p * 4..p * 4 + 4].copy_from_slice(&[255, 0, 255, 255]);
        }
    }
    rgba
}

/// Bicubic 4x upsampling of the anchor view, rendered at hr_size.
#[wasm_bindgen]
pub fn render_bicubic(
    seed: u64,
    hr_size: usize,
    blur: f64,
    noise: f64,
    shift: f64,
    mask_fraction: f64,
) -> Vec<u8> {
    let (hr, _) = gen_scene(&scene_spec(seed, hr_size)).expect("scene");
    let spec = degrade_spec(blur, noise, shift, mask_fraction);
    let (stack, _) = degrade(&hr, &spec, seed ^ 0x5eed, "demo").expect("degrade");
    let (_, c, h, w) = stack.dims();
    let anchor = Tensor::new(vec![c, h, w], stack.views.as_slice()[..c * h * w].to_vec());
    let up = clamp01(&resize_bicubic(&anchor, hr_size, hr_size));
    to_rgba(&up, 1.15)
}

/// PSNR/SSIM of the bicubic-upsampled anchor against the ground truth, as a
/// small JSON object.
#[wasm_bindgen]
pub fn compare_metrics(
    seed: u64,
    hr_size: usize,
    blur: f64,
    noise: f64,
    shift: f64,
    mask_fraction: f64,
) -> String {
    let (hr, _) = gen_scene(&scene_spec(seed, hr_size)).expect("scene");
    let spec = degrade_spec(blur, noise, shift, mask_fraction);
    let (stack, _) = degrade(&hr, &spec, seed ^ 0x5eed, "demo").expect("degrade");
    let (_, c, h, w) = stack.dims();
    let anchor = Tensor::new(vec![c, h, w], stack.views.as_slice()[..c * h * w].to_vec());
    let up = clamp01(&resize_bicubic(&anchor, hr_size, hr_size));
    let p = psnr(&up, &hr, 1.0).unwrap_or(f64::NAN);
    let s = ssim(&up, &hr, 1.0).unwrap_or(f64::NAN);
    format!("{{\"psnr_db\":{p:.4},\"ssim\":{s:.4}}}")
}
