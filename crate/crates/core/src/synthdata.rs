//! Procedural generation of high-resolution scenes with land-cover labels,
//! and their degradation into low-resolution revisit stacks.
//!
//! Scenes are built from smoothed per-class noise fields (water, forest,
//! grassland, cropland, bare soil) with iteratively calibrated biases so the
//! rendered class fractions track the requested mix, then roads (polylines)
//! and buildings (small rectangles) are painted on top with pixel budgets
//! from the same mix. Labels are the painted class ids, exactly consistent
//! with the rendered image.
//!
//! Degradation models the low-resolution acquisition: per view, a sub-pixel
//! translation (wrap boundary, so band means are preserved), Gaussian optics
//! blur, box-average downsampling (sensor area integration), per-view
//! gain/offset jitter, additive Gaussian noise, and randomly masked invalid
//! pixels. View 0 is the anchor with zero shift.

use crate::datapipe::RevisitStack;
use crate::error::{Error, Result};
use crate::image::{box_downsample, gaussian_blur_wrap, translate_wrap};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const CLASS_NAMES: [&str; 7] = [
    "buildings",
    "sealed",
    "water",
    "forest",
    "grassland",
    "cropland",
    "bare_soil",
];

/// Base reflectance palette per class (R, G, B, NIR). Vegetation classes
/// carry elevated NIR so the fourth band is informative.
const PALETTE: [[f32; 4]; 7] = [
    [0.55, 0.50, 0.48, 0.35], // buildings
    [0.30, 0.30, 0.32, 0.20], // sealed
    [0.08, 0.12, 0.25, 0.04], // water
    [0.10, 0.30, 0.12, 0.65], // forest
    [0.25, 0.50, 0.22, 0.70], // grassland
    [0.35, 0.42, 0.20, 0.55], // cropland
    [0.50, 0.42, 0.30, 0.30], // bare soil
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub hr_size: usize,
    /// Target area fraction per class, summing to 1.
    pub class_mix: [f64; 7],
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            hr_size: 256,
            class_mix: [0.12, 0.08, 0.10, 0.20, 0.15, 0.25, 0.10],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class_mix sums to {sum}, expected 1")));
        }
        if self.class_mix.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("class_mix entries must be non-negative".into()));
        }
        if self.hr_size < 16 {
            return Err(Error::Config("hr_size must be >= 16".into()));
        }
        Ok(())
    }
}

/// Bilinearly interpolated random grid — cheap smooth noise.
fn value_noise(rng: &mut Rng, size: usize, cell: usize) -> Vec<f32> {
    let n = size / cell + 2;
    let grid: Vec<f32> = (0..n * n).map(|_| rng.uniform() as f32).collect();
    let mut out = vec![0.0f32; size * size];
    for y in 0..size {
        let gy = y as f32 / cell as f32;
        let y0 = gy.floor() as usize;
        let fy = gy - y0 as f32;
        for x in 0..size {
            let gx = x as f32 / cell as f32;
            let x0 = gx.floor() as usize;
            let fx = gx - x0 as f32;
            let v00 = grid[y0 * n + x0];
            let v01 = grid[y0 * n + x0 + 1];
            let v10 = grid[(y0 + 1) * n + x0];
            let v11 = grid[(y0 + 1) * n + x0 + 1];
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            out[y * size + x] = top + fy * (bot - top);
        }
    }
    out
}

/// Deterministic scene synthesis. Returns the (4, H, W) reflectance image in
/// [0,1] and the H*W label raster.
pub fn gen_scene(spec: &SceneSpec) -> Result<(Tensor<f32>, Vec<u8>)> {
    spec.validate()?;
    let size = spec.hr_size;
    let hw = size * size;
    let mut rng = Rng::derive(spec.seed, "scene", 0);

    // background classes: blobs from calibrated noise fields
    const BLOB_CLASSES: [usize; 5] = [2, 3, 4, 5, 6];
    let blob_total: f64 = BLOB_CLASSES.iter().map(|&c| spec.class_mix[c]).sum();
    let mut labels = vec![6u8; hw]; // bare soil fallback when no blob class is requested
    if blob_total > 0.0 {
        let mut fields: Vec<Vec<f32>> = Vec::new();
        let mut targets: Vec<f64> = Vec::new();
        let mut active: Vec<usize> = Vec::new();
        for &c in &BLOB_CLASSES {
            if spec.class_mix[c] <= 0.0 {
                continue;
            }
            let coarse = value_noise(&mut rng, size, (size / 4).max(4));
            let fine = value_noise(&mut rng, size, (size / 16).max(2));
            fields.push(
                coarse
                    .iter()
                    .zip(&fine)
                    .map(|(a, b)| a + 0.35 * b)
                    .collect(),
            );
            targets.push(spec.class_mix[c] / blob_total);
            active.push(c);
        }
        // iterative bias calibration toward target fractions
        let mut bias = vec![0.0f32; active.len()];
        for _ in 0..14 {
            let mut counts = vec![0usize; active.len()];
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = f32::MIN;
                for (i, f) in fields.iter().enumerate() {
                    let v = f[p] + bias[i];
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                counts[best] += 1;
            }
            for i in 0..active.len() {
                let actual = (counts[i] as f64 / hw as f64).max(1e-4);
                bias[i] += (0.6 * (targets[i].max(1e-4) / actual).ln()) as f32;
            }
        }
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = f32::MIN;
            for (i, f) in fields.iter().enumerate() {
                let v = f[p] + bias[i];
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            labels[p] = active[best] as u8;
        }
    }

    // sealed surfaces: polyline segments of width 2-4 px until the pixel
    // budget is spent
    let sealed_budget = (spec.class_mix[1] * hw as f64) as usize;
    let mut painted = 0usize;
    let mut guard = 0;
    while painted < sealed_budget && guard < 10_000 {
        guard += 1;
        let width = 2 + rng.below(3); // 2..=4
        let (mut y, mut x) = (rng.below(size) as f64, rng.below(size) as f64);
        let segments = 2 + rng.below(3);
        for _ in 0..segments {
            let (ty, tx) = (rng.below(size) as f64, rng.below(size) as f64);
            let len = ((ty - y).powi(2) + (tx - x).powi(2)).sqrt().max(1.0);
            let steps = len.ceil() as usize * 2;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (py, px) = (y + t * (ty - y), x + t * (tx - x));
                let r = width as isize / 2;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (qy, qx) = (py as isize + dy, px as isize + dx);
                        if qy >= 0 && qy < size as isize && qx >= 0 && qx < size as isize {
                            let idx = qy as usize * size + qx as usize;
                            if labels[idx] != 1 {
                                labels[idx] = 1;
                                painted += 1;
                            }
                        }
                    }
                }
            }
            y = ty;
            x = tx;
            if painted >= sealed_budget {
                break;
            }
        }
    }

    // buildings: rectangles 4-16 px a side until the pixel budget is spent
    let building_budget = (spec.class_mix[0] * hw as f64) as usize;
    let mut painted = 0usize;
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut guard = 0;
    while painted < building_budget && guard < 10_000 {
        guard += 1;
        let bw = 4 + rng.below(13); // 4..=16
        let bh = 4 + rng.below(13);
        if size <= bw || size <= bh {
            continue;
        }
        let y0 = rng.below(size - bh);
        let x0 = rng.below(size - bw);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let idx = y * size + x;
                if labels[idx] != 0 {
                    labels[idx] = 0;
                    painted += 1;
                }
            }
        }
        rects.push((y0, x0, bh, bw));
    }

    // render reflectance: palette + per-scene class jitter + smooth
    // illumination + surface roughness, buildings with per-instance jitter.
    // The roughness field is fine-grained (a few HR pixels) and random per
    // scene: priors cannot predict it, but shifted revisits resolve it — the
    // detail that separates multi-image from single-image reconstruction.
    // per-scene palette drift: class colors are only a weak prior across
    // scenes, so reconstruction has to rely on the measurements
    let mut class_jitter = [[0.0f32; 4]; 7];
    for cj in class_jitter.iter_mut() {
        for b in cj.iter_mut() {
            *b = (rng.range(-0.07, 0.07)) as f32;
        }
    }
    let illum = value_noise(&mut rng, size, (size / 3).max(4));
    let rough_coarse = value_noise(&mut rng, size, 3);
    let rough_fine = value_noise(&mut rng, size, 2);
    let band_rough = [1.0f32, 0.9, 0.8, 1.2];
    let mut img = vec![0.0f32; 4 * hw];
    for p in 0..hw {
        let c = labels[p] as usize;
        let shade = 0.92 + 0.16 * illum[p];
        let rough = 0.12 * (rough_coarse[p] - 0.5) + 0.07 * (rough_fine[p] - 0.5);
        for b in 0..4 {
            let texture = rough * band_rough[b] + (rng.normal() * 0.01) as f32;
            img[b * hw + p] = ((PALETTE[c][b] + class_jitter[c][b]) * shade + texture).clamp(0.0, 1.0);
        }
    }
    // per-instance building tint on top
    for (y0, x0, bh, bw) in rects {
        let tint: Vec<f32> = (0..4).map(|_| rng.range(-0.08, 0.08) as f32).collect();
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                let p = y * size + x;
                if labels[p] == 0 {
                    for b in 0..4 {
                        img[b * hw + p] = (img[b * hw + p] + tint[b]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    Ok((Tensor::new(vec![4, size, size], img), labels))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegradeSpec {
    pub n_views: usize,
    pub scale: usize,
    /// Max |sub-pixel shift| in low-resolution pixels.
    pub shift_max: f64,
    /// Gaussian optics blur in high-resolution pixels.
    pub blur_sigma: f64,
    /// Additive Gaussian reflectance noise.
    pub noise_sigma: f64,
    /// Fraction of pixels marked invalid per view.
    pub mask_fraction: f64,
    /// Per-view multiplicative gain jitter, drawn from ±gain_jitter.
    pub gain_jitter: f64,
    /// Per-view additive offset jitter, drawn from ±offset_jitter.
    pub offset_jitter: f64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            n_views: 8,
            scale: 4,
            shift_max: 0.5,
            blur_sigma: 1.2,
            noise_sigma: 0.01,
            mask_fraction: 0.05,
            gain_jitter: 0.02,
            offset_jitter: 0.02,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shift_max >= 1.0 {
            return Err(Error::Config("shift_max must be < 1 LR pixel".into()));
        }
        if self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("sigmas must be >= 0".into()));
        }
        if self.n_views == 0 || self.scale == 0 {
            return Err(Error::Config("n_views and scale must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::Config("mask_fraction must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Shift/gain metadata recorded for each generated view.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewMeta {
    /// Shift in LR pixels applied to the scene before sampling this view.
    pub shift: (f64, f64),
    pub gain: f64,
    pub offset: f64,
}

/// One view: translate (wrap) -> blur -> box downsample.
pub fn form_view(hr: &Tensor<f32>, shift_lr: (f64, f64), scale: usize, blur_sigma: f64) -> Tensor<f32> {
    let shifted = if shift_lr == (0.0, 0.0) {
        hr.clone()
    } else {
        translate_wrap(hr, shift_lr.0 * scale as f64, shift_lr.1 * scale as f64)
    };
    let blurred = gaussian_blur_wrap(&shifted, blur_sigma);
    box_downsample(&blurred, scale)
}

/// Degrade a high-resolution scene into an N-view revisit stack. View 0 is
/// the zero-shift anchor defining the output reference frame.
pub fn degrade(hr: &Tensor<f32>, spec: &DegradeSpec, seed: u64, tile_id: &str) -> Result<(RevisitStack, Vec<ViewMeta>)> {
    spec.validate()?;
    let s = hr.shape();
    if s.len() != 3 || s[1] % spec.scale != 0 || s[2] % spec.scale != 0 {
        return Err(Error::Config(format!(
            "hr dims {:?} not divisible by scale {}",
            s,
            spec.scale
        )));
    }
    let (c, lh, lw) = (s[0], s[1] / spec.scale, s[2] / spec.scale);
    let lhw = lh * lw;
    let mut views = Vec::with_capacity(spec.n_views * c * lhw);
    let mut masks = vec![1u8; spec.n_views * lhw];
    let mut metas = Vec::with_capacity(spec.n_views);
    for v in 0..spec.n_views {
        let mut rng = Rng::derive(seed, "degrade-view", v as u64);
        let shift = if v == 0 {
            (0.0, 0.0)
        } else {
            (
                rng.range(-spec.shift_max, spec.shift_max),
                rng.range(-spec.shift_max, spec.shift_max),
            )
        };
        let lr = form_view(hr, shift, spec.scale, spec.blur_sigma);
        let gain = 1.0 + rng.range(-spec.gain_jitter, spec.gain_jitter);
        let offset = rng.range(-spec.offset_jitter, spec.offset_jitter);
        let noisy = lr.map(|px| {
            let val = px as f64 * gain + offset + rng.normal() * spec.noise_sigma;
            val.clamp(0.0, 1.0) as f32
        });
        views.extend_from_slice(noisy.as_slice());
        metas.push(ViewMeta {
            shift,
            gain,
            offset,
        });

        // exactly round(mask_fraction * pixels) invalid pixels per view
        let n_masked = (spec.mask_fraction * lhw as f64).round() as usize;
        let mut order: Vec<usize> = (0..lhw).collect();
        rng.shuffle(&mut order);
        for &p in order.iter().take(n_masked) {
            masks[v * lhw + p] = 0;
        }
    }
    // guarantee stack coverage: any location invalid in every view gets its
    // anchor unmasked
    for p in 0..lhw {
        if (0..spec.n_views).all(|v| masks[v * lhw + p] == 0) {
            masks[p] = 1;
        }
    }
    let stack = RevisitStack {
        tile_id: tile_id.to_string(),
        views: Tensor::new(vec![spec.n_views, c, lh, lw], views),
        masks,
    };
    Ok((stack, metas))
}
