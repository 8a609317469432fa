//! End-to-end synthetic experiments: generate scenes, degrade them into
//! revisit stacks, run the data-preparation steps (imputation, percentile
//! normalization, histogram matching of the target to the best view), train
//! and evaluate super-resolution models, and feed the outputs into the
//! land-cover harness.
//!
//! Everything is in-memory and deterministic in the spec seeds; the CLI
//! wires the same functions to files.

use crate::datapipe::{clip_normalize, histogram_match_image, impute_masked};
use crate::error::Result;
use crate::image::{clamp01, resize_bicubic};
use crate::landcover::LcSample;
use crate::metrics::psnr;
use crate::model::{Checkpoint, FusionMode, Model, ModelConfig};
use crate::rng::Rng;
use crate::synthdata::{degrade, gen_scene, DegradeSpec, SceneSpec};
use crate::tensor::Tensor;
use crate::train::{infer, train_sr, SrDataset, SrSample, TrainConfig, TrainResult};

/// One prepared scene: normalized revisit views (best first), the
/// radiometrically matched high-resolution target, and the label raster at
/// the high-resolution grid.
#[derive(Clone)]
pub struct PreparedScene {
    pub views: Vec<Tensor<f32>>,
    pub hr: Tensor<f32>,
    pub labels: Vec<u8>,
}

#[derive(Clone)]
pub struct PreparedData {
    pub train: Vec<PreparedScene>,
    pub val: Vec<PreparedScene>,
}

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub hr_size: usize,
    pub degrade: DegradeSpec,
    pub data_seed: u64,
}

/// Synthesize and prepare one scene end to end.
fn prepare_scene(index: u64, spec: &ExperimentSpec) -> Result<PreparedScene> {
    let scene_seed = Rng::derive(spec.data_seed, "scene-seed", index).next_u64();
    // vary the class mix a little per scene so the land-cover harness sees
    // diverse compositions
    let mut mix_rng = Rng::derive(spec.data_seed, "scene-mix", index);
    let base = SceneSpec::default().class_mix;
    let mut mix = [0.0f64; 7];
    let mut sum = 0.0;
    for c in 0..7 {
        mix[c] = (base[c] * mix_rng.range(0.6, 1.4)).max(0.005);
        sum += mix[c];
    }
    mix.iter_mut().for_each(|v| *v /= sum);

    let scene = SceneSpec {
        seed: scene_seed,
        hr_size: spec.hr_size,
        class_mix: mix,
    };
    let (hr, labels) = gen_scene(&scene)?;
    let deg_seed = Rng::derive(spec.data_seed, "degrade-seed", index).next_u64();
    let (mut stack, _) = degrade(&hr, &spec.degrade, deg_seed, &format!("scene_{index:05}"))?;
    clip_normalize(&mut stack, 2.0, 98.0)?;
    let full = impute_masked(&stack)?;

    // target radiometry follows the best (anchor) view
    let (n, c, lh, lw) = full.dims();
    debug_assert!(n >= 1);
    let anchor = Tensor::new(
        vec![c, lh, lw],
        full.views.as_slice()[..c * lh * lw].to_vec(),
    );
    let hr_matched = histogram_match_image(&hr, &anchor)?;

    let views: Vec<Tensor<f32>> = (0..n)
        .map(|v| {
            Tensor::new(
                vec![c, lh, lw],
                full.views.as_slice()[v * c * lh * lw..(v + 1) * c * lh * lw].to_vec(),
            )
        })
        .collect();
    Ok(PreparedScene {
        views,
        hr: hr_matched,
        labels,
    })
}

pub fn prepare_synth_data(spec: &ExperimentSpec) -> Result<PreparedData> {
    let mut train = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        train.push(prepare_scene(i as u64, spec)?);
    }
    let mut val = Vec::with_capacity(spec.n_val);
    for i in 0..spec.n_val {
        val.push(prepare_scene(1_000_000 + i as u64, spec)?);
    }
    Ok(PreparedData { train, val })
}

impl PreparedData {
    pub fn to_sr_dataset(&self) -> SrDataset {
        let conv = |scenes: &[PreparedScene]| -> Vec<SrSample> {
            scenes
                .iter()
                .map(|s| SrSample {
                    views: s.views.clone(),
                    hr: s.hr.clone(),
                })
                .collect()
        };
        SrDataset {
            train: conv(&self.train),
            val: conv(&self.val),
        }
    }
}

/// Mean PSNR of bicubic-upsampled anchors against the matched targets.
pub fn bicubic_val_psnr(data: &PreparedData, scale: usize) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.val {
        let sh = s.hr.shape();
        let up = clamp01(&resize_bicubic(&s.views[0], sh[1], sh[2]));
        total += psnr(&up, &s.hr, 1.0)?;
        let _ = scale;
    }
    Ok(total / data.val.len() as f64)
}

/// Mean PSNR of model outputs (clamped) against the matched targets.
pub fn model_val_psnr(model: &Model<f32>, data: &PreparedData) -> Result<f64> {
    let mut total = 0.0;
    for s in &data.val {
        let out = clamp01(&infer(model, &s.views)?);
        total += psnr(&out, &s.hr, 1.0)?;
    }
    Ok(total / data.val.len() as f64)
}

#[derive(Clone)]
pub struct SrRunOutcome {
    pub result: TrainResult,
    pub model_psnr: f64,
    pub bicubic_psnr: f64,
    /// FNV-1a over the final checkpoint bytes plus the PSNR bit patterns —
    /// one number that changes if anything in the run changed.
    pub digest: u64,
}

/// Train one SR model on prepared data and evaluate it on the held-out
/// scenes. Fully deterministic in (data, cfg seeds).
pub fn run_sr_experiment(
    data: &PreparedData,
    mode: FusionMode,
    mut model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> Result<SrRunOutcome> {
    model_cfg.mode = mode;
    let sr_data = data.to_sr_dataset();
    let result = train_sr(&sr_data, model_cfg, train_cfg)?;
    let (best_model, _) = result.best.into_model()?;
    let model_psnr = model_val_psnr(&best_model, data)?;
    let bicubic_psnr = bicubic_val_psnr(data, best_model.cfg.scale)?;
    let mut digest = fnv64(&result.last.encode());
    digest = fnv64_extend(digest, &model_psnr.to_bits().to_le_bytes());
    digest = fnv64_extend(digest, &bicubic_psnr.to_bits().to_le_bytes());
    Ok(SrRunOutcome {
        result,
        model_psnr,
        bicubic_psnr,
        digest,
    })
}

/// Land-cover samples from the ground-truth high-resolution images.
pub fn lc_from_hr(scenes: &[PreparedScene]) -> Vec<LcSample> {
    scenes
        .iter()
        .map(|s| LcSample {
            image: s.hr.clone(),
            labels: s.labels.clone(),
        })
        .collect()
}

/// Land-cover samples from SR model outputs.
pub fn lc_from_model(model: &Model<f32>, scenes: &[PreparedScene]) -> Result<Vec<LcSample>> {
    scenes
        .iter()
        .map(|s| {
            Ok(LcSample {
                image: clamp01(&infer(model, &s.views)?),
                labels: s.labels.clone(),
            })
        })
        .collect()
}

/// Land-cover samples from bicubic-upsampled anchors.
pub fn lc_from_bicubic(scenes: &[PreparedScene]) -> Vec<LcSample> {
    scenes
        .iter()
        .map(|s| {
            let sh = s.hr.shape();
            LcSample {
                image: clamp01(&resize_bicubic(&s.views[0], sh[1], sh[2])),
                labels: s.labels.clone(),
            }
        })
        .collect()
}

pub fn fnv64(bytes: &[u8]) -> u64 {
    fnv64_extend(0xcbf2_9ce4_8422_2325, bytes)
}

pub fn fnv64_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Digest of a checkpoint's exact bytes.
pub fn checkpoint_digest(ck: &Checkpoint) -> u64 {
    fnv64(&ck.encode())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ExperimentSpec {
        ExperimentSpec {
            n_train: 3,
            n_val: 2,
            hr_size: 64,
            degrade: DegradeSpec::default(),
            data_seed: 99,
        }
    }

    #[test]
    fn prepared_data_shapes_and_determinism() {
        let spec = small_spec();
        let d1 = prepare_synth_data(&spec).unwrap();
        assert_eq!(d1.train.len(), 3);
        assert_eq!(d1.val.len(), 2);
        let s = &d1.train[0];
        assert_eq!(s.views.len(), 8);
        assert_eq!(s.views[0].shape(), &[4, 16, 16]);
        assert_eq!(s.hr.shape(), &[4, 64, 64]);
        assert_eq!(s.labels.len(), 64 * 64);
        assert!(s.views.iter().all(|v| v.iter().all(|&x| (0.0..=1.0).contains(&x))));

        let d2 = prepare_synth_data(&spec).unwrap();
        for (a, b) in d1.train[0].hr.iter().zip(d2.train[0].hr.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bicubic_beats_nothing_but_is_finite() {
        let data = prepare_synth_data(&small_spec()).unwrap();
        let p = bicubic_val_psnr(&data, 4).unwrap();
        assert!(p.is_finite() && p > 5.0, "bicubic psnr {p}");
    }
}
