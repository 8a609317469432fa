//! Subcommand implementations. Every artifact-producing run writes its
//! outputs under --out together with a run-manifest JSON (command, resolved
//! config and its hash, seed, version, timestamp) that makes the run
//! reproducible byte for byte when replayed with the same settings.

use crate::settings::Settings;
use sen4x_core::datapipe::{
    self, clip_normalize, crop, downsample_bilinear, downsample_labels, extract_patches,
    histogram_match_image, impute_masked, select_revisits, split_dataset, DatasetManifest,
    Date, ManifestTile, RevisitCandidate, RevisitEntry, RevisitStack, ScoreWeights, Split,
    MANIFEST_VERSION,
};
use sen4x_core::error::{Error, Result};
use sen4x_core::image::{clamp01, resize_bicubic};
use sen4x_core::landcover::{train_lc, LcDataset, LcSample};
use sen4x_core::metrics::{confusion, psnr, seg_scores, ssim, ConfusionMatrix, EvalReport};
use sen4x_core::model::{count_parameters, Checkpoint};
use sen4x_core::raster::{read_f32, read_u8, write_f32, write_u8};
use sen4x_core::rng::Rng;
use sen4x_core::synthdata::{degrade, gen_scene, SceneSpec};
use sen4x_core::tensor::Tensor;
use sen4x_core::train::{grad_check, infer, train_sr, SrDataset, SrSample};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

/// Current UTC time as ISO-8601, overridable for reproducible runs.
pub fn now_iso() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let days = (secs / 86_400) as i64;
    let rem = secs % 86_400;
    let (y, m, d) = Date(days).to_ymd();
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

pub fn print_resolved(command: &str, settings: &Settings) {
    eprintln!("[sen4x] command: {command}");
    eprintln!("[sen4x] seed: {}", settings.get("seed"));
    eprintln!("[sen4x] config hash: {:016x}", settings.config_hash());
    for line in settings.render().lines() {
        eprintln!("[sen4x]   {line}");
    }
}

fn write_run_manifest(out: &Path, command: &str, settings: &Settings, timestamp: &str) -> Result<()> {
    let manifest = json!({
        "command": command,
        "config": settings.0,
        "config_hash": format!("{:016x}", settings.config_hash()),
        "seed": settings.u64_("seed")?,
        "version": env!("CARGO_PKG_VERSION"),
        "timestamp": timestamp,
    });
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("run_manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Index-ordered parallel map over items with a bounded worker count; the
/// output order never depends on scheduling.
pub fn par_map<T: Send + Sync, R: Send>(threads: usize, items: Vec<T>, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let threads = threads.max(1).min(n);
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (ti, (items_chunk, out_chunk)) in items
            .chunks(chunk)
            .zip(out.chunks_mut(chunk))
            .enumerate()
        {
            let f = &f;
            scope.spawn(move || {
                for (j, (item, slot)) in items_chunk.iter().zip(out_chunk.iter_mut()).enumerate() {
                    *slot = Some(f(ti * chunk + j, item));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("worker filled slot")).collect()
}

/// First three bands of a (C,H,W) [0,1] image as an 8-bit RGB PNG.
pub fn write_png_rgb(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if c < 3 {
        return Err(Error::Data("png export needs >= 3 bands".into()));
    }
    let xs = img.as_slice();
    let mut rgb = vec![0u8; h * w * 3];
    for p in 0..h * w {
        for b in 0..3 {
            rgb[p * 3 + b] = (xs[b * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png: {e}")))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| Error::Data(format!("png: {e}")))?;
    Ok(())
}

/// Class-colored label map PNG (ignore pixels black).
pub fn write_png_labels(labels: &[u8], h: usize, w: usize, path: &Path) -> Result<()> {
    const COLORS: [[u8; 3]; 7] = [
        [220, 60, 60],   // buildings
        [128, 128, 140], // sealed
        [60, 100, 220],  // water
        [20, 120, 40],   // forest
        [120, 200, 80],  // grassland
        [220, 200, 80],  // cropland
        [180, 140, 100], // bare soil
    ];
    let mut rgb = vec![0u8; h * w * 3];
    for (p, &l) in labels.iter().enumerate() {
        if (l as usize) < 7 {
            rgb[p * 3..p * 3 + 3].copy_from_slice(&COLORS[l as usize]);
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png: {e}")))?;
    writer
        .write_image_data(&rgb)
        .map_err(|e| Error::Data(format!("png: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
pub(crate) struct CandidateRecord {
    id: String,
    acq_date: String,
    ref_date: String,
    cloud_fraction: f64,
    invalid_fraction: f64,
    high_reflectance_fraction: f64,
    /// True sub-pixel shift of this view — generator metadata, absent for
    /// real acquisitions.
    #[serde(default)]
    shift: Option<(f64, f64)>,
}

/// Generate raw synthetic tiles: a high-resolution scene with labels plus a
/// pool of degraded candidate revisits with acquisition metadata, laid out
/// the way `prepare` expects real data.
pub fn cmd_synth(settings: &Settings, out: &Path, timestamp: &str, png: bool) -> Result<()> {
    let n_tiles = settings.usize_("tiles")?;
    let hr_size = settings.usize_("hr_size")?;
    let seed = settings.u64_("seed")?;
    let dspec = settings.degrade_spec()?;
    let threads = settings.threads()?;
    if hr_size % dspec.scale != 0 {
        return Err(Error::Config(format!(
            "hr_size {hr_size} not divisible by scale {}",
            dspec.scale
        )));
    }
    let raw = out.join("raw");
    std::fs::create_dir_all(&raw)?;

    let tile_ids: Vec<usize> = (0..n_tiles).collect();
    let results = par_map(threads, tile_ids, |_, &t| -> Result<String> {
        let tile_name = format!("tile_{t:05}");
        let dir = raw.join(&tile_name);
        std::fs::create_dir_all(&dir)?;

        // per-tile class mix jitter, as in the in-memory harness
        let mut mix_rng = Rng::derive(seed, "tile-mix", t as u64);
        let base = SceneSpec::default().class_mix;
        let mut mix = [0.0f64; 7];
        let mut sum = 0.0;
        for c in 0..7 {
            mix[c] = (base[c] * mix_rng.range(0.6, 1.4)).max(0.005);
            sum += mix[c];
        }
        mix.iter_mut().for_each(|v| *v /= sum);
        let scene = SceneSpec {
            seed: Rng::derive(seed, "tile-scene", t as u64).next_u64(),
            hr_size,
            class_mix: mix,
        };
        let (hr, labels) = gen_scene(&scene)?;
        write_f32(&hr, &dir.join("hr.s4xr"))?;
        write_u8(&[hr_size, hr_size], &labels, &dir.join("labels.s4xr"))?;
        if png {
            write_png_rgb(&hr, &dir.join("hr.png"))?;
            write_png_labels(&labels, hr_size, hr_size, &dir.join("labels.png"))?;
        }

        let deg_seed = Rng::derive(seed, "tile-degrade", t as u64).next_u64();
        let (stack, metas) = degrade(&hr, &dspec, deg_seed, &tile_name)?;
        let (n, c, lh, lw) = stack.dims();
        let ref_date = Date::from_ymd(2023, 6, 15);
        let mut meta_rng = Rng::derive(seed, "tile-dates", t as u64);
        let mut records = Vec::with_capacity(n);
        for (v, meta) in metas.iter().enumerate().take(n) {
            let id = format!("rv{t:04}_{v:02}");
            let view = Tensor::new(
                vec![c, lh, lw],
                stack.views.as_slice()[v * c * lh * lw..(v + 1) * c * lh * lw].to_vec(),
            );
            write_f32(&view, &dir.join(format!("view_{id}.s4xr")))?;
            let mask = &stack.masks[v * lh * lw..(v + 1) * lh * lw];
            write_u8(&[lh, lw], mask, &dir.join(format!("mask_{id}.s4xr")))?;

            // anchor acquired on the target date so it ranks first
            let day_offset: i64 = if v == 0 {
                0
            } else {
                let off = 30 + meta_rng.below(570) as i64;
                if meta_rng.uniform() < 0.5 {
                    -off
                } else {
                    off
                }
            };
            let invalid = mask.iter().filter(|&&m| m == 0).count() as f64 / (lh * lw) as f64;
            let bright = view.iter().filter(|&&x| x > datapipe::HIGH_REFLECTANCE_THRESHOLD).count()
                as f64
                / view.numel() as f64;
            records.push(CandidateRecord {
                id,
                acq_date: Date(ref_date.0 + day_offset).iso(),
                ref_date: ref_date.iso(),
                cloud_fraction: 0.0,
                invalid_fraction: invalid,
                high_reflectance_fraction: bright,
                shift: Some((meta.shift.0, meta.shift.1)),
            });
        }
        std::fs::write(
            dir.join("candidates.json"),
            serde_json::to_string_pretty(&records)?,
        )?;
        let _ = &metas;
        Ok(tile_name)
    });
    let mut names = Vec::new();
    for r in results {
        names.push(r?);
    }
    write_run_manifest(out, "synth", settings, timestamp)?;
    println!("synthesized {} tiles under {}", names.len(), raw.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

/// Turn raw tiles into a training-ready patch dataset: select the best k
/// revisits, clip/normalize, impute, radiometrically match and (if needed)
/// downsample the target, purify labels, cut patches, and split by
/// geographic block.
pub fn cmd_prepare(settings: &Settings, raw_root: &Path, out: &Path, timestamp: &str) -> Result<()> {
    let k = settings.usize_("k_revisits")?;
    let patch = settings.usize_("patch")?;
    let stride = settings.usize_("stride")?;
    let block_size = settings.usize_("block_size")?.max(1);
    let scale = settings.usize_("scale")?;
    let seed = settings.u64_("seed")?;
    let fr = settings.f64_list("fractions", 3)?;
    let threads = settings.threads()?;

    let raw = raw_root.join("raw");
    let raw = if raw.is_dir() { raw } else { raw_root.to_path_buf() };
    let mut tile_dirs: Vec<PathBuf> = std::fs::read_dir(&raw)
        .map_err(|e| Error::Data(format!("{}: {e}", raw.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    tile_dirs.sort();
    if tile_dirs.is_empty() {
        return Err(Error::Data(format!("no tile directories under {}", raw.display())));
    }

    let patches_root = out.join("patches");
    std::fs::create_dir_all(&patches_root)?;

    let per_tile = par_map(threads, tile_dirs, |tile_idx, dir| -> Result<Vec<ManifestTile>> {
        let tile_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_else(|| format!("tile_{tile_idx}"));
        let text = std::fs::read_to_string(dir.join("candidates.json"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("candidates.json").display())))?;
        let records: Vec<CandidateRecord> = serde_json::from_str(&text)?;
        let candidates: Vec<RevisitCandidate> = records
            .iter()
            .map(|r| {
                Ok(RevisitCandidate {
                    id: r.id.clone(),
                    acq_date: Date::parse_iso(&r.acq_date)?,
                    cloud_fraction: r.cloud_fraction,
                    invalid_fraction: r.invalid_fraction,
                    high_reflectance_fraction: r.high_reflectance_fraction,
                    ref_date: Date::parse_iso(&r.ref_date)?,
                })
            })
            .collect::<Result<_>>()?;
        let selected = select_revisits(&tile_name, &candidates, k, &ScoreWeights::default())?;

        // stack the selected views in rank order
        let mut views = Vec::new();
        let mut masks = Vec::new();
        let mut dims: Option<(usize, usize, usize)> = None;
        for sel in &selected {
            let v = read_f32(&dir.join(format!("view_{}.s4xr", sel.id)))?;
            let (ms, m) = read_u8(&dir.join(format!("mask_{}.s4xr", sel.id)))?;
            let s = v.shape().to_vec();
            if s.len() != 3 || ms != vec![s[1], s[2]] {
                return Err(Error::Data(format!("tile {tile_name}: bad view/mask dims")));
            }
            match dims {
                None => dims = Some((s[0], s[1], s[2])),
                Some(d) if d == (s[0], s[1], s[2]) => {}
                _ => return Err(Error::Data(format!("tile {tile_name}: inconsistent view dims"))),
            }
            views.extend_from_slice(v.as_slice());
            masks.extend_from_slice(&m);
        }
        let (c, lh, lw) = dims.unwrap();
        let mut stack = RevisitStack {
            tile_id: tile_name.clone(),
            views: Tensor::new(vec![k, c, lh, lw], views),
            masks,
        };
        stack.check_coverage()?;
        clip_normalize(&mut stack, 2.0, 98.0)?;
        let stack = impute_masked(&stack)?;

        // target: histogram match to the best revisit, then resample to the
        // output grid if the source is finer
        let hr_native = read_f32(&dir.join("hr.s4xr"))?;
        let anchor = Tensor::new(
            vec![c, lh, lw],
            stack.views.as_slice()[..c * lh * lw].to_vec(),
        );
        let hr_matched = histogram_match_image(&hr_native, &anchor)?;
        let (th, tw) = (lh * scale, lw * scale);
        let hr = if hr_matched.shape()[1] == th && hr_matched.shape()[2] == tw {
            hr_matched
        } else {
            downsample_bilinear(&hr_matched, th, tw)?
        };

        // labels: purify down to the target grid when finer
        let (lshape, labels_native) = read_u8(&dir.join("labels.s4xr"))?;
        let (labels, _, _) = if lshape == vec![th, tw] {
            (labels_native, th, tw)
        } else if lshape[0] % th == 0 && lshape[0] / th == lshape[1] / tw {
            downsample_labels(&labels_native, lshape[0], lshape[1], lshape[0] / th)
        } else {
            return Err(Error::Data(format!(
                "tile {tile_name}: label dims {lshape:?} incompatible with target {th}x{tw}"
            )));
        };

        // patches
        let mut tiles = Vec::new();
        for (r, cidx) in extract_patches(lh, lw, patch, stride)? {
            let pid = format!("{tile_name}_r{r:03}_c{cidx:03}");
            let pdir = patches_root.join(&pid);
            std::fs::create_dir_all(&pdir)?;
            // low-res stack patch (k, C, patch, patch)
            let mut lr_data = Vec::with_capacity(k * c * patch * patch);
            for v in 0..k {
                let view = Tensor::new(
                    vec![c, lh, lw],
                    stack.views.as_slice()[v * c * lh * lw..(v + 1) * c * lh * lw].to_vec(),
                );
                lr_data.extend_from_slice(crop(&view, r, cidx, patch, patch).as_slice());
            }
            write_f32(
                &Tensor::new(vec![k, c, patch, patch], lr_data),
                &pdir.join("lr.s4xr"),
            )?;
            let hr_patch = crop(&hr, r * scale, cidx * scale, patch * scale, patch * scale);
            write_f32(&hr_patch, &pdir.join("hr.s4xr"))?;
            let mut lab_patch = Vec::with_capacity(patch * scale * patch * scale);
            for y in 0..patch * scale {
                let row = (r * scale + y) * tw + cidx * scale;
                lab_patch.extend_from_slice(&labels[row..row + patch * scale]);
            }
            write_u8(
                &[patch * scale, patch * scale],
                &lab_patch,
                &pdir.join("labels.s4xr"),
            )?;

            let mut files = BTreeMap::new();
            files.insert("lr".into(), format!("patches/{pid}/lr.s4xr"));
            files.insert("hr".into(), format!("patches/{pid}/hr.s4xr"));
            files.insert("labels".into(), format!("patches/{pid}/labels.s4xr"));
            tiles.push(ManifestTile {
                tile_id: pid,
                geo_block: (tile_idx / block_size) as u32,
                split: Split::Train,
                revisits: selected
                    .iter()
                    .map(|s| RevisitEntry {
                        id: s.id.clone(),
                        score: s.score,
                    })
                    .collect(),
                files,
            });
        }
        Ok(tiles)
    });

    let mut tiles = Vec::new();
    for t in per_tile {
        tiles.extend(t?);
    }
    split_dataset(&mut tiles, (fr[0], fr[1], fr[2]), seed)?;
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        created: timestamp.to_string(),
        tiles,
    };
    std::fs::write(out.join("manifest.json"), manifest.to_json())?;
    write_run_manifest(out, "prepare", settings, timestamp)?;
    println!(
        "prepared {} patches ({} train / {} val / {} test) under {}",
        manifest.tiles.len(),
        manifest.tiles_in(Split::Train).len(),
        manifest.tiles_in(Split::Val).len(),
        manifest.tiles_in(Split::Test).len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// dataset loading (shared by train-sr / train-lc / eval-lc)
// ---------------------------------------------------------------------------

pub fn load_manifest(data: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(data.join("manifest.json"))
        .map_err(|e| Error::Data(format!("{}: {e}", data.join("manifest.json").display())))?;
    let manifest = DatasetManifest::from_json(&text)?;
    manifest.validate_files(data)?;
    Ok(manifest)
}

fn load_sr_sample(data: &Path, tile: &ManifestTile) -> Result<SrSample> {
    let lr = read_f32(&data.join(&tile.files["lr"]))?;
    let hr = read_f32(&data.join(&tile.files["hr"]))?;
    let s = lr.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Data(format!("{}: lr raster must be (N,C,H,W)", tile.tile_id)));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let views = (0..n)
        .map(|v| {
            Tensor::new(
                vec![c, h, w],
                lr.as_slice()[v * c * h * w..(v + 1) * c * h * w].to_vec(),
            )
        })
        .collect();
    Ok(SrSample { views, hr })
}

pub fn load_sr_dataset(data: &Path, manifest: &DatasetManifest) -> Result<SrDataset> {
    let mut out = SrDataset::default();
    for tile in &manifest.tiles {
        let sample = load_sr_sample(data, tile)?;
        match tile.split {
            Split::Train => out.train.push(sample),
            Split::Val => out.val.push(sample),
            Split::Test => {}
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// train-sr / infer / eval-image
// ---------------------------------------------------------------------------

pub fn cmd_train_sr(settings: &Settings, data: &Path, out: &Path, timestamp: &str) -> Result<()> {
    let manifest = load_manifest(data)?;
    let dataset = load_sr_dataset(data, &manifest)?;
    if dataset.train.is_empty() || dataset.val.is_empty() {
        return Err(Error::Data(format!(
            "dataset has {} train / {} val patches; both must be nonempty",
            dataset.train.len(),
            dataset.val.len()
        )));
    }
    let model_cfg = settings.model_config()?;
    let train_cfg = settings.train_config()?;
    eprintln!(
        "[sen4x] training {} on {} train / {} val patches, {} steps",
        model_cfg.mode.name(),
        dataset.train.len(),
        dataset.val.len(),
        train_cfg.total_steps()
    );
    let result = train_sr(&dataset, model_cfg, train_cfg)?;
    std::fs::create_dir_all(out)?;
    result.best.save(&out.join("best.ckpt"))?;
    result.last.save(&out.join("last.ckpt"))?;
    std::fs::write(out.join("train_log.ndjson"), result.log.to_ndjson())?;
    let summary = json!({
        "best_val_psnr_db": result.best_val_psnr,
        "steps": result.log.steps.len(),
        "final_loss": result.log.steps.last().map(|s| s.loss),
        "best_checkpoint": "best.ckpt",
        "last_checkpoint": "last.ckpt",
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    write_run_manifest(out, "train-sr", settings, timestamp)?;
    println!("best val psnr: {:.3} dB", result.best_val_psnr);
    Ok(())
}

pub fn cmd_infer(
    settings: &Settings,
    checkpoint: &Path,
    stack_path: &Path,
    masks_path: Option<&Path>,
    out: &Path,
    timestamp: &str,
    png: bool,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, _) = ck.into_model()?;
    let cfg = &model.cfg;
    let raw = read_f32(stack_path)?;
    let s = raw.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Data(format!(
            "stack raster must be (N,C,H,W), got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if n < cfg.n_views || c != cfg.in_channels || h % cfg.window != 0 || w % cfg.window != 0 {
        return Err(Error::Data(format!(
            "stack {n}x{c}x{h}x{w} does not fit checkpoint config (n_views {}, in_channels {}, window {})",
            cfg.n_views, cfg.in_channels, cfg.window
        )));
    }
    let mut stack = RevisitStack {
        tile_id: "infer".into(),
        views: raw,
        masks: vec![1; n * h * w],
    };
    if let Some(mp) = masks_path {
        let (ms, m) = read_u8(mp)?;
        if ms != vec![n, h, w] {
            return Err(Error::Data(format!(
                "mask raster dims {ms:?} do not match stack ({n},{h},{w})"
            )));
        }
        stack.masks = m;
        stack.check_coverage()?;
    }
    let stack = impute_masked(&stack)?;
    let views: Vec<Tensor<f32>> = (0..n)
        .map(|v| {
            Tensor::new(
                vec![c, h, w],
                stack.views.as_slice()[v * c * h * w..(v + 1) * c * h * w].to_vec(),
            )
        })
        .collect();
    let sr = clamp01(&infer(&model, &views)?);
    std::fs::create_dir_all(out)?;
    write_f32(&sr, &out.join("sr.s4xr"))?;
    if png {
        write_png_rgb(&sr, &out.join("sr.png"))?;
        let up = clamp01(&resize_bicubic(&views[0], h * cfg.scale, w * cfg.scale));
        write_png_rgb(&up, &out.join("bicubic.png"))?;
    }
    write_run_manifest(out, "infer", settings, timestamp)?;
    println!("wrote {}", out.join("sr.s4xr").display());
    Ok(())
}

pub fn cmd_eval_image(pred: &Path, reference: &Path, out: Option<&Path>) -> Result<()> {
    let p = read_f32(pred)?;
    let r = read_f32(reference)?;
    let report = EvalReport {
        psnr_db: Some(psnr(&p, &r, 1.0)?),
        ssim: Some(ssim(&p, &r, 1.0)?),
        ..Default::default()
    };
    let text = report.to_json();
    println!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval_image.json"), &text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-lc / eval-lc
// ---------------------------------------------------------------------------

fn lc_image_for(
    source: &str,
    sample: &SrSample,
    sr_model: Option<&sen4x_core::model::Model<f32>>,
    data: &Path,
    tile: &ManifestTile,
    scale: usize,
) -> Result<Tensor<f32>> {
    match source {
        "hr" => read_f32(&data.join(&tile.files["hr"])),
        "bicubic" => {
            let s = sample.views[0].shape();
            Ok(clamp01(&resize_bicubic(&sample.views[0], s[1] * scale, s[2] * scale)))
        }
        "sr" => {
            let model = sr_model.ok_or_else(|| {
                Error::Config("--sr-checkpoint is required with --source sr".into())
            })?;
            Ok(clamp01(&infer(model, &sample.views)?))
        }
        other => Err(Error::Config(format!(
            "unknown source '{other}' (hr|sr|bicubic)"
        ))),
    }
}

pub fn cmd_train_lc(
    settings: &Settings,
    data: &Path,
    source: &str,
    sr_checkpoint: Option<&Path>,
    out: &Path,
    timestamp: &str,
    png: bool,
) -> Result<()> {
    let manifest = load_manifest(data)?;
    let seg_cfg = settings.seg_config()?;
    let scale = settings.usize_("scale")?;
    let sr_model = match sr_checkpoint {
        Some(p) => Some(Checkpoint::load(p)?.into_model()?.0),
        None => None,
    };
    let mut dataset = LcDataset::default();
    let mut val_ids = Vec::new();
    for tile in &manifest.tiles {
        let split = tile.split;
        if split == Split::Test {
            continue;
        }
        let sample = load_sr_sample(data, tile)?;
        let image = lc_image_for(source, &sample, sr_model.as_ref(), data, tile, scale)?;
        let (lshape, labels) = read_u8(&data.join(&tile.files["labels"]))?;
        let s = image.shape();
        if lshape != vec![s[1], s[2]] {
            return Err(Error::Data(format!(
                "{}: labels {lshape:?} do not match image {:?}",
                tile.tile_id, s
            )));
        }
        let lc = LcSample {
            image,
            labels,
        };
        match split {
            Split::Train => dataset.train.push(lc),
            Split::Val => {
                val_ids.push(tile.tile_id.clone());
                dataset.val.push(lc);
            }
            Split::Test => {}
        }
    }
    eprintln!(
        "[sen4x] land-cover training on '{source}': {} train / {} val scenes",
        dataset.train.len(),
        dataset.val.len()
    );
    let result = train_lc(&dataset, seg_cfg)?;
    std::fs::create_dir_all(out)?;
    for (i, sample) in dataset.val.iter().enumerate() {
        let pred = result.net.predict(&sample.image)?;
        let s = sample.image.shape();
        write_u8(&[s[1], s[2]], &pred, &out.join(format!("pred_{}.s4xr", val_ids[i])))?;
        if png {
            write_png_labels(&pred, s[1], s[2], &out.join(format!("pred_{}.png", val_ids[i])))?;
        }
    }
    let report = EvalReport {
        acc: Some(result.val_scores.overall_acc),
        miou_macro: Some(result.val_scores.macro_miou),
        miou_micro: Some(result.val_scores.micro_miou),
        recall: Some(result.val_scores.per_class_recall.clone()),
        ..Default::default()
    };
    std::fs::write(out.join("scores.json"), report.to_json())?;
    std::fs::write(
        out.join("train_log.ndjson"),
        result
            .log
            .iter()
            .map(|e| serde_json::to_string(e).unwrap())
            .collect::<Vec<_>>()
            .join("\n"),
    )?;
    write_run_manifest(out, "train-lc", settings, timestamp)?;
    println!(
        "val: acc {:.3}, macro mIoU {:.3}, micro mIoU {:.3} (stopped at epoch {})",
        result.val_scores.overall_acc,
        result.val_scores.macro_miou,
        result.val_scores.micro_miou,
        result.stopped_epoch
    );
    Ok(())
}

pub fn cmd_eval_lc(settings: &Settings, data: &Path, pred_dir: &Path, out: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(data)?;
    let k = settings.usize_("n_classes")?;
    let mut cm = ConfusionMatrix::new(k);
    let mut matched = 0;
    for tile in manifest.tiles_in(Split::Val) {
        let pred_path = pred_dir.join(format!("pred_{}.s4xr", tile.tile_id));
        if !pred_path.exists() {
            continue;
        }
        let (ps, pred) = read_u8(&pred_path)?;
        let (ls, labels) = read_u8(&data.join(&tile.files["labels"]))?;
        if ps != ls {
            return Err(Error::Data(format!(
                "{}: prediction dims {ps:?} != label dims {ls:?}",
                tile.tile_id
            )));
        }
        cm.merge(&confusion(&pred, &labels, k)?);
        matched += 1;
    }
    if matched == 0 {
        return Err(Error::Data(format!(
            "no predictions matching val tiles found under {}",
            pred_dir.display()
        )));
    }
    let scores = seg_scores(&cm)?;
    let report = EvalReport {
        acc: Some(scores.overall_acc),
        miou_macro: Some(scores.macro_miou),
        miou_micro: Some(scores.micro_miou),
        recall: Some(scores.per_class_recall.clone()),
        ..Default::default()
    };
    let text = report.to_json();
    println!("{text}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval_lc.json"), &text)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// grad-check / params
// ---------------------------------------------------------------------------

pub fn cmd_grad_check(settings: &Settings, samples: usize, eps: f64, tol: f64) -> Result<()> {
    let cfg = settings.model_config()?;
    let report = grad_check(&cfg, samples, eps, settings.u64_("seed")?)?;
    let frac = report.fraction_below(tol);
    let worst = report
        .entries
        .iter()
        .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap());
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "samples": report.entries.len(),
            "max_rel_err": report.max_rel_err,
            "fraction_below_tol": frac,
            "tol": tol,
            "worst": worst.map(|w| json!({
                "param": w.name,
                "offset": w.offset,
                "analytic": w.analytic,
                "numeric": w.numeric,
                "rel_err": w.rel_err,
            })),
        }))?
    );
    if frac < 0.99 {
        return Err(Error::Numeric(format!(
            "gradient check failed: only {:.1}% of coordinates within {tol}",
            frac * 100.0
        )));
    }
    Ok(())
}

pub fn cmd_params(settings: &Settings) -> Result<()> {
    let cfg = settings.model_config()?;
    let c = count_parameters(&cfg);
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "mode": cfg.mode.name(),
            "total": c.total,
            "backbone": c.backbone,
            "fusion": c.fusion,
            "heads": c.heads,
        }))?
    );
    Ok(())
}
