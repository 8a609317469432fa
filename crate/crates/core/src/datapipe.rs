//! Data preparation: turns raw per-tile imagery and revisit metadata into
//! training-ready patch datasets.
//!
//! The stages mirror the acquisition pipeline: score and select the best
//! low-resolution revisits, percentile-clip and normalize reflectance,
//! impute masked pixels from the other views, radiometrically align the
//! high-resolution target to the best revisit via histogram matching,
//! resample to the target grid, purify labels to single-class pixels, cut
//! patches, and split tiles into train/val/test by geographic block.

use crate::error::{Error, Result};
use crate::image;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---------------------------------------------------------------------------
// calendar dates
// ---------------------------------------------------------------------------

/// Calendar date stored as days since 1970-01-01 (civil). Only differences
/// and ISO formatting are needed, so this stays tiny.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Date(pub i64);

impl Date {
    /// Days-from-civil algorithm (Howard Hinnant's construction).
    pub fn from_ymd(y: i64, m: u32, d: u32) -> Self {
        let y = if m <= 2 { y - 1 } else { y };
        let era = if y >= 0 { y } else { y - 399 } / 400;
        let yoe = (y - era * 400) as i64;
        let mp = ((m + 9) % 12) as i64;
        let doy = (153 * mp + 2) / 5 + d as i64 - 1;
        let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
        Date(era * 146_097 + doe - 719_468)
    }

    pub fn to_ymd(self) -> (i64, u32, u32) {
        let z = self.0 + 719_468;
        let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
        let doe = z - era * 146_097;
        let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
        let y = yoe + era * 400;
        let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
        let mp = (5 * doy + 2) / 153;
        let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
        let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
        (if m <= 2 { y + 1 } else { y }, m, d)
    }

    pub fn parse_iso(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("bad date '{s}', expected YYYY-MM-DD")));
        }
        let y: i64 = parts[0].parse().map_err(|_| Error::Config(format!("bad year in '{s}'")))?;
        let m: u32 = parts[1].parse().map_err(|_| Error::Config(format!("bad month in '{s}'")))?;
        let d: u32 = parts[2].parse().map_err(|_| Error::Config(format!("bad day in '{s}'")))?;
        if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
            return Err(Error::Config(format!("bad date '{s}'")));
        }
        Ok(Date::from_ymd(y, m, d))
    }

    pub fn iso(self) -> String {
        let (y, m, d) = self.to_ymd();
        format!("{y:04}-{m:02}-{d:02}")
    }

    pub fn days_between(self, other: Date) -> i64 {
        (self.0 - other.0).abs()
    }
}

// ---------------------------------------------------------------------------
// revisit scoring and selection
// ---------------------------------------------------------------------------

/// Acquisition window around the high-resolution target date.
pub const MAX_DATE_DISTANCE_DAYS: i64 = 730;

/// Reflectance above this marks a pixel as spectrally suspect (snow, cloud
/// tops, specular highlights).
pub const HIGH_REFLECTANCE_THRESHOLD: f32 = 0.8;

/// Metadata of one candidate low-resolution acquisition.
#[derive(Clone, Debug)]
pub struct RevisitCandidate {
    pub id: String,
    pub acq_date: Date,
    pub cloud_fraction: f64,
    pub invalid_fraction: f64,
    pub high_reflectance_fraction: f64,
    pub ref_date: Date,
}

/// The three selection criteria, each in [0,1], higher is better.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreVector {
    pub temporal: f64,
    pub completeness: f64,
    pub spectral: f64,
}

/// Weights combining the three criteria into one rank key. Temporal
/// proximity is listed first in the selection rules and dominates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub temporal: f64,
    pub completeness: f64,
    pub spectral: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            temporal: 0.5,
            completeness: 0.3,
            spectral: 0.2,
        }
    }
}

impl ScoreWeights {
    pub fn combine(&self, s: &ScoreVector) -> f64 {
        self.temporal * s.temporal + self.completeness * s.completeness + self.spectral * s.spectral
    }
}

pub fn score_revisit(c: &RevisitCandidate) -> Result<ScoreVector> {
    for (name, v) in [
        ("cloud_fraction", c.cloud_fraction),
        ("invalid_fraction", c.invalid_fraction),
        ("high_reflectance_fraction", c.high_reflectance_fraction),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("revisit {}: {name} = {v} outside [0,1]", c.id)));
        }
    }
    let dist = c.acq_date.days_between(c.ref_date);
    if dist > MAX_DATE_DISTANCE_DAYS {
        return Err(Error::Data(format!(
            "revisit {}: acquisition {} days from target, window is ±{MAX_DATE_DISTANCE_DAYS}",
            c.id, dist
        )));
    }
    Ok(ScoreVector {
        temporal: (1.0 - dist as f64 / MAX_DATE_DISTANCE_DAYS as f64).clamp(0.0, 1.0),
        completeness: 1.0 - c.cloud_fraction.max(c.invalid_fraction),
        spectral: 1.0 - c.high_reflectance_fraction,
    })
}

/// One selected revisit with its combined score.
#[derive(Clone, Debug)]
pub struct ScoredRevisit {
    pub id: String,
    pub score: f64,
    pub components: ScoreVector,
}

/// Pick the `k` most suitable revisits: descending weighted score, ties
/// broken by smaller date distance, then id. Candidates outside the date
/// window are rejected up front. The order is total, so permuting the input
/// never changes the result.
pub fn select_revisits(
    tile_id: &str,
    candidates: &[RevisitCandidate],
    k: usize,
    weights: &ScoreWeights,
) -> Result<Vec<ScoredRevisit>> {
    let mut scored: Vec<(f64, i64, String, ScoreVector)> = Vec::new();
    for c in candidates {
        match score_revisit(c) {
            Ok(s) => scored.push((
                weights.combine(&s),
                c.acq_date.days_between(c.ref_date),
                c.id.clone(),
                s,
            )),
            Err(_) => continue, // outside window or malformed: not a candidate
        }
    }
    if scored.len() < k {
        return Err(Error::InsufficientCandidates {
            tile: tile_id.to_string(),
            needed: k,
            have: scored.len(),
        });
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(score, _, id, components)| ScoredRevisit {
            id,
            score,
            components,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// revisit stacks
// ---------------------------------------------------------------------------

/// N co-registered low-resolution views of one tile plus per-view validity
/// masks (true = valid).
#[derive(Clone, Debug)]
pub struct RevisitStack {
    pub tile_id: String,
    /// (N, C, H, W) reflectance in [0,1]
    pub views: Tensor<f32>,
    /// (N, H, W), nonzero = valid
    pub masks: Vec<u8>,
}

impl RevisitStack {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.views.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn fully_valid(tile_id: &str, views: Tensor<f32>) -> Self {
        let s = views.shape();
        let masks = vec![1u8; s[0] * s[2] * s[3]];
        RevisitStack {
            tile_id: tile_id.to_string(),
            views,
            masks,
        }
    }

    /// Every location must be valid in at least one view.
    pub fn check_coverage(&self) -> Result<()> {
        let (n, _, h, w) = self.dims();
        for y in 0..h {
            for x in 0..w {
                if !(0..n).any(|v| self.masks[(v * h + y) * w + x] != 0) {
                    return Err(Error::AllViewsInvalid { row: y, col: x });
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// clip + normalize
// ---------------------------------------------------------------------------

/// Percentile by linear interpolation between order statistics:
/// rank = p/100 * (m-1) over the sorted values.
pub fn percentile(sorted: &[f32], p: f64) -> f32 {
    assert!(!sorted.is_empty());
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (m - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(m - 1);
    let frac = (rank - lo as f64) as f32;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Clip each band to its [lo_pct, hi_pct] percentiles over valid pixels
/// (pooled across views) and rescale to [0,1]. A constant band maps to
/// zeros. Returns the per-band (p_lo, p_hi) actually used.
pub fn clip_normalize(stack: &mut RevisitStack, lo_pct: f64, hi_pct: f64) -> Result<Vec<(f32, f32)>> {
    let (n, c, h, w) = stack.dims();
    let hw = h * w;
    let mut bounds = Vec::with_capacity(c);
    let mut new_views = stack.views.as_slice().to_vec();
    for ci in 0..c {
        let mut vals: Vec<f32> = Vec::new();
        for v in 0..n {
            let plane = &stack.views.as_slice()[(v * c + ci) * hw..(v * c + ci + 1) * hw];
            let mask = &stack.masks[v * hw..(v + 1) * hw];
            for (p, &mk) in plane.iter().zip(mask) {
                if mk != 0 {
                    if !p.is_finite() {
                        return Err(Error::Data(format!("non-finite reflectance in band {ci}")));
                    }
                    vals.push(*p);
                }
            }
        }
        if vals.is_empty() {
            return Err(Error::Data(format!("band {ci}: no valid pixels to normalize")));
        }
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p_lo = percentile(&vals, lo_pct);
        let p_hi = percentile(&vals, hi_pct);
        bounds.push((p_lo, p_hi));
        let range = p_hi - p_lo;
        for v in 0..n {
            let plane = &mut new_views[(v * c + ci) * hw..(v * c + ci + 1) * hw];
            for px in plane.iter_mut() {
                if range <= 0.0 {
                    *px = 0.0;
                } else {
                    *px = ((px.clamp(p_lo, p_hi)) - p_lo) / range;
                }
            }
        }
    }
    stack.views = Tensor::new(stack.views.shape().to_vec(), new_views);
    Ok(bounds)
}

// ---------------------------------------------------------------------------
// imputation
// ---------------------------------------------------------------------------

/// Fill masked pixels with the per-band mean of the valid views at the same
/// location; afterwards every mask is fully valid. Valid pixels are never
/// touched.
pub fn impute_masked(stack: &RevisitStack) -> Result<RevisitStack> {
    let (n, c, h, w) = stack.dims();
    let hw = h * w;
    let xs = stack.views.as_slice();
    let mut out = xs.to_vec();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let valid: Vec<usize> = (0..n).filter(|&v| stack.masks[v * hw + p] != 0).collect();
            if valid.len() == n {
                continue;
            }
            if valid.is_empty() {
                return Err(Error::AllViewsInvalid { row: y, col: x });
            }
            for ci in 0..c {
                let mut acc = 0.0f64;
                for &v in &valid {
                    acc += xs[(v * c + ci) * hw + p] as f64;
                }
                let mean = (acc / valid.len() as f64) as f32;
                for v in 0..n {
                    if stack.masks[v * hw + p] == 0 {
                        out[(v * c + ci) * hw + p] = mean;
                    }
                }
            }
        }
    }
    Ok(RevisitStack {
        tile_id: stack.tile_id.clone(),
        views: Tensor::new(stack.views.shape().to_vec(), out),
        masks: vec![1u8; n * hw],
    })
}

// ---------------------------------------------------------------------------
// histogram matching
// ---------------------------------------------------------------------------

/// Empirical CDF support: unique sorted values with cumulative fractions.
fn cdf_table(vals: &[f32]) -> (Vec<f32>, Vec<f64>) {
    let mut sorted: Vec<f32> = vals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len() as f64;
    let mut uniq = Vec::new();
    let mut cum = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i];
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == v {
            j += 1;
        }
        uniq.push(v);
        cum.push(j as f64 / m);
        i = j;
    }
    (uniq, cum)
}

/// Monotone quantile mapping that gives `source` the empirical distribution
/// of `reference`. Matching an image to itself is the identity, and matching
/// twice to the same reference changes nothing more — both hold exactly
/// because the mapping interpolates the full empirical CDFs.
pub fn histogram_match(source: &[f32], reference: &[f32]) -> Result<Vec<f32>> {
    if source.is_empty() || reference.is_empty() {
        return Err(Error::Data("histogram_match: empty input".into()));
    }
    let (src_vals, src_cum) = cdf_table(source);
    let (ref_vals, ref_cum) = cdf_table(reference);
    let lookup_cum = |v: f32| -> f64 {
        // v is always present in the source table
        let idx = src_vals.partition_point(|&x| x < v);
        src_cum[idx]
    };
    let inverse_ref = |u: f64| -> f32 {
        if u <= ref_cum[0] {
            return ref_vals[0];
        }
        let idx = ref_cum.partition_point(|&c| c < u);
        if idx >= ref_cum.len() {
            return *ref_vals.last().unwrap();
        }
        let (c0, c1) = (ref_cum[idx - 1], ref_cum[idx]);
        let (v0, v1) = (ref_vals[idx - 1], ref_vals[idx]);
        if c1 == c0 {
            v1
        } else {
            let t = (u - c0) / (c1 - c0);
            (v0 as f64 + t * (v1 as f64 - v0 as f64)) as f32
        }
    };
    Ok(source.iter().map(|&v| inverse_ref(lookup_cum(v))).collect())
}

/// Per-band histogram matching of a (C,H,W) image to a reference image.
pub fn histogram_match_image(source: &Tensor<f32>, reference: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = source.shape();
    let r = reference.shape();
    if s.len() != 3 || r.len() != 3 || s[0] != r[0] {
        return Err(Error::ShapeMismatch {
            expected: format!("{r:?} with matching bands"),
            got: format!("{s:?}"),
        });
    }
    let (c, hw_s, hw_r) = (s[0], s[1] * s[2], r[1] * r[2]);
    let mut out = Vec::with_capacity(c * hw_s);
    for ci in 0..c {
        let band = histogram_match(
            &source.as_slice()[ci * hw_s..(ci + 1) * hw_s],
            &reference.as_slice()[ci * hw_r..(ci + 1) * hw_r],
        )?;
        out.extend_from_slice(&band);
    }
    Ok(Tensor::new(s.to_vec(), out))
}

// ---------------------------------------------------------------------------
// resampling wrappers
// ---------------------------------------------------------------------------

/// Bilinear downsampling to the target grid (pixel-center aligned).
pub fn downsample_bilinear(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let s = img.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Config("zero output dims".into()));
    }
    if out_h > s[1] || out_w > s[2] {
        return Err(Error::Config(format!(
            "downsample target {out_h}x{out_w} exceeds input {}x{}",
            s[1], s[2]
        )));
    }
    Ok(image::resize_bilinear(img, out_h, out_w))
}

// ---------------------------------------------------------------------------
// patch extraction
// ---------------------------------------------------------------------------

/// Sliding-window patch origins with stride, clamping the final window to the
/// boundary so coverage is total. Returned per-axis origins are combined by
/// the caller; low-resolution origins times the scale give the aligned
/// high-resolution origins.
pub fn patch_origins_1d(extent: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if extent < size {
        return Err(Error::Data(format!("extent {extent} smaller than patch size {size}")));
    }
    assert!(stride > 0);
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        if pos + size >= extent {
            let last = extent - size;
            if out.last() != Some(&last) {
                out.push(last);
            }
            break;
        }
        out.push(pos);
        pos += stride;
    }
    Ok(out)
}

/// All (row, col) patch origins for an H x W tile.
pub fn extract_patches(h: usize, w: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    let rows = patch_origins_1d(h, size, stride)?;
    let cols = patch_origins_1d(w, size, stride)?;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push((r, c));
        }
    }
    Ok(out)
}

/// Copy one (C, size, size) window out of a (C,H,W) image.
pub fn crop(img: &Tensor<f32>, row: usize, col: usize, size_h: usize, size_w: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(row + size_h <= h && col + size_w <= w);
    let xs = img.as_slice();
    let mut out = Vec::with_capacity(c * size_h * size_w);
    for ci in 0..c {
        for y in 0..size_h {
            let start = (ci * h + row + y) * w + col;
            out.extend_from_slice(&xs[start..start + size_w]);
        }
    }
    Tensor::new(vec![c, size_h, size_w], out)
}

// ---------------------------------------------------------------------------
// label purification
// ---------------------------------------------------------------------------

pub const N_CLASSES: usize = 7;

/// Downsample a fine label raster by `factor`, keeping a coarse pixel's class
/// only when its whole footprint is uniformly that class; anything mixed
/// (or touching padding) becomes 255. Fine dims not divisible by the factor
/// are padded with ignore.
pub fn downsample_labels(labels: &[u8], h: usize, w: usize, factor: usize) -> (Vec<u8>, usize, usize) {
    assert!(factor >= 1);
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let mut out = vec![255u8; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut class: Option<u8> = None;
            let mut uniform = true;
            'scan: for iy in 0..factor {
                for ix in 0..factor {
                    let (fy, fx) = (oy * factor + iy, ox * factor + ix);
                    let v = if fy < h && fx < w { labels[fy * w + fx] } else { 255 };
                    match class {
                        None => class = Some(v),
                        Some(c) if c == v => {}
                        _ => {
                            uniform = false;
                            break 'scan;
                        }
                    }
                }
            }
            if uniform {
                if let Some(c) = class {
                    if c != 255 {
                        out[oy * ow + ox] = c;
                    }
                }
            }
        }
    }
    (out, oh, ow)
}

// ---------------------------------------------------------------------------
// dataset split + manifest
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RevisitEntry {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestTile {
    pub tile_id: String,
    pub geo_block: u32,
    pub split: Split,
    pub revisits: Vec<RevisitEntry>,
    pub files: BTreeMap<String, String>,
}

/// Persistent description of a prepared dataset.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub created: String,
    pub tiles: Vec<ManifestTile>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialization")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn tiles_in(&self, split: Split) -> Vec<&ManifestTile> {
        self.tiles.iter().filter(|t| t.split == split).collect()
    }

    /// Every referenced file must exist under `root`.
    pub fn validate_files(&self, root: &std::path::Path) -> Result<()> {
        for t in &self.tiles {
            for (role, rel) in &t.files {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(Error::Data(format!(
                        "manifest references missing file ({role} of {}): {}",
                        t.tile_id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Assign whole geographic blocks to train/val/test. The test region is the
/// contiguous run of highest block ids; validation blocks are drawn seeded
/// from the remainder. Fractions are matched within one block.
pub fn split_dataset(
    tiles: &mut [ManifestTile],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<()> {
    let mut blocks: Vec<u32> = tiles.iter().map(|t| t.geo_block).collect();
    blocks.sort_unstable();
    blocks.dedup();
    let b = blocks.len();
    if b < 3 {
        return Err(Error::Data(format!("need at least 3 geo blocks, have {b}")));
    }
    let (f_train, f_val, f_test) = fractions;
    let sum = f_train + f_val + f_test;
    if !(0.999..=1.001).contains(&sum) {
        return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    let n_test = ((f_test * b as f64).round() as usize).clamp(1, b - 2);
    let n_val = ((f_val * b as f64).round() as usize).clamp(1, b - n_test - 1);

    let test_blocks: Vec<u32> = blocks[b - n_test..].to_vec();
    let mut rest: Vec<u32> = blocks[..b - n_test].to_vec();
    let mut rng = crate::rng::Rng::derive(seed, "geo-split", 0);
    rng.shuffle(&mut rest);
    let val_blocks: Vec<u32> = rest[..n_val].to_vec();

    for t in tiles.iter_mut() {
        t.split = if test_blocks.contains(&t.geo_block) {
            Split::Test
        } else if val_blocks.contains(&t.geo_block) {
            Split::Val
        } else {
            Split::Train
        };
    }
    Ok(())
}
