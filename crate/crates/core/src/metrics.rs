//! Image-quality metrics (PSNR, SSIM) and segmentation metrics (confusion
//! matrix, overall accuracy, macro/micro mIoU, per-class recall).
//!
//! Conventions that matter for comparability:
//! - PSNR peak defaults to 1.0 (all imagery is normalized to [0,1]); an
//!   identical pair returns `f64::INFINITY`, serialized as the string "inf".
//! - SSIM uses the reference defaults: 11x11 Gaussian window, sigma 1.5,
//!   K1 = 0.01, K2 = 0.03, and windows are only evaluated where they fit.
//! - Macro mIoU averages over all K classes; a class absent from both
//!   prediction and ground truth contributes IoU 0. This is what makes the
//!   single-class-predictor identities (acc = p, macro = p/K,
//!   micro = p/(2-p)) hold exactly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared error in f64, over all elements.
pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let n = a.numel();
    if n == 0 {
        return Err(Error::Data("empty input".into()));
    }
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in decibels; +infinity for identical inputs.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable valid-mode Gaussian filter used by `ssim`.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[y * w + x + i];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean local structural similarity. Multi-band inputs are averaged over
/// bands. Errors when the image is smaller than the 11x11 window.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.shape()),
            got: format!("{:?}", b.shape()),
        });
    }
    let (c, h, w) = match a.shape() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Data(format!("ssim expects (H,W) or (C,H,W), got {s:?}")));
        }
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Data(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let k = ssim_kernel();
    let mut total = 0.0;
    for ci in 0..c {
        let pa: Vec<f64> = a.as_slice()[ci * h * w..(ci + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b.as_slice()[ci * h * w..(ci + 1) * h * w]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let m_aa = filter_valid(&aa, h, w, &k);
        let m_bb = filter_valid(&bb, h, w, &k);
        let m_ab = filter_valid(&ab, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// K x K pixel counts: rows = ground truth, cols = prediction, plus a count
/// of ignored pixels (label 255).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
            ignored: 0,
        }
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Element-wise merge; associative and order-independent, so per-tile
    /// matrices can be reduced in any grouping.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
    }
}

pub const IGNORE_LABEL: u8 = 255;

/// Accumulate prediction/ground-truth pairs into a confusion matrix.
/// Ground-truth 255 pixels count only toward `ignored`.
pub fn confusion(pred: &[u8], gt: &[u8], k: usize) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", gt.len()),
            got: format!("{}", pred.len()),
        });
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &g) in pred.iter().zip(gt) {
        if g == IGNORE_LABEL {
            cm.ignored += 1;
            continue;
        }
        if g as usize >= k {
            return Err(Error::Data(format!("ground-truth class {g} out of range (K={k})")));
        }
        if p as usize >= k {
            return Err(Error::Data(format!("predicted class {p} out of range (K={k})")));
        }
        cm.counts[g as usize * k + p as usize] += 1;
    }
    Ok(cm)
}

/// Derived segmentation scores. `per_class_recall` is None for classes with
/// no ground-truth pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    pub overall_acc: f64,
    pub macro_miou: f64,
    pub micro_miou: f64,
    pub per_class_iou: Vec<f64>,
    pub per_class_recall: Vec<Option<f64>>,
}

pub fn seg_scores(cm: &ConfusionMatrix) -> Result<SegScores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix has zero valid pixels".into()));
    }
    let k = cm.k;
    let mut trace = 0u64;
    let mut iou = Vec::with_capacity(k);
    let mut recall = Vec::with_capacity(k);
    let mut union_sum = 0u64;
    for c in 0..k {
        let tp = cm.at(c, c);
        trace += tp;
        let row: u64 = (0..k).map(|j| cm.at(c, j)).sum();
        let col: u64 = (0..k).map(|i| cm.at(i, c)).sum();
        let union = row + col - tp; // TP + FP + FN
        union_sum += union;
        iou.push(if union == 0 { 0.0 } else { tp as f64 / union as f64 });
        recall.push(if row == 0 { None } else { Some(tp as f64 / row as f64) });
    }
    Ok(SegScores {
        overall_acc: trace as f64 / total as f64,
        macro_miou: iou.iter().sum::<f64>() / k as f64,
        micro_miou: trace as f64 / union_sum as f64,
        per_class_iou: iou,
        per_class_recall: recall,
    })
}

/// Evaluation report emitted by the CLI as UTF-8 JSON. PSNR of +infinity is
/// serialized as the string "inf".
#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    pub acc: Option<f64>,
    pub miou_macro: Option<f64>,
    pub miou_micro: Option<f64>,
    pub recall: Option<Vec<Option<f64>>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        use serde_json::{json, Map, Value};
        let num = |v: f64| -> Value {
            if v.is_infinite() {
                Value::String("inf".into())
            } else {
                json!(v)
            }
        };
        let opt = |o: &Option<f64>| o.map(num).unwrap_or(Value::Null);
        let mut m = Map::new();
        m.insert("psnr_db".into(), opt(&self.psnr_db));
        m.insert("ssim".into(), opt(&self.ssim));
        m.insert("acc".into(), opt(&self.acc));
        m.insert("miou_macro".into(), opt(&self.miou_macro));
        m.insert("miou_micro".into(), opt(&self.miou_micro));
        m.insert(
            "recall".into(),
            match &self.recall {
                None => Value::Null,
                Some(r) => Value::Array(r.iter().map(|v| v.map(|x| json!(x)).unwrap_or(Value::Null)).collect()),
            },
        );
        serde_json::to_string_pretty(&Value::Object(m)).expect("report serialization")
    }
}
