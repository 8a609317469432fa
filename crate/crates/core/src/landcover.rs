//! Land-cover segmentation harness used to measure the downstream utility of
//! super-resolved imagery.
//!
//! A small strided conv encoder emits features at 1/4, 1/8, 1/16 and 1/32 of
//! the input, a top-down pyramid (lateral 1x1 convs + upsample-add) merges
//! them, and a decoder with skip connections restores full resolution. The
//! loss is cross entropy over pixels with a valid ground-truth label;
//! training stops early when validation loss plateaus.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::metrics::{confusion, seg_scores, ConfusionMatrix, SegScores, IGNORE_LABEL};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegConfig {
    pub n_classes: usize,
    pub in_channels: usize,
    /// Encoder widths at scales 1/4, 1/8, 1/16, 1/32.
    pub widths: [usize; 4],
    pub fpn_dim: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            n_classes: 7,
            in_channels: 4,
            widths: [32, 64, 128, 256],
            fpn_dim: 64,
            batch_size: 16,
            max_epochs: 1000,
            patience: 25,
            lr0: 1e-4,
            lr_min: 1e-8,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 254 {
            return Err(Error::Config("n_classes must be in 1..=254".into()));
        }
        if self.lr0 <= self.lr_min {
            return Err(Error::Config("need lr0 > lr_min".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Encoder feature map sizes for an input of h x w.
    pub fn scale_dims(h: usize, w: usize) -> [(usize, usize); 4] {
        [
            (h / 4, w / 4),
            (h / 8, w / 8),
            (h / 16, w / 16),
            (h / 32, w / 32),
        ]
    }

    fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let conv = |name: &str, c_out: usize, c_in: usize, k: usize, v: &mut Vec<(String, Vec<usize>)>| {
            v.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
            v.push((format!("{name}.b"), vec![c_out]));
        };
        let stem = self.widths[0] / 2;
        conv("seg.stem0", stem, self.in_channels, 3, &mut v); // /2
        conv("seg.stem1", self.widths[0], stem, 3, &mut v); // /4
        let mut c_in = self.widths[0];
        for (i, &wd) in self.widths.iter().enumerate() {
            if i > 0 {
                conv(&format!("seg.enc{i}.down"), wd, c_in, 3, &mut v);
            }
            conv(&format!("seg.enc{i}.res.conv1"), wd, wd, 3, &mut v);
            conv(&format!("seg.enc{i}.res.conv2"), wd, wd, 3, &mut v);
            c_in = wd;
        }
        for (i, &wd) in self.widths.iter().enumerate() {
            conv(&format!("seg.lat{i}"), self.fpn_dim, wd, 1, &mut v);
        }
        conv("seg.fpn.fuse", self.fpn_dim, self.fpn_dim, 3, &mut v);
        conv("seg.dec0", self.fpn_dim, self.fpn_dim + stem, 3, &mut v); // at /2 with stem skip
        conv("seg.dec1", self.fpn_dim / 2, self.fpn_dim + self.in_channels, 3, &mut v); // at /1 with input skip
        conv("seg.head", self.n_classes, self.fpn_dim / 2, 3, &mut v);
        v
    }
}

/// The segmentation network: config plus named parameters.
#[derive(Clone)]
pub struct SegNet {
    pub cfg: SegConfig,
    params: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

pub struct SegBound {
    ids: Vec<VarId>,
}

impl SegNet {
    pub fn init(cfg: SegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, "seg-init", 0);
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for (name, shape) in cfg.param_specs() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| rng.trunc_normal(0.02) as f32)
            };
            index.insert(name.clone(), params.len());
            params.push((name, t));
        }
        Ok(SegNet { cfg, params, index })
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<f32>) -> SegBound {
        SegBound {
            ids: self.params.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect(),
        }
    }

    fn p(&self, bound: &SegBound, name: &str) -> VarId {
        bound.ids[self.index[name]]
    }

    fn conv(&self, tape: &mut Tape<f32>, bound: &SegBound, name: &str, x: VarId, pad: usize, stride: usize) -> VarId {
        let w = self.p(bound, &format!("{name}.w"));
        let b = self.p(bound, &format!("{name}.b"));
        tape.conv2d(x, w, b, pad, stride)
    }

    /// Forward pass producing unnormalized class logits (B, K, H, W).
    pub fn forward(&self, tape: &mut Tape<f32>, image: &Tensor<f32>) -> Result<VarId> {
        let s = image.shape().to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, {}, H, W)", self.cfg.in_channels),
                got: format!("{s:?}"),
            });
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("input {h}x{w} not divisible by 32")));
        }
        let input = tape.leaf(image.clone(), false);
        let bound = self.bind(tape);
        let logits = self.forward_bound(tape, &bound, input, b, h, w);
        Ok(logits)
    }

    /// Forward with externally bound parameters (used by the training loop).
    pub fn forward_bound(
        &self,
        tape: &mut Tape<f32>,
        bound: &SegBound,
        input: VarId,
        _b: usize,
        _h: usize,
        _w: usize,
    ) -> VarId {
        // encoder
        let s0 = self.conv(tape, bound, "seg.stem0", input, 1, 2); // /2
        let s0 = tape.gelu(s0);
        let s1 = self.conv(tape, bound, "seg.stem1", s0, 1, 2); // /4
        let s1 = tape.gelu(s1);
        let mut feats: Vec<VarId> = Vec::with_capacity(4);
        let mut x = s1;
        for i in 0..4 {
            if i > 0 {
                x = self.conv(tape, bound, &format!("seg.enc{i}.down"), x, 1, 2);
                x = tape.gelu(x);
            }
            let c1 = self.conv(tape, bound, &format!("seg.enc{i}.res.conv1"), x, 1, 1);
            let a = tape.gelu(c1);
            let c2 = self.conv(tape, bound, &format!("seg.enc{i}.res.conv2"), a, 1, 1);
            x = tape.add(x, c2);
            feats.push(x);
        }

        // top-down pyramid merge
        let mut p = self.conv(tape, bound, "seg.lat3", feats[3], 0, 1);
        for i in (0..3).rev() {
            let lat = self.conv(tape, bound, &format!("seg.lat{i}"), feats[i], 0, 1);
            let up = tape.upsample_nearest2x(p);
            p = tape.add(lat, up);
        }
        let fused = self.conv(tape, bound, "seg.fpn.fuse", p, 1, 1); // at /4
        let fused = tape.gelu(fused);

        // decoder with skips back to full resolution
        let u0 = tape.upsample_nearest2x(fused); // /2
        let cat0 = tape.concat_channels(u0, s0);
        let d0 = self.conv(tape, bound, "seg.dec0", cat0, 1, 1);
        let d0 = tape.gelu(d0);
        let u1 = tape.upsample_nearest2x(d0); // /1
        let cat1 = tape.concat_channels(u1, input);
        let d1 = self.conv(tape, bound, "seg.dec1", cat1, 1, 1);
        let d1 = tape.gelu(d1);
        self.conv(tape, bound, "seg.head", d1, 1, 1)
    }

    /// Per-pixel argmax prediction for one (C,H,W) image.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<Vec<u8>> {
        let s = image.shape();
        let batched = image.reshaped(vec![1, s[0], s[1], s[2]]);
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, &batched)?;
        Ok(argmax_labels(tape.value(logits)))
    }
}

/// Per-pixel argmax over the class dim of (B,K,H,W) logits.
pub fn argmax_labels(logits: &Tensor<f32>) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let xs = logits.as_slice();
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = xs[bi * k * hw + p];
            for c in 1..k {
                let v = xs[(bi * k + c) * hw + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out[bi * hw + p] = best as u8;
        }
    }
    out
}

/// Masked cross entropy as a plain number (the tape op's non-differentiable
/// twin, used for validation).
pub fn masked_ce_value(logits: &Tensor<f32>, labels: &[u8]) -> Result<f64> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    if labels.len() != b * hw {
        return Err(Error::ShapeMismatch {
            expected: format!("{}", b * hw),
            got: format!("{}", labels.len()),
        });
    }
    let xs = logits.as_slice();
    let mut total = 0.0;
    let mut n_valid = 0usize;
    for bi in 0..b {
        for p in 0..hw {
            let lab = labels[bi * hw + p];
            if lab == IGNORE_LABEL {
                continue;
            }
            if lab as usize >= k {
                return Err(Error::Data(format!("label {lab} out of range (K={k})")));
            }
            n_valid += 1;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..k {
                mx = mx.max(xs[(bi * k + c) * hw + p] as f64);
            }
            let mut denom = 0.0;
            for c in 0..k {
                denom += ((xs[(bi * k + c) * hw + p] as f64) - mx).exp();
            }
            total += denom.ln() - (xs[(bi * k + lab as usize) * hw + p] as f64 - mx);
        }
    }
    if n_valid == 0 {
        return Err(Error::Data("all pixels ignored".into()));
    }
    Ok(total / n_valid as f64)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// One labeled scene.
#[derive(Clone)]
pub struct LcSample {
    /// (C, H, W)
    pub image: Tensor<f32>,
    /// H*W labels, 255 = ignore
    pub labels: Vec<u8>,
}

#[derive(Clone, Default)]
pub struct LcDataset {
    pub train: Vec<LcSample>,
    pub val: Vec<LcSample>,
}

/// Early-stopping bookkeeping: training stops once the validation loss has
/// not improved for `patience` consecutive epochs.
#[derive(Clone, Copy, Debug)]
pub struct EarlyStopState {
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_since_best: usize,
}

impl EarlyStopState {
    pub fn new() -> Self {
        EarlyStopState {
            best_val: f64::INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
        }
    }

    /// Record epoch `epoch`'s validation loss; returns true when training
    /// should stop after this epoch.
    pub fn update(&mut self, epoch: usize, val: f64, patience: usize) -> bool {
        if val < self.best_val {
            self.best_val = val;
            self.best_epoch = epoch;
            self.epochs_since_best = 0;
        } else {
            self.epochs_since_best += 1;
        }
        self.epochs_since_best >= patience
    }
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LcEpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct LcResult {
    pub net: SegNet,
    pub val_scores: SegScores,
    pub val_confusion: ConfusionMatrix,
    pub log: Vec<LcEpochLog>,
    pub stopped_epoch: usize,
    pub early_stop: EarlyStopState,
}

/// Cosine annealing over epochs, no warmup.
pub fn lc_lr_at(epoch: usize, cfg: &SegConfig) -> f64 {
    let progress = epoch as f64 / cfg.max_epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Train the harness with Adam + cosine annealing and early stopping; the
/// returned network is the best-validation snapshot and the scores are its
/// validation metrics.
pub fn train_lc(data: &LcDataset, cfg: SegConfig) -> Result<LcResult> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data("empty train or val split".into()));
    }
    let mut net = SegNet::init(cfg.clone(), cfg.seed)?;
    let mut adam = crate::train::Adam {
        m: net.params().iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        v: net.params().iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        t: 0,
    };
    let mut stop = EarlyStopState::new();
    let mut best_params: Option<Vec<(String, Tensor<f32>)>> = None;
    let mut log = Vec::new();
    let mut stopped_epoch = cfg.max_epochs;

    for epoch in 0..cfg.max_epochs {
        let lr = lc_lr_at(epoch, &cfg);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = Rng::derive(cfg.seed, "lc-epoch", epoch as u64);
        rng.shuffle(&mut order);
        let mut train_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&LcSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (images, labels) = assemble_lc_batch(&samples);
            let s = images.shape().to_vec();
            let mut tape = Tape::new();
            let input = tape.leaf(images, false);
            let bound = net.bind(&mut tape);
            let logits = net.forward_bound(&mut tape, &bound, input, s[0], s[2], s[3]);
            let loss_id = tape.masked_ce(logits, Arc::new(labels), cfg.n_classes);
            let loss = tape.value(loss_id).as_slice()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss in epoch {epoch}")));
            }
            let grads = tape.backward(loss_id);
            let grad_slices: Vec<Option<&[f32]>> =
                bound.ids.iter().map(|&id| grads.get(id)).collect();
            adam_step_seg(&mut adam, &mut net, &grad_slices, lr);
            train_loss += loss;
            n_batches += 1;
        }
        train_loss /= n_batches as f64;

        let val_loss = eval_val_loss(&net, &data.val)?;
        log.push(LcEpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        let improved = val_loss < stop.best_val;
        let should_stop = stop.update(epoch, val_loss, cfg.patience);
        if improved {
            best_params = Some(net.params().to_vec());
        }
        if should_stop {
            stopped_epoch = epoch + 1;
            break;
        }
    }

    if let Some(p) = best_params {
        net.params = p;
    }
    let mut cm = ConfusionMatrix::new(cfg.n_classes);
    for s in &data.val {
        let pred = net.predict(&s.image)?;
        cm.merge(&confusion(&pred, &s.labels, cfg.n_classes)?);
    }
    let val_scores = seg_scores(&cm)?;
    Ok(LcResult {
        net,
        val_scores,
        val_confusion: cm,
        log,
        stopped_epoch,
        early_stop: stop,
    })
}

fn adam_step_seg(adam: &mut crate::train::Adam, net: &mut SegNet, grads: &[Option<&[f32]>], lr: f64) {
    use crate::train::{ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
    adam.t += 1;
    let b1 = ADAM_BETA1 as f32;
    let b2 = ADAM_BETA2 as f32;
    let bc1 = 1.0 - ADAM_BETA1.powi(adam.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(adam.t as i32);
    for (i, (_, p)) in net.params_mut().iter_mut().enumerate() {
        let g = match grads[i] {
            Some(g) => g,
            None => continue,
        };
        let m = &mut adam.m[i];
        let v = &mut adam.v[i];
        let data = p.make_mut();
        for j in 0..data.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] as f64 / bc1;
            let vhat = v[j] as f64 / bc2;
            data[j] -= (lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
    }
}

fn eval_val_loss(net: &SegNet, val: &[LcSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in val {
        let sh = s.image.shape();
        let batched = s.image.reshaped(vec![1, sh[0], sh[1], sh[2]]);
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, &batched)?;
        total += masked_ce_value(tape.value(logits), &s.labels)?;
    }
    Ok(total / val.len() as f64)
}

fn assemble_lc_batch(samples: &[&LcSample]) -> (Tensor<f32>, Vec<u8>) {
    let s = samples[0].image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let b = samples.len();
    let mut data = Vec::with_capacity(b * c * h * w);
    let mut labels = Vec::with_capacity(b * h * w);
    for smp in samples {
        data.extend_from_slice(smp.image.as_slice());
        labels.extend_from_slice(&smp.labels);
    }
    (Tensor::new(vec![b, c, h, w], data), labels)
}
