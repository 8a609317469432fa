//! The super-resolution network family: a shared 3x3 shallow feature
//! extractor, recursive pairwise multi-view fusion, a deep trunk of residual
//! windowed-attention blocks, and a cascaded pixel-shuffle upsampling head.
//!
//! Four wirings of the same components:
//! - `HybridEarly` (default): shallow features per view -> fusion tree ->
//!   deep trunk -> head. Multi-image fusion precedes single-image
//!   enhancement.
//! - `HybridLate`: shallow -> deep per view (shared weights) -> fusion ->
//!   head. Much more compute for the same parameter count.
//! - `SisrOnly`: the best view alone through shallow -> deep -> head.
//! - `MisrOnly`: fusion as in early, but the deep trunk is replaced by two
//!   low-capacity residual conv blocks.
//!
//! The network predicts a residual over a bilinearly upsampled anchor view
//! (config flag, default on), so a freshly initialized model already outputs
//! something close to the input.

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    HybridEarly,
    HybridLate,
    SisrOnly,
    MisrOnly,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "hybrid_early" => FusionMode::HybridEarly,
            "hybrid_late" => FusionMode::HybridLate,
            "sisr_only" => FusionMode::SisrOnly,
            "misr_only" => FusionMode::MisrOnly,
            _ => {
                return Err(Error::Config(format!(
                    "unknown mode '{s}' (hybrid_early|hybrid_late|sisr_only|misr_only)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::HybridEarly => "hybrid_early",
            FusionMode::HybridLate => "hybrid_late",
            FusionMode::SisrOnly => "sisr_only",
            FusionMode::MisrOnly => "misr_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: FusionMode,
    pub in_channels: usize,
    pub out_channels: usize,
    pub n_views: usize,
    pub embed_dim: usize,
    pub n_rstb: usize,
    pub heads: usize,
    pub window: usize,
    pub rstb_depth: usize,
    pub mlp_ratio: usize,
    pub scale: usize,
    pub residual_anchor: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: FusionMode::HybridEarly,
            in_channels: 4,
            out_channels: 4,
            n_views: 8,
            embed_dim: 258,
            n_rstb: 6,
            heads: 6,
            window: 8,
            rstb_depth: 6,
            mlp_ratio: 2,
            scale: 4,
            residual_anchor: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.scale.is_power_of_two() {
            return Err(Error::Config(format!("scale {} must be a power of 2", self.scale)));
        }
        if self.window < 2 {
            return Err(Error::Config("window must be >= 2".into()));
        }
        if self.n_views == 0 {
            return Err(Error::Config("n_views must be >= 1".into()));
        }
        if self.n_rstb == 0 || self.rstb_depth == 0 {
            return Err(Error::Config("n_rstb and rstb_depth must be >= 1".into()));
        }
        Ok(())
    }

    fn uses_fusion(&self) -> bool {
        !matches!(self.mode, FusionMode::SisrOnly)
    }

    fn uses_deep_trunk(&self) -> bool {
        !matches!(self.mode, FusionMode::MisrOnly)
    }

    fn upsample_stages(&self) -> usize {
        (self.scale as f64).log2() as usize
    }

    /// Names and shapes of every trainable tensor, in construction order.
    /// The set depends on the mode: fusion weights exist only when views are
    /// fused, the attention trunk only when deep extraction runs.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let e = self.embed_dim;
        let mut v: Vec<(String, Vec<usize>)> = Vec::new();
        let conv = |name: &str, c_out: usize, c_in: usize, k: usize, v: &mut Vec<(String, Vec<usize>)>| {
            v.push((format!("{name}.w"), vec![c_out, c_in, k, k]));
            v.push((format!("{name}.b"), vec![c_out]));
        };
        conv("sfe", e, self.in_channels, 3, &mut v);
        if self.uses_fusion() {
            conv("fuse.update1", e, e, 3, &mut v);
            conv("fuse.update2", e, e, 3, &mut v);
            conv("fuse.merge", e, 2 * e, 3, &mut v);
        }
        if self.uses_deep_trunk() {
            let table = (2 * self.window - 1) * (2 * self.window - 1);
            for r in 0..self.n_rstb {
                for l in 0..self.rstb_depth {
                    let p = format!("rstb{r}.layer{l}");
                    v.push((format!("{p}.ln1.g"), vec![e]));
                    v.push((format!("{p}.ln1.b"), vec![e]));
                    v.push((format!("{p}.qkv.w"), vec![e, 3 * e]));
                    v.push((format!("{p}.qkv.b"), vec![3 * e]));
                    v.push((format!("{p}.bias_table"), vec![table, self.heads]));
                    v.push((format!("{p}.proj.w"), vec![e, e]));
                    v.push((format!("{p}.proj.b"), vec![e]));
                    v.push((format!("{p}.ln2.g"), vec![e]));
                    v.push((format!("{p}.ln2.b"), vec![e]));
                    v.push((format!("{p}.mlp1.w"), vec![e, self.mlp_ratio * e]));
                    v.push((format!("{p}.mlp1.b"), vec![self.mlp_ratio * e]));
                    v.push((format!("{p}.mlp2.w"), vec![self.mlp_ratio * e, e]));
                    v.push((format!("{p}.mlp2.b"), vec![e]));
                }
                conv(&format!("rstb{r}.conv"), e, e, 3, &mut v);
            }
        } else {
            for r in 0..2 {
                conv(&format!("misr_trunk.res{r}.conv1"), e, e, 3, &mut v);
                conv(&format!("misr_trunk.res{r}.conv2"), e, e, 3, &mut v);
            }
        }
        for s in 0..self.upsample_stages() {
            conv(&format!("head.up{s}"), 4 * e, e, 3, &mut v);
        }
        conv("head.out", self.out_channels, e, 3, &mut v);
        v
    }
}

/// Per-component parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub backbone: usize,
    pub fusion: usize,
    pub heads: usize,
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamCount {
    let mut c = ParamCount {
        total: 0,
        backbone: 0,
        fusion: 0,
        heads: 0,
    };
    for (name, shape) in cfg.param_specs() {
        let n: usize = shape.iter().product();
        c.total += n;
        if name.starts_with("rstb") || name.starts_with("misr_trunk") {
            c.backbone += n;
        } else if name.starts_with("fuse") {
            c.fusion += n;
        } else {
            c.heads += n;
        }
    }
    c
}

/// Append a fourth input slice holding the mean of the three existing ones —
/// how pretrained RGB weights are widened to RGB+NIR inputs.
pub fn expand_input_channels<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let s = w.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::ShapeMismatch {
            expected: "(C_out, 3, k, k)".into(),
            got: format!("{s:?}"),
        });
    }
    let (c_out, k) = (s[0], s[2] * s[3]);
    let xs = w.as_slice();
    let third = T::from_f64(1.0 / 3.0);
    let mut out = Vec::with_capacity(c_out * 4 * k);
    for co in 0..c_out {
        let base = co * 3 * k;
        out.extend_from_slice(&xs[base..base + 3 * k]);
        for i in 0..k {
            out.push((xs[base + i] + xs[base + k + i] + xs[base + 2 * k + i]) * third);
        }
    }
    Ok(Tensor::new(vec![c_out, 4, s[2], s[3]], out))
}

/// Balanced pairwise reduction over `items`: each level merges (1,2), (3,4),
/// ... until one element remains. Odd levels duplicate the trailing element.
/// The merge closure makes the tree easy to instrument in tests.
pub fn fuse_tree<F: FnMut(VarId, VarId) -> VarId>(items: Vec<VarId>, mut merge: F) -> VarId {
    assert!(!items.is_empty(), "fuse_tree on empty list");
    let mut level = items;
    while level.len() > 1 {
        if level.len() % 2 == 1 {
            let last = *level.last().unwrap();
            level.push(last);
        }
        let mut next = Vec::with_capacity(level.len() / 2);
        for pair in level.chunks_exact(2) {
            next.push(merge(pair[0], pair[1]));
        }
        level = next;
    }
    level[0]
}

/// A model: config plus named parameter tensors (construction order).
#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

/// Parameter leaves bound onto a tape for one forward pass.
pub struct Bound {
    ids: Vec<VarId>,
}

impl Bound {
    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }
}

const LN_EPS: f64 = 1e-5;
const INIT_SIGMA: f64 = 0.02;

impl<T: Scalar> Model<T> {
    /// Fresh parameters: truncated normal (sigma 0.02) for weight matrices
    /// and conv kernels, ones for layer-norm gains, zeros for every bias and
    /// for the relative-position tables.
    ///
    /// The fusion merge conv starts anchor-dominant: its center taps select
    /// the higher-ranked branch, so an untrained fusion tree passes the best
    /// view through instead of averaging misaligned views into blur, and
    /// training adds the other views as corrections.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, "model-init", 0);
        let mut params = Vec::new();
        let mut index = HashMap::new();
        for (name, shape) in cfg.param_specs() {
            let t = if name.ends_with(".b") || name.ends_with(".bias_table") || name.ends_with(".ln1.b") || name.ends_with(".ln2.b") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".ln1.g") || name.ends_with(".ln2.g") {
                Tensor::full(&shape, T::ONE)
            } else if name == "fuse.merge.w" {
                // merged = conv(cat(a',b')) + 0.5(a'+b'); center taps
                // +0.5 on a' / -0.5 on b' make the block the identity on a'
                let mut t = Tensor::from_fn(&shape, |_| T::from_f64(rng.trunc_normal(INIT_SIGMA)));
                let e = shape[0];
                let k = shape[2];
                let center = (k / 2) * k + k / 2;
                let data = t.make_mut();
                for c in 0..e {
                    data[((c * 2 * e + c) * k * k) + center] += T::from_f64(0.5);
                    data[((c * 2 * e + e + c) * k * k) + center] += T::from_f64(-0.5);
                }
                t
            } else {
                Tensor::from_fn(&shape, |_| T::from_f64(rng.trunc_normal(INIT_SIGMA)))
            };
            index.insert(name.clone(), params.len());
            params.push((name, t));
        }
        Ok(Model { cfg, params, index })
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        &self.params[self.index[name]].1
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self.params[self.index[name]].1
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Push every parameter as a trainable leaf. Gradients are read back
    /// through the returned ids, parallel to `params()`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let ids = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), true))
            .collect();
        Bound { ids }
    }

    fn p(&self, bound: &Bound, name: &str) -> VarId {
        bound.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not in this config"))]
    }

    /// Validate an input stack against the config.
    fn check_views(&self, views: &[Tensor<T>]) -> Result<(usize, usize, usize)> {
        if views.is_empty() {
            return Err(Error::Data("empty view list".into()));
        }
        let expected_views = match self.cfg.mode {
            FusionMode::SisrOnly => 1,
            _ => self.cfg.n_views,
        };
        if views.len() < expected_views {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected_views} views"),
                got: format!("{}", views.len()),
            });
        }
        let s = views[0].shape().to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("(B, {}, H, W)", self.cfg.in_channels),
                got: format!("{s:?}"),
            });
        }
        for v in views {
            if v.shape() != s.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{s:?}"),
                    got: format!("{:?}", v.shape()),
                });
            }
        }
        if s[2] % self.cfg.window != 0 || s[3] % self.cfg.window != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} not divisible by window {}",
                s[2], s[3], self.cfg.window
            )));
        }
        Ok((s[0], s[2], s[3]))
    }

    /// Full forward pass. `views` are ordered best revisit first; the first
    /// view is the anchor whose bilinear upsampling seeds the output.
    /// Returns the super-resolved (B, C_out, scale*H, scale*W) node.
    pub fn forward(&self, tape: &mut Tape<T>, views: &[Tensor<T>]) -> Result<VarId> {
        let bound = self.bind(tape);
        self.forward_bound(tape, &bound, views)
    }

    /// Forward with externally bound parameters (training reuses the bound
    /// ids to read gradients).
    pub fn forward_bound(&self, tape: &mut Tape<T>, bound: &Bound, views: &[Tensor<T>]) -> Result<VarId> {
        let (b, h, w) = self.check_views(views)?;
        let n_used = match self.cfg.mode {
            FusionMode::SisrOnly => 1,
            _ => self.cfg.n_views,
        };

        let view_ids: Vec<VarId> = views[..n_used]
            .iter()
            .map(|v| tape.leaf(v.clone(), false))
            .collect();

        // shared shallow feature extractor on every used view
        let shallow: Vec<VarId> = view_ids
            .iter()
            .map(|&v| self.conv(tape, bound, "sfe", v, 1, 1))
            .collect();

        let trunk_in = match self.cfg.mode {
            FusionMode::HybridEarly | FusionMode::MisrOnly => {
                let fused = fuse_tree(shallow, |x, y| self.fuse_pair(tape, bound, x, y));
                fused
            }
            FusionMode::SisrOnly => shallow[0],
            FusionMode::HybridLate => {
                let deep: Vec<VarId> = shallow
                    .into_iter()
                    .map(|f| self.deep_extract(tape, bound, f, b, h, w))
                    .collect();
                fuse_tree(deep, |x, y| self.fuse_pair(tape, bound, x, y))
            }
        };

        let feat = match self.cfg.mode {
            FusionMode::HybridEarly | FusionMode::SisrOnly => {
                self.deep_extract(tape, bound, trunk_in, b, h, w)
            }
            FusionMode::MisrOnly => {
                // two residual conv blocks stand in for the deep trunk
                let mut x = trunk_in;
                for r in 0..2 {
                    let c1 = self.conv(tape, bound, &format!("misr_trunk.res{r}.conv1"), x, 1, 1);
                    let a = tape.gelu(c1);
                    let c2 = self.conv(tape, bound, &format!("misr_trunk.res{r}.conv2"), a, 1, 1);
                    x = tape.add(x, c2);
                }
                x
            }
            FusionMode::HybridLate => trunk_in,
        };

        // upsampling head: cascaded x2 pixel-shuffle stages
        let mut x = feat;
        for s in 0..self.cfg.upsample_stages() {
            let c = self.conv(tape, bound, &format!("head.up{s}"), x, 1, 1);
            let ps = tape.pixel_shuffle(c, 2);
            x = tape.gelu(ps);
        }
        let mut out = self.conv(tape, bound, "head.out", x, 1, 1);

        if self.cfg.residual_anchor {
            let anchor = upsample_bilinear_t(&views[0], self.cfg.scale);
            out = tape.add_const(out, &anchor);
        }
        Ok(out)
    }

    fn conv(&self, tape: &mut Tape<T>, bound: &Bound, name: &str, x: VarId, pad: usize, stride: usize) -> VarId {
        let w = self.p(bound, &format!("{name}.w"));
        let b = self.p(bound, &format!("{name}.b"));
        tape.conv2d(x, w, b, pad, stride)
    }

    /// One pairwise fusion: a shared two-layer conv residual block updates
    /// both inputs, then one conv merges the concatenation, with the mean of
    /// the updated maps as the skip. With all-zero weights this degrades to
    /// plain view averaging.
    pub fn fuse_pair(&self, tape: &mut Tape<T>, bound: &Bound, a: VarId, b: VarId) -> VarId {
        let update = |tape: &mut Tape<T>, x: VarId| -> VarId {
            let c1 = self.conv(tape, bound, "fuse.update1", x, 1, 1);
            let g = tape.gelu(c1);
            let c2 = self.conv(tape, bound, "fuse.update2", g, 1, 1);
            tape.add(x, c2)
        };
        let au = update(tape, a);
        let bu = update(tape, b);
        let cat = tape.concat_channels(au, bu);
        let merged = self.conv(tape, bound, "fuse.merge", cat, 1, 1);
        let skip = tape.add_scaled(au, bu, T::from_f64(0.5), T::from_f64(0.5));
        tape.add(merged, skip)
    }

    /// The residual windowed-attention trunk.
    pub fn deep_extract(&self, tape: &mut Tape<T>, bound: &Bound, f: VarId, b: usize, h: usize, w: usize) -> VarId {
        assert!(h % self.cfg.window == 0 && w % self.cfg.window == 0);
        let mut x = f;
        for r in 0..self.cfg.n_rstb {
            let block_in = x;
            for l in 0..self.cfg.rstb_depth {
                // alternate layers use shifted windows when the map is
                // bigger than one window
                let shifted = l % 2 == 1 && (h > self.cfg.window || w > self.cfg.window);
                x = self.swin_layer(tape, bound, x, &format!("rstb{r}.layer{l}"), shifted, b, h, w);
            }
            let c = self.conv(tape, bound, &format!("rstb{r}.conv"), x, 1, 1);
            x = tape.add(block_in, c);
        }
        x
    }

    fn swin_layer(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: VarId,
        prefix: &str,
        shifted: bool,
        b: usize,
        h: usize,
        w: usize,
    ) -> VarId {
        let e = self.cfg.embed_dim;
        let win = self.cfg.window;
        let heads = self.cfg.heads;
        let t_tokens = win * win;
        let shift = if shifted { win / 2 } else { 0 };
        let n_w = (h / win) * (w / win);

        // attention branch (pre-norm)
        let tokens = tape.chw_to_tokens(x);
        let n1 = tape.layer_norm(
            tokens,
            self.p(bound, &format!("{prefix}.ln1.g")),
            self.p(bound, &format!("{prefix}.ln1.b")),
            T::from_f64(LN_EPS),
        );
        let c1 = tape.tokens_to_chw(n1, b, e, h, w);
        let rolled = if shift > 0 {
            tape.roll2d(c1, -(shift as isize), -(shift as isize))
        } else {
            c1
        };
        let winp = tape.window_partition(rolled, win);
        let qkv = tape.linear(
            winp,
            self.p(bound, &format!("{prefix}.qkv.w")),
            self.p(bound, &format!("{prefix}.qkv.b")),
        );
        let q = tape.slice_cols(qkv, 0, e);
        let k = tape.slice_cols(qkv, e, e);
        let v = tape.slice_cols(qkv, 2 * e, e);
        let qh = tape.heads_split(q, heads, t_tokens);
        let kh = tape.heads_split(k, heads, t_tokens);
        let vh = tape.heads_split(v, heads, t_tokens);
        let qs = tape.scale(qh, T::from_f64(1.0 / ((e / heads) as f64).sqrt()));
        let mut scores = tape.bmm(qs, kh, true);
        scores = tape.rel_bias_add(
            scores,
            self.p(bound, &format!("{prefix}.bias_table")),
            rel_index_map(win),
            heads,
        );
        if shift > 0 {
            scores = tape.window_mask_add(scores, shift_mask::<T>(h, w, win, shift), heads, n_w);
        }
        let p = tape.softmax_last(scores);
        let ctx = tape.bmm(p, vh, false);
        let merged = tape.heads_merge(ctx, heads, t_tokens);
        let proj = tape.linear(
            merged,
            self.p(bound, &format!("{prefix}.proj.w")),
            self.p(bound, &format!("{prefix}.proj.b")),
        );
        let back = tape.window_merge(proj, win, b, e, h, w);
        let unrolled = if shift > 0 {
            tape.roll2d(back, shift as isize, shift as isize)
        } else {
            back
        };
        let x = tape.add(x, unrolled);

        // MLP branch (pre-norm)
        let t2 = tape.chw_to_tokens(x);
        let n2 = tape.layer_norm(
            t2,
            self.p(bound, &format!("{prefix}.ln2.g")),
            self.p(bound, &format!("{prefix}.ln2.b")),
            T::from_f64(LN_EPS),
        );
        let h1 = tape.linear(
            n2,
            self.p(bound, &format!("{prefix}.mlp1.w")),
            self.p(bound, &format!("{prefix}.mlp1.b")),
        );
        let h1 = tape.gelu(h1);
        let h2 = tape.linear(
            h1,
            self.p(bound, &format!("{prefix}.mlp2.w")),
            self.p(bound, &format!("{prefix}.mlp2.b")),
        );
        let m = tape.tokens_to_chw(h2, b, e, h, w);
        tape.add(x, m)
    }
}

/// Channel-to-space rearrangement on a plain tensor (the forward op the
/// upsampling head uses), and its exact inverse.
pub fn pixel_shuffle_tensor<T: Scalar>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4);
    let (b, c_in, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert_eq!(c_in % (s * s), 0);
    let c_out = c_in / (s * s);
    Tensor::new(
        vec![b, c_out, h * s, w * s],
        crate::autodiff::pixel_shuffle_apply(x.as_slice(), b, c_out, h, w, s, false),
    )
}

pub fn pixel_unshuffle_tensor<T: Scalar>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let sh = x.shape();
    assert_eq!(sh.len(), 4);
    let (b, c, oh, ow) = (sh[0], sh[1], sh[2], sh[3]);
    assert!(oh % s == 0 && ow % s == 0);
    let (h, w) = (oh / s, ow / s);
    Tensor::new(
        vec![b, c * s * s, h, w],
        crate::autodiff::pixel_shuffle_apply(x.as_slice(), b, c, h, w, s, true),
    )
}

/// Constant-fold bilinear upsampling of the anchor (no gradient flows here).
pub fn upsample_bilinear_t<T: Scalar>(x: &Tensor<T>, scale: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let f32_img: Tensor<f32> = Tensor::new(
        vec![b * c, h, w],
        x.iter().map(|v| v.to_f64() as f32).collect(),
    );
    let up = crate::image::resize_bilinear(&f32_img, h * scale, w * scale);
    Tensor::new(
        vec![b, c, h * scale, w * scale],
        up.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Relative-position index map for one window: entry (i,j) is the table row
/// for the offset between tokens i and j.
pub fn rel_index_map(win: usize) -> Arc<Vec<u32>> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / win, i % win);
        for j in 0..t {
            let (yj, xj) = (j / win, j % win);
            let dy = yi as i64 - yj as i64 + win as i64 - 1;
            let dx = xi as i64 - xj as i64 + win as i64 - 1;
            idx.push((dy * span as i64 + dx) as u32);
        }
    }
    Arc::new(idx)
}

/// Additive attention mask for shifted windows: token pairs that came from
/// different spatial regions get -inf, which zeroes their softmax weight
/// exactly.
pub fn shift_mask<T: Scalar>(h: usize, w: usize, win: usize, shift: usize) -> Arc<Vec<T>> {
    // region labeling on the rolled image, standard three-slice construction
    let mut region = vec![0i32; h * w];
    let mut cnt = 0;
    let h_slices = [0..h - win, h - win..h - shift, h - shift..h];
    let w_slices = [0..w - win, w - win..w - shift, w - shift..w];
    for hs in &h_slices {
        for ws in &w_slices {
            for y in hs.clone() {
                for x in ws.clone() {
                    region[y * w + x] = cnt;
                }
            }
            cnt += 1;
        }
    }
    let (nwy, nwx) = (h / win, w / win);
    let t = win * win;
    let ninf = T::from_f64(f64::NEG_INFINITY);
    let mut mask = vec![T::ZERO; nwy * nwx * t * t];
    for wy in 0..nwy {
        for wx in 0..nwx {
            let widx = wy * nwx + wx;
            for i in 0..t {
                let ri = region[(wy * win + i / win) * w + wx * win + i % win];
                for j in 0..t {
                    let rj = region[(wy * win + j / win) * w + wx * win + j % win];
                    if ri != rj {
                        mask[(widx * t + i) * t + j] = ninf;
                    }
                }
            }
        }
    }
    Arc::new(mask)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: [u8; 4] = *b"S4XC";
const CKPT_VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    params: Vec<CkptParam>,
    step: u64,
    seed: u64,
    has_optimizer: bool,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
}

/// Adam moment estimates, parallel to the name-sorted parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

/// A trained model plus training progress. Parameter payloads are stored as
/// little-endian f32, ordered by parameter name.
#[derive(Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// name -> tensor, every entry matching the config's spec
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64, seed: u64, optimizer: Option<OptimizerState>) -> Self {
        let mut params: Vec<(String, Tensor<f32>)> = model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        // optimizer state arrives ordered like model.params(); reorder both
        // by name together
        let mut order: Vec<usize> = (0..params.len()).collect();
        order.sort_by(|&a, &b| params[a].0.cmp(&params[b].0));
        let params_sorted: Vec<(String, Tensor<f32>)> =
            order.iter().map(|&i| params[i].clone()).collect();
        let optimizer = optimizer.map(|st| OptimizerState {
            m: order.iter().map(|&i| st.m[i].clone()).collect(),
            v: order.iter().map(|&i| st.v[i].clone()).collect(),
        });
        params = params_sorted;
        Checkpoint {
            config: model.cfg.clone(),
            step,
            seed,
            params,
            optimizer,
        }
    }

    /// Rebuild the model (and, when present, the optimizer state reordered
    /// back to construction order).
    pub fn into_model(&self) -> Result<(Model<f32>, Option<OptimizerState>)> {
        let mut model = Model::<f32>::init(self.config.clone(), self.seed)?;
        let by_name: HashMap<&str, usize> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.as_str(), i))
            .collect();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, tensor) in model.params_mut() {
            let &i = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint missing parameter {name}")))?;
            let src = &self.params[i].1;
            if src.shape() != tensor.shape() {
                return Err(Error::Data(format!(
                    "checkpoint parameter {name}: shape {:?} does not match config {:?}",
                    src.shape(),
                    tensor.shape()
                )));
            }
            *tensor = src.clone();
            if let Some(opt) = &self.optimizer {
                m.push(opt.m[i].clone());
                v.push(opt.v[i].clone());
            }
        }
        let opt = self.optimizer.as_ref().map(|_| OptimizerState { m, v });
        Ok((model, opt))
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = CkptHeader {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(n, t)| CkptParam {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            step: self.step,
            seed: self.seed,
            has_optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header");
        let mut buf = Vec::new();
        buf.extend_from_slice(&CKPT_MAGIC);
        buf.push(CKPT_VERSION);
        buf.extend_from_slice(&[0u8; 3]);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(opt) = &self.optimizer {
            for series in [&opt.m, &opt.v] {
                for vec in series {
                    for v in vec {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || bytes[0..4] != CKPT_MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        if bytes[4] != CKPT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + json_len {
            return Err(Error::Data("truncated checkpoint header".into()));
        }
        let header: CkptHeader = serde_json::from_slice(&bytes[12..12 + json_len])?;
        let mut off = 12 + json_len;
        let read_f32s = |off: &mut usize, n: usize| -> Result<Vec<f32>> {
            let need = n * 4;
            if bytes.len() < *off + need {
                return Err(Error::Data("truncated checkpoint payload".into()));
            }
            let out = bytes[*off..*off + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *off += need;
            Ok(out)
        };
        let mut params = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            params.push((p.name.clone(), Tensor::new(p.shape.clone(), read_f32s(&mut off, n)?)));
        }
        let optimizer = if header.has_optimizer {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for p in &header.params {
                m.push(read_f32s(&mut off, p.shape.iter().product())?);
            }
            for p in &header.params {
                v.push(read_f32s(&mut off, p.shape.iter().product())?);
            }
            Some(OptimizerState { m, v })
        } else {
            None
        };
        if off != bytes.len() {
            return Err(Error::Data("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            seed: header.seed,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Checkpoint::decode(&bytes)
    }
}
