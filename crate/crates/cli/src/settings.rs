//! Resolved run configuration: built-in defaults, overridden by an optional
//! plain-text config file (`key = value` lines, `#` comments), overridden in
//! turn by command-line flags. Unknown keys are rejected.

use sen4x_core::error::{Error, Result};
use sen4x_core::landcover::SegConfig;
use sen4x_core::model::{FusionMode, ModelConfig};
use sen4x_core::synthdata::DegradeSpec;
use sen4x_core::train::{LossKind, TrainConfig};
use std::collections::BTreeMap;
use std::path::Path;

/// Flat key/value settings covering every subsystem. Defaults follow the
/// reference training setup.
#[derive(Clone, Debug)]
pub struct Settings(pub BTreeMap<String, String>);

const DEFAULTS: &[(&str, &str)] = &[
    // model
    ("mode", "hybrid_early"),
    ("in_channels", "4"),
    ("out_channels", "4"),
    ("n_views", "8"),
    ("embed_dim", "258"),
    ("n_rstb", "6"),
    ("heads", "6"),
    ("window", "8"),
    ("rstb_depth", "6"),
    ("mlp_ratio", "2"),
    ("scale", "4"),
    ("residual_anchor", "true"),
    // sr training
    ("lr0", "1e-4"),
    ("lr_min", "0"),
    ("epochs", "100"),
    ("batches_per_epoch", "4"),
    ("batch_size", "8"),
    ("warmup_frac", "0.05"),
    ("loss", "l1"),
    ("seed", "0"),
    ("val_subset", "0"),
    // land cover
    ("n_classes", "7"),
    ("lc_batch_size", "16"),
    ("lc_max_epochs", "1000"),
    ("lc_patience", "25"),
    ("lc_lr0", "1e-4"),
    ("lc_lr_min", "1e-8"),
    ("lc_fpn_dim", "64"),
    ("lc_widths", "32,64,128,256"),
    // synthesis
    ("tiles", "8"),
    ("hr_size", "256"),
    ("candidates", "12"),
    ("shift_max", "0.5"),
    ("blur_sigma", "1.2"),
    ("noise_sigma", "0.01"),
    ("mask_fraction", "0.05"),
    ("gain_jitter", "0.02"),
    ("offset_jitter", "0.02"),
    // preparation
    ("k_revisits", "8"),
    ("patch", "64"),
    ("stride", "48"),
    ("block_size", "4"),
    ("fractions", "0.7,0.2,0.1"),
    // execution
    ("threads", "0"),
];

impl Settings {
    pub fn defaults() -> Self {
        Settings(
            DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    /// Load a config file over the defaults. Unknown keys are configuration
    /// errors naming the key.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Set one key, rejecting unknown names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.0.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply repeatable `--set key=value` flags.
    pub fn apply_sets(&mut self, sets: &[String]) -> Result<()> {
        for kv in sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got '{kv}'")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.0[key]
    }

    pub fn usize_(&self, key: &str) -> Result<usize> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{}' is not an integer", self.get(key))))
    }

    pub fn u64_(&self, key: &str) -> Result<u64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{}' is not an integer", self.get(key))))
    }

    pub fn f64_(&self, key: &str) -> Result<f64> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{}' is not a number", self.get(key))))
    }

    pub fn bool_(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("key '{key}': '{other}' is not a bool"))),
        }
    }

    pub fn usize_list(&self, key: &str, n: usize) -> Result<Vec<usize>> {
        let items: Vec<usize> = self
            .get(key)
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("key '{key}': bad integer list")))?;
        if items.len() != n {
            return Err(Error::Config(format!("key '{key}': expected {n} items")));
        }
        Ok(items)
    }

    pub fn f64_list(&self, key: &str, n: usize) -> Result<Vec<f64>> {
        let items: Vec<f64> = self
            .get(key)
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("key '{key}': bad number list")))?;
        if items.len() != n {
            return Err(Error::Config(format!("key '{key}': expected {n} items")));
        }
        Ok(items)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            mode: FusionMode::parse(self.get("mode"))?,
            in_channels: self.usize_("in_channels")?,
            out_channels: self.usize_("out_channels")?,
            n_views: self.usize_("n_views")?,
            embed_dim: self.usize_("embed_dim")?,
            n_rstb: self.usize_("n_rstb")?,
            heads: self.usize_("heads")?,
            window: self.usize_("window")?,
            rstb_depth: self.usize_("rstb_depth")?,
            mlp_ratio: self.usize_("mlp_ratio")?,
            scale: self.usize_("scale")?,
            residual_anchor: self.bool_("residual_anchor")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let subset = self.usize_("val_subset")?;
        let cfg = TrainConfig {
            lr0: self.f64_("lr0")?,
            lr_min: self.f64_("lr_min")?,
            epochs: self.usize_("epochs")?,
            batches_per_epoch: self.usize_("batches_per_epoch")?,
            batch_size: self.usize_("batch_size")?,
            warmup_frac: self.f64_("warmup_frac")?,
            loss: LossKind::parse(self.get("loss"))?,
            seed: self.u64_("seed")?,
            val_subset: if subset == 0 { None } else { Some(subset) },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seg_config(&self) -> Result<SegConfig> {
        let widths = self.usize_list("lc_widths", 4)?;
        let cfg = SegConfig {
            n_classes: self.usize_("n_classes")?,
            in_channels: self.usize_("in_channels")?,
            widths: [widths[0], widths[1], widths[2], widths[3]],
            fpn_dim: self.usize_("lc_fpn_dim")?,
            batch_size: self.usize_("lc_batch_size")?,
            max_epochs: self.usize_("lc_max_epochs")?,
            patience: self.usize_("lc_patience")?,
            lr0: self.f64_("lc_lr0")?,
            lr_min: self.f64_("lc_lr_min")?,
            seed: self.u64_("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn degrade_spec(&self) -> Result<DegradeSpec> {
        let spec = DegradeSpec {
            n_views: self.usize_("candidates")?,
            scale: self.usize_("scale")?,
            shift_max: self.f64_("shift_max")?,
            blur_sigma: self.f64_("blur_sigma")?,
            noise_sigma: self.f64_("noise_sigma")?,
            mask_fraction: self.f64_("mask_fraction")?,
            gain_jitter: self.f64_("gain_jitter")?,
            offset_jitter: self.f64_("offset_jitter")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Worker count: the --threads flag / `threads` key, then the
    /// SEN4X_THREADS environment variable, then all available cores.
    pub fn threads(&self) -> Result<usize> {
        let mut n = self.usize_("threads")?;
        if n == 0 {
            if let Ok(env) = std::env::var("SEN4X_THREADS") {
                n = env
                    .parse()
                    .map_err(|_| Error::Config(format!("SEN4X_THREADS: '{env}' is not an integer")))?;
            }
        }
        if n == 0 {
            n = std::thread::available_parallelism().map(|p| p.get()).unwrap_or(1);
        }
        Ok(n)
    }

    /// Canonical "key = value" rendering, also hashed into run manifests.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn config_hash(&self) -> u64 {
        sen4x_core::harness::fnv64(self.render().as_bytes())
    }
}
