//! `sen4x` — the command-line pipeline around the core library.
//!
//! Exit codes: 0 success, 2 configuration error (bad flags, unknown config
//! keys), 3 data error (missing or corrupt files, shape mismatches),
//! 4 numeric failure (non-finite loss, failed gradient check).

mod commands;
mod settings;

use clap::{Args, Parser, Subcommand};
use settings::Settings;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sen4x", version, about = "Hybrid multi-image super-resolution pipeline for 4-band satellite tiles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Plain-text config file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable): --set embed_dim=32
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Random seed (overrides the config key)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores; SEN4X_THREADS as fallback)
    #[arg(long)]
    threads: Option<usize>,
    /// Timestamp recorded in manifests (defaults to now; pin for
    /// byte-identical reruns)
    #[arg(long)]
    timestamp: Option<String>,
}

impl Common {
    fn resolve(&self) -> sen4x_core::error::Result<Settings> {
        let mut s = Settings::defaults();
        if let Some(path) = &self.config {
            s.load_file(path)?;
        }
        s.apply_sets(&self.sets)?;
        if let Some(seed) = self.seed {
            s.set("seed", &seed.to_string())?;
        }
        if let Some(t) = self.threads {
            s.set("threads", &t.to_string())?;
        }
        Ok(s)
    }

    fn timestamp(&self) -> String {
        self.timestamp.clone().unwrap_or_else(commands::now_iso)
    }
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// hybrid_early | hybrid_late | sisr_only | misr_only
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    n_rstb: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    rstb_depth: Option<usize>,
    #[arg(long)]
    n_views: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, s: &mut Settings) -> sen4x_core::error::Result<()> {
        if let Some(v) = &self.mode {
            s.set("mode", v)?;
        }
        for (key, v) in [
            ("embed_dim", self.embed_dim),
            ("n_rstb", self.n_rstb),
            ("heads", self.heads),
            ("window", self.window),
            ("rstb_depth", self.rstb_depth),
            ("n_views", self.n_views),
            ("scale", self.scale),
        ] {
            if let Some(v) = v {
                s.set(key, &v.to_string())?;
            }
        }
        Ok(())
    }
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// l1 | l2
    #[arg(long)]
    loss: Option<String>,
}

impl TrainFlags {
    fn apply(&self, s: &mut Settings) -> sen4x_core::error::Result<()> {
        if let Some(v) = self.lr0 {
            s.set("lr0", &v.to_string())?;
        }
        if let Some(v) = self.epochs {
            s.set("epochs", &v.to_string())?;
        }
        if let Some(v) = self.batches_per_epoch {
            s.set("batches_per_epoch", &v.to_string())?;
        }
        if let Some(v) = self.batch_size {
            s.set("batch_size", &v.to_string())?;
        }
        if let Some(v) = &self.loss {
            s.set("loss", v)?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic raw tiles (scenes, labels, candidate revisits)
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of tiles
        #[arg(long)]
        tiles: Option<usize>,
        /// High-resolution tile side in pixels
        #[arg(long)]
        hr_size: Option<usize>,
        /// Candidate revisits generated per tile
        #[arg(long)]
        candidates: Option<usize>,
        /// Also write 8-bit PNG previews
        #[arg(long)]
        png: bool,
    },
    /// Build a training-ready patch dataset from raw tiles
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Raw tile directory (output of synth, or equivalent layout)
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Revisits to select per tile
        #[arg(long)]
        k_revisits: Option<usize>,
        /// Low-resolution patch size
        #[arg(long)]
        patch: Option<usize>,
        /// Patch stride
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train the super-resolution network on a prepared dataset
    TrainSr {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Prepared dataset directory (with manifest.json)
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve one revisit stack with a trained checkpoint
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input stack raster (N,C,H,W)
        #[arg(long)]
        stack: PathBuf,
        /// Optional validity masks (N,H,W), nonzero = valid
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: bool,
    },
    /// PSNR/SSIM of a prediction against a reference raster
    EvalImage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the land-cover harness on hr | sr | bicubic imagery
    TrainLc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Image source: hr, sr, or bicubic
        #[arg(long)]
        source: String,
        /// Trained SR checkpoint (required for --source sr)
        #[arg(long)]
        sr_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: bool,
    },
    /// Score saved land-cover predictions against a prepared dataset
    EvalLc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory holding pred_<tile>.s4xr rasters
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify analytic gradients against finite differences
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
    },
    /// Report trainable parameter counts for a model config
    Params {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
    },
}

fn run() -> sen4x_core::error::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth {
            common,
            out,
            tiles,
            hr_size,
            candidates,
            png,
        } => {
            let mut s = common.resolve()?;
            if let Some(v) = tiles {
                s.set("tiles", &v.to_string())?;
            }
            if let Some(v) = hr_size {
                s.set("hr_size", &v.to_string())?;
            }
            if let Some(v) = candidates {
                s.set("candidates", &v.to_string())?;
            }
            commands::print_resolved("synth", &s);
            commands::cmd_synth(&s, &out, &common.timestamp(), png)
        }
        Command::Prepare {
            common,
            raw,
            out,
            k_revisits,
            patch,
            stride,
        } => {
            let mut s = common.resolve()?;
            if let Some(v) = k_revisits {
                s.set("k_revisits", &v.to_string())?;
            }
            if let Some(v) = patch {
                s.set("patch", &v.to_string())?;
            }
            if let Some(v) = stride {
                s.set("stride", &v.to_string())?;
            }
            commands::print_resolved("prepare", &s);
            commands::cmd_prepare(&s, &raw, &out, &common.timestamp())
        }
        Command::TrainSr {
            common,
            model,
            train,
            data,
            out,
        } => {
            let mut s = common.resolve()?;
            model.apply(&mut s)?;
            train.apply(&mut s)?;
            commands::print_resolved("train-sr", &s);
            commands::cmd_train_sr(&s, &data, &out, &common.timestamp())
        }
        Command::Infer {
            common,
            checkpoint,
            stack,
            masks,
            out,
            png,
        } => {
            let s = common.resolve()?;
            commands::print_resolved("infer", &s);
            commands::cmd_infer(&s, &checkpoint, &stack, masks.as_deref(), &out, &common.timestamp(), png)
        }
        Command::EvalImage {
            common,
            pred,
            reference,
            out,
        } => {
            let s = common.resolve()?;
            commands::print_resolved("eval-image", &s);
            commands::cmd_eval_image(&pred, &reference, out.as_deref())
        }
        Command::TrainLc {
            common,
            data,
            source,
            sr_checkpoint,
            out,
            png,
        } => {
            let s = common.resolve()?;
            commands::print_resolved("train-lc", &s);
            commands::cmd_train_lc(&s, &data, &source, sr_checkpoint.as_deref(), &out, &common.timestamp(), png)
        }
        Command::EvalLc {
            common,
            data,
            pred,
            out,
        } => {
            let s = common.resolve()?;
            commands::print_resolved("eval-lc", &s);
            commands::cmd_eval_lc(&s, &data, &pred, out.as_deref())
        }
        Command::GradCheck {
            common,
            model,
            samples,
            eps,
            tol,
        } => {
            let mut s = common.resolve()?;
            // default to the small verification config unless overridden
            for (k, v) in [
                ("embed_dim", "16"),
                ("n_rstb", "1"),
                ("heads", "2"),
                ("window", "4"),
                ("rstb_depth", "2"),
                ("n_views", "4"),
            ] {
                s.set(k, v)?;
            }
            model.apply(&mut s)?;
            commands::print_resolved("grad-check", &s);
            commands::cmd_grad_check(&s, samples, eps, tol)
        }
        Command::Params { common, model } => {
            let mut s = common.resolve()?;
            model.apply(&mut s)?;
            commands::print_resolved("params", &s);
            commands::cmd_params(&s)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
